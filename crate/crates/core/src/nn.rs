//! Parameterized layers and the per-pass forward context.

use crate::error::Result;
use crate::params::{BufferId, ParamId, ParamStore, Stage};
use crate::tensor::{BatchStats, Tape, Tensor, Var};
use rand::Rng;
use std::collections::HashMap;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-6;

/// One forward pass: the tape, read-only weights, and the batch-norm mode
/// of each stage.
pub struct Forward<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bn_train: [bool; 2],
    leaves: HashMap<ParamId, Var>,
    stat_updates: Vec<StatUpdate>,
    capture_attention: bool,
    attention: Vec<Tensor>,
    resample_positions: bool,
}

#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean: BufferId,
    pub var: BufferId,
    pub stats: BatchStats,
}

/// Result of a finished pass, ready for backward and running-stat updates.
pub struct Recorded {
    pub tape: Tape,
    pub leaves: Vec<(ParamId, Var)>,
    pub stat_updates: Vec<StatUpdate>,
}

impl<'s> Forward<'s> {
    pub fn new(store: &'s ParamStore, tape: Tape, bn_train: [bool; 2]) -> Self {
        Forward {
            tape,
            store,
            bn_train,
            leaves: HashMap::new(),
            stat_updates: Vec::new(),
            capture_attention: false,
            attention: Vec::new(),
            resample_positions: false,
        }
    }

    /// Gradient-tracking pass with every batch norm in training mode.
    pub fn train(store: &'s ParamStore) -> Self {
        Self::new(store, Tape::new(), [true, true])
    }

    /// Untracked pass with every batch norm using running moments.
    pub fn eval(store: &'s ParamStore) -> Self {
        Self::new(store, Tape::no_grad(), [false, false])
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn bn_training(&self, stage: Stage) -> bool {
        self.bn_train[stage.index()]
    }

    pub fn capture_attention(&mut self, on: bool) {
        self.capture_attention = on;
    }

    pub(crate) fn record_attention(&mut self, probs: &Tensor) {
        if self.capture_attention {
            self.attention.push(probs.clone());
        }
    }

    /// Attention probability tensors `[groups, N, N]` recorded so far.
    pub fn attention(&self) -> &[Tensor] {
        &self.attention
    }

    /// Allows encoders to resample position tables to a new token grid.
    pub fn allow_position_resampling(&mut self, on: bool) {
        self.resample_positions = on;
    }

    pub fn position_resampling(&self) -> bool {
        self.resample_positions
    }

    /// Tape leaf for a parameter; tracked unless the parameter is frozen.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leaves.get(&id) {
            return *v;
        }
        let p = self.store.param(id);
        let v = self.tape.leaf(p.value.clone(), !p.frozen);
        self.leaves.insert(id, v);
        v
    }

    pub fn finish(self) -> Recorded {
        let mut leaves: Vec<(ParamId, Var)> = self.leaves.into_iter().collect();
        leaves.sort_by_key(|(id, _)| id.0);
        Recorded {
            tape: self.tape,
            leaves,
            stat_updates: self.stat_updates,
        }
    }
}

impl Recorded {
    /// Adds leaf gradients into the store's gradient buffers.
    pub fn accumulate_grads(&self, store: &mut ParamStore) {
        for (id, v) in &self.leaves {
            if let Some(g) = self.tape.grad(*v) {
                store
                    .param_mut(*id)
                    .grad
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
        }
    }

    /// Gradients of every tracked parameter that received one.
    pub fn gradients(&self) -> HashMap<ParamId, Vec<f64>> {
        self.leaves
            .iter()
            .filter_map(|(id, v)| self.tape.grad(*v).map(|g| (*id, g.to_vec())))
            .collect()
    }

    /// Folds batch statistics into running moments with [`BN_MOMENTUM`].
    pub fn apply_stat_updates(&self, store: &mut ParamStore) {
        for u in &self.stat_updates {
            let mean = store.buffer_mut(u.mean).value.data_mut();
            for (m, b) in mean.iter_mut().zip(&u.stats.mean) {
                *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * b;
            }
            let var = store.buffer_mut(u.var).value.data_mut();
            for (v, b) in var.iter_mut().zip(&u.stats.var_unbiased) {
                *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * b;
            }
        }
    }
}

/// Gradient check of one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    /// Relative error of the derivative along a direction mixing the
    /// analytic gradient with a random vector.
    pub directional: f64,
    /// Worst element-wise relative error over the checked coordinates.
    pub elementwise: f64,
}

/// Compares tape gradients of every unfrozen parameter with central
/// differences of `loss`. `coords` limits the element-wise check to that
/// many random coordinates per tensor; `None` checks all of them.
pub fn param_gradcheck(
    store: &ParamStore,
    bn_train: [bool; 2],
    coords: Option<usize>,
    seed: u64,
    loss: impl Fn(&mut Forward) -> Result<Var>,
) -> Result<Vec<ParamCheck>> {
    use crate::tensor::gradcheck::{kink_free_difference, rel_error, scalar_rel_error};
    use rand::seq::index::sample;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let mut fw = Forward::new(store, Tape::new(), bn_train);
    let l = loss(&mut fw)?;
    let mut rec = fw.finish();
    rec.tape.backward(l)?;
    let grads: HashMap<ParamId, Vec<f64>> = rec
        .leaves
        .iter()
        .map(|(id, v)| (*id, rec.tape.grad(*v).map(|g| g.to_vec()).unwrap_or_default()))
        .collect();

    let value = |s: &ParamStore| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::no_grad();
        tape.record_kinks();
        let mut fw = Forward::new(s, tape, bn_train);
        let l = loss(&mut fw)?;
        Ok((fw.tape.value(l).data()[0], fw.tape.kinks().unwrap_or_default().to_vec()))
    };
    let (_, base_kinks) = value(store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut out = Vec::new();
    for id in store.param_ids() {
        let p = store.param(id);
        if p.frozen {
            continue;
        }
        let n = p.value.numel();
        let g = grads.get(&id).cloned().filter(|g| !g.is_empty()).unwrap_or_else(|| vec![0.0; n]);
        let base = p.value.clone();
        let mut eval_shifted = |dir: &dyn Fn(usize) -> f64| -> Result<f64> {
            let d = kink_free_difference(&base_kinks, |h| {
                for (i, v) in work.param_mut(id).value.data_mut().iter_mut().enumerate() {
                    *v = base.data()[i] + h * dir(i);
                }
                value(&work)
            });
            work.param_mut(id).value = base.clone();
            d
        };

        let r = Tensor::randn(&[n], 1.0, &mut rng).into_data();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let (gn, rn) = (norm(&g), norm(&r));
        let mut d: Vec<f64> = (0..n)
            .map(|i| if gn > 0.0 { g[i] / gn } else { 0.0 } + r[i] / rn)
            .collect();
        let dn = norm(&d);
        d.iter_mut().for_each(|x| *x /= dn);
        let analytic: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        let numeric = eval_shifted(&|i| d[i])?;
        let directional = scalar_rel_error(analytic, numeric);

        let picked: Vec<usize> = match coords {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut a = Vec::with_capacity(picked.len());
        let mut num = Vec::with_capacity(picked.len());
        for &j in &picked {
            a.push(g[j]);
            num.push(eval_shifted(&|i| if i == j { 1.0 } else { 0.0 })?);
        }
        out.push(ParamCheck {
            name: p.name.clone(),
            directional,
            elementwise: rel_error(&a, &num),
        });
    }
    Ok(out)
}

pub mod init {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    pub fn xavier<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
        Tensor::randn(shape, (2.0 / (fan_in + fan_out) as f64).sqrt(), rng)
    }

    pub fn kaiming<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
        Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
    }

    /// 1-D bilinear upsampling taps for a kernel of size `k`.
    pub fn bilinear_taps(k: usize) -> Vec<f64> {
        let factor = k.div_ceil(2) as f64;
        let center = if k % 2 == 1 { factor - 1.0 } else { factor - 0.5 };
        (0..k).map(|i| 1.0 - (i as f64 - center).abs() / factor).collect()
    }

    /// Transposed-conv kernel `[Cin, Cout, k, k]` that bilinearly upsamples
    /// channel `i` of the input into channel `i * Cout / Cin` of the output,
    /// averaging when `Cout < Cin`, plus small Gaussian noise.
    pub fn bilinear_deconv<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, noise: f64, rng: &mut R) -> Tensor {
        let taps = bilinear_taps(k);
        let mut t = Tensor::zeros(&[cin, cout, k, k]);
        let share = if cout < cin { cout as f64 / cin as f64 } else { 1.0 };
        let d = t.data_mut();
        for ci in 0..cin {
            let co = ci * cout / cin;
            for i in 0..k {
                for j in 0..k {
                    d[((ci * cout + co) * k + i) * k + j] = taps[i] * taps[j] * share;
                }
            }
        }
        for v in d.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += noise * z;
        }
        t
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        stage: Stage,
    ) -> Result<Self> {
        let w = store.add_param(
            &format!("{name}.weight"),
            init::xavier(&[fan_in, fan_out], fan_in, fan_out, rng),
            stage,
        )?;
        let b = if bias {
            Some(store.add_param(&format!("{name}.bias"), Tensor::zeros(&[fan_out]), stage)?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    /// `x [N, in] -> [N, out]`.
    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let w = fw.param(self.w);
        let y = fw.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = fw.param(b);
                fw.tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, stage: Stage) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add_param(&format!("{name}.gain"), Tensor::ones(&[width]), stage)?,
            bias: store.add_param(&format!("{name}.bias"), Tensor::zeros(&[width]), stage)?,
        })
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let (g, b) = (fw.param(self.gain), fw.param(self.bias));
        fw.tape.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Same-size convolution (`pad = k / 2`, stride 1).
    #[allow(clippy::too_many_arguments)]
    pub fn same<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        bias: bool,
        stage: Stage,
    ) -> Result<Self> {
        let fan_in = cin * kernel * kernel;
        let w = store.add_param(
            &format!("{name}.weight"),
            init::kaiming(&[cout, cin, kernel, kernel], fan_in, rng),
            stage,
        )?;
        let b = if bias {
            Some(store.add_param(&format!("{name}.bias"), Tensor::zeros(&[cout]), stage)?)
        } else {
            None
        };
        Ok(Conv2d {
            w,
            b,
            kernel,
            stride: 1,
            pad: kernel / 2,
        })
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let w = fw.param(self.w);
        let b = self.b.map(|b| fw.param(b));
        fw.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Transposed convolution whose `(k - s)`-pixel overhang is cropped
/// centrally, so the output is exactly `stride` times the input extent.
#[derive(Clone, Debug)]
pub struct Deconv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub kernel: usize,
    pub stride: usize,
}

impl Deconv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        stage: Stage,
    ) -> Result<Self> {
        let w = store.add_param(
            &format!("{name}.weight"),
            init::bilinear_deconv(cin, cout, kernel, 0.01, rng),
            stage,
        )?;
        let b = if bias {
            Some(store.add_param(&format!("{name}.bias"), Tensor::zeros(&[cout]), stage)?)
        } else {
            None
        };
        Ok(Deconv2d {
            w,
            b,
            kernel,
            stride,
        })
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let s = fw.tape.shape(x).to_vec();
        let w = fw.param(self.w);
        let b = self.b.map(|b| fw.param(b));
        let raw = fw.tape.deconv2d(x, w, b, self.stride)?;
        fw.tape.crop_center(raw, s[2] * self.stride, s[3] * self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub stage: Stage,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, stage: Stage) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: store.add_param(&format!("{name}.gamma"), Tensor::ones(&[channels]), stage)?,
            beta: store.add_param(&format!("{name}.beta"), Tensor::zeros(&[channels]), stage)?,
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels]), stage)?,
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::ones(&[channels]), stage)?,
            stage,
        })
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let (g, b) = (fw.param(self.gamma), fw.param(self.beta));
        if fw.bn_training(self.stage) {
            let (y, stats) = fw.tape.batch_norm_train(x, g, b, BN_EPS)?;
            fw.stat_updates.push(StatUpdate {
                mean: self.running_mean,
                var: self.running_var,
                stats,
            });
            Ok(y)
        } else {
            let store = fw.store;
            let mean = store.buffer(self.running_mean).value.data();
            let var = store.buffer(self.running_var).value.data();
            fw.tape.batch_norm_eval(x, g, b, mean, var, BN_EPS)
        }
    }
}

/// `ReLU(BN(conv(x)))`; the convolution has no bias since BN absorbs it.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn same<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stage: Stage,
    ) -> Result<Self> {
        Ok(ConvBnRelu {
            conv: Conv2d::same(store, rng, &format!("{name}.conv"), cin, cout, kernel, false, stage)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout, stage)?,
        })
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let y = self.conv.forward(fw, x)?;
        let y = self.bn.forward(fw, y)?;
        Ok(fw.tape.relu(y))
    }
}

#[derive(Clone, Debug)]
pub struct DeconvBnRelu {
    pub deconv: Deconv2d,
    pub bn: BatchNorm2d,
}

impl DeconvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        stage: Stage,
    ) -> Result<Self> {
        Ok(DeconvBnRelu {
            deconv: Deconv2d::new(store, rng, &format!("{name}.deconv"), cin, cout, kernel, stride, false, stage)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout, stage)?,
        })
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let y = self.deconv.forward(fw, x)?;
        let y = self.bn.forward(fw, y)?;
        Ok(fw.tape.relu(y))
    }
}
