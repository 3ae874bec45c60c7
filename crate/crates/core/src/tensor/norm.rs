use super::tape::{Grads, Op, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n - 1) variance, as used for running-moment updates.
    pub var_unbiased: Vec<f64>,
}

/// `(outer, channels, inner)` view of a `[B, C, ...]` tensor.
fn channel_view(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

impl Tape {
    /// Normalizes each row of `x [N, C]` over its last axis, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let c = *t.shape().last().unwrap();
        if c < 2 || self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Error::shape("layer_norm", t.shape(), self.value(gain).shape()));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = t.numel() / c;
        let mut xhat = vec![0.0; t.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Training-mode batch norm over all axes but the channel axis 1.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let t = self.value(x);
        let (outer, c, inner) = channel_view(t.shape());
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("batch_norm", t.shape(), self.value(gamma).shape()));
        }
        let n = outer * inner;
        if n < 2 {
            return Err(Error::Input(format!(
                "training-mode batch norm needs at least 2 values per channel, got {n}"
            )));
        }
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for o in 0..outer {
            for ch in 0..c {
                let s = &t.data()[(o * c + ch) * inner..(o * c + ch + 1) * inner];
                mean[ch] += s.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for o in 0..outer {
            for ch in 0..c {
                let s = &t.data()[(o * c + ch) * inner..(o * c + ch + 1) * inner];
                var[ch] += s.iter().map(|v| (v - mean[ch]) * (v - mean[ch])).sum::<f64>();
            }
        }
        let var_unbiased = var.iter().map(|v| v / (n - 1) as f64).collect();
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, inv_std, true);
        Ok((out, BatchStats { mean, var_unbiased }))
    }

    /// Eval-mode batch norm with fixed moments.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let c = channel_view(self.value(x).shape()).1;
        if self.value(gamma).numel() != c || running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm", self.value(x).shape(), self.value(gamma).shape()));
        }
        let inv_std = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        Ok(self.bn_apply(x, gamma, beta, running_mean, inv_std, false))
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: Vec<f64>, train: bool) -> Var {
        let t = self.value(x);
        let (outer, c, inner) = channel_view(t.shape());
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; t.numel()];
        let mut out = vec![0.0; t.numel()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    let h = (t.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = h * g[ch] + b[ch];
                }
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        )
    }
}

pub(super) fn backward_layer_norm(
    x: Var,
    gain: Var,
    bias: Var,
    xhat: &[f64],
    inv_std: &[f64],
    g: &[f64],
    grads: &mut Grads,
) {
    let gv = grads.value(gain).data();
    let c = gv.len();
    if let Some(s) = grads.slot(gain) {
        for (i, (gy, h)) in g.iter().zip(xhat).enumerate() {
            s[i % c] += gy * h;
        }
    }
    if let Some(s) = grads.slot(bias) {
        for (i, gy) in g.iter().enumerate() {
            s[i % c] += gy;
        }
    }
    if let Some(s) = grads.slot(x) {
        let n = c as f64;
        for (r, &is) in inv_std.iter().enumerate() {
            let range = r * c..(r + 1) * c;
            let dh: Vec<f64> = g[range.clone()].iter().zip(gv).map(|(a, b)| a * b).collect();
            let sum_dh: f64 = dh.iter().sum();
            let sum_dh_h: f64 = dh.iter().zip(&xhat[range.clone()]).map(|(a, b)| a * b).sum();
            for (j, idx) in range.enumerate() {
                s[idx] += is / n * (n * dh[j] - sum_dh - xhat[idx] * sum_dh_h);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward_batch_norm(
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[f64],
    inv_std: &[f64],
    train: bool,
    g: &[f64],
    grads: &mut Grads,
) {
    let (outer, c, inner) = channel_view(grads.value(x).shape());
    let gv = grads.value(gamma).data();
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_h = vec![0.0; c];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            for i in base..base + inner {
                sum_dy[ch] += g[i];
                sum_dy_h[ch] += g[i] * xhat[i];
            }
        }
    }
    grads.add(gamma, &sum_dy_h);
    grads.add(beta, &sum_dy);
    if let Some(s) = grads.slot(x) {
        let n = (outer * inner) as f64;
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                let k = gv[ch] * inv_std[ch];
                for i in base..base + inner {
                    s[i] += if train {
                        k / n * (n * g[i] - sum_dy[ch] - xhat[i] * sum_dy_h[ch])
                    } else {
                        k * g[i]
                    };
                }
            }
        }
    }
}
