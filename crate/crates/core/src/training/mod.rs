//! Losses, optimizer and the two-phase training protocol: Stage I is
//! trained first, then frozen while Stage II trains on top of it.

mod loss;
mod optim;

pub use loss::{
    consensus_labels, stage1_loss, stage2_loss, stage_loss, weighted_bce, weighted_bce_var, weighted_bce_with_grad,
    AnnotationStack, Label, LabelMap, EPS,
};
pub use optim::{poly_lr, sgd_step, OptimizerState};

use crate::bimla::PathFeatures;
use crate::error::{Error, Result};
use crate::nn::Forward;
use crate::params::Stage;
use crate::pipeline::{Architecture, Edter};
use crate::tensor::{Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One training image with its labels.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub labels: LabelMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub eta: f64,
    pub lambda: f64,
    pub crop: usize,
    pub batch: usize,
    pub iters_stage1: usize,
    pub iters_stage2: usize,
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub ignore_band: bool,
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta: 0.3,
            lambda: 0.4,
            crop: 64,
            batch: 8,
            iters_stage1: 1000,
            iters_stage2: 1000,
            seed: 0,
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 2e-4,
            power: 0.9,
            ignore_band: false,
            flip: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::Config(format!("eta must lie in (0, 1], got {}", self.eta)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.batch == 0 || self.crop == 0 {
            return Err(Error::Config("batch and crop must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    /// 1 or 2.
    pub stage: u8,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub losses: Vec<LossRecord>,
    /// Digest of all Stage-I tensors at the end of phase 1.
    pub stage1_digest: [u8; 32],
}

/// Loss curve as `iteration,stage,loss` CSV.
pub fn losses_csv(losses: &[LossRecord]) -> String {
    let mut s = String::from("iteration,stage,loss\n");
    for r in losses {
        s.push_str(&format!("{},{},{:.17e}\n", r.iteration, r.stage, r.loss));
    }
    s
}

/// Eight (or four) sigmoid side predictions of one stage.
pub fn side_outputs(arch: &Architecture, fw: &mut Forward, stage: Stage, paths: &PathFeatures) -> Result<Vec<Var>> {
    arch.side_outputs(fw, stage, paths)
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
struct View {
    index: usize,
    top: usize,
    left: usize,
    flip: bool,
}

fn crop_image(img: &Tensor, v: View, size: usize) -> Tensor {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut out = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        for y in v.top..v.top + size {
            let row = &img.data()[(c * h + y) * w + v.left..(c * h + y) * w + v.left + size];
            if v.flip {
                out.extend(row.iter().rev());
            } else {
                out.extend_from_slice(row);
            }
        }
    }
    Tensor::from_parts(vec![3, size, size], out)
}

fn batch_views<R: Rng>(rng: &mut R, data: &[Sample], cfg: &TrainConfig) -> Vec<View> {
    let indices: Vec<usize> = if cfg.batch >= data.len() {
        (0..data.len()).collect()
    } else {
        sample(rng, data.len(), cfg.batch).into_vec()
    };
    indices
        .into_iter()
        .map(|index| {
            let s = &data[index].labels;
            View {
                index,
                top: rng.gen_range(0..=s.height - cfg.crop),
                left: rng.gen_range(0..=s.width - cfg.crop),
                flip: cfg.flip && rng.gen_bool(0.5),
            }
        })
        .collect()
}

fn assemble(data: &[Sample], views: &[View], crop: usize) -> (Tensor, Vec<LabelMap>) {
    let mut pixels = Vec::with_capacity(views.len() * 3 * crop * crop);
    let mut labels = Vec::with_capacity(views.len());
    for v in views {
        let s = &data[v.index];
        pixels.extend(crop_image(&s.image, *v, crop).into_data());
        let l = s.labels.crop(v.top, v.left, crop, crop);
        labels.push(if v.flip { l.flip_horizontal() } else { l });
    }
    (Tensor::from_parts(vec![views.len(), 3, crop, crop], pixels), labels)
}

/// Trains Stage I, freezes it, then trains Stage II. `log` sees every
/// loss record as it is produced.
pub fn train_two_phase(
    model: &mut Edter,
    data: &[Sample],
    cfg: &TrainConfig,
    mut log: impl FnMut(&LossRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    for s in data {
        if cfg.crop > s.labels.height || cfg.crop > s.labels.width {
            return Err(Error::Config(format!(
                "crop {} exceeds image {}x{}",
                cfg.crop, s.labels.height, s.labels.width
            )));
        }
        if s.image.shape() != [3, s.labels.height, s.labels.width] {
            return Err(Error::shape("sample", s.image.shape(), &[3, s.labels.height, s.labels.width]));
        }
    }
    if model.cfg().image_size != (cfg.crop, cfg.crop) {
        return Err(Error::Config(format!(
            "crop {} must equal the model extent {:?}",
            cfg.crop,
            model.cfg().image_size
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::new();
    let two_stage = model.cfg().two_stage;
    let new_state = |iters| {
        let mut st = OptimizerState::new(cfg.lr, iters);
        st.momentum = cfg.momentum;
        st.weight_decay = cfg.weight_decay;
        st.power = cfg.power;
        st
    };

    model.store.set_frozen(Stage::Global, false);
    model.store.set_frozen(Stage::Local, true);
    let mut state = new_state(cfg.iters_stage1);
    for it in 0..cfg.iters_stage1 {
        let views = batch_views(&mut rng, data, cfg);
        let (images, labels) = assemble(data, &views, cfg.crop);
        let mut fw = Forward::new(&model.store, Tape::new(), [true, false]);
        let x = fw.tape.constant(images);
        let s1 = model.arch.run_stage1(&mut fw, x)?;
        let sides = side_outputs(&model.arch, &mut fw, Stage::Global, &s1.paths)?;
        let l = stage1_loss(&mut fw.tape, s1.edge, &sides, &labels, cfg.lambda)?;
        let rec = step(fw, l, it, 1, &mut losses, &mut log)?;
        rec.apply_stat_updates(&mut model.store);
        sgd_step(&mut model.store, &rec.gradients(), &mut state)?;
    }
    let stage1_digest = model.store.stage_digest(Stage::Global);

    if two_stage {
        model.store.set_frozen(Stage::Global, true);
        model.store.set_frozen(Stage::Local, false);
        let mut state = new_state(cfg.iters_stage2);
        let mut cache: Option<(Vec<View>, Tensor)> = None;
        for it in 0..cfg.iters_stage2 {
            let views = batch_views(&mut rng, data, cfg);
            let (images, labels) = assemble(data, &views, cfg.crop);
            let f_g = match &cache {
                Some((v, t)) if *v == views => t.clone(),
                _ => {
                    let mut fw = Forward::eval(&model.store);
                    let x = fw.tape.constant(images.clone());
                    let s1 = model.arch.run_stage1(&mut fw, x)?;
                    let t = fw.tape.value(s1.features).clone();
                    cache = Some((views.clone(), t.clone()));
                    t
                }
            };
            let mut fw = Forward::new(&model.store, Tape::new(), [false, true]);
            let x = fw.tape.constant(images);
            let g = fw.tape.constant(f_g);
            let s2 = model.arch.run_stage2(&mut fw, x, Some(g))?;
            let sides = side_outputs(&model.arch, &mut fw, Stage::Local, &s2.paths)?;
            let l = stage2_loss(&mut fw.tape, s2.edge, &sides, &labels, cfg.lambda)?;
            let rec = step(fw, l, it, 2, &mut losses, &mut log)?;
            rec.apply_stat_updates(&mut model.store);
            sgd_step(&mut model.store, &rec.gradients(), &mut state)?;
        }
        model.store.set_frozen(Stage::Global, false);
    }
    model.store.set_frozen(Stage::Local, false);
    model.mark_loaded();
    Ok(TrainReport { losses, stage1_digest })
}

fn step(
    fw: Forward,
    loss: Var,
    iteration: usize,
    stage: u8,
    losses: &mut Vec<LossRecord>,
    log: &mut impl FnMut(&LossRecord),
) -> Result<crate::nn::Recorded> {
    let value = fw.tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss at stage {stage} iteration {iteration}")));
    }
    let mut rec = fw.finish();
    rec.tape.backward(loss)?;
    let r = LossRecord {
        iteration,
        stage,
        loss: value,
    };
    log(&r);
    losses.push(r);
    Ok(rec)
}
