use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use std::collections::HashMap;

/// SGD with momentum, L2 weight decay and polynomial learning-rate decay.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub iteration: usize,
    pub max_iterations: usize,
    velocity: HashMap<ParamId, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(base_lr: f64, max_iterations: usize) -> Self {
        OptimizerState {
            base_lr,
            momentum: 0.9,
            weight_decay: 2e-4,
            power: 0.9,
            iteration: 0,
            max_iterations,
            velocity: HashMap::new(),
        }
    }

    /// `base_lr * (1 - iter / max_iter)^power`, zero from `max_iter` on.
    pub fn lr(&self) -> f64 {
        poly_lr(self.base_lr, self.iteration, self.max_iterations, self.power)
    }
}

pub fn poly_lr(base: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if max_iter == 0 || iter >= max_iter {
        return 0.0;
    }
    base * (1.0 - iter as f64 / max_iter as f64).powf(power)
}

/// `v = momentum * v + g + wd * p`, `p -= lr * v` for every unfrozen
/// parameter, then advances the iteration counter.
pub fn sgd_step(store: &mut ParamStore, grads: &HashMap<ParamId, Vec<f64>>, state: &mut OptimizerState) -> Result<()> {
    let ids: Vec<ParamId> = store.param_ids().filter(|id| !store.param(*id).frozen).collect();
    for id in &ids {
        match grads.get(id) {
            Some(g) if g.len() == store.param(*id).value.numel() => {}
            _ => {
                return Err(Error::Usage(format!(
                    "no gradient for trainable parameter {}",
                    store.param(*id).name
                )))
            }
        }
    }
    let lr = state.lr();
    for id in ids {
        let g = &grads[&id];
        let p = store.param_mut(id);
        let v = state.velocity.entry(id).or_insert_with(|| vec![0.0; g.len()]);
        for ((pv, vv), gv) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
            *vv = state.momentum * *vv + gv + state.weight_decay * *pv;
            *pv -= lr * *vv;
        }
    }
    state.iteration += 1;
    Ok(())
}
