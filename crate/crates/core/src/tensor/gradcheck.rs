//! Central finite-difference checks of tape adjoints.
//!
//! The numerical side only ever evaluates forward values, so it is
//! independent of every backward rule it verifies.

use super::{Tape, Tensor, Var};
use crate::error::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
/// Step reductions tried when a stencil point crosses a ReLU kink.
const STEP_REDUCTIONS: usize = 4;

/// Central difference `(f(h) - f(-h)) / 2h` where `f` also reports the
/// ReLU sign pattern of its forward pass. Starting from [`STEP`], the step
/// shrinks tenfold while either stencil point leaves the sign pattern of
/// the base point, since differences across a kink do not estimate the
/// derivative at the base. After the last reduction the estimate is
/// returned as is.
pub fn kink_free_difference(base: &[bool], mut f: impl FnMut(f64) -> Result<(f64, Vec<bool>)>) -> Result<f64> {
    let mut h = STEP;
    let mut est = 0.0;
    for _ in 0..=STEP_REDUCTIONS {
        let (plus, kp) = f(h)?;
        let (minus, km) = f(-h)?;
        est = (plus - minus) / (2.0 * h);
        if kp == base && km == base {
            break;
        }
        h /= 10.0;
    }
    Ok(est)
}

/// `max |a - n| / max(max |a|, max |n|)`; 0 when both vectors vanish.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Relative error of a scalar derivative.
pub fn scalar_rel_error(analytic: f64, numeric: f64) -> f64 {
    rel_error(&[analytic], &[numeric])
}

fn projected_loss(
    inputs: &[Tensor],
    probe: &Tensor,
    track: bool,
    f: &impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<(Tape, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    if !track {
        tape.record_kinks();
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), track)).collect();
    let out = f(&mut tape, &vars)?;
    let p = tape.constant(probe.clone().reshape(tape.shape(out))?);
    let prod = tape.mul(out, p)?;
    let loss = tape.sum(prod);
    Ok((tape, vars, loss))
}

/// Checks every input of `f` element-wise against central differences of
/// `sum(f(inputs) * R)` for a fixed random probe `R`. Returns the worst
/// [`rel_error`] over inputs, or infinity when `f` fails.
pub fn check_op(inputs: &[Tensor], seed: u64, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let run = || -> Result<f64> {
        let mut probe_tape = Tape::no_grad();
        let vars: Vec<Var> = inputs.iter().map(|t| probe_tape.constant(t.clone())).collect();
        let out = f(&mut probe_tape, &vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probe = Tensor::randn(probe_tape.shape(out), 1.0, &mut rng);

        let (base, _, _) = projected_loss(inputs, &probe, false, &f)?;
        let base_kinks = base.kinks().unwrap_or_default().to_vec();
        let (mut tape, vars, loss) = projected_loss(inputs, &probe, true, &f)?;
        tape.backward(loss)?;
        let mut worst: f64 = 0.0;
        for (i, v) in vars.iter().enumerate() {
            let analytic = tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
            let mut numeric = vec![0.0; inputs[i].numel()];
            let mut shifted = inputs.to_vec();
            for (j, slot) in numeric.iter_mut().enumerate() {
                let x0 = inputs[i].data()[j];
                *slot = kink_free_difference(&base_kinks, |h| {
                    shifted[i].data_mut()[j] = x0 + h;
                    let (t, _, l) = projected_loss(&shifted, &probe, false, &f)?;
                    Ok((t.value(l).data()[0], t.kinks().unwrap_or_default().to_vec()))
                })?;
                shifted[i].data_mut()[j] = x0;
            }
            worst = worst.max(rel_error(&analytic, &numeric));
        }
        Ok(worst)
    };
    run().unwrap_or(f64::INFINITY)
}
