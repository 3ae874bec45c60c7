use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Negative,
    Positive,
    /// Excluded from the loss.
    Ignored,
}

/// Per-pixel training labels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<Label>,
}

impl LabelMap {
    pub fn from_binary(height: usize, width: usize, bits: &[bool]) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape("labels", &[height, width], &[bits.len()]));
        }
        let data = bits
            .iter()
            .map(|b| if *b { Label::Positive } else { Label::Negative })
            .collect();
        Ok(LabelMap { height, width, data })
    }

    pub fn positives(&self) -> usize {
        self.data.iter().filter(|l| **l == Label::Positive).count()
    }

    pub fn negatives(&self) -> usize {
        self.data.iter().filter(|l| **l == Label::Negative).count()
    }

    /// `|Y-| / (|Y-| + |Y+|)`, or 0 when every pixel is ignored.
    pub fn alpha(&self) -> f64 {
        let (n, p) = (self.negatives(), self.positives());
        if n + p == 0 {
            0.0
        } else {
            n as f64 / (n + p) as f64
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in top..top + height {
            data.extend_from_slice(&self.data[y * self.width + left..y * self.width + left + width]);
        }
        LabelMap { height, width, data }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        LabelMap { data, ..*self }
    }
}

/// Binary maps from several annotators for one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotationStack {
    pub height: usize,
    pub width: usize,
    pub maps: Vec<Vec<bool>>,
}

impl AnnotationStack {
    pub fn new(height: usize, width: usize, maps: Vec<Vec<bool>>) -> Result<Self> {
        if maps.iter().any(|m| m.len() != height * width) {
            return Err(Error::Input("annotator maps differ in extent".into()));
        }
        Ok(AnnotationStack { height, width, maps })
    }

    /// Fraction of annotators marking each pixel.
    pub fn probability(&self) -> Vec<f64> {
        let n = self.maps.len() as f64;
        (0..self.height * self.width)
            .map(|i| self.maps.iter().filter(|m| m[i]).count() as f64 / n)
            .collect()
    }
}

/// Positive where the annotator mean reaches `eta`. With `ignore_band`,
/// pixels marked by some annotators but below `eta` are ignored instead of
/// negative.
pub fn consensus_labels(stack: &AnnotationStack, eta: f64, ignore_band: bool) -> Result<LabelMap> {
    if stack.maps.is_empty() {
        return Err(Error::Input("no annotator maps".into()));
    }
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::Config(format!("eta must lie in (0, 1], got {eta}")));
    }
    let data = stack
        .probability()
        .into_iter()
        .map(|p| {
            if p >= eta {
                Label::Positive
            } else if ignore_band && p > 0.0 {
                Label::Ignored
            } else {
                Label::Negative
            }
        })
        .collect();
    Ok(LabelMap {
        height: stack.height,
        width: stack.width,
        data,
    })
}

/// Class-balanced cross-entropy of one map, summed over pixels, together
/// with its derivative with respect to every probability.
pub fn weighted_bce_with_grad(e: &[f64], y: &LabelMap) -> Result<(f64, Vec<f64>)> {
    if e.len() != y.data.len() {
        return Err(Error::shape("weighted_bce", &[y.height, y.width], &[e.len()]));
    }
    let alpha = y.alpha();
    let mut loss = 0.0;
    let mut grad = vec![0.0; e.len()];
    for (i, (&p, &l)) in e.iter().zip(&y.data).enumerate() {
        let q = p.clamp(EPS, 1.0 - EPS);
        let inside = p > EPS && p < 1.0 - EPS;
        match l {
            Label::Positive => {
                loss -= alpha * q.ln();
                if inside {
                    grad[i] = -alpha / q;
                }
            }
            Label::Negative => {
                loss -= (1.0 - alpha) * (1.0 - q).ln();
                if inside {
                    grad[i] = (1.0 - alpha) / (1.0 - q);
                }
            }
            Label::Ignored => {}
        }
    }
    Ok((loss, grad))
}

pub fn weighted_bce(e: &[f64], y: &LabelMap) -> Result<f64> {
    Ok(weighted_bce_with_grad(e, y)?.0)
}

/// Mean over the batch of the per-item losses of `e [B, 1, H, W]`.
pub fn weighted_bce_var(tape: &mut Tape, e: Var, labels: &[LabelMap]) -> Result<Var> {
    let s = tape.shape(e).to_vec();
    if s.len() != 4 || s[1] != 1 || s[0] != labels.len() {
        return Err(Error::shape("weighted_bce", &s, &[labels.len(), 1, 0, 0]));
    }
    let n = s[2] * s[3];
    let b = labels.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(n * labels.len());
    for (chunk, y) in tape.value(e).data().chunks(n).zip(labels) {
        let (l, g) = weighted_bce_with_grad(chunk, y)?;
        total += l / b;
        grad.extend(g.into_iter().map(|v| v / b));
    }
    tape.scalar_with_grad(e, total, grad)
}

/// `l(E, Y) + lambda * sum_k l(S_k, Y)`.
pub fn stage_loss(tape: &mut Tape, edge: Var, sides: &[Var], labels: &[LabelMap], lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    let main = weighted_bce_var(tape, edge, labels)?;
    if sides.is_empty() || lambda == 0.0 {
        return Ok(main);
    }
    let mut side = weighted_bce_var(tape, sides[0], labels)?;
    for s in &sides[1..] {
        let l = weighted_bce_var(tape, *s, labels)?;
        side = tape.add(side, l)?;
    }
    let side = tape.scale(side, lambda);
    tape.add(main, side)
}

/// Stage-I objective on the global edge map and its side outputs.
pub fn stage1_loss(tape: &mut Tape, e_g: Var, sides: &[Var], labels: &[LabelMap], lambda: f64) -> Result<Var> {
    stage_loss(tape, e_g, sides, labels, lambda)
}

/// Stage-II objective on the local edge map and its side outputs.
pub fn stage2_loss(tape: &mut Tape, e_r: Var, sides: &[Var], labels: &[LabelMap], lambda: f64) -> Result<Var> {
    stage_loss(tape, e_r, sides, labels, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::rel_error;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn labels(bits: &[bool]) -> LabelMap {
        LabelMap::from_binary(1, bits.len(), bits).unwrap()
    }

    #[test]
    fn two_pixel_case() {
        let l = weighted_bce(&[0.5, 0.5], &labels(&[true, false])).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn all_positive_is_zero() {
        assert_eq!(weighted_bce(&[0.3, 0.9], &labels(&[true, true])).unwrap(), 0.0);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let y = labels(&[true, false, false, true]);
        let l = weighted_bce(&[1.0, 0.0, 0.0, 1.0], &y).unwrap();
        assert!(l <= 2.0 * 4.0 * EPS * EPS.ln().abs());
    }

    #[test]
    fn consensus_rule() {
        let mut maps = vec![vec![false; 1]; 5];
        maps[0][0] = true;
        maps[1][0] = true;
        let two = AnnotationStack::new(1, 1, maps.clone()).unwrap();
        assert_eq!(consensus_labels(&two, 0.3, false).unwrap().data, vec![Label::Positive]);
        maps[1][0] = false;
        let one = AnnotationStack::new(1, 1, maps).unwrap();
        assert_eq!(consensus_labels(&one, 0.3, false).unwrap().data, vec![Label::Negative]);
        assert_eq!(consensus_labels(&one, 0.3, true).unwrap().data, vec![Label::Ignored]);
        let empty = AnnotationStack::new(1, 1, vec![]).unwrap();
        assert!(matches!(consensus_labels(&empty, 0.3, false), Err(Error::Input(_))));
    }

    #[test]
    fn stage_loss_linearity() {
        let y = vec![labels(&[true, false, true])];
        let mut tape = Tape::no_grad();
        let e = tape.constant(Tensor::new(vec![1, 1, 1, 3], vec![0.7, 0.2, 0.4]).unwrap());
        let base = weighted_bce(&[0.7, 0.2, 0.4], &y[0]).unwrap();
        let l0 = stage1_loss(&mut tape, e, &[e; 8], &y, 0.0).unwrap();
        assert_eq!(tape.value(l0).data()[0], base);
        let l = stage2_loss(&mut tape, e, &[e; 8], &y, 0.4).unwrap();
        let want = base + 0.4 * (0..8).map(|_| base).sum::<f64>();
        assert_eq!(tape.value(l).data()[0], want);
    }

    fn arb_case() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..24).prop_flat_map(|n| {
            (
                prop::collection::vec(0.01f64..0.99, n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn alpha_complements_positive_fraction(bits in prop::collection::vec(any::<bool>(), 1..64)) {
            let y = labels(&bits);
            let pos = y.positives() as f64 / bits.len() as f64;
            prop_assert_eq!(y.alpha() + pos, 1.0);
        }

        #[test]
        fn bce_gradient_matches_differences((e, bits) in arb_case()) {
            let y = labels(&bits);
            let (_, g) = weighted_bce_with_grad(&e, &y).unwrap();
            let h = 1e-6;
            let numeric: Vec<f64> = (0..e.len()).map(|i| {
                let mut a = e.clone();
                let mut b = e.clone();
                a[i] += h;
                b[i] -= h;
                (weighted_bce(&a, &y).unwrap() - weighted_bce(&b, &y).unwrap()) / (2.0 * h)
            }).collect();
            prop_assert!(rel_error(&g, &numeric) < 1e-6);
        }
    }
}
