//! Boundary benchmark: NMS thinning, tolerance matching against every
//! annotator, a 99-threshold precision/recall sweep and ODS/OIS/AP.

mod matching;
mod nms;

pub use matching::{match_correspondence, tolerance_radius, BinaryMap, Correspondence};
pub use nms::{nms_thin, smooth};

use crate::error::{Error, Result};
use crate::pipeline::EdgeMap;

/// Default tolerance as a fraction of the image diagonal.
pub const DEFAULT_TOL: f64 = 0.0075;
pub const NUM_THRESHOLDS: usize = 99;

/// `k / 100` for `k = 1..=99`.
pub fn thresholds() -> Vec<f64> {
    (1..=NUM_THRESHOLDS).map(|k| k as f64 / 100.0).collect()
}

/// Matching counts at one threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub matched_pred: usize,
    pub total_pred: usize,
    pub matched_gt: usize,
    pub total_gt: usize,
}

impl Counts {
    /// Empty predictions have precision 1.
    pub fn precision(&self) -> f64 {
        if self.total_pred == 0 {
            1.0
        } else {
            self.matched_pred as f64 / self.total_pred as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.total_gt == 0 {
            0.0
        } else {
            self.matched_gt as f64 / self.total_gt as f64
        }
    }

    pub fn f_measure(&self) -> f64 {
        f_measure(self.precision(), self.recall())
    }

    fn add(&mut self, o: &Counts) {
        self.matched_pred += o.matched_pred;
        self.total_pred += o.total_pred;
        self.matched_gt += o.matched_gt;
        self.total_gt += o.total_gt;
    }
}

pub fn f_measure(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Counts of one image at every threshold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageCounts(pub Vec<Counts>);

/// Binarizes the thinned map at each threshold (`>=`) and matches it
/// against every annotator. A predicted pixel is correct if any annotator
/// has a partner for it; recall pools the ground-truth pixels of all
/// annotators.
pub fn pr_sweep(thinned: &EdgeMap, gts: &[BinaryMap], tol: f64) -> Result<ImageCounts> {
    if gts.is_empty() {
        return Err(Error::Input("no ground-truth maps".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {tol}")));
    }
    for g in gts {
        if (g.height, g.width) != (thinned.height, thinned.width) {
            return Err(Error::shape(
                "pr_sweep",
                &[thinned.height, thinned.width],
                &[g.height, g.width],
            ));
        }
    }
    let total_gt: usize = gts.iter().map(BinaryMap::count).sum();
    let counts = thresholds()
        .into_iter()
        .map(|t| {
            let pred = BinaryMap::new(
                thinned.height,
                thinned.width,
                thinned.data.iter().map(|v| *v >= t).collect(),
            );
            let mut hit = vec![false; pred.data.len()];
            let mut matched_gt = 0;
            for g in gts {
                let c = match_correspondence(&pred, g, tol);
                matched_gt += c.matched_gt.iter().filter(|b| **b).count();
                hit.iter_mut().zip(&c.matched_pred).for_each(|(h, m)| *h |= *m);
            }
            Counts {
                matched_pred: hit.iter().filter(|b| **b).count(),
                total_pred: pred.count(),
                matched_gt,
                total_gt,
            }
        })
        .collect();
    Ok(ImageCounts(counts))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub curve: Vec<CurvePoint>,
    pub ods: f64,
    pub ods_threshold: f64,
    pub ois: f64,
    pub ap: f64,
}

impl EvalReport {
    /// `threshold,precision,recall,f` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall,f\n");
        for p in &self.curve {
            s.push_str(&format!("{:.2},{:.6},{:.6},{:.6}\n", p.threshold, p.precision, p.recall, p.f));
        }
        s
    }

    pub fn summary(&self) -> String {
        format!("ODS={:.3} OIS={:.3} AP={:.3}", self.ods, self.ois, self.ap)
    }
}

/// Area under the precision envelope (best precision at equal or higher
/// recall, one value per distinct recall), by trapezoids over recall
/// starting from recall 0.
pub fn average_precision(points: &[(f64, f64)]) -> f64 {
    let mut pts: Vec<(f64, f64)> = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts.dedup_by(|later, first| later.0 == first.0);
    for i in (0..pts.len().saturating_sub(1)).rev() {
        pts[i].1 = pts[i].1.max(pts[i + 1].1);
    }
    let Some(&(_, first)) = pts.first() else {
        return 0.0;
    };
    let mut area = 0.0;
    let mut prev = (0.0, first);
    for &(r, p) in &pts {
        area += (r - prev.0) * (p + prev.1) / 2.0;
        prev = (r, p);
    }
    area
}

pub fn aggregate_ods_ois_ap(images: &[ImageCounts]) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::Input("no images to aggregate".into()));
    }
    let ts = thresholds();
    let mut totals = vec![Counts::default(); ts.len()];
    for img in images {
        for (t, c) in totals.iter_mut().zip(&img.0) {
            t.add(c);
        }
    }
    let curve: Vec<CurvePoint> = ts
        .iter()
        .zip(&totals)
        .map(|(t, c)| CurvePoint {
            threshold: *t,
            precision: c.precision(),
            recall: c.recall(),
            f: c.f_measure(),
        })
        .collect();
    let (best, _) = curve
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |acc, (i, p)| if p.f > acc.1 { (i, p.f) } else { acc });

    let mut ois_counts = Counts::default();
    for img in images {
        let (bi, _) = img
            .0
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, c)| if c.f_measure() > acc.1 { (i, c.f_measure()) } else { acc });
        ois_counts.add(&img.0[bi]);
    }
    let points: Vec<(f64, f64)> = curve.iter().map(|p| (p.recall, p.precision)).collect();
    Ok(EvalReport {
        ods: curve[best].f,
        ods_threshold: curve[best].threshold,
        ois: ois_counts.f_measure(),
        ap: average_precision(&points),
        curve,
    })
}

/// NMS, sweep and aggregation over a dataset of `(prediction, annotators)`.
pub fn evaluate(items: &[(EdgeMap, Vec<BinaryMap>)], tol: f64) -> Result<EvalReport> {
    let counts = items
        .iter()
        .map(|(pred, gts)| pr_sweep(&nms_thin(pred), gts, tol))
        .collect::<Result<Vec<_>>>()?;
    aggregate_ods_ois_ap(&counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn as_edge(m: &BinaryMap) -> EdgeMap {
        EdgeMap::new(m.height, m.width, m.data.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect()).unwrap()
    }

    fn square(n: usize, lo: usize, hi: usize) -> BinaryMap {
        let data = (0..n * n)
            .map(|i| {
                let (y, x) = (i / n, i % n);
                (y == lo || y == hi || x == lo || x == hi) && (lo..=hi).contains(&y) && (lo..=hi).contains(&x)
            })
            .collect();
        BinaryMap::new(n, n, data)
    }

    #[test]
    fn perfect_prediction() {
        let gt = square(16, 3, 12);
        let r = evaluate(&[(as_edge(&gt), vec![gt.clone()])], DEFAULT_TOL).unwrap();
        assert_eq!((r.ods, r.ois, r.ap), (1.0, 1.0, 1.0));
        assert_eq!(r.summary(), "ODS=1.000 OIS=1.000 AP=1.000");
    }

    #[test]
    fn empty_prediction() {
        let gt = square(16, 3, 12);
        let blank = EdgeMap::new(16, 16, vec![0.0; 256]).unwrap();
        let c = pr_sweep(&blank, &[gt], DEFAULT_TOL).unwrap();
        for k in &c.0 {
            assert_eq!(k.recall(), 0.0);
            assert_eq!(k.precision(), 1.0);
        }
    }

    #[test]
    fn counts_monotone_in_threshold() {
        let gt = square(16, 3, 12);
        let pred = EdgeMap::new(16, 16, (0..256).map(|i| (i % 97) as f64 / 97.0).collect()).unwrap();
        let c = pr_sweep(&pred, &[gt], 0.05).unwrap();
        assert!(c.0.windows(2).all(|w| w[1].total_pred <= w[0].total_pred));
    }

    #[test]
    fn ois_dominates_ods() {
        // edges at 0.9 with noise at 0.5, and edges at 0.4 with noise at 0.3:
        // no single threshold separates both images
        let gt = square(16, 3, 12);
        let mk = |edge: f64, noise: f64| {
            let data = gt
                .data
                .iter()
                .enumerate()
                .map(|(i, b)| if *b { edge } else if i % 50 == 7 { noise } else { 0.0 })
                .collect();
            EdgeMap::new(16, 16, data).unwrap()
        };
        let items = [(mk(0.9, 0.5), vec![gt.clone()]), (mk(0.4, 0.3), vec![gt.clone()])];
        let r = evaluate(&items, DEFAULT_TOL).unwrap();
        assert_eq!(r.ois, 1.0);
        assert!(r.ods < 1.0);
    }

    #[test]
    fn ap_of_simple_curves() {
        assert_eq!(average_precision(&[(1.0, 1.0)]), 1.0);
        // envelope lifts the low-recall point to 0.8
        let ap = average_precision(&[(0.5, 0.6), (1.0, 0.8)]);
        assert!((ap - 0.8).abs() < 1e-15);
        assert_eq!(average_precision(&[(0.0, 1.0)]), 0.0);
        // tied recalls collapse to their best precision
        let tied = average_precision(&[(0.0, 1.0), (0.0, 0.0), (0.5, 0.4)]);
        assert!((tied - 0.5 * (1.0 + 0.4) / 2.0).abs() < 1e-15);
    }
}
