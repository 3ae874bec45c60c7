/// Binary raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMap {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), height * width, "binary map extent");
        BinaryMap { height, width, data }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    pub fn pixels(&self) -> Vec<(usize, usize)> {
        (0..self.data.len())
            .filter(|i| self.data[*i])
            .map(|i| (i / self.width, i % self.width))
            .collect()
    }
}

/// Which pixels of each map found a partner.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Correspondence {
    pub matched_pred: Vec<bool>,
    pub matched_gt: Vec<bool>,
}

impl Correspondence {
    pub fn matches(&self) -> usize {
        self.matched_pred.iter().filter(|b| **b).count()
    }
}

/// `tol * sqrt(H^2 + W^2)`.
pub fn tolerance_radius(height: usize, width: usize, tol: f64) -> f64 {
    tol * ((height * height + width * width) as f64).sqrt()
}

/// One-to-one matching of predicted to ground-truth edge pixels within
/// the tolerance radius, greedily taking the closest free pair first.
pub fn match_correspondence(pred: &BinaryMap, gt: &BinaryMap, tol: f64) -> Correspondence {
    let (h, w) = (pred.height, pred.width);
    let r = tolerance_radius(h, w, tol);
    let r2 = r * r;
    let reach = r.floor() as isize;
    let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
    for p in 0..h * w {
        if !pred.data[p] {
            continue;
        }
        let (py, px) = ((p / w) as isize, (p % w) as isize);
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (y, x) = (py + dy, px + dx);
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                let d2 = (dy * dy + dx * dx) as usize;
                let g = y as usize * w + x as usize;
                if gt.data[g] && d2 as f64 <= r2 {
                    pairs.push((d2, p, g));
                }
            }
        }
    }
    pairs.sort_unstable();
    let mut out = Correspondence {
        matched_pred: vec![false; h * w],
        matched_gt: vec![false; h * w],
    };
    for (_, p, g) in pairs {
        if !out.matched_pred[p] && !out.matched_gt[g] {
            out.matched_pred[p] = true;
            out.matched_gt[g] = true;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(h: usize, w: usize, y: usize, x: usize) -> BinaryMap {
        let mut d = vec![false; h * w];
        d[y * w + x] = true;
        BinaryMap::new(h, w, d)
    }

    #[test]
    fn identical_maps_fully_match() {
        let m = BinaryMap::new(3, 3, vec![true, false, true, false, true, false, true, true, false]);
        let c = match_correspondence(&m, &m, 0.01);
        assert_eq!(c.matches(), m.count());
        assert_eq!(c.matched_gt, m.data);
    }

    #[test]
    fn radius_bound() {
        // 30x40 image: diagonal 50, tol 0.04 gives r = 2
        assert!((tolerance_radius(30, 40, 0.04) - 2.0).abs() < 1e-12);
        let p = single(30, 40, 10, 10);
        assert_eq!(match_correspondence(&p, &single(30, 40, 10, 13), 0.04).matches(), 0);
        assert_eq!(match_correspondence(&p, &single(30, 40, 10, 12), 0.04).matches(), 1);
    }

    #[test]
    fn nearest_pair_wins() {
        let mut pred = vec![false; 10];
        pred[2] = true;
        let mut gt = vec![false; 10];
        gt[0] = true;
        gt[3] = true;
        let c = match_correspondence(&BinaryMap::new(1, 10, pred), &BinaryMap::new(1, 10, gt), 0.3);
        assert!(c.matched_gt[3] && !c.matched_gt[0]);
    }
}
