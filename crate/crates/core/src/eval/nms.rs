use crate::pipeline::EdgeMap;

const SIGMA: f64 = 1.0;
const RADIUS: usize = 2;

fn gaussian_taps() -> [f64; 2 * RADIUS + 1] {
    let mut k = [0.0; 2 * RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - RADIUS as f64;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable 5x5 Gaussian blur with replicated borders.
pub fn smooth(map: &EdgeMap) -> Vec<f64> {
    let (h, w) = (map.height, map.width);
    let k = gaussian_taps();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * map.data[y * w + clamp(x as isize + i as isize - RADIUS as isize, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * rows[clamp(y as isize + i as isize - RADIUS as isize, h) * w + x])
                .sum();
        }
    }
    out
}

/// Bilinear sample at `(y, x)`, or `None` when the 2x2 support leaves
/// the image.
fn sample(map: &EdgeMap, y: f64, x: f64) -> Option<f64> {
    let (h, w) = (map.height as f64, map.width as f64);
    if y < 0.0 || x < 0.0 || y > h - 1.0 || x > w - 1.0 {
        return None;
    }
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(map.height - 1), (x0 + 1).min(map.width - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = map.get(y0, x0) * (1.0 - fx) + map.get(y0, x1) * fx;
    let bot = map.get(y1, x0) * (1.0 - fx) + map.get(y1, x1) * fx;
    Some(top * (1.0 - fy) + bot * fy)
}

/// Suppresses pixels that are not maximal along the gradient direction of
/// the smoothed map. Survivors keep their value; ties survive.
pub fn nms_thin(map: &EdgeMap) -> EdgeMap {
    let (h, w) = (map.height, map.width);
    let s = smooth(map);
    let at = |y: usize, x: usize| s[y * w + x];
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = map.get(y, x);
            if v == 0.0 {
                continue;
            }
            let gx = (at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1))) / 2.0;
            let gy = (at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x)) / 2.0;
            let mag = gx.hypot(gy);
            let keep = mag == 0.0 || {
                let (dy, dx) = (gy / mag, gx / mag);
                [1.0, -1.0].iter().all(|sign| {
                    sample(map, y as f64 + sign * dy, x as f64 + sign * dx).is_none_or(|n| v >= n)
                })
            };
            if keep {
                out[y * w + x] = v;
            }
        }
    }
    EdgeMap {
        height: h,
        width: w,
        data: out,
    }
}
