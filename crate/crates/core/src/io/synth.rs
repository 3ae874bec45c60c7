//! Synthetic multi-annotator boundary scenes: random polygons and ellipses
//! on a textured background, with annotators that copy the true boundary
//! of each shape either in place or displaced by one pixel.

use super::netpbm;
use crate::error::{Error, Result};
use crate::eval::BinaryMap;
use crate::tensor::Tensor;
use crate::training::{consensus_labels, AnnotationStack};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::path::Path;

pub const ANNOTATORS: usize = 5;
/// Consensus threshold used for the label files written next to a scene.
pub const LABEL_ETA: f64 = 0.3;
const SHIFT_PROB: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct Scene {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// Region index per pixel, 0 for background; later shapes occlude
    /// earlier ones.
    pub regions: Vec<u8>,
    pub truth: BinaryMap,
    pub annotators: Vec<BinaryMap>,
}

enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, theta: f64 },
    Polygon(Vec<(f64, f64)>),
}

impl Shape {
    fn random(rng: &mut impl Rng, size: usize) -> Shape {
        let s = size as f64;
        let r = rng.gen_range(0.1 * s..0.3 * s);
        let cy = rng.gen_range(r + 2.0..s - r - 2.0);
        let cx = rng.gen_range(r + 2.0..s - r - 2.0);
        if rng.gen_bool(0.5) {
            Shape::Ellipse {
                cy,
                cx,
                ry: rng.gen_range(0.6 * r..r),
                rx: rng.gen_range(0.6 * r..r),
                theta: rng.gen_range(0.0..PI),
            }
        } else {
            let k = rng.gen_range(3..=6);
            let step = 2.0 * PI / k as f64;
            let phase = rng.gen_range(0.0..2.0 * PI);
            let pts = (0..k)
                .map(|i| {
                    let a = phase + step * (i as f64 + rng.gen_range(-0.2..0.2));
                    let rad = rng.gen_range(0.7 * r..r);
                    (cy + rad * a.sin(), cx + rad * a.cos())
                })
                .collect();
            Shape::Polygon(pts)
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Shape::Ellipse { cy, cx, ry, rx, theta } => {
                let (dy, dx) = (y - cy, x - cx);
                let (c, s) = (theta.cos(), theta.sin());
                let u = (dx * c + dy * s) / rx;
                let v = (-dx * s + dy * c) / ry;
                u * u + v * v <= 1.0
            }
            Shape::Polygon(pts) => {
                let mut inside = false;
                for i in 0..pts.len() {
                    let (ay, ax) = pts[i];
                    let (by, bx) = pts[(i + 1) % pts.len()];
                    if (ay > y) != (by > y) && x < ax + (y - ay) * (bx - ax) / (by - ay) {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }
}

/// Low-frequency stripes plus grain around a base color.
struct Texture {
    color: [f64; 3],
    freq: (f64, f64),
    phase: f64,
    amp: f64,
}

impl Texture {
    fn random(rng: &mut impl Rng, taken: &[[f64; 3]]) -> Texture {
        let mut color = [0.0; 3];
        for _ in 0..100 {
            color = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
            let far = taken
                .iter()
                .all(|t| t.iter().zip(&color).map(|(a, b)| (a - b).abs()).sum::<f64>() >= 0.45);
            if far {
                break;
            }
        }
        let a = rng.gen_range(0.0..PI);
        let f = rng.gen_range(0.2..0.8);
        Texture {
            color,
            freq: (f * a.sin(), f * a.cos()),
            phase: rng.gen_range(0.0..2.0 * PI),
            amp: rng.gen_range(0.02..0.06),
        }
    }
}

/// Boundary pixels: those with a 4-neighbor of a lower region index.
fn boundary(regions: &[u8], h: usize, w: usize) -> Vec<bool> {
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let l = regions[i];
            (y > 0 && regions[i - w] < l)
                || (y + 1 < h && regions[i + w] < l)
                || (x > 0 && regions[i - 1] < l)
                || (x + 1 < w && regions[i + 1] < l)
        })
        .collect()
}

pub fn gen_scene(rng: &mut impl Rng, size: usize) -> Scene {
    let (h, w) = (size, size);
    let n = rng.gen_range(2..=4);
    let shapes: Vec<Shape> = (0..n).map(|_| Shape::random(rng, size)).collect();
    let mut textures: Vec<Texture> = Vec::new();
    for _ in 0..=n {
        let taken: Vec<[f64; 3]> = textures.iter().map(|t| t.color).collect();
        textures.push(Texture::random(rng, &taken));
    }

    let mut regions = vec![0u8; h * w];
    for (k, s) in shapes.iter().enumerate() {
        for (i, r) in regions.iter_mut().enumerate() {
            if s.contains((i / w) as f64 + 0.5, (i % w) as f64 + 0.5) {
                *r = k as u8 + 1;
            }
        }
    }

    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        let t = &textures[regions[i] as usize];
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        let stripe = t.amp * (t.freq.0 * y + t.freq.1 * x + t.phase).sin();
        for c in 0..3 {
            let grain = rng.gen_range(-0.02..0.02);
            data[c * h * w + i] = (t.color[c] + stripe + grain).clamp(0.0, 1.0);
        }
    }

    let truth = boundary(&regions, h, w);
    let annotators = (0..ANNOTATORS)
        .map(|_| {
            let shifts: Vec<(isize, isize)> = (0..n)
                .map(|_| {
                    if rng.gen_bool(SHIFT_PROB) {
                        [(0, 1), (0, -1), (1, 0), (-1, 0)][rng.gen_range(0..4)]
                    } else {
                        (0, 0)
                    }
                })
                .collect();
            let mut m = vec![false; h * w];
            for i in (0..h * w).filter(|i| truth[*i]) {
                let (dy, dx) = shifts[regions[i] as usize - 1];
                let (y, x) = ((i / w) as isize + dy, (i % w) as isize + dx);
                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                    m[y as usize * w + x as usize] = true;
                }
            }
            BinaryMap::new(h, w, m)
        })
        .collect();

    Scene {
        image: Tensor::from_parts(vec![3, h, w], data),
        regions,
        truth: BinaryMap::new(h, w, truth),
        annotators,
    }
}

/// `n` scenes from one seed.
pub fn gen_scenes(n: usize, seed: u64, size: usize) -> Result<Vec<Scene>> {
    if size == 0 || !size.is_multiple_of(16) {
        return Err(Error::Config(format!("synthetic size must be a positive multiple of 16, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| gen_scene(&mut rng, size)).collect())
}

pub fn scene_name(index: usize) -> String {
    format!("{index:03}")
}

/// Writes `images/NNN.ppm`, `gt/NNN/annotator_K.pgm` and the consensus
/// `labels/NNN.pgm` under `dir`.
pub fn gen_synthetic(dir: &Path, n: usize, seed: u64, size: usize) -> Result<()> {
    let scenes = gen_scenes(n, seed, size)?;
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(&dir.join("images"))?;
    mkdir(&dir.join("labels"))?;
    for (i, s) in scenes.iter().enumerate() {
        let name = scene_name(i);
        netpbm::save_image(&dir.join("images").join(format!("{name}.ppm")), &s.image)?;
        let gt = dir.join("gt").join(&name);
        mkdir(&gt)?;
        for (k, a) in s.annotators.iter().enumerate() {
            netpbm::save_binary(&gt.join(format!("annotator_{}.pgm", k + 1)), a)?;
        }
        let stack = AnnotationStack::new(size, size, s.annotators.iter().map(|a| a.data.clone()).collect())?;
        let labels = consensus_labels(&stack, LABEL_ETA, false)?;
        let bits = labels.data.iter().map(|l| *l == crate::training::Label::Positive).collect();
        netpbm::save_binary(&dir.join("labels").join(format!("{name}.pgm")), &BinaryMap::new(size, size, bits))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_fraction_within_contract() {
        for seed in 0..100 {
            let s = &gen_scenes(1, seed, 64).unwrap()[0];
            let f = s.truth.count() as f64 / (64.0 * 64.0);
            assert!((0.01..=0.15).contains(&f), "seed {seed}: {f}");
        }
    }

    #[test]
    fn annotators_stay_within_one_pixel() {
        for s in gen_scenes(10, 7, 64).unwrap() {
            let t = &s.truth;
            for a in &s.annotators {
                for (y, x) in a.pixels() {
                    let near = (-1isize..=1).any(|dy| {
                        (-1isize..=1).any(|dx| {
                            dy * dx == 0 && {
                                let (yy, xx) = (y as isize + dy, x as isize + dx);
                                yy >= 0 && xx >= 0 && yy < 64 && xx < 64 && t.data[yy as usize * 64 + xx as usize]
                            }
                        })
                    });
                    assert!(near);
                }
            }
        }
    }

    #[test]
    fn boundaries_are_closed() {
        // every boundary pixel continues in at least two 8-neighbours
        for s in gen_scenes(20, 3, 64).unwrap() {
            let t = &s.truth;
            for (y, x) in t.pixels() {
                let mut k = 0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (yy, xx) = (y as isize + dy, x as isize + dx);
                        if (dy, dx) != (0, 0) && yy >= 0 && xx >= 0 && yy < 64 && xx < 64 {
                            k += t.data[yy as usize * 64 + xx as usize] as usize;
                        }
                    }
                }
                assert!(k >= 2, "open end at ({y},{x})");
            }
        }
    }

    #[test]
    fn rejects_bad_size() {
        assert!(gen_scenes(1, 0, 40).is_err());
    }
}
