//! End-to-end acceptance checks. Each test prints one
//! `ACCEPTANCE <name>: PASS|FAIL <detail>` line to stderr (uncaptured) and
//! then asserts. Tests are serialized so that wall-clock budgets are
//! measured on an otherwise idle core.

use edter::eval::{evaluate, match_correspondence, tolerance_radius, BinaryMap, DEFAULT_TOL};
use edter::gradsuite;
use edter::io::synth;
use edter::nn::Forward;
use edter::params::Stage;
use edter::pipeline::{EdgeMap, Edter, ModelConfig};
use edter::training::{
    consensus_labels, side_outputs, stage1_loss, stage2_loss, train_two_phase, weighted_bce, AnnotationStack,
    LabelMap, Sample, TrainConfig,
};
use edter::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "ACCEPTANCE {name}: {verdict} {detail}");
    assert!(pass, "{name}: {detail}");
}

// ---------------------------------------------------------------- gradient

#[test]
fn gradient_suite() {
    let _g = serial();
    let t0 = Instant::now();
    let mut results = gradsuite::layer_suite();
    results.extend(gradsuite::model_suite(&ModelConfig::toy(64), 2, 0, |_| {}).unwrap());
    let secs = t0.elapsed().as_secs_f64();
    let failed: Vec<&str> = results.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    let worst = results.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    report(
        "gradient-suite",
        failed.is_empty() && secs < 600.0,
        &format!(
            "{} checks, {} failed {:?}, max rel err {worst:.2e} (< 1e-4), {secs:.0}s (< 600s)",
            results.len(),
            failed.len(),
            failed
        ),
    );
}

// ------------------------------------------------------- shape / normalize

const EXTENTS: [usize; 4] = [32, 64, 96, 160];

fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(&[1, 3, h, w], 0.0, 1.0, &mut rng)
}

/// Window `k` (row-major over a 2x2 grid) of item `b` read directly.
fn naive_partition(x: &Tensor) -> Vec<f64> {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (hh, hw) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(x.numel());
    for bi in 0..b {
        for k in 0..4 {
            let (oy, ox) = ((k / 2) * hh, (k % 2) * hw);
            for ci in 0..c {
                for y in 0..hh {
                    for xx in 0..hw {
                        out.push(x.data()[((bi * c + ci) * h + oy + y) * w + ox + xx]);
                    }
                }
            }
        }
    }
    out
}

#[test]
fn shape_and_normalization_suite() {
    let _g = serial();
    let mut problems = Vec::new();
    let mut worst_row = 0.0f64;
    let mut rows = 0usize;
    for &h in &EXTENTS {
        for &w in &EXTENTS {
            let mut cfg = ModelConfig::toy(64);
            cfg.image_size = (h, w);
            let m = Edter::new(&cfg, 3).unwrap();
            let mut fw = Forward::eval(&m.store);
            fw.capture_attention(true);
            let x = fw.tape.constant(random_image(h, w, (h * 1000 + w) as u64));
            let s1 = m.arch.run_stage1(&mut fw, x).unwrap();
            let s2 = m.arch.run_stage2(&mut fw, x, Some(s1.features)).unwrap();
            let mut outs = vec![("E_g", s1.edge), ("E_r", s2.edge)];
            for (stage, paths) in [(Stage::Global, &s1.paths), (Stage::Local, &s2.paths)] {
                for s in side_outputs(&m.arch, &mut fw, stage, paths).unwrap() {
                    outs.push(("side", s));
                }
            }
            for (name, v) in outs {
                if fw.tape.shape(v) != [1, 1, h, w] {
                    problems.push(format!("{name} at {h}x{w} has shape {:?}", fw.tape.shape(v)));
                }
            }
            for a in fw.attention() {
                let n = *a.shape().last().unwrap();
                for row in a.data().chunks(n) {
                    worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
                    rows += 1;
                }
            }
        }
    }
    if worst_row > 1e-12 {
        problems.push(format!("attention row sum off by {worst_row:.2e}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let shape = [
            rng.gen_range(1..3),
            rng.gen_range(1..4),
            2 * rng.gen_range(1..9),
            2 * rng.gen_range(1..9),
        ];
        let t = Tensor::randn(&shape, 1.0, &mut rng);
        let mut tape = Tape::no_grad();
        let v = tape.constant(t.clone());
        let p = tape.window_partition(v).unwrap();
        if tape.value(p).data() != naive_partition(&t).as_slice() {
            problems.push(format!("partition layout wrong for {shape:?}"));
        }
        let back = tape.window_merge(p).unwrap();
        if tape.value(back) != &t {
            problems.push(format!("partition round trip not bit-exact for {shape:?}"));
        }
    }
    report(
        "shape-normalization",
        problems.is_empty(),
        &format!(
            "16 extents x (2 maps + 16 sides), {rows} attention rows (max |sum-1| {worst_row:.1e}), 50 partition round trips; {problems:?}"
        ),
    );
}

// ---------------------------------------------------------------- losses

#[test]
fn loss_arithmetic() {
    let _g = serial();
    let mut problems = Vec::new();

    let y = LabelMap::from_binary(1, 2, &[true, false]).unwrap();
    let l = weighted_bce(&[0.5, 0.5], &y).unwrap();
    let log2_err = (l - std::f64::consts::LN_2).abs();
    if log2_err >= 1e-12 {
        problems.push(format!("log 2 case off by {log2_err:e}"));
    }

    // Stage objectives against main + lambda * sum(sides), accumulated
    // in the same order, compared bit for bit.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut lambda_cases = 0;
    for case in 0..40 {
        let (h, w) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let n = h * w;
        let bits: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        let labels = vec![LabelMap::from_binary(h, w, &bits).unwrap()];
        let maps: Vec<Vec<f64>> = (0..9).map(|_| (0..n).map(|_| rng.gen_range(0.01..0.99)).collect()).collect();
        let main = weighted_bce(&maps[0], &labels[0]).unwrap();
        let side = maps[1..]
            .iter()
            .map(|m| weighted_bce(m, &labels[0]).unwrap())
            .reduce(|a, b| a + b)
            .unwrap();
        for lambda in [0.0, 0.25, 0.4, 1.0, 3.7] {
            let mut tape = Tape::no_grad();
            let vars: Vec<_> = maps
                .iter()
                .map(|m| tape.constant(Tensor::new(vec![1, 1, h, w], m.clone()).unwrap()))
                .collect();
            let want = if lambda == 0.0 { main } else { main + lambda * side };
            for stage in [1, 2] {
                let got = if stage == 1 {
                    stage1_loss(&mut tape, vars[0], &vars[1..], &labels, lambda)
                } else {
                    stage2_loss(&mut tape, vars[0], &vars[1..], &labels, lambda)
                };
                let got = tape.value(got.unwrap()).data()[0];
                if got.to_bits() != want.to_bits() {
                    problems.push(format!("case {case} stage {stage} lambda {lambda}: {got} vs {want}"));
                }
                lambda_cases += 1;
            }
        }
    }

    // alpha + positive fraction == 1 for every count split up to 64x64.
    let mut alpha_cases = 0u64;
    for total in 1..=4096usize {
        for pos in 0..=total {
            let a = (total - pos) as f64 / total as f64;
            if a + pos as f64 / total as f64 != 1.0 {
                problems.push(format!("alpha complement fails at {pos}/{total}"));
            }
            alpha_cases += 1;
        }
    }
    for _ in 0..200 {
        let n = rng.gen_range(1..200);
        let p = rng.gen_range(0.0..1.0);
        let bits: Vec<bool> = (0..n).map(|_| rng.gen_bool(p)).collect();
        let y = LabelMap::from_binary(1, n, &bits).unwrap();
        if y.alpha() + y.positives() as f64 / n as f64 != 1.0 {
            problems.push(format!("alpha complement fails on label map of {n}"));
        }
    }
    report(
        "loss-arithmetic",
        problems.is_empty(),
        &format!(
            "|l - log 2| = {log2_err:.1e}; {lambda_cases} lambda-linearity cases bit-exact; {alpha_cases} alpha splits + 200 label maps exact; {problems:?}"
        ),
    );
}

// ------------------------------------------------------ training protocol

#[test]
fn two_phase_protocol() {
    let _g = serial();
    let scenes = synth::gen_scenes(2, 9, 32).unwrap();
    let data = samples(&scenes, 32);
    let mut m = Edter::new(&ModelConfig::toy(32), 4).unwrap();
    let before_local = m.store.stage_digest(Stage::Local);
    let cfg = TrainConfig {
        iters_stage1: 4,
        iters_stage2: 4,
        batch: 2,
        crop: 32,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let r = train_two_phase(&mut m, &data, &cfg, |_| {}).unwrap();
    let after_global = m.store.stage_digest(Stage::Global);
    let after_local = m.store.stage_digest(Stage::Local);
    let frozen = after_global == r.stage1_digest;
    let local_trained = after_local != before_local;
    report(
        "two-phase",
        frozen && local_trained,
        &format!("Stage-I digest unchanged by phase 2: {frozen}; Stage-II parameters moved: {local_trained}"),
    );
}

fn samples(scenes: &[synth::Scene], size: usize) -> Vec<Sample> {
    scenes
        .iter()
        .map(|s| {
            let stack = AnnotationStack::new(size, size, s.annotators.iter().map(|a| a.data.clone()).collect()).unwrap();
            Sample {
                image: s.image.clone(),
                labels: consensus_labels(&stack, 0.3, false).unwrap(),
            }
        })
        .collect()
}

struct Trained {
    ods: f64,
    summary: String,
    iterations: usize,
    seconds: f64,
}

const OVERFIT_ITERS: usize = 300;

fn overfit(two_stage: bool) -> Trained {
    let scenes = synth::gen_scenes(8, 0, 64).unwrap();
    let data = samples(&scenes, 64);
    let mut cfg = ModelConfig::toy(64);
    cfg.two_stage = two_stage;
    let mut m = Edter::new(&cfg, 0).unwrap();
    let tc = TrainConfig {
        iters_stage1: OVERFIT_ITERS,
        iters_stage2: OVERFIT_ITERS,
        batch: 8,
        crop: 64,
        lr: 1e-4,
        seed: 0,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let r = train_two_phase(&mut m, &data, &tc, |_| {}).unwrap();
    let items: Vec<(EdgeMap, Vec<BinaryMap>)> = scenes
        .iter()
        .map(|s| (m.infer(&s.image).unwrap(), s.annotators.clone()))
        .collect();
    let e = evaluate(&items, DEFAULT_TOL).unwrap();
    Trained {
        ods: e.ods,
        summary: e.summary(),
        iterations: r.losses.len(),
        seconds: t0.elapsed().as_secs_f64(),
    }
}

static TWO_STAGE: OnceLock<Trained> = OnceLock::new();
static ONE_STAGE: OnceLock<Trained> = OnceLock::new();

#[test]
fn overfit_experiment() {
    let _g = serial();
    let t = TWO_STAGE.get_or_init(|| overfit(true));
    report(
        "overfit",
        t.ods >= 0.85 && t.iterations <= 5000 && t.seconds < 7200.0,
        &format!(
            "8 synthetic 64x64 scenes, {} iterations, {:.0}s: {} (need ODS >= 0.85 at tol {DEFAULT_TOL})",
            t.iterations, t.seconds, t.summary
        ),
    );
}

#[test]
fn ablation_direction() {
    let _g = serial();
    let two = TWO_STAGE.get_or_init(|| overfit(true));
    let one = ONE_STAGE.get_or_init(|| overfit(false));
    report(
        "ablation",
        two.ods >= one.ods - 0.02,
        &format!(
            "two-stage ODS {:.4} vs stage1-only {:.4} (delta {:+.4}, need >= -0.02); desk-scale synthetic delta, not comparable to full-scale gains",
            two.ods,
            one.ods,
            two.ods - one.ods
        ),
    );
}

// --------------------------------------------------------- evaluation bench

/// Maximum-cardinality bipartite matching within radius (augmenting paths).
fn optimal_matches(pred: &BinaryMap, gt: &BinaryMap, r: f64) -> usize {
    let ps = pred.pixels();
    let gs = gt.pixels();
    let near = |a: (usize, usize), b: (usize, usize)| {
        let (dy, dx) = (a.0 as f64 - b.0 as f64, a.1 as f64 - b.1 as f64);
        dy * dy + dx * dx <= r * r
    };
    let adj: Vec<Vec<usize>> = ps
        .iter()
        .map(|p| (0..gs.len()).filter(|g| near(*p, gs[*g])).collect())
        .collect();
    fn augment(u: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &g in &adj[u] {
            if !seen[g] {
                seen[g] = true;
                if owner[g].is_none_or(|o| augment(o, adj, seen, owner)) {
                    owner[g] = Some(u);
                    return true;
                }
            }
        }
        false
    }
    let mut owner = vec![None; gs.len()];
    (0..ps.len())
        .filter(|u| augment(*u, &adj, &mut vec![false; gs.len()], &mut owner))
        .count()
}

fn random_sparse(rng: &mut ChaCha8Rng, n: usize) -> BinaryMap {
    let k = rng.gen_range(0..=16);
    let mut d = vec![false; n * n];
    for i in rand::seq::index::sample(rng, n * n, k) {
        d[i] = true;
    }
    BinaryMap::new(n, n, d)
}

/// Reference scorer: greedy nearest-first matching found by repeated
/// global minimum search, a plain threshold sweep and the dataset
/// measures written out from their definitions.
mod brute {
    use super::BinaryMap;

    #[derive(Clone, Copy, Default)]
    pub struct C {
        pub mp: usize,
        pub tp: usize,
        pub mg: usize,
        pub tg: usize,
    }

    fn prec(c: C) -> f64 {
        if c.tp == 0 {
            1.0
        } else {
            c.mp as f64 / c.tp as f64
        }
    }

    fn rec(c: C) -> f64 {
        if c.tg == 0 {
            0.0
        } else {
            c.mg as f64 / c.tg as f64
        }
    }

    fn f(c: C) -> f64 {
        let (p, r) = (prec(c), rec(c));
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn greedy(pred: &[bool], gt: &[bool], w: usize, r2: f64) -> (Vec<bool>, usize) {
        let mut mp = vec![false; pred.len()];
        let mut mg = vec![false; gt.len()];
        let mut count = 0;
        loop {
            let mut best: Option<(usize, usize, usize)> = None;
            for p in (0..pred.len()).filter(|p| pred[*p] && !mp[*p]) {
                for g in (0..gt.len()).filter(|g| gt[*g] && !mg[*g]) {
                    let dy = (p / w) as i64 - (g / w) as i64;
                    let dx = (p % w) as i64 - (g % w) as i64;
                    let d2 = (dy * dy + dx * dx) as usize;
                    if d2 as f64 <= r2 && best.is_none_or(|b| (d2, p, g) < b) {
                        best = Some((d2, p, g));
                    }
                }
            }
            match best {
                Some((_, p, g)) => {
                    mp[p] = true;
                    mg[g] = true;
                    count += 1;
                }
                None => return (mp, count),
            }
        }
    }

    /// `(ods, ois, ap)` of already-thin prediction maps.
    pub fn score(items: &[(Vec<f64>, usize, usize, Vec<BinaryMap>)], tol: f64) -> (f64, f64, f64) {
        let ts: Vec<f64> = (1..=99).map(|k| k as f64 / 100.0).collect();
        let per_image: Vec<Vec<C>> = items
            .iter()
            .map(|(v, h, w, gts)| {
                let r = tol * ((h * h + w * w) as f64).sqrt();
                ts.iter()
                    .map(|t| {
                        let pred: Vec<bool> = v.iter().map(|x| x >= t).collect();
                        let mut hit = vec![false; pred.len()];
                        let mut c = C {
                            tp: pred.iter().filter(|b| **b).count(),
                            ..C::default()
                        };
                        for g in gts {
                            let (mp, n) = greedy(&pred, &g.data, *w, r * r);
                            c.mg += n;
                            c.tg += g.count();
                            for i in 0..hit.len() {
                                hit[i] = hit[i] || mp[i];
                            }
                        }
                        c.mp = hit.iter().filter(|b| **b).count();
                        c
                    })
                    .collect()
            })
            .collect();
        let pool = |pick: &dyn Fn(usize) -> usize| {
            let mut s = C::default();
            for (i, img) in per_image.iter().enumerate() {
                let c = img[pick(i)];
                s.mp += c.mp;
                s.tp += c.tp;
                s.mg += c.mg;
                s.tg += c.tg;
            }
            s
        };
        let curve: Vec<C> = (0..ts.len()).map(|k| pool(&|_| k)).collect();
        let ods = curve.iter().map(|c| f(*c)).fold(f64::MIN, f64::max);
        let argbest = |cs: &[C]| {
            let best = cs.iter().map(|c| f(*c)).fold(f64::MIN, f64::max);
            cs.iter().position(|c| f(*c) == best).unwrap()
        };
        let ois = f(pool(&|i| argbest(&per_image[i])));
        // interpolated precision at recall r: best precision at recall >= r
        let pts: Vec<(f64, f64)> = curve.iter().map(|c| (rec(*c), prec(*c))).collect();
        let interp = |r: f64| pts.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(f64::MIN, f64::max);
        let mut rs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        rs.sort_by(f64::total_cmp);
        rs.dedup();
        let mut ap = 0.0;
        let (mut r0, mut p0) = (0.0, interp(rs[0]));
        for r in rs {
            let p = interp(r);
            ap += (r - r0) * (p + p0) / 2.0;
            (r0, p0) = (r, p);
        }
        (ods, ois, ap)
    }
}

fn lines(h: usize, w: usize, segs: &[(usize, usize, usize, usize, f64)]) -> Vec<f64> {
    // (y0, x0, dy/dx direction code, length, value); code 0 horizontal,
    // 1 vertical, 2 diagonal
    let mut v = vec![0.0; h * w];
    for &(y0, x0, dir, len, val) in segs {
        for i in 0..len {
            let (y, x) = match dir {
                0 => (y0, x0 + i),
                1 => (y0 + i, x0),
                _ => (y0 + i, x0 + i),
            };
            v[y * w + x] = val;
        }
    }
    v
}

fn bin(h: usize, w: usize, segs: &[(usize, usize, usize, usize)]) -> BinaryMap {
    let s: Vec<_> = segs.iter().map(|&(a, b, c, d)| (a, b, c, d, 1.0)).collect();
    BinaryMap::new(h, w, lines(h, w, &s).iter().map(|v| *v > 0.0).collect())
}

fn handcrafted() -> Vec<(Vec<f64>, usize, usize, Vec<BinaryMap>)> {
    vec![
        (
            lines(12, 12, &[(2, 4, 1, 8, 0.8), (1, 10, 0, 1, 0.3)]),
            12,
            12,
            vec![bin(12, 12, &[(1, 3, 1, 10), (8, 7, 0, 4)])],
        ),
        (
            lines(12, 16, &[(5, 1, 0, 14, 0.6), (9, 3, 0, 6, 0.25)]),
            12,
            16,
            vec![bin(12, 16, &[(5, 2, 0, 12)]), bin(12, 16, &[(6, 0, 0, 16)])],
        ),
        (
            lines(14, 14, &[(1, 1, 2, 5, 0.9), (7, 7, 2, 5, 0.45)]),
            14,
            14,
            vec![bin(14, 14, &[(1, 2, 2, 11)]), bin(14, 14, &[(2, 1, 2, 10)])],
        ),
    ]
}

#[test]
fn evaluation_oracle() {
    let _g = serial();
    let mut problems = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let pairs: Vec<(BinaryMap, BinaryMap)> = (0..50)
        .map(|_| (random_sparse(&mut rng, 8), random_sparse(&mut rng, 8)))
        .collect();
    let mut ratios = Vec::new();
    for tol in [DEFAULT_TOL, 0.1, 0.15, 0.25] {
        let r = tolerance_radius(8, 8, tol);
        let (mut greedy, mut optimal, mut worst) = (0, 0, 1.0f64);
        for (p, g) in &pairs {
            let c = match_correspondence(p, g, tol);
            let o = optimal_matches(p, g, r);
            if c.matches() > o {
                problems.push(format!("greedy exceeds optimum at tol {tol}"));
            }
            greedy += c.matches();
            optimal += o;
            if o > 0 {
                worst = worst.min(c.matches() as f64 / o as f64);
            }
        }
        let ratio = if optimal == 0 { 1.0 } else { greedy as f64 / optimal as f64 };
        if ratio < 0.9 {
            problems.push(format!("greedy recovers {ratio:.3} of optimum at tol {tol}"));
        }
        ratios.push(format!("r={r:.2}: {greedy}/{optimal}={ratio:.3} (worst pair {worst:.2})"));
    }

    let mut worst_diff = 0.0f64;
    for tol in [DEFAULT_TOL, 0.09] {
        let items = handcrafted();
        let pipeline_items: Vec<(EdgeMap, Vec<BinaryMap>)> = items
            .iter()
            .map(|(v, h, w, g)| (EdgeMap::new(*h, *w, v.clone()).unwrap(), g.clone()))
            .collect();
        let e = evaluate(&pipeline_items, tol).unwrap();
        let (ods, ois, ap) = brute::score(&items, tol);
        for (name, a, b) in [("ODS", e.ods, ods), ("OIS", e.ois, ois), ("AP", e.ap, ap)] {
            worst_diff = worst_diff.max((a - b).abs());
            if (a - b).abs() > 1e-9 {
                problems.push(format!("{name} at tol {tol}: pipeline {a} vs reference {b}"));
            }
        }
    }
    report(
        "evaluation-oracle",
        problems.is_empty(),
        &format!(
            "greedy/optimal on 50 random 8x8 pairs: {}; 3-image set max |pipeline - reference| {worst_diff:.1e}; {problems:?}",
            ratios.join(", ")
        ),
    );
}

// ------------------------------------------------------------ determinism

fn edter(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_edter")).args(args).output().unwrap();
    assert!(out.status.success(), "edter {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn determinism() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let d = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    edter(&["synth", "--n", "2", "--seed", "4", "--size", "32", "--out", &d("data")]);
    std::fs::write(
        d("run.cfg"),
        format!(
            "image_height=32\nimage_width=32\niters_stage1=3\niters_stage2=3\nbatch=2\nlr=0.001\nseed=7\ndata={}\nout={}\n",
            d("data"),
            d("run")
        ),
    )
    .unwrap();

    let mut problems = Vec::new();
    let mut runs = Vec::new();
    for _ in 0..2 {
        let train_out = edter(&["train", "--config", &d("run.cfg"), "--log-every", "0"]).stdout;
        let run = snapshot(&tmp.path().join("run"));
        let ckpt = d("run/model.ckpt");
        edter(&["infer", "--ckpt", &ckpt, "--in", &d("data/images"), "--out", &d("pred")]);
        edter(&["infer", "--ckpt", &ckpt, "--in", &d("data/images"), "--out", &d("raw"), "--raw"]);
        edter(&["infer", "--ckpt", &ckpt, "--in", &d("data/images/000.ppm"), "--out", &d("ms.epfm"), "--ms"]);
        let eval_out = edter(&["eval", "--pred", &d("raw"), "--gt", &d("data/gt"), "--out", &d("eval")]).stdout;
        runs.push((
            train_out,
            run,
            snapshot(&tmp.path().join("pred")),
            snapshot(&tmp.path().join("raw")),
            std::fs::read(d("ms.epfm")).unwrap(),
            eval_out,
            snapshot(&tmp.path().join("eval")),
        ));
        for sub in ["run", "pred", "raw", "eval"] {
            std::fs::remove_dir_all(tmp.path().join(sub)).unwrap();
        }
    }
    let (a, b) = (&runs[0], &runs[1]);
    let checks = [
        ("train stdout", a.0 == b.0),
        ("train outputs", a.1 == b.1),
        ("infer pgm", a.2 == b.2),
        ("infer epfm", a.3 == b.3),
        ("infer multi-scale", a.4 == b.4),
        ("eval stdout", a.5 == b.5),
        ("eval outputs", a.6 == b.6),
    ];
    for (name, same) in checks {
        if !same {
            problems.push(name);
        }
    }
    let files = a.1.len() + a.2.len() + a.3.len() + 1 + a.6.len();
    report(
        "determinism",
        problems.is_empty() && a.1.len() == 3 && a.6.len() == 2,
        &format!("train/infer/eval rerun, {files} output files compared byte for byte; differing: {problems:?}"),
    );
}

