//! Finite-difference gradient suite over every layer type and the full
//! model. Layer inputs are registered as parameters so that input and
//! weight gradients are checked the same way.

use crate::bimla::{Decoder, DecoderConfig, DecoderKind};
use crate::error::Result;
use crate::io::synth;
use crate::nn::{param_gradcheck, BatchNorm2d, Conv2d, ConvBnRelu, Deconv2d, DeconvBnRelu, Forward, LayerNorm, Linear};
use crate::params::{ParamStore, Stage};
use crate::pipeline::{Edter, Ffm, ModelConfig, SideHead};
use crate::tensor::gradcheck::check_op;
use crate::tensor::{Tape, Tensor, Var};
use crate::training::{consensus_labels, side_outputs, stage1_loss, stage2_loss, AnnotationStack};
use crate::vit::{Encoder, EncoderConfig, TransformerBlock};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub rel_error: f64,
    pub seconds: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.rel_error < TOLERANCE
    }
}

fn timed(name: &str, f: impl FnOnce() -> Result<f64>) -> CaseResult {
    let t = Instant::now();
    CaseResult {
        name: name.to_owned(),
        rel_error: f().unwrap_or(f64::INFINITY),
        seconds: t.elapsed().as_secs_f64(),
    }
}

/// Builds a layer, feeds it a random input parameter and checks every
/// coordinate of `sum(out * R)`.
fn layer_case<L>(
    seed: u64,
    input: &[usize],
    bn_train: bool,
    build: impl FnOnce(&mut ParamStore, &mut ChaCha8Rng) -> Result<L>,
    forward: impl Fn(&L, &mut Forward, Var) -> Result<Var>,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = build(&mut store, &mut rng)?;
    let x = store.add_param("input", Tensor::randn(input, 1.0, &mut rng), Stage::Global)?;
    let mode = [bn_train, bn_train];
    let shape = {
        let mut fw = Forward::new(&store, Tape::no_grad(), mode);
        let xv = fw.param(x);
        let y = forward(&layer, &mut fw, xv)?;
        fw.tape.shape(y).to_vec()
    };
    let probe = Tensor::randn(&shape, 1.0, &mut rng);
    let checks = param_gradcheck(&store, mode, None, seed, |fw| {
        let xv = fw.param(x);
        let y = forward(&layer, fw, xv)?;
        let p = fw.tape.constant(probe.clone());
        let prod = fw.tape.mul(y, p)?;
        Ok(fw.tape.sum(prod))
    })?;
    Ok(checks.iter().map(|c| c.directional.max(c.elementwise)).fold(0.0, f64::max))
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn tiny_encoder(patch: usize) -> EncoderConfig {
    EncoderConfig {
        patch_size: patch,
        depth: 4,
        embed_dim: 8,
        heads: 2,
        head_dim: 4,
        mlp_ratio: 2,
        taps: [1, 2, 3, 4],
    }
}

/// Primitive tape ops and every layer type, each fully element-wise.
pub fn layer_suite() -> Vec<CaseResult> {
    let g = Stage::Global;
    let mut out = vec![
        timed("op.matmul", || Ok(check_op(&[randn(&[3, 4], 1), randn(&[4, 5], 2)], 1, |t, v| t.matmul(v[0], v[1])))),
        timed("op.bmm", || {
            Ok(check_op(&[randn(&[2, 3, 4], 3), randn(&[2, 4, 2], 4)], 2, |t, v| t.bmm(v[0], v[1])))
        }),
        timed("op.softmax_rows", || Ok(check_op(&[randn(&[4, 6], 5)], 3, |t, v| t.softmax_rows(v[0])))),
        timed("op.gelu", || Ok(check_op(&[randn(&[20], 6)], 4, |t, v| Ok(t.gelu(v[0]))))),
        timed("op.sigmoid", || Ok(check_op(&[randn(&[20], 7)], 5, |t, v| Ok(t.sigmoid(v[0]))))),
        timed("op.resize_bilinear", || {
            Ok(check_op(&[randn(&[1, 2, 4, 5], 8)], 6, |t, v| t.resize_bilinear(v[0], 7, 3)))
        }),
        timed("op.window_partition", || {
            Ok(check_op(&[randn(&[1, 2, 4, 4], 9)], 7, |t, v| t.window_partition(v[0])))
        }),
        timed("op.window_merge", || Ok(check_op(&[randn(&[4, 2, 2, 2], 10)], 8, |t, v| t.window_merge(v[0])))),
        timed("op.concat_crop", || {
            Ok(check_op(&[randn(&[1, 2, 5, 5], 11), randn(&[1, 1, 5, 5], 12)], 9, |t, v| {
                let c = t.concat(&v[..2], 1)?;
                t.crop_center(c, 3, 3)
            }))
        }),
        timed("op.permute", || Ok(check_op(&[randn(&[2, 3, 4], 13)], 10, |t, v| t.permute(v[0], &[2, 0, 1])))),
    ];
    let layers: Vec<(&str, Box<dyn Fn() -> Result<f64>>)> = vec![
        (
            "layer.linear",
            Box::new(move || layer_case(20, &[5, 6], true, |s, r| Linear::new(s, r, "l", 6, 4, true, g), |l, fw, x| l.forward(fw, x))),
        ),
        (
            "layer.layer_norm",
            Box::new(move || {
                layer_case(
                    21,
                    &[5, 6],
                    true,
                    |s, r| {
                        let ln = LayerNorm::new(s, "ln", 6, g)?;
                        s.param_mut(ln.gain).value = Tensor::randn(&[6], 1.0, r);
                        s.param_mut(ln.bias).value = Tensor::randn(&[6], 1.0, r);
                        Ok(ln)
                    },
                    |l, fw, x| l.forward(fw, x),
                )
            }),
        ),
        (
            "layer.conv3x3",
            Box::new(move || {
                layer_case(22, &[2, 3, 5, 5], true, |s, r| Conv2d::same(s, r, "c", 3, 4, 3, true, g), |l, fw, x| l.forward(fw, x))
            }),
        ),
        (
            "layer.conv1x1",
            Box::new(move || {
                layer_case(23, &[2, 3, 4, 4], true, |s, r| Conv2d::same(s, r, "c", 3, 2, 1, true, g), |l, fw, x| l.forward(fw, x))
            }),
        ),
        (
            "layer.deconv",
            Box::new(move || {
                layer_case(24, &[1, 3, 3, 3], true, |s, r| Deconv2d::new(s, r, "d", 3, 2, 4, 2, true, g), |l, fw, x| l.forward(fw, x))
            }),
        ),
        (
            "layer.batch_norm_train",
            Box::new(move || {
                layer_case(25, &[2, 3, 3, 3], true, |s, _| BatchNorm2d::new(s, "bn", 3, g), |l, fw, x| l.forward(fw, x))
            }),
        ),
        (
            "layer.batch_norm_eval",
            Box::new(move || {
                layer_case(
                    26,
                    &[2, 3, 3, 3],
                    false,
                    |s, r| {
                        let bn = BatchNorm2d::new(s, "bn", 3, g)?;
                        s.buffer_mut(bn.running_mean).value = Tensor::randn(&[3], 1.0, r);
                        s.buffer_mut(bn.running_var).value = Tensor::uniform(&[3], 0.5, 2.0, r);
                        Ok(bn)
                    },
                    |l, fw, x| l.forward(fw, x),
                )
            }),
        ),
        (
            "layer.conv_bn_relu",
            Box::new(move || {
                layer_case(27, &[2, 2, 4, 4], true, |s, r| ConvBnRelu::same(s, r, "cbr", 2, 3, 3, g), |l, fw, x| l.forward(fw, x))
            }),
        ),
        (
            "layer.deconv_bn_relu",
            Box::new(move || {
                layer_case(28, &[2, 2, 2, 2], true, |s, r| DeconvBnRelu::new(s, r, "dbr", 2, 3, 4, 2, g), |l, fw, x| l.forward(fw, x))
            }),
        ),
        (
            "layer.transformer_block",
            Box::new(move || {
                let cfg = tiny_encoder(4);
                layer_case(29, &[8, 8], true, |s, r| TransformerBlock::new(s, r, "blk", &cfg, g), |l, fw, x| l.forward(fw, x, 2))
            }),
        ),
        (
            "layer.encoder",
            Box::new(move || {
                let cfg = tiny_encoder(4);
                layer_case(
                    30,
                    &[1, 3, 8, 8],
                    true,
                    |s, r| Encoder::new(s, r, "enc", &cfg, (2, 2), g),
                    |l, fw, x| {
                        let t = l.forward(fw, x)?;
                        fw.tape.concat(&t.taps, 1)
                    },
                )
            }),
        ),
        (
            "layer.decoder_bimla_global",
            Box::new(move || decoder_case(31, DecoderConfig::global(2, 2, 2))),
        ),
        (
            "layer.decoder_bimla_local",
            Box::new(move || decoder_case(32, DecoderConfig::local(2, 2, 2))),
        ),
        (
            "layer.decoder_mla",
            Box::new(move || {
                decoder_case(
                    33,
                    DecoderConfig {
                        kind: DecoderKind::Mla,
                        ..DecoderConfig::global(2, 2, 2)
                    },
                )
            }),
        ),
        (
            "layer.ffm",
            Box::new(move || {
                layer_case(
                    34,
                    &[2, 2, 4, 4],
                    true,
                    |s, r| Ffm::new(s, r, "ffm", 2),
                    |l, fw, x| {
                        let sq = fw.tape.mul(x, x)?;
                        l.forward(fw, x, sq)
                    },
                )
            }),
        ),
        (
            "layer.side_head",
            Box::new(move || {
                let cfg = DecoderConfig::local(2, 2, 2);
                layer_case(35, &[1, 2, 3, 3], true, |s, r| SideHead::new(s, r, "side", &cfg, g), |l, fw, x| l.forward(fw, x))
            }),
        ),
    ];
    out.extend(layers.into_iter().map(|(n, f)| timed(n, f)));
    out
}

fn decoder_case(seed: u64, cfg: DecoderConfig) -> Result<f64> {
    layer_case(
        seed,
        &[1, cfg.embed_dim, 2, 8],
        true,
        |s, r| Decoder::new(s, r, "dec", &cfg, Stage::Global),
        |d, fw, x| {
            // four 2x2 tap maps side by side
            let mut maps = Vec::with_capacity(4);
            for l in 0..4 {
                maps.push(fw.tape.crop(x, 0, 2 * l, 2, 2)?);
            }
            Ok(d.decode_maps(fw, [maps[0], maps[1], maps[2], maps[3]])?.features)
        },
    )
}

/// Phase-1 and phase-2 losses of the model on one synthetic scene. Each
/// trainable tensor is checked along a random direction and at `coords`
/// random coordinates.
pub fn model_suite(cfg: &ModelConfig, coords: usize, seed: u64, mut log: impl FnMut(&CaseResult)) -> Result<Vec<CaseResult>> {
    let (h, w) = cfg.image_size;
    let size = h.max(w);
    let scene = synth::gen_scenes(1, seed, size.div_ceil(16) * 16)?.remove(0);
    let crop = |t: &Tensor| -> Tensor {
        let s = t.shape()[1];
        let mut d = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                d.extend_from_slice(&t.data()[c * s * s + y * s..c * s * s + y * s + w]);
            }
        }
        Tensor::from_parts(vec![1, 3, h, w], d)
    };
    let image = crop(&scene.image);
    let s = scene.annotators[0].width;
    let stack = AnnotationStack::new(s, s, scene.annotators.iter().map(|a| a.data.clone()).collect())?;
    let labels = vec![consensus_labels(&stack, 0.3, false)?.crop(0, 0, h, w)];
    let lambda = 0.4;

    let mut model = Edter::new(cfg, seed)?;
    let mut out = Vec::new();
    let mut run = |model: &Edter, phase: u8| -> Result<()> {
        let bn = if phase == 1 { [true, false] } else { [false, true] };
        let arch = &model.arch;
        let t = Instant::now();
        let checks = param_gradcheck(&model.store, bn, Some(coords), seed + phase as u64, |fw| {
            let x = fw.tape.constant(image.clone());
            let s1 = arch.run_stage1(fw, x)?;
            if phase == 1 {
                let sides = side_outputs(arch, fw, Stage::Global, &s1.paths)?;
                stage1_loss(&mut fw.tape, s1.edge, &sides, &labels, lambda)
            } else {
                let s2 = arch.run_stage2(fw, x, Some(s1.features))?;
                let sides = side_outputs(arch, fw, Stage::Local, &s2.paths)?;
                stage2_loss(&mut fw.tape, s2.edge, &sides, &labels, lambda)
            }
        })?;
        let per = t.elapsed().as_secs_f64() / checks.len().max(1) as f64;
        for c in checks {
            let r = CaseResult {
                name: format!("model.phase{phase}.{}", c.name),
                rel_error: c.directional.max(c.elementwise),
                seconds: per,
            };
            log(&r);
            out.push(r);
        }
        Ok(())
    };
    model.store.set_frozen(Stage::Local, true);
    run(&model, 1)?;
    if cfg.two_stage {
        model.store.set_frozen(Stage::Local, false);
        model.store.set_frozen(Stage::Global, true);
        run(&model, 2)?;
    }
    Ok(out)
}
