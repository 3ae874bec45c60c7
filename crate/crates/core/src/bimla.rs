//! Multi-level aggregation decoder: token maps from four encoder taps are
//! aggregated along a top-down and a bottom-up path, upsampled to pixel
//! resolution, concatenated and smoothed.

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBnRelu, DeconvBnRelu, Forward};
use crate::params::{ParamStore, Stage};
use crate::tensor::{Tape, Var};
use crate::vit::EncoderTaps;
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// 3x3 path and smoothing convs, 16x upsampling.
    Global,
    /// 1x1 path and smoothing convs, 8x upsampling.
    Local,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    /// Top-down and bottom-up paths, learned deconvolution upsampling.
    BiMla,
    /// Top-down path only, bilinear upsampling.
    Mla,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub variant: Variant,
    pub kind: DecoderKind,
    /// Width of the incoming tokens.
    pub embed_dim: usize,
    pub path_channels: usize,
    pub smooth_channels: usize,
    /// `(kernel, stride)` of the two transposed convolutions.
    pub upsample: [(usize, usize); 2],
}

impl DecoderConfig {
    pub fn global(embed_dim: usize, path_channels: usize, smooth_channels: usize) -> Self {
        DecoderConfig {
            variant: Variant::Global,
            kind: DecoderKind::BiMla,
            embed_dim,
            path_channels,
            smooth_channels,
            upsample: [(4, 2), (16, 8)],
        }
    }

    pub fn local(embed_dim: usize, path_channels: usize, smooth_channels: usize) -> Self {
        DecoderConfig {
            variant: Variant::Local,
            upsample: [(4, 2), (8, 4)],
            ..Self::global(embed_dim, path_channels, smooth_channels)
        }
    }

    /// Path and smoothing kernel size.
    pub fn kernel(&self) -> usize {
        match self.variant {
            Variant::Global => 3,
            Variant::Local => 1,
        }
    }

    pub fn scale(&self) -> usize {
        self.upsample[0].1 * self.upsample[1].1
    }

    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if self.embed_dim == 0 || self.path_channels == 0 || self.smooth_channels == 0 {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        if self.scale() != patch_size {
            return Err(Error::Config(format!(
                "upsampling factor {} does not match patch size {patch_size}",
                self.scale()
            )));
        }
        for (k, s) in self.upsample {
            if s == 0 || k < s || (k - s) % 2 != 0 {
                return Err(Error::Config(format!("deconvolution kernel {k} with stride {s} cannot be cropped centrally")));
            }
        }
        Ok(())
    }
}

/// Path outputs at token-grid resolution, lowest level first.
#[derive(Clone, Copy, Debug)]
pub struct PathFeatures {
    pub top_down: [Var; 4],
    pub bottom_up: Option<[Var; 4]>,
}

impl PathFeatures {
    /// `t` maps followed by `b` maps.
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.top_down.to_vec();
        if let Some(b) = self.bottom_up {
            v.extend(b);
        }
        v
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    /// `[B, F, H, W]` pixel-level features.
    pub features: Var,
    pub paths: PathFeatures,
}

/// `[B * h * w, C]` tokens to `[B, C, h, w]` maps, row-major over the grid.
pub fn reshape_tokens(tape: &mut Tape, tokens: Var, batch: usize, grid: (usize, usize)) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 2 || s[0] != batch * grid.0 * grid.1 {
        return Err(Error::shape("reshape_tokens", &s, &[batch * grid.0 * grid.1, 0]));
    }
    let x = tape.reshape(tokens, &[batch, grid.0, grid.1, s[1]])?;
    tape.permute(x, &[0, 3, 1, 2])
}

/// Inverse of [`reshape_tokens`].
pub fn flatten_maps(tape: &mut Tape, maps: Var) -> Result<Var> {
    let s = tape.shape(maps).to_vec();
    let x = tape.permute(maps, &[0, 2, 3, 1])?;
    tape.reshape(x, &[s[0] * s[2] * s[3], s[1]])
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub lateral: Vec<Conv2d>,
    pub top_down: Vec<Conv2d>,
    pub bottom_up: Vec<Conv2d>,
    pub upsample: Vec<[DeconvBnRelu; 2]>,
    pub smooth: Vec<ConvBnRelu>,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cfg: &DecoderConfig,
        stage: Stage,
    ) -> Result<Self> {
        let (c, p, f, k) = (cfg.embed_dim, cfg.path_channels, cfg.smooth_channels, cfg.kernel());
        let mut lateral = Vec::new();
        let mut top_down = Vec::new();
        let mut bottom_up = Vec::new();
        for l in 0..4 {
            lateral.push(Conv2d::same(store, rng, &format!("{name}.lateral{l}"), c, p, 1, true, stage)?);
            top_down.push(Conv2d::same(store, rng, &format!("{name}.td{l}"), p, p, k, true, stage)?);
            if cfg.kind == DecoderKind::BiMla {
                bottom_up.push(Conv2d::same(store, rng, &format!("{name}.bu{l}"), p, p, k, true, stage)?);
            }
        }
        let mut upsample = Vec::new();
        if cfg.kind == DecoderKind::BiMla {
            let [(k1, s1), (k2, s2)] = cfg.upsample;
            for i in 0..8 {
                upsample.push([
                    DeconvBnRelu::new(store, rng, &format!("{name}.up{i}.0"), p, p, k1, s1, stage)?,
                    DeconvBnRelu::new(store, rng, &format!("{name}.up{i}.1"), p, p, k2, s2, stage)?,
                ]);
            }
        }
        let levels = if cfg.kind == DecoderKind::BiMla { 8 } else { 4 };
        let smooth = vec![
            ConvBnRelu::same(store, rng, &format!("{name}.smooth0"), levels * p, f, k, stage)?,
            ConvBnRelu::same(store, rng, &format!("{name}.smooth1"), f, f, k, stage)?,
            ConvBnRelu::same(store, rng, &format!("{name}.smooth2"), f, f, k, stage)?,
            ConvBnRelu::same(store, rng, &format!("{name}.smooth3"), f, f, 1, stage)?,
        ];
        Ok(Decoder {
            cfg: cfg.clone(),
            lateral,
            top_down,
            bottom_up,
            upsample,
            smooth,
        })
    }

    fn laterals(&self, fw: &mut Forward, maps: &[Var; 4]) -> Result<[Var; 4]> {
        let mut out = *maps;
        for (o, conv) in out.iter_mut().zip(&self.lateral) {
            *o = conv.forward(fw, *o)?;
        }
        Ok(out)
    }

    /// `s_top = a_top`, `s_l = a_l + s_{l+1}`, `t_l = conv(s_l)`.
    pub fn top_down_path(&self, fw: &mut Forward, laterals: &[Var; 4]) -> Result<[Var; 4]> {
        let mut out = *laterals;
        let mut acc: Option<Var> = None;
        for l in (0..4).rev() {
            let s = match acc {
                Some(above) => fw.tape.add(laterals[l], above)?,
                None => laterals[l],
            };
            acc = Some(s);
            out[l] = self.top_down[l].forward(fw, s)?;
        }
        Ok(out)
    }

    /// `b_low = conv(a_low)`, `b_l = conv(a_l + b_{l-1})`.
    pub fn bottom_up_path(&self, fw: &mut Forward, laterals: &[Var; 4]) -> Result<[Var; 4]> {
        let mut out = *laterals;
        for l in 0..4 {
            let s = if l == 0 {
                laterals[0]
            } else {
                fw.tape.add(laterals[l], out[l - 1])?
            };
            out[l] = self.bottom_up[l].forward(fw, s)?;
        }
        Ok(out)
    }

    /// Brings every path map to pixel resolution.
    pub fn upsample_features(&self, fw: &mut Forward, paths: &PathFeatures) -> Result<Vec<Var>> {
        let maps = paths.all();
        match self.cfg.kind {
            DecoderKind::BiMla => maps
                .iter()
                .zip(&self.upsample)
                .map(|(m, [a, b])| {
                    let y = a.forward(fw, *m)?;
                    b.forward(fw, y)
                })
                .collect(),
            DecoderKind::Mla => maps
                .iter()
                .map(|m| {
                    let s = fw.tape.shape(*m).to_vec();
                    let k = self.cfg.scale();
                    fw.tape.resize_bilinear(*m, s[2] * k, s[3] * k)
                })
                .collect(),
        }
    }

    /// Decodes four `[B, C, h, w]` maps into `[B, F, h * s, w * s]` features.
    pub fn decode_maps(&self, fw: &mut Forward, maps: [Var; 4]) -> Result<DecoderOutput> {
        let first = fw.tape.shape(maps[0]).to_vec();
        for m in &maps[1..] {
            if fw.tape.shape(*m) != first.as_slice() {
                return Err(Error::shape("decode", &first, fw.tape.shape(*m)));
            }
        }
        let a = self.laterals(fw, &maps)?;
        let top_down = self.top_down_path(fw, &a)?;
        let bottom_up = match self.cfg.kind {
            DecoderKind::BiMla => Some(self.bottom_up_path(fw, &a)?),
            DecoderKind::Mla => None,
        };
        let paths = PathFeatures { top_down, bottom_up };
        let up = self.upsample_features(fw, &paths)?;
        let mut x = fw.tape.concat(&up, 1)?;
        for layer in &self.smooth {
            x = layer.forward(fw, x)?;
        }
        Ok(DecoderOutput { features: x, paths })
    }

    pub fn decode(&self, fw: &mut Forward, taps: &EncoderTaps) -> Result<DecoderOutput> {
        let mut maps = taps.taps;
        for m in maps.iter_mut() {
            *m = reshape_tokens(&mut fw.tape, *m, taps.batch, taps.grid)?;
        }
        self.decode_maps(fw, maps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_op;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_paths(store: &mut ParamStore, dec: &Decoder) {
        let p = dec.cfg.path_channels;
        for conv in dec.lateral.iter().chain(&dec.top_down).chain(&dec.bottom_up) {
            let k = conv.kernel;
            let cin = store.param(conv.w).value.shape()[1];
            let mut w = Tensor::zeros(&[p, cin, k, k]);
            for c in 0..p.min(cin) {
                w.data_mut()[((c * cin + c) * k + k / 2) * k + k / 2] = 1.0;
            }
            store.param_mut(conv.w).value = w;
        }
    }

    fn build(variant: Variant, c: usize, p: usize, seed: u64) -> (ParamStore, Decoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = match variant {
            Variant::Global => DecoderConfig::global(c, p, 2),
            Variant::Local => DecoderConfig::local(c, p, 2),
        };
        let dec = Decoder::new(&mut store, &mut rng, "dec", &cfg, Stage::Global).unwrap();
        (store, dec)
    }

    #[test]
    fn config_checks() {
        assert!(DecoderConfig::global(8, 4, 4).validate(16).is_ok());
        assert!(DecoderConfig::local(8, 4, 4).validate(8).is_ok());
        assert!(DecoderConfig::local(8, 4, 4).validate(16).is_err());
        assert_eq!(DecoderConfig::local(8, 4, 4).kernel(), 1);
    }

    #[test]
    fn token_reshape_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::no_grad();
        let t = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let v = tape.constant(t.clone());
        let m = reshape_tokens(&mut tape, v, 1, (2, 2)).unwrap();
        assert_eq!(tape.shape(m), &[1, 3, 2, 2]);
        let back = flatten_maps(&mut tape, m).unwrap();
        assert_eq!(tape.value(back), &t);

        let mut hot = Tensor::zeros(&[4, 1]);
        hot.data_mut()[2] = 1.0;
        let h = tape.constant(hot);
        let m = reshape_tokens(&mut tape, h, 1, (2, 2)).unwrap();
        assert_eq!(tape.value(m).data(), &[0.0, 0.0, 1.0, 0.0]);

        assert!(matches!(reshape_tokens(&mut tape, v, 1, (1, 3)), Err(Error::Shape { .. })));
    }

    fn random_maps(fw: &mut Forward, rng: &mut ChaCha8Rng, c: usize, hw: usize) -> ([Var; 4], [Tensor; 4]) {
        let t: [Tensor; 4] = std::array::from_fn(|_| Tensor::randn(&[1, c, hw, hw], 1.0, rng));
        (std::array::from_fn(|i| fw.tape.constant(t[i].clone())), t)
    }

    fn summed(ts: &[Tensor]) -> Tensor {
        let mut out = ts[0].clone();
        for t in &ts[1..] {
            out.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b);
        }
        out
    }

    #[test]
    fn identity_paths_are_cumulative_sums() {
        for variant in [Variant::Global, Variant::Local] {
            let (mut store, dec) = build(variant, 3, 3, 1);
            identity_paths(&mut store, &dec);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut fw = Forward::eval(&store);
            let (maps, raw) = random_maps(&mut fw, &mut rng, 3, 4);
            let a = dec.laterals(&mut fw, &maps).unwrap();
            let t = dec.top_down_path(&mut fw, &a).unwrap();
            let b = dec.bottom_up_path(&mut fw, &a).unwrap();
            for l in 0..4 {
                let want_t = summed(&raw[l..]);
                let want_b = summed(&raw[..=l]);
                assert!(fw.tape.value(t[l]).max_abs_diff(&want_t) < 1e-12);
                assert!(fw.tape.value(b[l]).max_abs_diff(&want_b) < 1e-12);
            }
            assert!(fw.tape.value(t[0]).max_abs_diff(fw.tape.value(b[3])) < 1e-12);
        }
    }

    #[test]
    fn single_level_propagation_and_zero_inputs() {
        let (store, dec) = build(Variant::Global, 3, 3, 3);
        let mut fw = Forward::eval(&store);
        let mut zero_bias = store.clone();
        for conv in dec.lateral.iter().chain(&dec.top_down).chain(&dec.bottom_up) {
            zero_bias.param_mut(conv.b.unwrap()).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let zero = fw.tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let a = dec.laterals(&mut fw, &[zero; 4]).unwrap();
        let t = dec.top_down_path(&mut fw, &a).unwrap();
        let b = dec.bottom_up_path(&mut fw, &a).unwrap();
        for v in t.iter().chain(&b) {
            assert!(fw.tape.value(*v).data().iter().all(|x| *x == 0.0));
        }

        let top = fw.tape.constant(Tensor::randn(&[1, 3, 4, 4], 1.0, &mut rng));
        let a = dec.laterals(&mut fw, &[zero, zero, zero, top]).unwrap();
        let t = dec.top_down_path(&mut fw, &a).unwrap();
        for v in &t {
            assert!(fw.tape.value(*v).data().iter().any(|x| *x != 0.0));
        }
        let a = dec.laterals(&mut fw, &[top, zero, zero, zero]).unwrap();
        let b = dec.bottom_up_path(&mut fw, &a).unwrap();
        for v in &b {
            assert!(fw.tape.value(*v).data().iter().any(|x| *x != 0.0));
        }
    }

    #[test]
    fn upsampled_extents() {
        let (store, dec) = build(Variant::Global, 4, 2, 5);
        let mut fw = Forward::eval(&store);
        let x = fw.tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let [a, b] = &dec.upsample[0];
        let y = a.forward(&mut fw, x).unwrap();
        let y = b.forward(&mut fw, y).unwrap();
        assert_eq!(fw.tape.shape(y), &[1, 2, 64, 64]);
        let x = fw.tape.constant(Tensor::zeros(&[1, 2, 20, 20]));
        let y = a.forward(&mut fw, x).unwrap();
        let y = b.forward(&mut fw, y).unwrap();
        assert_eq!(fw.tape.shape(y), &[1, 2, 320, 320]);

        let (store, dec) = build(Variant::Local, 4, 2, 5);
        let mut fw = Forward::eval(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (maps, _) = random_maps(&mut fw, &mut rng, 4, 3);
        let out = dec.decode_maps(&mut fw, maps).unwrap();
        assert_eq!(fw.tape.shape(out.features), &[1, 2, 24, 24]);
    }

    #[test]
    fn upsample_block_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[2, 2, 2, 2], 1.0, &mut rng);
        let w1 = Tensor::randn(&[2, 2, 4, 4], 0.5, &mut rng);
        let w2 = Tensor::randn(&[2, 2, 8, 8], 0.5, &mut rng);
        let g = Tensor::uniform(&[2], 0.5, 1.5, &mut rng);
        let bt = Tensor::randn(&[2], 0.1, &mut rng);
        let err = check_op(&[x, w1, w2, g, bt], 8, |t, v| {
            let y = t.deconv2d(v[0], v[1], None, 2)?;
            let y = t.crop_center(y, 4, 4)?;
            let (y, _) = t.batch_norm_train(y, v[3], v[4], 1e-5)?;
            let y = t.relu(y);
            let y = t.deconv2d(y, v[2], None, 4)?;
            let y = t.crop_center(y, 16, 16)?;
            let (y, _) = t.batch_norm_train(y, v[3], v[4], 1e-5)?;
            Ok(t.relu(y))
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn local_variant_is_pointwise_after_upsampling() {
        // perturbing one token only changes pixels inside its 8x8 footprint
        // plus the deconvolution overhang
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dec = Decoder::new(&mut store, &mut rng, "dec", &DecoderConfig::local(3, 4, 8), Stage::Global).unwrap();
        let base: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[1, 3, 4, 4], 1.0, &mut rng)).collect();
        let run = |maps: &[Tensor]| {
            let mut fw = Forward::eval(&store);
            let v: [Var; 4] = std::array::from_fn(|i| fw.tape.constant(maps[i].clone()));
            let a = dec.laterals(&mut fw, &v).unwrap();
            let t = dec.top_down_path(&mut fw, &a).unwrap();
            let b = dec.bottom_up_path(&mut fw, &a).unwrap();
            let paths = PathFeatures {
                top_down: t,
                bottom_up: Some(b),
            };
            let up = dec.upsample_features(&mut fw, &paths).unwrap();
            let ups: Vec<Tensor> = up.iter().map(|u| fw.tape.value(*u).clone()).collect();
            let mut x = fw.tape.concat(&up, 1).unwrap();
            for layer in &dec.smooth {
                x = layer.forward(&mut fw, x).unwrap();
            }
            (ups, fw.tape.value(x).clone())
        };
        let (up0, out0) = run(&base);
        let changed = |a: &Tensor, b: &Tensor, hw: usize| -> Vec<usize> {
            (0..hw * hw)
                .filter(|&p| {
                    (0..a.numel() / (hw * hw)).any(|c| a.data()[c * hw * hw + p] != b.data()[c * hw * hw + p])
                })
                .collect()
        };
        let mut seen = false;
        for level in 0..4 {
            for delta in [-3.0, 3.0] {
                let mut moved = base.clone();
                for c in 0..3 {
                    moved[level].data_mut()[c * 16 + 5] += delta;
                }
                let (up1, out1) = run(&moved);
                let mut support: Vec<usize> = Vec::new();
                for (a, b) in up0.iter().zip(&up1) {
                    support.extend(changed(a, b, 32));
                }
                support.sort_unstable();
                support.dedup();
                let out_support = changed(&out0, &out1, 32);
                seen |= !out_support.is_empty();
                assert!(out_support.iter().all(|p| support.binary_search(p).is_ok()));
                // token (1,1) covers rows/cols 8..16; the overhang adds at most 4+2 px
                assert!(support.iter().all(|p| (2..22).contains(&(p / 32)) && (2..22).contains(&(p % 32))));
            }
        }
        assert!(seen);
    }

    #[test]
    fn mla_ablation_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let cfg = DecoderConfig {
            kind: DecoderKind::Mla,
            ..DecoderConfig::global(4, 2, 3)
        };
        let dec = Decoder::new(&mut store, &mut rng, "mla", &cfg, Stage::Global).unwrap();
        let mut fw = Forward::eval(&store);
        let (maps, _) = random_maps(&mut fw, &mut rng, 4, 2);
        let out = dec.decode_maps(&mut fw, maps).unwrap();
        assert_eq!(fw.tape.shape(out.features), &[1, 3, 32, 32]);
        assert_eq!(out.paths.all().len(), 4);
    }
    fn decoder_gradcheck(cfg: DecoderConfig, coords: Option<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, &mut rng, "dec", &cfg, Stage::Global).unwrap();
        let maps: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[1, cfg.embed_dim, 2, 2], 1.0, &mut rng)).collect();
        let side = 2 * cfg.scale();
        let probe = Tensor::randn(&[1, cfg.smooth_channels, side, side], 1.0, &mut rng);
        let checks = crate::nn::param_gradcheck(&store, [true, true], coords, 13, |fw| {
            let v: [Var; 4] = std::array::from_fn(|i| fw.tape.constant(maps[i].clone()));
            let out = dec.decode_maps(fw, v)?;
            let p = fw.tape.constant(probe.clone());
            let prod = fw.tape.mul(out.features, p)?;
            Ok(fw.tape.sum(prod))
        })
        .unwrap();
        assert_eq!(checks.len(), store.params().len());
        for c in checks {
            assert!(c.directional < 1e-4 && c.elementwise < 1e-4, "{c:?}");
        }
    }

    #[test]
    fn local_decoder_gradcheck() {
        decoder_gradcheck(DecoderConfig::local(2, 2, 2), None);
    }

    #[test]
    fn global_decoder_gradcheck() {
        decoder_gradcheck(DecoderConfig::global(2, 2, 2), Some(6));
    }
}
