//! The two-stage detector: a global stage over 16x16 patches, a local stage
//! over four non-overlapping windows with 8x8 patches, feature fusion and
//! decision heads.

use crate::bimla::{reshape_tokens, Decoder, DecoderConfig, DecoderKind, PathFeatures};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBnRelu, Deconv2d, Forward};
use crate::params::{ParamStore, Stage};
use crate::tensor::{kernels, Tensor, Var};
use crate::vit::{Encoder, EncoderConfig, EncoderTaps};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Windows per side in the local stage.
pub const WINDOW_DIVISOR: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Training and reference inference extent `(height, width)`.
    pub image_size: (usize, usize),
    pub global: EncoderConfig,
    pub local: EncoderConfig,
    pub path_channels: usize,
    pub smooth_channels: usize,
    pub decoder: DecoderKind,
    pub ffm: bool,
    pub two_stage: bool,
}

impl ModelConfig {
    /// Desk-scale model: C=64, 8 heads of width 8, global depth 8, local depth 4.
    pub fn toy(size: usize) -> Self {
        ModelConfig {
            image_size: (size, size),
            global: EncoderConfig::global_toy(),
            local: EncoderConfig::local_toy(),
            path_channels: 16,
            smooth_channels: 16,
            decoder: DecoderKind::BiMla,
            ffm: true,
            two_stage: true,
        }
    }

    /// ViT-L sized model on 320x320 crops.
    pub fn full() -> Self {
        ModelConfig {
            image_size: (320, 320),
            global: EncoderConfig::global_full(),
            local: EncoderConfig::local_full(),
            path_channels: 256,
            smooth_channels: 64,
            decoder: DecoderKind::BiMla,
            ffm: true,
            two_stage: true,
        }
    }

    fn decoder_config(&self, enc: &EncoderConfig, global: bool) -> DecoderConfig {
        let base = if global {
            DecoderConfig::global(enc.embed_dim, self.path_channels, self.smooth_channels)
        } else {
            DecoderConfig::local(enc.embed_dim, self.path_channels, self.smooth_channels)
        };
        let s = enc.patch_size / 2;
        DecoderConfig {
            kind: self.decoder,
            upsample: [(4, 2), (2 * s, s)],
            ..base
        }
    }

    pub fn global_decoder(&self) -> DecoderConfig {
        self.decoder_config(&self.global, true)
    }

    pub fn local_decoder(&self) -> DecoderConfig {
        self.decoder_config(&self.local, false)
    }

    /// Every extent must be a multiple of this.
    pub fn size_multiple(&self) -> usize {
        let a = self.global.patch_size;
        let b = if self.two_stage {
            WINDOW_DIVISOR * self.local.patch_size
        } else {
            1
        };
        a / gcd(a, b) * b
    }

    pub fn check_extent(&self, height: usize, width: usize) -> Result<()> {
        let m = self.size_multiple();
        if height == 0 || width == 0 || !height.is_multiple_of(m) || !width.is_multiple_of(m) {
            return Err(Error::Partition { height, width, block: m });
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.global.validate()?;
        self.global_decoder().validate(self.global.patch_size)?;
        if self.two_stage {
            self.local.validate()?;
            self.local_decoder().validate(self.local.patch_size)?;
        }
        if !self.global.patch_size.is_multiple_of(2) || !self.local.patch_size.is_multiple_of(2) {
            return Err(Error::Config("patch sizes must be even".into()));
        }
        self.check_extent(self.image_size.0, self.image_size.1)
    }

    /// Canonical `key=value` lines, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("image_height", self.image_size.0.to_string()),
            ("image_width", self.image_size.1.to_string()),
            ("embed_dim", self.global.embed_dim.to_string()),
            ("heads", self.global.heads.to_string()),
            ("head_dim", self.global.head_dim.to_string()),
            ("mlp_ratio", self.global.mlp_ratio.to_string()),
            ("global_patch", self.global.patch_size.to_string()),
            ("global_depth", self.global.depth.to_string()),
            ("local_patch", self.local.patch_size.to_string()),
            ("local_depth", self.local.depth.to_string()),
            ("path_channels", self.path_channels.to_string()),
            ("smooth_channels", self.smooth_channels.to_string()),
            (
                "decoder",
                match self.decoder {
                    DecoderKind::BiMla => "bimla".into(),
                    DecoderKind::Mla => "mla".into(),
                },
            ),
            ("ffm", self.ffm.to_string()),
            ("stages", if self.two_stage { "2" } else { "1" }.into()),
        ]
    }

    /// Whether `key` names a model setting.
    pub fn has_key(key: &str) -> bool {
        Self::toy(64).entries().iter().any(|(k, _)| *k == key)
    }

    /// Applies one setting. Encoder widths are shared by both stages and
    /// taps always close four equal groups of blocks.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = || -> Result<usize> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {value:?}")))
        };
        match key {
            "image_height" => self.image_size.0 = num()?,
            "image_width" => self.image_size.1 = num()?,
            "embed_dim" => {
                self.global.embed_dim = num()?;
                self.local.embed_dim = self.global.embed_dim;
            }
            "heads" => {
                self.global.heads = num()?;
                self.local.heads = self.global.heads;
            }
            "head_dim" => {
                self.global.head_dim = num()?;
                self.local.head_dim = self.global.head_dim;
            }
            "mlp_ratio" => {
                self.global.mlp_ratio = num()?;
                self.local.mlp_ratio = self.global.mlp_ratio;
            }
            "global_patch" => self.global.patch_size = num()?,
            "global_depth" => {
                self.global.depth = num()?;
                self.global.taps = EncoderConfig::even_taps(self.global.depth);
            }
            "local_patch" => self.local.patch_size = num()?,
            "local_depth" => {
                self.local.depth = num()?;
                self.local.taps = EncoderConfig::even_taps(self.local.depth);
            }
            "path_channels" => self.path_channels = num()?,
            "smooth_channels" => self.smooth_channels = num()?,
            "decoder" => {
                self.decoder = match value {
                    "bimla" => DecoderKind::BiMla,
                    "mla" => DecoderKind::Mla,
                    _ => return Err(Error::Config(format!("decoder must be bimla or mla, got {value:?}"))),
                }
            }
            "ffm" => {
                self.ffm = value
                    .parse()
                    .map_err(|_| Error::Config(format!("ffm must be true or false, got {value:?}")))?
            }
            "stages" => {
                self.two_stage = match value {
                    "1" => false,
                    "2" => true,
                    _ => return Err(Error::Config(format!("stages must be 1 or 2, got {value:?}"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }

    /// Parses text written by [`ModelConfig::to_text`]; missing keys keep
    /// the toy defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::toy(64);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Edge probabilities of one image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl EdgeMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width || data.is_empty() {
            return Err(Error::shape("edge map", &[height, width], &[data.len()]));
        }
        Ok(EdgeMap { height, width, data })
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Splits a `[B, 1, H, W]` tensor into per-item maps.
    pub fn from_batch(t: &Tensor) -> Vec<EdgeMap> {
        let s = t.shape();
        let n = s[2] * s[3];
        t.data()
            .chunks(n)
            .map(|c| EdgeMap {
                height: s[2],
                width: s[3],
                data: c.to_vec(),
            })
            .collect()
    }
}

/// Upsamples one path map to a single-channel sigmoid prediction.
#[derive(Clone, Debug)]
pub struct SideHead {
    pub up: Deconv2d,
    pub out: Deconv2d,
}

impl SideHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cfg: &DecoderConfig,
        stage: Stage,
    ) -> Result<Self> {
        let p = cfg.path_channels;
        let [(k1, s1), (k2, s2)] = cfg.upsample;
        Ok(SideHead {
            up: Deconv2d::new(store, rng, &format!("{name}.0"), p, p, k1, s1, true, stage)?,
            out: Deconv2d::new(store, rng, &format!("{name}.1"), p, 1, k2, s2, true, stage)?,
        })
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let y = self.up.forward(fw, x)?;
        let y = fw.tape.relu(y);
        let y = self.out.forward(fw, y)?;
        Ok(fw.tape.sigmoid(y))
    }
}

/// Scale-and-shift modulation of local features by global features,
/// followed by two 3x3 conv blocks.
#[derive(Clone, Debug)]
pub struct Ffm {
    pub gamma: Conv2d,
    pub beta: Conv2d,
    pub smooth: [ConvBnRelu; 2],
}

impl Ffm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, f: usize) -> Result<Self> {
        let stage = Stage::Local;
        let gamma = Conv2d::same(store, rng, &format!("{name}.gamma"), f, f, 1, true, stage)?;
        let beta = Conv2d::same(store, rng, &format!("{name}.beta"), f, f, 1, true, stage)?;
        // start close to the identity modulation
        for conv in [&gamma, &beta] {
            store.param_mut(conv.w).value.data_mut().iter_mut().for_each(|v| *v *= 0.1);
        }
        store.param_mut(gamma.b.expect("bias")).value = Tensor::ones(&[f]);
        Ok(Ffm {
            gamma,
            beta,
            smooth: [
                ConvBnRelu::same(store, rng, &format!("{name}.smooth0"), f, f, 3, stage)?,
                ConvBnRelu::same(store, rng, &format!("{name}.smooth1"), f, f, 3, stage)?,
            ],
        })
    }

    /// `gamma(f_g) * f_r + beta(f_g)`.
    pub fn modulate(&self, fw: &mut Forward, f_g: Var, f_r: Var) -> Result<Var> {
        let gs = fw.tape.shape(f_g).to_vec();
        let rs = fw.tape.shape(f_r).to_vec();
        if gs != rs {
            return Err(Error::shape("ffm", &gs, &rs));
        }
        let g = self.gamma.forward(fw, f_g)?;
        let b = self.beta.forward(fw, f_g)?;
        let m = fw.tape.mul(g, f_r)?;
        fw.tape.add(m, b)
    }

    pub fn forward(&self, fw: &mut Forward, f_g: Var, f_r: Var) -> Result<Var> {
        let mut x = self.modulate(fw, f_g, f_r)?;
        for layer in &self.smooth {
            x = layer.forward(fw, x)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub enum Fusion {
    Ffm(Ffm),
    /// Channel concatenation followed by a 1x1 conv.
    Concat(Conv2d),
}

#[derive(Clone, Debug)]
pub struct LocalBranch {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub fusion: Fusion,
    pub head: Conv2d,
    pub sides: Vec<SideHead>,
}

/// Module structure; weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Architecture {
    pub cfg: ModelConfig,
    pub global_encoder: Encoder,
    pub global_decoder: Decoder,
    pub global_head: Conv2d,
    pub global_sides: Vec<SideHead>,
    pub local: Option<LocalBranch>,
}

#[derive(Clone, Copy, Debug)]
pub struct Stage1Out {
    /// `[B, F, H, W]` pixel-level global features.
    pub features: Var,
    /// `[B, 1, H, W]` global edge probabilities.
    pub edge: Var,
    pub paths: PathFeatures,
}

#[derive(Clone, Copy, Debug)]
pub struct Stage2Out {
    pub features: Var,
    pub fused: Var,
    pub edge: Var,
    pub paths: PathFeatures,
}

impl Architecture {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (h, w) = cfg.image_size;
        let gp = cfg.global.patch_size;
        let gdec = cfg.global_decoder();
        let f = cfg.smooth_channels;
        let global_encoder = Encoder::new(store, rng, "global.encoder", &cfg.global, (h / gp, w / gp), Stage::Global)?;
        let global_decoder = Decoder::new(store, rng, "global.decoder", &gdec, Stage::Global)?;
        let global_head = Conv2d::same(store, rng, "global.head", f, 1, 1, true, Stage::Global)?;
        let levels = gdec_levels(&gdec);
        let global_sides = (0..levels)
            .map(|i| SideHead::new(store, rng, &format!("global.side{i}"), &gdec, Stage::Global))
            .collect::<Result<_>>()?;
        let local = if cfg.two_stage {
            let lp = cfg.local.patch_size;
            let grid = (h / WINDOW_DIVISOR / lp, w / WINDOW_DIVISOR / lp);
            let ldec = cfg.local_decoder();
            let encoder = Encoder::new(store, rng, "local.encoder", &cfg.local, grid, Stage::Local)?;
            let decoder = Decoder::new(store, rng, "local.decoder", &ldec, Stage::Local)?;
            let fusion = if cfg.ffm {
                Fusion::Ffm(Ffm::new(store, rng, "local.ffm", f)?)
            } else {
                Fusion::Concat(Conv2d::same(store, rng, "local.concat", 2 * f, f, 1, true, Stage::Local)?)
            };
            let head = Conv2d::same(store, rng, "local.head", f, 1, 1, true, Stage::Local)?;
            let sides = (0..gdec_levels(&ldec))
                .map(|i| SideHead::new(store, rng, &format!("local.side{i}"), &ldec, Stage::Local))
                .collect::<Result<_>>()?;
            Some(LocalBranch {
                encoder,
                decoder,
                fusion,
                head,
                sides,
            })
        } else {
            None
        };
        Ok(Architecture {
            cfg: cfg.clone(),
            global_encoder,
            global_decoder,
            global_head,
            global_sides,
            local,
        })
    }

    fn check_images(&self, fw: &Forward, images: Var) -> Result<()> {
        let s = fw.tape.shape(images);
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape("images", s, &[0, 3, 0, 0]));
        }
        self.cfg.check_extent(s[2], s[3])
    }

    /// Global stage on `images [B, 3, H, W]`.
    pub fn run_stage1(&self, fw: &mut Forward, images: Var) -> Result<Stage1Out> {
        self.check_images(fw, images)?;
        let taps = self.global_encoder.forward(fw, images)?;
        let dec = self.global_decoder.decode(fw, &taps)?;
        let logits = self.global_head.forward(fw, dec.features)?;
        Ok(Stage1Out {
            features: dec.features,
            edge: fw.tape.sigmoid(logits),
            paths: dec.paths,
        })
    }

    fn local(&self) -> Result<&LocalBranch> {
        self.local
            .as_ref()
            .ok_or_else(|| Error::Usage("model was built without the local stage".into()))
    }

    /// Encodes the four windows of each image with the shared local encoder.
    pub fn encode_windows(&self, fw: &mut Forward, images: Var) -> Result<EncoderTaps> {
        let local = self.local()?;
        let windows = partition_windows(fw, images)?;
        local.encoder.forward(fw, windows)
    }

    /// Per-window taps `[4B * n, C]` to whole-image maps `[B, C, h, w]`.
    pub fn assemble_windows(&self, fw: &mut Forward, taps: &EncoderTaps) -> Result<[Var; 4]> {
        let mut maps = taps.taps;
        for m in maps.iter_mut() {
            let per_window = reshape_tokens(&mut fw.tape, *m, taps.batch, taps.grid)?;
            *m = fw.tape.window_merge(per_window)?;
        }
        Ok(maps)
    }

    /// Local stage. `f_g` is the global feature map of the same images.
    pub fn run_stage2(&self, fw: &mut Forward, images: Var, f_g: Option<Var>) -> Result<Stage2Out> {
        self.check_images(fw, images)?;
        let local = self.local()?;
        let f_g = f_g.ok_or_else(|| Error::Usage("local stage needs global features".into()))?;
        let taps = self.encode_windows(fw, images)?;
        let maps = self.assemble_windows(fw, &taps)?;
        let dec = local.decoder.decode_maps(fw, maps)?;
        let fused = self.fuse(fw, f_g, dec.features)?;
        let logits = local.head.forward(fw, fused)?;
        Ok(Stage2Out {
            features: dec.features,
            fused,
            edge: fw.tape.sigmoid(logits),
            paths: dec.paths,
        })
    }

    pub fn fuse(&self, fw: &mut Forward, f_g: Var, f_r: Var) -> Result<Var> {
        match &self.local()?.fusion {
            Fusion::Ffm(ffm) => ffm.forward(fw, f_g, f_r),
            Fusion::Concat(conv) => {
                let gs = fw.tape.shape(f_g).to_vec();
                let rs = fw.tape.shape(f_r).to_vec();
                if gs[0] != rs[0] || gs[2..] != rs[2..] {
                    return Err(Error::shape("fuse", &gs, &rs));
                }
                let cat = fw.tape.concat(&[f_g, f_r], 1)?;
                conv.forward(fw, cat)
            }
        }
    }

    /// Sigmoid side predictions of one stage's path maps, at image extent.
    pub fn side_outputs(&self, fw: &mut Forward, stage: Stage, paths: &PathFeatures) -> Result<Vec<Var>> {
        let heads = match stage {
            Stage::Global => &self.global_sides,
            Stage::Local => &self.local()?.sides,
        };
        paths.all().iter().zip(heads).map(|(p, h)| h.forward(fw, *p)).collect()
    }
}

fn gdec_levels(cfg: &DecoderConfig) -> usize {
    match cfg.kind {
        DecoderKind::BiMla => 8,
        DecoderKind::Mla => 4,
    }
}

/// Splits `[B, 3, H, W]` into `[4B, 3, H/2, W/2]`: top-left, top-right,
/// bottom-left, bottom-right for each image.
pub fn partition_windows(fw: &mut Forward, images: Var) -> Result<Var> {
    fw.tape.window_partition(images)
}

/// Architecture plus weights.
#[derive(Clone, Debug)]
pub struct Edter {
    pub arch: Architecture,
    pub store: ParamStore,
    loaded: bool,
}

impl Edter {
    /// Randomly initialized model.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let arch = Architecture::new(cfg, &mut store, &mut rng)?;
        Ok(Edter {
            arch,
            store,
            loaded: true,
        })
    }

    /// Model whose weights must be filled in (e.g. from a checkpoint)
    /// before inference.
    pub fn skeleton(cfg: &ModelConfig) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        m.loaded = false;
        Ok(m)
    }

    pub fn mark_loaded(&mut self) {
        self.loaded = true;
    }

    pub fn is_loaded(&self) -> bool {
        self.loaded
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.arch.cfg
    }

    fn image_var(fw: &mut Forward, image: &Tensor) -> Result<Var> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape("image", s, &[3, 0, 0]));
        }
        let batch = image.clone().reshape(&[1, s[0], s[1], s[2]])?;
        Ok(fw.tape.constant(batch))
    }

    fn predict(&self, image: &Tensor, resample: bool) -> Result<EdgeMap> {
        if !self.loaded {
            return Err(Error::Usage("model weights are not loaded".into()));
        }
        let mut fw = Forward::eval(&self.store);
        fw.allow_position_resampling(resample);
        let x = Self::image_var(&mut fw, image)?;
        let s1 = self.arch.run_stage1(&mut fw, x)?;
        let edge = if self.cfg().two_stage {
            self.arch.run_stage2(&mut fw, x, Some(s1.features))?.edge
        } else {
            s1.edge
        };
        Ok(EdgeMap::from_batch(fw.tape.value(edge)).remove(0))
    }

    /// Final edge map of a `[3, H, W]` image at the configured extent.
    pub fn infer(&self, image: &Tensor) -> Result<EdgeMap> {
        self.predict(image, false)
    }

    /// Averages predictions over rescaled copies of the image. Each scaled
    /// extent is rounded to the nearest legal multiple; position tables
    /// are resampled to the scaled token grids.
    pub fn infer_multiscale(&self, image: &Tensor, scales: &[f64]) -> Result<EdgeMap> {
        if scales.is_empty() || scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config("multi-scale inference needs positive scales".into()));
        }
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let m = self.cfg().size_multiple();
        let mut order = scales.to_vec();
        order.sort_by(f64::total_cmp);
        let mut acc = vec![0.0; h * w];
        for s in &order {
            let round = |v: usize| (((v as f64 * s) / m as f64).round() as usize).max(1) * m;
            let (sh, sw) = (round(h), round(w));
            let scaled = Tensor::from_parts(
                vec![3, sh, sw],
                kernels::resize_bilinear(image.data(), 3, h, w, sh, sw),
            );
            let e = self.predict(&scaled, true)?;
            let back = kernels::resize_bilinear(&e.data, 1, sh, sw, h, w);
            acc.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
        }
        let n = order.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        EdgeMap::new(h, w, acc)
    }

    /// Stage-I edge map regardless of the configured mode.
    pub fn infer_stage1(&self, image: &Tensor) -> Result<EdgeMap> {
        if !self.loaded {
            return Err(Error::Usage("model weights are not loaded".into()));
        }
        let mut fw = Forward::eval(&self.store);
        let x = Self::image_var(&mut fw, image)?;
        let s1 = self.arch.run_stage1(&mut fw, x)?;
        Ok(EdgeMap::from_batch(fw.tape.value(s1.edge)).remove(0))
    }
}
