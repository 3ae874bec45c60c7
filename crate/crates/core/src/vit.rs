//! Patch embedding, learnable position embeddings and pre-norm transformer
//! blocks with four tapped outputs.

use crate::error::{Error, Result};
use crate::nn::{Forward, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore, Stage};
use crate::tensor::{kernels, Tensor, Var};
use rand::Rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
    /// 1-based block indices whose outputs feed the decoder.
    pub taps: [usize; 4],
}

impl EncoderConfig {
    /// ViT-L sized global encoder: 16x16 patches, 24 blocks.
    pub fn global_full() -> Self {
        EncoderConfig {
            patch_size: 16,
            depth: 24,
            embed_dim: 1024,
            heads: 16,
            head_dim: 64,
            mlp_ratio: 4,
            taps: [6, 12, 18, 24],
        }
    }

    /// Local encoder at full scale: 8x8 patches, 12 blocks.
    pub fn local_full() -> Self {
        EncoderConfig {
            patch_size: 8,
            depth: 12,
            taps: [3, 6, 9, 12],
            ..Self::global_full()
        }
    }

    pub fn global_toy() -> Self {
        EncoderConfig {
            patch_size: 16,
            depth: 8,
            embed_dim: 64,
            heads: 8,
            head_dim: 8,
            mlp_ratio: 4,
            taps: Self::even_taps(8),
        }
    }

    pub fn local_toy() -> Self {
        EncoderConfig {
            patch_size: 8,
            depth: 4,
            taps: Self::even_taps(4),
            ..Self::global_toy()
        }
    }

    /// Last block of each of four equal groups.
    pub fn even_taps(depth: usize) -> [usize; 4] {
        let q = depth / 4;
        [q, 2 * q, 3 * q, depth]
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.embed_dim == 0 || self.heads == 0 || self.head_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.taps[0] == 0 || self.taps.windows(2).any(|w| w[0] >= w[1]) || self.taps[3] != self.depth {
            return Err(Error::Config(format!(
                "taps {:?} must be strictly increasing, start at 1 or more and end at depth {}",
                self.taps, self.depth
            )));
        }
        Ok(())
    }
}

/// Tokens of `batch` images stacked as `[batch * rows * cols, C]`.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub batch: usize,
    pub grid: (usize, usize),
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Splits `images [B, 3, H, W]` into `P x P` patches, flattens each
/// (row-major, channel-last within the patch) and projects it to `C` dims.
pub fn patchify_embed(fw: &mut Forward, images: Var, patch: usize, proj: &Linear) -> Result<TokenSequence> {
    let s = fw.tape.shape(images).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("patchify", &s, &[4]));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Partition {
            height: h,
            width: w,
            block: patch,
        });
    }
    let (gr, gc) = (h / patch, w / patch);
    let x = fw.tape.reshape(images, &[b, c, gr, patch, gc, patch])?;
    let x = fw.tape.permute(x, &[0, 2, 4, 3, 5, 1])?;
    let x = fw.tape.reshape(x, &[b * gr * gc, patch * patch * c])?;
    let tokens = proj.forward(fw, x)?;
    Ok(TokenSequence {
        tokens,
        batch: b,
        grid: (gr, gc),
    })
}

/// Adds a `[N, C]` position table to every item of the sequence.
pub fn add_position(fw: &mut Forward, seq: TokenSequence, pos: Var) -> Result<TokenSequence> {
    let ts = fw.tape.shape(seq.tokens).to_vec();
    let ps = fw.tape.shape(pos).to_vec();
    let n = seq.len();
    if ps.len() != 2 || ps[0] != n || ps[1] != ts[1] {
        return Err(Error::shape("add_position", &[n, ts[1]], &ps));
    }
    let flat = fw.tape.reshape(seq.tokens, &[seq.batch, n * ts[1]])?;
    let pos_flat = fw.tape.reshape(pos, &[n * ts[1]])?;
    let sum = fw.tape.add_bias(flat, pos_flat)?;
    let tokens = fw.tape.reshape(sum, &ts)?;
    Ok(TokenSequence { tokens, ..seq })
}

/// Bilinearly resamples a `[rows * cols, C]` position table to a new grid.
pub fn resample_position_table(table: &Tensor, from: (usize, usize), to: (usize, usize)) -> Tensor {
    let c = table.shape()[1];
    let mut planes = vec![0.0; table.numel()];
    kernels::permute(table.data(), &[from.0 * from.1, c], &[1, 0], &mut planes);
    let up = kernels::resize_bilinear(&planes, c, from.0, from.1, to.0, to.1);
    let mut out = vec![0.0; up.len()];
    kernels::permute(&up, &[c, to.0 * to.1], &[1, 0], &mut out);
    Tensor::from_parts(vec![to.0 * to.1, c], out)
}

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    heads: usize,
    head_dim: usize,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cfg: &EncoderConfig,
        stage: Stage,
    ) -> Result<Self> {
        let (c, inner) = (cfg.embed_dim, cfg.heads * cfg.head_dim);
        let hidden = cfg.mlp_ratio * c;
        Ok(TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), c, stage)?,
            wq: Linear::new(store, rng, &format!("{name}.attn.q"), c, inner, false, stage)?,
            wk: Linear::new(store, rng, &format!("{name}.attn.k"), c, inner, false, stage)?,
            wv: Linear::new(store, rng, &format!("{name}.attn.v"), c, inner, false, stage)?,
            wo: Linear::new(store, rng, &format!("{name}.attn.out"), inner, c, false, stage)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), c, stage)?,
            fc1: Linear::new(store, rng, &format!("{name}.mlp.fc1"), c, hidden, true, stage)?,
            fc2: Linear::new(store, rng, &format!("{name}.mlp.fc2"), hidden, c, true, stage)?,
            heads: cfg.heads,
            head_dim: cfg.head_dim,
        })
    }

    /// Multi-head self-attention of `x [batch * n, C]`, attending within
    /// each item only.
    pub fn attention(&self, fw: &mut Forward, x: Var, batch: usize) -> Result<Var> {
        let (m, u) = (self.heads, self.head_dim);
        let n = fw.tape.shape(x)[0] / batch;
        let q = self.wq.forward(fw, x)?;
        let k = self.wk.forward(fw, x)?;
        let v = self.wv.forward(fw, x)?;
        let split = |fw: &mut Forward, t: Var, perm: &[usize], last: [usize; 2]| -> Result<Var> {
            let t = fw.tape.reshape(t, &[batch, n, m, u])?;
            let t = fw.tape.permute(t, perm)?;
            fw.tape.reshape(t, &[batch * m, last[0], last[1]])
        };
        let q = split(fw, q, &[0, 2, 1, 3], [n, u])?;
        let kt = split(fw, k, &[0, 2, 3, 1], [u, n])?;
        let v = split(fw, v, &[0, 2, 1, 3], [n, u])?;
        let scores = fw.tape.bmm(q, kt)?;
        let scores = fw.tape.scale(scores, 1.0 / (u as f64).sqrt());
        let probs = fw.tape.softmax_rows(scores)?;
        let captured = fw.tape.value(probs).clone();
        fw.record_attention(&captured);
        let heads = fw.tape.bmm(probs, v)?;
        let heads = fw.tape.reshape(heads, &[batch, m, n, u])?;
        let heads = fw.tape.permute(heads, &[0, 2, 1, 3])?;
        let concat = fw.tape.reshape(heads, &[batch * n, m * u])?;
        self.wo.forward(fw, concat)
    }

    /// `z + MSA(LN(z))`, then `z + MLP(LN(z))`.
    pub fn forward(&self, fw: &mut Forward, z: Var, batch: usize) -> Result<Var> {
        let h = self.ln1.forward(fw, z)?;
        let a = self.attention(fw, h, batch)?;
        let z = fw.tape.add(z, a)?;
        let h = self.ln2.forward(fw, z)?;
        let h = self.fc1.forward(fw, h)?;
        let h = fw.tape.gelu(h);
        let h = self.fc2.forward(fw, h)?;
        fw.tape.add(z, h)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub proj: Linear,
    pub pos: ParamId,
    pub grid: (usize, usize),
    pub blocks: Vec<TransformerBlock>,
}

/// The four tapped block outputs, each `[batch * n, C]`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderTaps {
    pub taps: [Var; 4],
    pub batch: usize,
    pub grid: (usize, usize),
}

impl Encoder {
    /// Builds an encoder whose position table covers a `grid` of tokens.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cfg: &EncoderConfig,
        grid: (usize, usize),
        stage: Stage,
    ) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.patch_size;
        let proj = Linear::new(store, rng, &format!("{name}.patch"), p * p * 3, cfg.embed_dim, true, stage)?;
        let pos = store.add_param(
            &format!("{name}.pos"),
            Tensor::randn(&[grid.0 * grid.1, cfg.embed_dim], 0.02, rng),
            stage,
        )?;
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(store, rng, &format!("{name}.block{i}"), cfg, stage))
            .collect::<Result<_>>()?;
        Ok(Encoder {
            cfg: cfg.clone(),
            proj,
            pos,
            grid,
            blocks,
        })
    }

    fn position_table(&self, fw: &mut Forward, grid: (usize, usize)) -> Var {
        if grid != self.grid && fw.position_resampling() {
            let table = &fw.store().param(self.pos).value;
            let resampled = resample_position_table(table, self.grid, grid);
            fw.tape.constant(resampled)
        } else {
            fw.param(self.pos)
        }
    }

    /// Runs the blocks on an embedded sequence, returning the tapped outputs.
    pub fn encode(&self, fw: &mut Forward, seq: TokenSequence) -> Result<EncoderTaps> {
        let mut z = seq.tokens;
        let mut taps = Vec::with_capacity(4);
        for (i, block) in self.blocks.iter().enumerate() {
            z = block.forward(fw, z, seq.batch)?;
            if self.cfg.taps.contains(&(i + 1)) {
                taps.push(z);
            }
        }
        Ok(EncoderTaps {
            taps: [taps[0], taps[1], taps[2], taps[3]],
            batch: seq.batch,
            grid: seq.grid,
        })
    }

    /// `images [B, 3, H, W]` to tapped token features.
    pub fn forward(&self, fw: &mut Forward, images: Var) -> Result<EncoderTaps> {
        let seq = patchify_embed(fw, images, self.cfg.patch_size, &self.proj)?;
        let pos = self.position_table(fw, seq.grid);
        let seq = add_position(fw, seq, pos)?;
        self.encode(fw, seq)
    }
}
