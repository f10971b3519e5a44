//! Vision-transformer encoder partitioned into depth segments, plus the
//! truncation and tail-re-initialization utilities used by the degradation
//! probes.
//!
//! Blocks are pre-norm: `x + MHA(LN(x))` followed by `x + MLP(LN(x))`.
//! Weights use truncated-normal(0.02) initialization with zero biases.

use std::rc::Rc;

use crate::diffcore::{BoundParams, ParamStore, Tape, Tensor};
use crate::rng::Rng;
use crate::tokenizer::TokenSequence;
use crate::{MirlError, Result};

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ViTConfig {
    pub depth: usize,
    pub hidden: usize,
    pub mlp_dim: usize,
    pub heads: usize,
    pub segments: usize,
    pub patch: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
}

impl ViTConfig {
    pub fn vit_s_54() -> Self {
        ViTConfig {
            depth: 54,
            hidden: 384,
            mlp_dim: 1536,
            heads: 12,
            segments: 6,
            patch: 16,
            image_h: 224,
            image_w: 224,
            channels: 3,
        }
    }

    pub fn vit_b_24() -> Self {
        ViTConfig {
            depth: 24,
            hidden: 768,
            mlp_dim: 3072,
            heads: 12,
            segments: 4,
            patch: 16,
            image_h: 224,
            image_w: 224,
            channels: 3,
        }
    }

    pub fn vit_b_48() -> Self {
        ViTConfig {
            depth: 48,
            hidden: 768,
            mlp_dim: 3072,
            heads: 12,
            segments: 6,
            patch: 16,
            image_h: 224,
            image_w: 224,
            channels: 3,
        }
    }

    /// Small preset for desk-scale runs and tests.
    pub fn tiny_8() -> Self {
        ViTConfig {
            depth: 8,
            hidden: 64,
            mlp_dim: 256,
            heads: 4,
            segments: 2,
            patch: 8,
            image_h: 32,
            image_w: 32,
            channels: 3,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "vit-s-54" => Ok(Self::vit_s_54()),
            "vit-b-24" => Ok(Self::vit_b_24()),
            "vit-b-48" => Ok(Self::vit_b_48()),
            "tiny-8" => Ok(Self::tiny_8()),
            other => Err(MirlError::Config(format!(
                "unknown model preset {other}; known: tiny-8, vit-s-54, vit-b-24, vit-b-48"
            ))),
        }
    }

    pub fn patches(&self) -> usize {
        (self.image_h / self.patch) * (self.image_w / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn blocks_per_segment(&self) -> usize {
        self.depth / self.segments
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.hidden == 0 || self.heads == 0 || self.segments == 0 {
            return Err(MirlError::Config("depth/hidden/heads/segments must be positive".into()));
        }
        if self.channels == 0 {
            return Err(MirlError::Config("images need at least one channel".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(MirlError::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.segments > 1 && self.segments % 2 != 0 {
            // pairing matches segment g with segment G-g+1, which needs an
            // even segment count (or the degenerate single segment)
            return Err(MirlError::Config(format!(
                "segment count {} must be even (or 1): segments are consumed in \
                 shallow/deep pairs",
                self.segments
            )));
        }
        if self.depth % self.segments != 0 {
            return Err(MirlError::Config(format!(
                "segments {} must divide depth {} evenly",
                self.segments, self.depth
            )));
        }
        if self.patch == 0 || self.image_h % self.patch != 0 || self.image_w % self.patch != 0 {
            return Err(MirlError::Config(format!(
                "patch {} must divide image {}x{}",
                self.patch, self.image_h, self.image_w
            )));
        }
        Ok(())
    }
}

/// Per-segment encoder outputs plus the tokenized input.
pub struct SegmentedEncoderState {
    pub per_segment: Vec<TokenSequence>,
    pub z0: TokenSequence,
}

fn trunc_normal_vec(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| rng.trunc_normal(std)).collect()
}

fn insert_linear(
    store: &mut ParamStore,
    rng: &mut Rng,
    prefix: &str,
    rows: usize,
    cols: usize,
) -> Result<()> {
    store.insert(
        &format!("{prefix}.weight"),
        vec![rows, cols],
        trunc_normal_vec(rng, rows * cols, INIT_STD),
    )?;
    store.insert(&format!("{prefix}.bias"), vec![cols], vec![0.0; cols])
}

fn insert_norm(store: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    store.insert(&format!("{prefix}.gain"), vec![d], vec![1.0; d])?;
    store.insert(&format!("{prefix}.bias"), vec![d], vec![0.0; d])
}

pub(crate) fn insert_block(store: &mut ParamStore, rng: &mut Rng, prefix: &str, d: usize, mlp: usize) -> Result<()> {
    insert_norm(store, &format!("{prefix}.norm1"), d)?;
    insert_linear(store, rng, &format!("{prefix}.attn.wq"), d, d)?;
    insert_linear(store, rng, &format!("{prefix}.attn.wk"), d, d)?;
    insert_linear(store, rng, &format!("{prefix}.attn.wv"), d, d)?;
    insert_linear(store, rng, &format!("{prefix}.attn.wo"), d, d)?;
    insert_norm(store, &format!("{prefix}.norm2"), d)?;
    insert_linear(store, rng, &format!("{prefix}.mlp.fc1"), d, mlp)?;
    insert_linear(store, rng, &format!("{prefix}.mlp.fc2"), mlp, d)
}

/// Insert the tokenizer embedding and all encoder blocks into `store`.
pub fn init_encoder_params(cfg: &ViTConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
    cfg.validate()?;
    let (d, n) = (cfg.hidden, cfg.patches());
    insert_linear(store, rng, "patch_embed", cfg.patch_dim(), d)?;
    store.insert(
        "pos_embed",
        vec![n + 1, d],
        trunc_normal_vec(rng, (n + 1) * d, INIT_STD),
    )?;
    store.insert("class_token", vec![d], trunc_normal_vec(rng, d, INIT_STD))?;
    for i in 0..cfg.depth {
        insert_block(store, rng, &block_prefix(i), d, cfg.mlp_dim)?;
    }
    insert_norm(store, "encoder.norm", d)
}

pub fn block_prefix(index: usize) -> String {
    format!("encoder.block{index}")
}

fn linear(x: &Tensor, params: &BoundParams, prefix: &str) -> Result<Tensor> {
    x.matmul(params.get(&format!("{prefix}.weight"))?)?
        .add(params.get(&format!("{prefix}.bias"))?)
}

fn norm(x: &Tensor, params: &BoundParams, prefix: &str) -> Result<Tensor> {
    x.layer_norm(
        params.get(&format!("{prefix}.gain"))?,
        params.get(&format!("{prefix}.bias"))?,
        LN_EPS,
    )
}

/// Multi-head attention with separate query and key/value inputs.
///
/// `queries` is [B, S, D] and `keys_values` is [B, T, D]; self-attention
/// passes the same tensor for both, cross-attention passes the memory.
pub fn multi_head_attention(
    queries: &Tensor,
    keys_values: &Tensor,
    params: &BoundParams,
    prefix: &str,
    heads: usize,
) -> Result<Tensor> {
    let (b, s, d) = (queries.shape()[0], queries.shape()[1], queries.shape()[2]);
    let t = keys_values.shape()[1];
    if d % heads != 0 {
        return Err(MirlError::Config(format!(
            "attention width {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;

    let split = |x: &Tensor, len: usize| -> Result<Tensor> {
        x.reshape(vec![b, len, heads, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(vec![b * heads, len, dh])
    };

    let q = split(&linear(queries, params, &format!("{prefix}.wq"))?, s)?;
    let k = split(&linear(keys_values, params, &format!("{prefix}.wk"))?, t)?;
    let v = split(&linear(keys_values, params, &format!("{prefix}.wv"))?, t)?;

    let scores = q
        .matmul(&k.permute(&[0, 2, 1])?)?
        .scale(1.0 / (dh as f64).sqrt())?;
    let weights = scores.softmax(2)?;
    let context = weights
        .matmul(&v)?
        .reshape(vec![b, heads, s, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(vec![b, s, d])?;
    linear(&context, params, &format!("{prefix}.wo"))
}

/// Pre-norm transformer block under the given parameter prefix.
pub fn transformer_block(
    x: &Tensor,
    params: &BoundParams,
    prefix: &str,
    heads: usize,
) -> Result<Tensor> {
    let h = norm(x, params, &format!("{prefix}.norm1"))?;
    let attn = multi_head_attention(&h, &h, params, &format!("{prefix}.attn"), heads)?;
    let x = x.add(&attn)?;
    let h = norm(&x, params, &format!("{prefix}.norm2"))?;
    let h = linear(&h, params, &format!("{prefix}.mlp.fc1"))?.gelu()?;
    let mlp = linear(&h, params, &format!("{prefix}.mlp.fc2"))?;
    x.add(&mlp)
}

/// Run a contiguous range of encoder blocks.
pub fn run_blocks(
    x: &Tensor,
    params: &BoundParams,
    from: usize,
    to: usize,
    heads: usize,
) -> Result<Tensor> {
    let mut h = x.clone();
    for i in from..to {
        h = transformer_block(&h, params, &block_prefix(i), heads)?;
    }
    Ok(h)
}

/// Apply all blocks, grouping them evenly into the configured segments and
/// collecting every segment boundary output.
pub fn encode_segments(
    _tape: &Tape,
    z0: TokenSequence,
    cfg: &ViTConfig,
    params: &BoundParams,
) -> Result<SegmentedEncoderState> {
    cfg.validate()?;
    let per = cfg.blocks_per_segment();
    let mut per_segment = Vec::with_capacity(cfg.segments);
    let mut h = z0.tokens.clone();
    for g in 0..cfg.segments {
        h = run_blocks(&h, params, g * per, (g + 1) * per, cfg.heads)?;
        per_segment.push(TokenSequence {
            tokens: h.clone(),
            plans: Rc::clone(&z0.plans),
            depth_tag: g + 1,
        });
    }
    Ok(SegmentedEncoderState { per_segment, z0 })
}

/// Final encoder layer norm; applied before classification or feature heads,
/// not between segments.
pub fn encoder_norm(x: &Tensor, params: &BoundParams) -> Result<Tensor> {
    norm(x, params, "encoder.norm")
}

/// Re-initialize the trailing `k` encoder blocks in place. Parameters of
/// blocks below depth-k are left bit-identical.
pub fn reinit_tail(store: &mut ParamStore, cfg: &ViTConfig, k: usize, rng: &mut Rng) -> Result<()> {
    if k > cfg.depth {
        return Err(MirlError::Config(format!(
            "cannot re-initialize {k} of {} blocks",
            cfg.depth
        )));
    }
    let mut fresh = ParamStore::new();
    let mut scratch = Rng::from_state(rng.state());
    for i in cfg.depth - k..cfg.depth {
        insert_block(&mut fresh, &mut scratch, &block_prefix(i), cfg.hidden, cfg.mlp_dim)?;
    }
    *rng = scratch;
    for p in fresh.iter() {
        let dst = store.get_mut(&p.name)?;
        if dst.shape != p.shape {
            return Err(MirlError::Config(format!(
                "shape mismatch re-initializing {}",
                p.name
            )));
        }
        dst.value.copy_from_slice(&p.value);
    }
    Ok(())
}

/// Config for pre-training only the first `keep` blocks. Fine-tuning
/// re-expands to the full depth with a randomly initialized tail.
pub fn truncate(cfg: &ViTConfig, keep: usize) -> Result<ViTConfig> {
    if keep == 0 || keep > cfg.depth {
        return Err(MirlError::Config(format!(
            "keep {keep} out of range 1..={}",
            cfg.depth
        )));
    }
    let mut out = cfg.clone();
    out.depth = keep;
    // segment count must still divide; fall back to a single segment when the
    // truncated depth breaks the grouping
    if keep % out.segments != 0 {
        out.segments = 1;
    }
    Ok(out)
}

/// Copy every compatible parameter of `src` (a truncated pre-trained model)
/// into `dst` (the full-depth model). Returns the copied names.
pub fn load_truncated(src: &ParamStore, dst: &mut ParamStore) -> Result<Vec<String>> {
    let mut copied = Vec::new();
    for p in src.iter() {
        if dst.contains(&p.name) {
            let slot = dst.get_mut(&p.name)?;
            if slot.shape != p.shape {
                return Err(MirlError::Checkpoint(format!(
                    "tensor {} has shape {:?} but the model expects {:?}",
                    p.name, p.shape, slot.shape
                )));
            }
            slot.value.copy_from_slice(&p.value);
            copied.push(p.name.clone());
        }
    }
    Ok(copied)
}
