//! Images to patch tokens and back, mask sampling, and visible-token
//! embedding with positional and class-token handling.
//!
//! Patch order is row-major over the patch grid; within a patch, values are
//! laid out channel-major then row-major pixels, so `unpatchify` is the exact
//! inverse. The class token occupies slot 0 of every token sequence and is
//! excluded from all reconstruction targets.

use std::rc::Rc;

use crate::diffcore::{BoundParams, Tape, Tensor};
use crate::rng::Rng;
use crate::{MirlError, Result};

/// A batch of images in [0,1], laid out B x C x H x W.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub values: Vec<f64>,
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Option<Vec<usize>>,
}

impl ImageBatch {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        ImageBatch {
            values: vec![0.0; batch * channels * height * width],
            batch,
            channels,
            height,
            width,
            labels: None,
        }
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.values[((b * self.channels + c) * self.height + y) * self.width + x]
    }
}

/// Disjoint visible/masked index sets over the patch grid of one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub patches: usize,
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

impl MaskPlan {
    /// Validates the set invariants: disjoint, and together covering 0..n.
    pub fn new(patches: usize, visible: Vec<usize>, masked: Vec<usize>) -> Result<Self> {
        let mut seen = vec![0u8; patches];
        for &i in visible.iter().chain(masked.iter()) {
            if i >= patches {
                return Err(MirlError::Data(format!("patch index {i} out of range")));
            }
            seen[i] += 1;
        }
        if visible.len() + masked.len() != patches || seen.iter().any(|&c| c != 1) {
            return Err(MirlError::Data(
                "visible and masked sets must partition the patch indexes".into(),
            ));
        }
        Ok(MaskPlan {
            patches,
            visible,
            masked,
        })
    }

    pub fn unmasked(patches: usize) -> Self {
        MaskPlan {
            patches,
            visible: (0..patches).collect(),
            masked: Vec::new(),
        }
    }
}

/// Patch matrix: B x N x (P*P*C) values in plain storage.
#[derive(Debug, Clone)]
pub struct Patches {
    pub data: Vec<f64>,
    pub batch: usize,
    pub count: usize,
    pub dim: usize,
}

impl Patches {
    pub fn patch(&self, b: usize, i: usize) -> &[f64] {
        let start = (b * self.count + i) * self.dim;
        &self.data[start..start + self.dim]
    }
}

/// Ordered visible-token embeddings, class token at slot 0.
pub struct TokenSequence {
    /// [B, |V|+1, D] with positional embeddings already added.
    pub tokens: Tensor,
    pub plans: Rc<Vec<MaskPlan>>,
    /// Index of the producing segment; 0 for the tokenized input.
    pub depth_tag: usize,
}

/// Split images into non-overlapping P x P patches, row-major.
pub fn patchify(img: &ImageBatch, patch: usize) -> Result<Patches> {
    if patch == 0 || img.height % patch != 0 || img.width % patch != 0 {
        return Err(MirlError::Data(format!(
            "image {}x{} not divisible by patch size {patch}",
            img.height, img.width
        )));
    }
    let (gh, gw) = (img.height / patch, img.width / patch);
    let count = gh * gw;
    let dim = patch * patch * img.channels;
    let mut data = vec![0.0; img.batch * count * dim];
    for b in 0..img.batch {
        for gy in 0..gh {
            for gx in 0..gw {
                let i = gy * gw + gx;
                let base = (b * count + i) * dim;
                let mut k = 0;
                for c in 0..img.channels {
                    for py in 0..patch {
                        for px in 0..patch {
                            data[base + k] = img.at(b, c, gy * patch + py, gx * patch + px);
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(Patches {
        data,
        batch: img.batch,
        count,
        dim,
    })
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(
    patches: &Patches,
    patch: usize,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<ImageBatch> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(MirlError::Data("patch size must divide image dims".into()));
    }
    let (gh, gw) = (height / patch, width / patch);
    if gh * gw != patches.count || patch * patch * channels != patches.dim {
        return Err(MirlError::Data(format!(
            "patch matrix {}x{} does not match {}x{}x{} with P={}",
            patches.count, patches.dim, channels, height, width, patch
        )));
    }
    let mut img = ImageBatch::new(patches.batch, channels, height, width);
    for b in 0..patches.batch {
        for gy in 0..gh {
            for gx in 0..gw {
                let i = gy * gw + gx;
                let row = patches.patch(b, i);
                let mut k = 0;
                for c in 0..channels {
                    for py in 0..patch {
                        for px in 0..patch {
                            let y = gy * patch + py;
                            let x = gx * patch + px;
                            img.values[((b * channels + c) * height + y) * width + x] = row[k];
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Uniform random mask over n patches; |masked| = round(ratio * n).
pub fn sample_mask(patches: usize, ratio: f64, rng: &mut Rng) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(MirlError::Config(format!(
            "mask ratio must be in [0,1), got {ratio}"
        )));
    }
    let masked_count = (ratio * patches as f64).round() as usize;
    let mut order: Vec<usize> = (0..patches).collect();
    rng.shuffle(&mut order);
    let mut masked: Vec<usize> = order[..masked_count].to_vec();
    let mut visible: Vec<usize> = order[masked_count..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    MaskPlan::new(patches, visible, masked)
}

/// Flattened row indexes (b*N + i) of the masked patches of every sample.
pub fn masked_row_indices(plans: &[MaskPlan], patches: usize) -> Vec<usize> {
    let mut rows = Vec::new();
    for (b, plan) in plans.iter().enumerate() {
        rows.extend(plan.masked.iter().map(|&i| b * patches + i));
    }
    rows
}

/// Linear-project the visible patches, add positional embeddings at their
/// original indexes, and prepend the class token.
///
/// Uses parameters `patch_embed.weight` [dim, D], `patch_embed.bias` [D],
/// `pos_embed` [N+1, D] (slot 0 is the class position), `class_token` [D].
pub fn embed_visible(
    tape: &Tape,
    patches: &Patches,
    plans: Rc<Vec<MaskPlan>>,
    params: &BoundParams,
) -> Result<TokenSequence> {
    if plans.len() != patches.batch {
        return Err(MirlError::Data(format!(
            "{} mask plans for batch of {}",
            plans.len(),
            patches.batch
        )));
    }
    let visible = plans[0].visible.len();
    if plans.iter().any(|p| p.visible.len() != visible || p.patches != patches.count) {
        return Err(MirlError::Data(
            "all mask plans in a batch must agree on patch count and |V|".into(),
        ));
    }
    let (b_sz, n, dim) = (patches.batch, patches.count, patches.dim);
    let weight = params.get("patch_embed.weight")?;
    let bias = params.get("patch_embed.bias")?;
    let pos = params.get("pos_embed")?;
    let class = params.get("class_token")?;
    let d = weight.shape()[1];

    let all = tape.constant(vec![b_sz * n, dim], patches.data.clone())?;
    let vis_rows: Vec<usize> = plans
        .iter()
        .enumerate()
        .flat_map(|(b, p)| p.visible.iter().map(move |&i| b * n + i))
        .collect();
    let projected = all.select_rows(&vis_rows)?.matmul(weight)?.add(bias)?;

    // positional rows, offset by one for the class slot
    let pos_rows: Vec<usize> = plans
        .iter()
        .flat_map(|p| p.visible.iter().map(|&i| i + 1))
        .collect();
    let vis_tokens = projected
        .add(&pos.select_rows(&pos_rows)?)?
        .reshape(vec![b_sz, visible, d])?;

    let class_tok = tape
        .zeros(vec![b_sz, 1, d])
        .add(class)?
        .add(&pos.select_rows(&[0])?)?;
    let tokens = Tensor::concat(&[class_tok, vis_tokens], 1)?;

    Ok(TokenSequence {
        tokens,
        plans,
        depth_tag: 0,
    })
}
