//! Loss functions: masked pixel reconstruction, residual pair losses with
//! their weighted total, the regularized variant, feature-level InfoNCE,
//! perceptual feature-map loss, and coarse/fine target construction.
//!
//! Every reconstruction loss gathers masked rows before any arithmetic, so
//! target values at visible positions can never influence a loss value.

use std::rc::Rc;

use crate::decoder::PairOutputs;
use crate::diffcore::{Tape, Tensor, GATHER_PAD};
use crate::rng::Rng;
use crate::tokenizer::{ImageBatch, MaskPlan, Patches};
use crate::{MirlError, Result};

/// Per-pair losses, the weights applied, and the resulting total.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub per_pair: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub total: f64,
    /// Additional objective terms (name, value), already weighted.
    pub aux: Vec<(String, f64)>,
}

/// Low-pass / complement split of an image batch; `coarse + fine` always
/// reconstructs the original bit-exactly because `fine` is defined as the
/// pointwise difference.
#[derive(Debug, Clone)]
pub struct CoarseFineTargets {
    pub coarse: ImageBatch,
    pub fine: ImageBatch,
    pub sigma: f64,
}

fn checked_masked_rows(plans: &[MaskPlan], patches: usize) -> Result<Vec<usize>> {
    let rows = crate::tokenizer::masked_row_indices(plans, patches);
    if rows.is_empty() {
        return Err(MirlError::Data(
            "loss undefined with an empty masked set".into(),
        ));
    }
    Ok(rows)
}

fn gather_target_rows(target: &Patches, rows: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * target.dim);
    for &r in rows {
        out.extend_from_slice(&target.data[r * target.dim..(r + 1) * target.dim]);
    }
    out
}

/// Mean squared error over masked patch rows: per patch the squared L2
/// distance divided by the patch dimension, averaged over masked patches
/// and the batch.
pub fn pixel_loss(
    tape: &Tape,
    pred: &Tensor,
    target: &Patches,
    plans: &[MaskPlan],
) -> Result<Tensor> {
    if pred.shape() != [target.batch, target.count, target.dim] {
        return Err(MirlError::shape(
            "pixel_loss",
            format!(
                "prediction {:?} vs target {}x{}x{}",
                pred.shape(),
                target.batch,
                target.count,
                target.dim
            ),
        ));
    }
    let rows = checked_masked_rows(plans, target.count)?;
    let flat = pred.reshape(vec![target.batch * target.count, target.dim])?;
    let pred_rows = flat.select_rows(&rows)?;
    let target_rows = tape.constant(
        vec![rows.len(), target.dim],
        gather_target_rows(target, &rows),
    )?;
    pred_rows.sub(&target_rows)?.square()?.mean_all()
}

/// Combined prediction of a shallow/deep pair. `detach_shortcut` severs the
/// path from the residual loss back into the main prediction; the standard
/// configuration keeps it connected so one loss trains both halves.
pub fn combined_prediction(pair: &PairOutputs, detach_shortcut: bool) -> Result<Tensor> {
    let main = if detach_shortcut {
        pair.main.detach()
    } else {
        pair.main.clone()
    };
    match &pair.residual {
        Some(residual) => main.add(residual),
        None => Ok(main),
    }
}

/// Residual pair loss: the pixel loss of `main + residual` against the
/// target. Gradients reach both decoders and, through them, both encoder
/// segment groups.
pub fn residual_pair_loss(
    tape: &Tape,
    pair: &PairOutputs,
    target: &Patches,
    plans: &[MaskPlan],
    detach_shortcut: bool,
) -> Result<Tensor> {
    let combined = combined_prediction(pair, detach_shortcut)?;
    pixel_loss(tape, &combined, target, plans)
}

/// Default pair weights: 2/G for every pair (1.0 for the degenerate
/// single-segment model).
pub fn default_lambdas(segments: usize, pairs: usize) -> Vec<f64> {
    if segments <= 1 {
        vec![1.0; pairs]
    } else {
        vec![2.0 / segments as f64; pairs]
    }
}

/// Weighted sum of all pair losses. `lambdas` overrides the 2/G default and
/// must then list one weight per pair.
pub fn total_loss(
    tape: &Tape,
    pairs: &[PairOutputs],
    target: &Patches,
    plans: &[MaskPlan],
    segments: usize,
    lambdas: Option<&[f64]>,
    detach_shortcut: bool,
) -> Result<(Tensor, LossReport)> {
    if pairs.is_empty() {
        return Err(MirlError::Config("no decoder pairs to score".into()));
    }
    let lambdas = match lambdas {
        Some(l) => {
            if l.len() != pairs.len() {
                return Err(MirlError::Config(format!(
                    "{} loss weights for {} pairs",
                    l.len(),
                    pairs.len()
                )));
            }
            l.to_vec()
        }
        None => default_lambdas(segments, pairs.len()),
    };
    let mut per_pair = Vec::with_capacity(pairs.len());
    let mut total: Option<Tensor> = None;
    for (pair, &lambda) in pairs.iter().zip(&lambdas) {
        let loss = residual_pair_loss(tape, pair, target, plans, detach_shortcut)?;
        per_pair.push(loss.item());
        let weighted = loss.scale(lambda)?;
        total = Some(match total {
            Some(t) => t.add(&weighted)?,
            None => weighted,
        });
    }
    let total = total.unwrap();
    let report = LossReport {
        per_pair,
        lambdas,
        total: total.item(),
        aux: Vec::new(),
    };
    Ok((total, report))
}

/// Regularized variant: adds an omega-weighted main-reconstruction penalty
/// on top of the residual pair loss.
pub fn variant_loss_dagger(
    tape: &Tape,
    pair: &PairOutputs,
    target: &Patches,
    plans: &[MaskPlan],
    omega: f64,
    detach_shortcut: bool,
) -> Result<Tensor> {
    if omega < 0.0 {
        return Err(MirlError::Config(format!(
            "regularization weight must be non-negative, got {omega}"
        )));
    }
    let base = residual_pair_loss(tape, pair, target, plans, detach_shortcut)?;
    let main_term = pixel_loss(tape, &pair.main, target, plans)?.scale(omega)?;
    main_term.add(&base)
}

/// L2-normalize the rows of a [B, D] tensor.
pub fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    let b = x.shape()[0];
    let norms = x
        .square()?
        .sum_over(1)?
        .add_scalar(1e-12)?
        .sqrt()?
        .reshape(vec![b, 1])?;
    x.div(&norms)
}

/// InfoNCE over a batch of feature predictions: row b of `targets` is the
/// positive for row b of `pred`, every other row is a negative. Both sides
/// are L2-normalized before the dot products.
pub fn infonce_feature_loss(
    tape: &Tape,
    pred: &Tensor,
    targets: &Tensor,
    tau: f64,
) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(MirlError::Config(format!("temperature must be positive, got {tau}")));
    }
    if pred.shape().len() != 2 || pred.shape() != targets.shape() {
        return Err(MirlError::shape(
            "infonce",
            format!("{:?} vs {:?}", pred.shape(), targets.shape()),
        ));
    }
    let b = pred.shape()[0];
    if b < 2 {
        return Err(MirlError::Config(
            "contrastive loss needs at least two images for negatives".into(),
        ));
    }
    let _ = tape;
    let zn = l2_normalize_rows(pred)?;
    let tn = l2_normalize_rows(targets)?;
    let logits = zn.matmul(&tn.permute(&[1, 0])?)?.scale(1.0 / tau)?;
    let logp = logits.log_softmax(1)?;
    let diag: Rc<Vec<usize>> = Rc::new((0..b).map(|i| i * b + i).collect());
    logp.gather(diag, vec![b])?.mean_all()?.neg()
}

/// Fixed multi-layer feature map for the perceptual loss. Implementations
/// must be constant: gradients flow through the input image only.
pub trait FeatureExtractor {
    fn features(&self, tape: &Tape, img: &Tensor, dims: (usize, usize, usize)) -> Result<Vec<Tensor>>;
}

/// Trivial extractor whose single layer is the image itself.
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn features(&self, _tape: &Tape, img: &Tensor, _dims: (usize, usize, usize)) -> Result<Vec<Tensor>> {
        Ok(vec![img.clone()])
    }
}

/// A small fixed convolutional stack with seeded random weights: 3x3 valid
/// convolutions with a gelu between layers. Weight layout per layer is
/// [C*k*k, OC].
pub struct SeededConvExtractor {
    pub layers: Vec<ConvLayer>,
}

pub struct ConvLayer {
    pub weight: Vec<f64>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl SeededConvExtractor {
    pub fn from_seed(seed: u64, in_channels: usize) -> Self {
        let mut rng = Rng::from_seed(seed);
        let widths = [in_channels, 8, 8];
        let mut layers = Vec::new();
        for w in widths.windows(2) {
            let (ci, co) = (w[0], w[1]);
            let fan_in = (ci * 9) as f64;
            let std = (1.0 / fan_in).sqrt();
            let weight = (0..ci * 9 * co).map(|_| rng.normal() * std).collect();
            layers.push(ConvLayer {
                weight,
                in_channels: ci,
                out_channels: co,
                kernel: 3,
            });
        }
        SeededConvExtractor { layers }
    }

    /// Load layer weights from a named-tensor container (the checkpoint
    /// format): tensors `extractor.layer{i}.weight` shaped [C*k*k, OC] with
    /// kernel size recorded as `extractor.layer{i}.kernel` (scalar).
    pub fn from_file(path: &std::path::Path, in_channels: usize) -> Result<Self> {
        let tensors = crate::training::checkpoint::read_named_tensors(path)?;
        let mut layers = Vec::new();
        let mut ci = in_channels;
        for i in 0.. {
            let wname = format!("extractor.layer{i}.weight");
            let kname = format!("extractor.layer{i}.kernel");
            let (Some(w), Some(k)) = (tensors.get(&wname), tensors.get(&kname)) else {
                break;
            };
            let kernel = k.1[0] as usize;
            let rows = ci * kernel * kernel;
            if w.0.len() != 2 || w.0[0] != rows {
                return Err(MirlError::Checkpoint(format!(
                    "{wname}: expected [{rows}, out], found {:?}",
                    w.0
                )));
            }
            let oc = w.0[1];
            layers.push(ConvLayer {
                weight: w.1.clone(),
                in_channels: ci,
                out_channels: oc,
                kernel,
            });
            ci = oc;
        }
        if layers.is_empty() {
            return Err(MirlError::Checkpoint(
                "no extractor layers found in container".into(),
            ));
        }
        Ok(SeededConvExtractor { layers })
    }
}

/// Valid (unpadded) convolution built from an element gather plus one matmul,
/// so it stays differentiable with respect to the input image.
fn conv2d_valid(
    tape: &Tape,
    img: &Tensor,
    layer: &ConvLayer,
    h: usize,
    w: usize,
) -> Result<(Tensor, usize, usize)> {
    let b = img.shape()[0];
    let (c, k) = (layer.in_channels, layer.kernel);
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    if h < k || w < k {
        return Err(MirlError::shape("conv2d", "image smaller than kernel"));
    }
    let mut idx = Vec::with_capacity(b * oh * ow * c * k * k);
    for bi in 0..b {
        for y in 0..oh {
            for x in 0..ow {
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            idx.push(((bi * c + ci) * h + y + ky) * w + x + kx);
                        }
                    }
                }
            }
        }
    }
    let cols = img
        .reshape(vec![b * c * h * w])?
        .gather(Rc::new(idx), vec![b * oh * ow, c * k * k])?;
    let weight = tape.constant(vec![c * k * k, layer.out_channels], layer.weight.clone())?;
    let out = cols
        .matmul(&weight)?
        .reshape(vec![b, oh, ow, layer.out_channels])?
        .permute(&[0, 3, 1, 2])?;
    Ok((out, oh, ow))
}

impl FeatureExtractor for SeededConvExtractor {
    fn features(&self, tape: &Tape, img: &Tensor, dims: (usize, usize, usize)) -> Result<Vec<Tensor>> {
        let (_c, mut h, mut w) = dims;
        let mut maps = Vec::with_capacity(self.layers.len());
        let mut x = img.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, oh, ow) = conv2d_valid(tape, &x, layer, h, w)?;
            let y = if i + 1 < self.layers.len() { y.gelu()? } else { y };
            h = oh;
            w = ow;
            maps.push(y.clone());
            x = y;
        }
        Ok(maps)
    }
}

/// Gather map turning a flat patch matrix [B*N*dim] into an image tensor
/// [B, C, H, W]; the inverse of the patch layout.
pub fn unpatchify_index_map(
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Vec<usize> {
    let (gh, gw) = (height / patch, width / patch);
    let n = gh * gw;
    let dim = patch * patch * channels;
    let mut idx = vec![GATHER_PAD; batch * channels * height * width];
    for b in 0..batch {
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    let (gy, py) = (y / patch, y % patch);
                    let (gx, px) = (x / patch, x % patch);
                    let pi = gy * gw + gx;
                    let off = (c * patch + py) * patch + px;
                    idx[((b * channels + c) * height + y) * width + x] =
                        (b * n + pi) * dim + off;
                }
            }
        }
    }
    idx
}

/// Replace the masked rows of the target with the prediction rows and fold
/// back into an image tensor. Visible positions therefore carry ground
/// truth; only masked positions depend on the model.
pub fn mix_predictions(
    tape: &Tape,
    pred: &Tensor,
    target: &Patches,
    plans: &[MaskPlan],
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<Tensor> {
    let (b, n, dim) = (target.batch, target.count, target.dim);
    let rows = crate::tokenizer::masked_row_indices(plans, n);
    let base = tape.constant(vec![b * n, dim], target.data.clone())?;
    let mixed = if rows.is_empty() {
        base
    } else {
        let pred_rows = pred.reshape(vec![b * n, dim])?.select_rows(&rows)?;
        base.scatter_rows(&rows, &pred_rows)?
    };
    let map = unpatchify_index_map(b, channels, height, width, patch);
    mixed
        .reshape(vec![b * n * dim])?
        .gather(Rc::new(map), vec![b, channels, height, width])
}

/// Sum over extractor layers of the mean squared feature difference between
/// the mixed image and the clean target, averaged over the batch.
pub fn perceptual_loss(
    tape: &Tape,
    mixed: &Tensor,
    target_img: &ImageBatch,
    extractor: &dyn FeatureExtractor,
) -> Result<Tensor> {
    let dims = (target_img.channels, target_img.height, target_img.width);
    let clean = tape.constant(
        vec![
            target_img.batch,
            target_img.channels,
            target_img.height,
            target_img.width,
        ],
        target_img.values.clone(),
    )?;
    let fake_maps = extractor.features(tape, mixed, dims)?;
    let real_maps = extractor.features(tape, &clean, dims)?;
    if fake_maps.is_empty() {
        return Err(MirlError::Config("extractor produced no layers".into()));
    }
    let mut total: Option<Tensor> = None;
    for (f, r) in fake_maps.iter().zip(&real_maps) {
        // mean over batch and feature dims = batch mean of the per-image
        // feature-normalized squared distance
        let term = f.sub(r)?.square()?.mean_all()?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.unwrap())
}

/// Separate an image into a Gaussian low-pass component and its complement.
/// `order` of target assignment is chosen by the caller.
pub fn coarse_fine_targets(img: &ImageBatch, sigma: f64) -> Result<CoarseFineTargets> {
    if sigma <= 0.0 {
        return Err(MirlError::Config(format!("sigma must be positive, got {sigma}")));
    }
    let kernel = gaussian_kernel(sigma);
    let mut coarse = gaussian_blur(img, &kernel);
    let mut fine = img.clone();
    // One rounded subtraction does not guarantee coarse + fine == img in
    // IEEE arithmetic, so re-derive both parts until the sum is a fixed
    // point; this settles within a couple of rounds and moves coarse by at
    // most a few ulps. A pixel that refused to settle would degrade to the
    // trivial split (coarse = img).
    for ((c, f), &o) in coarse
        .values
        .iter_mut()
        .zip(fine.values.iter_mut())
        .zip(&img.values)
    {
        let mut settled = false;
        for _ in 0..4 {
            *f = o - *c;
            *c = o - *f;
            if *c + *f == o {
                settled = true;
                break;
            }
        }
        if !settled {
            *c = o;
            *f = 0.0;
        }
    }
    fine.labels = img.labels.clone();
    Ok(CoarseFineTargets {
        coarse,
        fine,
        sigma,
    })
}

/// Normalized 1-D Gaussian taps with radius ceil(3 sigma).
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64 * i as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Separable blur with clamp-to-edge boundaries.
fn gaussian_blur(img: &ImageBatch, kernel: &[f64]) -> ImageBatch {
    let radius = (kernel.len() / 2) as i64;
    let (h, w) = (img.height as i64, img.width as i64);
    let mut horizontal = img.clone();
    for b in 0..img.batch {
        for c in 0..img.channels {
            let base = (b * img.channels + c) * img.height * img.width;
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (t, tap) in kernel.iter().enumerate() {
                        let sx = (x + t as i64 - radius).clamp(0, w - 1);
                        acc += tap * img.values[base + (y * w + sx) as usize];
                    }
                    horizontal.values[base + (y * w + x) as usize] = acc;
                }
            }
        }
    }
    let mut out = horizontal.clone();
    for b in 0..img.batch {
        for c in 0..img.channels {
            let base = (b * img.channels + c) * img.height * img.width;
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (t, tap) in kernel.iter().enumerate() {
                        let sy = (y + t as i64 - radius).clamp(0, h - 1);
                        acc += tap * horizontal.values[base + (sy * w + x) as usize];
                    }
                    out.values[base + (y * w + x) as usize] = acc;
                }
            }
        }
    }
    out.labels = img.labels.clone();
    out
}

/// Optional per-patch target normalization: zero mean, unit variance within
/// each patch row.
pub fn normalize_patch_targets(patches: &Patches) -> Patches {
    let mut out = patches.clone();
    let d = patches.dim as f64;
    for r in 0..patches.batch * patches.count {
        let row = &mut out.data[r * patches.dim..(r + 1) * patches.dim];
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + 1e-6).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

#[cfg(test)]
#[path = "objectives_tests.rs"]
mod tests;
