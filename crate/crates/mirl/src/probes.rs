//! Diagnostic harnesses: tail re-initialization sweeps, truncated
//! pre-training, gradient-norm instrumentation, and reconstruction dumps.
//!
//! Probes default to linear-probe accuracy as the per-point metric, which is
//! affordable at desk scale; full fine-tuning sits behind a flag.

use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use crate::data::Dataset;
use crate::decoder::decode_pairs;
use crate::diffcore::Tape;
use crate::encoder::{encode_segments, reinit_tail, truncate, ViTConfig};
use crate::objectives::combined_prediction;
use crate::rng::Rng;
use crate::tokenizer::{embed_visible, patchify, sample_mask, unpatchify, ImageBatch, Patches};
use crate::training::{
    encoder_grad_norm_records, finetune, linear_probe, FinetuneSettings, Model,
    ObjectiveSettings, OptimSpec, Pretrainer, StepMetrics,
};
use crate::{MirlError, Result};

/// One record per sweep point per seed.
#[derive(Debug, Clone)]
pub struct ProbeRow {
    pub sweep_var: f64,
    pub seed: u64,
    pub metric: f64,
}

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub probe: String,
    pub rows: Vec<ProbeRow>,
}

impl ProbeResult {
    /// CSV with the columns probe, sweep_var, seed, metric.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "probe,sweep_var,seed,metric")?;
        for r in &self.rows {
            writeln!(f, "{},{},{},{}", self.probe, r.sweep_var, r.seed, r.metric)?;
        }
        Ok(())
    }

    /// Per-point mean and (population) variance across seeds.
    pub fn summary(&self) -> Vec<(f64, f64, f64, usize)> {
        let mut points: Vec<f64> = self.rows.iter().map(|r| r.sweep_var).collect();
        points.sort_by(|a, b| a.partial_cmp(b).unwrap());
        points.dedup();
        points
            .into_iter()
            .map(|p| {
                let vals: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.sweep_var == p)
                    .map(|r| r.metric)
                    .collect();
                let n = vals.len();
                let mean = vals.iter().sum::<f64>() / n as f64;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                (p, mean, var, n)
            })
            .collect()
    }

    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "probe,sweep_var,mean,variance,n")?;
        for (p, mean, var, n) in self.summary() {
            writeln!(f, "{},{p},{mean},{var},{n}", self.probe)?;
        }
        Ok(())
    }
}

/// How a probe scores an encoder.
#[derive(Debug, Clone)]
pub enum ProbeMetric {
    LinearProbe { steps: u64, lr: f64 },
    FullFinetune(FinetuneSettings),
}

pub fn score_encoder(
    model: &Model,
    train: &Dataset,
    test: &Dataset,
    metric: &ProbeMetric,
    seed: u64,
) -> Result<f64> {
    match metric {
        ProbeMetric::LinearProbe { steps, lr } => {
            linear_probe(model, train, test, *steps, *lr, seed)
        }
        ProbeMetric::FullFinetune(settings) => {
            Ok(finetune(model, train, test, settings, seed)?.accuracy)
        }
    }
}

/// For each k in `ks` and each seed: re-initialize the trailing k encoder
/// blocks of the pre-trained model, then score it. k = 0 therefore
/// reproduces the baseline evaluation exactly.
pub fn reinit_sweep(
    model: &Model,
    ks: &[usize],
    seeds: &[u64],
    train: &Dataset,
    test: &Dataset,
    metric: &ProbeMetric,
) -> Result<ProbeResult> {
    let mut rows = Vec::with_capacity(ks.len() * seeds.len());
    for &k in ks {
        if k > model.cfg.depth {
            return Err(MirlError::Config(format!(
                "cannot re-initialize {k} of {} blocks",
                model.cfg.depth
            )));
        }
        for &seed in seeds {
            let mut candidate = Model {
                cfg: model.cfg.clone(),
                dcfg: model.dcfg.clone(),
                store: model.store.clone(),
            };
            let mut rng = Rng::for_role(seed, "reinit");
            reinit_tail(&mut candidate.store, &candidate.cfg, k, &mut rng)?;
            let metric_value = score_encoder(&candidate, train, test, metric, seed)?;
            rows.push(ProbeRow {
                sweep_var: k as f64,
                seed,
                metric: metric_value,
            });
        }
    }
    Ok(ProbeResult {
        probe: "reinit_sweep".into(),
        rows,
    })
}

/// Pre-train only the first `keep` encoder blocks (single-segment masked
/// autoencoding or paired residual mode over the truncated depth), then
/// expand back to the full depth with a freshly initialized tail and score.
/// Returns the expanded model and the probe record.
#[allow(clippy::too_many_arguments)]
pub fn truncated_pretrain(
    cfg: &ViTConfig,
    dcfg: &crate::decoder::DecoderConfig,
    mode: crate::training::ObjectiveMode,
    keep: usize,
    spec: OptimSpec,
    objective_base: ObjectiveSettings,
    pretrain_steps: u64,
    dataset: Dataset,
    train: &Dataset,
    test: &Dataset,
    metric: &ProbeMetric,
    seed: u64,
) -> Result<(Model, ProbeResult)> {
    let mut tcfg = truncate(cfg, keep)?;
    match mode {
        crate::training::ObjectiveMode::Mae => tcfg.segments = 1,
        crate::training::ObjectiveMode::Mirl => {
            if tcfg.segments == 1 && keep % 2 == 0 {
                tcfg.segments = 2;
            }
            if keep % tcfg.segments != 0 {
                tcfg.segments = 1;
            }
        }
        _ => {
            return Err(MirlError::Config(
                "truncated pre-training supports the masked-autoencoder and residual modes".into(),
            ))
        }
    }
    let objective = ObjectiveSettings {
        mode: if tcfg.segments == 1 {
            crate::training::ObjectiveMode::Mae
        } else {
            mode
        },
        ..objective_base
    };
    let small = Model::init(tcfg.clone(), dcfg.clone(), seed, false)?;
    let mut trainer = Pretrainer::new(small, spec, objective, dataset, seed)?;
    trainer.train_steps(pretrain_steps)?;

    // expand: full-depth model, pre-trained weights into the first blocks
    let mut full = Model::init(cfg.clone(), dcfg.clone(), seed.wrapping_add(1), false)?;
    let copied = crate::encoder::load_truncated(&trainer.model.store, &mut full.store)?;
    let metric_value = score_encoder(&full, train, test, metric, seed)?;
    let rows = vec![ProbeRow {
        sweep_var: keep as f64,
        seed,
        metric: metric_value,
    }];
    let _ = copied;
    Ok((
        full,
        ProbeResult {
            probe: "truncated_pretrain".into(),
            rows,
        },
    ))
}

/// Run a short pre-training stretch with per-block gradient-norm recording
/// switched on and return the metric stream.
pub fn grad_norm_probe(trainer: &mut Pretrainer, steps: u64) -> Result<Vec<StepMetrics>> {
    let was = trainer.grad_norm_probe;
    trainer.grad_norm_probe = true;
    let metrics = trainer.train_steps(steps);
    trainer.grad_norm_probe = was;
    metrics
}

/// Recompute the grouped gradient norms straight from the store; the probe
/// stream must agree with this to the last few bits.
pub fn recompute_grad_norms(
    store: &crate::diffcore::ParamStore,
    depth: usize,
) -> Vec<crate::training::GradNormRecord> {
    encoder_grad_norm_records(store, depth)
}

/// The five reconstruction panels for one image, all in [0,1] display range.
pub struct Quintuplet {
    pub ground_truth: ImageBatch,
    pub masked: ImageBatch,
    pub reconstruction: ImageBatch,
    pub residual: ImageBatch,
    pub main: ImageBatch,
}

fn single(values: Vec<f64>, c: usize, h: usize, w: usize) -> ImageBatch {
    ImageBatch {
        values,
        batch: 1,
        channels: c,
        height: h,
        width: w,
        labels: None,
    }
}

fn clamp_unit(mut img: ImageBatch) -> ImageBatch {
    for v in &mut img.values {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

fn rescale_min_max(mut img: ImageBatch) -> ImageBatch {
    let lo = img.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = img.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    for v in &mut img.values {
        *v = (*v - lo) / span;
    }
    img
}

/// Forward a batch through the first decoder pair and assemble, per image:
/// ground truth, the masked view, the reconstruction, the (rescaled)
/// residual prediction and the main component.
pub fn reconstruction_panels(
    model: &Model,
    images: &ImageBatch,
    mask_ratio: f64,
    seed: u64,
) -> Result<Vec<Quintuplet>> {
    let cfg = &model.cfg;
    let n = cfg.patches();
    let mut rng = Rng::for_role(seed, "reconstruct");
    let plans: Vec<crate::tokenizer::MaskPlan> = (0..images.batch)
        .map(|_| sample_mask(n, mask_ratio, &mut rng))
        .collect::<Result<_>>()?;
    let plans = Rc::new(plans);

    let tape = Tape::new();
    let frozen = model.store.bind_filtered(&tape, |_| false);
    let input = patchify(images, cfg.patch)?;
    let z0 = embed_visible(&tape, &input, Rc::clone(&plans), &frozen)?;
    let state = encode_segments(&tape, z0, cfg, &frozen)?;
    let pairs = decode_pairs(&tape, &state, cfg, &model.dcfg, &frozen)?;
    let first = &pairs[0];
    let recon = combined_prediction(first, false)?.value();
    let main = first.main.value();
    let residual = first
        .residual
        .as_ref()
        .map(|r| r.value())
        .unwrap_or_else(|| vec![0.0; main.len()]);

    let (c, h, w, p) = (cfg.channels, cfg.image_h, cfg.image_w, cfg.patch);
    let dim = cfg.patch_dim();
    let il = images.image_len();
    let mut out = Vec::with_capacity(images.batch);
    for b in 0..images.batch {
        let gt = single(images.values[b * il..(b + 1) * il].to_vec(), c, h, w);

        // visible patches verbatim, masked patches mid-gray
        let mut masked_patches = Patches {
            data: input.data[b * n * dim..(b + 1) * n * dim].to_vec(),
            batch: 1,
            count: n,
            dim,
        };
        for &i in &plans[b].masked {
            masked_patches.data[i * dim..(i + 1) * dim].fill(0.5);
        }
        let masked = unpatchify(&masked_patches, p, c, h, w)?;

        let slice = |v: &[f64]| Patches {
            data: v[b * n * dim..(b + 1) * n * dim].to_vec(),
            batch: 1,
            count: n,
            dim,
        };
        let recon_img = unpatchify(&slice(&recon), p, c, h, w)?;
        let main_img = unpatchify(&slice(&main), p, c, h, w)?;
        let resid_img = unpatchify(&slice(&residual), p, c, h, w)?;

        out.push(Quintuplet {
            ground_truth: clamp_unit(gt),
            masked: clamp_unit(masked),
            reconstruction: clamp_unit(recon_img),
            residual: rescale_min_max(resid_img),
            main: clamp_unit(main_img),
        });
    }
    Ok(out)
}

/// Binary PPM (P6) encoding of one image; single-channel images replicate
/// into gray.
pub fn encode_ppm(img: &ImageBatch) -> Vec<u8> {
    let (c, h, w) = (img.channels, img.height, img.width);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = img.at(0, ch.min(c - 1), y, x);
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

/// Side-by-side strip of the five panels with a one-pixel white separator.
pub fn panel_strip(q: &Quintuplet) -> ImageBatch {
    let parts = [
        &q.ground_truth,
        &q.masked,
        &q.reconstruction,
        &q.residual,
        &q.main,
    ];
    let (c, h, w) = (parts[0].channels, parts[0].height, parts[0].width);
    let gap = 1usize;
    let total_w = w * parts.len() + gap * (parts.len() - 1);
    let mut strip = ImageBatch::new(1, c, h, total_w);
    strip.values.fill(1.0);
    for (i, part) in parts.iter().enumerate() {
        let x0 = i * (w + gap);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    strip.values[(ch * h + y) * total_w + x0 + x] = part.at(0, ch, y, x);
                }
            }
        }
    }
    strip
}

/// Write the quintuplets of a batch: five individual panels plus the
/// combined strip per image.
pub fn reconstruction_dump(
    model: &Model,
    images: &ImageBatch,
    mask_ratio: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let panels = reconstruction_panels(model, images, mask_ratio, seed)?;
    let mut written = Vec::new();
    for (i, q) in panels.iter().enumerate() {
        for (suffix, img) in [
            ("gt", &q.ground_truth),
            ("masked", &q.masked),
            ("recon", &q.reconstruction),
            ("residual", &q.residual),
            ("main", &q.main),
        ] {
            let path = out_dir.join(format!("img{i:03}_{suffix}.ppm"));
            std::fs::write(&path, encode_ppm(img))?;
            written.push(path);
        }
        let strip = panel_strip(q);
        let path = out_dir.join(format!("img{i:03}_panel.ppm"));
        std::fs::write(&path, encode_ppm(&strip))?;
        written.push(path);
    }
    Ok(written)
}
