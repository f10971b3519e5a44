//! Pre-training and fine-tuning loops.
//!
//! Every random choice flows from a role-derived stream of the run seed, and
//! batch order is a pure function of (seed, epoch), so identically seeded
//! runs produce identical metric streams and checkpoints can resume from the
//! step counter alone.

use std::path::{Path, PathBuf};
use std::rc::Rc;

use serde::Serialize;

use crate::data::Dataset;
use crate::decoder::{decode_pairs, init_decoder_params, multi_decoder_outputs, DecoderConfig};
use crate::diffcore::{BoundParams, ParamStore, Tape, Tensor};
use crate::encoder::{
    encode_segments, encoder_norm, init_encoder_params, insert_block, run_blocks, ViTConfig,
    INIT_STD,
};
use crate::objectives::{
    coarse_fine_targets, default_lambdas, infonce_feature_loss, mix_predictions,
    normalize_patch_targets, perceptual_loss, pixel_loss, total_loss, variant_loss_dagger,
    combined_prediction, LossReport, SeededConvExtractor,
};
use crate::rng::Rng;
use crate::tokenizer::{embed_visible, patchify, sample_mask, ImageBatch, MaskPlan, Patches};
use crate::training::checkpoint::{Checkpoint, Moments};
use crate::training::{
    accuracy, cross_entropy_label_smoothing, ema_update, layer_lr_scale, lr_at, momentum_update,
    AdamW, OptimSpec,
};
use crate::{MirlError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveMode {
    /// Residual learning over shallow/deep segment pairs.
    Mirl,
    /// Plain masked autoencoding; requires a single segment.
    Mae,
    /// One independent reconstruction per segment, no pairing.
    MultiDecoder,
    /// Shallow half reconstructs the low-pass component, deep half the rest.
    CoarseToFine,
    /// The reversed target assignment.
    FineToCoarse,
}

#[derive(Debug, Clone)]
pub struct InfoNceSettings {
    pub tau: f64,
    pub momentum: f64,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct PerceptualSettings {
    pub weight: f64,
    pub extractor_seed: u64,
    pub weights_file: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct ObjectiveSettings {
    pub mode: ObjectiveMode,
    pub mask_ratio: f64,
    pub norm_pix: bool,
    pub lambdas: Option<Vec<f64>>,
    pub dagger_omega: Option<f64>,
    pub detach_shortcut: bool,
    pub infonce: Option<InfoNceSettings>,
    pub perceptual: Option<PerceptualSettings>,
    pub coarse_sigma: f64,
    pub augment: bool,
}

impl Default for ObjectiveSettings {
    fn default() -> Self {
        ObjectiveSettings {
            mode: ObjectiveMode::Mirl,
            mask_ratio: 0.75,
            norm_pix: false,
            lambdas: None,
            dagger_omega: None,
            detach_shortcut: false,
            infonce: None,
            perceptual: None,
            coarse_sigma: 2.0,
            augment: true,
        }
    }
}

/// Encoder + decoders and their parameter store.
pub struct Model {
    pub cfg: ViTConfig,
    pub dcfg: DecoderConfig,
    pub store: ParamStore,
}

impl Model {
    /// Fresh model; the feature head (two extra blocks at encoder width)
    /// is only materialized when the contrastive objective needs it.
    pub fn init(
        cfg: ViTConfig,
        dcfg: DecoderConfig,
        seed: u64,
        feature_head: bool,
    ) -> Result<Model> {
        cfg.validate()?;
        dcfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::for_role(seed, "init");
        init_encoder_params(&cfg, &mut store, &mut rng)?;
        init_decoder_params(&cfg, &dcfg, &mut store, &mut rng)?;
        if feature_head {
            init_feature_head(&cfg, &mut store, &mut rng)?;
        }
        Ok(Model { cfg, dcfg, store })
    }
}

fn init_feature_head(cfg: &ViTConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
    let (d, n) = (cfg.hidden, cfg.patches());
    store.insert(
        "feature_head.mask_token",
        vec![d],
        (0..d).map(|_| rng.trunc_normal(INIT_STD)).collect(),
    )?;
    store.insert(
        "feature_head.pos_embed",
        vec![n + 1, d],
        (0..(n + 1) * d).map(|_| rng.trunc_normal(INIT_STD)).collect(),
    )?;
    for blk in 0..2 {
        insert_block(store, rng, &format!("feature_head.block{blk}"), d, cfg.mlp_dim)?;
    }
    store.insert("feature_head.norm.gain", vec![d], vec![1.0; d])?;
    store.insert("feature_head.norm.bias", vec![d], vec![0.0; d])
}

/// One metrics line per step; serialized as JSON.
#[derive(Debug, Clone, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub pair_losses: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub aux: Vec<(String, f64)>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub grad_norms: Vec<GradNormRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradNormRecord {
    pub block: usize,
    pub group: String,
    pub norm: f64,
}

/// Per-block gradient norms grouped the way the instrumentation plots them:
/// attention qkv, mlp, layer norms, and the attention output fc.
pub fn encoder_grad_norm_records(store: &ParamStore, depth: usize) -> Vec<GradNormRecord> {
    let groups: [(&str, &[&str]); 4] = [
        ("attn_qkv", &["attn.wq", "attn.wk", "attn.wv"]),
        ("fc", &["attn.wo"]),
        ("mlp", &["mlp.fc1", "mlp.fc2"]),
        ("norm", &["norm1", "norm2"]),
    ];
    let mut out = Vec::with_capacity(depth * groups.len());
    for block in 0..depth {
        for (group, members) in &groups {
            let mut sq = 0.0;
            for member in *members {
                let prefix = format!("encoder.block{block}.{member}");
                for p in store.with_prefix(&prefix) {
                    for g in &p.grad {
                        sq += g * g;
                    }
                }
            }
            out.push(GradNormRecord {
                block,
                group: group.to_string(),
                norm: sq.sqrt(),
            });
        }
    }
    out
}

enum TargetSet {
    Plain(Patches),
    Split { first: Patches, second: Patches },
}

/// Everything one pre-training run needs, with deterministic streams.
pub struct Pretrainer {
    pub model: Model,
    pub spec: OptimSpec,
    pub objective: ObjectiveSettings,
    pub dataset: Dataset,
    pub optimizer: AdamW,
    pub momentum_store: Option<ParamStore>,
    extractor: Option<SeededConvExtractor>,
    pub seed: u64,
    pub step: u64,
    rng_mask: Rng,
    rng_aug: Rng,
    perm: Vec<usize>,
    perm_epoch: u64,
    /// Record per-block gradient norms in the metrics stream.
    pub grad_norm_probe: bool,
}

impl Pretrainer {
    pub fn new(
        model: Model,
        spec: OptimSpec,
        objective: ObjectiveSettings,
        dataset: Dataset,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        if dataset.is_empty() {
            return Err(MirlError::Data("empty dataset".into()));
        }
        if !(0.0..1.0).contains(&objective.mask_ratio) {
            return Err(MirlError::Config(format!(
                "mask ratio must be in [0,1), got {}",
                objective.mask_ratio
            )));
        }
        match objective.mode {
            ObjectiveMode::Mae if model.cfg.segments != 1 => {
                return Err(MirlError::Config(
                    "plain masked autoencoding expects a single segment".into(),
                ))
            }
            ObjectiveMode::CoarseToFine | ObjectiveMode::FineToCoarse
                if model.cfg.segments < 2 =>
            {
                return Err(MirlError::Config(
                    "coarse/fine targets need an even segment count of at least 2".into(),
                ))
            }
            _ => {}
        }
        if let Some(l) = &objective.lambdas {
            let pairs = if model.cfg.segments == 1 { 1 } else { model.cfg.segments / 2 };
            if l.len() != pairs {
                return Err(MirlError::Config(format!(
                    "{} loss weights for {} pairs",
                    l.len(),
                    pairs
                )));
            }
        }
        if objective.infonce.is_some() && !model.store.contains("feature_head.mask_token") {
            return Err(MirlError::Config(
                "contrastive objective requires a model built with the feature head".into(),
            ));
        }
        let extractor = match &objective.perceptual {
            Some(p) => Some(match &p.weights_file {
                Some(path) => SeededConvExtractor::from_file(path, model.cfg.channels)?,
                None => SeededConvExtractor::from_seed(p.extractor_seed, model.cfg.channels),
            }),
            None => None,
        };
        let momentum_store = objective.infonce.as_ref().map(|_| model.store.clone());
        let optimizer = AdamW::new(&model.store);
        Ok(Pretrainer {
            model,
            spec,
            objective,
            dataset,
            optimizer,
            momentum_store,
            extractor,
            seed,
            step: 0,
            rng_mask: Rng::for_role(seed, "mask"),
            rng_aug: Rng::for_role(seed, "augment"),
            perm: Vec::new(),
            perm_epoch: u64::MAX,
            grad_norm_probe: false,
        })
    }

    fn sample_index(&mut self, global: u64) -> usize {
        let len = self.dataset.len() as u64;
        let epoch = global / len;
        if epoch != self.perm_epoch {
            let mut rng = Rng::for_role(self.seed, &format!("order{epoch}"));
            self.perm = crate::data::epoch_order(len as usize, &mut rng);
            self.perm_epoch = epoch;
        }
        self.perm[(global % len) as usize]
    }

    fn next_batch(&mut self) -> ImageBatch {
        let b = self.spec.batch_size;
        let start = self.step * b as u64;
        let indices: Vec<usize> = (0..b as u64)
            .map(|j| self.sample_index(start + j))
            .collect();
        if self.objective.augment {
            self.dataset.batch_augmented(&indices, &mut self.rng_aug)
        } else {
            self.dataset.batch(&indices)
        }
    }

    fn targets_for(&self, images: &ImageBatch) -> Result<TargetSet> {
        match self.objective.mode {
            ObjectiveMode::CoarseToFine | ObjectiveMode::FineToCoarse => {
                let split = coarse_fine_targets(images, self.objective.coarse_sigma)?;
                let coarse = patchify(&split.coarse, self.model.cfg.patch)?;
                let fine = patchify(&split.fine, self.model.cfg.patch)?;
                let (first, second) = match self.objective.mode {
                    ObjectiveMode::CoarseToFine => (coarse, fine),
                    _ => (fine, coarse),
                };
                Ok(TargetSet::Split { first, second })
            }
            _ => {
                let raw = patchify(images, self.model.cfg.patch)?;
                let t = if self.objective.norm_pix {
                    normalize_patch_targets(&raw)
                } else {
                    raw
                };
                Ok(TargetSet::Plain(t))
            }
        }
    }

    /// Forward one batch and return the scalar loss plus its breakdown.
    /// Exposed for the probes that need gradients without an update.
    pub fn forward_loss(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        images: &ImageBatch,
        plans: Rc<Vec<MaskPlan>>,
    ) -> Result<(Tensor, LossReport)> {
        let cfg = &self.model.cfg;
        let input = patchify(images, cfg.patch)?;
        let targets = self.targets_for(images)?;
        let z0 = embed_visible(tape, &input, Rc::clone(&plans), bound)?;
        let state = encode_segments(tape, z0, cfg, bound)?;

        let (mut loss, mut report) = match (&self.objective.mode, &targets) {
            (ObjectiveMode::Mirl | ObjectiveMode::Mae, TargetSet::Plain(t)) => {
                let pairs = decode_pairs(tape, &state, cfg, &self.model.dcfg, bound)?;
                match self.objective.dagger_omega {
                    None => total_loss(
                        tape,
                        &pairs,
                        t,
                        &plans,
                        cfg.segments,
                        self.objective.lambdas.as_deref(),
                        self.objective.detach_shortcut,
                    )?,
                    Some(omega) => {
                        let lambdas = self
                            .objective
                            .lambdas
                            .clone()
                            .unwrap_or_else(|| default_lambdas(cfg.segments, pairs.len()));
                        let mut per_pair = Vec::with_capacity(pairs.len());
                        let mut acc: Option<Tensor> = None;
                        for (pair, &lambda) in pairs.iter().zip(&lambdas) {
                            let l = variant_loss_dagger(
                                tape,
                                pair,
                                t,
                                &plans,
                                omega,
                                self.objective.detach_shortcut,
                            )?;
                            per_pair.push(l.item());
                            let w = l.scale(lambda)?;
                            acc = Some(match acc {
                                Some(a) => a.add(&w)?,
                                None => w,
                            });
                        }
                        let total = acc.unwrap();
                        let report = LossReport {
                            per_pair,
                            lambdas,
                            total: total.item(),
                            aux: Vec::new(),
                        };
                        (total, report)
                    }
                }
            }
            (ObjectiveMode::MultiDecoder, TargetSet::Plain(t)) => {
                let outs = multi_decoder_outputs(tape, &state, cfg, &self.model.dcfg, bound)?;
                self.mean_of_decoders(tape, &outs, |_| t, &plans)?
            }
            (ObjectiveMode::CoarseToFine | ObjectiveMode::FineToCoarse, TargetSet::Split { first, second }) => {
                let outs = multi_decoder_outputs(tape, &state, cfg, &self.model.dcfg, bound)?;
                let half = outs.len() / 2;
                self.mean_of_decoders(
                    tape,
                    &outs,
                    |i| if i < half { first } else { second },
                    &plans,
                )?
            }
            _ => unreachable!("target set matches objective mode"),
        };

        if let Some(nce) = &self.objective.infonce {
            let momentum = self
                .momentum_store
                .as_ref()
                .expect("momentum encoder present when the contrastive loss is on");
            let pred = feature_predictions(tape, &state, cfg, bound)?;
            let target = momentum_features(tape, momentum, cfg, images, &plans)?;
            let term = infonce_feature_loss(tape, &pred, &target, nce.tau)?;
            let weighted = term.scale(nce.weight)?;
            report.aux.push(("infonce".into(), weighted.item()));
            loss = loss.add(&weighted)?;
        }
        if let Some(p) = &self.objective.perceptual {
            let extractor = self.extractor.as_ref().expect("extractor built at construction");
            // mix the first pair's full reconstruction into the clean image
            let pairs = decode_pairs(tape, &state, cfg, &self.model.dcfg, bound)?;
            let recon = combined_prediction(&pairs[0], self.objective.detach_shortcut)?;
            let raw = patchify(images, cfg.patch)?;
            let mixed = mix_predictions(
                tape,
                &recon,
                &raw,
                &plans,
                cfg.channels,
                cfg.image_h,
                cfg.image_w,
                cfg.patch,
            )?;
            let term = perceptual_loss(tape, &mixed, images, extractor)?;
            let weighted = term.scale(p.weight)?;
            report.aux.push(("perceptual".into(), weighted.item()));
            loss = loss.add(&weighted)?;
        }
        report.total = loss.item();
        Ok((loss, report))
    }

    fn mean_of_decoders<'t>(
        &self,
        tape: &Tape,
        outs: &[Tensor],
        target_of: impl Fn(usize) -> &'t Patches,
        plans: &[MaskPlan],
    ) -> Result<(Tensor, LossReport)> {
        let lambda = 1.0 / outs.len() as f64;
        let mut per_pair = Vec::with_capacity(outs.len());
        let mut acc: Option<Tensor> = None;
        for (i, out) in outs.iter().enumerate() {
            let l = pixel_loss(tape, out, target_of(i), plans)?;
            per_pair.push(l.item());
            let w = l.scale(lambda)?;
            acc = Some(match acc {
                Some(a) => a.add(&w)?,
                None => w,
            });
        }
        let total = acc.unwrap();
        let report = LossReport {
            per_pair,
            lambdas: vec![lambda; outs.len()],
            total: total.item(),
            aux: Vec::new(),
        };
        Ok((total, report))
    }

    pub fn step_once(&mut self) -> Result<StepMetrics> {
        let lr = lr_at(&self.spec, self.step);
        let images = self.next_batch();
        let n = self.model.cfg.patches();
        let plans: Vec<MaskPlan> = (0..images.batch)
            .map(|_| sample_mask(n, self.objective.mask_ratio, &mut self.rng_mask))
            .collect::<Result<_>>()?;
        let plans = Rc::new(plans);

        let tape = Tape::new();
        let bound = self.model.store.bind(&tape);
        let (loss, report) = self.forward_loss(&tape, &bound, &images, plans)?;
        if !report.total.is_finite() {
            return Err(MirlError::NonFiniteLoss { step: self.step });
        }

        self.model.store.zero_grads();
        loss.backward()?;
        self.model.store.absorb_grads(&bound);

        let grad_norms = if self.grad_norm_probe {
            encoder_grad_norm_records(&self.model.store, self.model.cfg.depth)
        } else {
            Vec::new()
        };

        if let Some(clip) = self.spec.grad_clip {
            let norm = self.model.store.grad_norm();
            if norm > clip {
                self.model.store.scale_grads(clip / norm);
            }
        }
        self.optimizer
            .step(&mut self.model.store, lr, &self.spec, &|_| 1.0)?;

        if let Some(nce) = &self.objective.infonce {
            let momentum = self.momentum_store.as_mut().unwrap();
            momentum_update(&self.model.store, momentum, nce.momentum)?;
        }

        let metrics = StepMetrics {
            step: self.step,
            lr,
            loss: report.total,
            pair_losses: report.per_pair,
            aux: report.aux,
            grad_norms,
        };
        self.step += 1;
        Ok(metrics)
    }

    pub fn train_steps(&mut self, n: u64) -> Result<Vec<StepMetrics>> {
        (0..n).map(|_| self.step_once()).collect()
    }

    pub fn checkpoint(&self, config_text: &str) -> Checkpoint {
        let mut ckpt = Checkpoint {
            config_text: config_text.to_string(),
            step: self.step,
            rng_states: vec![
                ("mask".into(), self.rng_mask.state()),
                ("augment".into(), self.rng_aug.state()),
            ],
            tensors: Vec::new(),
            moments: None,
        };
        ckpt.push_store(&self.model.store, "");
        if let Some(momentum) = &self.momentum_store {
            ckpt.push_store(momentum, "momentum.");
        }
        let tensors = self
            .optimizer
            .moment_tensors()
            .map(|(name, data)| (name, vec![data.len()], data.clone()))
            .collect();
        ckpt.moments = Some(Moments {
            t: self.optimizer.t,
            tensors,
        });
        ckpt
    }

    pub fn save(&self, path: &Path, config_text: &str) -> Result<()> {
        crate::training::checkpoint::save_checkpoint(path, &self.checkpoint(config_text))
    }

    /// Restore parameters, optimizer moments, rng streams and the step
    /// counter from a checkpoint of the same configuration.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.apply_store(&mut self.model.store, "")?;
        if let Some(momentum) = &mut self.momentum_store {
            ckpt.apply_store(momentum, "momentum.")?;
        }
        if let Some(m) = &ckpt.moments {
            let map: std::collections::HashMap<String, (Vec<usize>, Vec<f64>)> = m
                .tensors
                .iter()
                .map(|(n, s, d)| (n.clone(), (s.clone(), d.clone())))
                .collect();
            self.optimizer.restore_moments(m.t, &map)?;
        }
        for (name, state) in &ckpt.rng_states {
            match name.as_str() {
                "mask" => self.rng_mask = Rng::from_state(*state),
                "augment" => self.rng_aug = Rng::from_state(*state),
                _ => {}
            }
        }
        self.step = ckpt.step;
        self.perm_epoch = u64::MAX; // force re-derivation from the step
        Ok(())
    }
}

/// Predict per-image features from the last segment: fill mask tokens at
/// encoder width, run the two feature-head blocks, and average the masked
/// positions.
fn feature_predictions(
    tape: &Tape,
    state: &crate::encoder::SegmentedEncoderState,
    cfg: &ViTConfig,
    bound: &BoundParams,
) -> Result<Tensor> {
    let z = state
        .per_segment
        .last()
        .expect("encoder produced at least one segment");
    let plans = &z.plans;
    let (b, n, d) = (plans.len(), plans[0].patches, cfg.hidden);
    let visible = plans[0].visible.len();

    let tokens = z.tokens.reshape(vec![b * (visible + 1), d])?;
    let mut occupied = Vec::with_capacity(b * (visible + 1));
    let mut masked = Vec::new();
    for (bi, plan) in plans.iter().enumerate() {
        occupied.push(bi * (n + 1));
        occupied.extend(plan.visible.iter().map(|&i| bi * (n + 1) + i + 1));
        masked.extend(plan.masked.iter().map(|&i| bi * (n + 1) + i + 1));
    }
    let base = tape.zeros(vec![b * (n + 1), d]);
    let filled = base.scatter_rows(&occupied, &tokens)?;
    let full = if masked.is_empty() {
        filled
    } else {
        let rows = tape
            .zeros(vec![masked.len(), d])
            .add(bound.get("feature_head.mask_token")?)?;
        filled.scatter_rows(&masked, &rows)?
    };
    let mut x = full
        .reshape(vec![b, n + 1, d])?
        .add(bound.get("feature_head.pos_embed")?)?;
    for blk in 0..2 {
        x = crate::encoder::transformer_block(&x, bound, &format!("feature_head.block{blk}"), cfg.heads)?;
    }
    let x = x.layer_norm(
        bound.get("feature_head.norm.gain")?,
        bound.get("feature_head.norm.bias")?,
        crate::encoder::LN_EPS,
    )?;
    // mean of the masked slots per image
    let flat = x.reshape(vec![b * (n + 1), d])?.select_rows(&masked)?;
    let m = masked.len() / b;
    flat.reshape(vec![b, m, d])?.mean_over(1)
}

/// Momentum-encoder features for the same masked positions, computed from
/// the full (unmasked) token sequence and returned as constants.
fn momentum_features(
    tape: &Tape,
    momentum: &ParamStore,
    cfg: &ViTConfig,
    images: &ImageBatch,
    plans: &[MaskPlan],
) -> Result<Tensor> {
    let frozen = momentum.bind_filtered(tape, |_| false);
    let patches = patchify(images, cfg.patch)?;
    let n = cfg.patches();
    let full_plans: Vec<MaskPlan> = (0..images.batch).map(|_| MaskPlan::unmasked(n)).collect();
    let z0 = embed_visible(tape, &patches, Rc::new(full_plans), &frozen)?;
    let h = run_blocks(&z0.tokens, &frozen, 0, cfg.depth, cfg.heads)?;
    let h = encoder_norm(&h, &frozen)?;
    let d = cfg.hidden;
    let flat = h.reshape(vec![images.batch * (n + 1), d])?;
    let rows: Vec<usize> = plans
        .iter()
        .enumerate()
        .flat_map(|(b, p)| p.masked.iter().map(move |&i| b * (n + 1) + i + 1))
        .collect();
    let m = rows.len() / images.batch;
    let sel = flat.select_rows(&rows)?;
    let out = sel.reshape(vec![images.batch, m, d])?.mean_over(1)?;
    // sever any accidental graph path: targets are constants by definition
    Ok(out.detach())
}

/// Mean over the normed patch-token outputs of the full encoder; the
/// classification representation.
pub fn class_features(
    tape: &Tape,
    cfg: &ViTConfig,
    bound: &BoundParams,
    images: &ImageBatch,
) -> Result<Tensor> {
    let patches = patchify(images, cfg.patch)?;
    let n = cfg.patches();
    let plans: Vec<MaskPlan> = (0..images.batch).map(|_| MaskPlan::unmasked(n)).collect();
    let z0 = embed_visible(tape, &patches, Rc::new(plans), bound)?;
    let h = run_blocks(&z0.tokens, bound, 0, cfg.depth, cfg.heads)?;
    let h = encoder_norm(&h, bound)?;
    let d = cfg.hidden;
    let rows: Vec<usize> = (0..images.batch)
        .flat_map(|b| (1..=n).map(move |s| b * (n + 1) + s))
        .collect();
    h.reshape(vec![images.batch * (n + 1), d])?
        .select_rows(&rows)?
        .reshape(vec![images.batch, n, d])?
        .mean_over(1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FinetuneMode {
    Full { layer_decay: f64 },
    LinearProbe,
}

#[derive(Debug, Clone)]
pub struct FinetuneSettings {
    pub spec: OptimSpec,
    pub mode: FinetuneMode,
    pub label_smoothing: f64,
    pub ema_decay: Option<f64>,
    pub augment: bool,
}

pub struct FinetuneOutcome {
    pub accuracy: f64,
    pub ema_accuracy: Option<f64>,
    pub metrics: Vec<StepMetrics>,
    pub store: ParamStore,
}

/// Keep the encoder-side parameters of a pre-trained store and attach a
/// fresh classification head; decoders and feature heads are discarded.
fn classifier_store(model: &Model, classes: usize, seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for p in model.store.iter() {
        let drop = p.name.starts_with("decoder")
            || p.name.starts_with("mask_token")
            || p.name.starts_with("feature_head");
        if !drop {
            store.insert(&p.name, p.shape.clone(), p.value.clone())?;
        }
    }
    let mut rng = Rng::for_role(seed, "head");
    let d = model.cfg.hidden;
    store.insert(
        "head.weight",
        vec![d, classes],
        (0..d * classes).map(|_| rng.trunc_normal(INIT_STD)).collect(),
    )?;
    store.insert("head.bias", vec![classes], vec![0.0; classes])?;
    Ok(store)
}

fn eval_accuracy(
    store: &ParamStore,
    cfg: &ViTConfig,
    dataset: &Dataset,
    batch: usize,
) -> Result<f64> {
    let labels = dataset
        .labels
        .as_ref()
        .ok_or_else(|| MirlError::Data("evaluation dataset has no labels".into()))?;
    let mut hits = 0.0;
    let mut seen = 0usize;
    let mut i = 0;
    while i < dataset.len() {
        let hi = (i + batch).min(dataset.len());
        let idx: Vec<usize> = (i..hi).collect();
        let images = dataset.batch(&idx);
        let tape = Tape::new();
        let frozen = store.bind_filtered(&tape, |_| false);
        let feats = class_features(&tape, cfg, &frozen, &images)?;
        let logits = feats
            .matmul(frozen.get("head.weight")?)?
            .add(frozen.get("head.bias")?)?;
        let classes = logits.shape()[1];
        hits += accuracy(&logits.value(), classes, &labels[i..hi]) * idx.len() as f64;
        seen += idx.len();
        i = hi;
    }
    Ok(hits / seen as f64)
}

/// Supervised training of a (pre-trained or fresh) encoder with a linear
/// classification head. `LinearProbe` freezes everything but the head.
pub fn finetune(
    model: &Model,
    train: &Dataset,
    test: &Dataset,
    settings: &FinetuneSettings,
    seed: u64,
) -> Result<FinetuneOutcome> {
    settings.spec.validate()?;
    let labels_all = train
        .labels
        .as_ref()
        .ok_or_else(|| MirlError::Data("fine-tuning requires labels".into()))?;
    if train.classes == 0 {
        return Err(MirlError::Data("dataset reports zero classes".into()));
    }
    let mut store = classifier_store(model, train.classes, seed)?;
    let mut optimizer = AdamW::new(&store);
    let mut ema = settings.ema_decay.map(|_| store.clone());
    let mut rng_aug = Rng::for_role(seed, "ft-augment");
    let trainable: Box<dyn Fn(&str) -> bool> = match settings.mode {
        FinetuneMode::Full { .. } => Box::new(|_: &str| true),
        FinetuneMode::LinearProbe => Box::new(|n: &str| n.starts_with("head.")),
    };
    let lr_scale: Box<dyn Fn(&str) -> f64> = match settings.mode {
        FinetuneMode::Full { layer_decay } => {
            Box::new(layer_lr_scale(model.cfg.depth, layer_decay))
        }
        FinetuneMode::LinearProbe => Box::new(|_: &str| 1.0),
    };

    let total = settings.spec.total_steps();
    let mut metrics = Vec::with_capacity(total as usize);
    let mut perm: Vec<usize> = Vec::new();
    let mut perm_epoch = u64::MAX;
    for step in 0..total {
        let b = settings.spec.batch_size;
        let idx: Vec<usize> = (0..b as u64)
            .map(|j| {
                let global = step * b as u64 + j;
                let epoch = global / train.len() as u64;
                if epoch != perm_epoch {
                    let mut r = Rng::for_role(seed, &format!("ft-order{epoch}"));
                    perm = crate::data::epoch_order(train.len(), &mut r);
                    perm_epoch = epoch;
                }
                perm[(global % train.len() as u64) as usize]
            })
            .collect();
        let images = if settings.augment {
            train.batch_augmented(&idx, &mut rng_aug)
        } else {
            train.batch(&idx)
        };
        let labels: Vec<usize> = idx.iter().map(|&i| labels_all[i]).collect();

        let lr = lr_at(&settings.spec, step);
        let tape = Tape::new();
        let bound = store.bind_filtered(&tape, &trainable);
        let feats = class_features(&tape, &model.cfg, &bound, &images)?;
        let logits = feats
            .matmul(bound.get("head.weight")?)?
            .add(bound.get("head.bias")?)?;
        let loss = cross_entropy_label_smoothing(&logits, &labels, settings.label_smoothing)?;
        let loss_v = loss.item();
        if !loss_v.is_finite() {
            return Err(MirlError::NonFiniteLoss { step });
        }
        store.zero_grads();
        loss.backward()?;
        store.absorb_grads(&bound);
        if let Some(clip) = settings.spec.grad_clip {
            let norm = store.grad_norm();
            if norm > clip {
                store.scale_grads(clip / norm);
            }
        }
        optimizer.step(&mut store, lr, &settings.spec, &lr_scale)?;
        if let (Some(decay), Some(ema_store)) = (settings.ema_decay, ema.as_mut()) {
            ema_update(&store, ema_store, decay)?;
        }
        metrics.push(StepMetrics {
            step,
            lr,
            loss: loss_v,
            pair_losses: Vec::new(),
            aux: Vec::new(),
            grad_norms: Vec::new(),
        });
    }

    let acc = eval_accuracy(&store, &model.cfg, test, settings.spec.batch_size.max(16))?;
    let ema_accuracy = match &ema {
        Some(e) => Some(eval_accuracy(e, &model.cfg, test, settings.spec.batch_size.max(16))?),
        None => None,
    };
    Ok(FinetuneOutcome {
        accuracy: acc,
        ema_accuracy,
        metrics,
        store,
    })
}

/// Linear probe: freeze the encoder, extract features once, and train a
/// softmax classifier on them. Returns test accuracy.
pub fn linear_probe(
    model: &Model,
    train: &Dataset,
    test: &Dataset,
    steps: u64,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    let train_labels = train
        .labels
        .as_ref()
        .ok_or_else(|| MirlError::Data("probe requires labels".into()))?;
    let test_labels = test
        .labels
        .as_ref()
        .ok_or_else(|| MirlError::Data("probe requires labels".into()))?;
    let classes = train.classes.max(test.classes);

    let extract = |ds: &Dataset| -> Result<Vec<f64>> {
        let mut rows = Vec::with_capacity(ds.len() * model.cfg.hidden);
        let mut i = 0;
        while i < ds.len() {
            let hi = (i + 64).min(ds.len());
            let idx: Vec<usize> = (i..hi).collect();
            let images = ds.batch(&idx);
            let tape = Tape::new();
            let frozen = model.store.bind_filtered(&tape, |_| false);
            let feats = class_features(&tape, &model.cfg, &frozen, &images)?;
            rows.extend(feats.value());
            i = hi;
        }
        Ok(rows)
    };
    let mut train_feats = extract(train)?;
    let mut test_feats = extract(test)?;
    let d = model.cfg.hidden;
    // standardize each feature dimension with training-set statistics; a
    // parameter-free normalization ahead of the linear head, applied
    // identically to any encoder being probed
    let n_train = train.len() as f64;
    let mut mean = vec![0.0; d];
    for row in train_feats.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n_train);
    let mut std = vec![0.0; d];
    for row in train_feats.chunks_exact(d) {
        for ((s, v), m) in std.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    std.iter_mut().for_each(|s| *s = (*s / n_train).sqrt().max(1e-8));
    for feats in [&mut train_feats, &mut test_feats] {
        for row in feats.chunks_exact_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&mean).zip(&std) {
                *v = (*v - m) / s;
            }
        }
    }

    let mut head = ParamStore::new();
    let mut rng = Rng::for_role(seed, "probe-head");
    head.insert(
        "head.weight",
        vec![d, classes],
        (0..d * classes).map(|_| rng.trunc_normal(INIT_STD)).collect(),
    )?;
    head.insert("head.bias", vec![classes], vec![0.0; classes])?;
    let mut optimizer = AdamW::new(&head);
    let spec = OptimSpec {
        base_lr: lr * 256.0 / train.len().min(256) as f64,
        weight_decay: 0.0,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        batch_size: train.len().min(256),
        warmup_epochs: 0.0,
        total_epochs: steps as f64,
        steps_per_epoch: 1,
        schedule: crate::training::Schedule::Cosine,
        grad_clip: None,
    };
    let mut order_rng = Rng::for_role(seed, "probe-order");
    let b = spec.batch_size;
    for step in 0..steps {
        let idx: Vec<usize> = (0..b).map(|_| order_rng.next_below(train.len())).collect();
        let mut batch_feats = Vec::with_capacity(b * d);
        let mut batch_labels = Vec::with_capacity(b);
        for &i in &idx {
            batch_feats.extend_from_slice(&train_feats[i * d..(i + 1) * d]);
            batch_labels.push(train_labels[i]);
        }
        let tape = Tape::new();
        let bound = head.bind(&tape);
        let x = tape.constant(vec![b, d], batch_feats)?;
        let logits = x
            .matmul(bound.get("head.weight")?)?
            .add(bound.get("head.bias")?)?;
        let loss = cross_entropy_label_smoothing(&logits, &batch_labels, 0.0)?;
        if !loss.item().is_finite() {
            return Err(MirlError::NonFiniteLoss { step });
        }
        head.zero_grads();
        loss.backward()?;
        head.absorb_grads(&bound);
        optimizer.step(&mut head, lr_at(&spec, step), &spec, &|_| 1.0)?;
    }

    // evaluate on the held-out features
    let tape = Tape::new();
    let bound = head.bind_filtered(&tape, |_| false);
    let x = tape.constant(vec![test.len(), d], test_feats)?;
    let logits = x
        .matmul(bound.get("head.weight")?)?
        .add(bound.get("head.bias")?)?;
    Ok(accuracy(&logits.value(), classes, test_labels))
}
