//! Flat dotted-key run configuration.
//!
//! The on-disk format is one `section.key = value` per line with `#`
//! comments; later assignments win. Every run writes back its fully
//! resolved configuration in a canonical key order, and re-running from
//! that copy reproduces the run bit for bit.

use std::path::{Path, PathBuf};

use crate::decoder::DecoderConfig;
use crate::encoder::ViTConfig;
use crate::training::{
    FinetuneMode, FinetuneSettings, InfoNceSettings, ObjectiveMode, ObjectiveSettings, OptimSpec,
    PerceptualSettings, Schedule,
};
use crate::{MirlError, Result};

/// Every key the harness understands, in canonical order.
pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "out.dir",
    "model.preset",
    "model.depth",
    "model.hidden",
    "model.mlp",
    "model.heads",
    "model.segments",
    "model.patch",
    "model.image",
    "model.channels",
    "decoder.blocks",
    "decoder.hidden",
    "decoder.heads",
    "decoder.did",
    "decoder.detach_shortcut",
    "mask_token.shared",
    "mask.ratio",
    "objective.mode",
    "objective.norm_pix",
    "objective.lambdas",
    "objective.dagger_omega",
    "objective.infonce",
    "objective.infonce_tau",
    "objective.infonce_momentum",
    "objective.infonce_weight",
    "objective.perceptual",
    "objective.perceptual_weight",
    "objective.perceptual_seed",
    "objective.perceptual_weights",
    "objective.coarse_sigma",
    "objective.augment",
    "optim.base_lr",
    "optim.weight_decay",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "optim.batch_size",
    "optim.warmup_epochs",
    "optim.total_epochs",
    "optim.schedule",
    "optim.grad_clip",
    "optim.steps",
    "optim.checkpoint_every",
    "finetune.base_lr",
    "finetune.weight_decay",
    "finetune.beta1",
    "finetune.beta2",
    "finetune.batch_size",
    "finetune.warmup_epochs",
    "finetune.total_epochs",
    "finetune.layer_decay",
    "finetune.label_smoothing",
    "finetune.ema",
    "finetune.mode",
    "finetune.augment",
    "probe.steps",
    "probe.lr",
    "probe.reinit_ks",
    "probe.seeds",
    "probe.truncate_keep",
    "probe.truncate_mode",
    "probe.gradnorm_steps",
    "data.source",
    "data.dir",
    "data.train",
    "data.test",
    "checkpoint",
    "reconstruct.count",
    "gradcheck.h",
    "gradcheck.tol",
];

/// Parsed key/value pairs, unvalidated.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: Vec<(String, String)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<RawConfig> {
        let mut cfg = RawConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(MirlError::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value.trim());
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RawConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MirlError::Config(format!("{}: {e}", path.display())))?;
        RawConfig::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .filter(|v| !v.is_empty())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }
}

fn unknown_key_error(key: &str) -> MirlError {
    MirlError::Config(format!(
        "unknown config key `{key}`; valid keys are:\n  {}",
        KNOWN_KEYS.join("\n  ")
    ))
}

struct Ctx<'a>(&'a RawConfig);

impl<'a> Ctx<'a> {
    fn str_or(&self, key: &str, default: &str) -> String {
        self.0.get(key).unwrap_or(default).to_string()
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| MirlError::Config(format!("{key}: `{v}` is not a number"))),
        }
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| MirlError::Config(format!("{key}: `{v}` is not an integer"))),
        }
    }

    fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| MirlError::Config(format!("{key}: `{v}` is not an integer"))),
        }
    }

    fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.0.get(key) {
            None => Ok(default),
            Some("true") | Some("on") | Some("1") => Ok(true),
            Some("false") | Some("off") | Some("0") => Ok(false),
            Some(v) => Err(MirlError::Config(format!("{key}: `{v}` is not a boolean"))),
        }
    }

    fn opt_f64(&self, key: &str) -> Result<Option<f64>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| MirlError::Config(format!("{key}: `{v}` is not a number"))),
        }
    }

    fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| MirlError::Config(format!("{key}: `{s}` is not a number")))
                })
                .collect::<Result<Vec<f64>>>()
                .map(Some),
        }
    }

    fn usize_list_or(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.0.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| MirlError::Config(format!("{key}: `{s}` is not an integer")))
                })
                .collect(),
        }
    }

    fn u64_list_or(&self, key: &str, default: &[u64]) -> Result<Vec<u64>> {
        match self.0.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| MirlError::Config(format!("{key}: `{s}` is not an integer")))
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Directory,
}

#[derive(Debug, Clone)]
pub struct DataSettings {
    pub source: DataSource,
    pub dir: Option<PathBuf>,
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone)]
pub struct OptimRaw {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub schedule: Schedule,
    pub grad_clip: Option<f64>,
    /// Explicit step budget; overrides the epoch-derived total.
    pub steps: Option<u64>,
    pub checkpoint_every: u64,
}

impl OptimRaw {
    /// Concrete spec once the dataset size is known.
    pub fn spec(&self, dataset_len: usize) -> OptimSpec {
        let steps_per_epoch = (dataset_len / self.batch_size).max(1);
        let total_epochs = match self.steps {
            Some(s) => s as f64 / steps_per_epoch as f64,
            None => self.total_epochs,
        };
        OptimSpec {
            base_lr: self.base_lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            batch_size: self.batch_size,
            warmup_epochs: self.warmup_epochs.min(total_epochs),
            total_epochs,
            steps_per_epoch,
            schedule: self.schedule,
            grad_clip: self.grad_clip,
        }
    }

    pub fn total_steps(&self, dataset_len: usize) -> u64 {
        self.spec(dataset_len).total_steps()
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneRaw {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub layer_decay: f64,
    pub label_smoothing: f64,
    pub ema: Option<f64>,
    pub probe_mode: bool,
    pub augment: bool,
}

impl FinetuneRaw {
    pub fn settings(&self, dataset_len: usize) -> FinetuneSettings {
        let steps_per_epoch = (dataset_len / self.batch_size).max(1);
        FinetuneSettings {
            spec: OptimSpec {
                base_lr: self.base_lr,
                weight_decay: self.weight_decay,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: 1e-8,
                batch_size: self.batch_size,
                warmup_epochs: self.warmup_epochs.min(self.total_epochs),
                total_epochs: self.total_epochs,
                steps_per_epoch,
                schedule: Schedule::Cosine,
                grad_clip: None,
            },
            mode: if self.probe_mode {
                FinetuneMode::LinearProbe
            } else {
                FinetuneMode::Full {
                    layer_decay: self.layer_decay,
                }
            },
            label_smoothing: self.label_smoothing,
            ema_decay: self.ema,
            augment: self.augment,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeRaw {
    pub steps: u64,
    pub lr: f64,
    pub reinit_ks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub truncate_keep: usize,
    pub truncate_mode: ObjectiveMode,
    pub gradnorm_steps: u64,
}

/// Fully validated run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub preset: Option<String>,
    pub model: ViTConfig,
    pub decoder: DecoderConfig,
    pub objective: ObjectiveSettings,
    pub optim: OptimRaw,
    pub finetune: FinetuneRaw,
    pub probe: ProbeRaw,
    pub data: DataSettings,
    pub checkpoint: Option<PathBuf>,
    pub reconstruct_count: usize,
    pub gradcheck_h: f64,
    pub gradcheck_tol: f64,
}

/// Parse, default-fill, and cross-validate a raw key/value map.
///
/// Rejections: unknown keys (listing the valid ones), odd segment counts
/// other than 1, segment counts that do not divide the depth, mask ratios
/// outside [0,1), weight lists of the wrong length, and objective modes
/// incompatible with the architecture.
pub fn validate_config(raw: &RawConfig) -> Result<RunConfig> {
    for key in raw.keys() {
        if !KNOWN_KEYS.contains(&key) {
            return Err(unknown_key_error(key));
        }
    }
    let c = Ctx(raw);

    let seed = match raw.get("seed") {
        Some(v) => v
            .parse()
            .map_err(|_| MirlError::Config(format!("seed: `{v}` is not an integer")))?,
        None => std::env::var("MIRL_SEED")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(0),
    };

    // model: preset first, explicit keys override
    let preset = raw.get("model.preset").map(str::to_string);
    let mut model = match &preset {
        Some(name) => ViTConfig::preset(name)?,
        None => ViTConfig::tiny_8(),
    };
    model.depth = c.usize_or("model.depth", model.depth)?;
    model.hidden = c.usize_or("model.hidden", model.hidden)?;
    model.mlp_dim = c.usize_or("model.mlp", model.mlp_dim)?;
    model.heads = c.usize_or("model.heads", model.heads)?;
    model.segments = c.usize_or("model.segments", model.segments)?;
    model.patch = c.usize_or("model.patch", model.patch)?;
    let image = c.usize_or("model.image", model.image_h)?;
    model.image_h = image;
    model.image_w = image;
    model.channels = c.usize_or("model.channels", model.channels)?;
    model.validate().map_err(|e| match e {
        MirlError::Config(msg) if msg.contains("must be even") => MirlError::Config(format!(
            "{msg}; the residual objective pairs segment g with segment G-g+1"
        )),
        other => other,
    })?;

    let decoder = DecoderConfig {
        blocks: c.usize_or("decoder.blocks", 2)?,
        hidden: c.usize_or("decoder.hidden", 128)?,
        heads: c.usize_or("decoder.heads", 4)?,
        did: c.bool_or("decoder.did", true)?,
        shared_mask_token: c.bool_or("mask_token.shared", true)?,
    };
    decoder.validate()?;

    let mode = match c.str_or("objective.mode", "mirl").as_str() {
        "mirl" => ObjectiveMode::Mirl,
        "mae" => ObjectiveMode::Mae,
        "multi_decoder" => ObjectiveMode::MultiDecoder,
        "coarse_to_fine" => ObjectiveMode::CoarseToFine,
        "fine_to_coarse" => ObjectiveMode::FineToCoarse,
        other => {
            return Err(MirlError::Config(format!(
                "objective.mode: `{other}` is not one of mirl, mae, multi_decoder, \
                 coarse_to_fine, fine_to_coarse"
            )))
        }
    };
    if mode == ObjectiveMode::Mae && model.segments != 1 {
        return Err(MirlError::Config(format!(
            "objective.mode = mae requires model.segments = 1, got {}",
            model.segments
        )));
    }
    if matches!(mode, ObjectiveMode::CoarseToFine | ObjectiveMode::FineToCoarse)
        && model.segments % 2 != 0
    {
        return Err(MirlError::Config(
            "coarse/fine targets need an even segment count".into(),
        ));
    }

    let mask_ratio = c.f64_or("mask.ratio", 0.75)?;
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(MirlError::Config(format!(
            "mask.ratio must be in [0,1), got {mask_ratio}"
        )));
    }

    let lambdas = c.f64_list("objective.lambdas")?;
    if let Some(l) = &lambdas {
        let pairs = if model.segments == 1 { 1 } else { model.segments / 2 };
        if l.len() != pairs {
            return Err(MirlError::Config(format!(
                "objective.lambdas lists {} weights but the model forms {} pairs",
                l.len(),
                pairs
            )));
        }
    }

    let dagger_omega = c.opt_f64("objective.dagger_omega")?;
    if let Some(w) = dagger_omega {
        if w < 0.0 {
            return Err(MirlError::Config(format!(
                "objective.dagger_omega must be non-negative, got {w}"
            )));
        }
    }

    let norm_pix = c.bool_or("objective.norm_pix", false)?;
    let perceptual_on = c.bool_or("objective.perceptual", false)?;
    if perceptual_on && norm_pix {
        return Err(MirlError::Config(
            "objective.perceptual mixes predictions into pixel space and cannot be \
             combined with objective.norm_pix"
                .into(),
        ));
    }

    let infonce = if c.bool_or("objective.infonce", false)? {
        let tau = c.f64_or("objective.infonce_tau", 0.2)?;
        if tau <= 0.0 {
            return Err(MirlError::Config("objective.infonce_tau must be positive".into()));
        }
        Some(InfoNceSettings {
            tau,
            momentum: c.f64_or("objective.infonce_momentum", 0.996)?,
            weight: c.f64_or("objective.infonce_weight", 1.0)?,
        })
    } else {
        None
    };

    let perceptual = if perceptual_on {
        Some(PerceptualSettings {
            weight: c.f64_or("objective.perceptual_weight", 1.0)?,
            extractor_seed: c.u64_or("objective.perceptual_seed", 0)?,
            weights_file: raw.get("objective.perceptual_weights").map(PathBuf::from),
        })
    } else {
        None
    };

    let coarse_sigma = c.f64_or("objective.coarse_sigma", 2.0)?;
    if coarse_sigma <= 0.0 {
        return Err(MirlError::Config("objective.coarse_sigma must be positive".into()));
    }

    let objective = ObjectiveSettings {
        mode,
        mask_ratio,
        norm_pix,
        lambdas,
        dagger_omega,
        detach_shortcut: c.bool_or("decoder.detach_shortcut", false)?,
        infonce,
        perceptual,
        coarse_sigma,
        augment: c.bool_or("objective.augment", true)?,
    };

    let schedule = match c.str_or("optim.schedule", "cosine").as_str() {
        "cosine" => Schedule::Cosine,
        "step" => Schedule::Step,
        other => {
            return Err(MirlError::Config(format!(
                "optim.schedule: `{other}` is not cosine or step"
            )))
        }
    };
    let optim = OptimRaw {
        base_lr: c.f64_or("optim.base_lr", 1.5e-4)?,
        weight_decay: c.f64_or("optim.weight_decay", 0.05)?,
        beta1: c.f64_or("optim.beta1", 0.9)?,
        beta2: c.f64_or("optim.beta2", 0.95)?,
        eps: c.f64_or("optim.eps", 1e-8)?,
        batch_size: c.usize_or("optim.batch_size", 8)?,
        warmup_epochs: c.f64_or("optim.warmup_epochs", 2.0)?,
        total_epochs: c.f64_or("optim.total_epochs", 32.0)?,
        schedule,
        grad_clip: c.opt_f64("optim.grad_clip")?,
        steps: raw
            .get("optim.steps")
            .map(|v| {
                v.parse()
                    .map_err(|_| MirlError::Config(format!("optim.steps: `{v}` is not an integer")))
            })
            .transpose()?,
        checkpoint_every: c.u64_or("optim.checkpoint_every", 0)?,
    };
    if optim.batch_size == 0 {
        return Err(MirlError::Config("optim.batch_size must be positive".into()));
    }

    let finetune = FinetuneRaw {
        base_lr: c.f64_or("finetune.base_lr", 7.5e-4)?,
        weight_decay: c.f64_or("finetune.weight_decay", 0.05)?,
        beta1: c.f64_or("finetune.beta1", 0.9)?,
        beta2: c.f64_or("finetune.beta2", 0.999)?,
        batch_size: c.usize_or("finetune.batch_size", 16)?,
        warmup_epochs: c.f64_or("finetune.warmup_epochs", 1.0)?,
        total_epochs: c.f64_or("finetune.total_epochs", 10.0)?,
        layer_decay: c.f64_or("finetune.layer_decay", 0.65)?,
        label_smoothing: c.f64_or("finetune.label_smoothing", 0.1)?,
        ema: c.opt_f64("finetune.ema")?,
        probe_mode: match c.str_or("finetune.mode", "full").as_str() {
            "full" => false,
            "probe" => true,
            other => {
                return Err(MirlError::Config(format!(
                    "finetune.mode: `{other}` is not full or probe"
                )))
            }
        },
        augment: c.bool_or("finetune.augment", true)?,
    };

    let probe = ProbeRaw {
        steps: c.u64_or("probe.steps", 300)?,
        lr: c.f64_or("probe.lr", 0.05)?,
        reinit_ks: c.usize_list_or("probe.reinit_ks", &[0, 1, 2, 3])?,
        seeds: c.u64_list_or("probe.seeds", &[0, 1, 2])?,
        truncate_keep: c.usize_or("probe.truncate_keep", model.depth.div_ceil(2))?,
        truncate_mode: match c.str_or("probe.truncate_mode", "mae").as_str() {
            "mae" => ObjectiveMode::Mae,
            "mirl" => ObjectiveMode::Mirl,
            other => {
                return Err(MirlError::Config(format!(
                    "probe.truncate_mode: `{other}` is not mae or mirl"
                )))
            }
        },
        gradnorm_steps: c.u64_or("probe.gradnorm_steps", 20)?,
    };

    let source = match c.str_or("data.source", "synthetic").as_str() {
        "synthetic" => DataSource::Synthetic,
        "dir" => DataSource::Directory,
        other => {
            return Err(MirlError::Config(format!(
                "data.source: `{other}` is not synthetic or dir"
            )))
        }
    };
    let data = DataSettings {
        source,
        dir: raw.get("data.dir").map(PathBuf::from),
        train: c.usize_or("data.train", 512)?,
        test: c.usize_or("data.test", 256)?,
    };
    if source == DataSource::Directory && data.dir.is_none() {
        return Err(MirlError::Config("data.source = dir requires data.dir".into()));
    }

    Ok(RunConfig {
        seed,
        out_dir: PathBuf::from(c.str_or("out.dir", "runs/default")),
        preset,
        model,
        decoder,
        objective,
        optim,
        finetune,
        probe,
        data,
        checkpoint: raw.get("checkpoint").map(PathBuf::from),
        reconstruct_count: c.usize_or("reconstruct.count", 4)?,
        gradcheck_h: c.f64_or("gradcheck.h", 1e-4)?,
        gradcheck_tol: c.f64_or("gradcheck.tol", 1e-5)?,
    })
}

fn fmt_bool(v: bool) -> &'static str {
    if v {
        "true"
    } else {
        "false"
    }
}

impl RunConfig {
    /// Canonical serialization: every key in `KNOWN_KEYS` order with its
    /// resolved value. Parsing this text reproduces the configuration.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("seed", self.seed.to_string());
        push("out.dir", self.out_dir.display().to_string());
        push("model.preset", self.preset.clone().unwrap_or_default());
        push("model.depth", self.model.depth.to_string());
        push("model.hidden", self.model.hidden.to_string());
        push("model.mlp", self.model.mlp_dim.to_string());
        push("model.heads", self.model.heads.to_string());
        push("model.segments", self.model.segments.to_string());
        push("model.patch", self.model.patch.to_string());
        push("model.image", self.model.image_h.to_string());
        push("model.channels", self.model.channels.to_string());
        push("decoder.blocks", self.decoder.blocks.to_string());
        push("decoder.hidden", self.decoder.hidden.to_string());
        push("decoder.heads", self.decoder.heads.to_string());
        push("decoder.did", fmt_bool(self.decoder.did).into());
        push(
            "decoder.detach_shortcut",
            fmt_bool(self.objective.detach_shortcut).into(),
        );
        push(
            "mask_token.shared",
            fmt_bool(self.decoder.shared_mask_token).into(),
        );
        push("mask.ratio", self.objective.mask_ratio.to_string());
        push(
            "objective.mode",
            match self.objective.mode {
                ObjectiveMode::Mirl => "mirl",
                ObjectiveMode::Mae => "mae",
                ObjectiveMode::MultiDecoder => "multi_decoder",
                ObjectiveMode::CoarseToFine => "coarse_to_fine",
                ObjectiveMode::FineToCoarse => "fine_to_coarse",
            }
            .into(),
        );
        push("objective.norm_pix", fmt_bool(self.objective.norm_pix).into());
        push(
            "objective.lambdas",
            self.objective
                .lambdas
                .as_ref()
                .map(|l| {
                    l.iter()
                        .map(f64::to_string)
                        .collect::<Vec<_>>()
                        .join(",")
                })
                .unwrap_or_default(),
        );
        push(
            "objective.dagger_omega",
            self.objective
                .dagger_omega
                .map(|v| v.to_string())
                .unwrap_or_default(),
        );
        push(
            "objective.infonce",
            fmt_bool(self.objective.infonce.is_some()).into(),
        );
        let nce = self.objective.infonce.as_ref();
        push(
            "objective.infonce_tau",
            nce.map(|n| n.tau.to_string()).unwrap_or_else(|| "0.2".into()),
        );
        push(
            "objective.infonce_momentum",
            nce.map(|n| n.momentum.to_string())
                .unwrap_or_else(|| "0.996".into()),
        );
        push(
            "objective.infonce_weight",
            nce.map(|n| n.weight.to_string()).unwrap_or_else(|| "1".into()),
        );
        push(
            "objective.perceptual",
            fmt_bool(self.objective.perceptual.is_some()).into(),
        );
        let per = self.objective.perceptual.as_ref();
        push(
            "objective.perceptual_weight",
            per.map(|p| p.weight.to_string()).unwrap_or_else(|| "1".into()),
        );
        push(
            "objective.perceptual_seed",
            per.map(|p| p.extractor_seed.to_string())
                .unwrap_or_else(|| "0".into()),
        );
        push(
            "objective.perceptual_weights",
            per.and_then(|p| p.weights_file.as_ref())
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        push(
            "objective.coarse_sigma",
            self.objective.coarse_sigma.to_string(),
        );
        push("objective.augment", fmt_bool(self.objective.augment).into());
        push("optim.base_lr", self.optim.base_lr.to_string());
        push("optim.weight_decay", self.optim.weight_decay.to_string());
        push("optim.beta1", self.optim.beta1.to_string());
        push("optim.beta2", self.optim.beta2.to_string());
        push("optim.eps", self.optim.eps.to_string());
        push("optim.batch_size", self.optim.batch_size.to_string());
        push("optim.warmup_epochs", self.optim.warmup_epochs.to_string());
        push("optim.total_epochs", self.optim.total_epochs.to_string());
        push(
            "optim.schedule",
            match self.optim.schedule {
                Schedule::Cosine => "cosine",
                Schedule::Step => "step",
            }
            .into(),
        );
        push(
            "optim.grad_clip",
            self.optim.grad_clip.map(|v| v.to_string()).unwrap_or_default(),
        );
        push(
            "optim.steps",
            self.optim.steps.map(|v| v.to_string()).unwrap_or_default(),
        );
        push(
            "optim.checkpoint_every",
            self.optim.checkpoint_every.to_string(),
        );
        push("finetune.base_lr", self.finetune.base_lr.to_string());
        push(
            "finetune.weight_decay",
            self.finetune.weight_decay.to_string(),
        );
        push("finetune.beta1", self.finetune.beta1.to_string());
        push("finetune.beta2", self.finetune.beta2.to_string());
        push("finetune.batch_size", self.finetune.batch_size.to_string());
        push(
            "finetune.warmup_epochs",
            self.finetune.warmup_epochs.to_string(),
        );
        push(
            "finetune.total_epochs",
            self.finetune.total_epochs.to_string(),
        );
        push("finetune.layer_decay", self.finetune.layer_decay.to_string());
        push(
            "finetune.label_smoothing",
            self.finetune.label_smoothing.to_string(),
        );
        push(
            "finetune.ema",
            self.finetune.ema.map(|v| v.to_string()).unwrap_or_default(),
        );
        push(
            "finetune.mode",
            if self.finetune.probe_mode { "probe" } else { "full" }.into(),
        );
        push("finetune.augment", fmt_bool(self.finetune.augment).into());
        push("probe.steps", self.probe.steps.to_string());
        push("probe.lr", self.probe.lr.to_string());
        push(
            "probe.reinit_ks",
            self.probe
                .reinit_ks
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        push(
            "probe.seeds",
            self.probe
                .seeds
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        push("probe.truncate_keep", self.probe.truncate_keep.to_string());
        push(
            "probe.truncate_mode",
            match self.probe.truncate_mode {
                ObjectiveMode::Mirl => "mirl",
                _ => "mae",
            }
            .into(),
        );
        push(
            "probe.gradnorm_steps",
            self.probe.gradnorm_steps.to_string(),
        );
        push(
            "data.source",
            match self.data.source {
                DataSource::Synthetic => "synthetic",
                DataSource::Directory => "dir",
            }
            .into(),
        );
        push(
            "data.dir",
            self.data
                .dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        push("data.train", self.data.train.to_string());
        push("data.test", self.data.test.to_string());
        push(
            "checkpoint",
            self.checkpoint
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        push("reconstruct.count", self.reconstruct_count.to_string());
        push("gradcheck.h", self.gradcheck_h.to_string());
        push("gradcheck.tol", self.gradcheck_tol.to_string());
        out
    }
}
