//! Command-line entry point and per-subcommand run orchestration.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use crate::data::{load_directory, synthetic_textures, Dataset};
use crate::diffcore::grad_check;
use crate::encoder::ViTConfig;
use crate::harness::config::{validate_config, DataSource, RawConfig, RunConfig};
use crate::objectives::total_loss;
use crate::probes::{
    grad_norm_probe, reconstruction_dump, reinit_sweep, truncated_pretrain, ProbeMetric,
};
use crate::rng::Rng;
use crate::tokenizer::{patchify, sample_mask};
use crate::training::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::training::{finetune, Model, ObjectiveMode, Pretrainer, StepMetrics};
use crate::{MirlError, Result};

const USAGE: &str = "usage: mirl <command> [--config FILE] [--set key=value]... [--<key> value]...

commands:
  pretrain        run self-supervised pre-training, write metrics + checkpoint
  finetune        supervised fine-tuning or linear probing of a checkpoint
  probe-reinit    accuracy sweep over trailing-block re-initialization counts
  probe-truncate  pre-train a truncated encoder, expand, and score it
  probe-gradnorm  short runs logging per-block gradient norms, paired baseline
  reconstruct     write ground-truth/masked/reconstruction/residual/main panels
  gradcheck       finite-difference check of the full training loss
  selftest        run the built-in invariant suite

configuration is a flat `section.key = value` file; --set (or --section.key
value) overrides. Every run writes its resolved config next to its outputs.";

/// Parse argv (without the program name) and run. Returns the process exit
/// code.
pub fn cli_main(args: &[String]) -> i32 {
    match run(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(args: &[String]) -> Result<()> {
    let Some(command) = args.first() else {
        println!("{USAGE}");
        return Ok(());
    };
    if command == "help" || command == "--help" || command == "-h" {
        println!("{USAGE}");
        return Ok(());
    }
    let raw = parse_overrides(&args[1..])?;
    let cfg = validate_config(&raw)?;
    match command.as_str() {
        "pretrain" => run_pretrain(&cfg).map(|_| ()),
        "finetune" => run_finetune(&cfg),
        "probe-reinit" => run_probe_reinit(&cfg),
        "probe-truncate" => run_probe_truncate(&cfg),
        "probe-gradnorm" => run_probe_gradnorm(&cfg),
        "reconstruct" => run_reconstruct(&cfg),
        "gradcheck" => run_gradcheck(&cfg),
        "selftest" => crate::harness::selftest::run_selftest(),
        other => Err(MirlError::Config(format!(
            "unknown command `{other}`\n{USAGE}"
        ))),
    }
}

fn parse_overrides(args: &[String]) -> Result<RawConfig> {
    let mut raw = RawConfig::default();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        match arg.as_str() {
            "--config" => {
                let path = args
                    .get(i + 1)
                    .ok_or_else(|| MirlError::Config("--config needs a file path".into()))?;
                let file = RawConfig::from_file(Path::new(path))?;
                for key in file.keys().map(str::to_string).collect::<Vec<_>>() {
                    if let Some(v) = file.get(&key) {
                        raw.set(&key, v);
                    }
                }
                i += 2;
            }
            "--set" => {
                let kv = args
                    .get(i + 1)
                    .ok_or_else(|| MirlError::Config("--set needs key=value".into()))?;
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| MirlError::Config(format!("--set `{kv}`: expected key=value")))?;
                raw.set(k.trim(), v.trim());
                i += 2;
            }
            flag if flag.starts_with("--") => {
                // `--section.key value` is shorthand for --set
                let key = &flag[2..];
                let value = args.get(i + 1).ok_or_else(|| {
                    MirlError::Config(format!("--{key} needs a value"))
                })?;
                raw.set(key, value);
                i += 2;
            }
            other => {
                return Err(MirlError::Config(format!(
                    "unexpected argument `{other}`\n{USAGE}"
                )))
            }
        }
    }
    Ok(raw)
}

fn build_dataset(cfg: &RunConfig, count: usize, seed_offset: u64) -> Result<Dataset> {
    match cfg.data.source {
        DataSource::Synthetic => Ok(synthetic_textures(
            count,
            cfg.model.channels,
            cfg.model.image_h,
            cfg.model.image_w,
            cfg.seed.wrapping_add(seed_offset),
        )),
        DataSource::Directory => load_directory(
            cfg.data.dir.as_ref().unwrap(),
            cfg.model.channels,
            cfg.model.image_h,
            cfg.model.image_w,
        ),
    }
}

fn train_test_sets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match cfg.data.source {
        DataSource::Synthetic => Ok((
            build_dataset(cfg, cfg.data.train, 0)?,
            build_dataset(cfg, cfg.data.test, 0x7e57)?,
        )),
        DataSource::Directory => {
            // deterministic split of a labeled directory
            let all = build_dataset(cfg, 0, 0)?;
            let labels = all.labels.clone();
            let mut train_idx = Vec::new();
            let mut test_idx = Vec::new();
            for i in 0..all.len() {
                if i % 5 == 4 {
                    test_idx.push(i);
                } else {
                    train_idx.push(i);
                }
            }
            let subset = |idx: &[usize]| Dataset {
                images: idx.iter().map(|&i| all.images[i].clone()).collect(),
                labels: labels
                    .as_ref()
                    .map(|l| idx.iter().map(|&i| l[i]).collect()),
                classes: all.classes,
                channels: all.channels,
                height: all.height,
                width: all.width,
            };
            Ok((subset(&train_idx), subset(&test_idx)))
        }
    }
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(
        cfg.out_dir.join("config.resolved.cfg"),
        cfg.resolved_text(),
    )?;
    Ok(())
}

fn write_metrics_line(file: &mut std::fs::File, m: &StepMetrics) -> Result<()> {
    let line = serde_json::to_string(m)
        .map_err(|e| MirlError::Data(format!("metrics serialization: {e}")))?;
    writeln!(file, "{line}")?;
    Ok(())
}

/// Model shape comes from the checkpoint's embedded config; the run's other
/// sections (data, optimizer, probes) stay in force.
fn model_from_checkpoint(path: &Path) -> Result<(Model, Checkpoint)> {
    let ckpt = load_checkpoint(path)?;
    let raw = RawConfig::parse(&ckpt.config_text)?;
    let stored = validate_config(&raw)?;
    let feature_head = stored.objective.infonce.is_some();
    let mut model = Model::init(
        stored.model.clone(),
        stored.decoder.clone(),
        stored.seed,
        feature_head,
    )?;
    ckpt.apply_store(&mut model.store, "")?;
    Ok((model, ckpt))
}

pub fn run_pretrain(cfg: &RunConfig) -> Result<PathBuf> {
    prepare_out_dir(cfg)?;
    let dataset = build_dataset(cfg, cfg.data.train, 0)?;
    let spec = cfg.optim.spec(dataset.len());
    let total = spec.total_steps();
    let model = Model::init(
        cfg.model.clone(),
        cfg.decoder.clone(),
        cfg.seed,
        cfg.objective.infonce.is_some(),
    )?;
    let mut trainer = Pretrainer::new(model, spec, cfg.objective.clone(), dataset, cfg.seed)?;

    let mut metrics_file = std::fs::File::create(cfg.out_dir.join("metrics.jsonl"))?;
    let resolved = cfg.resolved_text();
    let ckpt_path = cfg.out_dir.join("checkpoint.mirl");
    for step in 0..total {
        let m = trainer.step_once()?;
        write_metrics_line(&mut metrics_file, &m)?;
        if cfg.optim.checkpoint_every > 0
            && (step + 1) % cfg.optim.checkpoint_every == 0
            && step + 1 < total
        {
            trainer.save(&cfg.out_dir.join(format!("checkpoint-{:06}.mirl", step + 1)), &resolved)?;
        }
    }
    trainer.save(&ckpt_path, &resolved)?;
    println!(
        "pre-trained {} steps; checkpoint at {}",
        total,
        ckpt_path.display()
    );
    Ok(ckpt_path)
}

pub fn run_finetune(cfg: &RunConfig) -> Result<()> {
    prepare_out_dir(cfg)?;
    let (train, test) = train_test_sets(cfg)?;
    let model = match &cfg.checkpoint {
        Some(path) => model_from_checkpoint(path)?.0,
        None => Model::init(cfg.model.clone(), cfg.decoder.clone(), cfg.seed, false)?,
    };
    let settings = cfg.finetune.settings(train.len());
    let outcome = finetune(&model, &train, &test, &settings, cfg.seed)?;
    let mut metrics_file = std::fs::File::create(cfg.out_dir.join("metrics.jsonl"))?;
    for m in &outcome.metrics {
        write_metrics_line(&mut metrics_file, m)?;
    }
    let summary = serde_json::json!({
        "accuracy": outcome.accuracy,
        "ema_accuracy": outcome.ema_accuracy,
        "mode": if cfg.finetune.probe_mode { "probe" } else { "full" },
    });
    std::fs::write(
        cfg.out_dir.join("finetune.json"),
        serde_json::to_string_pretty(&summary).unwrap(),
    )?;
    println!("accuracy {:.4}", outcome.accuracy);
    if let Some(e) = outcome.ema_accuracy {
        println!("ema accuracy {:.4}", e);
    }
    Ok(())
}

pub fn run_probe_reinit(cfg: &RunConfig) -> Result<()> {
    let path = cfg.checkpoint.as_ref().ok_or_else(|| {
        MirlError::Config("probe-reinit needs `checkpoint` pointing at a pre-trained model".into())
    })?;
    prepare_out_dir(cfg)?;
    let (model, _) = model_from_checkpoint(path)?;
    let (train, test) = train_test_sets(cfg)?;
    // sweep points default to the linear-probe metric; full fine-tuning per
    // point is available through finetune.mode = full
    let metric = if cfg.finetune.probe_mode {
        ProbeMetric::LinearProbe {
            steps: cfg.probe.steps,
            lr: cfg.probe.lr,
        }
    } else {
        ProbeMetric::FullFinetune(cfg.finetune.settings(train.len()))
    };
    let result = reinit_sweep(
        &model,
        &cfg.probe.reinit_ks,
        &cfg.probe.seeds,
        &train,
        &test,
        &metric,
    )?;
    result.write_csv(&cfg.out_dir.join("reinit_sweep.csv"))?;
    result.write_summary_csv(&cfg.out_dir.join("reinit_sweep_summary.csv"))?;
    for (k, mean, var, n) in result.summary() {
        println!("k={k}: mean {mean:.4} variance {var:.6} over {n} seeds");
    }
    Ok(())
}

pub fn run_probe_truncate(cfg: &RunConfig) -> Result<()> {
    prepare_out_dir(cfg)?;
    let dataset = build_dataset(cfg, cfg.data.train, 0)?;
    let (train, test) = train_test_sets(cfg)?;
    let spec = cfg.optim.spec(dataset.len());
    let steps = spec.total_steps();
    let metric = ProbeMetric::LinearProbe {
        steps: cfg.probe.steps,
        lr: cfg.probe.lr,
    };
    let (expanded, result) = truncated_pretrain(
        &cfg.model,
        &cfg.decoder,
        cfg.probe.truncate_mode,
        cfg.probe.truncate_keep,
        spec,
        cfg.objective.clone(),
        steps,
        dataset,
        &train,
        &test,
        &metric,
        cfg.seed,
    )?;
    result.write_csv(&cfg.out_dir.join("truncated_pretrain.csv"))?;
    let mut ckpt = Checkpoint {
        config_text: cfg.resolved_text(),
        ..Checkpoint::default()
    };
    ckpt.push_store(&expanded.store, "");
    save_checkpoint(&cfg.out_dir.join("expanded.mirl"), &ckpt)?;
    for row in &result.rows {
        println!(
            "keep={}: probe accuracy {:.4} (seed {})",
            row.sweep_var, row.metric, row.seed
        );
    }
    Ok(())
}

pub fn run_probe_gradnorm(cfg: &RunConfig) -> Result<()> {
    prepare_out_dir(cfg)?;
    // the configured objective and a single-decoder baseline, side by side
    let mut variants: Vec<(&str, RunConfig)> = vec![("main", cfg.clone())];
    if cfg.model.segments > 1 {
        let mut baseline = cfg.clone();
        baseline.model.segments = 1;
        baseline.objective.mode = ObjectiveMode::Mae;
        baseline.objective.lambdas = None;
        variants.push(("baseline", baseline));
    }
    let mut csv = std::fs::File::create(cfg.out_dir.join("grad_norms.csv"))?;
    writeln!(csv, "run,step,block,group,norm")?;
    for (tag, vcfg) in &variants {
        let dataset = build_dataset(vcfg, vcfg.data.train, 0)?;
        let spec = vcfg.optim.spec(dataset.len());
        let model = Model::init(
            vcfg.model.clone(),
            vcfg.decoder.clone(),
            vcfg.seed,
            vcfg.objective.infonce.is_some(),
        )?;
        let mut trainer =
            Pretrainer::new(model, spec, vcfg.objective.clone(), dataset, vcfg.seed)?;
        let metrics = grad_norm_probe(&mut trainer, vcfg.probe.gradnorm_steps)?;
        let mut jsonl =
            std::fs::File::create(cfg.out_dir.join(format!("metrics-{tag}.jsonl")))?;
        for m in &metrics {
            write_metrics_line(&mut jsonl, m)?;
            for g in &m.grad_norms {
                writeln!(csv, "{tag},{},{},{},{}", m.step, g.block, g.group, g.norm)?;
            }
        }
    }
    println!(
        "gradient norms for {} run(s) written to {}",
        variants.len(),
        cfg.out_dir.join("grad_norms.csv").display()
    );
    Ok(())
}

pub fn run_reconstruct(cfg: &RunConfig) -> Result<()> {
    let path = cfg.checkpoint.as_ref().ok_or_else(|| {
        MirlError::Config("reconstruct needs `checkpoint` pointing at a trained model".into())
    })?;
    prepare_out_dir(cfg)?;
    let (model, _) = model_from_checkpoint(path)?;
    let dataset = build_dataset(cfg, cfg.reconstruct_count.max(1), 0x1113)?;
    let idx: Vec<usize> = (0..cfg.reconstruct_count.min(dataset.len())).collect();
    let images = dataset.batch(&idx);
    let out = cfg.out_dir.join("reconstructions");
    let files = reconstruction_dump(&model, &images, cfg.objective.mask_ratio, cfg.seed, &out)?;
    println!("wrote {} files under {}", files.len(), out.display());
    Ok(())
}

pub fn run_gradcheck(cfg: &RunConfig) -> Result<()> {
    // check the full training loss of a small model built from the config
    let params = estimate_params(&cfg.model, &cfg.decoder);
    if params > 200_000 {
        eprintln!(
            "note: gradcheck re-evaluates the loss twice per parameter \
             ({params} here); this will take a while"
        );
    }
    let model = Model::init(cfg.model.clone(), cfg.decoder.clone(), cfg.seed, false)?;
    let dataset = build_dataset(cfg, cfg.optim.batch_size.max(2), 0)?;
    let idx: Vec<usize> = (0..cfg.optim.batch_size.max(2).min(dataset.len())).collect();
    let images = dataset.batch(&idx);
    let input = patchify(&images, cfg.model.patch)?;
    let targets = if cfg.objective.norm_pix {
        crate::objectives::normalize_patch_targets(&input)
    } else {
        input.clone()
    };
    let mut rng = Rng::for_role(cfg.seed, "gradcheck-mask");
    let plans: Vec<crate::tokenizer::MaskPlan> = (0..images.batch)
        .map(|_| sample_mask(cfg.model.patches(), cfg.objective.mask_ratio, &mut rng))
        .collect::<Result<_>>()?;
    let plans = Rc::new(plans);

    let cfg_model = cfg.model.clone();
    let dcfg = cfg.decoder.clone();
    let lambdas = cfg.objective.lambdas.clone();
    let detach = cfg.objective.detach_shortcut;
    let report = grad_check(
        &model.store,
        move |tape, bound| {
            let z0 = crate::tokenizer::embed_visible(tape, &input, Rc::clone(&plans), bound)?;
            let state = crate::encoder::encode_segments(tape, z0, &cfg_model, bound)?;
            let pairs = crate::decoder::decode_pairs(tape, &state, &cfg_model, &dcfg, bound)?;
            let (loss, _) = total_loss(
                tape,
                &pairs,
                &targets,
                &state.z0.plans,
                cfg_model.segments,
                lambdas.as_deref(),
                detach,
            )?;
            Ok(loss)
        },
        cfg.gradcheck_h,
        cfg.gradcheck_tol,
    )?;
    let mut worst: Vec<_> = report.checks.iter().collect();
    worst.sort_by(|a, b| b.max_rel_err.partial_cmp(&a.max_rel_err).unwrap());
    for check in worst.iter().take(5) {
        println!("{:>12.3e}  {}", check.max_rel_err, check.name);
    }
    println!(
        "max rel err {:.3e} over {} parameters (tolerance {:.1e})",
        report.max_rel_err,
        report.checks.len(),
        report.tol
    );
    if report.passed() {
        println!("gradcheck PASS");
        Ok(())
    } else {
        Err(MirlError::GradCheck(format!(
            "{} parameter(s) above tolerance: {}",
            report.failures.len(),
            report.failures.join(", ")
        )))
    }
}

fn estimate_params(cfg: &ViTConfig, dcfg: &crate::decoder::DecoderConfig) -> usize {
    let d = cfg.hidden;
    let block = 4 * d * d + 2 * d * cfg.mlp_dim + 8 * d + cfg.mlp_dim;
    let dd = dcfg.hidden;
    let dec_block = 4 * dd * dd + 8 * dd * dd + 10 * dd + 4 * dd;
    cfg.patch_dim() * d
        + (cfg.patches() + 1) * d
        + cfg.depth * block
        + cfg.segments * (dcfg.blocks * dec_block + d * dd + (cfg.patches() + 1) * dd)
}
