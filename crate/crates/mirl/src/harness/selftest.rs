//! Built-in invariant suite behind `mirl selftest`: a fast battery over the
//! gradient oracle, the loss identities, mask statistics, structural
//! equivalences, optimizer behavior, and persistence.

use std::rc::Rc;

use crate::data::synthetic_textures;
use crate::decoder::{decode_pairs, DecoderConfig};
use crate::diffcore::{grad_check, ParamStore, Tape};
use crate::encoder::{encode_segments, run_blocks, ViTConfig};
use crate::objectives::{pixel_loss, residual_pair_loss, total_loss, variant_loss_dagger};
use crate::rng::Rng;
use crate::tokenizer::{embed_visible, patchify, sample_mask, MaskPlan};
use crate::training::checkpoint::{load_checkpoint, save_checkpoint};
use crate::training::{lr_at, Model, ObjectiveSettings, OptimSpec, Pretrainer, Schedule};
use crate::{MirlError, Result};

fn tiny_cfg() -> ViTConfig {
    ViTConfig {
        depth: 4,
        hidden: 16,
        mlp_dim: 32,
        heads: 2,
        segments: 2,
        patch: 4,
        image_h: 16,
        image_w: 16,
        channels: 3,
    }
}

fn tiny_dcfg() -> DecoderConfig {
    DecoderConfig {
        blocks: 2,
        hidden: 16,
        heads: 2,
        did: true,
        shared_mask_token: true,
    }
}

fn check(name: &str, f: impl FnOnce() -> Result<()>, failures: &mut Vec<String>) {
    match f() {
        Ok(()) => println!("ok      {name}"),
        Err(e) => {
            println!("FAIL    {name}: {e}");
            failures.push(name.to_string());
        }
    }
}

fn expect(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(MirlError::GradCheck(msg.to_string()))
    }
}

pub fn run_selftest() -> Result<()> {
    let mut failures = Vec::new();

    check(
        "primitive gradients vs central differences",
        || {
            let mut rng = Rng::from_seed(1);
            let mut store = ParamStore::new();
            store
                .insert("a", vec![3, 4], (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect())
                .unwrap();
            store
                .insert("b", vec![4, 2], (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect())
                .unwrap();
            store.insert("g", vec![2], vec![1.0, 1.0]).unwrap();
            store.insert("bi", vec![2], vec![0.0, 0.0]).unwrap();
            let report = grad_check(
                &store,
                |_t, p| {
                    let y = p.get("a")?.matmul(p.get("b")?)?.gelu()?;
                    let y = y.layer_norm(p.get("g")?, p.get("bi")?, 1e-5)?;
                    y.softmax(1)?.square()?.mean_all()
                },
                1e-4,
                1e-5,
            )?;
            expect(report.passed(), &format!("max rel err {}", report.max_rel_err))
        },
        &mut failures,
    );

    check(
        "full training loss gradient on a tiny model",
        || {
            let cfg = tiny_cfg();
            let model = Model::init(cfg.clone(), tiny_dcfg(), 2, false)?;
            let ds = synthetic_textures(2, 3, 16, 16, 3);
            let images = ds.batch(&[0, 1]);
            let input = patchify(&images, cfg.patch)?;
            let mut rng = Rng::from_seed(4);
            let plans: Vec<MaskPlan> = (0..2)
                .map(|_| sample_mask(cfg.patches(), 0.75, &mut rng))
                .collect::<Result<_>>()?;
            let plans = Rc::new(plans);
            let dcfg = tiny_dcfg();
            let report = grad_check(
                &model.store,
                move |tape, bound| {
                    let z0 = embed_visible(tape, &input, Rc::clone(&plans), bound)?;
                    let state = encode_segments(tape, z0, &cfg, bound)?;
                    let pairs = decode_pairs(tape, &state, &cfg, &dcfg, bound)?;
                    let (loss, _) =
                        total_loss(tape, &pairs, &input, &state.z0.plans, cfg.segments, None, false)?;
                    Ok(loss)
                },
                1e-4,
                1e-5,
            )?;
            expect(report.passed(), &format!("max rel err {}", report.max_rel_err))
        },
        &mut failures,
    );

    check(
        "loss identities and mask locality",
        || {
            let mut rng = Rng::from_seed(5);
            let tape = Tape::new();
            let target = crate::tokenizer::Patches {
                data: (0..3 * 16).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                batch: 1,
                count: 3,
                dim: 16,
            };
            let plans = vec![MaskPlan::new(3, vec![0], vec![1, 2])?];
            let rand = |rng: &mut Rng| -> Vec<f64> {
                (0..48).map(|_| rng.uniform(-1.0, 1.0)).collect()
            };
            let pair = crate::decoder::PairOutputs {
                pair_index: 1,
                main: tape.constant(vec![1, 3, 16], rand(&mut rng))?,
                residual: Some(tape.constant(vec![1, 3, 16], rand(&mut rng))?),
            };
            let lhs = residual_pair_loss(&tape, &pair, &target, &plans, false)?.item();
            let combined = pair.main.add(pair.residual.as_ref().unwrap())?;
            let rhs = pixel_loss(&tape, &combined, &target, &plans)?.item();
            expect(lhs == rhs, "reduction identity")?;
            let d0 = variant_loss_dagger(&tape, &pair, &target, &plans, 0.0, false)?.item();
            expect(d0 == lhs, "dagger at omega = 0")?;
            let mut scrambled = target.clone();
            for j in 0..16 {
                scrambled.data[j] = rng.uniform(-5.0, 5.0); // visible patch 0
            }
            let v = residual_pair_loss(&tape, &pair, &scrambled, &plans, false)?.item();
            expect(v == lhs, "mask locality")
        },
        &mut failures,
    );

    check(
        "pair weights default to 2/G",
        || {
            let mut rng = Rng::from_seed(6);
            let tape = Tape::new();
            for segments in [2usize, 4, 6] {
                let target = crate::tokenizer::Patches {
                    data: (0..2 * 8).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                    batch: 1,
                    count: 2,
                    dim: 8,
                };
                let plans = vec![MaskPlan::new(2, vec![0], vec![1])?];
                let pairs: Vec<crate::decoder::PairOutputs> = (0..segments / 2)
                    .map(|g| crate::decoder::PairOutputs {
                        pair_index: g + 1,
                        main: tape
                            .constant(vec![1, 2, 8], (0..16).map(|_| rng.uniform(-1.0, 1.0)).collect())
                            .unwrap(),
                        residual: Some(
                            tape.constant(vec![1, 2, 8], (0..16).map(|_| rng.uniform(-1.0, 1.0)).collect())
                                .unwrap(),
                        ),
                    })
                    .collect();
                let (total, report) =
                    total_loss(&tape, &pairs, &target, &plans, segments, None, false)?;
                let want: f64 = report
                    .per_pair
                    .iter()
                    .map(|l| l * 2.0 / segments as f64)
                    .sum();
                let rel = (total.item() - want).abs() / want.abs().max(1e-300);
                expect(rel <= 1e-12, &format!("G={segments}: rel {rel}"))?;
            }
            Ok(())
        },
        &mut failures,
    );

    check(
        "mask statistics at r = 0.75",
        || {
            let mut rng = Rng::from_seed(7);
            let plan = sample_mask(196, 0.75, &mut rng)?;
            expect(plan.masked.len() == 147, "|M| = 147 on 196 patches")?;
            let n = 48;
            let draws = 10_000;
            let mut hits = vec![0usize; n];
            for _ in 0..draws {
                for &i in &sample_mask(n, 0.75, &mut rng)?.masked {
                    hits[i] += 1;
                }
            }
            for h in hits {
                let f = h as f64 / draws as f64;
                expect((f - 0.75).abs() <= 0.02, &format!("frequency {f}"))?;
            }
            Ok(())
        },
        &mut failures,
    );

    check(
        "segment composition equals the monolithic forward",
        || {
            let cfg = tiny_cfg();
            let model = Model::init(cfg.clone(), tiny_dcfg(), 8, false)?;
            let ds = synthetic_textures(1, 3, 16, 16, 9);
            let images = ds.batch(&[0]);
            let input = patchify(&images, cfg.patch)?;
            let mut rng = Rng::from_seed(10);
            let plans = Rc::new(vec![sample_mask(cfg.patches(), 0.5, &mut rng)?]);
            let tape = Tape::new();
            let bound = model.store.bind_filtered(&tape, |_| false);
            let z0 = embed_visible(&tape, &input, plans, &bound)?;
            let tokens = z0.tokens.clone();
            let state = encode_segments(&tape, z0, &cfg, &bound)?;
            let mono = run_blocks(&tokens, &bound, 0, cfg.depth, cfg.heads)?;
            expect(
                state.per_segment.last().unwrap().tokens.value() == mono.value(),
                "composition differs",
            )
        },
        &mut failures,
    );

    check(
        "schedule milestones and optimizer closed form",
        || {
            let spec = OptimSpec {
                base_lr: 1e-3,
                weight_decay: 0.05,
                beta1: 0.9,
                beta2: 0.95,
                eps: 1e-8,
                batch_size: 256,
                warmup_epochs: 0.0,
                total_epochs: 1000.0,
                steps_per_epoch: 1,
                schedule: Schedule::Step,
                grad_clip: None,
            };
            expect(lr_at(&spec, 899) == 1e-3, "before first milestone")?;
            expect((lr_at(&spec, 900) - 1e-4).abs() < 1e-18, "at 90%")?;
            expect((lr_at(&spec, 950) - 1e-5).abs() < 1e-18, "at 95%")?;
            Ok(())
        },
        &mut failures,
    );

    check(
        "checkpoint roundtrip and short-run determinism",
        || {
            let run = || -> Result<(Vec<String>, ParamStore)> {
                let cfg = tiny_cfg();
                let model = Model::init(cfg, tiny_dcfg(), 11, false)?;
                let ds = synthetic_textures(16, 3, 16, 16, 12);
                let spec = OptimSpec {
                    base_lr: 1e-2,
                    weight_decay: 0.05,
                    beta1: 0.9,
                    beta2: 0.95,
                    eps: 1e-8,
                    batch_size: 4,
                    warmup_epochs: 0.0,
                    total_epochs: 1.25,
                    steps_per_epoch: 4,
                    schedule: Schedule::Cosine,
                    grad_clip: None,
                };
                let mut t = Pretrainer::new(model, spec, ObjectiveSettings::default(), ds, 13)?;
                let lines = t
                    .train_steps(5)?
                    .iter()
                    .map(|m| serde_json::to_string(m).unwrap())
                    .collect();
                Ok((lines, t.model.store.clone()))
            };
            let (a, store) = run()?;
            let (b, _) = run()?;
            expect(a == b, "metric streams differ between identical runs")?;

            let path = std::env::temp_dir().join(format!("mirl-selftest-{}.mirl", std::process::id()));
            let mut ckpt = crate::training::checkpoint::Checkpoint::default();
            ckpt.push_store(&store, "");
            save_checkpoint(&path, &ckpt)?;
            let back = load_checkpoint(&path)?;
            let mut restored = store.clone();
            restored.iter_mut().for_each(|p| p.value.fill(0.0));
            back.apply_store(&mut restored, "")?;
            let same = store
                .iter()
                .zip(restored.iter())
                .all(|(x, y)| x.value == y.value);
            std::fs::remove_file(&path).ok();
            expect(same, "checkpoint roundtrip changed values")
        },
        &mut failures,
    );

    if failures.is_empty() {
        println!("selftest: all checks passed");
        Ok(())
    } else {
        Err(MirlError::GradCheck(format!(
            "selftest failures: {}",
            failures.join(", ")
        )))
    }
}
