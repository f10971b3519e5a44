

use crate::decoder::PairOutputs;
use crate::diffcore::{grad_check, ParamStore, Tape, Tensor};
use crate::objectives::*;
use crate::rng::Rng;
use crate::tokenizer::{ImageBatch, MaskPlan, Patches};

fn random_patches(rng: &mut Rng, b: usize, n: usize, dim: usize) -> Patches {
    Patches {
        data: (0..b * n * dim).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        batch: b,
        count: n,
        dim,
    }
}

fn tensor_like(tape: &Tape, p: &Patches, data: Vec<f64>) -> Tensor {
    tape.constant(vec![p.batch, p.count, p.dim], data).unwrap()
}

fn random_tensor(tape: &Tape, rng: &mut Rng, p: &Patches) -> Tensor {
    let data = (0..p.batch * p.count * p.dim)
        .map(|_| rng.uniform(-1.0, 1.0))
        .collect();
    tensor_like(tape, p, data)
}

/// Direct nested-loop evaluation of the masked reconstruction loss.
fn pixel_loss_oracle(pred: &[f64], target: &Patches, plans: &[MaskPlan]) -> f64 {
    let (n, dim) = (target.count, target.dim);
    let mut acc = 0.0;
    let mut patches = 0usize;
    for (b, plan) in plans.iter().enumerate() {
        for &i in &plan.masked {
            let mut sq = 0.0;
            for j in 0..dim {
                let d = pred[(b * n + i) * dim + j] - target.data[(b * n + i) * dim + j];
                sq += d * d;
            }
            acc += sq / dim as f64;
            patches += 1;
        }
    }
    acc / patches as f64
}

#[test]
fn pixel_loss_zero_on_exact_prediction() {
    let mut rng = Rng::from_seed(1);
    let target = random_patches(&mut rng, 2, 4, 6);
    let plans = vec![
        MaskPlan::new(4, vec![0], vec![1, 2, 3]).unwrap(),
        MaskPlan::new(4, vec![3], vec![0, 1, 2]).unwrap(),
    ];
    let tape = Tape::new();
    let pred = tensor_like(&tape, &target, target.data.clone());
    let loss = pixel_loss(&tape, &pred, &target, &plans).unwrap();
    assert_eq!(loss.item(), 0.0);
}

#[test]
fn pixel_loss_unit_offset_gives_one() {
    // one masked patch, prediction off by exactly one everywhere
    let mut rng = Rng::from_seed(2);
    let target = random_patches(&mut rng, 1, 2, 12);
    let plans = vec![MaskPlan::new(2, vec![0], vec![1]).unwrap()];
    let tape = Tape::new();
    let mut data = target.data.clone();
    for j in 0..12 {
        data[12 + j] += 1.0;
    }
    let pred = tensor_like(&tape, &target, data);
    let loss = pixel_loss(&tape, &pred, &target, &plans).unwrap();
    assert!((loss.item() - 1.0).abs() < 1e-12);
}

#[test]
fn pixel_loss_matches_direct_summation() {
    let mut rng = Rng::from_seed(3);
    let target = random_patches(&mut rng, 1, 3, 8);
    let plans = vec![MaskPlan::new(3, vec![1], vec![0, 2]).unwrap()];
    let tape = Tape::new();
    let pred = random_tensor(&tape, &mut rng, &target);
    let loss = pixel_loss(&tape, &pred, &target, &plans).unwrap().item();
    let want = pixel_loss_oracle(&pred.value(), &target, &plans);
    assert!((loss - want).abs() <= 1e-12 * want.abs().max(1.0));
}

#[test]
fn empty_masked_set_is_an_error() {
    let mut rng = Rng::from_seed(4);
    let target = random_patches(&mut rng, 1, 2, 4);
    let plans = vec![MaskPlan::unmasked(2)];
    let tape = Tape::new();
    let pred = random_tensor(&tape, &mut rng, &target);
    assert!(pixel_loss(&tape, &pred, &target, &plans).is_err());
}

#[test]
fn residual_loss_reduction_identity() {
    // residual_pair_loss(main, residual) == pixel_loss(main + residual)
    let mut rng = Rng::from_seed(5);
    for trial in 0..100 {
        let target = random_patches(&mut rng, 1, 3, 4);
        let plans = vec![MaskPlan::new(3, vec![2], vec![0, 1]).unwrap()];
        let tape = Tape::new();
        let main = random_tensor(&tape, &mut rng, &target);
        let residual = random_tensor(&tape, &mut rng, &target);
        let pair = PairOutputs {
            pair_index: 1,
            main: main.clone(),
            residual: Some(residual.clone()),
        };
        let lhs = residual_pair_loss(&tape, &pair, &target, &plans, false)
            .unwrap()
            .item();
        let combined = main.add(&residual).unwrap();
        let rhs = pixel_loss(&tape, &combined, &target, &plans).unwrap().item();
        assert_eq!(lhs, rhs, "trial {trial}");
    }
}

#[test]
fn teacher_forced_residual_zeroes_the_loss() {
    let mut rng = Rng::from_seed(6);
    let target = random_patches(&mut rng, 2, 4, 6);
    let plans = vec![
        MaskPlan::new(4, vec![0, 1], vec![2, 3]).unwrap(),
        MaskPlan::new(4, vec![2, 3], vec![0, 1]).unwrap(),
    ];
    let tape = Tape::new();
    let main = random_tensor(&tape, &mut rng, &target);
    let forced: Vec<f64> = target
        .data
        .iter()
        .zip(main.value())
        .map(|(t, m)| t - m)
        .collect();
    let pair = PairOutputs {
        pair_index: 1,
        main,
        residual: Some(tensor_like(&tape, &target, forced)),
    };
    let loss = residual_pair_loss(&tape, &pair, &target, &plans, false)
        .unwrap()
        .item();
    assert!(loss <= 1e-10, "teacher-forced loss {loss}");
}

#[test]
fn zero_residual_reduces_to_pixel_loss() {
    let mut rng = Rng::from_seed(7);
    let target = random_patches(&mut rng, 1, 2, 4);
    let plans = vec![MaskPlan::new(2, vec![0], vec![1]).unwrap()];
    let tape = Tape::new();
    let main = random_tensor(&tape, &mut rng, &target);
    let zeros = tensor_like(&tape, &target, vec![0.0; 8]);
    let pair = PairOutputs {
        pair_index: 1,
        main: main.clone(),
        residual: Some(zeros),
    };
    let lhs = residual_pair_loss(&tape, &pair, &target, &plans, false)
        .unwrap()
        .item();
    let rhs = pixel_loss(&tape, &main, &target, &plans).unwrap().item();
    assert_eq!(lhs, rhs);
}

fn make_pairs(tape: &Tape, rng: &mut Rng, target: &Patches, count: usize) -> Vec<PairOutputs> {
    (0..count)
        .map(|g| PairOutputs {
            pair_index: g + 1,
            main: random_tensor(tape, rng, target),
            residual: Some(random_tensor(tape, rng, target)),
        })
        .collect()
}

#[test]
fn total_loss_defaults_to_two_over_g() {
    let mut rng = Rng::from_seed(8);
    let target = random_patches(&mut rng, 1, 4, 4);
    let plans = vec![MaskPlan::new(4, vec![0], vec![1, 2, 3]).unwrap()];
    let tape = Tape::new();

    // G=4: two pairs at weight 0.5 each
    let pairs = make_pairs(&tape, &mut rng, &target, 2);
    let (total, report) = total_loss(&tape, &pairs, &target, &plans, 4, None, false).unwrap();
    assert_eq!(report.lambdas, vec![0.5, 0.5]);
    let want = 0.5 * report.per_pair[0] + 0.5 * report.per_pair[1];
    assert!((total.item() - want).abs() <= 1e-12 * want.abs().max(1.0));

    // G=2 with an explicit unit weight: total equals the single pair loss
    let pairs = make_pairs(&tape, &mut rng, &target, 1);
    let (total, report) =
        total_loss(&tape, &pairs, &target, &plans, 2, Some(&[1.0]), false).unwrap();
    assert_eq!(total.item(), report.per_pair[0]);

    // G=6: three pairs averaged with weight 1/3
    let pairs = make_pairs(&tape, &mut rng, &target, 3);
    let (total, report) = total_loss(&tape, &pairs, &target, &plans, 6, None, false).unwrap();
    let want = report.per_pair.iter().sum::<f64>() / 3.0;
    let rel = (total.item() - want).abs() / want.abs().max(1e-12);
    assert!(rel <= 1e-12, "relative error {rel}");
}

#[test]
fn total_loss_rejects_wrong_weight_count() {
    let mut rng = Rng::from_seed(9);
    let target = random_patches(&mut rng, 1, 2, 4);
    let plans = vec![MaskPlan::new(2, vec![0], vec![1]).unwrap()];
    let tape = Tape::new();
    let pairs = make_pairs(&tape, &mut rng, &target, 2);
    assert!(total_loss(&tape, &pairs, &target, &plans, 4, Some(&[1.0]), false).is_err());
}

#[test]
fn dagger_matches_its_definition() {
    let mut rng = Rng::from_seed(10);
    let target = random_patches(&mut rng, 1, 3, 5);
    let plans = vec![MaskPlan::new(3, vec![0], vec![1, 2]).unwrap()];
    let tape = Tape::new();
    let main = random_tensor(&tape, &mut rng, &target);
    let pair = PairOutputs {
        pair_index: 1,
        main: main.clone(),
        residual: Some(random_tensor(&tape, &mut rng, &target)),
    };

    // omega = 0 reduces to the pair loss exactly
    let base = residual_pair_loss(&tape, &pair, &target, &plans, false)
        .unwrap()
        .item();
    let d0 = variant_loss_dagger(&tape, &pair, &target, &plans, 0.0, false)
        .unwrap()
        .item();
    assert_eq!(d0, base);

    // omega = 1 with a zero residual doubles the pixel loss
    let zero_pair = PairOutputs {
        pair_index: 1,
        main: main.clone(),
        residual: Some(tensor_like(&tape, &target, vec![0.0; 15])),
    };
    let d1 = variant_loss_dagger(&tape, &zero_pair, &target, &plans, 1.0, false)
        .unwrap()
        .item();
    let px = pixel_loss(&tape, &main, &target, &plans).unwrap().item();
    assert!((d1 - 2.0 * px).abs() <= 1e-12);

    // omega = 0.1 against the two-term oracle
    let d = variant_loss_dagger(&tape, &pair, &target, &plans, 0.1, false)
        .unwrap()
        .item();
    let want = 0.1 * px + base;
    assert!((d - want).abs() <= 1e-12 * want.abs().max(1.0));

    assert!(variant_loss_dagger(&tape, &pair, &target, &plans, -0.5, false).is_err());
}

#[test]
fn losses_ignore_targets_at_visible_positions() {
    // mask locality: randomizing visible-position targets changes nothing
    let mut rng = Rng::from_seed(11);
    let target = random_patches(&mut rng, 2, 4, 6);
    let plans = vec![
        MaskPlan::new(4, vec![0, 2], vec![1, 3]).unwrap(),
        MaskPlan::new(4, vec![1, 3], vec![0, 2]).unwrap(),
    ];
    let tape = Tape::new();
    let main = random_tensor(&tape, &mut rng, &target);
    let residual = random_tensor(&tape, &mut rng, &target);
    let pair = PairOutputs {
        pair_index: 1,
        main,
        residual: Some(residual),
    };

    let mut scrambled = target.clone();
    for (b, plan) in plans.iter().enumerate() {
        for &i in &plan.visible {
            for j in 0..target.dim {
                scrambled.data[(b * 4 + i) * target.dim + j] = rng.uniform(-9.0, 9.0);
            }
        }
    }

    let a = residual_pair_loss(&tape, &pair, &target, &plans, false).unwrap();
    let b = residual_pair_loss(&tape, &pair, &scrambled, &plans, false).unwrap();
    assert_eq!(a.item(), b.item());

    let a = variant_loss_dagger(&tape, &pair, &target, &plans, 0.3, false).unwrap();
    let b = variant_loss_dagger(&tape, &pair, &scrambled, &plans, 0.3, false).unwrap();
    assert_eq!(a.item(), b.item());
}

#[test]
fn infonce_closed_forms() {
    let tape = Tape::new();
    // identical positive, orthogonal negative, tau = 1, batch of 2:
    // logits row 0 = [1, 0] -> loss_0 = -log(e/(e+1)); symmetric for row 1
    let pred = tape
        .constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])
        .unwrap();
    let targets = tape
        .constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])
        .unwrap();
    let loss = infonce_feature_loss(&tape, &pred, &targets, 1.0)
        .unwrap()
        .item();
    let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    assert!((loss - want).abs() < 1e-9, "{loss} vs {want}");
    assert!((want - 0.3133).abs() < 1e-4);

    // all similarities equal -> uniform softmax -> log B
    let pred = tape.constant(vec![3, 2], vec![0.6, 0.8].repeat(3)).unwrap();
    let targets = tape.constant(vec![3, 2], vec![0.6, 0.8].repeat(3)).unwrap();
    let loss = infonce_feature_loss(&tape, &pred, &targets, 0.5)
        .unwrap()
        .item();
    assert!((loss - 3f64.ln()).abs() < 1e-9);
    assert!(loss >= 0.0);
}

#[test]
fn infonce_needs_two_images_and_positive_tau() {
    let tape = Tape::new();
    let one = tape.constant(vec![1, 2], vec![1.0, 0.0]).unwrap();
    assert!(infonce_feature_loss(&tape, &one, &one, 0.2).is_err());
    let two = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    assert!(infonce_feature_loss(&tape, &two, &two, 0.0).is_err());
}

#[test]
fn infonce_gradient_matches_finite_differences() {
    let mut rng = Rng::from_seed(12);
    let mut store = ParamStore::new();
    store
        .insert(
            "pred",
            vec![2, 4],
            (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap();
    let targets: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let report = grad_check(
        &store,
        |t, p| {
            let tg = t.constant(vec![2, 4], targets.clone())?;
            infonce_feature_loss(t, p.get("pred")?, &tg, 0.2)
        },
        1e-4,
        1e-5,
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err);
}

fn toy_image(rng: &mut Rng, b: usize, c: usize, h: usize, w: usize) -> ImageBatch {
    let mut img = ImageBatch::new(b, c, h, w);
    for v in &mut img.values {
        *v = rng.next_f64();
    }
    img
}

#[test]
fn perceptual_loss_zero_on_identical_images() {
    let mut rng = Rng::from_seed(13);
    let img = toy_image(&mut rng, 1, 3, 8, 8);
    let tape = Tape::new();
    let mixed = tape
        .constant(vec![1, 3, 8, 8], img.values.clone())
        .unwrap();
    let extractor = SeededConvExtractor::from_seed(0, 3);
    let loss = perceptual_loss(&tape, &mixed, &img, &extractor).unwrap();
    assert_eq!(loss.item(), 0.0);
}

#[test]
fn perceptual_identity_extractor_sees_masked_difference_only() {
    let mut rng = Rng::from_seed(14);
    let img = toy_image(&mut rng, 1, 1, 8, 8);
    let target = crate::tokenizer::patchify(&img, 4).unwrap();
    let plans = vec![MaskPlan::new(4, vec![0, 3], vec![1, 2]).unwrap()];
    let tape = Tape::new();
    let pred = random_tensor(&tape, &mut rng, &target);
    let mixed = mix_predictions(&tape, &pred, &target, &plans, 1, 8, 8, 4).unwrap();
    let loss = perceptual_loss(&tape, &mixed, &img, &IdentityExtractor).unwrap();

    // oracle: mean squared pixel difference where visible positions agree by
    // construction, so only masked patches contribute
    let mixed_img =
        crate::tokenizer::unpatchify(&mixed_as_patches(&mixed, &target), 4, 1, 8, 8).unwrap();
    let mut want = 0.0;
    for (a, b) in mixed_img.values.iter().zip(&img.values) {
        want += (a - b) * (a - b);
    }
    want /= img.values.len() as f64;
    assert!((loss.item() - want).abs() < 1e-12);

    // and visible patches really are ground truth
    let mv = mixed.value();
    for y in 0..4 {
        for x in 0..4 {
            assert_eq!(mv[y * 8 + x], img.values[y * 8 + x]);
        }
    }
}

fn mixed_as_patches(mixed: &Tensor, like: &Patches) -> Patches {
    // repack the image tensor through patchify for the oracle path
    let v = mixed.value();
    let img = ImageBatch {
        values: v,
        batch: like.batch,
        channels: 1,
        height: 8,
        width: 8,
        labels: None,
    };
    crate::tokenizer::patchify(&img, 4).unwrap()
}

#[test]
fn perceptual_conv_extractor_matches_direct_convolution() {
    let mut rng = Rng::from_seed(15);
    let img = toy_image(&mut rng, 2, 3, 8, 8);
    let noisy = {
        let mut n = img.clone();
        for v in &mut n.values {
            *v += rng.uniform(-0.2, 0.2);
        }
        n
    };
    let extractor = SeededConvExtractor::from_seed(7, 3);
    let tape = Tape::new();
    let mixed = tape
        .constant(vec![2, 3, 8, 8], noisy.values.clone())
        .unwrap();
    let loss = perceptual_loss(&tape, &mixed, &img, &extractor).unwrap().item();

    // independent nested-loop convolution stack
    let conv = |input: &[f64], b: usize, c: usize, h: usize, w: usize, layer: &ConvLayer| {
        let (oh, ow) = (h - 2, w - 2);
        let oc = layer.out_channels;
        let mut out = vec![0.0; b * oc * oh * ow];
        for bi in 0..b {
            for o in 0..oc {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iv = input[((bi * c + ci) * h + y + ky) * w + x + kx];
                                    let wv = layer.weight[((ci * 3 + ky) * 3 + kx) * oc + o];
                                    acc += iv * wv;
                                }
                            }
                        }
                        out[((bi * oc + o) * oh + y) * ow + x] = acc;
                    }
                }
            }
        }
        (out, oh, ow)
    };
    let gelu = |v: &mut Vec<f64>| {
        for x in v.iter_mut() {
            let u = 0.7978845608028654 * (*x + 0.044715 * *x * *x * *x);
            *x = 0.5 * *x * (1.0 + u.tanh());
        }
    };
    let run = |values: &[f64]| {
        let (mut a, h1, w1) = conv(values, 2, 3, 8, 8, &extractor.layers[0]);
        gelu(&mut a);
        let map1 = a.clone();
        let (map2, _h2, _w2) = conv(&a, 2, 8, h1, w1, &extractor.layers[1]);
        (map1, map2)
    };
    let (real1, real2) = run(&img.values);
    let (fake1, fake2) = run(&noisy.values);
    let mse = |a: &[f64], b: &[f64]| {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
    };
    let want = mse(&real1, &fake1) + mse(&real2, &fake2);
    assert!(
        (loss - want).abs() <= 1e-10 * want.abs().max(1.0),
        "{loss} vs {want}"
    );
}

#[test]
fn perceptual_gradient_flows_through_masked_predictions() {
    let mut rng = Rng::from_seed(16);
    let img = toy_image(&mut rng, 1, 1, 8, 8);
    let target = crate::tokenizer::patchify(&img, 4).unwrap();
    let plans = vec![MaskPlan::new(4, vec![0, 3], vec![1, 2]).unwrap()];
    let mut store = ParamStore::new();
    store
        .insert(
            "pred",
            vec![1, 4, 16],
            (0..64).map(|_| rng.uniform(0.0, 1.0)).collect(),
        )
        .unwrap();
    let extractor = SeededConvExtractor::from_seed(3, 1);
    let report = grad_check(
        &store,
        |t, p| {
            let mixed = mix_predictions(t, p.get("pred")?, &target, &plans, 1, 8, 8, 4)?;
            perceptual_loss(t, &mixed, &img, &extractor)
        },
        1e-4,
        1e-5,
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err);
}

#[test]
fn coarse_plus_fine_is_bit_exact() {
    let mut rng = Rng::from_seed(17);
    let img = toy_image(&mut rng, 2, 3, 16, 16);
    let split = coarse_fine_targets(&img, 2.0).unwrap();
    for ((c, f), o) in split
        .coarse
        .values
        .iter()
        .zip(&split.fine.values)
        .zip(&img.values)
    {
        assert_eq!(c + f, *o);
    }
}

#[test]
fn large_sigma_on_constant_image_has_no_fine_component() {
    let mut img = ImageBatch::new(1, 1, 16, 16);
    for v in &mut img.values {
        *v = 0.42;
    }
    let split = coarse_fine_targets(&img, 50.0).unwrap();
    for f in &split.fine.values {
        assert!(f.abs() < 1e-12);
    }
    assert!(coarse_fine_targets(&img, 0.0).is_err());
}

#[test]
fn blur_kernel_is_normalized() {
    for sigma in [0.5, 1.0, 2.0, 3.7] {
        let k = gaussian_kernel(sigma);
        let sum: f64 = k.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-9, "sigma {sigma}: sum {sum}");
        // direct normalization oracle: renormalizing changes nothing
        let renorm: f64 = k.iter().map(|t| t / sum).sum();
        assert!((renorm - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn normalized_targets_have_zero_mean_rows() {
    let mut rng = Rng::from_seed(18);
    let p = random_patches(&mut rng, 2, 3, 8);
    let n = normalize_patch_targets(&p);
    for r in 0..6 {
        let row = &n.data[r * 8..(r + 1) * 8];
        let mean: f64 = row.iter().sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
    }
}
