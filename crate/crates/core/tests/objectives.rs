mod common;

use candle_core::Tensor;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vicha::model::VichaModel;
use vicha::objectives::{
    combine_losses, itm_loss, m_mim_loss, mine_hard_negatives, mlm_loss, plan_image_mask,
    plan_mlm_mask, DEFAULT_ACTION_PROBS, DEFAULT_LAMBDA_HITC, DEFAULT_LAMBDA_MIM,
};
use vicha::ops::{device, scalar};
use vicha::tokenizer::{Tokenizer, CLS_ID};

use common::*;

#[test]
fn contrastive_loss_matches_loop_oracle_and_gradients() {
    pass(criteria::hitc_correctness());
}

#[test]
fn identical_features_give_ln_two() {
    pass(criteria::uniform_similarity());
}

#[test]
fn mlm_masking_statistics() {
    pass(criteria::mlm_statistics());
}

#[test]
fn mim_ignores_visible_predictions() {
    pass(criteria::mim_locality());
}

#[test]
fn queue_keeps_the_newest_rows() {
    pass(criteria::queue_behavior());
}

#[test]
fn momentum_is_an_ema_outside_the_graph() {
    pass(criteria::momentum());
}

#[test]
fn itm_loss_matches_binary_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = 4;
    let mut logits = |n: usize| -> Vec<[f64; 2]> {
        (0..n)
            .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
            .collect()
    };
    let pos = logits(b);
    let neg = logits(2 * b);
    let as_tensor =
        |rows: &[[f64; 2]]| Tensor::from_vec(rows.concat(), (rows.len(), 2), &device()).unwrap();
    let got = scalar(&itm_loss(&as_tensor(&pos), &as_tensor(&neg)).unwrap()).unwrap();
    let positive = |l: &[f64; 2]| 1.0 / (1.0 + (l[0] - l[1]).exp());
    let mut want = 0.0;
    for l in &pos {
        want -= positive(l).ln();
    }
    for l in &neg {
        want -= (1.0 - positive(l)).ln();
    }
    want /= (3 * b) as f64;
    assert!(rel_err(got, want) < 1e-6, "{got} vs {want}");
}

#[test]
fn mining_follows_softmax_over_off_diagonal_entries() {
    let sim = Array2::from_shape_vec((3, 3), vec![10.0, 0.0, 0.0, 0.0, 10.0, 0.0, 0.0, 0.0, 10.0])
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let draws = 10_000;
    let mut picked_one = 0;
    for _ in 0..draws {
        let n = mine_hard_negatives(&sim, &mut rng).unwrap();
        assert_ne!(n.text_for_image[0], 0);
        if n.text_for_image[0] == 1 {
            picked_one += 1;
        }
    }
    let freq = picked_one as f64 / draws as f64;
    assert!((freq - 0.5).abs() <= 0.02, "negative 1 chosen {freq}");
}

#[test]
fn mining_never_returns_the_positive() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10_000 {
        let b = rng.random_range(2..7);
        let sim = Array2::from_shape_fn((b, b), |_| rng.random_range(-1.0..1.0) * 5.0);
        let n = mine_hard_negatives(&sim, &mut rng).unwrap();
        for i in 0..b {
            assert_ne!(n.text_for_image[i], i);
            assert_ne!(n.image_for_text[i], i);
        }
    }
}

#[test]
fn mlm_loss_ignores_unmasked_logits() {
    let vocab = 30;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ids: Vec<u32> = std::iter::once(CLS_ID)
        .chain((0..12).map(|_| rng.random_range(4..vocab as u32)))
        .collect();
    let (plan, _) = plan_mlm_mask(
        &ids,
        Tokenizer::is_special,
        0.3,
        DEFAULT_ACTION_PROBS,
        vocab,
        &mut rng,
    )
    .unwrap();
    assert!(!plan.is_empty());
    let len = 1 + ids.len();
    let mut data: Vec<f64> = (0..len * vocab)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    let loss = |d: &[f64]| {
        let logits = Tensor::from_vec(d.to_vec(), (1, len, vocab), &device()).unwrap();
        scalar(
            &mlm_loss(
                &logits,
                std::slice::from_ref(&plan),
                std::slice::from_ref(&ids),
            )
            .unwrap(),
        )
        .unwrap()
    };
    let base = loss(&data);
    let unmasked = (0..ids.len())
        .find(|p| !plan.positions.contains(p))
        .unwrap();
    for v in &mut data[(unmasked + 1) * vocab..(unmasked + 2) * vocab] {
        *v += 7.0;
    }
    assert_eq!(base.to_bits(), loss(&data).to_bits());
    let masked = plan.positions[0];
    data[(masked + 1) * vocab] += 1.0;
    assert_ne!(base, loss(&data));
}

#[test]
fn image_mask_is_uniform_over_patches() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts = [0usize; 16];
    let draws = 10_000;
    for _ in 0..draws {
        let plan = plan_image_mask(16, 0.75, &mut rng).unwrap();
        assert_eq!((plan.masked.len(), plan.visible.len()), (12, 4));
        let mut all: Vec<usize> = plan.masked.iter().chain(&plan.visible).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
        for m in plan.masked {
            counts[m] += 1;
        }
    }
    for c in counts {
        let freq = c as f64 / draws as f64;
        assert!((freq - 0.75).abs() <= 0.02, "patch masked {freq}");
    }
}

/// Four-patch toy model, two images, one 3/4 mask plan each.
fn mim_toy() -> (
    VichaModel,
    Tensor,
    Vec<vicha::objectives::ImageMaskPlan>,
    Tensor,
) {
    let model = toy_model(6);
    randomize(&model.params, 0.3, 7);
    let images = VichaModel::stack_images(&[
        random_image(1, 8).to_tensor().unwrap(),
        random_image(2, 8).to_tensor().unwrap(),
    ])
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let plans: Vec<_> = (0..2)
        .map(|_| plan_image_mask(4, 0.75, &mut rng).unwrap())
        .collect();
    let targets = vicha::model::patchify(&images, 4).unwrap();
    (model, images, plans, targets)
}

#[test]
fn multimodal_reconstruction_with_class_only_text_keeps_query_length() {
    let (model, images, plans, _) = mim_toy();
    let visible: Vec<Vec<usize>> = plans.iter().map(|p| p.visible.clone()).collect();
    let encoded = model
        .online
        .vision
        .forward_visible(&images, &visible)
        .unwrap();
    let text = model.online.text.forward(&[vec![], vec![]]).unwrap();
    assert_eq!(text.last().dim(1).unwrap(), 1);
    let pred = model
        .mim
        .reconstruct_multimodal(
            encoded.last(),
            &plans,
            &model.multimodal,
            text.last(),
            text.mask.as_ref(),
        )
        .unwrap();
    assert_eq!(pred.dims(), &[2, 4, model.config.patch_dim()]);
}

#[test]
fn multimodal_reconstruction_gradient_matches_finite_differences() {
    let (model, images, plans, targets) = mim_toy();
    let visible: Vec<Vec<usize>> = plans.iter().map(|p| p.visible.clone()).collect();
    let encoded = model
        .online
        .vision
        .forward_visible(&images, &visible)
        .unwrap()
        .detach();
    let captions = [
        model.tokenizer.encode("a red circle"),
        model.tokenizer.encode("blue square"),
    ];
    let text = model.online.text.forward(&captions).unwrap().detach();
    let loss = || {
        m_mim_loss(
            &model.mim,
            encoded.last(),
            &plans,
            &model.multimodal,
            text.last(),
            text.mask.as_ref(),
            &targets,
        )
        .unwrap()
    };
    let grads = loss().backward().unwrap();
    let h = 1e-3;
    for name in ["mim.pixel_projection.weight", "mim.pixel_projection.bias"] {
        let var = model.params.get(name).unwrap();
        let analytic = values(grads.get(var.as_tensor()).unwrap());
        let base = values(var.as_tensor());
        for i in 0..base.len() {
            let mut shifted = base.clone();
            shifted[i] = base[i] + h;
            var.set(&Tensor::from_vec(shifted.clone(), var.shape(), &device()).unwrap())
                .unwrap();
            let up = scalar(&loss()).unwrap();
            shifted[i] = base[i] - h;
            var.set(&Tensor::from_vec(shifted, var.shape(), &device()).unwrap())
                .unwrap();
            let down = scalar(&loss()).unwrap();
            var.set(&Tensor::from_vec(base.clone(), var.shape(), &device()).unwrap())
                .unwrap();
            let numeric = (up - down) / (2.0 * h);
            assert!(
                rel_err(analytic[i], numeric) <= 1e-4,
                "{name}[{i}]: {} vs {numeric}",
                analytic[i]
            );
        }
    }
}

#[test]
fn loss_weights_default_and_combine() {
    assert_eq!((DEFAULT_LAMBDA_HITC, DEFAULT_LAMBDA_MIM), (0.1, 1.0));
    let b = combine_losses(1.0, 2.0, 3.0, 4.0, 0.1, 1.0).unwrap();
    assert!((b.total - 7.3).abs() < 1e-12);
    assert!(combine_losses(1.0, f64::NAN, 0.0, 0.0, 0.1, 1.0).is_err());
}

#[test]
fn temperature_starts_at_seven_hundredths() {
    let model = toy_model(1);
    assert!((model.hitc.temperature_value().unwrap() - 0.07).abs() < 1e-12);
}
