//! The thirteen acceptance checks. Each returns a one-line detail on success
//! and the reason on failure, so the acceptance runner and the regular test
//! targets share one implementation.

use std::collections::BTreeMap;
use std::time::Instant;

use candle_core::Tensor;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vicha::concepts::{select_top_k, vca_sample, vca_subset_size, ConceptCorpus, VisualConceptSet};
use vicha::data::{filter_top_p, FilterMode, ImageRef, ImageTextPair, Manifest};
use vicha::downstream::{grad_cam_grounding, GridBox};
use vicha::model::{patchify, AttentionCapture, ParamStore, VichaModel};
use vicha::objectives::{
    hitc_loss, masked_patch_mse, plan_image_mask, plan_mlm_mask, u_mim_loss, HitcState, MaskAction,
    DEFAULT_ACTION_PROBS,
};
use vicha::ops::{cross_entropy, scalar};
use vicha::pipeline;
use vicha::tokenizer::{Tokenizer, CLS_ID, MASK_ID, NUM_SPECIALS, PAD_ID};
use vicha::train::{load_checkpoint, Trainer};

use super::*;

pub type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

trait OrFail<T> {
    fn or_fail(self, what: &str) -> std::result::Result<T, String>;
}

impl<T, E: std::fmt::Display> OrFail<T> for std::result::Result<T, E> {
    fn or_fail(self, what: &str) -> std::result::Result<T, String> {
        self.map_err(|e| format!("{what}: {e}"))
    }
}

/// Every criterion with its label, in order.
pub fn all() -> Vec<(&'static str, fn() -> Check)> {
    vec![
        (
            "hierarchical contrastive loss matches oracle and finite differences",
            hitc_correctness,
        ),
        (
            "uniform similarity gives ln 2 per direction",
            uniform_similarity,
        ),
        ("masked language modeling statistics", mlm_statistics),
        (
            "masked image modeling locality and mask count",
            mim_locality,
        ),
        (
            "concept selection matches exhaustive sort",
            concept_selection,
        ),
        (
            "concept augmentation size and uniformity",
            concept_augmentation,
        ),
        (
            "top-p filtering oracle, identity and idempotence",
            filtering,
        ),
        (
            "feature queue is FIFO with unit-norm entries",
            queue_behavior,
        ),
        (
            "momentum update is an exact EMA without gradients",
            momentum,
        ),
        (
            "desk overfit run converges and retrieves perfectly",
            overfit,
        ),
        (
            "visual concepts do not hurt in-batch retrieval",
            concept_trend,
        ),
        ("checkpoint resume is bitwise exact", resume_exactness),
        ("grounding matches the loop reimplementation", grounding),
    ]
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).unwrap();
    (0..n).map(|_| normal.sample(rng)).collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / norm).collect()
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn tensor2(rows: &[Vec<f64>]) -> Tensor {
    let (r, c) = (rows.len(), rows[0].len());
    Tensor::from_vec(rows.concat(), (r, c), &vicha::ops::device()).unwrap()
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_vec2::<f64>().unwrap()
}

// ---------------------------------------------------------------------------
// Hierarchical contrastive loss

struct HitcFixture {
    online: ParamStore,
    state: HitcState,
    vision: Vec<Tensor>,
    text: Vec<Tensor>,
    mom_vision: Tensor,
    mom_text: Tensor,
}

fn hitc_fixture(b: usize, queue: usize, prefill: usize, seed: u64) -> HitcFixture {
    let mut config = toy_config(20);
    config.hidden_dim = 6;
    config.embed_dim = 8;
    let online = ParamStore::new(1);
    let momentum = ParamStore::new(2);
    let mut state = HitcState::new(&online.root(), &momentum.root(), &config, 0.07, queue).unwrap();
    randomize(&online, 0.5, seed);
    randomize(&momentum, 0.5, seed + 1);
    online
        .get("log_temperature")
        .unwrap()
        .set(&Tensor::new(&[0.07f64.ln()], &vicha::ops::device()).unwrap())
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    for _ in 0..prefill {
        state
            .image_queue
            .push_row(unit(&normal_vec(&mut rng, 8, 1.0)))
            .unwrap();
        state
            .text_queue
            .push_row(unit(&normal_vec(&mut rng, 8, 1.0)))
            .unwrap();
    }
    let mut cls = |n: usize| -> Vec<Tensor> {
        (0..n)
            .map(|_| {
                tensor2(
                    &(0..b)
                        .map(|_| normal_vec(&mut rng, 6, 1.0))
                        .collect::<Vec<_>>(),
                )
            })
            .collect()
    };
    let vision = cls(2);
    let text = cls(2);
    let mom = cls(2);
    HitcFixture {
        online,
        state,
        vision,
        text,
        mom_vision: mom[0].clone(),
        mom_text: mom[1].clone(),
    }
}

fn project(x: &[f64], head: &vicha::model::Linear) -> Vec<f64> {
    let w = rows_of(&head.weight);
    let b = head.bias.to_vec1::<f64>().unwrap();
    unit(
        &w.iter()
            .zip(&b)
            .map(|(row, bias)| dotp(row, x) + bias)
            .collect::<Vec<_>>(),
    )
}

/// Mean over queries of -log softmax(query . bank / tau)[own index].
fn contrastive_direction(queries: &[Vec<f64>], bank: &[Vec<f64>], tau: f64) -> f64 {
    let mut total = 0.0;
    for (i, q) in queries.iter().enumerate() {
        let logits: Vec<f64> = bank.iter().map(|k| dotp(q, k) / tau).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[i];
    }
    total / queries.len() as f64
}

/// Loop reimplementation: per-pair losses of the hierarchical objective.
fn hitc_reference(f: &HitcFixture) -> Vec<f64> {
    let s = &f.state;
    let tau = scalar(&s.log_temperature.get(0).unwrap()).unwrap().exp();
    let last = s.pairs.len() - 1;
    let mom_img: Vec<Vec<f64>> = rows_of(&f.mom_vision)
        .iter()
        .map(|x| project(x, &s.momentum_vision_proj[last]))
        .collect();
    let mom_txt: Vec<Vec<f64>> = rows_of(&f.mom_text)
        .iter()
        .map(|x| project(x, &s.momentum_text_proj[last]))
        .collect();
    s.pairs
        .iter()
        .enumerate()
        .map(|(i, &(vl, tl))| {
            let img: Vec<Vec<f64>> = rows_of(&f.vision[vl])
                .iter()
                .map(|x| project(x, &s.vision_proj[i]))
                .collect();
            let txt: Vec<Vec<f64>> = rows_of(&f.text[tl])
                .iter()
                .map(|x| project(x, &s.text_proj[i]))
                .collect();
            let (text_bank, image_bank) = if i == last {
                let tb: Vec<Vec<f64>> = mom_txt
                    .iter()
                    .cloned()
                    .chain(s.text_queue.rows().cloned())
                    .collect();
                let ib: Vec<Vec<f64>> = mom_img
                    .iter()
                    .cloned()
                    .chain(s.image_queue.rows().cloned())
                    .collect();
                (tb, ib)
            } else {
                (txt.clone(), img.clone())
            };
            contrastive_direction(&img, &text_bank, tau)
                + contrastive_direction(&txt, &image_bank, tau)
        })
        .collect()
}

fn hitc_value(f: &HitcFixture) -> f64 {
    let mut state = f.state.clone();
    let out = hitc_loss(&mut state, &f.vision, &f.text, &f.mom_vision, &f.mom_text).unwrap();
    scalar(&out.loss).unwrap()
}

pub fn hitc_correctness() -> Check {
    let start = Instant::now();
    let f = hitc_fixture(4, 16, 16, 21);
    ensure!(f.state.pairs.len() == 2, "expected two aligned layer pairs");
    let mut state = f.state.clone();
    let out =
        hitc_loss(&mut state, &f.vision, &f.text, &f.mom_vision, &f.mom_text).or_fail("loss")?;
    let reference = hitc_reference(&f);
    let mut worst_value = 0.0f64;
    for (got, want) in out.per_pair.iter().zip(&reference) {
        worst_value = worst_value.max(rel_err(*got, *want));
    }
    let total = scalar(&out.loss).or_fail("loss value")?;
    worst_value = worst_value.max(rel_err(total, reference.iter().sum()));
    ensure!(
        worst_value <= 1e-6,
        "loss differs from loop oracle by {worst_value:e} relative"
    );

    let grads = out.loss.backward().or_fail("backward")?;
    let h = 1e-5;
    let mut worst_grad = 0.0f64;
    let mut checked = 0;
    for (name, var) in f.online.vars() {
        let analytic = values(
            grads
                .get(var.as_tensor())
                .ok_or(format!("no gradient for {name}"))?,
        );
        let base = values(var.as_tensor());
        for i in 0..base.len() {
            let mut shifted = base.clone();
            shifted[i] = base[i] + h;
            var.set(&Tensor::from_vec(shifted.clone(), var.shape(), var.device()).unwrap())
                .unwrap();
            let up = hitc_value(&f);
            shifted[i] = base[i] - h;
            var.set(&Tensor::from_vec(shifted, var.shape(), var.device()).unwrap())
                .unwrap();
            let down = hitc_value(&f);
            var.set(&Tensor::from_vec(base.clone(), var.shape(), var.device()).unwrap())
                .unwrap();
            let numeric = (up - down) / (2.0 * h);
            let err = rel_err(analytic[i], numeric);
            ensure!(
                err <= 1e-4,
                "{name}[{i}]: analytic {} vs numeric {numeric} ({err:e})",
                analytic[i]
            );
            worst_grad = worst_grad.max(err);
            checked += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    ensure!(elapsed < 10.0, "took {elapsed:.1} s");
    Ok(format!(
        "value err {worst_value:.1e}, gradient err {worst_grad:.1e} over {checked} entries, {elapsed:.2} s"
    ))
}

pub fn uniform_similarity() -> Check {
    let mut f = hitc_fixture(2, 4, 0, 5);
    let same = |t: &Tensor| {
        let row = rows_of(t)[0].clone();
        tensor2(&[row.clone(), row])
    };
    f.vision = f.vision.iter().map(same).collect();
    f.text = f.text.iter().map(same).collect();
    f.mom_vision = same(&f.mom_vision);
    f.mom_text = same(&f.mom_text);
    let mut state = f.state.clone();
    let out =
        hitc_loss(&mut state, &f.vision, &f.text, &f.mom_vision, &f.mom_text).or_fail("loss")?;
    let ln2 = 2f64.ln();
    let mut worst = 0.0f64;
    for (pair, (i2t, t2i)) in out.probabilities.iter().enumerate() {
        for (dir, probs) in [("image-to-text", i2t), ("text-to-image", t2i)] {
            let p = rows_of(probs);
            let loss = -(p[0][0].ln() + p[1][1].ln()) / 2.0;
            ensure!(
                (loss - ln2).abs() <= 1e-6,
                "pair {pair} {dir}: {loss} vs ln 2"
            );
            worst = worst.max((loss - ln2).abs());
        }
        ensure!(
            (out.per_pair[pair] - 2.0 * ln2).abs() <= 2e-6,
            "pair {pair}: summed loss {} vs 2 ln 2",
            out.per_pair[pair]
        );
    }
    Ok(format!(
        "max deviation {worst:.1e} over {} pairs",
        out.per_pair.len()
    ))
}

// ---------------------------------------------------------------------------
// Masked modeling

pub fn mlm_statistics() -> Check {
    let vocab = 1000usize;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut maskable, mut selected) = (0usize, 0usize);
    let mut actions = [0usize; 3];
    while maskable < 100_000 {
        let len = rng.random_range(20..=200);
        let mut ids = vec![CLS_ID];
        ids.extend((0..len).map(|_| rng.random_range(NUM_SPECIALS..vocab as u32)));
        ids.extend(std::iter::repeat_n(PAD_ID, rng.random_range(0..5)));
        let (plan, corrupted) = plan_mlm_mask(
            &ids,
            Tokenizer::is_special,
            0.15,
            DEFAULT_ACTION_PROBS,
            vocab,
            &mut rng,
        )
        .or_fail("plan")?;
        maskable += len;
        selected += plan.positions.len();
        for (&p, a) in plan.positions.iter().zip(&plan.actions) {
            ensure!(
                !Tokenizer::is_special(ids[p]),
                "special token at {p} selected"
            );
            match a {
                MaskAction::MaskToken => {
                    actions[0] += 1;
                    ensure!(corrupted[p] == MASK_ID, "mask action left {}", corrupted[p]);
                }
                MaskAction::RandomToken => {
                    actions[1] += 1;
                    ensure!(
                        !Tokenizer::is_special(corrupted[p]),
                        "random replacement is special"
                    );
                }
                MaskAction::Keep => {
                    actions[2] += 1;
                    ensure!(corrupted[p] == ids[p], "keep action changed the token");
                }
            }
        }
        for i in 0..ids.len() {
            ensure!(
                plan.positions.contains(&i) || corrupted[i] == ids[i],
                "unselected position {i} changed"
            );
        }
    }
    let fraction = selected as f64 / maskable as f64;
    ensure!(
        (fraction - 0.15).abs() <= 0.005,
        "masked fraction {fraction:.4}"
    );
    let split: Vec<f64> = actions
        .iter()
        .map(|&a| a as f64 / selected as f64)
        .collect();
    for (got, want) in split.iter().zip([0.8, 0.1, 0.1]) {
        ensure!((got - want).abs() <= 0.01, "action split {split:?}");
    }
    let specials = [CLS_ID, PAD_ID, PAD_ID];
    let (plan, _) = plan_mlm_mask(
        &specials,
        Tokenizer::is_special,
        0.15,
        DEFAULT_ACTION_PROBS,
        vocab,
        &mut rng,
    )
    .or_fail("plan")?;
    ensure!(plan.is_empty(), "a special-only caption was masked");
    Ok(format!(
        "{maskable} maskable tokens, fraction {fraction:.4}, split {:.3}/{:.3}/{:.3}",
        split[0], split[1], split[2]
    ))
}

/// Copy of `pred` with every visible row replaced by noise.
fn perturb_visible(pred: &Tensor, plans: &[vicha::objectives::ImageMaskPlan], seed: u64) -> Tensor {
    let (b, m, p) = pred.dims3().unwrap();
    let mut data = values(pred);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (s, plan) in plans.iter().enumerate() {
        for &v in &plan.visible {
            for x in &mut data[(s * m + v) * p..][..p] {
                *x += rng.random_range(-5.0..5.0);
            }
        }
    }
    Tensor::from_vec(data, (b, m, p), pred.device()).unwrap()
}

pub fn mim_locality() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for m in [4usize, 16, 49, 64, 196] {
        let plan = plan_image_mask(m, 0.75, &mut rng).or_fail("plan")?;
        let want = (0.75 * m as f64).round() as usize;
        ensure!(
            plan.masked.len() == want,
            "{m} patches: {} masked, want {want}",
            plan.masked.len()
        );
    }

    let mut config = toy_config(0);
    config.image_size = 16;
    let tokenizer = toy_tokenizer();
    config.vocab_size = tokenizer.vocab_size();
    let model = VichaModel::new(config, tokenizer, 0.07, 8).or_fail("model")?;
    randomize(&model.params, 0.3, 17);
    let images = VichaModel::stack_images(&[
        random_image(1, 16).to_tensor().unwrap(),
        random_image(2, 16).to_tensor().unwrap(),
    ])
    .or_fail("images")?;
    let patches = model.config.num_patches();
    let plans = (0..2)
        .map(|_| plan_image_mask(patches, 0.75, &mut rng))
        .collect::<vicha::Result<Vec<_>>>()
        .or_fail("plans")?;
    ensure!(
        plans[0].masked.len() == 12,
        "16-patch grid masks {} patches",
        plans[0].masked.len()
    );
    let visible: Vec<Vec<usize>> = plans.iter().map(|p| p.visible.clone()).collect();
    let encoded = model
        .online
        .vision
        .forward_visible(&images, &visible)
        .or_fail("encode")?;
    let targets = patchify(&images, model.config.patch_size).or_fail("patchify")?;
    let captions = [
        model.tokenizer.encode("a red circle"),
        model.tokenizer.encode("blue square on the left"),
    ];
    let text = model.online.text.forward(&captions).or_fail("text")?;

    let unimodal = model
        .mim
        .reconstruct_unimodal(encoded.last(), &plans)
        .or_fail("U")?;
    let multimodal = model
        .mim
        .reconstruct_multimodal(
            encoded.last(),
            &plans,
            &model.multimodal,
            text.last(),
            text.mask.as_ref(),
        )
        .or_fail("M")?;
    let u_loss =
        scalar(&u_mim_loss(&model.mim, encoded.last(), &plans, &targets).or_fail("U loss")?)
            .unwrap();
    ensure!(
        u_loss.to_bits()
            == scalar(&masked_patch_mse(&unimodal, &targets, &plans).unwrap())
                .unwrap()
                .to_bits(),
        "U loss is not the masked MSE of the U prediction"
    );
    for (name, pred) in [("U", &unimodal), ("M", &multimodal)] {
        let base = scalar(&masked_patch_mse(pred, &targets, &plans).unwrap()).unwrap();
        let moved =
            scalar(&masked_patch_mse(&perturb_visible(pred, &plans, 9), &targets, &plans).unwrap())
                .unwrap();
        ensure!(
            base.to_bits() == moved.to_bits(),
            "{name}-MIM loss moved from {base} to {moved}"
        );
        let swapped: Vec<_> = plans
            .iter()
            .map(|p| vicha::objectives::ImageMaskPlan {
                visible: p.masked.clone(),
                masked: p.visible.clone(),
            })
            .collect();
        let changed = scalar(
            &masked_patch_mse(&perturb_visible(pred, &swapped, 9), &targets, &plans).unwrap(),
        )
        .unwrap();
        ensure!(
            changed != base,
            "{name}-MIM loss ignores masked predictions"
        );
    }
    Ok("U and M losses bitwise unchanged; 12 of 16 patches masked".into())
}

// ---------------------------------------------------------------------------
// Visual concepts

pub fn concept_selection() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ties = 0;
    for instance in 0..100 {
        let mut rows: Vec<Vec<f64>> = (0..20)
            .map(|_| unit(&normal_vec(&mut rng, 8, 1.0)))
            .collect();
        if instance % 3 == 0 {
            for _ in 0..3 {
                let (a, b) = (rng.random_range(0..20), rng.random_range(0..20));
                rows[b] = rows[a].clone();
            }
        }
        let corpus = ConceptCorpus {
            concepts: (0..20).map(|i| format!("concept {i}")).collect(),
            counts: vec![2; 20],
            source: "oracle".into(),
        };
        let embeddings = Array2::from_shape_vec((20, 8), rows.concat()).unwrap();
        let query = normal_vec(&mut rng, 8, 1.0);
        let got = select_top_k("img", &query, &corpus, &embeddings, 5).or_fail("select")?;

        let q = unit(&query);
        let scores: Vec<f64> = rows.iter().map(|r| dotp(r, &q)).collect();
        let mut remaining: Vec<usize> = (0..20).collect();
        let mut want = Vec::new();
        while want.len() < 5 {
            let mut best = 0;
            for (pos, &c) in remaining.iter().enumerate() {
                if scores[c] > scores[remaining[best]] {
                    best = pos;
                }
            }
            want.push(remaining.remove(best));
        }
        for w in want.windows(2) {
            if (scores[w[0]] - scores[w[1]]).abs() < 1e-12 {
                ties += 1;
            }
        }
        let want_names: Vec<String> = want.iter().map(|&i| corpus.concepts[i].clone()).collect();
        ensure!(
            got.concepts == want_names,
            "instance {instance}: {:?} vs {want_names:?}",
            got.concepts
        );
        for (s, &i) in got.scores.iter().zip(&want) {
            ensure!(
                (s - scores[i]).abs() <= 1e-12,
                "instance {instance}: score {s} vs {}",
                scores[i]
            );
        }
    }
    Ok(format!(
        "100 instances agree, {ties} tied neighbours in the top 5"
    ))
}

pub fn concept_augmentation() -> Check {
    for n in 1..=40usize {
        for step in 1..=20 {
            let p = step as f64 * 0.05;
            let want = ((p * n as f64).round() as usize).max(1);
            let got = vca_subset_size(n, p);
            ensure!(got == want, "n {n}, p {p}: size {got}, want {want}");
        }
    }
    ensure!(
        vca_subset_size(15, 0.30) == 5,
        "k 15, p 0.3 gives {}",
        vca_subset_size(15, 0.30)
    );
    let set = VisualConceptSet {
        image_id: "img".into(),
        concepts: (0..15).map(|i| format!("c{i:02}")).collect(),
        scores: (0..15).map(|i| 1.0 - i as f64 * 0.01).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut hits = BTreeMap::<String, usize>::new();
    let draws = 10_000;
    for _ in 0..draws {
        let s = vca_sample(&set, 0.30, &mut rng).or_fail("sample")?;
        ensure!(s.len() == 5, "drew {} concepts", s.len());
        ensure!(
            s.concepts.windows(2).all(|w| w[0] < w[1]),
            "order not preserved: {:?}",
            s.concepts
        );
        for c in s.concepts {
            *hits.entry(c).or_default() += 1;
        }
    }
    let mut worst = 0.0f64;
    for c in &set.concepts {
        let freq = *hits.get(c).unwrap_or(&0) as f64 / draws as f64;
        worst = worst.max((freq - 1.0 / 3.0).abs());
    }
    ensure!(worst <= 0.02, "inclusion frequency deviates by {worst:.4}");
    Ok(format!(
        "size rule holds; max inclusion deviation {worst:.4} over {draws} draws"
    ))
}

// ---------------------------------------------------------------------------
// Filtering

fn scored_manifest(rng: &mut ChaCha8Rng) -> Manifest {
    let n = rng.random_range(1..=40);
    let pairs = (0..n)
        .map(|i| ImageTextPair {
            image_id: format!("img{i}"),
            image: ImageRef::Path(format!("img{i}.png")),
            caption: format!("caption {i}"),
            source: "oracle".into(),
            similarity: Some((rng.random_range(-1.0f64..1.0) * 10.0).round() / 10.0),
        })
        .collect();
    Manifest::new(pairs, vec![])
}

pub fn filtering() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for instance in 0..100 {
        let manifest = scored_manifest(&mut rng);
        let p = rng.random_range(0.01..=1.0);
        let got = filter_top_p(&manifest, p, FilterMode::Global).or_fail("filter")?;

        let n = manifest.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            let (sa, sb) = (
                manifest.pairs[a].similarity.unwrap(),
                manifest.pairs[b].similarity.unwrap(),
            );
            sb.partial_cmp(&sa).unwrap()
        });
        let cut = ((p * n as f64).ceil() as usize).clamp(1, n);
        let mut kept: Vec<usize> = order[..cut].to_vec();
        kept.sort_unstable();
        let want: Vec<&str> = kept
            .iter()
            .map(|&i| manifest.pairs[i].image_id.as_str())
            .collect();
        let have: Vec<&str> = got.pairs.iter().map(|p| p.image_id.as_str()).collect();
        ensure!(
            have == want,
            "instance {instance} (p {p}): {have:?} vs {want:?}"
        );

        for mode in [
            FilterMode::Global,
            FilterMode::PerImage,
            FilterMode::ImageLevel,
        ] {
            let same = filter_top_p(&manifest, 1.0, mode).or_fail("filter")?;
            ensure!(
                same.pairs == manifest.pairs,
                "p = 1 changed the manifest in {mode} mode"
            );
            let once = filter_top_p(&manifest, p, mode).or_fail("filter")?;
            let twice = filter_top_p(&once, p, mode).or_fail("filter")?;
            ensure!(once.pairs == twice.pairs, "{mode} filter is not idempotent");
        }
    }
    Ok("100 manifests agree with sort-then-cut".into())
}

// ---------------------------------------------------------------------------
// Queue and momentum

pub fn queue_behavior() -> Check {
    let capacity = 16;
    let b = 4;
    let mut f = hitc_fixture(b, capacity, 0, 31);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut pushed_img: Vec<Vec<f64>> = Vec::new();
    let mut pushed_txt: Vec<Vec<f64>> = Vec::new();
    for _ in 0..capacity + 7 {
        let mv = tensor2(
            &(0..b)
                .map(|_| normal_vec(&mut rng, 6, 1.0))
                .collect::<Vec<_>>(),
        );
        let mt = tensor2(
            &(0..b)
                .map(|_| normal_vec(&mut rng, 6, 1.0))
                .collect::<Vec<_>>(),
        );
        let (img, txt) = f.state.project_momentum(&mv, &mt).or_fail("project")?;
        pushed_img.extend(rows_of(&img));
        pushed_txt.extend(rows_of(&txt));
        hitc_loss(&mut f.state, &f.vision, &f.text, &mv, &mt).or_fail("loss")?;
        ensure!(
            f.state.image_queue.len() <= capacity,
            "queue grew to {}",
            f.state.image_queue.len()
        );
    }
    for (name, queue, pushed) in [
        ("image", &f.state.image_queue, &pushed_img),
        ("text", &f.state.text_queue, &pushed_txt),
    ] {
        let rows: Vec<Vec<f64>> = queue.rows().cloned().collect();
        ensure!(
            rows.len() == capacity,
            "{name} queue holds {} rows",
            rows.len()
        );
        ensure!(
            rows[..] == pushed[pushed.len() - capacity..],
            "{name} queue is not the newest {capacity} rows in order"
        );
        for r in &rows {
            let norm = dotp(r, r).sqrt();
            ensure!(
                (norm - 1.0).abs() <= 1e-12,
                "{name} queue entry has norm {norm}"
            );
        }
    }
    Ok(format!(
        "{} batches of {b} pushed, newest {capacity} rows kept",
        capacity + 7
    ))
}

pub fn momentum() -> Check {
    let model = toy_model(4);
    randomize(&model.params, 0.3, 41);
    randomize(&model.momentum_params, 0.3, 42);
    let snapshot = |s: &ParamStore| -> Vec<(String, Vec<f64>)> {
        s.vars()
            .into_iter()
            .map(|(n, v)| (n, values(v.as_tensor())))
            .collect()
    };
    let online = snapshot(&model.params);
    let before = snapshot(&model.momentum_params);
    let m = 0.9;
    model.update_momentum(m).or_fail("update")?;
    let after = snapshot(&model.momentum_params);
    let online_by_name: BTreeMap<_, _> = online.into_iter().collect();
    let mut entries = 0;
    for ((name, old), (_, new)) in before.iter().zip(&after) {
        let src = &online_by_name[name];
        for i in 0..old.len() {
            let want = old[i] * m + src[i] * (1.0 - m);
            ensure!(
                new[i].to_bits() == want.to_bits(),
                "{name}[{i}]: {} vs {want}",
                new[i]
            );
            entries += 1;
        }
    }
    model.update_momentum(1.0).or_fail("update")?;
    ensure!(
        snapshot(&model.momentum_params) == after,
        "m = 1 changed momentum parameters"
    );

    let (_dir, path) = tmp();
    let config = desk_config(&path);
    prepared_fixture(&config, 4);
    let mut trainer = pipeline::prepare_trainer(&config).or_fail("trainer")?;
    let batch = trainer.batcher.batch_at(0);
    let losses = trainer.forward_losses(&batch).or_fail("forward")?;
    let grads = losses.total.backward().or_fail("backward")?;
    for (name, var) in trainer.model.momentum_params.vars() {
        ensure!(
            grads.get(var.as_tensor()).is_none(),
            "momentum parameter {name} received a gradient"
        );
    }
    let reached = trainer
        .model
        .params
        .vars()
        .iter()
        .filter(|(_, v)| grads.get(v.as_tensor()).is_some())
        .count();
    ensure!(reached > 0, "no online parameter received a gradient");
    Ok(format!(
        "{entries} entries exact; {reached} online tensors get gradients, momentum none"
    ))
}

// ---------------------------------------------------------------------------
// End-to-end runs

pub fn overfit() -> Check {
    let start = Instant::now();
    let (_dir, path) = tmp();
    let config = desk_config(&path);
    ensure!(
        config.training.steps == 300 && config.training.batch_size == 8,
        "desk preset is not 300 steps of batch 8"
    );
    prepared_fixture(&config, 8);
    let summary = pipeline::pretrain_command(&config, false).or_fail("pretrain")?;
    let log = pipeline::read_log(&summary.log).or_fail("log")?;
    ensure!(log.len() == 300, "log has {} records", log.len());
    let avg =
        |r: &[vicha::train::StepRecord]| r.iter().map(|s| s.total).sum::<f64>() / r.len() as f64;
    let initial = avg(&log[..10]);
    let fin = avg(&log[log.len() - 10..]);
    let drop = 1.0 - fin / initial;
    ensure!(
        drop >= 0.5,
        "loss fell from {initial:.3} to {fin:.3} ({:.0}%)",
        drop * 100.0
    );
    let report = pipeline::eval_retrieval_command(
        &summary.checkpoint,
        &config.paths.manifest,
        Some(&config.paths.concepts),
        8,
        None,
    )
    .or_fail("eval")?;
    let (t2i, i2t) = (
        report.result.text_to_image[&1],
        report.result.image_to_text[&1],
    );
    ensure!(
        t2i == 1.0 && i2t == 1.0,
        "R@1 text-to-image {t2i}, image-to-text {i2t}"
    );
    let elapsed = start.elapsed().as_secs_f64();
    ensure!(elapsed < 300.0, "took {elapsed:.0} s");
    Ok(format!(
        "loss {initial:.3} -> {fin:.3} ({:.0}% drop), R@1 1.0/1.0, {elapsed:.0} s",
        drop * 100.0
    ))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

pub fn concept_trend() -> Check {
    let (_dir, path) = tmp();
    let base = desk_config(&path);
    prepared_fixture(&base, 64);
    let mut with = Vec::new();
    let mut without = Vec::new();
    for seed in 0..3u64 {
        for use_concepts in [true, false] {
            let mut config = base.clone();
            config.seed = seed;
            config.model.seed = seed;
            config.training.use_concepts = use_concepts;
            let mut trainer = pipeline::prepare_trainer(&config).or_fail("trainer")?;
            while trainer.step < config.training.steps {
                trainer.train_step().or_fail("step")?;
            }
            let r = trainer.in_batch_recall(0).or_fail("recall")?;
            if use_concepts {
                with.push(r)
            } else {
                without.push(r)
            }
        }
    }
    let (a, b) = (median(with.clone()), median(without.clone()));
    ensure!(
        a >= b,
        "median R@1 with concepts {a:.3} < without {b:.3} ({with:.3?} vs {without:.3?})"
    );
    Ok(format!(
        "median R@1 with concepts {a:.3} >= without {b:.3} ({with:.3?} vs {without:.3?})"
    ))
}

type Snapshot = (
    Vec<(String, Vec<u64>)>,
    Vec<(String, Vec<u64>)>,
    Vec<(String, Vec<u64>, Vec<u64>)>,
    Vec<Vec<u64>>,
    u64,
);

fn bit_values(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Every piece of trainer state as raw bit patterns.
fn snapshot(t: &Trainer) -> Snapshot {
    let store = |s: &ParamStore| {
        s.vars()
            .into_iter()
            .map(|(n, v)| (n, bit_values(&values(v.as_tensor()))))
            .collect::<Vec<_>>()
    };
    let adam = t
        .optimizer
        .moments
        .iter()
        .map(|(n, m)| {
            (
                n.clone(),
                bit_values(&values(&m.first)),
                bit_values(&values(&m.second)),
            )
        })
        .collect();
    let queue = t
        .model
        .hitc
        .image_queue
        .rows()
        .chain(t.model.hitc.text_queue.rows())
        .map(|r| bit_values(r))
        .collect();
    (
        store(&t.model.params),
        store(&t.model.momentum_params),
        adam,
        queue,
        t.optimizer.step,
    )
}

fn bits(r: &vicha::train::StepRecord) -> Vec<u64> {
    [r.itm, r.mlm, r.hitc, r.mim, r.total, r.tau, r.lr]
        .iter()
        .map(|v| v.to_bits())
        .collect()
}

pub fn resume_exactness() -> Check {
    let (_dir, path) = tmp();
    let mut config = desk_config(&path);
    config.training.steps = 8;
    config.training.batch_size = 4;
    prepared_fixture(&config, 8);
    let ckpt = path.join("mid.safetensors");

    let mut straight = pipeline::prepare_trainer(&config).or_fail("trainer")?;
    for _ in 0..3 {
        straight.train_step().or_fail("step")?;
    }
    straight.save(&ckpt).or_fail("save")?;
    let next_straight = straight.train_step().or_fail("step")?;

    let mut resumed = pipeline::prepare_trainer(&config).or_fail("trainer")?;
    resumed.restore(load_checkpoint(&ckpt).or_fail("load")?);
    let next_resumed = resumed.train_step().or_fail("step")?;
    ensure!(
        bits(&next_straight) == bits(&next_resumed),
        "step after resume logged different losses"
    );
    ensure!(
        snapshot(&straight) == snapshot(&resumed),
        "state after resume differs"
    );

    // The CLI path: a run interrupted at its step-4 checkpoint and resumed
    // must end where an uninterrupted run ends.
    let full = pipeline::pretrain_command(&config, false).or_fail("pretrain")?;
    let reference = load_checkpoint(&full.checkpoint).or_fail("load")?;
    let mut partial = pipeline::prepare_trainer(&config).or_fail("trainer")?;
    for _ in 0..4 {
        partial.train_step().or_fail("step")?;
    }
    partial.save(&full.checkpoint).or_fail("save")?;
    let summary = pipeline::pretrain_command(&config, true).or_fail("resume")?;
    ensure!(
        summary.steps_run == 4,
        "resume ran {} steps",
        summary.steps_run
    );
    let resumed_state = load_checkpoint(&summary.checkpoint).or_fail("load")?;
    let as_trainer =
        |state: vicha::train::CheckpointState| -> std::result::Result<Trainer, String> {
            let mut t = pipeline::prepare_trainer(&config).or_fail("trainer")?;
            t.restore(state);
            Ok(t)
        };
    ensure!(
        snapshot(&as_trainer(reference)?) == snapshot(&as_trainer(resumed_state)?),
        "resumed command run differs from the uninterrupted run"
    );
    Ok("one step after a reload and a resumed 8-step run are bitwise identical".into())
}

// ---------------------------------------------------------------------------
// Grounding

/// The matching log-likelihood with `offset` added to the captured
/// cross-attention probabilities, recomputed from public pieces.
fn grounding_objective(
    model: &VichaModel,
    image: &Tensor,
    query: &[u32],
    layer: usize,
    offset: Tensor,
) -> f64 {
    let vision = model.online.vision.forward(image, None).unwrap();
    let text = model.online.text.forward(&[query.to_vec()]).unwrap();
    let mut capture = AttentionCapture {
        offset: Some(offset),
        ..Default::default()
    };
    let out = model
        .multimodal
        .forward(
            text.last(),
            text.mask.as_ref(),
            vision.last(),
            vision.mask.as_ref(),
            Some((layer - 1, &mut capture)),
        )
        .unwrap();
    let logits = model
        .itm_head
        .forward(&out.narrow(1, 0, 1).unwrap().squeeze(1).unwrap())
        .unwrap();
    -scalar(&cross_entropy(&logits, &[1]).unwrap()).unwrap()
}

/// Attention probabilities [heads][queries][keys] of decoder layer `layer`.
fn captured_probs(
    model: &VichaModel,
    image: &Tensor,
    query: &[u32],
    layer: usize,
) -> (Vec<usize>, Vec<f64>) {
    let vision = model.online.vision.forward(image, None).unwrap();
    let text = model.online.text.forward(&[query.to_vec()]).unwrap();
    let mut capture = AttentionCapture::default();
    model
        .multimodal
        .forward(
            text.last(),
            text.mask.as_ref(),
            vision.last(),
            vision.mask.as_ref(),
            Some((layer - 1, &mut capture)),
        )
        .unwrap();
    let probs = capture.probs.unwrap();
    (probs.dims().to_vec(), values(&probs))
}

fn proposals(grid: usize) -> Vec<GridBox> {
    let g = grid - 1;
    vec![
        GridBox {
            x0: 0,
            y0: 0,
            x1: 0,
            y1: 0,
        },
        GridBox::whole(grid),
        GridBox {
            x0: 1,
            y0: 0,
            x1: g,
            y1: 1,
        },
        GridBox {
            x0: 0,
            y0: 1,
            x1: 1,
            y1: g,
        },
        GridBox {
            x0: g,
            y0: g,
            x1: g,
            y1: g,
        },
    ]
}

pub fn grounding() -> Check {
    let mut config = toy_config(0);
    config.image_size = 12;
    let tokenizer = toy_tokenizer();
    config.vocab_size = tokenizer.vocab_size();
    let model = VichaModel::new(config, tokenizer, 0.07, 8).or_fail("model")?;
    randomize(&model.params, 0.3, 51);
    let image = random_image(52, 12);
    let batch = VichaModel::stack_images(&[image.to_tensor().unwrap()]).unwrap();
    let query = model.tokenizer.encode("red circle on the left");
    let grid = model.config.grid_size();
    let boxes = proposals(grid);
    let mut worst = 0.0f64;
    for layer in [1, 2] {
        let map =
            grad_cam_grounding(&model, &image, &[], &query, &boxes, layer).or_fail("grounding")?;
        let (dims, probs) = captured_probs(&model, &batch, &query, layer);
        let (heads, queries, keys) = (dims[1], dims[2], dims[3]);
        let h = 1e-6;
        let mut grads = vec![0.0; probs.len()];
        for (i, g) in grads.iter_mut().enumerate() {
            let mut offset = vec![0.0; probs.len()];
            offset[i] = h;
            let up = grounding_objective(
                &model,
                &batch,
                &query,
                layer,
                Tensor::from_vec(offset.clone(), dims.clone(), &vicha::ops::device()).unwrap(),
            );
            offset[i] = -h;
            let down = grounding_objective(
                &model,
                &batch,
                &query,
                layer,
                Tensor::from_vec(offset, dims.clone(), &vicha::ops::device()).unwrap(),
            );
            *g = (up - down) / (2.0 * h);
        }
        let mut relevance = vec![vec![0.0; grid]; grid];
        for (y, row) in relevance.iter_mut().enumerate() {
            for (x, cell) in row.iter_mut().enumerate() {
                let key = 1 + y * grid + x;
                let mut sum = 0.0;
                for hd in 0..heads {
                    for q in 0..queries {
                        let i = (hd * queries + q) * keys + key;
                        sum += (probs[i] * grads[i]).max(0.0);
                    }
                }
                *cell = sum / (heads * queries) as f64;
            }
        }
        let scale = relevance
            .iter()
            .flatten()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        ensure!(scale > 0.0, "layer {layer}: relevance is identically zero");
        for y in 0..grid {
            for x in 0..grid {
                let err = (map.relevance[[y, x]] - relevance[y][x]).abs() / scale;
                worst = worst.max(err);
                ensure!(
                    err <= 1e-6,
                    "layer {layer} cell ({y}, {x}): {} vs {}",
                    map.relevance[[y, x]],
                    relevance[y][x]
                );
            }
        }
        let mut scored: Vec<(usize, f64)> = boxes
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let cells: Vec<f64> = (b.y0..=b.y1)
                    .flat_map(|y| (b.x0..=b.x1).map(move |x| (y, x)))
                    .map(|(y, x)| relevance[y][x])
                    .collect();
                (i, cells.iter().sum::<f64>() / cells.len() as f64)
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let order: Vec<usize> = map.ranking.iter().map(|r| r.index).collect();
        let want: Vec<usize> = scored.iter().map(|s| s.0).collect();
        ensure!(
            order == want,
            "layer {layer}: ranking {order:?} vs {want:?}"
        );
        for (r, (_, s)) in map.ranking.iter().zip(&scored) {
            ensure!(
                (r.score - s).abs() / scale <= 1e-6,
                "layer {layer}: box score {} vs {s}",
                r.score
            );
        }
    }

    let layer = 2;
    for part in ["key", "value"] {
        let name = format!(
            "multimodal.layers.{}.cross_attention.{part}.weight",
            layer - 1
        );
        let var = model
            .params
            .get(&name)
            .ok_or(format!("no parameter {name}"))?;
        var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
    }
    let map =
        grad_cam_grounding(&model, &image, &[], &query, &boxes, layer).or_fail("grounding")?;
    let first = map.relevance[[0, 0]];
    ensure!(
        map.relevance.iter().all(|v| v.to_bits() == first.to_bits()),
        "uniform case relevance is not constant"
    );
    ensure!(
        map.ranking
            .iter()
            .all(|r| r.score.to_bits() == first.to_bits()),
        "uniform case box scores differ"
    );
    let order: Vec<usize> = map.ranking.iter().map(|r| r.index).collect();
    ensure!(
        order == (0..boxes.len()).collect::<Vec<_>>(),
        "tied proposals reordered: {order:?}"
    );
    Ok(format!(
        "max relative deviation {worst:.1e} on two layers; uniform case ties {} proposals",
        boxes.len()
    ))
}
