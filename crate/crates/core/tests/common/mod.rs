#![allow(dead_code)]

pub mod criteria;

use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vicha::model::{last_layers_pairing, ModelConfig, ParamStore, VichaModel};
use vicha::pipeline;
use vicha::tokenizer::Tokenizer;
use vicha::train::RunConfig;

/// Smallest model that still exercises every component.
pub fn toy_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        hidden_dim: 8,
        embed_dim: 8,
        vision_layers: 2,
        text_layers: 2,
        multimodal_layers: 2,
        vc_encoder_layers: 1,
        num_heads: 2,
        mlp_ratio: 2,
        vocab_size,
        max_text_len: 12,
        max_concepts: 4,
        aligned_layer_pairs: last_layers_pairing(2, 2),
        mim_decoder_layers: 1,
        mim_decoder_heads: 2,
        per_layer_temperature: false,
        seed: 3,
    }
}

pub fn toy_tokenizer() -> Tokenizer {
    Tokenizer::from_texts(["a red blue green circle square on the left right top bottom center in"])
}

pub fn toy_model(seed: u64) -> VichaModel {
    let tokenizer = toy_tokenizer();
    let mut config = toy_config(tokenizer.vocab_size());
    config.seed = seed;
    VichaModel::new(config, tokenizer, 0.07, 8).unwrap()
}

/// Overwrites every variable with N(0, std) draws so that small test models
/// are far from the near-zero initialisation.
pub fn randomize(store: &ParamStore, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).unwrap();
    for (_, var) in store.vars() {
        let data: Vec<f64> = (0..var.elem_count())
            .map(|_| normal.sample(&mut rng))
            .collect();
        var.set(&Tensor::from_vec(data, var.shape(), var.device()).unwrap())
            .unwrap();
    }
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn random_image(seed: u64, size: usize) -> vicha::data::ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..3 * size * size)
        .map(|_| rand::Rng::random::<f64>(&mut rng))
        .collect();
    vicha::data::ImageTensor::new(3, size, size, data).unwrap()
}

/// Relative error with the larger magnitude as the scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// A desk run configuration whose artifact paths live in `dir`.
pub fn desk_config(dir: &Path) -> RunConfig {
    let mut config = RunConfig::desk();
    config.paths.manifest = dir.join("manifest.jsonl");
    config.paths.corpus = dir.join("corpus.jsonl");
    config.paths.cache = dir.join("cache.jsonl");
    config.paths.concepts = dir.join("concepts.jsonl");
    config.paths.output_dir = dir.join("run");
    config
}

/// Generates `n` synthetic pairs and runs the concept pipeline on them.
pub fn prepared_fixture(config: &RunConfig, n: usize) {
    pipeline::generate(config, n).unwrap();
    pipeline::build_corpus_command(config).unwrap();
    pipeline::embed_command(config).unwrap();
    pipeline::select_concepts_command(config).unwrap();
}

pub fn path_string(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

pub fn file_lines(p: &Path) -> Vec<String> {
    std::fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

pub fn tmp() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().to_path_buf();
    (dir, path)
}

/// Panics with the failure reason of a criterion check.
pub fn pass(check: criteria::Check) {
    if let Err(reason) = check {
        panic!("{reason}");
    }
}
