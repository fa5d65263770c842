//! The end-to-end commands. Every command reads its inputs from paths in the
//! [`RunConfig`], writes JSON-lines artifacts whose header records provenance
//! and the exact configuration, and can be re-run independently.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact::{read_jsonl, write_jsonl, Header, Provenance};
use crate::concepts::cache::{embed_corpus_with_config, load_embedded_corpus};
use crate::concepts::{
    build_corpus, read_concept_file, select_top_k, write_concept_file, CacheProvider,
    ConceptCorpus, EmbeddingProvider, MockProvider, PhraseExtractor, RemoteProvider,
    ShapesProvider, VisualConceptSet,
};
use crate::data::{
    filter_top_p, generate_synthetic_dataset, score_pairs, Batcher, FilterMode, ImageTensor,
    Manifest, ScoreReport,
};
use crate::downstream::{
    grad_cam_grounding, retrieval_eval, GridBox, GroundingMap, RetrievalResult,
};
use crate::model::VichaModel;
use crate::tokenizer::Tokenizer;
use crate::train::config::ProviderKind;
use crate::train::{load_checkpoint, RunConfig, StepRecord, Trainer};
use crate::{Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const RETRIEVAL_REPORT: &str = "retrieval.json";
pub const GROUNDING_FILE: &str = "grounding.jsonl";

fn header(config: &RunConfig, provenance: Vec<Provenance>) -> Header {
    Header {
        provenance,
        config: Some(config.to_json()),
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput(path.to_path_buf()))
    }
}

pub fn provider_from_config(config: &RunConfig) -> Result<Box<dyn EmbeddingProvider>> {
    let p = &config.provider;
    Ok(match p.kind {
        ProviderKind::Mock => Box::new(MockProvider::new(p.seed, p.dim)),
        ProviderKind::Shapes => Box::new(ShapesProvider::new(p.seed, p.dim)),
        ProviderKind::Cache => {
            require(&config.paths.cache)?;
            Box::new(CacheProvider::open(&config.paths.cache)?)
        }
        ProviderKind::Remote => match &p.endpoint {
            Some(e) => Box::new(RemoteProvider::new(e, p.dim)?),
            None => Box::new(RemoteProvider::from_env(p.dim)?),
        },
    })
}

/// Writes `n` synthetic pairs to `paths.manifest`, with PNG images in an
/// `images/` directory beside it.
pub fn generate(config: &RunConfig, n: usize) -> Result<Manifest> {
    let path = &config.paths.manifest;
    let dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut manifest = generate_synthetic_dataset(n, config.seed)?;
    manifest.externalize_images(&dir.join("images"), &dir)?;
    manifest.config = Some(config.to_json());
    manifest.write(path)?;
    Ok(manifest)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorpusRecord {
    concept: String,
    count: usize,
}

pub fn write_corpus(path: &Path, header: &Header, corpus: &ConceptCorpus) -> Result<()> {
    let records: Vec<CorpusRecord> = corpus
        .iter()
        .map(|(c, n)| CorpusRecord {
            concept: c.to_string(),
            count: n,
        })
        .collect();
    write_jsonl(path, Some(header), &records)
}

pub fn read_corpus(path: &Path) -> Result<ConceptCorpus> {
    let (header, records) = read_jsonl::<CorpusRecord>(path)?;
    let source = header
        .and_then(|h| {
            h.provenance.iter().rev().find_map(|p| match p {
                Provenance::BuildCorpus { source, .. } => Some(source.clone()),
                _ => None,
            })
        })
        .unwrap_or_else(|| "unknown".into());
    Ok(ConceptCorpus {
        concepts: records.iter().map(|r| r.concept.clone()).collect(),
        counts: records.iter().map(|r| r.count).collect(),
        source,
    })
}

/// Builds one corpus per caption source and writes their union to
/// `paths.corpus`.
pub fn build_corpus_command(config: &RunConfig) -> Result<ConceptCorpus> {
    let manifest = Manifest::read(&config.paths.manifest)?;
    let mut by_source: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for p in &manifest.pairs {
        by_source
            .entry(p.source.as_str())
            .or_default()
            .push(p.caption.as_str());
    }
    let extractor = PhraseExtractor::default();
    let corpora: Vec<ConceptCorpus> = by_source
        .iter()
        .map(|(source, captions)| build_corpus(captions, &extractor, source))
        .collect();
    let source = by_source.keys().copied().collect::<Vec<_>>().join("+");
    let corpus = ConceptCorpus::merge(&corpora, &source);
    let h = header(
        config,
        vec![Provenance::BuildCorpus {
            source: source.clone(),
            captions: manifest.len(),
        }],
    );
    write_corpus(&config.paths.corpus, &h, &corpus)?;
    Ok(corpus)
}

/// Embeds `paths.corpus` into the cache at `paths.cache`, reusing cached rows.
pub fn embed_command(config: &RunConfig) -> Result<usize> {
    let corpus = read_corpus(&config.paths.corpus)?;
    let provider = provider_from_config(config)?;
    let matrix = embed_corpus_with_config(
        &corpus,
        provider.as_ref(),
        Some(&config.paths.cache),
        Some(&config.to_json()),
    )?;
    Ok(matrix.nrows())
}

/// Selects the top-k concepts of every manifest image into `paths.concepts`.
pub fn select_concepts_command(config: &RunConfig) -> Result<Vec<VisualConceptSet>> {
    let manifest = Manifest::read(&config.paths.manifest)?;
    let (corpus, matrix) = load_embedded_corpus(&config.paths.cache, "cache")?;
    let provider = provider_from_config(config)?;
    let k = config.training.k;
    let sets = manifest
        .pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let emb = provider.embed_image(&manifest.load_image(i)?)?;
            select_top_k(&p.image_id, &emb, &corpus, &matrix, k)
        })
        .collect::<Result<Vec<_>>>()?;
    let h = header(
        config,
        vec![Provenance::SelectConcepts {
            provider: provider.id(),
            k,
        }],
    );
    write_concept_file(&config.paths.concepts, Some(&h), &sets)?;
    Ok(sets)
}

pub fn score_pairs_command(config: &RunConfig, input: &Path, output: &Path) -> Result<ScoreReport> {
    let manifest = Manifest::read(input)?;
    let provider = provider_from_config(config)?;
    let (mut scored, report) = score_pairs(&manifest, provider.as_ref());
    for (id, message) in &report.failures {
        log::warn!("could not score {id}: {message}");
    }
    scored.config = Some(config.to_json());
    write_relocated(&mut scored, output)?;
    Ok(report)
}

pub fn filter_pairs_command(
    config: &RunConfig,
    p: f64,
    mode: FilterMode,
    input: &Path,
    output: &Path,
) -> Result<Manifest> {
    let manifest = Manifest::read(input)?;
    let mut filtered = filter_top_p(&manifest, p, mode)?;
    filtered.config = Some(config.to_json());
    write_relocated(&mut filtered, output)?;
    Ok(filtered)
}

/// Writes a manifest to a possibly different directory, rewriting relative
/// image paths so they still resolve.
fn write_relocated(manifest: &mut Manifest, output: &Path) -> Result<()> {
    let out_dir = output.parent().map(Path::to_path_buf).unwrap_or_default();
    let same_dir = match (manifest.base_dir.canonicalize(), absolute_dir(&out_dir)) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    if !same_dir {
        for pair in &mut manifest.pairs {
            if let crate::data::ImageRef::Path(p) = &pair.image {
                if Path::new(p).is_relative() {
                    let abs = manifest.base_dir.join(p);
                    let abs = abs.canonicalize().unwrap_or(abs);
                    pair.image = crate::data::ImageRef::Path(abs.to_string_lossy().into_owned());
                }
            }
        }
    }
    manifest.write(output)
}

fn absolute_dir(dir: &Path) -> std::io::Result<PathBuf> {
    let dir = if dir.as_os_str().is_empty() {
        Path::new(".")
    } else {
        dir
    };
    std::fs::create_dir_all(dir)?;
    dir.canonicalize()
}

/// Vocabulary over every caption and every concept string.
pub fn build_tokenizer(manifest: &Manifest, concepts: &[VisualConceptSet]) -> Tokenizer {
    let texts = manifest.pairs.iter().map(|p| p.caption.as_str()).chain(
        concepts
            .iter()
            .flat_map(|c| c.concepts.iter().map(String::as_str)),
    );
    Tokenizer::from_texts(texts)
}

fn load_concepts(
    config: &RunConfig,
    manifest: &Manifest,
    path: &Path,
) -> Result<Vec<VisualConceptSet>> {
    if config.training.use_concepts {
        return read_concept_file(path);
    }
    Ok(manifest
        .pairs
        .iter()
        .map(|p| VisualConceptSet {
            image_id: p.image_id.clone(),
            ..Default::default()
        })
        .collect())
}

/// Trainer over the configured manifest and concept file, with the model
/// vocabulary fitted to the data.
pub fn prepare_trainer(config: &RunConfig) -> Result<Trainer> {
    let manifest = Manifest::read(&config.paths.manifest)?;
    let concepts = load_concepts(config, &manifest, &config.paths.concepts)?;
    let tokenizer = build_tokenizer(&manifest, &concepts);
    let mut config = config.clone();
    config.model.vocab_size = tokenizer.vocab_size();
    let t = &config.training;
    let batcher = Batcher::new(
        &manifest,
        &concepts,
        &tokenizer,
        config.model.max_text_len,
        t.batch_size,
        config.seed,
    )?;
    Trainer::new(config, tokenizer, batcher)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub steps_run: u64,
    pub final_step: u64,
    pub last: Option<StepRecord>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

fn append_log(path: &Path, config: &RunConfig, record: &StepRecord, fresh: bool) -> Result<()> {
    if fresh || !path.exists() {
        write_jsonl::<StepRecord>(path, Some(&header(config, vec![])), &[])?;
    }
    let mut f = OpenOptions::new().append(true).open(path)?;
    serde_json::to_writer(&mut f, record)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Trains to `training.steps`, resuming from the checkpoint in the output
/// directory when `resume` is set and one exists. A non-finite loss aborts
/// the run and leaves the last checkpoint untouched.
pub fn pretrain_command(config: &RunConfig, resume: bool) -> Result<PretrainSummary> {
    let out = &config.paths.output_dir;
    std::fs::create_dir_all(out)?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    let log = out.join(LOG_FILE);
    let mut trainer = prepare_trainer(config)?;
    let fresh = !(resume && checkpoint.exists());
    if !fresh {
        trainer.restore(load_checkpoint(&checkpoint)?);
    }
    let start = trainer.step;
    let save = |t: &Trainer| t.save(&checkpoint);
    if fresh {
        if log.exists() {
            std::fs::remove_file(&log)?;
        }
        save(&trainer)?;
    }
    let every = config.training.checkpoint_every;
    let mut last = None;
    let mut first_line = fresh;
    while trainer.step < trainer.config.training.steps {
        let record = trainer.train_step()?;
        append_log(&log, &trainer.config, &record, first_line)?;
        first_line = false;
        log::info!(
            "step {} total {:.4} itm {:.4} mlm {:.4} hitc {:.4} mim {:.4}",
            record.step,
            record.total,
            record.itm,
            record.mlm,
            record.hitc,
            record.mim
        );
        last = Some(record);
        if every > 0 && trainer.step % every == 0 {
            save(&trainer)?;
        }
    }
    if fresh && !log.exists() {
        write_jsonl::<StepRecord>(&log, Some(&header(&trainer.config, vec![])), &[])?;
    }
    save(&trainer)?;
    Ok(PretrainSummary {
        steps_run: trainer.step - start,
        final_step: trainer.step,
        last,
        checkpoint,
        log,
    })
}

pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    Ok(read_jsonl(path)?.1)
}

/// Images, concept lists and tokenised captions of a manifest, as the model
/// of `config` consumes them.
pub fn evaluation_inputs(
    config: &RunConfig,
    tokenizer: &Tokenizer,
    manifest: &Manifest,
    concepts_path: &Path,
) -> Result<(Vec<ImageTensor>, Option<Vec<Vec<String>>>, Vec<Vec<u32>>)> {
    let images = (0..manifest.len())
        .map(|i| manifest.load_image(i))
        .collect::<Result<Vec<_>>>()?;
    let concepts = if config.training.use_concepts {
        let sets = read_concept_file(concepts_path)?;
        let by_id: BTreeMap<&str, &VisualConceptSet> =
            sets.iter().map(|s| (s.image_id.as_str(), s)).collect();
        let lists = manifest
            .pairs
            .iter()
            .map(|p| {
                by_id
                    .get(p.image_id.as_str())
                    .map(|s| s.truncated(config.training.k).concepts)
                    .ok_or_else(|| Error::MissingConcepts(p.image_id.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(lists)
    } else {
        None
    };
    let captions = manifest
        .pairs
        .iter()
        .map(|p| {
            let mut ids = tokenizer.encode(&p.caption);
            ids.truncate(config.model.max_text_len);
            ids
        })
        .collect();
    Ok((images, concepts, captions))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub m: usize,
    pub result: RetrievalResult,
    pub config: serde_json::Value,
}

pub fn eval_retrieval_command(
    checkpoint: &Path,
    manifest_path: &Path,
    concepts_path: Option<&Path>,
    m: usize,
    output_dir: Option<&Path>,
) -> Result<RetrievalReport> {
    let state = load_checkpoint(checkpoint)?;
    let manifest = Manifest::read(manifest_path)?;
    let concepts_path = concepts_path.unwrap_or(&state.config.paths.concepts);
    let (images, concepts, captions) = evaluation_inputs(
        &state.config,
        &state.model.tokenizer,
        &manifest,
        concepts_path,
    )?;
    let result = retrieval_eval(&state.model, &images, concepts.as_deref(), &captions, m)?;
    let report = RetrievalReport {
        checkpoint: checkpoint.to_path_buf(),
        manifest: manifest_path.to_path_buf(),
        m,
        result,
        config: state.config.to_json(),
    };
    if let Some(dir) = output_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join(RETRIEVAL_REPORT),
            serde_json::to_string_pretty(&report)?,
        )?;
    }
    Ok(report)
}

pub fn read_proposals(path: &Path) -> Result<Vec<GridBox>> {
    Ok(read_jsonl(path)?.1)
}

/// Concepts for a single image: selected on the fly from the concept cache
/// when the model uses concepts and the cache exists.
fn concepts_for_image(config: &RunConfig, image: &ImageTensor) -> Result<Vec<String>> {
    if !config.training.use_concepts || !config.paths.cache.exists() {
        return Ok(Vec::new());
    }
    let (corpus, matrix) = load_embedded_corpus(&config.paths.cache, "cache")?;
    let provider = provider_from_config(config)?;
    let emb = provider.embed_image(image)?;
    Ok(select_top_k("query", &emb, &corpus, &matrix, config.training.k)?.concepts)
}

pub fn ground_command(
    checkpoint: &Path,
    image_path: &Path,
    query: &str,
    proposals_path: &Path,
    layer: usize,
    output: Option<&Path>,
) -> Result<GroundingMap> {
    let state = load_checkpoint(checkpoint)?;
    let image = ImageTensor::load(image_path)?;
    let proposals = read_proposals(proposals_path)?;
    let concepts = concepts_for_image(&state.config, &image)?;
    let mut ids = state.model.tokenizer.encode(query);
    ids.truncate(state.config.model.max_text_len);
    let map = grad_cam_grounding(&state.model, &image, &concepts, &ids, &proposals, layer)?;
    if let Some(out) = output {
        write_jsonl(out, Some(&header(&state.config, vec![])), &map.ranking)?;
    }
    Ok(map)
}

/// Loads the model of a checkpoint for library use.
pub fn load_model(checkpoint: &Path) -> Result<(RunConfig, VichaModel)> {
    let state = load_checkpoint(checkpoint)?;
    Ok((state.config, state.model))
}
