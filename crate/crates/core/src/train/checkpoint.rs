//! Safetensors checkpoints holding everything needed to resume bitwise.
//!
//! Tensors: `param.<name>`, `momentum.<name>`, `adam.first.<name>`,
//! `adam.second.<name>`, `queue.image`, `queue.text` (all f64). Metadata:
//! `format`, `config` (RunConfig JSON), `step`, `adam_step`, `rng`
//! (`{"seed": hex, "stream": n, "word_pos": "n"}`), `vocab` and `paired`.

use std::collections::HashMap;
use std::path::Path;

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::optim::{AdamW, Moments};
use crate::model::VichaModel;
use crate::objectives::FeatureQueue;
use crate::ops::device;
use crate::tokenizer::Tokenizer;
use crate::{Error, Result};

pub const FORMAT: &str = "vicha-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Checkpoint(format!("malformed rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Everything stored in a checkpoint, detached from any data source.
pub struct CheckpointState {
    pub config: RunConfig,
    pub model: VichaModel,
    pub optimizer: AdamW,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

struct Entry {
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

fn entry(t: &Tensor) -> Result<Entry> {
    let values = t.flatten_all()?.to_vec1::<f64>()?;
    Ok(Entry {
        shape: t.dims().to_vec(),
        bytes: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
    })
}

fn queue_entry(q: &FeatureQueue) -> Result<Option<Entry>> {
    q.to_tensor()?.map(|t| entry(&t)).transpose()
}

pub fn save_checkpoint(
    path: &Path,
    config: &RunConfig,
    model: &VichaModel,
    optimizer: &AdamW,
    step: u64,
    rng: &ChaCha8Rng,
) -> Result<()> {
    let mut entries: Vec<(String, Entry)> = Vec::new();
    for (name, var) in model.params.vars() {
        entries.push((format!("param.{name}"), entry(var.as_tensor())?));
    }
    for (name, var) in model.momentum_params.vars() {
        entries.push((format!("momentum.{name}"), entry(var.as_tensor())?));
    }
    for (name, m) in &optimizer.moments {
        entries.push((format!("adam.first.{name}"), entry(&m.first)?));
        entries.push((format!("adam.second.{name}"), entry(&m.second)?));
    }
    if let Some(e) = queue_entry(&model.hitc.image_queue)? {
        entries.push(("queue.image".into(), e));
    }
    if let Some(e) = queue_entry(&model.hitc.text_queue)? {
        entries.push(("queue.text".into(), e));
    }
    let views = entries
        .iter()
        .map(|(n, e)| {
            TensorView::new(Dtype::F64, e.shape.clone(), &e.bytes)
                .map(|v| (n.clone(), v))
                .map_err(Error::from)
        })
        .collect::<Result<Vec<_>>>()?;
    let metadata: HashMap<String, String> = [
        ("format".to_string(), FORMAT.to_string()),
        ("config".to_string(), serde_json::to_string(config)?),
        ("step".to_string(), step.to_string()),
        ("adam_step".to_string(), optimizer.step.to_string()),
        (
            "rng".to_string(),
            serde_json::to_string(&RngState::capture(rng))?,
        ),
        ("vocab".to_string(), model.tokenizer.to_json()),
        ("paired".to_string(), model.paired.is_some().to_string()),
    ]
    .into_iter()
    .collect();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    safetensors::tensor::serialize_to_file(views, Some(metadata), &tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn tensor_of(view: &TensorView<'_>) -> Result<Tensor> {
    if view.dtype() != Dtype::F64 {
        return Err(Error::Checkpoint(format!(
            "expected f64 tensors, found {:?}",
            view.dtype()
        )));
    }
    let values: Vec<f64> = view
        .data()
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(Tensor::from_vec(values, view.shape().to_vec(), &device())?)
}

fn fill_queue(queue: &mut FeatureQueue, st: &SafeTensors<'_>, name: &str) -> Result<()> {
    queue.clear();
    if let Ok(view) = st.tensor(name) {
        queue.push(&tensor_of(&view)?)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointState> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let bytes = std::fs::read(path)?;
    let (_, header) = SafeTensors::read_metadata(&bytes)?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no metadata".into()))?;
    let field = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint metadata lacks `{k}`")))
    };
    if field("format")? != FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {:?}",
            field("format")?
        )));
    }
    let parse_u64 = |k: &str| -> Result<u64> {
        field(k)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("`{k}` is not an integer")))
    };
    let config: RunConfig = serde_json::from_str(&field("config")?)?;
    let tokenizer = Tokenizer::from_json(&field("vocab")?)?;
    let rng_state: RngState = serde_json::from_str(&field("rng")?)?;
    let t = &config.training;
    let mut model = VichaModel::new(config.model.clone(), tokenizer, t.tau_init, t.queue_size)?;
    if meta.get("paired").map(String::as_str) == Some("true") {
        model.replicate_for_pair()?;
    }

    let st = SafeTensors::deserialize(&bytes)?;
    let load_store = |store: &crate::model::ParamStore, prefix: &str| -> Result<()> {
        for (name, var) in store.vars() {
            let view = st
                .tensor(&format!("{prefix}.{name}"))
                .map_err(|_| Error::Checkpoint(format!("checkpoint lacks `{prefix}.{name}`")))?;
            let value = tensor_of(&view)?;
            if value.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?} in the checkpoint but {:?} in the model",
                    value.dims(),
                    var.dims()
                )));
            }
            var.set(&value)?;
        }
        Ok(())
    };
    load_store(&model.params, "param")?;
    load_store(&model.momentum_params, "momentum")?;
    fill_queue(&mut model.hitc.image_queue, &st, "queue.image")?;
    fill_queue(&mut model.hitc.text_queue, &st, "queue.text")?;

    let mut optimizer = AdamW::new(t.weight_decay);
    optimizer.step = parse_u64("adam_step")?;
    for (name, _) in model.params.vars() {
        let first = st.tensor(&format!("adam.first.{name}"));
        let second = st.tensor(&format!("adam.second.{name}"));
        if let (Ok(first), Ok(second)) = (first, second) {
            optimizer.moments.insert(
                name,
                Moments {
                    first: tensor_of(&first)?,
                    second: tensor_of(&second)?,
                },
            );
        }
    }
    Ok(CheckpointState {
        step: parse_u64("step")?,
        rng: rng_state.restore()?,
        config,
        model,
        optimizer,
    })
}

/// Reads only the run configuration stored in a checkpoint.
pub fn checkpoint_config(path: &Path) -> Result<RunConfig> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let bytes = std::fs::read(path)?;
    let (_, header) = SafeTensors::read_metadata(&bytes)?;
    let config = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get("config"))
        .ok_or_else(|| Error::Checkpoint("checkpoint metadata lacks `config`".into()))?;
    Ok(serde_json::from_str(config)?)
}
