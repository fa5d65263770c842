use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::image::ImageTensor;
use super::pair::Manifest;
use crate::concepts::VisualConceptSet;
use crate::tokenizer::Tokenizer;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Positions of the batch members in the manifest.
    pub indices: Vec<usize>,
    pub image_ids: Vec<String>,
    pub images: Vec<ImageTensor>,
    pub token_ids: Vec<Vec<u32>>,
    pub concepts: Vec<VisualConceptSet>,
    /// `pairing[i]` is the caption index matching image `i`.
    pub pairing: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone)]
struct Item {
    image_id: String,
    image: ImageTensor,
    token_ids: Vec<u32>,
    concepts: VisualConceptSet,
}

/// Holds a decoded dataset and cuts it into seeded, per-epoch shuffled batches.
#[derive(Debug, Clone)]
pub struct Batcher {
    items: Vec<Item>,
    batch_size: usize,
    seed: u64,
}

impl Batcher {
    pub fn new(
        manifest: &Manifest,
        concepts: &[VisualConceptSet],
        tokenizer: &Tokenizer,
        max_text_len: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if manifest.is_empty() {
            return Err(Error::Record("manifest has no pairs".into()));
        }
        let by_id: HashMap<&str, &VisualConceptSet> =
            concepts.iter().map(|c| (c.image_id.as_str(), c)).collect();
        let mut items = Vec::with_capacity(manifest.len());
        for (i, pair) in manifest.pairs.iter().enumerate() {
            let set = by_id
                .get(pair.image_id.as_str())
                .ok_or_else(|| Error::MissingConcepts(pair.image_id.clone()))?;
            let mut token_ids = tokenizer.encode(&pair.caption);
            token_ids.truncate(max_text_len);
            items.push(Item {
                image_id: pair.image_id.clone(),
                image: manifest.load_image(i)?,
                token_ids,
                concepts: (*set).clone(),
            });
        }
        Ok(Self {
            items,
            batch_size,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.items.len().div_ceil(self.batch_size)
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        order
    }

    fn assemble(&self, indices: &[usize]) -> Batch {
        let members: Vec<&Item> = indices.iter().map(|&i| &self.items[i]).collect();
        Batch {
            indices: indices.to_vec(),
            image_ids: members.iter().map(|m| m.image_id.clone()).collect(),
            images: members.iter().map(|m| m.image.clone()).collect(),
            token_ids: members.iter().map(|m| m.token_ids.clone()).collect(),
            concepts: members.iter().map(|m| m.concepts.clone()).collect(),
            pairing: (0..indices.len()).collect(),
        }
    }

    pub fn epoch(&self, epoch: u64) -> Vec<Batch> {
        self.epoch_order(epoch)
            .chunks(self.batch_size)
            .map(|c| self.assemble(c))
            .collect()
    }

    /// Batch for a global step counter, cycling through epochs.
    pub fn batch_at(&self, step: u64) -> Batch {
        let per_epoch = self.batches_per_epoch() as u64;
        let order = self.epoch_order(step / per_epoch);
        let start = (step % per_epoch) as usize * self.batch_size;
        let end = (start + self.batch_size).min(order.len());
        self.assemble(&order[start..end])
    }

    /// Every item in manifest order as a single batch.
    pub fn all(&self) -> Batch {
        self.assemble(&(0..self.items.len()).collect::<Vec<_>>())
    }
}

pub fn make_batches(
    manifest: &Manifest,
    concepts: &[VisualConceptSet],
    tokenizer: &Tokenizer,
    max_text_len: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    Ok(Batcher::new(
        manifest,
        concepts,
        tokenizer,
        max_text_len,
        batch_size,
        seed,
    )?
    .epoch(epoch))
}
