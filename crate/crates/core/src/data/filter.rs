//! Embedding-similarity scoring and top-p% pair filtering.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::pair::Manifest;
use crate::artifact::Provenance;
use crate::concepts::provider::{dot, normalize, EmbeddingProvider};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    /// Top p% of all pairs.
    #[default]
    Global,
    /// Top p% of the captions of each image.
    PerImage,
    /// Top p% of images ranked by their mean caption score; whole images kept or dropped.
    ImageLevel,
}

impl std::str::FromStr for FilterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(FilterMode::Global),
            "per-image" => Ok(FilterMode::PerImage),
            "image-level" => Ok(FilterMode::ImageLevel),
            other => Err(Error::Config(format!("unknown filter mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for FilterMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FilterMode::Global => "global",
            FilterMode::PerImage => "per-image",
            FilterMode::ImageLevel => "image-level",
        })
    }
}

/// Filtering fractions used for the original pretraining corpus.
pub fn source_preset(source: &str) -> Option<(f64, FilterMode)> {
    match source.to_ascii_lowercase().as_str() {
        "vg" | "visual-genome" => Some((0.5, FilterMode::PerImage)),
        "sbu" => Some((0.7, FilterMode::Global)),
        _ => None,
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreReport {
    pub scored: usize,
    /// (image_id, message) for every pair the provider failed on.
    pub failures: Vec<(String, String)>,
}

fn score_one(manifest: &Manifest, index: usize, provider: &dyn EmbeddingProvider) -> Result<f64> {
    let pair = &manifest.pairs[index];
    let image = manifest.load_image(index)?;
    let v = normalize(provider.embed_image(&image)?)?;
    let t = normalize(provider.embed_text(&pair.caption)?)?;
    Ok(dot(&v, &t))
}

/// Fills `similarity` for every pair. Failed items keep `None` and are listed
/// in the report.
pub fn score_pairs(
    manifest: &Manifest,
    provider: &dyn EmbeddingProvider,
) -> (Manifest, ScoreReport) {
    let n = manifest.len();
    let workers = std::thread::available_parallelism()
        .map_or(1, |p| p.get())
        .min(n.max(1));
    let chunk = n.div_ceil(workers.max(1)).max(1);
    let mut results: Vec<Option<Result<f64>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        for (c, slot) in results.chunks_mut(chunk).enumerate() {
            s.spawn(move || {
                for (j, r) in slot.iter_mut().enumerate() {
                    *r = Some(score_one(manifest, c * chunk + j, provider));
                }
            });
        }
    });

    let mut out = manifest.clone();
    let mut report = ScoreReport::default();
    for (pair, r) in out.pairs.iter_mut().zip(results) {
        match r.expect("every slot is filled") {
            Ok(s) => {
                pair.similarity = Some(s);
                report.scored += 1;
            }
            Err(e) => {
                pair.similarity = None;
                if !matches!(e, Error::Provider { .. }) {
                    log::warn!("scoring {} failed: {e}", pair.image_id);
                }
                report.failures.push((pair.image_id.clone(), e.to_string()));
            }
        }
    }
    out.provenance.push(Provenance::ScorePairs {
        provider: provider.id(),
        scored: report.scored,
        failures: report.failures.len(),
    });
    (out, report)
}

/// Number of survivors for a group of `n`; a tiny tolerance absorbs
/// floating error in `p * n`.
pub fn keep_count(p: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    ((p * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// Indices of the `keep` best entries of `scores` (ties to the lower index),
/// returned in ascending index order.
fn top_indices(scores: &[(usize, f64)], keep: usize) -> Vec<usize> {
    let mut order = scores.to_vec();
    order.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    let mut kept: Vec<usize> = order.into_iter().take(keep).map(|(i, _)| i).collect();
    kept.sort_unstable();
    kept
}

fn already_applied(manifest: &Manifest, p: f64, mode: FilterMode) -> bool {
    for step in manifest.provenance.iter().rev() {
        match step {
            Provenance::FilterTopP { p: q, mode: m } if *q == p && *m == mode => return true,
            Provenance::FilterTopP { .. } => continue,
            _ => return false,
        }
    }
    false
}

/// Keeps the top `p` fraction of pairs by similarity, preserving order.
/// Re-applying a filter already recorded since the last non-filter step is a
/// no-op.
pub fn filter_top_p(manifest: &Manifest, p: f64, mode: FilterMode) -> Result<Manifest> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Filter(format!("p must lie in (0, 1], got {p}")));
    }
    let mut scores = Vec::with_capacity(manifest.len());
    for (i, pair) in manifest.pairs.iter().enumerate() {
        match pair.similarity {
            Some(s) if s.is_finite() => scores.push((i, s)),
            _ => {
                return Err(Error::Filter(format!(
                    "pair {:?} has no similarity score",
                    pair.image_id
                )))
            }
        }
    }
    if already_applied(manifest, p, mode) {
        return Ok(manifest.clone());
    }

    let mut kept = match mode {
        FilterMode::Global => top_indices(&scores, keep_count(p, scores.len())),
        FilterMode::PerImage => {
            let mut out = Vec::new();
            for members in group_by_image(manifest).values() {
                let group: Vec<(usize, f64)> = members.iter().map(|&i| scores[i]).collect();
                out.extend(top_indices(&group, keep_count(p, group.len())));
            }
            out
        }
        FilterMode::ImageLevel => {
            let groups: Vec<Vec<usize>> = group_by_image(manifest).into_values().collect();
            let image_scores: Vec<(usize, f64)> = groups
                .iter()
                .enumerate()
                .map(|(g, m)| {
                    (
                        g,
                        m.iter().map(|&i| scores[i].1).sum::<f64>() / m.len() as f64,
                    )
                })
                .collect();
            top_indices(&image_scores, keep_count(p, groups.len()))
                .into_iter()
                .flat_map(|g| groups[g].clone())
                .collect()
        }
    };
    kept.sort_unstable();

    let mut out = manifest.clone();
    out.pairs = kept
        .into_iter()
        .map(|i| manifest.pairs[i].clone())
        .collect();
    out.provenance.push(Provenance::FilterTopP { p, mode });
    Ok(out)
}

/// Pair indices grouped by image, keyed by first occurrence.
fn group_by_image(manifest: &Manifest) -> BTreeMap<usize, Vec<usize>> {
    let mut first: std::collections::HashMap<String, usize> = Default::default();
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, pair) in manifest.pairs.iter().enumerate() {
        let key = pair.image.key();
        let g = *first.entry(key).or_insert(i);
        groups.entry(g).or_default().push(i);
    }
    groups
}

/// Re-applies every filter step recorded in `filtered`'s provenance, after the
/// provenance that `original` already carries, to `original`.
pub fn replay_filters(original: &Manifest, filtered: &Manifest) -> Result<Manifest> {
    let mut current = original.clone();
    for step in filtered.provenance.iter().skip(original.provenance.len()) {
        if let Provenance::FilterTopP { p, mode } = step {
            current = filter_top_p(&current, *p, *mode)?;
        }
    }
    Ok(current)
}
