//! JSON-lines artifacts with an optional provenance header line.
//!
//! When present, the first line is `{"header": {"provenance": [...],
//! "config": {...}}}`; every other line is one record.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One processing step that produced or transformed an artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum Provenance {
    Source {
        path: String,
    },
    Synthetic {
        n: usize,
        seed: u64,
    },
    ScorePairs {
        provider: String,
        scored: usize,
        failures: usize,
    },
    FilterTopP {
        p: f64,
        mode: crate::data::filter::FilterMode,
    },
    BuildCorpus {
        source: String,
        captions: usize,
    },
    Embed {
        provider: String,
    },
    SelectConcepts {
        provider: String,
        k: usize,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Header {
    #[serde(default)]
    pub provenance: Vec<Provenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: Header,
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(Option<Header>, Vec<T>)> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let reader = BufReader::new(File::open(path)?);
    let mut header = None;
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 {
            if let Ok(h) = serde_json::from_str::<HeaderLine>(&line) {
                header = Some(h.header);
                continue;
            }
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Record(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok((header, out))
}

/// Writes through a temporary file renamed into place.
pub fn write_jsonl<T: Serialize>(
    path: &Path,
    header: Option<&Header>,
    records: &[T],
) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        if let Some(h) = header {
            serde_json::to_writer(&mut w, &HeaderLine { header: h.clone() })?;
            w.write_all(b"\n")?;
        }
        for r in records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}
