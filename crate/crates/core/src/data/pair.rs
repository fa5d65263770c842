use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::image::ImageTensor;
use crate::artifact::{read_jsonl, write_jsonl, Header, Provenance};
use crate::{Error, Result};

/// Image stored as a file path (relative to the manifest) or inline pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageRef {
    Path(String),
    Inline(ImageTensor),
}

impl ImageRef {
    /// Identity of the underlying image: the path, or a digest of the pixels.
    pub fn key(&self) -> String {
        match self {
            ImageRef::Path(p) => p.clone(),
            ImageRef::Inline(img) => {
                let digest = Sha256::digest(img.bytes());
                format!("inline:{digest:x}")
            }
        }
    }

    pub fn load(&self, base_dir: &Path) -> Result<ImageTensor> {
        match self {
            ImageRef::Inline(img) => Ok(img.clone()),
            ImageRef::Path(p) => {
                let path = base_dir.join(p);
                if !path.exists() {
                    return Err(Error::MissingInput(path));
                }
                ImageTensor::load(&path)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTextPair {
    pub image_id: String,
    pub image: ImageRef,
    pub caption: String,
    pub source: String,
    pub similarity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub pairs: Vec<ImageTextPair>,
    pub provenance: Vec<Provenance>,
    /// Run configuration echoed into the header on write.
    pub config: Option<serde_json::Value>,
    /// Directory that relative image paths resolve against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(pairs: Vec<ImageTextPair>, provenance: Vec<Provenance>) -> Self {
        Self {
            pairs,
            provenance,
            config: None,
            base_dir: PathBuf::from("."),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for p in &self.pairs {
            if !seen.insert(p.image_id.as_str()) {
                return Err(Error::Record(format!(
                    "duplicate image_id {:?}",
                    p.image_id
                )));
            }
            if p.caption.trim().is_empty() {
                return Err(Error::Record(format!("empty caption for {:?}", p.image_id)));
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (header, pairs) = read_jsonl::<ImageTextPair>(path)?;
        let header = header.unwrap_or_default();
        let m = Self {
            pairs,
            provenance: header.provenance,
            config: header.config,
            base_dir: path
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from(".")),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = Header {
            provenance: self.provenance.clone(),
            config: self.config.clone(),
        };
        write_jsonl(path, Some(&header), &self.pairs)
    }

    pub fn load_image(&self, index: usize) -> Result<ImageTensor> {
        self.pairs[index].image.load(&self.base_dir)
    }

    /// Saves inline images as PNGs under `dir` and points the records at them,
    /// relative to `manifest_dir`.
    pub fn externalize_images(&mut self, dir: &Path, manifest_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for p in &mut self.pairs {
            if let ImageRef::Inline(img) = &p.image {
                let file = dir.join(format!("{}.png", p.image_id));
                img.save(&file)?;
                let rel = file.strip_prefix(manifest_dir).unwrap_or(&file);
                p.image = ImageRef::Path(rel.to_string_lossy().into_owned());
            }
        }
        self.base_dir = manifest_dir.to_path_buf();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::generate_synthetic_dataset;

    #[test]
    fn jsonl_round_trip_preserves_order_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut m = generate_synthetic_dataset(5, 1).unwrap();
        m.pairs[2].similarity = Some(0.25);
        m.write(&path).unwrap();
        let back = Manifest::read(&path).unwrap();
        assert_eq!(back.pairs, m.pairs);
        assert_eq!(back.provenance, m.provenance);
    }

    #[test]
    fn externalized_images_load_identically() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = generate_synthetic_dataset(3, 2).unwrap();
        let originals: Vec<_> = (0..3).map(|i| m.load_image(i).unwrap()).collect();
        m.externalize_images(&dir.path().join("images"), dir.path())
            .unwrap();
        let path = dir.path().join("m.jsonl");
        m.write(&path).unwrap();
        let back = Manifest::read(&path).unwrap();
        assert!(matches!(back.pairs[0].image, ImageRef::Path(_)));
        for (i, img) in originals.iter().enumerate() {
            assert_eq!(&back.load_image(i).unwrap(), img);
        }
    }

    #[test]
    fn rejects_duplicates_and_blank_captions() {
        let mut m = generate_synthetic_dataset(3, 0).unwrap();
        m.pairs[1].image_id = m.pairs[0].image_id.clone();
        assert!(m.validate().is_err());
        let mut m = generate_synthetic_dataset(3, 0).unwrap();
        m.pairs[1].caption = "  ".into();
        assert!(m.validate().is_err());
    }
}
