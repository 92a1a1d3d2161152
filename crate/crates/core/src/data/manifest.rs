use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::features::{read_features, read_header};
use super::subsample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub name: String,
    pub dim: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEntry {
    pub id: String,
    /// Modality name to feature file path, relative to the manifest.
    pub features: BTreeMap<String, String>,
    pub captions: Vec<String>,
    /// Absent means `train`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl VideoEntry {
    pub fn split(&self) -> Split {
        self.split.unwrap_or_default()
    }
}

/// The manifest JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub modalities: Vec<ModalitySpec>,
    pub videos: Vec<VideoEntry>,
}

/// A validated manifest together with the directory its paths resolve
/// against.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub doc: ManifestDoc,
    pub base_dir: PathBuf,
}

/// One video's features (per modality, in manifest order) and captions.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub features: Vec<Tensor>,
    pub captions: Vec<String>,
    pub split: Split,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let doc: ManifestDoc = serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = Manifest { doc, base_dir };
    manifest.validate()?;
    Ok(manifest)
}

impl Manifest {
    pub fn modalities(&self) -> &[ModalitySpec] {
        &self.doc.modalities
    }

    pub fn videos(&self) -> &[VideoEntry] {
        &self.doc.videos
    }

    pub fn dims(&self) -> Vec<usize> {
        self.doc.modalities.iter().map(|m| m.dim).collect()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    /// Checks the schema, that every file exists, and that file widths match
    /// the declared dims.
    pub fn validate(&self) -> Result<()> {
        let doc = &self.doc;
        if doc.modalities.is_empty() {
            return Err(Error::Manifest("no modalities declared".into()));
        }
        let mut names = HashSet::new();
        for m in &doc.modalities {
            if m.dim == 0 {
                return Err(Error::Manifest(format!("modality {:?} has dim 0", m.name)));
            }
            if !names.insert(m.name.as_str()) {
                return Err(Error::Manifest(format!("duplicate modality {:?}", m.name)));
            }
        }
        let mut ids = HashSet::new();
        for v in &doc.videos {
            if !ids.insert(v.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate video id {:?}", v.id)));
            }
            if v.captions.is_empty() || v.captions.iter().any(|c| c.trim().is_empty()) {
                return Err(Error::Manifest(format!(
                    "video {:?} needs non-empty captions",
                    v.id
                )));
            }
            if let Some(name) = v.features.keys().find(|k| !names.contains(k.as_str())) {
                return Err(Error::UnknownModality(name.clone()));
            }
            for m in &doc.modalities {
                let rel = v.features.get(&m.name).ok_or_else(|| {
                    Error::Manifest(format!("video {:?} lacks modality {:?}", v.id, m.name))
                })?;
                let (rows, dim) = read_header(self.resolve(rel))?;
                if dim != m.dim {
                    return Err(Error::Dimension {
                        video: v.id.clone(),
                        modality: m.name.clone(),
                        expected: m.dim,
                        got: dim,
                    });
                }
                if rows == 0 {
                    return Err(Error::Manifest(format!(
                        "video {:?}, modality {:?}: no frames",
                        v.id, m.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&self.doc)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    /// Reads one video's features, subsampled to at most
    /// [`super::MAX_FRAMES`] rows.
    pub fn load_video(&self, entry: &VideoEntry) -> Result<VideoRecord> {
        let features = self
            .doc
            .modalities
            .iter()
            .map(|m| {
                let t = read_features(self.resolve(&entry.features[&m.name]))?;
                if t.shape()[1] != m.dim {
                    return Err(Error::Dimension {
                        video: entry.id.clone(),
                        modality: m.name.clone(),
                        expected: m.dim,
                        got: t.shape()[1],
                    });
                }
                Ok(subsample(&t, super::MAX_FRAMES))
            })
            .collect::<Result<_>>()?;
        Ok(VideoRecord {
            id: entry.id.clone(),
            features,
            captions: entry.captions.clone(),
            split: entry.split(),
        })
    }

    pub fn load_all(&self) -> Result<Vec<VideoRecord>> {
        self.doc.videos.iter().map(|v| self.load_video(v)).collect()
    }
}
