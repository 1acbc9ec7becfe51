//! Dataset manifest: a JSON index of cloud files, optional label files,
//! train/val/test splits, per-entry normalization records, and the pose
//! bank seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pointkey_core::data::{NormRecord, RotationBank};
use pointkey_core::geometry::PointCloud;
use pointkey_core::metrics::SemanticLabels;

use crate::error::{CliError, Result};
use crate::formats;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub category: String,
    pub cloud: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    pub normalization: NormRecordJson,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct NormRecordJson {
    pub centroid: [f64; 3],
    pub scale: f64,
}

impl From<NormRecord> for NormRecordJson {
    fn from(r: NormRecord) -> Self {
        Self {
            centroid: r.centroid,
            scale: r.scale,
        }
    }
}

impl From<NormRecordJson> for NormRecord {
    fn from(r: NormRecordJson) -> Self {
        Self {
            centroid: r.centroid,
            scale: r.scale,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct BankSpec {
    pub seed: u64,
    pub poses_per_object: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub n_points: usize,
    pub entries: Vec<ManifestEntry>,
    pub splits: SplitIds,
    pub rotation_bank: BankSpec,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl DatasetManifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        let json = serde_json::to_string_pretty(self)? + "\n";
        fs::write(dir.join(MANIFEST_NAME), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            if seen.insert(e.id.clone(), i).is_some() {
                return Err(CliError::Data(format!("duplicate id '{}'", e.id)));
            }
        }
        let mut in_split = BTreeMap::new();
        for (name, ids) in [
            ("train", &self.splits.train),
            ("val", &self.splits.val),
            ("test", &self.splits.test),
        ] {
            for id in ids {
                if !seen.contains_key(id) {
                    return Err(CliError::Data(format!(
                        "split '{name}' references unknown id '{id}'"
                    )));
                }
                if let Some(other) = in_split.insert(id.clone(), name) {
                    return Err(CliError::Data(format!(
                        "id '{id}' appears in splits '{other}' and '{name}'"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A manifest with every cloud (and label file) loaded into memory.
pub struct LoadedDataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub clouds: Vec<PointCloud>,
    pub labels: Vec<Option<SemanticLabels>>,
    pub index_by_id: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(CliError::Config(format!("unknown split '{other}'"))),
        }
    }
}

impl LoadedDataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        let mut clouds = Vec::with_capacity(manifest.entries.len());
        let mut labels = Vec::with_capacity(manifest.entries.len());
        let mut index_by_id = BTreeMap::new();
        for (i, entry) in manifest.entries.iter().enumerate() {
            let cloud = formats::read_cloud(&dir.join(&entry.cloud))?;
            let lab = match &entry.labels {
                Some(rel) => Some(formats::read_labels(&dir.join(rel), cloud.n())?),
                None => None,
            };
            index_by_id.insert(entry.id.clone(), i);
            clouds.push(cloud);
            labels.push(lab);
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            clouds,
            labels,
            index_by_id,
        })
    }

    pub fn bank(&self) -> Result<RotationBank> {
        RotationBank::generate(
            self.manifest.rotation_bank.seed,
            self.manifest.entries.len(),
            self.manifest.rotation_bank.poses_per_object,
        )
        .map_err(CliError::from)
    }

    pub fn split_indices(&self, split: Split) -> Result<Vec<usize>> {
        let ids = match split {
            Split::Train => &self.manifest.splits.train,
            Split::Val => &self.manifest.splits.val,
            Split::Test => &self.manifest.splits.test,
        };
        ids.iter()
            .map(|id| {
                self.index_by_id
                    .get(id)
                    .copied()
                    .ok_or_else(|| CliError::Data(format!("unknown id '{id}'")))
            })
            .collect()
    }

    pub fn category(&self, index: usize) -> &str {
        &self.manifest.entries[index].category
    }

    pub fn id(&self, index: usize) -> &str {
        &self.manifest.entries[index].id
    }
}
