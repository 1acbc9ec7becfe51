//! Writes a synthetic dataset to disk: PCF clouds, label files, and the
//! manifest with splits and the pose-bank seed.

use std::fs;
use std::path::Path;

use pointkey_core::data::split_indices;
use pointkey_core::synth::synth_dataset;

use crate::config::RunConfig;
use crate::error::Result;
use crate::formats;
use crate::manifest::{BankSpec, DatasetManifest, ManifestEntry, SplitIds};

pub fn generate_dataset(out_dir: &Path, cfg: &RunConfig) -> Result<DatasetManifest> {
    let data = &cfg.data;
    let shapes = synth_dataset(data.count, data.n_points, data.seed);
    fs::create_dir_all(out_dir.join("clouds"))?;
    fs::create_dir_all(out_dir.join("labels"))?;

    let mut entries = Vec::with_capacity(shapes.len());
    for (i, shape) in shapes.iter().enumerate() {
        let id = format!("{}_{i:04}", shape.family.name());
        let cloud_rel = format!("clouds/{id}.pcf");
        let labels_rel = format!("labels/{id}.labels");
        formats::write_pcf(&out_dir.join(&cloud_rel), &shape.cloud)?;
        formats::write_labels(&out_dir.join(&labels_rel), &shape.labels)?;
        entries.push(ManifestEntry {
            id,
            category: shape.family.name().to_string(),
            cloud: cloud_rel,
            labels: Some(labels_rel),
            normalization: shape.normalization.into(),
        });
    }

    let splits = split_indices(entries.len(), data.val_fraction, data.test_fraction, data.seed);
    let manifest = DatasetManifest {
        n_points: data.n_points,
        entries: entries.clone(),
        splits: SplitIds {
            train: splits.train.iter().map(|&i| entries[i].id.clone()).collect(),
            val: splits.val.iter().map(|&i| entries[i].id.clone()).collect(),
            test: splits.test.iter().map(|&i| entries[i].id.clone()).collect(),
        },
        rotation_bank: BankSpec {
            seed: data.seed,
            poses_per_object: data.poses_per_object,
        },
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}
