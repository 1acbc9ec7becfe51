//! Robustness sweep: metrics over a grid of noise scales and
//! farthest-point-sampling decimation ratios.
//!
//! Per cell, the canonical cloud is decimated once (so every rotated copy
//! sees the same subset) and Gaussian noise is drawn per copy. Inclusivity
//! and coverage are reported against the original full-resolution cloud
//! (does the model still find the true surface?) and inclusivity also
//! against the perturbed input it actually saw.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use pointkey_core::geometry::{apply_rotation, fps, gaussian_perturb, PointCloud};
use pointkey_core::metrics::{self, coverage, inclusivity};
use pointkey_core::model::{forward_eval, NetworkParams};
use pointkey_core::rng::SeedStream;

use crate::config::{version_stamp, RunConfig};
use crate::error::{CliError, Result};
use crate::manifest::LoadedDataset;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PerturbRow {
    pub noise: f64,
    pub ratio: usize,
    pub n_points: usize,
    pub inclusivity: f64,
    pub inclusivity_vs_input: f64,
    pub coverage: f64,
    pub me_mu: f64,
    pub me_sigma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PerturbReport {
    pub version: String,
    pub split: String,
    pub config: RunConfig,
    pub rows: Vec<PerturbRow>,
}

const PERTURB_STREAM_TAG: u64 = 0x70657274;

fn cell_stream(seed: u64, cell: usize, object: usize, copy: usize) -> SeedStream {
    SeedStream::derive(
        seed ^ PERTURB_STREAM_TAG,
        &[cell as u64, object as u64, copy as u64],
    )
}

pub fn perturb_eval(
    params: &NetworkParams,
    dataset: &LoadedDataset,
    split: &[usize],
    split_name: &str,
    run_cfg: &RunConfig,
) -> Result<PerturbReport> {
    if split.is_empty() {
        return Err(CliError::Data(format!("split '{split_name}' is empty")));
    }
    let metric_cfg = run_cfg.metric.resolve();
    let me_copies = run_cfg.metric.me_copies.max(2);
    let bank = dataset.bank()?;
    let seed = run_cfg.data.seed;

    let mut rows = Vec::new();
    let mut cell = 0usize;
    for &sigma in &run_cfg.data.noise_scales {
        for &ratio in &run_cfg.data.ds_ratios {
            if ratio == 0 {
                return Err(CliError::Config("ratio must be at least 1".into()));
            }
            let per_object: Vec<(f64, f64, f64, Vec<f64>)> = split
                .par_iter()
                .enumerate()
                .map(|(oi, &index)| {
                    let original = &dataset.clouds[index];
                    let n = original.n();
                    if n / ratio < 4 {
                        return Err(CliError::Data(format!(
                            "ratio {ratio} leaves fewer than 4 of {n} points"
                        )));
                    }
                    let decimated = if ratio == 1 {
                        original.clone()
                    } else {
                        fps(original, n / ratio, 0)?
                    };

                    // canonical-pose variant for inclusivity and coverage
                    let mut stream = cell_stream(seed, cell, oi, 0);
                    let input: PointCloud = gaussian_perturb(&decimated, sigma, &mut stream)?;
                    let out = forward_eval(params, &input)?;
                    let inc = inclusivity(&out.keypoints, original, metric_cfg.tau2);
                    let inc_input = inclusivity(&out.keypoints, &input, metric_cfg.tau2);
                    let cov = coverage(&out.keypoints, original, &metric_cfg)?;

                    // rotated copies for the matching error
                    let rotations = &bank.rotations(index)?[..me_copies];
                    let mut predictions = Vec::with_capacity(me_copies);
                    for (ci, r) in rotations.iter().enumerate() {
                        let rotated = apply_rotation(&decimated, r);
                        let mut stream = cell_stream(seed, cell, oi, ci + 1);
                        let noisy = gaussian_perturb(&rotated, sigma, &mut stream)?;
                        predictions.push(forward_eval(params, &noisy)?.keypoints);
                    }
                    let per_index = metrics::matching_error_object(&predictions, rotations)?;
                    Ok((inc, inc_input, cov, per_index))
                })
                .collect::<Result<Vec<_>>>()?;

            let n = per_object.len() as f64;
            let me = metrics::matching_error(
                &per_object.iter().map(|r| r.3.clone()).collect::<Vec<_>>(),
            )?;
            rows.push(PerturbRow {
                noise: sigma,
                ratio,
                n_points: dataset.clouds[split[0]].n() / ratio,
                inclusivity: per_object.iter().map(|r| r.0).sum::<f64>() / n,
                inclusivity_vs_input: per_object.iter().map(|r| r.1).sum::<f64>() / n,
                coverage: per_object.iter().map(|r| r.2).sum::<f64>() / n,
                me_mu: me.mu,
                me_sigma: me.sigma,
            });
            cell += 1;
        }
    }
    Ok(PerturbReport {
        version: version_stamp().to_string(),
        split: split_name.to_string(),
        config: run_cfg.clone(),
        rows,
    })
}

pub fn write_report(report: &PerturbReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let json = serde_json::to_string_pretty(report)? + "\n";
    fs::write(out_dir.join("perturb.json"), json)?;
    let mut csv = String::from(
        "noise,ratio,n_points,inclusivity,inclusivity_vs_input,coverage,me_mu,me_sigma\n",
    );
    for r in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.noise,
            r.ratio,
            r.n_points,
            r.inclusivity,
            r.inclusivity_vs_input,
            r.coverage,
            r.me_mu,
            r.me_sigma
        ));
    }
    fs::write(out_dir.join("perturb.csv"), csv)?;
    Ok(())
}
