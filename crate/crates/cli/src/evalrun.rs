//! Metric evaluation over a dataset split: inclusivity at both thresholds,
//! coverage, per-category semantic consistency, pose-coherence matching
//! error, and the inclusivity-versus-threshold sweep.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use pointkey_core::geometry::{apply_rotation, KeypointSet};
use pointkey_core::metrics::{self, coverage, das, inclusivity, DasInstance};
use pointkey_core::model::{forward_eval, NetworkParams};

use crate::config::{version_stamp, RunConfig};
use crate::error::{CliError, Result};
use crate::manifest::LoadedDataset;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CategoryRow {
    pub category: String,
    pub n_instances: usize,
    pub inclusivity: f64,
    pub inclusivity_alt: f64,
    pub coverage: f64,
    pub das: Option<f64>,
    pub me_mu: Option<f64>,
    pub me_sigma: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Tau2Point {
    pub tau2: f64,
    pub category: String,
    pub inclusivity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub version: String,
    pub split: String,
    pub config: RunConfig,
    pub categories: Vec<CategoryRow>,
    pub average: CategoryRow,
    pub tau2_curve: Vec<Tau2Point>,
}

struct InstanceEval {
    index: usize,
    category: String,
    keypoints: KeypointSet,
    per_index_me: Option<Vec<f64>>,
}

/// Predicts keypoints for every split object on the canonical cloud and,
/// when `me_copies >= 2`, on that many bank poses for the matching error.
fn evaluate_instances(
    params: &NetworkParams,
    dataset: &LoadedDataset,
    split: &[usize],
    me_copies: usize,
) -> Result<Vec<InstanceEval>> {
    let bank = dataset.bank()?;
    if me_copies > dataset.manifest.rotation_bank.poses_per_object {
        return Err(CliError::Config(format!(
            "me_copies {me_copies} exceeds the bank's {} poses",
            dataset.manifest.rotation_bank.poses_per_object
        )));
    }
    split
        .par_iter()
        .map(|&index| {
            let cloud = &dataset.clouds[index];
            let canonical = forward_eval(params, cloud)?;
            let per_index_me = if me_copies >= 2 {
                let rotations = &bank.rotations(index)?[..me_copies];
                let mut predictions = Vec::with_capacity(me_copies);
                for r in rotations {
                    let rotated = apply_rotation(cloud, r);
                    predictions.push(forward_eval(params, &rotated)?.keypoints);
                }
                Some(metrics::matching_error_object(&predictions, rotations)?)
            } else {
                None
            };
            Ok(InstanceEval {
                index,
                category: dataset.category(index).to_string(),
                keypoints: canonical.keypoints,
                per_index_me,
            })
        })
        .collect()
}

fn aggregate(
    dataset: &LoadedDataset,
    instances: &[InstanceEval],
    run_cfg: &RunConfig,
    split_name: &str,
) -> Result<EvalReport> {
    let metric_cfg = run_cfg.metric.resolve();
    let mut by_category: BTreeMap<String, Vec<&InstanceEval>> = BTreeMap::new();
    for inst in instances {
        by_category
            .entry(inst.category.clone())
            .or_default()
            .push(inst);
    }

    let mut categories = Vec::new();
    let mut tau2_curve = Vec::new();
    for (category, insts) in &by_category {
        let mut inc = 0.0;
        let mut inc_alt = 0.0;
        let mut cov = 0.0;
        for inst in insts {
            let cloud = &dataset.clouds[inst.index];
            inc += inclusivity(&inst.keypoints, cloud, metric_cfg.tau2);
            inc_alt += inclusivity(&inst.keypoints, cloud, metric_cfg.tau2_alt);
            cov += coverage(&inst.keypoints, cloud, &metric_cfg)?;
        }
        let n = insts.len() as f64;
        inc /= n;
        inc_alt /= n;
        cov /= n;

        let labeled: Vec<DasInstance> = insts
            .iter()
            .filter_map(|inst| {
                dataset.labels[inst.index].as_ref().map(|labels| DasInstance {
                    cloud: &dataset.clouds[inst.index],
                    labels,
                    keypoints: &inst.keypoints,
                })
            })
            .collect();
        let das_value = if labeled.len() >= 2 {
            Some(das(&labeled, &metric_cfg)?)
        } else {
            None
        };

        let per_object: Vec<Vec<f64>> = insts
            .iter()
            .filter_map(|i| i.per_index_me.clone())
            .collect();
        let (me_mu, me_sigma) = if per_object.is_empty() {
            (None, None)
        } else {
            let stats = metrics::matching_error(&per_object)?;
            (Some(stats.mu), Some(stats.sigma))
        };

        for tau2 in &run_cfg.metric.tau2_sweep {
            let mean = insts
                .iter()
                .map(|inst| inclusivity(&inst.keypoints, &dataset.clouds[inst.index], *tau2))
                .sum::<f64>()
                / n;
            tau2_curve.push(Tau2Point {
                tau2: *tau2,
                category: category.clone(),
                inclusivity: mean,
            });
        }

        categories.push(CategoryRow {
            category: category.clone(),
            n_instances: insts.len(),
            inclusivity: inc,
            inclusivity_alt: inc_alt,
            coverage: cov,
            das: das_value,
            me_mu,
            me_sigma,
        });
    }

    let average = average_row(&categories);
    Ok(EvalReport {
        version: version_stamp().to_string(),
        split: split_name.to_string(),
        config: run_cfg.clone(),
        categories,
        average,
        tau2_curve,
    })
}

fn average_row(categories: &[CategoryRow]) -> CategoryRow {
    let n = categories.len().max(1) as f64;
    let mean_opt = |f: &dyn Fn(&CategoryRow) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = categories.iter().filter_map(f).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    CategoryRow {
        category: "average".to_string(),
        n_instances: categories.iter().map(|c| c.n_instances).sum(),
        inclusivity: categories.iter().map(|c| c.inclusivity).sum::<f64>() / n,
        inclusivity_alt: categories.iter().map(|c| c.inclusivity_alt).sum::<f64>() / n,
        coverage: categories.iter().map(|c| c.coverage).sum::<f64>() / n,
        das: mean_opt(&|c| c.das),
        me_mu: mean_opt(&|c| c.me_mu),
        me_sigma: mean_opt(&|c| c.me_sigma),
    }
}

/// Evaluates a trained model on the given split.
pub fn evaluate_model(
    params: &NetworkParams,
    dataset: &LoadedDataset,
    split: &[usize],
    split_name: &str,
    run_cfg: &RunConfig,
) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(CliError::Data(format!("split '{split_name}' is empty")));
    }
    let instances = evaluate_instances(params, dataset, split, run_cfg.metric.me_copies)?;
    aggregate(dataset, &instances, run_cfg, split_name)
}

/// Evaluates externally produced keypoints (id -> keypoint set); the
/// matching error needs per-pose predictions and is skipped.
pub fn evaluate_keypoint_sets(
    predictions: &BTreeMap<String, KeypointSet>,
    dataset: &LoadedDataset,
    split: &[usize],
    split_name: &str,
    run_cfg: &RunConfig,
) -> Result<EvalReport> {
    let instances = split
        .iter()
        .map(|&index| {
            let id = dataset.id(index);
            let keypoints = predictions
                .get(id)
                .cloned()
                .ok_or_else(|| CliError::Data(format!("no keypoints provided for id '{id}'")))?;
            Ok(InstanceEval {
                index,
                category: dataset.category(index).to_string(),
                keypoints,
                per_index_me: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(dataset, &instances, run_cfg, split_name)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_report(report: &EvalReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let json = serde_json::to_string_pretty(report)? + "\n";
    fs::write(out_dir.join("report.json"), json)?;

    let mut csv = String::from(
        "category,n_instances,inclusivity,inclusivity_alt,coverage,das,me_mu,me_sigma\n",
    );
    for row in report.categories.iter().chain([&report.average]) {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.category,
            row.n_instances,
            row.inclusivity,
            row.inclusivity_alt,
            row.coverage,
            fmt_opt(row.das),
            fmt_opt(row.me_mu),
            fmt_opt(row.me_sigma),
        ));
    }
    fs::write(out_dir.join("report.csv"), csv)?;

    let mut sweep = String::from("tau2,category,inclusivity\n");
    for p in &report.tau2_curve {
        sweep.push_str(&format!("{},{},{}\n", p.tau2, p.category, p.inclusivity));
    }
    fs::write(out_dir.join("inclusivity_vs_tau2.csv"), sweep)?;
    Ok(())
}

/// Writes predicted keypoints for the split as CSV rows (id, index, x, y, z).
pub fn write_inference_csv(
    params: &NetworkParams,
    dataset: &LoadedDataset,
    split: &[usize],
    path: &Path,
) -> Result<usize> {
    let rows: Vec<(String, KeypointSet)> = split
        .par_iter()
        .map(|&index| {
            let out = forward_eval(params, &dataset.clouds[index])?;
            Ok((dataset.id(index).to_string(), out.keypoints))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut csv = String::from("id,index,x,y,z\n");
    let mut count = 0usize;
    for (id, kps) in &rows {
        for (k, p) in kps.points().iter().enumerate() {
            csv.push_str(&format!("{id},{k},{},{},{}\n", p[0], p[1], p[2]));
            count += 1;
        }
    }
    fs::write(path, csv)?;
    Ok(count)
}

/// Parses a keypoints CSV produced by [`write_inference_csv`].
pub fn read_keypoints_csv(path: &Path) -> Result<BTreeMap<String, KeypointSet>> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut grouped: BTreeMap<String, Vec<(usize, [f64; 3])>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(CliError::Data(format!(
                "{}:{}: expected 5 fields, found {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let parse = |f: &str| -> Result<f64> {
            f.parse()
                .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))
        };
        let index: usize = fields[1].parse().map_err(|e| {
            CliError::Data(format!("{}:{}: bad index: {e}", path.display(), lineno + 1))
        })?;
        grouped.entry(fields[0].to_string()).or_default().push((
            index,
            [parse(fields[2])?, parse(fields[3])?, parse(fields[4])?],
        ));
    }
    let mut out = BTreeMap::new();
    for (id, mut pts) in grouped {
        pts.sort_by_key(|(i, _)| *i);
        for (want, (got, _)) in pts.iter().enumerate() {
            if want != *got {
                return Err(CliError::Data(format!(
                    "{}: id '{id}' is missing keypoint index {want}",
                    path.display()
                )));
            }
        }
        let kp = KeypointSet::new(pts.into_iter().map(|(_, p)| p).collect())
            .map_err(|e| CliError::Data(e.to_string()))?;
        out.insert(id, kp);
    }
    Ok(out)
}
