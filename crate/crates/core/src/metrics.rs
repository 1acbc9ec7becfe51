//! Evaluation metrics: inclusivity, coverage, semantic consistency (DAS),
//! and the pose-coherence matching error.

use alloc::vec::Vec;

use thiserror::Error;

use crate::geometry::{
    bbox_diagonal, dist3, nn_distance, GeometryError, KeypointSet, PointCloud, Rotation3,
};
use crate::math;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("cloud has zero bounding-box diagonal")]
    DegenerateCloud,
    #[error("labels cover {labels} points but the cloud has {points}")]
    LabelMismatch { labels: usize, points: usize },
    #[error("need at least {needed} instances, got {got}")]
    TooFewInstances { needed: usize, got: usize },
    #[error("keypoint counts differ across instances: {a} vs {b}")]
    KeypointCountMismatch { a: usize, b: usize },
}

/// Thresholds of the evaluation metrics.
///
/// `tau2` defaults to 0.1 (the headline-table threshold); 0.05 appears
/// elsewhere as an alternative, so reports carry both. `das_reference`
/// selects a fixed reference instance for DAS instead of the modal label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricConfig {
    pub tau2: f64,
    pub tau2_alt: f64,
    pub coverage_gate: f64,
    pub das_reference: Option<usize>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            tau2: 0.1,
            tau2_alt: 0.05,
            coverage_gate: 2.0,
            das_reference: None,
        }
    }
}

/// Per-point part labels of a cloud.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticLabels {
    labels: Vec<u32>,
}

impl SemanticLabels {
    pub fn new(labels: Vec<u32>) -> Result<Self, MetricError> {
        if labels.is_empty() {
            return Err(MetricError::LabelMismatch {
                labels: 0,
                points: 0,
            });
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }
}

/// Percentage of keypoints whose nearest cloud point is closer than tau2.
pub fn inclusivity(kp: &KeypointSet, c: &PointCloud, tau2: f64) -> f64 {
    let close = kp
        .points()
        .iter()
        .filter(|q| nn_distance(**q, c).0 < tau2)
        .count();
    100.0 * close as f64 / kp.k() as f64
}

/// Bounding-box-diagonal agreement, gated: zero when the keypoint diagonal
/// exceeds `gate` times the cloud diagonal.
pub fn coverage(kp: &KeypointSet, c: &PointCloud, cfg: &MetricConfig) -> Result<f64, MetricError> {
    let diag_c = bbox_diagonal(c);
    if diag_c <= 0.0 {
        return Err(MetricError::DegenerateCloud);
    }
    let diag_kp = bbox_diagonal(kp);
    if diag_kp <= cfg.coverage_gate * diag_c {
        Ok(100.0 * (1.0 - (diag_c - diag_kp).abs() / diag_c))
    } else {
        Ok(0.0)
    }
}

/// One instance of a category for the DAS computation: the cloud, its
/// per-point part labels, and the predicted keypoints.
#[derive(Debug, Clone)]
pub struct DasInstance<'a> {
    pub cloud: &'a PointCloud,
    pub labels: &'a SemanticLabels,
    pub keypoints: &'a KeypointSet,
}

/// Dual alignment score: maps every keypoint to the part label of its
/// nearest labeled point, takes the per-index reference label (modal over
/// instances, or a fixed reference instance), and scores the fraction of
/// (instance, index) assignments agreeing with the reference.
pub fn das(instances: &[DasInstance<'_>], cfg: &MetricConfig) -> Result<f64, MetricError> {
    if instances.len() < 2 {
        return Err(MetricError::TooFewInstances {
            needed: 2,
            got: instances.len(),
        });
    }
    let k = instances[0].keypoints.k();
    for inst in instances {
        if inst.keypoints.k() != k {
            return Err(MetricError::KeypointCountMismatch {
                a: k,
                b: inst.keypoints.k(),
            });
        }
        if inst.labels.len() != inst.cloud.n() {
            return Err(MetricError::LabelMismatch {
                labels: inst.labels.len(),
                points: inst.cloud.n(),
            });
        }
    }
    // assigned[i][j]: part label of keypoint j in instance i
    let assigned: Vec<Vec<u32>> = instances
        .iter()
        .map(|inst| {
            inst.keypoints
                .points()
                .iter()
                .map(|q| inst.labels.labels()[nn_distance(*q, inst.cloud).1])
                .collect()
        })
        .collect();
    let mut agree = 0usize;
    for j in 0..k {
        let reference = match cfg.das_reference {
            Some(r) => {
                if r >= instances.len() {
                    return Err(MetricError::TooFewInstances {
                        needed: r + 1,
                        got: instances.len(),
                    });
                }
                assigned[r][j]
            }
            None => modal_label(assigned.iter().map(|row| row[j])),
        };
        agree += assigned.iter().filter(|row| row[j] == reference).count();
    }
    Ok(100.0 * agree as f64 / (instances.len() * k) as f64)
}

/// Most frequent label; ties break toward the smallest label value.
fn modal_label(labels: impl Iterator<Item = u32>) -> u32 {
    let mut counts: Vec<(u32, usize)> = Vec::new();
    for l in labels {
        match counts.iter_mut().find(|(v, _)| *v == l) {
            Some((_, c)) => *c += 1,
            None => counts.push((l, 1)),
        }
    }
    counts
        .iter()
        .max_by(|(la, ca), (lb, cb)| ca.cmp(cb).then(lb.cmp(la)))
        .expect("non-empty")
        .0
}

/// Mean/σ of the per-index matching error, plus per-index means.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingErrorStats {
    pub mu: f64,
    pub sigma: f64,
    pub per_index: Vec<f64>,
    pub n_objects: usize,
}

/// Matching error of one object: keypoints predicted on several rotated
/// copies are de-rotated to the canonical frame; the per-index error is the
/// mean pairwise distance across copies at that index.
pub fn matching_error_object(
    predictions: &[KeypointSet],
    rotations: &[Rotation3],
) -> Result<Vec<f64>, MetricError> {
    if predictions.len() < 2 {
        return Err(MetricError::TooFewInstances {
            needed: 2,
            got: predictions.len(),
        });
    }
    let k = predictions[0].k();
    for p in predictions {
        if p.k() != k {
            return Err(MetricError::KeypointCountMismatch { a: k, b: p.k() });
        }
    }
    let canonical: Vec<Vec<[f64; 3]>> = predictions
        .iter()
        .zip(rotations)
        .map(|(kp, r)| {
            let inv = r.transpose();
            kp.points().iter().map(|p| inv.apply(*p)).collect()
        })
        .collect();
    let copies = canonical.len();
    let pairs = copies * (copies - 1) / 2;
    let mut per_index = Vec::with_capacity(k);
    for j in 0..k {
        let mut total = 0.0;
        for a in 0..copies {
            for b in a + 1..copies {
                total += dist3(canonical[a][j], canonical[b][j]);
            }
        }
        per_index.push(total / pairs as f64);
    }
    Ok(per_index)
}

/// Aggregates per-object matching errors over a category: `mu` and `sigma`
/// are the population mean and standard deviation over all
/// (object, index) errors; `per_index` averages over objects.
pub fn matching_error(per_object: &[Vec<f64>]) -> Result<MatchingErrorStats, MetricError> {
    if per_object.is_empty() {
        return Err(MetricError::TooFewInstances { needed: 1, got: 0 });
    }
    let k = per_object[0].len();
    for o in per_object {
        if o.len() != k {
            return Err(MetricError::KeypointCountMismatch { a: k, b: o.len() });
        }
    }
    let all: Vec<f64> = per_object.iter().flatten().copied().collect();
    let n = all.len() as f64;
    let mu = math::kahan_sum(all.iter().copied()) / n;
    let sigma = math::sqrt(math::kahan_sum(all.iter().map(|e| (e - mu) * (e - mu))) / n);
    let mut per_index = alloc::vec![0.0; k];
    for o in per_object {
        for (slot, e) in per_index.iter_mut().zip(o) {
            *slot += e;
        }
    }
    for slot in per_index.iter_mut() {
        *slot /= per_object.len() as f64;
    }
    Ok(MatchingErrorStats {
        mu,
        sigma,
        per_index,
        n_objects: per_object.len(),
    })
}
