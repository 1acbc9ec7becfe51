//! Training objective terms, each as a pure scalar function of keypoints.
//!
//! These are the reference definitions: the differentiable graph in
//! [`crate::train`] builds the same quantities on the autodiff tape and is
//! tested to agree with the functions here. Reductions use compensated
//! summation so values are insensitive to evaluation order.

use thiserror::Error;

use crate::geometry::{
    self, bbox_diagonal, geodesic_angle, nearest_other_keypoint, nn_distance, GeometryError,
    KeypointSet, PointCloud, Rotation3,
};
use crate::math;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("keypoint sets must have equal size: {a} vs {b}")]
    SizeMismatch { a: usize, b: usize },
    #[error("pair sample is inconsistent: {reason}")]
    BadPair { reason: &'static str },
}

/// Thresholds and weights of the training objective.
///
/// Defaults: individual weights {0.5, 6, 1, 0.07}, mutual weights {1, 0.05},
/// overlap threshold 0.05, separation clamp floor 0.01, smooth-L1 beta 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub tau1: f64,
    pub w_sep: f64,
    pub w_sh: f64,
    pub w_vol: f64,
    pub w_ovr: f64,
    pub w_con: f64,
    pub w_pose: f64,
    pub sep_floor: f64,
    pub smooth_l1_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau1: 0.05,
            w_sep: 0.5,
            w_sh: 6.0,
            w_vol: 1.0,
            w_ovr: 0.07,
            w_con: 1.0,
            w_pose: 0.05,
            sep_floor: 0.01,
            smooth_l1_beta: 1.0,
        }
    }
}

/// Two rotated copies of one object, with the rotations that produced them
/// and their relative rotation `r_ba = r_a * r_b^T` (mapping the b frame
/// into the a frame).
#[derive(Debug, Clone)]
pub struct PairSample {
    pub cloud_a: PointCloud,
    pub cloud_b: PointCloud,
    pub r_a: Rotation3,
    pub r_b: Rotation3,
    pub r_ba: Rotation3,
}

const PAIR_TOL: f64 = 1e-9;

impl PairSample {
    /// Builds the pair by rotating a canonical cloud twice.
    pub fn from_canonical(canonical: &PointCloud, r_a: Rotation3, r_b: Rotation3) -> Self {
        Self {
            cloud_a: geometry::apply_rotation(canonical, &r_a),
            cloud_b: geometry::apply_rotation(canonical, &r_b),
            r_a,
            r_b,
            r_ba: r_a.compose(&r_b.transpose()),
        }
    }

    /// Validates the rigid-pair invariants: `cloud_b = r_b r_a^T cloud_a`
    /// point-for-point and `r_ba = r_a r_b^T`, both to 1e-9.
    pub fn new(
        cloud_a: PointCloud,
        cloud_b: PointCloud,
        r_a: Rotation3,
        r_b: Rotation3,
        r_ba: Rotation3,
    ) -> Result<Self, LossError> {
        if cloud_a.n() != cloud_b.n() {
            return Err(LossError::BadPair {
                reason: "clouds differ in size",
            });
        }
        let expect_rba = r_a.compose(&r_b.transpose());
        if geodesic_angle(&expect_rba, &r_ba) > PAIR_TOL {
            return Err(LossError::BadPair {
                reason: "r_ba does not equal r_a * r_b^T",
            });
        }
        let rel = r_b.compose(&r_a.transpose());
        for (pa, pb) in cloud_a.points().iter().zip(cloud_b.points()) {
            if geometry::dist3(rel.apply(*pa), *pb) > PAIR_TOL {
                return Err(LossError::BadPair {
                    reason: "cloud_b is not the rigid image of cloud_a",
                });
            }
        }
        Ok(Self {
            cloud_a,
            cloud_b,
            r_a,
            r_b,
            r_ba,
        })
    }
}

/// Separation term: reciprocal of the mean nearest-other-keypoint distance,
/// clamped below by `sep_floor` so coincident keypoints yield a finite value.
pub fn loss_separation(kp: &KeypointSet, cfg: &LossConfig) -> Result<f64, LossError> {
    let k = kp.k();
    if k < 2 {
        return Err(GeometryError::TooFewKeypoints { needed: 2, got: k }.into());
    }
    let mean = math::kahan_sum(
        (0..k).map(|i| nearest_other_keypoint(i, kp).expect("k >= 2 checked").0),
    ) / k as f64;
    Ok(1.0 / mean.max(cfg.sep_floor))
}

/// Shape term: mean distance from each keypoint to its nearest cloud point.
pub fn loss_shape(kp: &KeypointSet, c: &PointCloud) -> f64 {
    math::kahan_sum(kp.points().iter().map(|q| nn_distance(*q, c).0)) / kp.k() as f64
}

/// Volume term: smooth-L1 difference of the bounding-box diagonals.
pub fn loss_volume(kp: &KeypointSet, c: &PointCloud, cfg: &LossConfig) -> f64 {
    math::smooth_l1(bbox_diagonal(kp) - bbox_diagonal(c), cfg.smooth_l1_beta)
}

/// Average overlap: fraction (over K^2) of ordered pairs closer than tau1.
/// A count, so it carries no gradient; it is reported and added as a
/// constant penalty.
pub fn overlap_score(kp: &KeypointSet, cfg: &LossConfig) -> f64 {
    let k = kp.k();
    let mut count = 0usize;
    for i in 0..k {
        for j in 0..k {
            if i != j && geometry::dist3(kp.points()[i], kp.points()[j]) < cfg.tau1 {
                count += 1;
            }
        }
    }
    count as f64 / (k * k) as f64
}

/// Per-term values of the individual objective, unweighted, plus the
/// weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IndividualBreakdown {
    pub separation: f64,
    pub shape: f64,
    pub volume: f64,
    pub overlap: f64,
    pub total: f64,
}

/// Weighted sum of separation, shape, volume, and overlap.
pub fn loss_individual(
    kp: &KeypointSet,
    c: &PointCloud,
    cfg: &LossConfig,
) -> Result<IndividualBreakdown, LossError> {
    let separation = loss_separation(kp, cfg)?;
    let shape = loss_shape(kp, c);
    let volume = loss_volume(kp, c, cfg);
    let overlap = overlap_score(kp, cfg);
    let total = cfg.w_sep * separation + cfg.w_sh * shape + cfg.w_vol * volume + cfg.w_ovr * overlap;
    Ok(IndividualBreakdown {
        separation,
        shape,
        volume,
        overlap,
        total,
    })
}

/// Consistency term: mean squared distance between the two keypoint sets
/// after de-rotating each to the canonical frame, index-wise.
pub fn loss_consistency(
    kp_a: &KeypointSet,
    kp_b: &KeypointSet,
    r_a: &Rotation3,
    r_b: &Rotation3,
) -> Result<f64, LossError> {
    if kp_a.k() != kp_b.k() {
        return Err(LossError::SizeMismatch {
            a: kp_a.k(),
            b: kp_b.k(),
        });
    }
    let ra_inv = r_a.transpose();
    let rb_inv = r_b.transpose();
    let sum = math::kahan_sum(kp_a.points().iter().zip(kp_b.points()).map(|(ka, kb)| {
        geometry::sq_dist3(ra_inv.apply(*ka), rb_inv.apply(*kb))
    }));
    Ok(sum / kp_a.k() as f64)
}

/// Pose term: angle between the Procrustes-estimated relative pose of the
/// two keypoint sets and the known relative pose of the pair.
///
/// `r_ba` maps the b frame into the a frame, so the estimate aligns `kp_b`
/// onto `kp_a`; for a perfectly rotation-equivariant predictor the two agree
/// and the loss is zero. Returns the angle together with the degeneracy flag
/// of the alignment.
pub fn loss_pose(
    kp_a: &KeypointSet,
    kp_b: &KeypointSet,
    r_ba: &Rotation3,
) -> Result<(f64, bool), LossError> {
    let est = geometry::procrustes(kp_b, kp_a)?;
    let mut fro2 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let d = est.rotation.matrix()[i][j] - r_ba.matrix()[i][j];
            fro2 += d * d;
        }
    }
    let arg = (math::sqrt(fro2) / (2.0 * math::sqrt(2.0))).min(1.0);
    Ok((2.0 * math::asin(arg), est.degenerate))
}

/// Per-term values of the mutual objective plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MutualBreakdown {
    pub consistency: f64,
    pub pose: f64,
    pub pose_degenerate: bool,
    pub total: f64,
}

/// Weighted sum of consistency and pose.
pub fn loss_mutual(
    kp_a: &KeypointSet,
    kp_b: &KeypointSet,
    sample: &PairSample,
    cfg: &LossConfig,
) -> Result<MutualBreakdown, LossError> {
    let consistency = loss_consistency(kp_a, kp_b, &sample.r_a, &sample.r_b)?;
    let (pose, pose_degenerate) = loss_pose(kp_a, kp_b, &sample.r_ba)?;
    Ok(MutualBreakdown {
        consistency,
        pose,
        pose_degenerate,
        total: cfg.w_con * consistency + cfg.w_pose * pose,
    })
}

/// Full breakdown of the overall objective. The individual loss is applied
/// to both rotated copies and the two totals are summed.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OverallBreakdown {
    pub individual_a: IndividualBreakdown,
    pub individual_b: IndividualBreakdown,
    pub mutual: MutualBreakdown,
    pub total: f64,
}

/// Overall objective: individual losses of both copies plus the mutual loss.
pub fn loss_overall(
    kp_a: &KeypointSet,
    kp_b: &KeypointSet,
    sample: &PairSample,
    cfg: &LossConfig,
) -> Result<OverallBreakdown, LossError> {
    let individual_a = loss_individual(kp_a, &sample.cloud_a, cfg)?;
    let individual_b = loss_individual(kp_b, &sample.cloud_b, cfg)?;
    let mutual = loss_mutual(kp_a, kp_b, sample, cfg)?;
    Ok(OverallBreakdown {
        individual_a,
        individual_b,
        mutual,
        total: individual_a.total + individual_b.total + mutual.total,
    })
}

/// Symmetric squared chamfer distance, the ablation baseline that replaces
/// the individual losses.
pub fn chamfer_distance(x: &[geometry::Vec3], y: &[geometry::Vec3]) -> f64 {
    let nn_sq = |q: geometry::Vec3, pts: &[geometry::Vec3]| -> f64 {
        let mut best = f64::INFINITY;
        for p in pts {
            let d = geometry::sq_dist3(q, *p);
            if d < best {
                best = d;
            }
        }
        best
    };
    let fwd = math::kahan_sum(x.iter().map(|q| nn_sq(*q, y))) / x.len() as f64;
    let back = math::kahan_sum(y.iter().map(|q| nn_sq(*q, x))) / y.len() as f64;
    fwd + back
}
