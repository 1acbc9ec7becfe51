//! Geometric primitives: point clouds, keypoint sets, rotations, and the
//! operations shared by the losses, metrics, model, and data pipeline.
//!
//! Everything is 64-bit, pure, and deterministic: neighbor ties break toward
//! the smallest index, and seeded randomness flows through an explicit
//! [`SeedStream`]. Nearest-neighbor queries are exhaustive scans; at the
//! cloud sizes this crate targets (N <= 4096) an index structure would not
//! pay for itself.

use alloc::vec::Vec;

use thiserror::Error;

use crate::math;
use crate::rng::SeedStream;
use crate::svd3;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point set must contain at least one point")]
    Empty,
    #[error("non-finite coordinate at point {index}")]
    NonFinite { index: usize },
    #[error("matrix is not a proper rotation: {reason}")]
    InvalidRotation { reason: &'static str },
    #[error("need at least {needed} keypoints, got {got}")]
    TooFewKeypoints { needed: usize, got: usize },
    #[error("sample count {m} out of range for cloud of {n} points")]
    SampleCountOutOfRange { m: usize, n: usize },
    #[error("start index {start} out of range for cloud of {n} points")]
    StartOutOfRange { start: usize, n: usize },
    #[error("noise sigma must be non-negative, got {sigma}")]
    NegativeSigma { sigma: f64 },
    #[error("keypoint sets must have equal size: {a} vs {b}")]
    SizeMismatch { a: usize, b: usize },
}

#[inline]
pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm3(a: Vec3) -> f64 {
    math::sqrt(dot3(a, a))
}

#[inline]
pub fn dist3(a: Vec3, b: Vec3) -> f64 {
    norm3(sub3(a, b))
}

#[inline]
pub fn sq_dist3(a: Vec3, b: Vec3) -> f64 {
    let d = sub3(a, b);
    dot3(d, d)
}

fn validate_points(points: &[Vec3]) -> Result<(), GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::Empty);
    }
    for (i, p) in points.iter().enumerate() {
        if !p.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::NonFinite { index: i });
        }
    }
    Ok(())
}

/// An ordered list of N 3D points. Point order is stable: every transform
/// preserves the identity of indices.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self, GeometryError> {
        validate_points(&points)?;
        Ok(Self { points })
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for (ax, slot) in c.iter_mut().enumerate() {
            *slot = math::kahan_sum(self.points.iter().map(|p| p[ax])) / n;
        }
        c
    }
}

/// An ordered list of K keypoints. The index carries semantic identity;
/// no operation in the crate reorders it.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    keypoints: Vec<Vec3>,
}

impl KeypointSet {
    pub fn new(keypoints: Vec<Vec3>) -> Result<Self, GeometryError> {
        validate_points(&keypoints)?;
        Ok(Self { keypoints })
    }

    pub fn k(&self) -> usize {
        self.keypoints.len()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.keypoints
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.keypoints
    }
}

/// A proper rotation: orthonormal 3x3 matrix with determinant +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation3 {
    m: Mat3,
}

const ROTATION_TOL: f64 = 1e-9;

impl Rotation3 {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Validates orthonormality and det = +1 to 1e-9.
    pub fn new(m: Mat3) -> Result<Self, GeometryError> {
        if !m.iter().flatten().all(|c| c.is_finite()) {
            return Err(GeometryError::InvalidRotation {
                reason: "non-finite entry",
            });
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|r| m[r][i] * m[r][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > ROTATION_TOL {
                    return Err(GeometryError::InvalidRotation {
                        reason: "columns not orthonormal",
                    });
                }
            }
        }
        if (det3(&m) - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::InvalidRotation {
                reason: "determinant is not +1",
            });
        }
        Ok(Self { m })
    }

    /// Builds the rotation for a quaternion (w, x, y, z); the quaternion is
    /// normalized first, so any non-zero input is accepted.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        let n = math::sqrt(w * w + x * x + y * y + z * z);
        if !(n.is_finite() && n > 0.0) {
            return Err(GeometryError::InvalidRotation {
                reason: "zero or non-finite quaternion",
            });
        }
        let (w, x, y, z) = (w / n, x / n, y / n, z / n);
        let m = [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ];
        Ok(Self { m })
    }

    /// Rotation of `angle` radians about the z axis.
    pub fn about_z(angle: f64) -> Self {
        let (s, c) = (math::sin(angle), math::cos(angle));
        Self {
            m: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Rotation of `angle` radians about the x axis.
    pub fn about_x(angle: f64) -> Self {
        let (s, c) = (math::sin(angle), math::cos(angle));
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
        }
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.m
    }

    #[inline]
    pub fn apply(&self, v: Vec3) -> Vec3 {
        [dot3(self.m[0], v), dot3(self.m[1], v), dot3(self.m[2], v)]
    }

    /// The inverse rotation (transpose).
    pub fn transpose(&self) -> Self {
        let m = &self.m;
        Self {
            m: [
                [m[0][0], m[1][0], m[2][0]],
                [m[0][1], m[1][1], m[2][1]],
                [m[0][2], m[1][2], m[2][2]],
            ],
        }
    }

    /// Composition: `self * other` (apply `other` first).
    pub fn compose(&self, other: &Rotation3) -> Self {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = (0..3).map(|k| self.m[i][k] * other.m[k][j]).sum();
            }
        }
        Self { m }
    }
}

pub fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Point sets that can be rigidly transformed while keeping index identity.
pub trait PointSet: Sized {
    fn coords(&self) -> &[Vec3];
    fn from_coords(points: Vec<Vec3>) -> Self;
}

impl PointSet for PointCloud {
    fn coords(&self) -> &[Vec3] {
        &self.points
    }
    fn from_coords(points: Vec<Vec3>) -> Self {
        Self { points }
    }
}

impl PointSet for KeypointSet {
    fn coords(&self) -> &[Vec3] {
        &self.keypoints
    }
    fn from_coords(points: Vec<Vec3>) -> Self {
        Self { keypoints: points }
    }
}

/// Translates the cloud so its centroid is the origin; returns the removed
/// centroid so the transform can be inverted.
pub fn center_cloud(c: &PointCloud) -> (PointCloud, Vec3) {
    let centroid = c.centroid();
    let points = c.points.iter().map(|p| sub3(*p, centroid)).collect();
    (PointCloud { points }, centroid)
}

/// Applies `r` to every point, preserving index order.
pub fn apply_rotation<S: PointSet>(set: &S, r: &Rotation3) -> S {
    S::from_coords(set.coords().iter().map(|p| r.apply(*p)).collect())
}

/// Uniform random rotation via unit-quaternion sampling (Shoemake's method).
pub fn random_rotation(stream: &mut SeedStream) -> Rotation3 {
    let u1 = stream.uniform();
    let u2 = stream.uniform();
    let u3 = stream.uniform();
    let a = math::sqrt(1.0 - u1);
    let b = math::sqrt(u1);
    let x = a * math::sin(math::TAU * u2);
    let y = a * math::cos(math::TAU * u2);
    let z = b * math::sin(math::TAU * u3);
    let w = b * math::cos(math::TAU * u3);
    Rotation3::from_quaternion(w, x, y, z).expect("unit quaternion is always valid")
}

/// Distance from `q` to its nearest neighbor in the cloud, with the index
/// attaining it. Exhaustive scan; ties break toward the smallest index.
pub fn nn_distance(q: Vec3, c: &PointCloud) -> (f64, usize) {
    let mut best = f64::INFINITY;
    let mut best_idx = 0;
    for (i, p) in c.points.iter().enumerate() {
        let d = sq_dist3(q, *p);
        if d < best {
            best = d;
            best_idx = i;
        }
    }
    (math::sqrt(best), best_idx)
}

/// Distance from keypoint `i` to the nearest *other* keypoint.
pub fn nearest_other_keypoint(i: usize, kp: &KeypointSet) -> Result<(f64, usize), GeometryError> {
    if kp.k() < 2 {
        return Err(GeometryError::TooFewKeypoints {
            needed: 2,
            got: kp.k(),
        });
    }
    let q = kp.keypoints[i];
    let mut best = f64::INFINITY;
    let mut best_idx = 0;
    for (j, p) in kp.keypoints.iter().enumerate() {
        if j == i {
            continue;
        }
        let d = sq_dist3(q, *p);
        if d < best {
            best = d;
            best_idx = j;
        }
    }
    Ok((math::sqrt(best), best_idx))
}

/// Euclidean length of the diagonal of the axis-aligned bounding box.
pub fn bbox_diagonal<S: PointSet>(set: &S) -> f64 {
    let pts = set.coords();
    let mut lo = pts[0];
    let mut hi = pts[0];
    for p in &pts[1..] {
        for ax in 0..3 {
            lo[ax] = lo[ax].min(p[ax]);
            hi[ax] = hi[ax].max(p[ax]);
        }
    }
    dist3(hi, lo)
}

/// Farthest point sampling: greedy max-min selection of `m` points starting
/// from `start`. Output points appear in selection order; ties break toward
/// the smallest index.
pub fn fps(c: &PointCloud, m: usize, start: usize) -> Result<PointCloud, GeometryError> {
    let n = c.n();
    if m == 0 || m > n {
        return Err(GeometryError::SampleCountOutOfRange { m, n });
    }
    if start >= n {
        return Err(GeometryError::StartOutOfRange { start, n });
    }
    let mut selected = Vec::with_capacity(m);
    selected.push(c.points[start]);
    // min squared distance from each point to the selected set
    let mut min_d: Vec<f64> = c
        .points
        .iter()
        .map(|p| sq_dist3(*p, c.points[start]))
        .collect();
    for _ in 1..m {
        let mut best = f64::NEG_INFINITY;
        let mut best_idx = 0;
        for (i, d) in min_d.iter().enumerate() {
            if *d > best {
                best = *d;
                best_idx = i;
            }
        }
        let chosen = c.points[best_idx];
        selected.push(chosen);
        for (d, p) in min_d.iter_mut().zip(&c.points) {
            let nd = sq_dist3(*p, chosen);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(PointCloud { points: selected })
}

/// Adds i.i.d. zero-mean Gaussian noise with per-coordinate standard
/// deviation `sigma`.
pub fn gaussian_perturb(
    c: &PointCloud,
    sigma: f64,
    stream: &mut SeedStream,
) -> Result<PointCloud, GeometryError> {
    if !(sigma >= 0.0) {
        return Err(GeometryError::NegativeSigma { sigma });
    }
    let points = c
        .points
        .iter()
        .map(|p| {
            [
                p[0] + sigma * stream.normal(),
                p[1] + sigma * stream.normal(),
                p[2] + sigma * stream.normal(),
            ]
        })
        .collect();
    Ok(PointCloud { points })
}

/// Result of [`procrustes`]: the aligning rotation plus a degeneracy flag for
/// rank-deficient cross-covariances whose optimum is not unique.
#[derive(Debug, Clone, Copy)]
pub struct ProcrustesResult {
    pub rotation: Rotation3,
    pub degenerate: bool,
}

/// Least-squares rotation alignment: returns the proper rotation R
/// minimizing the sum of ||R a_i - b_i||^2 after removing both centroids.
/// Correspondences are index-wise. Reflections are corrected by flipping
/// the smallest singular direction, so det(R) = +1 always.
pub fn procrustes(a: &KeypointSet, b: &KeypointSet) -> Result<ProcrustesResult, GeometryError> {
    if a.k() != b.k() {
        return Err(GeometryError::SizeMismatch { a: a.k(), b: b.k() });
    }
    if a.k() < 3 {
        return Err(GeometryError::TooFewKeypoints {
            needed: 3,
            got: a.k(),
        });
    }
    let (h, _, _) = cross_covariance(a.points(), b.points());
    let kab = svd3::kabsch_rotation(&h);
    let rotation =
        Rotation3::new(kab.rotation).map_err(|_| GeometryError::InvalidRotation {
            reason: "alignment did not converge to a rotation",
        })?;
    Ok(ProcrustesResult {
        rotation,
        degenerate: kab.degenerate,
    })
}

/// Cross-covariance H = sum_i (b_i - mean_b)(a_i - mean_a)^T together with
/// the two centroids, shared by the forward and the differentiable path.
pub fn cross_covariance(a: &[Vec3], b: &[Vec3]) -> (Mat3, Vec3, Vec3) {
    let n = a.len() as f64;
    let mut ca = [0.0; 3];
    let mut cb = [0.0; 3];
    for (pa, pb) in a.iter().zip(b) {
        ca = add3(ca, *pa);
        cb = add3(cb, *pb);
    }
    ca = scale3(ca, 1.0 / n);
    cb = scale3(cb, 1.0 / n);
    let mut h = [[0.0; 3]; 3];
    for (pa, pb) in a.iter().zip(b) {
        let da = sub3(*pa, ca);
        let db = sub3(*pb, cb);
        for r in 0..3 {
            for c in 0..3 {
                h[r][c] += db[r] * da[c];
            }
        }
    }
    (h, ca, cb)
}

/// Relative rotation angle in [0, pi]: 2 asin(||R1 - R2||_F / (2 sqrt(2))),
/// with the asin argument clamped to [-1, 1].
pub fn geodesic_angle(r1: &Rotation3, r2: &Rotation3) -> f64 {
    let mut fro2 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let d = r1.m[i][j] - r2.m[i][j];
            fro2 += d * d;
        }
    }
    let arg = (math::sqrt(fro2) / (2.0 * math::sqrt(2.0))).clamp(-1.0, 1.0);
    2.0 * math::asin(arg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cloud(pts: &[Vec3]) -> PointCloud {
        PointCloud::new(pts.to_vec()).unwrap()
    }

    fn kps(pts: &[Vec3]) -> KeypointSet {
        KeypointSet::new(pts.to_vec()).unwrap()
    }

    #[test]
    fn center_cloud_hand_case() {
        let (centered, centroid) = center_cloud(&cloud(&[[1.0, 1.0, 1.0], [3.0, 1.0, 1.0]]));
        assert_eq!(centroid, [2.0, 1.0, 1.0]);
        assert_eq!(centered.points(), &[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn center_cloud_identity_and_single_point() {
        let c = cloud(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]);
        let (centered, centroid) = center_cloud(&c);
        assert_eq!(centered, c);
        assert_eq!(centroid, [0.0, 0.0, 0.0]);

        let (single, centroid) = center_cloud(&cloud(&[[5.0, 0.0, 0.0]]));
        assert_eq!(single.points(), &[[0.0, 0.0, 0.0]]);
        assert_eq!(centroid, [5.0, 0.0, 0.0]);
    }

    #[test]
    fn center_cloud_result_is_zero_mean() {
        let mut s = SeedStream::new(11);
        let pts: Vec<Vec3> = (0..57)
            .map(|_| [s.uniform_in(-3.0, 9.0), s.uniform_in(0.0, 2.0), s.normal()])
            .collect();
        let (centered, _) = center_cloud(&cloud(&pts));
        let c = centered.centroid();
        for ax in 0..3 {
            assert!(c[ax].abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_identity_leaves_cloud_unchanged() {
        let c = cloud(&[[0.3, -0.2, 0.9], [1.0, 2.0, 3.0]]);
        assert_eq!(apply_rotation(&c, &Rotation3::identity()), c);
    }

    #[test]
    fn rotation_z90_hand_case() {
        let r = Rotation3::about_z(math::PI / 2.0);
        let v = r.apply([1.0, 0.0, 0.0]);
        assert_relative_eq!(v[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(v[1], 1.0, epsilon = 1e-12);
        assert_relative_eq!(v[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rotation_then_inverse_restores_points() {
        let mut s = SeedStream::new(5);
        let r = random_rotation(&mut s);
        let c = cloud(&[[0.1, 0.2, 0.3], [-1.0, 0.5, 2.0], [0.0, 0.0, 1.0]]);
        let back = apply_rotation(&apply_rotation(&c, &r), &r.transpose());
        for (p, q) in c.points().iter().zip(back.points()) {
            assert!(dist3(*p, *q) < 1e-9);
        }
    }

    #[test]
    fn rotation_preserves_norms_and_pairwise_distances() {
        let mut s = SeedStream::new(6);
        for _ in 0..20 {
            let r = random_rotation(&mut s);
            let pts: Vec<Vec3> = (0..10)
                .map(|_| [s.normal(), s.normal(), s.normal()])
                .collect();
            let c = cloud(&pts);
            let rc = apply_rotation(&c, &r);
            for (p, q) in c.points().iter().zip(rc.points()) {
                assert!((norm3(*p) - norm3(*q)).abs() < 1e-9);
            }
            for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    let before = dist3(c.points()[i], c.points()[j]);
                    let after = dist3(rc.points()[i], rc.points()[j]);
                    assert!((before - after).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn random_rotation_is_deterministic_and_valid() {
        let a = random_rotation(&mut SeedStream::new(123));
        let b = random_rotation(&mut SeedStream::new(123));
        assert_eq!(a.matrix(), b.matrix());
        let mut s = SeedStream::new(9);
        for _ in 0..100 {
            let r = random_rotation(&mut s);
            assert!(Rotation3::new(*r.matrix()).is_ok());
        }
    }

    // Mean trace of a Haar-uniform rotation is 0: E[R] vanishes by left
    // invariance, hence E[tr R] = 0. Cross-checked analytically
    // (E[cos theta] = -1/2 under the angle density (1 - cos theta)/pi, so
    // E[1 + 2 cos theta] = 0) and by this Monte-Carlo run.
    #[test]
    fn random_rotation_mean_trace_matches_uniform_expectation() {
        let mut s = SeedStream::new(2024);
        let n = 10_000;
        let mean_trace = (0..n)
            .map(|_| {
                let m = *random_rotation(&mut s).matrix();
                m[0][0] + m[1][1] + m[2][2]
            })
            .sum::<f64>()
            / n as f64;
        assert!(mean_trace.abs() < 0.1, "mean trace {mean_trace}");
    }

    #[test]
    fn nn_distance_membership_and_hand_case() {
        let c = cloud(&[[0.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(nn_distance([0.0, 0.0, 1.0], &c), (0.0, 1));
        let (d, i) = nn_distance([0.0, 0.0, 2.0], &c);
        assert_relative_eq!(d, 1.0);
        assert_eq!(i, 1);
    }

    #[test]
    fn nn_distance_tie_breaks_to_smallest_index() {
        let c = cloud(&[
            [1.0, 0.0, 0.0],
            [5.0, 5.0, 5.0],
            [9.0, 9.0, 9.0],
            [-1.0, 0.0, 0.0],
        ]);
        // indices 0 and 3 equidistant from origin
        let (d, i) = nn_distance([0.0, 0.0, 0.0], &c);
        assert_relative_eq!(d, 1.0);
        assert_eq!(i, 0);
    }

    #[test]
    fn nn_distance_matches_exhaustive_scan() {
        let mut s = SeedStream::new(31);
        for _ in 0..50 {
            let pts: Vec<Vec3> = (0..40)
                .map(|_| [s.normal(), s.normal(), s.normal()])
                .collect();
            let c = cloud(&pts);
            let q = [s.normal(), s.normal(), s.normal()];
            let (d, i) = nn_distance(q, &c);
            let mut bd = f64::INFINITY;
            let mut bi = 0;
            for (j, p) in pts.iter().enumerate() {
                let dj = dist3(q, *p);
                if dj < bd {
                    bd = dj;
                    bi = j;
                }
            }
            assert_eq!(i, bi);
            assert_relative_eq!(d, bd, epsilon = 1e-12);
        }
    }

    #[test]
    fn nearest_other_keypoint_cases() {
        let two = kps(&[[0.0, 0.0, 0.0], [0.7, 0.0, 0.0]]);
        assert_eq!(nearest_other_keypoint(0, &two).unwrap(), (0.7, 1));
        assert_eq!(nearest_other_keypoint(1, &two).unwrap(), (0.7, 0));

        let coincident = kps(&[[1.0, 1.0, 1.0]; 4]);
        assert_eq!(nearest_other_keypoint(2, &coincident).unwrap(), (0.0, 0));

        let h = 3f64.sqrt() / 2.0;
        let tri = kps(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, h, 0.0]]);
        let (d, j) = nearest_other_keypoint(2, &tri).unwrap();
        assert_relative_eq!(d, 1.0, epsilon = 1e-12);
        assert_eq!(j, 0);

        let one = kps(&[[0.0, 0.0, 0.0]]);
        assert!(nearest_other_keypoint(0, &one).is_err());
    }

    #[test]
    fn bbox_diagonal_cases() {
        let corners: Vec<Vec3> = (0..8)
            .map(|i| [(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64])
            .collect();
        assert_relative_eq!(bbox_diagonal(&cloud(&corners)), 3f64.sqrt(), epsilon = 1e-12);
        assert_eq!(bbox_diagonal(&cloud(&[[2.0, -1.0, 4.0]])), 0.0);
        assert_relative_eq!(
            bbox_diagonal(&cloud(&[[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]])),
            5.0
        );
    }

    #[test]
    fn bbox_diagonal_invariances() {
        let mut s = SeedStream::new(77);
        let pts: Vec<Vec3> = (0..30)
            .map(|_| [s.normal(), s.normal(), s.normal()])
            .collect();
        let d = bbox_diagonal(&cloud(&pts));
        let mut rev = pts.clone();
        rev.reverse();
        assert_eq!(bbox_diagonal(&cloud(&rev)), d);
        let shifted: Vec<Vec3> = pts.iter().map(|p| add3(*p, [2.0, -3.0, 0.5])).collect();
        assert_relative_eq!(bbox_diagonal(&cloud(&shifted)), d, epsilon = 1e-12);
        let scaled: Vec<Vec3> = pts.iter().map(|p| scale3(*p, 2.5)).collect();
        assert_relative_eq!(bbox_diagonal(&cloud(&scaled)), 2.5 * d, epsilon = 1e-12);
    }

    #[test]
    fn fps_base_cases() {
        let pts: Vec<Vec3> = (0..6).map(|i| [i as f64, 0.0, 0.0]).collect();
        let c = cloud(&pts);
        let all = fps(&c, 6, 0).unwrap();
        assert_eq!(all.n(), 6);
        // FPS order from index 0 on a line: first the start, then the far end
        assert_eq!(all.points()[0], [0.0, 0.0, 0.0]);
        assert_eq!(all.points()[1], [5.0, 0.0, 0.0]);

        let one = fps(&c, 1, 3).unwrap();
        assert_eq!(one.points(), &[[3.0, 0.0, 0.0]]);

        assert!(fps(&c, 7, 0).is_err());
        assert!(fps(&c, 0, 0).is_err());
        assert!(fps(&c, 2, 6).is_err());
    }

    // Brute-force max-min oracle: on a 5x5 unit-square grid the unique
    // 4-subset maximizing the minimum pairwise distance is the corner set,
    // and greedy FPS from a corner finds it.
    #[test]
    fn fps_grid_corners_match_brute_force_oracle() {
        let mut pts = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                pts.push([i as f64 * 0.25, j as f64 * 0.25, 0.0]);
            }
        }
        let c = cloud(&pts);

        let min_pairwise = |idx: &[usize]| -> f64 {
            let mut m = f64::INFINITY;
            for a in 0..idx.len() {
                for b in a + 1..idx.len() {
                    m = m.min(dist3(pts[idx[a]], pts[idx[b]]));
                }
            }
            m
        };
        let mut best = f64::NEG_INFINITY;
        let mut best_sets: Vec<[usize; 4]> = Vec::new();
        for a in 0..25 {
            for b in a + 1..25 {
                for cc in b + 1..25 {
                    for d in cc + 1..25 {
                        let v = min_pairwise(&[a, b, cc, d]);
                        if v > best + 1e-12 {
                            best = v;
                            best_sets.clear();
                            best_sets.push([a, b, cc, d]);
                        } else if (v - best).abs() <= 1e-12 {
                            best_sets.push([a, b, cc, d]);
                        }
                    }
                }
            }
        }
        assert_eq!(best_sets.len(), 1, "corner optimum should be unique");
        let corner_start = pts.iter().position(|p| *p == [0.0, 0.0, 0.0]).unwrap();
        let got = fps(&c, 4, corner_start).unwrap();
        let mut got_sorted: Vec<Vec3> = got.points().to_vec();
        got_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want: Vec<Vec3> = best_sets[0].iter().map(|&i| pts[i]).collect();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got_sorted, want);
    }

    #[test]
    fn fps_is_subset_and_maxmin_monotone() {
        let mut s = SeedStream::new(404);
        let pts: Vec<Vec3> = (0..60)
            .map(|_| [s.normal(), s.normal(), s.normal()])
            .collect();
        let c = cloud(&pts);
        let mut prev = f64::INFINITY;
        for m in 2..20 {
            let sub = fps(&c, m, 0).unwrap();
            for p in sub.points() {
                assert!(pts.contains(p), "FPS output must be a subset of input");
            }
            let mut min_pair = f64::INFINITY;
            for i in 0..m {
                for j in i + 1..m {
                    min_pair = min_pair.min(dist3(sub.points()[i], sub.points()[j]));
                }
            }
            assert!(min_pair <= prev + 1e-12);
            prev = min_pair;
        }
    }

    #[test]
    fn gaussian_perturb_contracts() {
        let mut s = SeedStream::new(1);
        let pts: Vec<Vec3> = (0..2048)
            .map(|_| [s.normal(), s.normal(), s.normal()])
            .collect();
        let c = cloud(&pts);

        let same = gaussian_perturb(&c, 0.0, &mut SeedStream::new(8)).unwrap();
        assert_eq!(same, c);

        let a = gaussian_perturb(&c, 0.02, &mut SeedStream::new(8)).unwrap();
        let b = gaussian_perturb(&c, 0.02, &mut SeedStream::new(8)).unwrap();
        assert_eq!(a, b);

        let mut displacements = Vec::new();
        for (p, q) in c.points().iter().zip(a.points()) {
            for ax in 0..3 {
                displacements.push(q[ax] - p[ax]);
            }
        }
        let n = displacements.len() as f64;
        let mean = displacements.iter().sum::<f64>() / n;
        let std = math::sqrt(
            displacements
                .iter()
                .map(|d| (d - mean) * (d - mean))
                .sum::<f64>()
                / n,
        );
        assert!((std - 0.02).abs() < 0.002, "std {std}");

        assert!(gaussian_perturb(&c, -0.1, &mut s).is_err());
    }

    #[test]
    fn procrustes_identity_case() {
        let a = kps(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ]);
        let r = procrustes(&a, &a).unwrap();
        assert!(!r.degenerate);
        assert!(geodesic_angle(&r.rotation, &Rotation3::identity()) < 1e-9);
    }

    // Construct-and-recover oracle: b = R0 a must give back R0.
    #[test]
    fn procrustes_recovers_constructed_rotation() {
        let mut s = SeedStream::new(99);
        for _ in 0..100 {
            let pts: Vec<Vec3> = (0..10)
                .map(|_| [s.normal(), s.normal(), s.normal()])
                .collect();
            let a = kps(&pts);
            let r0 = random_rotation(&mut s);
            let b = apply_rotation(&a, &r0);
            let got = procrustes(&a, &b).unwrap();
            assert!(
                geodesic_angle(&got.rotation, &r0) < 1e-9,
                "angle err {}",
                geodesic_angle(&got.rotation, &r0)
            );
        }
    }

    // Reflection guard: coplanar set against its mirror image must still
    // produce det +1.
    #[test]
    fn procrustes_never_returns_reflection() {
        let mut s = SeedStream::new(17);
        for _ in 0..200 {
            let pts: Vec<Vec3> = (0..8).map(|_| [s.normal(), s.normal(), 0.0]).collect();
            let a = kps(&pts);
            let mirrored: Vec<Vec3> = pts.iter().map(|p| [p[0], p[1], -p[2]]).collect();
            let reflected: Vec<Vec3> = pts.iter().map(|p| [-p[0], p[1], p[2]]).collect();
            for other in [mirrored, reflected] {
                let b = kps(&other);
                let got = procrustes(&a, &b).unwrap();
                assert!((det3(got.rotation.matrix()) - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn procrustes_translation_invariant() {
        let mut s = SeedStream::new(55);
        let pts: Vec<Vec3> = (0..6)
            .map(|_| [s.normal(), s.normal(), s.normal()])
            .collect();
        let a = kps(&pts);
        let r0 = random_rotation(&mut s);
        let shifted: Vec<Vec3> = apply_rotation(&a, &r0)
            .points()
            .iter()
            .map(|p| add3(*p, [3.0, -1.0, 0.25]))
            .collect();
        let b = kps(&shifted);
        let got = procrustes(&a, &b).unwrap();
        assert!(geodesic_angle(&got.rotation, &r0) < 1e-9);
    }

    #[test]
    fn procrustes_flags_rank_deficient_input() {
        // all points collinear: rank-1 cross covariance
        let a = kps(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [3.0, 0.0, 0.0],
        ]);
        let got = procrustes(&a, &a).unwrap();
        assert!(got.degenerate);
        assert!((det3(got.rotation.matrix()) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn geodesic_angle_cases() {
        let i = Rotation3::identity();
        assert_eq!(geodesic_angle(&i, &i), 0.0);
        let z90 = Rotation3::about_z(math::PI / 2.0);
        assert_relative_eq!(geodesic_angle(&i, &z90), math::PI / 2.0, epsilon = 1e-9);
    }

    // Matrix-log oracle: the Frobenius formula must match the axis-angle
    // rotation angle of r1^T r2.
    #[test]
    fn geodesic_angle_matches_matrix_log_oracle() {
        let mut s = SeedStream::new(8080);
        for _ in 0..500 {
            let r1 = random_rotation(&mut s);
            let r2 = random_rotation(&mut s);
            let rel = r1.transpose().compose(&r2);
            let m = rel.matrix();
            let cos_theta = ((m[0][0] + m[1][1] + m[2][2] - 1.0) / 2.0).clamp(-1.0, 1.0);
            let oracle = math::acos(cos_theta);
            let got = geodesic_angle(&r1, &r2);
            assert!((got - oracle).abs() < 1e-8, "got {got}, oracle {oracle}");
        }
    }

    #[test]
    fn geodesic_angle_symmetry_and_triangle_inequality() {
        let mut s = SeedStream::new(31337);
        for _ in 0..200 {
            let r1 = random_rotation(&mut s);
            let r2 = random_rotation(&mut s);
            let r3 = random_rotation(&mut s);
            assert_eq!(geodesic_angle(&r1, &r2), geodesic_angle(&r2, &r1));
            let d12 = geodesic_angle(&r1, &r2);
            let d23 = geodesic_angle(&r2, &r3);
            let d13 = geodesic_angle(&r1, &r3);
            assert!(d13 <= d12 + d23 + 1e-8);
        }
    }

    #[test]
    fn invalid_rotation_rejected() {
        let scaled = [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]];
        assert!(Rotation3::new(scaled).is_err());
        let reflection = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(Rotation3::new(reflection).is_err());
    }

    #[test]
    fn cloud_validation() {
        assert!(PointCloud::new(Vec::new()).is_err());
        assert!(PointCloud::new(alloc::vec![[f64::NAN, 0.0, 0.0]]).is_err());
        assert!(KeypointSet::new(alloc::vec![[0.0, f64::INFINITY, 0.0]]).is_err());
    }
}
