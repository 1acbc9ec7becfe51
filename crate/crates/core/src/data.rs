//! Data-regime machinery: cloud normalization, per-object rotation banks,
//! pair construction, and the noise/decimation perturbation grid.

use alloc::vec::Vec;

use thiserror::Error;

use crate::geometry::{self, random_rotation, GeometryError, PointCloud, Rotation3, Vec3};
use crate::loss::PairSample;
use crate::rng::SeedStream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("object index {index} outside the bank ({objects} objects)")]
    ObjectOutOfRange { index: usize, objects: usize },
    #[error("bank needs at least 2 poses per object, got {got}")]
    BankTooSmall { got: usize },
    #[error("down-sampling ratio {ratio} leaves fewer than 4 of {n} points")]
    RatioTooLarge { ratio: usize, n: usize },
    #[error("down-sampling ratio must be at least 1")]
    ZeroRatio,
}

/// The inverse of a normalization: original = normalized * scale + centroid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormRecord {
    pub centroid: Vec3,
    pub scale: f64,
}

impl NormRecord {
    pub fn identity() -> Self {
        Self {
            centroid: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn denormalize(&self, p: Vec3) -> Vec3 {
        [
            p[0] * self.scale + self.centroid[0],
            p[1] * self.scale + self.centroid[1],
            p[2] * self.scale + self.centroid[2],
        ]
    }
}

/// Normalizes to zero mean and maximum point norm one; the returned record
/// inverts the transform. Idempotent to rounding.
pub fn normalize_cloud(c: &PointCloud) -> (PointCloud, NormRecord) {
    let (centered, centroid) = geometry::center_cloud(c);
    let max_norm = centered
        .points()
        .iter()
        .map(|p| geometry::norm3(*p))
        .fold(0.0, f64::max);
    let scale = if max_norm > 0.0 { max_norm } else { 1.0 };
    let points = centered
        .points()
        .iter()
        .map(|p| geometry::scale3(*p, 1.0 / scale))
        .collect();
    (
        PointCloud::new(points).expect("normalization preserves validity"),
        NormRecord { centroid, scale },
    )
}

/// Per-object pose bank, regenerable from the seed alone. The same
/// `poses_per_object` rotations are shared by every object: training and
/// evaluation sample orientations from one fixed set, the regime the
/// pairwise objectives are designed around.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationBank {
    seed: u64,
    poses_per_object: usize,
    rotations: Vec<Vec<Rotation3>>,
}

pub const DEFAULT_POSES_PER_OBJECT: usize = 24;

impl RotationBank {
    pub fn generate(seed: u64, n_objects: usize, poses_per_object: usize) -> Result<Self, DataError> {
        if poses_per_object < 2 {
            return Err(DataError::BankTooSmall {
                got: poses_per_object,
            });
        }
        let mut stream = SeedStream::derive(seed, &[0x62616e6b]);
        let shared: Vec<Rotation3> = (0..poses_per_object)
            .map(|_| random_rotation(&mut stream))
            .collect();
        let rotations = (0..n_objects).map(|_| shared.clone()).collect();
        Ok(Self {
            seed,
            poses_per_object,
            rotations,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_objects(&self) -> usize {
        self.rotations.len()
    }

    pub fn poses_per_object(&self) -> usize {
        self.poses_per_object
    }

    pub fn rotations(&self, object: usize) -> Result<&[Rotation3], DataError> {
        self.rotations
            .get(object)
            .map(|r| r.as_slice())
            .ok_or(DataError::ObjectOutOfRange {
                index: object,
                objects: self.rotations.len(),
            })
    }
}

/// Draws two distinct poses of one object from the bank and builds the
/// rotated pair.
pub fn make_pair(
    canonical: &PointCloud,
    object: usize,
    bank: &RotationBank,
    stream: &mut SeedStream,
) -> Result<PairSample, DataError> {
    let poses = bank.rotations(object)?;
    let (ia, ib) = stream.two_distinct(poses.len());
    Ok(PairSample::from_canonical(canonical, poses[ia], poses[ib]))
}

/// Builds a pair from two fresh uniform rotations instead of the bank.
pub fn fresh_pair(canonical: &PointCloud, stream: &mut SeedStream) -> PairSample {
    let r_a = random_rotation(stream);
    let r_b = random_rotation(stream);
    PairSample::from_canonical(canonical, r_a, r_b)
}

/// One cell of the perturbation grid.
#[derive(Debug, Clone)]
pub struct PerturbVariant {
    pub noise: f64,
    pub ratio: usize,
    pub cloud: PointCloud,
}

/// Cross grid of perturbations: for each (noise scale, down-sampling
/// ratio), the cloud is decimated by farthest point sampling to n/ratio
/// points, then Gaussian noise is added. The unperturbed cell is
/// (0.0, 1). Deterministic per seed and grid position.
pub fn perturb_sweep(
    cloud: &PointCloud,
    noise_scales: &[f64],
    ds_ratios: &[usize],
    seed: u64,
) -> Result<Vec<PerturbVariant>, DataError> {
    let n = cloud.n();
    for &ratio in ds_ratios {
        if ratio == 0 {
            return Err(DataError::ZeroRatio);
        }
        if n / ratio < 4 {
            return Err(DataError::RatioTooLarge { ratio, n });
        }
    }
    let mut variants = Vec::with_capacity(noise_scales.len() * ds_ratios.len());
    for (si, &sigma) in noise_scales.iter().enumerate() {
        for (ri, &ratio) in ds_ratios.iter().enumerate() {
            let decimated = if ratio == 1 {
                cloud.clone()
            } else {
                geometry::fps(cloud, n / ratio, 0)?
            };
            let mut stream = SeedStream::derive(seed, &[0x70657274, si as u64, ri as u64]);
            let noisy = geometry::gaussian_perturb(&decimated, sigma, &mut stream)?;
            variants.push(PerturbVariant {
                noise: sigma,
                ratio,
                cloud: noisy,
            });
        }
    }
    Ok(variants)
}

/// The noise scales of the published robustness sweep.
pub fn default_noise_scales() -> Vec<f64> {
    alloc::vec![0.0, 0.02, 0.06]
}

/// The down-sampling ratios of the published robustness sweep.
pub fn default_ds_ratios() -> Vec<usize> {
    alloc::vec![1, 4, 16]
}

/// Splits `ids` into train/val/test index lists with the given fractions,
/// shuffled deterministically by seed.
pub fn split_indices(n: usize, val_fraction: f64, test_fraction: f64, seed: u64) -> Splits {
    let mut order: Vec<usize> = (0..n).collect();
    let mut stream = SeedStream::derive(seed, &[0x73706c6974]);
    stream.shuffle(&mut order);
    let n_val = (n as f64 * val_fraction) as usize;
    let n_test = (n as f64 * test_fraction) as usize;
    let n_train = n - n_val - n_test;
    Splits {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}
