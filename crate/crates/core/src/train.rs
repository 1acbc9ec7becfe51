//! The differentiable training objective and the optimizer step.
//!
//! Each pair sample gets its own tape: the two rotated copies are stacked
//! into one forward call (so batchnorm statistics span the pair), the
//! objective graph is built on top of the predicted keypoints, and one
//! backward sweep yields parameter gradients. Samples in a batch are
//! therefore independent; the driver may evaluate them in any order or in
//! parallel, as long as [`reduce_and_apply`] folds the results in batch
//! order, which keeps training bit-reproducible.

use alloc::vec::Vec;

use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, Tape, Tensor};
use crate::geometry::bbox_diagonal;
use crate::loss::{LossConfig, LossError, PairSample};
use crate::math;
use crate::model::{self, ModelError, NetworkParams, BN_MOMENTUM};
use crate::optim::{adam_step, AdamConfig, AdamState, OptimError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("gradient check failed: max relative error {max_rel_err}")]
    GradientCheckFailed { max_rel_err: f64 },
}

/// Which loss terms participate in the objective; disabling terms drives
/// the ablation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationMask {
    pub separation: bool,
    pub shape: bool,
    pub volume: bool,
    pub overlap: bool,
    pub consistency: bool,
    pub pose: bool,
}

impl Default for AblationMask {
    fn default() -> Self {
        Self {
            separation: true,
            shape: true,
            volume: true,
            overlap: true,
            consistency: true,
            pose: true,
        }
    }
}

impl AblationMask {
    pub fn all_disabled() -> Self {
        Self {
            separation: false,
            shape: false,
            volume: false,
            overlap: false,
            consistency: false,
            pose: false,
        }
    }
}

/// Training objective: the full set of individual terms, or the chamfer
/// baseline replacing them (mutual terms stay in both cases).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    #[default]
    Standard,
    Chamfer,
}

/// Everything the optimizer loop needs to know.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub loss: LossConfig,
    pub ablation: AblationMask,
    pub objective: Objective,
    /// Optional global-norm gradient clip.
    pub grad_clip: Option<f64>,
    /// Draw fresh random rotations each epoch instead of sampling the
    /// per-object pose bank.
    pub fresh_rotations: bool,
    /// Skip the gradient-correctness gate before fitting.
    pub skip_gradcheck: bool,
    /// Force fully sequential batch evaluation.
    pub deterministic: bool,
    /// Pairs per forward call: training-mode batchnorm statistics span
    /// this many pairs (2x as many clouds). Chunks of this size are
    /// independent tapes.
    pub tape_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            epochs: 200,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossConfig::default(),
            ablation: AblationMask::default(),
            objective: Objective::Standard,
            grad_clip: None,
            fresh_rotations: false,
            skip_gradcheck: false,
            deterministic: false,
            tape_pairs: 8,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) {
            return Err(TrainError::Model(ModelError::InvalidConfig {
                reason: "learning rate must be positive",
            }));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Model(ModelError::InvalidConfig {
                reason: "batch size must be at least 2",
            }));
        }
        if self.epochs == 0 {
            return Err(TrainError::Model(ModelError::InvalidConfig {
                reason: "need at least one epoch",
            }));
        }
        Ok(())
    }
}

/// Unweighted per-term values of one pair objective (individual terms
/// averaged over the two copies).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TermValues {
    pub separation: f64,
    pub shape: f64,
    pub volume: f64,
    pub overlap: f64,
    pub chamfer: f64,
    pub consistency: f64,
    pub pose: f64,
    pub total: f64,
}

impl TermValues {
    pub fn add_from(&mut self, other: &TermValues) {
        self.separation += other.separation;
        self.shape += other.shape;
        self.volume += other.volume;
        self.overlap += other.overlap;
        self.chamfer += other.chamfer;
        self.consistency += other.consistency;
        self.pose += other.pose;
        self.total += other.total;
    }

    pub fn scale_by(&mut self, s: f64) {
        self.separation *= s;
        self.shape *= s;
        self.volume *= s;
        self.overlap *= s;
        self.chamfer *= s;
        self.consistency *= s;
        self.pose *= s;
        self.total *= s;
    }
}

/// Gradient contribution of one or more pair samples evaluated on one tape.
pub struct PairGrad {
    pub grads: Vec<Tensor>,
    pub n_pairs: usize,
    pub terms: TermValues,
    /// (running-mean buffer index, running-var buffer index, batch mean,
    /// biased batch variance, row count) per training-mode batchnorm.
    pub bn_stats: Vec<(usize, usize, Vec<f64>, Vec<f64>, usize)>,
}

struct ObjectiveNodes {
    total: NodeId,
    separation: [Option<NodeId>; 2],
    shape: [Option<NodeId>; 2],
    volume: [Option<NodeId>; 2],
    overlap: [f64; 2],
    chamfer: [Option<NodeId>; 2],
    consistency: Option<NodeId>,
    pose: Option<NodeId>,
}

/// Records the pair objective on the tape, given the pair's two keypoint
/// nodes (K, 3) each. Masked terms are left out of the graph entirely.
fn build_pair_objective(
    tape: &mut Tape,
    kp_a: NodeId,
    kp_b: NodeId,
    sample: &PairSample,
    cfg: &TrainConfig,
) -> Result<ObjectiveNodes, TrainError> {
    let k = tape.value(kp_a).rows();
    let loss = &cfg.loss;

    let mut weighted: Vec<(NodeId, f64)> = Vec::new();
    let mut nodes = ObjectiveNodes {
        total: kp_a, // replaced below
        separation: [None, None],
        shape: [None, None],
        volume: [None, None],
        overlap: [0.0; 2],
        chamfer: [None, None],
        consistency: None,
        pose: None,
    };

    for (side, (kp, cloud)) in [(kp_a, &sample.cloud_a), (kp_b, &sample.cloud_b)]
        .into_iter()
        .enumerate()
    {
        match cfg.objective {
            Objective::Standard => {
                if cfg.ablation.separation {
                    let sep = tape.separation(kp, loss.sep_floor);
                    nodes.separation[side] = Some(sep);
                    weighted.push((sep, loss.w_sep));
                }
                if cfg.ablation.shape {
                    let sh = tape.shape_nn(kp, cloud.points());
                    nodes.shape[side] = Some(sh);
                    weighted.push((sh, loss.w_sh));
                }
                if cfg.ablation.volume {
                    let diag = tape.bbox_diag(kp);
                    let diff = tape.add_scalar(diag, -bbox_diagonal(cloud));
                    let vol = tape.smooth_l1(diff, loss.smooth_l1_beta);
                    nodes.volume[side] = Some(vol);
                    weighted.push((vol, loss.w_vol));
                }
                if cfg.ablation.overlap {
                    // a count: enters the total as a constant, no gradient
                    let kp_set = crate::geometry::KeypointSet::new(tape.value(kp).to_points())
                        .map_err(LossError::from)?;
                    let ovr = crate::loss::overlap_score(&kp_set, loss);
                    nodes.overlap[side] = ovr;
                    let c = tape.constant(Tensor::scalar(ovr));
                    weighted.push((c, loss.w_ovr));
                }
            }
            Objective::Chamfer => {
                let cd = tape.chamfer(kp, cloud.points());
                nodes.chamfer[side] = Some(cd);
                weighted.push((cd, 1.0));
            }
        }
    }

    if cfg.ablation.consistency {
        let da = tape.rotate_rows(kp_a, sample.r_a.transpose().matrix());
        let db = tape.rotate_rows(kp_b, sample.r_b.transpose().matrix());
        let diff = tape.sub(da, db);
        let sq = tape.sq_norm(diff);
        let con = tape.scale(sq, 1.0 / k as f64);
        nodes.consistency = Some(con);
        weighted.push((con, loss.w_con));
    }
    if cfg.ablation.pose {
        // the estimate aligns the b keypoints onto the a keypoints, the
        // same frame mapping as r_ba
        let r_est = tape.kabsch_pose(kp_b, kp_a);
        let target = Tensor::from_points(&[
            sample.r_ba.matrix()[0],
            sample.r_ba.matrix()[1],
            sample.r_ba.matrix()[2],
        ]);
        let diff = tape.sub_const(r_est, &target);
        let fro = tape.l2_norm(diff);
        let arg = tape.scale(fro, 1.0 / (2.0 * math::sqrt(2.0)));
        let asin = tape.asin_clamped(arg);
        let pose = tape.scale(asin, 2.0);
        nodes.pose = Some(pose);
        weighted.push((pose, loss.w_pose));
    }

    let mut total = tape.constant(Tensor::scalar(0.0));
    for (node, w) in weighted {
        let scaled = tape.scale(node, w);
        total = tape.add(total, scaled);
    }
    nodes.total = total;
    Ok(nodes)
}

fn scalar(tape: &Tape, id: Option<NodeId>) -> f64 {
    id.map(|n| tape.value(n).scalar_value()).unwrap_or(0.0)
}

fn term_values(tape: &Tape, nodes: &ObjectiveNodes) -> TermValues {
    TermValues {
        separation: (scalar(tape, nodes.separation[0]) + scalar(tape, nodes.separation[1])) / 2.0,
        shape: (scalar(tape, nodes.shape[0]) + scalar(tape, nodes.shape[1])) / 2.0,
        volume: (scalar(tape, nodes.volume[0]) + scalar(tape, nodes.volume[1])) / 2.0,
        overlap: (nodes.overlap[0] + nodes.overlap[1]) / 2.0,
        chamfer: (scalar(tape, nodes.chamfer[0]) + scalar(tape, nodes.chamfer[1])) / 2.0,
        consistency: scalar(tape, nodes.consistency),
        pose: scalar(tape, nodes.pose),
        total: tape.value(nodes.total).scalar_value(),
    }
}

fn stack_pairs(batch: &[PairSample]) -> Tensor {
    let n: usize = batch
        .iter()
        .map(|s| s.cloud_a.n() + s.cloud_b.n())
        .sum();
    let mut out = Tensor::zeros(n, 3);
    let mut row = 0;
    for sample in batch {
        for cloud in [&sample.cloud_a, &sample.cloud_b] {
            for p in cloud.points() {
                out.row_mut(row).copy_from_slice(p);
                row += 1;
            }
        }
    }
    out
}

/// Forward + backward for a set of pairs sharing one tape: the clouds are
/// stacked into a single forward call, so training-mode batchnorm
/// statistics span every cloud in `batch`. The objective is the mean of
/// the per-pair objectives; the returned gradients are its gradients.
/// Pure in `params`; independent chunks may run concurrently.
pub fn batch_gradients(
    params: &NetworkParams,
    batch: &[PairSample],
    cfg: &TrainConfig,
) -> Result<PairGrad, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let k = params.cfg.n_keypoints;
    let mut tape = Tape::new();
    let stacked = stack_pairs(batch);
    let rows = stacked.rows();
    let graph =
        model::build_forward(&mut tape, params, &stacked, 2 * batch.len(), model::Mode::Train)?;

    let mut terms = TermValues::default();
    let mut pair_totals = Vec::with_capacity(batch.len());
    for (i, sample) in batch.iter().enumerate() {
        let kp_a = tape.slice_rows(graph.keypoints, 2 * i * k, k);
        let kp_b = tape.slice_rows(graph.keypoints, (2 * i + 1) * k, k);
        let nodes = build_pair_objective(&mut tape, kp_a, kp_b, sample, cfg)?;
        terms.add_from(&term_values(&tape, &nodes));
        pair_totals.push(nodes.total);
    }
    terms.scale_by(1.0 / batch.len() as f64);
    let mut sum = tape.constant(Tensor::scalar(0.0));
    for t in pair_totals {
        sum = tape.add(sum, t);
    }
    let objective = tape.scale(sum, 1.0 / batch.len() as f64);

    if let Some(err) = tape.first_nonfinite() {
        return Err(err.into());
    }
    tape.backward(objective)?;
    let grads = graph
        .param_ids
        .iter()
        .map(|id| tape.grad(*id).expect("backward ran").clone())
        .collect();
    let bn_stats = graph
        .bn_nodes
        .iter()
        .map(|(rm, rv, node)| {
            let (mean, var) = tape.batchnorm_stats(*node).expect("train-mode bn");
            (*rm, *rv, mean.to_vec(), var.to_vec(), rows)
        })
        .collect();
    Ok(PairGrad {
        grads,
        n_pairs: batch.len(),
        terms,
        bn_stats,
    })
}

/// Forward + backward for one pair on its own tape (training-mode
/// batchnorm statistics span just this pair's two clouds).
pub fn pair_gradients(
    params: &NetworkParams,
    sample: &PairSample,
    cfg: &TrainConfig,
) -> Result<PairGrad, TrainError> {
    batch_gradients(params, core::slice::from_ref(sample), cfg)
}

/// Objective value only (no gradients); used for validation losses and by
/// the finite-difference gate.
pub fn pair_loss(
    params: &NetworkParams,
    sample: &PairSample,
    cfg: &TrainConfig,
    mode: model::Mode,
) -> Result<TermValues, TrainError> {
    let mut tape = Tape::new();
    let stacked = Tensor::from_points(sample.cloud_a.points())
        .vstack(&Tensor::from_points(sample.cloud_b.points()));
    let graph = model::build_forward(&mut tape, params, &stacked, 2, mode)?;
    let k = params.cfg.n_keypoints;
    let kp_a = tape.slice_rows(graph.keypoints, 0, k);
    let kp_b = tape.slice_rows(graph.keypoints, k, k);
    let nodes = build_pair_objective(&mut tape, kp_a, kp_b, sample, cfg)?;
    if let Some(err) = tape.first_nonfinite() {
        return Err(err.into());
    }
    Ok(term_values(&tape, &nodes))
}

/// Batch statistics of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainStepStats {
    pub terms: TermValues,
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Deterministic reduction of per-pair results (in the given order) and a
/// single Adam update. Also folds the pairs' batchnorm statistics into the
/// running buffers.
pub fn reduce_and_apply(
    params: &mut NetworkParams,
    state: &mut AdamState,
    results: Vec<PairGrad>,
    cfg: &TrainConfig,
) -> Result<TrainStepStats, TrainError> {
    if results.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let total_pairs: usize = results.iter().map(|r| r.n_pairs).sum();
    let mut grads: Vec<Tensor> = params
        .params
        .iter()
        .map(|p| Tensor::zeros(p.tensor.rows(), p.tensor.cols()))
        .collect();
    let mut terms = TermValues::default();
    for result in &results {
        let scale = result.n_pairs as f64 / total_pairs as f64;
        for (acc, g) in grads.iter_mut().zip(&result.grads) {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += scale * v;
            }
        }
        let mut weighted = result.terms;
        weighted.scale_by(scale);
        terms.add_from(&weighted);
        for (rm, rv, mean, var, rows) in &result.bn_stats {
            let unbias = *rows as f64 / (*rows as f64 - 1.0);
            let rm_buf = params.buffers[*rm].tensor.data_mut();
            for (r, m) in rm_buf.iter_mut().zip(mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv_buf = params.buffers[*rv].tensor.data_mut();
            for (r, v) in rv_buf.iter_mut().zip(var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * (v * unbias);
            }
        }
    }

    let mut grad_norm_sq = 0.0;
    for g in &grads {
        for v in g.data() {
            grad_norm_sq += v * v;
        }
    }
    let grad_norm = math::sqrt(grad_norm_sq);
    let mut clipped = false;
    if let Some(limit) = cfg.grad_clip {
        if grad_norm > limit {
            let s = limit / grad_norm;
            for g in grads.iter_mut() {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
            clipped = true;
        }
    }
    adam_step(&mut params.params, &grads, state, &cfg.adam())?;
    Ok(TrainStepStats {
        terms,
        grad_norm,
        clipped,
    })
}

/// One optimizer step over a batch of pairs, evaluated sequentially.
pub fn train_step(
    params: &mut NetworkParams,
    state: &mut AdamState,
    batch: &[PairSample],
    cfg: &TrainConfig,
) -> Result<TrainStepStats, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let results = batch
        .chunks(cfg.tape_pairs.max(1))
        .map(|chunk| batch_gradients(params, chunk, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    reduce_and_apply(params, state, results, cfg)
}

/// Finite-difference gate over the full pair objective, taken with respect
/// to the keypoint coordinates of both sets. Builds a random cloud pair and
/// random keypoint leaves, then compares the tape gradient of the composed
/// objective against central differences.
pub fn objective_gradcheck(
    n_points: usize,
    k: usize,
    seed: u64,
    step: f64,
    cfg: &TrainConfig,
) -> crate::autodiff::FdReport {
    use crate::geometry::{random_rotation, PointCloud};
    use crate::rng::SeedStream;

    let mut s = SeedStream::derive(seed, &[0x67726164]);
    let canonical = PointCloud::new(
        (0..n_points)
            .map(|_| [s.normal(), s.normal(), s.normal()])
            .collect(),
    )
    .expect("non-empty");
    let (canonical, _) = crate::geometry::center_cloud(&canonical);
    let r_a = random_rotation(&mut s);
    let r_b = random_rotation(&mut s);
    let sample = PairSample::from_canonical(&canonical, r_a, r_b);

    let mut kp = Tensor::zeros(2 * k, 3);
    for v in kp.data_mut() {
        *v = s.normal();
    }

    let build = |tape: &mut Tape, leaf: NodeId| -> NodeId {
        let kp_a = tape.slice_rows(leaf, 0, k);
        let kp_b = tape.slice_rows(leaf, k, k);
        build_pair_objective(tape, kp_a, kp_b, &sample, cfg)
            .expect("objective builds")
            .total
    };

    let mut tape = Tape::new();
    let leaf = tape.param(kp.clone());
    let obj = build(&mut tape, leaf);
    tape.backward(obj).expect("scalar objective");
    let analytic = [tape.grad(leaf).expect("gradient present").clone()];
    let theta = [kp];
    crate::autodiff::finite_diff_check(
        |t: &[Tensor]| {
            let mut tape = Tape::new().without_finite_checks();
            let leaf = tape.param(t[0].clone());
            let obj = build(&mut tape, leaf);
            tape.value(obj).scalar_value()
        },
        &analytic,
        &theta,
        step,
    )
}

/// Runs [`objective_gradcheck`] over several seeds and fails if any exceeds
/// the tolerance. This is the gate `fit` runs before training.
pub fn gradient_gate(cfg: &TrainConfig, seeds: u64, tol: f64) -> Result<f64, TrainError> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let report = objective_gradcheck(64, 6, seed, 1e-5, cfg);
        worst = worst.max(report.max_rel_err);
    }
    if worst > tol {
        return Err(TrainError::GradientCheckFailed { max_rel_err: worst });
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_rotation, random_rotation, KeypointSet, PointCloud};
    use crate::loss;
    use crate::model::{init_params, NetworkConfig};
    use crate::rng::SeedStream;

    fn toy_cfg() -> NetworkConfig {
        NetworkConfig {
            n_points: 64,
            n_keypoints: 6,
            feat_dim: 24,
            hidden_dims: alloc::vec![8, 12],
            res_dim: 12,
            input_transform: true,
        }
    }

    fn toy_sample(s: &mut SeedStream, n: usize) -> PairSample {
        let canonical = PointCloud::new(
            (0..n).map(|_| [s.normal(), s.normal(), s.normal()]).collect(),
        )
        .unwrap();
        let (canonical, _) = crate::geometry::center_cloud(&canonical);
        PairSample::from_canonical(&canonical, random_rotation(s), random_rotation(s))
    }

    // The taped objective must agree with the scalar reference losses.
    #[test]
    fn taped_objective_matches_scalar_losses() {
        let mut s = SeedStream::new(42);
        let cfg = TrainConfig::default();
        for _ in 0..10 {
            let sample = toy_sample(&mut s, 48);
            let k = 6;
            let mut kp = Tensor::zeros(2 * k, 3);
            for v in kp.data_mut() {
                *v = s.normal();
            }
            let mut tape = Tape::new();
            let leaf = tape.constant(kp.clone());
            let node_a = tape.slice_rows(leaf, 0, k);
            let node_b = tape.slice_rows(leaf, k, k);
            let nodes = build_pair_objective(&mut tape, node_a, node_b, &sample, &cfg).unwrap();

            let pts = kp.to_points();
            let kp_a = KeypointSet::new(pts[..k].to_vec()).unwrap();
            let kp_b = KeypointSet::new(pts[k..].to_vec()).unwrap();
            let reference = loss::loss_overall(&kp_a, &kp_b, &sample, &cfg.loss).unwrap();
            let got = tape.value(nodes.total).scalar_value();
            assert!(
                (got - reference.total).abs() < 1e-9,
                "taped {got} vs scalar {}",
                reference.total
            );
        }
    }

    #[test]
    fn objective_gradcheck_passes_on_random_configurations() {
        let cfg = TrainConfig::default();
        for seed in 0..5 {
            let report = objective_gradcheck(64, 6, seed, 1e-5, &cfg);
            assert!(report.max_rel_err <= 1e-3, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn gradient_gate_detects_pass_and_runs() {
        let cfg = TrainConfig::default();
        let worst = gradient_gate(&cfg, 3, 1e-3).unwrap();
        assert!(worst <= 1e-3);
    }

    // Full-model finite differences: gradients w.r.t. every trainable
    // parameter of the network match central differences through the
    // entire objective.
    #[test]
    fn full_model_parameter_gradients_match_finite_differences() {
        let net_cfg = NetworkConfig {
            n_points: 24,
            n_keypoints: 4,
            feat_dim: 10,
            hidden_dims: alloc::vec![6, 8],
            res_dim: 6,
            input_transform: true,
        };
        let cfg = TrainConfig::default();
        let params = init_params(&net_cfg, 1).unwrap();
        let mut s = SeedStream::new(2);
        let sample = toy_sample(&mut s, net_cfg.n_points);

        let result = pair_gradients(&params, &sample, &cfg).unwrap();

        let eval = |theta: &[Tensor]| -> f64 {
            let mut p = params.clone();
            for (dst, src) in p.params.iter_mut().zip(theta) {
                dst.tensor = src.clone();
            }
            pair_loss(&p, &sample, &cfg, model::Mode::Train)
                .unwrap()
                .total
        };
        let theta: Vec<Tensor> = params.params.iter().map(|p| p.tensor.clone()).collect();

        // combined tolerance: relative where gradients are meaningful,
        // absolute where finite differences bottom out in roundoff
        let step = 1e-5;
        let mut work = theta.clone();
        let mut checked = 0usize;
        for (pi, t) in theta.iter().enumerate() {
            for ei in 0..t.len() {
                let orig = t.data()[ei];
                work[pi].data_mut()[ei] = orig + step;
                let fp = eval(&work);
                work[pi].data_mut()[ei] = orig - step;
                let fm = eval(&work);
                work[pi].data_mut()[ei] = orig;
                let numeric = (fp - fm) / (2.0 * step);
                let analytic = result.grads[pi].data()[ei];
                let diff = (analytic - numeric).abs();
                assert!(
                    diff <= 2e-6 + 1e-3 * analytic.abs().max(numeric.abs()),
                    "{} elem {ei}: analytic {analytic}, numeric {numeric}",
                    params.params[pi].name
                );
                checked += 1;
            }
        }
        assert!(checked > 500, "toy model should have hundreds of parameters");
    }

    #[test]
    fn oracle_predictor_has_zero_mutual_terms_and_zero_mutual_gradient() {
        // keypoints fixed to a canonical set rotated by each sample's
        // rotation: consistency and pose vanish, as do their gradients
        let mut s = SeedStream::new(3);
        let cfg = TrainConfig {
            ablation: AblationMask {
                separation: false,
                shape: false,
                volume: false,
                overlap: false,
                consistency: true,
                pose: true,
            },
            ..TrainConfig::default()
        };
        for _ in 0..10 {
            let sample = toy_sample(&mut s, 32);
            let canonical: Vec<[f64; 3]> =
                (0..5).map(|_| [s.normal(), s.normal(), s.normal()]).collect();
            let kp_a = apply_rotation(&KeypointSet::new(canonical.clone()).unwrap(), &sample.r_a);
            let kp_b = apply_rotation(&KeypointSet::new(canonical.clone()).unwrap(), &sample.r_b);
            let stacked =
                Tensor::from_points(kp_a.points()).vstack(&Tensor::from_points(kp_b.points()));
            let mut tape = Tape::new();
            let leaf = tape.param(stacked);
            let node_a = tape.slice_rows(leaf, 0, 5);
            let node_b = tape.slice_rows(leaf, 5, 5);
            let nodes = build_pair_objective(&mut tape, node_a, node_b, &sample, &cfg).unwrap();
            let total = tape.value(nodes.total).scalar_value();
            assert!(total < 1e-8, "mutual total {total}");
            tape.backward(nodes.total).unwrap();
            // gradient of the consistency term vanishes at its minimum;
            // the pose term sits at a non-differentiable zero and
            // contributes the zero subgradient chosen by the norm rule
            let g = tape.grad(leaf).unwrap();
            for v in g.data() {
                assert!(v.abs() < 1e-6, "gradient {v}");
            }
        }
    }

    #[test]
    fn disabling_all_terms_gives_zero_loss_and_zero_update() {
        let net_cfg = toy_cfg();
        let mut params = init_params(&net_cfg, 4).unwrap();
        let before = params.clone();
        let mut state = AdamState::new(&params.params);
        let mut s = SeedStream::new(5);
        let cfg = TrainConfig {
            ablation: AblationMask::all_disabled(),
            ..TrainConfig::default()
        };
        let batch: Vec<PairSample> = (0..2).map(|_| toy_sample(&mut s, net_cfg.n_points)).collect();
        let stats = train_step(&mut params, &mut state, &batch, &cfg).unwrap();
        assert_eq!(stats.terms.total, 0.0);
        assert_eq!(stats.grad_norm, 0.0);
        // parameters unchanged (zero gradients); running stats do update
        assert_eq!(params.params, before.params);
    }

    #[test]
    fn loss_breakdown_recombines_to_total() {
        let net_cfg = toy_cfg();
        let params = init_params(&net_cfg, 6).unwrap();
        let mut s = SeedStream::new(7);
        let cfg = TrainConfig::default();
        let sample = toy_sample(&mut s, net_cfg.n_points);
        let result = pair_gradients(&params, &sample, &cfg).unwrap();
        let t = &result.terms;
        let l = &cfg.loss;
        // individual terms are branch means, so each contributes twice
        let recombined = 2.0
            * (l.w_sep * t.separation + l.w_sh * t.shape + l.w_vol * t.volume + l.w_ovr * t.overlap)
            + l.w_con * t.consistency
            + l.w_pose * t.pose;
        assert!(
            (recombined - t.total).abs() < 1e-12,
            "recombined {recombined} vs {}",
            t.total
        );
    }

    #[test]
    fn chamfer_objective_swaps_out_individual_terms() {
        let net_cfg = toy_cfg();
        let params = init_params(&net_cfg, 8).unwrap();
        let mut s = SeedStream::new(9);
        let cfg = TrainConfig {
            objective: Objective::Chamfer,
            ..TrainConfig::default()
        };
        let sample = toy_sample(&mut s, net_cfg.n_points);
        let result = pair_gradients(&params, &sample, &cfg).unwrap();
        assert_eq!(result.terms.separation, 0.0);
        assert!(result.terms.chamfer > 0.0);
        let recombined = 2.0 * result.terms.chamfer
            + cfg.loss.w_con * result.terms.consistency
            + cfg.loss.w_pose * result.terms.pose;
        assert!((recombined - result.terms.total).abs() < 1e-12);
    }

    #[test]
    fn train_step_is_deterministic() {
        let net_cfg = toy_cfg();
        let run = || {
            let mut params = init_params(&net_cfg, 10).unwrap();
            let mut state = AdamState::new(&params.params);
            let mut s = SeedStream::new(11);
            let cfg = TrainConfig::default();
            for _ in 0..3 {
                let batch: Vec<PairSample> =
                    (0..2).map(|_| toy_sample(&mut s, net_cfg.n_points)).collect();
                train_step(&mut params, &mut state, &batch, &cfg).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn short_training_reduces_the_loss() {
        // one object, repeated steps: the objective must drop, which is a
        // coarse end-to-end check that gradients point downhill
        let net_cfg = toy_cfg();
        let mut params = init_params(&net_cfg, 12).unwrap();
        let mut state = AdamState::new(&params.params);
        let mut s = SeedStream::new(13);
        let cfg = TrainConfig {
            lr: 3e-3,
            ..TrainConfig::default()
        };
        let batch: Vec<PairSample> = (0..2).map(|_| toy_sample(&mut s, net_cfg.n_points)).collect();
        let first = train_step(&mut params, &mut state, &batch, &cfg).unwrap();
        let mut last = first;
        for _ in 0..60 {
            last = train_step(&mut params, &mut state, &batch, &cfg).unwrap();
        }
        assert!(
            last.terms.total < first.terms.total,
            "loss did not decrease: {} -> {}",
            first.terms.total,
            last.terms.total
        );
    }

    #[test]
    fn gradient_clip_bounds_update_norm() {
        let net_cfg = toy_cfg();
        let mut params = init_params(&net_cfg, 14).unwrap();
        let mut state = AdamState::new(&params.params);
        let mut s = SeedStream::new(15);
        let cfg = TrainConfig {
            grad_clip: Some(1e-6),
            ..TrainConfig::default()
        };
        let batch: Vec<PairSample> = (0..2).map(|_| toy_sample(&mut s, net_cfg.n_points)).collect();
        let stats = train_step(&mut params, &mut state, &batch, &cfg).unwrap();
        assert!(stats.clipped);
    }
}
