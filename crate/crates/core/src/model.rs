//! The point-cloud-to-keypoints network.
//!
//! Per-point features come from a shared pointwise MLP whose max-pooled
//! global vector is concatenated back to every point and fused to width M.
//! Two residual blocks (pointwise conv pairs with batch normalization and a
//! pointwise skip) refine the features, a pointwise head projects them to K
//! logits per point, and a softmax across the point axis turns each
//! keypoint row into a probability distribution; keypoints are the
//! probability-weighted averages of the input points, hence always inside
//! the convex hull of the cloud.
//!
//! Linear layers feeding straight into batch normalization carry no bias
//! term: the normalization removes any constant shift, so such a bias is
//! exactly redundant. The skip projection and the head keep theirs.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::geometry::{GeometryError, KeypointSet, PointCloud};
use crate::math;
use crate::rng::SeedStream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid network config: {reason}")]
    InvalidConfig { reason: &'static str },
    #[error("forward produced a non-finite value at node {node} ({label})")]
    NonFinite { node: usize, label: &'static str },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Reference point count N. The network is pointwise, so evaluation
    /// accepts any cloud size; this is the size training data is built at.
    pub n_points: usize,
    /// Number of keypoints K.
    pub n_keypoints: usize,
    /// Per-point feature width M after fusing the global feature.
    pub feat_dim: usize,
    /// Widths of the per-point encoder MLP.
    pub hidden_dims: Vec<usize>,
    /// Output width of the residual blocks.
    pub res_dim: usize,
    /// Prepend a learned input transform (a small pointwise network
    /// predicting one 3x3 matrix per cloud, applied to the coordinates
    /// before the encoder). Without it the encoder sees raw world
    /// coordinates only and cross-pose keypoint consistency does not
    /// emerge at small scale.
    pub input_transform: bool,
}

impl NetworkConfig {
    /// Desk-scale defaults: light enough to train on a CPU.
    pub fn desk_scale() -> Self {
        Self {
            n_points: 1024,
            n_keypoints: 10,
            feat_dim: 256,
            hidden_dims: alloc::vec![64, 128],
            res_dim: 128,
            input_transform: true,
        }
    }

    /// Full-scale preset mirroring the published architecture sizes.
    pub fn paper_scale() -> Self {
        Self {
            n_points: 2048,
            n_keypoints: 10,
            feat_dim: 1024,
            hidden_dims: alloc::vec![64, 128],
            res_dim: 256,
            input_transform: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden_dims.is_empty() {
            return Err(ModelError::InvalidConfig {
                reason: "encoder needs at least one hidden layer",
            });
        }
        if self.hidden_dims.iter().any(|&d| d == 0)
            || self.feat_dim == 0
            || self.res_dim == 0
            || self.n_keypoints == 0
        {
            return Err(ModelError::InvalidConfig {
                reason: "all dimensions must be at least 1",
            });
        }
        if self.n_keypoints >= self.n_points {
            return Err(ModelError::InvalidConfig {
                reason: "need more points than keypoints",
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Shape and role of every tensor in a parameter set, derived from the
/// config. `trainable` tensors are in optimizer order; `buffers` hold the
/// batchnorm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub trainable: Vec<(String, (usize, usize))>,
    pub buffers: Vec<(String, (usize, usize))>,
}

/// All weights of the network plus batchnorm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub cfg: NetworkConfig,
    pub params: Vec<NamedTensor>,
    pub buffers: Vec<NamedTensor>,
}

/// Momentum of the running-statistics update in training mode.
pub const BN_MOMENTUM: f64 = 0.1;

const ENC_LABELS: [&str; 8] = [
    "enc0", "enc1", "enc2", "enc3", "enc4", "enc5", "enc6", "enc7",
];

fn enc_label(i: usize) -> &'static str {
    ENC_LABELS[i.min(ENC_LABELS.len() - 1)]
}

fn tnet_dims(cfg: &NetworkConfig) -> (usize, usize, usize) {
    let t0 = cfg.hidden_dims[0];
    let t1 = *cfg.hidden_dims.last().expect("validated non-empty");
    (t0, t1, t0)
}

/// Per-layer structure: a linear weight index plus, for normalized layers,
/// the batchnorm parameter and buffer indices.
#[derive(Debug, Clone, Copy)]
struct LinearBn {
    w: usize,
    gamma: usize,
    beta: usize,
    rm: usize,
    rv: usize,
}

#[derive(Debug, Clone, Copy)]
struct ResBlockIdx {
    conv1: LinearBn,
    conv2: LinearBn,
    skip_w: usize,
    skip_b: usize,
}

#[derive(Debug, Clone, Copy)]
struct TnetIdx {
    enc0: LinearBn,
    enc1: LinearBn,
    fc_w: usize,
    fc_b: usize,
    out_w: usize,
    out_b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    tnet: Option<TnetIdx>,
    enc: Vec<LinearBn>,
    fuse: LinearBn,
    res: [ResBlockIdx; 2],
    head_w: usize,
    head_b: usize,
}

/// Enumerates parameter shapes in optimizer order. This is the single
/// source of truth for the parameter layout; init, counting, checkpoints,
/// and the forward pass all derive from it.
pub fn param_spec(cfg: &NetworkConfig) -> ParamSpec {
    fn linear_bn(spec: &mut ParamSpec, name: &str, ci: usize, co: usize) {
        spec.trainable.push((format!("{name}.w"), (ci, co)));
        spec.trainable.push((format!("{name}.bn.gamma"), (co, 1)));
        spec.trainable.push((format!("{name}.bn.beta"), (co, 1)));
        spec.buffers.push((format!("{name}.bn.running_mean"), (co, 1)));
        spec.buffers.push((format!("{name}.bn.running_var"), (co, 1)));
    }
    let mut spec = ParamSpec {
        trainable: Vec::new(),
        buffers: Vec::new(),
    };
    if cfg.input_transform {
        let (t0, t1, t2) = tnet_dims(cfg);
        linear_bn(&mut spec, "tnet.enc0", 3, t0);
        linear_bn(&mut spec, "tnet.enc1", t0, t1);
        spec.trainable.push((String::from("tnet.fc.w"), (t1, t2)));
        spec.trainable.push((String::from("tnet.fc.b"), (t2, 1)));
        spec.trainable.push((String::from("tnet.out.w"), (t2, 9)));
        spec.trainable.push((String::from("tnet.out.b"), (9, 1)));
    }
    let mut width = 3;
    for (i, &h) in cfg.hidden_dims.iter().enumerate() {
        linear_bn(&mut spec, enc_label(i), width, h);
        width = h;
    }
    linear_bn(&mut spec, "fuse", 2 * width, cfg.feat_dim);
    let mut in_dim = cfg.feat_dim;
    for block in ["res1", "res2"] {
        linear_bn(&mut spec, &format!("{block}.conv1"), in_dim, cfg.res_dim);
        linear_bn(&mut spec, &format!("{block}.conv2"), cfg.res_dim, cfg.res_dim);
        spec.trainable
            .push((format!("{block}.skip.w"), (in_dim, cfg.res_dim)));
        spec.trainable.push((format!("{block}.skip.b"), (cfg.res_dim, 1)));
        in_dim = cfg.res_dim;
    }
    spec.trainable
        .push((String::from("head.w"), (cfg.res_dim, cfg.n_keypoints)));
    spec.trainable.push((String::from("head.b"), (cfg.n_keypoints, 1)));
    spec
}

fn layout(cfg: &NetworkConfig) -> Layout {
    // mirrors the order in param_spec
    fn linear_bn(p: &mut usize, b: &mut usize) -> LinearBn {
        let lb = LinearBn {
            w: *p,
            gamma: *p + 1,
            beta: *p + 2,
            rm: *b,
            rv: *b + 1,
        };
        *p += 3;
        *b += 2;
        lb
    }
    fn res_block(p: &mut usize, b: &mut usize) -> ResBlockIdx {
        let conv1 = linear_bn(p, b);
        let conv2 = linear_bn(p, b);
        let blk = ResBlockIdx {
            conv1,
            conv2,
            skip_w: *p,
            skip_b: *p + 1,
        };
        *p += 2;
        blk
    }
    let mut p = 0;
    let mut b = 0;
    let tnet = if cfg.input_transform {
        let enc0 = linear_bn(&mut p, &mut b);
        let enc1 = linear_bn(&mut p, &mut b);
        let idx = TnetIdx {
            enc0,
            enc1,
            fc_w: p,
            fc_b: p + 1,
            out_w: p + 2,
            out_b: p + 3,
        };
        p += 4;
        Some(idx)
    } else {
        None
    };
    let enc: Vec<LinearBn> = (0..cfg.hidden_dims.len())
        .map(|_| linear_bn(&mut p, &mut b))
        .collect();
    let fuse = linear_bn(&mut p, &mut b);
    let res = [res_block(&mut p, &mut b), res_block(&mut p, &mut b)];
    Layout {
        tnet,
        enc,
        fuse,
        res,
        head_w: p,
        head_b: p + 1,
    }
}

/// Exact count of trainable parameters.
pub fn count_params(cfg: &NetworkConfig) -> usize {
    param_spec(cfg)
        .trainable
        .iter()
        .map(|(_, (r, c))| r * c)
        .sum()
}

/// He-style fan-in initialization, deterministic per seed. Weights draw
/// from N(0, 2/fan_in); biases and batchnorm shifts start at zero,
/// batchnorm scales at one, running statistics at (0, 1).
pub fn init_params(cfg: &NetworkConfig, seed: u64) -> Result<NetworkParams, ModelError> {
    cfg.validate()?;
    let spec = param_spec(cfg);
    let mut stream = SeedStream::derive(seed, &[0x6d6f64656c]);
    let mut params = Vec::with_capacity(spec.trainable.len());
    for (name, (rows, cols)) in &spec.trainable {
        let mut t = Tensor::zeros(*rows, *cols);
        if name == "tnet.out.w" {
            // zero weights + identity bias: the transform starts as the
            // identity and drifts only as far as training asks it to
        } else if name == "tnet.out.b" {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = if i % 4 == 0 { 1.0 } else { 0.0 };
            }
        } else if name.ends_with(".w") {
            let std = math::sqrt(2.0 / *rows as f64);
            for v in t.data_mut() {
                *v = std * stream.normal();
            }
        } else if name.ends_with(".gamma") {
            for v in t.data_mut() {
                *v = 1.0;
            }
        }
        params.push(NamedTensor {
            name: name.clone(),
            tensor: t,
        });
    }
    let mut buffers = Vec::with_capacity(spec.buffers.len());
    for (name, (rows, cols)) in &spec.buffers {
        let mut t = Tensor::zeros(*rows, *cols);
        if name.ends_with(".running_var") {
            for v in t.data_mut() {
                *v = 1.0;
            }
        }
        buffers.push(NamedTensor {
            name: name.clone(),
            tensor: t,
        });
    }
    Ok(NetworkParams {
        cfg: cfg.clone(),
        params,
        buffers,
    })
}

/// Training or evaluation semantics for batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handles into the tape after a forward pass.
pub struct ForwardGraph {
    /// Leaf ids of the trainable parameters, in optimizer order.
    pub param_ids: Vec<NodeId>,
    /// Softmax output, (rows, K); each (segment, k) column sums to one.
    pub probs: NodeId,
    /// Keypoints, (segments * K, 3), grouped by segment.
    pub keypoints: NodeId,
    /// For each training-mode batchnorm: (running-mean buffer index,
    /// running-var buffer index, batchnorm node).
    pub bn_nodes: Vec<(usize, usize, NodeId)>,
}

/// Records the network onto `tape` for `points` holding `segments` stacked
/// clouds of equal size. In training mode batchnorm uses this call's
/// statistics (and requires at least two rows); in eval mode it uses the
/// stored running statistics.
pub fn build_forward(
    tape: &mut Tape,
    net: &NetworkParams,
    points: &Tensor,
    segments: usize,
    mode: Mode,
) -> Result<ForwardGraph, ModelError> {
    assert_eq!(points.cols(), 3, "points tensor must be (rows, 3)");
    assert!(segments > 0 && points.rows() % segments == 0);
    let lay = layout(&net.cfg);
    let param_ids: Vec<NodeId> = net
        .params
        .iter()
        .map(|p| tape.param(p.tensor.clone()))
        .collect();
    let mut bn_nodes = Vec::new();

    let x = tape.constant(points.clone());
    let apply_linear_bn =
        |tape: &mut Tape, bn_nodes: &mut Vec<(usize, usize, NodeId)>, x: NodeId, lb: &LinearBn, label: &'static str| {
            let lin = tape.linear(x, param_ids[lb.w], None, label);
            let normed = match mode {
                Mode::Train => {
                    let n = tape.batchnorm_train(lin, param_ids[lb.gamma], param_ids[lb.beta], label);
                    bn_nodes.push((lb.rm, lb.rv, n));
                    n
                }
                Mode::Eval => tape.batchnorm_eval(
                    lin,
                    param_ids[lb.gamma],
                    param_ids[lb.beta],
                    net.buffers[lb.rm].tensor.data(),
                    net.buffers[lb.rv].tensor.data(),
                    label,
                ),
            };
            normed
        };

    // learned input transform: canonicalizing 3x3 per cloud
    let encoder_input = match &lay.tnet {
        Some(t) => {
            let h0 = apply_linear_bn(tape, &mut bn_nodes, x, &t.enc0, "tnet.enc0");
            let a0 = tape.relu(h0);
            let h1 = apply_linear_bn(tape, &mut bn_nodes, a0, &t.enc1, "tnet.enc1");
            let a1 = tape.relu(h1);
            let pooled = tape.max_per_segment(a1, segments);
            let fc = tape.linear(pooled, param_ids[t.fc_w], Some(param_ids[t.fc_b]), "tnet.fc");
            let fc_act = tape.relu(fc);
            let mats = tape.linear(
                fc_act,
                param_ids[t.out_w],
                Some(param_ids[t.out_b]),
                "tnet.out",
            );
            tape.segment_point_transform(x, mats, segments)
        }
        None => x,
    };

    // per-point encoder
    let mut h = encoder_input;
    for (i, lb) in lay.enc.iter().enumerate() {
        let n = apply_linear_bn(tape, &mut bn_nodes, h, lb, enc_label(i));
        h = tape.relu(n);
    }
    // global feature, concatenated back per point, fused to width M
    let global = tape.max_per_segment(h, segments);
    let cat = tape.concat_global(h, global);
    let fused = apply_linear_bn(tape, &mut bn_nodes, cat, &lay.fuse, "fuse");
    let mut feat = tape.relu(fused);

    // two residual blocks
    for (bi, blk) in lay.res.iter().enumerate() {
        let label: &'static str = if bi == 0 { "res1" } else { "res2" };
        let n1 = apply_linear_bn(tape, &mut bn_nodes, feat, &blk.conv1, label);
        let a1 = tape.relu(n1);
        let main = apply_linear_bn(tape, &mut bn_nodes, a1, &blk.conv2, label);
        let skip = tape.linear(feat, param_ids[blk.skip_w], Some(param_ids[blk.skip_b]), label);
        let summed = tape.add(main, skip);
        feat = tape.relu(summed);
    }

    // head: K logits per point, softmax across each segment's points
    let logits = tape.linear(feat, param_ids[lay.head_w], Some(param_ids[lay.head_b]), "head");
    let probs = tape.softmax_per_segment(logits, segments);
    let keypoints = tape.weighted_points(probs, points, segments);

    if let Some(err) = tape.first_nonfinite() {
        let crate::autodiff::AutodiffError::NonFinite { node, label } = err else {
            unreachable!()
        };
        return Err(ModelError::NonFinite { node, label });
    }
    Ok(ForwardGraph {
        param_ids,
        probs,
        keypoints,
        bn_nodes,
    })
}

/// Result of an evaluation-mode forward pass on a single cloud.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// K x N row-stochastic matrix: row k is the selection distribution of
    /// keypoint k over the input points.
    pub probs: Tensor,
    pub keypoints: KeypointSet,
}

/// Evaluation-mode forward: pure (running statistics frozen), accepts any
/// cloud size, bit-identical across calls.
pub fn forward_eval(net: &NetworkParams, cloud: &PointCloud) -> Result<ForwardOutput, ModelError> {
    let mut tape = Tape::new();
    let points = Tensor::from_points(cloud.points());
    let graph = build_forward(&mut tape, net, &points, 1, Mode::Eval)?;
    let probs_nk = tape.value(graph.probs);
    let (n, k) = probs_nk.shape();
    let mut probs = Tensor::zeros(k, n);
    for r in 0..n {
        for c in 0..k {
            probs.row_mut(c)[r] = probs_nk.at(r, c);
        }
    }
    let keypoints = KeypointSet::new(tape.value(graph.keypoints).to_points())?;
    Ok(ForwardOutput { probs, keypoints })
}

/// The head-to-keypoints stage in isolation: softmax of the given logits
/// (one column per keypoint) over the points, then probability-weighted
/// averaging. Exposed so the selection behavior is testable with
/// constructed logits.
pub fn keypoints_from_logits(
    logits: &Tensor,
    cloud: &PointCloud,
) -> Result<ForwardOutput, ModelError> {
    assert_eq!(logits.rows(), cloud.n(), "one logit row per point");
    let mut tape = Tape::new();
    let points = Tensor::from_points(cloud.points());
    let l = tape.constant(logits.clone());
    let probs_node = tape.softmax_per_segment(l, 1);
    let kp_node = tape.weighted_points(probs_node, &points, 1);
    let probs_nk = tape.value(probs_node);
    let (n, k) = probs_nk.shape();
    let mut probs = Tensor::zeros(k, n);
    for r in 0..n {
        for c in 0..k {
            probs.row_mut(c)[r] = probs_nk.at(r, c);
        }
    }
    let keypoints = KeypointSet::new(tape.value(kp_node).to_points())?;
    Ok(ForwardOutput { probs, keypoints })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    fn toy_cfg() -> NetworkConfig {
        NetworkConfig {
            n_points: 32,
            n_keypoints: 4,
            feat_dim: 64,
            hidden_dims: alloc::vec![32, 64],
            res_dim: 32,
            input_transform: true,
        }
    }

    fn random_cloud(s: &mut SeedStream, n: usize) -> PointCloud {
        PointCloud::new((0..n).map(|_| [s.normal(), s.normal(), s.normal()]).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = toy_cfg();
        let a = init_params(&cfg, 7).unwrap();
        let b = init_params(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let c = init_params(&cfg, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_weight_variance_matches_fan_in_scaling() {
        let cfg = NetworkConfig {
            n_points: 64,
            n_keypoints: 4,
            feat_dim: 128,
            hidden_dims: alloc::vec![256, 128],
            res_dim: 64,
            input_transform: true,
        };
        let net = init_params(&cfg, 0).unwrap();
        let w = net
            .params
            .iter()
            .find(|p| p.name == "enc1.w")
            .expect("enc1.w exists");
        let fan_in = w.tensor.rows() as f64;
        let n = w.tensor.len() as f64;
        let mean = w.tensor.data().iter().sum::<f64>() / n;
        let var = w.tensor.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let expect = 2.0 / fan_in;
        assert!(
            (var - expect).abs() < 0.2 * expect,
            "var {var} vs 2/fan_in {expect}"
        );
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = toy_cfg();
        cfg.hidden_dims.clear();
        assert!(init_params(&cfg, 0).is_err());

        let mut cfg = toy_cfg();
        cfg.n_keypoints = cfg.n_points;
        assert!(cfg.validate().is_err());

        let mut cfg = toy_cfg();
        cfg.res_dim = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn count_params_matches_hand_formula() {
        let mut cfg = NetworkConfig {
            n_points: 100,
            n_keypoints: 4,
            feat_dim: 64,
            hidden_dims: alloc::vec![32, 64],
            res_dim: 32,
            input_transform: false,
        };
        // encoder: (3*32 + 2*32) + (32*64 + 2*64)
        // fuse: (128*64 + 2*64)
        // res1: 64*32 + 2*32 + 32*32 + 2*32 + (64*32 + 32)
        // res2: 32*32 + 2*32 + 32*32 + 2*32 + (32*32 + 32)
        // head: 32*4 + 4
        let expect = (3 * 32 + 64)
            + (32 * 64 + 128)
            + (128 * 64 + 128)
            + (64 * 32 + 64 + 32 * 32 + 64 + 64 * 32 + 32)
            + (32 * 32 + 64 + 32 * 32 + 64 + 32 * 32 + 32)
            + (32 * 4 + 4);
        assert_eq!(count_params(&cfg), expect);

        let sum: usize = init_params(&cfg, 0)
            .unwrap()
            .params
            .iter()
            .map(|p| p.tensor.len())
            .sum();
        assert_eq!(sum, expect);

        // input transform adds its own pointwise layers, pooled fc, and
        // the 9-way matrix head: (3*32 + 2*32) + (32*64 + 2*64)
        // + (64*32 + 32) + (32*9 + 9)
        cfg.input_transform = true;
        let tnet = (3 * 32 + 64) + (32 * 64 + 128) + (64 * 32 + 32) + (32 * 9 + 9);
        assert_eq!(count_params(&cfg), expect + tnet);
    }

    #[test]
    fn count_params_locality() {
        let base = toy_cfg();
        let mut doubled_k = base.clone();
        doubled_k.n_keypoints *= 2;
        let head_growth = count_params(&doubled_k) - count_params(&base);
        // only the head row count changes
        assert_eq!(head_growth, base.res_dim * base.n_keypoints + base.n_keypoints);

        let mut more_points = base.clone();
        more_points.n_points *= 4;
        assert_eq!(count_params(&more_points), count_params(&base));
    }

    #[test]
    fn forward_probs_are_row_stochastic_and_keypoints_convex() {
        let cfg = toy_cfg();
        let net = init_params(&cfg, 3).unwrap();
        let mut s = SeedStream::new(4);
        for _ in 0..5 {
            let cloud = random_cloud(&mut s, cfg.n_points);
            let out = forward_eval(&net, &cloud).unwrap();
            assert_eq!(out.probs.shape(), (cfg.n_keypoints, cfg.n_points));
            for k in 0..cfg.n_keypoints {
                let row = out.probs.row(k);
                let total: f64 = row.iter().sum();
                assert!((total - 1.0).abs() < 1e-9, "row {k} sums to {total}");
                assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
                // keypoint equals the probability-weighted average
                let mut expect = [0.0; 3];
                for (p, pt) in row.iter().zip(cloud.points()) {
                    for ax in 0..3 {
                        expect[ax] += p * pt[ax];
                    }
                }
                let got = out.keypoints.points()[k];
                for ax in 0..3 {
                    assert!((got[ax] - expect[ax]).abs() < 1e-12);
                }
            }
            // convexity: inside the axis-aligned bounding box
            for kp in out.keypoints.points() {
                for ax in 0..3 {
                    let lo = cloud.points().iter().map(|p| p[ax]).fold(f64::INFINITY, f64::min);
                    let hi = cloud
                        .points()
                        .iter()
                        .map(|p| p[ax])
                        .fold(f64::NEG_INFINITY, f64::max);
                    assert!(kp[ax] >= lo - 1e-12 && kp[ax] <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn forced_one_hot_logits_select_points_exactly() {
        let mut s = SeedStream::new(5);
        let cloud = random_cloud(&mut s, 16);
        let k = 3;
        let mut logits = Tensor::zeros(16, k);
        let chosen = [140usize % 16, 2, 9];
        for (kk, &row) in chosen.iter().enumerate() {
            logits.row_mut(row)[kk] = 1e9;
        }
        let out = keypoints_from_logits(&logits, &cloud).unwrap();
        for (kk, &row) in chosen.iter().enumerate() {
            assert_eq!(out.keypoints.points()[kk], cloud.points()[row]);
            assert_eq!(out.probs.at(kk, row), 1.0);
        }
    }

    #[test]
    fn eval_forward_is_bit_deterministic_and_permutation_equivariant() {
        let cfg = toy_cfg();
        let net = init_params(&cfg, 11).unwrap();
        let mut s = SeedStream::new(12);
        let cloud = random_cloud(&mut s, cfg.n_points);

        let a = forward_eval(&net, &cloud).unwrap();
        let b = forward_eval(&net, &cloud).unwrap();
        assert_eq!(a.probs, b.probs);
        assert_eq!(a.keypoints, b.keypoints);

        // reverse the point order
        let mut rev: Vec<Vec3> = cloud.points().to_vec();
        rev.reverse();
        let out_rev = forward_eval(&net, &PointCloud::new(rev).unwrap()).unwrap();
        let n = cfg.n_points;
        for k in 0..cfg.n_keypoints {
            for r in 0..n {
                let direct = a.probs.at(k, r);
                let permuted = out_rev.probs.at(k, n - 1 - r);
                assert!((direct - permuted).abs() < 1e-9);
            }
            let ka = a.keypoints.points()[k];
            let kb = out_rev.keypoints.points()[k];
            assert!(crate::geometry::dist3(ka, kb) < 1e-9);
        }
    }

    #[test]
    fn eval_forward_accepts_any_cloud_size() {
        let cfg = toy_cfg();
        let net = init_params(&cfg, 13).unwrap();
        let mut s = SeedStream::new(14);
        for n in [8usize, 100, 57] {
            let cloud = random_cloud(&mut s, n);
            let out = forward_eval(&net, &cloud).unwrap();
            assert_eq!(out.probs.shape(), (cfg.n_keypoints, n));
            assert_eq!(out.keypoints.k(), cfg.n_keypoints);
        }
    }

    #[test]
    fn nonfinite_values_are_diagnosed_with_origin() {
        let cfg = toy_cfg();
        let mut s = SeedStream::new(16);
        let cloud = random_cloud(&mut s, cfg.n_points);

        // a NaN parameter is reported at the parameter leaf
        let mut net = init_params(&cfg, 15).unwrap();
        net.params[0].tensor.data_mut()[0] = f64::NAN;
        match forward_eval(&net, &cloud) {
            Err(ModelError::NonFinite { label, .. }) => assert_eq!(label, "param"),
            other => panic!("expected NonFinite, got {other:?}"),
        }

        // an overflow inside a layer is reported with the layer name
        let mut net = init_params(&cfg, 15).unwrap();
        for v in net.params[0].tensor.data_mut() {
            *v = f64::MAX;
        }
        match forward_eval(&net, &cloud) {
            Err(ModelError::NonFinite { label, .. }) => assert_eq!(label, "tnet.enc0"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
