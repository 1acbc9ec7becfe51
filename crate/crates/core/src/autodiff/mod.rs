//! Reverse-mode automatic differentiation on a flat tape.
//!
//! The engine is deliberately minimal: exactly the primitives the network
//! and losses need, on rank-2 tensors, no broadcasting. Nodes are recorded
//! in construction order, which is already a topological order, so the
//! backward pass is a single reverse sweep that visits each node once.
//!
//! Where a forward value depends on a discrete selection (nearest neighbor,
//! argmax, overlap counts), the selection is treated as locally constant:
//! it is saved during the forward pass and gradients flow through the
//! selected elements only.

mod fdcheck;
mod tensor;

pub use fdcheck::{finite_diff_check, FdReport};
pub use tensor::Tensor;

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::geometry::{self, Mat3, Vec3};
use crate::math;
use crate::svd3::{self, KabschResult};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("objective must be a scalar, got {rows}x{cols}")]
    NonScalarObjective { rows: usize, cols: usize },
    #[error("non-finite value produced by node {node} ({label})")]
    NonFinite { node: usize, label: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct BnSaved {
    mean: Vec<f64>,
    var: Vec<f64>,
    inv_std: Vec<f64>,
    xhat: Tensor,
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    SubConst(NodeId),
    Relu(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        saved: BnSaved,
    },
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        inv_std: Vec<f64>,
        xhat: Tensor,
    },
    MaxPerSegment {
        x: NodeId,
        segments: usize,
        argmax: Vec<usize>,
    },
    ConcatGlobal {
        local: NodeId,
        global: NodeId,
    },
    SoftmaxPerSegment {
        x: NodeId,
        segments: usize,
    },
    WeightedPoints {
        probs: NodeId,
        points: Tensor,
        segments: usize,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    Sum(NodeId),
    Mean(NodeId),
    SqNorm(NodeId),
    L2Norm(NodeId),
    SmoothL1 {
        x: NodeId,
        beta: f64,
    },
    AsinClamped(NodeId),
    RotateRows {
        x: NodeId,
        rot: Mat3,
    },
    SegmentPointTransform {
        x: NodeId,
        m: NodeId,
        segments: usize,
    },
    Separation {
        kp: NodeId,
        floor: f64,
        nearest: Vec<usize>,
        dists: Vec<f64>,
        mean_nn: f64,
    },
    ShapeNn {
        kp: NodeId,
        cloud: Vec<Vec3>,
        nearest: Vec<usize>,
        dists: Vec<f64>,
    },
    BboxDiag {
        kp: NodeId,
        arg_lo: [usize; 3],
        arg_hi: [usize; 3],
        extents: [f64; 3],
    },
    KabschPose {
        src: NodeId,
        dst: NodeId,
        saved: KabschResult,
        centered_src: Vec<Vec3>,
        centered_dst: Vec<Vec3>,
    },
    Chamfer {
        kp: NodeId,
        cloud: Vec<Vec3>,
        kp_to_cloud: Vec<usize>,
        cloud_to_kp: Vec<usize>,
    },
}

struct Node {
    data: Tensor,
    op: Op,
}

/// Ordered node registry for one forward pass plus the gradients of the
/// most recent backward sweep. One tape is single-owner; independent
/// samples use independent tapes.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Tensor>,
    params: Vec<NodeId>,
    check_finite: bool,
    first_nonfinite: Option<(usize, &'static str)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const ASIN_CLAMP: f64 = 1.0 - 1e-12;
const BN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
            check_finite: true,
            first_nonfinite: None,
        }
    }

    /// Disables the per-node finite check (used by tight inner loops that
    /// validate results wholesale).
    pub fn without_finite_checks(mut self) -> Self {
        self.check_finite = false;
        self
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// First node that produced a non-finite value, if any.
    pub fn first_nonfinite(&self) -> Option<AutodiffError> {
        self.first_nonfinite
            .map(|(node, label)| AutodiffError::NonFinite { node, label })
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].data
    }

    /// Gradient accumulated for `id`; zero tensors before any backward call.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0)
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    fn push(&mut self, data: Tensor, op: Op, label: &'static str) -> NodeId {
        if self.check_finite && self.first_nonfinite.is_none() && !data.all_finite() {
            self.first_nonfinite = Some((self.nodes.len(), label));
        }
        self.nodes.push(Node { data, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, "constant")
    }

    /// A leaf registered as a trainable parameter; `params()` preserves
    /// registration order.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        let id = self.push(t, Op::Leaf, "param");
        self.params.push(id);
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a.0].data.shape(), self.nodes[b.0].data.shape());
        let mut out = self.nodes[a.0].data.clone();
        for (o, x) in out.data_mut().iter_mut().zip(self.nodes[b.0].data.data()) {
            *o += x;
        }
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a.0].data.shape(), self.nodes[b.0].data.shape());
        let mut out = self.nodes[a.0].data.clone();
        for (o, x) in out.data_mut().iter_mut().zip(self.nodes[b.0].data.data()) {
            *o -= x;
        }
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a.0].data.shape(), self.nodes[b.0].data.shape());
        let mut out = self.nodes[a.0].data.clone();
        for (o, x) in out.data_mut().iter_mut().zip(self.nodes[b.0].data.data()) {
            *o *= x;
        }
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut out = self.nodes[x.0].data.clone();
        for o in out.data_mut() {
            *o *= c;
        }
        self.push(out, Op::Scale(x, c), "scale")
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut out = self.nodes[x.0].data.clone();
        for o in out.data_mut() {
            *o += c;
        }
        self.push(out, Op::AddScalar(x), "add_scalar")
    }

    /// Elementwise x - t for a constant tensor t.
    pub fn sub_const(&mut self, x: NodeId, t: &Tensor) -> NodeId {
        assert_eq!(self.nodes[x.0].data.shape(), t.shape());
        let mut out = self.nodes[x.0].data.clone();
        for (o, v) in out.data_mut().iter_mut().zip(t.data()) {
            *o -= v;
        }
        self.push(out, Op::SubConst(x), "sub_const")
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.nodes[x.0].data.clone();
        for o in out.data_mut() {
            if *o < 0.0 {
                *o = 0.0;
            }
        }
        self.push(out, Op::Relu(x), "relu")
    }

    /// Pointwise linear layer: out = x w (+ b) with x (R, Ci), w (Ci, Co),
    /// b (Co, 1). Layers feeding straight into batchnorm carry no bias;
    /// the normalization shift makes one redundant.
    pub fn linear(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        label: &'static str,
    ) -> NodeId {
        let (rows, ci) = self.nodes[x.0].data.shape();
        let (wi, co) = self.nodes[w.0].data.shape();
        assert_eq!(ci, wi, "{label}: input width {ci} vs weight rows {wi}");
        if let Some(b) = b {
            assert_eq!(self.nodes[b.0].data.len(), co, "{label}: bias length");
        }
        let mut out = Tensor::zeros(rows, co);
        {
            let xd = &self.nodes[x.0].data;
            let wd = &self.nodes[w.0].data;
            for r in 0..rows {
                let xrow = xd.row(r);
                let orow = out.row_mut(r);
                if let Some(b) = b {
                    orow.copy_from_slice(self.nodes[b.0].data.data());
                }
                for (k, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = wd.row(k);
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        self.push(out, Op::Linear { x, w, b }, label)
    }

    /// Batch normalization over rows (training mode: statistics from this
    /// batch). Returns the normalized tensor; per-channel batch statistics
    /// stay readable through [`Tape::batchnorm_stats`].
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        label: &'static str,
    ) -> NodeId {
        let (rows, cols) = self.nodes[x.0].data.shape();
        assert!(rows >= 2, "{label}: batchnorm in training mode needs >= 2 rows");
        assert_eq!(self.nodes[gamma.0].data.len(), cols);
        assert_eq!(self.nodes[beta.0].data.len(), cols);
        let mut mean = vec![0.0; cols];
        let mut var = vec![0.0; cols];
        {
            let xd = &self.nodes[x.0].data;
            for r in 0..rows {
                for (c, v) in xd.row(r).iter().enumerate() {
                    mean[c] += v;
                }
            }
            for m in mean.iter_mut() {
                *m /= rows as f64;
            }
            for r in 0..rows {
                for (c, v) in xd.row(r).iter().enumerate() {
                    let d = v - mean[c];
                    var[c] += d * d;
                }
            }
            for v in var.iter_mut() {
                *v /= rows as f64;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + BN_EPS)).collect();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        {
            let xd = &self.nodes[x.0].data;
            let g = self.nodes[gamma.0].data.data();
            let bt = self.nodes[beta.0].data.data();
            for r in 0..rows {
                let xrow = xd.row(r);
                let hrow = xhat.row_mut(r);
                for c in 0..cols {
                    hrow[c] = (xrow[c] - mean[c]) * inv_std[c];
                }
            }
            for r in 0..rows {
                let hrow = xhat.row(r);
                let orow = out.row_mut(r);
                for c in 0..cols {
                    orow[c] = g[c] * hrow[c] + bt[c];
                }
            }
        }
        self.push(
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                saved: BnSaved {
                    mean,
                    var,
                    inv_std,
                    xhat,
                },
            },
            label,
        )
    }

    /// Batch normalization with frozen statistics (evaluation mode): a pure
    /// affine map, each row independent of every other row.
    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        label: &'static str,
    ) -> NodeId {
        let (rows, cols) = self.nodes[x.0].data.shape();
        assert_eq!(running_mean.len(), cols);
        assert_eq!(running_var.len(), cols);
        let inv_std: Vec<f64> = running_var
            .iter()
            .map(|v| 1.0 / math::sqrt(v + BN_EPS))
            .collect();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        {
            let xd = &self.nodes[x.0].data;
            let g = self.nodes[gamma.0].data.data();
            let bt = self.nodes[beta.0].data.data();
            for r in 0..rows {
                let xrow = xd.row(r);
                let hrow = xhat.row_mut(r);
                let orow = out.row_mut(r);
                for c in 0..cols {
                    hrow[c] = (xrow[c] - running_mean[c]) * inv_std[c];
                    orow[c] = g[c] * hrow[c] + bt[c];
                }
            }
        }
        self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                inv_std,
                xhat,
            },
            label,
        )
    }

    /// Batch statistics (mean, biased variance) saved by a training-mode
    /// batchnorm node.
    pub fn batchnorm_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].op {
            Op::BatchNormTrain { saved, .. } => Some((&saved.mean, &saved.var)),
            _ => None,
        }
    }

    /// Per-segment max over rows: (S*n, C) -> (S, C). Ties keep the first
    /// row.
    pub fn max_per_segment(&mut self, x: NodeId, segments: usize) -> NodeId {
        let (rows, cols) = self.nodes[x.0].data.shape();
        assert!(segments > 0 && rows % segments == 0);
        let per = rows / segments;
        let mut out = Tensor::zeros(segments, cols);
        let mut argmax = vec![0usize; segments * cols];
        {
            let xd = &self.nodes[x.0].data;
            for s in 0..segments {
                let orow = out.row_mut(s);
                orow.copy_from_slice(xd.row(s * per));
                for arg in argmax[s * cols..(s + 1) * cols].iter_mut() {
                    *arg = s * per;
                }
                for r in s * per + 1..(s + 1) * per {
                    let xrow = xd.row(r);
                    for c in 0..cols {
                        if xrow[c] > orow[c] {
                            orow[c] = xrow[c];
                            argmax[s * cols + c] = r;
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Op::MaxPerSegment {
                x,
                segments,
                argmax,
            },
            "max_per_segment",
        )
    }

    /// Appends each row's segment-global feature: (S*n, C1) and (S, C2)
    /// give (S*n, C1 + C2).
    pub fn concat_global(&mut self, local: NodeId, global: NodeId) -> NodeId {
        let (rows, c1) = self.nodes[local.0].data.shape();
        let (segments, c2) = self.nodes[global.0].data.shape();
        assert!(rows % segments == 0);
        let per = rows / segments;
        let mut out = Tensor::zeros(rows, c1 + c2);
        {
            let ld = &self.nodes[local.0].data;
            let gd = &self.nodes[global.0].data;
            for r in 0..rows {
                let orow = out.row_mut(r);
                orow[..c1].copy_from_slice(ld.row(r));
                orow[c1..].copy_from_slice(gd.row(r / per));
            }
        }
        self.push(out, Op::ConcatGlobal { local, global }, "concat_global")
    }

    /// Softmax over the rows of each segment, independently per column:
    /// within segment s, column k sums to one.
    pub fn softmax_per_segment(&mut self, x: NodeId, segments: usize) -> NodeId {
        let (rows, cols) = self.nodes[x.0].data.shape();
        assert!(segments > 0 && rows % segments == 0);
        let per = rows / segments;
        let mut out = Tensor::zeros(rows, cols);
        {
            let xd = &self.nodes[x.0].data;
            for s in 0..segments {
                for c in 0..cols {
                    let mut max = f64::NEG_INFINITY;
                    for r in s * per..(s + 1) * per {
                        max = max.max(xd.at(r, c));
                    }
                    let mut denom = 0.0;
                    for r in s * per..(s + 1) * per {
                        let e = math::exp(xd.at(r, c) - max);
                        out.row_mut(r)[c] = e;
                        denom += e;
                    }
                    for r in s * per..(s + 1) * per {
                        out.row_mut(r)[c] /= denom;
                    }
                }
            }
        }
        self.push(out, Op::SoftmaxPerSegment { x, segments }, "softmax")
    }

    /// Probability-weighted averages of the input points: probs (S*n, K)
    /// against constant points (S*n, 3) give keypoints (S*K, 3), grouped by
    /// segment.
    pub fn weighted_points(&mut self, probs: NodeId, points: &Tensor, segments: usize) -> NodeId {
        let (rows, k) = self.nodes[probs.0].data.shape();
        assert_eq!(points.shape(), (rows, 3));
        assert!(rows % segments == 0);
        let per = rows / segments;
        let mut out = Tensor::zeros(segments * k, 3);
        {
            let pd = &self.nodes[probs.0].data;
            for s in 0..segments {
                for r in s * per..(s + 1) * per {
                    let prow = pd.row(r);
                    let pt = points.row(r);
                    for (kk, &p) in prow.iter().enumerate() {
                        let orow = out.row_mut(s * k + kk);
                        orow[0] += p * pt[0];
                        orow[1] += p * pt[1];
                        orow[2] += p * pt[2];
                    }
                }
            }
        }
        self.push(
            out,
            Op::WeightedPoints {
                probs,
                points: points.clone(),
                segments,
            },
            "weighted_points",
        )
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (rows, cols) = self.nodes[x.0].data.shape();
        assert!(start + len <= rows);
        let mut out = Tensor::zeros(len, cols);
        for r in 0..len {
            out.row_mut(r)
                .copy_from_slice(self.nodes[x.0].data.row(start + r));
        }
        self.push(out, Op::SliceRows { x, start }, "slice_rows")
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = math::kahan_sum(self.nodes[x.0].data.data().iter().copied());
        self.push(Tensor::scalar(v), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.0].data.len() as f64;
        let v = math::kahan_sum(self.nodes[x.0].data.data().iter().copied()) / n;
        self.push(Tensor::scalar(v), Op::Mean(x), "mean")
    }

    pub fn sq_norm(&mut self, x: NodeId) -> NodeId {
        let v = math::kahan_sum(self.nodes[x.0].data.data().iter().map(|v| v * v));
        self.push(Tensor::scalar(v), Op::SqNorm(x), "sq_norm")
    }

    pub fn l2_norm(&mut self, x: NodeId) -> NodeId {
        let v = math::sqrt(math::kahan_sum(
            self.nodes[x.0].data.data().iter().map(|v| v * v),
        ));
        self.push(Tensor::scalar(v), Op::L2Norm(x), "l2_norm")
    }

    pub fn smooth_l1(&mut self, x: NodeId, beta: f64) -> NodeId {
        let mut out = self.nodes[x.0].data.clone();
        for o in out.data_mut() {
            *o = math::smooth_l1(*o, beta);
        }
        self.push(out, Op::SmoothL1 { x, beta }, "smooth_l1")
    }

    /// asin with the argument clamped to [-1 + 1e-12, 1 - 1e-12]; the
    /// derivative is zero in the clamped region.
    pub fn asin_clamped(&mut self, x: NodeId) -> NodeId {
        let mut out = self.nodes[x.0].data.clone();
        for o in out.data_mut() {
            *o = math::asin(o.clamp(-ASIN_CLAMP, ASIN_CLAMP));
        }
        self.push(out, Op::AsinClamped(x), "asin_clamped")
    }

    /// Applies a fixed rotation to every row of a (K, 3) tensor.
    pub fn rotate_rows(&mut self, x: NodeId, rot: &Mat3) -> NodeId {
        let (rows, cols) = self.nodes[x.0].data.shape();
        assert_eq!(cols, 3);
        let mut out = Tensor::zeros(rows, 3);
        for r in 0..rows {
            let p = self.nodes[x.0].data.row(r);
            let v = [p[0], p[1], p[2]];
            let orow = out.row_mut(r);
            for (i, slot) in orow.iter_mut().enumerate() {
                *slot = geometry::dot3(rot[i], v);
            }
        }
        self.push(out, Op::RotateRows { x, rot: *rot }, "rotate_rows")
    }

    /// Applies a learned per-segment 3x3 matrix to every point of that
    /// segment: x (S*n, 3) and m (S, 9) row-major matrices give
    /// y_r = M_{seg(r)} x_r. Both inputs receive gradients.
    pub fn segment_point_transform(&mut self, x: NodeId, m: NodeId, segments: usize) -> NodeId {
        let (rows, cols) = self.nodes[x.0].data.shape();
        assert_eq!(cols, 3);
        assert_eq!(self.nodes[m.0].data.shape(), (segments, 9));
        assert!(rows % segments == 0);
        let per = rows / segments;
        let mut out = Tensor::zeros(rows, 3);
        {
            let xd = &self.nodes[x.0].data;
            let md = &self.nodes[m.0].data;
            for r in 0..rows {
                let mrow = md.row(r / per);
                let p = xd.row(r);
                let orow = out.row_mut(r);
                for i in 0..3 {
                    orow[i] = mrow[3 * i] * p[0] + mrow[3 * i + 1] * p[1] + mrow[3 * i + 2] * p[2];
                }
            }
        }
        self.push(
            out,
            Op::SegmentPointTransform { x, m, segments },
            "point_transform",
        )
    }

    /// Separation objective on a (K, 3) keypoint tensor: reciprocal of the
    /// clamped mean nearest-other-keypoint distance. Neighbor choices are
    /// locally constant.
    pub fn separation(&mut self, kp: NodeId, floor: f64) -> NodeId {
        let pts = self.nodes[kp.0].data.to_points();
        let k = pts.len();
        assert!(k >= 2);
        let mut nearest = vec![0usize; k];
        let mut dists = vec![0.0; k];
        for i in 0..k {
            let mut best = f64::INFINITY;
            let mut best_j = 0;
            for (j, p) in pts.iter().enumerate() {
                if j == i {
                    continue;
                }
                let d = geometry::sq_dist3(pts[i], *p);
                if d < best {
                    best = d;
                    best_j = j;
                }
            }
            nearest[i] = best_j;
            dists[i] = math::sqrt(best);
        }
        let mean_nn = math::kahan_sum(dists.iter().copied()) / k as f64;
        let value = 1.0 / mean_nn.max(floor);
        self.push(
            Tensor::scalar(value),
            Op::Separation {
                kp,
                floor,
                nearest,
                dists,
                mean_nn,
            },
            "separation",
        )
    }

    /// Shape objective: mean distance of each keypoint to its nearest point
    /// in a constant cloud.
    pub fn shape_nn(&mut self, kp: NodeId, cloud: &[Vec3]) -> NodeId {
        let pts = self.nodes[kp.0].data.to_points();
        let mut nearest = vec![0usize; pts.len()];
        let mut dists = vec![0.0; pts.len()];
        for (i, q) in pts.iter().enumerate() {
            let mut best = f64::INFINITY;
            let mut best_j = 0;
            for (j, p) in cloud.iter().enumerate() {
                let d = geometry::sq_dist3(*q, *p);
                if d < best {
                    best = d;
                    best_j = j;
                }
            }
            nearest[i] = best_j;
            dists[i] = math::sqrt(best);
        }
        let value = math::kahan_sum(dists.iter().copied()) / pts.len() as f64;
        self.push(
            Tensor::scalar(value),
            Op::ShapeNn {
                kp,
                cloud: cloud.to_vec(),
                nearest,
                dists,
            },
            "shape_nn",
        )
    }

    /// Axis-aligned bounding-box diagonal of a (K, 3) tensor. Gradients
    /// flow to the extremal keypoints per axis.
    pub fn bbox_diag(&mut self, kp: NodeId) -> NodeId {
        let pts = self.nodes[kp.0].data.to_points();
        let mut arg_lo = [0usize; 3];
        let mut arg_hi = [0usize; 3];
        let mut lo = pts[0];
        let mut hi = pts[0];
        for (i, p) in pts.iter().enumerate().skip(1) {
            for ax in 0..3 {
                if p[ax] < lo[ax] {
                    lo[ax] = p[ax];
                    arg_lo[ax] = i;
                }
                if p[ax] > hi[ax] {
                    hi[ax] = p[ax];
                    arg_hi[ax] = i;
                }
            }
        }
        let extents = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
        let diag = math::sqrt(extents.iter().map(|e| e * e).sum());
        self.push(
            Tensor::scalar(diag),
            Op::BboxDiag {
                kp,
                arg_lo,
                arg_hi,
                extents,
            },
            "bbox_diag",
        )
    }

    /// Differentiable rigid alignment: the rotation mapping `src` onto
    /// `dst` (centroids removed) as a (3, 3) node. The forward value is the
    /// same Kabsch solve as `geometry::procrustes`; the backward rule is
    /// the SVD sensitivity formula in [`svd3::kabsch_backward`].
    pub fn kabsch_pose(&mut self, src: NodeId, dst: NodeId) -> NodeId {
        let src_pts = self.nodes[src.0].data.to_points();
        let dst_pts = self.nodes[dst.0].data.to_points();
        assert_eq!(src_pts.len(), dst_pts.len());
        let (h, c_src, c_dst) = geometry::cross_covariance(&src_pts, &dst_pts);
        let saved = svd3::kabsch_rotation(&h);
        let centered_src: Vec<Vec3> = src_pts.iter().map(|p| geometry::sub3(*p, c_src)).collect();
        let centered_dst: Vec<Vec3> = dst_pts.iter().map(|p| geometry::sub3(*p, c_dst)).collect();
        let mut data = Tensor::zeros(3, 3);
        for i in 0..3 {
            data.row_mut(i).copy_from_slice(&saved.rotation[i]);
        }
        self.push(
            data,
            Op::KabschPose {
                src,
                dst,
                saved,
                centered_src,
                centered_dst,
            },
            "kabsch_pose",
        )
    }

    /// Whether the Kabsch solve behind a [`Tape::kabsch_pose`] node hit a
    /// degenerate configuration.
    pub fn kabsch_degenerate(&self, id: NodeId) -> Option<bool> {
        match &self.nodes[id.0].op {
            Op::KabschPose { saved, .. } => Some(saved.degenerate),
            _ => None,
        }
    }

    /// Symmetric squared chamfer distance between a (K, 3) keypoint tensor
    /// and a constant cloud.
    pub fn chamfer(&mut self, kp: NodeId, cloud: &[Vec3]) -> NodeId {
        let pts = self.nodes[kp.0].data.to_points();
        let mut kp_to_cloud = vec![0usize; pts.len()];
        let mut fwd = 0.0;
        for (i, q) in pts.iter().enumerate() {
            let mut best = f64::INFINITY;
            let mut best_j = 0;
            for (j, p) in cloud.iter().enumerate() {
                let d = geometry::sq_dist3(*q, *p);
                if d < best {
                    best = d;
                    best_j = j;
                }
            }
            kp_to_cloud[i] = best_j;
            fwd += best;
        }
        let mut cloud_to_kp = vec![0usize; cloud.len()];
        let mut back = 0.0;
        for (j, p) in cloud.iter().enumerate() {
            let mut best = f64::INFINITY;
            let mut best_i = 0;
            for (i, q) in pts.iter().enumerate() {
                let d = geometry::sq_dist3(*p, *q);
                if d < best {
                    best = d;
                    best_i = i;
                }
            }
            cloud_to_kp[j] = best_i;
            back += best;
        }
        let value = fwd / pts.len() as f64 + back / cloud.len() as f64;
        self.push(
            Tensor::scalar(value),
            Op::Chamfer {
                kp,
                cloud: cloud.to_vec(),
                kp_to_cloud,
                cloud_to_kp,
            },
            "chamfer",
        )
    }

    /// Reverse sweep from a scalar objective. Gradients accumulate across
    /// calls; each call contributes one full pass.
    pub fn backward(&mut self, objective: NodeId) -> Result<(), AutodiffError> {
        let shape = self.nodes[objective.0].data.shape();
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarObjective {
                rows: shape.0,
                cols: shape.1,
            });
        }
        if self.grads.len() != self.nodes.len() {
            self.grads = self
                .nodes
                .iter()
                .map(|n| Tensor::zeros(n.data.rows(), n.data.cols()))
                .collect();
        }
        let mut pass: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.data.rows(), n.data.cols()))
            .collect();
        pass[objective.0].data_mut()[0] = 1.0;

        for i in (0..=objective.0).rev() {
            let (parents, rest) = pass.split_at_mut(i);
            let upstream = &rest[0];
            if upstream.data().iter().all(|g| *g == 0.0) {
                continue;
            }
            self.backward_node(i, upstream, parents);
        }

        for (acc, p) in self.grads.iter_mut().zip(&pass) {
            for (a, v) in acc.data_mut().iter_mut().zip(p.data()) {
                *a += v;
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, upstream: &Tensor, parents: &mut [Tensor]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (g, u) in parents[a.0].data_mut().iter_mut().zip(upstream.data()) {
                    *g += u;
                }
                for (g, u) in parents[b.0].data_mut().iter_mut().zip(upstream.data()) {
                    *g += u;
                }
            }
            Op::Sub(a, b) => {
                for (g, u) in parents[a.0].data_mut().iter_mut().zip(upstream.data()) {
                    *g += u;
                }
                for (g, u) in parents[b.0].data_mut().iter_mut().zip(upstream.data()) {
                    *g -= u;
                }
            }
            Op::Mul(a, b) => {
                let (pa, pb) = (*a, *b);
                let a_data = self.nodes[pa.0].data.clone();
                let b_data = self.nodes[pb.0].data.clone();
                for ((g, u), v) in parents[pa.0]
                    .data_mut()
                    .iter_mut()
                    .zip(upstream.data())
                    .zip(b_data.data())
                {
                    *g += u * v;
                }
                for ((g, u), v) in parents[pb.0]
                    .data_mut()
                    .iter_mut()
                    .zip(upstream.data())
                    .zip(a_data.data())
                {
                    *g += u * v;
                }
            }
            Op::Scale(x, c) => {
                for (g, u) in parents[x.0].data_mut().iter_mut().zip(upstream.data()) {
                    *g += c * u;
                }
            }
            Op::AddScalar(x) | Op::SubConst(x) => {
                for (g, u) in parents[x.0].data_mut().iter_mut().zip(upstream.data()) {
                    *g += u;
                }
            }
            Op::Relu(x) => {
                let xd = &self.nodes[x.0].data;
                for ((g, u), v) in parents[x.0]
                    .data_mut()
                    .iter_mut()
                    .zip(upstream.data())
                    .zip(xd.data())
                {
                    if *v > 0.0 {
                        *g += u;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (rows, _ci) = self.nodes[x.0].data.shape();
                let xd = &self.nodes[x.0].data;
                let wd = &self.nodes[w.0].data;
                if let Some(b) = b {
                    let gb = parents[b.0].data_mut();
                    for r in 0..rows {
                        for (g, u) in gb.iter_mut().zip(upstream.row(r)) {
                            *g += u;
                        }
                    }
                }
                // dw: dw[k][:] += x[r][k] * dy[r][:]
                {
                    let gw = &mut parents[w.0];
                    for r in 0..rows {
                        let xrow = xd.row(r);
                        let urow = upstream.row(r);
                        for (k, &xv) in xrow.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            for (g, u) in gw.row_mut(k).iter_mut().zip(urow) {
                                *g += xv * u;
                            }
                        }
                    }
                }
                // dx: dx[r][k] += dot(dy[r][:], w[k][:])
                {
                    let gx = &mut parents[x.0];
                    for r in 0..rows {
                        let urow = upstream.row(r);
                        let grow = gx.row_mut(r);
                        for (k, g) in grow.iter_mut().enumerate() {
                            let wrow = wd.row(k);
                            let mut acc = 0.0;
                            for (u, wv) in urow.iter().zip(wrow) {
                                acc += u * wv;
                            }
                            *g += acc;
                        }
                    }
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                saved,
            } => {
                let (rows, cols) = self.nodes[x.0].data.shape();
                let g_data = self.nodes[gamma.0].data.clone();
                let rn = rows as f64;
                // dbeta, dgamma
                {
                    let gb = parents[beta.0].data_mut();
                    for r in 0..rows {
                        for (g, u) in gb.iter_mut().zip(upstream.row(r)) {
                            *g += u;
                        }
                    }
                }
                {
                    let gg = parents[gamma.0].data_mut();
                    for r in 0..rows {
                        let urow = upstream.row(r);
                        let hrow = saved.xhat.row(r);
                        for c in 0..cols {
                            gg[c] += urow[c] * hrow[c];
                        }
                    }
                }
                // dx = gamma * inv_std * (dy - mean(dy) - xhat * mean(dy*xhat))
                let mut mean_dy = vec![0.0; cols];
                let mut mean_dyh = vec![0.0; cols];
                for r in 0..rows {
                    let urow = upstream.row(r);
                    let hrow = saved.xhat.row(r);
                    for c in 0..cols {
                        mean_dy[c] += urow[c];
                        mean_dyh[c] += urow[c] * hrow[c];
                    }
                }
                for c in 0..cols {
                    mean_dy[c] /= rn;
                    mean_dyh[c] /= rn;
                }
                let gx = &mut parents[x.0];
                for r in 0..rows {
                    let urow = upstream.row(r);
                    let hrow = saved.xhat.row(r);
                    let grow = gx.row_mut(r);
                    for c in 0..cols {
                        grow[c] += g_data.data()[c]
                            * saved.inv_std[c]
                            * (urow[c] - mean_dy[c] - hrow[c] * mean_dyh[c]);
                    }
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                inv_std,
                xhat,
            } => {
                let (rows, cols) = self.nodes[x.0].data.shape();
                let g_data = self.nodes[gamma.0].data.clone();
                {
                    let gb = parents[beta.0].data_mut();
                    for r in 0..rows {
                        for (g, u) in gb.iter_mut().zip(upstream.row(r)) {
                            *g += u;
                        }
                    }
                }
                {
                    let gg = parents[gamma.0].data_mut();
                    for r in 0..rows {
                        let urow = upstream.row(r);
                        let hrow = xhat.row(r);
                        for c in 0..cols {
                            gg[c] += urow[c] * hrow[c];
                        }
                    }
                }
                let gx = &mut parents[x.0];
                for r in 0..rows {
                    let urow = upstream.row(r);
                    let grow = gx.row_mut(r);
                    for c in 0..cols {
                        grow[c] += g_data.data()[c] * inv_std[c] * urow[c];
                    }
                }
            }
            Op::MaxPerSegment {
                x,
                segments,
                argmax,
            } => {
                let cols = self.nodes[x.0].data.cols();
                let gx = &mut parents[x.0];
                for s in 0..*segments {
                    let urow = upstream.row(s);
                    for c in 0..cols {
                        let r = argmax[s * cols + c];
                        gx.row_mut(r)[c] += urow[c];
                    }
                }
            }
            Op::ConcatGlobal { local, global } => {
                let (rows, c1) = self.nodes[local.0].data.shape();
                let segments = self.nodes[global.0].data.rows();
                let per = rows / segments;
                let (lo, hi) = (*local, *global);
                {
                    let gl = &mut parents[lo.0];
                    for r in 0..rows {
                        let urow = upstream.row(r);
                        for (g, u) in gl.row_mut(r).iter_mut().zip(&urow[..c1]) {
                            *g += u;
                        }
                    }
                }
                {
                    let gg = &mut parents[hi.0];
                    for r in 0..rows {
                        let urow = upstream.row(r);
                        for (g, u) in gg.row_mut(r / per).iter_mut().zip(&urow[c1..]) {
                            *g += u;
                        }
                    }
                }
            }
            Op::SoftmaxPerSegment { x, segments } => {
                let (rows, cols) = node.data.shape();
                let per = rows / segments;
                let p = &node.data;
                let gx = &mut parents[x.0];
                for s in 0..*segments {
                    for c in 0..cols {
                        let mut dot = 0.0;
                        for r in s * per..(s + 1) * per {
                            dot += upstream.at(r, c) * p.at(r, c);
                        }
                        for r in s * per..(s + 1) * per {
                            gx.row_mut(r)[c] += p.at(r, c) * (upstream.at(r, c) - dot);
                        }
                    }
                }
            }
            Op::WeightedPoints {
                probs,
                points,
                segments,
            } => {
                let (rows, k) = self.nodes[probs.0].data.shape();
                let per = rows / segments;
                let gp = &mut parents[probs.0];
                for r in 0..rows {
                    let s = r / per;
                    let pt = points.row(r);
                    let grow = gp.row_mut(r);
                    for (kk, g) in grow.iter_mut().enumerate() {
                        let urow = upstream.row(s * k + kk);
                        *g += urow[0] * pt[0] + urow[1] * pt[1] + urow[2] * pt[2];
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let gx = &mut parents[x.0];
                for r in 0..upstream.rows() {
                    for (g, u) in gx.row_mut(start + r).iter_mut().zip(upstream.row(r)) {
                        *g += u;
                    }
                }
            }
            Op::Sum(x) => {
                let u = upstream.scalar_value();
                for g in parents[x.0].data_mut() {
                    *g += u;
                }
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].data.len() as f64;
                let u = upstream.scalar_value() / n;
                for g in parents[x.0].data_mut() {
                    *g += u;
                }
            }
            Op::SqNorm(x) => {
                let u = upstream.scalar_value();
                let xd = &self.nodes[x.0].data;
                for (g, v) in parents[x.0].data_mut().iter_mut().zip(xd.data()) {
                    *g += 2.0 * v * u;
                }
            }
            Op::L2Norm(x) => {
                let u = upstream.scalar_value();
                let norm = node.data.scalar_value();
                // below the rounding floor the direction x/norm is pure
                // noise; take the zero subgradient at the cone tip
                if norm > 1e-12 {
                    let xd = &self.nodes[x.0].data;
                    for (g, v) in parents[x.0].data_mut().iter_mut().zip(xd.data()) {
                        *g += v / norm * u;
                    }
                }
            }
            Op::SmoothL1 { x, beta } => {
                let xd = &self.nodes[x.0].data;
                for ((g, u), v) in parents[x.0]
                    .data_mut()
                    .iter_mut()
                    .zip(upstream.data())
                    .zip(xd.data())
                {
                    *g += math::smooth_l1_grad(*v, *beta) * u;
                }
            }
            Op::AsinClamped(x) => {
                let xd = &self.nodes[x.0].data;
                for ((g, u), v) in parents[x.0]
                    .data_mut()
                    .iter_mut()
                    .zip(upstream.data())
                    .zip(xd.data())
                {
                    if v.abs() < ASIN_CLAMP {
                        *g += u / math::sqrt(1.0 - v * v);
                    }
                }
            }
            Op::RotateRows { x, rot } => {
                let gx = &mut parents[x.0];
                for r in 0..upstream.rows() {
                    let u = upstream.row(r);
                    let uv = [u[0], u[1], u[2]];
                    let grow = gx.row_mut(r);
                    for (c, g) in grow.iter_mut().enumerate() {
                        // R^T u
                        *g += rot[0][c] * uv[0] + rot[1][c] * uv[1] + rot[2][c] * uv[2];
                    }
                }
            }
            Op::SegmentPointTransform { x, m, segments } => {
                let (rows, _) = self.nodes[x.0].data.shape();
                let per = rows / segments;
                let xd = &self.nodes[x.0].data;
                let md = &self.nodes[m.0].data;
                let (x_id, m_id) = (*x, *m);
                {
                    let gm = &mut parents[m_id.0];
                    for r in 0..rows {
                        let grow = gm.row_mut(r / per);
                        let u = upstream.row(r);
                        let p = xd.row(r);
                        for i in 0..3 {
                            for j in 0..3 {
                                grow[3 * i + j] += u[i] * p[j];
                            }
                        }
                    }
                }
                {
                    let gx = &mut parents[x_id.0];
                    for r in 0..rows {
                        let mrow = md.row(r / per);
                        let u = upstream.row(r);
                        let grow = gx.row_mut(r);
                        for j in 0..3 {
                            grow[j] += mrow[j] * u[0] + mrow[3 + j] * u[1] + mrow[6 + j] * u[2];
                        }
                    }
                }
            }
            Op::Separation {
                kp,
                floor,
                nearest,
                dists,
                mean_nn,
            } => {
                if *mean_nn <= *floor {
                    return;
                }
                let u = upstream.scalar_value();
                let k = nearest.len() as f64;
                let coeff = -u / (mean_nn * mean_nn) / k;
                let pts = self.nodes[kp.0].data.to_points();
                let gkp = &mut parents[kp.0];
                for (i, (&j, &d)) in nearest.iter().zip(dists).enumerate() {
                    if d <= 0.0 {
                        continue;
                    }
                    let dir = geometry::scale3(geometry::sub3(pts[i], pts[j]), coeff / d);
                    for ax in 0..3 {
                        gkp.row_mut(i)[ax] += dir[ax];
                        gkp.row_mut(j)[ax] -= dir[ax];
                    }
                }
            }
            Op::ShapeNn {
                kp,
                cloud,
                nearest,
                dists,
            } => {
                let u = upstream.scalar_value();
                let k = nearest.len() as f64;
                let pts = self.nodes[kp.0].data.to_points();
                let gkp = &mut parents[kp.0];
                for (i, (&j, &d)) in nearest.iter().zip(dists).enumerate() {
                    if d <= 0.0 {
                        continue;
                    }
                    let dir = geometry::scale3(geometry::sub3(pts[i], cloud[j]), u / (k * d));
                    for ax in 0..3 {
                        gkp.row_mut(i)[ax] += dir[ax];
                    }
                }
            }
            Op::BboxDiag {
                kp,
                arg_lo,
                arg_hi,
                extents,
            } => {
                let diag = node.data.scalar_value();
                if diag <= 0.0 {
                    return;
                }
                let u = upstream.scalar_value();
                let gkp = &mut parents[kp.0];
                for ax in 0..3 {
                    let g = u * extents[ax] / diag;
                    gkp.row_mut(arg_hi[ax])[ax] += g;
                    gkp.row_mut(arg_lo[ax])[ax] -= g;
                }
            }
            Op::KabschPose {
                src,
                dst,
                saved,
                centered_src,
                centered_dst,
            } => {
                let mut r_bar = [[0.0; 3]; 3];
                for i2 in 0..3 {
                    r_bar[i2].copy_from_slice(upstream.row(i2));
                }
                let h_bar = svd3::kabsch_backward(saved, &r_bar);
                let (s_id, d_id) = (*src, *dst);
                {
                    let gs = &mut parents[s_id.0];
                    for (j, db) in centered_dst.iter().enumerate() {
                        let grow = gs.row_mut(j);
                        for (c, g) in grow.iter_mut().enumerate() {
                            *g += h_bar[0][c] * db[0] + h_bar[1][c] * db[1] + h_bar[2][c] * db[2];
                        }
                    }
                }
                {
                    let gd = &mut parents[d_id.0];
                    for (j, sa) in centered_src.iter().enumerate() {
                        let grow = gd.row_mut(j);
                        for (r, g) in grow.iter_mut().enumerate() {
                            *g += h_bar[r][0] * sa[0] + h_bar[r][1] * sa[1] + h_bar[r][2] * sa[2];
                        }
                    }
                }
            }
            Op::Chamfer {
                kp,
                cloud,
                kp_to_cloud,
                cloud_to_kp,
            } => {
                let u = upstream.scalar_value();
                let pts = self.nodes[kp.0].data.to_points();
                let kn = pts.len() as f64;
                let nn = cloud.len() as f64;
                let gkp = &mut parents[kp.0];
                for (i, &j) in kp_to_cloud.iter().enumerate() {
                    let d = geometry::scale3(geometry::sub3(pts[i], cloud[j]), 2.0 * u / kn);
                    for ax in 0..3 {
                        gkp.row_mut(i)[ax] += d[ax];
                    }
                }
                for (j, &i) in cloud_to_kp.iter().enumerate() {
                    let d = geometry::scale3(geometry::sub3(pts[i], cloud[j]), 2.0 * u / nn);
                    for ax in 0..3 {
                        gkp.row_mut(i)[ax] += d[ax];
                    }
                }
            }
        }
    }
}
