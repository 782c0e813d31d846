//! Minimal reverse-mode differentiation engine providing exactly the layer
//! set the two networks need: convolution (2D and anisotropic 3D under one
//! kernel), relu, max pooling, nearest-neighbor upsampling, channel
//! concatenation, channel softmax, and weighted cross-entropy.
//!
//! All values are f64 in memory; parameters are serialized to f32 on disk by
//! the checkpoint writer. Graphs are define-by-run: ops append nodes to a
//! [`Graph`] arena and [`Graph::backward`] walks the arena in reverse.
//!
//! Layout conventions: an activation of shape `[c, nz, ny, nx]` is stored
//! row-major (x fastest, matching `Volume3`); convolution weights are
//! `[co, ci, kz, ky, kx]`. Public APIs take spatial triples in (x, y, z)
//! order and convert internally.

mod kernels;

use kernels::{conv_backward_input, conv_backward_params, conv_forward, sum8, ConvGeom};

use crate::error::{Error, Result};
use crate::rng::substream;
use rand::Rng;

/// An n-dimensional value array. `shape` is the row-major memory shape;
/// activations use `[c, nz, ny, nx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if values.len() != n {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} implies {n} values, got {}", values.len()),
            ));
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, values: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], values: vec![v] }
    }

    /// An activation tensor; `dims` are (nx, ny, nz).
    pub fn activation(channels: usize, dims: [usize; 3], values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![channels, dims[2], dims[1], dims[0]], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Shape of an activation node, in (x, y, z) spatial convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActShape {
    pub c: usize,
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl ActShape {
    pub fn spatial(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn numel(&self) -> usize {
        self.c * self.spatial()
    }

    fn to_vec(self) -> Vec<usize> {
        vec![self.c, self.nz, self.ny, self.nx]
    }

    fn from_shape(shape: &[usize], context: &str) -> Result<Self> {
        if shape.len() != 4 {
            return Err(Error::shape(
                context,
                format!("expected activation shape [c, nz, ny, nx], got {shape:?}"),
            ));
        }
        Ok(ActShape { c: shape[0], nz: shape[1], ny: shape[2], nx: shape[3] })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geom: ConvGeom,
    },
    Relu {
        input: NodeId,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<u32>,
    },
    Upsample {
        input: NodeId,
        factor: [usize; 3], // (fx, fy, fz)
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    SoftmaxChannels {
        input: NodeId,
    },
    WeightedCrossEntropy {
        probs: NodeId,
        labels: NodeId,
        class_weights: Vec<f64>,
        total_weight: f64,
    },
    Sum {
        input: NodeId,
    },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Define-by-run computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node { shape, values, grad: None, requires_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, tensor: Tensor, requires_grad: bool) -> NodeId {
        self.push(tensor.shape, tensor.values, requires_grad, Op::Leaf)
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn act_shape(&self, id: NodeId) -> Result<ActShape> {
        ActShape::from_shape(&self.nodes[id.0].shape, "act_shape")
    }

    /// Gradient of the last backward passes w.r.t. this node, if populated.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Cross-correlation with zero "same" padding. `kernel` is (kx, ky, kz),
    /// all odd; weight shape must be `[co, ci, kz, ky, kx]` and bias `[co]`.
    pub fn conv(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        kernel: [usize; 3],
    ) -> Result<NodeId> {
        let act = ActShape::from_shape(self.shape(input), "conv input")?;
        let wshape = self.shape(weight).to_vec();
        if wshape.len() != 5 {
            return Err(Error::shape(
                "conv weight",
                format!("expected [co, ci, kz, ky, kx], got {wshape:?}"),
            ));
        }
        let [kx, ky, kz] = kernel;
        if kx % 2 == 0 || ky % 2 == 0 || kz % 2 == 0 {
            return Err(Error::invalid("conv", format!("kernel {kernel:?} dims must be odd")));
        }
        if wshape[2] != kz || wshape[3] != ky || wshape[4] != kx {
            return Err(Error::shape(
                "conv weight",
                format!("weight kernel dims {:?} != kernel (kx={kx}, ky={ky}, kz={kz})", &wshape[2..]),
            ));
        }
        if wshape[1] != act.c {
            return Err(Error::shape(
                "conv channels",
                format!("input has {} channels, weight expects {}", act.c, wshape[1]),
            ));
        }
        let co = wshape[0];
        if self.shape(bias) != [co] {
            return Err(Error::shape(
                "conv bias",
                format!("bias shape {:?} != [{co}]", self.shape(bias)),
            ));
        }
        let geom = ConvGeom {
            co,
            ci: act.c,
            nx: act.nx,
            ny: act.ny,
            nz: act.nz,
            kx,
            ky,
            kz,
        };
        let mut out = vec![0.0; co * act.spatial()];
        conv_forward(
            &self.nodes[input.0].values,
            &self.nodes[weight.0].values,
            &self.nodes[bias.0].values,
            &geom,
            &mut out,
        );
        let rg = self.requires(input) || self.requires(weight) || self.requires(bias);
        let shape = ActShape { c: co, ..act }.to_vec();
        Ok(self.push(shape, out, rg, Op::Conv { input, weight, bias, geom }))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let values: Vec<f64> = self.nodes[input.0].values.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.nodes[input.0].shape.clone();
        let rg = self.requires(input);
        self.push(shape, values, rg, Op::Relu { input })
    }

    /// Per-window maximum with `factor` (fx, fy, fz); spatial dims must be
    /// divisible by the factor.
    pub fn maxpool(&mut self, input: NodeId, factor: [usize; 3]) -> Result<NodeId> {
        let act = ActShape::from_shape(self.shape(input), "maxpool input")?;
        let [fx, fy, fz] = factor;
        if fx == 0 || fy == 0 || fz == 0 {
            return Err(Error::invalid("maxpool", "factor components must be positive"));
        }
        if act.nx % fx != 0 || act.ny % fy != 0 || act.nz % fz != 0 {
            return Err(Error::invalid(
                "maxpool",
                format!(
                    "dims ({}, {}, {}) not divisible by factor ({fx}, {fy}, {fz})",
                    act.nx, act.ny, act.nz
                ),
            ));
        }
        let out_shape = ActShape { c: act.c, nx: act.nx / fx, ny: act.ny / fy, nz: act.nz / fz };
        let mut out = vec![0.0; out_shape.numel()];
        let mut argmax = vec![0u32; out_shape.numel()];
        let inp = &self.nodes[input.0].values;
        let mut oi = 0;
        for c in 0..act.c {
            let base_c = c * act.spatial();
            for zo in 0..out_shape.nz {
                for yo in 0..out_shape.ny {
                    for xo in 0..out_shape.nx {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for dz in 0..fz {
                            let z = zo * fz + dz;
                            for dy in 0..fy {
                                let y = yo * fy + dy;
                                let row = base_c + (z * act.ny + y) * act.nx + xo * fx;
                                for dx in 0..fx {
                                    let v = inp[row + dx];
                                    if v > best {
                                        best = v;
                                        best_idx = row + dx;
                                    }
                                }
                            }
                        }
                        out[oi] = best;
                        argmax[oi] = best_idx as u32;
                        oi += 1;
                    }
                }
            }
        }
        let rg = self.requires(input);
        Ok(self.push(out_shape.to_vec(), out, rg, Op::MaxPool { input, argmax }))
    }

    /// Nearest-neighbor upsampling by `factor` (fx, fy, fz).
    pub fn upsample(&mut self, input: NodeId, factor: [usize; 3]) -> Result<NodeId> {
        let act = ActShape::from_shape(self.shape(input), "upsample input")?;
        let [fx, fy, fz] = factor;
        if fx == 0 || fy == 0 || fz == 0 {
            return Err(Error::invalid("upsample", "factor components must be positive"));
        }
        let out_shape = ActShape { c: act.c, nx: act.nx * fx, ny: act.ny * fy, nz: act.nz * fz };
        let inp = &self.nodes[input.0].values;
        let mut out = vec![0.0; out_shape.numel()];
        let mut oi = 0;
        for c in 0..act.c {
            let base_c = c * act.spatial();
            for z in 0..out_shape.nz {
                let zi = z / fz;
                for y in 0..out_shape.ny {
                    let yi = y / fy;
                    let irow = base_c + (zi * act.ny + yi) * act.nx;
                    for x in 0..out_shape.nx {
                        out[oi] = inp[irow + x / fx];
                        oi += 1;
                    }
                }
            }
        }
        let rg = self.requires(input);
        Ok(self.push(out_shape.to_vec(), out, rg, Op::Upsample { input, factor }))
    }

    /// Channel concatenation; `a`'s channels precede `b`'s.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = ActShape::from_shape(self.shape(a), "concat lhs")?;
        let sb = ActShape::from_shape(self.shape(b), "concat rhs")?;
        if (sa.nx, sa.ny, sa.nz) != (sb.nx, sb.ny, sb.nz) {
            return Err(Error::shape(
                "concat",
                format!(
                    "spatial dims differ: ({}, {}, {}) vs ({}, {}, {})",
                    sa.nx, sa.ny, sa.nz, sb.nx, sb.ny, sb.nz
                ),
            ));
        }
        let out_shape = ActShape { c: sa.c + sb.c, ..sa };
        let mut out = Vec::with_capacity(out_shape.numel());
        out.extend_from_slice(&self.nodes[a.0].values);
        out.extend_from_slice(&self.nodes[b.0].values);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out_shape.to_vec(), out, rg, Op::Concat { a, b }))
    }

    /// Per-voxel softmax over the channel axis, computed with max
    /// subtraction for stability. Rejects non-finite logits.
    pub fn softmax_channels(&mut self, input: NodeId) -> Result<NodeId> {
        let act = ActShape::from_shape(self.shape(input), "softmax input")?;
        if act.c == 0 {
            return Err(Error::invalid("softmax", "needs at least one channel"));
        }
        let inp = &self.nodes[input.0].values;
        if let Some(bad) = inp.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "softmax_channels".into(),
                details: format!("logit value {bad}"),
            });
        }
        let spatial = act.spatial();
        let mut out = vec![0.0; inp.len()];
        for v in 0..spatial {
            let mut m = f64::NEG_INFINITY;
            for c in 0..act.c {
                m = m.max(inp[c * spatial + v]);
            }
            let mut denom = 0.0;
            for c in 0..act.c {
                let e = (inp[c * spatial + v] - m).exp();
                out[c * spatial + v] = e;
                denom += e;
            }
            for c in 0..act.c {
                out[c * spatial + v] /= denom;
            }
        }
        let rg = self.requires(input);
        let shape = self.nodes[input.0].shape.clone();
        Ok(self.push(shape, out, rg, Op::SoftmaxChannels { input }))
    }

    /// Weight-normalized cross-entropy over class probabilities:
    /// `sum_v w[y(v)] * -ln p[y(v)](v) / sum_v w[y(v)]`.
    ///
    /// `labels` is a one-channel activation whose values are class indices.
    pub fn weighted_cross_entropy(
        &mut self,
        probs: NodeId,
        labels: NodeId,
        class_weights: &[f64],
    ) -> Result<NodeId> {
        let act = ActShape::from_shape(self.shape(probs), "wce probs")?;
        let lact = ActShape::from_shape(self.shape(labels), "wce labels")?;
        if lact.c != 1 || (lact.nx, lact.ny, lact.nz) != (act.nx, act.ny, act.nz) {
            return Err(Error::shape(
                "wce labels",
                format!(
                    "expected one-channel labels on the probs grid, got c={} ({}, {}, {})",
                    lact.c, lact.nx, lact.ny, lact.nz
                ),
            ));
        }
        if class_weights.len() != act.c {
            return Err(Error::invalid(
                "wce",
                format!("{} class weights for {} channels", class_weights.len(), act.c),
            ));
        }
        let spatial = act.spatial();
        let p = &self.nodes[probs.0].values;
        let lab = &self.nodes[labels.0].values;
        let mut total_weight = 0.0;
        let mut loss = 0.0;
        for v in 0..spatial {
            let y = lab[v];
            if y < 0.0 || y.fract() != 0.0 || y as usize >= act.c {
                return Err(Error::invalid(
                    "wce",
                    format!("label {y} at voxel {v} outside 0..{}", act.c),
                ));
            }
            let y = y as usize;
            let w = class_weights[y];
            let pv = p[y * spatial + v].max(f64::MIN_POSITIVE);
            total_weight += w;
            loss += w * -pv.ln();
        }
        if total_weight == 0.0 {
            return Err(Error::invalid("wce", "total class weight is zero"));
        }
        loss /= total_weight;
        let rg = self.requires(probs);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::WeightedCrossEntropy {
                probs,
                labels,
                class_weights: class_weights.to_vec(),
                total_weight,
            },
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s = sum8(&self.nodes[input.0].values);
        let rg = self.requires(input);
        self.push(vec![1], vec![s], rg, Op::Sum { input })
    }

    /// Reverse-mode accumulation from a scalar loss. Populates `grad` on
    /// every node with `requires_grad`; repeated calls accumulate additively.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape),
            ));
        }
        // Per-pass work buffers; persistent grads only receive the result so
        // that repeated calls accumulate without double-counting.
        let mut work: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        work[loss.0] = Some(vec![1.0]);

        macro_rules! take_or_zero {
            ($buf:expr, $id:expr, $len:expr) => {
                $buf[$id.0].get_or_insert_with(|| vec![0.0; $len])
            };
        }

        for i in (0..=loss.0).rev() {
            let Some(gout) = work[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            // Split borrows: read node i immutably, write parents via work.
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv { input, weight, bias, geom } => {
                    let geom = *geom;
                    let (input, weight, bias) = (*input, *weight, *bias);
                    if self.requires(input) {
                        let gin = take_or_zero!(work, input, self.nodes[input.0].values.len());
                        conv_backward_input(&gout, &self.nodes[weight.0].values, &geom, gin);
                    }
                    if self.requires(weight) || self.requires(bias) {
                        let mut gw = work[weight.0]
                            .take()
                            .unwrap_or_else(|| vec![0.0; self.nodes[weight.0].values.len()]);
                        let mut gb = work[bias.0]
                            .take()
                            .unwrap_or_else(|| vec![0.0; self.nodes[bias.0].values.len()]);
                        conv_backward_params(
                            &gout,
                            &self.nodes[input.0].values,
                            &geom,
                            &mut gw,
                            &mut gb,
                        );
                        work[weight.0] = Some(gw);
                        work[bias.0] = Some(gb);
                    }
                }
                Op::Relu { input } => {
                    let input = *input;
                    if self.requires(input) {
                        let n = self.nodes[input.0].values.len();
                        let src: Vec<f64> = self.nodes[input.0]
                            .values
                            .iter()
                            .zip(gout.iter())
                            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                            .collect();
                        let gin = take_or_zero!(work, input, n);
                        for (a, b) in gin.iter_mut().zip(src.iter()) {
                            *a += b;
                        }
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let input = *input;
                    if self.requires(input) {
                        let idx: Vec<u32> = argmax.clone();
                        let n = self.nodes[input.0].values.len();
                        let gin = take_or_zero!(work, input, n);
                        for (o, &src) in idx.iter().enumerate() {
                            gin[src as usize] += gout[o];
                        }
                    }
                }
                Op::Upsample { input, factor } => {
                    let input = *input;
                    let factor = *factor;
                    if self.requires(input) {
                        let in_act =
                            ActShape::from_shape(&self.nodes[input.0].shape, "upsample grad")?;
                        let out_act = ActShape::from_shape(&self.nodes[i].shape, "upsample grad")?;
                        let n = self.nodes[input.0].values.len();
                        let gin = take_or_zero!(work, input, n);
                        let mut oi = 0;
                        for c in 0..out_act.c {
                            let base = c * in_act.spatial();
                            for z in 0..out_act.nz {
                                let zi = z / factor[2];
                                for y in 0..out_act.ny {
                                    let yi = y / factor[1];
                                    let irow = base + (zi * in_act.ny + yi) * in_act.nx;
                                    for x in 0..out_act.nx {
                                        gin[irow + x / factor[0]] += gout[oi];
                                        oi += 1;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Concat { a, b } => {
                    let (a, b) = (*a, *b);
                    let na = self.nodes[a.0].values.len();
                    if self.requires(a) {
                        let gin = take_or_zero!(work, a, na);
                        for (x, g) in gin.iter_mut().zip(&gout[..na]) {
                            *x += g;
                        }
                    }
                    if self.requires(b) {
                        let nb = self.nodes[b.0].values.len();
                        let gin = take_or_zero!(work, b, nb);
                        for (x, g) in gin.iter_mut().zip(&gout[na..]) {
                            *x += g;
                        }
                    }
                }
                Op::SoftmaxChannels { input } => {
                    let input = *input;
                    if self.requires(input) {
                        let act = ActShape::from_shape(&self.nodes[i].shape, "softmax grad")?;
                        let spatial = act.spatial();
                        let p = &self.nodes[i].values;
                        let n = p.len();
                        let mut local = vec![0.0; n];
                        for v in 0..spatial {
                            let mut dotpg = 0.0;
                            for c in 0..act.c {
                                dotpg += p[c * spatial + v] * gout[c * spatial + v];
                            }
                            for c in 0..act.c {
                                let idx = c * spatial + v;
                                local[idx] = p[idx] * (gout[idx] - dotpg);
                            }
                        }
                        let gin = take_or_zero!(work, input, n);
                        for (a, b) in gin.iter_mut().zip(local.iter()) {
                            *a += b;
                        }
                    }
                }
                Op::WeightedCrossEntropy { probs, labels, class_weights, total_weight } => {
                    let probs = *probs;
                    let labels = *labels;
                    let tw = *total_weight;
                    let cw = class_weights.clone();
                    if self.requires(probs) {
                        let act = ActShape::from_shape(&self.nodes[probs.0].shape, "wce grad")?;
                        let spatial = act.spatial();
                        let g0 = gout[0];
                        let p = self.nodes[probs.0].values.clone();
                        let lab = self.nodes[labels.0].values.clone();
                        let n = p.len();
                        let gin = take_or_zero!(work, probs, n);
                        for v in 0..spatial {
                            let y = lab[v] as usize;
                            let idx = y * spatial + v;
                            let pv = p[idx].max(f64::MIN_POSITIVE);
                            gin[idx] += g0 * -(cw[y] / (pv * tw));
                        }
                    }
                }
                Op::Sum { input } => {
                    let input = *input;
                    if self.requires(input) {
                        let n = self.nodes[input.0].values.len();
                        let g0 = gout[0];
                        let gin = take_or_zero!(work, input, n);
                        for x in gin.iter_mut() {
                            *x += g0;
                        }
                    }
                }
            }
            // Fold this pass's contribution into the persistent grad.
            let node = &mut self.nodes[i];
            let grad = node.grad.get_or_insert_with(|| vec![0.0; node.values.len()]);
            for (a, b) in grad.iter_mut().zip(gout.iter()) {
                *a += b;
            }
        }
        Ok(())
    }
}

/// Outcome of a finite-difference check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub n_checked: usize,
    pub within_tolerance: bool,
}

/// Compare the analytic gradient of `build`'s scalar output w.r.t. `input`
/// against central differences on a random subset (at least 64) of input
/// coordinates. Relative error uses `max(|analytic|, |numeric|, 1e-8)` as
/// denominator.
pub fn grad_check<F>(mut build: F, input: &Tensor, step: f64, tolerance: f64) -> Result<GradCheck>
where
    F: FnMut(&mut Graph, NodeId) -> Result<NodeId>,
{
    if step <= 0.0 {
        return Err(Error::invalid("grad_check", "step must be positive"));
    }
    let mut graph = Graph::new();
    let x = graph.leaf(input.clone(), true);
    let loss = build(&mut graph, x)?;
    if graph.values(loss).len() != 1 {
        return Err(Error::invalid("grad_check", "builder must produce a scalar"));
    }
    graph.backward(loss)?;
    let analytic = graph
        .grad(x)
        .ok_or_else(|| Error::invalid("grad_check", "no gradient on input"))?
        .to_vec();

    let n = input.numel();
    let coords: Vec<usize> = if n <= 64 {
        (0..n).collect()
    } else {
        let mut rng = substream(0x6772_6164, &[n as u64]);
        let mut seen = std::collections::BTreeSet::new();
        while seen.len() < 64 {
            seen.insert(rng.gen_range(0..n));
        }
        seen.into_iter().collect()
    };

    let mut eval = |values: &[f64]| -> Result<f64> {
        let mut g = Graph::new();
        let t = Tensor::new(input.shape().to_vec(), values.to_vec())?;
        let x = g.leaf(t, false);
        let loss = build(&mut g, x)?;
        Ok(g.values(loss)[0])
    };

    let mut max_rel = 0.0f64;
    let mut perturbed = input.values().to_vec();
    for &i in &coords {
        let orig = perturbed[i];
        perturbed[i] = orig + step;
        let fp = eval(&perturbed)?;
        perturbed[i] = orig - step;
        let fm = eval(&perturbed)?;
        perturbed[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic[i] - numeric).abs() / denom;
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheck {
        max_rel_error: max_rel,
        n_checked: coords.len(),
        within_tolerance: max_rel < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn act(c: usize, dims: [usize; 3], values: Vec<f64>) -> Tensor {
        Tensor::activation(c, dims, values).unwrap()
    }

    #[test]
    fn relu_values_and_subgradient() {
        let mut g = Graph::new();
        let x = g.leaf(act(1, [3, 1, 1], vec![-1.0, 0.0, 2.0]), true);
        let r = g.relu(x);
        assert_eq!(g.values(r), &[0.0, 0.0, 2.0]);
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_and_upsample_compose_to_identity() {
        let mut g = Graph::new();
        let x = g.leaf(act(1, [2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]), false);
        let p = g.maxpool(x, [2, 2, 1]).unwrap();
        assert_eq!(g.values(p), &[4.0]);
        let u = g.upsample(p, [2, 2, 1]).unwrap();
        assert_eq!(g.values(u), &[4.0, 4.0, 4.0, 4.0]);
        let p2 = g.maxpool(u, [2, 2, 1]).unwrap();
        assert_eq!(g.values(p2), g.values(p));
    }

    #[test]
    fn maxpool_rejects_non_divisible_dims() {
        let mut g = Graph::new();
        let x = g.leaf(act(1, [3, 2, 1], vec![0.0; 6]), false);
        assert!(g.maxpool(x, [2, 2, 1]).is_err());
    }

    #[test]
    fn concat_keeps_channel_order_and_identity() {
        let mut g = Graph::new();
        let a = g.leaf(act(3, [2, 1, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let b = g.leaf(act(2, [2, 1, 1], vec![7.0, 8.0, 9.0, 10.0]), false);
        let cat = g.concat(a, b).unwrap();
        assert_eq!(g.shape(cat)[0], 5);
        assert_eq!(&g.values(cat)[..6], g.values(a));

        let empty = g.leaf(act(0, [2, 1, 1], vec![]), false);
        let same = g.concat(a, empty).unwrap();
        assert_eq!(g.values(same), g.values(a));

        // gradient of sum(concat(a, b)) w.r.t. a == gradient of sum(a)
        let s = g.sum(cat);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn concat_is_associative_in_channel_content() {
        let mut g = Graph::new();
        let a = g.leaf(act(1, [2, 1, 1], vec![1.0, 2.0]), false);
        let b = g.leaf(act(2, [2, 1, 1], vec![3.0, 4.0, 5.0, 6.0]), false);
        let c = g.leaf(act(1, [2, 1, 1], vec![7.0, 8.0]), false);
        let ab = g.concat(a, b).unwrap();
        let ab_c = g.concat(ab, c).unwrap();
        let bc = g.concat(b, c).unwrap();
        let a_bc = g.concat(a, bc).unwrap();
        assert_eq!(g.values(ab_c), g.values(a_bc));
    }

    #[test]
    fn softmax_symmetry_and_closed_form() {
        let mut g = Graph::new();
        let x = g.leaf(act(2, [1, 1, 1], vec![0.0, 0.0]), false);
        let p = g.softmax_channels(x).unwrap();
        assert_eq!(g.values(p), &[0.5, 0.5]);

        let y = g.leaf(act(2, [1, 1, 1], vec![2.0f64.ln(), 0.0]), false);
        let q = g.softmax_channels(y).unwrap();
        assert!((g.values(q)[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((g.values(q)[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance_and_normalization() {
        let mut rng = substream(5, &[9]);
        let logits: Vec<f64> = (0..3 * 8).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let shifted: Vec<f64> = logits.iter().map(|v| v + 13.25).collect();
        let mut g = Graph::new();
        let a = g.leaf(act(3, [8, 1, 1], logits), false);
        let b = g.leaf(act(3, [8, 1, 1], shifted), false);
        let pa = g.softmax_channels(a).unwrap();
        let pb = g.softmax_channels(b).unwrap();
        for (x, y) in g.values(pa).iter().zip(g.values(pb)) {
            assert!((x - y).abs() < 1e-12);
        }
        for v in 0..8 {
            let s: f64 = (0..3).map(|c| g.values(pa)[c * 8 + v]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::new();
        let x = g.leaf(act(2, [1, 1, 1], vec![f64::NAN, 0.0]), false);
        assert!(matches!(g.softmax_channels(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn wce_perfect_prediction_is_zero() {
        let mut g = Graph::new();
        // One-hot correct probabilities on every voxel.
        let p = g.leaf(act(2, [2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]), false);
        let lab = g.leaf(act(1, [2, 1, 1], vec![0.0, 1.0]), false);
        let loss = g.weighted_cross_entropy(p, lab, &[1.0, 25.0]).unwrap();
        assert_eq!(g.values(loss)[0], 0.0);
    }

    #[test]
    fn wce_single_voxel_closed_form() {
        // p = (0.5, 0.5), true class 1, weights (1, 25):
        // 25 * ln 2 / 25 = ln 2.
        let mut g = Graph::new();
        let p = g.leaf(act(2, [1, 1, 1], vec![0.5, 0.5]), false);
        let lab = g.leaf(act(1, [1, 1, 1], vec![1.0]), false);
        let loss = g.weighted_cross_entropy(p, lab, &[1.0, 25.0]).unwrap();
        assert!((g.values(loss)[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn wce_unit_weights_match_plain_mean() {
        let mut rng = substream(17, &[3]);
        let n = 12;
        let mut probs = vec![0.0; 2 * n];
        let mut labels = vec![0.0; n];
        let mut plain = 0.0;
        for v in 0..n {
            let p1: f64 = rng.gen_range(0.05..0.95);
            probs[v] = 1.0 - p1;
            probs[n + v] = p1;
            let y = usize::from(rng.gen_bool(0.5));
            labels[v] = y as f64;
            plain += -(if y == 1 { p1 } else { 1.0 - p1 }).ln();
        }
        plain /= n as f64;
        let mut g = Graph::new();
        let p = g.leaf(act(2, [n, 1, 1], probs), false);
        let lab = g.leaf(act(1, [n, 1, 1], labels), false);
        let loss = g.weighted_cross_entropy(p, lab, &[1.0, 1.0]).unwrap();
        assert!((g.values(loss)[0] - plain).abs() < 1e-12);
    }

    #[test]
    fn wce_rejects_zero_total_weight() {
        let mut g = Graph::new();
        let p = g.leaf(act(2, [1, 1, 1], vec![0.5, 0.5]), false);
        let lab = g.leaf(act(1, [1, 1, 1], vec![0.0]), false);
        assert!(g.weighted_cross_entropy(p, lab, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones_and_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(act(1, [4, 1, 1], vec![1.0, -2.0, 3.0, 0.5]), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0; 4], "repeated backward accumulates");
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(act(1, [4, 1, 1], vec![0.0; 4]), true);
        let r = g.relu(x);
        assert!(g.backward(r).is_err());
    }

    #[test]
    fn conv_shape_mismatch_errors_name_the_dimension() {
        let mut g = Graph::new();
        let x = g.leaf(act(2, [3, 3, 1], vec![0.0; 18]), false);
        let w = g.leaf(Tensor::zeros(vec![4, 3, 1, 3, 3]), false);
        let b = g.leaf(Tensor::zeros(vec![4]), false);
        match g.conv(x, w, b, [3, 3, 1]) {
            Err(Error::ShapeMismatch { context, details }) => {
                assert_eq!(context, "conv channels");
                assert!(details.contains("2 channels"));
            }
            other => panic!("expected channel mismatch, got {other:?}"),
        }
    }

    #[test]
    fn grad_check_linear_layer_is_tight() {
        // Pure linear map: central differences are exact up to rounding.
        // All-positive weights keep every input coordinate's gradient well
        // away from zero, so relative error is meaningful everywhere.
        let input = act(1, [4, 4, 1], (0..16).map(|i| i as f64 * 0.1 - 0.8).collect());
        let weight = Tensor::new(vec![2, 1, 1, 3, 3], (0..18).map(|i| (i as f64) * 0.02 + 0.05).collect()).unwrap();
        let bias = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
        let report = grad_check(
            |g, x| {
                let w = g.leaf(weight.clone(), false);
                let b = g.leaf(bias.clone(), false);
                let c = g.conv(x, w, b, [3, 3, 1])?;
                Ok(g.sum(c))
            },
            &input,
            1e-3,
            1e-6,
        )
        .unwrap();
        assert!(report.within_tolerance, "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn grad_check_relu_away_from_kink() {
        let mut rng = substream(23, &[1]);
        // |x| > 10h keeps the finite difference on one side of the kink.
        let values: Vec<f64> = (0..32)
            .map(|_| {
                let mag = rng.gen_range(0.05..1.0);
                if rng.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        let input = act(1, [32, 1, 1], values);
        let report = grad_check(
            |g, x| {
                let r = g.relu(x);
                Ok(g.sum(r))
            },
            &input,
            1e-3,
            1e-6,
        )
        .unwrap();
        assert!(report.within_tolerance, "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn grad_check_composite_conv_relu_softmax_wce() {
        let mut rng = substream(29, &[2]);
        let input = act(2, [6, 5, 1], (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let weight =
            Tensor::new(vec![2, 2, 1, 3, 3], (0..36).map(|_| rng.gen_range(-0.5..0.5)).collect())
                .unwrap();
        let bias = Tensor::new(vec![2], vec![0.05, -0.05]).unwrap();
        let labels = act(1, [6, 5, 1], (0..30).map(|_| f64::from(rng.gen_bool(0.3))).collect());
        let report = grad_check(
            |g, x| {
                let w = g.leaf(weight.clone(), false);
                let b = g.leaf(bias.clone(), false);
                let c = g.conv(x, w, b, [3, 3, 1])?;
                let r = g.relu(c);
                let p = g.softmax_channels(r)?;
                let lab = g.leaf(labels.clone(), false);
                g.weighted_cross_entropy(p, lab, &[1.0, 25.0])
            },
            &input,
            1e-3,
            1e-3,
        )
        .unwrap();
        assert!(report.within_tolerance, "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn grad_check_anisotropic_3d_kernels() {
        let mut rng = substream(31, &[4]);
        let input = act(2, [4, 4, 3], (0..96).map(|_| rng.gen_range(-1.0..1.0)).collect());
        for kernel in [[3, 3, 1], [3, 3, 3], [1, 1, 1]] {
            let wn = 3 * 2 * kernel[0] * kernel[1] * kernel[2];
            let weight = Tensor::new(
                vec![3, 2, kernel[2], kernel[1], kernel[0]],
                (0..wn).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            )
            .unwrap();
            let bias = Tensor::new(vec![3], vec![0.1, 0.0, -0.1]).unwrap();
            let report = grad_check(
                |g, x| {
                    let w = g.leaf(weight.clone(), false);
                    let b = g.leaf(bias.clone(), false);
                    let c = g.conv(x, w, b, kernel)?;
                    let r = g.relu(c);
                    Ok(g.sum(r))
                },
                &input,
                1e-3,
                1e-3,
            )
            .unwrap();
            assert!(
                report.within_tolerance,
                "kernel {kernel:?}: max rel err {}",
                report.max_rel_error
            );
        }
    }

    #[test]
    fn grad_check_pool_and_upsample_path() {
        let mut rng = substream(37, &[6]);
        let input = act(1, [4, 4, 1], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let report = grad_check(
            |g, x| {
                let p = g.maxpool(x, [2, 2, 1])?;
                let u = g.upsample(p, [2, 2, 1])?;
                Ok(g.sum(u))
            },
            &input,
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(report.within_tolerance, "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = substream(41, &[8]);
        let input = act(4, [16, 16, 2], (0..4 * 512).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let weight = Tensor::new(
            vec![8, 4, 1, 3, 3],
            (0..8 * 4 * 9).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        )
        .unwrap();
        let bias = Tensor::zeros(vec![8]);
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(input.clone(), false);
            let w = g.leaf(weight.clone(), false);
            let b = g.leaf(bias.clone(), false);
            let c = g.conv(x, w, b, [3, 3, 1]).unwrap();
            g.values(c).to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
