//! A small tape-based reverse-mode autodiff engine over `ndarray`.
//!
//! Forward calls append nodes (op + computed value) to a [`Tape`];
//! [`Tape::backward`] walks the tape in reverse and accumulates parameter
//! gradients into the [`ParamStore`]. Values are reference-counted so leaves
//! and parameter snapshots are cheap. Everything is single-threaded and
//! deterministic; loss reductions accumulate in f64.

pub mod adam;
pub mod kernels;
pub mod layers;

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{ArrayD, Axis, Ix3, Ix4, IxDyn};

use kernels::Pad4;

pub type NodeId = usize;
pub type ParamId = usize;

/// One named tensor: a trainable parameter or a persistent buffer
/// (batch-norm running statistics).
pub struct ParamEntry {
    pub name: String,
    value: Rc<ArrayD<f32>>,
    pub grad: Option<ArrayD<f32>>,
    pub trainable: bool,
}

/// Flat registry of every parameter and buffer of a model group, addressed
/// by stable hierarchical names (e.g. `gen.coarse.enc0.conv.w`).
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: String, value: ArrayD<f32>, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value: Rc::new(value),
            grad: None,
            trainable,
        });
        id
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: ArrayD<f32>) -> ParamId {
        self.insert(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: ArrayD<f32>) -> ParamId {
        self.insert(name.into(), value, false)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].name
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f32> {
        &self.entries[id].value
    }

    pub fn value_rc(&self, id: ParamId) -> Rc<ArrayD<f32>> {
        Rc::clone(&self.entries[id].value)
    }

    /// Replace a value (checkpoint load, optimizer update). Shape-checked.
    pub fn set_value(&mut self, id: ParamId, value: ArrayD<f32>) {
        assert_eq!(
            self.entries[id].value.shape(),
            value.shape(),
            "shape change for {}",
            self.entries[id].name
        );
        self.entries[id].value = Rc::new(value);
    }

    /// In-place mutation; copies first if a tape still holds a snapshot.
    pub fn update_value(&mut self, id: ParamId, f: impl FnOnce(&mut ArrayD<f32>)) {
        f(Rc::make_mut(&mut self.entries[id].value));
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id].trainable
    }

    pub fn accum_grad(&mut self, id: ParamId, delta: &ArrayD<f32>) {
        match &mut self.entries[id].grad {
            Some(g) => *g += delta,
            slot => *slot = Some(delta.clone()),
        }
    }

    pub fn grad(&self, id: ParamId) -> Option<&ArrayD<f32>> {
        self.entries[id].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate()
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, e)| e.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect()
    }

    /// Total scalar count of trainable parameters under a name prefix.
    pub fn num_trainable(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, e)| e.trainable && e.name.starts_with(prefix))
            .map(|(_, e)| e.value.len())
            .sum()
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Detach,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: Pad4,
    },
    ConvT2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f32>,
        invstd: Vec<f32>,
        batch_stats: bool,
    },
    Relu(NodeId),
    LeakyRelu {
        x: NodeId,
        slope: f32,
    },
    Tanh(NodeId),
    Sigmoid(NodeId),
    SoftmaxC(NodeId),
    Add {
        a: NodeId,
        b: NodeId,
    },
    ConcatC {
        a: NodeId,
        b: NodeId,
    },
    SliceC {
        x: NodeId,
        start: usize,
        len: usize,
    },
    PadZero {
        x: NodeId,
        pad: Pad4,
    },
    BlockMean {
        x: NodeId,
        factor: usize,
    },
    Upsample2 {
        x: NodeId,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<u32>,
    },
    MeanAll(NodeId),
    LogClamp {
        x: NodeId,
        eps: f32,
    },
    OneMinus(NodeId),
    SumSqDiffScaled {
        a: NodeId,
        b: NodeId,
        scale: f64,
    },
    MseAgainst {
        x: NodeId,
        t: NodeId,
    },
    CrossEntropyMean {
        logits: NodeId,
        targets: ArrayD<u8>,
    },
    WeightedSum {
        terms: Vec<(NodeId, f64)>,
    },
}

struct Node {
    value: Rc<ArrayD<f32>>,
    op: Op,
    needs_grad: bool,
}

/// The computation record for one training step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn scalar(v: f64) -> ArrayD<f32> {
    ArrayD::from_elem(IxDyn(&[1]), v as f32)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f32> {
        &self.nodes[id].value
    }

    pub fn value_rc(&self, id: NodeId) -> Rc<ArrayD<f32>> {
        Rc::clone(&self.nodes[id].value)
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value.iter().next().copied().unwrap() as f64
    }

    fn push(&mut self, value: ArrayD<f32>, op: Op, needs_grad: bool) -> NodeId {
        self.push_rc(Rc::new(value), op, needs_grad)
    }

    fn push_rc(&mut self, value: Rc<ArrayD<f32>>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn leaf(&mut self, value: ArrayD<f32>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, store: &ParamStore, pid: ParamId) -> NodeId {
        self.push_rc(store.value_rc(pid), Op::Param(pid), store.is_trainable(pid))
    }

    /// Stop-gradient: same value, no backward flow.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        self.push_rc(self.value_rc(x), Op::Detach, false)
    }

    fn as4(&self, id: NodeId) -> ndarray::ArrayView4<'_, f32> {
        self.nodes[id]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("op needs an NCHW tensor")
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: Pad4) -> NodeId {
        let out = kernels::conv2d_fwd(
            self.as4(x),
            self.as4(w),
            self.nodes[b]
                .value
                .view()
                .into_dimensionality()
                .expect("bias is 1-D"),
            stride,
            pad,
        );
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(out.into_dyn(), Op::Conv2d { x, w, b, stride, pad }, needs)
    }

    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let out = kernels::convt2d_fwd(
            self.as4(x),
            self.as4(w),
            self.nodes[b]
                .value
                .view()
                .into_dimensionality()
                .expect("bias is 1-D"),
        );
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(out.into_dyn(), Op::ConvT2d { x, w, b }, needs)
    }

    /// Batch normalization over (N,H,W) per channel. In training mode uses
    /// batch statistics and updates the running buffers in the store; in
    /// eval mode normalizes with the stored running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        store: &mut ParamStore,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        rmean: ParamId,
        rvar: ParamId,
        training: bool,
        momentum: f64,
        eps: f64,
    ) -> NodeId {
        let xv = self.as4(x);
        let (n, c, h, w) = xv.dim();
        let count = (n * h * w) as f64;
        let (mean, var): (Vec<f64>, Vec<f64>) = if training {
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for ci in 0..c {
                let plane = xv.index_axis(Axis(1), ci);
                let m: f64 = plane.iter().map(|&v| v as f64).sum::<f64>() / count;
                let v: f64 = plane
                    .iter()
                    .map(|&v| {
                        let d = v as f64 - m;
                        d * d
                    })
                    .sum::<f64>()
                    / count;
                mean[ci] = m;
                var[ci] = v;
            }
            // update running stats (unbiased variance, the usual convention)
            let bessel = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            store.update_value(rmean, |rm| {
                for (ci, slot) in rm.iter_mut().enumerate() {
                    *slot = ((1.0 - momentum) * *slot as f64 + momentum * mean[ci]) as f32;
                }
            });
            store.update_value(rvar, |rv| {
                for (ci, slot) in rv.iter_mut().enumerate() {
                    *slot = ((1.0 - momentum) * *slot as f64 + momentum * var[ci] * bessel) as f32;
                }
            });
            (mean, var)
        } else {
            let mean = store.value(rmean).iter().map(|&v| v as f64).collect();
            let var = store.value(rvar).iter().map(|&v| v as f64).collect();
            (mean, var)
        };
        let invstd: Vec<f32> = var.iter().map(|&v| (1.0 / (v + eps).sqrt()) as f32).collect();
        let mean_f: Vec<f32> = mean.iter().map(|&v| v as f32).collect();
        let g = &self.nodes[gamma].value;
        let bt = &self.nodes[beta].value;
        let mut out = ndarray::Array4::<f32>::zeros((n, c, h, w));
        for ci in 0..c {
            let scale = g[ci] * invstd[ci];
            let shift = bt[ci] - mean_f[ci] * scale;
            let src = xv.index_axis(Axis(1), ci);
            let mut dst = out.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut dst)
                .and(&src)
                .for_each(|o, &v| *o = v * scale + shift);
        }
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out.into_dyn(),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean_f,
                invstd,
                batch_stats: training,
            },
            needs,
        )
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f32) -> f32, op: Op) -> NodeId {
        let out = self.nodes[x].value.mapv(f);
        let needs = self.ng(x);
        self.push(out, op, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f32) -> NodeId {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu { x, slope })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f32::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    /// Softmax across the channel axis of an NCHW tensor.
    pub fn softmax_channels(&mut self, x: NodeId) -> NodeId {
        let xv = self.as4(x);
        let (n, c, h, w) = xv.dim();
        let mut out = ndarray::Array4::<f32>::zeros((n, c, h, w));
        for ni in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let mut mx = f32::NEG_INFINITY;
                    for ci in 0..c {
                        mx = mx.max(xv[(ni, ci, y, xx)]);
                    }
                    let mut denom = 0.0f32;
                    for ci in 0..c {
                        let e = (xv[(ni, ci, y, xx)] - mx).exp();
                        out[(ni, ci, y, xx)] = e;
                        denom += e;
                    }
                    for ci in 0..c {
                        out[(ni, ci, y, xx)] /= denom;
                    }
                }
            }
        }
        let needs = self.ng(x);
        self.push(out.into_dyn(), Op::SoftmaxC(x), needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.nodes[a].value.shape(),
            self.nodes[b].value.shape(),
            "elementwise add needs equal shapes"
        );
        let out = &*self.nodes[a].value + &*self.nodes[b].value;
        let needs = self.ng(a) || self.ng(b);
        self.push(out, Op::Add { a, b }, needs)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.as4(a);
        let bv = self.as4(b);
        let out = ndarray::concatenate(Axis(1), &[av, bv]).expect("concat shape mismatch");
        let needs = self.ng(a) || self.ng(b);
        self.push(out.into_dyn(), Op::ConcatC { a, b }, needs)
    }

    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let out = self
            .as4(x)
            .slice(ndarray::s![.., start..start + len, .., ..])
            .to_owned();
        let needs = self.ng(x);
        self.push(out.into_dyn(), Op::SliceC { x, start, len }, needs)
    }

    pub fn pad_zero(&mut self, x: NodeId, pad: Pad4) -> NodeId {
        let out = kernels::pad_zero_fwd(self.as4(x), pad);
        let needs = self.ng(x);
        self.push(out.into_dyn(), Op::PadZero { x, pad }, needs)
    }

    /// Mean over factor×factor blocks (aligned bilinear downsampling).
    pub fn block_mean(&mut self, x: NodeId, factor: usize) -> NodeId {
        let out = kernels::block_mean_fwd(self.as4(x), factor);
        let needs = self.ng(x);
        self.push(out.into_dyn(), Op::BlockMean { x, factor }, needs)
    }

    pub fn upsample2_bilinear(&mut self, x: NodeId) -> NodeId {
        let out = kernels::upsample2_bilinear_fwd(self.as4(x));
        let needs = self.ng(x);
        self.push(out.into_dyn(), Op::Upsample2 { x }, needs)
    }

    pub fn maxpool2(&mut self, x: NodeId) -> NodeId {
        let (out, argmax) = kernels::maxpool2_fwd(self.as4(x));
        let needs = self.ng(x);
        self.push(out.into_dyn(), Op::MaxPool2 { x, argmax }, needs)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.iter().map(|&v| v as f64).sum::<f64>()
            / self.nodes[x].value.len() as f64;
        let needs = self.ng(x);
        self.push(scalar(v), Op::MeanAll(x), needs)
    }

    /// ln(clamp(x, eps, 1−eps)); gradient is zero where clamped.
    pub fn log_clamped(&mut self, x: NodeId, eps: f32) -> NodeId {
        let out = self.nodes[x].value.mapv(|v| v.clamp(eps, 1.0 - eps).ln());
        let needs = self.ng(x);
        self.push(out, Op::LogClamp { x, eps }, needs)
    }

    pub fn one_minus(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| 1.0 - v, Op::OneMinus(x))
    }

    /// scale · Σ (a − b)², accumulated in f64. The feature-matching unit.
    pub fn sum_sq_diff_scaled(&mut self, a: NodeId, b: NodeId, scale: f64) -> NodeId {
        assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let s: f64 = self.nodes[a]
            .value
            .iter()
            .zip(self.nodes[b].value.iter())
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum();
        let needs = self.ng(a) || self.ng(b);
        self.push(scalar(s * scale), Op::SumSqDiffScaled { a, b, scale }, needs)
    }

    /// Mean squared error against a target node (typically a constant leaf).
    pub fn mse_against(&mut self, x: NodeId, t: NodeId) -> NodeId {
        assert_eq!(self.nodes[x].value.shape(), self.nodes[t].value.shape());
        let n = self.nodes[x].value.len() as f64;
        let s: f64 = self.nodes[x]
            .value
            .iter()
            .zip(self.nodes[t].value.iter())
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        let needs = self.ng(x) || self.ng(t);
        self.push(scalar(s / n), Op::MseAgainst { x, t }, needs)
    }

    /// Mean cross-entropy between NCHW logits and NHW integer class targets.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: ArrayD<u8>) -> NodeId {
        let lv = self.as4(logits);
        let (n, c, h, w) = lv.dim();
        let tv = targets.view().into_dimensionality::<Ix3>().expect("targets are NHW");
        assert_eq!(tv.dim(), (n, h, w), "target shape");
        let mut total = 0.0f64;
        for ni in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let t = tv[(ni, y, xx)] as usize;
                    debug_assert!(t < c);
                    let mut mx = f32::NEG_INFINITY;
                    for ci in 0..c {
                        mx = mx.max(lv[(ni, ci, y, xx)]);
                    }
                    let mut lse = 0.0f64;
                    for ci in 0..c {
                        lse += ((lv[(ni, ci, y, xx)] - mx) as f64).exp();
                    }
                    total += lse.ln() + mx as f64 - lv[(ni, t, y, xx)] as f64;
                }
            }
        }
        let count = (n * h * w) as f64;
        let needs = self.ng(logits);
        self.push(
            scalar(total / count),
            Op::CrossEntropyMean { logits, targets },
            needs,
        )
    }

    /// Σ coeff·term over scalar nodes.
    pub fn weighted_sum(&mut self, terms: Vec<(NodeId, f64)>) -> NodeId {
        let v: f64 = terms
            .iter()
            .map(|&(id, coeff)| self.scalar_value(id) * coeff)
            .sum();
        let needs = terms.iter().any(|&(id, _)| self.ng(id));
        self.push(scalar(v), Op::WeightedSum { terms }, needs)
    }

    /// Reverse pass from a scalar root; parameter gradients accumulate into
    /// the store (on top of whatever is already there).
    pub fn backward(&mut self, root: NodeId, store: &mut ParamStore) {
        assert_eq!(self.nodes[root].value.len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<ArrayD<f32>>> = Vec::new();
        grads.resize_with(root + 1, || None);
        grads[root] = Some(ArrayD::from_elem(IxDyn(&[1]), 1.0f32));

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            // local helper: accumulate into an upstream node if it wants grads
            macro_rules! accum {
                ($parent:expr, $delta:expr) => {{
                    let p = $parent;
                    if self.nodes[p].needs_grad {
                        let delta = $delta;
                        match &mut grads[p] {
                            Some(slot) => *slot += &delta,
                            slot => *slot = Some(delta),
                        }
                    }
                }};
            }
            let gs = g.iter().next().copied().unwrap_or(0.0);

            match &self.nodes[id].op {
                Op::Leaf | Op::Detach => {}
                Op::Param(pid) => {
                    let pid = *pid;
                    if store.is_trainable(pid) {
                        store.accum_grad(pid, &g);
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (dx, dw, db) =
                        kernels::conv2d_bwd(self.as4(x), self.as4(w), gv, stride, pad);
                    accum!(x, dx.into_dyn());
                    accum!(w, dw.into_dyn());
                    accum!(b, db.into_dyn());
                }
                Op::ConvT2d { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (dx, dw, db) = kernels::convt2d_bwd(self.as4(x), self.as4(w), gv);
                    accum!(x, dx.into_dyn());
                    accum!(w, dw.into_dyn());
                    accum!(b, db.into_dyn());
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    invstd,
                    batch_stats,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let xv = self.as4(x);
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (n, c, h, w) = xv.dim();
                    let count = (n * h * w) as f64;
                    let gam = &self.nodes[gamma].value;
                    let mut dgamma = ndarray::Array1::<f32>::zeros(c);
                    let mut dbeta = ndarray::Array1::<f32>::zeros(c);
                    let mut dx = ndarray::Array4::<f32>::zeros((n, c, h, w));
                    for ci in 0..c {
                        let xs = xv.index_axis(Axis(1), ci);
                        let gsl = gv.index_axis(Axis(1), ci);
                        let (m, is) = (mean[ci], invstd[ci]);
                        let mut sum_dy = 0.0f64;
                        let mut sum_dy_xhat = 0.0f64;
                        for (&xi, &gi) in xs.iter().zip(gsl.iter()) {
                            let xhat = ((xi - m) * is) as f64;
                            sum_dy += gi as f64;
                            sum_dy_xhat += gi as f64 * xhat;
                        }
                        dbeta[ci] = sum_dy as f32;
                        dgamma[ci] = sum_dy_xhat as f32;
                        let mut dplane = dx.index_axis_mut(Axis(1), ci);
                        if *batch_stats {
                            let k = gam[ci] as f64 * is as f64 / count;
                            ndarray::Zip::from(&mut dplane).and(&xs).and(&gsl).for_each(
                                |o, &xi, &gi| {
                                    let xhat = ((xi - m) * is) as f64;
                                    *o = (k * (count * gi as f64 - sum_dy - xhat * sum_dy_xhat))
                                        as f32;
                                },
                            );
                        } else {
                            // running-stat normalization is a plain affine map
                            let k = gam[ci] * is;
                            ndarray::Zip::from(&mut dplane)
                                .and(&gsl)
                                .for_each(|o, &gi| *o = gi * k);
                        }
                    }
                    accum!(x, dx.into_dyn());
                    accum!(gamma, dgamma.into_dyn());
                    accum!(beta, dbeta.into_dyn());
                }
                Op::Relu(x) => {
                    let x = *x;
                    let mut dx = g;
                    ndarray::Zip::from(&mut dx)
                        .and(&*self.nodes[x].value)
                        .for_each(|d, &v| {
                            if v <= 0.0 {
                                *d = 0.0;
                            }
                        });
                    accum!(x, dx);
                }
                Op::LeakyRelu { x, slope } => {
                    let (x, slope) = (*x, *slope);
                    let mut dx = g;
                    ndarray::Zip::from(&mut dx)
                        .and(&*self.nodes[x].value)
                        .for_each(|d, &v| {
                            if v <= 0.0 {
                                *d *= slope;
                            }
                        });
                    accum!(x, dx);
                }
                Op::Tanh(x) => {
                    let x = *x;
                    let mut dx = g;
                    ndarray::Zip::from(&mut dx)
                        .and(&*self.nodes[id].value)
                        .for_each(|d, &y| *d *= 1.0 - y * y);
                    accum!(x, dx);
                }
                Op::Sigmoid(x) => {
                    let x = *x;
                    let mut dx = g;
                    ndarray::Zip::from(&mut dx)
                        .and(&*self.nodes[id].value)
                        .for_each(|d, &y| *d *= y * (1.0 - y));
                    accum!(x, dx);
                }
                Op::SoftmaxC(x) => {
                    let x = *x;
                    let yv = self.as4(id);
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (n, c, h, w) = yv.dim();
                    let mut dx = ndarray::Array4::<f32>::zeros((n, c, h, w));
                    for ni in 0..n {
                        for yy in 0..h {
                            for xx in 0..w {
                                let mut dot = 0.0f32;
                                for ci in 0..c {
                                    dot += gv[(ni, ci, yy, xx)] * yv[(ni, ci, yy, xx)];
                                }
                                for ci in 0..c {
                                    dx[(ni, ci, yy, xx)] =
                                        yv[(ni, ci, yy, xx)] * (gv[(ni, ci, yy, xx)] - dot);
                                }
                            }
                        }
                    }
                    accum!(x, dx.into_dyn());
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    accum!(a, g.clone());
                    accum!(b, g);
                }
                Op::ConcatC { a, b } => {
                    let (a, b) = (*a, *b);
                    let ca = self.nodes[a].value.shape()[1];
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let ga = gv.slice(ndarray::s![.., ..ca, .., ..]).to_owned();
                    let gb = gv.slice(ndarray::s![.., ca.., .., ..]).to_owned();
                    accum!(a, ga.into_dyn());
                    accum!(b, gb.into_dyn());
                }
                Op::SliceC { x, start, len } => {
                    let (x, start, len) = (*x, *start, *len);
                    let shape = self.nodes[x].value.shape().to_vec();
                    let mut dx = ArrayD::<f32>::zeros(IxDyn(&shape));
                    dx.view_mut()
                        .into_dimensionality::<Ix4>()
                        .unwrap()
                        .slice_mut(ndarray::s![.., start..start + len, .., ..])
                        .assign(&g.view().into_dimensionality::<Ix4>().unwrap());
                    accum!(x, dx);
                }
                Op::PadZero { x, pad } => {
                    let (x, pad) = (*x, *pad);
                    let (h, w) = {
                        let s = self.nodes[x].value.shape();
                        (s[2], s[3])
                    };
                    let dx = kernels::pad_zero_bwd(
                        g.view().into_dimensionality::<Ix4>().unwrap(),
                        pad,
                        h,
                        w,
                    );
                    accum!(x, dx.into_dyn());
                }
                Op::BlockMean { x, factor } => {
                    let (x, factor) = (*x, *factor);
                    let dx = kernels::block_mean_bwd(
                        g.view().into_dimensionality::<Ix4>().unwrap(),
                        factor,
                    );
                    accum!(x, dx.into_dyn());
                }
                Op::Upsample2 { x } => {
                    let x = *x;
                    let (h, w) = {
                        let s = self.nodes[x].value.shape();
                        (s[2], s[3])
                    };
                    let dx = kernels::upsample2_bilinear_bwd(
                        g.view().into_dimensionality::<Ix4>().unwrap(),
                        h,
                        w,
                    );
                    accum!(x, dx.into_dyn());
                }
                Op::MaxPool2 { x, argmax } => {
                    let x = *x;
                    let (h, w) = {
                        let s = self.nodes[x].value.shape();
                        (s[2], s[3])
                    };
                    let dx = kernels::maxpool2_bwd(
                        g.view().into_dimensionality::<Ix4>().unwrap(),
                        argmax,
                        h,
                        w,
                    );
                    accum!(x, dx.into_dyn());
                }
                Op::MeanAll(x) => {
                    let x = *x;
                    let n = self.nodes[x].value.len() as f32;
                    let dx = ArrayD::from_elem(self.nodes[x].value.raw_dim(), gs / n);
                    accum!(x, dx);
                }
                Op::LogClamp { x, eps } => {
                    let (x, eps) = (*x, *eps);
                    let mut dx = ArrayD::<f32>::zeros(self.nodes[x].value.raw_dim());
                    ndarray::Zip::from(&mut dx)
                        .and(&*self.nodes[x].value)
                        .for_each(|d, &v| {
                            if v > eps && v < 1.0 - eps {
                                *d = gs / v;
                            }
                        });
                    accum!(x, dx);
                }
                Op::OneMinus(x) => {
                    let x = *x;
                    accum!(x, g.mapv(|v| -v));
                }
                Op::SumSqDiffScaled { a, b, scale } => {
                    let (a, b, scale) = (*a, *b, *scale);
                    let k = 2.0 * scale as f32 * gs;
                    if self.ng(a) {
                        let da = ndarray::Zip::from(&*self.nodes[a].value)
                            .and(&*self.nodes[b].value)
                            .map_collect(|&x, &y| k * (x - y));
                        accum!(a, da);
                    }
                    if self.ng(b) {
                        let db = ndarray::Zip::from(&*self.nodes[a].value)
                            .and(&*self.nodes[b].value)
                            .map_collect(|&x, &y| -k * (x - y));
                        accum!(b, db);
                    }
                }
                Op::MseAgainst { x, t } => {
                    let (x, t) = (*x, *t);
                    let n = self.nodes[x].value.len() as f32;
                    let k = 2.0 * gs / n;
                    if self.ng(x) {
                        let dx = ndarray::Zip::from(&*self.nodes[x].value)
                            .and(&*self.nodes[t].value)
                            .map_collect(|&a, &b| k * (a - b));
                        accum!(x, dx);
                    }
                    if self.ng(t) {
                        let dt = ndarray::Zip::from(&*self.nodes[x].value)
                            .and(&*self.nodes[t].value)
                            .map_collect(|&a, &b| -k * (a - b));
                        accum!(t, dt);
                    }
                }
                Op::CrossEntropyMean { logits, targets } => {
                    let logits = *logits;
                    let lv = self.as4(logits);
                    let tv = targets.view().into_dimensionality::<Ix3>().unwrap();
                    let (n, c, h, w) = lv.dim();
                    let count = (n * h * w) as f32;
                    let mut dx = ndarray::Array4::<f32>::zeros((n, c, h, w));
                    for ni in 0..n {
                        for y in 0..h {
                            for xx in 0..w {
                                let mut mx = f32::NEG_INFINITY;
                                for ci in 0..c {
                                    mx = mx.max(lv[(ni, ci, y, xx)]);
                                }
                                let mut denom = 0.0f32;
                                for ci in 0..c {
                                    denom += (lv[(ni, ci, y, xx)] - mx).exp();
                                }
                                let t = tv[(ni, y, xx)] as usize;
                                for ci in 0..c {
                                    let p = (lv[(ni, ci, y, xx)] - mx).exp() / denom;
                                    let ind = if ci == t { 1.0 } else { 0.0 };
                                    dx[(ni, ci, y, xx)] = gs * (p - ind) / count;
                                }
                            }
                        }
                    }
                    accum!(logits, dx.into_dyn());
                }
                Op::WeightedSum { terms } => {
                    let terms = terms.clone();
                    for (t, coeff) in terms {
                        accum!(t, scalar(gs as f64 * coeff));
                    }
                }
            }
        }
    }
}
