use std::sync::Arc;

use super::kernels::{gemm, permute_map, GatherPlan, Mat};
use super::{validate_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Ids grow monotonically, so every node's
/// inputs have smaller ids than the node itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Linear interpolation weights from a cell-centred source grid of `src_len`
/// samples on `[-1, 1]` to arbitrary query coordinates. Queries outside the
/// outermost sample centres clamp to the end values.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpPlan {
    src_len: usize,
    taps: Vec<(usize, usize, f64)>,
}

impl InterpPlan {
    pub fn new(src_len: usize, coords: &[f64]) -> Result<Self> {
        if src_len == 0 {
            return Err(Error::dim("interpolation source needs at least one sample"));
        }
        let taps = coords
            .iter()
            .map(|&x| {
                // Continuous sample index: centre k sits at -1 + (2k+1)/n.
                let mut t = ((x + 1.0) * src_len as f64 - 1.0) / 2.0;
                let nearest = t.round();
                if (t - nearest).abs() < 1e-9 {
                    t = nearest;
                }
                let t = t.clamp(0.0, (src_len - 1) as f64);
                let lo = t.floor() as usize;
                let hi = (lo + 1).min(src_len - 1);
                (lo, hi, t - lo as f64)
            })
            .collect();
        Ok(InterpPlan { src_len, taps })
    }

    pub fn src_len(&self) -> usize {
        self.src_len
    }

    pub fn dst_len(&self) -> usize {
        self.taps.len()
    }

    pub fn taps(&self) -> &[(usize, usize, f64)] {
        &self.taps
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Sin(Var),
    Cos(Var),
    Abs(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Matmul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    BroadcastTo(Var),
    Concat(Vec<Var>, usize),
    IndexSelect(Var, usize, Vec<usize>),
    Softmax(Var, usize),
    Linear(Var, Var, Var),
    Conv {
        x: Var,
        kernel: Var,
        bias: Var,
        plan: Arc<GatherPlan>,
    },
    AvgPool(Var),
    Interp(Var, Arc<InterpPlan>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Append-only record of a computation. Leaves created with [`Tape::param`]
/// receive gradients; [`Tape::constant`] leaves and everything computed only
/// from constants are skipped during the backward sweep.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    checked: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or `None` when `v` did not influence the root.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// When enabled, every op output is scanned for NaN/Inf and the op fails
    /// with [`Error::NonFinite`].
    pub fn checked(mut self, on: bool) -> Self {
        self.checked = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.checked {
            if let Some(index) = value.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { index });
            }
        }
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        Ok(self.push_raw(value, op, tracked))
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = if is_suffix(&sb, &sa) {
            sa
        } else if is_suffix(&sa, &sb) {
            sb
        } else {
            return Err(Error::dim(format!(
                "shapes {sa:?} and {sb:?} do not broadcast over leading axes"
            )));
        };
        let n: usize = shape.iter().product();
        let (da, db) = (self.data(a), self.data(b));
        let (la, lb) = (da.len(), db.len());
        let out = (0..n).map(|i| f(da[i % la], db[i % lb])).collect();
        self.push(Tensor::from_parts(shape, out), op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x * c, Op::MulScalar(a, c))
    }

    /// `s * a` for a one-element tensor `s` that may itself be differentiable.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim(format!(
                "scale_by expects a one-element scale, got {:?}",
                self.shape(s)
            )));
        }
        let c = self.data(s)[0];
        self.unary(a, |x| x * c, Op::ScaleBy(a, s))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let d = self.data(a);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    // ---- shape manipulation ------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(value, Op::Reshape(a), &[a])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes.iter().any(|&ax| ax >= shape.len() || std::mem::replace(&mut seen[ax], true))
        {
            return Err(Error::dim(format!(
                "{axes:?} is not a permutation of the axes of {shape:?}"
            )));
        }
        let map = permute_map(&shape, axes);
        let src = self.data(a);
        let out = map.iter().map(|&i| src[i]).collect();
        let out_shape = axes.iter().map(|&ax| shape[ax]).collect();
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::Permute(a, axes.to_vec()),
            &[a],
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 2 {
            return Err(Error::dim("transpose expects a matrix"));
        }
        self.permute(a, &[1, 0])
    }

    /// Tiles `a` over new leading axes so it takes `shape`, whose trailing
    /// axes must equal `a`'s shape.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        validate_shape(shape)?;
        if !is_suffix(self.shape(a), shape) {
            return Err(Error::dim(format!(
                "cannot broadcast {:?} to {shape:?}",
                self.shape(a)
            )));
        }
        let src = self.data(a);
        let n: usize = shape.iter().product();
        let out = (0..n).map(|i| src[i % src.len()]).collect();
        self.push(
            Tensor::from_parts(shape.to_vec(), out),
            Op::BroadcastTo(a),
            &[a],
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim(format!(
                    "concat along {axis}: {s:?} incompatible with {base:?}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = outer_inner(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let block = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat(parts.to_vec(), axis),
            parts,
        )
    }

    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || indices.is_empty() || indices.iter().any(|&i| i >= shape[axis]) {
            return Err(Error::dim(format!(
                "index_select axis {axis} indices {indices:?} invalid for {shape:?}"
            )));
        }
        let (outer, n, inner) = outer_inner(&shape, axis);
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &k in indices {
                let start = (o * n + k) * inner;
                out.extend_from_slice(&src[start..start + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::IndexSelect(a, axis, indices.to_vec()),
            &[a],
        )
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            Mat::new(self.data(a), m, k),
            Mat::new(self.data(b), k, n),
            &mut out,
            false,
        );
        self.push(Tensor::from_parts(vec![m, n], out), Op::Matmul(a, b), &[a, b])
    }

    /// Affine map over the last axis of `x`, batched over all leading axes.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(bias));
        let cin = *sx.last().unwrap();
        if sw.len() != 2 || sw[0] != cin || sb != [sw[1]] {
            return Err(Error::dim(format!(
                "linear: input {sx:?}, weight {sw:?}, bias {sb:?}"
            )));
        }
        let cout = sw[1];
        let rows = self.value(x).len() / cin;
        let mut out = Vec::with_capacity(rows * cout);
        for _ in 0..rows {
            out.extend_from_slice(self.data(bias));
        }
        gemm(
            Mat::new(self.data(x), rows, cin),
            Mat::new(self.data(w), cin, cout),
            &mut out,
            true,
        );
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = cout;
        self.push(
            Tensor::from_parts(shape, out),
            Op::Linear(x, w, bias),
            &[x, w, bias],
        )
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("softmax axis {axis} for {shape:?}")));
        }
        let (outer, n, inner) = outer_inner(&shape, axis);
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..n {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    out[at(k)] /= total;
                }
            }
        }
        self.push(Tensor::from_parts(shape, out), Op::Softmax(a, axis), &[a])
    }

    // ---- convolution & resampling -----------------------------------------

    fn gather_conv(&mut self, x: Var, kernel: Var, bias: Var, plan: GatherPlan) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let cin = sx[3];
        let cout = *self.shape(kernel).last().unwrap();
        let cols = plan.im2col(self.data(x), cin);
        let mut out = Vec::with_capacity(plan.rows * cout);
        for _ in 0..plan.rows {
            out.extend_from_slice(self.data(bias));
        }
        gemm(
            Mat::new(&cols, plan.rows, plan.taps * cin),
            Mat::new(self.data(kernel), plan.taps * cin, cout),
            &mut out,
            true,
        );
        let shape = vec![sx[0], sx[1], sx[2], cout];
        self.push(
            Tensor::from_parts(shape, out),
            Op::Conv {
                x,
                kernel,
                bias,
                plan: Arc::new(plan),
            },
            &[x, kernel, bias],
        )
    }

    fn check_conv(&self, x: Var, kernel: Var, bias: Var, taps: &[usize]) -> Result<()> {
        let (sx, sk, sb) = (self.shape(x), self.shape(kernel), self.shape(bias));
        let mut want = taps.to_vec();
        want.push(*sx.last().unwrap_or(&0));
        let ok = sx.len() == 4
            && sk.len() == want.len() + 1
            && sk[..want.len()] == want[..]
            && sb == [sk[want.len()]];
        if ok {
            Ok(())
        } else {
            Err(Error::dim(format!(
                "conv: input {sx:?} kernel {sk:?} bias {sb:?}"
            )))
        }
    }

    /// 3x3 convolution over axes 0 and 1 of `x: [H, W, D, Cin]` applied to
    /// every index of axis 2 with a shared `[3, 3, Cin, Cout]` kernel; zero
    /// padding keeps the spatial size.
    pub fn conv_spatial(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        self.check_conv(x, kernel, bias, &[3, 3])?;
        let s = self.shape(x);
        let plan = GatherPlan::spatial3x3(s[0], s[1], s[2]);
        self.gather_conv(x, kernel, bias, plan)
    }

    /// Three-tap convolution along axis 2 of `x: [H, W, D, Cin]` with a
    /// `[3, Cin, Cout]` kernel and reflect padding.
    pub fn conv_spectral3(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        self.check_conv(x, kernel, bias, &[3])?;
        let s = self.shape(x);
        let plan = GatherPlan::spectral3_reflect(s[0], s[1], s[2]);
        self.gather_conv(x, kernel, bias, plan)
    }

    /// Mean over the two spatial axes of `[H, W, D, C]`, giving `[1, 1, D, C]`.
    pub fn avg_pool_spatial(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(format!("avg_pool_spatial expects rank 4, got {s:?}")));
        }
        let (hw, dc) = (s[0] * s[1], s[2] * s[3]);
        let src = self.data(x);
        let mut out = vec![0.0; dc];
        for p in 0..hw {
            for (o, v) in out.iter_mut().zip(&src[p * dc..(p + 1) * dc]) {
                *o += v;
            }
        }
        let scale = 1.0 / hw as f64;
        out.iter_mut().for_each(|v| *v *= scale);
        self.push(
            Tensor::from_parts(vec![1, 1, s[2], s[3]], out),
            Op::AvgPool(x),
            &[x],
        )
    }

    /// Piecewise-linear resampling along axis 2 of `[H, W, D, C]`.
    pub fn interp_spectral(&mut self, x: Var, plan: &InterpPlan) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] != plan.src_len {
            return Err(Error::dim(format!(
                "interp_spectral: input {s:?} vs plan source length {}",
                plan.src_len
            )));
        }
        let (hw, d, c) = (s[0] * s[1], s[2], s[3]);
        let dst = plan.dst_len();
        let src = self.data(x);
        let mut out = Vec::with_capacity(hw * dst * c);
        for p in 0..hw {
            for &(lo, hi, f) in &plan.taps {
                let a = &src[(p * d + lo) * c..(p * d + lo + 1) * c];
                let b = &src[(p * d + hi) * c..(p * d + hi + 1) * c];
                out.extend(a.iter().zip(b).map(|(a, b)| (1.0 - f) * a + f * b));
            }
        }
        self.push(
            Tensor::from_parts(vec![s[0], s[1], dst, c], out),
            Op::Interp(x, Arc::new(plan.clone())),
            &[x],
        )
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a one-element `root`. Nodes are visited in
    /// descending id order, so accumulation order is fixed by the tape.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_with(*a, grads, |ga| reduce_into(ga, g, 1.0));
                self.acc_with(*b, grads, |gb| reduce_into(gb, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc_with(*a, grads, |ga| reduce_into(ga, g, 1.0));
                self.acc_with(*b, grads, |gb| reduce_into(gb, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.acc_with(*a, grads, |ga| {
                    let la = ga.len();
                    for (i, gi) in g.iter().enumerate() {
                        ga[i % la] += gi * db[i % db.len()];
                    }
                });
                self.acc_with(*b, grads, |gb| {
                    let lb = gb.len();
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % lb] += gi * da[i % da.len()];
                    }
                });
            }
            Op::Div(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.acc_with(*a, grads, |ga| {
                    let la = ga.len();
                    for (i, gi) in g.iter().enumerate() {
                        ga[i % la] += gi / db[i % db.len()];
                    }
                });
                self.acc_with(*b, grads, |gb| {
                    let lb = gb.len();
                    for (i, gi) in g.iter().enumerate() {
                        let y = db[i % lb];
                        gb[i % lb] -= gi * da[i % da.len()] / (y * y);
                    }
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.acc_with(*a, grads, |ga| add_scaled(ga, g, 1.0));
            }
            Op::MulScalar(a, c) => {
                self.acc_with(*a, grads, |ga| add_scaled(ga, g, *c));
            }
            Op::ScaleBy(a, s) => {
                let c = self.data(*s)[0];
                self.acc_with(*a, grads, |ga| add_scaled(ga, g, c));
                let da = self.data(*a);
                self.acc_with(*s, grads, |gs| {
                    gs[0] += g.iter().zip(da).map(|(x, y)| x * y).sum::<f64>();
                });
            }
            Op::Exp(a) => {
                self.acc_with(*a, grads, |ga| {
                    for ((d, gi), y) in ga.iter_mut().zip(g).zip(out) {
                        *d += gi * y;
                    }
                });
            }
            Op::Sin(a) | Op::Cos(a) | Op::Abs(a) | Op::Relu(a) => {
                let x = self.data(*a);
                let deriv: fn(f64) -> f64 = match &node.op {
                    Op::Sin(_) => f64::cos,
                    Op::Cos(_) => |v| -v.sin(),
                    Op::Abs(_) => |v| {
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    },
                    _ => |v| if v > 0.0 { 1.0 } else { 0.0 },
                };
                self.acc_with(*a, grads, |ga| {
                    for ((d, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                        *d += gi * deriv(*xi);
                    }
                });
            }
            Op::Sum(a) => {
                self.acc_with(*a, grads, |ga| ga.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(a) => {
                self.acc_with(*a, grads, |ga| {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|d| *d += s);
                });
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.data(*a), self.data(*b));
                self.acc_with(*a, grads, |ga| {
                    gemm(Mat::new(g, m, n), Mat::t(db, k, n), ga, true);
                });
                self.acc_with(*b, grads, |gb| {
                    gemm(Mat::t(da, m, k), Mat::new(g, m, n), gb, true);
                });
            }
            Op::Permute(a, axes) => {
                let map = permute_map(self.shape(*a), axes);
                self.acc_with(*a, grads, |ga| {
                    for (gi, &src) in g.iter().zip(&map) {
                        ga[src] += gi;
                    }
                });
            }
            Op::BroadcastTo(a) => {
                self.acc_with(*a, grads, |ga| reduce_into(ga, g, 1.0));
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let (outer, total, inner) = outer_inner(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let width = self.shape(p)[*axis] * inner;
                    self.acc_with(p, grads, |gp| {
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset..][..width];
                            add_scaled(&mut gp[o * width..(o + 1) * width], src, 1.0);
                        }
                    });
                    offset += width;
                }
            }
            Op::IndexSelect(a, axis, indices) => {
                let (outer, n, inner) = outer_inner(self.shape(*a), *axis);
                self.acc_with(*a, grads, |ga| {
                    let mut src = 0;
                    for o in 0..outer {
                        for &k in indices {
                            let dst = (o * n + k) * inner;
                            add_scaled(&mut ga[dst..dst + inner], &g[src..src + inner], 1.0);
                            src += inner;
                        }
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = outer_inner(node.value.shape(), *axis);
                self.acc_with(*a, grads, |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let dot: f64 = (0..n).map(|k| g[at(k)] * out[at(k)]).sum();
                            for k in 0..n {
                                ga[at(k)] += out[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Linear(x, w, bias) => {
                let sw = self.shape(*w);
                let (cin, cout) = (sw[0], sw[1]);
                let rows = g.len() / cout;
                let (dx, dw) = (self.data(*x), self.data(*w));
                self.acc_with(*x, grads, |gx| {
                    gemm(Mat::new(g, rows, cout), Mat::t(dw, cin, cout), gx, true);
                });
                self.acc_with(*w, grads, |gw| {
                    gemm(Mat::t(dx, rows, cin), Mat::new(g, rows, cout), gw, true);
                });
                self.acc_with(*bias, grads, |gb| column_sums_into(gb, g));
            }
            Op::Conv {
                x,
                kernel,
                bias,
                plan,
            } => {
                let cin = self.shape(*x)[3];
                let cout = *self.shape(*kernel).last().unwrap();
                let width = plan.taps * cin;
                let dk = self.data(*kernel);
                if self.wants(*kernel) {
                    let cols = plan.im2col(self.data(*x), cin);
                    self.acc_with(*kernel, grads, |gk| {
                        gemm(Mat::t(&cols, plan.rows, width), Mat::new(g, plan.rows, cout), gk, true);
                    });
                }
                self.acc_with(*bias, grads, |gb| column_sums_into(gb, g));
                self.acc_with(*x, grads, |gx| {
                    let mut gcols = vec![0.0; plan.rows * width];
                    gemm(Mat::new(g, plan.rows, cout), Mat::t(dk, width, cout), &mut gcols, false);
                    plan.col2im(&gcols, cin, gx);
                });
            }
            Op::AvgPool(x) => {
                let s = self.shape(*x);
                let (hw, dc) = (s[0] * s[1], s[2] * s[3]);
                let scale = 1.0 / hw as f64;
                self.acc_with(*x, grads, |gx| {
                    for p in 0..hw {
                        for (d, gi) in gx[p * dc..(p + 1) * dc].iter_mut().zip(g) {
                            *d += gi * scale;
                        }
                    }
                });
            }
            Op::Interp(x, plan) => {
                let s = self.shape(*x);
                let (hw, d, c) = (s[0] * s[1], s[2], s[3]);
                let dst = plan.dst_len();
                self.acc_with(*x, grads, |gx| {
                    for p in 0..hw {
                        for (k, &(lo, hi, f)) in plan.taps.iter().enumerate() {
                            let gk = &g[(p * dst + k) * c..(p * dst + k + 1) * c];
                            for (ch, gv) in gk.iter().enumerate() {
                                gx[(p * d + lo) * c + ch] += (1.0 - f) * gv;
                                gx[(p * d + hi) * c + ch] += f * gv;
                            }
                        }
                    }
                });
            }
        }
    }

    /// Runs `f` on the gradient buffer of `v` (allocated on first use) when
    /// `v` participates in differentiation.
    fn acc_with(&self, v: Var, grads: &mut [Option<Vec<f64>>], f: impl FnOnce(&mut [f64])) {
        if !self.wants(v) {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(buf);
    }
}

fn add_scaled(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

/// Sums `src` into `dst` cyclically, undoing a leading-axis broadcast.
fn reduce_into(dst: &mut [f64], src: &[f64], c: f64) {
    let n = dst.len();
    if n == src.len() {
        add_scaled(dst, src, c);
        return;
    }
    for chunk in src.chunks_exact(n) {
        add_scaled(dst, chunk, c);
    }
}

fn column_sums_into(dst: &mut [f64], src: &[f64]) {
    for row in src.chunks_exact(dst.len()) {
        add_scaled(dst, row, 1.0);
    }
}
