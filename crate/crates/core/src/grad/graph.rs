//! Tape of primitive operations and its reverse sweep.
//!
//! Every op appends a node holding its forward value. Nodes are only ever
//! appended, so node order is a topological order and the backward pass is a
//! single reverse scan.

use std::collections::BTreeMap;
use std::rc::Rc;

use super::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { input: Var, axis: usize, mean: bool },
    Max { input: Var, arg: usize },
    MaxAxis { input: Var, args: Vec<usize> },
    Softmax(Var),
    LogSoftmax(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    Clip { input: Var, lo: f64, hi: f64 },
    Gather { input: Var, index: Rc<Vec<usize>> },
    BceWithLogits { logits: Var, targets: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to every trainable leaf.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.map.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.map.remove(&v)
    }

    pub fn contains(&self, v: Var) -> bool {
        self.map.contains_key(&v)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }
}

/// A recording of primitive ops. One graph per forward/backward evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `-[t log s(z) + (1-t) log(1-s(z))]`.
pub fn bce_with_logits_value(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Domain(format!(
                "non-finite value produced by {:?}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Dimension(format!("transpose of {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::Dimension("mean of empty tensor".into()));
        }
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Dimension(format!("reduce axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        if mean {
            let inv = 1.0 / n as f64;
            out.iter_mut().for_each(|x| *x *= inv);
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let rg = self.rg(a);
        self.push(
            Tensor::new(oshape, out)?,
            Op::SumAxis {
                input: a,
                axis,
                mean,
            },
            rg,
        )
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    /// Maximum over all elements. The subgradient goes to the first argmax.
    pub fn max(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::Dimension("max of empty tensor".into()));
        }
        let mut arg = 0;
        for (i, &x) in v.data().iter().enumerate() {
            if x > v.data()[arg] {
                arg = i;
            }
        }
        let m = v.data()[arg];
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Max { input: a, arg }, rg)
    }

    /// Maximum along one axis, first argmax wins ties.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Dimension(format!("max axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        let mut args = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * n) * inner + i;
                for j in 1..n {
                    let idx = (o * n + j) * inner + i;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out[o * inner + i] = src[best];
                args[o * inner + i] = best;
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let rg = self.rg(a);
        self.push(Tensor::new(oshape, out)?, Op::MaxAxis { input: a, args }, rg)
    }

    fn last_axis_rows(&self, a: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(a);
        match s.last() {
            Some(&n) if n > 0 => Ok((self.value(a).len() / n, n)),
            _ => Err(Error::Dimension(format!("{what} of {s:?}"))),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, n) = self.last_axis_rows(a, "softmax")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            softmax_row(&src[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n]);
        }
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, n) = self.last_axis_rows(a, "log_softmax")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for (o, x) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(a);
        self.push(t, Op::LogSoftmax(a), rg)
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension(format!("concat axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(Error::Dimension(format!("concat {base:?} with {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                let chunk = n * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut oshape = base;
        oshape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            Tensor::new(oshape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg)
    }

    /// Clamp into `[lo, hi]`. Gradient passes only where the input lies
    /// strictly inside the bounds.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::Contract(format!("clip bounds {lo} > {hi}")));
        }
        self.unary(a, Op::Clip { input: a, lo, hi }, |x| x.clamp(lo, hi))
    }

    /// `out[i] = input.flat[index[i]]`, reshaped to `shape`. Covers slicing,
    /// permutation and row broadcasting.
    pub fn gather(&mut self, a: Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(Error::Dimension(format!(
                "gather of {} indices into {shape:?}",
                index.len()
            )));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(n);
        for &i in index.iter() {
            let v = *src.get(i).ok_or_else(|| {
                Error::Dimension(format!("gather index {i} out of {}", src.len()))
            })?;
            out.push(v);
        }
        let rg = self.rg(a);
        self.push(
            Tensor::new(shape.to_vec(), out)?,
            Op::Gather { input: a, index },
            rg,
        )
    }

    /// Repeat a `[d]` (or `[1, d]`) row `n` times into `[n, d]`.
    pub fn broadcast_rows(&mut self, row: Var, n: usize) -> Result<Var> {
        let d = self.value(row).len();
        let index: Vec<usize> = (0..n).flat_map(|_| 0..d).collect();
        self.gather(row, Rc::new(index), &[n, d])
    }

    /// Elementwise binary cross-entropy between logits and fixed targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let v = self.value(logits);
        if v.len() != targets.len() {
            return Err(Error::Dimension(format!(
                "bce: {} logits vs {} targets",
                v.len(),
                targets.len()
            )));
        }
        let data = v
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| bce_with_logits_value(z, t))
            .collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(logits);
        self.push(
            t,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }

        let mut map = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                map.insert(Var(idx), Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients { map })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(buf);
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x -= y)
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * vb[i];
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |d| {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)
                });
            }
            Op::Offset(a) | Op::Reshape(a) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| matmul_nt(g, vb, d, m, k, n));
                self.accumulate(grads, *b, |d| matmul_tn(va, g, d, m, k, n));
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                self.accumulate(grads, *a, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        if va[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = out.data();
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Exp(a) => {
                let y = out.data();
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i];
                    }
                });
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / x[i];
                    }
                });
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, |d| d.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.accumulate(grads, *a, |d| d.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::SumAxis { input, axis, mean } => {
                let (outer, n, inner) = axis_split(self.shape(*input), *axis);
                let s = if *mean { 1.0 / n as f64 } else { 1.0 };
                self.accumulate(grads, *input, |d| {
                    for o in 0..outer {
                        for j in 0..n {
                            let base = (o * n + j) * inner;
                            for i in 0..inner {
                                d[base + i] += s * g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::Max { input, arg } => {
                self.accumulate(grads, *input, |d| d[*arg] += g[0]);
            }
            Op::MaxAxis { input, args } => {
                self.accumulate(grads, *input, |d| {
                    for (k, &a) in args.iter().enumerate() {
                        d[a] += g[k];
                    }
                });
            }
            Op::Softmax(a) => {
                let y = out.data();
                let n = *out.shape().last().unwrap();
                self.accumulate(grads, *a, |d| {
                    for r in 0..y.len() / n {
                        let (ys, gs) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                        for i in 0..n {
                            d[r * n + i] += ys[i] * (gs[i] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let y = out.data();
                let n = *out.shape().last().unwrap();
                self.accumulate(grads, *a, |d| {
                    for r in 0..y.len() / n {
                        let gs = &g[r * n..(r + 1) * n];
                        let gsum: f64 = gs.iter().sum();
                        for i in 0..n {
                            d[r * n + i] += gs[i] - y[r * n + i].exp() * gsum;
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = self.shape(v)[*axis];
                    self.accumulate(grads, v, |d| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            add_into(&mut d[o * n * inner..(o + 1) * n * inner], src);
                        }
                    });
                    offset += n;
                }
            }
            Op::Clip { input, lo, hi } => {
                let x = self.value(*input).data();
                self.accumulate(grads, *input, |d| {
                    for i in 0..d.len() {
                        if x[i] > *lo && x[i] < *hi {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Gather { input, index } => {
                self.accumulate(grads, *input, |d| {
                    for (k, &i) in index.iter().enumerate() {
                        d[i] += g[k];
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.value(*logits).data();
                self.accumulate(grads, *logits, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * (sigmoid(z[i]) - targets[i]);
                    }
                });
            }
        }
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
}

pub(crate) fn softmax_row(src: &[f64], out: &mut [f64]) {
    let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, x) in out.iter_mut().zip(src) {
        *o = (x - m).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scalar-mul",
        Op::Offset(..) => "scalar-add",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Relu(..) => "relu",
        Op::Tanh(..) => "tanh",
        Op::Sigmoid(..) => "sigmoid",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::SumAxis { .. } => "sum-axis",
        Op::Max { .. } => "max-reduce",
        Op::MaxAxis { .. } => "max-reduce-axis",
        Op::Softmax(..) => "softmax",
        Op::LogSoftmax(..) => "log-softmax",
        Op::Concat { .. } => "concat",
        Op::Reshape(..) => "reshape",
        Op::Clip { .. } => "clip",
        Op::Gather { .. } => "gather",
        Op::BceWithLogits { .. } => "bce-with-logits",
    }
}
