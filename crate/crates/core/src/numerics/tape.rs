//! Reverse-mode differentiation over a linear (Wengert) tape.
//!
//! Nodes are appended in evaluation order, so every node's inputs precede it
//! and a single reverse sweep visits them in a valid order.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::ops::{self, NormCache};
use super::RealTensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies a learnable tensor across tapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Param(ParamId),
    Input,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Transpose(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        cache: NormCache,
    },
    Gelu(Var),
    Clip01(Var),
    Sum(Var),
    Mean(Var),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    Substitute(Var),
}

/// One recorded operation with its forward value.
#[derive(Debug, Clone)]
pub struct TapeNode {
    op: Op,
    value: RealTensor,
    needs_grad: bool,
}

impl TapeNode {
    pub fn value(&self) -> &RealTensor {
        &self.value
    }

    pub fn op_name(&self) -> &'static str {
        match self.op {
            Op::Param(_) => "param",
            Op::Input => "input",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::Transpose(_) => "transpose",
            Op::Softmax(_) => "softmax_rows",
            Op::LogSoftmax(_) => "log_softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Clip01(_) => "clip01",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::GatherRows(..) => "gather_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::Substitute(_) => "substitute",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of retained nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &TapeNode {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &RealTensor {
        &self.nodes[v.0].value
    }

    /// Inputs of every `clip01` node, flattened in recording order.
    pub fn clip01_inputs(&self) -> Vec<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Clip01(a) => Some(self.value(a).data()),
                _ => None,
            })
            .flatten()
            .copied()
            .collect()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op, value: RealTensor, needs_grad: bool) -> Var {
        self.nodes.push(TapeNode {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId, value: RealTensor) -> Var {
        self.push(Op::Param(id), value, true)
    }

    /// Differentiable leaf that is not a model parameter (e.g. a fixed-point state).
    pub fn input(&mut self, value: RealTensor) -> Var {
        self.push(Op::Input, value, true)
    }

    pub fn constant(&mut self, value: RealTensor) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), value, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), value, g))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, g))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let value = self.value(a).scale(k)?;
        let g = self.needs(a);
        Ok(self.push(Op::Scale(a, k), value, g))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let value = self.value(a).add_row(self.value(bias))?;
        let g = self.needs(a) || self.needs(bias);
        Ok(self.push(Op::AddRow(a, bias), value, g))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let g = self.needs(a);
        Ok(self.push(Op::Transpose(a), value, g))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = ops::softmax_rows(self.value(a));
        let g = self.needs(a);
        self.push(Op::Softmax(a), value, g)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = ops::log_softmax_rows(self.value(a));
        let g = self.needs(a);
        self.push(Op::LogSoftmax(a), value, g)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let (value, cache) = ops::layer_norm_cached(self.value(x), self.value(gain), self.value(shift))?;
        let g = self.needs(x) || self.needs(gain) || self.needs(shift);
        Ok(self.push(Op::LayerNorm { x, gain, shift, cache }, value, g))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = ops::gelu(self.value(a));
        let g = self.needs(a);
        self.push(Op::Gelu(a), value, g)
    }

    pub fn clip01(&mut self, a: Var) -> Var {
        let value = ops::clip01(self.value(a));
        let g = self.needs(a);
        self.push(Op::Clip01(a), value, g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = RealTensor::from_parts(vec![1], vec![self.value(a).sum()]);
        let g = self.needs(a);
        self.push(Op::Sum(a), value, g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = RealTensor::from_parts(vec![1], vec![self.value(a).mean()]);
        let g = self.needs(a);
        self.push(Op::Mean(a), value, g)
    }

    /// Selects rows of a rank-2 table (embedding lookup, pooling).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::dim("gather_rows", t.shape(), &[2]));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= t.rows()) {
            return Err(Error::Input(alloc::format!(
                "gather_rows: row {bad} out of range for table with {} rows",
                t.rows()
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * t.cols());
        for &r in rows {
            data.extend_from_slice(t.row(r));
        }
        let value = RealTensor::from_parts(vec![rows.len(), t.cols()], data);
        let g = self.needs(table);
        Ok(self.push(Op::GatherRows(table, rows.to_vec()), value, g))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, end)?;
        let g = self.needs(a);
        Ok(self.push(Op::SliceCols(a, start, end), value, g))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<RealTensor> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let value = RealTensor::concat_cols(&values)?;
        let g = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, g))
    }

    /// Replaces the forward value of `a` with `value` while passing adjoints
    /// straight through to `a`. Used to evaluate losses and Jacobians at a
    /// simulated equilibrium rather than at the surrogate's own output.
    pub fn substitute(&mut self, a: Var, value: RealTensor) -> Result<Var> {
        if value.shape() != self.value(a).shape() {
            return Err(Error::dim("substitute", self.value(a).shape(), value.shape()));
        }
        let g = self.needs(a);
        Ok(self.push(Op::Substitute(a), value, g))
    }

    /// Adjoints of a scalar loss with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Adjoints> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract("backward requires a scalar loss node"));
        }
        self.vjp(loss, RealTensor::from_parts(vec![1], vec![1.0]))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`) back
    /// through the tape.
    pub fn vjp(&self, output: Var, seed: RealTensor) -> Result<Adjoints> {
        if seed.len() != self.value(output).len() {
            return Err(Error::dim("vjp", self.value(output).shape(), seed.shape()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(seed.into_data());
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = adj[idx].take() else { continue };
            self.propagate(node, &dy, &mut adj);
            adj[idx] = Some(dy);
        }
        Ok(Adjoints {
            adjoints: adj,
            leaves: self
                .nodes
                .iter()
                .enumerate()
                .filter_map(|(i, n)| match n.op {
                    Op::Param(id) => Some((id, i, n.value.shape().to_vec())),
                    _ => None,
                })
                .collect(),
        })
    }

    fn propagate(&self, node: &TapeNode, dy: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: &dyn Fn(usize) -> f64, len: usize| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; len]);
            for (i, s) in slot.iter_mut().enumerate() {
                *s += contrib(i);
            }
        };
        match &node.op {
            Op::Param(_) | Op::Input | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if self.needs(*a) {
                    // dA = dY · Bᵀ
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += dy[i * m + j] * bv.data()[p * m + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    acc(*a, &|i| da[i], n * k);
                }
                if self.needs(*b) {
                    // dB = Aᵀ · dY
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        for p in 0..k {
                            let x = av.data()[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..m {
                                db[p * m + j] += x * dy[i * m + j];
                            }
                        }
                    }
                    acc(*b, &|i| db[i], k * m);
                }
            }
            Op::Add(a, b) => {
                acc(*a, &|i| dy[i], dy.len());
                acc(*b, &|i| dy[i], dy.len());
            }
            Op::Sub(a, b) => {
                acc(*a, &|i| dy[i], dy.len());
                acc(*b, &|i| -dy[i], dy.len());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|i| dy[i] * bv[i], dy.len());
                acc(*b, &|i| dy[i] * av[i], dy.len());
            }
            Op::Scale(a, k) => acc(*a, &|i| dy[i] * k, dy.len()),
            Op::AddRow(a, bias) => {
                acc(*a, &|i| dy[i], dy.len());
                let c = node.value.cols();
                let mut db = vec![0.0; c];
                for row in dy.chunks(c) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(*bias, &|i| db[i], c);
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                // y is r×c, x is c×r: dx[j][i] = dy[i][j]
                acc(*a, &|idx| dy[(idx % r) * c + idx / r], r * c);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for (r, (yr, dyr)) in y.chunks(c).zip(dy.chunks(c)).enumerate() {
                    let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = yr[j] * (dyr[j] - dot);
                    }
                }
                acc(*a, &|i| dx[i], dx.len());
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for (r, (yr, dyr)) in y.chunks(c).zip(dy.chunks(c)).enumerate() {
                    let total: f64 = dyr.iter().sum();
                    for j in 0..c {
                        dx[r * c + j] = dyr[j] - libm::exp(yr[j]) * total;
                    }
                }
                acc(*a, &|i| dx[i], dx.len());
            }
            Op::LayerNorm { x, gain, shift, cache } => {
                let c = node.value.cols();
                let xhat = cache.normalized.data();
                let g = self.value(*gain).data();
                let mut dgain = vec![0.0; c];
                let mut dshift = vec![0.0; c];
                let mut dx = vec![0.0; xhat.len()];
                for (r, dyr) in dy.chunks(c).enumerate() {
                    let xr = &xhat[r * c..(r + 1) * c];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        dgain[j] += dyr[j] * xr[j];
                        dshift[j] += dyr[j];
                        let dxhat = dyr[j] * g[j];
                        mean_d += dxhat;
                        mean_dx += dxhat * xr[j];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    let inv = cache.inv_std[r];
                    for j in 0..c {
                        let dxhat = dyr[j] * g[j];
                        dx[r * c + j] = inv * (dxhat - mean_d - xr[j] * mean_dx);
                    }
                }
                acc(*x, &|i| dx[i], dx.len());
                acc(*gain, &|i| dgain[i], c);
                acc(*shift, &|i| dshift[i], c);
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                acc(*a, &|i| dy[i] * ops::gelu_derivative(xv[i]), dy.len());
            }
            Op::Clip01(a) => {
                let xv = self.value(*a).data();
                acc(*a, &|i| dy[i] * ops::clip01_mask(xv[i]), dy.len());
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                acc(*a, &|_| dy[0], n);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let k = dy[0] / n.max(1) as f64;
                acc(*a, &|_| k, n);
            }
            Op::GatherRows(table, rows) => {
                let t = self.value(*table);
                let c = t.cols();
                let mut dt = vec![0.0; t.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        dt[r * c + j] += dy[i * c + j];
                    }
                }
                acc(*table, &|i| dt[i], dt.len());
            }
            Op::SliceCols(a, start, end) => {
                let src = self.value(*a);
                let (c, w) = (src.cols(), end - start);
                acc(
                    *a,
                    &|idx| {
                        let (r, j) = (idx / c, idx % c);
                        if j >= *start && j < *end {
                            dy[r * w + j - start]
                        } else {
                            0.0
                        }
                    },
                    src.len(),
                );
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let n = self.value(p).len();
                    acc(p, &|idx| dy[(idx / w) * total + offset + idx % w], n);
                    offset += w;
                }
            }
            Op::Substitute(a) => acc(*a, &|i| dy[i], dy.len()),
        }
    }
}

/// Result of a reverse sweep.
#[derive(Debug, Clone)]
pub struct Adjoints {
    adjoints: Vec<Option<Vec<f64>>>,
    leaves: Vec<(ParamId, usize, Vec<usize>)>,
}

impl Adjoints {
    /// Adjoint of any node; zero-shaped like the node when unreached.
    pub fn wrt(&self, tape: &Tape, v: Var) -> RealTensor {
        let shape = tape.value(v).shape().to_vec();
        match self.adjoints.get(v.0).and_then(|a| a.as_ref()) {
            Some(d) => RealTensor::from_parts(shape, d.clone()),
            None => RealTensor::zeros(&shape),
        }
    }

    /// Gradients for every parameter leaf on the tape, keyed and ordered by id.
    /// Parameters the output does not reach get explicit zeros.
    pub fn params(&self) -> BTreeMap<ParamId, RealTensor> {
        let mut out: BTreeMap<ParamId, RealTensor> = BTreeMap::new();
        for (id, idx, shape) in &self.leaves {
            let g = match self.adjoints.get(*idx).and_then(|a| a.as_ref()) {
                Some(d) => RealTensor::from_parts(shape.clone(), d.clone()),
                None => RealTensor::zeros(shape),
            };
            match out.get_mut(id) {
                Some(existing) => {
                    for (e, v) in existing.data_mut_unchecked().iter_mut().zip(g.data()) {
                        *e += v;
                    }
                }
                None => {
                    out.insert(*id, g);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> RealTensor {
        RealTensor::from_rows(rows).unwrap()
    }

    #[test]
    fn sum_of_linear_map_gradient_is_outer_product() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[1.0, 2.0, 3.0]]));
        let w = tape.param(ParamId(0), t(&[&[0.1, 0.2], &[0.3, 0.4], &[0.5, 0.6]]));
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap().params();
        assert_eq!(grads[&ParamId(0)].data(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn unreached_parameter_gets_zero() {
        let mut tape = Tape::new();
        let a = tape.param(ParamId(0), t(&[&[2.0]]));
        let _b = tape.param(ParamId(1), t(&[&[5.0, 6.0]]));
        let loss = tape.sum(a);
        let grads = tape.backward(loss).unwrap().params();
        assert_eq!(grads[&ParamId(1)].data(), &[0.0, 0.0]);
        assert_eq!(grads[&ParamId(0)].data(), &[1.0]);
    }

    #[test]
    fn clamped_coordinate_blocks_adjoint() {
        let mut tape = Tape::new();
        let w = tape.param(ParamId(0), t(&[&[0.5, 1.5, -0.5]]));
        let c = tape.clip01(w);
        let loss = tape.sum(c);
        let g = tape.backward(loss).unwrap().params();
        assert_eq!(g[&ParamId(0)].data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(ParamId(0), t(&[&[1.0, 2.0]]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn substitute_passes_adjoint_through() {
        let mut tape = Tape::new();
        let w = tape.param(ParamId(0), t(&[&[1.0, 2.0]]));
        let s = tape.scale(w, 3.0).unwrap();
        let sub = tape.substitute(s, t(&[&[10.0, 20.0]])).unwrap();
        let sq = tape.mul(sub, sub).unwrap();
        let loss = tape.sum(sq);
        assert_eq!(tape.value(loss).data(), &[500.0]);
        let g = tape.backward(loss).unwrap().params();
        // d/dw sum(sub^2) with straight-through = 2*sub*3
        assert_eq!(g[&ParamId(0)].data(), &[60.0, 120.0]);
    }
}
