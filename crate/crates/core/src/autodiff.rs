//! Reverse-mode automatic differentiation over 2-D f64 tensors.
//!
//! A `Tape` records every operation; `backward` runs one reverse sweep and
//! accumulates gradients for every bound parameter block. Scalars live as
//! 1x1 tensors. The op set is deliberately small; renderer-specific pieces
//! (transmittance cumprod, row gather) get dedicated ops with hand-written
//! adjoints, everything else composes from primitives.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis};

use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    /// (P, K) + (1, K)
    AddRow(NodeId, NodeId),
    /// (P, K) * (1, K)
    MulRow(NodeId, NodeId),
    /// (P, K) * (P, 1)
    MulCol(NodeId, NodeId),
    /// (P, K) / (P, 1)
    DivCol(NodeId, NodeId),
    /// tensor * scalar-tensor (1, 1)
    MulScalarT(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumAxis1(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    ConcatRows(Vec<NodeId>),
    SelectRows(NodeId, Vec<usize>),
    Sin(NodeId),
    Cos(NodeId),
    Exp(NodeId),
    Sqrt(NodeId),
    Sigmoid(NodeId),
    SoftplusBeta(NodeId, f64),
    Relu(NodeId),
    Abs(NodeId),
    Powi(NodeId, i32),
    /// Exclusive running product along axis 1: y[i, k] = prod_{j<k} x[i, j].
    ExclCumprod(NodeId),
    Reshape(NodeId),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Named parameter blocks with deterministic iteration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    blocks: Vec<(String, Array2<f64>)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Array2<f64>) {
        assert!(
            self.find(name).is_none(),
            "duplicate parameter block {name}"
        );
        self.blocks.push((name.to_string(), value));
    }

    fn find(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        let i = self
            .find(name)
            .unwrap_or_else(|| panic!("unknown parameter block {name}"));
        &self.blocks[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        let i = self
            .find(name)
            .unwrap_or_else(|| panic!("unknown parameter block {name}"));
        &mut self.blocks[i].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.find(name).is_some()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.blocks.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks.iter().map(|(_, v)| v.len()).sum()
    }

    /// Global flat coordinate across blocks in insertion order.
    pub fn flat_get(&self, index: usize) -> f64 {
        let (b, i) = self.locate(index);
        *self.blocks[b].1.as_slice().unwrap().get(i).unwrap()
    }

    pub fn flat_add(&mut self, index: usize, delta: f64) {
        let (b, i) = self.locate(index);
        self.blocks[b].1.as_slice_mut().unwrap()[i] += delta;
    }

    pub fn flat_name(&self, index: usize) -> &str {
        let (b, _) = self.locate(index);
        &self.blocks[b].0
    }

    fn locate(&self, mut index: usize) -> (usize, usize) {
        for (b, (_, v)) in self.blocks.iter().enumerate() {
            if index < v.len() {
                return (b, index);
            }
            index -= v.len();
        }
        panic!("flat parameter index out of range");
    }
}

/// Gradients keyed by parameter block name.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    map: HashMap<String, Array2<f64>>,
}

impl Grads {
    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.map.get(name)
    }

    pub fn flat_get(&self, store: &ParamStore, index: usize) -> f64 {
        let mut rem = index;
        for (name, v) in store.iter() {
            if rem < v.len() {
                return match self.map.get(name) {
                    Some(g) => g.as_slice().unwrap()[rem],
                    None => 0.0,
                };
            }
            rem -= v.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(NodeId, String)>,
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

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        debug_assert_eq!(v.len(), 1);
        v[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, value: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Binds a parameter block as a leaf; gradients accumulate under its name.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> NodeId {
        let id = self.push(store.get(name).clone(), Op::Leaf);
        self.bindings.push((id, name.to_string()));
        id
    }

    fn same_shape(&self, a: NodeId, b: NodeId) {
        debug_assert_eq!(
            self.nodes[a].value.dim(),
            self.nodes[b].value.dim(),
            "shape mismatch"
        );
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b);
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b);
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b);
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b);
        let v = &self.nodes[a].value / &self.nodes[b].value;
        self.push(v, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = -&self.nodes[a].value;
        self.push(v, Op::Neg(a))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a].value + c;
        self.push(v, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a].value * c;
        self.push(v, Op::MulScalar(a, c))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[row].value.nrows(), 1);
        debug_assert_eq!(self.nodes[a].value.ncols(), self.nodes[row].value.ncols());
        let v = &self.nodes[a].value + &self.nodes[row].value;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[row].value.nrows(), 1);
        debug_assert_eq!(self.nodes[a].value.ncols(), self.nodes[row].value.ncols());
        let v = &self.nodes[a].value * &self.nodes[row].value;
        self.push(v, Op::MulRow(a, row))
    }

    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[col].value.ncols(), 1);
        debug_assert_eq!(self.nodes[a].value.nrows(), self.nodes[col].value.nrows());
        let v = &self.nodes[a].value * &self.nodes[col].value;
        self.push(v, Op::MulCol(a, col))
    }

    pub fn div_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[col].value.ncols(), 1);
        let v = &self.nodes[a].value / &self.nodes[col].value;
        self.push(v, Op::DivCol(a, col))
    }

    pub fn mul_scalar_t(&mut self, a: NodeId, st: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[st].value.len(), 1);
        let sv = self.nodes[st].value[[0, 0]];
        let v = &self.nodes[a].value * sv;
        self.push(v, Op::MulScalarT(a, st))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.nodes[a].value.sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a].value.len() as f64;
        let v = Array2::from_elem((1, 1), self.nodes[a].value.sum() / n);
        self.push(v, Op::MeanAll(a))
    }

    pub fn sum_axis1(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a].value.sum_axis(Axis(1));
        let v = s.insert_axis(Axis(1));
        self.push(v, Op::SumAxis1(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&id| self.nodes[id].value.view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.nodes[a].value.slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&id| self.nodes[id].value.view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn select_rows(&mut self, a: NodeId, rows: &[usize]) -> NodeId {
        let src = &self.nodes[a].value;
        let mut v = Array2::zeros((rows.len(), src.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            v.row_mut(i).assign(&src.row(r));
        }
        self.push(v, Op::SelectRows(a, rows.to_vec()))
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::sin);
        self.push(v, Op::Sin(a))
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::cos);
        self.push(v, Op::Cos(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softplus_beta(&mut self, a: NodeId, beta: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| softplus(beta * x) / beta);
        self.push(v, Op::SoftplusBeta(a, beta))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn powi(&mut self, a: NodeId, n: i32) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.powi(n));
        self.push(v, Op::Powi(a, n))
    }

    pub fn excl_cumprod(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let (p, k) = x.dim();
        let mut y = Array2::ones((p, k));
        for i in 0..p {
            let mut acc = 1.0;
            for j in 0..k {
                y[[i, j]] = acc;
                acc *= x[[i, j]];
            }
        }
        self.push(y, Op::ExclCumprod(a))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = self.nodes[a]
            .value
            .clone()
            .into_shape_with_order((rows, cols))
            .expect("reshape element count mismatch");
        self.push(v, Op::Reshape(a))
    }

    /// Detached copy: value flows, gradient does not.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.clone();
        self.constant(v)
    }

    /// Reverse sweep from `output` (must be 1x1); returns per-name gradients.
    pub fn backward(&mut self, output: NodeId) -> Result<Grads> {
        if self.nodes[output].value.len() != 1 {
            return Err(Error::validation("backward output must be scalar"));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[output] = Some(Array2::ones((1, 1)));

        for id in (0..=output).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, -g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[b].value;
                    let gb = &g * &self.nodes[a].value;
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Div(a, b) => {
                    let bv = &self.nodes[b].value;
                    let ga = &g / bv;
                    let gb = -&g * &self.nodes[a].value / (bv * bv);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Neg(a) => accumulate(&mut grads, a, -g),
                Op::AddScalar(a) => accumulate(&mut grads, a, g),
                Op::MulScalar(a, c) => accumulate(&mut grads, a, g * c),
                Op::AddRow(a, row) => {
                    let grow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, a, g);
                    accumulate(&mut grads, row, grow);
                }
                Op::MulRow(a, row) => {
                    let ga = &g * &self.nodes[row].value;
                    let grow = (&g * &self.nodes[a].value)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, row, grow);
                }
                Op::MulCol(a, col) => {
                    let ga = &g * &self.nodes[col].value;
                    let gcol = (&g * &self.nodes[a].value)
                        .sum_axis(Axis(1))
                        .insert_axis(Axis(1));
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, col, gcol);
                }
                Op::DivCol(a, col) => {
                    let cv = &self.nodes[col].value;
                    let ga = &g / cv;
                    let gcol = -(&g * &self.nodes[a].value)
                        .sum_axis(Axis(1))
                        .insert_axis(Axis(1))
                        / (cv * cv);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, col, gcol);
                }
                Op::MulScalarT(a, st) => {
                    let sv = self.nodes[st].value[[0, 0]];
                    let gs = (&g * &self.nodes[a].value).sum();
                    accumulate(&mut grads, a, g * sv);
                    accumulate(&mut grads, st, Array2::from_elem((1, 1), gs));
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[b].value.t());
                    let gb = self.nodes[a].value.t().dot(&g);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::SumAll(a) => {
                    let dim = self.nodes[a].value.dim();
                    accumulate(&mut grads, a, Array2::from_elem(dim, g[[0, 0]]));
                }
                Op::MeanAll(a) => {
                    let dim = self.nodes[a].value.dim();
                    let n = self.nodes[a].value.len() as f64;
                    accumulate(&mut grads, a, Array2::from_elem(dim, g[[0, 0]] / n));
                }
                Op::SumAxis1(a) => {
                    let dim = self.nodes[a].value.dim();
                    let mut ga = Array2::zeros(dim);
                    for i in 0..dim.0 {
                        ga.row_mut(i).fill(g[[i, 0]]);
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in &parts {
                        let w = self.nodes[p].value.ncols();
                        let gp = g.slice(s![.., start..start + w]).to_owned();
                        accumulate(&mut grads, p, gp);
                        start += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let dim = self.nodes[a].value.dim();
                    let mut ga = Array2::zeros(dim);
                    ga.slice_mut(s![.., start..end]).assign(&g);
                    accumulate(&mut grads, a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in &parts {
                        let h = self.nodes[p].value.nrows();
                        let gp = g.slice(s![start..start + h, ..]).to_owned();
                        accumulate(&mut grads, p, gp);
                        start += h;
                    }
                }
                Op::SelectRows(a, rows) => {
                    let dim = self.nodes[a].value.dim();
                    let mut ga = Array2::zeros(dim);
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(i);
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::Sin(a) => {
                    let ga = &g * &self.nodes[a].value.mapv(f64::cos);
                    accumulate(&mut grads, a, ga);
                }
                Op::Cos(a) => {
                    let ga = -&g * &self.nodes[a].value.mapv(f64::sin);
                    accumulate(&mut grads, a, ga);
                }
                Op::Exp(a) => {
                    let ga = &g * &self.nodes[id].value;
                    accumulate(&mut grads, a, ga);
                }
                Op::Sqrt(a) => {
                    let ga = &g / (&self.nodes[id].value * 2.0);
                    accumulate(&mut grads, a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[id].value;
                    let ga = &g * &(y * &y.mapv(|v| 1.0 - v));
                    accumulate(&mut grads, a, ga);
                }
                Op::SoftplusBeta(a, beta) => {
                    let ga = &g * &self.nodes[a].value.mapv(|x| sigmoid(beta * x));
                    accumulate(&mut grads, a, ga);
                }
                Op::Relu(a) => {
                    let ga = &g * &self.nodes[a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, a, ga);
                }
                Op::Abs(a) => {
                    let ga = &g * &self.nodes[a].value.mapv(f64::signum);
                    accumulate(&mut grads, a, ga);
                }
                Op::Powi(a, n) => {
                    let ga = &g * &self.nodes[a].value.mapv(|x| n as f64 * x.powi(n - 1));
                    accumulate(&mut grads, a, ga);
                }
                Op::ExclCumprod(a) => {
                    let x = &self.nodes[a].value;
                    let (p, k) = x.dim();
                    let mut ga = Array2::zeros((p, k));
                    // O(K^2) per row, K is the per-ray sample count (small).
                    for i in 0..p {
                        for j in 0..k {
                            let mut acc = 0.0;
                            for kk in (j + 1)..k {
                                let mut prod = 1.0;
                                for l in 0..kk {
                                    if l != j {
                                        prod *= x[[i, l]];
                                    }
                                }
                                acc += g[[i, kk]] * prod;
                            }
                            ga[[i, j]] = acc;
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::Reshape(a) => {
                    let dim = self.nodes[a].value.dim();
                    let ga = g.into_shape_with_order(dim).expect("reshape grad");
                    accumulate(&mut grads, a, ga);
                }
            }
        }

        let mut out = Grads::default();
        for (id, name) in &self.bindings {
            if let Some(g) = &grads[*id] {
                match out.map.get_mut(name) {
                    Some(acc) => *acc += g,
                    None => {
                        out.map.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        Ok(out)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
    match &mut grads[id] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Central finite-difference check of d(sum of f(x)) / dx for one block.
    fn check_grad<F>(shape: (usize, usize), f: F)
    where
        F: Fn(&mut Tape, NodeId) -> NodeId,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x0: Array2<f64> =
            Array::from_shape_fn(shape, |_| rng.random_range(0.1..0.9));
        let mut store = ParamStore::new();
        store.add("x", x0.clone());

        let mut tape = Tape::new();
        let x = tape.param(&store, "x");
        let y = f(&mut tape, x);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get("x").unwrap().clone();

        let h = 1e-6;
        for idx in 0..x0.len() {
            let eval = |delta: f64| {
                let mut store2 = store.clone();
                store2.get_mut("x").as_slice_mut().unwrap()[idx] += delta;
                let mut t = Tape::new();
                let x = t.param(&store2, "x");
                let y = f(&mut t, x);
                let l = t.sum_all(y);
                t.scalar(l)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = g.as_slice().unwrap()[idx];
            assert!(
                (fd - an).abs() <= 1e-5 * fd.abs().max(1.0),
                "idx {idx}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn grad_elementwise_chain() {
        check_grad((3, 4), |t, x| {
            let a = t.sin(x);
            let b = t.exp(a);
            let c = t.mul(b, x);
            t.sqrt(c)
        });
    }

    #[test]
    fn grad_matmul_bias() {
        check_grad((4, 3), |t, x| {
            let w = t.constant(arr2(&[[0.3, -0.2], [0.5, 0.1], [-0.4, 0.7]]));
            let b = t.constant(arr2(&[[0.05, -0.02]]));
            let y = t.matmul(x, w);
            let z = t.add_row(y, b);
            t.sigmoid(z)
        });
    }

    #[test]
    fn grad_broadcast_ops() {
        check_grad((5, 3), |t, x| {
            let col = t.sum_axis1(x);
            let y = t.mul_col(x, col);
            let z = t.div_col(y, col);
            let s = t.mean_all(x);
            t.mul_scalar_t(z, s)
        });
    }

    #[test]
    fn grad_softplus_relu_abs() {
        check_grad((3, 3), |t, x| {
            let a = t.softplus_beta(x, 10.0);
            let shifted = t.add_scalar(x, -0.5);
            let b = t.relu(shifted);
            let c = t.abs(shifted);
            let ab = t.add(a, b);
            t.add(ab, c)
        });
    }

    #[test]
    fn grad_cumprod_and_slices() {
        check_grad((3, 6), |t, x| {
            let c = t.excl_cumprod(x);
            let left = t.slice_cols(c, 0, 3);
            let right = t.slice_cols(c, 3, 6);
            let m = t.mul(left, right);
            t.concat_cols(&[m, left])
        });
    }

    #[test]
    fn grad_select_and_concat_rows() {
        check_grad((4, 3), |t, x| {
            let sel = t.select_rows(x, &[0, 2, 2, 1]);
            let top = t.slice_cols(sel, 0, 2);
            let more = t.concat_rows(&[top.clone(), top]);
            t.powi(more, 3)
        });
    }

    #[test]
    fn grad_mul_row_and_reshape() {
        check_grad((4, 6), |t, x| {
            let row = t.constant(arr2(&[[0.5, -0.3, 1.2, 0.1, 0.9, -0.7]]));
            let y = t.mul_row(x, row);
            let r = t.reshape(y, 8, 3);
            t.powi(r, 2)
        });
    }

    #[test]
    fn grad_div_powi() {
        check_grad((2, 5), |t, x| {
            let a = t.add_scalar(x, 1.0);
            let b = t.powi(x, 2);
            let c = t.div(b, a);
            let d = t.cos(c);
            t.sub(d, x)
        });
    }

    #[test]
    fn excl_cumprod_values() {
        let mut t = Tape::new();
        let x = t.constant(arr2(&[[2.0, 3.0, 4.0]]));
        let y = t.excl_cumprod(x);
        assert_eq!(t.value(y), &arr2(&[[1.0, 2.0, 6.0]]));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut store = ParamStore::new();
        store.add("x", arr2(&[[2.0]]));
        let mut t = Tape::new();
        let x = t.param(&store, "x");
        let d = t.detach(x);
        let y = t.mul(x, d);
        let l = t.sum_all(y);
        let g = t.backward(l).unwrap();
        // d(x * detach(x))/dx = detach(x) = 2, not 2x = 4
        assert_eq!(g.get("x").unwrap()[[0, 0]], 2.0);
    }

    #[test]
    fn param_store_flat_indexing() {
        let mut store = ParamStore::new();
        store.add("a", arr2(&[[1.0, 2.0]]));
        store.add("b", arr2(&[[3.0], [4.0]]));
        assert_eq!(store.num_scalars(), 4);
        assert_eq!(store.flat_get(2), 3.0);
        assert_eq!(store.flat_name(3), "b");
        store.flat_add(0, 0.5);
        assert_eq!(store.get("a")[[0, 0]], 1.5);
    }
}
