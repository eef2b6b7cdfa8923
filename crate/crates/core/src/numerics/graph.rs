//! Tape-based reverse-mode differentiation over rank-2 tensors.
//!
//! Every kernel application appends a node to the [`Graph`]; node indices
//! are a topological order, so the backward pass is a single reverse sweep.
//! Parameters are named leaves, constants are anonymous leaves that never
//! receive gradient, and [`Kernel::StopGrad`] cuts the gradient flow.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw};
use crate::numerics::{Real, Tensor};

const NORM_EPS: f64 = 1e-12;
const STANDARDIZE_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The fixed kernel set.
#[derive(Clone, Debug, PartialEq)]
pub enum Kernel {
    MatMul,
    Transpose,
    Add,
    Sub,
    /// `x (n x c) + b (1 x c)`, the only broadcasting kernel.
    AddRow,
    Mul,
    Scale(f64),
    Sum,
    Mean,
    /// Mean over consecutive blocks of `group` rows: `(g*n) x c -> n x c`.
    MeanRowGroups(usize),
    Exp,
    Log,
    Tanh,
    Relu,
    Sigmoid,
    Softplus,
    SoftmaxRows,
    LogSoftmaxRows,
    L2NormalizeRows,
    /// Per-row zero mean / unit variance, no affine parameters.
    StandardizeRows,
    /// Concatenate along rows (axis 0) or columns (axis 1).
    Concat(usize),
    GatherRows(Vec<usize>),
    StopGrad,
}

impl Kernel {
    pub fn name(&self) -> &'static str {
        match self {
            Kernel::MatMul => "matmul",
            Kernel::Transpose => "transpose",
            Kernel::Add => "add",
            Kernel::Sub => "sub",
            Kernel::AddRow => "add_row",
            Kernel::Mul => "mul",
            Kernel::Scale(_) => "scale",
            Kernel::Sum => "sum",
            Kernel::Mean => "mean",
            Kernel::MeanRowGroups(_) => "mean_row_groups",
            Kernel::Exp => "exp",
            Kernel::Log => "log",
            Kernel::Tanh => "tanh",
            Kernel::Relu => "relu",
            Kernel::Sigmoid => "sigmoid",
            Kernel::Softplus => "softplus",
            Kernel::SoftmaxRows => "softmax_rows",
            Kernel::LogSoftmaxRows => "log_softmax_rows",
            Kernel::L2NormalizeRows => "l2_normalize_rows",
            Kernel::StandardizeRows => "standardize_rows",
            Kernel::Concat(_) => "concat",
            Kernel::GatherRows(_) => "gather_rows",
            Kernel::StopGrad => "stop_grad",
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param,
    Constant,
    Apply(Kernel, Vec<Var>),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every named parameter on the graph.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    by_name: BTreeMap<String, Tensor<T>>,
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn from_map(by_name: BTreeMap<String, Tensor<T>>) -> Self {
        Self {
            by_name,
            by_node: Vec::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    /// Gradient of any node (None when no gradient reached it).
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.by_name.iter()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.by_name
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a named parameter leaf. Registering an existing name
    /// returns the existing node and ignores `value`.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param, true);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Applies `kernel` to `inputs` and records the node.
    pub fn forward(&mut self, kernel: Kernel, inputs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = eval(&kernel, &vals)?;
        if !out.all_finite() {
            return Err(Error::NumericOverflow {
                kernel: kernel.name(),
            });
        }
        let requires_grad = !matches!(kernel, Kernel::StopGrad)
            && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(out, Op::Apply(kernel, inputs.to_vec()), requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward(Kernel::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.forward(Kernel::Transpose, &[a])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward(Kernel::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward(Kernel::Sub, &[a, b])
    }
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.forward(Kernel::AddRow, &[a, bias])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward(Kernel::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.forward(Kernel::Scale(s), &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.forward(Kernel::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.forward(Kernel::Mean, &[a])
    }
    pub fn mean_row_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        self.forward(Kernel::MeanRowGroups(group), &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.forward(Kernel::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.forward(Kernel::Log, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.forward(Kernel::Tanh, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.forward(Kernel::Relu, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.forward(Kernel::Sigmoid, &[a])
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.forward(Kernel::Softplus, &[a])
    }
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.forward(Kernel::SoftmaxRows, &[a])
    }
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.forward(Kernel::LogSoftmaxRows, &[a])
    }
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.forward(Kernel::L2NormalizeRows, &[a])
    }
    pub fn standardize_rows(&mut self, a: Var) -> Result<Var> {
        self.forward(Kernel::StandardizeRows, &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.forward(Kernel::Concat(axis), parts)
    }
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        self.forward(Kernel::GatherRows(idx), &[a])
    }
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.forward(Kernel::GatherRows((start..end).collect()), &[a])
    }
    pub fn stop_grad(&mut self, a: Var) -> Result<Var> {
        self.forward(Kernel::StopGrad, &[a])
    }

    /// Reverse sweep from a scalar `loss`. Parameters the loss does not
    /// depend on receive zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![T::one()])?);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Apply(kernel, inputs) = &node.op {
                let wants: Vec<bool> = inputs
                    .iter()
                    .map(|v| self.nodes[v.0].requires_grad)
                    .collect();
                if wants.iter().any(|&w| w) {
                    let vals: Vec<&Tensor<T>> =
                        inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let contribs = vjp(kernel, &vals, &node.value, &g, &wants);
                    for (input, c) in inputs.iter().zip(contribs) {
                        if let Some(c) = c {
                            accumulate(&mut grads[input.0], c);
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }
        let mut by_name = BTreeMap::new();
        for (name, v) in &self.params {
            let g = grads
                .get(v.0)
                .and_then(Option::clone)
                .unwrap_or_else(|| Tensor::zeros_like(&self.nodes[v.0].value));
            by_name.insert(name.clone(), g);
        }
        Ok(Gradients {
            by_name,
            by_node: grads,
        })
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, c: Tensor<T>) {
    match slot {
        None => *slot = Some(c),
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(c.data()) {
                *a = *a + *b;
            }
        }
    }
}

fn need_matrix<T: Real>(kernel: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if !t.is_matrix() {
        return Err(Error::shape(kernel, format!("expected rank-2, got {:?}", t.shape())));
    }
    Ok((t.rows(), t.cols()))
}

fn arity<T>(kernel: &Kernel, vals: &[&Tensor<T>], n: usize) -> Result<()> {
    if vals.len() != n {
        return Err(Error::shape(
            kernel.name(),
            format!("expected {n} inputs, got {}", vals.len()),
        ));
    }
    Ok(())
}

fn same_shape<T: Real>(kernel: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            kernel,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

fn softplus<T: Real>(x: T) -> T {
    // max(x, 0) + log1p(exp(-|x|))
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn eval<T: Real>(kernel: &Kernel, vals: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let name = kernel.name();
    let unary = |f: &dyn Fn(T) -> T| -> Result<Tensor<T>> {
        arity(kernel, vals, 1)?;
        Ok(vals[0].map(f))
    };
    match kernel {
        Kernel::MatMul => {
            arity(kernel, vals, 2)?;
            let (n, k) = need_matrix(name, vals[0])?;
            let (k2, m) = need_matrix(name, vals[1])?;
            if k != k2 {
                return Err(Error::shape(
                    name,
                    format!("{:?} x {:?}", vals[0].shape(), vals[1].shape()),
                ));
            }
            Tensor::matrix(n, m, matmul_raw(vals[0].data(), vals[1].data(), n, k, m))
        }
        Kernel::Transpose => {
            arity(kernel, vals, 1)?;
            need_matrix(name, vals[0])?;
            Ok(vals[0].transpose())
        }
        Kernel::Add | Kernel::Sub | Kernel::Mul => {
            arity(kernel, vals, 2)?;
            same_shape(name, vals[0], vals[1])?;
            Ok(match kernel {
                Kernel::Add => zip_map(vals[0], vals[1], |x, y| x + y),
                Kernel::Sub => zip_map(vals[0], vals[1], |x, y| x - y),
                _ => zip_map(vals[0], vals[1], |x, y| x * y),
            })
        }
        Kernel::AddRow => {
            arity(kernel, vals, 2)?;
            let (n, c) = need_matrix(name, vals[0])?;
            if vals[1].shape() != [1, c] {
                return Err(Error::shape(
                    name,
                    format!("bias {:?} for input {:?}", vals[1].shape(), vals[0].shape()),
                ));
            }
            let b = vals[1].data();
            Ok(Tensor::from_fn(n, c, |r, j| vals[0].get(r, j) + b[j]))
        }
        Kernel::Scale(s) => {
            let s = T::of(*s);
            unary(&|x| x * s)
        }
        Kernel::Sum | Kernel::Mean => {
            arity(kernel, vals, 1)?;
            let total: T = vals[0].data().iter().copied().sum();
            if matches!(kernel, Kernel::Sum) {
                Ok(Tensor::scalar(total))
            } else {
                if vals[0].numel() == 0 {
                    return Err(Error::shape(name, "mean of empty tensor"));
                }
                Ok(Tensor::scalar(total / T::of(vals[0].numel() as f64)))
            }
        }
        Kernel::MeanRowGroups(group) => {
            arity(kernel, vals, 1)?;
            let (rows, c) = need_matrix(name, vals[0])?;
            if *group == 0 || rows % group != 0 {
                return Err(Error::shape(
                    name,
                    format!("{rows} rows not divisible into groups of {group}"),
                ));
            }
            let n = rows / group;
            let inv = T::one() / T::of(*group as f64);
            let mut out = vec![T::zero(); n * c];
            for r in 0..rows {
                let dst = &mut out[(r / group) * c..(r / group + 1) * c];
                for (o, &x) in dst.iter_mut().zip(vals[0].row_slice(r)) {
                    *o = *o + x;
                }
            }
            for o in out.iter_mut() {
                *o = *o * inv;
            }
            Tensor::matrix(n, c, out)
        }
        Kernel::Exp => unary(&|x| x.exp()),
        Kernel::Log => unary(&|x| x.ln()),
        Kernel::Tanh => unary(&|x| x.tanh()),
        Kernel::Relu => unary(&|x| x.max(T::zero())),
        Kernel::Sigmoid => unary(&sigmoid),
        Kernel::Softplus => unary(&softplus),
        Kernel::SoftmaxRows | Kernel::LogSoftmaxRows => {
            arity(kernel, vals, 1)?;
            let (n, c) = need_matrix(name, vals[0])?;
            let mut out = vec![T::zero(); n * c];
            for r in 0..n {
                let row = vals[0].row_slice(r);
                let dst = &mut out[r * c..(r + 1) * c];
                if matches!(kernel, Kernel::SoftmaxRows) {
                    softmax_row(row, dst);
                } else {
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let lse = max
                        + row
                            .iter()
                            .map(|&x| (x - max).exp())
                            .sum::<T>()
                            .ln();
                    for (o, &x) in dst.iter_mut().zip(row) {
                        *o = x - lse;
                    }
                }
            }
            Tensor::matrix(n, c, out)
        }
        Kernel::L2NormalizeRows => {
            arity(kernel, vals, 1)?;
            let (n, c) = need_matrix(name, vals[0])?;
            let eps = T::of(NORM_EPS);
            let mut out = vec![T::zero(); n * c];
            for r in 0..n {
                let row = vals[0].row_slice(r);
                let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt().max(eps);
                for (o, &x) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
                    *o = x / norm;
                }
            }
            Tensor::matrix(n, c, out)
        }
        Kernel::StandardizeRows => {
            arity(kernel, vals, 1)?;
            let (n, c) = need_matrix(name, vals[0])?;
            let mut out = vec![T::zero(); n * c];
            for r in 0..n {
                let row = vals[0].row_slice(r);
                let (mu, inv_sd) = row_moments(row);
                for (o, &x) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
                    *o = (x - mu) * inv_sd;
                }
            }
            Tensor::matrix(n, c, out)
        }
        Kernel::Concat(axis) => {
            if vals.is_empty() {
                return Err(Error::shape(name, "no inputs"));
            }
            for v in vals {
                need_matrix(name, v)?;
            }
            match axis {
                0 => Tensor::vstack(vals),
                1 => {
                    let n = vals[0].rows();
                    if vals.iter().any(|v| v.rows() != n) {
                        return Err(Error::shape(name, "row counts differ for axis 1"));
                    }
                    let c: usize = vals.iter().map(|v| v.cols()).sum();
                    let mut data = Vec::with_capacity(n * c);
                    for r in 0..n {
                        for v in vals {
                            data.extend_from_slice(v.row_slice(r));
                        }
                    }
                    Tensor::matrix(n, c, data)
                }
                _ => Err(Error::shape(name, format!("axis {axis} out of range"))),
            }
        }
        Kernel::GatherRows(idx) => {
            arity(kernel, vals, 1)?;
            let (n, _) = need_matrix(name, vals[0])?;
            if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                return Err(Error::shape(name, format!("row {bad} out of {n}")));
            }
            Ok(vals[0].select_rows(idx))
        }
        Kernel::StopGrad => {
            arity(kernel, vals, 1)?;
            Ok(vals[0].clone())
        }
    }
}

fn row_moments<T: Real>(row: &[T]) -> (T, T) {
    let c = T::of(row.len() as f64);
    let mu = row.iter().copied().sum::<T>() / c;
    let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / c;
    (mu, T::one() / (var + T::of(STANDARDIZE_EPS)).sqrt())
}

/// Vector-Jacobian products for each input flagged in `wants`.
fn vjp<T: Real>(
    kernel: &Kernel,
    vals: &[&Tensor<T>],
    out: &Tensor<T>,
    g: &Tensor<T>,
    wants: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let only = |t: Tensor<T>| vec![Some(t)];
    let pick = |i: usize, f: &dyn Fn() -> Tensor<T>| if wants[i] { Some(f()) } else { None };
    match kernel {
        Kernel::MatMul => {
            let (n, k) = (vals[0].rows(), vals[0].cols());
            let m = vals[1].cols();
            vec![
                pick(0, &|| {
                    Tensor::matrix(n, k, matmul_nt_raw(g.data(), vals[1].data(), n, m, k))
                        .expect("shape")
                }),
                pick(1, &|| {
                    Tensor::matrix(k, m, matmul_tn_raw(vals[0].data(), g.data(), n, k, m))
                        .expect("shape")
                }),
            ]
        }
        Kernel::Transpose => only(g.transpose()),
        Kernel::Add => vec![pick(0, &|| g.clone()), pick(1, &|| g.clone())],
        Kernel::Sub => vec![pick(0, &|| g.clone()), pick(1, &|| g.map(|x| -x))],
        Kernel::AddRow => {
            let c = g.cols();
            vec![
                pick(0, &|| g.clone()),
                pick(1, &|| {
                    let mut b = vec![T::zero(); c];
                    for r in 0..g.rows() {
                        for (acc, &x) in b.iter_mut().zip(g.row_slice(r)) {
                            *acc = *acc + x;
                        }
                    }
                    Tensor::matrix(1, c, b).expect("shape")
                }),
            ]
        }
        Kernel::Mul => vec![
            pick(0, &|| zip_map(g, vals[1], |a, b| a * b)),
            pick(1, &|| zip_map(g, vals[0], |a, b| a * b)),
        ],
        Kernel::Scale(s) => {
            let s = T::of(*s);
            only(g.map(|x| x * s))
        }
        Kernel::Sum => only(vals[0].map(|_| g.item())),
        Kernel::Mean => {
            let v = g.item() / T::of(vals[0].numel() as f64);
            only(vals[0].map(|_| v))
        }
        Kernel::MeanRowGroups(group) => {
            let inv = T::one() / T::of(*group as f64);
            let c = vals[0].cols();
            only(Tensor::from_fn(vals[0].rows(), c, |r, j| g.get(r / group, j) * inv))
        }
        Kernel::Exp => only(zip_map(g, out, |a, y| a * y)),
        Kernel::Log => only(zip_map(g, vals[0], |a, x| a / x)),
        Kernel::Tanh => only(zip_map(g, out, |a, y| a * (T::one() - y * y))),
        Kernel::Relu => only(zip_map(g, vals[0], |a, x| {
            if x > T::zero() {
                a
            } else {
                T::zero()
            }
        })),
        Kernel::Sigmoid => only(zip_map(g, out, |a, y| a * y * (T::one() - y))),
        Kernel::Softplus => only(zip_map(g, vals[0], |a, x| a * sigmoid(x))),
        Kernel::SoftmaxRows => {
            let (n, c) = (out.rows(), out.cols());
            let mut dx = vec![T::zero(); n * c];
            for r in 0..n {
                let y = out.row_slice(r);
                let gr = g.row_slice(r);
                let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..c {
                    dx[r * c + j] = y[j] * (gr[j] - dot);
                }
            }
            only(Tensor::matrix(n, c, dx).expect("shape"))
        }
        Kernel::LogSoftmaxRows => {
            let (n, c) = (out.rows(), out.cols());
            let mut dx = vec![T::zero(); n * c];
            for r in 0..n {
                let y = out.row_slice(r);
                let gr = g.row_slice(r);
                let total: T = gr.iter().copied().sum();
                for j in 0..c {
                    dx[r * c + j] = gr[j] - y[j].exp() * total;
                }
            }
            only(Tensor::matrix(n, c, dx).expect("shape"))
        }
        Kernel::L2NormalizeRows => {
            let (n, c) = (out.rows(), out.cols());
            let eps = T::of(NORM_EPS);
            let mut dx = vec![T::zero(); n * c];
            for r in 0..n {
                let x = vals[0].row_slice(r);
                let y = out.row_slice(r);
                let gr = g.row_slice(r);
                let raw = x.iter().map(|&v| v * v).sum::<T>().sqrt();
                if raw <= eps {
                    for j in 0..c {
                        dx[r * c + j] = gr[j] / eps;
                    }
                    continue;
                }
                let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..c {
                    dx[r * c + j] = (gr[j] - y[j] * dot) / raw;
                }
            }
            only(Tensor::matrix(n, c, dx).expect("shape"))
        }
        Kernel::StandardizeRows => {
            let (n, c) = (out.rows(), out.cols());
            let cf = T::of(c as f64);
            let mut dx = vec![T::zero(); n * c];
            for r in 0..n {
                let (_, inv_sd) = row_moments(vals[0].row_slice(r));
                let y = out.row_slice(r);
                let gr = g.row_slice(r);
                let g_mean = gr.iter().copied().sum::<T>() / cf;
                let gy_mean = gr.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() / cf;
                for j in 0..c {
                    dx[r * c + j] = inv_sd * (gr[j] - g_mean - y[j] * gy_mean);
                }
            }
            only(Tensor::matrix(n, c, dx).expect("shape"))
        }
        Kernel::Concat(axis) => {
            let mut res = Vec::with_capacity(vals.len());
            let mut offset = 0;
            for (i, v) in vals.iter().enumerate() {
                let (vr, vc) = (v.rows(), v.cols());
                if wants[i] {
                    let t = if *axis == 0 {
                        Tensor::from_fn(vr, vc, |r, j| g.get(offset + r, j))
                    } else {
                        Tensor::from_fn(vr, vc, |r, j| g.get(r, offset + j))
                    };
                    res.push(Some(t));
                } else {
                    res.push(None);
                }
                offset += if *axis == 0 { vr } else { vc };
            }
            res
        }
        Kernel::GatherRows(idx) => {
            let c = vals[0].cols();
            let mut dx = Tensor::zeros(vals[0].rows(), c);
            for (k, &i) in idx.iter().enumerate() {
                let src = g.row_slice(k).to_vec();
                for (d, s) in dx.data_mut()[i * c..(i + 1) * c].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
            only(dx)
        }
        Kernel::StopGrad => vec![None],
    }
}
