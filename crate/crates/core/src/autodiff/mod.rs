//! Reverse-mode automatic differentiation on a tape of dense `f32`
//! matrices, with just the operations a point-cloud MLP and its loss need.
//!
//! A [`Tape`] records every value produced by an operation. [`Tape::backward`]
//! walks the record in reverse, accumulating exact analytic gradients into
//! every node that depends on a leaf created with `requires_grad`. Sums in
//! `mse`, `add_bias` and the DFT are accumulated in `f64`.

mod optim;

pub use optim::{adam_step, scheduler_lr, AdamConfig, AdamState};

use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFiniteValue { op: &'static str },
    #[error("backward needs a 1x1 root, got {0:?}")]
    NotScalar(Vec<usize>),
}

/// Dense row-major array. Rank 1 behaves as a single row.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "dimensions must be positive");
        assert_eq!(shape.iter().product::<usize>(), data.len(), "data length");
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        Self::new(vec![rows, cols], data)
    }

    pub fn row(data: Vec<f32>) -> Self {
        Self::new(vec![1, data.len()], data)
    }

    pub fn scalar(v: f32) -> Self {
        Self::new(vec![1, 1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn rows_cols(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Some((1, *n)),
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar");
        self.data[0]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    /// Column-wise max; `argmax[c]` is the winning row.
    MaxRows(Var, Vec<usize>),
    Mse(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    DftMagnitude(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Mse(a, b) | Op::Add(a, b) | Op::Sub(a, b) => {
                vec![*a, *b]
            }
            Op::Relu(a) | Op::MaxRows(a, _) | Op::Scale(a, _) | Op::AddScalar(a) | Op::DftMagnitude(a) => {
                vec![*a]
            }
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, data: &[f32]) -> Result<(), AutodiffError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AutodiffError::NonFiniteValue { op })
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: a.shape.clone(),
        right: b.shape.clone(),
    }
}

/// `c (m x n) = alpha * a (m x k) * b (k x n) + beta * c`, with explicit
/// row/column strides so transposes cost nothing.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices hold every element addressed by the given
    // dimensions and strides; `c` is row-major m x n and does not alias.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Direct O(N^2) DFT of a real sequence: `(re, im)` per frequency.
pub fn dft(x: &[f64]) -> Vec<(f64, f64)> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter().enumerate().fold((0.0, 0.0), |(re, im), (t, &v)| {
                let theta = 2.0 * std::f64::consts::PI * ((k * t) % n) as f64 / n as f64;
                (re + v * theta.cos(), im - v * theta.sin())
            })
        })
        .collect()
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var, AutodiffError> {
        check_finite("leaf", &value.data)?;
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var, AutodiffError> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var, AutodiffError> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient; `None` until `backward` reaches the node.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        self.nodes[v.0].grad.take()
    }

    /// Direct operands of the operation that produced `v`.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = match (ta.rows_cols(), tb.rows_cols()) {
            (Some(x), Some(y)) if x.1 == y.0 => (x, y),
            _ => return Err(mismatch("matmul", ta, tb)),
        };
        debug_assert_eq!(k, k2);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &ta.data, (k as isize, 1), &tb.data, (n as isize, 1), 0.0, &mut out);
        check_finite("matmul", &out)?;
        Ok(self.push(Tensor::from_rows(m, n, out), Op::MatMul(a, b)))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (m, n) = match (tx.rows_cols(), tb.rows_cols()) {
            (Some((m, n)), Some((1, nb))) if n == nb => (m, n),
            _ => return Err(mismatch("add_bias", tx, tb)),
        };
        let mut out = tx.data.clone();
        for row in out.chunks_exact_mut(n) {
            for (o, b) in row.iter_mut().zip(&tb.data) {
                *o += b;
            }
        }
        check_finite("add_bias", &out)?;
        Ok(self.push(Tensor::from_rows(m, n, out), Op::AddBias(x, bias)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        let out = Tensor::new(t.shape.clone(), t.data.iter().map(|v| v.max(0.0)).collect());
        Ok(self.push(out, Op::Relu(x)))
    }

    /// Column-wise maximum over rows, `m x n -> 1 x n`. Ties go to the
    /// lowest row index.
    pub fn max_rows(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        let (_, n) = t
            .rows_cols()
            .ok_or_else(|| mismatch("max_rows", t, t))?;
        let mut best = t.data[..n].to_vec();
        let mut argmax = vec![0usize; n];
        for (r, row) in t.data.chunks_exact(n).enumerate().skip(1) {
            for c in 0..n {
                if row[c] > best[c] {
                    best[c] = row[c];
                    argmax[c] = r;
                }
            }
        }
        Ok(self.push(Tensor::row(best), Op::MaxRows(x, argmax)))
    }

    /// Mean of squared differences, as a `1 x 1` tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(mismatch("mse", ta, tb));
        }
        let sum: f64 = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum();
        let v = (sum / ta.len() as f64) as f32;
        check_finite("mse", &[v])?;
        Ok(self.push(Tensor::scalar(v), Op::Mse(a, b)))
    }

    fn elementwise(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        node: Op,
    ) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(mismatch(op, ta, tb));
        }
        let out: Vec<f32> = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        check_finite(op, &out)?;
        let shape = ta.shape.clone();
        Ok(self.push(Tensor::new(shape, out), node))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        let out: Vec<f32> = t.data.iter().map(|v| v * s).collect();
        check_finite("scale", &out)?;
        let shape = t.shape.clone();
        Ok(self.push(Tensor::new(shape, out), Op::Scale(x, s)))
    }

    pub fn add_scalar(&mut self, x: Var, s: f32) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        let out: Vec<f32> = t.data.iter().map(|v| v + s).collect();
        check_finite("add_scalar", &out)?;
        let shape = t.shape.clone();
        Ok(self.push(Tensor::new(shape, out), Op::AddScalar(x)))
    }

    /// `|X_k|` for `X_k = sum_n x_n exp(-2 pi i k n / N)`, over the
    /// flattened input; output has the input's shape.
    pub fn dft_magnitude(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        let xs: Vec<f64> = t.data.iter().map(|&v| v as f64).collect();
        let out: Vec<f32> = dft(&xs)
            .into_iter()
            .map(|(re, im)| re.hypot(im) as f32)
            .collect();
        check_finite("dft_magnitude", &out)?;
        let shape = t.shape.clone();
        Ok(self.push(Tensor::new(shape, out), Op::DftMagnitude(x)))
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f32])) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let n = node.value.len();
        let grad = node.grad.get_or_insert_with(|| vec![0.0; n]);
        f(grad);
    }

    /// Backpropagates from a `1 x 1` root, adding into existing gradients.
    pub fn backward(&mut self, root: Var) -> Result<(), AutodiffError> {
        let shape = &self.nodes[root.0].value.shape;
        if self.nodes[root.0].value.len() != 1 {
            return Err(AutodiffError::NotScalar(shape.clone()));
        }
        self.accumulate(root, |g| g[0] += 1.0);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop_op(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn backprop_op(&mut self, i: usize, op: &Op, g: &[f32]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.rows_cols().unwrap();
                let n = self.nodes[b.0].value.rows_cols().unwrap().1;
                if self.nodes[a.0].requires_grad {
                    let bv = self.nodes[b.0].value.data.clone();
                    // dA += dC * B^T
                    self.accumulate(*a, |ga| {
                        gemm(m, n, k, g, (n as isize, 1), &bv, (1, n as isize), 1.0, ga)
                    });
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.nodes[a.0].value.data.clone();
                    // dB += A^T * dC
                    self.accumulate(*b, |gb| {
                        gemm(k, m, n, &av, (1, k as isize), g, (n as isize, 1), 1.0, gb)
                    });
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(*x, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                let n = self.nodes[bias.0].value.len();
                self.accumulate(*bias, |gb| {
                    let mut sums = vec![0.0f64; n];
                    for row in g.chunks_exact(n) {
                        for (s, v) in sums.iter_mut().zip(row) {
                            *s += *v as f64;
                        }
                    }
                    gb.iter_mut().zip(sums).for_each(|(a, s)| *a += s as f32);
                });
            }
            Op::Relu(x) => {
                let out = &self.nodes[i].value.data;
                let mask: Vec<f32> = out
                    .iter()
                    .zip(g)
                    .map(|(y, gy)| if *y > 0.0 { *gy } else { 0.0 })
                    .collect();
                self.accumulate(*x, |gx| gx.iter_mut().zip(mask).for_each(|(a, b)| *a += b));
            }
            Op::MaxRows(x, argmax) => {
                let n = argmax.len();
                self.accumulate(*x, |gx| {
                    for (c, &r) in argmax.iter().enumerate() {
                        gx[r * n + c] += g[c];
                    }
                });
            }
            Op::Mse(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                let scale = 2.0 * g[0] as f64 / va.len() as f64;
                let diff: Vec<f32> = va
                    .iter()
                    .zip(vb)
                    .map(|(x, y)| (scale * (x - y) as f64) as f32)
                    .collect();
                self.accumulate(*b, |gb| gb.iter_mut().zip(&diff).for_each(|(s, d)| *s -= d));
                self.accumulate(*a, |ga| ga.iter_mut().zip(diff).for_each(|(s, d)| *s += d));
            }
            Op::Add(a, b) => {
                self.accumulate(*a, |ga| ga.iter_mut().zip(g).for_each(|(s, d)| *s += d));
                self.accumulate(*b, |gb| gb.iter_mut().zip(g).for_each(|(s, d)| *s += d));
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, |ga| ga.iter_mut().zip(g).for_each(|(s, d)| *s += d));
                self.accumulate(*b, |gb| gb.iter_mut().zip(g).for_each(|(s, d)| *s -= d));
            }
            Op::Scale(x, s) => {
                self.accumulate(*x, |gx| gx.iter_mut().zip(g).for_each(|(a, d)| *a += s * d));
            }
            Op::AddScalar(x) => {
                self.accumulate(*x, |gx| gx.iter_mut().zip(g).for_each(|(a, d)| *a += d));
            }
            Op::DftMagnitude(x) => {
                let xs: Vec<f64> = self.nodes[x.0].value.data.iter().map(|&v| v as f64).collect();
                let n = xs.len();
                let spectrum = dft(&xs);
                let mut dx = vec![0.0f64; n];
                for (k, &(re, im)) in spectrum.iter().enumerate() {
                    let mag = re.hypot(im);
                    // subgradient 0 where the spectrum vanishes
                    if mag == 0.0 {
                        continue;
                    }
                    for (t, d) in dx.iter_mut().enumerate() {
                        let theta = 2.0 * std::f64::consts::PI * ((k * t) % n) as f64 / n as f64;
                        *d += g[k] as f64 * (re * theta.cos() - im * theta.sin()) / mag;
                    }
                }
                self.accumulate(*x, |gx| gx.iter_mut().zip(dx).for_each(|(a, d)| *a += d as f32));
            }
        }
    }
}
