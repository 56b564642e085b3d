//! Dense f64 tensors and a define-by-run tape for reverse-mode gradients.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each recorded node keeps its
//! value plus whatever the backward rule needs; [`Tape::backward`] walks the
//! nodes in reverse insertion order, which is a valid reverse topological
//! order because inputs always precede the nodes that consume them.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds an `rows.len() × cols` matrix; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(format!("expected a matrix, got shape {other:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols().max(1))
    }

    /// Gathers the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![indices.len(), c],
            data,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {m}x{k} * {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&self) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        if k < 2 {
            return Err(Error::shape(format!("log_softmax needs at least 2 columns, got {k}")));
        }
        let mut out = self.data.clone();
        for r in 0..m {
            log_softmax_row(&mut out[r * k..(r + 1) * k]);
        }
        Tensor::new(vec![m, k], out)
    }

    pub fn softmax(&self) -> Result<Tensor> {
        let mut t = self.log_softmax()?;
        t.data.iter_mut().for_each(|v| *v = v.exp());
        Ok(t)
    }
}

pub(crate) fn log_softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    row.iter_mut().for_each(|v| *v -= lse);
}

// c[m×n] += a[m×k] · b[k×n]
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

// c[m×n] += a[m×k] · b[n×k]ᵀ
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

// c[k×n] += a[m×k]ᵀ · b[m×n]
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `x · wᵀ + b` with `w` stored as `[out × in]`.
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    AddScalar(Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LogSoftmax(Var),
    /// One entry per row, at the given column.
    Pick { input: Var, columns: Vec<usize> },
    Sum(Var),
    Mean(Var),
    /// Elementwise map with its pointwise derivative saved at forward time.
    Map { input: Var, derivative: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<&Tensor> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::config(format!("node {} is not on this tape", v.0)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.check(a)?.matmul(self.check(b)?)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Affine layer `x · wᵀ + b` for `x: [m × in]`, `w: [out × in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (m, d_in) = xv.dims2()?;
        let (d_out, w_in) = wv.dims2()?;
        if d_in != w_in || bv.len() != d_out {
            return Err(Error::shape(format!(
                "linear: input {m}x{d_in}, weight {d_out}x{w_in}, bias {}",
                bv.len()
            )));
        }
        let mut out = Vec::with_capacity(m * d_out);
        for _ in 0..m {
            out.extend_from_slice(bv.data());
        }
        gemm_nt(xv.data(), wv.data(), &mut out, m, d_in, d_out);
        let t = Tensor::new(vec![m, d_out], out)?;
        Ok(self.push(t, Op::Linear { x, w, b }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let av = self.check(a)?;
        let data = av.data().iter().map(|x| x + c).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddScalar(a)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let av = self.check(a)?;
        let data = av.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Scale(a, c)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let av = self.check(a)?;
        let data = av.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Relu(a)))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.check(a)?.log_softmax()?;
        Ok(self.push(t, Op::LogSoftmax(a)))
    }

    /// Selects `input[i, columns[i]]` for every row `i`, giving a vector of length `m`.
    pub fn pick(&mut self, input: Var, columns: &[usize]) -> Result<Var> {
        let iv = self.check(input)?;
        let (m, k) = iv.dims2()?;
        if columns.len() != m {
            return Err(Error::shape(format!("pick: {m} rows but {} columns", columns.len())));
        }
        let mut data = Vec::with_capacity(m);
        for (i, &c) in columns.iter().enumerate() {
            if c >= k {
                return Err(Error::shape(format!("pick: column {c} out of range for width {k}")));
            }
            data.push(iv.data()[i * k + c]);
        }
        let t = Tensor::vector(data);
        Ok(self.push(
            t,
            Op::Pick {
                input,
                columns: columns.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.check(a)?.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.check(a)?;
        if av.is_empty() {
            return Err(Error::shape("mean of an empty tensor"));
        }
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(a)))
    }

    /// Elementwise `f`, where `f` returns `(value, derivative)` at each input.
    pub fn map<F>(&mut self, a: Var, f: F) -> Result<Var>
    where
        F: Fn(f64) -> (f64, f64),
    {
        let av = self.check(a)?;
        let (values, derivative): (Vec<f64>, Vec<f64>) = av.data().iter().map(|&x| f(x)).unzip();
        let t = Tensor::new(av.shape().to_vec(), values)?;
        Ok(self.push(
            t,
            Op::Map {
                input: a,
                derivative,
            },
        ))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, |x| {
            let e = x.exp();
            (e, e)
        })
    }

    /// Reverse accumulation from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.check(root)?;
        if !rv.is_scalar() {
            return Err(Error::config(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = av.dims2()?;
                    let n = bv.cols();
                    // dA = dC · Bᵀ, dB = Aᵀ · dC
                    let ga = accum(&mut grads, *a, av.len());
                    gemm_nt(&g, bv.data(), ga, m, n, k);
                    let gb = accum(&mut grads, *b, bv.len());
                    gemm_tn(av.data(), &g, gb, m, k, n);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (m, d_in) = xv.dims2()?;
                    let d_out = wv.rows();
                    let gx = accum(&mut grads, *x, xv.len());
                    gemm_nn(&g, wv.data(), gx, m, d_out, d_in);
                    let gw = accum(&mut grads, *w, wv.len());
                    gemm_tn(&g, xv.data(), gw, m, d_out, d_in);
                    let gb = accum(&mut grads, *b, d_out);
                    for row in g.chunks(d_out) {
                        gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                }
                Op::Add(a, b) => {
                    add_into(accum(&mut grads, *a, g.len()), &g);
                    add_into(accum(&mut grads, *b, g.len()), &g);
                }
                Op::AddScalar(a) => add_into(accum(&mut grads, *a, g.len()), &g),
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let ga = accum(&mut grads, *a, g.len());
                    for ((s, gi), bi) in ga.iter_mut().zip(&g).zip(bv) {
                        *s += gi * bi;
                    }
                    let gb = accum(&mut grads, *b, g.len());
                    for ((s, gi), ai) in gb.iter_mut().zip(&g).zip(av) {
                        *s += gi * ai;
                    }
                }
                Op::Scale(a, c) => {
                    let ga = accum(&mut grads, *a, g.len());
                    ga.iter_mut().zip(&g).for_each(|(s, gi)| *s += c * gi);
                }
                Op::Relu(a) => {
                    let av = self.value(*a).data();
                    let ga = accum(&mut grads, *a, g.len());
                    for ((s, gi), x) in ga.iter_mut().zip(&g).zip(av) {
                        if *x > 0.0 {
                            *s += gi;
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let (m, k) = node.value.dims2()?;
                    let out = node.value.data();
                    let ga = accum(&mut grads, *a, m * k);
                    for r in 0..m {
                        let gr = &g[r * k..(r + 1) * k];
                        let yr = &out[r * k..(r + 1) * k];
                        let total: f64 = gr.iter().sum();
                        for j in 0..k {
                            ga[r * k + j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                }
                Op::Pick { input, columns } => {
                    let k = self.value(*input).cols();
                    let len = self.value(*input).len();
                    let gi = accum(&mut grads, *input, len);
                    for (i, &c) in columns.iter().enumerate() {
                        gi[i * k + c] += g[i];
                    }
                }
                Op::Sum(a) => {
                    let len = self.value(*a).len();
                    accum(&mut grads, *a, len).iter_mut().for_each(|s| *s += g[0]);
                }
                Op::Mean(a) => {
                    let len = self.value(*a).len();
                    let share = g[0] / len as f64;
                    accum(&mut grads, *a, len).iter_mut().for_each(|s| *s += share);
                }
                Op::Map { input, derivative } => {
                    let gi = accum(&mut grads, *input, g.len());
                    for ((s, gv), d) in gi.iter_mut().zip(&g).zip(derivative) {
                        *s += gv * d;
                    }
                }
            }
            // Keep gradients of leaves so callers can read them.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                let data = g.unwrap_or_else(|| vec![0.0; n.value.len()]);
                Tensor {
                    shape: n.value.shape().to_vec(),
                    data,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accum(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Gradients of a scalar root with respect to every node of the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    /// Gradient for a leaf. Leaves that do not influence the root get zeros.
    pub fn wrt(&self, v: Var) -> &Tensor {
        &self.grads[v.0]
    }
}

/// Maximum relative deviation between an analytic gradient and central differences.
///
/// `f` returns the function value and its analytic gradient at the given point.
/// The error for coordinate `i` is `|analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, params: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(h > 0.0) {
        return Err(Error::config(format!("finite-difference step must be positive, got {h}")));
    }
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(Error::non_finite(format!("function value {value} at the base point")));
    }
    if analytic.len() != params.len() {
        return Err(Error::shape(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut x = params.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let (fp, _) = f(&x)?;
        x[i] = orig - h;
        let (fm, _) = f(&x)?;
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::non_finite(format!(
                "function value at coordinate {i} +/- {h}: {fp}, {fm}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
