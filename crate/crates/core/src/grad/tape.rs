//! Reverse-mode tape over batched matrices.
//!
//! Every node holds its forward value; parameters are read by offset from one
//! or more borrowed [`ParamStore`]s. [`Tape::backward`] returns gradients for
//! every registered store and for every leaf node.

use super::matrix::{raw_gemm, Matrix};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Handle to a parameter store registered on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gelu" => Some(Activation::Gelu),
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)),
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::Identity => 1.0,
        }
    }
}

/// Triangular factor layouts stored packed inside a parameter slice.
///
/// `UnitLower` holds the strictly-lower entries row by row (the unit diagonal
/// is implicit); `Upper` holds the upper triangle including the diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Triangle {
    UnitLower,
    Upper,
}

impl Triangle {
    pub fn packed_len(self, d: usize) -> usize {
        match self {
            Triangle::UnitLower => d * d.saturating_sub(1) / 2,
            Triangle::Upper => d * (d + 1) / 2,
        }
    }

    /// Offset of entry `(i, j)` inside the packed buffer. Caller guarantees
    /// `j < i` for `UnitLower` and `j ≥ i` for `Upper`.
    #[inline]
    pub fn packed_index(self, d: usize, i: usize, j: usize) -> usize {
        tri_index(self, d, i, j)
    }

    /// Dense `d × d` matrix for oracles and tests.
    pub fn dense(self, packed: &[f64], d: usize) -> Matrix {
        let mut m = Matrix::zeros(d, d);
        for i in 0..d {
            match self {
                Triangle::UnitLower => {
                    m.set(i, i, 1.0);
                    for j in 0..i {
                        m.set(i, j, packed[self.packed_index(d, i, j)]);
                    }
                }
                Triangle::Upper => {
                    for j in i..d {
                        m.set(i, j, packed[self.packed_index(d, i, j)]);
                    }
                }
            }
        }
        m
    }
}

#[inline]
fn tri_index(kind: Triangle, d: usize, i: usize, j: usize) -> usize {
    match kind {
        Triangle::UnitLower => i * (i - 1) / 2 + j,
        Triangle::Upper => upper_start(d, i) + (j - i),
    }
}

#[inline]
fn upper_start(d: usize, i: usize) -> usize {
    // Σ_{r<i} (d − r) = i·d − i(i−1)/2
    i * d - i * i.saturating_sub(1) / 2
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param { store: usize, offset: usize },
    Linear { x: Var, store: usize, w: usize, b: usize },
    LayerNorm { x: Var, store: usize, gain: usize, xhat: Matrix, inv_std: Vec<f64> },
    Act { x: Var, kind: Activation },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Exp(Var),
    Square(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Columns { x: Var, idx: Vec<usize> },
    Concat(Vec<Var>),
    RowSum(Var),
    Mean(Var),
    Min(Var, Var),
    TriMul { x: Var, store: usize, offset: usize, kind: Triangle },
    TriSolve { x: Var, store: usize, offset: usize, kind: Triangle },
    LogAbsDiag { store: usize, offset: usize, d: usize },
    External { x: Var, grad: Matrix },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Records a forward computation so it can be differentiated in reverse.
pub struct Tape<'p> {
    stores: Vec<&'p ParamStore>,
    nodes: Vec<Node>,
}

pub const LAYERNORM_EPS: f64 = 1e-10;

impl<'p> Default for Tape<'p> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { stores: Vec::new(), nodes: Vec::new() }
    }

    pub fn add_store(&mut self, store: &'p ParamStore) -> StoreId {
        self.stores.push(store);
        StoreId(self.stores.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn params(&self, store: StoreId) -> &'p [f64] {
        self.stores[store.0].values()
    }

    fn check_store_range(&self, store: StoreId, offset: usize, len: usize, what: &str) -> Result<()> {
        let n = self.stores.get(store.0).map(|s| s.len()).ok_or_else(|| Error::State("unknown store".into()))?;
        if offset + len > n {
            return Err(Error::Shape(format!("{what}: parameter range {offset}..{} exceeds store of {n}", offset + len)));
        }
        Ok(())
    }

    /// An input or constant. Its gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A parameter block viewed as a `rows × cols` matrix.
    pub fn param(&mut self, store: StoreId, offset: usize, rows: usize, cols: usize) -> Result<Var> {
        self.check_store_range(store, offset, rows * cols, "param")?;
        let v = Matrix::from_vec(rows, cols, self.params(store)[offset..offset + rows * cols].to_vec());
        Ok(self.push(v, Op::Param { store: store.0, offset }))
    }

    /// `x · Wᵀ + b` with `W` stored `out × in` at `w` and `b` stored at `b`.
    pub fn linear(&mut self, x: Var, store: StoreId, w: usize, b: usize, out_dim: usize) -> Result<Var> {
        let xin = self.value(x);
        let (rows, in_dim) = xin.shape();
        self.check_store_range(store, w, out_dim * in_dim, "linear weight")?;
        self.check_store_range(store, b, out_dim, "linear bias")?;
        let p = self.params(store);
        let mut out = Matrix::zeros(rows, out_dim);
        for r in 0..rows {
            out.row_slice_mut(r).copy_from_slice(&p[b..b + out_dim]);
        }
        raw_gemm(1.0, xin.as_slice(), in_dim, false, &p[w..w + out_dim * in_dim], in_dim, true, 1.0, out.as_mut_slice(), rows, in_dim, out_dim);
        Ok(self.push(out, Op::Linear { x, store: store.0, w, b }))
    }

    /// Per-row layer normalization followed by an elementwise gain and bias.
    pub fn layer_norm(&mut self, x: Var, store: StoreId, gain: usize, bias: usize) -> Result<Var> {
        let xin = self.value(x);
        let (rows, n) = xin.shape();
        self.check_store_range(store, gain, n, "layernorm gain")?;
        self.check_store_range(store, bias, n, "layernorm bias")?;
        if bias != gain + n {
            return Err(Error::Shape("layernorm bias must follow its gain".into()));
        }
        let p = self.params(store);
        let mut xhat = Matrix::zeros(rows, n);
        let mut out = Matrix::zeros(rows, n);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xin.row_slice(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_slice_mut(r);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            let o = out.row_slice_mut(r);
            for c in 0..n {
                o[c] = xh[c] * p[gain + c] + p[bias + c];
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, store: store.0, gain, xhat, inv_std }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let v = self.value(x).map(|t| kind.apply(t));
        self.push(v, Op::Act { x, kind })
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.as_slice().iter().zip(vb.as_slice()).map(|(&x, &y)| f(x, y)).collect();
        Matrix::from_vec(va.rows(), va.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_values(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_values(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_values(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "min")?;
        let v = self.zip_values(a, b, f64::min);
        Ok(self.push(v, Op::Min(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|t| t * c);
        self.push(v, Op::Scale(x, c))
    }

    /// `x + c` for a constant scalar `c`.
    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|t| t + c);
        self.push(v, Op::Shift(x))
    }

    /// `x + m` for a constant matrix `m` of the same shape.
    pub fn add_const(&mut self, x: Var, m: &Matrix) -> Result<Var> {
        if self.value(x).shape() != m.shape() {
            return Err(Error::Shape(format!("add_const: {:?} vs {:?}", self.value(x).shape(), m.shape())));
        }
        let mut v = self.value(x).clone();
        v.add_assign(m);
        Ok(self.push(v, Op::Shift(x)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|t| t * t);
        self.push(v, Op::Square(x))
    }

    /// Hard clamp; the gradient is zero wherever the bound is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(x).map(|t| t.clamp(lo, hi));
        self.push(v, Op::Clamp { x, lo, hi })
    }

    /// Gathers columns `idx` of `x` (indices may repeat or reorder).
    pub fn columns(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xin = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xin.cols()) {
            return Err(Error::Shape(format!("column {bad} out of range for width {}", xin.cols())));
        }
        let mut out = Matrix::zeros(xin.rows(), idx.len());
        for r in 0..xin.rows() {
            let src = xin.row_slice(r);
            for (o, &i) in out.row_slice_mut(r).iter_mut().zip(idx) {
                *o = src[i];
            }
        }
        Ok(self.push(out, Op::Columns { x, idx: idx.to_vec() }))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.value(p).rows()).unwrap_or(0);
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::Shape("concat: row counts differ".into()));
        }
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::hcat(&mats);
        Ok(self.push(v, Op::Concat(parts.to_vec())))
    }

    /// Per-row sum, giving a `B × 1` column.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let xin = self.value(x);
        let data = xin.iter_rows().map(|r| r.iter().sum()).collect();
        let v = Matrix::from_vec(xin.rows(), 1, data);
        self.push(v, Op::RowSum(x))
    }

    /// Mean over all entries, giving a `1 × 1` scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xin = self.value(x);
        if xin.as_slice().is_empty() {
            return Err(Error::Shape("mean of an empty matrix".into()));
        }
        let v = Matrix::scalar(xin.mean());
        Ok(self.push(v, Op::Mean(x)))
    }

    /// Rows of `x` multiplied by a packed triangular factor: `y = T·x` per row.
    pub fn tri_mul(&mut self, x: Var, store: StoreId, offset: usize, kind: Triangle) -> Result<Var> {
        let xin = self.value(x);
        let d = xin.cols();
        self.check_store_range(store, offset, kind.packed_len(d), "tri_mul")?;
        let t = &self.params(store)[offset..];
        let mut out = Matrix::zeros(xin.rows(), d);
        for r in 0..xin.rows() {
            let xr = xin.row_slice(r);
            let o = out.row_slice_mut(r);
            for i in 0..d {
                o[i] = match kind {
                    Triangle::UnitLower => xr[i] + (0..i).map(|j| t[tri_index(kind, d, i, j)] * xr[j]).sum::<f64>(),
                    Triangle::Upper => (i..d).map(|j| t[tri_index(kind, d, i, j)] * xr[j]).sum(),
                };
            }
        }
        Ok(self.push(out, Op::TriMul { x, store: store.0, offset, kind }))
    }

    /// Solves `T·y = x` per row for a packed triangular factor.
    pub fn tri_solve(&mut self, x: Var, store: StoreId, offset: usize, kind: Triangle) -> Result<Var> {
        let xin = self.value(x);
        let d = xin.cols();
        self.check_store_range(store, offset, kind.packed_len(d), "tri_solve")?;
        let t = &self.params(store)[offset..];
        let mut out = Matrix::zeros(xin.rows(), d);
        for r in 0..xin.rows() {
            solve_row(kind, t, d, xin.row_slice(r), out.row_slice_mut(r), false);
        }
        Ok(self.push(out, Op::TriSolve { x, store: store.0, offset, kind }))
    }

    /// `Σ_i log|U_ii|` of a packed upper factor, repeated on `rows` rows.
    pub fn log_abs_diag(&mut self, store: StoreId, offset: usize, d: usize, rows: usize) -> Result<Var> {
        self.check_store_range(store, offset, Triangle::Upper.packed_len(d), "log_abs_diag")?;
        let t = &self.params(store)[offset..];
        let s: f64 = (0..d).map(|i| t[tri_index(Triangle::Upper, d, i, i)].abs().ln()).sum();
        Ok(self.push(Matrix::filled(rows, 1, s), Op::LogAbsDiag { store: store.0, offset, d }))
    }

    /// A `B × 1` value computed outside the tape from `x`, with its per-row
    /// input gradient `grad` (`B × cols(x)`).
    pub fn external(&mut self, x: Var, values: Vec<f64>, grad: Matrix) -> Result<Var> {
        let xs = self.value(x).shape();
        if values.len() != xs.0 || grad.shape() != xs {
            return Err(Error::Shape(format!(
                "external: {} values and gradient {:?} for input {:?}",
                values.len(),
                grad.shape(),
                xs
            )));
        }
        let v = Matrix::from_vec(xs.0, 1, values);
        Ok(self.push(v, Op::External { x, grad }))
    }

    /// Reverse pass from `output`, seeded with `seed` (same shape as the output).
    pub fn backward(&self, output: Var, seed: &Matrix) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward computation".into()));
        }
        if output.0 >= self.nodes.len() {
            return Err(Error::State(format!("node {} was not recorded on this tape", output.0)));
        }
        if self.value(output).shape() != seed.shape() {
            return Err(Error::Shape(format!(
                "seed gradient {:?} does not match output {:?}",
                seed.shape(),
                self.value(output).shape()
            )));
        }
        let mut node_grads: Vec<Option<Matrix>> = (0..=output.0).map(|_| None).collect();
        let mut params: Vec<Vec<f64>> = self.stores.iter().map(|s| vec![0.0; s.len()]).collect();
        node_grads[output.0] = Some(seed.clone());

        for idx in (0..=output.0).rev() {
            let Some(g) = node_grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop_node(node, &g, &mut node_grads, &mut params);
            node_grads[idx] = Some(g);
        }
        Ok(Gradients { params, nodes: node_grads })
    }

    /// Convenience for scalar outputs: backward with seed 1.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients> {
        let shape = self.nodes.get(output.0).map(|n| n.value.shape());
        if shape != Some((1, 1)) && !self.nodes.is_empty() && output.0 < self.nodes.len() {
            return Err(Error::Shape(format!("backward_scalar on a {:?} node", shape.unwrap())));
        }
        self.backward(output, &Matrix::scalar(1.0))
    }

    fn backprop_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>], params: &mut [Vec<f64>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Param { store, offset } => {
                let p = &mut params[*store][*offset..*offset + g.as_slice().len()];
                for (a, b) in p.iter_mut().zip(g.as_slice()) {
                    *a += b;
                }
            }
            Op::Linear { x, store, w, b } => {
                let xin = self.value(*x);
                let (rows, in_dim) = xin.shape();
                let out_dim = g.cols();
                let wv = &self.stores[*store].values()[*w..*w + out_dim * in_dim];
                let mut dx = Matrix::zeros(rows, in_dim);
                raw_gemm(1.0, g.as_slice(), out_dim, false, wv, in_dim, false, 0.0, dx.as_mut_slice(), rows, out_dim, in_dim);
                let pg = &mut params[*store];
                raw_gemm(1.0, g.as_slice(), out_dim, true, xin.as_slice(), in_dim, false, 1.0, &mut pg[*w..*w + out_dim * in_dim], out_dim, rows, in_dim);
                for r in 0..rows {
                    for (acc, v) in pg[*b..*b + out_dim].iter_mut().zip(g.row_slice(r)) {
                        *acc += v;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, store, gain, xhat, inv_std } => {
                let (rows, n) = xhat.shape();
                let gv = &self.stores[*store].values()[*gain..*gain + n];
                let pg = &mut params[*store];
                let mut dx = Matrix::zeros(rows, n);
                let mut dxhat = vec![0.0; n];
                for r in 0..rows {
                    let gr = g.row_slice(r);
                    let xh = xhat.row_slice(r);
                    for c in 0..n {
                        pg[*gain + c] += gr[c] * xh[c];
                        pg[*gain + n + c] += gr[c];
                        dxhat[c] = gr[c] * gv[c];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / n as f64;
                    let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for (c, o) in dx.row_slice_mut(r).iter_mut().enumerate() {
                        *o = inv_std[r] * (dxhat[c] - m1 - xh[c] * m2);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Act { x, kind } => {
                let xin = self.value(*x);
                let data = xin.as_slice().iter().zip(g.as_slice()).map(|(&t, &gg)| gg * kind.derivative(t)).collect();
                accumulate(grads, *x, Matrix::from_vec(g.rows(), g.cols(), data));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|t| -t));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = zip(g, vb, |x, y| x * y);
                let db = zip(g, va, |x, y| x * y);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Min(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut da = Matrix::zeros(g.rows(), g.cols());
                let mut db = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.as_slice().len() {
                    if va.as_slice()[i] <= vb.as_slice()[i] {
                        da.as_mut_slice()[i] = g.as_slice()[i];
                    } else {
                        db.as_mut_slice()[i] = g.as_slice()[i];
                    }
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Scale(x, c) => accumulate(grads, *x, g.map(|t| t * c)),
            Op::Shift(x) => accumulate(grads, *x, g.clone()),
            Op::Exp(x) => accumulate(grads, *x, zip(g, &node.value, |a, b| a * b)),
            Op::Square(x) => accumulate(grads, *x, zip(g, self.value(*x), |a, b| 2.0 * a * b)),
            Op::Clamp { x, lo, hi } => {
                let d = zip(g, self.value(*x), |a, t| if t < *lo || t > *hi { 0.0 } else { a });
                accumulate(grads, *x, d);
            }
            Op::Columns { x, idx } => {
                let xin = self.value(*x);
                let mut dx = Matrix::zeros(xin.rows(), xin.cols());
                for r in 0..g.rows() {
                    let gr = g.row_slice(r);
                    let o = dx.row_slice_mut(r);
                    for (k, &i) in idx.iter().enumerate() {
                        o[i] += gr[k];
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Concat(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Matrix::zeros(g.rows(), w);
                    for r in 0..g.rows() {
                        dp.row_slice_mut(r).copy_from_slice(&g.row_slice(r)[c0..c0 + w]);
                    }
                    c0 += w;
                    accumulate(grads, p, dp);
                }
            }
            Op::RowSum(x) => {
                let xin = self.value(*x);
                let mut dx = Matrix::zeros(xin.rows(), xin.cols());
                for r in 0..xin.rows() {
                    let gv = g.get(r, 0);
                    dx.row_slice_mut(r).iter_mut().for_each(|v| *v = gv);
                }
                accumulate(grads, *x, dx);
            }
            Op::Mean(x) => {
                let xin = self.value(*x);
                let n = xin.as_slice().len() as f64;
                accumulate(grads, *x, Matrix::filled(xin.rows(), xin.cols(), g.get(0, 0) / n));
            }
            Op::TriMul { x, store, offset, kind } => {
                let xin = self.value(*x);
                let d = xin.cols();
                let t = &self.stores[*store].values()[*offset..];
                let pg = &mut params[*store][*offset..];
                let mut dx = Matrix::zeros(xin.rows(), d);
                for r in 0..xin.rows() {
                    let (xr, gr) = (xin.row_slice(r), g.row_slice(r));
                    let dxr = dx.row_slice_mut(r);
                    for i in 0..d {
                        match kind {
                            Triangle::UnitLower => {
                                dxr[i] += gr[i];
                                for j in 0..i {
                                    let k = tri_index(*kind, d, i, j);
                                    dxr[j] += t[k] * gr[i];
                                    pg[k] += gr[i] * xr[j];
                                }
                            }
                            Triangle::Upper => {
                                for j in i..d {
                                    let k = tri_index(*kind, d, i, j);
                                    dxr[j] += t[k] * gr[i];
                                    pg[k] += gr[i] * xr[j];
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::TriSolve { x, store, offset, kind } => {
                // y = T⁻¹x  ⇒  dx = T⁻ᵀg,  dT_ij = −(T⁻ᵀg)_i · y_j
                let y = &node.value;
                let d = y.cols();
                let t = &self.stores[*store].values()[*offset..];
                let pg = &mut params[*store][*offset..];
                let mut dx = Matrix::zeros(y.rows(), d);
                for r in 0..y.rows() {
                    solve_row(*kind, t, d, g.row_slice(r), dx.row_slice_mut(r), true);
                    let (h, yr) = (dx.row_slice(r), y.row_slice(r));
                    for i in 0..d {
                        let js = match kind {
                            Triangle::UnitLower => 0..i,
                            Triangle::Upper => i..d,
                        };
                        for j in js {
                            pg[tri_index(*kind, d, i, j)] -= h[i] * yr[j];
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LogAbsDiag { store, offset, d } => {
                let total: f64 = g.as_slice().iter().sum();
                let t = &self.stores[*store].values()[*offset..];
                for i in 0..*d {
                    let k = tri_index(Triangle::Upper, *d, i, i);
                    params[*store][*offset + k] += total / t[k];
                }
            }
            Op::External { x, grad } => {
                let mut dx = grad.clone();
                for r in 0..dx.rows() {
                    let gv = g.get(r, 0);
                    dx.row_slice_mut(r).iter_mut().for_each(|v| *v *= gv);
                }
                accumulate(grads, *x, dx);
            }
        }
    }
}

/// Solves `T·y = x` (or `Tᵀ·y = x` when `transpose`) for one row.
fn solve_row(kind: Triangle, t: &[f64], d: usize, x: &[f64], y: &mut [f64], transpose: bool) {
    match (kind, transpose) {
        (Triangle::UnitLower, false) => {
            for i in 0..d {
                y[i] = x[i] - (0..i).map(|j| t[tri_index(kind, d, i, j)] * y[j]).sum::<f64>();
            }
        }
        (Triangle::UnitLower, true) => {
            for i in (0..d).rev() {
                y[i] = x[i] - (i + 1..d).map(|j| t[tri_index(kind, d, j, i)] * y[j]).sum::<f64>();
            }
        }
        (Triangle::Upper, false) => {
            for i in (0..d).rev() {
                let s: f64 = (i + 1..d).map(|j| t[tri_index(kind, d, i, j)] * y[j]).sum();
                y[i] = (x[i] - s) / t[tri_index(kind, d, i, i)];
            }
        }
        (Triangle::Upper, true) => {
            for i in 0..d {
                let s: f64 = (0..i).map(|j| t[tri_index(kind, d, j, i)] * y[j]).sum();
                y[i] = (x[i] - s) / t[tri_index(kind, d, i, i)];
            }
        }
    }
}

fn zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    params: Vec<Vec<f64>>,
    nodes: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient over the whole store; zero for parameters the output did not touch.
    pub fn params(&self, store: StoreId) -> &[f64] {
        &self.params[store.0]
    }

    pub fn into_params(mut self, store: StoreId) -> Vec<f64> {
        std::mem::take(&mut self.params[store.0])
    }

    /// Gradient w.r.t. node `v`, or `None` if the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packed_upper_index_is_row_major() {
        let d = 4;
        let mut expect = 0;
        for i in 0..d {
            for j in i..d {
                assert_eq!(tri_index(Triangle::Upper, d, i, j), expect);
                assert_eq!(Triangle::Upper.packed_index(d, i, j), expect);
                expect += 1;
            }
        }
        assert_eq!(expect, Triangle::Upper.packed_len(d));
        let mut expect = 0;
        for i in 1..d {
            for j in 0..i {
                assert_eq!(tri_index(Triangle::UnitLower, d, i, j), expect);
                expect += 1;
            }
        }
        assert_eq!(expect, Triangle::UnitLower.packed_len(d));
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::row(&[1.0, 2.0]));
        let zero = tape.scale(x, 0.0);
        let c = tape.shift(zero, 3.0);
        let s = tape.row_sum(c);
        let g = tape.backward(s, &Matrix::scalar(1.0)).unwrap();
        assert_eq!(g.wrt(x).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn sum_has_ones_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::row(&[1.0, -2.0, 5.0]));
        let s = tape.row_sum(x);
        let g = tape.backward_scalar(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_on_empty_tape_is_state_error() {
        let tape = Tape::new();
        let err = tape.backward(Var(0), &Matrix::scalar(1.0)).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn tri_solve_inverts_tri_mul() {
        let mut store = ParamStore::new(0);
        let lo = store.alloc("l", Triangle::UnitLower.packed_len(3));
        let up = store.alloc("u", Triangle::Upper.packed_len(3));
        store.values_mut()[lo..lo + 3].copy_from_slice(&[0.3, -0.2, 0.7]);
        store.values_mut()[up..up + 6].copy_from_slice(&[2.0, 0.1, -0.4, 0.5, 0.9, -1.5]);
        let mut tape = Tape::new();
        let s = tape.add_store(&store);
        let x = tape.leaf(Matrix::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]]));
        for (off, kind) in [(lo, Triangle::UnitLower), (up, Triangle::Upper)] {
            let y = tape.tri_mul(x, s, off, kind).unwrap();
            let back = tape.tri_solve(y, s, off, kind).unwrap();
            assert!(tape.value(back).max_abs_diff(tape.value(x)) < 1e-12);
            let dense = kind.dense(&store.values()[off..], 3);
            let expect = tape.value(x).matmul(&dense.transpose());
            assert!(tape.value(y).max_abs_diff(&expect) < 1e-12);
        }
    }
}
