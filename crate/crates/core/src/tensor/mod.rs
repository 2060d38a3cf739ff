//! Dense double-precision matrix layer.
//!
//! Exactly the forward operations the fusion mechanism needs, each paired
//! with an explicit backward rule. There is no expression-graph engine:
//! callers record the intermediates they need and apply the rules in
//! reverse themselves. Verification math stays in f64 throughout; the
//! finite-difference tolerances are unreachable below double precision.

mod fd;

pub use fd::{fd_scalar, finite_difference_gradient, rel_err, FdReport, SingleTensor};

use crate::error::{Error, Result};

/// Dense row-major matrix of token embeddings (rows = tokens, cols = feature dims).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

/// Named learnable tensor with an additively accumulated gradient buffer.
///
/// Scalars are stored as 1x1. Gradients accumulate across backward calls
/// and are zeroed explicitly between optimization steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

/// Read-only matrix view shared by [`TokenMatrix`] and [`ParamTensor`].
pub trait AsMat {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn data(&self) -> &[f64];
}

impl AsMat for TokenMatrix {
    fn rows(&self) -> usize {
        self.rows
    }
    fn cols(&self) -> usize {
        self.cols
    }
    fn data(&self) -> &[f64] {
        &self.data
    }
}

impl AsMat for ParamTensor {
    fn rows(&self) -> usize {
        self.rows
    }
    fn cols(&self) -> usize {
        self.cols
    }
    fn data(&self) -> &[f64] {
        &self.value
    }
}

impl<M: AsMat> AsMat for &M {
    fn rows(&self) -> usize {
        (**self).rows()
    }
    fn cols(&self) -> usize {
        (**self).cols()
    }
    fn data(&self) -> &[f64] {
        (**self).data()
    }
}

impl TokenMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        TokenMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            grad: None,
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must be rows*cols");
        TokenMatrix {
            rows,
            cols,
            data,
            grad: None,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        TokenMatrix::from_vec(r, c, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = TokenMatrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Attaches (or resets) the gradient buffer to zeros.
    pub fn attach_grad(&mut self) {
        self.grad = Some(vec![0.0; self.data.len()]);
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, attaching it if absent.
    pub fn accumulate_grad(&mut self, g: &TokenMatrix) {
        assert_eq!((g.rows, g.cols), (self.rows, self.cols), "grad shape");
        let buf = self
            .grad
            .get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (b, v) in buf.iter_mut().zip(&g.data) {
            *b += v;
        }
    }

    pub fn transpose(&self) -> TokenMatrix {
        let mut out = TokenMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> TokenMatrix {
        TokenMatrix::from_vec(self.rows, self.cols, self.data.iter().map(|v| v * s).collect())
    }

    pub fn sub(&self, other: &TokenMatrix) -> Result<TokenMatrix> {
        add(self, &other.scale(-1.0))
    }

    /// Euclidean norm of each row.
    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }
}

// four independent accumulators so the reduction vectorizes; the lane
// split is fixed, so results are deterministic for a given build
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let (x, y) = (&a[i * 4..i * 4 + 4], &b[i * 4..i * 4 + 4]);
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn dim_err(op: &'static str, a: &impl AsMat, b: &impl AsMat) -> Error {
    Error::Dim {
        op,
        lhs_rows: a.rows(),
        lhs_cols: a.cols(),
        rhs_rows: b.rows(),
        rhs_cols: b.cols(),
    }
}

/// C = A * B.
pub fn matmul(a: &impl AsMat, b: &impl AsMat) -> Result<TokenMatrix> {
    if a.cols() != b.rows() {
        return Err(dim_err("matmul", a, b));
    }
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &bd[kk * m..(kk + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(TokenMatrix::from_vec(n, m, out))
}

/// C = A * B^T without materializing the transpose.
pub fn matmul_nt(a: &impl AsMat, b: &impl AsMat) -> Result<TokenMatrix> {
    if a.cols() != b.cols() {
        return Err(dim_err("matmul_nt", a, b));
    }
    let (n, k, m) = (a.rows(), a.cols(), b.rows());
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &bd[j * k..(j + 1) * k];
            *o = dot(arow, brow);
        }
    }
    Ok(TokenMatrix::from_vec(n, m, out))
}

/// C = A^T * B without materializing the transpose.
pub fn matmul_tn(a: &impl AsMat, b: &impl AsMat) -> Result<TokenMatrix> {
    if a.rows() != b.rows() {
        return Err(dim_err("matmul_tn", a, b));
    }
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; k * m];
    for r in 0..n {
        let arow = &ad[r * k..(r + 1) * k];
        let brow = &bd[r * m..(r + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(TokenMatrix::from_vec(k, m, out))
}

/// Backward rule for `C = A * B`: returns (dA, dB) given dC.
pub fn matmul_backward(
    a: &impl AsMat,
    b: &impl AsMat,
    d_c: &TokenMatrix,
) -> Result<(TokenMatrix, TokenMatrix)> {
    let d_a = matmul_nt(d_c, b)?;
    let d_b = matmul_tn(a, d_c)?;
    Ok((d_a, d_b))
}

/// Row-wise softmax with per-row max subtraction.
pub fn row_softmax(m: &impl AsMat) -> TokenMatrix {
    let (rows, cols) = (m.rows(), m.cols());
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let src = &m.data()[r * cols..(r + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    TokenMatrix::from_vec(rows, cols, out)
}

/// Backward rule for row softmax: given the output `a` and upstream `d_a`,
/// each row gets dS = a (*) (d_a - sum(d_a (*) a)).
pub fn row_softmax_backward(a: &TokenMatrix, d_a: &TokenMatrix) -> TokenMatrix {
    assert_eq!((a.rows, a.cols), (d_a.rows, d_a.cols), "softmax grad shape");
    let mut out = vec![0.0; a.data.len()];
    for r in 0..a.rows {
        let arow = a.row(r);
        let drow = d_a.row(r);
        let dot: f64 = arow.iter().zip(drow).map(|(x, y)| x * y).sum();
        let orow = &mut out[r * a.cols..(r + 1) * a.cols];
        for ((o, &av), &dv) in orow.iter_mut().zip(arow).zip(drow) {
            *o = av * (dv - dot);
        }
    }
    TokenMatrix::from_vec(a.rows, a.cols, out)
}

/// Mean over token rows, yielding a 1 x cols row vector.
///
/// Each column is summed in sorted value order, which makes the result
/// exactly invariant under row permutation (plain accumulation would
/// drift by an ulp depending on the order).
pub fn mean_pool_rows(m: &impl AsMat) -> Result<TokenMatrix> {
    if m.rows() == 0 {
        return Err(Error::Empty {
            op: "mean_pool_rows",
        });
    }
    let (rows, cols) = (m.rows(), m.cols());
    let inv = 1.0 / rows as f64;
    let mut out = vec![0.0; cols];
    let mut column = vec![0.0; rows];
    for (c, o) in out.iter_mut().enumerate() {
        for (r, slot) in column.iter_mut().enumerate() {
            *slot = m.data()[r * cols + c];
        }
        column.sort_unstable_by(f64::total_cmp);
        *o = column.iter().sum::<f64>() * inv;
    }
    Ok(TokenMatrix::from_vec(1, cols, out))
}

/// Backward rule for mean pooling: spreads the pooled gradient uniformly.
pub fn mean_pool_backward(d_out: &TokenMatrix, rows: usize) -> TokenMatrix {
    assert_eq!(d_out.rows, 1, "pooled grad must be a row");
    let inv = 1.0 / rows as f64;
    let mut out = TokenMatrix::zeros(rows, d_out.cols);
    for r in 0..rows {
        for c in 0..d_out.cols {
            out.data[r * d_out.cols + c] = d_out.data[c] * inv;
        }
    }
    out
}

/// Column sums as a 1 x cols row; the broadcast-axis reduction used by
/// backward rules of row-broadcast adds and multiplies.
pub fn col_sum(m: &impl AsMat) -> TokenMatrix {
    let (rows, cols) = (m.rows(), m.cols());
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, &v) in out.iter_mut().zip(&m.data()[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
    TokenMatrix::from_vec(1, cols, out)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(m: &impl AsMat) -> TokenMatrix {
    TokenMatrix::from_vec(
        m.rows(),
        m.cols(),
        m.data().iter().map(|&v| sigmoid_scalar(v)).collect(),
    )
}

pub fn relu(m: &impl AsMat) -> TokenMatrix {
    TokenMatrix::from_vec(
        m.rows(),
        m.cols(),
        m.data().iter().map(|&v| v.max(0.0)).collect(),
    )
}

enum Broadcast {
    None,
    RowOverLeft,
    RowOverRight,
}

fn broadcast_kind(op: &'static str, a: &impl AsMat, b: &impl AsMat) -> Result<Broadcast> {
    if a.rows() == b.rows() && a.cols() == b.cols() {
        Ok(Broadcast::None)
    } else if b.rows() == 1 && b.cols() == a.cols() {
        Ok(Broadcast::RowOverLeft)
    } else if a.rows() == 1 && a.cols() == b.cols() {
        Ok(Broadcast::RowOverRight)
    } else {
        Err(dim_err(op, a, b))
    }
}

/// Elementwise sum; one operand may be a 1 x cols row broadcast over rows.
pub fn add(a: &impl AsMat, b: &impl AsMat) -> Result<TokenMatrix> {
    match broadcast_kind("add", a, b)? {
        Broadcast::None => Ok(TokenMatrix::from_vec(
            a.rows(),
            a.cols(),
            a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
        )),
        Broadcast::RowOverLeft => {
            let mut out = a.data().to_vec();
            let cols = a.cols();
            for r in 0..a.rows() {
                for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(b.data()) {
                    *o += v;
                }
            }
            Ok(TokenMatrix::from_vec(a.rows(), cols, out))
        }
        Broadcast::RowOverRight => add(b, a),
    }
}

/// Elementwise product; one operand may be a 1 x cols row broadcast over rows.
pub fn mul(a: &impl AsMat, b: &impl AsMat) -> Result<TokenMatrix> {
    match broadcast_kind("mul", a, b)? {
        Broadcast::None => Ok(TokenMatrix::from_vec(
            a.rows(),
            a.cols(),
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
        )),
        Broadcast::RowOverLeft => {
            let cols = a.cols();
            let mut out = a.data().to_vec();
            for r in 0..a.rows() {
                for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(b.data()) {
                    *o *= v;
                }
            }
            Ok(TokenMatrix::from_vec(a.rows(), cols, out))
        }
        Broadcast::RowOverRight => mul(b, a),
    }
}

/// Elementwise op selector mirroring the library surface: unary kinds take
/// one argument, binary kinds two.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Sigmoid,
    RectifiedLinear,
    Multiply,
    Add,
}

pub fn elementwise(
    kind: Elementwise,
    a: &TokenMatrix,
    b: Option<&TokenMatrix>,
) -> Result<TokenMatrix> {
    match (kind, b) {
        (Elementwise::Sigmoid, None) => Ok(sigmoid(a)),
        (Elementwise::RectifiedLinear, None) => Ok(relu(a)),
        (Elementwise::Multiply, Some(b)) => mul(a, b),
        (Elementwise::Add, Some(b)) => add(a, b),
        _ => Err(Error::Config(format!(
            "elementwise {kind:?}: wrong operand count"
        ))),
    }
}

/// Concatenates matrices with equal row counts along columns.
pub fn concat_cols(parts: &[&TokenMatrix]) -> TokenMatrix {
    assert!(!parts.is_empty());
    let rows = parts[0].rows;
    let cols: usize = parts.iter().map(|p| p.cols).sum();
    let mut out = TokenMatrix::zeros(rows, cols);
    for r in 0..rows {
        let mut off = 0;
        for p in parts {
            assert_eq!(p.rows, rows, "concat_cols row mismatch");
            out.data[r * cols + off..r * cols + off + p.cols].copy_from_slice(p.row(r));
            off += p.cols;
        }
    }
    out
}

/// Splits along columns into blocks of the given widths.
pub fn split_cols(m: &TokenMatrix, widths: &[usize]) -> Vec<TokenMatrix> {
    assert_eq!(widths.iter().sum::<usize>(), m.cols, "split widths");
    let mut parts: Vec<TokenMatrix> = widths.iter().map(|&w| TokenMatrix::zeros(m.rows, w)).collect();
    for r in 0..m.rows {
        let src = m.row(r);
        let mut off = 0;
        for (p, &w) in parts.iter_mut().zip(widths) {
            let c = p.cols;
            p.data_mut()[r * c..(r + 1) * c].copy_from_slice(&src[off..off + w]);
            off += w;
        }
    }
    parts
}

/// Frobenius inner product; the reduction behind scalar-parameter gradients.
pub fn frob_dot(a: &impl AsMat, b: &impl AsMat) -> f64 {
    debug_assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

impl ParamTensor {
    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        ParamTensor {
            name: name.into(),
            rows,
            cols,
            value: vec![0.0; rows * cols],
            grad: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(name: impl Into<String>, v: f64) -> Self {
        ParamTensor {
            name: name.into(),
            rows: 1,
            cols: 1,
            value: vec![v],
            grad: vec![0.0],
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.value[0]
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn accumulate(&mut self, g: &TokenMatrix) {
        assert_eq!((g.rows(), g.cols()), (self.rows, self.cols), "param grad shape");
        for (acc, v) in self.grad.iter_mut().zip(g.data()) {
            *acc += v;
        }
    }

    pub fn accumulate_scalar(&mut self, g: f64) {
        debug_assert!(self.is_scalar());
        self.grad[0] += g;
    }

    /// Adds `other.grad` into this tensor's gradient buffer.
    pub fn accumulate_from(&mut self, other: &ParamTensor) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.grad.iter_mut().zip(&other.grad) {
            *a += b;
        }
    }

    pub fn sgd_step(&mut self, lr: f64) {
        for (v, g) in self.value.iter_mut().zip(&self.grad) {
            *v -= lr * g;
        }
    }
}

/// A named collection of learnable tensors addressable in a fixed order.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&ParamTensor>;
    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor>;

    fn zero_grads(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }

    fn sgd_step(&mut self, lr: f64) {
        for t in self.tensors_mut() {
            t.sgd_step(lr);
        }
    }

    fn accumulate_grads_from(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src = other.tensors();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            dst.accumulate_from(s);
        }
    }
}
