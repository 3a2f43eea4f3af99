//! Dense f64 kernels shared by every other module.
//!
//! Matrices are row-major. Linear maps use the row-vector convention
//! `y = x · W + b`, so a weight mapping `n` inputs to `m` outputs has shape
//! `n × m`. Every reduction accumulates left to right in index order, which
//! keeps results bit-reproducible across runs and platforms.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("Matrix::new", &[rows, cols], &[data.len()]));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("Matrix::from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    /// `self · w + b`, with `b` broadcast over rows.
    pub fn affine(&self, w: &Matrix, b: &[f64]) -> Result<Matrix> {
        if b.len() != w.cols {
            return Err(Error::shape("affine bias", &w.shape(), &[b.len()]));
        }
        let mut out = matmul(self, w)?;
        for i in 0..out.rows {
            for (v, bias) in out.row_mut(i).iter_mut().zip(b) {
                *v += bias;
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add", &self.shape(), &other.shape()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    /// `self + alpha * other`
    pub fn add_scaled(&self, other: &Matrix, alpha: f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add_scaled", &self.shape(), &other.shape()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + alpha * b)
                .collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Matrix product with a fixed accumulation order: for every output cell the
/// terms are summed for `k = 0, 1, ..` starting from `0.0`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", &a.shape(), &b.shape()));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Row vector times matrix: `x · w`.
pub fn vec_mat(x: &[f64], w: &Matrix) -> Result<Vec<f64>> {
    if x.len() != w.rows {
        return Err(Error::shape("vec_mat", &[x.len()], &w.shape()));
    }
    let mut out = vec![0.0; w.cols];
    for (k, &xk) in x.iter().enumerate() {
        for (o, &wkj) in out.iter_mut().zip(w.row(k)) {
            *o += xk * wkj;
        }
    }
    Ok(out)
}

/// `x · w + b`
pub fn linear(x: &[f64], w: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != w.cols {
        return Err(Error::shape("linear bias", &w.shape(), &[b.len()]));
    }
    let mut out = vec_mat(x, w)?;
    for (o, bias) in out.iter_mut().zip(b) {
        *o += bias;
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Softmax restricted to `mask`; every index outside the mask gets exactly 0.
pub fn masked_softmax(scores: &[f64], mask: &[usize]) -> Result<Vec<f64>> {
    let probs = softmax_over(scores, mask)?;
    let mut out = vec![0.0; scores.len()];
    for (&j, p) in mask.iter().zip(probs) {
        out[j] = p;
    }
    Ok(out)
}

/// Softmax over `scores[j]` for `j` in `mask`, returned in mask order.
pub(crate) fn softmax_over(scores: &[f64], mask: &[usize]) -> Result<Vec<f64>> {
    if mask.is_empty() {
        return Err(Error::Contract("masked softmax over an empty mask".into()));
    }
    if let Some(&bad) = mask.iter().find(|&&j| j >= scores.len()) {
        return Err(Error::Contract(format!(
            "mask index {bad} out of range for {} scores",
            scores.len()
        )));
    }
    let max = mask
        .iter()
        .map(|&j| scores[j])
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = mask.iter().map(|&j| (scores[j] - max).exp()).collect();
    let sum = exps.iter().fold(0.0, |a, b| a + b);
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    if scores.is_empty() {
        return Vec::new();
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum = exps.iter().fold(0.0, |a, b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    if logits.is_empty() {
        return Vec::new();
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum = logits.iter().fold(0.0, |a, l| a + (l - max).exp());
    let lse = max + sum.ln();
    logits.iter().map(|l| l - lse).collect()
}

/// `ln(exp(a) + exp(b))` without overflow.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(Error::shape("layer_norm", &[x.len()], &[gain.len(), bias.len()]));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Parameter(format!("layer_norm epsilon must be > 0, got {epsilon}")));
    }
    if x.is_empty() {
        return Ok(Vec::new());
    }
    let n = x.len() as f64;
    let mean = x.iter().fold(0.0, |a, v| a + v) / n;
    let var = x.iter().fold(0.0, |a, v| a + (v - mean) * (v - mean)) / n;
    let inv = 1.0 / (var + epsilon).sqrt();
    Ok(x
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) * inv * g + b)
        .collect())
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Hidden and cell vectors of an LSTM.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
}

impl RecurrentState {
    pub fn zeros(size: usize) -> Self {
        Self {
            hidden: vec![0.0; size],
            cell: vec![0.0; size],
        }
    }

    pub fn size(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_zero(&self) -> bool {
        self.hidden.iter().chain(&self.cell).all(|&v| v == 0.0)
    }

    pub fn reset(&mut self) {
        self.hidden.iter_mut().for_each(|v| *v = 0.0);
        self.cell.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Weights of a single LSTM cell. Gate blocks are laid out `[input, forget,
/// candidate, output]` along the `4·hidden` axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights {
    /// `input_size × 4·hidden`
    pub input: Matrix,
    /// `hidden × 4·hidden`
    pub recurrent: Matrix,
    /// `4·hidden`
    pub bias: Vec<f64>,
}

impl LstmWeights {
    pub fn zeros(input_size: usize, hidden: usize) -> Self {
        Self {
            input: Matrix::zeros(input_size, 4 * hidden),
            recurrent: Matrix::zeros(hidden, 4 * hidden),
            bias: vec![0.0; 4 * hidden],
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.recurrent.rows()
    }

    pub fn input_size(&self) -> usize {
        self.input.rows()
    }
}

/// One LSTM step. Returns the new hidden vector (the cell output) and the
/// updated state.
pub fn lstm_cell_step(
    input: &[f64],
    state: &RecurrentState,
    weights: &LstmWeights,
) -> Result<(Vec<f64>, RecurrentState)> {
    let h = weights.hidden_size();
    if weights.input.cols() != 4 * h || weights.recurrent.cols() != 4 * h || weights.bias.len() != 4 * h {
        return Err(Error::shape(
            "lstm weights",
            &weights.input.shape(),
            &weights.recurrent.shape(),
        ));
    }
    if input.len() != weights.input_size() {
        return Err(Error::shape("lstm input", &[input.len()], &weights.input.shape()));
    }
    if state.hidden.len() != h || state.cell.len() != h {
        return Err(Error::shape(
            "lstm state",
            &[state.hidden.len(), state.cell.len()],
            &[h, h],
        ));
    }
    let from_input = vec_mat(input, &weights.input)?;
    let from_hidden = vec_mat(&state.hidden, &weights.recurrent)?;
    let z: Vec<f64> = from_input
        .iter()
        .zip(&from_hidden)
        .zip(&weights.bias)
        .map(|((a, b), c)| a + b + c)
        .collect();

    let mut hidden = vec![0.0; h];
    let mut cell = vec![0.0; h];
    for u in 0..h {
        let i = sigmoid(z[u]);
        let f = sigmoid(z[h + u]);
        let g = z[2 * h + u].tanh();
        let o = sigmoid(z[3 * h + u]);
        cell[u] = f * state.cell[u] + i * g;
        hidden[u] = o * cell[u].tanh();
    }
    Ok((hidden.clone(), RecurrentState { hidden, cell }))
}
