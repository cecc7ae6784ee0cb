//! Dense row-major matrices and the handful of kernels the losses need.
//!
//! All accumulation is in `f64`. BF16 appears only at the storage boundary.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)
    }
}

impl Matrix {
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                format!("{rows}x{cols}"),
                format!("buffer of {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(format!("row 0 of len {cols}"), format!("row {i} of len {}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(shape_str(self), shape_str(other)));
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += s * b);
        Ok(())
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

fn shape_str(m: &Matrix) -> String {
    format!("{}x{}", m.rows, m.cols)
}

/// Multiplicative logit scale applied to cosine similarities before a softmax.
///
/// A scale `s` corresponds to temperature `1/s`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct LogitScale(f64);

impl LogitScale {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 {
            Ok(Self(value))
        } else {
            Err(Error::Config(format!("logit scale must be positive and finite, got {value}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    pub fn temperature(self) -> f64 {
        1.0 / self.0
    }
}

impl TryFrom<f64> for LogitScale {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LogitScale> for f64 {
    fn from(s: LogitScale) -> f64 {
        s.0
    }
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape(shape_str(a), shape_str(b)));
    }
    matmul(a, &b.transpose())
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(shape_str(a), shape_str(b)));
    }
    let (n, m) = (a.cols, b.cols);
    let mut out = Matrix::zeros(a.rows, m);
    if m == 0 {
        return Ok(out);
    }
    // Four output rows at a time share each load of a `b` row.
    let mut quads = out.data.chunks_exact_mut(4 * m);
    for (q, block) in (&mut quads).enumerate() {
        let (o0, rest) = block.split_at_mut(m);
        let (o1, rest) = rest.split_at_mut(m);
        let (o2, o3) = rest.split_at_mut(m);
        let arows = &a.data[4 * q * n..4 * (q + 1) * n];
        for k in 0..n {
            let (s0, s1, s2, s3) = (arows[k], arows[n + k], arows[2 * n + k], arows[3 * n + k]);
            let brow = &b.data[k * m..(k + 1) * m];
            for j in 0..m {
                let v = brow[j];
                o0[j] += s0 * v;
                o1[j] += s1 * v;
                o2[j] += s2 * v;
                o3[j] += s3 * v;
            }
        }
    }
    let done = a.rows / 4 * 4;
    for (r, orow) in quads.into_remainder().chunks_exact_mut(m).enumerate() {
        let arow = a.row(done + r);
        for (k, &s) in arow.iter().enumerate() {
            orow.iter_mut().zip(b.row(k)).for_each(|(o, &v)| *o += s * v);
        }
    }
    Ok(out)
}

/// Inner product over the shorter length, summed in four interleaved lanes.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn l2_normalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let n = norm(row);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroRow { row: i });
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Row-wise `log softmax(scale · logits)`, computed stably via log-sum-exp.
pub fn log_softmax_rows(logits: &Matrix, scale: LogitScale) -> Result<Matrix> {
    if logits.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let s = scale.get();
    let mut out = logits.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(s * v));
        let lse = row.iter().map(|&v| (s * v - max).exp()).sum::<f64>().ln() + max;
        row.iter_mut().for_each(|v| *v = s * *v - lse);
    }
    Ok(out)
}

/// Row-wise softmax and log-softmax of `scale · logits` with one `exp` per entry.
pub fn softmax_pair_rows(logits: &Matrix, scale: LogitScale) -> Result<(Matrix, Matrix)> {
    if logits.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let s = scale.get();
    let mut p = logits.clone();
    let mut log_p = logits.clone();
    for i in 0..p.rows {
        let lrow = log_p.row_mut(i);
        let max = lrow.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(s * v));
        lrow.iter_mut().for_each(|v| *v = s * *v - max);
        let prow = p.row_mut(i);
        let mut sum = 0.0;
        for (pv, &lv) in prow.iter_mut().zip(log_p.row(i)) {
            *pv = lv.exp();
            sum += *pv;
        }
        let log_sum = sum.ln();
        prow.iter_mut().for_each(|v| *v /= sum);
        log_p.row_mut(i).iter_mut().for_each(|v| *v -= log_sum);
    }
    Ok((p, log_p))
}

/// [`softmax_pair_rows`] of `logits` and of its transpose, sharing one `exp` per entry.
///
/// Falls back to two row-wise passes when the logit spread could underflow a
/// single global shift.
pub fn softmax_pair_both(logits: &Matrix, scale: LogitScale) -> Result<[(Matrix, Matrix); 2]> {
    if logits.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let s = scale.get();
    let (lo, hi) = logits
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(s * v), hi.max(s * v)));
    if logits.data.is_empty() || hi - lo > 600.0 {
        return Ok([softmax_pair_rows(logits, scale)?, softmax_pair_rows(&logits.transpose(), scale)?]);
    }
    let (r, c) = (logits.rows, logits.cols);
    let mut p = Matrix::zeros(r, c);
    let mut log_p = Matrix::zeros(r, c);
    let mut row_log = vec![0.0; r];
    let mut row_inv = vec![0.0; r];
    let mut col_sum = vec![0.0; c];
    for i in 0..r {
        let (src, shifted, e) = (logits.row(i), &mut log_p.data[i * c..(i + 1) * c], &mut p.data[i * c..(i + 1) * c]);
        let mut sum = 0.0;
        for j in 0..c {
            shifted[j] = s * src[j] - hi;
            e[j] = shifted[j].exp();
            sum += e[j];
            col_sum[j] += e[j];
        }
        row_log[i] = sum.ln();
        row_inv[i] = 1.0 / sum;
    }
    let col_inv: Vec<f64> = col_sum.iter().map(|v| 1.0 / v).collect();
    let col_log: Vec<f64> = col_sum.iter().map(|v| v.ln()).collect();
    let mut pt = Matrix::zeros(c, r);
    let mut log_pt = Matrix::zeros(c, r);
    for i in 0..r {
        let inv = row_inv[i];
        for j in 0..c {
            let k = i * c + j;
            let (e, sh) = (p.data[k], log_p.data[k]);
            pt.data[j * r + i] = e * col_inv[j];
            log_pt.data[j * r + i] = sh - col_log[j];
            p.data[k] = e * inv;
            log_p.data[k] = sh - row_log[i];
        }
    }
    Ok([(p, log_p), (pt, log_pt)])
}

/// Row and column softmax of `scale · logits` with their mean `Σ_j p ln p`,
/// without materializing the log-probabilities. Returns
/// `[(row softmax, mean over rows), (softmax of the transpose, mean over columns)]`.
pub fn softmax_both_with_entropy(logits: &Matrix, scale: LogitScale) -> Result<[(Matrix, f64); 2]> {
    if logits.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let s = scale.get();
    let (lo, hi) = logits
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(s * v), hi.max(s * v)));
    if logits.data.is_empty() || hi - lo > 600.0 {
        let neg_entropy = |(p, log_p): (Matrix, Matrix)| {
            let h = dot(p.data(), log_p.data()) / p.rows.max(1) as f64;
            (p, h)
        };
        let [fwd, rev] = softmax_pair_both(logits, scale)?;
        return Ok([neg_entropy(fwd), neg_entropy(rev)]);
    }
    let (r, c) = (logits.rows, logits.cols);
    let mut p = Matrix::zeros(r, c);
    let mut row_sum = vec![0.0; r];
    let mut row_esh = vec![0.0; r];
    let mut col_sum = vec![0.0; c];
    let mut col_esh = vec![0.0; c];
    let mut shifted = vec![0.0; c];
    for i in 0..r {
        let (src, e) = (logits.row(i), &mut p.data[i * c..(i + 1) * c]);
        for ((sh, v), &x) in shifted.iter_mut().zip(e.iter_mut()).zip(src) {
            *sh = s * x - hi;
            *v = sh.exp();
        }
        let (mut sum, mut esh) = (0.0, 0.0);
        for j in 0..c {
            let (v, veh) = (e[j], e[j] * shifted[j]);
            sum += v;
            esh += veh;
            col_sum[j] += v;
            col_esh[j] += veh;
        }
        row_sum[i] = sum;
        row_esh[i] = esh;
    }
    let row_h: f64 = row_sum.iter().zip(&row_esh).map(|(&z, &e)| e / z - z.ln()).sum::<f64>() / r as f64;
    let col_h: f64 = col_sum.iter().zip(&col_esh).map(|(&z, &e)| e / z - z.ln()).sum::<f64>() / c as f64;
    let col_inv: Vec<f64> = col_sum.iter().map(|v| 1.0 / v).collect();
    let mut pt = Matrix::zeros(c, r);
    for (i, (prow, &z)) in p.data.chunks_exact_mut(c).zip(&row_sum).enumerate() {
        let inv = 1.0 / z;
        for (j, (v, &ci)) in prow.iter_mut().zip(&col_inv).enumerate() {
            pt.data[j * r + i] = *v * ci;
            *v *= inv;
        }
    }
    Ok([(p, row_h), (pt, col_h)])
}

/// Row-wise `softmax(scale · logits)`; each row sums to one.
pub fn softmax_rows(logits: &Matrix, scale: LogitScale) -> Result<Matrix> {
    if logits.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let s = scale.get();
    let mut out = logits.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(s * v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (s * *v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(out)
}

/// Mean over rows of `KL(p_i ‖ q_i)`, with `0 · ln 0 = 0`.
pub fn kl_rows(p: &Matrix, q: &Matrix) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::shape(shape_str(p), shape_str(q)));
    }
    if p.rows == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..p.rows {
        for (j, (&pv, &qv)) in p.row(i).iter().zip(q.row(i)).enumerate() {
            if pv == 0.0 {
                continue;
            }
            if qv == 0.0 {
                return Err(Error::AbsoluteContinuity { row: i, col: j });
            }
            total += pv * (pv.ln() - qv.ln());
        }
    }
    Ok(total / p.rows as f64)
}

/// Round-to-nearest-even truncation of an `f32` to its top 16 bits.
pub fn f32_to_bf16_bits(x: f32) -> u16 {
    let bits = x.to_bits();
    let lsb = (bits >> 16) & 1;
    (bits.wrapping_add(0x7FFF + lsb) >> 16) as u16
}

pub fn bf16_bits_to_f32(bits: u16) -> f32 {
    f32::from_bits((bits as u32) << 16)
}

/// Packed BF16 words, as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bf16Buffer {
    bits: Vec<u16>,
}

impl Bf16Buffer {
    pub fn encode<I: IntoIterator<Item = f64>>(values: I) -> Result<Self> {
        let bits = values
            .into_iter()
            .map(|v| {
                let f = v as f32;
                if !v.is_finite() || !f.is_finite() {
                    return Err(Error::NonFinite("bf16 input"));
                }
                let b = f32_to_bf16_bits(f);
                if !bf16_bits_to_f32(b).is_finite() {
                    return Err(Error::NonFinite("bf16 overflow"));
                }
                Ok(b)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { bits })
    }

    pub fn from_bits(bits: Vec<u16>) -> Result<Self> {
        if bits.iter().any(|&b| !bf16_bits_to_f32(b).is_finite()) {
            return Err(Error::NonFinite("stored bf16 word"));
        }
        Ok(Self { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u16] {
        &self.bits
    }

    pub fn decode(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| bf16_bits_to_f32(b)).collect()
    }
}

pub fn bf16_round_trip(x: &[f64]) -> Result<Vec<f32>> {
    Ok(Bf16Buffer::encode(x.iter().copied())?.decode())
}
