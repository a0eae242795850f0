//! Dense row-major f64 tensors and the handful of kernels everything else
//! leans on. Shapes are explicit; 2-D is the workhorse layout.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "tensor shape must be non-empty positive integers, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} implies {numel} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::contract("from_rows needs at least one row"));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("rows have unequal lengths"));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row count of a 2-D tensor; 1-D tensors count as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Row-concatenation; all parts must agree on column count.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows needs at least one part"));
        }
        let cols = parts[0].cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != cols {
                return Err(Error::DimMismatch {
                    op: "concat_rows",
                    left: parts[0].shape.clone(),
                    right: p.shape.clone(),
                });
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Tensor::new(vec![rows, cols], data)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor {
        let c = self.cols();
        Tensor {
            shape: vec![len, c],
            data: self.data[start * c..(start + len) * c].to_vec(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn l2_norm(&self) -> f64 {
        self.frobenius_norm()
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::DimMismatch {
                op: "add",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::DimMismatch {
                op: "sub",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// One output row of a matmul: o_row += a_row · b. Column tiles hold the
/// accumulators in registers; the reduction stays in ascending-k order so
/// every row sums identically regardless of row blocking.
#[inline]
fn row_times_matrix(a_row: &[f64], b: &[f64], r: usize, o_row: &mut [f64]) {
    const JW: usize = 8;
    let mut j = 0;
    while j + JW <= r {
        let mut acc = [0.0f64; JW];
        for (k, &x) in a_row.iter().enumerate() {
            let bx: &[f64; JW] = b[k * r + j..k * r + j + JW]
                .try_into()
                .expect("tile width");
            for (o, &bv) in acc.iter_mut().zip(bx) {
                *o = bv.mul_add(x, *o);
            }
        }
        let dst = &mut o_row[j..j + JW];
        for (d, &v) in dst.iter_mut().zip(&acc) {
            *d += v;
        }
        j += JW;
    }
    if j < r {
        let w = r - j;
        let mut acc = [0.0f64; JW];
        for (k, &x) in a_row.iter().enumerate() {
            let bx = &b[k * r + j..k * r + j + w];
            for (o, &bv) in acc[..w].iter_mut().zip(bx) {
                *o = bv.mul_add(x, *o);
            }
        }
        let dst = &mut o_row[j..r];
        for (d, &v) in dst.iter_mut().zip(&acc[..w]) {
            *d += v;
        }
    }
}

/// Register-tiled accumulation: 4 output rows by 8 output columns held in
/// locals across the whole reduction, so `b` streams once per row group and
/// the accumulators never round-trip through memory inside the k loop.
fn matmul_block4(a: &[f64], b: &[f64], p: usize, q: usize, r: usize, out: &mut [f64]) {
    const JW: usize = 8;
    let mut i = 0;
    while i + 4 <= p {
        let a0 = &a[i * q..(i + 1) * q];
        let a1 = &a[(i + 1) * q..(i + 2) * q];
        let a2 = &a[(i + 2) * q..(i + 3) * q];
        let a3 = &a[(i + 3) * q..(i + 4) * q];
        let mut j = 0;
        while j + JW <= r {
            let mut acc = [[0.0f64; JW]; 4];
            for k in 0..q {
                let bx: &[f64; JW] = b[k * r + j..k * r + j + JW]
                    .try_into()
                    .expect("tile width");
                let xs = [a0[k], a1[k], a2[k], a3[k]];
                for (row, &x) in acc.iter_mut().zip(&xs) {
                    for (o, &bv) in row.iter_mut().zip(bx) {
                        *o = bv.mul_add(x, *o);
                    }
                }
            }
            for (ri, row) in acc.iter().enumerate() {
                let dst = &mut out[(i + ri) * r + j..(i + ri) * r + j + JW];
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d += v;
                }
            }
            j += JW;
        }
        if j < r {
            let w = r - j;
            let mut acc = vec![0.0f64; 4 * w];
            for k in 0..q {
                let bx = &b[k * r + j..k * r + j + w];
                let xs = [a0[k], a1[k], a2[k], a3[k]];
                for (ri, &x) in xs.iter().enumerate() {
                    let row = &mut acc[ri * w..(ri + 1) * w];
                    for (o, &bv) in row.iter_mut().zip(bx) {
                        *o = bv.mul_add(x, *o);
                    }
                }
            }
            for ri in 0..4 {
                let dst = &mut out[(i + ri) * r + j..(i + ri) * r + r];
                for (d, &v) in dst.iter_mut().zip(&acc[ri * w..(ri + 1) * w]) {
                    *d += v;
                }
            }
        }
        i += 4;
    }
    while i < p {
        let a_row = &a[i * q..(i + 1) * q];
        let o_row = &mut out[i * r..(i + 1) * r];
        row_times_matrix(a_row, b, r, o_row);
        i += 1;
    }
}

/// out = a[p×q] · b[q×r], overwriting out.
pub fn matmul_raw(a: &[f64], b: &[f64], p: usize, q: usize, r: usize, out: &mut [f64]) {
    out.fill(0.0);
    matmul_block4(a, b, p, q, r, out);
}

/// out[p×q] += a[p×q'] · b[q×q']ᵀ using a transposed scratch copy of `b`
/// so the inner loop streams contiguously.
pub fn matmul_nt_acc_raw(a: &[f64], b: &[f64], p: usize, r: usize, q: usize, out: &mut [f64]) {
    let mut bt = vec![0.0; r * q];
    for k in 0..q {
        for j in 0..r {
            bt[j * q + k] = b[k * r + j];
        }
    }
    matmul_acc_raw(a, &bt, p, r, q, out);
}

/// out += a[p×q] · b[q×r].
pub fn matmul_acc_raw(a: &[f64], b: &[f64], p: usize, q: usize, r: usize, out: &mut [f64]) {
    matmul_block4(a, b, p, q, r, out);
}

/// out[q×r] += a[p×q]ᵀ · b[p×r]. Four rows of `a` per pass so each output
/// row is touched once per group.
pub fn matmul_tn_acc_raw(a: &[f64], b: &[f64], p: usize, q: usize, r: usize, out: &mut [f64]) {
    let mut i = 0;
    while i + 4 <= p {
        let a0 = &a[i * q..(i + 1) * q];
        let a1 = &a[(i + 1) * q..(i + 2) * q];
        let a2 = &a[(i + 2) * q..(i + 3) * q];
        let a3 = &a[(i + 3) * q..(i + 4) * q];
        let b0 = &b[i * r..(i + 1) * r];
        let b1 = &b[(i + 1) * r..(i + 2) * r];
        let b2 = &b[(i + 2) * r..(i + 3) * r];
        let b3 = &b[(i + 3) * r..(i + 4) * r];
        for k in 0..q {
            let (x0, x1, x2, x3) = (a0[k], a1[k], a2[k], a3[k]);
            let o_row = &mut out[k * r..(k + 1) * r];
            for j in 0..r {
                o_row[j] += x0 * b0[j] + x1 * b1[j] + x2 * b2[j] + x3 * b3[j];
            }
        }
        i += 4;
    }
    while i < p {
        let a_row = &a[i * q..(i + 1) * q];
        let b_row = &b[i * r..(i + 1) * r];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let o_row = &mut out[k * r..(k + 1) * r];
            for (o, &bij) in o_row.iter_mut().zip(b_row) {
                *o += aik * bij;
            }
        }
        i += 1;
    }
}

/// Row-wise softmax with per-row max subtraction, written into out.
pub fn softmax_rows_raw(x: &[f64], cols: usize, out: &mut [f64]) {
    for (orow, xrow) in out.chunks_mut(cols).zip(x.chunks(cols)) {
        let max = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(xrow) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
}

/// Matrix product a[p×q] · b[q×r].
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !a.is_matrix() || !b.is_matrix() || a.cols() != b.rows() {
        return Err(Error::DimMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (p, q, r) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; p * r];
    matmul_raw(&a.data, &b.data, p, q, r, &mut out);
    Ok(Tensor {
        shape: vec![p, r],
        data: out,
    })
}

/// a[p×q] · bᵀ where b is [r×q]; avoids materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !a.is_matrix() || !b.is_matrix() || a.cols() != b.cols() {
        return Err(Error::DimMismatch {
            op: "matmul_nt",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (p, q, r) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        let a_row = &a.data[i * q..(i + 1) * q];
        let o_row = &mut out[i * r..(i + 1) * r];
        for (j, o) in o_row.iter_mut().enumerate() {
            let b_row = &b.data[j * q..(j + 1) * q];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *o = acc;
        }
    }
    Ok(Tensor {
        shape: vec![p, r],
        data: out,
    })
}

/// aᵀ · b where a is [p×q], b is [p×r]; result [q×r].
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !a.is_matrix() || !b.is_matrix() || a.rows() != b.rows() {
        return Err(Error::DimMismatch {
            op: "matmul_tn",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (p, q, r) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; q * r];
    for i in 0..p {
        let a_row = &a.data[i * q..(i + 1) * q];
        let b_row = &b.data[i * r..(i + 1) * r];
        for (k, &aik) in a_row.iter().enumerate() {
            let o_row = &mut out[k * r..(k + 1) * r];
            for (o, &bij) in o_row.iter_mut().zip(b_row) {
                *o += aik * bij;
            }
        }
    }
    Ok(Tensor {
        shape: vec![q, r],
        data: out,
    })
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (p, q) = (logits.rows(), logits.cols());
    let mut out = vec![0.0; p * q];
    softmax_rows_raw(&logits.data, q, &mut out);
    Tensor {
        shape: logits.shape.clone(),
        data: out,
    }
}

/// Row-wise layer normalization with learned gain and bias over the last dim.
pub fn layer_norm(x: &Tensor, gain: &[f64], bias: &[f64], eps: f64) -> Result<Tensor> {
    let (p, d) = (x.rows(), x.cols());
    if gain.len() != d || bias.len() != d {
        return Err(Error::DimMismatch {
            op: "layer_norm",
            left: x.shape.clone(),
            right: vec![gain.len()],
        });
    }
    if eps <= 0.0 {
        return Err(Error::contract("layer_norm eps must be positive"));
    }
    let mut out = vec![0.0; p * d];
    for i in 0..p {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let o_row = &mut out[i * d..(i + 1) * d];
        for j in 0..d {
            o_row[j] = (row[j] - mean) * inv * gain[j] + bias[j];
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}
