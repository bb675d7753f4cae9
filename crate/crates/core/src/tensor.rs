//! Dense row-major `f64` vectors and matrices.
//!
//! Shapes are carried with the data and every mismatch is reported as
//! [`Error::Shape`]; nothing is broadcast implicitly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor1 {
    data: Vec<f64>,
}

/// A dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor1 {
    pub fn new(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }

    /// Entrywise negation.
    pub fn neg(&self) -> Tensor1 {
        Tensor1::new(self.data.iter().map(|v| -v).collect())
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in self.data.iter().enumerate() {
            match best {
                Some((_, b)) if v <= b => {}
                _ => best = Some((i, v)),
            }
        }
        best.map(|(i, _)| i)
    }
}

impl From<Vec<f64>> for Tensor1 {
    fn from(data: Vec<f64>) -> Self {
        Tensor1::new(data)
    }
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
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

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Appends rows at the bottom. Existing values are left untouched.
    pub fn append_rows(&mut self, values: &[f64]) -> Result<()> {
        if self.cols == 0 || values.len() % self.cols != 0 {
            return Err(Error::shape(format!(
                "{} values do not form whole rows of width {}",
                values.len(),
                self.cols
            )));
        }
        self.data.extend_from_slice(values);
        self.rows += values.len() / self.cols;
        Ok(())
    }

    /// `wᵀ v`, used to push gradients back through a layer.
    pub fn transpose_matvec(&self, v: &Tensor1) -> Result<Tensor1> {
        if v.len() != self.rows {
            return Err(Error::shape(format!(
                "transpose_matvec: {}x{} matrix against length-{} vector",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.as_slice().iter().enumerate() {
            if vr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * vr;
            }
        }
        Ok(Tensor1::new(out))
    }
}

/// `out[k] = Σ_j w[k][j]·h[j]`.
pub fn matvec(w: &Tensor2, h: &Tensor1) -> Result<Tensor1> {
    if w.cols != h.len() {
        return Err(Error::shape(format!(
            "matvec: {}x{} matrix against length-{} vector",
            w.rows,
            w.cols,
            h.len()
        )));
    }
    let hs = h.as_slice();
    let out = (0..w.rows)
        .map(|k| w.row(k).iter().zip(hs).map(|(a, b)| a * b).sum())
        .collect();
    Ok(Tensor1::new(out))
}

/// Numerically stable softmax (the maximum logit is subtracted first).
pub fn softmax(z: &Tensor1) -> Result<Tensor1> {
    if z.is_empty() {
        return Err(Error::shape("softmax of an empty vector"));
    }
    let m = z.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.as_slice().iter().map(|v| (v - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(Tensor1::new(exps.into_iter().map(|e| e / total).collect()))
}

/// `log Σ_j exp(z_j)`, stable for large logits.
pub fn log_sum_exp(z: &Tensor1) -> Result<f64> {
    if z.is_empty() {
        return Err(Error::shape("log-sum-exp of an empty vector"));
    }
    let m = z.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.as_slice().iter().map(|v| (v - m).exp()).sum();
    Ok(m + s.ln())
}

pub fn outer(a: &Tensor1, b: &Tensor1) -> Tensor2 {
    let mut data = Vec::with_capacity(a.len() * b.len());
    for &ai in a.as_slice() {
        data.extend(b.as_slice().iter().map(|&bj| ai * bj));
    }
    Tensor2 {
        rows: a.len(),
        cols: b.len(),
        data,
    }
}

pub fn l2_norm(z: &Tensor1) -> f64 {
    z.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matvec_examples() {
        let id = Tensor2::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(matvec(&id, &vec![3.0, 4.0].into()).unwrap().as_slice(), &[3.0, 4.0]);
        let w = Tensor2::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(matvec(&w, &vec![1.0, 1.0].into()).unwrap().as_slice(), &[3.0]);
        let w = Tensor2::from_rows(&[vec![0.5, -0.5], vec![2.0, 1.0]]).unwrap();
        assert_eq!(matvec(&w, &vec![2.0, 2.0].into()).unwrap().as_slice(), &[0.0, 6.0]);
    }

    #[test]
    fn matvec_shape_error() {
        let w = Tensor2::zeros(2, 3);
        assert!(matches!(matvec(&w, &Tensor1::zeros(2)), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&vec![0.0, 0.0].into()).unwrap();
        assert!(close(p.as_slice(), &[0.5, 0.5], 1e-15));
        let p = softmax(&vec![2f64.ln(), 0.0].into()).unwrap();
        assert!(close(p.as_slice(), &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
        // exp(-1000) underflows to 0 in f64; the true value is ~5e-435.
        let p = softmax(&vec![1000.0, 0.0].into()).unwrap();
        assert!(p.as_slice().iter().all(|v| v.is_finite()));
        assert!((p.get(0) - 1.0).abs() < 1e-15);
        assert!(p.get(1) < 1e-300);
    }

    #[test]
    fn softmax_empty_is_shape_error() {
        assert!(matches!(softmax(&Tensor1::zeros(0)), Err(Error::Shape(_))));
    }

    #[test]
    fn outer_examples() {
        let o = outer(&vec![1.0].into(), &vec![1.0].into());
        assert_eq!((o.rows(), o.cols(), o.as_slice()), (1, 1, &[1.0][..]));
        let o = outer(&vec![0.0, 0.0].into(), &vec![5.0, 7.0].into());
        assert_eq!(o.as_slice(), &[0.0; 4]);
        let o = outer(&vec![2.0, 3.0].into(), &vec![1.0, 4.0].into());
        assert_eq!(o.as_slice(), &[2.0, 8.0, 3.0, 12.0]);
    }

    #[test]
    fn l2_norm_examples() {
        assert_eq!(l2_norm(&vec![3.0, 4.0].into()), 5.0);
        assert_eq!(l2_norm(&vec![0.0, 0.0, 0.0].into()), 0.0);
        assert_eq!(l2_norm(&vec![-1.0, 0.0].into()), 1.0);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(Tensor1::new(vec![1.0, 3.0, 3.0]).argmax(), Some(1));
        assert_eq!(Tensor1::zeros(0).argmax(), None);
    }

    #[test]
    fn append_rows_keeps_existing() {
        let mut w = Tensor2::from_rows(&[vec![1.0, 2.0]]).unwrap();
        w.append_rows(&[3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(w.rows(), 3);
        assert_eq!(w.row(0), &[1.0, 2.0]);
        assert!(w.append_rows(&[1.0]).is_err());
    }
}
