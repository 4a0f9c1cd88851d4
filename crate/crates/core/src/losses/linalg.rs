//! Dense kernels for the CCA loss: cyclic Jacobi eigendecomposition of
//! symmetric matrices and one-sided Jacobi SVD. Sizes here are the head
//! dimension, so O(d^3) sweeps are fine.

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    #[cfg(test)]
    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.at(r, c);
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * otherᵀ`.
    pub fn matmul_t(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols);
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = &self.data[i * self.cols..(i + 1) * self.cols];
            for j in 0..other.rows {
                let b = &other.data[j * other.cols..(j + 1) * other.cols];
                out.data[i * other.rows + j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    pub fn scale(mut self, s: f64) -> Mat {
        self.data.iter_mut().for_each(|v| *v *= s);
        self
    }

    pub fn add(mut self, other: &Mat) -> Mat {
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        self
    }
}

/// Eigenvalues (unsorted) and eigenvectors (columns) of a symmetric matrix.
pub fn sym_eigen(a: &Mat) -> (Vec<f64>, Mat) {
    let n = a.rows;
    let mut a = a.clone();
    let mut v = Mat::identity(n);
    let frob: f64 = a.data.iter().map(|x| x * x).sum();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a.at(p, q) * a.at(p, q);
            }
        }
        if off <= 1e-34 * frob || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.at(p, q);
                if apq == 0.0 {
                    continue;
                }
                let tau = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let t = if tau == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a.at(k, p), a.at(k, q));
                    *a.at_mut(k, p) = c * akp - s * akq;
                    *a.at_mut(k, q) = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a.at(p, k), a.at(q, k));
                    *a.at_mut(p, k) = c * apk - s * aqk;
                    *a.at_mut(q, k) = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.at(k, p), v.at(k, q));
                    *v.at_mut(k, p) = c * vkp - s * vkq;
                    *v.at_mut(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a.at(i, i)).collect(), v)
}

/// Inverse square root of a symmetric positive definite matrix.
pub fn inv_sqrt_spd(a: &Mat, what: &str) -> Result<Mat> {
    let (vals, vecs) = sym_eigen(a);
    if let Some(bad) = vals.iter().copied().find(|v| !(*v > 0.0)) {
        return Err(Error::Numerical(format!(
            "{what} has non-positive eigenvalue {bad:e} after regularization"
        )));
    }
    let n = a.rows;
    let mut scaled = vecs.clone();
    for r in 0..n {
        for c in 0..n {
            *scaled.at_mut(r, c) /= vals[c].sqrt();
        }
    }
    Ok(scaled.matmul_t(&vecs))
}

pub struct Svd {
    pub u: Mat,
    pub s: Vec<f64>,
    pub v: Mat,
}

/// Thin SVD of a square or tall matrix by one-sided Jacobi rotations.
/// Singular values are sorted descending; each left singular vector has its
/// largest-magnitude entry made positive (the right vector flips with it).
pub fn svd(a: &Mat) -> Svd {
    let (m, n) = (a.rows, a.cols);
    assert!(m >= n, "svd expects rows >= cols");
    let mut u = a.clone();
    let mut v = Mat::identity(n);
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for k in 0..m {
                    let (up, uq) = (u.at(k, p), u.at(k, q));
                    alpha += up * up;
                    beta += uq * uq;
                    gamma += up * uq;
                }
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta == 0.0 {
                    1.0
                } else {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..m {
                    let (up, uq) = (u.at(k, p), u.at(k, q));
                    *u.at_mut(k, p) = c * up - s * uq;
                    *u.at_mut(k, q) = s * up + c * uq;
                }
                for k in 0..n {
                    let (vp, vq) = (v.at(k, p), v.at(k, q));
                    *v.at_mut(k, p) = c * vp - s * vq;
                    *v.at_mut(k, q) = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|k| u.at(k, j).powi(2)).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let smax = norms[order[0]];

    let mut uo = Mat::zeros(m, n);
    let mut vo = Mat::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    for (j, &src) in order.iter().enumerate() {
        let sigma = norms[src];
        s.push(sigma);
        for k in 0..n {
            *vo.at_mut(k, j) = v.at(k, src);
        }
        if sigma > 1e-300 && sigma > 1e-15 * smax {
            for k in 0..m {
                *uo.at_mut(k, j) = u.at(k, src) / sigma;
            }
        } else {
            complete_column(&mut uo, j);
        }
    }

    for j in 0..n {
        let mut best = 0;
        for k in 1..m {
            if uo.at(k, j).abs() > uo.at(best, j).abs() {
                best = k;
            }
        }
        if uo.at(best, j) < 0.0 {
            for k in 0..m {
                *uo.at_mut(k, j) = -uo.at(k, j);
            }
            for k in 0..n {
                *vo.at_mut(k, j) = -vo.at(k, j);
            }
        }
    }
    Svd { u: uo, s, v: vo }
}

/// Fills column `j` with a unit vector orthogonal to columns `0..j`.
fn complete_column(u: &mut Mat, j: usize) {
    let m = u.rows;
    for e in 0..m {
        let mut cand: Vec<f64> = (0..m).map(|k| if k == e { 1.0 } else { 0.0 }).collect();
        for _ in 0..2 {
            for c in 0..j {
                let dot: f64 = (0..m).map(|k| cand[k] * u.at(k, c)).sum();
                for (k, x) in cand.iter_mut().enumerate() {
                    *x -= dot * u.at(k, c);
                }
            }
        }
        let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            for (k, x) in cand.iter().enumerate() {
                *u.at_mut(k, j) = x / norm;
            }
            return;
        }
    }
}
