//! Dense SVD by two independent routes.
//!
//! [`svd`] runs one-sided (Hestenes) Jacobi directly on the matrix.
//! [`svd_via_gram`] diagonalizes the Gram matrix with cyclic Jacobi
//! rotations and recovers the other side by projection. The two share no
//! code beyond the column helpers, so agreement between them is a usable
//! correctness check.

use crate::tensor::{Result, Tensor, TensorError};

const MAX_SWEEPS: usize = 100;

/// Thin decomposition `a = u · diag(s) · vᵀ`, singular values descending.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    /// `m × p`, columns are left singular vectors.
    pub u: Tensor,
    pub s: Vec<f64>,
    /// `n × p`, columns are right singular vectors.
    pub v: Tensor,
}

impl Svd {
    /// Leading `r` left and right singular vectors as column blocks.
    pub fn top(&self, r: usize) -> (Tensor, Tensor) {
        (take_columns(&self.u, r), take_columns(&self.v, r))
    }
}

fn take_columns(t: &Tensor, r: usize) -> Tensor {
    let (m, p) = (t.shape()[0], t.shape()[1]);
    let r = r.min(p);
    let mut out = Vec::with_capacity(m * r);
    for i in 0..m {
        out.extend_from_slice(&t.data()[i * p..i * p + r]);
    }
    Tensor::new(vec![m, r], out).expect("column slice shape")
}

fn require_matrix(a: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let (m, n) = a.dims2(op)?;
    if m == 0 || n == 0 {
        return Err(TensorError::EmptyDimension(a.shape().to_vec()));
    }
    Ok((m, n))
}

/// One-sided Jacobi SVD.
pub fn svd(a: &Tensor) -> Result<Svd> {
    let (m, n) = require_matrix(a, "svd")?;
    if m < n {
        let t = svd(&a.transpose()?)?;
        return Ok(Svd { u: t.v, s: t.s, v: t.u });
    }
    // Column-major working copy: cols[j] is column j of `a`.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.data()[i * n + j]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let sigma: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let order = descending(&sigma);
    let mut u = vec![0.0; m * n];
    let mut vv = vec![0.0; n * n];
    let mut s = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        s.push(sigma[j]);
        for i in 0..m {
            u[i * n + k] = if sigma[j] > 0.0 { cols[j][i] / sigma[j] } else { 0.0 };
        }
        for i in 0..n {
            vv[i * n + k] = v[j][i];
        }
    }
    Ok(Svd {
        u: Tensor::new(vec![m, n], u)?,
        s,
        v: Tensor::new(vec![n, n], vv)?,
    })
}

/// SVD from the eigen-decomposition of `aᵀa` (or `aaᵀ` when wide).
pub fn svd_via_gram(a: &Tensor) -> Result<Svd> {
    let (m, n) = require_matrix(a, "svd_via_gram")?;
    if m < n {
        let t = svd_via_gram(&a.transpose()?)?;
        return Ok(Svd { u: t.v, s: t.s, v: t.u });
    }
    let gram = a.transpose()?.matmul(a)?;
    let (values, vectors) = symmetric_eigen(&gram)?;
    let sigma: Vec<f64> = values.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let order = descending(&sigma);
    let mut u = vec![0.0; m * n];
    let mut vv = vec![0.0; n * n];
    let mut s = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        s.push(sigma[j]);
        for i in 0..n {
            vv[i * n + k] = vectors[i * n + j];
        }
        if sigma[j] > 0.0 {
            for i in 0..m {
                let row = &a.data()[i * n..(i + 1) * n];
                let mut acc = 0.0;
                for (l, &x) in row.iter().enumerate() {
                    acc += x * vectors[l * n + j];
                }
                u[i * n + k] = acc / sigma[j];
            }
        }
    }
    Ok(Svd {
        u: Tensor::new(vec![m, n], u)?,
        s,
        v: Tensor::new(vec![n, n], vv)?,
    })
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix. Returns the
/// eigenvalues and a row-major matrix whose columns are the eigenvectors.
pub fn symmetric_eigen(s: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, n2) = require_matrix(s, "symmetric_eigen")?;
    if n != n2 {
        return Err(TensorError::ShapeMismatch {
            op: "symmetric_eigen",
            left: s.shape().to_vec(),
            right: vec![n, n],
        });
    }
    let mut a = s.data().to_vec();
    let mut v = Tensor::identity(n).into_data();
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off == 0.0 {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                let (app, aqq) = (a[p * n + p], a[q * n + q]);
                if apq == 0.0 || apq.abs() <= f64::EPSILON * 1e-3 * (app.abs() + aqq.abs()) {
                    continue;
                }
                rotated = true;
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - sn * akq;
                    a[k * n + q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - sn * aqk;
                    a[q * n + k] = sn * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - sn * vkq;
                    v[k * n + q] = sn * vkp + c * vkq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    Ok(((0..n).map(|i| a[i * n + i]).collect(), v))
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn descending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    order
}
