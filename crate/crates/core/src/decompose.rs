//! Truncated SVD of flattened weight matrices.
//!
//! The decomposition is a one-sided (Hestenes) Jacobi SVD in `f64`. It is
//! slower than Golub-Kahan for large matrices but accurate to working
//! precision for every singular value, including the small ones that make up
//! the truncation tail.

use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::tensor::{as_matrix, DenseTensor};

const MAX_SWEEPS: usize = 80;

/// `W_f ~= u * diag(sigma) * v^T`, with `u` m x r and `v` n x r.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    pub u: DenseTensor,
    pub sigma: Vec<f32>,
    pub v: DenseTensor,
    /// Shape of the tensor before flattening; `reconstruct` returns this shape.
    pub original_shape: Vec<usize>,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// Stored parameters: `r * (m + n + 1)`.
    pub fn param_count(&self) -> usize {
        self.u.numel() + self.sigma.len() + self.v.numel()
    }

    pub fn push_into(&self, archive: &mut TensorArchive, prefix: &str) -> Result<()> {
        archive.push(format!("{prefix}.u"), self.u.clone())?;
        archive.push(
            format!("{prefix}.sigma"),
            DenseTensor::new(vec![self.sigma.len()], self.sigma.clone())?,
        )?;
        archive.push(format!("{prefix}.v"), self.v.clone())?;
        Ok(())
    }

    pub fn from_archive(
        archive: &TensorArchive,
        prefix: &str,
        original_shape: Vec<usize>,
    ) -> Result<Self> {
        let fetch = |suffix: &str| {
            archive
                .get(&format!("{prefix}.{suffix}"))
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("archive lacks {prefix}.{suffix}")))
        };
        let sigma = fetch("sigma")?;
        if sigma.ndim() != 1 {
            return Err(Error::Shape(format!("{prefix}.sigma must be 1-axis")));
        }
        let f = Self {
            u: fetch("u")?,
            sigma: sigma.into_data(),
            v: fetch("v")?,
            original_shape,
        };
        f.check_shapes()?;
        Ok(f)
    }

    fn check_shapes(&self) -> Result<(usize, usize)> {
        let (m, ru) = self.u.dims2()?;
        let (n, rv) = self.v.dims2()?;
        let r = self.sigma.len();
        if ru != r || rv != r {
            return Err(Error::Shape(format!(
                "u is {m}x{ru}, v is {n}x{rv}, but {r} singular values"
            )));
        }
        let numel: usize = self.original_shape.iter().product();
        if numel != m * n || self.original_shape.first() != Some(&m) {
            return Err(Error::Shape(format!(
                "{m}x{n} factors cannot rebuild shape {:?}",
                self.original_shape
            )));
        }
        Ok((m, n))
    }
}

/// Full thin SVD of a matrix: `min(m, n)` singular triples.
pub fn svd(w_f: &DenseTensor) -> Result<SvdFactors> {
    let (m, n) = w_f.dims2()?;
    if !w_f.is_finite() {
        return Err(Error::NonFinite("matrix passed to svd"));
    }
    let a = Mat::from_tensor(w_f)?;
    let (u, sigma, v) = if m >= n {
        jacobi_svd(&a)
    } else {
        let (u, s, v) = jacobi_svd(&a.transpose());
        (v, s, u)
    };
    Ok(SvdFactors {
        u: u.to_tensor(),
        sigma: sigma.iter().map(|&s| s as f32).collect(),
        v: v.to_tensor(),
        original_shape: vec![m, n],
    })
}

/// SVD of a 2-axis matrix or a flattened 4-axis convolution kernel.
pub fn svd_tensor(w: &DenseTensor) -> Result<SvdFactors> {
    let mut f = svd(&as_matrix(w)?)?;
    f.original_shape = w.shape().to_vec();
    Ok(f)
}

/// Keeps the leading `r` singular triples.
pub fn truncate(f: &SvdFactors, r: usize) -> Result<SvdFactors> {
    let full = f.rank();
    if r == 0 || r > full {
        return Err(Error::InvalidArgument(format!(
            "rank {r} outside 1..={full}"
        )));
    }
    let keep_cols = |t: &DenseTensor| -> Result<DenseTensor> {
        let (rows, cols) = t.dims2()?;
        let data = t
            .data()
            .chunks_exact(cols)
            .flat_map(|row| row[..r].iter().copied())
            .collect();
        DenseTensor::matrix(rows, r, data)
    };
    Ok(SvdFactors {
        u: keep_cols(&f.u)?,
        sigma: f.sigma[..r].to_vec(),
        v: keep_cols(&f.v)?,
        original_shape: f.original_shape.clone(),
    })
}

/// `u * diag(sigma) * v^T`, reshaped to the original tensor shape.
pub fn reconstruct(f: &SvdFactors) -> Result<DenseTensor> {
    let (m, n) = f.check_shapes()?;
    let r = f.rank();
    let mut us = Mat::from_tensor(&f.u)?;
    for i in 0..m {
        for k in 0..r {
            *us.at_mut(i, k) *= f64::from(f.sigma[k]);
        }
    }
    let v = Mat::from_tensor(&f.v)?;
    let w = us.matmul_t(&v)?;
    debug_assert_eq!((w.rows, w.cols), (m, n));
    w.to_tensor().reshape(f.original_shape.clone())
}

/// One-sided Jacobi on a tall matrix (`rows >= cols`). Returns `(U, sigma, V)`
/// with singular values sorted non-increasing, orthonormal columns in both
/// factors, and the first nonzero entry of every `U` column non-negative.
fn jacobi_svd(a: &Mat) -> (Mat, Vec<f64>, Mat) {
    let (m, n) = (a.rows, a.cols);
    debug_assert!(m >= n);
    // Column-major working copies for contiguous column access.
    let mut g: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| a.at(i, j)).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (gp, gq) = (&g[p], &g[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in gp.iter().zip(gq) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut g, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = g
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let max_sigma = norms.iter().copied().fold(0.0, f64::max);
    let cutoff = max_sigma * 1e-13 * (m as f64);

    let mut sigma = Vec::with_capacity(n);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut null_slots = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let s = norms[j];
        if s > cutoff && s > 0.0 {
            sigma.push(s);
            u_cols.push(g[j].iter().map(|x| x / s).collect());
        } else {
            sigma.push(0.0);
            u_cols.push(vec![0.0; m]);
            null_slots.push(slot);
        }
        v_cols.push(v[j].clone());
    }
    complete_orthonormal(&mut u_cols, &null_slots);

    for (u, v) in u_cols.iter_mut().zip(v_cols.iter_mut()) {
        if u.iter().find(|&&x| x != 0.0).is_some_and(|&x| x < 0.0) {
            u.iter_mut().for_each(|x| *x = -*x);
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }

    let to_mat = |cols: &[Vec<f64>], rows: usize| {
        let mut out = Mat::zeros(rows, cols.len());
        for (j, col) in cols.iter().enumerate() {
            for (i, &x) in col.iter().enumerate() {
                *out.at_mut(i, j) = x;
            }
        }
        out
    };
    (to_mat(&u_cols, m), sigma, to_mat(&v_cols, n))
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the columns listed in `slots` with unit vectors orthogonal to every
/// other column, drawing candidates from the standard basis.
fn complete_orthonormal(cols: &mut [Vec<f64>], slots: &[usize]) {
    if slots.is_empty() {
        return;
    }
    let m = cols[0].len();
    let mut candidate = 0;
    for &slot in slots {
        loop {
            assert!(candidate < m, "ran out of basis vectors");
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            // Two passes of Gram-Schmidt.
            for _ in 0..2 {
                for (j, col) in cols.iter().enumerate() {
                    if j == slot || col.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let d: f64 = col.iter().zip(&e).map(|(a, b)| a * b).sum();
                    e.iter_mut().zip(col).for_each(|(x, c)| *x -= d * c);
                }
            }
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                cols[slot] = e.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}
