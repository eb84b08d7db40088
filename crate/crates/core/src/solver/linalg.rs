//! Symmetric block-tridiagonal systems.
//!
//! The normal equations of a knot chain are block tridiagonal, so a block
//! Cholesky factorization solves them in `O(N·s³)`, and a backward recursion
//! over the factor recovers the diagonal and first off-diagonal blocks of the
//! inverse without ever forming it.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Symmetric matrix with blocks `diag[i]` and `upper[i] = A[i, i+1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTridiagonal {
    pub diag: Vec<DMatrix<f64>>,
    pub upper: Vec<DMatrix<f64>>,
}

impl BlockTridiagonal {
    pub fn zeros(blocks: usize, size: usize) -> Self {
        BlockTridiagonal {
            diag: vec![DMatrix::zeros(size, size); blocks],
            upper: vec![DMatrix::zeros(size, size); blocks.saturating_sub(1)],
        }
    }

    pub fn blocks(&self) -> usize {
        self.diag.len()
    }

    pub fn block_size(&self) -> usize {
        self.diag.first().map_or(0, |d| d.nrows())
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let s = self.block_size();
        let n = self.blocks();
        let mut m = DMatrix::zeros(n * s, n * s);
        for (i, d) in self.diag.iter().enumerate() {
            m.view_mut((i * s, i * s), (s, s)).copy_from(d);
        }
        for (i, u) in self.upper.iter().enumerate() {
            m.view_mut((i * s, (i + 1) * s), (s, s)).copy_from(u);
            m.view_mut(((i + 1) * s, i * s), (s, s))
                .copy_from(&u.transpose());
        }
        m
    }

    pub fn mul_vec(&self, x: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut y: Vec<DVector<f64>> = self.diag.iter().zip(x).map(|(d, x)| d * x).collect();
        for (i, u) in self.upper.iter().enumerate() {
            y[i] += u * &x[i + 1];
            y[i + 1] += u.tr_mul(&x[i]);
        }
        y
    }

    /// Adds `λ·max(Aᵢᵢ, floor)` to every diagonal entry.
    pub fn damped(&self, lambda: f64, floor: f64) -> Self {
        let mut out = self.clone();
        for d in &mut out.diag {
            for k in 0..d.nrows() {
                d[(k, k)] += lambda * d[(k, k)].max(floor);
            }
        }
        out
    }

    pub fn cholesky(&self) -> Result<BlockCholesky> {
        let n = self.blocks();
        let mut diag: Vec<DMatrix<f64>> = Vec::with_capacity(n);
        let mut lower: Vec<DMatrix<f64>> = Vec::with_capacity(n.saturating_sub(1));
        let mut carry: Option<DMatrix<f64>> = None;
        for i in 0..n {
            let mut a = self.diag[i].clone();
            if let Some(c) = carry.take() {
                a -= c;
            }
            symmetrize(&mut a);
            let l = a
                .cholesky()
                .ok_or_else(|| {
                    Error::Numerical(format!(
                        "block {i} of the normal equations is not positive definite"
                    ))
                })?
                .unpack();
            if i + 1 < n {
                // L[i+1,i] = A[i,i+1]ᵀ·L[i,i]⁻ᵀ
                let x = l
                    .solve_lower_triangular(&self.upper[i])
                    .ok_or_else(|| Error::Numerical(format!("singular Cholesky block {i}")))?;
                let li = x.transpose();
                carry = Some(&li * li.transpose());
                lower.push(li);
            }
            diag.push(l);
        }
        Ok(BlockCholesky { diag, lower })
    }
}

/// `A = L·Lᵀ` with `L` block lower bidiagonal.
#[derive(Debug, Clone)]
pub struct BlockCholesky {
    diag: Vec<DMatrix<f64>>,
    lower: Vec<DMatrix<f64>>,
}

impl BlockCholesky {
    pub fn blocks(&self) -> usize {
        self.diag.len()
    }

    pub fn solve(&self, rhs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let n = self.blocks();
        let mut y: Vec<DVector<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let mut b = rhs[i].clone();
            if i > 0 {
                b -= &self.lower[i - 1] * &y[i - 1];
            }
            y.push(
                self.diag[i]
                    .solve_lower_triangular(&b)
                    .expect("non-singular factor"),
            );
        }
        let mut x = y;
        for i in (0..n).rev() {
            if i + 1 < n {
                let t = self.lower[i].tr_mul(&x[i + 1]);
                x[i] -= t;
            }
            x[i] = self.diag[i]
                .tr_solve_lower_triangular(&x[i])
                .expect("non-singular factor");
        }
        x
    }

    /// `log det A`.
    pub fn log_det(&self) -> f64 {
        2.0 * self
            .diag
            .iter()
            .flat_map(|l| (0..l.nrows()).map(move |k| l[(k, k)].ln()))
            .sum::<f64>()
    }

    /// Inverse of the last diagonal block of `A⁻¹`, i.e. the covariance of the
    /// last block when `A` is an information matrix.
    pub fn last_covariance(&self) -> DMatrix<f64> {
        let l = self.diag.last().expect("nonempty factor");
        let linv = lower_inverse(l);
        linv.transpose() * &linv
    }

    /// Diagonal and first super-diagonal blocks of `A⁻¹`.
    pub fn selected_inverse(&self) -> BlockTridiagonal {
        let n = self.blocks();
        let linv: Vec<DMatrix<f64>> = self.diag.iter().map(lower_inverse).collect();
        let mut diag = vec![DMatrix::zeros(0, 0); n];
        let mut upper = vec![DMatrix::zeros(0, 0); n.saturating_sub(1)];
        diag[n - 1] = linv[n - 1].transpose() * &linv[n - 1];
        for i in (0..n - 1).rev() {
            // Σ[i+1,i] = −Σ[i+1,i+1]·L[i+1,i]·L[i,i]⁻¹
            let sigma_next_i = -(&diag[i + 1] * &self.lower[i] * &linv[i]);
            // Σ[i,i] = (L[i,i]⁻ᵀ − Σ[i,i+1]·L[i+1,i])·L[i,i]⁻¹
            let mut d =
                (linv[i].transpose() - sigma_next_i.transpose() * &self.lower[i]) * &linv[i];
            symmetrize(&mut d);
            diag[i] = d;
            upper[i] = sigma_next_i.transpose();
        }
        BlockTridiagonal { diag, upper }
    }
}

fn lower_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    l.solve_lower_triangular(&DMatrix::identity(n, n))
        .expect("non-singular factor")
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Schur complement eliminating the first variable of
/// `[[a00, a01], [a01ᵀ, a11]]·x = [b0; b1]`, returning the reduced `(A, b)`
/// on the second.
pub fn schur_eliminate(
    a00: &DMatrix<f64>,
    a01: &DMatrix<f64>,
    a11: &DMatrix<f64>,
    b0: &DVector<f64>,
    b1: &DVector<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let mut a = a00.clone();
    symmetrize(&mut a);
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Numerical("eliminated block is not positive definite".into()))?;
    let x = chol.solve(a01);
    let y = chol.solve(b0);
    let mut h = a11 - a01.transpose() * &x;
    symmetrize(&mut h);
    let g = b1 - a01.tr_mul(&y);
    Ok((h, g))
}
