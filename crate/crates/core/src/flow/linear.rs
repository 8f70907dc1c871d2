//! Invertible linear flow `W = P·L·U`.
//!
//! `P` is a frozen permutation, `L` unit lower-triangular and `U` upper
//! triangular, both trainable and stored packed. The forward map is applied
//! factor by factor, so `W` is never formed outside of oracles.

use crate::error::{Error, Result};
use crate::grad::{Matrix, ParamStore, StoreId, Tape, Triangle, Var};

pub const SINGULAR_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFlow {
    perm: Vec<usize>,
    inv_perm: Vec<usize>,
    lower: usize,
    upper: usize,
    dim: usize,
}

impl LinearFlow {
    /// Allocates `L = 0` (strict part) and `U = I`, so the flow starts as `P`.
    pub fn build(perm: Vec<usize>, prefix: &str, store: &mut ParamStore) -> Result<Self> {
        let dim = perm.len();
        let mut seen = vec![false; dim];
        for &p in &perm {
            if p >= dim || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Config(format!("{prefix}: {perm:?} is not a permutation")));
            }
        }
        let mut inv_perm = vec![0; dim];
        for (i, &p) in perm.iter().enumerate() {
            inv_perm[p] = i;
        }
        let lower = store.alloc(format!("{prefix}.lower"), Triangle::UnitLower.packed_len(dim));
        let upper = store.alloc(format!("{prefix}.upper"), Triangle::Upper.packed_len(dim));
        for i in 0..dim {
            store.values_mut()[upper + Triangle::Upper.packed_index(dim, i, i)] = 1.0;
        }
        Ok(Self { perm, inv_perm, lower, upper, dim })
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower_offset(&self) -> usize {
        self.lower
    }

    pub fn upper_offset(&self) -> usize {
        self.upper
    }

    /// Index of a diagonal entry below the singularity threshold, if any.
    pub fn singular_index(&self, store: &ParamStore) -> Option<(usize, f64)> {
        let u = &store.values()[self.upper..];
        (0..self.dim)
            .map(|i| (i, u[Triangle::Upper.packed_index(self.dim, i, i)]))
            .find(|(_, v)| v.abs() < SINGULAR_THRESHOLD || !v.is_finite())
    }

    pub fn log_abs_det(&self, store: &ParamStore) -> f64 {
        let u = &store.values()[self.upper..];
        (0..self.dim).map(|i| u[Triangle::Upper.packed_index(self.dim, i, i)].abs().ln()).sum()
    }

    /// `y = P·L·U·x` per row, with log-det `Σ log|U_ii|`.
    pub fn forward_on(&self, tape: &mut Tape<'_>, store: StoreId, x: Var) -> Result<(Var, Var)> {
        let rows = tape.value(x).rows();
        let u = tape.tri_mul(x, store, self.upper, Triangle::Upper)?;
        let l = tape.tri_mul(u, store, self.lower, Triangle::UnitLower)?;
        let out = tape.columns(l, &self.perm)?;
        let log_det = tape.log_abs_diag(store, self.upper, self.dim, rows)?;
        Ok((out, log_det))
    }

    /// `x = U⁻¹·L⁻¹·Pᵀ·y` per row, with the inverse log-det `−Σ log|U_ii|`.
    pub fn inverse_on(&self, tape: &mut Tape<'_>, store: StoreId, y: Var) -> Result<(Var, Var)> {
        let rows = tape.value(y).rows();
        let l = tape.columns(y, &self.inv_perm)?;
        let u = tape.tri_solve(l, store, self.lower, Triangle::UnitLower)?;
        let x = tape.tri_solve(u, store, self.upper, Triangle::Upper)?;
        let ld = tape.log_abs_diag(store, self.upper, self.dim, rows)?;
        let log_det = tape.scale(ld, -1.0);
        Ok((x, log_det))
    }

    /// Dense `W` for determinant and Jacobian oracles.
    pub fn dense_weight(&self, store: &ParamStore) -> Matrix {
        let l = Triangle::UnitLower.dense(&store.values()[self.lower..], self.dim);
        let u = Triangle::Upper.dense(&store.values()[self.upper..], self.dim);
        let mut p = Matrix::zeros(self.dim, self.dim);
        for (i, &j) in self.perm.iter().enumerate() {
            p.set(i, j, 1.0);
        }
        p.matmul(&l).matmul(&u)
    }
}
