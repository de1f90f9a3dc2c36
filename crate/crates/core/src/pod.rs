//! Truncated proper orthogonal decomposition.

use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serial;

/// Orthonormal reduced basis of the state space.
///
/// `basis` is `N × N_POD`; column `i` pairs with `singular_values[i]`.
/// When the basis was assembled from separate field blocks, singular values
/// are descending within each block and `block_sizes` lists the number of
/// reduced coordinates contributed by each block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PodBasis {
    #[serde(with = "serial::matrix")]
    pub basis: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub full_spectrum_energy: f64,
    #[serde(with = "serial::vector")]
    pub mean: DVector<f64>,
    pub block_sizes: Vec<usize>,
}

impl PodBasis {
    pub fn state_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn reduced_dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Basis that keeps the leading `n` coordinates of an `n`-or-wider state.
    pub fn identity(state_dim: usize, n: usize) -> Self {
        PodBasis {
            basis: DMatrix::identity(state_dim, n),
            singular_values: vec![1.0; n],
            full_spectrum_energy: n as f64,
            mean: DVector::zeros(state_dim),
            block_sizes: vec![n],
        }
    }

    /// `(x - mean) Ũ`
    pub fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.state_dim() {
            return Err(Error::dim("project input", self.state_dim(), x.len()));
        }
        Ok(self.basis.tr_mul(&(x - &self.mean)))
    }

    /// `x̃ Ũᵀ + mean`
    pub fn reconstruct(&self, reduced: &DVector<f64>) -> Result<DVector<f64>> {
        if reduced.len() != self.reduced_dim() {
            return Err(Error::dim("reconstruct input", self.reduced_dim(), reduced.len()));
        }
        Ok(&self.basis * reduced + &self.mean)
    }

    /// Row-wise projection of a snapshot matrix (`rows × N` → `rows × N_POD`).
    pub fn project_rows(&self, states: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if states.ncols() != self.state_dim() {
            return Err(Error::dim("project rows", self.state_dim(), states.ncols()));
        }
        let mut centered = states.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.mean.transpose();
        }
        Ok(centered * &self.basis)
    }

    /// Row-wise projection of time derivatives (the mean does not apply).
    pub fn project_rate_rows(&self, rates: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if rates.ncols() != self.state_dim() {
            return Err(Error::dim("project rows", self.state_dim(), rates.ncols()));
        }
        Ok(rates * &self.basis)
    }

    pub fn reconstruct_rows(&self, reduced: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if reduced.ncols() != self.reduced_dim() {
            return Err(Error::dim("reconstruct rows", self.reduced_dim(), reduced.ncols()));
        }
        let mut out = reduced * self.basis.transpose();
        for mut row in out.row_iter_mut() {
            row += self.mean.transpose();
        }
        Ok(out)
    }
}

/// Computes the leading `n_pod` POD modes of a `rows × N` snapshot matrix.
///
/// Uses the method of snapshots (eigen-decomposition of the `rows × rows`
/// Gram matrix) when `N > 4·rows`, a thin SVD otherwise.
pub fn compute_pod(states: &DMatrix<f64>, n_pod: usize, center: bool) -> Result<PodBasis> {
    let (rows, n) = states.shape();
    if n_pod == 0 || n_pod > rows.min(n) {
        return Err(Error::InvalidArgument(format!(
            "n_pod = {n_pod} must lie in 1..={}",
            rows.min(n)
        )));
    }
    if states.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("snapshot matrix".into()));
    }
    let mean = if center {
        DVector::from_fn(n, |j, _| states.column(j).mean())
    } else {
        DVector::zeros(n)
    };
    let mut x = states.clone();
    if center {
        for mut row in x.row_iter_mut() {
            row -= mean.transpose();
        }
    }
    let energy = x.norm_squared();

    let (mut basis, sigma) = if n > 4 * rows {
        method_of_snapshots(&x, n_pod)
    } else {
        direct_svd(&x, n_pod)?
    };
    fix_signs(&mut basis);
    Ok(PodBasis {
        basis,
        singular_values: sigma,
        full_spectrum_energy: energy,
        mean,
        block_sizes: vec![n_pod],
    })
}

fn direct_svd(x: &DMatrix<f64>, n_pod: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    // Right singular vectors of X are the left singular vectors of Xᵀ.
    let svd = SVD::try_new(x.clone(), false, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::NonFinite("svd did not converge".into()))?;
    let v_t = svd.v_t.expect("requested v_t");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let basis = DMatrix::from_fn(x.ncols(), n_pod, |i, k| v_t[(order[k], i)]);
    let sigma = order[..n_pod]
        .iter()
        .map(|&k| svd.singular_values[k])
        .collect();
    Ok((basis, sigma))
}

fn method_of_snapshots(x: &DMatrix<f64>, n_pod: usize) -> (DMatrix<f64>, Vec<f64>) {
    let gram = x * x.transpose();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut basis = DMatrix::zeros(x.ncols(), n_pod);
    let mut sigma = Vec::with_capacity(n_pod);
    for (k, &idx) in order[..n_pod].iter().enumerate() {
        let s = eig.eigenvalues[idx].max(0.0).sqrt();
        sigma.push(s);
        let col = x.tr_mul(&eig.eigenvectors.column(idx));
        let norm = col.norm();
        if norm > 0.0 {
            basis.set_column(k, &(col / norm));
        }
    }
    (basis, sigma)
}

/// Largest-magnitude entry of every column made positive.
fn fix_signs(basis: &mut DMatrix<f64>) {
    for mut col in basis.column_iter_mut() {
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
}

/// POD applied separately to disjoint column blocks of the state (e.g.
/// velocity and pressure), with the reduced coordinates concatenated.
pub fn compute_pod_blocks(
    states: &DMatrix<f64>,
    blocks: &[Range<usize>],
    n_pod: &[usize],
    center: bool,
) -> Result<PodBasis> {
    if blocks.len() != n_pod.len() {
        return Err(Error::dim("pod blocks", blocks.len(), n_pod.len()));
    }
    let n = states.ncols();
    let total: usize = n_pod.iter().sum();
    let mut basis = DMatrix::zeros(n, total);
    let mut mean = DVector::zeros(n);
    let mut sigma = Vec::with_capacity(total);
    let mut energy = 0.0;
    let mut offset = 0;
    for (range, &k) in blocks.iter().zip(n_pod) {
        if range.end > n || range.is_empty() {
            return Err(Error::InvalidArgument(format!("bad pod block {range:?}")));
        }
        let sub = states.columns(range.start, range.len()).into_owned();
        let pod = compute_pod(&sub, k, center)?;
        basis
            .view_mut((range.start, offset), (range.len(), k))
            .copy_from(&pod.basis);
        mean.rows_mut(range.start, range.len()).copy_from(&pod.mean);
        sigma.extend(pod.singular_values);
        energy += pod.full_spectrum_energy;
        offset += k;
    }
    Ok(PodBasis {
        basis,
        singular_values: sigma,
        full_spectrum_energy: energy,
        mean,
        block_sizes: n_pod.to_vec(),
    })
}
