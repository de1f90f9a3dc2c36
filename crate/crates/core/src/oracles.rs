//! Synthetic full-order data with known two-dimensional latent dynamics.
//!
//! A latent trajectory `z(t)` is lifted to `x = L·z + Q·vech(z zᵀ) + noise`
//! with orthonormal, mutually orthogonal blocks `L` and `Q`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{finite_difference_derivatives, SnapshotSet};
use crate::error::{Error, Result};
use crate::integrator::rk4_step;

#[derive(Debug, Clone, PartialEq)]
pub struct LiftSpec {
    pub ambient_dim: usize,
    /// N × n, orthonormal columns
    pub linear: DMatrix<f64>,
    /// N × n(n+1)/2, orthogonal to `linear`
    pub quadratic: DMatrix<f64>,
    pub noise: f64,
    pub seed: u64,
}

impl LiftSpec {
    /// Random orthonormal blocks from the QR factor of a Gaussian matrix;
    /// the quadratic block is scaled by `quadratic_scale`.
    pub fn random(ambient_dim: usize, n: usize, quadratic_scale: f64, noise: f64, seed: u64) -> Result<Self> {
        let q = n * (n + 1) / 2;
        if ambient_dim < n + q {
            return Err(Error::InvalidArgument(format!(
                "ambient dimension {ambient_dim} cannot hold {} lift columns",
                n + q
            )));
        }
        if !(noise >= 0.0) || !quadratic_scale.is_finite() {
            return Err(Error::InvalidArgument("noise must be ≥ 0 and scale finite".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(ambient_dim, n + q, |_, _| StandardNormal.sample(&mut rng));
        let basis = g.qr().q();
        let lift = LiftSpec {
            ambient_dim,
            linear: basis.columns(0, n).into_owned(),
            quadratic: basis.columns(n, q).into_owned() * quadratic_scale,
            noise,
            seed,
        };
        lift.validate()?;
        Ok(lift)
    }

    pub fn latent_dim(&self) -> usize {
        self.linear.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.latent_dim();
        if self.linear.nrows() != self.ambient_dim || self.quadratic.nrows() != self.ambient_dim {
            return Err(Error::dim("lift rows", self.ambient_dim, self.linear.nrows()));
        }
        if self.quadratic.ncols() != n * (n + 1) / 2 {
            return Err(Error::dim("quadratic lift columns", n * (n + 1) / 2, self.quadratic.ncols()));
        }
        let gram = self.linear.tr_mul(&self.linear) - DMatrix::<f64>::identity(n, n);
        if gram.amax() > 1e-10 {
            return Err(Error::InvalidData("linear lift is not orthonormal".into()));
        }
        if self.linear.tr_mul(&self.quadratic).amax() > 1e-10 {
            return Err(Error::InvalidData("lift blocks are not orthogonal".into()));
        }
        let both = DMatrix::from_fn(self.ambient_dim, self.linear.ncols() + self.quadratic.ncols(), |i, j| {
            if j < n {
                self.linear[(i, j)]
            } else {
                self.quadratic[(i, j - n)]
            }
        });
        let sv = both.singular_values();
        if sv.min() <= 1e-12 * sv.max() {
            return Err(Error::InvalidData("lift is rank deficient".into()));
        }
        Ok(())
    }

    /// `vech(z zᵀ)` in row-major upper-triangle order: z1², z1·z2, …, zn².
    pub fn vech(z: &DVector<f64>) -> DVector<f64> {
        let n = z.len();
        let mut out = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in i..n {
                out.push(z[i] * z[j]);
            }
        }
        DVector::from_vec(out)
    }

    fn vech_rate(z: &DVector<f64>, dz: &DVector<f64>) -> DVector<f64> {
        let n = z.len();
        let mut out = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in i..n {
                out.push(dz[i] * z[j] + z[i] * dz[j]);
            }
        }
        DVector::from_vec(out)
    }

    /// Noise-free lifted state.
    pub fn lift(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.linear * z + &self.quadratic * Self::vech(z)
    }

    pub fn lift_rate(&self, z: &DVector<f64>, dz: &DVector<f64>) -> DVector<f64> {
        &self.linear * dz + &self.quadratic * Self::vech_rate(z, dz)
    }
}

/// Latent truth sampled on `[0, t_end]` at `dt`, integrated at `dt/10`.
fn latent_path<F>(mut f: F, z0: &DVector<f64>, t_end: f64, dt: f64) -> Result<Vec<(f64, DVector<f64>, DVector<f64>)>>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let steps = (t_end / dt).round() as usize;
    let h = dt / 10.0;
    let mut z = z0.clone();
    let mut out = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = k as f64 * dt;
        if k > 0 {
            for j in 0..10 {
                z = rk4_step(&mut f, (k - 1) as f64 * dt + j as f64 * h, &z, h)?;
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::BlowUp { time: t });
            }
        }
        let dz = f(t, &z)?;
        out.push((t, z.clone(), dz));
    }
    Ok(out)
}

/// Per-instance latent paths and parameters lifted into a snapshot set.
fn assemble(
    lift: &LiftSpec,
    instances: Vec<(Vec<f64>, Vec<(f64, DVector<f64>, DVector<f64>)>)>,
    exact_derivatives: bool,
) -> Result<SnapshotSet> {
    let rows: usize = instances.iter().map(|(_, p)| p.len()).sum();
    let p = instances.first().map_or(0, |(b, _)| b.len());
    let n_amb = lift.ambient_dim;
    let mut states = DMatrix::zeros(rows, n_amb);
    let mut derivs = DMatrix::zeros(rows, n_amb);
    let mut params = DMatrix::zeros(rows, p);
    let mut times = Vec::with_capacity(rows);
    let mut ids = Vec::with_capacity(rows);
    let mut rng = ChaCha8Rng::seed_from_u64(lift.seed ^ 0x5e15e);
    let mut r = 0;
    for (id, (beta, path)) in instances.iter().enumerate() {
        for (t, z, dz) in path {
            let x = lift.lift(z);
            for j in 0..n_amb {
                let e: f64 = if lift.noise > 0.0 {
                    lift.noise * Distribution::<f64>::sample(&StandardNormal, &mut rng)
                } else {
                    0.0
                };
                states[(r, j)] = x[j] + e;
            }
            derivs.row_mut(r).copy_from(&lift.lift_rate(z, dz).transpose());
            for (k, b) in beta.iter().enumerate() {
                params[(r, k)] = *b;
            }
            times.push(*t);
            ids.push(id);
            r += 1;
        }
    }
    let set = SnapshotSet::new(states, None, params, times, ids)?;
    if exact_derivatives {
        let mut set = set;
        set.derivatives = Some(derivs);
        Ok(set)
    } else {
        finite_difference_derivatives(&set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DuffingConfig {
    pub ambient_dim: usize,
    pub quadratic_scale: f64,
    pub noise: f64,
    pub seed: u64,
    pub omega0: f64,
    pub q: f64,
    pub gamma: f64,
    pub forcing: Vec<f64>,
    pub omega_min: f64,
    pub omega_max: f64,
    pub omega_count: usize,
    pub t_end: f64,
    pub dt: f64,
    pub z0: [f64; 2],
    /// Replace the exact derivatives by finite differences of the noisy states.
    pub finite_difference: bool,
}

impl Default for DuffingConfig {
    fn default() -> Self {
        DuffingConfig {
            ambient_dim: 64,
            quadratic_scale: 1.0,
            noise: 0.0,
            seed: 0,
            omega0: 0.5475,
            q: 50.0,
            gamma: 0.1,
            forcing: vec![0.125, 0.25],
            omega_min: 0.526,
            omega_max: 0.564,
            omega_count: 28,
            t_end: 300.0,
            dt: 0.25,
            z0: [0.0, 0.0],
            finite_difference: false,
        }
    }
}

impl DuffingConfig {
    pub fn grid(&self) -> Vec<(f64, f64)> {
        let omegas = linspace(self.omega_min, self.omega_max, self.omega_count);
        self.forcing
            .iter()
            .flat_map(|&f| omegas.iter().map(move |&w| (f, w)))
            .collect()
    }
}

pub fn linspace(a: f64, b: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![a],
        _ => (0..count)
            .map(|i| a + (b - a) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

/// Right-hand side of `z̈ + (ω₀/Q)ż + ω₀²z + γz³ = F cos(ωt)` in first-order form.
pub fn duffing_rhs(omega0: f64, q: f64, gamma: f64, force: f64, omega: f64, t: f64, z: &DVector<f64>) -> DVector<f64> {
    let (x, v) = (z[0], z[1]);
    DVector::from_vec(vec![
        v,
        -omega0 * omega0 * x - omega0 / q * v - gamma * x * x * x + force * (omega * t).cos(),
    ])
}

/// Forced Duffing oscillator sampled over a grid of `(F, ω)`; the
/// parameter columns are `F` and `ω`.
pub fn gen_duffing(lift: &LiftSpec, grid: &[(f64, f64)], cfg: &DuffingConfig) -> Result<SnapshotSet> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty (F, ω) grid".into()));
    }
    for (name, v) in [("omega0", cfg.omega0), ("q", cfg.q), ("dt", cfg.dt), ("t_end", cfg.t_end)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
    }
    if !(cfg.gamma >= 0.0) {
        return Err(Error::InvalidArgument("gamma must be ≥ 0".into()));
    }
    if lift.latent_dim() != 2 {
        return Err(Error::dim("lift latent width", 2, lift.latent_dim()));
    }
    let z0 = DVector::from_column_slice(&cfg.z0);
    let instances = grid
        .iter()
        .map(|&(force, omega)| {
            let path = latent_path(
                |t, z| Ok(duffing_rhs(cfg.omega0, cfg.q, cfg.gamma, force, omega, t, z)),
                &z0,
                cfg.t_end,
                cfg.dt,
            )?;
            Ok((vec![force, omega], path))
        })
        .collect::<Result<Vec<_>>>()?;
    assemble(lift, instances, !cfg.finite_difference)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StuartLandauConfig {
    pub ambient_dim: usize,
    pub quadratic_scale: f64,
    pub noise: f64,
    pub seed: u64,
    pub mu_min: f64,
    pub mu_max: f64,
    pub mu_count: usize,
    pub omega: f64,
    pub t_end: f64,
    pub dt: f64,
    pub z0: [f64; 2],
    pub finite_difference: bool,
}

impl Default for StuartLandauConfig {
    fn default() -> Self {
        StuartLandauConfig {
            ambient_dim: 200,
            quadratic_scale: 1.0,
            noise: 1e-4,
            seed: 0,
            mu_min: -0.2,
            mu_max: 0.3,
            mu_count: 9,
            omega: 1.0,
            t_end: 30.0,
            dt: 0.05,
            z0: [0.6, 0.0],
            finite_difference: false,
        }
    }
}

impl StuartLandauConfig {
    pub fn grid(&self) -> Vec<f64> {
        linspace(self.mu_min, self.mu_max, self.mu_count)
    }
}

pub fn stuart_landau_rhs(mu: f64, omega: f64, z: &DVector<f64>) -> DVector<f64> {
    let (a, b) = (z[0], z[1]);
    let r2 = a * a + b * b;
    DVector::from_vec(vec![mu * a - omega * b - a * r2, omega * a + mu * b - b * r2])
}

/// Stuart–Landau normal form sampled over a grid of `µ`; the parameter
/// column stores `µ`.
pub fn gen_stuart_landau(lift: &LiftSpec, mus: &[f64], cfg: &StuartLandauConfig) -> Result<SnapshotSet> {
    let lo = mus.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mus.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mus.is_empty() || !(lo < 0.0 && hi > 0.0) {
        return Err(Error::InvalidArgument("µ grid must contain both signs".into()));
    }
    for (name, v) in [("dt", cfg.dt), ("t_end", cfg.t_end)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
    }
    if lift.latent_dim() != 2 {
        return Err(Error::dim("lift latent width", 2, lift.latent_dim()));
    }
    let z0 = DVector::from_column_slice(&cfg.z0);
    let instances = mus
        .iter()
        .map(|&mu| {
            let path = latent_path(|_, z| Ok(stuart_landau_rhs(mu, cfg.omega, z)), &z0, cfg.t_end, cfg.dt)?;
            Ok((vec![mu], path))
        })
        .collect::<Result<Vec<_>>>()?;
    assemble(lift, instances, !cfg.finite_difference)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn latent_of(lift: &LiftSpec, set: &SnapshotSet, row: usize) -> DVector<f64> {
        lift.linear.tr_mul(&set.states.row(row).transpose())
    }

    #[test]
    fn lift_blocks() {
        let lift = LiftSpec::random(30, 2, 1.0, 0.0, 4).unwrap();
        assert_eq!(lift.quadratic.ncols(), 3);
        assert!(lift.linear.tr_mul(&lift.quadratic).amax() < 1e-10);
        let z = DVector::from_vec(vec![0.3, -0.2]);
        assert!((lift.linear.tr_mul(&lift.lift(&z)) - &z).amax() < 1e-14);
        assert!(LiftSpec::random(4, 2, 1.0, 0.0, 0).is_err());
    }

    #[test]
    fn linear_oscillator_amplitude() {
        let lift = LiftSpec::random(10, 2, 0.5, 0.0, 1).unwrap();
        let cfg = DuffingConfig {
            gamma: 0.0,
            q: 10.0,
            t_end: 400.0,
            dt: 0.1,
            ..Default::default()
        };
        let (f, w) = (0.1, 0.5);
        let set = gen_duffing(&lift, &[(f, w)], &cfg).unwrap();
        let w0 = cfg.omega0;
        let expect = f / ((w0 * w0 - w * w).powi(2) + (w0 * w / cfg.q).powi(2)).sqrt();
        let tail = set.rows() - 200;
        let amp = (tail..set.rows())
            .map(|r| latent_of(&lift, &set, r)[0].abs())
            .fold(0.0, f64::max);
        assert!((amp - expect).abs() < 0.01 * expect, "{amp} vs {expect}");
        assert_eq!(set.params.row(0)[1], w);
    }

    #[test]
    fn unforced_decays() {
        let lift = LiftSpec::random(10, 2, 1.0, 0.0, 1).unwrap();
        let cfg = DuffingConfig {
            q: 5.0,
            z0: [0.5, 0.0],
            t_end: 200.0,
            ..Default::default()
        };
        let set = gen_duffing(&lift, &[(0.0, 0.5)], &cfg).unwrap();
        let last = latent_of(&lift, &set, set.rows() - 1);
        assert!(last.norm() < 1e-3);
    }

    #[test]
    fn stuart_landau_radius() {
        let lift = LiftSpec::random(20, 2, 1.0, 0.0, 2).unwrap();
        let cfg = StuartLandauConfig {
            t_end: 80.0,
            ..Default::default()
        };
        let set = gen_stuart_landau(&lift, &[-0.1, 0.25], &cfg).unwrap();
        let ranges = set.instance_ranges();
        let end0 = latent_of(&lift, &set, ranges[0].1.end - 1);
        let end1 = latent_of(&lift, &set, ranges[1].1.end - 1);
        assert!(end0.norm() < 1e-3);
        assert!((end1.norm() - 0.5).abs() < 1e-3);
        assert!(gen_stuart_landau(&lift, &[0.1, 0.2], &cfg).is_err());
    }

    #[test]
    fn exact_derivatives_match_finite_differences() {
        let lift = LiftSpec::random(12, 2, 1.0, 0.0, 3).unwrap();
        let mut cfg = StuartLandauConfig {
            dt: 0.01,
            t_end: 5.0,
            ..Default::default()
        };
        let exact = gen_stuart_landau(&lift, &[-0.1, 0.2], &cfg).unwrap();
        cfg.finite_difference = true;
        let fd = gen_stuart_landau(&lift, &[-0.1, 0.2], &cfg).unwrap();
        let diff = exact.derivatives.unwrap() - fd.derivatives.unwrap();
        assert!(diff.amax() < 1e-3, "{}", diff.amax());
    }

    #[test]
    fn default_grids() {
        assert_eq!(DuffingConfig::default().grid().len(), 56);
        let mus = StuartLandauConfig::default().grid();
        assert_eq!(mus.len(), 9);
        assert_eq!((mus[0], mus[8]), (-0.2, 0.3));
    }

    #[test]
    fn injective_on_samples() {
        let lift = LiftSpec::random(16, 2, 1.0, 0.0, 9).unwrap();
        let set = gen_stuart_landau(&lift, &[-0.2, 0.3], &StuartLandauConfig::default()).unwrap();
        // the linear block recovers z exactly, so distinct z give distinct x
        for r in (0..set.rows()).step_by(37) {
            let z = latent_of(&lift, &set, r);
            assert!((lift.lift(&z) - set.states.row(r).transpose()).amax() < 1e-12);
        }
    }
}
