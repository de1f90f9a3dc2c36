//! Candidate-feature libraries, constrained coefficient matrices and the
//! latent dynamics `ż = Θ(z, β, t) Ξ`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serial;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Cos,
    Sin,
}

/// One column of the library `Θ`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Feature {
    /// `Π z_i^e_i · Π β_k^e_{n+k}`; exponents cover latent then parameter variables.
    Monomial { exponents: Vec<u32> },
    /// `β_amplitude · cos(β_frequency · t)` or the `sin` counterpart.
    Harmonic {
        amplitude: usize,
        frequency: usize,
        phase: Phase,
    },
}

/// Ordered feature set for `n` latent variables and a parameter vector of
/// length `param_dim`, of which the first `poly_params` enter monomials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureLibrary {
    pub n: usize,
    pub poly_params: usize,
    pub param_dim: usize,
    pub features: Vec<Feature>,
}

/// `(amplitude index, frequency index)` into the parameter vector.
pub type HarmonicPair = (usize, usize);

/// All monomials of total degree `1..=max_degree` in `(z, β_poly)` in
/// graded-lexicographic order (optionally preceded by the constant), then a
/// `cos`/`sin` pair for every harmonic pair.
pub fn build_polynomial_library(
    n: usize,
    poly_params: usize,
    max_degree: u32,
    include_constant: bool,
    harmonic_pairs: &[HarmonicPair],
) -> Result<FeatureLibrary> {
    if max_degree < 1 {
        return Err(Error::InvalidArgument("max_degree must be at least 1".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("latent dimension must be positive".into()));
    }
    let vars = n + poly_params;
    let mut features = Vec::new();
    if include_constant {
        features.push(Feature::Monomial {
            exponents: vec![0; vars],
        });
    }
    for degree in 1..=max_degree {
        // non-decreasing index tuples enumerate monomials in graded lex order
        let mut idx = vec![0usize; degree as usize];
        loop {
            let mut exponents = vec![0u32; vars];
            for &i in &idx {
                exponents[i] += 1;
            }
            features.push(Feature::Monomial { exponents });
            let Some(pos) = (0..idx.len()).rev().find(|&k| idx[k] + 1 < vars) else {
                break;
            };
            let next = idx[pos] + 1;
            for slot in &mut idx[pos..] {
                *slot = next;
            }
        }
    }
    let mut param_dim = poly_params;
    for &(a, w) in harmonic_pairs {
        if a == w {
            return Err(Error::InvalidArgument(format!(
                "harmonic amplitude and frequency share parameter index {a}"
            )));
        }
        if a < poly_params || w < poly_params {
            return Err(Error::InvalidArgument(format!(
                "harmonic pair ({a}, {w}) overlaps the {poly_params} polynomial parameters"
            )));
        }
        param_dim = param_dim.max(a + 1).max(w + 1);
        for phase in [Phase::Cos, Phase::Sin] {
            features.push(Feature::Harmonic {
                amplitude: a,
                frequency: w,
                phase,
            });
        }
    }
    let lib = FeatureLibrary {
        n,
        poly_params,
        param_dim,
        features,
    };
    lib.validate()?;
    Ok(lib)
}

impl FeatureLibrary {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (k, f) in self.features.iter().enumerate() {
            match f {
                Feature::Monomial { exponents } => {
                    if exponents.len() != self.n + self.poly_params {
                        return Err(Error::InvalidArgument(format!(
                            "feature {k} has {} exponents, expected {}",
                            exponents.len(),
                            self.n + self.poly_params
                        )));
                    }
                }
                Feature::Harmonic {
                    amplitude,
                    frequency,
                    ..
                } => {
                    if *amplitude >= self.param_dim || *frequency >= self.param_dim {
                        return Err(Error::InvalidArgument(format!(
                            "feature {k} references a parameter outside 0..{}",
                            self.param_dim
                        )));
                    }
                }
            }
            if self.features[..k].contains(f) {
                return Err(Error::InvalidArgument(format!("duplicate feature {k}")));
            }
        }
        Ok(())
    }

    /// Indices of the frequency parameters used by harmonic features.
    pub fn forcing_frequency(&self) -> Option<usize> {
        self.features.iter().find_map(|f| match f {
            Feature::Harmonic { frequency, .. } => Some(*frequency),
            _ => None,
        })
    }

    pub fn is_autonomous(&self) -> bool {
        self.forcing_frequency().is_none()
    }

    /// Human-readable names such as `z1^2*b1` or `b1*cos(b2*t)`.
    pub fn names(&self) -> Vec<String> {
        self.features
            .iter()
            .map(|f| match f {
                Feature::Monomial { exponents } => {
                    let mut parts = Vec::new();
                    for (i, &e) in exponents.iter().enumerate() {
                        if e == 0 {
                            continue;
                        }
                        let var = if i < self.n {
                            format!("z{}", i + 1)
                        } else {
                            format!("b{}", i - self.n + 1)
                        };
                        parts.push(if e == 1 { var } else { format!("{var}^{e}") });
                    }
                    if parts.is_empty() {
                        "1".to_string()
                    } else {
                        parts.join("*")
                    }
                }
                Feature::Harmonic {
                    amplitude,
                    frequency,
                    phase,
                } => {
                    let fun = match phase {
                        Phase::Cos => "cos",
                        Phase::Sin => "sin",
                    };
                    format!("b{}*{fun}(b{}*t)", amplitude + 1, frequency + 1)
                }
            })
            .collect()
    }

    fn check(&self, z: &[f64], beta: &[f64], t: f64) -> Result<()> {
        if z.len() != self.n {
            return Err(Error::dim("latent state", self.n, z.len()));
        }
        if beta.len() != self.param_dim {
            return Err(Error::dim("parameter vector", self.param_dim, beta.len()));
        }
        if z.iter().chain(beta).any(|v| !v.is_finite()) || !t.is_finite() {
            return Err(Error::NonFinite("library input".into()));
        }
        Ok(())
    }

    /// `Θ(z, β, t)`, length `r`.
    pub fn evaluate(&self, z: &[f64], beta: &[f64], t: f64) -> Result<DVector<f64>> {
        self.check(z, beta, t)?;
        let mut out = DVector::zeros(self.len());
        self.evaluate_into(z, beta, t, out.as_mut_slice());
        Ok(out)
    }

    /// Unchecked evaluation into a caller-provided buffer.
    pub(crate) fn evaluate_into(&self, z: &[f64], beta: &[f64], t: f64, out: &mut [f64]) {
        for (k, f) in self.features.iter().enumerate() {
            out[k] = match f {
                Feature::Monomial { exponents } => exponents
                    .iter()
                    .enumerate()
                    .fold(1.0, |acc, (i, &e)| acc * self.var(z, beta, i).powi(e as i32)),
                Feature::Harmonic {
                    amplitude,
                    frequency,
                    phase,
                } => {
                    let arg = beta[*frequency] * t;
                    beta[*amplitude]
                        * match phase {
                            Phase::Cos => arg.cos(),
                            Phase::Sin => arg.sin(),
                        }
                }
            };
        }
    }

    #[inline]
    fn var(&self, z: &[f64], beta: &[f64], i: usize) -> f64 {
        if i < self.n {
            z[i]
        } else {
            beta[i - self.n]
        }
    }

    /// Partial derivatives of every feature: `(r × n, r × param_dim, r)`.
    pub fn feature_jacobians(
        &self,
        z: &[f64],
        beta: &[f64],
        t: f64,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
        self.check(z, beta, t)?;
        let r = self.len();
        let mut dz = DMatrix::zeros(r, self.n);
        let mut db = DMatrix::zeros(r, self.param_dim);
        let mut dt = DVector::zeros(r);
        self.feature_jacobians_into(z, beta, t, &mut dz, Some((&mut db, &mut dt)));
        Ok((dz, db, dt))
    }

    pub(crate) fn feature_jacobians_into(
        &self,
        z: &[f64],
        beta: &[f64],
        t: f64,
        dz: &mut DMatrix<f64>,
        rest: Option<(&mut DMatrix<f64>, &mut DVector<f64>)>,
    ) {
        let vars = self.n + self.poly_params;
        let (mut db, mut dt) = match rest {
            Some((b, t)) => (Some(b), Some(t)),
            None => (None, None),
        };
        for (k, f) in self.features.iter().enumerate() {
            match f {
                Feature::Monomial { exponents } => {
                    for d in 0..vars {
                        if exponents[d] == 0 {
                            if d < self.n {
                                dz[(k, d)] = 0.0;
                            } else if let Some(b) = db.as_deref_mut() {
                                b[(k, d - self.n)] = 0.0;
                            }
                            continue;
                        }
                        let mut v = 1.0;
                        for (i, &e) in exponents.iter().enumerate() {
                            let x = self.var(z, beta, i);
                            if i == d {
                                v *= e as f64 * x.powi(e as i32 - 1);
                            } else {
                                v *= x.powi(e as i32);
                            }
                        }
                        if d < self.n {
                            dz[(k, d)] = v;
                        } else if let Some(b) = db.as_deref_mut() {
                            b[(k, d - self.n)] = v;
                        }
                    }
                    if let Some(b) = db.as_deref_mut() {
                        for j in self.poly_params..self.param_dim {
                            b[(k, j)] = 0.0;
                        }
                    }
                    if let Some(tt) = dt.as_deref_mut() {
                        tt[k] = 0.0;
                    }
                }
                Feature::Harmonic {
                    amplitude,
                    frequency,
                    phase,
                } => {
                    for d in 0..self.n {
                        dz[(k, d)] = 0.0;
                    }
                    let (a, w) = (beta[*amplitude], beta[*frequency]);
                    let (s, c) = (w * t).sin_cos();
                    // value, d/d(amplitude), d/d(frequency), d/dt
                    let (damp, dfreq, dtime) = match phase {
                        Phase::Cos => (c, -a * t * s, -a * w * s),
                        Phase::Sin => (s, a * t * c, a * w * c),
                    };
                    if let Some(b) = db.as_deref_mut() {
                        for j in 0..self.param_dim {
                            b[(k, j)] = 0.0;
                        }
                        b[(k, *amplitude)] = damp;
                        b[(k, *frequency)] = dfreq;
                    }
                    if let Some(tt) = dt.as_deref_mut() {
                        tt[k] = dtime;
                    }
                }
            }
        }
    }
}

/// `Ξ` together with its equality constraints.
///
/// Wherever `trainable_mask` is false, `values` equals `fixed_values`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientMatrix {
    #[serde(with = "serial::matrix")]
    pub values: DMatrix<f64>,
    #[serde(with = "serial::bool_matrix")]
    pub trainable_mask: DMatrix<bool>,
    #[serde(with = "serial::matrix")]
    pub fixed_values: DMatrix<f64>,
}

impl CoefficientMatrix {
    pub fn zeros(r: usize, n: usize) -> Self {
        CoefficientMatrix {
            values: DMatrix::zeros(r, n),
            trainable_mask: DMatrix::from_element(r, n, true),
            fixed_values: DMatrix::zeros(r, n),
        }
    }

    /// A fully specified (all entries fixed) matrix.
    pub fn fixed(values: DMatrix<f64>) -> Self {
        let (r, n) = values.shape();
        CoefficientMatrix {
            fixed_values: values.clone(),
            values,
            trainable_mask: DMatrix::from_element(r, n, false),
        }
    }

    /// Fully trainable matrix starting at `values`.
    pub fn trainable(values: DMatrix<f64>) -> Self {
        let (r, n) = values.shape();
        CoefficientMatrix {
            values,
            trainable_mask: DMatrix::from_element(r, n, true),
            fixed_values: DMatrix::zeros(r, n),
        }
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    /// Pins `(row, col)` entries to the given values.
    pub fn constrain(&self, entries: &[(usize, usize, f64)]) -> Result<Self> {
        let mut out = self.clone();
        for &(i, j, v) in entries {
            if i >= self.rows() || j >= self.cols() {
                return Err(Error::InvalidArgument(format!(
                    "constraint ({i}, {j}) outside {}×{}",
                    self.rows(),
                    self.cols()
                )));
            }
            out.trainable_mask[(i, j)] = false;
            out.fixed_values[(i, j)] = v;
            out.values[(i, j)] = v;
        }
        Ok(out)
    }

    /// Freezes trainable entries smaller than `tol` in magnitude at zero.
    pub fn threshold(&self, tol: f64) -> Self {
        let mut out = self.clone();
        for k in 0..out.values.len() {
            if out.trainable_mask[k] && out.values[k].abs() < tol {
                out.trainable_mask[k] = false;
                out.fixed_values[k] = 0.0;
                out.values[k] = 0.0;
            }
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_mask.iter().filter(|m| **m).count()
    }

    /// Trainable entries in column-major order.
    pub fn trainable_values(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(self.trainable_mask.iter())
            .filter_map(|(v, m)| m.then_some(*v))
            .collect()
    }

    /// Writes trainable entries (column-major); returns the count consumed.
    pub fn assign_trainable(&mut self, flat: &[f64]) -> usize {
        let mut k = 0;
        for (v, m) in self.values.iter_mut().zip(self.trainable_mask.iter()) {
            if *m {
                *v = flat[k];
                k += 1;
            }
        }
        k
    }

    pub fn l1_trainable(&self) -> f64 {
        self.values
            .iter()
            .zip(self.trainable_mask.iter())
            .filter_map(|(v, m)| m.then_some(v.abs()))
            .sum()
    }

    /// Re-imposes the fixed values wherever the mask is false.
    pub fn enforce(&mut self) {
        for k in 0..self.values.len() {
            if !self.trainable_mask[k] {
                self.values[k] = self.fixed_values[k];
            }
        }
    }

    pub fn constraints_hold(&self) -> bool {
        (0..self.values.len()).all(|k| {
            self.trainable_mask[k] || self.values[k].to_bits() == self.fixed_values[k].to_bits()
        })
    }
}

/// `Θ(z, β, t) Ξ`
pub fn evaluate_dynamics(
    lib: &FeatureLibrary,
    xi: &CoefficientMatrix,
    z: &[f64],
    beta: &[f64],
    t: f64,
) -> Result<DVector<f64>> {
    check_xi(lib, xi)?;
    let theta = lib.evaluate(z, beta, t)?;
    Ok(xi.values.tr_mul(&theta))
}

/// `(∂f/∂z : n×n, ∂f/∂β : n×param_dim, ∂f/∂t : n)`
pub fn dynamics_jacobians(
    lib: &FeatureLibrary,
    xi: &CoefficientMatrix,
    z: &[f64],
    beta: &[f64],
    t: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
    check_xi(lib, xi)?;
    let (dz, db, dt) = lib.feature_jacobians(z, beta, t)?;
    Ok((xi.values.tr_mul(&dz), xi.values.tr_mul(&db), xi.values.tr_mul(&dt)))
}

fn check_xi(lib: &FeatureLibrary, xi: &CoefficientMatrix) -> Result<()> {
    if xi.rows() != lib.len() {
        return Err(Error::dim("coefficient rows", lib.len(), xi.rows()));
    }
    if xi.cols() != lib.n {
        return Err(Error::dim("coefficient columns", lib.n, xi.cols()));
    }
    Ok(())
}

/// Map from one raw (physical) parameter to the value the library sees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ParamMap {
    Identity,
    /// `scale / raw`, e.g. `10³ / Re`.
    Reciprocal { scale: f64 },
    /// `scale · raw + offset`
    Affine { scale: f64, offset: f64 },
}

impl ParamMap {
    pub fn apply(&self, raw: f64) -> f64 {
        match *self {
            ParamMap::Identity => raw,
            ParamMap::Reciprocal { scale } => scale / raw,
            ParamMap::Affine { scale, offset } => scale * raw + offset,
        }
    }

    pub fn derivative(&self, raw: f64) -> f64 {
        match *self {
            ParamMap::Identity => 1.0,
            ParamMap::Reciprocal { scale } => -scale / (raw * raw),
            ParamMap::Affine { scale, .. } => scale,
        }
    }
}

/// Per-component transform from named raw parameters to library parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTransform {
    pub names: Vec<String>,
    pub maps: Vec<ParamMap>,
}

impl ParamTransform {
    pub fn identity(names: &[&str]) -> Self {
        ParamTransform {
            names: names.iter().map(|s| s.to_string()).collect(),
            maps: vec![ParamMap::Identity; names.len()],
        }
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn apply(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.dim() {
            return Err(Error::dim("raw parameters", self.dim(), raw.len()));
        }
        Ok(raw.iter().zip(&self.maps).map(|(v, m)| m.apply(*v)).collect())
    }
}

/// An identified latent system: library, coefficients and parameter map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentModel {
    pub library: FeatureLibrary,
    pub xi: CoefficientMatrix,
    #[serde(rename = "param_transform")]
    pub transform: ParamTransform,
}

impl LatentModel {
    pub fn new(library: FeatureLibrary, xi: CoefficientMatrix, transform: ParamTransform) -> Result<Self> {
        check_xi(&library, &xi)?;
        if transform.dim() != library.param_dim {
            return Err(Error::dim("parameter transform", library.param_dim, transform.dim()));
        }
        Ok(LatentModel {
            library,
            xi,
            transform,
        })
    }

    pub fn dim(&self) -> usize {
        self.library.n
    }

    pub fn param_dim(&self) -> usize {
        self.library.param_dim
    }

    /// Right-hand side at raw parameters `raw`.
    pub fn rhs(&self, z: &[f64], raw: &[f64], t: f64) -> Result<DVector<f64>> {
        let beta = self.transform.apply(raw)?;
        evaluate_dynamics(&self.library, &self.xi, z, &beta, t)
    }

    /// Jacobians with respect to `z`, the raw parameters and `t`.
    pub fn jacobians(
        &self,
        z: &[f64],
        raw: &[f64],
        t: f64,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
        let beta = self.transform.apply(raw)?;
        let (jz, mut jb, jt) = dynamics_jacobians(&self.library, &self.xi, z, &beta, t)?;
        for (k, m) in self.transform.maps.iter().enumerate() {
            let d = m.derivative(raw[k]);
            for i in 0..jb.nrows() {
                jb[(i, k)] *= d;
            }
        }
        Ok((jz, jb, jt))
    }

    /// Pretty-printed equations, e.g. `dz2/dt = -0.2998*z1 + 1*b1*cos(b2*t)`.
    pub fn equations(&self) -> Vec<String> {
        let names = self.library.names();
        (0..self.dim())
            .map(|j| {
                let mut s = format!("dz{}/dt = ", j + 1);
                let mut first = true;
                for (k, name) in names.iter().enumerate() {
                    let c = self.xi.values[(k, j)];
                    if c == 0.0 {
                        continue;
                    }
                    if first {
                        let _ = write!(s, "{}*{name}", fmt_coef(c));
                        first = false;
                    } else if c < 0.0 {
                        let _ = write!(s, " - {}*{name}", fmt_coef(-c));
                    } else {
                        let _ = write!(s, " + {}*{name}", fmt_coef(c));
                    }
                }
                if first {
                    s.push('0');
                }
                s
            })
            .collect()
    }
}

fn fmt_coef(c: f64) -> String {
    let s = format!("{c:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" || s == "0" || s == "-0" {
        format!("{c:.4e}")
    } else {
        s.to_string()
    }
}

/// Writes `Ξ` as CSV: a header of feature names, then one row per feature
/// with `n` columns.
pub fn write_xi_csv(lib: &FeatureLibrary, xi: &CoefficientMatrix, path: impl AsRef<Path>) -> Result<()> {
    check_xi(lib, xi)?;
    let mut out = String::from("feature");
    for j in 0..lib.n {
        let _ = write!(out, ",dz{}", j + 1);
    }
    out.push('\n');
    for (k, name) in lib.names().iter().enumerate() {
        out.push_str(name);
        for j in 0..lib.n {
            let _ = write!(out, ",{}", xi.values[(k, j)]);
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn beam_library() -> FeatureLibrary {
        build_polynomial_library(2, 0, 3, false, &[(0, 1)]).unwrap()
    }

    #[test]
    fn library_sizes() {
        assert_eq!(beam_library().len(), 11);
        assert_eq!(build_polynomial_library(3, 1, 3, true, &[]).unwrap().len(), 35);
        assert_eq!(build_polynomial_library(1, 0, 1, false, &[]).unwrap().len(), 1);
        assert!(build_polynomial_library(1, 0, 0, false, &[]).is_err());
        assert!(build_polynomial_library(2, 1, 2, false, &[(1, 1)]).is_err());
        assert!(build_polynomial_library(2, 1, 2, false, &[(0, 1)]).is_err());
    }

    #[test]
    fn graded_lex_names() {
        let names = build_polynomial_library(3, 1, 3, true, &[]).unwrap().names();
        assert_eq!(&names[..6], &["1", "z1", "z2", "z3", "b1", "z1^2"]);
        assert_eq!(names[8], "z1*b1");
        assert_eq!(names[14], "b1^2");
        assert_eq!(names[18], "z1^2*b1");
        assert_eq!(names[34], "b1^3");
        let beam = beam_library().names();
        assert_eq!(
            beam,
            vec![
                "z1", "z2", "z1^2", "z1*z2", "z2^2", "z1^3", "z1^2*z2", "z1*z2^2", "z2^3",
                "b1*cos(b2*t)", "b1*sin(b2*t)"
            ]
        );
    }

    #[test]
    fn feature_values() {
        let lib = build_polynomial_library(2, 1, 2, true, &[]).unwrap();
        let th = lib.evaluate(&[0.0, 0.0], &[0.0], 0.0).unwrap();
        assert_eq!(th[0], 1.0);
        assert!(th.iter().skip(1).all(|v| *v == 0.0));

        let beam = beam_library();
        let th = beam.evaluate(&[0.1, 0.2], &[0.125, 0.545], 0.0).unwrap();
        assert!((th[3] - 0.02).abs() < 1e-15);
        assert!((th[5] - 0.001).abs() < 1e-15);
        assert_eq!(th[9], 0.125);
        assert!(beam.evaluate(&[0.1], &[0.0, 0.0], 0.0).is_err());
        assert!(beam.evaluate(&[f64::NAN, 0.0], &[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn linear_library_jacobian_is_transpose() {
        let lib = build_polynomial_library(3, 0, 1, false, &[]).unwrap();
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0, 0.0, 2.0, -2.0]);
        let xi = CoefficientMatrix::trainable(a.clone());
        let (jz, _, _) = dynamics_jacobians(&lib, &xi, &[0.3, 0.1, -0.2], &[], 0.0).unwrap();
        assert_eq!(jz, a.transpose());
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lib = build_polynomial_library(3, 1, 3, true, &[(1, 2)]).unwrap();
        let xi = CoefficientMatrix::trainable(DMatrix::from_fn(lib.len(), 3, |_, _| {
            rng.random_range(-1.0..1.0)
        }));
        for _ in 0..5 {
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let t = rng.random_range(-1.0..1.0);
            let (jz, jb, jt) = dynamics_jacobians(&lib, &xi, &z, &b, t).unwrap();
            let f = |z: &[f64], b: &[f64], t: f64| evaluate_dynamics(&lib, &xi, z, b, t).unwrap();
            let h = 1e-6;
            let close = |fd: f64, an: f64| (fd - an).abs() / an.abs().max(1e-2) < 1e-6;
            for d in 0..3 {
                let (mut zp, mut zm) = (z.clone(), z.clone());
                zp[d] += h;
                zm[d] -= h;
                let fd = (f(&zp, &b, t) - f(&zm, &b, t)) / (2.0 * h);
                for i in 0..3 {
                    assert!(close(fd[i], jz[(i, d)]));
                }
                let (mut bp, mut bm) = (b.clone(), b.clone());
                bp[d] += h;
                bm[d] -= h;
                let fd = (f(&z, &bp, t) - f(&z, &bm, t)) / (2.0 * h);
                for i in 0..3 {
                    assert!(close(fd[i], jb[(i, d)]));
                }
            }
            let fd = (f(&z, &b, t + h) - f(&z, &b, t - h)) / (2.0 * h);
            for i in 0..3 {
                assert!(close(fd[i], jt[i]));
            }
        }
    }

    #[test]
    fn harmonic_time_derivative() {
        let lib = build_polynomial_library(1, 0, 1, false, &[(0, 1)]).unwrap();
        let xi = CoefficientMatrix::trainable(DMatrix::from_column_slice(3, 1, &[0.0, 2.0, 0.0]));
        let (f, w, t) = (0.3, 1.7, 0.4);
        let (_, _, jt) = dynamics_jacobians(&lib, &xi, &[0.0], &[f, w], t).unwrap();
        assert!((jt[0] - (-2.0 * f * w * (w * t).sin())).abs() < 1e-15);
    }

    #[test]
    fn beam_identified_model_value() {
        let lib = beam_library();
        let mut col = DMatrix::zeros(11, 2);
        col[(1, 0)] = 1.0;
        for (k, c) in [
            (0, -0.3),
            (1, -0.011),
            (2, 0.003),
            (4, -0.012),
            (5, -0.113),
            (6, 0.036),
            (7, 0.719),
            (8, -0.051),
            (9, -0.009),
        ] {
            col[(k, 1)] = c;
        }
        let xi = CoefficientMatrix::fixed(col);
        let f = evaluate_dynamics(&lib, &xi, &[0.1, 0.0], &[0.0, 0.545], 0.0).unwrap();
        assert_eq!(f[0], 0.0);
        assert!((f[1] + 0.030083).abs() < 1e-15);
        let zero = CoefficientMatrix::zeros(11, 2);
        assert_eq!(
            evaluate_dynamics(&lib, &zero, &[0.1, 0.3], &[0.2, 0.5], 1.0).unwrap(),
            DVector::zeros(2)
        );
    }

    #[test]
    fn constrain_and_threshold() {
        let xi = CoefficientMatrix::trainable(DMatrix::from_row_slice(2, 2, &[1e-6, 0.5, 0.2, -3.0]));
        assert_eq!(xi.threshold(0.0), xi);
        let fixed = xi.constrain(&[(0, 1, 7.0)]).unwrap();
        assert_eq!(fixed.values[(0, 1)], 7.0);
        assert!(!fixed.trainable_mask[(0, 1)]);
        let th = fixed.threshold(1e-3);
        assert_eq!(th.values[(0, 0)], 0.0);
        assert!(!th.trainable_mask[(0, 0)]);
        assert_eq!(th.values[(0, 1)], 7.0);
        assert_eq!(th.values[(1, 0)], 0.2);
        assert!(xi.constrain(&[(2, 0, 1.0)]).is_err());
        // a large fixed value survives any threshold
        let th = fixed.threshold(100.0);
        assert_eq!(th.values[(0, 1)], 7.0);
        assert_eq!(th.fixed_values[(0, 1)], 7.0);
    }

    #[test]
    fn reciprocal_transform_chain_rule() {
        let lib = build_polynomial_library(1, 1, 2, true, &[]).unwrap();
        let xi = CoefficientMatrix::trainable(DMatrix::from_fn(lib.len(), 1, |i, _| 0.1 * i as f64 + 0.05));
        let m = LatentModel::new(
            lib,
            xi,
            ParamTransform {
                names: vec!["Re".into()],
                maps: vec![ParamMap::Reciprocal { scale: 1e3 }],
            },
        )
        .unwrap();
        let (_, jb, _) = m.jacobians(&[0.2], &[50.0], 0.0).unwrap();
        let h = 1e-4;
        let fd = (m.rhs(&[0.2], &[50.0 + h], 0.0).unwrap()[0] - m.rhs(&[0.2], &[50.0 - h], 0.0).unwrap()[0])
            / (2.0 * h);
        assert!((fd - jb[(0, 0)]).abs() < 1e-6 * fd.abs());
    }

    #[test]
    fn equations_print_zero() {
        let lib = build_polynomial_library(2, 0, 1, false, &[]).unwrap();
        let m = LatentModel::new(lib, CoefficientMatrix::zeros(2, 2), ParamTransform::identity(&[])).unwrap();
        assert_eq!(m.equations(), vec!["dz1/dt = 0", "dz2/dt = 0"]);
    }
}
