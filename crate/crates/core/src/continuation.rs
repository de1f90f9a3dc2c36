//! Periodic orbits of the latent system by orthogonal collocation, branches
//! of them by pseudo-arclength continuation, and their Floquet stability.
//!
//! Time is normalised to `s ∈ [0, 1]` so each orbit solves
//! `z'(s) = τ·f(z(s), β, s·τ)`. On every mesh element the solution is the
//! degree-`m` polynomial through `m + 1` equidistant nodes, and the equation
//! is imposed at the `m` Gauss–Legendre points.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{integrate_latent, rk4_step, Params};
use crate::sindy::LatentModel;
use crate::trainer::TrainedModel;

const TAU_LIMITS: (f64, f64) = (1e-6, 1e6);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Period locked to the forcing, `τ = 2π/ω`.
    Forced,
    /// Period is an unknown, fixed by an integral phase condition.
    Autonomous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stability {
    Stable,
    Unstable,
}

impl std::fmt::Display for Stability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stability::Stable => "stable",
            Stability::Unstable => "unstable",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    RangeEnd,
    PointBudget,
    FoldLimit,
    Collapse,
    NewtonFailure,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Termination::RangeEnd => "range-end",
            Termination::PointBudget => "point-budget",
            Termination::FoldLimit => "fold-limit",
            Termination::Collapse => "collapse",
            Termination::NewtonFailure => "newton-failure",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Orbit {
    pub n_elements: usize,
    pub degree: usize,
    pub mesh: Vec<f64>,
    /// `(n_elements·degree + 1) × n` node values
    pub nodes: DMatrix<f64>,
    pub period: f64,
    /// full raw parameter vector
    pub params: Vec<f64>,
    /// index of the continuation parameter in `params`
    pub active: usize,
    pub mode: Mode,
}

impl Orbit {
    pub fn beta(&self) -> f64 {
        self.params[self.active]
    }

    pub fn dim(&self) -> usize {
        self.nodes.ncols()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.nrows()
    }

    /// Node times in `[0, 1]`.
    pub fn node_times(&self) -> Vec<f64> {
        node_times(self.n_elements, self.degree)
    }

    fn check(&self) -> Result<()> {
        let expect = self.n_elements * self.degree + 1;
        if self.n_elements == 0 || self.degree == 0 {
            return Err(Error::InvalidArgument("orbit needs elements and degree ≥ 1".into()));
        }
        if self.nodes.nrows() != expect {
            return Err(Error::dim("orbit nodes", expect, self.nodes.nrows()));
        }
        if self.mesh.len() != self.n_elements + 1
            || self.mesh[0] != 0.0
            || *self.mesh.last().unwrap() != 1.0
            || self.mesh.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::InvalidArgument("orbit mesh must increase from 0 to 1".into()));
        }
        if !(self.period > 0.0 && self.period.is_finite()) {
            return Err(Error::InvalidArgument(format!("period must be positive, got {}", self.period)));
        }
        if self.active >= self.params.len() {
            return Err(Error::InvalidArgument("active parameter out of range".into()));
        }
        let first = self.nodes.row(0);
        let last = self.nodes.row(self.nodes.nrows() - 1);
        let scale = 1.0 + self.nodes.amax();
        if (first - last).amax() > 1e-8 * scale {
            return Err(Error::InvalidArgument("orbit end points differ".into()));
        }
        Ok(())
    }

    /// State at normalised time `s` (taken modulo 1).
    pub fn state_at(&self, s: f64) -> DVector<f64> {
        let basis = Collocation::lagrange(self.degree);
        let (e, xi) = locate(s.rem_euclid(1.0), self.n_elements);
        let w = basis.values(xi);
        let mut z = DVector::zeros(self.dim());
        for (j, wj) in w.iter().enumerate() {
            z += self.nodes.row(e * self.degree + j).transpose() * *wj;
        }
        z
    }

    /// Half the peak-to-peak range of one latent component over the period.
    pub fn amplitude(&self, component: usize) -> f64 {
        half_peak_to_peak(|s| self.state_at(s)[component], self.node_count() * 2)
    }

    /// Largest component amplitude, read from the nodes.
    fn node_amplitude(&self) -> f64 {
        (0..self.dim())
            .map(|j| {
                let c = self.nodes.column(j);
                0.5 * (c.max() - c.min())
            })
            .fold(0.0, f64::max)
    }
}

fn node_times(n_elements: usize, degree: usize) -> Vec<f64> {
    let local = gauss_lobatto(degree);
    let mut out = Vec::with_capacity(n_elements * degree + 1);
    for e in 0..n_elements {
        for x in &local[..degree] {
            out.push((e as f64 + x) / n_elements as f64);
        }
    }
    out.push(1.0);
    out
}

fn locate(s: f64, n_elements: usize) -> (usize, f64) {
    let x = s * n_elements as f64;
    let e = (x.floor() as usize).min(n_elements - 1);
    (e, x - e as f64)
}

/// `(max − min)/2` of a 1-periodic scalar function: dense sampling then a
/// golden-section polish around both extrema.
pub fn half_peak_to_peak(f: impl Fn(f64) -> f64, samples: usize) -> f64 {
    let k = samples.max(8);
    let h = 1.0 / k as f64;
    let vals: Vec<f64> = (0..k).map(|i| f(i as f64 * h)).collect();
    let (imax, _) = vals
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let (imin, _) = vals
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    let hi = golden_max(&f, (imax as f64 - 1.0) * h, (imax as f64 + 1.0) * h).max(vals[imax]);
    let lo = -golden_max(&|s| -f(s), (imin as f64 - 1.0) * h, (imin as f64 + 1.0) * h);
    0.5 * (hi - lo.min(vals[imin]))
}

fn golden_max(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..80 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
        if b - a < 1e-13 {
            break;
        }
    }
    fc.max(fd)
}

/// Gauss–Legendre points and weights on `[0, 1]` (Golub–Welsch).
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let jac = DMatrix::from_fn(m, m, |i, j| {
        if i + 1 == j || j + 1 == i {
            let k = i.max(j) as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..m)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (0.5 * (eig.eigenvalues[i] + 1.0), v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Gauss–Lobatto points on `[0, 1]`: both ends plus the roots of `P_m'`.
pub fn gauss_lobatto(m: usize) -> Vec<f64> {
    let inner = m.saturating_sub(1);
    let jac = DMatrix::from_fn(inner, inner, |i, j| {
        if i + 1 == j || j + 1 == i {
            let k = i.max(j) as f64;
            (k * (k + 2.0) / ((2.0 * k + 1.0) * (2.0 * k + 3.0))).sqrt()
        } else {
            0.0
        }
    });
    let mut x: Vec<f64> = SymmetricEigen::new(jac)
        .eigenvalues
        .iter()
        .map(|v| 0.5 * (v + 1.0))
        .collect();
    x.sort_by(f64::total_cmp);
    let mut out = vec![0.0];
    out.extend(x);
    out.push(1.0);
    out
}

/// Lagrange basis over the `m + 1` Lobatto nodes of `[0, 1]`, tabulated at
/// the Gauss points.
#[derive(Debug, Clone)]
struct Collocation {
    m: usize,
    nodes: Vec<f64>,
    points: Vec<f64>,
    weights: Vec<f64>,
    /// `values[c][j] = L_j(ξ_c)`
    values: Vec<Vec<f64>>,
    /// `slopes[c][j] = L_j'(ξ_c)`
    slopes: Vec<Vec<f64>>,
}

impl Collocation {
    fn lagrange(m: usize) -> Self {
        let nodes = gauss_lobatto(m);
        let (points, weights) = gauss_legendre(m);
        let mut c = Collocation {
            m,
            nodes,
            points,
            weights,
            values: Vec::new(),
            slopes: Vec::new(),
        };
        c.values = c.points.iter().map(|&x| c.values(x)).collect();
        c.slopes = c.points.iter().map(|&x| c.slopes(x)).collect();
        c
    }

    fn values(&self, x: f64) -> Vec<f64> {
        (0..=self.m)
            .map(|j| {
                (0..=self.m)
                    .filter(|&l| l != j)
                    .map(|l| (x - self.nodes[l]) / (self.nodes[j] - self.nodes[l]))
                    .product()
            })
            .collect()
    }

    fn slopes(&self, x: f64) -> Vec<f64> {
        (0..=self.m)
            .map(|j| {
                (0..=self.m)
                    .filter(|&k| k != j)
                    .map(|k| {
                        let rest: f64 = (0..=self.m)
                            .filter(|&l| l != j && l != k)
                            .map(|l| (x - self.nodes[l]) / (self.nodes[j] - self.nodes[l]))
                            .product();
                        rest / (self.nodes[j] - self.nodes[k])
                    })
                    .sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuationConfig {
    pub mode: Mode,
    pub n_elements: usize,
    pub degree: usize,
    pub ds: f64,
    pub max_points: usize,
    /// Stop after this many folds; `None` never stops on folds.
    pub max_folds: Option<usize>,
    pub newton_tol: f64,
    pub max_newton: usize,
    pub settle_time: f64,
    /// Observation window for period detection after settling (autonomous mode).
    pub window_time: f64,
    pub dt: f64,
    /// Latent component whose range is the branch amplitude.
    pub output: usize,
    pub floquet_steps: usize,
    pub min_amplitude: f64,
    /// Initial state for the seeding integration.
    pub z0: Option<Vec<f64>>,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        ContinuationConfig {
            mode: Mode::Autonomous,
            n_elements: 40,
            degree: 4,
            ds: 0.01,
            max_points: 500,
            max_folds: None,
            newton_tol: 1e-10,
            max_newton: 25,
            settle_time: 200.0,
            window_time: 100.0,
            dt: 0.01,
            output: 0,
            floquet_steps: 400,
            min_amplitude: 1e-6,
            z0: None,
        }
    }
}

/// Where the unknown vector ends: nodes, then τ (autonomous), then β (free).
struct Layout {
    nodes: usize,
    n: usize,
    tau: Option<usize>,
    beta: Option<usize>,
    len: usize,
}

impl Layout {
    fn new(orbit: &Orbit, beta_free: bool) -> Self {
        let nodes = orbit.node_count();
        let n = orbit.dim();
        let mut len = nodes * n;
        let tau = (orbit.mode == Mode::Autonomous).then(|| {
            len += 1;
            len - 1
        });
        let beta = beta_free.then(|| {
            len += 1;
            len - 1
        });
        Layout {
            nodes,
            n,
            tau,
            beta,
            len,
        }
    }

    /// Equations of the collocation system (without a Keller row).
    fn equations(&self) -> usize {
        self.nodes * self.n + usize::from(self.tau.is_some())
    }

    fn pack(&self, orbit: &Orbit) -> DVector<f64> {
        let mut u = DVector::zeros(self.len);
        for k in 0..self.nodes {
            for i in 0..self.n {
                u[k * self.n + i] = orbit.nodes[(k, i)];
            }
        }
        if let Some(t) = self.tau {
            u[t] = orbit.period;
        }
        if let Some(b) = self.beta {
            u[b] = orbit.beta();
        }
        u
    }

    fn unpack(&self, u: &DVector<f64>, template: &Orbit, model: &LatentModel) -> Result<Orbit> {
        let mut orbit = template.clone();
        for k in 0..self.nodes {
            for i in 0..self.n {
                orbit.nodes[(k, i)] = u[k * self.n + i];
            }
        }
        if let Some(b) = self.beta {
            orbit.params[orbit.active] = u[b];
        }
        match self.tau {
            Some(t) => orbit.period = u[t],
            None => orbit.period = forced_period(model, &orbit.params)?,
        }
        Ok(orbit)
    }
}

/// `2π/ω` with `ω` the library's forcing frequency at these raw parameters.
pub fn forced_period(model: &LatentModel, raw: &[f64]) -> Result<f64> {
    let k = model
        .library
        .forcing_frequency()
        .ok_or_else(|| Error::InvalidArgument("forced mode needs a harmonic library feature".into()))?;
    let omega = model.transform.apply(raw)?[k];
    if !(omega > 0.0 && omega.is_finite()) {
        return Err(Error::InvalidArgument(format!("forcing frequency must be positive, got {omega}")));
    }
    Ok(std::f64::consts::TAU / omega)
}

/// `dτ/dβ` of the forced period with respect to raw parameter `active`.
fn forced_period_slope(model: &LatentModel, raw: &[f64], active: usize) -> Result<f64> {
    let k = model.library.forcing_frequency().unwrap_or(usize::MAX);
    if k != active {
        return Ok(0.0);
    }
    let omega = model.transform.apply(raw)?[k];
    let dw = model.transform.maps[k].derivative(raw[k]);
    Ok(-std::f64::consts::TAU / (omega * omega) * dw)
}

struct System<'a> {
    model: &'a LatentModel,
    basis: Collocation,
    layout: Layout,
    template: Orbit,
    /// `ż_ref` at every collocation point, for the phase row
    phase_ref: Option<Vec<DVector<f64>>>,
}

impl<'a> System<'a> {
    fn new(model: &'a LatentModel, template: &Orbit, reference: &Orbit, beta_free: bool) -> Result<Self> {
        if template.dim() != model.dim() {
            return Err(Error::dim("orbit state", model.dim(), template.dim()));
        }
        if template.params.len() != model.param_dim() {
            return Err(Error::dim("orbit parameters", model.param_dim(), template.params.len()));
        }
        let basis = Collocation::lagrange(template.degree);
        let phase_ref = (template.mode == Mode::Autonomous).then(|| {
            let ne = reference.n_elements as f64;
            let mut out = Vec::with_capacity(reference.n_elements * reference.degree);
            for e in 0..reference.n_elements {
                for c in 0..basis.m {
                    let mut d = DVector::zeros(reference.dim());
                    for j in 0..=basis.m {
                        d += reference.nodes.row(e * basis.m + j).transpose() * (basis.slopes[c][j] * ne);
                    }
                    out.push(d);
                }
            }
            out
        });
        Ok(System {
            model,
            basis,
            layout: Layout::new(template, beta_free),
            template: template.clone(),
            phase_ref,
        })
    }

    /// Residual and (optionally) its Jacobian at `u`.
    fn eval(&self, u: &DVector<f64>, with_jacobian: bool) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
        let lay = &self.layout;
        let orbit = lay.unpack(u, &self.template, self.model)?;
        let (ne, m, n) = (orbit.n_elements, self.basis.m, lay.n);
        let tau = orbit.period;
        let dtau = match (orbit.mode, lay.beta) {
            (Mode::Forced, Some(_)) => forced_period_slope(self.model, &orbit.params, orbit.active)?,
            _ => 0.0,
        };
        let mut res = DVector::zeros(lay.equations());
        let mut jac = with_jacobian.then(|| DMatrix::zeros(lay.equations(), lay.len));
        let nef = ne as f64;
        for e in 0..ne {
            for c in 0..m {
                let row0 = (e * m + c) * n;
                let s = (e as f64 + self.basis.points[c]) / nef;
                let mut z = DVector::zeros(n);
                let mut dz = DVector::zeros(n);
                let base = orbit.nodes.row(e * m).transpose();
                for j in 0..=m {
                    let node = orbit.nodes.row(e * m + j).transpose();
                    z += &node * self.basis.values[c][j];
                    if j > 0 {
                        dz += (node - &base) * self.basis.slopes[c][j];
                    }
                }
                let t = s * tau;
                let h = tau / nef;
                let f = self.model.rhs(z.as_slice(), &orbit.params, t)?;
                res.rows_mut(row0, n).copy_from(&(&dz - &f * h));
                if let Some(jac) = jac.as_mut() {
                    let (jz, jb, jt) = self.model.jacobians(z.as_slice(), &orbit.params, t)?;
                    for j in 0..=m {
                        let col0 = (e * m + j) * n;
                        let mut block = jz.clone() * (-h * self.basis.values[c][j]);
                        for i in 0..n {
                            block[(i, i)] += self.basis.slopes[c][j];
                        }
                        let mut target = jac.view_mut((row0, col0), (n, n));
                        target += block;
                    }
                    if let Some(tc) = lay.tau {
                        let col = (-&f - &jt * (tau * s)) / nef;
                        jac.view_mut((row0, tc), (n, 1)).copy_from(&col);
                    }
                    if let Some(bc) = lay.beta {
                        let k = orbit.active;
                        let mut col = -jb.column(k) * h;
                        if dtau != 0.0 {
                            col -= (&f + &jt * (tau * s)) * (dtau / nef);
                        }
                        jac.view_mut((row0, bc), (n, 1)).copy_from(&col);
                    }
                }
            }
        }
        // periodicity
        let prow = ne * m * n;
        let last = lay.nodes - 1;
        for i in 0..n {
            res[prow + i] = orbit.nodes[(0, i)] - orbit.nodes[(last, i)];
            if let Some(jac) = jac.as_mut() {
                jac[(prow + i, i)] = 1.0;
                jac[(prow + i, last * n + i)] = -1.0;
            }
        }
        if let Some(refs) = &self.phase_ref {
            let row = prow + n;
            let mut acc = 0.0;
            for e in 0..ne {
                for c in 0..m {
                    let w = self.basis.weights[c] / nef;
                    let zr = &refs[e * m + c];
                    for j in 0..=m {
                        let node = orbit.nodes.row(e * m + j);
                        let lw = w * self.basis.values[c][j];
                        acc += lw * node.transpose().dot(zr);
                        if let Some(jac) = jac.as_mut() {
                            for i in 0..n {
                                jac[(row, (e * m + j) * n + i)] += lw * zr[i];
                            }
                        }
                    }
                }
            }
            res[row] = acc;
        }
        if res.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("collocation residual".into()));
        }
        Ok((res, jac))
    }
}

/// Collocation residual `G(z_c, β)` at fixed β, phased against the orbit itself.
pub fn collocation_residual(model: &LatentModel, orbit: &Orbit) -> Result<DVector<f64>> {
    orbit.check()?;
    if orbit.mode == Mode::Forced {
        let tau = forced_period(model, &orbit.params)?;
        if (tau - orbit.period).abs() > 1e-12 * tau {
            return Err(Error::InvalidArgument("forced orbit period must equal 2π/ω".into()));
        }
    }
    let sys = System::new(model, orbit, orbit, false)?;
    Ok(sys.eval(&sys.layout.pack(orbit), false)?.0)
}

/// LU solve that refuses (near-)singular matrices.
fn solve_checked(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let lu = a.lu();
    let u = lu.u();
    let diag = u.diagonal().map(f64::abs);
    let (lo, hi) = (diag.min(), diag.max());
    if !(hi > 0.0) || lo / hi < 1e-14 {
        return Err(Error::SingularJacobian(format!("pivot ratio {:.3e}", lo / hi)));
    }
    lu.solve(b)
        .ok_or_else(|| Error::SingularJacobian("LU solve failed".into()))
}

/// Pseudo-arclength record: the last accepted point, its unit tangent and the step.
struct ArcRecord<'a> {
    u: &'a DVector<f64>,
    tangent: &'a DVector<f64>,
    weights: &'a DVector<f64>,
    ds: f64,
}

struct NewtonOutcome {
    u: DVector<f64>,
    iterations: usize,
    jacobian: DMatrix<f64>,
}

fn newton(
    sys: &System<'_>,
    mut u: DVector<f64>,
    arc: Option<&ArcRecord<'_>>,
    tol: f64,
    max_iter: usize,
) -> Result<NewtonOutcome> {
    let full = |u: &DVector<f64>, jac: bool| -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
        let (r, j) = sys.eval(u, jac)?;
        match arc {
            None => Ok((r, j)),
            Some(a) => {
                let mut r2 = r.clone().insert_row(r.len(), 0.0);
                r2[r.len()] = (u - a.u).component_mul(a.weights).dot(a.tangent) - a.ds;
                let j2 = j.map(|j| {
                    let rows = j.nrows();
                    let mut j2 = j.insert_row(rows, 0.0);
                    j2.row_mut(rows).copy_from(&a.tangent.component_mul(a.weights).transpose());
                    j2
                });
                Ok((r2, j2))
            }
        }
    };
    let mut trace = Vec::new();
    let (mut r, mut jac) = full(&u, true)?;
    for it in 1..=max_iter {
        let norm = r.amax();
        let step = solve_checked(jac.take().unwrap(), &(-&r))?;
        let mut lambda = 1.0;
        let (mut u_new, mut r_new);
        loop {
            u_new = &u + &step * lambda;
            r_new = full(&u_new, false).map(|x| x.0).ok();
            let ok = r_new.as_ref().is_some_and(|r| r.amax() < norm.max(tol));
            if ok || lambda < 1.0 / 16.0 || norm < tol {
                break;
            }
            lambda *= 0.5;
        }
        let Some(rn) = r_new else {
            return Err(Error::NewtonFailure { iterations: it, trace });
        };
        u = u_new;
        let step_norm = (step * lambda).amax();
        trace.push(rn.amax());
        let (r2, j2) = full(&u, true)?;
        r = r2;
        jac = j2;
        if r.amax() < tol && step_norm < tol {
            return Ok(NewtonOutcome {
                u,
                iterations: it,
                jacobian: jac.unwrap(),
            });
        }
    }
    Err(Error::NewtonFailure {
        iterations: max_iter,
        trace,
    })
}

/// Corrects `guess` at its own parameter values. Returns the orbit and the
/// number of Newton iterations used.
pub fn newton_correct(model: &LatentModel, guess: &Orbit, cfg: &ContinuationConfig) -> Result<(Orbit, usize)> {
    guess.check()?;
    let sys = System::new(model, guess, guess, false)?;
    let u0 = sys.layout.pack(guess);
    let out = newton(&sys, u0, None, cfg.newton_tol, cfg.max_newton)?;
    Ok((sys.layout.unpack(&out.u, guess, model)?, out.iterations))
}

fn uniform_mesh(n_elements: usize) -> Vec<f64> {
    let mut mesh: Vec<f64> = (0..=n_elements).map(|i| i as f64 / n_elements as f64).collect();
    mesh[n_elements] = 1.0;
    mesh
}

/// Samples a trajectory starting at `z_start`, time `t_start`, onto the
/// collocation nodes of one period `tau`.
fn sample_period(
    model: &LatentModel,
    z_start: &DVector<f64>,
    params: &[f64],
    t_start: f64,
    tau: f64,
    cfg: &ContinuationConfig,
) -> Result<DMatrix<f64>> {
    let times = node_times(cfg.n_elements, cfg.degree);
    let k = times.len() - 1;
    let mut f = |t: f64, z: &DVector<f64>| model.rhs(z.as_slice(), params, t);
    let mut nodes = DMatrix::zeros(k + 1, model.dim());
    let mut z = z_start.clone();
    nodes.row_mut(0).copy_from(&z.transpose());
    for i in 0..k {
        let (a, b) = (times[i] * tau, times[i + 1] * tau);
        let sub = ((b - a) / cfg.dt).ceil().max(1.0) as usize;
        let h = (b - a) / sub as f64;
        for j in 0..sub {
            z = rk4_step(&mut f, t_start + a + j as f64 * h, &z, h)?;
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { time: t_start + b });
        }
        nodes.row_mut(i + 1).copy_from(&z.transpose());
    }
    let first = nodes.row(0).into_owned();
    nodes.row_mut(k).copy_from(&first);
    Ok(nodes)
}

/// Seeds a branch: integrate past the transient, read off one period and
/// Newton-correct it. A vanishing or undetectable cycle is reported as
/// [`Error::Collapse`].
pub fn initial_orbit(model: &LatentModel, params: &[f64], active: usize, cfg: &ContinuationConfig) -> Result<Orbit> {
    if params.len() != model.param_dim() {
        return Err(Error::dim("parameter vector", model.param_dim(), params.len()));
    }
    if active >= params.len() {
        return Err(Error::InvalidArgument(format!("no parameter with index {active}")));
    }
    let z0 = match &cfg.z0 {
        Some(z) if z.len() == model.dim() => DVector::from_column_slice(z),
        Some(z) => return Err(Error::dim("initial state", model.dim(), z.len())),
        None => DVector::from_element(model.dim(), 0.1),
    };
    let p = Params::Constant(params);
    let (nodes, tau) = match cfg.mode {
        Mode::Forced => {
            let tau = forced_period(model, params)?;
            let t_settle = (cfg.settle_time / tau).ceil().max(1.0) * tau;
            let settled = integrate_latent(model, &z0, p, 0.0, t_settle, cfg.dt)?;
            let nodes = sample_period(model, &settled.last_latent(), params, t_settle, tau, cfg)?;
            (nodes, tau)
        }
        Mode::Autonomous => {
            let settled = integrate_latent(model, &z0, p, 0.0, cfg.settle_time, cfg.dt)?;
            let window = integrate_latent(model, &settled.last_latent(), p, 0.0, cfg.window_time, cfg.dt)?;
            let w = &window.latent;
            let amp = (0..w.ncols())
                .map(|j| 0.5 * (w.column(j).max() - w.column(j).min()))
                .fold(0.0, f64::max);
            if amp < 1e-8 {
                return Err(Error::Collapse(format!("no cycle: amplitude {amp:.3e}")));
            }
            let means = w.row_mean();
            let var = w.row_variance();
            let k = var.transpose().imax();
            let mk = means[k];
            let mut crossings = Vec::new();
            for i in 0..w.nrows() - 1 {
                let (a, b) = (w[(i, k)] - mk, w[(i + 1, k)] - mk);
                if a < 0.0 && b >= 0.0 {
                    let frac = a / (a - b);
                    crossings.push((i, window.times[i] + frac * (window.times[i + 1] - window.times[i])));
                }
            }
            if crossings.len() < 2 {
                return Err(Error::Collapse("no cycle: too few section crossings".into()));
            }
            let (first, last) = (crossings[0], crossings[crossings.len() - 1]);
            let tau = (last.1 - first.1) / (crossings.len() - 1) as f64;
            let start = w.row(first.0).transpose();
            let nodes = sample_period(model, &start, params, 0.0, tau, cfg)?;
            (nodes, tau)
        }
    };
    let guess = Orbit {
        n_elements: cfg.n_elements,
        degree: cfg.degree,
        mesh: uniform_mesh(cfg.n_elements),
        nodes,
        period: tau,
        params: params.to_vec(),
        active,
        mode: cfg.mode,
    };
    match newton_correct(model, &guess, cfg) {
        Ok((orbit, _)) => {
            if cfg.mode == Mode::Autonomous && orbit.node_amplitude() < cfg.min_amplitude {
                return Err(Error::Collapse("orbit shrank to a point".into()));
            }
            Ok(orbit)
        }
        Err(e @ (Error::SingularJacobian(_) | Error::NewtonFailure { .. })) if cfg.mode == Mode::Autonomous => {
            Err(Error::Collapse(format!("orbit correction failed: {e}")))
        }
        Err(e) => Err(e),
    }
}

/// Eigenvalues of the monodromy matrix, from the variational equations
/// integrated along the collocation interpolant.
pub fn floquet_multipliers(model: &LatentModel, orbit: &Orbit, steps: usize) -> Result<Vec<Complex<f64>>> {
    let n = orbit.dim();
    let steps = steps.max(200);
    let h = 1.0 / steps as f64;
    let tau = orbit.period;
    let mut rhs = |s: f64, phi: &DVector<f64>| -> Result<DVector<f64>> {
        let z = orbit.state_at(s.min(1.0));
        let (jz, _, _) = model.jacobians(z.as_slice(), &orbit.params, s * tau)?;
        let p = DMatrix::from_column_slice(n, n, phi.as_slice());
        Ok(DVector::from_column_slice((jz * p * tau).as_slice()))
    };
    let mut phi = DVector::from_column_slice(DMatrix::<f64>::identity(n, n).as_slice());
    for i in 0..steps {
        phi = rk4_step(&mut rhs, i as f64 * h, &phi, h)?;
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("variational flow".into()));
        }
    }
    let mono = DMatrix::from_column_slice(n, n, phi.as_slice());
    let eig = mono.complex_eigenvalues();
    let mut out: Vec<Complex<f64>> = eig.iter().copied().collect();
    out.sort_by(|a, b| b.norm().total_cmp(&a.norm()));
    Ok(out)
}

/// Multipliers with the trivial one (closest to +1) removed in autonomous mode.
pub fn nontrivial_multipliers(mode: Mode, mut all: Vec<Complex<f64>>) -> Vec<Complex<f64>> {
    if mode == Mode::Autonomous && !all.is_empty() {
        let k = (0..all.len())
            .min_by(|&a, &b| (all[a] - 1.0).norm().total_cmp(&(all[b] - 1.0).norm()))
            .unwrap();
        all.remove(k);
    }
    all
}

pub fn classify(nontrivial: &[Complex<f64>]) -> Stability {
    if nontrivial.iter().all(|m| m.norm() < 1.0 - 1e-6) {
        Stability::Stable
    } else {
        Stability::Unstable
    }
}

#[derive(Debug, Clone)]
pub struct BranchPoint {
    pub orbit: Orbit,
    pub beta: f64,
    pub stability: Stability,
    pub multipliers: Vec<Complex<f64>>,
    pub amplitude: f64,
    pub ds: f64,
    pub residual: f64,
}

impl BranchPoint {
    pub fn multiplier_max_abs(&self) -> f64 {
        self.multipliers.iter().map(|m| m.norm()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub points: Vec<BranchPoint>,
    pub termination: Termination,
    /// indices `i` with a fold between points `i` and `i + 1`
    pub folds: Vec<usize>,
    pub amplitude_convention: &'static str,
}

pub const AMPLITUDE_CONVENTION: &str = "half peak-to-peak over one period";

fn make_point(model: &LatentModel, orbit: Orbit, ds: f64, cfg: &ContinuationConfig) -> Result<BranchPoint> {
    let all = floquet_multipliers(model, &orbit, cfg.floquet_steps)?;
    let multipliers = nontrivial_multipliers(orbit.mode, all);
    let residual = collocation_residual(model, &orbit)?.amax();
    Ok(BranchPoint {
        beta: orbit.beta(),
        stability: classify(&multipliers),
        amplitude: orbit.amplitude(cfg.output),
        multipliers,
        ds,
        residual,
        orbit,
    })
}

fn arc_weights(layout: &Layout) -> DVector<f64> {
    let mut w = DVector::from_element(layout.len, 1.0 / layout.nodes as f64);
    if let Some(t) = layout.tau {
        w[t] = 0.0;
    }
    if let Some(b) = layout.beta {
        w[b] = 1.0;
    }
    w
}

/// Null direction of the `(len−1) × len` Jacobian, normalised in the
/// weighted metric, oriented along `previous`.
fn tangent(jac: &DMatrix<f64>, previous: &DVector<f64>, weights: &DVector<f64>) -> Result<DVector<f64>> {
    let rows = jac.nrows();
    let mut a = jac.clone().insert_row(rows, 0.0);
    a.row_mut(rows).copy_from(&previous.component_mul(weights).transpose());
    let mut rhs = DVector::zeros(rows + 1);
    rhs[rows] = 1.0;
    let t = solve_checked(a, &rhs)?;
    let norm = t.component_mul(&t).dot(weights).sqrt();
    Ok(t / norm)
}

fn centred_nodes(orbit: &Orbit) -> DMatrix<f64> {
    let mean = orbit.nodes.row_mean();
    let mut c = orbit.nodes.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    c
}

/// Follows the family of periodic orbits through `params[active] = start`
/// towards `range.1`, stopping when the parameter leaves `range`.
pub fn continue_branch(
    model: &LatentModel,
    params: &[f64],
    active: usize,
    range: (f64, f64),
    cfg: &ContinuationConfig,
) -> Result<Branch> {
    if !(cfg.ds > 0.0) {
        return Err(Error::InvalidArgument("ds must be positive".into()));
    }
    let (lo, hi) = (range.0.min(range.1), range.0.max(range.1));
    let start = params.get(active).copied().unwrap_or(f64::NAN);
    if !(start >= lo && start <= hi) {
        return Err(Error::InvalidArgument(format!("start {start} outside range [{lo}, {hi}]")));
    }
    let direction = if range.1 >= range.0 { 1.0 } else { -1.0 };
    let seed = initial_orbit(model, params, active, cfg)?;

    let mut points = vec![make_point(model, seed.clone(), 0.0, cfg)?];
    let mut folds = Vec::new();
    let max_amp = |pts: &[BranchPoint]| pts.iter().map(|p| p.orbit.node_amplitude()).fold(0.0, f64::max);

    let mut current = seed;
    let sys0 = System::new(model, &current, &current, true)?;
    let weights = arc_weights(&sys0.layout);
    let mut u = sys0.layout.pack(&current);
    let mut e_beta = DVector::zeros(sys0.layout.len);
    e_beta[sys0.layout.beta.unwrap()] = direction;
    let (_, j0) = sys0.eval(&u, true)?;
    let mut t = tangent(&j0.unwrap(), &e_beta, &weights)?;

    let ds0 = cfg.ds;
    let floor = 1e-6 * ds0;
    let mut ds = ds0;
    let mut fast = 0;
    let termination = loop {
        if points.len() >= cfg.max_points {
            break Termination::PointBudget;
        }
        let sys = System::new(model, &current, &current, true)?;
        let predicted = &u + &t * ds;
        let arc = ArcRecord {
            u: &u,
            tangent: &t,
            weights: &weights,
            ds,
        };
        let attempt = newton(&sys, predicted, Some(&arc), cfg.newton_tol, cfg.max_newton).and_then(|out| {
            let orbit = sys.layout.unpack(&out.u, &current, model)?;
            Ok((out, orbit))
        });
        let (out, orbit) = match attempt {
            Ok(x) => x,
            Err(e) if e.is_numerical() => {
                log::debug!("step {ds:.3e} failed: {e}");
                ds *= 0.5;
                fast = 0;
                if ds < floor {
                    let small = points.last().unwrap().orbit.node_amplitude() < 1e-2 * max_amp(&points);
                    if cfg.mode == Mode::Autonomous && small {
                        break Termination::Collapse;
                    }
                    if points.len() == 1 {
                        return Err(Error::StepFloor { floor });
                    }
                    break Termination::NewtonFailure;
                }
                continue;
            }
            Err(e) => return Err(e),
        };

        if cfg.mode == Mode::Autonomous {
            let flipped = centred_nodes(&orbit).dot(&centred_nodes(&current)) < 0.0;
            let tiny = orbit.node_amplitude() < cfg.min_amplitude;
            let bad_tau = !(orbit.period > TAU_LIMITS.0 && orbit.period < TAU_LIMITS.1);
            if flipped || tiny || bad_tau {
                break Termination::Collapse;
            }
        }

        let beta = orbit.beta();
        if beta < lo || beta > hi {
            // land on the boundary at fixed β
            let edge = if beta < lo { lo } else { hi };
            let frac = (edge - current.beta()) / (beta - current.beta());
            let mut guess = orbit.clone();
            guess.nodes = &current.nodes + (&orbit.nodes - &current.nodes) * frac;
            guess.params[active] = edge;
            if let Mode::Autonomous = guess.mode {
                guess.period = current.period + (orbit.period - current.period) * frac;
            } else {
                guess.period = forced_period(model, &guess.params)?;
            }
            let last = guess.nodes.row(0).into_owned();
            let k = guess.nodes.nrows() - 1;
            guess.nodes.row_mut(k).copy_from(&last);
            if let Ok((edge_orbit, _)) = newton_correct(model, &guess, cfg) {
                points.push(make_point(model, edge_orbit, ds, cfg)?);
            }
            break Termination::RangeEnd;
        }

        let prev_dbeta = points.len().checked_sub(2).map(|i| points[i + 1].beta - points[i].beta);
        let dbeta = beta - current.beta();
        points.push(make_point(model, orbit.clone(), ds, cfg)?);
        if let Some(p) = prev_dbeta {
            if p * dbeta < 0.0 {
                folds.push(points.len() - 2);
                if cfg.max_folds.is_some_and(|m| folds.len() >= m) {
                    break Termination::FoldLimit;
                }
            }
        }

        let jac_sys = out.jacobian.rows(0, out.jacobian.nrows() - 1).into_owned();
        t = tangent(&jac_sys, &t, &weights)?;
        u = out.u;
        current = orbit;
        if out.iterations <= 4 {
            fast += 1;
            if fast >= 3 {
                ds = (ds * 1.3).min(ds0);
                fast = 0;
            }
        } else {
            fast = 0;
        }
    };
    Ok(Branch {
        points,
        termination,
        folds,
        amplitude_convention: AMPLITUDE_CONVENTION,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointSummary {
    pub beta: f64,
    pub period: f64,
    pub amplitude: f64,
    pub stability: Stability,
    pub multiplier_max_abs: f64,
}

/// Physical value of state component `node` at latent state `z`.
pub fn decode_component(model: &TrainedModel, z: &DVector<f64>, node: usize) -> Result<f64> {
    let reduced = model.scaler.invert(&model.decoder.forward(z)?);
    let basis = &model.pod.basis;
    if node >= basis.nrows() {
        return Err(Error::dim("output node", basis.nrows(), node));
    }
    Ok(model.pod.mean[node] + basis.row(node).dot(&reduced.transpose()))
}

/// Per-point physical summaries, with the amplitude taken on full-order
/// state component `node`.
pub fn decode_branch(model: &TrainedModel, branch: &Branch, node: usize) -> Result<Vec<PointSummary>> {
    if branch.points.is_empty() {
        return Err(Error::InvalidArgument("empty branch".into()));
    }
    branch
        .points
        .iter()
        .map(|p| {
            if p.orbit.dim() != model.decoder.input_dim() {
                return Err(Error::dim("latent width", model.decoder.input_dim(), p.orbit.dim()));
            }
            decode_component(model, &p.orbit.nodes.row(0).transpose(), node)?;
            let amp = half_peak_to_peak(
                |s| decode_component(model, &p.orbit.state_at(s), node).unwrap_or(f64::NAN),
                p.orbit.node_count() * 2,
            );
            Ok(PointSummary {
                beta: p.beta,
                period: p.orbit.period,
                amplitude: amp,
                stability: p.stability,
                multiplier_max_abs: p.multiplier_max_abs(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sindy::{build_polynomial_library, CoefficientMatrix, ParamTransform};
    use std::f64::consts::{PI, TAU};

    /// ż₁ = µz₁ − z₂ − z₁(z₁² + z₂²), ż₂ = z₁ + µz₂ − z₂(z₁² + z₂²)
    fn stuart_landau() -> LatentModel {
        let lib = build_polynomial_library(2, 1, 3, false, &[]).unwrap();
        let names = lib.names();
        let mut xi = DMatrix::zeros(lib.len(), 2);
        let mut set = |name: &str, col: usize, v: f64| {
            let k = names.iter().position(|n| n == name).unwrap_or_else(|| panic!("{name}"));
            xi[(k, col)] = v;
        };
        set("z1*b1", 0, 1.0);
        set("z2", 0, -1.0);
        set("z1^3", 0, -1.0);
        set("z1*z2^2", 0, -1.0);
        set("z1", 1, 1.0);
        set("z2*b1", 1, 1.0);
        set("z1^2*z2", 1, -1.0);
        set("z2^3", 1, -1.0);
        LatentModel::new(lib, CoefficientMatrix::fixed(xi), ParamTransform::identity(&["mu"])).unwrap()
    }

    fn rotation() -> LatentModel {
        let lib = build_polynomial_library(2, 1, 1, false, &[]).unwrap();
        let xi = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, -1.0, 0.0, 0.0, 0.0]);
        LatentModel::new(lib, CoefficientMatrix::fixed(xi), ParamTransform::identity(&["mu"])).unwrap()
    }

    fn circle(radius: f64, ne: usize, m: usize, params: Vec<f64>) -> Orbit {
        let k = ne * m;
        let times = node_times(ne, m);
        let nodes = DMatrix::from_fn(k + 1, 2, |i, j| {
            let s = TAU * times[i];
            radius * if j == 0 { s.cos() } else { s.sin() }
        });
        let mut nodes = nodes;
        let first = nodes.row(0).into_owned();
        nodes.row_mut(k).copy_from(&first);
        Orbit {
            n_elements: ne,
            degree: m,
            mesh: uniform_mesh(ne),
            nodes,
            period: TAU,
            params,
            active: 0,
            mode: Mode::Autonomous,
        }
    }

    #[test]
    fn gauss_points() {
        let (x, w) = gauss_legendre(2);
        let r = 0.5 / 3f64.sqrt();
        assert!((x[0] - (0.5 - r)).abs() < 1e-14 && (x[1] - (0.5 + r)).abs() < 1e-14);
        assert!((w[0] - 0.5).abs() < 1e-14);
        let (x, w) = gauss_legendre(4);
        // exact for degree 7
        let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(7)).sum();
        assert!((q - 0.125).abs() < 1e-14);
    }

    #[test]
    fn analytic_circle_residual() {
        let orbit = circle(1.0, 40, 4, vec![0.0]);
        let r = collocation_residual(&rotation(), &orbit).unwrap();
        assert!(r.amax() < 1e-8, "{}", r.amax());
    }

    #[test]
    fn endpoint_mismatch_rejected() {
        let mut orbit = circle(1.0, 10, 4, vec![0.0]);
        orbit.nodes[(40, 0)] += 0.1;
        assert!(matches!(
            collocation_residual(&rotation(), &orbit),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn constant_orbit_forced_zero_residual() {
        let lib = build_polynomial_library(1, 0, 1, false, &[(0, 1)]).unwrap();
        let xi = CoefficientMatrix::fixed(DMatrix::zeros(lib.len(), 1));
        let m = LatentModel::new(lib, xi, ParamTransform::identity(&["F", "w"])).unwrap();
        let orbit = Orbit {
            n_elements: 5,
            degree: 3,
            mesh: uniform_mesh(5),
            nodes: DMatrix::from_element(16, 1, 0.7),
            period: TAU / 2.0,
            params: vec![0.0, 2.0],
            active: 1,
            mode: Mode::Forced,
        };
        assert_eq!(collocation_residual(&m, &orbit).unwrap().amax(), 0.0);
    }

    #[test]
    fn stuart_landau_newton() {
        let model = stuart_landau();
        let mut guess = circle(0.45, 40, 4, vec![0.25]);
        guess.period = 6.0;
        let (orbit, _) = newton_correct(&model, &guess, &ContinuationConfig::default()).unwrap();
        assert!((orbit.amplitude(0) - 0.5).abs() < 1e-8, "{}", orbit.amplitude(0));
        assert!((orbit.period - TAU).abs() < 1e-8);
        let (_, its) = newton_correct(&model, &orbit, &ContinuationConfig::default()).unwrap();
        assert!(its <= 1);
    }

    #[test]
    fn trivial_guess_is_singular() {
        let model = stuart_landau();
        let guess = circle(0.0, 10, 4, vec![0.25]);
        assert!(matches!(
            newton_correct(&model, &guess, &ContinuationConfig::default()),
            Err(Error::SingularJacobian(_))
        ));
    }

    #[test]
    fn floquet_of_stuart_landau() {
        let model = stuart_landau();
        let (orbit, _) = newton_correct(&model, &circle(0.5, 40, 4, vec![0.25]), &ContinuationConfig::default()).unwrap();
        let all = floquet_multipliers(&model, &orbit, 400).unwrap();
        assert!(all.iter().any(|m| (m - 1.0).norm() < 1e-6));
        let nt = nontrivial_multipliers(Mode::Autonomous, all);
        assert_eq!(nt.len(), 1);
        assert!((nt[0].re - (-PI).exp()).abs() < 1e-4 && nt[0].im.abs() < 1e-8);
        assert_eq!(classify(&nt), Stability::Stable);
    }

    #[test]
    fn seeding() {
        let model = stuart_landau();
        let cfg = ContinuationConfig::default();
        let orbit = initial_orbit(&model, &[0.25], 0, &cfg).unwrap();
        assert!((orbit.period - TAU).abs() < 1e-6);
        assert!(matches!(initial_orbit(&model, &[-0.1], 0, &cfg), Err(Error::Collapse(_))));
    }

    #[test]
    fn branch_tracks_sqrt_mu_and_collapses() {
        let model = stuart_landau();
        let cfg = ContinuationConfig {
            ds: 0.02,
            n_elements: 20,
            ..Default::default()
        };
        let branch = continue_branch(&model, &[0.25], 0, (0.25, -0.1), &cfg).unwrap();
        assert_eq!(branch.termination, Termination::Collapse);
        for p in &branch.points {
            assert!((p.amplitude - p.beta.sqrt()).abs() < 1e-6, "{} {}", p.beta, p.amplitude);
            assert!(p.residual < 1e-10);
        }
        let last = branch.points.last().unwrap().beta;
        assert!(last < 0.01, "{last}");
    }

    #[test]
    fn branch_upward_to_range_end() {
        let model = stuart_landau();
        let cfg = ContinuationConfig {
            ds: 0.05,
            n_elements: 20,
            ..Default::default()
        };
        let branch = continue_branch(&model, &[0.1], 0, (0.1, 0.3), &cfg).unwrap();
        assert_eq!(branch.termination, Termination::RangeEnd);
        let last = branch.points.last().unwrap();
        assert!((last.beta - 0.3).abs() < 1e-12);
        assert!(branch.points.windows(2).all(|w| w[1].beta > w[0].beta));
    }

    #[test]
    fn peak_to_peak_refinement() {
        let a = half_peak_to_peak(|s| 0.3 * (TAU * s + 0.123).sin() + 2.0, 16);
        assert!((a - 0.3).abs() < 1e-12);
    }
}
