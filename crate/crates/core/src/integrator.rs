//! Time-marching of the latent system and decoding back to full order.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::sindy::LatentModel;
use crate::trainer::TrainedModel;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// steps × n
    pub latent: DMatrix<f64>,
    /// steps × N
    pub decoded: Option<DMatrix<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_latent(&self) -> DVector<f64> {
        self.latent.row(self.latent.nrows() - 1).transpose()
    }
}

/// Raw parameter values seen by the latent model.
#[derive(Clone, Copy)]
pub enum Params<'a> {
    Constant(&'a [f64]),
    TimeVarying(&'a dyn Fn(f64) -> Vec<f64>),
}

impl Params<'_> {
    fn at(&self, t: f64) -> Vec<f64> {
        match self {
            Params::Constant(p) => p.to_vec(),
            Params::TimeVarying(f) => f(t),
        }
    }
}

/// `z₀ = φ(scale(project(x₀)))`.
pub fn encode_state(model: &TrainedModel, x0: &DVector<f64>) -> Result<DVector<f64>> {
    let reduced = model.pod.project(x0)?;
    model.encoder.forward(&model.scaler.apply(&reduced))
}

/// One classical Runge–Kutta step.
pub fn rk4_step<F>(f: &mut F, t: f64, z: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let k1 = f(t, z)?;
    let k2 = f(t + 0.5 * h, &(z + &k1 * (0.5 * h)))?;
    let k3 = f(t + 0.5 * h, &(z + &k2 * (0.5 * h)))?;
    let k4 = f(t + h, &(z + &k3 * h))?;
    Ok(z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

/// Fixed-step RK4 of `ż = f(t, z)` from `t0` to `t_end`; the last step is
/// shortened to land on `t_end`.
pub fn integrate<F>(mut f: F, z0: &DVector<f64>, t0: f64, t_end: f64, dt: f64) -> Result<Trajectory>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if !(t_end >= t0) || !t_end.is_finite() || !t0.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "t_end ({t_end}) must not precede t0 ({t0})"
        )));
    }
    let span = t_end - t0;
    let mut full = (span / dt).floor() as usize;
    // a remainder within rounding of a whole step counts as landing exactly
    if span - full as f64 * dt > dt * (1.0 - 1e-9) {
        full += 1;
    }
    let mut times: Vec<f64> = (0..=full).map(|k| t0 + k as f64 * dt).collect();
    if let Some(last) = times.last_mut() {
        if (t_end - *last).abs() <= 1e-9 * dt {
            *last = t_end;
        } else if *last > t_end {
            *last = t_end;
        } else {
            times.push(t_end);
        }
    }
    let n = z0.len();
    let mut latent = DMatrix::zeros(times.len(), n);
    latent.row_mut(0).copy_from(&z0.transpose());
    let mut z = z0.clone();
    for k in 1..times.len() {
        let h = times[k] - times[k - 1];
        z = rk4_step(&mut f, times[k - 1], &z, h)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { time: times[k] });
        }
        latent.row_mut(k).copy_from(&z.transpose());
    }
    Ok(Trajectory {
        times,
        latent,
        decoded: None,
    })
}

/// Integrates the identified latent system.
pub fn integrate_latent(
    model: &LatentModel,
    z0: &DVector<f64>,
    params: Params<'_>,
    t0: f64,
    t_end: f64,
    dt: f64,
) -> Result<Trajectory> {
    if z0.len() != model.dim() {
        return Err(Error::dim("latent state", model.dim(), z0.len()));
    }
    if let Params::Constant(p) = params {
        if p.len() != model.param_dim() {
            return Err(Error::dim("parameter vector", model.param_dim(), p.len()));
        }
    }
    integrate(
        |t, z| {
            let raw = params.at(t);
            model.rhs(z.as_slice(), &raw, t).map_err(|e| match e {
                Error::NonFinite(_) => Error::BlowUp { time: t },
                e => e,
            })
        },
        z0,
        t0,
        t_end,
        dt,
    )
}

/// Fills `decoded` with `reconstruct(unscale(ψ(z)))` row by row.
pub fn decode_trajectory(model: &TrainedModel, mut traj: Trajectory) -> Result<Trajectory> {
    if traj.latent.ncols() != model.decoder.input_dim() {
        return Err(Error::dim("latent width", model.decoder.input_dim(), traj.latent.ncols()));
    }
    let reduced = model.decoder.forward_rows(&traj.latent)?;
    let mut unscaled = DMatrix::zeros(reduced.nrows(), reduced.ncols());
    for i in 0..reduced.nrows() {
        let row = model.scaler.invert(&reduced.row(i).transpose());
        unscaled.row_mut(i).copy_from(&row.transpose());
    }
    traj.decoded = Some(model.pod.reconstruct_rows(&unscaled)?);
    Ok(traj)
}

/// Encode, integrate and decode.
pub fn simulate(
    model: &TrainedModel,
    x0: &DVector<f64>,
    params: Params<'_>,
    t0: f64,
    t_end: f64,
    dt: f64,
) -> Result<Trajectory> {
    let z0 = encode_state(model, x0)?;
    let traj = integrate_latent(&model.latent, &z0, params, t0, t_end, dt)?;
    decode_trajectory(model, traj)
}
