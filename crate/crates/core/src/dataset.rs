//! Snapshot data: storage, binary I/O, numerical differentiation, feature
//! scaling and train/test partitioning.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"AESD";
const FORMAT_VERSION: u32 = 1;
const FLAG_DERIVATIVES: u64 = 1;
const FLAG_PARAMS: u64 = 1 << 1;

/// Time histories of one or more parameter instances, stacked row-wise.
///
/// Row `i` holds the full state at `times[i]` for instance `instance_ids[i]`.
/// Rows of one instance are contiguous and ordered in time.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    pub states: DMatrix<f64>,
    pub derivatives: Option<DMatrix<f64>>,
    /// `rows × p`; `p` may be zero.
    pub params: DMatrix<f64>,
    pub times: Vec<f64>,
    pub instance_ids: Vec<usize>,
}

impl SnapshotSet {
    /// Builds a set and checks all structural invariants.
    pub fn new(
        states: DMatrix<f64>,
        derivatives: Option<DMatrix<f64>>,
        params: DMatrix<f64>,
        times: Vec<f64>,
        instance_ids: Vec<usize>,
    ) -> Result<Self> {
        let set = SnapshotSet {
            states,
            derivatives,
            params,
            times,
            instance_ids,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn rows(&self) -> usize {
        self.states.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn param_dim(&self) -> usize {
        self.params.ncols()
    }

    pub fn has_derivatives(&self) -> bool {
        self.derivatives.is_some()
    }

    /// Contiguous row ranges, one per instance, in storage order.
    pub fn instance_ranges(&self) -> Vec<(usize, Range<usize>)> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.instance_ids.len() {
            if i == self.instance_ids.len() || self.instance_ids[i] != self.instance_ids[start] {
                out.push((self.instance_ids[start], start..i));
                start = i;
            }
        }
        out
    }

    pub fn instance_count(&self) -> usize {
        self.instance_ranges().len()
    }

    /// Time step of the instance occupying `range`.
    pub fn time_step(&self, range: &Range<usize>) -> Option<f64> {
        if range.len() < 2 {
            return None;
        }
        Some((self.times[range.end - 1] - self.times[range.start]) / (range.len() - 1) as f64)
    }

    fn validate(&self) -> Result<()> {
        let rows = self.states.nrows();
        if rows == 0 {
            return Err(Error::InvalidData("empty dataset".into()));
        }
        if let Some(d) = &self.derivatives {
            if d.shape() != self.states.shape() {
                return Err(Error::InvalidData(format!(
                    "derivative block {:?} does not match states {:?}",
                    d.shape(),
                    self.states.shape()
                )));
            }
        }
        if self.params.nrows() != rows {
            return Err(Error::dim("parameter rows", rows, self.params.nrows()));
        }
        if self.times.len() != rows {
            return Err(Error::dim("time rows", rows, self.times.len()));
        }
        if self.instance_ids.len() != rows {
            return Err(Error::dim("instance id rows", rows, self.instance_ids.len()));
        }
        let ranges = self.instance_ranges();
        let mut seen = std::collections::HashSet::new();
        for (id, range) in &ranges {
            if !seen.insert(*id) {
                return Err(Error::InvalidData(format!(
                    "rows of instance {id} are not contiguous"
                )));
            }
            let t = &self.times[range.clone()];
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!(
                    "non-finite time in instance {id}"
                )));
            }
            if t.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::InvalidData(format!(
                    "non-monotone time grid in instance {id}"
                )));
            }
            if let Some(dt) = self.time_step(range) {
                // Rounding-aware: grids built as t0 + k*dt carry ~eps*|t| absolute error.
                let scale = t.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let tol = 1e-12 * dt + 4.0 * f64::EPSILON * scale;
                if t.windows(2).any(|w| ((w[1] - w[0]) - dt).abs() > tol) {
                    return Err(Error::InvalidData(format!(
                        "non-uniform time step in instance {id}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Copies the selected rows (in the given order) into a new set.
    pub fn select_rows(&self, rows: &[usize]) -> SnapshotSet {
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)]);
        SnapshotSet {
            states: pick(&self.states),
            derivatives: self.derivatives.as_ref().map(pick),
            params: pick(&self.params),
            times: rows.iter().map(|&r| self.times[r]).collect(),
            instance_ids: rows.iter().map(|&r| self.instance_ids[r]).collect(),
        }
    }
}

/// Fixed-size header of the binary snapshot format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SnapshotHeader {
    pub n_instances: u64,
    pub n_times: u64,
    pub state_dim: u64,
    pub param_dim: u64,
    pub flags: u64,
}

impl SnapshotHeader {
    pub const BYTES: usize = 4 + 4 + 5 * 8;

    pub fn rows(&self) -> u64 {
        self.n_instances * self.n_times
    }

    pub fn has_derivatives(&self) -> bool {
        self.flags & FLAG_DERIVATIVES != 0
    }

    pub fn has_params(&self) -> bool {
        self.flags & FLAG_PARAMS != 0
    }

    /// Number of payload bytes implied by the header.
    pub fn payload_bytes(&self) -> u64 {
        let rows = self.rows();
        let mut words = rows + rows * self.state_dim;
        if self.has_derivatives() {
            words += rows * self.state_dim;
        }
        if self.has_params() {
            words += rows * self.param_dim;
        }
        words += rows;
        words * 8
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let mut v = [0u8; 4];
        r.read_exact(&mut v)
            .map_err(|_| Error::Format("truncated header".into()))?;
        let version = u32::from_le_bytes(v);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut fields = [0u64; 5];
        for f in fields.iter_mut() {
            *f = read_u64(r).map_err(|_| Error::Format("truncated header".into()))?;
        }
        Ok(SnapshotHeader {
            n_instances: fields[0],
            n_times: fields[1],
            state_dim: fields[2],
            param_dim: fields[3],
            flags: fields[4],
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for f in [
            self.n_instances,
            self.n_times,
            self.state_dim,
            self.param_dim,
            self.flags,
        ] {
            w.write_all(&f.to_le_bytes())?;
        }
        Ok(())
    }
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64_block(r: &mut impl Read, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let mut buf = vec![0u8; rows * cols * 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("payload shorter than header declares".into()))?;
    let values: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

fn write_f64_block(w: &mut impl Write, m: &DMatrix<f64>) -> Result<()> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a snapshot file. The `.meta.json` sidecar is never consulted.
pub fn load_snapshots(path: impl AsRef<Path>) -> Result<SnapshotSet> {
    let mut r = BufReader::new(File::open(path.as_ref())?);
    let header = SnapshotHeader::read_from(&mut r)?;
    if header.rows() == 0 {
        return Err(Error::InvalidData("empty dataset".into()));
    }
    let rows = usize::try_from(header.rows())
        .map_err(|_| Error::Format("row count overflows".into()))?;
    let n = header.state_dim as usize;
    let p = header.param_dim as usize;
    let times = read_f64_block(&mut r, 1, rows)?.as_slice().to_vec();
    let states = read_f64_block(&mut r, rows, n)?;
    let derivatives = if header.has_derivatives() {
        Some(read_f64_block(&mut r, rows, n)?)
    } else {
        None
    };
    let params = if header.has_params() {
        read_f64_block(&mut r, rows, p)?
    } else {
        DMatrix::zeros(rows, 0)
    };
    let mut instance_ids = Vec::with_capacity(rows);
    for _ in 0..rows {
        let id = read_u64(&mut r)
            .map_err(|_| Error::Format("payload shorter than header declares".into()))?;
        instance_ids.push(id as usize);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("payload longer than header declares".into()));
    }
    let set = SnapshotSet::new(states, derivatives, params, times, instance_ids)?;
    let ranges = set.instance_ranges();
    if ranges.len() as u64 != header.n_instances
        || ranges.iter().any(|(_, r)| r.len() as u64 != header.n_times)
    {
        return Err(Error::Format(
            "instance layout disagrees with header counts".into(),
        ));
    }
    Ok(set)
}

/// Writes a snapshot file. Every instance must have the same number of rows.
pub fn save_snapshots(set: &SnapshotSet, path: impl AsRef<Path>) -> Result<()> {
    let ranges = set.instance_ranges();
    let n_times = ranges[0].1.len();
    if ranges.iter().any(|(_, r)| r.len() != n_times) {
        return Err(Error::InvalidData(
            "instances of unequal length cannot be stored".into(),
        ));
    }
    let mut flags = 0;
    if set.derivatives.is_some() {
        flags |= FLAG_DERIVATIVES;
    }
    if set.param_dim() > 0 {
        flags |= FLAG_PARAMS;
    }
    let header = SnapshotHeader {
        n_instances: ranges.len() as u64,
        n_times: n_times as u64,
        state_dim: set.state_dim() as u64,
        param_dim: set.param_dim() as u64,
        flags,
    };
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    header.write_to(&mut w)?;
    for t in &set.times {
        w.write_all(&t.to_le_bytes())?;
    }
    write_f64_block(&mut w, &set.states)?;
    if let Some(d) = &set.derivatives {
        write_f64_block(&mut w, d)?;
    }
    if set.param_dim() > 0 {
        write_f64_block(&mut w, &set.params)?;
    }
    for &id in &set.instance_ids {
        w.write_all(&(id as u64).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Path of the optional provenance sidecar for a snapshot file.
pub fn sidecar_path(path: impl AsRef<Path>) -> std::path::PathBuf {
    path.as_ref().with_extension("meta.json")
}

pub fn write_sidecar(path: impl AsRef<Path>, meta: &serde_json::Value) -> Result<()> {
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

/// Second-order finite differences along time, computed per instance.
pub fn finite_difference_derivatives(set: &SnapshotSet) -> Result<SnapshotSet> {
    if set.derivatives.is_some() {
        return Err(Error::InvalidArgument(
            "derivatives already present".into(),
        ));
    }
    let mut d = DMatrix::zeros(set.rows(), set.state_dim());
    for (id, range) in set.instance_ranges() {
        let len = range.len();
        if len < 3 {
            return Err(Error::InvalidData(format!(
                "instance {id} has {len} time points, need at least 3"
            )));
        }
        let dt = set.time_step(&range).unwrap();
        let x = |k: usize| set.states.row(range.start + k);
        for k in 0..len {
            let row = if k == 0 {
                (x(0) * -3.0 + x(1) * 4.0 - x(2)) / (2.0 * dt)
            } else if k == len - 1 {
                (x(k) * 3.0 - x(k - 1) * 4.0 + x(k - 2)) / (2.0 * dt)
            } else {
                (x(k + 1) - x(k - 1)) / (2.0 * dt)
            };
            d.row_mut(range.start + k).copy_from(&row);
        }
    }
    let mut out = set.clone();
    out.derivatives = Some(d);
    Ok(out)
}

/// How feature columns are normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleMode {
    /// Divide each column by its own maximum absolute value.
    PerFeatureAbsmax,
    /// Weight column `i` by the square root of singular value `i`, then
    /// divide everything by the global maximum absolute value.
    SqrtSingularValue,
    None,
}

/// Affine per-feature normalisation `(x - shift) / factor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mode: ScaleMode,
    pub factors: Vec<f64>,
    pub shift: Vec<f64>,
}

impl Scaler {
    pub fn identity(dim: usize) -> Self {
        Scaler {
            mode: ScaleMode::None,
            factors: vec![1.0; dim],
            shift: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.factors.len()
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| (x[i] - self.shift[i]) / self.factors[i])
    }

    pub fn invert(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| x[i] * self.factors[i] + self.shift[i])
    }

    /// Time derivatives scale without the shift.
    pub fn apply_rate(&self, dx: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(dx.len(), |i, _| dx[i] / self.factors[i])
    }

    pub fn invert_rate(&self, dx: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(dx.len(), |i, _| dx[i] * self.factors[i])
    }

    /// Row-wise `apply` on a whole feature matrix.
    pub fn apply_rows(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
            (m[(i, j)] - self.shift[j]) / self.factors[j]
        })
    }

    pub fn apply_rate_rows(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] / self.factors[j])
    }
}

/// Fits a [`Scaler`] to the columns of `features`.
///
/// All-zero columns get factor 1. With `center`, the column means become
/// the shift and the factors are computed on the centred data.
pub fn fit_scaler(
    features: &DMatrix<f64>,
    mode: ScaleMode,
    singular_values: Option<&[f64]>,
    center: bool,
) -> Result<Scaler> {
    let cols = features.ncols();
    let rows = features.nrows();
    let shift: Vec<f64> = if center && rows > 0 {
        (0..cols).map(|j| features.column(j).mean()).collect()
    } else {
        vec![0.0; cols]
    };
    let col_absmax = |j: usize| {
        features
            .column(j)
            .iter()
            .fold(0.0f64, |m, v| m.max((v - shift[j]).abs()))
    };
    let factors = match mode {
        ScaleMode::None => vec![1.0; cols],
        ScaleMode::PerFeatureAbsmax => (0..cols)
            .map(|j| {
                let m = col_absmax(j);
                if m > 0.0 {
                    m
                } else {
                    1.0
                }
            })
            .collect(),
        ScaleMode::SqrtSingularValue => {
            let sv = singular_values.ok_or_else(|| {
                Error::InvalidArgument("sqrt-singular-value scaling needs singular values".into())
            })?;
            if sv.len() != cols {
                return Err(Error::dim("singular values", cols, sv.len()));
            }
            let weights: Vec<f64> = sv.iter().map(|s| s.max(0.0).sqrt()).collect();
            let global = (0..cols).fold(0.0f64, |m, j| m.max(weights[j] * col_absmax(j)));
            (0..cols)
                .map(|j| {
                    if weights[j] > 0.0 && global > 0.0 {
                        global / weights[j]
                    } else {
                        1.0
                    }
                })
                .collect()
        }
    };
    Ok(Scaler {
        mode,
        factors,
        shift,
    })
}

/// Splits a set into (train, test) by instance id, preserving row order.
pub fn split_by_instance(
    set: &SnapshotSet,
    test_ids: &[usize],
) -> Result<(SnapshotSet, Option<SnapshotSet>)> {
    let ranges = set.instance_ranges();
    for id in test_ids {
        if !ranges.iter().any(|(i, _)| i == id) {
            return Err(Error::InvalidArgument(format!("unknown instance id {id}")));
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (id, range) in &ranges {
        if test_ids.contains(id) {
            test.extend(range.clone());
        } else {
            train.extend(range.clone());
        }
    }
    if train.is_empty() {
        return Err(Error::InvalidArgument(
            "test ids cover every instance; training set would be empty".into(),
        ));
    }
    let test = (!test.is_empty()).then(|| set.select_rows(&test));
    Ok((set.select_rows(&train), test))
}
