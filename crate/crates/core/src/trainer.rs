//! Joint training of encoder, decoder and latent coefficients, and the
//! frozen-autoencoder fine-tuning of the coefficients.
//!
//! The loss over a batch of `B` rows of scaled POD coordinates `x̃`, their
//! time derivatives `x̃̇`, library parameters `β` and times `t` is
//!
//! ```text
//! ‖x̃ − ψ(φ(x̃))‖²/B                                  autoencoder
//! + λ₁‖ż − Θ(z, β, t)Ξ‖²/B + λ₂‖Ξ‖₁                   sparse regression
//! + λ₃‖x̃̇ − ∇ψ(z)·Θ(z, β, t)Ξ‖²/B                      consistency
//! ```
//!
//! with `z = φ(x̃)` and `ż = ∇φ(x̃)·x̃̇`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{fit_scaler, ScaleMode, Scaler, SnapshotSet};
use crate::error::{Error, Result};
use crate::neuralnet::{adam_step, Activation, AdamState, DenseNetwork};
use crate::pod::{compute_pod, compute_pod_blocks, PodBasis};
use crate::sindy::{
    build_polynomial_library, CoefficientMatrix, FeatureLibrary, HarmonicPair, LatentModel,
    ParamTransform,
};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PodConfig {
    pub n_pod: usize,
    pub center: bool,
    /// Optional separate-field blocks as `(start, end, n_pod)` column ranges.
    pub blocks: Option<Vec<(usize, usize, usize)>>,
}

impl Default for PodConfig {
    fn default() -> Self {
        PodConfig {
            n_pod: 8,
            center: false,
            blocks: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LibraryConfig {
    pub max_degree: u32,
    pub include_constant: bool,
    /// Number of leading parameters that enter the monomials.
    pub poly_params: usize,
    pub harmonic_pairs: Vec<HarmonicPair>,
}

impl Default for LibraryConfig {
    fn default() -> Self {
        LibraryConfig {
            max_degree: 3,
            include_constant: false,
            poly_params: 0,
            harmonic_pairs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FineTuneSolver {
    /// Cyclic coordinate descent on the (convex) frozen-autoencoder problem.
    CoordinateDescent,
    /// Mini-batch ADAM, as in joint training.
    Adam,
}

/// Hyperparameters of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub learning_rate: f64,
    /// Learning rate of the last joint epoch as a fraction of the first;
    /// the rate decays geometrically in between. 1 keeps it constant.
    pub final_lr_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub fine_tune_epochs: usize,
    pub fine_tune_learning_rate: f64,
    pub fine_tune_solver: FineTuneSolver,
    /// Threshold applied to Ξ before fine-tuning; 0 disables it.
    pub threshold: f64,
    pub seed: u64,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub pod: PodConfig,
    pub scaling: ScaleMode,
    pub library: LibraryConfig,
    /// `(feature row, latent column, value)` entries of Ξ held fixed.
    pub constraints: Vec<(usize, usize, f64)>,
    /// Raw-to-library parameter map; identity over the data's parameters when absent.
    pub param_transform: Option<ParamTransform>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 0.1,
            lambda2: 1e-3,
            lambda3: 1e-3,
            learning_rate: 5e-4,
            final_lr_fraction: 0.01,
            batch_size: 64,
            epochs: 200,
            fine_tune_epochs: 2000,
            fine_tune_learning_rate: 1e-3,
            fine_tune_solver: FineTuneSolver::CoordinateDescent,
            threshold: 0.0,
            seed: 0,
            latent_dim: 2,
            encoder_hidden: vec![64, 32, 16],
            activation: Activation::Tanh,
            pod: PodConfig::default(),
            scaling: ScaleMode::PerFeatureAbsmax,
            library: LibraryConfig::default(),
            constraints: Vec::new(),
            param_transform: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and ≥ 0")));
            }
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "final_lr_fraction must lie in (0, 1], got {}",
                self.final_lr_fraction
            )));
        }
        if !(self.learning_rate > 0.0) || !(self.fine_tune_learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::InvalidArgument("latent_dim must be positive".into()));
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::InvalidArgument("threshold must be ≥ 0".into()));
        }
        Ok(())
    }

    /// Deviations from the recommended weighting regime
    /// (`λ₁ < 1`, `λ₁ ≈ 100·λ₂`, `λ₁ ≈ 100·λ₃`). Advisory only.
    pub fn regime_warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.lambda1 >= 1.0 {
            out.push(format!("lambda1 = {} is not below 1", self.lambda1));
        }
        for (name, v) in [("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            let ratio = self.lambda1 / v;
            if !(10.0..=1000.0).contains(&ratio) {
                out.push(format!(
                    "lambda1/{name} = {ratio:.3e}; about 100 is recommended"
                ));
            }
        }
        out
    }

    fn decoder_hidden(&self) -> Vec<usize> {
        self.encoder_hidden.iter().rev().copied().collect()
    }
}

/// Components of the joint loss, each averaged per batch row.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub ae: f64,
    pub sindy: f64,
    pub l1: f64,
    pub consistency: f64,
}

impl LossTerms {
    fn add_scaled(&mut self, other: &LossTerms, w: f64) {
        self.total += w * other.total;
        self.ae += w * other.ae;
        self.sindy += w * other.sindy;
        self.l1 += w * other.l1;
        self.consistency += w * other.consistency;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Joint,
    FineTune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: usize,
    pub loss: LossTerms,
}

/// The assembled offline model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format_version: u32,
    pub pod: PodBasis,
    pub scaler: Scaler,
    pub encoder: DenseNetwork,
    pub decoder: DenseNetwork,
    #[serde(flatten)]
    pub latent: LatentModel,
    pub train_log: Vec<EpochLog>,
    pub config: TrainConfig,
}

impl TrainedModel {
    pub fn assemble(
        pod: PodBasis,
        scaler: Scaler,
        encoder: DenseNetwork,
        decoder: DenseNetwork,
        latent: LatentModel,
        config: TrainConfig,
    ) -> Result<Self> {
        let n = latent.dim();
        if encoder.output_dim() != n || decoder.input_dim() != n {
            return Err(Error::dim("latent width", n, encoder.output_dim()));
        }
        if encoder.input_dim() != pod.reduced_dim() || decoder.output_dim() != pod.reduced_dim() {
            return Err(Error::dim("reduced width", pod.reduced_dim(), encoder.input_dim()));
        }
        if scaler.dim() != pod.reduced_dim() {
            return Err(Error::dim("scaler width", pod.reduced_dim(), scaler.dim()));
        }
        Ok(TrainedModel {
            format_version: MODEL_FORMAT_VERSION,
            pod,
            scaler,
            encoder,
            decoder,
            latent,
            train_log: Vec::new(),
            config,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent.dim()
    }

    /// Flat trainable parameters: encoder, decoder, then trainable Ξ entries.
    pub fn parameters(&self) -> Vec<f64> {
        let mut p = Vec::new();
        self.encoder.flatten_into(&mut p);
        self.decoder.flatten_into(&mut p);
        p.extend(self.latent.xi.trainable_values());
        p
    }

    pub fn set_parameters(&mut self, p: &[f64]) {
        let mut k = self.encoder.assign_from(p);
        k += self.decoder.assign_from(&p[k..]);
        self.latent.xi.assign_trainable(&p[k..]);
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: TrainedModel = serde_json::from_str(s)?;
        if m.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::InvalidData(format!(
                "unsupported model format version {}",
                m.format_version
            )));
        }
        m.latent.library.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Training rows in the coordinates the networks see.
#[derive(Debug, Clone)]
pub struct Batch {
    /// scaled POD coordinates, `B × N_POD`
    pub x: DMatrix<f64>,
    pub dx: DMatrix<f64>,
    /// library parameters, `B × param_dim`
    pub beta: DMatrix<f64>,
    pub t: Vec<f64>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn select(&self, rows: &[usize]) -> Batch {
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)]);
        Batch {
            x: pick(&self.x),
            dx: pick(&self.dx),
            beta: pick(&self.beta),
            t: rows.iter().map(|&r| self.t[r]).collect(),
        }
    }
}

/// Reduces and scales a snapshot set with an existing POD basis and scaler.
pub fn prepare_batch(model: &TrainedModel, data: &SnapshotSet) -> Result<Batch> {
    let d = data
        .derivatives
        .as_ref()
        .ok_or_else(|| Error::InvalidData("training data has no derivatives".into()))?;
    let x = model.scaler.apply_rows(&model.pod.project_rows(&data.states)?);
    let dx = model.scaler.apply_rate_rows(&model.pod.project_rate_rows(d)?);
    let transform = &model.latent.transform;
    if data.param_dim() != transform.dim() {
        return Err(Error::dim("data parameters", transform.dim(), data.param_dim()));
    }
    let mut beta = DMatrix::zeros(data.rows(), transform.dim());
    for i in 0..data.rows() {
        let raw: Vec<f64> = data.params.row(i).iter().copied().collect();
        let b = transform.apply(&raw)?;
        for (j, v) in b.into_iter().enumerate() {
            beta[(i, j)] = v;
        }
    }
    Ok(Batch {
        x,
        dx,
        beta,
        t: data.times.clone(),
    })
}

fn library_rows(lib: &FeatureLibrary, z: &DMatrix<f64>, batch: &Batch) -> DMatrix<f64> {
    let (b, n) = z.shape();
    let mut theta = DMatrix::zeros(b, lib.len());
    let mut zrow = vec![0.0; n];
    let mut brow = vec![0.0; batch.beta.ncols()];
    let mut out = vec![0.0; lib.len()];
    for i in 0..b {
        for j in 0..n {
            zrow[j] = z[(i, j)];
        }
        for j in 0..brow.len() {
            brow[j] = batch.beta[(i, j)];
        }
        lib.evaluate_into(&zrow, &brow, batch.t[i], &mut out);
        for (k, v) in out.iter().enumerate() {
            theta[(i, k)] = *v;
        }
    }
    theta
}

fn first_non_finite_row(m: &DMatrix<f64>) -> Option<usize> {
    (0..m.nrows()).find(|&i| m.row(i).iter().any(|v| !v.is_finite()))
}

/// Loss terms on a batch.
pub fn joint_loss(model: &TrainedModel, batch: &Batch, cfg: &TrainConfig) -> Result<LossTerms> {
    Ok(joint_loss_and_gradient(model, batch, cfg, false)?.0)
}

/// Loss terms and (optionally) their gradient with respect to
/// [`TrainedModel::parameters`].
pub fn joint_loss_and_gradient(
    model: &TrainedModel,
    batch: &Batch,
    cfg: &TrainConfig,
    with_gradient: bool,
) -> Result<(LossTerms, Vec<f64>)> {
    let b = batch.rows();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if batch.x.ncols() != model.encoder.input_dim() {
        return Err(Error::dim("batch width", model.encoder.input_dim(), batch.x.ncols()));
    }
    let inv_b = 1.0 / b as f64;
    let lib = &model.latent.library;
    let xi = &model.latent.xi.values;

    let enc = model.encoder.forward_tangent_rows(&batch.x, &batch.dx)?;
    if let Some(row) = first_non_finite_row(&enc.output) {
        return Err(Error::NonFinite(format!("encoder activation at batch row {row}")));
    }
    let z = &enc.output;
    let theta = library_rows(lib, z, batch);
    let f = &theta * xi;
    let dec = model.decoder.forward_tangent_rows(z, &f)?;
    if let Some(row) = first_non_finite_row(&dec.output).or(first_non_finite_row(&dec.tangent)) {
        return Err(Error::NonFinite(format!("decoder activation at batch row {row}")));
    }

    let r_ae = &batch.x - &dec.output;
    let r_sindy = &enc.tangent - &f;
    let r_cons = &batch.dx - &dec.tangent;
    let ae = r_ae.norm_squared() * inv_b;
    let sindy = cfg.lambda1 * r_sindy.norm_squared() * inv_b;
    let consistency = cfg.lambda3 * r_cons.norm_squared() * inv_b;
    let l1 = cfg.lambda2 * model.latent.xi.l1_trainable();
    let terms = LossTerms {
        total: ae + sindy + l1 + consistency,
        ae,
        sindy,
        l1,
        consistency,
    };
    if !terms.total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    if !with_gradient {
        return Ok((terms, Vec::new()));
    }

    let g_out = &r_ae * (-2.0 * inv_b);
    let g_tan = &r_cons * (-2.0 * cfg.lambda3 * inv_b);
    let mut dec_grads = model.decoder.zero_grads();
    let (mut g_z, g_f_dec) = model.decoder.backward_tangent_rows(&dec, g_out, g_tan, &mut dec_grads);
    let g_f = g_f_dec - &r_sindy * (2.0 * cfg.lambda1 * inv_b);
    let g_zdot = &r_sindy * (2.0 * cfg.lambda1 * inv_b);

    // ∂f/∂z = Ξᵀ ∂Θ/∂z row by row
    let n = model.latent_dim();
    let mut dtheta = DMatrix::zeros(lib.len(), n);
    let mut zrow = vec![0.0; n];
    let mut brow = vec![0.0; batch.beta.ncols()];
    for i in 0..b {
        for j in 0..n {
            zrow[j] = z[(i, j)];
        }
        for j in 0..brow.len() {
            brow[j] = batch.beta[(i, j)];
        }
        lib.feature_jacobians_into(&zrow, &brow, batch.t[i], &mut dtheta, None);
        let w = xi * g_f.row(i).transpose();
        let gz = dtheta.tr_mul(&w);
        for j in 0..n {
            g_z[(i, j)] += gz[j];
        }
    }

    let mut enc_grads = model.encoder.zero_grads();
    model.encoder.backward_tangent_rows(&enc, g_z, g_zdot, &mut enc_grads);

    let mut g_xi = theta.tr_mul(&g_f);
    let xi_mat = &model.latent.xi;
    for k in 0..g_xi.len() {
        // subgradient of |ξ| taken as 0 at ξ = 0
        let v = xi_mat.values[k];
        if v != 0.0 {
            g_xi[k] += cfg.lambda2 * v.signum();
        }
    }

    let mut grad = Vec::with_capacity(model.encoder.parameter_count() + model.decoder.parameter_count());
    enc_grads.flatten_into(&mut grad);
    dec_grads.flatten_into(&mut grad);
    grad.extend(
        g_xi.iter()
            .zip(xi_mat.trainable_mask.iter())
            .filter_map(|(g, m)| m.then_some(*g)),
    );
    Ok((terms, grad))
}

/// Untrained model for `data`: POD, scaler, Glorot networks and a zero Ξ
/// carrying the configured constraints.
pub fn initialize_model(data: &SnapshotSet, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    let pod = match &cfg.pod.blocks {
        Some(blocks) => {
            let ranges: Vec<_> = blocks.iter().map(|&(a, b, _)| a..b).collect();
            let sizes: Vec<_> = blocks.iter().map(|&(_, _, k)| k).collect();
            compute_pod_blocks(&data.states, &ranges, &sizes, cfg.pod.center)?
        }
        None => compute_pod(&data.states, cfg.pod.n_pod, cfg.pod.center)?,
    };
    let reduced = pod.project_rows(&data.states)?;
    let scaler = fit_scaler(
        &reduced,
        cfg.scaling,
        Some(&pod.singular_values),
        cfg.pod.center,
    )?;

    let d = pod.reduced_dim();
    let n = cfg.latent_dim;
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
    let enc_seed = rand::Rng::random::<u64>(&mut seeds);
    let dec_seed = rand::Rng::random::<u64>(&mut seeds);
    let enc_sizes: Vec<usize> = std::iter::once(d)
        .chain(cfg.encoder_hidden.iter().copied())
        .chain(std::iter::once(n))
        .collect();
    let dec_sizes: Vec<usize> = std::iter::once(n)
        .chain(cfg.decoder_hidden())
        .chain(std::iter::once(d))
        .collect();
    let encoder = DenseNetwork::glorot(&enc_sizes, cfg.activation, enc_seed)?;
    let decoder = DenseNetwork::glorot(&dec_sizes, cfg.activation, dec_seed)?;

    let library = build_polynomial_library(
        n,
        cfg.library.poly_params,
        cfg.library.max_degree,
        cfg.library.include_constant,
        &cfg.library.harmonic_pairs,
    )?;
    let transform = match &cfg.param_transform {
        Some(t) => t.clone(),
        None => {
            let names: Vec<String> = (1..=data.param_dim()).map(|i| format!("b{i}")).collect();
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            ParamTransform::identity(&refs)
        }
    };
    if transform.dim() != data.param_dim() {
        return Err(Error::dim("parameter transform", data.param_dim(), transform.dim()));
    }
    let xi = CoefficientMatrix::zeros(library.len(), n).constrain(&cfg.constraints)?;
    let latent = LatentModel::new(library, xi, transform)?;
    TrainedModel::assemble(pod, scaler, encoder, decoder, latent, cfg.clone())
}

/// Joint training followed by fine-tuning of Ξ with the autoencoder frozen.
pub fn train(data: &SnapshotSet, cfg: &TrainConfig) -> Result<TrainedModel> {
    for w in cfg.regime_warnings() {
        log::warn!("{w}");
    }
    let mut model = initialize_model(data, cfg)?;
    let batch = prepare_batch(&model, data)?;
    joint_epochs(&mut model, &batch, cfg)?;
    if cfg.epochs > 0 {
        fine_tune_on_batch(&mut model, &batch, cfg)?;
    }
    Ok(model)
}

fn joint_epochs(model: &mut TrainedModel, batch: &Batch, cfg: &TrainConfig) -> Result<()> {
    if cfg.epochs == 0 {
        return Ok(());
    }
    let mut params = model.parameters();
    let mut adam = AdamState::new(params.len(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
    let mut order: Vec<usize> = (0..batch.rows()).collect();
    let decay = if cfg.epochs > 1 {
        cfg.final_lr_fraction.powf(1.0 / (cfg.epochs - 1) as f64)
    } else {
        1.0
    };
    for epoch in 0..cfg.epochs {
        adam.learning_rate = cfg.learning_rate * decay.powi(epoch as i32);
        order.shuffle(&mut rng);
        let mut avg = LossTerms::default();
        for chunk in order.chunks(cfg.batch_size) {
            let mb = batch.select(chunk);
            let (terms, grad) = joint_loss_and_gradient(model, &mb, cfg, true).map_err(|e| {
                Error::Divergence {
                    epoch,
                    detail: e.to_string(),
                }
            })?;
            avg.add_scaled(&terms, chunk.len() as f64 / batch.rows() as f64);
            adam_step(&mut adam, &mut params, &grad).map_err(|e| Error::Divergence {
                epoch,
                detail: e.to_string(),
            })?;
            model.set_parameters(&params);
        }
        if !avg.total.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: "non-finite epoch loss".into(),
            });
        }
        log::debug!("epoch {epoch}: {avg:?}");
        model.train_log.push(EpochLog {
            phase: Phase::Joint,
            epoch,
            loss: avg,
        });
    }
    Ok(())
}

/// Latent coordinates and their time derivatives under the frozen encoder.
fn encode_batch(model: &TrainedModel, batch: &Batch) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let tr = model.encoder.forward_tangent_rows(&batch.x, &batch.dx)?;
    Ok((tr.output, tr.tangent))
}

/// Re-fits the trainable entries of Ξ with the autoencoder frozen, after an
/// optional threshold pass (`cfg.threshold > 0`).
pub fn fine_tune_sindy(model: &TrainedModel, data: &SnapshotSet, cfg: &TrainConfig) -> Result<TrainedModel> {
    let mut out = model.clone();
    let batch = prepare_batch(model, data)?;
    fine_tune_on_batch(&mut out, &batch, cfg)?;
    Ok(out)
}

fn fine_tune_on_batch(model: &mut TrainedModel, batch: &Batch, cfg: &TrainConfig) -> Result<()> {
    if cfg.fine_tune_epochs == 0 {
        return Ok(());
    }
    if cfg.threshold > 0.0 {
        model.latent.xi = model.latent.xi.threshold(cfg.threshold);
    }
    let (z, zdot) = encode_batch(model, batch)?;
    let theta = library_rows(&model.latent.library, &z, batch);
    let log = fit_coefficients(&mut model.latent.xi, &theta, &zdot, cfg)?;
    model.train_log.extend(log);
    Ok(())
}

/// Sparse regression of `zdot ≈ Θ Ξ` over the trainable entries of `xi`,
/// minimising `λ₁‖zdot − ΘΞ‖²/B + λ₂‖Ξ‖₁`.
pub fn fit_coefficients(
    xi: &mut CoefficientMatrix,
    theta: &DMatrix<f64>,
    zdot: &DMatrix<f64>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    if theta.nrows() != zdot.nrows() || theta.ncols() != xi.rows() || zdot.ncols() != xi.cols() {
        return Err(Error::dim("regression rows", theta.nrows(), zdot.nrows()));
    }
    match cfg.fine_tune_solver {
        FineTuneSolver::CoordinateDescent => coordinate_descent(xi, theta, zdot, cfg),
        FineTuneSolver::Adam => adam_regression(xi, theta, zdot, cfg),
    }
}

fn regression_terms(xi: &CoefficientMatrix, theta: &DMatrix<f64>, zdot: &DMatrix<f64>, cfg: &TrainConfig) -> LossTerms {
    let sindy = cfg.lambda1 * (zdot - theta * &xi.values).norm_squared() / theta.nrows() as f64;
    let l1 = cfg.lambda2 * xi.l1_trainable();
    LossTerms {
        total: sindy + l1,
        sindy,
        l1,
        ..Default::default()
    }
}

fn coordinate_descent(
    xi: &mut CoefficientMatrix,
    theta: &DMatrix<f64>,
    zdot: &DMatrix<f64>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    let rows = theta.nrows() as f64;
    let gram = theta.tr_mul(theta) / rows;
    let rhs = theta.tr_mul(zdot) / rows;
    let r = xi.rows();
    // soft-threshold level of the per-coordinate minimiser
    let shrink = if cfg.lambda1 > 0.0 {
        cfg.lambda2 / (2.0 * cfg.lambda1)
    } else {
        f64::INFINITY
    };

    // least-squares warm start over the trainable rows of each column
    for j in 0..xi.cols() {
        let free: Vec<usize> = (0..r).filter(|&k| xi.trainable_mask[(k, j)]).collect();
        if free.is_empty() || cfg.lambda1 == 0.0 {
            continue;
        }
        let fixed_part = DVector::from_fn(theta.nrows(), |i, _| {
            (0..r)
                .filter(|&k| !xi.trainable_mask[(k, j)])
                .map(|k| theta[(i, k)] * xi.values[(k, j)])
                .sum::<f64>()
        });
        let target = zdot.column(j) - fixed_part;
        let sub = DMatrix::from_fn(theta.nrows(), free.len(), |i, c| theta[(i, free[c])]);
        let svd = sub.svd(true, true);
        if let Ok(sol) = svd.solve(&target, 1e-12) {
            for (c, &k) in free.iter().enumerate() {
                xi.values[(k, j)] = sol[c];
            }
        }
    }

    let mut log = Vec::new();
    for sweep in 0..cfg.fine_tune_epochs {
        let mut max_change = 0.0f64;
        for j in 0..xi.cols() {
            for k in 0..r {
                if !xi.trainable_mask[(k, j)] {
                    continue;
                }
                let g = gram[(k, k)];
                if g <= 0.0 {
                    continue;
                }
                let mut rho = rhs[(k, j)];
                for l in 0..r {
                    if l != k {
                        rho -= gram[(k, l)] * xi.values[(l, j)];
                    }
                }
                let new = soft_threshold(rho, shrink) / g;
                max_change = max_change.max((new - xi.values[(k, j)]).abs());
                xi.values[(k, j)] = new;
            }
        }
        let last = max_change < 1e-15 || sweep + 1 == cfg.fine_tune_epochs;
        if last || sweep % 100 == 0 {
            log.push(EpochLog {
                phase: Phase::FineTune,
                epoch: sweep,
                loss: regression_terms(xi, theta, zdot, cfg),
            });
        }
        if last {
            break;
        }
    }
    xi.enforce();
    Ok(log)
}

fn soft_threshold(x: f64, level: f64) -> f64 {
    if x > level {
        x - level
    } else if x < -level {
        x + level
    } else {
        0.0
    }
}

fn adam_regression(
    xi: &mut CoefficientMatrix,
    theta: &DMatrix<f64>,
    zdot: &DMatrix<f64>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    let mut params = xi.trainable_values();
    let mut adam = AdamState::new(params.len(), cfg.fine_tune_learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf1e7);
    let mut order: Vec<usize> = (0..theta.nrows()).collect();
    let mut log = Vec::new();
    for epoch in 0..cfg.fine_tune_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let th = DMatrix::from_fn(chunk.len(), theta.ncols(), |i, k| theta[(chunk[i], k)]);
            let zd = DMatrix::from_fn(chunk.len(), zdot.ncols(), |i, k| zdot[(chunk[i], k)]);
            let resid = zd - &th * &xi.values;
            let mut g = th.tr_mul(&resid) * (-2.0 * cfg.lambda1 / chunk.len() as f64);
            for k in 0..g.len() {
                if xi.values[k] != 0.0 {
                    g[k] += cfg.lambda2 * xi.values[k].signum();
                }
            }
            let grad: Vec<f64> = g
                .iter()
                .zip(xi.trainable_mask.iter())
                .filter_map(|(v, m)| m.then_some(*v))
                .collect();
            adam_step(&mut adam, &mut params, &grad).map_err(|e| Error::Divergence {
                epoch,
                detail: e.to_string(),
            })?;
            xi.assign_trainable(&params);
        }
        log.push(EpochLog {
            phase: Phase::FineTune,
            epoch,
            loss: regression_terms(xi, theta, zdot, cfg),
        });
    }
    Ok(log)
}

/// Trains at each latent dimension and reports the final autoencoder loss,
/// to locate the dimension below which the reconstruction error jumps.
pub fn latent_dimension_sweep(
    data: &SnapshotSet,
    cfg: &TrainConfig,
    dims: &[usize],
) -> Result<Vec<(usize, f64)>> {
    dims.iter()
        .map(|&n| {
            let mut c = cfg.clone();
            c.latent_dim = n;
            c.constraints.clear();
            c.fine_tune_epochs = 0;
            let m = train(data, &c)?;
            let ae = m
                .train_log
                .iter()
                .rev()
                .find(|l| l.phase == Phase::Joint)
                .map_or(f64::NAN, |l| l.loss.ae);
            Ok((n, ae))
        })
        .collect()
}
