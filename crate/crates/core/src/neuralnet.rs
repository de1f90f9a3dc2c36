//! Dense feed-forward networks with tangent propagation and ADAM.
//!
//! Besides the plain forward map the networks push a tangent vector
//! through the layers (`ẏ = J(x) ẋ`), and can back-propagate through both
//! the value and the tangent. That is what the derivative terms of the
//! joint loss need.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serial;

/// Hidden-layer nonlinearity. The output layer is always affine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Linear,
}

impl Activation {
    #[inline]
    fn eval(self, u: f64) -> f64 {
        match self {
            Activation::Tanh => u.tanh(),
            Activation::Linear => u,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out × in`
    #[serde(with = "serial::matrix")]
    pub weights: DMatrix<f64>,
    #[serde(with = "serial::vector")]
    pub biases: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNetwork {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub layers: Vec<DenseLayer>,
}

impl DenseNetwork {
    /// Glorot-uniform weights, zero biases, drawn from a seeded generator.
    pub fn glorot(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "bad layer sizes {layer_sizes:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                DenseLayer {
                    weights: DMatrix::from_fn(fan_out, fan_in, |_, _| {
                        rng.random_range(-limit..limit)
                    }),
                    biases: DVector::zeros(fan_out),
                }
            })
            .collect();
        Ok(DenseNetwork {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            layers,
        })
    }

    /// Builds a network from explicit layers, checking that shapes chain.
    pub fn from_layers(activation: Activation, layers: Vec<DenseLayer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::InvalidArgument("network needs a layer".into()))?;
        let mut sizes = vec![first.weights.ncols()];
        for l in &layers {
            if l.weights.ncols() != *sizes.last().unwrap() {
                return Err(Error::dim("layer input", *sizes.last().unwrap(), l.weights.ncols()));
            }
            if l.biases.len() != l.weights.nrows() {
                return Err(Error::dim("layer bias", l.weights.nrows(), l.biases.len()));
            }
            sizes.push(l.weights.nrows());
        }
        Ok(DenseNetwork {
            layer_sizes: sizes,
            activation,
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    fn is_hidden(&self, k: usize) -> bool {
        k + 1 < self.layers.len()
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("network input", self.input_dim(), x.len()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(x)?;
        let mut a = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut u = &layer.weights * &a + &layer.biases;
            if self.is_hidden(k) {
                u.apply(|v| *v = self.activation.eval(*v));
            }
            a = u;
        }
        Ok(a)
    }

    /// Exact `out × in` Jacobian of the network at `x`.
    pub fn input_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let mut a = x.clone();
        let mut jac = DMatrix::identity(self.input_dim(), self.input_dim());
        for (k, layer) in self.layers.iter().enumerate() {
            let u = &layer.weights * &a + &layer.biases;
            jac = &layer.weights * jac;
            if self.is_hidden(k) && self.activation == Activation::Tanh {
                let t = u.map(f64::tanh);
                for (i, mut row) in jac.row_iter_mut().enumerate() {
                    row *= 1.0 - t[i] * t[i];
                }
                a = t;
            } else {
                a = u;
            }
        }
        Ok(jac)
    }

    /// Row-wise forward pass on a `batch × in` matrix.
    pub fn forward_rows(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dim("network input", self.input_dim(), x.ncols()));
        }
        let mut a = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut u = affine_rows(&a, layer);
            if self.is_hidden(k) {
                u.apply(|v| *v = self.activation.eval(*v));
            }
            a = u;
        }
        Ok(a)
    }

    /// Batched forward pass of values and tangents, keeping what the
    /// backward pass needs.
    pub fn forward_tangent_rows(&self, x: &DMatrix<f64>, dx: &DMatrix<f64>) -> Result<TangentTrace> {
        if x.ncols() != self.input_dim() || dx.shape() != x.shape() {
            return Err(Error::dim("network input", self.input_dim(), x.ncols()));
        }
        let mut a = x.clone();
        let mut da = dx.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let u = affine_rows(&a, layer);
            let du = &da * layer.weights.transpose();
            let input = (a, da);
            if self.is_hidden(k) && self.activation == Activation::Tanh {
                let t = u.map(f64::tanh);
                let slope = t.map(|v| 1.0 - v * v);
                let dout = slope.component_mul(&du);
                layers.push(LayerTrace {
                    input,
                    du,
                    tanh: Some((t.clone(), slope)),
                });
                a = t;
                da = dout;
            } else {
                layers.push(LayerTrace {
                    input,
                    du: du.clone(),
                    tanh: None,
                });
                a = u;
                da = du;
            }
        }
        Ok(TangentTrace {
            output: a,
            tangent: da,
            layers,
        })
    }

    /// Reverse pass through [`DenseNetwork::forward_tangent_rows`].
    ///
    /// `g_out` and `g_tangent` are the loss gradients with respect to the
    /// output values and output tangents. Parameter gradients are added
    /// into `grads`; the gradients with respect to the input values and
    /// input tangents are returned.
    pub fn backward_tangent_rows(
        &self,
        trace: &TangentTrace,
        g_out: DMatrix<f64>,
        g_tangent: DMatrix<f64>,
        grads: &mut NetworkGrads,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut ga = g_out;
        let mut gda = g_tangent;
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let tr = &trace.layers[k];
            let (gu, gdu) = match &tr.tanh {
                Some((t, slope)) => {
                    // d(slope)/du = -2 t slope
                    let mut gu = ga.component_mul(slope);
                    for i in 0..gu.nrows() {
                        for j in 0..gu.ncols() {
                            gu[(i, j)] -= 2.0 * t[(i, j)] * slope[(i, j)] * tr.du[(i, j)] * gda[(i, j)];
                        }
                    }
                    (gu, gda.component_mul(slope))
                }
                None => (ga, gda),
            };
            let (a_in, da_in) = &tr.input;
            grads.weights[k] += gu.tr_mul(a_in) + gdu.tr_mul(da_in);
            for (j, b) in grads.biases[k].iter_mut().enumerate() {
                *b += gu.column(j).sum();
            }
            ga = &gu * &layer.weights;
            gda = &gdu * &layer.weights;
        }
        (ga, gda)
    }

    pub fn zero_grads(&self) -> NetworkGrads {
        NetworkGrads {
            weights: self
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.weights.nrows(), l.weights.ncols()))
                .collect(),
            biases: self
                .layers
                .iter()
                .map(|l| DVector::zeros(l.biases.len()))
                .collect(),
        }
    }

    /// Parameters flattened layer by layer (weights column-major, then biases).
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.biases.iter());
        }
    }

    /// Inverse of [`DenseNetwork::flatten_into`]; returns the number of values consumed.
    pub fn assign_from(&mut self, flat: &[f64]) -> usize {
        let mut k = 0;
        for l in &mut self.layers {
            for w in l.weights.iter_mut() {
                *w = flat[k];
                k += 1;
            }
            for b in l.biases.iter_mut() {
                *b = flat[k];
                k += 1;
            }
        }
        k
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.biases.iter()).all(|v| v.is_finite()))
    }
}

fn affine_rows(a: &DMatrix<f64>, layer: &DenseLayer) -> DMatrix<f64> {
    let mut u = a * layer.weights.transpose();
    for mut row in u.row_iter_mut() {
        row += layer.biases.transpose();
    }
    u
}

struct LayerTrace {
    input: (DMatrix<f64>, DMatrix<f64>),
    du: DMatrix<f64>,
    /// `(tanh(u), 1 - tanh²(u))` for hidden tanh layers.
    tanh: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

/// Intermediate values of a batched tangent forward pass.
pub struct TangentTrace {
    pub output: DMatrix<f64>,
    pub tangent: DMatrix<f64>,
    layers: Vec<LayerTrace>,
}

/// Gradient accumulator mirroring a network's parameters.
#[derive(Debug, Clone)]
pub struct NetworkGrads {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl NetworkGrads {
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
    }
}

/// First/second-moment state of the ADAM optimiser over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected ADAM update. Non-finite gradients leave both the
/// parameters and the optimiser state untouched and are reported as an error.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::dim("adam parameters", state.m.len(), params.len()));
    }
    if grads.len() != params.len() {
        return Err(Error::dim("adam gradients", params.len(), grads.len()));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i}; step skipped")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_net(sizes: &[usize], seed: u64) -> DenseNetwork {
        let mut net = DenseNetwork::glorot(sizes, Activation::Tanh, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for l in &mut net.layers {
            l.biases.apply(|b| *b = rng.random_range(-0.5..0.5));
        }
        net
    }

    /// Straight-line re-implementation used as an oracle.
    fn reference_forward(net: &DenseNetwork, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let last = net.layers.len() - 1;
        for (k, l) in net.layers.iter().enumerate() {
            let mut next = Vec::new();
            for i in 0..l.weights.nrows() {
                let mut s = l.biases[i];
                for j in 0..l.weights.ncols() {
                    s += l.weights[(i, j)] * a[j];
                }
                next.push(if k < last { s.tanh() } else { s });
            }
            a = next;
        }
        a
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut net = random_net(&[3, 4, 2], 1);
        for l in &mut net.layers {
            l.weights.fill(0.0);
        }
        let y = net.forward(&DVector::from_vec(vec![1.0, -2.0, 3.0])).unwrap();
        assert_eq!(y, net.layers[1].biases);
    }

    #[test]
    fn single_identity_layer() {
        let net = DenseNetwork::from_layers(
            Activation::Tanh,
            vec![DenseLayer {
                weights: DMatrix::identity(3, 3),
                biases: DVector::zeros(3),
            }],
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.3, -7.0, 2.0]);
        assert_eq!(net.forward(&x).unwrap(), x);
        assert_eq!(net.input_jacobian(&x).unwrap(), DMatrix::identity(3, 3));
    }

    #[test]
    fn forward_matches_reference() {
        let net = random_net(&[5, 7, 6, 3], 2);
        let x = [0.1, -0.4, 0.9, 0.2, -0.7];
        let y = net.forward(&DVector::from_row_slice(&x)).unwrap();
        let r = reference_forward(&net, &x);
        for i in 0..3 {
            assert!((y[i] - r[i]).abs() < 1e-14);
        }
        let rows = net
            .forward_rows(&DMatrix::from_row_slice(1, 5, &x))
            .unwrap();
        for i in 0..3 {
            assert!((rows[(0, i)] - r[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_rejects_bad_input() {
        let net = random_net(&[2, 3, 1], 3);
        assert!(net.forward(&DVector::zeros(3)).is_err());
        assert!(matches!(
            net.forward(&DVector::from_vec(vec![f64::NAN, 0.0])),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let net = random_net(&[4, 8, 5, 3], 4);
        let x = DVector::from_vec(vec![0.2, -0.3, 0.5, 0.1]);
        let jac = net.input_jacobian(&x).unwrap();
        let h = 1e-6;
        for j in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fd = (net.forward(&xp).unwrap() - net.forward(&xm).unwrap()) / (2.0 * h);
            for i in 0..3 {
                let rel = (fd[i] - jac[(i, j)]).abs() / jac[(i, j)].abs().max(1e-3);
                assert!(rel < 1e-6, "({i},{j}) {rel}");
            }
        }
    }

    #[test]
    fn jacobian_chain_rule() {
        let enc = random_net(&[4, 6, 2], 5);
        let dec = random_net(&[2, 6, 4], 6);
        let x = DVector::from_vec(vec![0.3, 0.1, -0.2, 0.4]);
        let z = enc.forward(&x).unwrap();
        let j = dec.input_jacobian(&z).unwrap() * enc.input_jacobian(&x).unwrap();
        let h = 1e-6;
        for c in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += h;
            xm[c] -= h;
            let f = |v: &DVector<f64>| dec.forward(&enc.forward(v).unwrap()).unwrap();
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            for r in 0..4 {
                assert!((fd[r] - j[(r, c)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn tangent_is_jacobian_vector_product() {
        let net = random_net(&[3, 5, 2], 7);
        let x = DVector::from_vec(vec![0.5, -0.1, 0.3]);
        let dx = DVector::from_vec(vec![1.0, 2.0, -0.5]);
        let tr = net
            .forward_tangent_rows(&DMatrix::from_row_slice(1, 3, x.as_slice()), &DMatrix::from_row_slice(1, 3, dx.as_slice()))
            .unwrap();
        let jv = net.input_jacobian(&x).unwrap() * dx;
        for i in 0..2 {
            assert!((tr.tangent[(0, i)] - jv[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut net = random_net(&[3, 5, 4, 2], 8);
        let x = DMatrix::from_row_slice(2, 3, &[0.2, -0.5, 0.7, -0.3, 0.1, 0.4]);
        let dx = DMatrix::from_row_slice(2, 3, &[1.0, -0.5, 0.3, 0.2, 0.9, -1.1]);
        let cy = DMatrix::from_row_slice(2, 2, &[0.3, -1.2, 0.8, 0.5]);
        let cd = DMatrix::from_row_slice(2, 2, &[-0.7, 0.4, 1.5, 0.2]);
        // L = Σ cy⊙y² + Σ cd⊙ẏ²: a nonlinear function of both outputs
        let loss = |n: &DenseNetwork| {
            let t = n.forward_tangent_rows(&x, &dx).unwrap();
            t.output.component_mul(&t.output).component_mul(&cy).sum()
                + t.tangent.component_mul(&t.tangent).component_mul(&cd).sum()
        };
        let t = net.forward_tangent_rows(&x, &dx).unwrap();
        let gy = t.output.component_mul(&cy) * 2.0;
        let gd = t.tangent.component_mul(&cd) * 2.0;
        let mut grads = net.zero_grads();
        let (gx, gdx) = net.backward_tangent_rows(&t, gy, gd, &mut grads);
        let mut flat_grad = Vec::new();
        grads.flatten_into(&mut flat_grad);
        let mut params = Vec::new();
        net.flatten_into(&mut params);
        let h = 1e-5;
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += h;
            net.assign_from(&p);
            let lp = loss(&net);
            p[i] -= 2.0 * h;
            net.assign_from(&p);
            let lm = loss(&net);
            net.assign_from(&params);
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - flat_grad[i]).abs() / flat_grad[i].abs().max(1e-4);
            assert!(rel < 1e-5, "param {i}: fd {fd} vs {}", flat_grad[i]);
        }
        // input gradients too
        let lx = |xx: &DMatrix<f64>, dd: &DMatrix<f64>| {
            let t = net.forward_tangent_rows(xx, dd).unwrap();
            t.output.component_mul(&t.output).component_mul(&cy).sum()
                + t.tangent.component_mul(&t.tangent).component_mul(&cd).sum()
        };
        for r in 0..2 {
            for c in 0..3 {
                let mut xp = x.clone();
                xp[(r, c)] += h;
                let mut xm = x.clone();
                xm[(r, c)] -= h;
                let fd = (lx(&xp, &dx) - lx(&xm, &dx)) / (2.0 * h);
                assert!((fd - gx[(r, c)]).abs() < 1e-7 * fd.abs().max(1.0));
                let mut dp = dx.clone();
                dp[(r, c)] += h;
                let mut dm = dx.clone();
                dm[(r, c)] -= h;
                let fd = (lx(&x, &dp) - lx(&x, &dm)) / (2.0 * h);
                assert!((fd - gdx[(r, c)]).abs() < 1e-7 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn adam_zero_gradient() {
        let mut s = AdamState::new(3, 0.1);
        let mut p = vec![1.0, 2.0, 3.0];
        adam_step(&mut s, &mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_first_step() {
        let mut s = AdamState::new(1, 0.1);
        let mut p = vec![0.0];
        adam_step(&mut s, &mut p, &[1.0]).unwrap();
        let expected = -0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_constant_gradient_step_tends_to_lr() {
        let mut s = AdamState::new(1, 0.01);
        let mut p = vec![0.0];
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = p[0];
            adam_step(&mut s, &mut p, &[3.0]).unwrap();
            last = before - p[0];
        }
        assert!((last - 0.01).abs() < 1e-9);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut s = AdamState::new(2, 0.1);
        let mut p = vec![1.0, 1.0];
        assert!(adam_step(&mut s, &mut p, &[f64::NAN, 0.0]).is_err());
        assert_eq!(s.step, 0);
        assert_eq!(p, vec![1.0, 1.0]);
        assert!(adam_step(&mut s, &mut p, &[0.0]).is_err());
    }

    #[test]
    fn glorot_is_seeded() {
        let a = DenseNetwork::glorot(&[4, 3, 2], Activation::Tanh, 9).unwrap();
        let b = DenseNetwork::glorot(&[4, 3, 2], Activation::Tanh, 9).unwrap();
        assert_eq!(a, b);
        let limit = (6.0f64 / 7.0).sqrt();
        assert!(a.layers[0].weights.iter().all(|w| w.abs() <= limit));
    }
}
