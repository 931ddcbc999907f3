//! Dense layers over flat parameter slices, a 3-way categorical policy,
//! Adam and global-norm clipping.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Shape of a dense layer whose parameters live in a flat slice: row-major
/// `outputs × inputs` weights followed by `outputs` biases when enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub bias: bool,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, bias: bool) -> Self {
        Self { inputs, outputs, bias }
    }

    pub fn num_params(&self) -> usize {
        self.inputs * self.outputs + if self.bias { self.outputs } else { 0 }
    }

    fn check(&self, params: &[f64], x: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::config(format!(
                "dense {}→{} expects {} params, got {}",
                self.inputs,
                self.outputs,
                self.num_params(),
                params.len()
            )));
        }
        if x.len() != self.inputs {
            return Err(Error::config(format!("dense expects {} inputs, got {}", self.inputs, x.len())));
        }
        Ok(())
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check(params, x)?;
        let (w, b) = params.split_at(self.inputs * self.outputs);
        Ok((0..self.outputs)
            .map(|o| {
                let row = &w[o * self.inputs..(o + 1) * self.inputs];
                let dot: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
                if self.bias { dot + b[o] } else { dot }
            })
            .collect())
    }

    /// Returns `(param_grad, input_grad)` for `upstream = ∂L/∂y`.
    pub fn backward(&self, params: &[f64], x: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(params, x)?;
        if upstream.len() != self.outputs {
            return Err(Error::config(format!(
                "dense upstream expects {} entries, got {}",
                self.outputs,
                upstream.len()
            )));
        }
        let nw = self.inputs * self.outputs;
        let mut grad = vec![0.0; self.num_params()];
        let mut dx = vec![0.0; self.inputs];
        for (o, &u) in upstream.iter().enumerate() {
            let row = &params[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                grad[o * self.inputs + i] = u * x[i];
                dx[i] += u * row[i];
            }
            if self.bias {
                grad[nw + o] = u;
            }
        }
        Ok((grad, dx))
    }

    /// Orthogonal weights scaled by `gain`, zero bias.
    pub fn init<R: Rng + ?Sized>(&self, gain: f64, rng: &mut R) -> Vec<f64> {
        let mut out = orthogonal(self.outputs, self.inputs, gain, rng);
        if self.bias {
            out.extend(std::iter::repeat_n(0.0, self.outputs));
        }
        out
    }
}

/// Row-major `rows × cols` matrix with orthonormal rows or columns
/// (whichever is fewer), times `gain`.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::<f64>::from_fn(tall, short, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Sign fix so the distribution is uniform over the orthogonal group.
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let q = if rows >= cols { q } else { q.transpose() };
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(gain * q[(r, c)]);
        }
    }
    out
}

pub fn tanh_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.tanh()).collect()
}

/// Gradient through tanh given its output `y`.
pub fn tanh_backward(y: &[f64], upstream: &[f64]) -> Vec<f64> {
    y.iter().zip(upstream).map(|(y, u)| u * (1.0 - y * y)).collect()
}

pub const NUM_ACTIONS: usize = 3;

/// Softmax policy over three actions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Categorical {
    logits: [f64; NUM_ACTIONS],
    log_probs: [f64; NUM_ACTIONS],
}

impl Categorical {
    pub fn new(logits: [f64; NUM_ACTIONS]) -> Result<Self> {
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::numeric(format!("non-finite logits {logits:?}")));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        Ok(Self { logits, log_probs: logits.map(|l| l - lse) })
    }

    pub fn logits(&self) -> &[f64; NUM_ACTIONS] {
        &self.logits
    }

    pub fn probs(&self) -> [f64; NUM_ACTIONS] {
        self.log_probs.map(f64::exp)
    }

    pub fn log_prob(&self, action: usize) -> f64 {
        self.log_probs[action]
    }

    pub fn entropy(&self) -> f64 {
        -self.log_probs.iter().map(|lp| lp.exp() * lp).sum::<f64>()
    }

    /// Inverse-CDF sample from one uniform draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, p) in self.probs().iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        // u landed in the rounding gap above the cumulative sum
        self.probs().iter().rposition(|p| *p > 0.0).unwrap_or(NUM_ACTIONS - 1)
    }

    pub fn mode(&self) -> usize {
        let mut best = 0;
        for a in 1..NUM_ACTIONS {
            if self.logits[a] > self.logits[best] {
                best = a;
            }
        }
        best
    }

    /// `∂ log π(action) / ∂ logits`.
    pub fn log_prob_grad(&self, action: usize) -> [f64; NUM_ACTIONS] {
        let p = self.probs();
        std::array::from_fn(|j| if j == action { 1.0 - p[j] } else { -p[j] })
    }

    /// `∂H / ∂logits_j = −p_j (log p_j + H)`.
    pub fn entropy_grad(&self) -> [f64; NUM_ACTIONS] {
        let h = self.entropy();
        std::array::from_fn(|j| -self.log_probs[j].exp() * (self.log_probs[j] + h))
    }
}

pub fn categorical_sample<R: Rng + ?Sized>(logits: [f64; NUM_ACTIONS], rng: &mut R) -> Result<usize> {
    Ok(Categorical::new(logits)?.sample(rng))
}

pub fn categorical_logprob(logits: [f64; NUM_ACTIONS], action: usize) -> Result<f64> {
    Ok(Categorical::new(logits)?.log_prob(action))
}

pub fn categorical_entropy(logits: [f64; NUM_ACTIONS]) -> Result<f64> {
    Ok(Categorical::new(logits)?.entropy())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, m: vec![0.0; num_params], v: vec![0.0; num_params], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::config(format!(
                "adam state has {} entries, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so its L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = l2_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer_passes_through() {
        let layer = Dense::new(3, 3, true);
        let mut p = vec![0.0; layer.num_params()];
        for i in 0..3 {
            p[i * 3 + i] = 1.0;
        }
        assert_eq!(layer.forward(&p, &[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let layer = Dense::new(3, 2, true);
        let p: Vec<f64> = (0..layer.num_params()).map(|i| i as f64 * 0.1).collect();
        let (g, dx) = layer.backward(&p, &[1.0, 2.0, 3.0], &[0.0, 0.0]).unwrap();
        assert!(g.iter().chain(&dx).all(|v| *v == 0.0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let layer = Dense::new(3, 2, false);
        assert!(layer.forward(&[0.0; 5], &[0.0; 3]).is_err());
        assert!(layer.forward(&[0.0; 6], &[0.0; 2]).is_err());
    }

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = orthogonal(3, 8, 1.0, &mut rng);
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..8).map(|c| w[a * 8 + c] * w[b * 8 + c]).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_entropy_is_ln3() {
        assert!((categorical_entropy([0.0; 3]).unwrap() - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn near_deterministic_limit() {
        let c = Categorical::new([1000.0, 0.0, 0.0]).unwrap();
        assert!(c.entropy() < 1e-12 && c.entropy() >= 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..1000).all(|_| c.sample(&mut rng) == 0));
    }

    #[test]
    fn non_finite_logits_rejected() {
        assert!(matches!(Categorical::new([f64::NAN, 0.0, 0.0]), Err(Error::Numeric(_))));
        assert!(categorical_logprob([f64::INFINITY, 0.0, 0.0], 0).is_err());
    }

    #[test]
    fn adam_zero_grad_first_step_is_noop() {
        let mut adam = Adam::new(3, 1e-3, 0.9, 0.999, 1e-8);
        let mut p = vec![0.5, -1.0, 2.0];
        adam.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let lr = 0.01;
        let mut adam = Adam::new(2, lr, 0.9, 0.999, 1e-8);
        let mut p = vec![1.0, 1.0];
        let g = [0.3, -2.0];
        adam.step(&mut p, &g).unwrap();
        for i in 0..2 {
            let expected = 1.0 - lr * g[i] / (g[i].abs() + 1e-8);
            assert!((p[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_fixtures() {
        let mut g = vec![0.1, 0.0];
        clip_global_norm(&mut g, 0.5);
        assert_eq!(g, vec![0.1, 0.0]);
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_global_norm(&mut g, 0.5), 5.0);
        assert!((l2_norm(&g) - 0.5).abs() < 1e-10);
    }
}
