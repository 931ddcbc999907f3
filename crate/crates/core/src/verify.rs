//! Built-in invariant suites behind `qpong verify`. Each suite checks the
//! implementation against an independent route (dense algebra, finite
//! differences, definition-level sums) at desk scale.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::analysis::linear_cka;
use crate::env::{Action, Pong, PongConfig};
use crate::error::Result;
use crate::ppo::{compute_gae, stream_rng};
use crate::quantum::{rzz_matrix, u3_matrix, Circuit, Gate};

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl SuiteReport {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self { name, cases: 0, failures: 0, max_error: 0.0, tolerance }
    }

    fn record(&mut self, error: f64, ok: bool) {
        self.cases += 1;
        if error.is_nan() {
            self.max_error = f64::NAN;
        } else if !self.max_error.is_nan() {
            self.max_error = self.max_error.max(error);
        }
        if !ok {
            self.failures += 1;
        }
    }

    fn check(&mut self, error: f64) {
        let ok = error <= self.tolerance;
        self.record(error, ok);
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }
}

pub type GradientFn = dyn Fn(&Circuit, &[f64]) -> Result<Vec<Vec<f64>>> + Sync;

/// Random circuit over `n` qubits with `depth` gates of random kind.
pub fn random_circuit(rng: &mut ChaCha8Rng, n: usize, depth: usize) -> (Circuit, Vec<f64>) {
    let mut gates = Vec::with_capacity(depth);
    for _ in 0..depth {
        let kind = if n < 2 { 0 } else { rng.random_range(0..3) };
        let a = rng.random_range(0..n);
        let b = if n < 2 { a } else { (a + rng.random_range(1..n)) % n };
        gates.push(match kind {
            0 => Gate::U3 { qubit: a },
            1 => Gate::Cz { a, b },
            _ => Gate::Rzz { a, b },
        });
    }
    let circuit = Circuit::new(n, gates).expect("generated gates are in range");
    let angles = (0..circuit.num_angles()).map(|_| rng.random_range(-PI..PI)).collect();
    (circuit, angles)
}

fn max_unitarity_defect(m: &[[Complex64; 2]; 2]) -> f64 {
    let mut worst: f64 = 0.0;
    for r in 0..2 {
        for c in 0..2 {
            let dot: Complex64 = (0..2).map(|k| m[k][r].conj() * m[k][c]).sum();
            let target = if r == c { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).norm());
        }
    }
    worst
}

pub fn gate_unitarity_suite(samples: usize, seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("gate-unitarity", 1e-12);
    let mut rng = stream_rng(seed, 0);
    for _ in 0..samples {
        let (t, l, d) = (rng.random_range(-4.0 * PI..4.0 * PI), rng.random_range(-4.0 * PI..4.0 * PI), rng.random_range(-4.0 * PI..4.0 * PI));
        report.check(max_unitarity_defect(&u3_matrix(t, l, d)));
        let z = rzz_matrix(rng.random_range(-4.0 * PI..4.0 * PI));
        report.check(z.iter().map(|v| (v.norm_sqr() - 1.0).abs()).fold(0.0, f64::max));
    }
    report
}

/// Central finite differences of every `⟨X_q⟩` with respect to every angle.
pub fn finite_difference_jacobian(circuit: &Circuit, angles: &[f64], step: f64) -> Result<Vec<Vec<f64>>> {
    let n = circuit.num_qubits();
    let mut jac = vec![vec![0.0; angles.len()]; n];
    let mut probe = angles.to_vec();
    for k in 0..angles.len() {
        probe[k] = angles[k] + step;
        let plus = circuit.expectations(&probe)?;
        probe[k] = angles[k] - step;
        let minus = circuit.expectations(&probe)?;
        probe[k] = angles[k];
        for q in 0..n {
            jac[q][k] = (plus[q] - minus[q]) / (2.0 * step);
        }
    }
    Ok(jac)
}

/// Adjoint gradients against central differences (step 1e-5). An entry
/// passes when its relative error is ≤ 1e-5 or its absolute error ≤ 1e-7;
/// `max_error` reports the largest absolute error.
pub fn gradient_suite_with(gradient: &GradientFn, instances: usize, seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("circuit-gradient", 1e-7);
    let mut rng = stream_rng(seed, 1);
    for _ in 0..instances {
        let n = rng.random_range(1..=4);
        let depth = rng.random_range(1..=12);
        let (circuit, angles) = random_circuit(&mut rng, n, depth);
        let (analytic, numeric) = match (gradient(&circuit, &angles), finite_difference_jacobian(&circuit, &angles, 1e-5)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => {
                report.record(f64::INFINITY, false);
                continue;
            }
        };
        for (ra, rn) in analytic.iter().zip(&numeric) {
            for (a, b) in ra.iter().zip(rn) {
                let abs = (a - b).abs();
                let rel = abs / b.abs().max(1e-300);
                report.record(abs, abs <= 1e-7 || rel <= 1e-5);
            }
        }
    }
    report
}

pub fn gradient_suite(instances: usize, seed: u64) -> SuiteReport {
    gradient_suite_with(&|c: &Circuit, a: &[f64]| c.gradient(a), instances, seed)
}

/// Definition-level GAE: `Â_t = Σ_k (γλ)^k δ_{t+k}`, stopping after the step
/// that ends the episode.
pub fn gae_bruteforce(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let delta = |t: usize| {
        let next = if dones[t] { 0.0 } else if t + 1 < n { values[t + 1] } else { bootstrap };
        rewards[t] + gamma * next - values[t]
    };
    (0..n)
        .map(|t| {
            let mut acc = 0.0;
            for k in t..n {
                acc += (gamma * lambda).powi((k - t) as i32) * delta(k);
                if dones[k] {
                    break;
                }
            }
            acc
        })
        .collect()
}

pub fn gae_suite(buffers: usize, seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("gae-oracle", 1e-12);
    let mut rng = stream_rng(seed, 2);
    for _ in 0..buffers {
        let n = rng.random_range(1..=64);
        let rewards: Vec<f64> = (0..n).map(|_| [-1.0, 0.0, 0.0, 0.0, 1.0][rng.random_range(0..5)]).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let dones: Vec<bool> = (0..n).map(|_| rng.random_bool(0.1)).collect();
        let boot = rng.random_range(-2.0..2.0);
        let (gamma, lambda) = (rng.random_range(0.5..=1.0), rng.random_range(0.0..=1.0));
        let fast = compute_gae(&rewards, &values, &dones, boot, gamma, lambda);
        let slow = gae_bruteforce(&rewards, &values, &dones, boot, gamma, lambda);
        match fast {
            Ok(est) => {
                let err = est.advantages.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                report.check(err);
            }
            Err(_) => report.record(f64::INFINITY, false),
        }
    }
    report
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn cka_suite(pairs: usize, seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("cka-identities", 1e-10);
    let mut rng = stream_rng(seed, 3);
    for _ in 0..pairs {
        let n = rng.random_range(5..40);
        let (px, py) = (rng.random_range(1..9), rng.random_range(1..9));
        let x = random_matrix(&mut rng, n, px);
        let y = random_matrix(&mut rng, n, py);
        let q = random_matrix(&mut rng, x.ncols(), x.ncols()).qr().q();
        let c = [-3.0, 0.5, 10.0][rng.random_range(0..3)];
        let run = || -> Result<[f64; 5]> {
            let xy = linear_cka(&x, &y)?;
            Ok([
                (linear_cka(&x, &x)? - 1.0).abs(),
                (linear_cka(&x, &(&x * &q))? - 1.0).abs(),
                (linear_cka(&x, &(&x * c))? - 1.0).abs(),
                (xy - linear_cka(&y, &x)?).abs(),
                (xy.min(1.0) - xy).abs().max((xy.max(0.0) - xy).abs()),
            ])
        };
        match run() {
            Ok(errs) => errs.iter().for_each(|e| report.check(*e)),
            Err(_) => report.record(f64::INFINITY, false),
        }
    }
    report
}

pub fn env_suite(episodes: usize, seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("env-determinism", 0.0);
    let cfg = PongConfig::default();
    for ep in 0..episodes {
        let play = || -> Result<(Vec<[f64; 8]>, f64, (u32, u32))> {
            let mut env = Pong::new(cfg, seed + ep as u64)?;
            let mut rng = stream_rng(seed + ep as u64, 4);
            let mut trace = vec![env.observation()];
            let mut total = 0.0;
            loop {
                let step = env.step(Action::from_index(rng.random_range(0..3))?)?;
                total += step.reward;
                trace.push(step.observation);
                if step.done() {
                    return Ok((trace, total, env.scores()));
                }
            }
        };
        match (play(), play()) {
            (Ok(a), Ok(b)) => {
                let (s_l, s_r) = a.2;
                let accounting = (a.1 - (f64::from(s_r) - f64::from(s_l))).abs();
                let same = if a.0 == b.0 && a.1 == b.1 { 0.0 } else { 1.0 };
                report.check(accounting.max(same));
            }
            _ => report.record(f64::INFINITY, false),
        }
    }
    report
}

pub fn run_all(seed: u64) -> Vec<SuiteReport> {
    vec![
        gate_unitarity_suite(100, seed),
        gradient_suite(50, seed),
        gae_suite(100, seed),
        cka_suite(200, seed),
        env_suite(20, seed),
    ]
}
