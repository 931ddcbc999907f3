//! Exact statevector simulation for circuits over {U3, CZ, RZZ}.
//!
//! Qubit `q` is bit `q` of the basis-state index (little-endian), so a
//! single-qubit gate on `q` pairs amplitudes `i` and `i | (1 << q)`.
//! Gradients are computed by an adjoint (reverse) sweep using the closed-form
//! derivative of each gate matrix; no parameter-shift rule is involved.

use num_complex::Complex64;

use crate::error::{Error, Result};

pub type Matrix2 = [[Complex64; 2]; 2];

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// `U3(θ, λ, δ) = [[cos θ/2, −e^{iδ} sin θ/2], [e^{iλ} sin θ/2, e^{i(λ+δ)} cos θ/2]]`.
pub fn u3_matrix(theta: f64, lambda: f64, delta: f64) -> Matrix2 {
    let (s, c) = (theta / 2.0).sin_cos();
    let el = Complex64::cis(lambda);
    let ed = Complex64::cis(delta);
    let eld = Complex64::cis(lambda + delta);
    [[ONE * c, -ed * s], [el * s, eld * c]]
}

/// Partial derivatives of [`u3_matrix`] with respect to (θ, λ, δ).
pub fn u3_derivatives(theta: f64, lambda: f64, delta: f64) -> [Matrix2; 3] {
    let (s, c) = (theta / 2.0).sin_cos();
    let i = Complex64::i();
    let el = Complex64::cis(lambda);
    let ed = Complex64::cis(delta);
    let eld = Complex64::cis(lambda + delta);
    let d_theta = [[ONE * (-s / 2.0), -ed * (c / 2.0)], [el * (c / 2.0), -eld * (s / 2.0)]];
    let d_lambda = [[ZERO, ZERO], [i * el * s, i * eld * c]];
    let d_delta = [[ZERO, -i * ed * s], [ZERO, i * eld * c]];
    [d_theta, d_lambda, d_delta]
}

/// Diagonal of `exp(−iθ/2 Z⊗Z)` in basis order |00⟩, |01⟩, |10⟩, |11⟩.
pub fn rzz_matrix(theta: f64) -> [Complex64; 4] {
    let minus = Complex64::cis(-theta / 2.0);
    let plus = Complex64::cis(theta / 2.0);
    [minus, plus, plus, minus]
}

pub fn adjoint2(m: &Matrix2) -> Matrix2 {
    [[m[0][0].conj(), m[1][0].conj()], [m[0][1].conj(), m[1][1].conj()]]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    U3 { qubit: usize },
    Cz { a: usize, b: usize },
    Rzz { a: usize, b: usize },
}

impl Gate {
    /// Number of angle slots this gate consumes.
    pub fn num_angles(&self) -> usize {
        match self {
            Gate::U3 { .. } => 3,
            Gate::Cz { .. } => 0,
            Gate::Rzz { .. } => 1,
        }
    }

    pub fn is_two_qubit(&self) -> bool {
        !matches!(self, Gate::U3 { .. })
    }

    fn validate(&self, num_qubits: usize) -> Result<()> {
        match *self {
            Gate::U3 { qubit } if qubit >= num_qubits => Err(Error::config(format!(
                "U3 target {qubit} out of range for {num_qubits} qubits"
            ))),
            Gate::Cz { a, b } | Gate::Rzz { a, b } => {
                if a >= num_qubits || b >= num_qubits {
                    Err(Error::config(format!(
                        "two-qubit gate ({a}, {b}) out of range for {num_qubits} qubits"
                    )))
                } else if a == b {
                    Err(Error::config(format!("two-qubit gate targets must differ, got ({a}, {b})")))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    amplitudes: Vec<Complex64>,
    num_qubits: usize,
}

impl StateVector {
    /// |0…0⟩ on `num_qubits` qubits.
    pub fn zero(num_qubits: usize) -> Self {
        let mut amplitudes = vec![ZERO; 1 << num_qubits];
        amplitudes[0] = ONE;
        Self { amplitudes, num_qubits }
    }

    pub fn from_amplitudes(amplitudes: Vec<Complex64>) -> Result<Self> {
        let len = amplitudes.len();
        if len < 2 || !len.is_power_of_two() {
            return Err(Error::config(format!("amplitude count {len} is not 2^n with n ≥ 1")));
        }
        Ok(Self { num_qubits: len.trailing_zeros() as usize, amplitudes })
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn apply_single(&mut self, qubit: usize, m: &Matrix2) {
        let stride = 1usize << qubit;
        let amps = &mut self.amplitudes;
        for block in (0..amps.len()).step_by(stride << 1) {
            for i in block..block + stride {
                let a0 = amps[i];
                let a1 = amps[i + stride];
                amps[i] = m[0][0] * a0 + m[0][1] * a1;
                amps[i + stride] = m[1][0] * a0 + m[1][1] * a1;
            }
        }
    }

    pub fn apply_cz(&mut self, a: usize, b: usize) {
        let mask = (1usize << a) | (1usize << b);
        for (i, amp) in self.amplitudes.iter_mut().enumerate() {
            if i & mask == mask {
                *amp = -*amp;
            }
        }
    }

    pub fn apply_rzz(&mut self, a: usize, b: usize, theta: f64) {
        // Z⊗Z eigenvalue is +1 when the two bits agree.
        let same = Complex64::cis(-theta / 2.0);
        let diff = same.conj();
        for (i, amp) in self.amplitudes.iter_mut().enumerate() {
            let parity = ((i >> a) ^ (i >> b)) & 1;
            *amp *= if parity == 0 { same } else { diff };
        }
    }

    /// Applies `gate` with its resolved angles (`angles.len() == gate.num_angles()`).
    pub fn apply_gate(&mut self, gate: &Gate, angles: &[f64]) -> Result<()> {
        gate.validate(self.num_qubits)?;
        if angles.len() != gate.num_angles() {
            return Err(Error::config(format!(
                "{gate:?} takes {} angles, got {}",
                gate.num_angles(),
                angles.len()
            )));
        }
        self.apply_unchecked(gate, angles, false);
        Ok(())
    }

    fn apply_unchecked(&mut self, gate: &Gate, angles: &[f64], inverse: bool) {
        match *gate {
            Gate::U3 { qubit } => {
                let m = u3_matrix(angles[0], angles[1], angles[2]);
                let m = if inverse { adjoint2(&m) } else { m };
                self.apply_single(qubit, &m);
            }
            Gate::Cz { a, b } => self.apply_cz(a, b),
            Gate::Rzz { a, b } => {
                let theta = if inverse { -angles[0] } else { angles[0] };
                self.apply_rzz(a, b, theta);
            }
        }
    }

    /// `⟨ψ|X_q|ψ⟩` for every qubit, in qubit order.
    pub fn pauli_x_expectations(&self) -> Vec<f64> {
        (0..self.num_qubits)
            .map(|q| {
                let stride = 1usize << q;
                let mut acc = 0.0;
                for block in (0..self.amplitudes.len()).step_by(stride << 1) {
                    for i in block..block + stride {
                        acc += (self.amplitudes[i].conj() * self.amplitudes[i + stride]).re;
                    }
                }
                2.0 * acc
            })
            .collect()
    }

    /// `Σ_q w_q X_q |ψ⟩`.
    fn weighted_x(&self, weights: &[f64]) -> Vec<Complex64> {
        let mut out = vec![ZERO; self.amplitudes.len()];
        for (q, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let bit = 1usize << q;
            for (i, o) in out.iter_mut().enumerate() {
                *o += self.amplitudes[i ^ bit] * w;
            }
        }
        out
    }
}

/// Ordered gate list on a fixed register. Angles are supplied as one flat
/// slice consumed gate by gate.
#[derive(Debug, Clone, PartialEq)]
pub struct Circuit {
    num_qubits: usize,
    gates: Vec<Gate>,
    num_angles: usize,
}

impl Circuit {
    pub fn new(num_qubits: usize, gates: Vec<Gate>) -> Result<Self> {
        if num_qubits == 0 || num_qubits > 20 {
            return Err(Error::config(format!("unsupported qubit count {num_qubits}")));
        }
        for g in &gates {
            g.validate(num_qubits)?;
        }
        let num_angles = gates.iter().map(Gate::num_angles).sum();
        Ok(Self { num_qubits, gates, num_angles })
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    pub fn num_angles(&self) -> usize {
        self.num_angles
    }

    /// Circuit that undoes this one when run with [`Circuit::inverse_angles`].
    pub fn inverse(&self) -> Self {
        Self {
            num_qubits: self.num_qubits,
            gates: self.gates.iter().rev().copied().collect(),
            num_angles: self.num_angles,
        }
    }

    /// Angle list for [`Circuit::inverse`]: U3(θ,λ,δ)† = U3(−θ,−δ,−λ), RZZ(θ)† = RZZ(−θ).
    pub fn inverse_angles(&self, angles: &[f64]) -> Vec<f64> {
        let mut chunks = Vec::with_capacity(self.gates.len());
        let mut offset = 0;
        for g in &self.gates {
            let k = g.num_angles();
            let a = &angles[offset..offset + k];
            chunks.push(match g {
                Gate::U3 { .. } => vec![-a[0], -a[2], -a[1]],
                Gate::Rzz { .. } => vec![-a[0]],
                Gate::Cz { .. } => vec![],
            });
            offset += k;
        }
        chunks.into_iter().rev().flatten().collect()
    }

    fn check_angles(&self, angles: &[f64]) -> Result<()> {
        if angles.len() != self.num_angles {
            return Err(Error::config(format!(
                "circuit has {} angle slots, got {} angles",
                self.num_angles,
                angles.len()
            )));
        }
        Ok(())
    }

    /// Runs the circuit from |0…0⟩.
    pub fn run(&self, angles: &[f64]) -> Result<StateVector> {
        self.check_angles(angles)?;
        let mut state = StateVector::zero(self.num_qubits);
        let mut offset = 0;
        for g in &self.gates {
            let k = g.num_angles();
            state.apply_unchecked(g, &angles[offset..offset + k], false);
            offset += k;
        }
        Ok(state)
    }

    pub fn expectations(&self, angles: &[f64]) -> Result<Vec<f64>> {
        Ok(self.run(angles)?.pauli_x_expectations())
    }

    /// Vector-Jacobian product: returns the expectations and
    /// `Σ_q upstream[q] · ∂⟨X_q⟩/∂angle` for every angle slot, from one
    /// forward pass and one adjoint sweep.
    pub fn expectation_vjp(&self, angles: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.expectation_vjp_with(angles, |_| Ok(upstream.to_vec()))
    }

    /// Like [`Circuit::expectation_vjp`], but the upstream weights are computed
    /// from the forward expectations, so a loss can be evaluated and
    /// differentiated without a second forward pass.
    pub fn expectation_vjp_with<F>(&self, angles: &[f64], upstream_of: F) -> Result<(Vec<f64>, Vec<f64>)>
    where
        F: FnOnce(&[f64]) -> Result<Vec<f64>>,
    {
        let mut phi = self.run(angles)?;
        let values = phi.pauli_x_expectations();
        let upstream = upstream_of(&values)?;
        if upstream.len() != self.num_qubits {
            return Err(Error::config(format!(
                "upstream has {} entries, expected {}",
                upstream.len(),
                self.num_qubits
            )));
        }
        let mut lambda = StateVector {
            amplitudes: phi.weighted_x(&upstream),
            num_qubits: self.num_qubits,
        };
        let mut grad = vec![0.0; self.num_angles];
        let mut offset = self.num_angles;
        for g in self.gates.iter().rev() {
            let k = g.num_angles();
            offset -= k;
            let a = &angles[offset..offset + k];
            phi.apply_unchecked(g, a, true);
            match *g {
                Gate::U3 { qubit } => {
                    let overlap = pair_overlap(&lambda.amplitudes, &phi.amplitudes, qubit);
                    for (slot, d) in u3_derivatives(a[0], a[1], a[2]).iter().enumerate() {
                        let mut acc = ZERO;
                        for r in 0..2 {
                            for c in 0..2 {
                                acc += d[r][c] * overlap[r][c];
                            }
                        }
                        grad[offset + slot] = 2.0 * acc.re;
                    }
                }
                Gate::Rzz { a: qa, b: qb } => {
                    // d/dθ e^{−iθz/2} = −i z/2 · e^{−iθz/2}
                    let same = Complex64::cis(-a[0] / 2.0);
                    let diff = same.conj();
                    let mut acc = ZERO;
                    for (i, (l, p)) in lambda.amplitudes.iter().zip(&phi.amplitudes).enumerate() {
                        let parity = ((i >> qa) ^ (i >> qb)) & 1;
                        let (z, phase) = if parity == 0 { (1.0, same) } else { (-1.0, diff) };
                        acc += l.conj() * p * phase * Complex64::new(0.0, -z / 2.0);
                    }
                    grad[offset] = 2.0 * acc.re;
                }
                Gate::Cz { .. } => {}
            }
            lambda.apply_unchecked(g, a, true);
        }
        Ok((values, grad))
    }

    /// Full Jacobian `∂⟨X_q⟩/∂angle_k`, one row per qubit.
    pub fn gradient(&self, angles: &[f64]) -> Result<Vec<Vec<f64>>> {
        (0..self.num_qubits)
            .map(|q| {
                let mut unit = vec![0.0; self.num_qubits];
                unit[q] = 1.0;
                self.expectation_vjp(angles, &unit).map(|(_, g)| g)
            })
            .collect()
    }
}

/// `R[r][c] = Σ_pairs conj(λ_r) φ_c` over the amplitude pairs of `qubit`,
/// so that `⟨λ|D_qubit|φ⟩ = Σ D[r][c] R[r][c]` for any 2×2 `D`.
fn pair_overlap(lambda: &[Complex64], phi: &[Complex64], qubit: usize) -> Matrix2 {
    let stride = 1usize << qubit;
    let mut r = [[ZERO; 2]; 2];
    for block in (0..phi.len()).step_by(stride << 1) {
        for i in block..block + stride {
            let (l0, l1) = (lambda[i].conj(), lambda[i + stride].conj());
            let (p0, p1) = (phi[i], phi[i + stride]);
            r[0][0] += l0 * p0;
            r[0][1] += l0 * p1;
            r[1][0] += l1 * p0;
            r[1][1] += l1 * p1;
        }
    }
    r
}

/// Convenience wrapper matching the free-function form: runs `circuit` on `n` qubits.
pub fn run_circuit(gates: &[Gate], angles: &[f64], num_qubits: usize) -> Result<StateVector> {
    Circuit::new(num_qubits, gates.to_vec())?.run(angles)
}

/// Jacobian of every `⟨X_q⟩` with respect to every angle slot.
pub fn circuit_gradient(gates: &[Gate], angles: &[f64], num_qubits: usize) -> Result<Vec<Vec<f64>>> {
    Circuit::new(num_qubits, gates.to_vec())?.gradient(angles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_1_SQRT_2, PI};

    fn close(a: Complex64, b: Complex64, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn u3_zero_is_identity() {
        let m = u3_matrix(0.0, 0.0, 0.0);
        assert!(close(m[0][0], ONE, 1e-15) && close(m[1][1], ONE, 1e-15));
        assert!(close(m[0][1], ZERO, 1e-15) && close(m[1][0], ZERO, 1e-15));
    }

    #[test]
    fn u3_gives_x_and_hadamard() {
        let x = u3_matrix(PI, 0.0, PI);
        assert!(close(x[0][0], ZERO, 1e-12) && close(x[0][1], ONE, 1e-12));
        assert!(close(x[1][0], ONE, 1e-12) && close(x[1][1], ZERO, 1e-12));
        let h = u3_matrix(PI / 2.0, 0.0, PI);
        let s = Complex64::new(FRAC_1_SQRT_2, 0.0);
        assert!(close(h[0][0], s, 1e-12) && close(h[0][1], s, 1e-12));
        assert!(close(h[1][0], s, 1e-12) && close(h[1][1], -s, 1e-12));
    }

    #[test]
    fn rzz_fixtures() {
        let d = rzz_matrix(PI);
        let i = Complex64::i();
        assert!(close(d[0], -i, 1e-12) && close(d[1], i, 1e-12));
        assert!(close(d[2], i, 1e-12) && close(d[3], -i, 1e-12));
        for v in rzz_matrix(2.0 * PI) {
            assert!(close(v, -ONE, 1e-12));
        }
        for v in rzz_matrix(0.0) {
            assert!(close(v, ONE, 0.0));
        }
    }

    #[test]
    fn cz_on_ground_state_is_identity() {
        let mut s = StateVector::zero(8);
        s.apply_gate(&Gate::Cz { a: 0, b: 1 }, &[]).unwrap();
        assert_eq!(s, StateVector::zero(8));
    }

    #[test]
    fn x_flips_single_qubit() {
        let mut s = StateVector::zero(1);
        s.apply_gate(&Gate::U3 { qubit: 0 }, &[PI, 0.0, PI]).unwrap();
        assert!(close(s.amplitudes()[1], ONE, 1e-12));
        assert!(s.amplitudes()[0].norm() < 1e-12);
    }

    #[test]
    fn bad_targets_are_config_errors() {
        let mut s = StateVector::zero(2);
        assert!(matches!(s.apply_gate(&Gate::U3 { qubit: 2 }, &[0.0; 3]), Err(Error::Config(_))));
        assert!(matches!(s.apply_gate(&Gate::Cz { a: 1, b: 1 }, &[]), Err(Error::Config(_))));
        assert!(matches!(s.apply_gate(&Gate::Rzz { a: 0, b: 5 }, &[0.1]), Err(Error::Config(_))));
        assert!(Circuit::new(2, vec![Gate::U3 { qubit: 3 }]).is_err());
    }

    #[test]
    fn empty_circuit_is_ground_state() {
        let s = run_circuit(&[], &[], 8).unwrap();
        assert_eq!(s.amplitudes()[0], ONE);
        assert!(s.amplitudes()[1..].iter().all(|a| *a == ZERO));
    }

    #[test]
    fn x_on_qubit_zero_sets_bit_zero() {
        let s = run_circuit(&[Gate::U3 { qubit: 0 }], &[PI, 0.0, PI], 2).unwrap();
        assert!(close(s.amplitudes()[1], ONE, 1e-12));
    }

    #[test]
    fn plus_state_has_unit_x() {
        let s = run_circuit(&[Gate::U3 { qubit: 0 }], &[PI / 2.0, 0.0, PI], 3).unwrap();
        let x = s.pauli_x_expectations();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!(x[1].abs() < 1e-12 && x[2].abs() < 1e-12);
        assert!(StateVector::zero(8).pauli_x_expectations().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn slope_of_x_at_identity_is_one() {
        let g = circuit_gradient(&[Gate::U3 { qubit: 0 }], &[0.0, 0.0, 0.0], 1).unwrap();
        assert!((g[0][0] - 1.0).abs() < 1e-12);
        assert!(g[0][1].abs() < 1e-12 && g[0][2].abs() < 1e-12);
    }

    #[test]
    fn disjoint_gates_have_zero_gradient() {
        let gates = [Gate::U3 { qubit: 0 }, Gate::U3 { qubit: 1 }];
        let g = circuit_gradient(&gates, &[0.3, 0.2, -0.4, 1.1, 0.5, 0.9], 2).unwrap();
        assert!(g[0][3..].iter().all(|v| v.abs() < 1e-14));
        assert!(g[1][..3].iter().all(|v| v.abs() < 1e-14));
    }
}
