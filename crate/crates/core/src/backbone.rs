//! Feature-extractor backbones: three data-reuploading circuit variants and
//! a bias-free one-hidden-layer MLP, all mapping an 8-dim observation to an
//! 8-dim feature vector.
//!
//! Circuit parameters are laid out layer by layer. Within a layer, qubit `i`
//! owns six consecutive scalars `[w0, w1, w2, b0, b1, b2]` feeding
//! `U3(w0·x_i + b0, w1·x_i + b1, w2·x_i + b2)`; IsingZZ layers append one angle
//! per entangling pair.

use std::f64::consts::PI;
use std::fmt;

use rand::Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{tanh_backward, tanh_forward, Dense};
use crate::quantum::{Circuit, Gate};

pub const NUM_QUBITS: usize = 8;
pub const FEATURE_DIM: usize = 8;
pub const OBS_DIM: usize = 8;
/// Trainable scalars per (qubit, layer) in the affine input map.
pub const AFFINE_PARAMS: usize = 6;

pub type Features = [f64; FEATURE_DIM];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    /// `(i, i+1 mod n)` for every qubit: `n` pairs.
    #[default]
    Ring,
    /// `(i, i+1)` for `i < n−1`: `n−1` pairs.
    Chain,
}

impl Topology {
    pub fn pairs(&self, n: usize) -> Vec<(usize, usize)> {
        match self {
            Topology::Ring => (0..n).map(|i| (i, (i + 1) % n)).collect(),
            Topology::Chain => (0..n - 1).map(|i| (i, i + 1)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    Separable,
    CzEntangled,
    #[serde(rename = "isingzz-entangled")]
    IsingZzEntangled,
    ClassicalMlp,
}

impl BackboneKind {
    pub fn label(&self) -> &'static str {
        match self {
            BackboneKind::Separable => "Separable",
            BackboneKind::CzEntangled => "CZ-entangled",
            BackboneKind::IsingZzEntangled => "IsingZZ-entangled",
            BackboneKind::ClassicalMlp => "Classical",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BackboneConfig {
    Separable {
        layers: usize,
    },
    CzEntangled {
        layers: usize,
        #[serde(default)]
        topology: Topology,
    },
    #[serde(rename = "isingzz-entangled")]
    IsingZzEntangled {
        layers: usize,
        #[serde(default)]
        topology: Topology,
    },
    ClassicalMlp {
        hidden: usize,
    },
}

impl BackboneConfig {
    pub fn separable(layers: usize) -> Self {
        Self::Separable { layers }
    }

    pub fn cz(layers: usize) -> Self {
        Self::CzEntangled { layers, topology: Topology::Ring }
    }

    pub fn ising_zz(layers: usize) -> Self {
        Self::IsingZzEntangled { layers, topology: Topology::Ring }
    }

    pub fn mlp(hidden: usize) -> Self {
        Self::ClassicalMlp { hidden }
    }

    pub fn kind(&self) -> BackboneKind {
        match self {
            Self::Separable { .. } => BackboneKind::Separable,
            Self::CzEntangled { .. } => BackboneKind::CzEntangled,
            Self::IsingZzEntangled { .. } => BackboneKind::IsingZzEntangled,
            Self::ClassicalMlp { .. } => BackboneKind::ClassicalMlp,
        }
    }

    pub fn layers(&self) -> Option<usize> {
        match *self {
            Self::Separable { layers }
            | Self::CzEntangled { layers, .. }
            | Self::IsingZzEntangled { layers, .. } => Some(layers),
            Self::ClassicalMlp { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let size = match *self {
            Self::ClassicalMlp { hidden } => hidden,
            _ => self.layers().unwrap_or(0),
        };
        if size == 0 {
            return Err(Error::config(format!("{self}: size must be positive")));
        }
        Ok(())
    }

    /// Trainable parameters in one circuit layer (PQC kinds only).
    pub fn params_per_layer(&self) -> Option<usize> {
        let single = AFFINE_PARAMS * NUM_QUBITS;
        match *self {
            Self::Separable { .. } | Self::CzEntangled { .. } => Some(single),
            Self::IsingZzEntangled { topology, .. } => Some(single + topology.pairs(NUM_QUBITS).len()),
            Self::ClassicalMlp { .. } => None,
        }
    }

    pub fn parameter_count(&self) -> usize {
        match *self {
            Self::ClassicalMlp { hidden } => OBS_DIM * hidden + hidden * FEATURE_DIM,
            _ => self.params_per_layer().unwrap_or(0) * self.layers().unwrap_or(0),
        }
    }

    /// Filesystem-safe identifier, e.g. `cz-entangled-l2`, `classical-mlp-h64`.
    pub fn slug(&self) -> String {
        let topo = |t: &Topology| match t {
            Topology::Ring => "",
            Topology::Chain => "-chain",
        };
        match self {
            Self::Separable { layers } => format!("separable-l{layers}"),
            Self::CzEntangled { layers, topology } => format!("cz-entangled-l{layers}{}", topo(topology)),
            Self::IsingZzEntangled { layers, topology } => {
                format!("isingzz-entangled-l{layers}{}", topo(topology))
            }
            Self::ClassicalMlp { hidden } => format!("classical-mlp-h{hidden}"),
        }
    }
}

impl fmt::Display for BackboneConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.slug())
    }
}

/// Where a circuit angle comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AngleSource {
    /// `params[weight] · obs[input] + params[bias]`
    Affine { weight: usize, bias: usize, input: usize },
    /// `params[index]` directly.
    Param(usize),
}

/// Gate program plus the binding of every angle slot to parameters and inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct CircuitSpec {
    pub circuit: Circuit,
    pub sources: Vec<AngleSource>,
}

impl CircuitSpec {
    pub fn resolve(&self, params: &[f64], obs: &[f64]) -> Vec<f64> {
        self.sources
            .iter()
            .map(|s| match *s {
                AngleSource::Affine { weight, bias, input } => params[weight] * obs[input] + params[bias],
                AngleSource::Param(i) => params[i],
            })
            .collect()
    }

    /// Accumulates the chain rule from angle gradients into parameter and
    /// observation gradients.
    pub fn pull_back(&self, angle_grad: &[f64], params: &[f64], obs: &[f64], param_grad: &mut [f64], obs_grad: &mut [f64]) {
        for (s, g) in self.sources.iter().zip(angle_grad) {
            match *s {
                AngleSource::Affine { weight, bias, input } => {
                    param_grad[weight] += g * obs[input];
                    param_grad[bias] += g;
                    obs_grad[input] += g * params[weight];
                }
                AngleSource::Param(i) => param_grad[i] += g,
            }
        }
    }

    pub fn two_qubit_gates(&self) -> usize {
        self.circuit.gates().iter().filter(|g| g.is_two_qubit()).count()
    }

    pub fn u3_gates(&self) -> usize {
        self.circuit.gates().len() - self.two_qubit_gates()
    }
}

fn encoding_sources(layer_offset: usize, qubit: usize) -> [AngleSource; 3] {
    let base = layer_offset + qubit * AFFINE_PARAMS;
    std::array::from_fn(|k| AngleSource::Affine { weight: base + k, bias: base + 3 + k, input: qubit })
}

/// Builds the full 8-qubit gate program: per layer, one U3 per qubit, then
/// the entangling block (none, CZ, or RZZ) over the topology's pairs.
pub fn build_pqc_circuit(config: &BackboneConfig) -> Result<CircuitSpec> {
    config.validate()?;
    let (layers, entangler, pairs) = match *config {
        BackboneConfig::Separable { layers } => (layers, None, vec![]),
        BackboneConfig::CzEntangled { layers, topology } => (layers, Some(false), topology.pairs(NUM_QUBITS)),
        BackboneConfig::IsingZzEntangled { layers, topology } => {
            (layers, Some(true), topology.pairs(NUM_QUBITS))
        }
        BackboneConfig::ClassicalMlp { .. } => {
            return Err(Error::config("classical MLP backbone has no circuit"));
        }
    };
    let per_layer = config.params_per_layer().unwrap_or(0);
    let mut gates = Vec::new();
    let mut sources = Vec::new();
    for l in 0..layers {
        let offset = l * per_layer;
        for q in 0..NUM_QUBITS {
            gates.push(Gate::U3 { qubit: q });
            sources.extend(encoding_sources(offset, q));
        }
        match entangler {
            Some(false) => gates.extend(pairs.iter().map(|&(a, b)| Gate::Cz { a, b })),
            Some(true) => {
                for (k, &(a, b)) in pairs.iter().enumerate() {
                    gates.push(Gate::Rzz { a, b });
                    sources.push(AngleSource::Param(offset + AFFINE_PARAMS * NUM_QUBITS + k));
                }
            }
            None => {}
        }
    }
    Ok(CircuitSpec { circuit: Circuit::new(NUM_QUBITS, gates)?, sources })
}

/// One-qubit program for qubit `q` of a separable circuit. Parameter indices
/// still point into the full parameter vector.
fn separable_qubit_circuit(layers: usize, qubit: usize) -> Result<CircuitSpec> {
    let per_layer = AFFINE_PARAMS * NUM_QUBITS;
    let gates = vec![Gate::U3 { qubit: 0 }; layers];
    let sources = (0..layers)
        .flat_map(|l| {
            encoding_sources(l * per_layer, qubit).map(|s| match s {
                AngleSource::Affine { weight, bias, .. } => AngleSource::Affine { weight, bias, input: 0 },
                other => other,
            })
        })
        .collect();
    Ok(CircuitSpec { circuit: Circuit::new(1, gates)?, sources })
}

#[derive(Debug, Clone)]
enum Extractor {
    /// Product state: simulated as eight independent one-qubit registers, so
    /// feature `i` is computed from `x_i` alone.
    Separable(Vec<CircuitSpec>),
    Entangled(CircuitSpec),
    Mlp { hidden: Dense, output: Dense },
}

#[derive(Debug, Clone)]
pub struct BackboneGrad {
    pub features: Features,
    pub param_grad: Vec<f64>,
    pub obs_grad: [f64; OBS_DIM],
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    extractor: Extractor,
    num_params: usize,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let extractor = match config {
            BackboneConfig::Separable { layers } => Extractor::Separable(
                (0..NUM_QUBITS).map(|q| separable_qubit_circuit(layers, q)).collect::<Result<_>>()?,
            ),
            BackboneConfig::CzEntangled { .. } | BackboneConfig::IsingZzEntangled { .. } => {
                Extractor::Entangled(build_pqc_circuit(&config)?)
            }
            BackboneConfig::ClassicalMlp { hidden } => Extractor::Mlp {
                hidden: Dense::new(OBS_DIM, hidden, false),
                output: Dense::new(hidden, FEATURE_DIM, false),
            },
        };
        Ok(Self { config, extractor, num_params: config.parameter_count() })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    /// PQC: weights ~ N(0, 1), biases and RZZ angles ~ U(−π, π).
    /// MLP: orthogonal weights with gain √2.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match &self.extractor {
            Extractor::Mlp { hidden, output } => {
                let mut p = hidden.init(2f64.sqrt(), rng);
                p.extend(output.init(2f64.sqrt(), rng));
                p
            }
            _ => {
                let per_layer = self.config.params_per_layer().unwrap_or(0);
                let angle = Uniform::new(-PI, PI).expect("valid range");
                (0..self.num_params)
                    .map(|i| {
                        let j = i % per_layer;
                        if j < AFFINE_PARAMS * NUM_QUBITS && j % AFFINE_PARAMS < 3 {
                            rng.sample(StandardNormal)
                        } else {
                            rng.sample(angle)
                        }
                    })
                    .collect()
            }
        }
    }

    fn check(&self, params: &[f64], obs: &[f64]) -> Result<()> {
        if params.len() != self.num_params {
            return Err(Error::config(format!(
                "{} expects {} parameters, got {}",
                self.config,
                self.num_params,
                params.len()
            )));
        }
        if obs.len() != OBS_DIM {
            return Err(Error::config(format!("observation must have {OBS_DIM} elements, got {}", obs.len())));
        }
        Ok(())
    }

    pub fn forward(&self, params: &[f64], obs: &[f64]) -> Result<Features> {
        self.check(params, obs)?;
        let mut out = [0.0; FEATURE_DIM];
        match &self.extractor {
            Extractor::Separable(qubits) => {
                for (q, spec) in qubits.iter().enumerate() {
                    let angles = spec.resolve(params, &obs[q..q + 1]);
                    out[q] = spec.circuit.expectations(&angles)?[0];
                }
            }
            Extractor::Entangled(spec) => {
                let angles = spec.resolve(params, obs);
                out.copy_from_slice(&spec.circuit.expectations(&angles)?);
            }
            Extractor::Mlp { hidden, output } => {
                let (p1, p2) = params.split_at(hidden.num_params());
                let h = tanh_forward(&hidden.forward(p1, obs)?);
                out.copy_from_slice(&output.forward(p2, &h)?);
            }
        }
        Ok(out)
    }

    /// `Jᵀ · upstream` for the parameters and the observation.
    pub fn backward(&self, params: &[f64], obs: &[f64], upstream: &[f64]) -> Result<BackboneGrad> {
        if upstream.len() != FEATURE_DIM {
            return Err(Error::config(format!("upstream must have {FEATURE_DIM} elements")));
        }
        let mut u = [0.0; FEATURE_DIM];
        u.copy_from_slice(upstream);
        self.backward_with(params, obs, |_| Ok(u))
    }

    /// Backward pass whose upstream gradient is computed from the forward
    /// features, sharing one forward evaluation.
    pub fn backward_with<F>(&self, params: &[f64], obs: &[f64], upstream_of: F) -> Result<BackboneGrad>
    where
        F: FnOnce(&Features) -> Result<Features>,
    {
        self.check(params, obs)?;
        let mut features = [0.0; FEATURE_DIM];
        let mut param_grad = vec![0.0; self.num_params];
        let mut obs_grad = [0.0; OBS_DIM];
        match &self.extractor {
            Extractor::Separable(qubits) => {
                let mut angles = Vec::with_capacity(NUM_QUBITS);
                for (q, spec) in qubits.iter().enumerate() {
                    let a = spec.resolve(params, &obs[q..q + 1]);
                    features[q] = spec.circuit.expectations(&a)?[0];
                    angles.push(a);
                }
                let upstream = upstream_of(&features)?;
                for (q, spec) in qubits.iter().enumerate() {
                    let x = &obs[q..q + 1];
                    let (_, g) = spec.circuit.expectation_vjp(&angles[q], &upstream[q..q + 1])?;
                    spec.pull_back(&g, params, x, &mut param_grad, &mut obs_grad[q..q + 1]);
                }
            }
            Extractor::Entangled(spec) => {
                let angles = spec.resolve(params, obs);
                let (values, g) = spec.circuit.expectation_vjp_with(&angles, |values| {
                    let mut f = [0.0; FEATURE_DIM];
                    f.copy_from_slice(values);
                    Ok(upstream_of(&f)?.to_vec())
                })?;
                features.copy_from_slice(&values);
                spec.pull_back(&g, params, obs, &mut param_grad, &mut obs_grad);
            }
            Extractor::Mlp { hidden, output } => {
                let (p1, p2) = params.split_at(hidden.num_params());
                let h = tanh_forward(&hidden.forward(p1, obs)?);
                features.copy_from_slice(&output.forward(p2, &h)?);
                let upstream = upstream_of(&features)?;
                let (g2, dh) = output.backward(p2, &h, &upstream)?;
                let dpre = tanh_backward(&h, &dh);
                let (g1, dx) = hidden.backward(p1, obs, &dpre)?;
                param_grad[..g1.len()].copy_from_slice(&g1);
                param_grad[g1.len()..].copy_from_slice(&g2);
                obs_grad.copy_from_slice(&dx);
            }
        }
        Ok(BackboneGrad { features, param_grad, obs_grad })
    }
}

pub fn parameter_count(config: &BackboneConfig) -> usize {
    config.parameter_count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gate_counts() {
        let s = build_pqc_circuit(&BackboneConfig::separable(1)).unwrap();
        assert_eq!((s.u3_gates(), s.two_qubit_gates()), (8, 0));
        let c = build_pqc_circuit(&BackboneConfig::cz(3)).unwrap();
        assert_eq!((c.u3_gates(), c.two_qubit_gates()), (24, 24));
        let z = build_pqc_circuit(&BackboneConfig::ising_zz(2)).unwrap();
        assert_eq!((z.u3_gates(), z.two_qubit_gates()), (16, 16));
        assert_eq!(BackboneConfig::ising_zz(2).parameter_count(), 112);
        assert!(build_pqc_circuit(&BackboneConfig::mlp(4)).is_err());
    }

    #[test]
    fn every_parameter_is_bound() {
        for cfg in [BackboneConfig::separable(2), BackboneConfig::cz(2), BackboneConfig::ising_zz(2)] {
            let spec = build_pqc_circuit(&cfg).unwrap();
            let mut hits = vec![0usize; cfg.parameter_count()];
            for s in &spec.sources {
                match *s {
                    AngleSource::Affine { weight, bias, .. } => {
                        hits[weight] += 1;
                        hits[bias] += 1;
                    }
                    AngleSource::Param(i) => hits[i] += 1,
                }
            }
            assert!(hits.iter().all(|h| *h == 1), "{cfg}");
        }
    }

    #[test]
    fn zero_params_give_zero_features() {
        let obs = [0.3, -0.2, 0.5, 0.1, -0.9, 0.4, 0.2, 0.6];
        for cfg in [BackboneConfig::separable(2), BackboneConfig::cz(2), BackboneConfig::ising_zz(1)] {
            let b = Backbone::new(cfg).unwrap();
            let f = b.forward(&vec![0.0; b.num_params()], &obs).unwrap();
            assert!(f.iter().all(|v| v.abs() < 1e-15), "{cfg}: {f:?}");
        }
    }

    #[test]
    fn single_qubit_closed_form() {
        // one U3 on |0⟩: ⟨X⟩ = sin θ cos λ
        let b = Backbone::new(BackboneConfig::separable(1)).unwrap();
        let mut p = vec![0.0; 48];
        p[..6].copy_from_slice(&[1.3, -0.7, 0.4, 0.2, 0.5, -1.1]);
        let x0 = 0.6;
        let obs = [x0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let theta = 1.3 * x0 + 0.2;
        let lambda = -0.7 * x0 + 0.5;
        let f = b.forward(&p, &obs).unwrap();
        assert!((f[0] - theta.sin() * lambda.cos()).abs() < 1e-14);
    }

    #[test]
    fn separable_factorization_matches_full_register() {
        let cfg = BackboneConfig::separable(2);
        let b = Backbone::new(cfg).unwrap();
        let spec = build_pqc_circuit(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = b.init_params(&mut rng);
        let obs: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let fast = b.forward(&p, &obs).unwrap();
        let full = spec.circuit.expectations(&spec.resolve(&p, &obs)).unwrap();
        for q in 0..8 {
            assert!((fast[q] - full[q]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_zero_grad() {
        let b = Backbone::new(BackboneConfig::ising_zz(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = b.init_params(&mut rng);
        let g = b.backward(&p, &[0.1; 8], &[0.0; 8]).unwrap();
        assert!(g.param_grad.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn separable_cross_qubit_grad_is_exact_zero() {
        let b = Backbone::new(BackboneConfig::separable(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = b.init_params(&mut rng);
        let mut upstream = [0.0; 8];
        upstream[3] = 1.0;
        let g = b.backward(&p, &[0.2, -0.4, 0.7, 0.1, 0.9, -0.3, 0.5, 0.0], &upstream).unwrap();
        for (i, v) in g.param_grad.iter().enumerate() {
            let qubit = (i % 48) / 6;
            if qubit != 3 {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn length_mismatch_rejected() {
        let b = Backbone::new(BackboneConfig::cz(1)).unwrap();
        assert!(matches!(b.forward(&[0.0; 47], &[0.0; 8]), Err(Error::Config(_))));
        assert!(b.forward(&[0.0; 48], &[0.0; 7]).is_err());
        assert!(Backbone::new(BackboneConfig::cz(0)).is_err());
    }

    #[test]
    fn toml_shape() {
        let cfg: BackboneConfig = toml::from_str("kind = \"isingzz-entangled\"\nlayers = 3\n").unwrap();
        assert_eq!(cfg, BackboneConfig::ising_zz(3));
        assert!(toml::from_str::<BackboneConfig>("kind = \"separable\"\nlayers = 1\nwidth = 2\n").is_err());
    }
}
