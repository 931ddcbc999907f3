//! Linear CKA between representation matrices, EMA smoothing of return
//! curves, and cross-seed aggregation of run statistics.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FEATURE_DIM};
use crate::env::{Action, Observation, Pong, PongConfig};
use crate::error::{Error, Result};
use crate::ppo::{stream_rng, EpisodeRecord};

/// `n × p` features for `n` probe inputs.
pub type RepresentationMatrix = DMatrix<f64>;

pub fn center_columns(m: &RepresentationMatrix) -> RepresentationMatrix {
    let mut out = m.clone();
    let n = m.nrows() as f64;
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
    out
}

fn check_representation(m: &RepresentationMatrix, name: &str) -> Result<()> {
    if m.nrows() < 2 || m.ncols() == 0 {
        return Err(Error::config(format!("{name} must have at least 2 rows and 1 column")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("{name} contains non-finite entries")));
    }
    Ok(())
}

/// Centered matrix plus `‖X̂ᵀX̂‖_F`, reusable across many CKA pairs.
#[derive(Debug, Clone)]
pub struct CenteredRepresentation {
    centered: RepresentationMatrix,
    self_norm: f64,
}

impl CenteredRepresentation {
    pub fn new(m: &RepresentationMatrix) -> Result<Self> {
        check_representation(m, "representation")?;
        let centered = center_columns(m);
        let self_norm = (centered.transpose() * &centered).norm();
        Ok(Self { centered, self_norm })
    }

    /// Zero after centering (every column constant).
    pub fn is_degenerate(&self) -> bool {
        !(self.self_norm > 1e-300) || self.centered.norm() <= 1e-12 * self.centered.len() as f64
    }

    pub fn cka(&self, other: &Self) -> Result<f64> {
        if self.centered.nrows() != other.centered.nrows() {
            return Err(Error::config(format!(
                "representations cover different inputs ({} vs {} rows)",
                self.centered.nrows(),
                other.centered.nrows()
            )));
        }
        if self.is_degenerate() || other.is_degenerate() {
            return Err(Error::UndefinedSimilarity("representation has zero variance after centering".into()));
        }
        let cross = (other.centered.transpose() * &self.centered).norm_squared();
        Ok(cross / (self.self_norm * other.self_norm))
    }
}

/// `‖ŶᵀX̂‖²_F / (‖X̂ᵀX̂‖_F ‖ŶᵀŶ‖_F)`.
pub fn linear_cka(x: &RepresentationMatrix, y: &RepresentationMatrix) -> Result<f64> {
    check_representation(y, "Y")?;
    CenteredRepresentation::new(x)?.cka(&CenteredRepresentation::new(y)?)
}

/// A labelled representation going into a heatmap.
#[derive(Debug, Clone)]
pub struct LabelledRepresentation {
    pub label: String,
    pub group: String,
    pub matrix: RepresentationMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaHeatmap {
    pub labels: Vec<String>,
    pub groups: Vec<String>,
    /// `null` where a representation has zero variance (CKA undefined).
    pub values: Vec<Vec<Option<f64>>>,
    pub degenerate: Vec<String>,
}

/// Pairwise linear CKA over runs that were all evaluated on the same probes.
pub fn cka_heatmap(reps: &[LabelledRepresentation]) -> Result<CkaHeatmap> {
    if reps.is_empty() {
        return Err(Error::usage("no representations to compare"));
    }
    let rows = reps[0].matrix.nrows();
    if let Some(bad) = reps.iter().find(|r| r.matrix.nrows() != rows) {
        return Err(Error::config(format!(
            "probe mismatch: {} has {} rows, expected {rows}",
            bad.label,
            bad.matrix.nrows()
        )));
    }
    let centered = reps
        .iter()
        .map(|r| CenteredRepresentation::new(&r.matrix))
        .collect::<Result<Vec<_>>>()?;
    let n = reps.len();
    let mut values = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = match centered[i].cka(&centered[j]) {
                Ok(v) => Some(if i == j { 1.0 } else { v }),
                Err(Error::UndefinedSimilarity(_)) => None,
                Err(e) => return Err(e),
            };
            values[i][j] = v;
            values[j][i] = v;
        }
    }
    Ok(CkaHeatmap {
        labels: reps.iter().map(|r| r.label.clone()).collect(),
        groups: reps.iter().map(|r| r.group.clone()).collect(),
        values,
        degenerate: reps
            .iter()
            .zip(&centered)
            .filter(|(_, c)| c.is_degenerate())
            .map(|(r, _)| r.label.clone())
            .collect(),
    })
}

/// Debiased EMA: `m_k = α m_{k−1} + (1−α) y_k`, reported as `m_k / (1 − α^{k+1})`.
pub fn ema_smooth(series: &[(u64, f64)], alpha: f64) -> Result<Vec<(u64, f64)>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("smoothing weight must lie in (0, 1), got {alpha}")));
    }
    let mut m = 0.0;
    let mut decay = 1.0;
    Ok(series
        .iter()
        .map(|&(step, y)| {
            m = alpha * m + (1.0 - alpha) * y;
            decay *= alpha;
            (step, m / (1.0 - decay))
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateOptions {
    pub ema_alpha: f64,
    /// Fraction of each run's steps treated as the final stage for raw maxima.
    pub tail_fraction: f64,
}

impl Default for AggregateOptions {
    fn default() -> Self {
        Self { ema_alpha: 0.95, tail_fraction: 0.05 }
    }
}

/// Cross-seed statistics of one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunStatistics {
    pub runs: usize,
    /// Mean and population std of each run's last smoothed return.
    pub return_mean: f64,
    pub return_std: f64,
    /// Max raw (unsmoothed) return over every run's final stage.
    pub return_max: i32,
    pub length_mean: f64,
    pub length_std: f64,
    pub length_max: u64,
    pub length_min: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub stats: RunStatistics,
    pub curve: Vec<CurvePoint>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn tail<'a>(episodes: &'a [EpisodeRecord], fraction: f64) -> impl Iterator<Item = &'a EpisodeRecord> {
    let last = episodes.last().map_or(0, |e| e.global_step);
    let cutoff = (last as f64 * (1.0 - fraction)).floor() as u64;
    episodes.iter().filter(move |e| e.global_step >= cutoff)
}

/// Aggregates runs of one configuration. Every run must contain at least one
/// finished episode.
pub fn aggregate_runs(runs: &[Vec<EpisodeRecord>], opts: &AggregateOptions) -> Result<Aggregate> {
    if runs.is_empty() {
        return Err(Error::usage("no runs to aggregate"));
    }
    if let Some(i) = runs.iter().position(|r| r.is_empty()) {
        return Err(Error::usage(format!("run {i} has no finished episodes")));
    }
    let smoothed = |f: &dyn Fn(&EpisodeRecord) -> f64| {
        runs.iter()
            .map(|r| ema_smooth(&r.iter().map(|e| (e.global_step, f(e))).collect::<Vec<_>>(), opts.ema_alpha))
            .collect::<Result<Vec<_>>>()
    };
    let returns = smoothed(&|e| f64::from(e.episode_return))?;
    let lengths = smoothed(&|e| e.episode_length as f64)?;
    let finals = |s: &[Vec<(u64, f64)>]| s.iter().map(|r| r.last().map_or(0.0, |p| p.1)).collect::<Vec<_>>();
    let (return_mean, return_std) = mean_std(&finals(&returns));
    let (length_mean, length_std) = mean_std(&finals(&lengths));
    let tails: Vec<&EpisodeRecord> = runs.iter().flat_map(|r| tail(r, opts.tail_fraction)).collect();
    let stats = RunStatistics {
        runs: runs.len(),
        return_mean,
        return_std,
        return_max: tails.iter().map(|e| e.episode_return).max().unwrap_or(0),
        length_mean,
        length_std,
        length_max: tails.iter().map(|e| e.episode_length).max().unwrap_or(0),
        length_min: tails.iter().map(|e| e.episode_length).min().unwrap_or(0),
    };
    Ok(Aggregate { stats, curve: envelope(&returns) })
}

/// Mean/min/max across runs on the union of their step grids, carrying each
/// run's last value forward. Starts where every run has a value.
fn envelope(series: &[Vec<(u64, f64)>]) -> Vec<CurvePoint> {
    let start = series.iter().map(|s| s[0].0).max().unwrap_or(0);
    let grid: BTreeSet<u64> = series.iter().flatten().map(|p| p.0).filter(|&s| s >= start).collect();
    let mut cursors = vec![0usize; series.len()];
    grid.into_iter()
        .map(|step| {
            let vals: Vec<f64> = series
                .iter()
                .zip(cursors.iter_mut())
                .map(|(s, c)| {
                    while *c + 1 < s.len() && s[*c + 1].0 <= step {
                        *c += 1;
                    }
                    s[*c].1
                })
                .collect();
            let (mean, _) = mean_std(&vals);
            CurvePoint {
                step,
                mean,
                min: vals.iter().copied().fold(f64::INFINITY, f64::min),
                max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

/// Fixed probe observations shared by every backbone being compared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub seed: u64,
    pub policy: String,
    pub observations: Vec<Observation>,
}

impl ProbeSet {
    /// Rolls a uniform-random policy and records every visited observation.
    pub fn collect(env_cfg: &PongConfig, count: usize, seed: u64) -> Result<Self> {
        use rand::Rng;
        let mut env = Pong::new(*env_cfg, seed)?;
        let mut rng = stream_rng(seed, 1);
        let mut observations = Vec::with_capacity(count);
        let mut obs = env.observation();
        while observations.len() < count {
            observations.push(obs);
            let step = env.step(Action::from_index(rng.random_range(0..3))?)?;
            obs = if step.done() { env.reset_episode() } else { step.observation };
        }
        Ok(Self { seed, policy: "uniform-random".into(), observations })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// Backbone features for every probe, one row per observation.
pub fn representations(backbone: &Backbone, params: &[f64], probes: &ProbeSet) -> Result<RepresentationMatrix> {
    let mut m = DMatrix::zeros(probes.len(), FEATURE_DIM);
    for (i, obs) in probes.observations.iter().enumerate() {
        let f = backbone.forward(params, obs)?;
        for (j, v) in f.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ep(step: u64, ret: i32) -> EpisodeRecord {
        EpisodeRecord { global_step: step, env: 0, episode_return: ret, episode_length: 100, truncated: false }
    }

    #[test]
    fn constant_column_centers_to_zero() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        let c = center_columns(&m);
        assert!(c.column(1).iter().all(|v| *v == 0.0));
        let again = center_columns(&c);
        assert!((again - &c).abs().max() < 1e-12);
    }

    #[test]
    fn self_similarity_is_one() {
        let x = DMatrix::from_fn(10, 3, |i, j| ((i * 7 + j * 3) as f64).sin());
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_is_reported() {
        let x = DMatrix::from_fn(10, 3, |i, j| ((i * 7 + j * 3) as f64).sin());
        let y = DMatrix::from_element(10, 2, 4.0);
        assert!(matches!(linear_cka(&x, &y), Err(Error::UndefinedSimilarity(_))));
    }

    #[test]
    fn heatmap_single_and_mismatch() {
        let x = DMatrix::from_fn(6, 2, |i, j| (i as f64 + 1.0) * (j as f64 + 0.5).cos());
        let r = LabelledRepresentation { label: "a".into(), group: "g".into(), matrix: x.clone() };
        let h = cka_heatmap(std::slice::from_ref(&r)).unwrap();
        assert_eq!(h.values, vec![vec![Some(1.0)]]);
        let short = LabelledRepresentation { label: "b".into(), group: "g".into(), matrix: x.rows(0, 4).into_owned() };
        assert!(matches!(cka_heatmap(&[r, short]), Err(Error::Config(_))));
    }

    #[test]
    fn ema_fixtures() {
        let s = ema_smooth(&[(1, 0.0), (2, 10.0)], 0.5).unwrap();
        assert_eq!(s[0].1, 0.0);
        assert!((s[1].1 - 20.0 / 3.0).abs() < 1e-12);
        let c = ema_smooth(&[(1, 3.0), (2, 3.0), (3, 3.0)], 0.9).unwrap();
        assert!(c.iter().all(|p| (p.1 - 3.0).abs() < 1e-12));
        let raw = [(1, 1.0), (2, -4.0), (3, 7.0)];
        let tiny = ema_smooth(&raw, 1e-12).unwrap();
        for (a, b) in tiny.iter().zip(&raw) {
            assert!((a.1 - b.1).abs() < 1e-9);
        }
        assert!(ema_smooth(&raw, 1.0).is_err());
    }

    #[test]
    fn single_run_statistics() {
        let agg = aggregate_runs(&[vec![ep(128, 5)]], &AggregateOptions::default()).unwrap();
        assert_eq!((agg.stats.return_mean, agg.stats.return_std, agg.stats.return_max), (5.0, 0.0, 5));
    }

    #[test]
    fn all_losing_runs() {
        let runs: Vec<_> = (0..10).map(|_| vec![ep(100, -21), ep(200, -21)]).collect();
        let agg = aggregate_runs(&runs, &AggregateOptions::default()).unwrap();
        assert!((agg.stats.return_mean + 21.0).abs() < 1e-12);
        assert!(agg.stats.return_std.abs() < 1e-12);
        assert_eq!(agg.stats.return_max, -21);
    }

    #[test]
    fn empty_records_rejected() {
        assert!(matches!(aggregate_runs(&[], &AggregateOptions::default()), Err(Error::Usage(_))));
    }

    #[test]
    fn envelope_carries_forward() {
        let runs = vec![vec![ep(10, 0), ep(30, 10)], vec![ep(20, 4)]];
        let opts = AggregateOptions { ema_alpha: 1e-9, tail_fraction: 0.05 };
        let agg = aggregate_runs(&runs, &opts).unwrap();
        let steps: Vec<u64> = agg.curve.iter().map(|p| p.step).collect();
        assert_eq!(steps, vec![20, 30]);
        assert!((agg.curve[0].mean - 2.0).abs() < 1e-6);
        assert!((agg.curve[1].max - 10.0).abs() < 1e-6 && (agg.curve[1].min - 4.0).abs() < 1e-6);
    }
}
