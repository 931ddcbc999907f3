use nalgebra::DMatrix;
use qpong::analysis::*;
use qpong::backbone::{Backbone, BackboneConfig};
use qpong::env::PongConfig;
use qpong::ppo::{stream_rng, EpisodeRecord};
use rand::Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut impl Rng, n: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))
}

/// HSIC route: K = XXᵀ, L = YYᵀ, H = I − 11ᵀ/n,
/// CKA = tr(KHLH) / sqrt(tr(KHKH) tr(LHLH)).
fn hsic_cka(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let n = x.nrows();
    let h = DMatrix::<f64>::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
    let k = &h * (x * x.transpose()) * &h;
    let l = &h * (y * y.transpose()) * &h;
    let hsic = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a * b).trace();
    hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
}

#[test]
fn cka_identities_on_random_pairs() {
    let mut rng = stream_rng(50, 0);
    for _ in 0..1000 {
        let n = rng.random_range(4..24);
        let (px, py) = (rng.random_range(1..8), rng.random_range(1..8));
        let x = gaussian(&mut rng, n, px);
        let y = gaussian(&mut rng, n, py);
        let q = gaussian(&mut rng, px, px).qr().q();
        let c: f64 = rng.random_range(0.01..100.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let xy = linear_cka(&x, &y).unwrap();
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-10);
        assert!((linear_cka(&(&x * &q), &y).unwrap() - xy).abs() < 1e-10);
        assert!((linear_cka(&(&x * c), &y).unwrap() - xy).abs() < 1e-10);
        assert!((linear_cka(&y, &x).unwrap() - xy).abs() < 1e-12);
        assert!((-1e-12..=1.0 + 1e-12).contains(&xy));
        assert!((hsic_cka(&x, &y) - xy).abs() < 1e-10);
    }
}

#[test]
fn cka_ignores_column_offsets() {
    let mut rng = stream_rng(51, 0);
    let x = gaussian(&mut rng, 30, 4);
    let y = gaussian(&mut rng, 30, 3);
    let shifted = DMatrix::from_fn(30, 4, |i, j| x[(i, j)] + 5.0 * j as f64 - 2.0);
    assert!((linear_cka(&shifted, &y).unwrap() - linear_cka(&x, &y).unwrap()).abs() < 1e-10);
}

#[test]
fn independent_representations_score_low() {
    let mut rng = stream_rng(52, 0);
    let x = gaussian(&mut rng, 2000, 2);
    let y = gaussian(&mut rng, 2000, 2);
    assert!(linear_cka(&x, &y).unwrap() < 0.02);
}

#[test]
fn degenerate_inputs() {
    let x = DMatrix::from_fn(10, 2, |i, j| (i * (j + 1)) as f64);
    assert!(matches!(linear_cka(&x, &DMatrix::from_element(10, 3, 2.0)), Err(qpong::Error::UndefinedSimilarity(_))));
    assert!(linear_cka(&x, &DMatrix::from_element(9, 2, 1.0)).is_err());
    let mut bad = x.clone();
    bad[(0, 0)] = f64::NAN;
    assert!(matches!(linear_cka(&bad, &x), Err(qpong::Error::Numeric(_))));
}

#[test]
fn heatmap_marks_degenerate_runs() {
    let mut rng = stream_rng(53, 0);
    let reps = vec![
        LabelledRepresentation { label: "a/0".into(), group: "a".into(), matrix: gaussian(&mut rng, 20, 3) },
        LabelledRepresentation { label: "b/0".into(), group: "b".into(), matrix: DMatrix::from_element(20, 8, 0.3) },
        LabelledRepresentation { label: "c/0".into(), group: "c".into(), matrix: gaussian(&mut rng, 20, 8) },
    ];
    let h = cka_heatmap(&reps).unwrap();
    assert_eq!(h.degenerate, vec!["b/0".to_string()]);
    assert_eq!(h.values[0][0], Some(1.0));
    assert_eq!(h.values[1][1], None);
    assert_eq!(h.values[0][1], None);
    assert_eq!(h.values[0][2], h.values[2][0]);
    assert!(h.values[0][2].is_some());
}

fn ep(step: u64, ret: i32, len: u64) -> EpisodeRecord {
    EpisodeRecord { global_step: step, env: 0, episode_return: ret, episode_length: len, truncated: false }
}

#[test]
fn aggregation_fixture_matches_hand_computation() {
    // α = 0.5, debiased: run A returns (−21, −19) → m = (−10.5, −14.75), ÷ (0.5, 0.75) → (−21, −59/3).
    // run B returns (−15, −11) → m = (−7.5, −9.25) ÷ (0.5, 0.75) → (−15, −37/3).
    let runs = vec![
        vec![ep(100, -21, 500), ep(200, -19, 700)],
        vec![ep(100, -15, 900), ep(200, -11, 1100)],
    ];
    let opts = AggregateOptions { ema_alpha: 0.5, tail_fraction: 0.5 };
    let agg = aggregate_runs(&runs, &opts).unwrap();
    let finals: [f64; 2] = [-59.0 / 3.0, -37.0 / 3.0];
    let mean = (finals[0] + finals[1]) / 2.0;
    let std = ((finals[0] - mean).powi(2) / 2.0 + (finals[1] - mean).powi(2) / 2.0).sqrt();
    assert!((agg.stats.return_mean - mean).abs() < 1e-12);
    assert!((agg.stats.return_std - std).abs() < 1e-12);
    assert_eq!(agg.stats.return_max, -11);
    // lengths: A → (500, 1900/3), B → (900, 3100/3)
    let lf = [(0.5 * 500.0 * 0.5 + 0.5 * 700.0) / 0.75, (0.5 * 900.0 * 0.5 + 0.5 * 1100.0) / 0.75];
    assert!((agg.stats.length_mean - (lf[0] + lf[1]) / 2.0).abs() < 1e-9);
    assert_eq!((agg.stats.length_min, agg.stats.length_max), (500, 1100));
    assert_eq!(agg.curve.len(), 2);
    assert!((agg.curve[1].min - -59.0 / 3.0).abs() < 1e-12 && (agg.curve[1].max - -37.0 / 3.0).abs() < 1e-12);
}

#[test]
fn tail_window_excludes_early_episodes() {
    let runs = vec![vec![ep(100, 20, 10), ep(9_000, -21, 10), ep(10_000, -20, 10)]];
    let agg = aggregate_runs(&runs, &AggregateOptions::default()).unwrap();
    assert_eq!(agg.stats.return_max, -20);
}

#[test]
fn probe_set_is_reproducible_and_feeds_representations() {
    let a = ProbeSet::collect(&PongConfig::default(), 300, 9).unwrap();
    let b = ProbeSet::collect(&PongConfig::default(), 300, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 300);
    let bb = Backbone::new(BackboneConfig::cz(1)).unwrap();
    let params = bb.init_params(&mut stream_rng(1, 0));
    let m = representations(&bb, &params, &a).unwrap();
    assert_eq!((m.nrows(), m.ncols()), (300, 8));
    let f = bb.forward(&params, &a.observations[17]).unwrap();
    for j in 0..8 {
        assert_eq!(m[(17, j)], f[j]);
    }
    assert!((linear_cka(&m, &m).unwrap() - 1.0).abs() < 1e-12);
}

proptest::proptest! {
    #[test]
    fn ema_stays_within_observed_range(vals in proptest::collection::vec(-21.0..21.0f64, 1..200), alpha in 0.0..0.999f64) {
        let series: Vec<(u64, f64)> = vals.iter().enumerate().map(|(i, &v)| (i as u64, v)).collect();
        let smooth = ema_smooth(&series, alpha).unwrap();
        let (lo, hi) = vals.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        for (_, s) in smooth {
            proptest::prop_assert!(s >= lo - 1e-9 && s <= hi + 1e-9);
        }
    }

    #[test]
    fn mean_std_matches_welford(vals in proptest::collection::vec(-100.0..100.0f64, 1..50)) {
        let (mut mean, mut m2) = (0.0, 0.0);
        for (k, &v) in vals.iter().enumerate() {
            let d = v - mean;
            mean += d / (k + 1) as f64;
            m2 += d * (v - mean);
        }
        let var: f64 = m2 / vals.len() as f64;
        let (m, s) = mean_std(&vals);
        proptest::prop_assert!((m - mean).abs() < 1e-10);
        proptest::prop_assert!((s - var.sqrt()).abs() < 1e-10);
    }
}
