use proptest::prelude::*;
use qpong::backbone::BackboneConfig;
use qpong::env::PongConfig;
use qpong::ppo::*;
use rand::Rng;

fn random_batch(agent: &Agent, params: &[f64], n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = stream_rng(seed, 7);
    (0..n)
        .map(|_| {
            let obs: [f64; 8] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let out = agent.evaluate(params, &obs).unwrap();
            let action = rng.random_range(0..3);
            let probs = qpong::nn::Categorical::new(out.logits).unwrap();
            // Old policy a small perturbation away, so ratios stay inside the clip range.
            let old_log_prob = probs.log_prob(action) + rng.random_range(-0.05..0.05);
            Sample {
                obs,
                action,
                old_log_prob,
                old_value: out.value + rng.random_range(-0.05..0.05),
                advantage: rng.random_range(-2.0..2.0),
                ret: rng.random_range(-2.0..2.0),
            }
        })
        .collect()
}

fn fd_check(bb: BackboneConfig, seed: u64) {
    let agent = Agent::new(bb).unwrap();
    let params = initial_params(&agent, seed, 0);
    let cfg = PpoConfig::default();
    let batch = random_batch(&agent, &params, 24, seed);
    let (_, grad) = loss_and_grad(&agent, &params, &batch, &cfg).unwrap();
    let nb = agent.backbone().num_params();
    let mut rng = stream_rng(seed, 8);
    let mut picks: Vec<usize> = (0..10).map(|_| rng.random_range(0..nb)).collect();
    picks.extend((0..10).map(|_| rng.random_range(nb..params.len())));
    for k in picks {
        let h = 1e-5;
        let mut p = params.clone();
        p[k] += h;
        let plus = loss_value(&agent, &p, &batch, &cfg).unwrap().total;
        p[k] -= 2.0 * h;
        let minus = loss_value(&agent, &p, &batch, &cfg).unwrap().total;
        let fd = (plus - minus) / (2.0 * h);
        let err = (grad[k] - fd).abs();
        assert!(err <= 1e-4 * fd.abs().max(1e-3), "{bb} param {k}: analytic {} vs fd {fd}", grad[k]);
    }
}

#[test]
fn joint_gradient_matches_finite_differences() {
    for (i, bb) in [
        BackboneConfig::separable(1),
        BackboneConfig::cz(2),
        BackboneConfig::ising_zz(2),
        BackboneConfig::mlp(4),
    ]
    .into_iter()
    .enumerate()
    {
        fd_check(bb, i as u64 + 3);
    }
}

#[test]
fn first_minibatch_has_unit_ratio() {
    let agent = Agent::new(BackboneConfig::cz(1)).unwrap();
    let params = initial_params(&agent, 0, 0);
    let mut batch = random_batch(&agent, &params, 16, 1);
    for s in &mut batch {
        let out = agent.evaluate(&params, &s.obs).unwrap();
        s.old_log_prob = qpong::nn::Categorical::new(out.logits).unwrap().log_prob(s.action);
    }
    let cfg = PpoConfig { norm_adv: false, ..PpoConfig::default() };
    let loss = loss_value(&agent, &params, &batch, &cfg).unwrap();
    let mean_adv = batch.iter().map(|s| s.advantage).sum::<f64>() / batch.len() as f64;
    assert!((loss.clip - mean_adv).abs() < 1e-10);
    assert!(loss.approx_kl.abs() < 1e-10 && loss.clip_fraction == 0.0);
}

#[test]
fn clipped_ratio_blocks_policy_gradient() {
    let eps: f64 = 0.2;
    let logits = [[0.3, -0.1, 0.2]];
    let dist = qpong::nn::Categorical::new(logits[0]).unwrap();
    // ratio = 1 + 2ε with a positive advantage: clip active.
    let old = dist.log_prob(0) - (1.0 + 2.0 * eps).ln();
    let s = Sample { obs: [0.0; 8], action: 0, old_log_prob: old, old_value: 0.0, advantage: 1.0, ret: 0.0 };
    let cfg = PpoConfig { norm_adv: false, ent_coef: 0.0, ..PpoConfig::default() };
    let out = ppo_loss(&[s], &logits, &[0.0], &cfg).unwrap();
    assert!(out.dlogits[0].iter().all(|g| *g == 0.0));
    assert!((out.components.clip - (1.0 + eps)).abs() < 1e-12);
    assert_eq!(out.components.clip_fraction, 1.0);
}

#[test]
fn loss_signs() {
    let s = Sample { obs: [0.0; 8], action: 1, old_log_prob: (1.0f64 / 3.0).ln(), old_value: 0.0, advantage: 2.0, ret: 3.0 };
    let cfg = PpoConfig { norm_adv: false, ..PpoConfig::default() };
    let out = ppo_loss(&[s], &[[0.0; 3]], &[1.0], &cfg).unwrap();
    let c = out.components;
    assert!((c.clip - 2.0).abs() < 1e-12);
    assert!((c.value - 4.0).abs() < 1e-12);
    assert!((c.entropy - 3f64.ln()).abs() < 1e-12);
    let expected = -c.clip + cfg.vf_coef * c.value - cfg.ent_coef * c.entropy;
    assert!((c.total - expected).abs() < 1e-12);
}

#[test]
fn zero_budget_yields_initial_params() {
    let ppo = PpoConfig { total_timesteps: 0, ..PpoConfig::default() };
    let env = PongConfig::default();
    let bb = BackboneConfig::separable(1);
    let rec = train(&TrainSetup { backbone: bb, ppo: &ppo, env: &env, seed: 4, init_seed_offset: 0 }, |_| Ok(())).unwrap();
    assert!(rec.episodes.is_empty() && rec.updates.is_empty());
    assert_eq!(rec.params, initial_params(&Agent::new(bb).unwrap(), 4, 0));
}

#[test]
fn short_run_is_deterministic() {
    let ppo = PpoConfig { num_envs: 2, num_steps: 16, num_minibatches: 2, update_epochs: 2, total_timesteps: 96, ..PpoConfig::default() };
    let env = PongConfig { winning_score: 1, ..PongConfig::default() };
    let setup = TrainSetup { backbone: BackboneConfig::ising_zz(1), ppo: &ppo, env: &env, seed: 9, init_seed_offset: 0 };
    let mut a = Vec::new();
    let ra = train(&setup, |e| {
        a.push(serde_json::to_string(e).unwrap());
        Ok(())
    })
    .unwrap();
    let mut b = Vec::new();
    let rb = train(&setup, |e| {
        b.push(serde_json::to_string(e).unwrap());
        Ok(())
    })
    .unwrap();
    assert_eq!(a, b);
    assert_eq!(ra.params, rb.params);
    assert_eq!(ra.updates.len(), 3);
    assert_eq!(ra.global_step, 96);
}

/// O(T²) definition: Â_t = Σ_k (γλ)^k δ_{t+k}, truncated after the step that ends an episode.
fn gae_oracle(r: &[f64], v: &[f64], d: &[bool], boot: f64, g: f64, l: f64) -> Vec<f64> {
    let n = r.len();
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            let mut w = 1.0;
            for k in t..n {
                let next = if d[k] {
                    0.0
                } else if k + 1 == n {
                    boot
                } else {
                    v[k + 1]
                };
                total += w * (r[k] + g * next - v[k]);
                if d[k] {
                    break;
                }
                w *= g * l;
            }
            total
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn gae_matches_definition(
        rows in prop::collection::vec((prop::sample::select(vec![-1.0, 0.0, 0.0, 1.0]), -3.0..3.0f64, prop::bool::weighted(0.15)), 1..80),
        boot in -3.0..3.0f64,
        gamma in 0.5..1.0f64,
        lambda in 0.0..1.0f64,
    ) {
        let r: Vec<f64> = rows.iter().map(|x| x.0).collect();
        let v: Vec<f64> = rows.iter().map(|x| x.1).collect();
        let d: Vec<bool> = rows.iter().map(|x| x.2).collect();
        let est = compute_gae(&r, &v, &d, boot, gamma, lambda).unwrap();
        let oracle = gae_oracle(&r, &v, &d, boot, gamma, lambda);
        for t in 0..r.len() {
            prop_assert!((est.advantages[t] - oracle[t]).abs() <= 1e-12);
            prop_assert!((est.returns[t] - (oracle[t] + v[t])).abs() <= 1e-12);
        }
    }

    #[test]
    fn normalized_advantages_are_standard(adv in prop::collection::vec(-100.0..100.0f64, 2..200)) {
        let spread = adv.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - adv.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-6);
        let mut a = adv.clone();
        normalize_advantages(&mut a);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((std - 1.0).abs() < 1e-8);
    }
}

#[test]
fn gae_lambda_one_is_discounted_return_minus_value() {
    let r = [0.0, 0.0, 1.0, 0.0, -1.0];
    let v = [0.5, -0.2, 0.1, 0.3, 0.0];
    let d = [false, false, true, false, false];
    let est = compute_gae(&r, &v, &d, 0.7, 0.9, 1.0).unwrap();
    let returns = [0.81, 0.9, 1.0, -0.9 + 0.81 * 0.7, -1.0 + 0.9 * 0.7];
    for t in 0..5 {
        assert!((est.advantages[t] - (returns[t] - v[t])).abs() < 1e-12);
    }
}
