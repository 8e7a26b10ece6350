use flipguard_core::checkpoint;
use flipguard_core::flipguard::implicit_reward_gap;
use flipguard_core::model::*;
use flipguard_core::numerics::softmax_row;
use flipguard_core::rng::Rng;

fn perturbed(seed: u64, std: f64) -> PolicySnapshot {
    let cfg = ModelConfig::default();
    let mut params = init_params(&cfg, seed).unwrap().into_params();
    let mut rng = Rng::from_seed(seed ^ 0x5eed);
    for t in params.values_mut() {
        for x in t.data_mut() {
            *x += std * rng.normal();
        }
    }
    PolicySnapshot::new(cfg, params).unwrap()
}

fn random_prompt(rng: &mut Rng) -> Vec<u32> {
    let len = rng.range_inclusive(4, 8);
    (0..len).map(|_| rng.range_inclusive(2, 31) as u32).collect()
}

/// Log-probability by explicit chain rule: one full forward per prefix.
fn chain_rule_log_prob(policy: &PolicySnapshot, prompt: &[u32], response: &[u32], shift: impl Fn(usize) -> f64) -> f64 {
    let mut total = 0.0;
    for t in 0..response.len() {
        let logits = next_token_logits(policy, prompt, &response[..t]).unwrap();
        let c = shift(t);
        let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
        let max = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = shifted.iter().map(|l| (l - max).exp()).sum();
        total += shifted[response[t] as usize] - max - z.ln();
    }
    total
}

#[test]
fn zero_logit_init_is_uniform() {
    let p = init_params(&ModelConfig::default(), 0).unwrap();
    let lp = sequence_log_prob(&p, &[5, 6, 7, 8], &[3, 4, EOS]).unwrap();
    assert!((lp.total - (-3.0 * 32f64.ln())).abs() < 1e-12);
    assert!((lp.total + 10.3972).abs() < 1e-4);
    assert_eq!(lp.total, lp.per_token.iter().sum::<f64>());
}

#[test]
fn fingerprints_depend_on_seed_and_survive_checkpoints() {
    let cfg = ModelConfig::default();
    let a = init_params(&cfg, 1).unwrap();
    assert_eq!(a.fingerprint(), init_params(&cfg, 1).unwrap().fingerprint());
    assert_ne!(a.fingerprint(), init_params(&cfg, 2).unwrap().fingerprint());
    let p = perturbed(4, 0.1);
    let back = PolicySnapshot::from_params(checkpoint::decode(&checkpoint::encode(p.params())).unwrap()).unwrap();
    assert_eq!(back.fingerprint(), p.fingerprint());
    assert_eq!(back.params(), p.params());
}

#[test]
fn log_prob_matches_chain_rule_oracle() {
    let mut rng = Rng::from_seed(21);
    let (pi, pi0) = (perturbed(1, 0.3), perturbed(2, 0.3));
    for _ in 0..10 {
        let prompt = random_prompt(&mut rng);
        let n = rng.range_inclusive(1, 10);
        let mut response: Vec<u32> = (0..n).map(|_| rng.range_inclusive(2, 31) as u32).collect();
        response.push(EOS);
        let lp = sequence_log_prob(&pi, &prompt, &response).unwrap();
        assert!(lp.total <= 0.0);
        assert!((lp.total - chain_rule_log_prob(&pi, &prompt, &response, |_| 0.0)).abs() < 1e-10);

        let gap = implicit_reward_gap(&pi0, &pi, &prompt, &response).unwrap();
        let oracle = chain_rule_log_prob(&pi0, &prompt, &response, |_| 0.0) - chain_rule_log_prob(&pi, &prompt, &response, |_| 0.0);
        assert!((gap - oracle).abs() < 1e-10);
        // A per-step additive logit shift shared by both policies cancels.
        let shift = |t: usize| 7.5 * t as f64 - 3.0;
        let shifted = chain_rule_log_prob(&pi0, &prompt, &response, shift) - chain_rule_log_prob(&pi, &prompt, &response, shift);
        assert!((gap - shifted).abs() < 1e-10);
        assert_eq!(implicit_reward_gap(&pi, &pi, &prompt, &response).unwrap(), 0.0);
    }
}

#[test]
fn distributions_normalize_at_every_step() {
    let pi = perturbed(3, 0.5);
    let rows = response_distributions(&pi, &[4, 9, 20, 30], &[2, 17, 25, 1]).unwrap();
    assert_eq!(rows.len(), 4);
    for r in rows {
        let s: f64 = r.iter().map(|x| x.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn sampling_frequencies_match_softmax() {
    let pi = perturbed(7, 0.5);
    let prompt = [9u32];
    let mut probs = next_token_logits(&pi, &prompt, &[]).unwrap();
    softmax_row(&mut probs);
    let n = 100_000usize;
    let mut counts = vec![0usize; probs.len()];
    let mut rng = Rng::from_seed(99);
    for _ in 0..n {
        let r = sample_with(&pi, &prompt, 2, 1.0, &mut rng).unwrap();
        counts[r[0] as usize] += 1;
    }
    for (v, (&c, &p)) in counts.iter().zip(&probs).enumerate() {
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "token {v}: {c} vs {}", n as f64 * p);
    }
}

#[test]
fn greedy_equals_zero_temperature_sampling() {
    let pi = perturbed(8, 0.4);
    let mut rng = Rng::from_seed(3);
    for i in 0..100 {
        let prompt = random_prompt(&mut rng);
        let g = greedy_decode(&pi, &prompt, 13).unwrap();
        assert_eq!(g, sample_response(&pi, &prompt, 13, 0.0, i).unwrap());
        assert_eq!(g, greedy_decode(&pi, &prompt, 13).unwrap());
        assert_eq!(*g.last().unwrap(), EOS);
        assert_eq!(g.iter().filter(|&&t| t == EOS).count(), 1);
    }
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let pi = perturbed(8, 0.4);
    let a = sample_response(&pi, &[3, 4, 5, 6], 13, 1.0, 17).unwrap();
    assert_eq!(a, sample_response(&pi, &[3, 4, 5, 6], 13, 1.0, 17).unwrap());
}

#[test]
fn reward_pooling_matches_direct_average() {
    let trunk = perturbed(11, 0.3);
    let mut rng = Rng::from_seed(12);
    let head = RewardHead {
        projection: flipguard_core::Tensor::matrix(32, 1, (0..32).map(|_| rng.normal()).collect()).unwrap(),
        bias: 0.25,
    };
    for _ in 0..10 {
        let prompt = random_prompt(&mut rng);
        let response = vec![rng.range_inclusive(2, 31) as u32, rng.range_inclusive(2, 31) as u32, EOS];
        let pooled = pooled_hidden(&trunk, &prompt, &response).unwrap();
        let direct: f64 = pooled.iter().zip(head.projection.data()).map(|(h, w)| h * w).sum::<f64>() + head.bias;
        let score = rm_score(&trunk, &head, &prompt, &response).unwrap();
        assert!((score - direct).abs() < 1e-12);
    }
    let zero = RewardHead::zeros(32);
    assert_eq!(rm_score(&trunk, &zero, &[5, 6, 7, 8], &[2, EOS]).unwrap(), 0.0);
}
