mod common;

use common::hindsight::{brute_force, trajectory, Scripted};
use moalign::prmlab::{
    hindsight_targets, majority_indicator, majority_vote_label, train_bt_reward, train_classifier_prm, train_value_prm,
    ArithmeticOracle, PrefixExample, PrmError, PrmLabelConfig, PrmTrainConfig, RewardKind, RewardModel, RolloutPolicy,
    ScoredPair, TaskOracle,
};
use moalign::policy::{ModelDims, TokenizerSpec};
use moalign::synthtasks::gen_problems;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hindsight_targets_match_brute_force(
        pseed in 0u64..500,
        seed in 0u64..1_000_000,
        rollouts in 1usize..7,
        gamma in 0.05f64..0.99,
        max_steps in 2usize..12,
        corrupt in proptest::option::of(0usize..6),
    ) {
        let tok = TokenizerSpec::default();
        let problem = gen_problems(pseed, 1).remove(0);
        let policy = Scripted { tok: tok.clone(), problem: problem.clone() };
        let oracle = ArithmeticOracle::new(tok.clone());
        let traj = trajectory(&tok, &problem, corrupt);
        let cfg = PrmLabelConfig { gamma, rollouts, max_steps: max_steps.max(traj.steps.len()), ..Default::default() };
        let rewards = oracle.step_rewards(&traj.prompt, &traj.steps).unwrap();
        let got = hindsight_targets(&traj, &policy, &oracle, &cfg, seed, tok.separator(), tok.eos()).unwrap();
        let want = brute_force(&tok, &problem, &policy, &traj, &rewards, &cfg, seed);
        prop_assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            prop_assert_eq!(g.target.to_bits(), w.to_bits(), "{} vs {}", g.target, w);
            prop_assert!((0.0..=2.0).contains(&g.target));
            prop_assert_eq!(g.blended.len(), rollouts);
        }
    }
}

#[test]
fn correct_final_answer_step_is_worth_two() {
    let tok = TokenizerSpec::default();
    let problem = gen_problems(3, 1).remove(0);
    let policy = Scripted { tok: tok.clone(), problem: problem.clone() };
    let oracle = ArithmeticOracle::new(tok.clone());
    let traj = trajectory(&tok, &problem, None);
    let cfg = PrmLabelConfig::default();
    let got = hindsight_targets(&traj, &policy, &oracle, &cfg, 1, tok.separator(), tok.eos()).unwrap();
    assert_eq!(got.last().unwrap().target, 2.0);
}

#[test]
fn majority_indicator_exhaustive() {
    for m in 1..=8usize {
        for pattern in 0u32..(1 << m) {
            let votes: Vec<bool> = (0..m).map(|k| pattern & (1 << k) != 0).collect();
            let want = u8::from(2 * pattern.count_ones() as usize > m);
            assert_eq!(majority_indicator(&votes).unwrap(), want, "m={m} pattern={pattern:b}");
        }
    }
}

/// Returns the rollout index as the single completion token.
struct IndexPolicy;

impl RolloutPolicy for IndexPolicy {
    fn complete(&self, _p: &[usize], _x: &[usize], _seed: u64, stream: u64) -> Result<Vec<usize>, PrmError> {
        Ok(vec![(stream & 0xffff_ffff) as usize])
    }
}

#[test]
fn majority_vote_label_exhaustive() {
    for m in 1..=8usize {
        for pattern in 0u32..(1 << m) {
            let judge = |_: &[usize], r: &[usize]| u8::from(pattern & (1 << r.last().unwrap()) != 0);
            let got = majority_vote_label(&[1], &[], &IndexPolicy, &judge, m, 0, 3).unwrap();
            let positives = (0..m).filter(|k| pattern & (1 << k) != 0).count();
            assert_eq!(got, u8::from(positives * 2 > m), "m={m} pattern={pattern:b}");
        }
    }
}

fn tiny_dims() -> ModelDims {
    let tok = TokenizerSpec::default();
    ModelDims { vocab_size: tok.vocab_size(), hidden_dim: 8, layers: 1, attn_heads: 2, max_positions: 64, objective_heads: 1 }
}

fn random_pairs(seed: u64, n: usize) -> Vec<ScoredPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(1..6);
            let chosen: Vec<usize> = (0..len).map(|_| rng.gen_range(3..20)).collect();
            let mut rejected: Vec<usize> = (0..len).map(|_| rng.gen_range(3..20)).collect();
            if rejected == chosen {
                rejected.push(3);
            }
            ScoredPair { prompt: vec![1, 4], chosen, rejected }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn bt_loss_ignores_a_constant_shift(seed in 0u64..1000, shift in -50.0f64..50.0) {
        let tok = TokenizerSpec::default();
        let mut m = RewardModel::new(RewardKind::BradleyTerry, &tiny_dims(), tok, seed).unwrap();
        m.head.data_mut().iter_mut().for_each(|x| *x *= 100.0);
        let pairs = random_pairs(seed, 6);
        let before = m.bt_loss(&pairs).unwrap();
        let rank = m.ranking_accuracy(&pairs).unwrap();
        m.bias.data_mut()[0] += shift;
        prop_assert!((m.bt_loss(&pairs).unwrap() - before).abs() < 1e-9);
        prop_assert_eq!(m.ranking_accuracy(&pairs).unwrap(), rank);
    }

    #[test]
    fn classifier_scores_are_probabilities(seed in 0u64..1000, bias in -40.0f64..40.0) {
        let tok = TokenizerSpec::default();
        let mut m = RewardModel::new(RewardKind::BinaryClassifier, &tiny_dims(), tok, seed).unwrap();
        m.bias.data_mut()[0] = bias;
        for p in random_pairs(seed, 4) {
            let s = m.score(&[p.prompt.clone(), p.chosen].concat()).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }
}

#[test]
fn untrained_bt_loss_is_ln2() {
    let tok = TokenizerSpec::default();
    let mut m = RewardModel::new(RewardKind::BradleyTerry, &tiny_dims(), tok, 0).unwrap();
    m.head.data_mut().iter_mut().for_each(|x| *x = 0.0);
    let l = m.bt_loss(&random_pairs(1, 5)).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn bt_training_learns_a_consistent_preference() {
    let tok = TokenizerSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pair = || {
        let prompt = vec![1, rng.gen_range(3..20)];
        let body: Vec<usize> = (0..3).map(|_| rng.gen_range(5..15)).collect();
        ScoredPair { prompt, chosen: [body.clone(), vec![4]].concat(), rejected: [body, vec![16]].concat() }
    };
    let train: Vec<ScoredPair> = (0..120).map(|_| pair()).collect();
    let held: Vec<ScoredPair> = (0..40).map(|_| pair()).collect();
    let mut m = RewardModel::new(RewardKind::BradleyTerry, &tiny_dims(), tok, 2).unwrap();
    let cfg = PrmTrainConfig { lr: 1e-2, batch_size: 8, epochs: 5, ..Default::default() };
    let r = train_bt_reward(&mut m, &train, &held, &cfg).unwrap();
    assert!(r.heldout_metric >= 0.9, "{}", r.heldout_metric);
}

#[test]
fn bt_training_skips_identical_pairs() {
    let tok = TokenizerSpec::default();
    let mut m = RewardModel::new(RewardKind::BradleyTerry, &tiny_dims(), tok, 2).unwrap();
    let same = ScoredPair { prompt: vec![1], chosen: vec![5], rejected: vec![5] };
    let err = train_bt_reward(&mut m, &[same], &[], &PrmTrainConfig::default()).unwrap_err();
    assert!(matches!(err, PrmError::EmptyDataset));
}

#[test]
fn value_prm_fits_separable_targets() {
    let tok = TokenizerSpec::default();
    let ex = |k: usize| PrefixExample { prompt: vec![1, 3 + k % 4], prefix: vec![10 + k % 2], target: if k % 2 == 0 { 0.2 } else { 1.8 } };
    let data: Vec<PrefixExample> = (0..64).map(ex).collect();
    let mut m = RewardModel::new(RewardKind::ValueRegression, &tiny_dims(), tok, 3).unwrap();
    let cfg = PrmTrainConfig { lr: 1e-2, batch_size: 8, epochs: 30, ..Default::default() };
    let r = train_value_prm(&mut m, &data, &data[..8], &cfg).unwrap();
    assert!(r.train_metric < 0.01, "{}", r.train_metric);
}

#[test]
fn classifier_needs_both_classes() {
    let tok = TokenizerSpec::default();
    let mut m = RewardModel::new(RewardKind::BinaryClassifier, &tiny_dims(), tok, 3).unwrap();
    let data = vec![PrefixExample { prompt: vec![1], prefix: vec![5], target: 1.0 }; 4];
    assert!(matches!(train_classifier_prm(&mut m, &data, &[], &PrmTrainConfig::default()), Err(PrmError::SingleClass)));
}
