mod common;

use common::{encode, max_abs_diff, random_pairs, tiny_model};
use moalign::mahdpo::{
    combined_gradients, combined_loss, dpo_pair_loss, route_batch, train_mahdpo, train_step, PolicyHead, TrainConfig,
};
use moalign::numcore::Adam;
use moalign::policy::{HeadSource, PolicyModel};
use proptest::prelude::*;

const LN2: f64 = std::f64::consts::LN_2;

fn flat(ts: &[moalign::numcore::Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn swap_heads(model: &mut PolicyModel, a: usize, b: usize) {
    model.heads.swap(a, b);
}

#[test]
fn loss_is_ln2_when_policy_equals_reference() {
    let model = tiny_model(3, 2, 0.0);
    for p in encode(&model, &random_pairs(1, 6, 2)) {
        for head in [PolicyHead::Head(0), PolicyHead::Head(1), PolicyHead::Ensemble(vec![0.4, 0.6])] {
            let l = dpo_pair_loss(&model, &head, &p, 0.1).unwrap();
            assert!((l.loss - LN2).abs() < 1e-9, "{head:?}: {}", l.loss);
            assert!(l.delta.abs() < 1e-9);
        }
    }
}

#[test]
fn combined_loss_at_reference_counts_nonempty_groups() {
    let model = tiny_model(4, 3, 0.0);
    let pairs = encode(&model, &random_pairs(2, 6, 3));
    let alpha = [0.2, 0.3, 0.5];
    let only_02: Vec<_> = pairs.iter().filter(|p| p.objective != 1).cloned().collect();
    let l = combined_loss(&model, &route_batch(&only_02, 3).unwrap(), &alpha, 0.1).unwrap();
    assert!((l - LN2 * 0.7).abs() < 1e-9);
    let l = combined_loss(&model, &route_batch(&pairs, 3).unwrap(), &alpha, 0.1).unwrap();
    assert!((l - LN2).abs() < 1e-9);
}

#[test]
fn initial_loss_is_near_ln2_for_small_perturbation() {
    let model = tiny_model(5, 2, 0.001);
    let pairs = encode(&model, &random_pairs(3, 8, 2));
    let l = combined_loss(&model, &route_batch(&pairs, 2).unwrap(), &[0.5, 0.5], 0.1).unwrap();
    assert!((l - LN2).abs() < 0.01, "{l}");
}

#[test]
fn hand_built_batch_matches_independent_computation() {
    let model = tiny_model(6, 2, 0.2);
    let pairs = encode(&model, &random_pairs(4, 2, 2));
    let beta = 0.3;
    let manual = |p: &moalign::mahdpo::EncodedPair| {
        let src = HeadSource::Head(p.objective);
        let lw = model.sequence_logprob(&src, &p.prompt, &p.chosen).unwrap();
        let ll = model.sequence_logprob(&src, &p.prompt, &p.rejected).unwrap();
        let rw = model.sequence_logprob(&HeadSource::Reference, &p.prompt, &p.chosen).unwrap();
        let rl = model.sequence_logprob(&HeadSource::Reference, &p.prompt, &p.rejected).unwrap();
        let d = beta * ((lw - rw) - (ll - rl));
        (1.0 + (-d).exp()).ln()
    };
    let expected = 0.3 * manual(&pairs[0]) + 0.7 * manual(&pairs[1]);
    let got = combined_loss(&model, &route_batch(&pairs, 2).unwrap(), &[0.3, 0.7], beta).unwrap();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    let grads = combined_gradients(&model, &route_batch(&pairs, 2).unwrap(), &[0.3, 0.7], beta).unwrap();
    assert!((grads.loss - expected).abs() < 1e-12);
}

#[test]
fn swapping_chosen_and_rejected_negates_the_margin() {
    let model = tiny_model(7, 2, 0.3);
    for p in encode(&model, &random_pairs(5, 6, 2)) {
        let mut q = p.clone();
        std::mem::swap(&mut q.chosen, &mut q.rejected);
        std::mem::swap(&mut q.ref_chosen, &mut q.ref_rejected);
        let a = dpo_pair_loss(&model, &PolicyHead::Head(0), &p, 0.5).unwrap();
        let b = dpo_pair_loss(&model, &PolicyHead::Head(0), &q, 0.5).unwrap();
        assert!((a.delta + b.delta).abs() < 1e-12);
        assert!((a.loss - b.loss + a.delta).abs() < 1e-12);
    }
}

#[test]
fn one_step_increases_the_trained_margin() {
    let mut model = tiny_model(8, 2, 0.0);
    let pair = encode(&model, &random_pairs(6, 1, 2));
    let before = dpo_pair_loss(&model, &PolicyHead::Head(0), &pair[0], 0.1).unwrap().delta;
    let cfg = TrainConfig { lr: 1e-3, grad_clip: 0.0, ..Default::default() };
    let mut opt = Adam::new(cfg.lr);
    train_step(&mut model, &mut opt, &route_batch(&pair, 2).unwrap(), &cfg).unwrap();
    let after = dpo_pair_loss(&model, &PolicyHead::Head(0), &pair[0], 0.1).unwrap().delta;
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn reference_is_untouched_by_training() {
    let mut model = tiny_model(9, 2, 0.001);
    let pairs = random_pairs(7, 8, 2);
    let probe = encode(&model, &random_pairs(70, 4, 2));
    let before: Vec<f64> = probe
        .iter()
        .map(|p| model.sequence_logprob(&HeadSource::Reference, &p.prompt, &p.chosen).unwrap())
        .collect();
    let cfg = TrainConfig { lr: 1e-2, batch_size: 4, epochs: 3, ..Default::default() };
    train_mahdpo(&mut model, &pairs, &cfg).unwrap();
    let after: Vec<f64> = probe
        .iter()
        .map(|p| model.sequence_logprob(&HeadSource::Reference, &p.prompt, &p.chosen).unwrap())
        .collect();
    assert_eq!(before.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), after.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    let moved = probe.iter().any(|p| {
        model.sequence_logprob(&HeadSource::Head(0), &p.prompt, &p.chosen).unwrap()
            != model.sequence_logprob(&HeadSource::Reference, &p.prompt, &p.chosen).unwrap()
    });
    assert!(moved);
}

#[test]
fn relabeling_objectives_permutes_the_trajectory() {
    let mut a = tiny_model(10, 2, 0.05);
    let mut b = a.clone();
    swap_heads(&mut b, 0, 1);
    let pairs = random_pairs(8, 8, 2);
    let mut swapped = pairs.clone();
    swapped.iter_mut().for_each(|p| p.objective = 1 - p.objective);
    let ea = encode(&a, &pairs);
    let eb = encode(&b, &swapped);
    let ca = TrainConfig { alpha: vec![0.3, 0.7], lr: 1e-2, ..Default::default() };
    let cb = TrainConfig { alpha: vec![0.7, 0.3], ..ca.clone() };
    let (mut oa, mut ob) = (Adam::new(ca.lr), Adam::new(cb.lr));
    for chunk in 0..2 {
        let ba = route_batch(&ea[chunk * 4..chunk * 4 + 4], 2).unwrap();
        let bb = route_batch(&eb[chunk * 4..chunk * 4 + 4], 2).unwrap();
        let ma = train_step(&mut a, &mut oa, &ba, &ca).unwrap();
        let mb = train_step(&mut b, &mut ob, &bb, &cb).unwrap();
        assert!((ma.loss - mb.loss).abs() < 1e-12);
        assert_eq!(ma.head_pairs, vec![mb.head_pairs[1], mb.head_pairs[0]]);
        assert!((ma.head_loss[0] - mb.head_loss[1]).abs() < 1e-12);
    }
    swap_heads(&mut b, 0, 1);
    let pa: Vec<f64> = a.trainable().iter().flat_map(|t| t.data().iter().copied()).collect();
    let pb: Vec<f64> = b.trainable().iter().flat_map(|t| t.data().iter().copied()).collect();
    assert!(max_abs_diff(&pa, &pb) < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn heads_without_pairs_get_exactly_zero_gradient(seed in 0u64..1000, mask in 1u32..7) {
        let model = tiny_model(seed, 3, 0.1);
        let pairs = encode(&model, &random_pairs(seed + 1, 6, 3));
        let sub: Vec<_> = pairs.into_iter().filter(|p| mask & (1 << p.objective) != 0).collect();
        let grads = combined_gradients(&model, &route_batch(&sub, 3).unwrap(), &[0.2, 0.3, 0.5], 0.1).unwrap();
        for j in 0..3 {
            let max = grads.heads[j].data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if mask & (1 << j) == 0 {
                prop_assert_eq!(max, 0.0);
            } else {
                prop_assert!(max > 0.0);
            }
        }
    }

    #[test]
    fn backbone_gradient_is_alpha_weighted_sum(seed in 0u64..1000, a0 in 0.05f64..0.95) {
        let model = tiny_model(seed, 2, 0.1);
        let pairs = encode(&model, &random_pairs(seed + 2, 6, 2));
        let alpha = [a0, 1.0 - a0];
        let mixed = combined_gradients(&model, &route_batch(&pairs, 2).unwrap(), &alpha, 0.2).unwrap();
        let mut sum = vec![0.0; flat(&mixed.backbone).len()];
        for i in 0..2 {
            let only: Vec<_> = pairs.iter().filter(|p| p.objective == i).cloned().collect();
            let mut unit = [0.0, 0.0];
            unit[i] = 1.0;
            let g = combined_gradients(&model, &route_batch(&only, 2).unwrap(), &unit, 0.2).unwrap();
            for (s, x) in sum.iter_mut().zip(flat(&g.backbone)) {
                *s += alpha[i] * x;
            }
        }
        prop_assert!(max_abs_diff(&flat(&mixed.backbone), &sum) < 1e-10);
    }

    #[test]
    fn pair_loss_equals_softplus_of_negative_margin(seed in 0u64..1000, beta in 0.01f64..2.0) {
        let model = tiny_model(seed, 2, 0.2);
        for p in encode(&model, &random_pairs(seed, 2, 2)) {
            let l = dpo_pair_loss(&model, &PolicyHead::Head(p.objective), &p, beta).unwrap();
            prop_assert!((l.loss - (1.0 + (-l.delta).exp()).ln()).abs() < 1e-12);
            prop_assert!(l.loss > 0.0);
        }
    }
}
