#![allow(clippy::needless_range_loop)]

mod common;

use molem::autoencoder::{calibrate_threshold, gate, GateRule, RoutingDecision};
use molem::numeric::checkpoint::Checkpoint;
use molem::numeric::{softmax, Graph, Tensor};
use molem::router::select_and_weight;
use molem::taskgen::{parse_tsv, Sample};
use molem::tokenizer::{TokenizerSpec, Vocabulary};
use molem::trainer::{
    batch_objective, build_invocation_plan, load_balance_loss, BalanceProbs, StageTrainConfig, TrainingSample,
};
use proptest::prelude::*;

#[test]
fn softmax_examples() {
    assert_eq!(softmax(&[0.0, 0.0]).unwrap(), [0.5, 0.5]);
    assert_eq!(softmax(&[1000.0, 1000.0]).unwrap(), [0.5, 0.5]);
    // e^k / (e + e^2 + e^3) at 30-digit precision, rounded
    let want = [0.09003057317038046, 0.24472847105479765, 0.6652409557748219];
    for (g, w) in softmax(&[1.0, 2.0, 3.0]).unwrap().iter().zip(want) {
        assert!((g - w).abs() < 1e-15, "{g} vs {w}");
    }
    assert!(softmax(&[]).is_err());
}

#[test]
fn balance_loss_extremes() {
    for k in 1..=8 {
        let u = vec![1.0 / k as f64; k];
        assert!((load_balance_loss(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        let mut one = vec![0.0; k];
        one[k - 1] = 1.0;
        assert_eq!(load_balance_loss(&one, &one).unwrap(), k as f64);
    }
    assert!(load_balance_loss(&[], &[]).is_err());
}

#[test]
fn routing_instances_are_samples_times_invocations() {
    let (mut store, model, vocab) = common::tiny_model(1);
    let stage = common::randomized_stage(&mut store, &model, 1, 2);
    let cap = stage.config.max_extra_injections;
    // every target has more delimiters than the cap, so J = cap + 1
    let data: Vec<TrainingSample> = [
        ("[12+3-]>", "1;12;3;33;0.ANS:0"),
        ("[45-6+]>", "4;45;9;96;5.ANS:5"),
        ("[70+1+]>", "7;70;7;71;8.ANS:8"),
    ]
    .iter()
    .map(|(p, t)| TrainingSample::encode(&vocab, p, t).unwrap())
    .collect();
    for s in &data {
        assert_eq!(build_invocation_plan(&s.target, &vocab, cap).len(), cap + 1);
    }
    let cfg = StageTrainConfig {
        epochs: 1,
        batch_size: 3,
        learning_rate: 1e-3,
        warmup_ratio: 0.0,
        lambda_lb: 0.01,
        balance_probs: BalanceProbs::AllExperts,
    };
    let batch: Vec<&TrainingSample> = data.iter().collect();
    let mut g = Graph::new(&store);
    let obj = batch_objective(&model, &mut g, &stage, &vocab, &batch, &cfg).unwrap();
    assert_eq!(obj.stats.instances, data.len() * (cap + 1));
    assert_eq!(obj.stats.counts, vec![data.len(); cap + 1]);
    let k = stage.config.n_experts as f64;
    assert!(obj.l_lb >= 0.0 && obj.l_lb <= k * (cap + 1) as f64);
    for f in &obj.stats.f {
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

fn finite_vec(n: impl Into<prop::collection::SizeRange>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn balance_loss_is_bounded(raw_f in finite_vec(1..9), raw_p in finite_vec(1..9)) {
        let k = raw_f.len().min(raw_p.len());
        let f = softmax(&raw_f[..k]).unwrap();
        let p = softmax(&raw_p[..k]).unwrap();
        let l = load_balance_loss(&f, &p).unwrap();
        prop_assert!(l >= 0.0 && l <= k as f64 + 1e-12);
        let u = vec![1.0 / k as f64; k];
        prop_assert!((load_balance_loss(&f, &u).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one(x in finite_vec(1..20), shift in -700.0f64..700.0) {
        let y: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let s = softmax(&y).unwrap();
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(s.iter().all(|p| *p >= 0.0));
    }

    #[test]
    fn routing_weights_are_a_top_n_distribution(scores in finite_vec(1..10), n in 1usize..10) {
        let n = n.min(scores.len());
        let w = select_and_weight(&scores, n).unwrap();
        prop_assert_eq!(w.selected.len(), n);
        prop_assert!((w.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let worst_selected = w.selected.iter().map(|&k| scores[k]).fold(f64::INFINITY, f64::min);
        for k in 0..scores.len() {
            if w.selected.contains(&k) {
                prop_assert!(w.alpha[k] > 0.0);
            } else {
                prop_assert_eq!(w.alpha[k], 0.0);
                prop_assert!(scores[k] <= worst_selected);
            }
        }
        prop_assert!(select_and_weight(&scores, scores.len() + 1).is_err());
    }

    #[test]
    fn gate_accepts_only_within_threshold(
        errors in prop::collection::vec(0.0f64..4.0, 1..6),
        thresholds in prop::collection::vec(0.0f64..4.0, 6),
    ) {
        let t = &thresholds[..errors.len()];
        let accepted: Vec<usize> = (0..errors.len()).filter(|&s| errors[s] <= t[s]).collect();
        match gate(&errors, t, GateRule::AcceptedArgmin) {
            RoutingDecision::Ood => prop_assert!(accepted.is_empty()),
            RoutingDecision::Stage(s) => {
                prop_assert!(accepted.contains(&s));
                prop_assert!(accepted.iter().all(|&a| errors[s] <= errors[a]));
            }
        }
        if let RoutingDecision::Stage(s) = gate(&errors, t, GateRule::GlobalArgmin) {
            prop_assert!(errors[s] <= t[s]);
            prop_assert!(errors.iter().all(|&e| errors[s] <= e));
        }
    }

    #[test]
    fn nearest_rank_threshold(errors in prop::collection::vec(0.0f64..10.0, 20..200), p in 0.01f64..=1.0) {
        let t = calibrate_threshold(&errors, p).unwrap();
        prop_assert!(errors.contains(&t));
        let n = errors.len() as f64;
        let at_or_below = errors.iter().filter(|&&e| e <= t).count() as f64;
        let below = errors.iter().filter(|&&e| e < t).count() as f64;
        prop_assert!(at_or_below >= (p * n - 1e-9).ceil());
        prop_assert!(below < (p * n - 1e-9).ceil().max(1.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        tensors in prop::collection::vec(
            ("[a-z][a-z0-9/]{0,12}", 1usize..4, 1usize..4, any::<u64>()),
            0..6,
        )
    ) {
        let mut names = std::collections::HashSet::new();
        let entries: Vec<(String, Tensor)> = tensors
            .into_iter()
            .filter(|(n, ..)| names.insert(n.clone()))
            .map(|(n, r, c, bits)| {
                let data = (0..r * c).map(|i| f64::from_bits(bits.rotate_left(i as u32 * 7))).collect();
                (n, Tensor::new(vec![r, c], data).unwrap())
            })
            .collect();
        let ck = Checkpoint { entries };
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.entries.len(), ck.entries.len());
        for ((n1, t1), (n2, t2)) in ck.entries.iter().zip(&back.entries) {
            prop_assert_eq!(n1, n2);
            prop_assert_eq!(t1.shape(), t2.shape());
            prop_assert!(t1.bits().eq(t2.bits()));
        }
        for cut in [1, 7, bytes.len() / 2] {
            if cut < bytes.len() {
                prop_assert!(Checkpoint::decode(&bytes[..bytes.len() - cut]).is_err());
            }
        }
    }

    #[test]
    fn tokenizer_round_trip(text in "[0-9a-z+*=,.;:>\\[\\]ANS-]{0,40}") {
        let v = Vocabulary::default_table();
        let ids = v.encode(&text).unwrap();
        prop_assert_eq!(ids.len(), text.len());
        prop_assert_eq!(v.decode(&ids), text);
        let json = serde_json::to_string(&v.spec()).unwrap();
        let spec: TokenizerSpec = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(Vocabulary::from_spec(&spec).unwrap(), v);
    }

    #[test]
    fn tsv_round_trip(rows in prop::collection::vec(("[0-9a-z+*>]{1,12}", "[0-9a-z,.=]{0,12}", "[0-9a-z]{1,4}"), 0..10)) {
        let samples: Vec<Sample> = rows
            .into_iter()
            .map(|(p, t, a)| Sample { prompt: p, target: format!("{t}ANS:{a}"), answer: a })
            .collect();
        let text: String = samples.iter().map(|s| format!("{}\t{}\n", s.prompt, s.target)).collect();
        prop_assert_eq!(parse_tsv(&text).unwrap(), samples);
    }
}
