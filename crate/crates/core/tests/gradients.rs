mod common;

use common::*;
use molem::numeric::rng::{substream, StreamRng};
use molem::numeric::{Graph, ParamId, ParamStore, Var};
use molem::trainer::{batch_objective, check_partition, BalanceProbs, StageTrainConfig, TrainingSample};
use proptest::prelude::*;
use rand::Rng;

const OP_TOL: f64 = 1e-6;
// Coordinates whose gradient is below this magnitude are compared absolutely.
const OP_FLOOR: f64 = 1e-3;

/// Random weights turning a matrix output into a scalar with a dense gradient.
fn weigh(g: &mut Graph<'_>, x: Var, rng: &mut StreamRng) -> Var {
    let (r, c) = g.shape(x);
    let w: Vec<f64> = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = g.constant(r, c, w).unwrap();
    let m = g.mul(x, w);
    g.sum(m)
}

fn weigh_fixed(g: &mut Graph<'_>, x: Var, seed: u64) -> Var {
    weigh(g, x, &mut substream(seed, "weights"))
}

fn run(seed: u64, build: impl Fn(&mut ParamStore, &mut StreamRng) -> Vec<ParamId>, f: &dyn Fn(&mut Graph<'_>, &[Var]) -> Var) -> f64 {
    let mut rng = substream(seed, "inputs");
    let mut store = ParamStore::new();
    let ids = build(&mut store, &mut rng);
    let loss = |g: &mut Graph<'_>| {
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        f(g, &vars)
    };
    check(&store, &ids, &loss, None, &mut rng, OP_FLOOR)
}

fn shapes(store: &mut ParamStore, rng: &mut StreamRng, dims: &[(usize, usize)]) -> Vec<ParamId> {
    dims.iter()
        .enumerate()
        .map(|(i, &(r, c))| random_param(store, rng, &format!("p{i}"), r, c, 0.8))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn two_layer_mlp(seed in any::<u64>()) {
        let e = run(seed, |s, r| shapes(s, r, &[(3, 5), (5, 6), (1, 6), (6, 2), (1, 2)]), &|g, v| {
            let h = g.matmul(v[0], v[1]);
            let h = g.add_row(h, v[2]);
            let h = g.gelu(h);
            let o = g.matmul(h, v[3]);
            let o = g.add_row(o, v[4]);
            g.cross_entropy(o, &[0, 1, 1])
        });
        prop_assert!(e < OP_TOL, "relative error {e}");
    }

    #[test]
    fn products(seed in any::<u64>()) {
        let e = run(seed, |s, r| shapes(s, r, &[(3, 4), (4, 2), (5, 4), (3, 4)]), &|g, v| {
            let a = g.matmul(v[0], v[1]);
            let b = g.matmul_nt(v[0], v[2]);
            let c = g.mul(v[0], v[3]);
            let d = g.sub(c, v[3]);
            let e = g.add(d, v[0]);
            let parts = [weigh_fixed(g, a, seed), weigh_fixed(g, b, seed ^ 1), weigh_fixed(g, e, seed ^ 2)];
            let all = g.concat_rows(&parts);
            g.sum(all)
        });
        prop_assert!(e < OP_TOL, "relative error {e}");
    }

    #[test]
    fn scalings_and_activations(seed in any::<u64>()) {
        let e = run(seed, |s, r| {
            let mut ids = shapes(s, r, &[(3, 4), (1, 1)]);
            // keep relu inputs away from the kink
            let x: Vec<f64> = (0..12)
                .map(|_| {
                    let m: f64 = r.random_range(0.05..1.0);
                    if r.random::<bool>() { m } else { -m }
                })
                .collect();
            ids.push(s.insert("relu_in", molem::numeric::Tensor::matrix(3, 4, x).unwrap()).unwrap());
            ids
        }, &|g, v| {
            let a = g.scale(v[0], -1.7);
            let b = g.scale_by(a, v[1]);
            let c = g.gelu(b);
            let r = g.relu(v[2]);
            let s = g.add(c, r);
            weigh_fixed(g, s, seed)
        });
        prop_assert!(e < OP_TOL, "relative error {e}");
    }

    #[test]
    fn layer_norm(seed in any::<u64>()) {
        let e = run(seed, |s, r| shapes(s, r, &[(3, 5), (1, 5), (1, 5)]), &|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5);
            weigh_fixed(g, y, seed)
        });
        prop_assert!(e < OP_TOL, "relative error {e}");
    }

    #[test]
    fn causal_attention(seed in any::<u64>()) {
        let e = run(seed, |s, r| shapes(s, r, &[(2, 4), (1, 4), (2, 4), (1, 4), (2, 4)]), &|g, v| {
            let y = g.attention(v[0], &[v[1], v[2]], &[v[3], v[4]], 2, 1);
            weigh_fixed(g, y, seed)
        });
        prop_assert!(e < OP_TOL, "relative error {e}");
    }

    #[test]
    fn row_plumbing(seed in any::<u64>()) {
        let e = run(seed, |s, r| shapes(s, r, &[(4, 3), (2, 3)]), &|g, v| {
            let a = g.gather(v[0], &[2, 0, 2]);
            let b = g.concat_rows(&[a, v[1]]);
            let c = g.slice_rows(b, 1, 4);
            let d = g.select_cols(c, &[2, 0]);
            weigh_fixed(g, d, seed)
        });
        prop_assert!(e < OP_TOL, "relative error {e}");
    }

    #[test]
    fn normalizations(seed in any::<u64>()) {
        let e = run(seed, |s, r| shapes(s, r, &[(3, 4), (2, 5)]), &|g, v| {
            let a = g.softmax_rows(v[0]);
            let (b, clamped) = g.l2_normalize_rows(v[1], 1e-12);
            assert!(!clamped);
            let x = weigh_fixed(g, a, seed);
            let y = weigh_fixed(g, b, seed ^ 7);
            g.add(x, y)
        });
        prop_assert!(e < OP_TOL, "relative error {e}");
    }
}

fn samples(vocab: &molem::tokenizer::Vocabulary) -> Vec<TrainingSample> {
    vec![
        TrainingSample::encode(vocab, "3+4*2 mod 10>", "4*2=8,3+8=1.ANS:1").unwrap(),
        TrainingSample::encode(vocab, "ceb>", "bce,ecb.ANS:ecb").unwrap(),
    ]
}

fn stage_cfg() -> StageTrainConfig {
    StageTrainConfig {
        epochs: 1,
        batch_size: 2,
        learning_rate: 1e-3,
        warmup_ratio: 0.0,
        lambda_lb: 0.5,
        balance_probs: BalanceProbs::AllExperts,
    }
}

#[test]
fn stage_parameters_match_finite_differences() {
    let (mut store, model, vocab) = tiny_model(3);
    let stage = randomized_stage(&mut store, &model, 1, 4);
    let data = samples(&vocab);
    let cfg = stage_cfg();
    let loss = |g: &mut Graph<'_>| {
        let batch: Vec<&TrainingSample> = data.iter().collect();
        batch_objective(&model, g, &stage, &vocab, &batch, &cfg).unwrap().loss
    };
    let mut rng = substream(9, "coords");
    let mut groups: Vec<(&str, Vec<ParamId>)> = vec![
        ("router adapter", stage.router.param_ids()),
        ("projection", vec![stage.proj]),
        ("keys", vec![stage.keys]),
    ];
    for e in &stage.experts {
        groups.push(("expert adapter", e.param_ids()));
    }
    for (what, ids) in groups {
        // a few coordinates of every tensor keeps the check under a minute
        let worst = check(&store, &ids, &loss, Some(2), &mut rng, 1e-6);
        assert!(worst < 1e-4, "{what}: relative error {worst}");
    }
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let (mut store, model, vocab) = tiny_model(3);
    let old = randomized_stage(&mut store, &model, 1, 4);
    for id in old.trainable_ids() {
        store.freeze(id);
    }
    let stage = randomized_stage(&mut store, &model, 2, 5);
    let data = samples(&vocab);
    let batch: Vec<&TrainingSample> = data.iter().collect();
    let mut g = Graph::new(&store);
    let obj = batch_objective(&model, &mut g, &stage, &vocab, &batch, &stage_cfg()).unwrap();
    let grads = g.backward(obj.loss).unwrap();
    let trainable = stage.trainable_ids();
    check_partition(&store, &trainable, &grads).unwrap();
    for id in model.param_ids().into_iter().chain(old.trainable_ids()) {
        assert!(!grads.contains(id), "{} received a gradient", store.name(id));
    }
    assert!(grads.sq_norm_over(&trainable) > 0.0);
    // router, projection and keys are on every path; experts only when selected
    for id in stage.router.param_ids().into_iter().chain([stage.proj, stage.keys]) {
        assert!(grads.contains(id), "{} received no gradient", store.name(id));
    }
}
