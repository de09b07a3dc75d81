#![allow(dead_code)]

use molem::adapter::Source;
use molem::numeric::rng::{substream, truncated_normal, StreamRng};
use molem::numeric::{Graph, ParamId, ParamStore, Tensor, Var};
use molem::reasoner::{Reasoner, ReasonerConfig};
use molem::stage::{MoeConfig, StageGroup};
use molem::tokenizer::Vocabulary;
use rand::Rng;

pub const H: f64 = 1e-5;

/// Central difference of `loss` with respect to one coordinate.
pub fn central_difference(
    store: &ParamStore,
    id: ParamId,
    coord: usize,
    loss: &dyn Fn(&mut Graph<'_>) -> Var,
) -> f64 {
    let eval = |delta: f64| {
        let mut s = store.clone();
        s.get_mut(id).unwrap().data_mut()[coord] += delta;
        let mut g = Graph::inference(&s);
        let l = loss(&mut g);
        g.scalar(l)
    };
    (eval(H) - eval(-H)) / (2.0 * H)
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares analytic and numeric gradients on `per_param` random coordinates
/// of each id (all coordinates when `None`). Returns the worst relative error.
pub fn check(
    store: &ParamStore,
    ids: &[ParamId],
    loss: &dyn Fn(&mut Graph<'_>) -> Var,
    per_param: Option<usize>,
    rng: &mut StreamRng,
    floor: f64,
) -> f64 {
    let mut g = Graph::new(store);
    let l = loss(&mut g);
    let grads = g.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for &id in ids {
        let n = store.get(id).len();
        let analytic = grads.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = match per_param {
            None => (0..n).collect(),
            Some(k) => (0..k.min(n)).map(|_| rng.random_range(0..n)).collect(),
        };
        for c in coords {
            let num = central_difference(store, id, c, loss);
            let e = rel_err(analytic[c], num, floor);
            assert!(
                e.is_finite(),
                "{}[{c}]: analytic {} numeric {num}",
                store.name(id),
                analytic[c]
            );
            worst = worst.max(e);
        }
    }
    worst
}

pub fn random_param(store: &mut ParamStore, rng: &mut StreamRng, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
    let t = truncated_normal(rng, &[rows, cols], std);
    store.insert(name, t).unwrap()
}

pub fn tiny_reasoner_config(vocab: &Vocabulary) -> ReasonerConfig {
    ReasonerConfig {
        vocab_size: vocab.len(),
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        max_len: 96,
    }
}

pub fn tiny_moe() -> MoeConfig {
    MoeConfig {
        n_experts: 3,
        n_select: 2,
        d_key: 4,
        latent_len: 2,
        max_extra_injections: 3,
        lora: molem::adapter::LoraConfig { rank: 2, alpha: 4.0 },
    }
}

/// A frozen tiny reasoner.
pub fn tiny_model(seed: u64) -> (ParamStore, Reasoner, Vocabulary) {
    let vocab = Vocabulary::default_table();
    let mut store = ParamStore::new();
    let mut rng = substream(seed, "reasoner");
    let model = Reasoner::build(&mut store, &mut Source::Fresh(&mut rng), &tiny_reasoner_config(&vocab)).unwrap();
    model.freeze(&mut store);
    (store, model, vocab)
}

/// Builds stage `id` and replaces its zero-initialized adapter factors with
/// random values so that every factor carries gradient.
pub fn randomized_stage(store: &mut ParamStore, model: &Reasoner, id: usize, seed: u64) -> StageGroup {
    let mut rng = substream(seed, &format!("stage-{id}"));
    let stage = StageGroup::build(store, &mut Source::Fresh(&mut rng), id, "t", model.config(), &tiny_moe()).unwrap();
    for pid in stage.trainable_ids() {
        let shape = store.get(pid).shape().to_vec();
        let t = truncated_normal(&mut rng, &shape, 0.3);
        store.assign(pid, Tensor::new(shape, t.into_data()).unwrap()).unwrap();
    }
    stage
}
