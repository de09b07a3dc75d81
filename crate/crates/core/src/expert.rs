//! Latent-memory generation by an expert adapter.

use crate::error::{ensure, Result};
use crate::numeric::{Graph, Var};
use crate::reasoner::{Chunk, Reasoner, Stream};

/// Continuous rollout with the stream's adapter active: the hidden state at
/// the end of `context` is latent token 1, and each latent token is fed back
/// as a soft input to produce the next, `m` tokens in all. Returns `[m, d]`.
///
/// `stream` is advanced over `context`; the rollout itself runs on a copy, so
/// the stream stays aligned with the shared context.
pub fn generate_memory(
    model: &Reasoner,
    g: &mut Graph<'_>,
    stream: &mut Stream<'_>,
    context: &[Chunk],
    m: usize,
) -> Result<Var> {
    ensure!(m > 0, "latent segment length must be positive");
    let first = model.catch_up(g, stream, context)?;
    let mut rows = Vec::with_capacity(m);
    rows.push(first);
    let mut branch = stream.clone();
    for _ in 1..m {
        let prev = *rows.last().expect("nonempty");
        let h = model.extend(g, &mut branch, &[Chunk::Latent(prev)])?;
        rows.push(h);
    }
    Ok(g.concat_rows(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{Adapter, LoraConfig, Source};
    use crate::numeric::rng::substream;
    use crate::numeric::ParamStore;
    use crate::reasoner::ReasonerConfig;

    #[test]
    fn fresh_expert_rolls_out_like_the_bare_reasoner() {
        let cfg = ReasonerConfig {
            vocab_size: 10,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 8,
            max_len: 20,
        };
        let mut store = ParamStore::new();
        let mut rng = substream(5, "x");
        let model = Reasoner::build(&mut store, &mut Source::Fresh(&mut rng), &cfg).unwrap();
        let lora = LoraConfig { rank: 2, alpha: 4.0 };
        let ex = Adapter::build(&mut store, &mut Source::Fresh(&mut rng), "e", &cfg, &lora).unwrap();
        let mut g = Graph::inference(&store);
        let ctx = vec![Chunk::Tokens(vec![2, 3, 4])];
        let mut s1 = model.stream(Some(&ex));
        let mut s0 = model.stream(None);
        let a = generate_memory(&model, &mut g, &mut s1, &ctx, 4).unwrap();
        let b = generate_memory(&model, &mut g, &mut s0, &ctx, 4).unwrap();
        assert_eq!(g.shape(a), (4, 8));
        assert_eq!(g.value(a), g.value(b));
        assert_eq!(s1.len(), 3);
    }
}
