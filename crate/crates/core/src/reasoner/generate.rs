use serde::{Deserialize, Serialize};

use super::{Chunk, Reasoner};
use crate::error::{ensure, Error, Result};
use crate::numeric::kernels::argmax;
use crate::numeric::{Graph, Var};
use crate::tokenizer::{TokenId, TokenSeq, Vocabulary};

/// Supplies a latent segment for a context that ends at an invocation point.
pub trait MemorySource {
    fn invoke(&mut self, g: &mut Graph<'_>, context: &[Chunk]) -> Result<Var>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    pub max_extra_injections: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    /// Generated ids, terminator excluded.
    pub tokens: TokenSeq,
    /// Stopped on the length budget or `max_len` rather than the terminator.
    pub truncated: bool,
    pub injections: usize,
}

/// Greedy decoding. With a memory source, one segment is injected after the
/// prompt and one after each generated delimiter, up to the extra cap.
pub fn generate(
    model: &Reasoner,
    g: &mut Graph<'_>,
    vocab: &Vocabulary,
    prompt: &[TokenId],
    mut memory: Option<&mut dyn MemorySource>,
    cfg: &GenerationConfig,
) -> Result<Generation> {
    ensure!(!prompt.is_empty(), "cannot generate from an empty prompt");
    let mut context = vec![Chunk::Tokens(prompt.to_vec())];
    let mut stream = model.stream(None);
    let mut out = Generation {
        tokens: Vec::new(),
        truncated: false,
        injections: 0,
    };
    let truncated = |e: &Error| matches!(e, Error::GenerationTruncated { .. });

    if let Some(mem) = memory.as_deref_mut() {
        match mem.invoke(g, &context) {
            Ok(seg) => {
                context.push(Chunk::Latent(seg));
                out.injections += 1;
            }
            Err(e) if truncated(&e) => {
                out.truncated = true;
                return Ok(out);
            }
            Err(e) => return Err(e),
        }
    }
    loop {
        let h = match model.catch_up(g, &mut stream, &context) {
            Ok(h) => h,
            Err(e) if truncated(&e) => {
                out.truncated = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let logits = model.logits(g, h);
        let next = argmax(g.value(logits)) as TokenId;
        if next == vocab.eos() {
            break;
        }
        out.tokens.push(next);
        context.push(Chunk::Tokens(vec![next]));
        if out.tokens.len() >= cfg.max_new_tokens {
            out.truncated = true;
            break;
        }
        if vocab.is_delimiter(next) && out.injections <= cfg.max_extra_injections {
            if let Some(mem) = memory.as_deref_mut() {
                match mem.invoke(g, &context) {
                    Ok(seg) => {
                        context.push(Chunk::Latent(seg));
                        out.injections += 1;
                    }
                    Err(e) if truncated(&e) => {
                        out.truncated = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::Source;
    use crate::numeric::rng::substream;
    use crate::numeric::ParamStore;
    use crate::reasoner::ReasonerConfig;

    struct Fixed(usize);

    impl MemorySource for Fixed {
        fn invoke(&mut self, g: &mut Graph<'_>, _context: &[Chunk]) -> Result<Var> {
            self.0 += 1;
            g.constant(2, 16, vec![0.5; 32])
        }
    }

    fn model(max_len: usize) -> (ParamStore, Reasoner, Vocabulary) {
        let vocab = Vocabulary::default_table();
        let cfg = ReasonerConfig {
            vocab_size: vocab.len(),
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_len,
        };
        let mut store = ParamStore::new();
        let mut rng = substream(9, "gen");
        let r = Reasoner::build(&mut store, &mut Source::Fresh(&mut rng), &cfg).unwrap();
        (store, r, vocab)
    }

    #[test]
    fn plain_decoding_is_deterministic_and_flags_truncation() {
        let (store, r, vocab) = model(64);
        let prompt = vocab.encode("3+4>").unwrap();
        let cfg = GenerationConfig {
            max_new_tokens: 10,
            max_extra_injections: 5,
        };
        let run = || {
            let mut g = Graph::inference(&store);
            generate(&r, &mut g, &vocab, &prompt, None, &cfg).unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        // An untrained model does not emit the terminator within 10 tokens.
        if a.tokens.len() == 10 {
            assert!(a.truncated);
        }
    }

    #[test]
    fn injections_respect_the_cap() {
        let (store, r, vocab) = model(200);
        let prompt = vocab.encode("ab>").unwrap();
        let cfg = GenerationConfig {
            max_new_tokens: 60,
            max_extra_injections: 2,
        };
        let mut mem = Fixed(0);
        let mut g = Graph::inference(&store);
        let out = generate(&r, &mut g, &vocab, &prompt, Some(&mut mem), &cfg).unwrap();
        assert!(out.injections >= 1 && out.injections <= 3);
        assert_eq!(out.injections, mem.0);
    }

    #[test]
    fn max_len_truncates() {
        let (store, r, vocab) = model(8);
        let prompt = vocab.encode("abcd>").unwrap();
        let cfg = GenerationConfig {
            max_new_tokens: 50,
            max_extra_injections: 0,
        };
        let mut g = Graph::inference(&store);
        let out = generate(&r, &mut g, &vocab, &prompt, None, &cfg).unwrap();
        assert!(out.truncated || out.tokens.len() < 4);
    }
}
