//! Micro decoder-only transformer with soft-token injection and optional
//! low-rank adapters.
//!
//! Sequences are processed through [`Stream`]s: each stream keeps the per-layer
//! key and value rows it has produced so far, so a context can be extended a
//! chunk at a time. Every kernel is row-independent, which makes an
//! incremental pass bitwise equal to a single pass over the whole sequence.

mod generate;
mod pretrain;

pub use generate::{generate, Generation, GenerationConfig, MemorySource};
pub use pretrain::{lm_loss, mean_lm_loss, pretrain, train_lm, LmExample, LmTrainConfig, PretrainConfig, PretrainReport};

use serde::{Deserialize, Serialize};

use crate::adapter::{make_param, Adapter, InitKind, Source};
use crate::error::{ensure, Error, Result};
use crate::numeric::{Graph, ParamId, ParamStore, Var};
use crate::tokenizer::TokenId;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl ReasonerConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 128,
            max_len: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.vocab_size >= 3, "vocabulary too small");
        ensure!(self.d_model > 0 && self.n_layers > 0 && self.d_ff > 0, "dimensions must be positive");
        ensure!(
            self.n_heads > 0 && self.d_model.is_multiple_of(self.n_heads),
            "d_model {} is not divisible by n_heads {}",
            self.d_model,
            self.n_heads
        );
        ensure!(self.max_len > 1, "max_len must exceed 1");
        Ok(())
    }

    /// Input and output width of a projection site.
    pub fn site_dims(&self, site: Site) -> (usize, usize) {
        match site {
            Site::Up => (self.d_model, self.d_ff),
            Site::Down => (self.d_ff, self.d_model),
            _ => (self.d_model, self.d_model),
        }
    }
}

/// The six projections of a layer that adapters attach to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Site {
    Q = 0,
    K = 1,
    V = 2,
    O = 3,
    Up = 4,
    Down = 5,
}

pub const SITES: [Site; 6] = [Site::Q, Site::K, Site::V, Site::O, Site::Up, Site::Down];

impl Site {
    pub fn name(self) -> &'static str {
        match self {
            Site::Q => "q",
            Site::K => "k",
            Site::V => "v",
            Site::O => "o",
            Site::Up => "up",
            Site::Down => "down",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    ln1: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    proj: [(ParamId, ParamId); 6],
}

/// Parameter handles of the reasoner. Values live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Reasoner {
    config: ReasonerConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<Layer>,
    ln_f: (ParamId, ParamId),
}

/// A piece of input: ordinary tokens or a block of soft tokens (`[m, d]`).
#[derive(Clone, Debug, PartialEq)]
pub enum Chunk {
    Tokens(Vec<TokenId>),
    Latent(Var),
}

/// Incremental forward state for one (reasoner, adapter) pair.
#[derive(Clone, Debug)]
pub struct Stream<'a> {
    adapter: Option<&'a Adapter>,
    keys: Vec<Vec<Var>>,
    values: Vec<Vec<Var>>,
    len: usize,
    consumed: usize,
    last: Option<Var>,
}

impl<'a> Stream<'a> {
    pub fn new(n_layers: usize, adapter: Option<&'a Adapter>) -> Self {
        Self {
            adapter,
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
            len: 0,
            consumed: 0,
            last: None,
        }
    }

    /// Number of sequence positions processed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn adapter(&self) -> Option<&'a Adapter> {
        self.adapter
    }
}

/// Output of [`Reasoner::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[L, vocab]`
    pub logits: Var,
    /// Last-layer hidden states, `[L, d_model]`.
    pub hidden: Var,
}

impl Reasoner {
    pub fn build(store: &mut ParamStore, source: &mut Source<'_>, config: &ReasonerConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut p = |store: &mut ParamStore, name: String, shape: &[usize], kind| {
            make_param(store, source, format!("reasoner/{name}"), shape, kind)
        };
        let tok_emb = p(store, "tok_emb".into(), &[config.vocab_size, d], InitKind::Normal)?;
        let pos_emb = p(store, "pos_emb".into(), &[config.max_len, d], InitKind::Normal)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let ln1 = (
                p(store, format!("layer{l}/ln1/g"), &[1, d], InitKind::Ones)?,
                p(store, format!("layer{l}/ln1/b"), &[1, d], InitKind::Zeros)?,
            );
            let ln2 = (
                p(store, format!("layer{l}/ln2/g"), &[1, d], InitKind::Ones)?,
                p(store, format!("layer{l}/ln2/b"), &[1, d], InitKind::Zeros)?,
            );
            let mut proj = Vec::with_capacity(6);
            for site in SITES {
                let (din, dout) = config.site_dims(site);
                let w = p(store, format!("layer{l}/{}/w", site.name()), &[din, dout], InitKind::Normal)?;
                let b = p(store, format!("layer{l}/{}/b", site.name()), &[1, dout], InitKind::Zeros)?;
                proj.push((w, b));
            }
            layers.push(Layer {
                ln1,
                ln2,
                proj: proj.try_into().expect("six sites"),
            });
        }
        let ln_f = (
            p(store, "ln_f/g".into(), &[1, d], InitKind::Ones)?,
            p(store, "ln_f/b".into(), &[1, d], InitKind::Zeros)?,
        );
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            ln_f,
        })
    }

    pub fn config(&self) -> &ReasonerConfig {
        &self.config
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            ids.extend([l.ln1.0, l.ln1.1, l.ln2.0, l.ln2.1]);
            for &(w, b) in &l.proj {
                ids.extend([w, b]);
            }
        }
        ids.extend([self.ln_f.0, self.ln_f.1]);
        ids
    }

    pub fn freeze(&self, store: &mut ParamStore) {
        for id in self.param_ids() {
            store.freeze(id);
        }
    }

    pub fn is_frozen(&self, store: &ParamStore) -> bool {
        self.param_ids().into_iter().all(|id| store.is_frozen(id))
    }

    pub fn stream<'a>(&self, adapter: Option<&'a Adapter>) -> Stream<'a> {
        Stream::new(self.config.n_layers, adapter)
    }

    fn linear(&self, g: &mut Graph<'_>, x: Var, layer: usize, site: Site, adapter: Option<&Adapter>) -> Var {
        let (w, b) = self.layers[layer].proj[site as usize];
        let w = g.param(w);
        let b = g.param(b);
        let y = g.matmul(x, w);
        let y = g.add_row(y, b);
        match adapter {
            Some(a) => {
                let d = a.delta(g, x, layer, site);
                g.add(y, d)
            }
            None => y,
        }
    }

    /// Input rows for `chunks` placed at positions `start..`.
    fn embed(&self, g: &mut Graph<'_>, chunks: &[Chunk], start: usize) -> Result<Var> {
        let d = self.config.d_model;
        let table = g.param(self.tok_emb);
        let mut parts = Vec::with_capacity(chunks.len());
        for c in chunks {
            match c {
                Chunk::Tokens(ids) => {
                    if ids.is_empty() {
                        continue;
                    }
                    for &t in ids {
                        ensure!((t as usize) < self.config.vocab_size, "token id {t} out of range");
                    }
                    let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
                    parts.push(g.gather(table, &idx));
                }
                Chunk::Latent(v) => {
                    let (m, cols) = g.shape(*v);
                    ensure!(cols == d, "latent segment width {cols} differs from d_model {d}");
                    ensure!(m > 0, "empty latent segment");
                    parts.push(*v);
                }
            }
        }
        ensure!(!parts.is_empty(), "nothing to embed");
        let x = g.concat_rows(&parts);
        let n = g.shape(x).0;
        if start + n > self.config.max_len {
            return Err(Error::GenerationTruncated {
                needed: start + n,
                max_len: self.config.max_len,
            });
        }
        let pos = g.param(self.pos_emb);
        let positions: Vec<usize> = (start..start + n).collect();
        let p = g.gather(pos, &positions);
        Ok(g.add(x, p))
    }

    /// Runs `chunks` through the stream and returns their last-layer hidden
    /// states (`[n, d]`).
    pub fn extend(&self, g: &mut Graph<'_>, stream: &mut Stream<'_>, chunks: &[Chunk]) -> Result<Var> {
        let offset = stream.len;
        let mut x = self.embed(g, chunks, offset)?;
        let n = g.shape(x).0;
        let adapter = stream.adapter;
        for (l, layer) in self.layers.iter().enumerate() {
            let (g1, b1) = (g.param(layer.ln1.0), g.param(layer.ln1.1));
            let a = g.layer_norm(x, g1, b1, LN_EPS);
            let q = self.linear(g, a, l, Site::Q, adapter);
            let k = self.linear(g, a, l, Site::K, adapter);
            let v = self.linear(g, a, l, Site::V, adapter);
            stream.keys[l].push(k);
            stream.values[l].push(v);
            let att = g.attention(q, &stream.keys[l], &stream.values[l], self.config.n_heads, offset);
            let o = self.linear(g, att, l, Site::O, adapter);
            x = g.add(x, o);
            let (g2, b2) = (g.param(layer.ln2.0), g.param(layer.ln2.1));
            let b = g.layer_norm(x, g2, b2, LN_EPS);
            let up = self.linear(g, b, l, Site::Up, adapter);
            let act = g.gelu(up);
            let down = self.linear(g, act, l, Site::Down, adapter);
            x = g.add(x, down);
        }
        let (gf, bf) = (g.param(self.ln_f.0), g.param(self.ln_f.1));
        let h = g.layer_norm(x, gf, bf, LN_EPS);
        stream.len += n;
        stream.last = Some(g.slice_rows(h, n - 1, n));
        Ok(h)
    }

    /// Feeds whatever part of `context` the stream has not consumed yet and
    /// returns the hidden state at the final position (`[1, d]`).
    ///
    /// `context` must extend the list previously passed to this stream.
    pub fn catch_up(&self, g: &mut Graph<'_>, stream: &mut Stream<'_>, context: &[Chunk]) -> Result<Var> {
        ensure!(
            stream.consumed <= context.len(),
            "context shrank from {} to {} chunks",
            stream.consumed,
            context.len()
        );
        let pending = &context[stream.consumed..];
        let has_rows = pending.iter().any(|c| !matches!(c, Chunk::Tokens(t) if t.is_empty()));
        if has_rows {
            self.extend(g, stream, pending)?;
        }
        stream.consumed = context.len();
        stream
            .last
            .ok_or_else(|| Error::contract("stream has no positions yet"))
    }

    /// Vocabulary logits for hidden rows (tied output embedding).
    pub fn logits(&self, g: &mut Graph<'_>, hidden: Var) -> Var {
        let table = g.param(self.tok_emb);
        g.matmul_nt(hidden, table)
    }

    /// Full forward over `tokens` with latent segments inserted before the
    /// token at each given position (position `tokens.len()` appends).
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        tokens: &[TokenId],
        injected: &[(usize, Var)],
        adapter: Option<&Adapter>,
    ) -> Result<ForwardOutput> {
        let chunks = interleave(tokens, injected)?;
        let mut stream = self.stream(adapter);
        let hidden = self.extend(g, &mut stream, &chunks)?;
        let logits = self.logits(g, hidden);
        Ok(ForwardOutput { logits, hidden })
    }

    /// Last-layer hidden state at the final prompt token of a base forward.
    pub fn prompt_end_feature(&self, store: &ParamStore, prompt: &[TokenId]) -> Result<Vec<f64>> {
        ensure!(!prompt.is_empty(), "prompt_end_feature of an empty prompt");
        let mut g = Graph::inference(store);
        let mut stream = self.stream(None);
        let h = self.catch_up(&mut g, &mut stream, &[Chunk::Tokens(prompt.to_vec())])?;
        Ok(g.value(h).to_vec())
    }
}

/// Splits `tokens` into chunks with latent segments inserted at `injected`
/// positions (strictly increasing, each at most `tokens.len()`).
pub fn interleave(tokens: &[TokenId], injected: &[(usize, Var)]) -> Result<Vec<Chunk>> {
    let mut chunks = Vec::with_capacity(2 * injected.len() + 1);
    let mut prev = 0usize;
    for (i, &(pos, seg)) in injected.iter().enumerate() {
        ensure!(
            pos <= tokens.len(),
            "injection position {pos} beyond sequence length {}",
            tokens.len()
        );
        ensure!(
            i == 0 || pos > injected[i - 1].0,
            "injection positions must be strictly increasing"
        );
        if pos > prev {
            chunks.push(Chunk::Tokens(tokens[prev..pos].to_vec()));
        }
        chunks.push(Chunk::Latent(seg));
        prev = pos;
    }
    if prev < tokens.len() || chunks.is_empty() {
        chunks.push(Chunk::Tokens(tokens[prev..].to_vec()));
    }
    Ok(chunks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::LoraConfig;
    use crate::numeric::rng::substream;

    fn small() -> (ParamStore, Reasoner) {
        let cfg = ReasonerConfig {
            vocab_size: 12,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 24,
            max_len: 32,
        };
        let mut store = ParamStore::new();
        let mut rng = substream(3, "test");
        let r = Reasoner::build(&mut store, &mut Source::Fresh(&mut rng), &cfg).unwrap();
        (store, r)
    }

    #[test]
    fn incremental_equals_full_pass() {
        let (store, r) = small();
        let toks = [2u32, 5, 7, 3, 9, 4];
        let mut g = Graph::inference(&store);
        let full = r.forward(&mut g, &toks, &[], None).unwrap();
        let mut s = r.stream(None);
        let mut ctx = vec![];
        for &t in &toks {
            ctx.push(Chunk::Tokens(vec![t]));
            r.catch_up(&mut g, &mut s, &ctx).unwrap();
        }
        let last = s.last.unwrap();
        let d = r.d_model();
        assert_eq!(g.value(last), &g.value(full.hidden)[5 * d..6 * d]);
    }

    #[test]
    fn causality_under_suffix_perturbation() {
        let (store, r) = small();
        let mut g = Graph::inference(&store);
        let a = r.forward(&mut g, &[2, 5, 7, 3], &[], None).unwrap();
        let b = r.forward(&mut g, &[2, 5, 9, 9], &[], None).unwrap();
        let v = 12;
        assert_eq!(&g.value(a.logits)[..2 * v], &g.value(b.logits)[..2 * v]);
        assert_ne!(&g.value(a.logits)[2 * v..], &g.value(b.logits)[2 * v..]);
    }

    #[test]
    fn zero_adapter_is_identity() {
        let (mut store, r) = small();
        let mut rng = substream(4, "a");
        let lora = LoraConfig { rank: 2, alpha: 4.0 };
        let ad = Adapter::build(&mut store, &mut Source::Fresh(&mut rng), "x", r.config(), &lora).unwrap();
        let mut g = Graph::inference(&store);
        let a = r.forward(&mut g, &[2, 5, 7], &[], None).unwrap();
        let b = r.forward(&mut g, &[2, 5, 7], &[], Some(&ad)).unwrap();
        assert_eq!(g.value(a.logits), g.value(b.logits));
    }

    #[test]
    fn injection_bookkeeping() {
        let (store, r) = small();
        let mut g = Graph::inference(&store);
        let seg = g.constant(4, 16, vec![0.1; 64]).unwrap();
        let out = r.forward(&mut g, &[2, 3, 4, 5, 6], &[(3, seg)], None).unwrap();
        assert_eq!(g.shape(out.hidden), (9, 16));
        assert!(r.forward(&mut g, &[2, 3], &[(3, seg)], None).is_err());
        assert!(r.forward(&mut g, &[2, 3], &[(1, seg), (1, seg)], None).is_err());
        let long = vec![2u32; 40];
        assert!(matches!(
            r.forward(&mut g, &long, &[], None),
            Err(Error::GenerationTruncated { .. })
        ));
    }
}
