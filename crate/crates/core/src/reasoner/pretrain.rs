use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Chunk, Reasoner};
use crate::error::{ensure, Error, Result};
use crate::numeric::rng::StreamRng;
use crate::numeric::{Graph, Gradients, Optimizer, OptimizerConfig, ParamId, ParamStore, Var};
use crate::tokenizer::TokenSeq;

/// A training sequence: loss is taken on `continuation` only.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LmExample {
    pub prompt: TokenSeq,
    pub continuation: TokenSeq,
    /// Continuation offsets at which the bare reasoner's own latent rollout
    /// (`latent_len` soft tokens) is inserted. Empty for plain text.
    pub injections: Vec<usize>,
    pub latent_len: usize,
}

impl LmExample {
    pub fn plain(prompt: TokenSeq, continuation: TokenSeq) -> Self {
        Self {
            prompt,
            continuation,
            injections: Vec::new(),
            latent_len: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub train: LmTrainConfig,
    /// Largest acceptable held-out next-token cross-entropy (nats per token).
    pub max_heldout_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean training NLL per token, one entry per epoch.
    pub train_loss: Vec<f64>,
    /// Held-out NLL per token after each epoch.
    pub heldout_loss: Vec<f64>,
}

/// Summed NLL over the continuation tokens of `ex` and the token count.
pub fn lm_loss(model: &Reasoner, g: &mut Graph<'_>, ex: &LmExample) -> Result<(Var, usize)> {
    ensure!(
        !ex.prompt.is_empty() && !ex.continuation.is_empty(),
        "language-model example needs a prompt and a continuation"
    );
    let n = ex.continuation.len();
    let targets: Vec<usize> = ex.continuation.iter().map(|&t| t as usize).collect();
    let mut stream = model.stream(None);
    if ex.injections.is_empty() {
        let mut seq = ex.prompt.clone();
        seq.extend_from_slice(&ex.continuation[..n - 1]);
        let h = model.extend(g, &mut stream, &[Chunk::Tokens(seq)])?;
        let start = ex.prompt.len() - 1;
        let rows = g.slice_rows(h, start, start + n);
        let logits = model.logits(g, rows);
        return Ok((g.cross_entropy(logits, &targets), n));
    }
    ensure!(ex.latent_len > 0, "latent length must be positive");
    ensure!(
        ex.injections.windows(2).all(|w| w[0] < w[1]) && ex.injections.iter().all(|&o| o < n),
        "injection offsets must be increasing and inside the continuation"
    );
    let m = ex.latent_len;
    let mut hidden = Vec::new();
    let mut pending = ex.prompt.clone();
    let mut rows = ex.prompt.len();
    let mut pred = Vec::with_capacity(n);
    let mut next = ex.injections.iter().peekable();
    for i in 0..n {
        if next.peek() == Some(&&i) {
            next.next();
            if !pending.is_empty() {
                hidden.push(model.extend(g, &mut stream, &[Chunk::Tokens(std::mem::take(&mut pending))])?);
            }
            let last = stream.last.ok_or_else(|| Error::Invariant("empty stream".into()))?;
            let mut segment = vec![last];
            let mut branch = stream.clone();
            for _ in 1..m {
                let prev = *segment.last().expect("nonempty");
                segment.push(model.extend(g, &mut branch, &[Chunk::Latent(prev)])?);
            }
            let seg = g.concat_rows(&segment);
            hidden.push(model.extend(g, &mut stream, &[Chunk::Latent(seg)])?);
            rows += m;
        }
        pred.push(rows - 1);
        if i + 1 < n {
            pending.push(ex.continuation[i]);
            rows += 1;
        }
    }
    if !pending.is_empty() {
        hidden.push(model.extend(g, &mut stream, &[Chunk::Tokens(pending)])?);
    }
    let all = g.concat_rows(&hidden);
    let picked = g.gather(all, &pred);
    let logits = model.logits(g, picked);
    Ok((g.cross_entropy(logits, &targets), n))
}

/// Mean NLL per continuation token, without gradients.
pub fn mean_lm_loss(model: &Reasoner, store: &ParamStore, examples: &[LmExample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for ex in examples {
        let mut g = Graph::inference(store);
        let (loss, n) = lm_loss(model, &mut g, ex)?;
        total += g.scalar(loss);
        count += n;
    }
    ensure!(count > 0, "no tokens to score");
    Ok(total / count as f64)
}

/// Trains the given parameters with next-token cross-entropy. Returns the mean
/// training loss of each epoch; `after_epoch` runs once per epoch.
pub fn train_lm(
    model: &Reasoner,
    store: &mut ParamStore,
    params: &[ParamId],
    examples: &[LmExample],
    cfg: &LmTrainConfig,
    rng: &mut StreamRng,
    mut after_epoch: impl FnMut(usize, &ParamStore) -> Result<()>,
) -> Result<Vec<f64>> {
    ensure!(!examples.is_empty(), "empty training set");
    ensure!(cfg.batch_size > 0, "batch size must be positive");
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let opt_cfg = OptimizerConfig::adamw(cfg.learning_rate, cfg.warmup_ratio, steps_per_epoch * cfg.epochs);
    let mut opt = Optimizer::new(opt_cfg, store, params)?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new(store);
            let mut parts = Vec::with_capacity(batch.len());
            let mut tokens = 0;
            for &i in batch {
                let (l, n) = lm_loss(model, &mut g, &examples[i])?;
                parts.push(l);
                tokens += n;
            }
            let total = g.concat_rows(&parts);
            let total = g.sum(total);
            let loss = g.scale(total, 1.0 / tokens as f64);
            let value = g.scalar(total);
            if !value.is_finite() {
                curve.push(value);
                return Err(Error::TrainingFailure {
                    message: format!("non-finite loss at epoch {epoch}"),
                    loss_curve: curve,
                });
            }
            let mut grads = Gradients::zeros_for(store, params);
            grads.accumulate(&g.backward(loss)?);
            drop(g);
            opt.step(store, &grads)?;
            epoch_loss += value;
            epoch_tokens += tokens;
        }
        curve.push(epoch_loss / epoch_tokens as f64);
        log::debug!("lm epoch {epoch}: loss {:.4}", curve[epoch]);
        after_epoch(epoch, store)?;
    }
    Ok(curve)
}

/// Trains a fresh reasoner, checks held-out loss against the configured
/// ceiling, then freezes every reasoner parameter.
pub fn pretrain(
    model: &Reasoner,
    store: &mut ParamStore,
    train: &[LmExample],
    heldout: &[LmExample],
    cfg: &PretrainConfig,
    rng: &mut StreamRng,
) -> Result<PretrainReport> {
    let ids = model.param_ids();
    let mut heldout_loss = Vec::new();
    let train_loss = train_lm(model, store, &ids, train, &cfg.train, rng, |_, s| {
        heldout_loss.push(mean_lm_loss(model, s, heldout)?);
        Ok(())
    })?;
    let last = heldout_loss.last().copied().unwrap_or(f64::INFINITY);
    if !(last <= cfg.max_heldout_loss) {
        return Err(Error::TrainingFailure {
            message: format!(
                "held-out loss {last:.4} above ceiling {:.4} after {} epochs",
                cfg.max_heldout_loss, cfg.train.epochs
            ),
            loss_curve: heldout_loss,
        });
    }
    model.freeze(store);
    Ok(PretrainReport {
        train_loss,
        heldout_loss,
    })
}
