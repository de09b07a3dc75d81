//! Supervised training of one stage: teacher-forced NLL with injected memory
//! plus the load-balance term.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numeric::kernels::argmax;
use crate::numeric::rng::StreamRng;
use crate::numeric::{Graph, Gradients, Optimizer, OptimizerConfig, ParamStore, Var};
use crate::reasoner::{Chunk, MemorySource, Reasoner};
use crate::router::{Invocation, RoutedMemory};
use crate::stage::StageGroup;
use crate::tokenizer::{TokenId, TokenSeq, Vocabulary};

/// Which probabilities enter the load-balance term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceProbs {
    /// Softmax over every expert's score.
    #[default]
    AllExperts,
    /// The selected-only routing weights (zero for unselected experts).
    SelectedOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub lambda_lb: f64,
    pub balance_probs: BalanceProbs,
}

/// A prompt and its target; the target ends with the terminator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingSample {
    pub prompt: TokenSeq,
    pub target: TokenSeq,
}

impl TrainingSample {
    pub fn encode(vocab: &Vocabulary, prompt: &str, target: &str) -> Result<Self> {
        let prompt = vocab.encode(prompt)?;
        let mut target = vocab.encode(target)?;
        target.push(vocab.eos());
        ensure!(!prompt.is_empty(), "empty prompt");
        Ok(Self { prompt, target })
    }

    /// Sequence length once every planned segment is injected.
    pub fn injected_len(&self, vocab: &Vocabulary, max_extra: usize, latent_len: usize) -> usize {
        let plan = build_invocation_plan(&self.target, vocab, max_extra);
        self.prompt.len() + self.target.len() - 1 + plan.len() * latent_len
    }
}

/// Target offsets at which memory is injected: 0 (right after the prompt),
/// then just after each delimiter of the target, at most `max_extra` more.
/// An offset equal to the target length is never produced.
pub fn build_invocation_plan(target: &[TokenId], vocab: &Vocabulary, max_extra: usize) -> Vec<usize> {
    let mut plan = vec![0];
    for (i, &t) in target.iter().enumerate() {
        if plan.len() > max_extra {
            break;
        }
        if vocab.is_delimiter(t) && i + 1 < target.len() {
            plan.push(i + 1);
        }
    }
    plan
}

/// Teacher-forced pass over one sample.
pub struct SampleForward {
    /// Summed NLL of the target tokens (`[1,1]`).
    pub nll: Var,
    pub tokens: usize,
    pub invocations: Vec<Invocation>,
}

pub fn sample_forward(
    model: &Reasoner,
    g: &mut Graph<'_>,
    stage: &StageGroup,
    vocab: &Vocabulary,
    sample: &TrainingSample,
) -> Result<SampleForward> {
    let target = &sample.target;
    ensure!(!target.is_empty(), "empty target");
    let plan = build_invocation_plan(target, vocab, stage.config.max_extra_injections);
    let m = stage.config.latent_len;
    let mut memory = RoutedMemory::new(model, stage);
    let mut chunks = vec![Chunk::Tokens(sample.prompt.clone())];
    let mut pending: Vec<TokenId> = Vec::new();
    let mut rows = sample.prompt.len();
    let mut pred = Vec::with_capacity(target.len());
    let mut next_plan = plan.iter().peekable();
    for i in 0..target.len() {
        if next_plan.peek() == Some(&&i) {
            next_plan.next();
            if !pending.is_empty() {
                chunks.push(Chunk::Tokens(std::mem::take(&mut pending)));
            }
            let seg = memory.invoke(g, &chunks)?;
            chunks.push(Chunk::Latent(seg));
            rows += m;
        }
        pred.push(rows - 1);
        if i + 1 < target.len() {
            pending.push(target[i]);
            rows += 1;
        }
    }
    if !pending.is_empty() {
        chunks.push(Chunk::Tokens(pending));
    }
    let mut main = model.stream(None);
    let hidden = model.extend(g, &mut main, &chunks)?;
    debug_assert_eq!(g.shape(hidden).0, rows);
    let picked = g.gather(hidden, &pred);
    let logits = model.logits(g, picked);
    let targets: Vec<usize> = target.iter().map(|&t| t as usize).collect();
    let nll = g.cross_entropy(logits, &targets);
    Ok(SampleForward {
        nll,
        tokens: target.len(),
        invocations: memory.invocations,
    })
}

/// `|A| * sum_k f_k p_k`.
pub fn load_balance_loss(f: &[f64], p: &[f64]) -> Result<f64> {
    ensure!(!f.is_empty(), "load balance over an empty expert set");
    ensure!(f.len() == p.len(), "f has {} entries, p has {}", f.len(), p.len());
    let s = f.iter().zip(p).fold(0.0, |a, (x, y)| a + x * y);
    Ok(f.len() as f64 * s)
}

/// Per-invocation-index routing statistics over a mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadBalanceStats {
    /// `f[j][k]`: fraction of samples whose top-1 expert at invocation `j` is `k`.
    pub f: Vec<Vec<f64>>,
    /// `p[j][k]`: mean probability of expert `k` at invocation `j`.
    pub p: Vec<Vec<f64>>,
    /// Number of samples reaching invocation `j`.
    pub counts: Vec<usize>,
    /// Total routing instances (sum of `counts`).
    pub instances: usize,
}

impl LoadBalanceStats {
    /// Sum over invocation indices of the per-invocation balance loss.
    pub fn loss(&self) -> Result<f64> {
        let mut total = 0.0;
        for (f, p) in self.f.iter().zip(&self.p) {
            total += load_balance_loss(f, p)?;
        }
        Ok(total)
    }

    /// Top-1 fraction per expert over all instances.
    pub fn overall_f(&self) -> Vec<f64> {
        let k = self.f.first().map_or(0, Vec::len);
        let mut out = vec![0.0; k];
        for (f, &c) in self.f.iter().zip(&self.counts) {
            for (o, x) in out.iter_mut().zip(f) {
                *o += x * c as f64;
            }
        }
        if self.instances > 0 {
            for o in &mut out {
                *o /= self.instances as f64;
            }
        }
        out
    }
}

fn balance_row(g: &mut Graph<'_>, inv: &Invocation, mode: BalanceProbs) -> Result<Var> {
    match mode {
        BalanceProbs::AllExperts => Ok(inv.full_probs),
        BalanceProbs::SelectedOnly => {
            let k = inv.routing.alpha.len();
            let n = inv.routing.selected.len();
            let mut scatter = vec![0.0; n * k];
            for (i, &e) in inv.routing.selected.iter().enumerate() {
                scatter[i * k + e] = 1.0;
            }
            let s = g.constant(n, k, scatter)?;
            Ok(g.matmul(inv.weights, s))
        }
    }
}

/// Routing statistics over a batch, plus the differentiable balance term.
pub fn balance_term(
    g: &mut Graph<'_>,
    per_sample: &[Vec<Invocation>],
    mode: BalanceProbs,
) -> Result<(Option<Var>, LoadBalanceStats)> {
    let depth = per_sample.iter().map(Vec::len).max().unwrap_or(0);
    let k = per_sample
        .iter()
        .flatten()
        .next()
        .map_or(0, |i| i.routing.scores.len());
    let mut stats = LoadBalanceStats {
        f: Vec::with_capacity(depth),
        p: Vec::with_capacity(depth),
        counts: Vec::with_capacity(depth),
        instances: 0,
    };
    let mut total: Option<Var> = None;
    for j in 0..depth {
        let invs: Vec<&Invocation> = per_sample.iter().filter_map(|s| s.get(j)).collect();
        let n = invs.len();
        let mut f = vec![0.0; k];
        for inv in &invs {
            f[argmax(&inv.routing.scores)] += 1.0;
        }
        for x in &mut f {
            *x /= n as f64;
        }
        let rows = invs
            .iter()
            .map(|inv| balance_row(g, inv, mode))
            .collect::<Result<Vec<_>>>()?;
        let stacked = g.concat_rows(&rows);
        let ones = g.constant(1, n, vec![1.0 / n as f64; n])?;
        let pbar = g.matmul(ones, stacked);
        let fv = g.constant(1, k, f.clone())?;
        let prod = g.mul(pbar, fv);
        let s = g.sum(prod);
        let term = g.scale(s, k as f64);
        stats.p.push(g.value(pbar).to_vec());
        stats.f.push(f);
        stats.counts.push(n);
        stats.instances += n;
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    Ok((total, stats))
}

/// One optimizer step's record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub l_sft: f64,
    pub l_lb: f64,
    pub l: f64,
    pub lr: f64,
    pub f: Vec<f64>,
}

/// Trains the stage's router, projection, keys and experts on `samples`.
pub fn train_stage(
    model: &Reasoner,
    store: &mut ParamStore,
    stage: &StageGroup,
    vocab: &Vocabulary,
    samples: &[TrainingSample],
    cfg: &StageTrainConfig,
    rng: &mut StreamRng,
) -> Result<Vec<StepLog>> {
    ensure!(!stage.is_frozen(), "stage {} is frozen", stage.id);
    ensure!(model.is_frozen(store), "the reasoner must be frozen before stage training");
    ensure!(!samples.is_empty(), "empty training set");
    ensure!(cfg.batch_size > 0, "batch size must be positive");
    let trainable = stage.trainable_ids();
    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let opt_cfg = OptimizerConfig::adamw(cfg.learning_rate, cfg.warmup_ratio, steps_per_epoch * cfg.epochs);
    let mut opt = Optimizer::new(opt_cfg, store, &trainable)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(steps_per_epoch * cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let lr = opt.current_lr();
            let mut g = Graph::new(store);
            let batch: Vec<&TrainingSample> = batch.iter().map(|&i| &samples[i]).collect();
            let obj = batch_objective(model, &mut g, stage, vocab, &batch, cfg)?;
            let entry = StepLog {
                step: log.len(),
                l_sft: obj.l_sft,
                l_lb: obj.l_lb,
                l: obj.l_sft + cfg.lambda_lb * obj.l_lb,
                lr,
                f: obj.stats.overall_f(),
            };
            if !entry.l.is_finite() {
                log.push(entry);
                return Err(Error::TrainingFailure {
                    message: format!(
                        "non-finite loss at step {} of stage {} (l_sft {}, l_lb {})",
                        log.len() - 1,
                        stage.id,
                        obj.l_sft,
                        obj.l_lb
                    ),
                    loss_curve: log.iter().map(|e| e.l).collect(),
                });
            }
            let grads = g.backward(obj.loss)?;
            check_partition(store, &trainable, &grads)?;
            let mut full = Gradients::zeros_for(store, &trainable);
            full.accumulate(&grads);
            drop(g);
            opt.step(store, &full)?;
            log.push(entry);
        }
    }
    Ok(log)
}

/// Loss pieces for one mini-batch.
pub struct BatchObjective {
    pub loss: Var,
    pub l_sft: f64,
    pub l_lb: f64,
    pub stats: LoadBalanceStats,
}

/// `L = L_SFT + lambda * L_LB` on one mini-batch; `L_SFT` is the mean NLL
/// per target token.
pub fn batch_objective(
    model: &Reasoner,
    g: &mut Graph<'_>,
    stage: &StageGroup,
    vocab: &Vocabulary,
    batch: &[&TrainingSample],
    cfg: &StageTrainConfig,
) -> Result<BatchObjective> {
    let mut nlls = Vec::with_capacity(batch.len());
    let mut tokens = 0;
    let mut per_sample = Vec::with_capacity(batch.len());
    for s in batch {
        let out = sample_forward(model, g, stage, vocab, s)?;
        nlls.push(out.nll);
        tokens += out.tokens;
        per_sample.push(out.invocations);
    }
    let expected: usize = per_sample.iter().map(Vec::len).sum();
    let stacked = g.concat_rows(&nlls);
    let total = g.sum(stacked);
    let sft = g.scale(total, 1.0 / tokens as f64);
    let (lb, stats) = balance_term(g, &per_sample, cfg.balance_probs)?;
    if stats.instances != expected {
        return Err(Error::Invariant(format!(
            "{} routing instances counted, {expected} invocations made",
            stats.instances
        )));
    }
    let l_sft = g.scalar(sft);
    let (loss, l_lb) = match lb {
        Some(lb) => {
            let l_lb = g.scalar(lb);
            let weighted = g.scale(lb, cfg.lambda_lb);
            (g.add(sft, weighted), l_lb)
        }
        None => (sft, 0.0),
    };
    Ok(BatchObjective {
        loss,
        l_sft,
        l_lb,
        stats,
    })
}

/// Every gradient must belong to the trainable stage.
pub fn check_partition(store: &ParamStore, trainable: &[crate::numeric::ParamId], grads: &Gradients) -> Result<()> {
    for id in grads.ids() {
        if !trainable.contains(&id) {
            return Err(Error::Invariant(format!(
                "gradient reached parameter {} outside the trainable stage",
                store.name(id)
            )));
        }
    }
    Ok(())
}

pub fn write_training_log(path: &Path, log: &[StepLog]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::parse(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let k = log.first().map_or(0, |e| e.f.len());
    let mut header = vec!["step".to_string(), "l_sft".into(), "l_lb".into(), "l".into(), "lr".into()];
    header.extend((0..k).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for e in log {
        let mut rec = vec![
            e.step.to_string(),
            format!("{:.17e}", e.l_sft),
            format!("{:.17e}", e.l_lb),
            format!("{:.17e}", e.l),
            format!("{:.17e}", e.lr),
        ];
        rec.extend(e.f.iter().map(|x| format!("{x}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balance_identities() {
        let u = [0.25; 4];
        assert_eq!(load_balance_loss(&u, &u).unwrap(), 1.0);
        let c = [1.0, 0.0, 0.0, 0.0];
        assert_eq!(load_balance_loss(&c, &c).unwrap(), 4.0);
        let v = load_balance_loss(&[0.5, 0.5, 0.0, 0.0], &[0.4, 0.4, 0.1, 0.1]).unwrap();
        assert!((v - 1.6).abs() < 1e-15);
        assert!(load_balance_loss(&[], &[]).is_err());
    }

    #[test]
    fn plan_rules() {
        let v = Vocabulary::default_table();
        let t = v.encode("abc").unwrap();
        assert_eq!(build_invocation_plan(&t, &v, 5), vec![0]);
        let t = v.encode("a,b,c,d,e,f,g,h,i,j").unwrap();
        let p = build_invocation_plan(&t, &v, 5);
        assert_eq!(p.len(), 6);
        assert!(p.windows(2).all(|w| w[0] < w[1]));
        // A trailing delimiter does not add an injection past the end.
        let t = v.encode("ab.").unwrap();
        assert_eq!(build_invocation_plan(&t, &v, 5), vec![0]);
    }
}
