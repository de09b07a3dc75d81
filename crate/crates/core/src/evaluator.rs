//! Dispatch-and-decode evaluation, routing statistics, the sequential
//! fine-tuning baseline and latent exports.

use std::fmt::Write as _;

use crate::autoencoder::RoutingDecision;
use crate::error::{ensure, Error, Result};
use crate::expert::generate_memory;
use crate::metrics::{fmt2, AccuracyMatrix};
use crate::numeric::rng::StreamRng;
use crate::numeric::{Graph, ParamStore};
use crate::reasoner::{generate, train_lm, Chunk, GenerationConfig, LmExample, LmTrainConfig, Reasoner};
use crate::router::{RoutedMemory, TraceRow};
use crate::stage::StageRegistry;
use crate::taskgen::{judge, Sample};
use crate::tokenizer::{TokenSeq, Vocabulary};

/// A named test set.
#[derive(Clone, Debug)]
pub struct TestSet {
    pub name: String,
    pub samples: Vec<Sample>,
}

/// Results for one test set.
#[derive(Clone, Debug, PartialEq)]
pub struct SetResult {
    pub name: String,
    pub correct: usize,
    pub total: usize,
    /// Prompts sent to each seen stage, then OOD as the last entry.
    pub routed: Vec<usize>,
    pub decisions: Vec<RoutingDecision>,
    pub outputs: Vec<TokenSeq>,
}

impl SetResult {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 * 100.0 / self.total as f64
        }
    }

    /// Routing percentages in the same layout as `routed`.
    pub fn routing_percentages(&self) -> Vec<f64> {
        self.routed
            .iter()
            .map(|&c| if self.total == 0 { 0.0 } else { c as f64 * 100.0 / self.total as f64 })
            .collect()
    }
}

/// One evaluation pass over every test set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub sets: Vec<SetResult>,
    /// `usage[s][k]`: how often expert `k` of stage `s` was selected.
    pub usage: Vec<Vec<usize>>,
    pub trace: Vec<TraceRow>,
}

impl EvalRow {
    pub fn accuracies(&self) -> Vec<f64> {
        self.sets.iter().map(SetResult::accuracy).collect()
    }
}

/// Dispatches each prompt, decodes with the chosen stage (or the bare
/// reasoner when the gate says OOD) and judges the answer.
pub fn evaluate_all(
    model: &Reasoner,
    store: &ParamStore,
    registry: &StageRegistry,
    vocab: &Vocabulary,
    sets: &[TestSet],
    gen: &GenerationConfig,
) -> Result<EvalRow> {
    ensure!(
        registry.active().is_none(),
        "evaluation requires every stage to be frozen"
    );
    let n_stages = registry.len();
    let mut usage: Vec<Vec<usize>> = registry
        .stages()
        .iter()
        .map(|s| vec![0; s.config.n_experts])
        .collect();
    let mut trace = Vec::new();
    let mut results = Vec::with_capacity(sets.len());
    for set in sets {
        let mut res = SetResult {
            name: set.name.clone(),
            correct: 0,
            total: set.samples.len(),
            routed: vec![0; n_stages + 1],
            decisions: Vec::with_capacity(set.samples.len()),
            outputs: Vec::with_capacity(set.samples.len()),
        };
        for (idx, s) in set.samples.iter().enumerate() {
            let prompt = vocab.encode(&s.prompt)?;
            let decision = registry.dispatch(store, model, &prompt)?;
            let mut g = Graph::inference(store);
            let out = match decision {
                RoutingDecision::Stage(k) => {
                    res.routed[k] += 1;
                    let stage = &registry.stages()[k];
                    let mut memory = RoutedMemory::new(model, stage);
                    let out = generate(model, &mut g, vocab, &prompt, Some(&mut memory), gen)?;
                    for (j, inv) in memory.invocations.iter().enumerate() {
                        for &e in &inv.routing.selected {
                            usage[k][e] += 1;
                        }
                        trace.push(TraceRow {
                            stage: stage.id,
                            sample: idx,
                            invocation: j,
                            position: inv.position,
                            routing: inv.routing.clone(),
                        });
                    }
                    out
                }
                RoutingDecision::Ood => {
                    res.routed[n_stages] += 1;
                    generate(model, &mut g, vocab, &prompt, None, gen)?
                }
            };
            let text = vocab.decode(&out.tokens);
            if judge(&text, &s.answer) {
                res.correct += 1;
            } else if !text.contains("ANS:") {
                log::debug!("{}: no answer marker for {:?}", set.name, s.prompt);
            }
            res.decisions.push(decision);
            res.outputs.push(out.tokens);
        }
        results.push(res);
    }
    Ok(EvalRow {
        sets: results,
        usage,
        trace,
    })
}

/// Decodes every prompt with the bare reasoner of `store`.
pub fn evaluate_plain(
    model: &Reasoner,
    store: &ParamStore,
    vocab: &Vocabulary,
    sets: &[TestSet],
    gen: &GenerationConfig,
) -> Result<Vec<SetResult>> {
    let empty = StageRegistry::new(Default::default());
    Ok(evaluate_all(model, store, &empty, vocab, sets, gen)?.sets)
}

/// Routing table: one row per test set, one column per seen stage and OOD.
pub fn routing_markdown(row: &EvalRow, stage_labels: &[String]) -> String {
    let mut s = String::from("| Test set |");
    for l in stage_labels {
        let _ = write!(s, " AE {l} |");
    }
    s.push_str(" OOD |\n|---|");
    for _ in 0..=stage_labels.len() {
        s.push_str("---|");
    }
    s.push('\n');
    for set in &row.sets {
        let _ = write!(s, "| {} |", set.name);
        for p in set.routing_percentages() {
            let _ = write!(s, " {} |", fmt2(p));
        }
        s.push('\n');
    }
    s
}

pub fn routing_csv(row: &EvalRow, stage_labels: &[String]) -> String {
    let mut s = String::from("test_set");
    for l in stage_labels {
        let _ = write!(s, ",ae_{l}");
    }
    s.push_str(",ood\n");
    for set in &row.sets {
        s.push_str(&set.name);
        for p in set.routing_percentages() {
            let _ = write!(s, ",{}", fmt2(p));
        }
        s.push('\n');
    }
    s
}

pub fn usage_csv(row: &EvalRow) -> String {
    let mut s = String::from("stage,expert,count\n");
    for (i, u) in row.usage.iter().enumerate() {
        for (k, c) in u.iter().enumerate() {
            let _ = writeln!(s, "{},{k},{c}", i + 1);
        }
    }
    s
}

/// One fine-tuning stage of the baseline.
#[derive(Clone, Debug)]
pub struct BaselineTask {
    pub name: String,
    pub train: Vec<LmExample>,
}

/// Sequentially fine-tunes every reasoner parameter of a separate copy of the
/// pretrained weights, evaluating on all test sets before training and after
/// each task.
pub fn naive_sft_baseline(
    model: &Reasoner,
    pretrained: &ParamStore,
    vocab: &Vocabulary,
    tasks: &[BaselineTask],
    sets: &[TestSet],
    cfg: &LmTrainConfig,
    gen: &GenerationConfig,
    rng: &mut StreamRng,
) -> Result<AccuracyMatrix> {
    ensure!(tasks.len() == sets.len(), "one test set per task is required");
    let mut store = ParamStore::new();
    for id in model.param_ids() {
        store.insert(pretrained.name(id), pretrained.get(id).clone())?;
    }
    let copy = Reasoner::build(&mut store, &mut crate::adapter::Source::Existing, model.config())?;
    let ids = copy.param_ids();
    if ids.iter().any(|&id| store.is_frozen(id)) {
        return Err(Error::Invariant("baseline copy starts frozen".into()));
    }
    let names = sets.iter().map(|s| s.name.clone()).collect();
    let base = evaluate_plain(&copy, &store, vocab, sets, gen)?;
    let mut matrix = AccuracyMatrix::new(names, base.iter().map(SetResult::accuracy).collect())?;
    for task in tasks {
        train_lm(&copy, &mut store, &ids, &task.train, cfg, rng, |_, _| Ok(()))?;
        let row = evaluate_plain(&copy, &store, vocab, sets, gen)?;
        matrix.push(row.iter().map(SetResult::accuracy).collect())?;
    }
    Ok(matrix)
}

/// A flattened latent segment of one expert on one prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentRecord {
    pub stage: usize,
    pub expert: usize,
    pub prompt: usize,
    pub values: Vec<f64>,
}

/// Latent segments of every selected `(stage, expert)` on every prompt.
/// `experts = None` exports all of them.
pub fn export_latents(
    model: &Reasoner,
    store: &ParamStore,
    registry: &StageRegistry,
    vocab: &Vocabulary,
    prompts: &[String],
    experts: Option<&[usize]>,
) -> Result<Vec<LatentRecord>> {
    let mut out = Vec::new();
    for stage in registry.stages() {
        let ks: Vec<usize> = match experts {
            Some(e) => e.to_vec(),
            None => (0..stage.experts.len()).collect(),
        };
        for &k in &ks {
            let adapter = stage
                .experts
                .get(k)
                .ok_or_else(|| Error::contract(format!("stage {} has no expert {k}", stage.id)))?;
            for (p, text) in prompts.iter().enumerate() {
                let tokens = vocab.encode(text)?;
                let mut g = Graph::inference(store);
                let mut stream = model.stream(Some(adapter));
                let seg = generate_memory(
                    model,
                    &mut g,
                    &mut stream,
                    &[Chunk::Tokens(tokens)],
                    stage.config.latent_len,
                )?;
                out.push(LatentRecord {
                    stage: stage.id,
                    expert: k,
                    prompt: p,
                    values: g.value(seg).to_vec(),
                });
            }
        }
    }
    Ok(out)
}

pub fn latents_csv(records: &[LatentRecord]) -> String {
    let mut s = String::from("stage,expert,prompt");
    let d = records.first().map_or(0, |r| r.values.len());
    for i in 0..d {
        let _ = write!(s, ",v{i}");
    }
    s.push('\n');
    for r in records {
        let _ = write!(s, "{},{},{}", r.stage, r.expert, r.prompt);
        for v in &r.values {
            let _ = write!(s, ",{v:e}");
        }
        s.push('\n');
    }
    s
}

/// Projection onto the top two principal components. Power iteration with a
/// fixed start keeps the result deterministic.
pub fn pca2(rows: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    ensure!(rows.len() >= 2, "PCA needs at least two rows");
    let d = rows[0].len();
    ensure!(d >= 2 && rows.iter().all(|r| r.len() == d), "rows must share a width of at least 2");
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n;
        }
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let cov_mul = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; d];
        for r in &centered {
            let dot: f64 = r.iter().zip(v).map(|(a, b)| a * b).sum();
            for (o, x) in out.iter_mut().zip(r) {
                *o += dot * x;
            }
        }
        out
    };
    let mut comps: Vec<Vec<f64>> = Vec::new();
    for c in 0..2 {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + ((i + c) % 7) as f64 * 0.1).collect();
        for _ in 0..500 {
            let mut w = cov_mul(&v);
            for p in &comps {
                let dot: f64 = w.iter().zip(p).map(|(a, b)| a * b).sum();
                for (x, y) in w.iter_mut().zip(p) {
                    *x -= dot * y;
                }
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            v = w.into_iter().map(|x| x / norm).collect();
        }
        comps.push(v);
    }
    Ok(centered
        .iter()
        .map(|r| {
            let p = |c: &[f64]| r.iter().zip(c).map(|(a, b)| a * b).sum();
            [p(&comps[0]), p(&comps[1])]
        })
        .collect())
}

/// Mean silhouette coefficient under Euclidean distance.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    ensure!(points.len() == labels.len(), "one label per point");
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    ensure!(classes.len() >= 2, "silhouette needs at least two clusters");
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sums = vec![0.0; classes.len()];
        let mut counts = vec![0usize; classes.len()];
        for (j, q) in points.iter().enumerate() {
            if i == j {
                continue;
            }
            let c = classes.binary_search(&labels[j]).expect("known label");
            sums[c] += dist(p, q);
            counts[c] += 1;
        }
        let own = classes.binary_search(&labels[i]).expect("known label");
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..classes.len())
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / points.len() as f64)
}

/// Mean within-group and cross-group pairwise Euclidean distances.
pub fn cluster_distances(groups: &[Vec<Vec<f64>>]) -> (f64, f64) {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let (mut win, mut nw, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for (gi, g) in groups.iter().enumerate() {
        for (i, a) in g.iter().enumerate() {
            for b in &g[i + 1..] {
                win += dist(a, b);
                nw += 1;
            }
            for h in &groups[gi + 1..] {
                for b in h {
                    cross += dist(a, b);
                    nc += 1;
                }
            }
        }
    }
    (win / nw.max(1) as f64, cross / nc.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silhouette_of_separated_clusters_is_high() {
        let pts = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![10.0, 0.0], vec![10.1, 0.0]];
        let s = silhouette(&pts, &[0, 0, 1, 1]).unwrap();
        assert!(s > 0.95);
        let s = silhouette(&pts, &[0, 1, 0, 1]).unwrap();
        assert!(s < 0.0);
        assert!(silhouette(&pts, &[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn pca_recovers_dominant_axis() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 0.01 * (i % 3) as f64, 0.0]).collect();
        let p = pca2(&rows).unwrap();
        let spread0 = p.iter().map(|x| x[0].abs()).fold(0.0, f64::max);
        let spread1 = p.iter().map(|x| x[1].abs()).fold(0.0, f64::max);
        assert!(spread0 > 9.0 && spread1 < 0.1);
    }

    #[test]
    fn cluster_distance_ordering() {
        let g = vec![vec![vec![0.0], vec![1.0]], vec![vec![10.0], vec![11.0]]];
        let (w, c) = cluster_distances(&g);
        assert_eq!(w, 1.0);
        assert_eq!(c, 10.0);
    }
}
