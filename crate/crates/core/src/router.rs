//! Key-query expert selection and memory aggregation.

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{ensure, Error, Result};
use crate::expert::generate_memory;
use crate::numeric::{Graph, Tensor, Var};
use crate::reasoner::{Chunk, MemorySource, Reasoner, Stream};
use crate::stage::StageGroup;

/// Norms below this are clamped to it before normalizing.
pub const COSINE_EPS: f64 = 1e-12;

static CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

fn note_clamp() {
    if !CLAMP_WARNED.swap(true, Ordering::Relaxed) {
        log::warn!("near-zero query or key norm clamped to {COSINE_EPS:e}");
    }
}

/// Cosine similarity of `q` with each key, clamped to [-1, 1].
pub fn cosine_scores(q: &[f64], keys: &[Vec<f64>]) -> Result<Vec<f64>> {
    let norm = |v: &[f64]| {
        let n = v.iter().fold(0.0, |a, x| a + x * x).sqrt();
        if n < COSINE_EPS {
            note_clamp();
        }
        n.max(COSINE_EPS)
    };
    let qn = norm(q);
    keys.iter()
        .map(|k| {
            ensure!(k.len() == q.len(), "key width {} differs from query width {}", k.len(), q.len());
            let dot = q.iter().zip(k).fold(0.0, |a, (x, y)| a + x * y);
            Ok((dot / (qn * norm(k))).clamp(-1.0, 1.0))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingWeights {
    /// Selected expert ids in descending score order.
    pub selected: Vec<usize>,
    /// One weight per expert; exactly 0 for unselected experts.
    pub alpha: Vec<f64>,
    pub scores: Vec<f64>,
}

/// Indices of the `n` largest scores; ties go to the lower index.
pub fn top_n(scores: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// Top-`n` selection with a softmax over the selected scores only.
pub fn select_and_weight(scores: &[f64], n: usize) -> Result<RoutingWeights> {
    ensure!(n > 0 && n <= scores.len(), "cannot select {n} of {} experts", scores.len());
    let selected = top_n(scores, n);
    let sel: Vec<f64> = selected.iter().map(|&k| scores[k]).collect();
    let w = crate::numeric::softmax(&sel)?;
    let mut alpha = vec![0.0; scores.len()];
    for (&k, &a) in selected.iter().zip(&w) {
        alpha[k] = a;
    }
    Ok(RoutingWeights {
        selected,
        alpha,
        scores: scores.to_vec(),
    })
}

/// `sum_k weights[k] * candidates[k]`, elementwise.
pub fn aggregate(candidates: &[Tensor], weights: &[f64]) -> Result<Tensor> {
    ensure!(!candidates.is_empty(), "nothing to aggregate");
    ensure!(
        candidates.len() == weights.len(),
        "{} candidates but {} weights",
        candidates.len(),
        weights.len()
    );
    let shape = candidates[0].shape().to_vec();
    let mut out = Tensor::zeros(&shape);
    for (c, &w) in candidates.iter().zip(weights) {
        ensure!(c.shape() == shape.as_slice(), "candidate shape {:?} differs from {:?}", c.shape(), shape);
        for (o, x) in out.data_mut().iter_mut().zip(c.data()) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// One MoE invocation as seen by the trainer and the analysis reports.
#[derive(Clone, Debug)]
pub struct Invocation {
    /// Sequence length of the context at the invocation point.
    pub position: usize,
    pub routing: RoutingWeights,
    /// Softmax over all experts' scores, `[1, K]`.
    pub full_probs: Var,
    /// Weights of the selected experts, `[1, n]`, in `routing.selected` order.
    pub weights: Var,
}

/// Memory source driven by one stage's router and experts.
pub struct RoutedMemory<'a> {
    model: &'a Reasoner,
    stage: &'a StageGroup,
    router: Stream<'a>,
    experts: Vec<Stream<'a>>,
    pub invocations: Vec<Invocation>,
}

impl<'a> RoutedMemory<'a> {
    pub fn new(model: &'a Reasoner, stage: &'a StageGroup) -> Self {
        Self {
            model,
            stage,
            router: model.stream(Some(&stage.router)),
            experts: stage.experts.iter().map(|e| model.stream(Some(e))).collect(),
            invocations: Vec::new(),
        }
    }

    /// Router query for the context, `[1, d_key]`.
    pub fn extract_query(&mut self, g: &mut Graph<'_>, context: &[Chunk]) -> Result<Var> {
        let h = self.model.catch_up(g, &mut self.router, context)?;
        let proj = g.param(self.stage.proj);
        Ok(g.matmul(h, proj))
    }

    /// Cosine scores of a query against the stage keys, `[1, K]`.
    pub fn match_keys(&self, g: &mut Graph<'_>, q: Var) -> Var {
        let (qn, c1) = g.l2_normalize_rows(q, COSINE_EPS);
        let keys = g.param(self.stage.keys);
        let (kn, c2) = g.l2_normalize_rows(keys, COSINE_EPS);
        if c1 || c2 {
            note_clamp();
        }
        g.matmul_nt(qn, kn)
    }
}

impl MemorySource for RoutedMemory<'_> {
    fn invoke(&mut self, g: &mut Graph<'_>, context: &[Chunk]) -> Result<Var> {
        let q = self.extract_query(g, context)?;
        let s = self.match_keys(g, q);
        let raw: Vec<f64> = g.value(s).iter().map(|x| x.clamp(-1.0, 1.0)).collect();
        let routing = select_and_weight(&raw, self.stage.config.n_select)?;
        let sel = g.select_cols(s, &routing.selected);
        let alpha = g.softmax_rows(sel);
        let mut total: Option<Var> = None;
        for (i, &k) in routing.selected.iter().enumerate() {
            let mem = generate_memory(
                self.model,
                g,
                &mut self.experts[k],
                context,
                self.stage.config.latent_len,
            )?;
            let a = g.select_cols(alpha, &[i]);
            let term = g.scale_by(mem, a);
            total = Some(match total {
                Some(t) => g.add(t, term),
                None => term,
            });
        }
        let full_probs = g.softmax_rows(s);
        self.invocations.push(Invocation {
            position: self.router.len(),
            routing,
            full_probs,
            weights: alpha,
        });
        total.ok_or_else(|| Error::Invariant("no expert selected".into()))
    }
}

/// One line of the routing trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub stage: usize,
    pub sample: usize,
    pub invocation: usize,
    pub position: usize,
    pub routing: RoutingWeights,
}

/// Writes routing traces as CSV: stage, sample, invocation, position, one
/// score and one weight column per expert, and the selected ids.
pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let k = rows.first().map_or(0, |r| r.routing.scores.len());
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(format!("{}: {e}", path.display())))?;
    let mut header = vec!["stage".to_string(), "sample".into(), "invocation".into(), "position".into()];
    header.extend((0..k).map(|i| format!("score{i}")));
    header.extend((0..k).map(|i| format!("alpha{i}")));
    header.push("selected".into());
    let csv_err = |e: csv::Error| Error::parse(format!("{}: {e}", path.display()));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![
            r.stage.to_string(),
            r.sample.to_string(),
            r.invocation.to_string(),
            r.position.to_string(),
        ];
        rec.extend(r.routing.scores.iter().map(|x| format!("{x:.17e}")));
        rec.extend(r.routing.alpha.iter().map(|x| format!("{x:.17e}")));
        let sel: Vec<String> = r.routing.selected.iter().map(|s| s.to_string()).collect();
        rec.push(sel.join(" "));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        let s = cosine_scores(&[1.0, 2.0], &[vec![1.0, 2.0], vec![-2.0, 1.0], vec![3.0, 4.0]]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-15);
        assert_eq!(s[1], 0.0);
        assert!((s[2] - 11.0 / (5f64.sqrt() * 5.0)).abs() < 1e-15);
        let z = cosine_scores(&[0.0, 0.0], &[vec![1.0, 0.0]]).unwrap();
        assert_eq!(z, vec![0.0]);
    }

    #[test]
    fn selection_examples() {
        let r = select_and_weight(&[0.9, 0.9, 0.1, 0.1], 2).unwrap();
        assert_eq!(r.selected, vec![0, 1]);
        assert_eq!(r.alpha, vec![0.5, 0.5, 0.0, 0.0]);
        let r = select_and_weight(&[1.0, 0.0, 0.0, 0.0], 2).unwrap();
        assert_eq!(r.selected, vec![0, 1]);
        let e = 1f64.exp();
        assert!((r.alpha[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((r.alpha[0] - 0.731).abs() < 1e-3);
        let r = select_and_weight(&[0.2, -0.1, 0.5, 0.3], 4).unwrap();
        let full = crate::numeric::softmax(&[0.2, -0.1, 0.5, 0.3]).unwrap();
        for (a, b) in r.alpha.iter().zip(&full) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(select_and_weight(&[0.1], 2).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let ones = Tensor::filled(&[2, 3], 1.0);
        let fives = Tensor::filled(&[2, 3], 5.0);
        assert_eq!(aggregate(&[ones.clone(), fives.clone()], &[0.25, 0.75]).unwrap(), Tensor::filled(&[2, 3], 4.0));
        assert_eq!(aggregate(&[ones.clone(), fives.clone()], &[1.0, 0.0]).unwrap(), ones);
        assert!(aggregate(&[ones, Tensor::zeros(&[3, 2])], &[0.5, 0.5]).is_err());
    }
}
