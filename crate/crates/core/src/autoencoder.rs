//! Per-stage autoencoders over prompt-end features, threshold calibration and
//! the gate rule.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapter::{make_param, InitKind, Source};
use crate::error::{ensure, Result};
use crate::numeric::rng::StreamRng;
use crate::numeric::{Graph, Gradients, Optimizer, OptimizerConfig, ParamId, ParamStore, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub percentile: f64,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            bottleneck: 16,
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            percentile: 0.95,
        }
    }
}

/// `d -> h1 -> h2 -> h1 -> d`, ReLU after the first and third layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    dims: [usize; 5],
    layers: [(ParamId, ParamId); 4],
}

impl Autoencoder {
    pub fn build(
        store: &mut ParamStore,
        source: &mut Source<'_>,
        prefix: &str,
        d_model: usize,
        cfg: &AeConfig,
    ) -> Result<Self> {
        ensure!(cfg.hidden > 0 && cfg.bottleneck > 0, "autoencoder widths must be positive");
        let dims = [d_model, cfg.hidden, cfg.bottleneck, cfg.hidden, d_model];
        let names = ["enc1", "enc2", "dec1", "dec2"];
        let mut layers = Vec::with_capacity(4);
        for (i, name) in names.iter().enumerate() {
            let w = make_param(store, source, format!("{prefix}/{name}/w"), &[dims[i], dims[i + 1]], InitKind::Normal)?;
            let b = make_param(store, source, format!("{prefix}/{name}/b"), &[1, dims[i + 1]], InitKind::Zeros)?;
            layers.push((w, b));
        }
        Ok(Self {
            dims,
            layers: layers.try_into().expect("four layers"),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.dims[4]
    }

    pub fn hidden_dim(&self) -> usize {
        self.dims[1]
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.dims[2]
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let w = g.param(w);
            let b = g.param(b);
            let y = g.matmul(h, w);
            h = g.add_row(y, b);
            if i == 0 || i == 2 {
                h = g.relu(h);
            }
        }
        h
    }

    pub fn reconstruct(&self, store: &ParamStore, h: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            h.len() == self.input_dim(),
            "feature dimension {} differs from autoencoder input {}",
            h.len(),
            self.input_dim()
        );
        let mut g = Graph::inference(store);
        let x = g.constant(1, h.len(), h.to_vec())?;
        let y = self.forward(&mut g, x);
        Ok(g.value(y).to_vec())
    }
}

/// Squared L2 distance between a feature and its reconstruction.
pub fn squared_error(h: &[f64], recon: &[f64]) -> Result<f64> {
    ensure!(h.len() == recon.len(), "dimension mismatch {} vs {}", h.len(), recon.len());
    Ok(h.iter().zip(recon).fold(0.0, |a, (x, y)| a + (y - x) * (y - x)))
}

pub fn recon_error(store: &ParamStore, ae: &Autoencoder, h: &[f64]) -> Result<f64> {
    squared_error(h, &ae.reconstruct(store, h)?)
}

/// Trains with Adam on the mean squared reconstruction error. Returns the mean
/// training error after each epoch.
pub fn train_ae(
    store: &mut ParamStore,
    ae: &Autoencoder,
    features: &[Vec<f64>],
    cfg: &AeConfig,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    ensure!(features.len() >= 10, "autoencoder needs at least 10 features, got {}", features.len());
    let d = ae.input_dim();
    ensure!(features.iter().all(|f| f.len() == d), "feature dimension mismatch");
    ensure!(cfg.batch_size > 0, "batch size must be positive");
    let ids = ae.param_ids();
    let steps = features.len().div_ceil(cfg.batch_size) * cfg.epochs;
    let mut opt = Optimizer::new(OptimizerConfig::adam(cfg.learning_rate, steps), store, &ids)?;
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new(store);
            let data: Vec<f64> = batch.iter().flat_map(|&i| features[i].iter().copied()).collect();
            let x = g.constant(batch.len(), d, data)?;
            let y = ae.forward(&mut g, x);
            let diff = g.sub(y, x);
            let sq = g.mul(diff, diff);
            let total = g.sum(sq);
            let loss = g.scale(total, 1.0 / batch.len() as f64);
            let mut grads = Gradients::zeros_for(store, &ids);
            grads.accumulate(&g.backward(loss)?);
            drop(g);
            opt.step(store, &grads)?;
        }
        let mut total = 0.0;
        for f in features {
            total += recon_error(store, ae, f)?;
        }
        curve.push(total / features.len() as f64);
    }
    Ok(curve)
}

/// Nearest-rank percentile: the error at 1-based rank `ceil(p * N)`.
pub fn calibrate_threshold(errors: &[f64], percentile: f64) -> Result<f64> {
    ensure!(errors.len() >= 20, "threshold calibration needs at least 20 errors, got {}", errors.len());
    ensure!(percentile > 0.0 && percentile <= 1.0, "percentile must lie in (0,1]");
    ensure!(errors.iter().all(|e| e.is_finite()), "non-finite reconstruction error");
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    // The tolerance absorbs representation error in p * N (0.95 * 20 is not exactly 19).
    let rank = ((percentile * sorted.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(sorted.len()) - 1])
}

/// How the gate picks a stage among the seen ones.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateRule {
    /// Reject stages whose threshold is exceeded, then take the smallest error.
    #[default]
    AcceptedArgmin,
    /// Take the smallest error overall, then check only that stage's threshold.
    GlobalArgmin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoutingDecision {
    /// Index into the registry (0-based).
    Stage(usize),
    Ood,
}

/// Gate verdict from per-stage errors and thresholds. Ties go to the lower index.
pub fn gate(errors: &[f64], thresholds: &[f64], rule: GateRule) -> RoutingDecision {
    debug_assert_eq!(errors.len(), thresholds.len());
    let mut best: Option<usize> = None;
    for (s, (&e, &t)) in errors.iter().zip(thresholds).enumerate() {
        if rule == GateRule::AcceptedArgmin && !(e <= t) {
            continue;
        }
        if best.is_none_or(|b| e < errors[b]) {
            best = Some(s);
        }
    }
    match best {
        Some(s) if errors[s] <= thresholds[s] => RoutingDecision::Stage(s),
        _ => RoutingDecision::Ood,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rng::substream;

    #[test]
    fn squared_error_examples() {
        assert_eq!(squared_error(&[1.0, 2.0, 2.0], &[1.0, 2.0, 0.0]).unwrap(), 4.0);
        assert_eq!(squared_error(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert_eq!(squared_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(squared_error(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn nearest_rank_examples() {
        let e: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(calibrate_threshold(&e, 0.95).unwrap(), 19.0);
        let e: Vec<f64> = (1..=100).map(f64::from).collect();
        let t = calibrate_threshold(&e, 0.95).unwrap();
        assert_eq!(t, 95.0);
        assert_eq!(e.iter().filter(|&&x| x <= t).count(), 95);
        assert_eq!(calibrate_threshold(&[0.3; 30], 0.95).unwrap(), 0.3);
        assert!(calibrate_threshold(&[1.0; 5], 0.95).is_err());
    }

    #[test]
    fn gate_examples() {
        use RoutingDecision::*;
        let r = GateRule::AcceptedArgmin;
        assert_eq!(gate(&[0.1, 0.5], &[0.2, 0.2], r), Stage(0));
        assert_eq!(gate(&[0.5, 0.5], &[0.2, 0.2], r), Ood);
        assert_eq!(gate(&[0.3, 0.1], &[0.2, 0.2], r), Stage(1));
        assert_eq!(gate(&[], &[], r), Ood);
        // The two rules part ways when the global minimum is rejected.
        assert_eq!(gate(&[0.1, 0.3], &[0.05, 0.5], r), Stage(1));
        assert_eq!(gate(&[0.1, 0.3], &[0.05, 0.5], GateRule::GlobalArgmin), Ood);
        assert_eq!(gate(&[0.1, 0.1], &[0.2, 0.2], r), Stage(0));
    }

    #[test]
    fn training_reduces_error_and_preserves_dims() {
        let mut rng = substream(2, "ae");
        let mut store = ParamStore::new();
        let cfg = AeConfig {
            epochs: 15,
            ..AeConfig::default()
        };
        let ae = Autoencoder::build(&mut store, &mut Source::Fresh(&mut rng), "ae", 8, &cfg).unwrap();
        let feats: Vec<Vec<f64>> = (0..40)
            .map(|i| (0..8).map(|j| ((i * 7 + j * 3) as f64 * 0.37).sin()).collect())
            .collect();
        let curve = train_ae(&mut store, &ae, &feats, &cfg, &mut rng).unwrap();
        assert!(curve.last().unwrap() < &curve[0]);
        assert_eq!(ae.reconstruct(&store, &feats[0]).unwrap().len(), 8);
        assert!(train_ae(&mut store, &ae, &feats[..5], &cfg, &mut rng).is_err());
    }
}
