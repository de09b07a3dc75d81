//! Low-rank additive deltas on the reasoner's projections.
//!
//! A site's output becomes `x W + b + (alpha / r) * (x A) B`. `A` starts as a
//! truncated normal and `B` as zeros, so a fresh adapter leaves every
//! projection exactly as it was.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numeric::rng::StreamRng;
use crate::numeric::{Graph, ParamId, ParamStore, Var};
use crate::reasoner::{ReasonerConfig, Site, SITES};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoraPair {
    pub a: ParamId,
    pub b: ParamId,
}

/// One adapter: a low-rank pair for each of the six sites of every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    prefix: String,
    layers: Vec<[LoraPair; 6]>,
    scale: f64,
}

/// Where parameter values come from when building a module.
pub enum Source<'r> {
    /// Insert freshly initialized tensors.
    Fresh(&'r mut StreamRng),
    /// Look up tensors that already exist in the store (after a checkpoint load).
    Existing,
}

#[derive(Clone, Copy)]
pub(crate) enum InitKind {
    Normal,
    Zeros,
    Ones,
}

pub(crate) const INIT_STD: f64 = 0.02;

pub(crate) fn make_param(
    store: &mut ParamStore,
    source: &mut Source<'_>,
    name: String,
    shape: &[usize],
    kind: InitKind,
) -> Result<ParamId> {
    match source {
        Source::Fresh(rng) => {
            let t = match kind {
                InitKind::Normal => crate::numeric::rng::truncated_normal(rng, shape, INIT_STD),
                InitKind::Zeros => crate::numeric::Tensor::zeros(shape),
                InitKind::Ones => crate::numeric::Tensor::filled(shape, 1.0),
            };
            store.insert(name, t)
        }
        Source::Existing => {
            let id = store
                .id(&name)
                .ok_or_else(|| crate::Error::contract(format!("missing parameter {name}")))?;
            ensure!(
                store.get(id).shape() == shape,
                "parameter {name} has shape {:?}, expected {:?}",
                store.get(id).shape(),
                shape
            );
            Ok(id)
        }
    }
}

impl Adapter {
    pub fn build(
        store: &mut ParamStore,
        source: &mut Source<'_>,
        prefix: &str,
        model: &ReasonerConfig,
        lora: &LoraConfig,
    ) -> Result<Self> {
        ensure!(lora.rank > 0, "adapter rank must be positive");
        let mut layers = Vec::with_capacity(model.n_layers);
        for l in 0..model.n_layers {
            let mut pairs = Vec::with_capacity(SITES.len());
            for site in SITES {
                let (din, dout) = model.site_dims(site);
                let base = format!("{prefix}/layer{l}/{}", site.name());
                let a = make_param(store, source, format!("{base}/a"), &[din, lora.rank], InitKind::Normal)?;
                let b = make_param(store, source, format!("{base}/b"), &[lora.rank, dout], InitKind::Zeros)?;
                pairs.push(LoraPair { a, b });
            }
            layers.push(pairs.try_into().expect("six sites"));
        }
        Ok(Self {
            prefix: prefix.to_string(),
            layers,
            scale: lora.scale(),
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn pair(&self, layer: usize, site: Site) -> LoraPair {
        self.layers[layer][site as usize]
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| l.iter().flat_map(|p| [p.a, p.b]))
            .collect()
    }

    /// `scale * (x A) B` for one site.
    pub(crate) fn delta(&self, g: &mut Graph<'_>, x: Var, layer: usize, site: Site) -> Var {
        let p = self.pair(layer, site);
        let a = g.param(p.a);
        let b = g.param(p.b);
        let xa = g.matmul(x, a);
        let d = g.matmul(xa, b);
        g.scale(d, self.scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rng::substream;

    #[test]
    fn build_then_rebind_finds_the_same_ids() {
        let cfg = ReasonerConfig::desk(40);
        let lora = LoraConfig { rank: 4, alpha: 8.0 };
        let mut store = ParamStore::new();
        let mut rng = substream(1, "t");
        let fresh = Adapter::build(&mut store, &mut Source::Fresh(&mut rng), "s1/e0", &cfg, &lora).unwrap();
        let bound = Adapter::build(&mut store, &mut Source::Existing, "s1/e0", &cfg, &lora).unwrap();
        assert_eq!(fresh, bound);
        assert_eq!(fresh.param_ids().len(), cfg.n_layers * 12);
        assert_eq!(fresh.scale(), 2.0);
        let b = store.get(fresh.pair(0, Site::Up).b);
        assert_eq!(b.shape(), &[4, cfg.d_ff]);
        assert!(b.data().iter().all(|&x| x == 0.0));
    }
}
