//! Stage groups, the registry of seen stages, and prompt dispatch.

use serde::{Deserialize, Serialize};

use crate::adapter::{make_param, Adapter, InitKind, LoraConfig, Source};
use crate::autoencoder::{gate, recon_error, AeConfig, Autoencoder, GateRule, RoutingDecision};
use crate::error::{ensure, Error, Result};
use crate::numeric::rng::{substream, unit_rows};
use crate::numeric::{ParamId, ParamStore};
use crate::reasoner::{Reasoner, ReasonerConfig};
use crate::tokenizer::TokenId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub n_select: usize,
    pub d_key: usize,
    pub latent_len: usize,
    pub max_extra_injections: usize,
    pub lora: LoraConfig,
}

impl MoeConfig {
    pub fn desk() -> Self {
        Self {
            n_experts: 4,
            n_select: 2,
            d_key: 32,
            latent_len: 4,
            max_extra_injections: 5,
            lora: LoraConfig { rank: 4, alpha: 8.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_experts > 0, "a stage needs at least one expert");
        ensure!(
            self.n_select > 0 && self.n_select <= self.n_experts,
            "n_select {} must lie in 1..={}",
            self.n_select,
            self.n_experts
        );
        ensure!(self.d_key > 0 && self.latent_len > 0, "d_key and latent_len must be positive");
        ensure!(self.lora.rank > 0, "adapter rank must be positive");
        Ok(())
    }
}

/// One stage's router, experts, keys, autoencoder and threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct StageGroup {
    /// 1-based position in the training sequence.
    pub id: usize,
    /// Bookkeeping only; never read by dispatch.
    pub label: String,
    pub config: MoeConfig,
    pub router: Adapter,
    /// `[d_model, d_key]`, no bias.
    pub proj: ParamId,
    /// `[n_experts, d_key]`
    pub keys: ParamId,
    pub experts: Vec<Adapter>,
    pub ae: Option<Autoencoder>,
    pub threshold: Option<f64>,
    frozen: bool,
}

pub fn stage_prefix(id: usize) -> String {
    format!("stage{id}")
}

impl StageGroup {
    /// Builds the router, projection, keys and experts of stage `id`.
    pub fn build(
        store: &mut ParamStore,
        source: &mut Source<'_>,
        id: usize,
        label: &str,
        model: &ReasonerConfig,
        config: &MoeConfig,
    ) -> Result<Self> {
        config.validate()?;
        let prefix = stage_prefix(id);
        let router = Adapter::build(store, source, &format!("{prefix}/router"), model, &config.lora)?;
        let proj = make_param(
            store,
            source,
            format!("{prefix}/router/proj"),
            &[model.d_model, config.d_key],
            InitKind::Normal,
        )?;
        let keys_name = format!("{prefix}/keys");
        let keys = match source {
            Source::Fresh(rng) => store.insert(keys_name, unit_rows(rng, config.n_experts, config.d_key))?,
            Source::Existing => make_param(
                store,
                source,
                keys_name,
                &[config.n_experts, config.d_key],
                InitKind::Normal,
            )?,
        };
        let experts = (0..config.n_experts)
            .map(|k| Adapter::build(store, source, &format!("{prefix}/expert{k}"), model, &config.lora))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            id,
            label: label.to_string(),
            config: config.clone(),
            router,
            proj,
            keys,
            experts,
            ae: None,
            threshold: None,
            frozen: false,
        })
    }

    /// Router adapter, projection, keys and every expert.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut ids = self.router.param_ids();
        ids.push(self.proj);
        ids.push(self.keys);
        for e in &self.experts {
            ids.extend(e.param_ids());
        }
        ids
    }

    /// Every parameter of the group, autoencoder included.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.trainable_ids();
        if let Some(ae) = &self.ae {
            ids.extend(ae.param_ids());
        }
        ids
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }
}

/// The ordered list of seen stages.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageRegistry {
    stages: Vec<StageGroup>,
    pub gate_rule: GateRule,
}

impl StageRegistry {
    pub fn new(gate_rule: GateRule) -> Self {
        Self {
            stages: Vec::new(),
            gate_rule,
        }
    }

    pub fn stages(&self) -> &[StageGroup] {
        &self.stages
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// The single unfrozen stage, if any.
    pub fn active(&self) -> Option<&StageGroup> {
        self.stages.last().filter(|s| !s.frozen)
    }

    /// Appends a freshly initialized group seeded from `(seed, stage index)`.
    pub fn recruit(
        &mut self,
        store: &mut ParamStore,
        model: &ReasonerConfig,
        config: &MoeConfig,
        seed: u64,
        label: &str,
    ) -> Result<&StageGroup> {
        ensure!(
            self.active().is_none(),
            "cannot recruit while stage {} is still trainable",
            self.stages.len()
        );
        let id = self.stages.len() + 1;
        let mut rng = substream(seed, &format!("stage-{id}"));
        let group = StageGroup::build(store, &mut Source::Fresh(&mut rng), id, label, model, config)?;
        self.stages.push(group);
        Ok(self.stages.last().expect("just pushed"))
    }

    /// Attaches the calibrated autoencoder and threshold to the active stage
    /// and freezes every parameter of the group. Freezing a registry with no
    /// active stage is a no-op.
    pub fn consolidate(&mut self, store: &mut ParamStore, ae: Autoencoder, threshold: f64) -> Result<()> {
        let Some(group) = self.stages.last_mut().filter(|s| !s.frozen) else {
            log::warn!("consolidate called with no trainable stage; nothing to freeze");
            return Ok(());
        };
        ensure!(threshold >= 0.0 && threshold.is_finite(), "threshold must be a nonnegative finite number");
        group.ae = Some(ae);
        group.threshold = Some(threshold);
        for id in group.param_ids() {
            store.freeze(id);
        }
        group.frozen = true;
        Ok(())
    }

    /// Reconstruction error of `feature` under each seen stage's autoencoder.
    pub fn errors(&self, store: &ParamStore, feature: &[f64]) -> Result<Vec<f64>> {
        self.stages
            .iter()
            .map(|s| {
                let ae = s
                    .ae
                    .as_ref()
                    .ok_or_else(|| Error::Invariant(format!("stage {} has no autoencoder", s.id)))?;
                recon_error(store, ae, feature)
            })
            .collect()
    }

    pub fn decide(&self, store: &ParamStore, feature: &[f64]) -> Result<RoutingDecision> {
        if self.stages.is_empty() {
            return Ok(RoutingDecision::Ood);
        }
        let errors = self.errors(store, feature)?;
        let thresholds: Vec<f64> = self
            .stages
            .iter()
            .map(|s| s.threshold.ok_or_else(|| Error::Invariant(format!("stage {} is not calibrated", s.id))))
            .collect::<Result<_>>()?;
        Ok(gate(&errors, &thresholds, self.gate_rule))
    }

    /// Stage choice for a prompt from its prompt-end feature.
    pub fn dispatch(&self, store: &ParamStore, model: &Reasoner, prompt: &[TokenId]) -> Result<RoutingDecision> {
        if self.stages.is_empty() {
            return Ok(RoutingDecision::Ood);
        }
        let h = model.prompt_end_feature(store, prompt)?;
        self.decide(store, &h)
    }

    pub fn manifest(&self, store: &ParamStore) -> RegistryManifest {
        RegistryManifest {
            gate_rule: self.gate_rule,
            stages: self
                .stages
                .iter()
                .map(|s| StageDescriptor {
                    id: s.id,
                    label: s.label.clone(),
                    threshold: s.threshold,
                    frozen: s.frozen,
                    config: s.config.clone(),
                    ae: s.ae.as_ref().map(|a| AeShape {
                        hidden: a.hidden_dim(),
                        bottleneck: a.bottleneck_dim(),
                    }),
                    params: s.param_ids().iter().map(|&i| store.name(i).to_string()).collect(),
                })
                .collect(),
        }
    }

    /// Rebuilds handles for stages whose parameters are already in `store`
    /// (for example after loading their checkpoints). Frozen stages are
    /// frozen in the store as well.
    pub fn from_manifest(store: &mut ParamStore, model: &ReasonerConfig, manifest: &RegistryManifest) -> Result<Self> {
        let mut reg = Self::new(manifest.gate_rule);
        for (i, d) in manifest.stages.iter().enumerate() {
            ensure!(d.id == i + 1, "stage ids must be 1, 2, ... in order");
            let mut group = StageGroup::build(store, &mut Source::Existing, d.id, &d.label, model, &d.config)?;
            if let Some(shape) = &d.ae {
                let cfg = AeConfig {
                    hidden: shape.hidden,
                    bottleneck: shape.bottleneck,
                    ..AeConfig::default()
                };
                group.ae = Some(Autoencoder::build(
                    store,
                    &mut Source::Existing,
                    &format!("{}/ae", stage_prefix(d.id)),
                    model.d_model,
                    &cfg,
                )?);
            }
            group.threshold = d.threshold;
            let names: Vec<String> = group.param_ids().iter().map(|&p| store.name(p).to_string()).collect();
            ensure!(names == d.params, "stage {} parameter list does not match the manifest", d.id);
            if d.frozen {
                ensure!(
                    group.ae.is_some() && group.threshold.is_some(),
                    "frozen stage {} lacks an autoencoder or threshold",
                    d.id
                );
                for id in group.param_ids() {
                    store.freeze(id);
                }
                group.frozen = true;
            } else {
                ensure!(i + 1 == manifest.stages.len(), "only the last stage may be trainable");
            }
            reg.stages.push(group);
        }
        Ok(reg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeShape {
    pub hidden: usize,
    pub bottleneck: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageDescriptor {
    pub id: usize,
    pub label: String,
    pub threshold: Option<f64>,
    pub frozen: bool,
    pub config: MoeConfig,
    pub ae: Option<AeShape>,
    /// Checkpoint keys of every parameter in the group.
    pub params: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryManifest {
    pub gate_rule: GateRule,
    pub stages: Vec<StageDescriptor>,
}

impl RegistryManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(format!("registry manifest: {e}")))
    }
}
