//! Flat run configuration read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::LoraConfig;
use crate::autoencoder::{AeConfig, GateRule};
use crate::error::{ensure, Error, Result};
use crate::reasoner::{GenerationConfig, LmTrainConfig, PretrainConfig, ReasonerConfig};
use crate::stage::MoeConfig;
use crate::taskgen::{CorpusConfig, Domain, DomainSpec, SplitSizes};
use crate::trainer::{BalanceProbs, StageTrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

/// Every knob of a run. Keys are flat so that manifests diff line by line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub task_order: Vec<Domain>,

    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,

    pub n_experts: usize,
    pub n_select: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub latent_len: usize,
    pub max_extra_injections: usize,
    pub d_key: usize,
    pub lambda_lb: f64,
    pub balance_probs: BalanceProbs,

    pub stage_learning_rate: f64,
    pub stage_epochs: usize,
    pub stage_batch_size: usize,
    pub warmup_ratio: f64,

    pub ae_hidden: usize,
    pub ae_bottleneck: usize,
    pub ae_epochs: usize,
    pub ae_batch_size: usize,
    pub ae_learning_rate: f64,
    pub ae_percentile: f64,
    pub gate_rule: GateRule,

    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub arith_modulus: u32,
    pub contested_rate: f64,

    pub pretrain_per_domain: usize,
    pub pretrain_filler: usize,
    pub pretrain_heldout: usize,
    pub pretrain_alternative_rate: f64,
    /// Fraction of pretraining lines that carry bare latent injections.
    pub pretrain_drill_rate: f64,
    pub pretrain_epochs: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_learning_rate: f64,
    pub pretrain_warmup_ratio: f64,
    pub max_heldout_loss: f64,

    pub baseline_learning_rate: f64,
    pub baseline_epochs: usize,

    pub max_new_tokens: usize,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            seed: 17,
            task_order: vec![Domain::Arith, Domain::SortSym, Domain::StackEval],
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 128,
            max_len: 256,
            n_experts: 4,
            n_select: 2,
            lora_rank: 4,
            lora_alpha: 8.0,
            latent_len: 4,
            max_extra_injections: 5,
            d_key: 32,
            lambda_lb: 0.01,
            balance_probs: BalanceProbs::AllExperts,
            stage_learning_rate: 1e-3,
            stage_epochs: 3,
            stage_batch_size: 16,
            warmup_ratio: 0.1,
            ae_hidden: 32,
            ae_bottleneck: 16,
            ae_epochs: 50,
            ae_batch_size: 32,
            ae_learning_rate: 1e-3,
            ae_percentile: 0.95,
            gate_rule: GateRule::AcceptedArgmin,
            train_size: 1000,
            val_size: 100,
            test_size: 200,
            arith_modulus: 10,
            contested_rate: 0.5,
            pretrain_per_domain: 3000,
            pretrain_filler: 750,
            pretrain_heldout: 200,
            pretrain_alternative_rate: 0.6,
            pretrain_drill_rate: 0.5,
            pretrain_epochs: 5,
            pretrain_batch_size: 16,
            pretrain_learning_rate: 1e-3,
            pretrain_warmup_ratio: 0.05,
            max_heldout_loss: 0.5,
            baseline_learning_rate: 3e-4,
            baseline_epochs: 3,
            max_new_tokens: 40,
        }
    }

    /// The desk configuration with the published adapter, latent, rate and
    /// split values substituted.
    pub fn paper() -> Self {
        Self {
            preset: Preset::Paper,
            lora_rank: 16,
            lora_alpha: 32.0,
            latent_len: 8,
            stage_learning_rate: 1e-5,
            test_size: 500,
            ..Self::desk()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.task_order.is_empty(), "task order is empty");
        let mut seen = self.task_order.clone();
        seen.sort_by_key(|d| d.name());
        seen.dedup();
        ensure!(seen.len() == self.task_order.len(), "task order repeats a domain");
        self.reasoner(crate::tokenizer::Vocabulary::default_table().len()).validate()?;
        self.moe().validate()?;
        ensure!(self.lambda_lb >= 0.0 && self.lambda_lb.is_finite(), "lambda must be a nonnegative number");
        ensure!(
            self.ae_percentile > 0.0 && self.ae_percentile <= 1.0,
            "percentile must lie in (0,1]"
        );
        ensure!(
            (0.0..=1.0).contains(&self.pretrain_drill_rate) && (0.0..=1.0).contains(&self.pretrain_alternative_rate),
            "rates must lie in [0,1]"
        );
        ensure!(
            self.stage_batch_size > 0 && self.pretrain_batch_size > 0 && self.ae_batch_size > 0,
            "batch sizes must be positive"
        );
        ensure!(self.max_new_tokens > 0, "max_new_tokens must be positive");
        ensure!(self.val_size >= 20, "threshold calibration needs at least 20 validation prompts");
        ensure!(self.train_size >= 10, "autoencoder training needs at least 10 prompts");
        ensure!(
            self.pretrain_per_domain > self.pretrain_heldout,
            "held-out lines must be fewer than pretraining lines"
        );
        for &d in &self.task_order {
            self.domain_spec(d).validate()?;
        }
        Ok(())
    }

    pub fn reasoner(&self, vocab_size: usize) -> ReasonerConfig {
        ReasonerConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_len: self.max_len,
        }
    }

    pub fn moe(&self) -> MoeConfig {
        MoeConfig {
            n_experts: self.n_experts,
            n_select: self.n_select,
            d_key: self.d_key,
            latent_len: self.latent_len,
            max_extra_injections: self.max_extra_injections,
            lora: LoraConfig {
                rank: self.lora_rank,
                alpha: self.lora_alpha,
            },
        }
    }

    pub fn stage_train(&self) -> StageTrainConfig {
        StageTrainConfig {
            epochs: self.stage_epochs,
            batch_size: self.stage_batch_size,
            learning_rate: self.stage_learning_rate,
            warmup_ratio: self.warmup_ratio,
            lambda_lb: self.lambda_lb,
            balance_probs: self.balance_probs,
        }
    }

    pub fn ae(&self) -> AeConfig {
        AeConfig {
            hidden: self.ae_hidden,
            bottleneck: self.ae_bottleneck,
            epochs: self.ae_epochs,
            batch_size: self.ae_batch_size,
            learning_rate: self.ae_learning_rate,
            percentile: self.ae_percentile,
        }
    }

    pub fn splits(&self) -> SplitSizes {
        SplitSizes {
            train: self.train_size,
            val: self.val_size,
            test: self.test_size,
        }
    }

    pub fn domain_spec(&self, d: Domain) -> DomainSpec {
        DomainSpec {
            min_modulus: self.arith_modulus,
            max_modulus: self.arith_modulus,
            contested_rate: self.contested_rate,
            ..DomainSpec::desk(d)
        }
    }

    pub fn corpus(&self) -> CorpusConfig {
        CorpusConfig {
            per_domain: self.pretrain_per_domain,
            alternative_rate: self.pretrain_alternative_rate,
            filler: self.pretrain_filler,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            train: LmTrainConfig {
                epochs: self.pretrain_epochs,
                batch_size: self.pretrain_batch_size,
                learning_rate: self.pretrain_learning_rate,
                warmup_ratio: self.pretrain_warmup_ratio,
            },
            max_heldout_loss: self.max_heldout_loss,
        }
    }

    pub fn baseline(&self) -> LmTrainConfig {
        LmTrainConfig {
            epochs: self.baseline_epochs,
            batch_size: self.stage_batch_size,
            learning_rate: self.baseline_learning_rate,
            warmup_ratio: self.warmup_ratio,
        }
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            max_new_tokens: self.max_new_tokens,
            max_extra_injections: self.max_extra_injections,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_and_validate() {
        for p in [RunConfig::desk(), RunConfig::paper()] {
            p.validate().unwrap();
            assert_eq!(RunConfig::from_toml(&p.to_toml()).unwrap(), p);
        }
    }

    #[test]
    fn presets_differ_only_in_published_fields() {
        let d = toml::Value::try_from(RunConfig::desk()).unwrap();
        let p = toml::Value::try_from(RunConfig::paper()).unwrap();
        let (d, p) = (d.as_table().unwrap(), p.as_table().unwrap());
        let mut diff: Vec<&str> = d.keys().filter(|k| d[*k] != p[*k]).map(String::as_str).collect();
        diff.sort_unstable();
        assert_eq!(
            diff,
            ["latent_len", "lora_alpha", "lora_rank", "preset", "stage_learning_rate", "test_size"]
        );
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut text = RunConfig::desk().to_toml();
        text.push_str("\nbogus = 1\n");
        assert!(RunConfig::from_toml(&text).is_err());
        let mut c = RunConfig::desk();
        c.n_select = 5;
        assert!(RunConfig::from_toml(&c.to_toml()).is_err());
        c = RunConfig::desk();
        c.task_order = vec![Domain::Arith, Domain::Arith];
        assert!(RunConfig::from_toml(&c.to_toml()).is_err());
    }
}
