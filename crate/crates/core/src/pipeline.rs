//! End-to-end run: data, pretraining, stages, evaluation, reports, manifest.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::Source;
use crate::autoencoder::{calibrate_threshold, recon_error, train_ae, Autoencoder};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluator::{
    cluster_distances, evaluate_all, export_latents, latents_csv, naive_sft_baseline, pca2, routing_csv,
    routing_markdown, usage_csv, BaselineTask, EvalRow, LatentRecord, TestSet,
};
use crate::metrics::{markdown_table, metrics_csv, AccuracyMatrix};
use crate::numeric::checkpoint::Checkpoint;
use crate::numeric::rng::substream;
use crate::numeric::ParamStore;
use crate::reasoner::{pretrain, LmExample, PretrainReport, Reasoner};
use crate::router::write_trace_csv;
use crate::stage::{stage_prefix, RegistryManifest, StageRegistry};
use crate::taskgen::{generate_domain, pretraining_corpus, read_tsv, write_tsv, DomainData};
use crate::tokenizer::{TokenSeq, Vocabulary};
use crate::trainer::{build_invocation_plan, train_stage, write_training_log, StepLog, TrainingSample};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub phase: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub status: String,
    pub datasets: Vec<FileRecord>,
    pub checkpoints: Vec<FileRecord>,
    pub reports: Vec<FileRecord>,
    pub timings: Vec<Timing>,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(format!("run manifest: {e}")))
    }

    /// Every recorded file exists under `dir` with the recorded checksum.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for f in self.datasets.iter().chain(&self.checkpoints).chain(&self.reports) {
            let bytes = std::fs::read(dir.join(&f.path)).map_err(|e| Error::io(dir.join(&f.path), e))?;
            if sha256_hex(&bytes) != f.sha256 {
                return Err(Error::Invariant(format!("checksum mismatch for {}", f.path)));
            }
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, Default)]
pub struct PipelineOptions {
    /// Load this frozen reasoner checkpoint instead of pretraining.
    pub reasoner: Option<PathBuf>,
    pub baseline: bool,
    pub latents: bool,
}

/// In-memory results of a run, for callers that check properties.
#[derive(Debug)]
pub struct RunOutcome {
    pub matrix: AccuracyMatrix,
    pub baseline: Option<AccuracyMatrix>,
    /// Row 0 is the bare reasoner, row `t` follows stage `t`.
    pub evals: Vec<EvalRow>,
    /// Fraction of each stage's validation prompts its own autoencoder accepts.
    pub val_acceptance: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub training_logs: Vec<Vec<StepLog>>,
    pub pretrain: Option<PretrainReport>,
    /// Mean within-domain and cross-domain prompt-end feature distances.
    pub feature_distances: (f64, f64),
    pub latents: Vec<LatentRecord>,
    pub data: Vec<DomainData>,
    pub manifest: RunManifest,
}

struct Recorder<'a> {
    dir: &'a Path,
    manifest: RunManifest,
}

#[derive(Clone, Copy)]
enum Kind {
    Dataset,
    Checkpoint,
    Report,
}

impl Recorder<'_> {
    fn record(&mut self, rel: &str, kind: Kind) -> Result<()> {
        let path = self.dir.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let rec = FileRecord {
            path: rel.to_string(),
            sha256: sha256_hex(&bytes),
        };
        match kind {
            Kind::Dataset => self.manifest.datasets.push(rec),
            Kind::Checkpoint => self.manifest.checkpoints.push(rec),
            Kind::Report => self.manifest.reports.push(rec),
        }
        Ok(())
    }

    fn write(&mut self, rel: &str, text: &str, kind: Kind) -> Result<()> {
        let path = self.dir.join(rel);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.record(rel, kind)
    }

    fn time(&mut self, phase: &str, start: Instant) {
        self.manifest.timings.push(Timing {
            phase: phase.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
    }

    fn save(&self) -> Result<()> {
        let path = self.dir.join("manifest.json");
        std::fs::write(&path, self.manifest.to_json()).map_err(|e| Error::io(&path, e))
    }
}

/// Runs the whole pipeline into `dir`. On failure the manifest written so far
/// is saved with a `failed` status before the error is returned.
pub fn run_pipeline(cfg: &RunConfig, dir: &Path, opts: &PipelineOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    for sub in ["data", "checkpoints", "reports"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut rec = Recorder {
        dir,
        manifest: RunManifest {
            config: cfg.clone(),
            status: "running".into(),
            datasets: Vec::new(),
            checkpoints: Vec::new(),
            reports: Vec::new(),
            timings: Vec::new(),
        },
    };
    rec.write("config.toml", &cfg.to_toml(), Kind::Report)?;
    match run_inner(cfg, opts, &mut rec) {
        Ok(mut outcome) => {
            rec.manifest.status = "complete".into();
            rec.save()?;
            outcome.manifest = rec.manifest.clone();
            Ok(outcome)
        }
        Err(e) => {
            rec.manifest.status = format!("failed: {e}");
            rec.save()?;
            Err(e)
        }
    }
}

fn lm_example(vocab: &Vocabulary, prompt: &str, target: &str) -> Result<(TokenSeq, TokenSeq)> {
    let mut cont = vocab.encode(target)?;
    cont.push(vocab.eos());
    Ok((vocab.encode(prompt)?, cont))
}

/// Pretraining lines; a `drill_rate` fraction carries bare latent injections
/// at the same points a stage would inject memory.
pub fn pretraining_examples(cfg: &RunConfig, vocab: &Vocabulary, data: &[DomainData]) -> Result<Vec<LmExample>> {
    let specs: Vec<_> = cfg.task_order.iter().map(|&d| cfg.domain_spec(d)).collect();
    let mut exclude = HashSet::new();
    for d in data {
        for s in d.val.iter().chain(&d.test) {
            exclude.insert(s.prompt.clone());
        }
    }
    let lines = pretraining_corpus(&specs, &cfg.corpus(), cfg.seed, &exclude)?;
    let mut rng = substream(cfg.seed, "pretrain/drill");
    lines
        .iter()
        .map(|(p, t)| {
            let (prompt, continuation) = lm_example(vocab, p, t)?;
            let injections = if rng.random_bool(cfg.pretrain_drill_rate) {
                build_invocation_plan(&continuation, vocab, cfg.max_extra_injections)
            } else {
                Vec::new()
            };
            Ok(LmExample {
                prompt,
                continuation,
                injections,
                latent_len: cfg.latent_len,
            })
        })
        .collect()
}

/// What fitting one stage produced.
pub struct StageFit {
    pub log: Vec<StepLog>,
    pub threshold: f64,
    pub val_acceptance: f64,
}

/// Recruits a stage for `dd`, trains it, fits and calibrates its autoencoder
/// and freezes it.
pub fn fit_stage(
    cfg: &RunConfig,
    model: &Reasoner,
    store: &mut ParamStore,
    registry: &mut StageRegistry,
    vocab: &Vocabulary,
    dd: &DomainData,
) -> Result<StageFit> {
    let mcfg = model.config().clone();
    let id = registry.len() + 1;
    registry.recruit(store, &mcfg, &cfg.moe(), cfg.seed, dd.domain.name())?;
    let samples = dd
        .train
        .iter()
        .map(|s| TrainingSample::encode(vocab, &s.prompt, &s.target))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = substream(cfg.seed, &format!("stage-{id}/train"));
    let stage = registry.active().expect("just recruited");
    let log = train_stage(model, store, stage, vocab, &samples, &cfg.stage_train(), &mut rng)?;

    let mut rng = substream(cfg.seed, &format!("ae-{id}"));
    let ae_cfg = cfg.ae();
    let ae = Autoencoder::build(
        store,
        &mut Source::Fresh(&mut rng),
        &format!("{}/ae", stage_prefix(id)),
        mcfg.d_model,
        &ae_cfg,
    )?;
    let features = |store: &ParamStore, samples: &[crate::taskgen::Sample]| {
        samples
            .iter()
            .map(|s| model.prompt_end_feature(store, &vocab.encode(&s.prompt)?))
            .collect::<Result<Vec<_>>>()
    };
    let feats = features(store, &dd.train)?;
    train_ae(store, &ae, &feats, &ae_cfg, &mut rng)?;
    let val_errors = features(store, &dd.val)?
        .iter()
        .map(|h| recon_error(store, &ae, h))
        .collect::<Result<Vec<_>>>()?;
    let threshold = calibrate_threshold(&val_errors, ae_cfg.percentile)?;
    let accepted = val_errors.iter().filter(|&&e| e <= threshold).count();
    registry.consolidate(store, ae, threshold)?;
    Ok(StageFit {
        log,
        threshold,
        val_acceptance: accepted as f64 / val_errors.len() as f64,
    })
}

/// Everything needed to continue or inspect a run directory.
pub struct RunState {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub model: Reasoner,
    pub registry: StageRegistry,
    pub data: Vec<DomainData>,
}

impl RunState {
    /// Loads the config, datasets, frozen reasoner and any saved stages.
    pub fn load(dir: &Path) -> Result<Self> {
        let config = RunConfig::read(&dir.join("config.toml"))?;
        let tok = std::fs::read_to_string(dir.join("tokenizer.json")).map_err(|e| Error::io(dir.join("tokenizer.json"), e))?;
        let spec = serde_json::from_str(&tok).map_err(|e| Error::parse(format!("tokenizer spec: {e}")))?;
        let vocab = Vocabulary::from_spec(&spec)?;
        let mut data = Vec::new();
        for &d in &config.task_order {
            let read = |split: &str| read_tsv(&dir.join(format!("data/{}_{split}.tsv", d.name())));
            data.push(DomainData {
                domain: d,
                train: read("train")?,
                val: read("val")?,
                test: read("test")?,
            });
        }
        let mut store = ParamStore::new();
        Checkpoint::read(&dir.join("checkpoints/reasoner.ckpt"))?.insert_into(&mut store)?;
        let mcfg = config.reasoner(vocab.len());
        let model = Reasoner::build(&mut store, &mut Source::Existing, &mcfg)?;
        model.freeze(&mut store);
        let reg_path = dir.join("registry.json");
        let registry = if reg_path.exists() {
            let text = std::fs::read_to_string(&reg_path).map_err(|e| Error::io(&reg_path, e))?;
            let manifest = RegistryManifest::from_json(&text)?;
            for d in &manifest.stages {
                Checkpoint::read(&dir.join(format!("checkpoints/stage{}.ckpt", d.id)))?.insert_into(&mut store)?;
            }
            StageRegistry::from_manifest(&mut store, &mcfg, &manifest)?
        } else {
            StageRegistry::new(config.gate_rule)
        };
        Ok(Self {
            config,
            vocab,
            store,
            model,
            registry,
            data,
        })
    }

    pub fn test_sets(&self) -> Vec<TestSet> {
        test_sets(&self.data)
    }

    /// Fits the next stage in the task order and saves it.
    pub fn add_stage(&mut self, dir: &Path) -> Result<StageFit> {
        let t = self.registry.len();
        let dd = self
            .data
            .get(t)
            .ok_or_else(|| Error::contract(format!("all {t} stages of the task order are trained")))?;
        let fit = fit_stage(&self.config, &self.model, &mut self.store, &mut self.registry, &self.vocab, dd)?;
        let id = t + 1;
        write_training_log(&dir.join(format!("reports/train_log_stage{id}.csv")), &fit.log)?;
        let group = &self.registry.stages()[t];
        Checkpoint::from_store(&self.store, &group.param_ids()).write(&dir.join(format!("checkpoints/stage{id}.ckpt")))?;
        let path = dir.join("registry.json");
        std::fs::write(&path, self.registry.manifest(&self.store).to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(fit)
    }
}

pub fn test_sets(data: &[DomainData]) -> Vec<TestSet> {
    data.iter()
        .map(|d| TestSet {
            name: d.domain.name().to_string(),
            samples: d.test.clone(),
        })
        .collect()
}

/// Generates the datasets and the frozen reasoner into `dir` (the first half
/// of a run, reusable by later subcommands).
pub fn prepare_run(cfg: &RunConfig, dir: &Path) -> Result<Option<PretrainReport>> {
    cfg.validate()?;
    for sub in ["data", "checkpoints", "reports"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut rec = Recorder {
        dir,
        manifest: RunManifest {
            config: cfg.clone(),
            status: "prepared".into(),
            datasets: Vec::new(),
            checkpoints: Vec::new(),
            reports: Vec::new(),
            timings: Vec::new(),
        },
    };
    rec.write("config.toml", &cfg.to_toml(), Kind::Report)?;
    let vocab = Vocabulary::default_table();
    let (_, _, _, report) = prepare(cfg, &PipelineOptions::default(), &mut rec, &vocab)?;
    rec.save()?;
    Ok(report)
}

type Prepared = (Vec<DomainData>, ParamStore, Reasoner, Option<PretrainReport>);

fn prepare(cfg: &RunConfig, opts: &PipelineOptions, rec: &mut Recorder<'_>, vocab: &Vocabulary) -> Result<Prepared> {
    let tok = serde_json::to_string_pretty(&vocab.spec()).expect("tokenizer serializes");
    rec.write("tokenizer.json", &tok, Kind::Report)?;

    let t0 = Instant::now();
    let mut data = Vec::new();
    for &d in &cfg.task_order {
        let dd = generate_domain(&cfg.domain_spec(d), &cfg.splits(), cfg.seed)?;
        for (split, samples) in [("train", &dd.train), ("val", &dd.val), ("test", &dd.test)] {
            let rel = format!("data/{}_{split}.tsv", d.name());
            write_tsv(&rec.dir.join(&rel), samples)?;
            rec.record(&rel, Kind::Dataset)?;
        }
        data.push(dd);
    }
    rec.time("datagen", t0);

    let mcfg = cfg.reasoner(vocab.len());
    let mut store = ParamStore::new();
    let t0 = Instant::now();
    let (model, report) = match &opts.reasoner {
        Some(path) => {
            let ck = Checkpoint::read(path)?;
            ck.insert_into(&mut store)?;
            let model = Reasoner::build(&mut store, &mut Source::Existing, &mcfg)?;
            model.freeze(&mut store);
            (model, None)
        }
        None => {
            let mut rng = substream(cfg.seed, "pretrain");
            let model = Reasoner::build(&mut store, &mut Source::Fresh(&mut rng), &mcfg)?;
            let examples = pretraining_examples(cfg, vocab, &data)?;
            let (held, train) = examples.split_at(cfg.pretrain_heldout);
            let report = pretrain(&model, &mut store, train, held, &cfg.pretrain(), &mut rng)?;
            (model, Some(report))
        }
    };
    Checkpoint::from_store(&store, &model.param_ids()).write(&rec.dir.join("checkpoints/reasoner.ckpt"))?;
    rec.record("checkpoints/reasoner.ckpt", Kind::Checkpoint)?;
    if let Some(r) = &report {
        let mut s = String::from("epoch,train_loss,heldout_loss\n");
        for (i, (a, b)) in r.train_loss.iter().zip(&r.heldout_loss).enumerate() {
            s.push_str(&format!("{i},{a:.17e},{b:.17e}\n"));
        }
        rec.write("reports/pretrain_loss.csv", &s, Kind::Report)?;
    }
    rec.time("pretrain", t0);
    Ok((data, store, model, report))
}

fn run_inner(cfg: &RunConfig, opts: &PipelineOptions, rec: &mut Recorder<'_>) -> Result<RunOutcome> {
    let vocab = Vocabulary::default_table();
    let (data, mut store, model, report) = prepare(cfg, opts, rec, &vocab)?;

    let feature_groups = data
        .iter()
        .map(|d| {
            d.test
                .iter()
                .take(100)
                .map(|s| model.prompt_end_feature(&store, &vocab.encode(&s.prompt)?))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let feature_distances = cluster_distances(&feature_groups);

    let sets = test_sets(&data);
    let tasks: Vec<String> = sets.iter().map(|s| s.name.clone()).collect();
    let gen = cfg.generation();

    let t0 = Instant::now();
    let mut registry = StageRegistry::new(cfg.gate_rule);
    let vanilla = evaluate_all(&model, &store, &registry, &vocab, &sets, &gen)?;
    let mut matrix = AccuracyMatrix::new(tasks.clone(), vanilla.accuracies())?;
    let mut evals = vec![vanilla];
    rec.time("eval-0", t0);

    let mut val_acceptance = Vec::new();
    let mut thresholds = Vec::new();
    let mut logs = Vec::new();
    let mut trace = Vec::new();
    for (t, dd) in data.iter().enumerate() {
        let id = t + 1;
        let t0 = Instant::now();
        let fit = fit_stage(cfg, &model, &mut store, &mut registry, &vocab, dd)?;
        let rel = format!("reports/train_log_stage{id}.csv");
        write_training_log(&rec.dir.join(&rel), &fit.log)?;
        rec.record(&rel, Kind::Report)?;
        logs.push(fit.log);
        val_acceptance.push(fit.val_acceptance);
        thresholds.push(fit.threshold);
        let group = &registry.stages()[t];
        let rel = format!("checkpoints/stage{id}.ckpt");
        Checkpoint::from_store(&store, &group.param_ids()).write(&rec.dir.join(&rel))?;
        rec.record(&rel, Kind::Checkpoint)?;
        rec.time(&format!("stage-{id}/fit"), t0);

        let t0 = Instant::now();
        let row = evaluate_all(&model, &store, &registry, &vocab, &sets, &gen)?;
        matrix.push(row.accuracies())?;
        let labels: Vec<String> = registry.stages().iter().map(|s| s.label.clone()).collect();
        rec.write(&format!("reports/routing_stage{id}.md"), &routing_markdown(&row, &labels), Kind::Report)?;
        rec.write(&format!("reports/routing_stage{id}.csv"), &routing_csv(&row, &labels), Kind::Report)?;
        rec.write(&format!("reports/expert_usage_stage{id}.csv"), &usage_csv(&row), Kind::Report)?;
        trace.extend(row.trace.iter().cloned());
        evals.push(row);
        rec.time(&format!("stage-{id}/eval"), t0);
    }
    write_trace_csv(&rec.dir.join("reports/routing_trace.csv"), &trace)?;
    rec.record("reports/routing_trace.csv", Kind::Report)?;
    rec.write("registry.json", &registry.manifest(&store).to_json(), Kind::Report)?;

    let metric_rows = matrix.report("MoLEM")?;
    rec.write("reports/metrics.md", &markdown_table(&tasks, &metric_rows), Kind::Report)?;
    rec.write("reports/metrics.csv", &metrics_csv(&tasks, &metric_rows), Kind::Report)?;

    let baseline = if opts.baseline {
        let t0 = Instant::now();
        let btasks = data
            .iter()
            .map(|d| {
                Ok(BaselineTask {
                    name: d.domain.name().to_string(),
                    train: d
                        .train
                        .iter()
                        .map(|s| {
                            let (p, c) = lm_example(&vocab, &s.prompt, &s.target)?;
                            Ok(LmExample::plain(p, c))
                        })
                        .collect::<Result<Vec<_>>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rng = substream(cfg.seed, "baseline");
        let b = naive_sft_baseline(&model, &store, &vocab, &btasks, &sets, &cfg.baseline(), &gen, &mut rng)?;
        let rows = b.report("SFT")?;
        rec.write("reports/baseline_metrics.md", &markdown_table(&tasks, &rows), Kind::Report)?;
        rec.write("reports/baseline_metrics.csv", &metrics_csv(&tasks, &rows), Kind::Report)?;
        rec.time("baseline", t0);
        Some(b)
    } else {
        None
    };

    let latents = if opts.latents {
        let t0 = Instant::now();
        let prompts: Vec<String> = data
            .iter()
            .flat_map(|d| d.test.iter().take(10).map(|s| s.prompt.clone()))
            .collect();
        let recs = export_latents(&model, &store, &registry, &vocab, &prompts, None)?;
        rec.write("reports/latents.csv", &latents_csv(&recs), Kind::Report)?;
        let coords = pca2(&recs.iter().map(|r| r.values.clone()).collect::<Vec<_>>())?;
        let mut s = String::from("stage,expert,prompt,pc1,pc2\n");
        for (r, c) in recs.iter().zip(&coords) {
            s.push_str(&format!("{},{},{},{:e},{:e}\n", r.stage, r.expert, r.prompt, c[0], c[1]));
        }
        rec.write("reports/latents_pca.csv", &s, Kind::Report)?;
        rec.time("latents", t0);
        recs
    } else {
        Vec::new()
    };

    Ok(RunOutcome {
        matrix,
        baseline,
        evals,
        val_acceptance,
        thresholds,
        training_logs: logs,
        pretrain: report,
        feature_distances,
        latents,
        data,
        manifest: rec.manifest.clone(),
    })
}
