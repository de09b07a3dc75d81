use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use molem::config::{Preset, RunConfig};
use molem::evaluator::{
    evaluate_all, export_latents, latents_csv, naive_sft_baseline, pca2, routing_markdown, BaselineTask,
};
use molem::metrics::{fmt2, grid_report, markdown_table, metrics_csv, read_grid};
use molem::pipeline::{prepare_run, run_pipeline, PipelineOptions, RunState};
use molem::reasoner::LmExample;
use molem::Error;

#[derive(Parser)]
#[command(name = "molem", version, about = "Continual learning with stage-isolated latent-memory experts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: PresetArg,
}

impl ConfigArgs {
    fn load(&self) -> molem::Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::read(p),
            None => Ok(RunConfig::preset(match self.preset {
                PresetArg::Desk => Preset::Desk,
                PresetArg::Paper => Preset::Paper,
            })),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: data, pretraining, every stage, evaluation and reports.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Reuse a frozen reasoner checkpoint instead of pretraining.
        #[arg(long)]
        reasoner: Option<PathBuf>,
        /// Also run the sequential full fine-tuning baseline.
        #[arg(long)]
        baseline: bool,
        /// Also export latent segments and their PCA coordinates.
        #[arg(long)]
        latents: bool,
    },
    /// Generate datasets and pretrain the reasoner into a run directory.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the next stage of the task order in an existing run directory.
    Stage {
        #[arg(long)]
        run: PathBuf,
    },
    /// Evaluate the saved stages on every test set.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    /// Continual-learning metrics of an accuracy grid CSV.
    Metrics {
        #[arg(long)]
        grid: PathBuf,
        /// Print CSV instead of markdown.
        #[arg(long)]
        csv: bool,
    },
    /// Write per-expert latent segments for test prompts.
    ExportLatents {
        #[arg(long)]
        run: PathBuf,
        /// Prompts taken from the head of each test set.
        #[arg(long, default_value_t = 10)]
        per_domain: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pca: Option<PathBuf>,
    },
    /// Sequential full fine-tuning of a copy of the reasoner.
    Baseline {
        #[arg(long)]
        run: PathBuf,
    },
    /// Print a preset as TOML.
    Config {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::TrainingFailure { .. } => 3,
        Error::Invariant(_) | Error::GenerationTruncated { .. } => 4,
        Error::Contract(_) | Error::Parse(_) | Error::Io { .. } => 2,
    }
}

fn write(path: &Path, text: &str) -> molem::Result<()> {
    std::fs::write(path, text).map_err(|e| molem::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn execute(cmd: Command) -> molem::Result<()> {
    match cmd {
        Command::Run {
            config,
            out,
            reasoner,
            baseline,
            latents,
        } => {
            let cfg = config.load()?;
            let opts = PipelineOptions {
                reasoner,
                baseline,
                latents,
            };
            let outcome = run_pipeline(&cfg, &out, &opts)?;
            print!("{}", markdown_table(&outcome.matrix.tasks, &outcome.matrix.report("MoLEM")?));
            if let Some(b) = &outcome.baseline {
                print!("{}", markdown_table(&b.tasks, &b.report("SFT")?));
            }
        }
        Command::Pretrain { config, out } => {
            let cfg = config.load()?;
            if let Some(r) = prepare_run(&cfg, &out)? {
                for (i, l) in r.heldout_loss.iter().enumerate() {
                    println!("epoch {i}: held-out loss {l:.4}");
                }
            }
        }
        Command::Stage { run } => {
            let mut state = RunState::load(&run)?;
            let fit = state.add_stage(&run)?;
            let id = state.registry.len();
            println!(
                "stage {id} ({}): threshold {:.6}, validation acceptance {}%",
                state.registry.stages()[id - 1].label,
                fit.threshold,
                fmt2(fit.val_acceptance * 100.0)
            );
        }
        Command::Eval { run } => {
            let state = RunState::load(&run)?;
            let sets = state.test_sets();
            let row = evaluate_all(
                &state.model,
                &state.store,
                &state.registry,
                &state.vocab,
                &sets,
                &state.config.generation(),
            )?;
            for s in &row.sets {
                println!("{}: {}", s.name, fmt2(s.accuracy()));
            }
            let labels: Vec<String> = state.registry.stages().iter().map(|s| s.label.clone()).collect();
            print!("{}", routing_markdown(&row, &labels));
        }
        Command::Metrics { grid, csv } => {
            let blocks = read_grid(&grid)?;
            let (md, table) = grid_report(&blocks)?;
            print!("{}", if csv { table } else { md });
        }
        Command::ExportLatents {
            run,
            per_domain,
            out,
            pca,
        } => {
            let state = RunState::load(&run)?;
            let prompts: Vec<String> = state
                .data
                .iter()
                .flat_map(|d| d.test.iter().take(per_domain).map(|s| s.prompt.clone()))
                .collect();
            let recs = export_latents(&state.model, &state.store, &state.registry, &state.vocab, &prompts, None)?;
            write(&out, &latents_csv(&recs))?;
            if let Some(p) = pca {
                let coords = pca2(&recs.iter().map(|r| r.values.clone()).collect::<Vec<_>>())?;
                let mut s = String::from("stage,expert,prompt,pc1,pc2\n");
                for (r, c) in recs.iter().zip(&coords) {
                    s.push_str(&format!("{},{},{},{:e},{:e}\n", r.stage, r.expert, r.prompt, c[0], c[1]));
                }
                write(&p, &s)?;
            }
            println!("{} rows", recs.len());
        }
        Command::Baseline { run } => {
            let state = RunState::load(&run)?;
            let vocab = &state.vocab;
            let tasks = state
                .data
                .iter()
                .map(|d| {
                    let train = d
                        .train
                        .iter()
                        .map(|s| {
                            let mut c = vocab.encode(&s.target)?;
                            c.push(vocab.eos());
                            Ok(LmExample::plain(vocab.encode(&s.prompt)?, c))
                        })
                        .collect::<molem::Result<Vec<_>>>()?;
                    Ok(BaselineTask {
                        name: d.domain.name().to_string(),
                        train,
                    })
                })
                .collect::<molem::Result<Vec<_>>>()?;
            let mut rng = molem::numeric::rng::substream(state.config.seed, "baseline");
            let m = naive_sft_baseline(
                &state.model,
                &state.store,
                vocab,
                &tasks,
                &state.test_sets(),
                &state.config.baseline(),
                &state.config.generation(),
                &mut rng,
            )?;
            let rows = m.report("SFT")?;
            write(&run.join("reports/baseline_metrics.csv"), &metrics_csv(&m.tasks, &rows))?;
            print!("{}", markdown_table(&m.tasks, &rows));
        }
        Command::Config { config } => print!("{}", config.load()?.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::TrainingFailure { loss_curve, .. } = &e {
                eprintln!("loss curve: {loss_curve:?}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
