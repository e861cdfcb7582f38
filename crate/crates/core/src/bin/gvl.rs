use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use gvl::config::RunConfig;
use gvl::datagen::{generate_corpus, Corpus};
use gvl::eval::{assign_labels, evaluate, random_proposal_baseline};
use gvl::experiment::{run_experiment, Mode};
use gvl::model::Model;
use gvl::trainer::{train, TrainConfig};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "gvl", version, about = "Train, evaluate and ablate the grounded video-language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the corpus described (or pointed to) by the config; writes model.json.
    Train(Common),
    /// Evaluate a trained model on the test split; writes metrics.json.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (default: <out>/model.json).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Also write every test video's similarity matrices to omega.jsonl.
        #[arg(long)]
        dump_omega: bool,
        /// Also write every test video's matching cost and assignment to matching.jsonl.
        #[arg(long)]
        dump_matching: bool,
    },
    /// Run an ablation or sweep; writes results.csv, report.json and plots.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// full | no_teg | no_etg | lambda_sweep | cost_ablation | jitter_study
        #[arg(long)]
        mode: String,
    },
}

#[derive(Args)]
struct Common {
    /// TOML file with [gen], [model], [train] and [experiment] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides train.seed and model.init_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Load the corpus written by `datagen` instead of generating it from [gen].
    #[arg(long)]
    corpus: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
            cfg.model.init_seed = seed;
        }
        Ok(cfg)
    }

    fn corpus(&self, cfg: &mut RunConfig) -> anyhow::Result<Corpus> {
        match &self.corpus {
            Some(dir) => {
                let corpus = Corpus::load(dir).with_context(|| format!("loading corpus from {}", dir.display()))?;
                cfg.gen = corpus.config.clone();
                cfg.validate()?;
                Ok(corpus)
            }
            None => Ok(generate_corpus(&cfg.gen)?),
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct OmegaDump<'a> {
    video: usize,
    omega_sent: &'a gvl_autograd::Matrix,
    omega_ctx: &'a gvl_autograd::Matrix,
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Train(common) => {
            let mut cfg = common.load()?;
            let corpus = common.corpus(&mut cfg)?;
            std::fs::create_dir_all(&common.out)?;
            let train_cfg = TrainConfig { log_path: Some(common.out.join("train_log.jsonl")), ..cfg.train.clone() };
            let mut model = Model::new(&cfg.model)?;
            let report = train(&corpus, &mut model, &train_cfg)?;
            model.save(&common.out.join("model.json"))?;
            write_json(&common.out.join("train_report.json"), &report)?;
            if let Some(l) = report.final_losses() {
                println!("trained {} epochs in {:.1}s, final loss {:.4}", report.epochs.len(), report.wall_seconds, l.total);
            }
            if let Some(best) = report.best_val_score {
                println!("best validation score {best:.4} at epoch {}", report.best_epoch);
            }
        }
        Command::Eval { common, model, dump_omega, dump_matching } => {
            let mut cfg = common.load()?;
            let corpus = common.corpus(&mut cfg)?;
            let path = model.unwrap_or_else(|| common.out.join("model.json"));
            let model = Model::load(&path).with_context(|| format!("loading {}", path.display()))?;
            std::fs::create_dir_all(&common.out)?;
            let metrics = evaluate(&model, &corpus.test, &corpus.vocabulary(), &cfg.train)?;
            let baseline = random_proposal_baseline(&corpus.test, corpus.config.event_width_range, corpus.config.seed)?;
            write_json(&common.out.join("metrics.json"), &serde_json::json!({ "metrics": metrics, "random_baseline": baseline }))?;
            println!(
                "SSVG mIoU {:.4} | MSVG mIoU argmax {:.4} hungarian {:.4} | verb acc {:.4} | random baseline mIoU {:.4}",
                metrics.ssvg.miou, metrics.msvg_argmax.miou, metrics.msvg_hungarian.miou, metrics.captioning.verb_accuracy, baseline.miou
            );
            if dump_omega {
                let mut w = std::io::BufWriter::new(std::fs::File::create(common.out.join("omega.jsonl"))?);
                for v in &corpus.test {
                    let enc = model.encode(v, &v.sentences())?;
                    serde_json::to_writer(&mut w, &OmegaDump { video: v.id, omega_sent: &enc.omega_sent, omega_ctx: &enc.omega_ctx })?;
                    writeln!(w)?;
                }
            }
            if dump_matching {
                let mut w = std::io::BufWriter::new(std::fs::File::create(common.out.join("matching.jsonl"))?);
                let mode = cfg.train.effective_cost_mode();
                for v in &corpus.test {
                    let (_, cost, assignment) = assign_labels(&model, v, mode, cfg.train.lambda, cfg.train.caption_cost_sum)?;
                    serde_json::to_writer(&mut w, &serde_json::json!({ "video": v.id, "cost": cost, "assignment": assignment }))?;
                    writeln!(w)?;
                }
            }
        }
        Command::Experiment { common, mode } => {
            let mode: Mode = mode.parse()?;
            let cfg = common.load()?;
            if common.corpus.is_some() {
                bail!("experiments generate their own corpus from [gen]; drop --corpus");
            }
            let report = run_experiment(&cfg, mode, &common.out)?;
            println!("{} rows in {:.1}s; random baseline mIoU {:.4}", report.rows.len(), report.wall_seconds, report.random_baseline.miou);
            for f in &report.files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}
