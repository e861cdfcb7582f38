use anyhow::Context;
use clap::Parser;
use gvl::config::RunConfig;
use gvl::datagen::generate_corpus;
use std::path::PathBuf;

/// Generate a synthetic corpus and write train.json, val.json and test.json.
#[derive(Parser)]
#[command(name = "datagen", version)]
struct Cli {
    /// TOML file; only its [gen] table is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(p) => RunConfig::parse(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => RunConfig::default(),
    };
    let corpus = generate_corpus(&cfg.gen)?;
    corpus.save(&cli.out).with_context(|| format!("writing corpus to {}", cli.out.display()))?;
    println!(
        "wrote {} train, {} val, {} test videos to {}",
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len(),
        cli.out.display()
    );
    Ok(())
}
