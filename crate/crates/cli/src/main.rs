use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mvreport_core::corpus::{normalize_report, SplitName};
use mvreport_core::dot::Views;
use mvreport_core::harness::config::Profile;
use mvreport_core::harness::eval::relative_gap;
use mvreport_core::harness::{
    ablate, evaluate, export_analysis, pretrain, rl_finetune, AnalysisKind, Checkpoint, Dataset, GapReport, Model,
    Outputs, RunRecord, TrainConfig, VARIANTS,
};
use mvreport_core::metrics::{score_corpus, BleuMode, RewardWeights};

#[derive(Parser)]
#[command(name = "mvreport", version, about = "Multi-view chest X-ray report generation experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Built-in defaults to start from.
    #[arg(long, global = true, default_value = "toy")]
    profile: String,
    /// TOML file layered over the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `section.key=value` override; repeatable, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

impl Common {
    fn explicit(&self) -> bool {
        self.config.is_some() || !self.set.is_empty() || self.seed.is_some()
    }

    fn load(&self) -> Result<TrainConfig> {
        let profile: Profile = self.profile.parse()?;
        let mut sets = self.set.clone();
        if let Some(s) = self.seed {
            sets.push(format!("seed={s}"));
        }
        let cfg = TrainConfig::load(profile, self.config.as_deref(), &sets)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A model from a checkpoint. An explicit config must match the
    /// checkpoint's architecture unless `force`.
    fn model(&self, checkpoint: &Path, force: bool) -> Result<Model> {
        let ck = Checkpoint::read(checkpoint)?;
        let cfg = if self.explicit() { Some(self.load()?) } else { None };
        Ok(ck.into_model(cfg.as_ref(), force)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Ingest or synthesise the corpus; write manifest, split and vocabulary.
    PrepareData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Teacher-forced pre-training.
    Train {
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-critical fine-tuning from a pre-trained checkpoint.
    RlFinetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Beam-search evaluation with the given views available.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Comma-separated subset of frontal, lateral, both.
        #[arg(long, default_value = "both")]
        views: String,
        /// JSON file for bundles and generated reports.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Pre-train and evaluate a named variant (or `all`).
    Ablate {
        variant: String,
        #[arg(long)]
        out: PathBuf,
        /// Seeds to run, starting from the configured one.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Score hypothesis lines against reference lines.
    Score {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "corpus")]
        bleu_mode: String,
    },
    /// Write semantic-embeddings or similarity-matrices data files.
    Export {
        analysis: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    run(cli)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn parse_views(s: &str) -> Result<Vec<Views>> {
    let v: Vec<Views> = s.split(',').map(|p| p.trim().parse()).collect::<Result<_, _>>()?;
    if v.is_empty() {
        bail!("no views requested");
    }
    Ok(v)
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::PrepareData { out } => {
            let cfg = common.load()?;
            let data = Dataset::prepare(&cfg)?;
            data.write_prepared(out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml())?;
            println!(
                "cases {} (dropped {}), train {} val {} test {}, vocabulary {}",
                data.cases.len(),
                data.dropped_empty,
                data.split.train.len(),
                data.split.val.len(),
                data.split.test.len(),
                data.vocab.len()
            );
        }
        Command::Train { out } => {
            let cfg = common.load()?;
            let data = Dataset::prepare(&cfg)?;
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml())?;
            let (_, record) = pretrain(&cfg, &data, "train", &Outputs::at(out))?;
            print_record(&record);
        }
        Command::RlFinetune { checkpoint, out, force } => {
            let model = common.model(checkpoint, *force)?;
            let data = Dataset::with_vocab(&model.cfg, model.vocab.clone())?;
            let mut record = RunRecord::new("rl-finetune", &model.cfg, &model.arch_hash());
            rl_finetune(model, &data, &mut record, &Outputs::at(out))?;
            print_record(&record);
        }
        Command::Evaluate {
            checkpoint,
            split,
            views,
            out,
            force,
        } => {
            let model = common.model(checkpoint, *force)?;
            let data = Dataset::with_vocab(&model.cfg, model.vocab.clone())?;
            let split: SplitName = split.parse()?;
            let mut results = Vec::new();
            for v in parse_views(views)? {
                let ev = evaluate(&model, &data, split, v, 0)?;
                println!("{}: {} (scored {}, skipped {})", ev.key(), fmt_bundle(&ev.bundle), ev.scored, ev.skipped);
                results.push(ev);
            }
            if let Some(both) = results.iter().find(|e| e.views == Views::Both) {
                for e in results.iter().filter(|e| e.views != Views::Both) {
                    let gap = relative_gap(both.bundle.bleu4, e.bundle.bleu4);
                    println!("relative BLEU-4 gap both vs {}: {gap:.6}", e.views);
                    log::info!("relative BLEU-4 gap both vs {}: {gap:.6}", e.views);
                }
            }
            if let Some(path) = out {
                write_json(path, &results)?;
            }
        }
        Command::Ablate { variant, out, seeds } => {
            let base = common.load()?;
            let names: Vec<&str> = if variant == "all" { VARIANTS.to_vec() } else { vec![variant.as_str()] };
            let mut records = Vec::new();
            for k in 0..*seeds {
                for name in &names {
                    let mut cfg = base.clone();
                    cfg.seed = base.seed + k;
                    let dir = out.join(name).join(cfg.output_dir_name());
                    let r = ablate(&cfg, name, &Outputs::at(&dir))?;
                    println!(
                        "{name} seed {}: test/both {}; gap frontal {:.4} lateral {:.4}",
                        cfg.seed,
                        fmt_bundle(&r.metrics["test/both"]),
                        r.notes["gap_bleu4_frontal"],
                        r.notes["gap_bleu4_lateral"]
                    );
                    records.push(r);
                }
            }
            let report = GapReport::from_records(&records);
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join("domain_gap.tsv"), report.render())?;
            print!("{}", report.render());
        }
        Command::Score {
            hyp,
            reference,
            out,
            bleu_mode,
        } => {
            let read = |p: &Path| -> Result<Vec<Vec<String>>> {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Ok(text.lines().map(normalize_report).collect())
            };
            let (h, r) = (read(hyp)?, read(reference)?);
            if h.len() != r.len() {
                bail!("{} hypotheses but {} references", h.len(), r.len());
            }
            if r.iter().any(Vec::is_empty) {
                bail!("empty reference line");
            }
            let mode: BleuMode = bleu_mode.parse()?;
            let pairs: Vec<(Vec<String>, Vec<String>)> = h.into_iter().zip(r).collect();
            let bundle = score_corpus(&pairs, mode, &RewardWeights::default());
            println!("{}", fmt_bundle(&bundle));
            if let Some(path) = out {
                write_json(path, &bundle)?;
            }
        }
        Command::Export {
            analysis,
            checkpoint,
            out,
            force,
        } => {
            let kind: AnalysisKind = analysis.parse()?;
            let model = common.model(checkpoint, *force)?;
            let data = Dataset::with_vocab(&model.cfg, model.vocab.clone())?;
            for path in export_analysis(&model, &data, kind, out)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn fmt_bundle(b: &mvreport_core::metrics::MetricBundle) -> String {
    format!(
        "BLEU-1 {:.4} BLEU-2 {:.4} BLEU-3 {:.4} BLEU-4 {:.4} METEOR {:.4} ROUGE-L {:.4} reward {:.4}",
        b.bleu1, b.bleu2, b.bleu3, b.bleu4, b.meteor, b.rouge_l, b.mixed_reward
    )
}

fn print_record(r: &RunRecord) {
    if let Some(e) = r.epochs.last() {
        println!("{} epoch {}: ce {:.5} total {:.5}", e.phase, e.epoch, e.ce, e.total);
    }
    for (k, b) in &r.metrics {
        println!("{k}: {}", fmt_bundle(b));
    }
    if let Some(f) = r.action_frequencies() {
        println!("action frequencies (frontal, lateral, fused): {:.3} {:.3} {:.3}", f[0], f[1], f[2]);
    }
}
