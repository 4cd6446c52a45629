//! Command-line pipeline. Every subcommand reads and writes plain files, so
//! a full experiment is a chain of invocations sharing one `--seed`; progress
//! goes to stderr and machine-readable artifacts only into `--out`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::data::{self, DatasetBundle, SyntheticSpec};
use crate::error::Result;
use crate::eval::{self, Scorer, REPORT_KS};
use crate::graph::{build_graph, FundGraph, RELATION_KINDS};
use crate::train::{fit, Checkpoint, TrainConfig};

#[derive(Parser)]
#[command(
    name = "fundmatch",
    about = "Graph-enhanced, disentangled fund recommendation on synthetic market data",
    disable_version_flag = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory
    GenData {
        /// Generation parameters as JSON (defaults baked in when omitted)
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Directory receiving the dataset files
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the spec file
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Index the fund graph and write a structural summary
    BuildGraph {
        /// Dataset directory from gen-data
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and keep the epoch with the best validation Recall@10
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Training configuration as JSON (defaults when omitted)
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rank the test partition with a checkpoint and report metrics
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Metric cutoffs
        #[arg(long, value_delimiter = ',', default_values_t = REPORT_KS)]
        k: Vec<usize>,
        /// Label stamped into the report (defaults to the trained variant)
        #[arg(long)]
        variant: Option<String>,
    },
    /// Train and evaluate the full model plus its three ablations
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Base configuration shared by all four variants
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_delimiter = ',', default_values_t = REPORT_KS)]
        k: Vec<usize>,
    },
    /// Linear probes measuring what the frozen aspect embeddings encode
    Probe {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Probe train/test split seed (defaults to the checkpoint seed)
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Dump per-user aspect embeddings as TSV for external visualization
    ExportEmb {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse argv and run; the returned code follows the documented contract
/// (0 ok, 1 usage, 2 data/io, 3 numeric).
pub fn run_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version print to stdout and exit cleanly
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { spec, out, seed } => gen_data(spec.as_deref(), &out, seed),
        Command::BuildGraph { data, out } => graph_summary(&data, &out),
        Command::Train { data, config, out, seed } => train(&data, config.as_deref(), &out, seed),
        Command::Eval { data, checkpoint, out, k, variant } => {
            evaluate(&data, &checkpoint, &out, &k, variant.as_deref())
        }
        Command::Ablate { data, config, out, seed, k } => {
            ablate(&data, config.as_deref(), &out, seed, &k)
        }
        Command::Probe { data, checkpoint, out, seed } => probe(&data, &checkpoint, &out, seed),
        Command::ExportEmb { data, checkpoint, out } => export_emb(&data, &checkpoint, &out),
    }
}

// ── shared plumbing ─────────────────────────────────────────────────────────

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(&path, text)?;
    Ok(path)
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match path {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Rebuild the frozen scorer a checkpoint describes against a dataset.
fn load_scorer(data: &Path, checkpoint: &Path) -> Result<(DatasetBundle, Checkpoint, Scorer)> {
    let bundle = DatasetBundle::read_dir(data)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let graph = build_graph(bundle.entity_counts(), &bundle.triples)?;
    let scorer = Scorer::build(
        &ckpt.model,
        &ckpt.popularity,
        &graph,
        &bundle,
        ckpt.config.n_max,
        !ckpt.config.disable_graph,
        !ckpt.config.disable_conformity,
    )?;
    Ok((bundle, ckpt, scorer))
}

fn report_lines(report: &eval::MetricReport) {
    for (name, value) in &report.metrics {
        eprintln!("  {:<12} {:.6}", name, value);
    }
    eprintln!(
        "  ({} users evaluated, {} skipped)",
        report.users_evaluated, report.users_skipped
    );
}

// ── subcommands ─────────────────────────────────────────────────────────────

fn gen_data(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec: SyntheticSpec = match spec {
        Some(p) => read_json(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let bundle = data::generate(&spec)?;
    bundle.write_dir(out)?;
    eprintln!(
        "wrote {} users, {} funds, {}/{}/{} train/validation/test interactions to {}",
        bundle.n_users(),
        bundle.n_funds(),
        bundle.train.len(),
        bundle.validation.len(),
        bundle.test.len(),
        out.display()
    );
    Ok(())
}

fn graph_summary(data: &Path, out: &Path) -> Result<()> {
    let bundle = DatasetBundle::read_dir(data)?;
    let graph: FundGraph = build_graph(bundle.entity_counts(), &bundle.triples)?;
    let mut relation_edges = BTreeMap::new();
    for rel in RELATION_KINDS {
        let n = graph.edges().iter().filter(|(_, r, _)| *r == rel).count();
        relation_edges.insert(rel.token().to_string(), n);
    }
    #[derive(serde::Serialize)]
    struct GraphSummary {
        entities: usize,
        funds: usize,
        edges: usize,
        relation_edges: BTreeMap<String, usize>,
    }
    let summary = GraphSummary {
        entities: graph.entity_total(),
        funds: bundle.n_funds(),
        edges: graph.edge_count(),
        relation_edges,
    };
    let path = write_json(out, "graph.json", &summary)?;
    eprintln!(
        "indexed {} edges over {} entities; summary at {}",
        summary.edges,
        summary.entities,
        path.display()
    );
    Ok(())
}

fn train(data: &Path, config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let bundle = DatasetBundle::read_dir(data)?;
    eprintln!(
        "training variant '{}' for {} epochs on {} users",
        cfg.variant_name(),
        cfg.epochs,
        bundle.n_users()
    );
    let result = fit(&bundle, &cfg, |log| {
        eprintln!(
            "epoch {:>3}  total {:.4}  interest {:.4}  conformity {:.4}  risk {:.4}  val recall@10 {:.4}",
            log.epoch,
            log.losses.total,
            log.losses.interest,
            log.losses.conformity,
            log.losses.risk,
            log.val_recall10
        );
    })?;
    fs::create_dir_all(out)?;
    let ckpt_path = out.join("checkpoint.json");
    result.checkpoint.save(&ckpt_path)?;
    write_json(out, "history.json", &result.history)?;
    eprintln!(
        "kept epoch {} (validation recall@10 {:.4}) at {}",
        result.checkpoint.epoch,
        result.checkpoint.metrics.metric("recall@10").unwrap_or(0.0),
        ckpt_path.display()
    );
    Ok(())
}

fn evaluate(
    data: &Path,
    checkpoint: &Path,
    out: &Path,
    ks: &[usize],
    variant: Option<&str>,
) -> Result<()> {
    let (bundle, ckpt, scorer) = load_scorer(data, checkpoint)?;
    let variant = variant.map(str::to_string).unwrap_or_else(|| ckpt.config.variant_name());
    let report = eval::evaluate(&scorer, &bundle, &bundle.test, ks, &variant)?;
    let path = write_json(out, "report.json", &report)?;
    eprintln!("test metrics for '{}' ({}):", report.variant, path.display());
    report_lines(&report);
    Ok(())
}

fn ablate(
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    ks: &[usize],
) -> Result<()> {
    let base = load_config(config, seed)?;
    let bundle = DatasetBundle::read_dir(data)?;
    let variants: [TrainConfig; 4] = [
        TrainConfig { ..base.clone() },
        TrainConfig { disable_conformity: true, ..base.clone() },
        TrainConfig { disable_risk: true, ..base.clone() },
        TrainConfig { disable_graph: true, ..base.clone() },
    ];
    for cfg in variants {
        let name = cfg.variant_name();
        eprintln!("── variant '{}' ──", name);
        let result = fit(&bundle, &cfg, |log| {
            eprintln!(
                "epoch {:>3}  total {:.4}  val recall@10 {:.4}",
                log.epoch, log.losses.total, log.val_recall10
            );
        })?;
        let graph = build_graph(bundle.entity_counts(), &bundle.triples)?;
        let scorer = Scorer::build(
            &result.checkpoint.model,
            &result.checkpoint.popularity,
            &graph,
            &bundle,
            cfg.n_max,
            !cfg.disable_graph,
            !cfg.disable_conformity,
        )?;
        let report = eval::evaluate(&scorer, &bundle, &bundle.test, ks, &name)?;
        write_json(out, &format!("report_{}.json", name), &report)?;
        eprintln!("test metrics for '{}':", name);
        report_lines(&report);
    }
    eprintln!("four reports written to {}", out.display());
    Ok(())
}

fn probe(data: &Path, checkpoint: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let (bundle, ckpt, scorer) = load_scorer(data, checkpoint)?;
    let report = eval::probe_disentanglement(&scorer, &bundle, seed.unwrap_or(ckpt.config.seed))?;
    let path = write_json(out, "probe.json", &report)?;
    eprintln!(
        "probed {} users ({} classes): risk {:.4}, interest {:.4}, shuffled {:.4} ({})",
        report.users_probed,
        report.classes,
        report.risk_accuracy,
        report.interest_accuracy,
        report.shuffled_accuracy,
        path.display()
    );
    Ok(())
}

fn export_emb(data: &Path, checkpoint: &Path, out: &Path) -> Result<()> {
    let (bundle, _, scorer) = load_scorer(data, checkpoint)?;
    fs::create_dir_all(out)?;
    let path = out.join("embeddings.tsv");
    eval::export_embeddings(&scorer, &bundle, &path)?;
    eprintln!(
        "exported 3 aspect embeddings for each of {} users to {}",
        scorer.user_rows.len(),
        path.display()
    );
    Ok(())
}
