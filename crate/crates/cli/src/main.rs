//! Pipeline CLI: dataset generation, graph export, GNN pretraining, SSL
//! training, evaluation, the deterministic experiment matrix runner, and
//! the embedding-space dissimilarity diagnostic.
//!
//! Every failure prints a machine-parseable `error_kind: <Kind>` line on
//! stderr and exits nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use graphseq::config::{resolve_config, ExperimentConfig, MatrixAxes};
use graphseq::error::{Error, Result};
use graphseq::run;

mod matrix;

#[derive(Parser)]
#[command(name = "graphseq", version, about = "Graph-augmented event-sequence SSL experiments")]
struct Cli {
    /// JSON config file (defaults apply for unset keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. --set integrate.gamma=0.5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory (overrides run.out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base seed (overrides run.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel worker count for the matrix runner (overrides run.jobs).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset: events.csv + labels.csv.
    Generate,
    /// Build the interaction graph: graph.csv, density printed.
    Graph,
    /// Pretrain graph embeddings: embeddings CSVs + checkpoint.
    PretrainGnn,
    /// Train the configured backbone + strategy: embeddings, checkpoint,
    /// loss curve.
    Train,
    /// Evaluate trained embeddings: report.json.
    Eval,
    /// Run the experiment matrix: per-run directories + summary tables.
    Matrix,
    /// Compare adjacency and sequence embedding spaces: diagnostics.json.
    Diagnose,
}

fn parse_set(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{}'", s)))
        })
        .collect()
}

fn load(cli: &Cli) -> Result<(ExperimentConfig, Option<MatrixAxes>)> {
    let sets = parse_set(&cli.set)?;
    let (mut cfg, axes) = resolve_config(cli.config.as_deref(), &sets)?;
    if let Some(out) = &cli.out {
        cfg.run.out_dir = out.to_string_lossy().into_owned();
    }
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        cfg.run.jobs = jobs;
    }
    cfg.validate()?;
    Ok((cfg, axes))
}

/// Dataset for staged subcommands: reuse files already in the out dir,
/// otherwise provision from the config.
fn staged_dataset(
    cfg: &ExperimentConfig,
    dir: &Path,
) -> Result<(graphseq::data::Dataset, graphseq::data::Labels)> {
    let events = dir.join(run::EVENTS_FILE);
    if events.exists() {
        Ok((
            graphseq::data::read_events_csv(&events)?,
            graphseq::data::read_labels_csv(&dir.join(run::LABELS_FILE))?,
        ))
    } else {
        run::materialize_dataset(cfg, dir)?;
        Ok((
            graphseq::data::read_events_csv(&events)?,
            graphseq::data::read_labels_csv(&dir.join(run::LABELS_FILE))?,
        ))
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let (cfg, axes) = load(cli)?;
    let out_dir = PathBuf::from(&cfg.run.out_dir);
    match cli.command {
        Command::Generate => {
            let (dataset, labels) = run::materialize_dataset(&cfg, &out_dir)?;
            println!(
                "generated {} events for {} clients over {} items ({} labels)",
                dataset.n_events(),
                dataset.n_clients,
                dataset.n_items,
                labels.by_client.len()
            );
            println!("wrote {}", out_dir.join(run::EVENTS_FILE).display());
            println!("wrote {}", out_dir.join(run::LABELS_FILE).display());
        }
        Command::Graph => {
            let (dataset, _) = staged_dataset(&cfg, &out_dir)?;
            let bundle = run::build_graph_bundle(&dataset);
            let density = bundle.graph.density()?;
            bundle.graph.write_csv(&out_dir.join(run::GRAPH_FILE))?;
            println!(
                "graph: {} clients, {} items, {} edges",
                bundle.graph.n_clients,
                bundle.graph.n_items,
                bundle.graph.n_edges()
            );
            println!("density: {:.6}", density);
            println!("wrote {}", out_dir.join(run::GRAPH_FILE).display());
        }
        Command::PretrainGnn => {
            let (dataset, _) = staged_dataset(&cfg, &out_dir)?;
            let bundle = run::build_graph_bundle(&dataset);
            let art = graphseq::gnn::pretrain_gnn(&bundle.graph, &bundle.weighted.client_rows, &cfg.gnn)?;
            run::write_gnn_artifacts(&art, &out_dir)?;
            println!(
                "pretrained {} epochs, final loss {:.6}",
                cfg.gnn.epochs,
                art.stats.loss_curve.last().copied().unwrap_or(f64::NAN)
            );
            println!("wrote {}", out_dir.join(run::GNN_ITEM_EMB_FILE).display());
        }
        Command::Train => {
            let (dataset, _) = staged_dataset(&cfg, &out_dir)?;
            let bundle = run::build_graph_bundle(&dataset);
            bundle.graph.write_csv(&out_dir.join(run::GRAPH_FILE))?;
            let trained = run::train_with_strategy(&cfg, &dataset, &bundle)?;
            run::write_train_artifacts(&trained, &out_dir)?;
            cfg.save(&out_dir.join(run::CONFIG_FILE))?;
            let curve = &trained.ssl.stats.loss_curve;
            println!(
                "trained {} epochs, loss {:.6} -> {:.6}",
                curve.len(),
                curve.first().copied().unwrap_or(f64::NAN),
                curve.last().copied().unwrap_or(f64::NAN)
            );
            println!("wrote {}", out_dir.join(run::CLIENT_EMB_FILE).display());
        }
        Command::Eval => {
            let report = run::evaluate_artifacts(&cfg, &out_dir)?;
            println!(
                "auc: {:.4}  acc: {:.4}  density: {:.4}",
                report.auc.mean, report.acc.mean, report.density
            );
            println!("wrote {}", out_dir.join(run::REPORT_FILE).display());
        }
        Command::Matrix => {
            matrix::run_matrix(&cfg, axes, &out_dir)?;
        }
        Command::Diagnose => {
            diagnose(&cfg, &out_dir)?;
        }
    }
    Ok(())
}

/// Jaccard dissimilarity between adjacency-feature and sequence-embedding
/// neighborhoods, per k, written as JSON.
fn diagnose(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let dataset = graphseq::data::read_events_csv(&dir.join(run::EVENTS_FILE))?;
    let (ids, emb) = graphseq::eval::read_embeddings_csv(&dir.join(run::CLIENT_EMB_FILE))?;
    let bundle = run::build_graph_bundle(&dataset);
    let rows = |feats: &graphseq::graph::AdjacencyFeatures| -> Result<graphseq::Tensor> {
        graphseq::Tensor::from_rows(
            &ids.iter().map(|&c| feats.client_rows.row(c).to_vec()).collect::<Vec<_>>(),
        )
    };
    let k_list: Vec<usize> = cfg.eval.k_list.iter().copied().filter(|&k| k < ids.len()).collect();
    if k_list.is_empty() {
        return Err(Error::Domain("every configured k exceeds the client count".into()));
    }
    let weighted = graphseq::eval::dissimilarity_report(&rows(&bundle.weighted)?, &emb, &k_list)?;
    let binary = graphseq::eval::dissimilarity_report(&rows(&bundle.binary)?, &emb, &k_list)?;
    let doc = serde_json::json!({
        "clients": ids.len(),
        "weighted_vs_sequence": weighted,
        "binary_vs_sequence": binary,
    });
    let path = dir.join("diagnostics.json");
    graphseq::write_atomic(&path, serde_json::to_string_pretty(&doc).unwrap().as_bytes())?;
    for e in &weighted {
        println!("k={}: mean dissimilarity {:.4} (weighted adjacency)", e.k, e.mean);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error_kind: {}", e.kind());
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
