//! End-to-end experiment pipeline: dataset provisioning, graph features,
//! strategy wiring, training, artifact persistence, and evaluation.
//!
//! Every stage works through files in the run directory, so the staged CLI
//! subcommands and the all-in-one runner share one code path: a pipeline run
//! writes its artifacts and then evaluates by reading them back.

use std::path::Path;

use crate::config::ExperimentConfig;
use crate::data::{
    generate_synthetic, read_events_csv, read_labels_csv, write_events_csv, write_labels_csv,
    Dataset, Labels,
};
use crate::error::{Error, Result};
use crate::eval::{
    accuracy, auc_roc, concat_adjacency_features, dissimilarity_report, macro_auc,
    read_embeddings_csv, train_probe, train_test_split, write_embeddings_csv, DissimilarityEntry,
    MetricReport, MetricSummary, ProbeConfig,
};
use crate::gnn::{pretrain_gnn, GnnArtifacts};
use crate::graph::{adjacency_features, AdjacencyFeatures, AdjacencyMode, BipartiteGraph};
use crate::integrate::{
    build_bins, AuxLossHooks, BinIndex, GrEmbJointHooks, GrEmbSeqHooks, RegHooks, Strategy,
};
use crate::optim::ParamSet;
use crate::seqssl::{train_ssl, Backbone, NoHooks, SslArtifacts};
use crate::tensor::Tensor;

pub const EVENTS_FILE: &str = "events.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const GRAPH_FILE: &str = "graph.csv";
pub const CLIENT_EMB_FILE: &str = "client_embeddings.csv";
pub const GNN_CLIENT_EMB_FILE: &str = "embeddings_clients.csv";
pub const GNN_ITEM_EMB_FILE: &str = "embeddings_items.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const GNN_CHECKPOINT_FILE: &str = "gnn_checkpoint.json";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const BINS_FILE: &str = "bins.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.json";

/// Graph plus both adjacency feature views.
pub struct GraphBundle {
    pub graph: BipartiteGraph,
    pub weighted: AdjacencyFeatures,
    pub binary: AdjacencyFeatures,
}

pub fn build_graph_bundle(dataset: &Dataset) -> GraphBundle {
    let graph = BipartiteGraph::build(dataset);
    let weighted = adjacency_features(&graph, AdjacencyMode::Weighted);
    let binary = adjacency_features(&graph, AdjacencyMode::Binary);
    GraphBundle { graph, weighted, binary }
}

/// Provision the dataset named by the config: external CSVs when paths are
/// set, the seeded synthetic generator otherwise.
pub fn load_or_generate(cfg: &ExperimentConfig) -> Result<(Dataset, Labels)> {
    match (&cfg.data.events_path, &cfg.data.labels_path) {
        (Some(events), Some(labels)) => Ok((
            read_events_csv(Path::new(events))?,
            read_labels_csv(Path::new(labels))?,
        )),
        (Some(_), None) | (None, Some(_)) => Err(Error::Config(
            "data.events_path and data.labels_path must be set together".into(),
        )),
        (None, None) => {
            let out = generate_synthetic(&cfg.data.synthetic)?;
            Ok((out.dataset, out.labels))
        }
    }
}

/// Write events/labels into the run directory and read them back, so every
/// pipeline consumes exactly what its artifacts record.
pub fn materialize_dataset(cfg: &ExperimentConfig, dir: &Path) -> Result<(Dataset, Labels)> {
    let (dataset, labels) = load_or_generate(cfg)?;
    write_events_csv(&dataset, &dir.join(EVENTS_FILE))?;
    write_labels_csv(&labels, &dir.join(LABELS_FILE))?;
    Ok((
        read_events_csv(&dir.join(EVENTS_FILE))?,
        read_labels_csv(&dir.join(LABELS_FILE))?,
    ))
}

pub struct TrainOutput {
    pub ssl: SslArtifacts,
    pub gnn: Option<GnnArtifacts>,
    pub bins: Option<BinIndex>,
    /// Anchors the aux strategy skipped for lacking two in-batch bins.
    pub aux_skipped_anchors: usize,
    /// Extra positives the reg strategy skipped for isolated clients.
    pub reg_skipped_isolated: usize,
}

/// Train the configured backbone with the configured strategy attached.
pub fn train_with_strategy(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    bundle: &GraphBundle,
) -> Result<TrainOutput> {
    match cfg.integrate.strategy {
        Strategy::None => {
            let ssl = train_ssl(dataset, &cfg.ssl, &mut NoHooks)?;
            Ok(TrainOutput {
                ssl,
                gnn: None,
                bins: None,
                aux_skipped_anchors: 0,
                reg_skipped_isolated: 0,
            })
        }
        Strategy::GrembSeq => {
            let gnn = pretrain_gnn(&bundle.graph, &bundle.weighted.client_rows, &cfg.gnn)?;
            let mut hooks = GrEmbSeqHooks {
                pretrained_items: gnn.item_embeddings.clone(),
                freeze: cfg.integrate.freeze_items,
                project: cfg.integrate.project,
                seed: cfg.ssl.seed,
            };
            let ssl = train_ssl(dataset, &cfg.ssl, &mut hooks)?;
            Ok(TrainOutput {
                ssl,
                gnn: Some(gnn),
                bins: None,
                aux_skipped_anchors: 0,
                reg_skipped_isolated: 0,
            })
        }
        Strategy::GrembJoint => {
            let mut hooks = GrEmbJointHooks::new(
                &bundle.graph,
                &bundle.weighted.client_rows,
                &cfg.integrate,
                &cfg.gnn,
                cfg.ssl.seed,
            );
            let ssl = train_ssl(dataset, &cfg.ssl, &mut hooks)?;
            Ok(TrainOutput {
                ssl,
                gnn: None,
                bins: None,
                aux_skipped_anchors: 0,
                reg_skipped_isolated: 0,
            })
        }
        Strategy::Reg => {
            if cfg.ssl.backbone != Backbone::Coles {
                return Err(Error::Config(
                    "the reg strategy extends the contrastive positive set and needs ssl.backbone = coles".into(),
                ));
            }
            let gnn = pretrain_gnn(&bundle.graph, &bundle.weighted.client_rows, &cfg.gnn)?;
            let mut hooks = RegHooks::new(
                gnn.client_embeddings.clone(),
                &bundle.graph,
                cfg.ssl.d_hidden,
                cfg.ssl.seed,
            );
            let ssl = train_ssl(dataset, &cfg.ssl, &mut hooks)?;
            Ok(TrainOutput {
                ssl,
                gnn: Some(gnn),
                bins: None,
                aux_skipped_anchors: 0,
                reg_skipped_isolated: hooks.skipped_isolated,
            })
        }
        Strategy::AuxLoss => {
            let sim = crate::graph::cosine_similarity_index(&bundle.weighted.client_rows)?;
            let bins = build_bins(&sim, cfg.integrate.m_bins)?;
            let mut hooks = AuxLossHooks::new(&bins, &cfg.integrate, cfg.ssl.seed);
            let ssl = train_ssl(dataset, &cfg.ssl, &mut hooks)?;
            let aux_skipped_anchors = hooks.skipped_anchors;
            Ok(TrainOutput {
                ssl,
                gnn: None,
                bins: Some(bins),
                aux_skipped_anchors,
                reg_skipped_isolated: 0,
            })
        }
    }
}

fn write_loss_curve(curve: &[f64], path: &Path) -> Result<()> {
    use std::io::Write;
    let mut out = Vec::new();
    writeln!(out, "epoch,mean_loss")?;
    for (i, loss) in curve.iter().enumerate() {
        writeln!(out, "{},{}", i, loss)?;
    }
    crate::write_atomic(path, &out)
}

/// Persist all training artifacts into the run directory.
pub fn write_train_artifacts(out: &TrainOutput, dir: &Path) -> Result<()> {
    write_embeddings_csv(
        &out.ssl.client_ids,
        &out.ssl.client_embeddings,
        &dir.join(CLIENT_EMB_FILE),
    )?;
    out.ssl.params.save(&dir.join(CHECKPOINT_FILE))?;
    write_loss_curve(&out.ssl.stats.loss_curve, &dir.join(LOSS_CURVE_FILE))?;
    if let Some(gnn) = &out.gnn {
        write_gnn_artifacts(gnn, dir)?;
    }
    if let Some(bins) = &out.bins {
        bins.write_csv(&dir.join(BINS_FILE))?;
    }
    Ok(())
}

pub fn write_gnn_artifacts(gnn: &GnnArtifacts, dir: &Path) -> Result<()> {
    let client_ids: Vec<usize> = (0..gnn.client_embeddings.rows()).collect();
    let item_ids: Vec<usize> = (0..gnn.item_embeddings.rows()).collect();
    write_embeddings_csv(&client_ids, &gnn.client_embeddings, &dir.join(GNN_CLIENT_EMB_FILE))?;
    write_embeddings_csv(&item_ids, &gnn.item_embeddings, &dir.join(GNN_ITEM_EMB_FILE))?;
    gnn.params.save(&dir.join(GNN_CHECKPOINT_FILE))
}

fn strategy_name(s: Strategy) -> &'static str {
    match s {
        Strategy::None => "none",
        Strategy::GrembSeq => "gremb_seq",
        Strategy::GrembJoint => "gremb_joint",
        Strategy::Reg => "reg",
        Strategy::AuxLoss => "aux_loss",
    }
}

fn backbone_name(b: Backbone) -> &'static str {
    match b {
        Backbone::Coles => "coles",
        Backbone::Bt => "bt",
    }
}

/// Evaluate the artifacts already present in a run directory and write
/// `report.json` there.
pub fn evaluate_artifacts(cfg: &ExperimentConfig, dir: &Path) -> Result<MetricReport> {
    let dataset = read_events_csv(&dir.join(EVENTS_FILE))?;
    let labels = read_labels_csv(&dir.join(LABELS_FILE))?;
    let (ids, embeddings) = read_embeddings_csv(&dir.join(CLIENT_EMB_FILE))?;
    let bundle = build_graph_bundle(&dataset);
    let report = evaluate(cfg, &bundle, &ids, &embeddings, &labels)?;
    report.save(&dir.join(REPORT_FILE))?;
    Ok(report)
}

/// Probe frozen embeddings and assemble the metric report.
pub fn evaluate(
    cfg: &ExperimentConfig,
    bundle: &GraphBundle,
    ids: &[usize],
    embeddings: &Tensor,
    labels: &Labels,
) -> Result<MetricReport> {
    // keep clients that carry both an embedding and a label
    let labeled: Vec<usize> = (0..ids.len())
        .filter(|&r| labels.by_client.contains_key(&ids[r]))
        .collect();
    if labeled.len() < 4 {
        return Err(Error::Data(format!(
            "only {} labeled embedded clients",
            labeled.len()
        )));
    }
    let adj_rows = |feats: &AdjacencyFeatures| -> Result<Tensor> {
        Tensor::from_rows(
            &labeled
                .iter()
                .map(|&r| feats.client_rows.row(ids[r]).to_vec())
                .collect::<Vec<_>>(),
        )
    };
    let emb = Tensor::from_rows(
        &labeled.iter().map(|&r| embeddings.row(r).to_vec()).collect::<Vec<_>>(),
    )?;
    let label_vec: Vec<usize> = labeled.iter().map(|&r| labels.by_client[&ids[r]]).collect();

    let features = if cfg.eval.concat_adjacency {
        let lab_ids: Vec<usize> = labeled.iter().map(|&r| ids[r]).collect();
        concat_adjacency_features(&lab_ids, &emb, &lab_ids, &adj_rows(&bundle.weighted)?, &adj_rows(&bundle.binary)?)?
    } else {
        emb.clone()
    };

    let n = labeled.len();
    let (train_idx, test_idx) = train_test_split(n, cfg.eval.test_fraction, cfg.run.seed);
    let probe_cfg = ProbeConfig {
        epochs: cfg.eval.probe_epochs,
        lr: cfg.eval.probe_lr,
        seed: cfg.run.seed,
        ..ProbeConfig::default()
    };
    let model = train_probe(&features, &label_vec, &train_idx, &probe_cfg)?;
    let proba = model.predict_proba(&features)?;
    let preds = model.predict(&features)?;

    let test_preds: Vec<usize> = test_idx.iter().map(|&i| preds[i]).collect();
    let test_labels: Vec<usize> = test_idx.iter().map(|&i| label_vec[i]).collect();
    let acc = accuracy(&test_preds, &test_labels)?;

    let n_classes = model.n_classes;
    let auc = if n_classes == 2 {
        let scores: Vec<f64> = test_idx.iter().map(|&i| proba.at(i, 1)).collect();
        let binary: Vec<bool> = test_labels.iter().map(|&l| l == 1).collect();
        auc_roc(&scores, &binary)?
    } else {
        let test_proba = Tensor::from_rows(
            &test_idx.iter().map(|&i| proba.row(i).to_vec()).collect::<Vec<_>>(),
        )?;
        macro_auc(&test_proba, &test_labels)?
    };

    // complementarity diagnostic: adjacency space vs sequence space
    let weighted_rows = adj_rows(&bundle.weighted)?;
    let k_list: Vec<usize> = cfg.eval.k_list.iter().copied().filter(|&k| k < n).collect();
    let dissimilarity: Vec<DissimilarityEntry> = if k_list.is_empty() {
        Vec::new()
    } else {
        dissimilarity_report(&weighted_rows, &emb, &k_list)?
    };

    Ok(MetricReport {
        config_hash: cfg.hash(),
        backbone: backbone_name(cfg.ssl.backbone).to_string(),
        strategy: strategy_name(cfg.integrate.strategy).to_string(),
        seeds: vec![cfg.run.seed],
        auc: MetricSummary::from_values(&[auc]),
        acc: MetricSummary::from_values(&[acc]),
        density: bundle.graph.density()?,
        dissimilarity,
    })
}

/// One full pipeline execution at `base_cfg` shifted by `seed_offset`,
/// writing every artifact plus `report.json` into `run_dir`.
pub fn run_experiment(
    base_cfg: &ExperimentConfig,
    seed_offset: u64,
    run_dir: &Path,
) -> Result<MetricReport> {
    let cfg = base_cfg.with_seed_offset(seed_offset);
    cfg.validate()?;
    std::fs::create_dir_all(run_dir)?;
    cfg.save(&run_dir.join(CONFIG_FILE))?;
    let (dataset, _labels) = materialize_dataset(&cfg, run_dir)?;
    let bundle = build_graph_bundle(&dataset);
    bundle.graph.write_csv(&run_dir.join(GRAPH_FILE))?;
    let out = train_with_strategy(&cfg, &dataset, &bundle)?;
    write_train_artifacts(&out, run_dir)?;
    evaluate_artifacts(&cfg, run_dir)
}

/// Merge per-seed reports (sorted by seed) into one summary report.
pub fn aggregate_reports(config_hash: &str, reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::Data("no reports to aggregate".into()));
    }
    let mut sorted: Vec<&MetricReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.seeds.first().copied().unwrap_or(0));
    let seeds: Vec<u64> = sorted.iter().flat_map(|r| r.seeds.iter().copied()).collect();
    let aucs: Vec<f64> = sorted.iter().flat_map(|r| r.auc.per_seed.iter().copied()).collect();
    let accs: Vec<f64> = sorted.iter().flat_map(|r| r.acc.per_seed.iter().copied()).collect();
    let density = sorted.iter().map(|r| r.density).sum::<f64>() / sorted.len() as f64;
    // average the per-k curves entrywise over seeds that report them
    let mut dissimilarity: Vec<DissimilarityEntry> = Vec::new();
    if let Some(first) = sorted.first() {
        for (i, entry) in first.dissimilarity.iter().enumerate() {
            let values: Vec<&DissimilarityEntry> = sorted
                .iter()
                .filter_map(|r| r.dissimilarity.get(i))
                .filter(|e| e.k == entry.k)
                .collect();
            let n = values.len() as f64;
            dissimilarity.push(DissimilarityEntry {
                k: entry.k,
                mean: values.iter().map(|e| e.mean).sum::<f64>() / n,
                median: values.iter().map(|e| e.median).sum::<f64>() / n,
            });
        }
    }
    Ok(MetricReport {
        config_hash: config_hash.to_string(),
        backbone: sorted[0].backbone.clone(),
        strategy: sorted[0].strategy.clone(),
        seeds,
        auc: MetricSummary::from_values(&aucs),
        acc: MetricSummary::from_values(&accs),
        density,
        dissimilarity,
    })
}

/// Load a pretrained item table from a run directory (for staged CLI use).
pub fn load_pretrained_items(dir: &Path) -> Result<Tensor> {
    let (_, items) = read_embeddings_csv(&dir.join(GNN_ITEM_EMB_FILE))?;
    Ok(items)
}

/// Load the checkpointed SSL parameters from a run directory.
pub fn load_checkpoint(dir: &Path) -> Result<ParamSet> {
    ParamSet::load(&dir.join(CHECKPOINT_FILE))
}
