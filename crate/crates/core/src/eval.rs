//! Downstream evaluation on frozen embeddings: multinomial logistic probe,
//! AUC-ROC (rank formulation, ties at half weight) and accuracy, the
//! adjacency-concatenation feature pathway, and the embedding-space
//! dissimilarity diagnostic.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{jaccard_dissimilarity, knn_sets};
use crate::optim::{OptKind, Optimizer, ParamSet};
use crate::rng_stream;
use crate::tape::Tape;
use crate::tensor::Tensor;

// ── Probe ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptKind,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 200, lr: 0.05, optimizer: OptKind::Adam, seed: 0 }
    }
}

/// Linear softmax classifier trained on frozen features.
#[derive(Debug, Clone)]
pub struct ProbeModel {
    pub weights: Tensor,
    pub bias: Tensor,
    pub n_classes: usize,
}

impl ProbeModel {
    /// Class probabilities for each feature row.
    pub fn predict_proba(&self, features: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let x = tape.constant(features.clone());
        let w = tape.constant(self.weights.clone());
        let b = tape.constant(self.bias.clone());
        Ok(x.matmul(w)?.add(b)?.softmax()?.value())
    }

    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        let proba = self.predict_proba(features)?;
        Ok((0..proba.rows())
            .map(|r| {
                let row = proba.row(r);
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect())
    }
}

/// Train the probe by full-batch softmax cross-entropy. Features are bound
/// as constants; gradients never reach them.
pub fn train_probe(
    features: &Tensor,
    labels: &[usize],
    train_idx: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeModel> {
    if features.rows() != labels.len() {
        return Err(Error::Alignment(format!(
            "{} feature rows vs {} labels",
            features.rows(),
            labels.len()
        )));
    }
    if train_idx.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let train_classes: std::collections::BTreeSet<usize> =
        train_idx.iter().map(|&i| labels[i]).collect();
    if train_classes.len() < 2 {
        return Err(Error::Data("training split covers a single class".into()));
    }
    let d = features.cols();

    let mut params = ParamSet::new();
    let mut rng = rng_stream(cfg.seed, "init/probe");
    params.insert("probe/w", Tensor::normal(&mut rng, &[d, n_classes], 0.01));
    params.insert("probe/b", Tensor::zeros(&[n_classes]));

    let x_train = Tensor::from_rows(
        &train_idx.iter().map(|&i| features.row(i).to_vec()).collect::<Vec<_>>(),
    )?;
    // one-hot targets keep the cross-entropy a plain elementwise product
    let mut onehot = Tensor::zeros(&[train_idx.len(), n_classes]);
    for (r, &i) in train_idx.iter().enumerate() {
        onehot.data_mut()[r * n_classes + labels[i]] = 1.0;
    }

    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    for epoch in 0..cfg.epochs {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let x = tape.constant(x_train.clone());
        let y = tape.constant(onehot.clone());
        let logits = x.matmul(bound.var("probe/w")?)?.add(bound.var("probe/b")?)?;
        let loss = logits.log_softmax()?.mul(y)?.sum().scale(-1.0 / train_idx.len() as f64);
        let lv = loss.item()?;
        if !lv.is_finite() {
            return Err(Error::TrainingDiverged { epoch, msg: format!("probe loss {}", lv) });
        }
        tape.backward(loss)?;
        params.absorb_grads(&tape, &bound)?;
        opt.step(&mut params)?;
    }
    Ok(ProbeModel {
        weights: params.get("probe/w")?.clone(),
        bias: params.get("probe/b")?.clone(),
        n_classes,
    })
}

/// Deterministic shuffled split into (train, test) index sets.
pub fn train_test_split(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rng_stream(seed, "eval/split");
    idx.shuffle(&mut rng);
    let n_test = ((n as f64) * test_fraction).round() as usize;
    let n_test = n_test.min(n.saturating_sub(1)).max(1.min(n));
    let test = idx[..n_test].to_vec();
    let train = idx[n_test..].to_vec();
    (train, test)
}

// ── Metrics ─────────────────────────────────────────────────────────

/// Average ranks (1-based) with ties sharing the mean rank.
fn ranks_with_ties(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

/// Probability that a random positive outscores a random negative; ties
/// count half (rank-sum formulation).
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Alignment("scores and labels differ in length".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("both classes must be present".into()));
    }
    let ranks = ranks_with_ties(scores);
    let pos_rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let np = n_pos as f64;
    Ok((pos_rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Macro one-vs-rest AUC over every class present in `labels`.
pub fn macro_auc(proba: &Tensor, labels: &[usize]) -> Result<f64> {
    let classes: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(Error::Data("macro AUC needs at least two classes".into()));
    }
    let mut total = 0.0;
    for &c in &classes {
        let scores: Vec<f64> = (0..proba.rows()).map(|r| proba.at(r, c)).collect();
        let binary: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        total += auc_roc(&scores, &binary)?;
    }
    Ok(total / classes.len() as f64)
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Alignment("predictions and labels differ in length".into()));
    }
    if preds.is_empty() {
        return Err(Error::Data("accuracy of empty input".into()));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Spearman rank correlation with tie-averaged ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Data("spearman needs two equal-length samples".into()));
    }
    let rx = ranks_with_ties(xs);
    let ry = ranks_with_ties(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..xs.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

// ── Feature concatenation ───────────────────────────────────────────

/// Row-wise `[embedding | weighted adjacency | binary adjacency]`. All
/// three matrices must carry identical client-id orderings.
pub fn concat_adjacency_features(
    emb_ids: &[usize],
    embeddings: &Tensor,
    adj_ids: &[usize],
    weighted: &Tensor,
    binary: &Tensor,
) -> Result<Tensor> {
    if emb_ids != adj_ids {
        return Err(Error::Alignment("client id orderings differ".into()));
    }
    if embeddings.rows() != weighted.rows() || weighted.rows() != binary.rows() {
        return Err(Error::Alignment("row counts differ".into()));
    }
    let mut rows = Vec::with_capacity(embeddings.rows());
    for r in 0..embeddings.rows() {
        let mut row = embeddings.row(r).to_vec();
        row.extend_from_slice(weighted.row(r));
        row.extend_from_slice(binary.row(r));
        rows.push(row);
    }
    Tensor::from_rows(&rows)
}

// ── Dissimilarity diagnostic ────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DissimilarityEntry {
    pub k: usize,
    pub mean: f64,
    pub median: f64,
}

/// For each k: mean/median over clients of the Jaccard dissimilarity
/// between the client's k-nearest-neighbor sets in two embedding spaces.
pub fn dissimilarity_report(
    emb_a: &Tensor,
    emb_b: &Tensor,
    k_list: &[usize],
) -> Result<Vec<DissimilarityEntry>> {
    if emb_a.rows() != emb_b.rows() {
        return Err(Error::Alignment("embedding spaces cover different clients".into()));
    }
    let n = emb_a.rows();
    let mut entries = Vec::with_capacity(k_list.len());
    for &k in k_list {
        if k >= n {
            return Err(Error::Domain(format!("k = {} must be < {} clients", k, n)));
        }
        let knn_a = knn_sets(emb_a, k)?;
        let knn_b = knn_sets(emb_b, k)?;
        let mut values: Vec<f64> = (0..n)
            .map(|c| jaccard_dissimilarity(&knn_a[c], &knn_b[c]))
            .collect::<Result<_>>()?;
        let mean = values.iter().sum::<f64>() / n as f64;
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = if n % 2 == 1 {
            values[n / 2]
        } else {
            (values[n / 2 - 1] + values[n / 2]) / 2.0
        };
        entries.push(DissimilarityEntry { k, mean, median });
    }
    Ok(entries)
}

/// Mean per-anchor Spearman correlation between cosine-similarity orderings
/// in embedding space and a reference similarity matrix.
pub fn alignment_spearman(embeddings: &Tensor, reference: &Tensor) -> Result<f64> {
    let n = embeddings.rows();
    if reference.shape() != [n, n] {
        return Err(Error::Alignment("reference similarity matrix shape mismatch".into()));
    }
    let mut total = 0.0;
    for a in 0..n {
        let mut emb_sims = Vec::with_capacity(n - 1);
        let mut ref_sims = Vec::with_capacity(n - 1);
        for b in 0..n {
            if b == a {
                continue;
            }
            emb_sims.push(crate::tensor::cosine(embeddings.row(a), embeddings.row(b)));
            ref_sims.push(reference.at(a, b));
        }
        total += spearman(&emb_sims, &ref_sims)?;
    }
    Ok(total / n as f64)
}

// ── Metric report ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

impl MetricSummary {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n.max(1.0);
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        MetricSummary { mean, std: var.sqrt(), per_seed: values.to_vec() }
    }
}

/// The per-run / per-combination evaluation report (stable field order).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub config_hash: String,
    pub backbone: String,
    pub strategy: String,
    pub seeds: Vec<u64>,
    pub auc: MetricSummary,
    pub acc: MetricSummary,
    pub density: f64,
    /// Per-k mean dissimilarity between adjacency and sequence spaces.
    pub dissimilarity: Vec<DissimilarityEntry>,
}

impl MetricReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::State(format!("report serialization: {}", e)))?;
        crate::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Parse { line: 0, msg: format!("report: {}", e) })
    }
}

// ── Embedding CSV I/O ───────────────────────────────────────────────

/// `id,v0,...,v{d-1}` rows; float formatting is shortest-roundtrip so the
/// file reproduces the tensor exactly.
pub fn write_embeddings_csv(ids: &[usize], embeddings: &Tensor, path: &Path) -> Result<()> {
    if ids.len() != embeddings.rows() {
        return Err(Error::Alignment("ids and embedding rows differ".into()));
    }
    let mut out = Vec::new();
    let d = embeddings.cols();
    let mut header = String::from("id");
    for c in 0..d {
        header.push_str(&format!(",v{}", c));
    }
    writeln!(out, "{}", header)?;
    for (r, id) in ids.iter().enumerate() {
        write!(out, "{}", id)?;
        for v in embeddings.row(r) {
            write!(out, ",{}", v)?;
        }
        writeln!(out)?;
    }
    crate::write_atomic(path, &out)
}

pub fn read_embeddings_csv(path: &Path) -> Result<(Vec<usize>, Tensor)> {
    use std::io::BufRead;
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Schema("missing embeddings header".into()))?;
    if !header.starts_with("id,") {
        return Err(Error::Schema("embeddings header must start with id,".into()));
    }
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.trim_end().split(',');
        let id: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or(Error::Parse { line: line_no, msg: "invalid id".into() })?;
        let row: Vec<f64> = parts
            .map(|s| {
                s.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("invalid value '{}'", s),
                })
            })
            .collect::<Result<_>>()?;
        ids.push(id);
        rows.push(row);
    }
    Ok((ids, Tensor::from_rows(&rows)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_textbook_case() {
        // 3 of 4 positive/negative pairs ordered correctly, one worth 1/2?
        // scores [0.1, 0.4, 0.35, 0.8], labels [0, 0, 1, 1]: pairs
        // (0.35 > 0.1) ok, (0.35 < 0.4) wrong, (0.8 > both) -> 3/4
        let auc = auc_roc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert!((auc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auc_brute_force_pair_oracle() {
        let mut rng = rng_stream(3, "auc");
        use rand::Rng;
        for _ in 0..100 {
            let n = 30;
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.random_range(0..10) as f64) / 10.0) // plenty of ties
                .collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.5).collect();
            if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
                continue;
            }
            let auc = auc_roc(&scores, &labels).unwrap();
            // oracle: all positive/negative pairs, ties at half weight
            let mut wins = 0.0;
            let mut total = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if labels[i] && !labels[j] {
                        total += 1.0;
                        if scores[i] > scores[j] {
                            wins += 1.0;
                        } else if scores[i] == scores[j] {
                            wins += 0.5;
                        }
                    }
                }
            }
            assert!((auc - wins / total).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_degenerate_cases() {
        assert_eq!(auc_roc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(auc_roc(&[0.5, 0.5, 0.5], &[true, false, true]).unwrap(), 0.5);
        assert!(auc_roc(&[0.5, 0.6], &[true, true]).is_err());
    }

    #[test]
    fn auc_monotone_transform_invariance_and_negation() {
        let scores = [0.11, 0.92, 0.33, 0.47, 0.66, 0.05];
        let labels = [false, true, false, true, true, false];
        let base = auc_roc(&scores, &labels).unwrap();
        let transformed: Vec<f64> = scores.iter().map(|&s| (5.0 * s).exp()).collect();
        assert_eq!(auc_roc(&transformed, &labels).unwrap(), base);
        let negated: Vec<f64> = scores.iter().map(|&s| -s).collect();
        assert!((auc_roc(&negated, &labels).unwrap() - (1.0 - base)).abs() < 1e-12);
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert!(accuracy(&[], &[]).is_err());
        let mut rng = rng_stream(4, "acc");
        use rand::Rng;
        let preds: Vec<usize> = (0..100).map(|_| rng.random_range(0..3)).collect();
        let labels: Vec<usize> = (0..100).map(|_| rng.random_range(0..3)).collect();
        let expect =
            preds.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / 100.0;
        assert_eq!(accuracy(&preds, &labels).unwrap(), expect);
    }

    #[test]
    fn spearman_perfect_and_reversed() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&xs, &[10.0, 20.0, 30.0, 40.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&xs, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn probe_fits_linearly_separable_data() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let side = i % 2;
            let x = if side == 0 { -1.0 } else { 1.0 };
            rows.push(vec![x + 0.01 * i as f64, 0.5]);
            labels.push(side);
        }
        let features = Tensor::from_rows(&rows).unwrap();
        let train: Vec<usize> = (0..20).collect();
        let model = train_probe(&features, &labels, &train, &ProbeConfig::default()).unwrap();
        let preds = model.predict(&features).unwrap();
        assert_eq!(accuracy(&preds, &labels).unwrap(), 1.0);
    }

    #[test]
    fn probe_on_shuffled_labels_is_chance_level() {
        use rand::seq::SliceRandom;
        let mut rng = rng_stream(100, "null");
        let features = Tensor::normal(&mut rng, &[500, 6], 1.0);
        for seed in 0..5 {
            let mut labels: Vec<usize> = (0..500).map(|i| i % 2).collect();
            let mut shuffle_rng = rng_stream(seed, "null/shuffle");
            labels.shuffle(&mut shuffle_rng);
            let (train, test) = train_test_split(500, 0.4, seed);
            let cfg = ProbeConfig { epochs: 100, seed, ..Default::default() };
            let model = train_probe(&features, &labels, &train, &cfg).unwrap();
            let proba = model.predict_proba(&features).unwrap();
            let scores: Vec<f64> = test.iter().map(|&i| proba.at(i, 1)).collect();
            let binary: Vec<bool> = test.iter().map(|&i| labels[i] == 1).collect();
            let auc = auc_roc(&scores, &binary).unwrap();
            assert!(
                (0.4..=0.6).contains(&auc),
                "null AUC {} out of [0.4, 0.6] at seed {}",
                auc,
                seed
            );
        }
    }

    #[test]
    fn probe_duplicated_columns_converge_to_same_predictions() {
        // Weight-splitting symmetry: the loss depends on the duplicated
        // weights only through their sum, and full-batch descent keeps the
        // split direction fixed, so the converged predictions coincide.
        let mut rng = rng_stream(9, "dup");
        let x = Tensor::normal(&mut rng, &[120, 3], 1.0);
        use rand::Rng;
        let labels: Vec<usize> = (0..120)
            .map(|i| {
                let clean = usize::from(x.at(i, 0) > 0.0);
                // noise keeps the problem non-separable
                if rng.random::<f64>() < 0.2 {
                    1 - clean
                } else {
                    clean
                }
            })
            .collect();
        let train: Vec<usize> = (0..120).collect();

        let cfg = ProbeConfig { epochs: 4000, lr: 0.5, optimizer: OptKind::Sgd, seed: 0 };
        let base = train_probe(&x, &labels, &train, &cfg).unwrap();

        let doubled = Tensor::from_rows(
            &(0..120)
                .map(|r| {
                    let mut row = x.row(r).to_vec();
                    row.extend_from_slice(x.row(r));
                    row
                })
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let dup = train_probe(&doubled, &labels, &train, &cfg).unwrap();

        let pa = base.predict_proba(&x).unwrap();
        let pb = dup.predict_proba(&doubled).unwrap();
        let diff = pa.max_abs_diff(&pb).unwrap();
        assert!(diff < 1e-6, "converged predictions differ by {}", diff);
    }

    #[test]
    fn probe_never_mutates_features() {
        let mut rng = rng_stream(11, "frozen");
        let features = Tensor::normal(&mut rng, &[30, 4], 1.0);
        let checksum: f64 = features.data().iter().sum();
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let train: Vec<usize> = (0..30).collect();
        let _ = train_probe(&features, &labels, &train, &ProbeConfig::default()).unwrap();
        assert_eq!(features.data().iter().sum::<f64>(), checksum);
    }

    #[test]
    fn probe_single_class_train_is_data_error() {
        let features = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let labels = vec![1, 1, 1];
        let train = vec![0, 1, 2];
        assert!(matches!(
            train_probe(&features, &labels, &train, &ProbeConfig::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn concat_adjacency_dimension_arithmetic() {
        let ids = [0usize, 1];
        let emb = Tensor::from_rows(&[vec![1.0; 4], vec![2.0; 4]]).unwrap();
        let w = Tensor::from_rows(&[vec![0.5; 5], vec![0.0; 5]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0; 5], vec![0.0; 5]]).unwrap();
        let out = concat_adjacency_features(&ids, &emb, &ids, &w, &b).unwrap();
        assert_eq!(out.shape(), &[2, 14]);
        // isolated client: embedding passes through in the first d columns
        assert_eq!(&out.row(1)[..4], &[2.0; 4]);
        assert_eq!(&out.row(1)[4..], &[0.0; 10]);
        // spot-check manual assembly
        let mut manual = vec![1.0; 4];
        manual.extend(vec![0.5; 5]);
        manual.extend(vec![1.0; 5]);
        assert_eq!(out.row(0), &manual[..]);
    }

    #[test]
    fn concat_adjacency_id_mismatch_errors() {
        let emb = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let w = Tensor::from_rows(&[vec![1.0]]).unwrap();
        assert!(matches!(
            concat_adjacency_features(&[0], &emb, &[1], &w, &w),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn dissimilarity_identical_and_isometric_spaces() {
        let mut rng = rng_stream(21, "dis");
        let emb = Tensor::normal(&mut rng, &[25, 3], 1.0);
        let report = dissimilarity_report(&emb, &emb, &[1, 5, 10]).unwrap();
        for e in &report {
            assert_eq!(e.mean, 0.0);
            assert_eq!(e.median, 0.0);
        }
        // reflection is an isometry: kNN sets unchanged
        let mut reflected = emb.clone();
        for v in reflected.data_mut() {
            *v = -*v;
        }
        let report = dissimilarity_report(&emb, &reflected, &[5]).unwrap();
        assert_eq!(report[0].mean, 0.0);
    }

    #[test]
    fn dissimilarity_matches_double_brute_force() {
        let mut rng = rng_stream(22, "dis2");
        let a = Tensor::normal(&mut rng, &[40, 3], 1.0);
        let b = Tensor::normal(&mut rng, &[40, 3], 1.0);
        let report = dissimilarity_report(&a, &b, &[5]).unwrap();
        // oracle: brute-force kNN in both spaces + set ops
        let brute = |m: &Tensor, anchor: usize| -> Vec<usize> {
            let mut d: Vec<(f64, usize)> = (0..40)
                .filter(|&x| x != anchor)
                .map(|x| (crate::tensor::euclidean(m.row(anchor), m.row(x)), x))
                .collect();
            d.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap().then(p.1.cmp(&q.1)));
            d[..5].iter().map(|&(_, x)| x).collect()
        };
        let mut total = 0.0;
        for c in 0..40 {
            let sa: std::collections::BTreeSet<usize> = brute(&a, c).into_iter().collect();
            let sb: std::collections::BTreeSet<usize> = brute(&b, c).into_iter().collect();
            let inter = sa.intersection(&sb).count() as f64;
            let union = sa.union(&sb).count() as f64;
            total += 1.0 - inter / union;
        }
        assert!((report[0].mean - total / 40.0).abs() < 1e-12);
        assert!(report[0].mean > 0.0 && report[0].mean <= 1.0);
    }

    #[test]
    fn dissimilarity_k_too_large_is_domain_error() {
        let emb = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(matches!(
            dissimilarity_report(&emb, &emb, &[2]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn embeddings_csv_roundtrip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        let mut rng = rng_stream(5, "embio");
        let emb = Tensor::normal(&mut rng, &[7, 3], 1.0);
        let ids: Vec<usize> = (10..17).collect();
        write_embeddings_csv(&ids, &emb, &path).unwrap();
        let (rids, remb) = read_embeddings_csv(&path).unwrap();
        assert_eq!(rids, ids);
        assert_eq!(remb.data(), emb.data());
    }
}
