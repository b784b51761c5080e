//! Graph-integration strategies wired into the SSL training loop:
//!
//! - embedding initialization (`gremb_seq` / `gremb_joint`): pretrained or
//!   co-trained graph embeddings behind the event encoder's item table;
//! - graph positives (`reg`): a projected graph client embedding joins each
//!   anchor's positive set, and the mining pool spans both spaces;
//! - auxiliary ranking loss (`aux_loss`): a BPR or triplet objective over
//!   similarity-binned client pairs, mixed with the backbone loss by gamma.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{
    forward_sampled, gnn_batch_loss, sample_neighbors, GnnInputs, GnnModel, GnnTrainStats, NodeId,
    WpKind,
};
use crate::graph::{BipartiteGraph, SimilarityIndex};
use crate::optim::{BoundParams, ParamSet};
use crate::rng_stream;
use crate::seqssl::{ColesBatch, EventEncoder, TrainHooks};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    None,
    GrembSeq,
    GrembJoint,
    Reg,
    AuxLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankingKind {
    Bpr,
    Triplet,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct IntegrationConfig {
    pub strategy: Strategy,
    /// SSL share of the combined loss.
    pub gamma: f64,
    /// Link-prediction share inside the graph loss (joint mode).
    pub alpha: f64,
    pub ranking: RankingKind,
    pub triplet_margin: f64,
    pub m_bins: usize,
    /// Bin-pair draws per anchor per step.
    pub repetitions: usize,
    pub freeze_items: bool,
    /// Insert a learnable projection when graph and item dims differ.
    pub project: bool,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        IntegrationConfig {
            strategy: Strategy::None,
            gamma: 0.5,
            alpha: 0.5,
            ranking: RankingKind::Bpr,
            triplet_margin: 1.0,
            m_bins: 10,
            repetitions: 4,
            freeze_items: true,
            project: false,
        }
    }
}

impl IntegrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Spec("integrate.gamma must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Spec("integrate.alpha must be in [0, 1]".into()));
        }
        if self.m_bins < 2 {
            return Err(Error::Spec("integrate.m_bins must be >= 2".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Spec("integrate.repetitions must be >= 1".into()));
        }
        if self.triplet_margin < 0.0 {
            return Err(Error::Spec("integrate.triplet_margin must be >= 0".into()));
        }
        Ok(())
    }
}

// ── Convex combinations ─────────────────────────────────────────────

/// `gamma * a + (1 - gamma) * b`; endpoints return the sub-loss itself so
/// the combination is bitwise exact there.
pub fn convex_combination<'t>(a: Var<'t>, b: Var<'t>, gamma: f64) -> Result<Var<'t>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Spec(format!("gamma {} outside [0, 1]", gamma)));
    }
    if gamma == 1.0 {
        Ok(a)
    } else if gamma == 0.0 {
        Ok(b)
    } else {
        a.scale(gamma).add(b.scale(1.0 - gamma))
    }
}

/// Joint training objective: `gamma * L_SSL + (1 - gamma) * L_GNN`.
pub fn joint_loss<'t>(ssl: Var<'t>, gnn: Var<'t>, gamma: f64) -> Result<Var<'t>> {
    convex_combination(ssl, gnn, gamma)
}

/// Auxiliary objective: `gamma * L_SSL + (1 - gamma) * L_sim`.
pub fn combined_aux_loss<'t>(ssl: Var<'t>, sim: Var<'t>, gamma: f64) -> Result<Var<'t>> {
    convex_combination(ssl, sim, gamma)
}

// ── Ranking losses ──────────────────────────────────────────────────

/// Mean `-log sigmoid(h_u · (h_pos - h_neg))` over ranking triples.
pub fn bpr_loss<'t>(tape: &'t Tape, triples: &[(Var<'t>, Var<'t>, Var<'t>)]) -> Result<Var<'t>> {
    if triples.is_empty() {
        return Err(Error::Batch("ranking loss over zero triples".into()));
    }
    let mut total = tape.scalar(0.0);
    for (u, pos, neg) in triples {
        let gap = u.dot(pos.sub(*neg)?)?;
        total = total.add(gap.neg().softplus())?;
    }
    Ok(total.scale(1.0 / triples.len() as f64))
}

/// Mean `max(0, d(u, pos) - d(u, neg) + margin)` over ranking triples.
pub fn triplet_ranking_loss<'t>(
    tape: &'t Tape,
    triples: &[(Var<'t>, Var<'t>, Var<'t>)],
    margin: f64,
) -> Result<Var<'t>> {
    if margin < 0.0 {
        return Err(Error::Spec("triplet margin must be >= 0".into()));
    }
    if triples.is_empty() {
        return Err(Error::Batch("ranking loss over zero triples".into()));
    }
    let mut total = tape.scalar(0.0);
    for (u, pos, neg) in triples {
        let dp = u.euclidean_distance(*pos)?;
        let dn = u.euclidean_distance(*neg)?;
        total = total.add(dp.sub(dn)?.add_scalar(margin).relu())?;
    }
    Ok(total.scale(1.0 / triples.len() as f64))
}

// ── Similarity bins ─────────────────────────────────────────────────

/// Per-client partition of all other clients into `m` near-equal contiguous
/// bins by descending adjacency-cosine similarity. Bin 0 is most similar.
#[derive(Debug, Clone)]
pub struct BinIndex {
    pub m: usize,
    /// members[client][bin] -> other-client ids.
    pub members: Vec<Vec<Vec<usize>>>,
    /// bin_of[client][other] -> bin id (self maps to `m`, an invalid bin).
    pub bin_of: Vec<Vec<usize>>,
}

impl BinIndex {
    pub fn n_clients(&self) -> usize {
        self.members.len()
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut out = Vec::new();
        writeln!(out, "client_id,other_id,bin")?;
        for (client, bins) in self.members.iter().enumerate() {
            for (bin, ids) in bins.iter().enumerate() {
                for other in ids {
                    writeln!(out, "{},{},{}", client, other, bin)?;
                }
            }
        }
        crate::write_atomic(path, &out)
    }
}

/// Split each client's similarity ranking into `m` contiguous bins whose
/// sizes differ by at most one (earlier bins take the remainder).
pub fn build_bins(sim: &SimilarityIndex, m: usize) -> Result<BinIndex> {
    if m < 2 {
        return Err(Error::Spec("need at least 2 bins".into()));
    }
    let n = sim.n();
    if n < m + 1 {
        return Err(Error::Spec(format!(
            "need at least {} clients for {} bins, got {}",
            m + 1,
            m,
            n
        )));
    }
    let per = (n - 1) / m;
    let extra = (n - 1) % m;
    let mut members = Vec::with_capacity(n);
    let mut bin_of = vec![vec![m; n]; n];
    for client in 0..n {
        let ranked = &sim.ranking[client];
        let mut bins = Vec::with_capacity(m);
        let mut cursor = 0;
        for b in 0..m {
            let size = per + usize::from(b < extra);
            let ids: Vec<usize> = ranked[cursor..cursor + size].to_vec();
            for &other in &ids {
                bin_of[client][other] = b;
            }
            cursor += size;
            bins.push(ids);
        }
        members.push(bins);
    }
    Ok(BinIndex { m, members, bin_of })
}

/// Draw `repetitions` (positive, negative) client pairs for one anchor from
/// the current batch: two distinct bins are chosen uniformly among bins with
/// in-batch members, the higher-similarity bin supplying the positive.
/// Returns None when fewer than two bins have in-batch members.
pub fn sample_bin_pairs<R: Rng>(
    anchor: usize,
    bins: &BinIndex,
    batch_clients: &[usize],
    repetitions: usize,
    rng: &mut R,
) -> Option<Vec<(usize, usize)>> {
    let in_batch: Vec<Vec<usize>> = bins.members[anchor]
        .iter()
        .map(|bin| {
            bin.iter()
                .copied()
                .filter(|c| *c != anchor && batch_clients.contains(c))
                .collect()
        })
        .collect();
    let nonempty: Vec<usize> = (0..bins.m).filter(|&b| !in_batch[b].is_empty()).collect();
    if nonempty.len() < 2 {
        return None;
    }
    let mut pairs = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let a = rng.random_range(0..nonempty.len());
        let mut b = rng.random_range(0..nonempty.len() - 1);
        if b >= a {
            b += 1;
        }
        let (hi, lo) = (nonempty[a.min(b)], nonempty[a.max(b)]);
        let pos = in_batch[hi][rng.random_range(0..in_batch[hi].len())];
        let neg = in_batch[lo][rng.random_range(0..in_batch[lo].len())];
        pairs.push((pos, neg));
    }
    Some(pairs)
}

// ── Strategy hooks ──────────────────────────────────────────────────

/// Overwrite the encoder's item table with pretrained embeddings. When the
/// dimensions differ and `project` is set, the encoder instead reads a
/// frozen copy of the pretrained table through a learnable linear map.
pub fn gremb_init(
    encoder: &mut EventEncoder,
    params: &mut ParamSet,
    pretrained_items: &Tensor,
    freeze: bool,
    project: bool,
    seed: u64,
) -> Result<()> {
    let d_g = pretrained_items.cols();
    if pretrained_items.rows() != encoder.n_items {
        return Err(Error::Shape(format!(
            "pretrained table has {} rows for {} items",
            pretrained_items.rows(),
            encoder.n_items
        )));
    }
    if d_g == encoder.d_item {
        *params.get_mut("enc/item_table")? = pretrained_items.clone();
        params.set_frozen("enc/item_table", freeze);
        Ok(())
    } else if project {
        encoder.item_projection = Some(d_g);
        params.insert("enc/item_source", pretrained_items.clone());
        params.set_frozen("enc/item_source", true);
        let mut rng = rng_stream(seed, "init/enc/item_proj");
        params.insert(
            "enc/item_proj",
            Tensor::normal(&mut rng, &[d_g, encoder.d_item], 1.0 / (d_g as f64).sqrt()),
        );
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "pretrained dim {} != item dim {} and projection is disabled",
            d_g, encoder.d_item
        )))
    }
}

/// Sequential integration: item table seeded from a pretrained graph model.
pub struct GrEmbSeqHooks {
    pub pretrained_items: Tensor,
    pub freeze: bool,
    pub project: bool,
    pub seed: u64,
}

impl TrainHooks for GrEmbSeqHooks {
    fn prepare(&mut self, enc: &mut EventEncoder, params: &mut ParamSet) -> Result<()> {
        gremb_init(enc, params, &self.pretrained_items, self.freeze, self.project, self.seed)
    }
}

/// Joint integration: the item table doubles as the GNN's item inputs and a
/// graph loss over a fresh edge minibatch joins every training step.
pub struct GrEmbJointHooks<'a> {
    pub graph: &'a BipartiteGraph,
    pub adjacency_weighted: &'a Tensor,
    pub gamma: f64,
    pub alpha: f64,
    pub wp_kind: WpKind,
    pub fanouts: Vec<usize>,
    pub edge_batch: usize,
    pub seed: u64,
    model: Option<GnnModel>,
    edge_rng: Option<ChaCha8Rng>,
    neg_rng: Option<ChaCha8Rng>,
    sample_rng: Option<ChaCha8Rng>,
    pub stats: GnnTrainStats,
}

impl<'a> GrEmbJointHooks<'a> {
    pub fn new(
        graph: &'a BipartiteGraph,
        adjacency_weighted: &'a Tensor,
        cfg: &IntegrationConfig,
        gnn_cfg: &crate::gnn::GnnConfig,
        seed: u64,
    ) -> Self {
        GrEmbJointHooks {
            graph,
            adjacency_weighted,
            gamma: cfg.gamma,
            alpha: cfg.alpha,
            wp_kind: gnn_cfg.wp_kind,
            fanouts: gnn_cfg.fanouts.clone(),
            edge_batch: gnn_cfg.batch_size,
            seed,
            model: None,
            edge_rng: None,
            neg_rng: None,
            sample_rng: None,
            stats: GnnTrainStats::default(),
        }
    }
}

impl TrainHooks for GrEmbJointHooks<'_> {
    fn prepare(&mut self, enc: &mut EventEncoder, params: &mut ParamSet) -> Result<()> {
        let model = GnnModel::new(self.fanouts.len(), enc.d_item);
        model.init_params(params, self.seed);
        let mut rng = rng_stream(self.seed, "init/gnn/inputs");
        params.insert(
            "gnn/client_proj",
            Tensor::normal(
                &mut rng,
                &[self.graph.n_items, enc.d_item],
                1.0 / (self.graph.n_items as f64).sqrt(),
            ),
        );
        self.model = Some(model);
        self.edge_rng = Some(rng_stream(self.seed, "joint/edges"));
        self.neg_rng = Some(rng_stream(self.seed, "joint/negatives"));
        self.sample_rng = Some(rng_stream(self.seed, "joint/neighbors"));
        Ok(())
    }

    fn combine_loss<'t>(
        &mut self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        _primary_rows: &[Var<'t>],
        _client_ids: &[usize],
        ssl_loss: Var<'t>,
    ) -> Result<Var<'t>> {
        if self.gamma == 1.0 {
            return Ok(ssl_loss);
        }
        let g = self.graph;
        let edge_rng = self.edge_rng.as_mut().expect("prepare ran");
        let n_edges = g.n_edges();
        if n_edges == 0 {
            return Err(Error::Spec("joint training needs a non-empty graph".into()));
        }
        let take = self.edge_batch.min(n_edges);
        let mut positives = Vec::with_capacity(take);
        for _ in 0..take {
            let e = &g.edges[edge_rng.random_range(0..n_edges)];
            positives.push((e.client, e.item, e.weight));
        }
        let neg_rng = self.neg_rng.as_mut().expect("prepare ran");
        let mut negatives = Vec::with_capacity(take);
        for _ in 0..take {
            let mut tries = 0;
            loop {
                let u = neg_rng.random_range(0..g.n_clients);
                let v = neg_rng.random_range(0..g.n_items);
                if !g.has_edge(u, v) {
                    negatives.push((u, v));
                    break;
                }
                tries += 1;
                if tries > 10_000 {
                    return Err(Error::Spec("graph too dense to sample non-edges".into()));
                }
            }
        }
        self.stats.negative_samples += negatives.len();

        let seeds: Vec<NodeId> = positives
            .iter()
            .flat_map(|&(u, v, _)| [NodeId::Client(u), NodeId::Item(v)])
            .chain(
                negatives
                    .iter()
                    .flat_map(|&(u, v)| [NodeId::Client(u), NodeId::Item(v)]),
            )
            .collect();
        let sample =
            sample_neighbors(g, &seeds, &self.fanouts, self.sample_rng.as_mut().unwrap());
        let inputs = GnnInputs {
            item_feats: bound.var("enc/item_table")?,
            client_proj: bound.var("gnn/client_proj")?,
            adjacency: self.adjacency_weighted,
        };
        let model = self.model.as_ref().expect("prepare ran");
        let emb = forward_sampled(tape, model, bound, &inputs, &sample)?;
        let gnn = gnn_batch_loss(
            tape,
            &emb,
            &positives,
            &negatives,
            self.alpha,
            self.wp_kind,
            &mut self.stats,
        )?;
        joint_loss(ssl_loss, gnn, self.gamma)
    }
}

/// Graph-positive regularization: each anchor gains a positive derived from
/// its pretrained graph embedding through a learnable projection, and those
/// projected embeddings join the hard-negative mining pool.
pub struct RegHooks {
    /// [n_clients, d_g] pretrained client embeddings.
    pub client_graph_embeddings: Tensor,
    /// Clients without graph support are skipped (and counted).
    pub isolated: Vec<bool>,
    pub d_hidden: usize,
    pub seed: u64,
    pub skipped_isolated: usize,
}

impl RegHooks {
    pub fn new(
        client_graph_embeddings: Tensor,
        graph: &BipartiteGraph,
        d_hidden: usize,
        seed: u64,
    ) -> Self {
        let isolated = (0..graph.n_clients)
            .map(|c| graph.client_degree[c] == 0)
            .collect();
        RegHooks {
            client_graph_embeddings,
            isolated,
            d_hidden,
            seed,
            skipped_isolated: 0,
        }
    }
}

impl TrainHooks for RegHooks {
    fn prepare(&mut self, _enc: &mut EventEncoder, params: &mut ParamSet) -> Result<()> {
        let d_g = self.client_graph_embeddings.cols();
        let mut rng = rng_stream(self.seed, "init/reg/proj");
        params.insert(
            "reg/proj",
            Tensor::normal(&mut rng, &[d_g, self.d_hidden], 1.0 / (d_g as f64).sqrt()),
        );
        Ok(())
    }

    fn extend_coles_batch<'t>(
        &mut self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        batch: &mut ColesBatch<'t>,
    ) -> Result<()> {
        let proj = bound.var("reg/proj")?;
        let d_g = self.client_graph_embeddings.cols();
        // one projected embedding per distinct client in the batch
        let mut seen: Vec<(usize, Var<'t>)> = Vec::new();
        let mut skipped: Vec<usize> = Vec::new();
        for &client in &batch.ids {
            if seen.iter().any(|(c, _)| *c == client) || skipped.contains(&client) {
                continue;
            }
            if client >= self.isolated.len() || self.isolated[client] {
                self.skipped_isolated += 1;
                skipped.push(client);
                continue;
            }
            let row = Tensor::new(
                vec![1, d_g],
                self.client_graph_embeddings.row(client).to_vec(),
            )?;
            let projected = tape.constant(row).matmul(proj)?;
            seen.push((client, projected));
        }
        for (row_idx, &client) in batch.ids.iter().enumerate() {
            if let Some((_, p)) = seen.iter().find(|(c, _)| *c == client) {
                batch.extra_positives.push((row_idx, *p));
            }
        }
        for (client, p) in seen {
            batch.extra_pool.push((client, p));
        }
        Ok(())
    }
}

/// Auxiliary ranking objective over similarity bins.
pub struct AuxLossHooks<'a> {
    pub bins: &'a BinIndex,
    pub ranking: RankingKind,
    pub gamma: f64,
    pub triplet_margin: f64,
    pub repetitions: usize,
    rng: ChaCha8Rng,
    /// Anchors skipped for lacking two nonempty in-batch bins.
    pub skipped_anchors: usize,
    /// Steps where no anchor produced a ranking triple.
    pub empty_steps: usize,
}

impl<'a> AuxLossHooks<'a> {
    pub fn new(bins: &'a BinIndex, cfg: &IntegrationConfig, seed: u64) -> Self {
        AuxLossHooks {
            bins,
            ranking: cfg.ranking,
            gamma: cfg.gamma,
            triplet_margin: cfg.triplet_margin,
            repetitions: cfg.repetitions,
            rng: rng_stream(seed, "aux/bins"),
            skipped_anchors: 0,
            empty_steps: 0,
        }
    }
}

impl TrainHooks for AuxLossHooks<'_> {
    fn combine_loss<'t>(
        &mut self,
        tape: &'t Tape,
        _bound: &BoundParams<'t>,
        primary_rows: &[Var<'t>],
        client_ids: &[usize],
        ssl_loss: Var<'t>,
    ) -> Result<Var<'t>> {
        if self.gamma == 1.0 {
            return Ok(ssl_loss);
        }
        let pos_of = |client: usize| client_ids.iter().position(|&c| c == client);
        let mut triples = Vec::new();
        for (i, &anchor) in client_ids.iter().enumerate() {
            match sample_bin_pairs(anchor, self.bins, client_ids, self.repetitions, &mut self.rng)
            {
                None => self.skipped_anchors += 1,
                Some(pairs) => {
                    for (pos, neg) in pairs {
                        let (pi, ni) = (
                            pos_of(pos).expect("sampled from batch"),
                            pos_of(neg).expect("sampled from batch"),
                        );
                        triples.push((primary_rows[i], primary_rows[pi], primary_rows[ni]));
                    }
                }
            }
        }
        if triples.is_empty() {
            // no structural signal available this step
            self.empty_steps += 1;
            return Ok(ssl_loss);
        }
        let sim_loss = match self.ranking {
            RankingKind::Bpr => bpr_loss(tape, &triples)?,
            RankingKind::Triplet => triplet_ranking_loss(tape, &triples, self.triplet_margin)?,
        };
        combined_aux_loss(ssl_loss, sim_loss, self.gamma)
    }
}
