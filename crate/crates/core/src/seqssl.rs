//! Sequence SSL backbones: event encoder, GRU sequence encoder, and the two
//! contrastive objectives — margin contrastive with in-batch hard-negative
//! mining, and cross-correlation twins — plus the shared training loop.
//!
//! Integration strategies attach through [`TrainHooks`]; the vanilla
//! backbones run with [`NoHooks`], which touches nothing.

use serde::{Deserialize, Serialize};

use crate::data::{sample_slices, ClientSequence, Dataset, EventRecord, SkipClient};
use crate::error::{Error, Result};
use crate::optim::{BoundParams, OptKind, Optimizer, ParamSet};
use crate::rng_stream;
use crate::tape::{concat, Tape, Var};
use crate::tensor::Tensor;

// ── Event encoder ───────────────────────────────────────────────────

/// Maps one event to a dense vector: per-categorical embedding lookups, a
/// numeric projection after symmetric log scaling, and an item embedding
/// lookup. The item table (`enc/item_table`) is the single injection point
/// for pretrained graph embeddings; with `item_projection` set the lookup
/// reads a frozen source table (`enc/item_source`) through a learnable map
/// (`enc/item_proj`) instead.
#[derive(Debug, Clone)]
pub struct EventEncoder {
    pub n_items: usize,
    pub cat_vocab_sizes: Vec<usize>,
    pub n_num_attrs: usize,
    pub d_cat: usize,
    pub d_num: usize,
    pub d_item: usize,
    /// Source dimension when items are read through a projection.
    pub item_projection: Option<usize>,
}

impl EventEncoder {
    pub fn new(dataset: &Dataset, d_cat: usize, d_num: usize, d_item: usize) -> Self {
        EventEncoder {
            n_items: dataset.n_items,
            cat_vocab_sizes: dataset.cat_vocab_sizes.clone(),
            n_num_attrs: dataset.n_num_attrs,
            d_cat,
            d_num,
            d_item,
            item_projection: None,
        }
    }

    /// Output dimension of one encoded event.
    pub fn d_event(&self) -> usize {
        self.cat_vocab_sizes.len() * self.d_cat
            + if self.n_num_attrs > 0 { self.d_num } else { 0 }
            + self.d_item
    }

    pub fn init_params(&self, params: &mut ParamSet, seed: u64) {
        for (j, &vocab) in self.cat_vocab_sizes.iter().enumerate() {
            let mut rng = rng_stream(seed, &format!("init/enc/cat{}", j));
            params.insert(
                &format!("enc/cat{}", j),
                Tensor::normal(&mut rng, &[vocab.max(1), self.d_cat], 0.1),
            );
        }
        if self.n_num_attrs > 0 {
            let mut rng = rng_stream(seed, "init/enc/num_proj");
            params.insert(
                "enc/num_proj",
                Tensor::normal(&mut rng, &[self.n_num_attrs, self.d_num], 0.3),
            );
        }
        let mut rng = rng_stream(seed, "init/enc/item_table");
        params.insert(
            "enc/item_table",
            Tensor::normal(&mut rng, &[self.n_items.max(1), self.d_item], 0.1),
        );
    }

    /// Encode a run of events into a [T, d_event] matrix.
    pub fn encode_slice<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        events: &[EventRecord],
    ) -> Result<Var<'t>> {
        if events.is_empty() {
            return Err(Error::Batch("cannot encode an empty slice".into()));
        }
        let t_len = events.len();
        let mut parts: Vec<Var<'t>> = Vec::new();
        for (j, &vocab) in self.cat_vocab_sizes.iter().enumerate() {
            let idx: Vec<usize> = events
                .iter()
                .map(|e| {
                    e.cat_attrs
                        .get(j)
                        .copied()
                        .ok_or_else(|| Error::Schema(format!("event missing cat_{}", j)))
                })
                .collect::<Result<_>>()?;
            if let Some(&bad) = idx.iter().find(|&&v| v >= vocab) {
                return Err(Error::Lookup(format!(
                    "cat_{} code {} out of vocab {}",
                    j, bad, vocab
                )));
            }
            parts.push(bound.var(&format!("enc/cat{}", j))?.gather_rows(&idx)?);
        }
        if self.n_num_attrs > 0 {
            let mut raw = Vec::with_capacity(t_len * self.n_num_attrs);
            for e in events {
                if e.num_attrs.len() != self.n_num_attrs {
                    return Err(Error::Schema("event missing numeric attrs".into()));
                }
                raw.extend(e.num_attrs.iter().map(|&x| symlog(x)));
            }
            let xs = tape.constant(Tensor::new(vec![t_len, self.n_num_attrs], raw)?);
            parts.push(xs.matmul(bound.var("enc/num_proj")?)?);
        }
        let item_idx: Vec<usize> = events.iter().map(|e| e.item_id).collect();
        if let Some(&bad) = item_idx.iter().find(|&&v| v >= self.n_items) {
            return Err(Error::Lookup(format!("item id {} out of {}", bad, self.n_items)));
        }
        let items = match self.item_projection {
            None => bound.var("enc/item_table")?.gather_rows(&item_idx)?,
            Some(_) => bound
                .var("enc/item_source")?
                .gather_rows(&item_idx)?
                .matmul(bound.var("enc/item_proj")?)?,
        };
        parts.push(items);
        concat(tape, &parts, 1)
    }

    /// Encode a single event into a [1, d_event] row.
    pub fn encode_event<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        event: &EventRecord,
    ) -> Result<Var<'t>> {
        self.encode_slice(tape, bound, std::slice::from_ref(event))
    }
}

/// Symmetric log scaling for amounts: sign(x) * ln(1 + |x|).
pub fn symlog(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum() * x.abs().ln_1p()
    }
}

// ── GRU sequence encoder ────────────────────────────────────────────

/// Single-layer GRU; the final hidden state summarizes a slice.
#[derive(Debug, Clone)]
pub struct GruEncoder {
    pub d_in: usize,
    pub d_hidden: usize,
}

impl GruEncoder {
    pub fn new(d_in: usize, d_hidden: usize) -> Self {
        GruEncoder { d_in, d_hidden }
    }

    pub fn init_params(&self, params: &mut ParamSet, seed: u64) {
        for gate in ["z", "r", "n"] {
            let mut rng = rng_stream(seed, &format!("init/gru/{}", gate));
            let std_in = 1.0 / (self.d_in as f64).sqrt();
            let std_h = 1.0 / (self.d_hidden as f64).sqrt();
            params.insert(
                &format!("gru/w_{}", gate),
                Tensor::normal(&mut rng, &[self.d_in, self.d_hidden], std_in),
            );
            params.insert(
                &format!("gru/u_{}", gate),
                Tensor::normal(&mut rng, &[self.d_hidden, self.d_hidden], std_h),
            );
            params.insert(&format!("gru/b_{}", gate), Tensor::zeros(&[self.d_hidden]));
        }
    }

    /// Standard recurrence from a zero initial hidden state; returns h_T as
    /// a [1, d_hidden] row.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        xs: Var<'t>,
    ) -> Result<Var<'t>> {
        let h0 = tape.constant(Tensor::zeros(&[1, self.d_hidden]));
        self.forward_from(tape, bound, xs, h0)
    }

    /// Recurrence from an explicit initial hidden state (unit-test hook).
    pub fn forward_from<'t>(
        &self,
        _tape: &'t Tape,
        bound: &BoundParams<'t>,
        xs: Var<'t>,
        h0: Var<'t>,
    ) -> Result<Var<'t>> {
        let t_len = xs.shape()[0];
        if t_len == 0 {
            return Err(Error::Batch("GRU over an empty sequence".into()));
        }
        let (w_z, u_z, b_z) = (bound.var("gru/w_z")?, bound.var("gru/u_z")?, bound.var("gru/b_z")?);
        let (w_r, u_r, b_r) = (bound.var("gru/w_r")?, bound.var("gru/u_r")?, bound.var("gru/b_r")?);
        let (w_n, u_n, b_n) = (bound.var("gru/w_n")?, bound.var("gru/u_n")?, bound.var("gru/b_n")?);
        let mut h = h0;
        for t in 0..t_len {
            let x = xs.narrow_rows(t, 1)?;
            let z = x.matmul(w_z)?.add(h.matmul(u_z)?)?.add(b_z)?.sigmoid();
            let r = x.matmul(w_r)?.add(h.matmul(u_r)?)?.add(b_r)?.sigmoid();
            let n = x
                .matmul(w_n)?
                .add(r.mul(h)?.matmul(u_n)?)?
                .add(b_n)?
                .tanh();
            // h' = (1 - z) ⊙ n + z ⊙ h
            h = n.sub(z.mul(n)?)?.add(z.mul(h)?)?;
        }
        Ok(h)
    }
}

// ── Hard negative mining ────────────────────────────────────────────

/// Indices of the `n_hn` rows closest (Euclidean) to the anchor whose
/// client id differs; ties broken by smaller index. Mining is a detached
/// selection step and never differentiated.
pub fn mine_hard_negatives(
    embeddings: &Tensor,
    client_ids: &[usize],
    anchor: usize,
    n_hn: usize,
) -> Result<Vec<usize>> {
    let n = embeddings.rows();
    assert_eq!(n, client_ids.len(), "ids must match rows");
    let anchor_client = client_ids[anchor];
    let mut candidates: Vec<(f64, usize)> = (0..n)
        .filter(|&i| client_ids[i] != anchor_client)
        .map(|i| {
            (
                crate::tensor::euclidean(embeddings.row(anchor), embeddings.row(i)),
                i,
            )
        })
        .collect();
    if candidates.len() < n_hn {
        return Err(Error::Mining(format!(
            "need {} other-client rows, found {}",
            n_hn,
            candidates.len()
        )));
    }
    candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(candidates[..n_hn].iter().map(|&(_, i)| i).collect())
}

// ── Margin contrastive loss ─────────────────────────────────────────

/// One contrastive batch: slice-embedding rows with their client ids, plus
/// optional strategy extensions (extra positive pairs and extra mining-pool
/// entries from the graph side).
pub struct ColesBatch<'t> {
    /// Each row is a [1, d] slice embedding.
    pub rows: Vec<Var<'t>>,
    pub ids: Vec<usize>,
    /// (row index, embedding) pairs appended to the positive term.
    pub extra_positives: Vec<(usize, Var<'t>)>,
    /// (client id, embedding) entries that join the mining pool only.
    pub extra_pool: Vec<(usize, Var<'t>)>,
}

impl<'t> ColesBatch<'t> {
    pub fn new(rows: Vec<Var<'t>>, ids: Vec<usize>) -> Self {
        ColesBatch { rows, ids, extra_positives: Vec::new(), extra_pool: Vec::new() }
    }
}

/// Margin contrastive loss: mean squared distance over same-client pairs
/// plus mean squared hinge `max(0, margin - d)²` over mined hard negatives.
pub fn coles_loss<'t>(
    tape: &'t Tape,
    batch: &ColesBatch<'t>,
    margin: f64,
    n_hn: usize,
) -> Result<Var<'t>> {
    if margin <= 0.0 {
        return Err(Error::Spec("margin must be positive".into()));
    }
    let n = batch.rows.len();
    if n != batch.ids.len() {
        return Err(Error::Shape("rows and ids length mismatch".into()));
    }

    // positive pairs: all same-client row pairs, plus strategy extras
    let mut pos_terms: Vec<Var<'t>> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if batch.ids[i] == batch.ids[j] {
                pos_terms.push(batch.rows[i].sub(batch.rows[j])?.squared_l2()?);
            }
        }
    }
    for (row, extra) in &batch.extra_positives {
        pos_terms.push(batch.rows[*row].sub(*extra)?.squared_l2()?);
    }
    if pos_terms.is_empty() {
        return Err(Error::Batch("no positive pairs in batch".into()));
    }

    // mining pool: batch rows then extra entries, compared by value
    let mut pool_ids = batch.ids.clone();
    let mut pool_vars = batch.rows.clone();
    for (id, var) in &batch.extra_pool {
        pool_ids.push(*id);
        pool_vars.push(*var);
    }
    let pool_values = Tensor::from_rows(
        &pool_vars
            .iter()
            .map(|v| v.value().into_data())
            .collect::<Vec<_>>(),
    )?;

    let mut neg_terms: Vec<Var<'t>> = Vec::new();
    for anchor in 0..n {
        let mined = mine_hard_negatives(&pool_values, &pool_ids, anchor, n_hn)?;
        for m in mined {
            let d = batch.rows[anchor].euclidean_distance(pool_vars[m])?;
            let hinge = d.neg().add_scalar(margin).relu();
            neg_terms.push(hinge.mul(hinge)?);
        }
    }

    let mean_of = |terms: &[Var<'t>]| -> Result<Var<'t>> {
        let mut total = tape.scalar(0.0);
        for t in terms {
            total = total.add(*t)?;
        }
        Ok(total.scale(1.0 / terms.len() as f64))
    };
    let pos = mean_of(&pos_terms)?;
    if neg_terms.is_empty() {
        return Ok(pos);
    }
    pos.add(mean_of(&neg_terms)?)
}

// ── Cross-correlation twins loss ────────────────────────────────────

/// Redundancy-reduction loss over two views of the same clients: columns
/// are batch-standardized, `C = Z_Aᵀ Z_B / N`, and the loss is
/// `Σ(1 - C_ii)² + λ Σ_{i≠j} C_ij²`.
pub fn bt_loss<'t>(za: Var<'t>, zb: Var<'t>, lambda: f64) -> Result<Var<'t>> {
    if lambda < 0.0 {
        return Err(Error::Spec("lambda must be non-negative".into()));
    }
    let (sa, sb) = (za.shape(), zb.shape());
    if sa != sb || sa.len() != 2 {
        return Err(Error::Shape(format!("view shapes {:?} vs {:?}", sa, sb)));
    }
    let n = sa[0];
    if n < 2 {
        return Err(Error::Batch(format!("twins loss needs N >= 2, got {}", n)));
    }
    let a = za.standardize_cols()?;
    let b = zb.standardize_cols()?;
    let c = a.transpose()?.matmul(b)?.scale(1.0 / n as f64);
    let diag = c.diag()?;
    let invariance = diag.add_scalar(-1.0).squared_l2()?;
    let redundancy = c.squared_l2()?.sub(diag.squared_l2()?)?;
    invariance.add(redundancy.scale(lambda))
}

// ── Training loop ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Coles,
    Bt,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SslConfig {
    pub backbone: Backbone,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Contrastive hinge margin.
    pub margin: f64,
    pub k_slices: usize,
    pub n_hard_negatives: usize,
    /// Twins redundancy trade-off.
    pub lambda: f64,
    pub d_hidden: usize,
    pub d_cat: usize,
    pub d_num: usize,
    pub d_item: usize,
    pub l_min: usize,
    pub l_max: usize,
    pub seed: u64,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            backbone: Backbone::Coles,
            epochs: 12,
            batch_size: 32,
            lr: 0.01,
            margin: 0.5,
            k_slices: 2,
            n_hard_negatives: 5,
            lambda: 0.005,
            d_hidden: 32,
            d_cat: 4,
            d_num: 4,
            d_item: 32,
            l_min: 8,
            l_max: 64,
            seed: 1,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin <= 0.0 {
            return Err(Error::Spec("ssl.margin must be positive".into()));
        }
        if self.k_slices < 2 {
            return Err(Error::Spec("ssl.k_slices must be >= 2".into()));
        }
        if self.n_hard_negatives == 0 {
            return Err(Error::Spec("ssl.n_hard_negatives must be >= 1".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Spec("ssl.lambda must be non-negative".into()));
        }
        if self.l_min == 0 || self.l_max < self.l_min {
            return Err(Error::Spec("ssl slice bounds must satisfy 1 <= l_min <= l_max".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Spec("ssl.batch_size must be >= 2".into()));
        }
        if self.d_hidden == 0 || self.d_item == 0 {
            return Err(Error::Spec("ssl dims must be positive".into()));
        }
        Ok(())
    }
}

/// Strategy attachment points. Default implementations are exact no-ops, so
/// training with [`NoHooks`] IS the vanilla backbone.
pub trait TrainHooks {
    /// Adjust or extend parameters before training starts (e.g. overwrite
    /// the item table with pretrained embeddings, register projections).
    fn prepare(&mut self, _enc: &mut EventEncoder, _params: &mut ParamSet) -> Result<()> {
        Ok(())
    }

    /// Extend a contrastive batch with extra positives / pool entries.
    fn extend_coles_batch<'t>(
        &mut self,
        _tape: &'t Tape,
        _bound: &BoundParams<'t>,
        _batch: &mut ColesBatch<'t>,
    ) -> Result<()> {
        Ok(())
    }

    /// Combine the backbone loss with a strategy loss. `primary_rows[i]` is
    /// one representative embedding of `client_ids[i]` in this batch.
    fn combine_loss<'t>(
        &mut self,
        _tape: &'t Tape,
        _bound: &BoundParams<'t>,
        _primary_rows: &[Var<'t>],
        _client_ids: &[usize],
        ssl_loss: Var<'t>,
    ) -> Result<Var<'t>> {
        Ok(ssl_loss)
    }
}

/// The vanilla backbone: no integration.
pub struct NoHooks;

impl TrainHooks for NoHooks {}

#[derive(Debug, Clone, Default)]
pub struct SslTrainStats {
    /// Mean loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Clients shorter than l_min, summed over epochs they were dropped of.
    pub skipped_clients: usize,
    /// Batches dropped for having too few distinct clients.
    pub skipped_batches: usize,
}

#[derive(Debug)]
pub struct SslArtifacts {
    /// Final-inference embedding per client with at least one event.
    pub client_embeddings: Tensor,
    /// Row ids of `client_embeddings`.
    pub client_ids: Vec<usize>,
    pub params: ParamSet,
    pub encoder: EventEncoder,
    pub gru: GruEncoder,
    pub stats: SslTrainStats,
}

/// Train an SSL backbone with minibatch Adam and encode every client's full
/// sequence with the final model. Deterministic per seed.
pub fn train_ssl<H: TrainHooks>(
    dataset: &Dataset,
    cfg: &SslConfig,
    hooks: &mut H,
) -> Result<SslArtifacts> {
    cfg.validate()?;
    let mut encoder = EventEncoder::new(dataset, cfg.d_cat, cfg.d_num, cfg.d_item);
    let mut params = ParamSet::new();
    encoder.init_params(&mut params, cfg.seed);
    hooks.prepare(&mut encoder, &mut params)?;
    let gru = GruEncoder::new(encoder.d_event(), cfg.d_hidden);
    gru.init_params(&mut params, cfg.seed);

    let mut opt = Optimizer::new(OptKind::Adam, cfg.lr);
    let mut stats = SslTrainStats::default();

    let eligible: Vec<&ClientSequence> = dataset
        .sequences
        .iter()
        .filter(|s| s.len() >= cfg.l_min)
        .collect();
    stats.skipped_clients = (dataset.sequences.len() - eligible.len()) * cfg.epochs;
    if eligible.len() < 2 && cfg.epochs > 0 {
        return Err(Error::Batch(format!(
            "only {} clients have >= {} events",
            eligible.len(),
            cfg.l_min
        )));
    }

    let k = match cfg.backbone {
        Backbone::Coles => cfg.k_slices,
        Backbone::Bt => 2,
    };
    let mut shuffle_rng = rng_stream(cfg.seed, "ssl/shuffle");
    let mut slice_rng = rng_stream(cfg.seed, "ssl/slices");

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..eligible.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let enough = match cfg.backbone {
                Backbone::Coles => (chunk.len().saturating_sub(1)) * k >= cfg.n_hard_negatives,
                Backbone::Bt => chunk.len() >= 2,
            };
            if chunk.len() < 2 || !enough {
                stats.skipped_batches += 1;
                continue;
            }

            // slice sampling happens outside the tape
            let mut batch_slices = Vec::with_capacity(chunk.len());
            for &ci in chunk {
                match sample_slices(eligible[ci], k, cfg.l_min, cfg.l_max, &mut slice_rng) {
                    Ok(slices) => batch_slices.push(slices),
                    Err(SkipClient) => unreachable!("eligible clients satisfy l_min"),
                }
            }

            let tape = Tape::new();
            let bound = params.bind(&tape);
            let mut rows: Vec<Var<'_>> = Vec::with_capacity(chunk.len() * k);
            let mut row_ids: Vec<usize> = Vec::with_capacity(chunk.len() * k);
            for slices in &batch_slices {
                for slice in slices {
                    let encoded = encoder.encode_slice(&tape, &bound, &slice.events)?;
                    rows.push(gru.forward(&tape, &bound, encoded)?);
                    row_ids.push(slice.client_id);
                }
            }

            let client_ids: Vec<usize> = batch_slices.iter().map(|s| s[0].client_id).collect();
            // representative row per client: its first slice
            let primary_rows: Vec<Var<'_>> = (0..chunk.len()).map(|i| rows[i * k]).collect();

            let ssl_loss = match cfg.backbone {
                Backbone::Coles => {
                    let mut batch = ColesBatch::new(rows, row_ids);
                    hooks.extend_coles_batch(&tape, &bound, &mut batch)?;
                    coles_loss(&tape, &batch, cfg.margin, cfg.n_hard_negatives)?
                }
                Backbone::Bt => {
                    let view_a: Vec<Var<'_>> = (0..chunk.len()).map(|i| rows[i * k]).collect();
                    let view_b: Vec<Var<'_>> =
                        (0..chunk.len()).map(|i| rows[i * k + 1]).collect();
                    let za = concat(&tape, &view_a, 0)?;
                    let zb = concat(&tape, &view_b, 0)?;
                    bt_loss(za, zb, cfg.lambda)?
                }
            };
            let loss = hooks.combine_loss(&tape, &bound, &primary_rows, &client_ids, ssl_loss)?;

            let loss_val = loss.item()?;
            if !loss_val.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    msg: format!("loss = {}", loss_val),
                });
            }
            epoch_loss += loss_val;
            batches += 1;
            tape.backward(loss)?;
            params.absorb_grads(&tape, &bound)?;
            opt.step(&mut params)?;
        }
        if batches > 0 {
            stats.loss_curve.push(epoch_loss / batches as f64);
        }
    }

    let (client_ids, client_embeddings) = encode_all_clients(dataset, &encoder, &gru, &params)?;
    Ok(SslArtifacts { client_embeddings, client_ids, params, encoder, gru, stats })
}

/// Inference pass: one embedding per client from its full sequence, model
/// frozen.
pub fn encode_all_clients(
    dataset: &Dataset,
    encoder: &EventEncoder,
    gru: &GruEncoder,
    params: &ParamSet,
) -> Result<(Vec<usize>, Tensor)> {
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for seq in &dataset.sequences {
        if seq.is_empty() {
            continue;
        }
        let tape = Tape::new();
        let bound = params.bind_frozen(&tape);
        let encoded = encoder.encode_slice(&tape, &bound, &seq.events)?;
        let h = gru.forward(&tape, &bound, encoded)?;
        ids.push(seq.client_id);
        rows.push(h.value().into_data());
    }
    Ok((ids, Tensor::from_rows(&rows)?))
}
