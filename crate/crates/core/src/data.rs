//! Event-sequence data model: CSV ingestion, a seeded synthetic generator
//! with planted community structure, and the contrastive slice sampler.
//!
//! Client and item identifiers double as dense indices: a dataset covers ids
//! `0..n_clients` / `0..n_items`, with ids that never occur simply isolated.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng_stream;

/// One timestamped client-item interaction with attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub client_id: usize,
    pub item_id: usize,
    pub timestamp: i64,
    pub cat_attrs: Vec<usize>,
    pub num_attrs: Vec<f64>,
}

/// Time-ordered event stream of one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientSequence {
    pub client_id: usize,
    pub events: Vec<EventRecord>,
}

impl ClientSequence {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Contiguous, order-preserving sub-sequence of one client's events.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub client_id: usize,
    pub start: usize,
    pub events: Vec<EventRecord>,
}

impl Slice {
    pub fn len(&self) -> usize {
        self.events.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Sorted by client id; one entry per client that has events.
    pub sequences: Vec<ClientSequence>,
    pub n_clients: usize,
    pub n_items: usize,
    pub cat_vocab_sizes: Vec<usize>,
    pub n_num_attrs: usize,
}

impl Dataset {
    pub fn n_events(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }

    pub fn sequence(&self, client_id: usize) -> Option<&ClientSequence> {
        self.sequences
            .binary_search_by_key(&client_id, |s| s.client_id)
            .ok()
            .map(|i| &self.sequences[i])
    }
}

/// Per-client labels for the downstream task.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Labels {
    pub by_client: BTreeMap<usize, usize>,
}

impl Labels {
    pub fn n_classes(&self) -> usize {
        self.by_client.values().max().map_or(0, |m| m + 1)
    }
}

// ── CSV ingestion ───────────────────────────────────────────────────

/// Read `events.csv` (`client_id,item_id,timestamp,cat_*,num_*`) into
/// per-client sequences sorted by (timestamp, file order).
pub fn read_events_csv(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => return Err(Error::Schema("missing header row".into())),
    };
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    let (n_cat, n_num) = parse_header(&cols)?;

    let mut per_client: BTreeMap<usize, Vec<EventRecord>> = BTreeMap::new();
    let mut max_item = None::<usize>;
    let mut max_cat = vec![None::<usize>; n_cat];
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2; // 1-based, header is line 1
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Schema(format!(
                "line {}: expected {} fields, got {}",
                line_no,
                cols.len(),
                fields.len()
            )));
        }
        let parse_usize = |s: &str, what: &str| -> Result<usize> {
            s.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("invalid {} '{}'", what, s),
            })
        };
        let client_id = parse_usize(fields[0], "client_id")?;
        let item_id = parse_usize(fields[1], "item_id")?;
        let timestamp: i64 = fields[2].trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("invalid timestamp '{}'", fields[2]),
        })?;
        let mut cat_attrs = Vec::with_capacity(n_cat);
        for (c, f) in fields[3..3 + n_cat].iter().enumerate() {
            let v = parse_usize(f, &format!("cat_{}", c))?;
            max_cat[c] = Some(max_cat[c].map_or(v, |m: usize| m.max(v)));
            cat_attrs.push(v);
        }
        let mut num_attrs = Vec::with_capacity(n_num);
        for (c, f) in fields[3 + n_cat..].iter().enumerate() {
            let v: f64 = f.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("invalid num_{} '{}'", c, f),
            })?;
            num_attrs.push(v);
        }
        max_item = Some(max_item.map_or(item_id, |m| m.max(item_id)));
        per_client
            .entry(client_id)
            .or_default()
            .push(EventRecord { client_id, item_id, timestamp, cat_attrs, num_attrs });
    }

    let n_clients = per_client.keys().next_back().map_or(0, |m| m + 1);
    let sequences = per_client
        .into_iter()
        .map(|(client_id, mut events)| {
            // stable: file order breaks timestamp ties
            events.sort_by_key(|e| e.timestamp);
            ClientSequence { client_id, events }
        })
        .collect();
    Ok(Dataset {
        sequences,
        n_clients,
        n_items: max_item.map_or(0, |m| m + 1),
        cat_vocab_sizes: max_cat.iter().map(|m| m.map_or(0, |v| v + 1)).collect(),
        n_num_attrs: n_num,
    })
}

fn parse_header(cols: &[&str]) -> Result<(usize, usize)> {
    if cols.len() < 3 || cols[0] != "client_id" || cols[1] != "item_id" || cols[2] != "timestamp" {
        return Err(Error::Schema(format!(
            "header must start with client_id,item_id,timestamp; got {:?}",
            cols
        )));
    }
    let mut n_cat = 0;
    let mut i = 3;
    while i < cols.len() && cols[i] == format!("cat_{}", n_cat) {
        n_cat += 1;
        i += 1;
    }
    let mut n_num = 0;
    while i < cols.len() && cols[i] == format!("num_{}", n_num) {
        n_num += 1;
        i += 1;
    }
    if i != cols.len() {
        return Err(Error::Schema(format!("unexpected column '{}'", cols[i])));
    }
    Ok((n_cat, n_num))
}

pub fn write_events_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    let n_cat = dataset.cat_vocab_sizes.len();
    let mut header = String::from("client_id,item_id,timestamp");
    for c in 0..n_cat {
        header.push_str(&format!(",cat_{}", c));
    }
    for c in 0..dataset.n_num_attrs {
        header.push_str(&format!(",num_{}", c));
    }
    writeln!(out, "{}", header)?;
    for seq in &dataset.sequences {
        for e in &seq.events {
            write!(out, "{},{},{}", e.client_id, e.item_id, e.timestamp)?;
            for v in &e.cat_attrs {
                write!(out, ",{}", v)?;
            }
            for v in &e.num_attrs {
                write!(out, ",{}", v)?;
            }
            writeln!(out)?;
        }
    }
    crate::write_atomic(path, &out)
}

pub fn read_labels_csv(path: &Path) -> Result<Labels> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Schema("missing labels header".into()))?;
    if header.trim_end() != "client_id,label" {
        return Err(Error::Schema("labels header must be client_id,label".into()));
    }
    let mut by_client = BTreeMap::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.trim_end().split(',');
        let parse = |s: Option<&str>, what: &str| -> Result<usize> {
            s.and_then(|v| v.trim().parse().ok()).ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("invalid {}", what),
            })
        };
        let client = parse(parts.next(), "client_id")?;
        let label = parse(parts.next(), "label")?;
        by_client.insert(client, label);
    }
    Ok(Labels { by_client })
}

pub fn write_labels_csv(labels: &Labels, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "client_id,label")?;
    for (client, label) in &labels.by_client {
        writeln!(out, "{},{}", client, label)?;
    }
    crate::write_atomic(path, &out)
}

// ── Synthetic generation ────────────────────────────────────────────

/// Declarative description of a synthetic dataset with planted communities.
///
/// Each client belongs to one of `k_communities`; the item catalog is
/// partitioned into per-community blocks, and every event picks an item from
/// the client's own block with probability `intra_affinity`, uniformly from
/// the whole catalog otherwise. Expected graph density therefore grows with
/// `events_per_client / n_items`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_clients: usize,
    pub n_items: usize,
    pub k_communities: usize,
    /// Mean of the per-client Poisson event count (clamped to >= 1 events).
    pub events_per_client: f64,
    /// Probability an event's item comes from the client's own block.
    pub intra_affinity: f64,
    /// Probability a client's label is flipped to a different community.
    pub label_noise: f64,
    pub cat_vocab_sizes: Vec<usize>,
    pub n_num_attrs: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_clients: 160,
            n_items: 40,
            k_communities: 4,
            events_per_client: 50.0,
            intra_affinity: 0.8,
            label_noise: 0.05,
            cat_vocab_sizes: vec![6],
            n_num_attrs: 1,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k_communities == 0 || self.k_communities > self.n_items {
            return Err(Error::Spec(format!(
                "k_communities ({}) must be in 1..=n_items ({})",
                self.k_communities, self.n_items
            )));
        }
        if self.n_clients == 0 {
            return Err(Error::Spec("n_clients must be positive".into()));
        }
        if self.events_per_client < 1.0 {
            return Err(Error::Spec("events_per_client must be >= 1".into()));
        }
        if !(self.intra_affinity > 0.0 && self.intra_affinity <= 1.0) {
            return Err(Error::Spec("intra_affinity must be in (0, 1]".into()));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::Spec("label_noise must be in [0, 0.5)".into()));
        }
        Ok(())
    }

    /// Item-id range `[start, end)` of community `c`'s block.
    pub fn block_bounds(&self, c: usize) -> (usize, usize) {
        let k = self.k_communities;
        (c * self.n_items / k, (c + 1) * self.n_items / k)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    /// Community id with `label_noise` flips applied.
    pub labels: Labels,
    /// Ground-truth community per client (index = client id).
    pub communities: Vec<usize>,
}

/// Deterministic synthetic dataset. Event content depends only on
/// (spec minus label_noise, seed); label flips draw from a separate stream
/// so sweeping the noise level never changes the events.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = rng_stream(spec.seed, "synthetic/events");
    let poisson = Poisson::new(spec.events_per_client)
        .map_err(|e| Error::Spec(format!("invalid events_per_client: {}", e)))?;
    let gap = Exp::new(1.0 / 3600.0).expect("positive rate");

    let mut sequences = Vec::with_capacity(spec.n_clients);
    let mut communities = Vec::with_capacity(spec.n_clients);
    for client_id in 0..spec.n_clients {
        let community = rng.random_range(0..spec.k_communities);
        communities.push(community);
        let (block_start, block_end) = spec.block_bounds(community);
        let count = (poisson.sample(&mut rng) as usize).max(1);
        let mut timestamp: i64 = 0;
        let mut events = Vec::with_capacity(count);
        for _ in 0..count {
            let delta: f64 = gap.sample(&mut rng);
            timestamp += (delta.ceil() as i64).max(1);
            let item_id = if rng.random::<f64>() < spec.intra_affinity {
                rng.random_range(block_start..block_end)
            } else {
                rng.random_range(0..spec.n_items)
            };
            let item_block = item_id * spec.k_communities / spec.n_items;
            let cat_attrs = spec
                .cat_vocab_sizes
                .iter()
                .map(|&v| rng.random_range(0..v.max(1)))
                .collect();
            // amounts are block-conditioned so numeric attrs carry structure
            let amount_dist = LogNormal::new(0.4 * item_block as f64, 0.5).expect("valid");
            let num_attrs = (0..spec.n_num_attrs)
                .map(|_| amount_dist.sample(&mut rng))
                .collect();
            events.push(EventRecord { client_id, item_id, timestamp, cat_attrs, num_attrs });
        }
        sequences.push(ClientSequence { client_id, events });
    }

    let mut label_rng = rng_stream(spec.seed, "synthetic/labels");
    let mut by_client = BTreeMap::new();
    for (client_id, &community) in communities.iter().enumerate() {
        let label = if spec.k_communities > 1 && label_rng.random::<f64>() < spec.label_noise {
            let shift = label_rng.random_range(1..spec.k_communities);
            (community + shift) % spec.k_communities
        } else {
            community
        };
        by_client.insert(client_id, label);
    }

    Ok(SyntheticData {
        dataset: Dataset {
            sequences,
            n_clients: spec.n_clients,
            n_items: spec.n_items,
            cat_vocab_sizes: spec.cat_vocab_sizes.clone(),
            n_num_attrs: spec.n_num_attrs,
        },
        labels: Labels { by_client },
        communities,
    })
}

// ── Slice sampling ──────────────────────────────────────────────────

/// Signal that a sequence is too short to slice; callers drop the client
/// from the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SkipClient;

/// Draw `k` random contiguous slices: length uniform in
/// `[l_min, min(l_max, len)]`, start uniform over valid offsets. Slices of
/// one client are positives of each other.
pub fn sample_slices<R: Rng>(
    seq: &ClientSequence,
    k: usize,
    l_min: usize,
    l_max: usize,
    rng: &mut R,
) -> std::result::Result<Vec<Slice>, SkipClient> {
    assert!(l_min >= 1 && l_max >= l_min, "invalid slice bounds");
    assert!(k >= 2, "at least two slices per client");
    let len = seq.len();
    if len < l_min {
        return Err(SkipClient);
    }
    let l_hi = l_max.min(len);
    let mut slices = Vec::with_capacity(k);
    for _ in 0..k {
        let l = rng.random_range(l_min..=l_hi);
        let s = rng.random_range(0..=len - l);
        slices.push(Slice {
            client_id: seq.client_id,
            start: s,
            events: seq.events[s..s + l].to_vec(),
        });
    }
    Ok(slices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_dataset() -> Dataset {
        Dataset {
            sequences: vec![ClientSequence {
                client_id: 0,
                events: vec![
                    EventRecord {
                        client_id: 0,
                        item_id: 1,
                        timestamp: 10,
                        cat_attrs: vec![2],
                        num_attrs: vec![1.5],
                    },
                    EventRecord {
                        client_id: 0,
                        item_id: 0,
                        timestamp: 20,
                        cat_attrs: vec![0],
                        num_attrs: vec![0.25],
                    },
                ],
            }],
            n_clients: 1,
            n_items: 2,
            cat_vocab_sizes: vec![3],
            n_num_attrs: 1,
        }
    }

    #[test]
    fn csv_roundtrip_equivalent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.csv");
        let ds = tiny_dataset();
        write_events_csv(&ds, &path).unwrap();
        let back = read_events_csv(&path).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn two_row_file_single_sorted_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.csv");
        std::fs::write(&path, "client_id,item_id,timestamp,cat_0,num_0\n5,1,200,0,1.0\n5,0,100,1,2.0\n").unwrap();
        let ds = read_events_csv(&path).unwrap();
        assert_eq!(ds.sequences.len(), 1);
        assert_eq!(ds.sequences[0].len(), 2);
        assert_eq!(ds.sequences[0].events[0].timestamp, 100);
        assert_eq!(ds.sequences[0].events[1].timestamp, 200);
        assert_eq!(ds.n_clients, 6);
    }

    #[test]
    fn empty_file_with_header_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.csv");
        std::fs::write(&path, "client_id,item_id,timestamp\n").unwrap();
        let ds = read_events_csv(&path).unwrap();
        assert_eq!(ds.sequences.len(), 0);
        assert_eq!(ds.n_clients, 0);
        assert_eq!(ds.n_items, 0);
    }

    #[test]
    fn out_of_order_timestamps_match_oracle_sort() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.csv");
        let mut body = String::from("client_id,item_id,timestamp\n");
        let stamps = [50i64, 10, 40, 10, 30];
        for (i, t) in stamps.iter().enumerate() {
            body.push_str(&format!("0,{},{}\n", i, t));
        }
        std::fs::write(&path, body).unwrap();
        let ds = read_events_csv(&path).unwrap();
        // oracle: stable comparison sort over (timestamp, file order)
        let mut oracle: Vec<(i64, usize)> = stamps.iter().cloned().zip(0..).collect();
        oracle.sort_by_key(|&(t, _)| t);
        let got: Vec<(i64, usize)> = ds.sequences[0]
            .events
            .iter()
            .map(|e| (e.timestamp, e.item_id))
            .collect();
        assert_eq!(got, oracle);
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.csv");
        std::fs::write(&path, "client_id,item_id,timestamp\n0,0,1\n0,x,2\n").unwrap();
        match read_events_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected ParseError, got {:?}", other),
        }
    }

    #[test]
    fn wrong_arity_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.csv");
        std::fs::write(&path, "client_id,item_id,timestamp,cat_0\n0,0,1,2\n0,0,2\n").unwrap();
        assert!(matches!(read_events_csv(&path), Err(Error::Schema(_))));
    }

    #[test]
    fn pure_affinity_keeps_items_in_one_block() {
        let spec = SyntheticSpec {
            n_clients: 20,
            n_items: 4,
            k_communities: 2,
            intra_affinity: 1.0,
            events_per_client: 10.0,
            label_noise: 0.0,
            ..Default::default()
        };
        let out = generate_synthetic(&spec).unwrap();
        for seq in &out.dataset.sequences {
            let community = out.communities[seq.client_id];
            let (lo, hi) = spec.block_bounds(community);
            for e in &seq.events {
                assert!(e.item_id >= lo && e.item_id < hi);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec::default();
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.labels, b.labels);
        // byte-identical files too
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        write_events_csv(&a.dataset, &p1).unwrap();
        write_events_csv(&b.dataset, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn timestamps_strictly_increase() {
        let out = generate_synthetic(&SyntheticSpec::default()).unwrap();
        for seq in &out.dataset.sequences {
            for w in seq.events.windows(2) {
                assert!(w[0].timestamp < w[1].timestamp);
            }
        }
    }

    #[test]
    fn intra_block_fraction_matches_expectation() {
        let spec = SyntheticSpec {
            n_clients: 200,
            n_items: 40,
            k_communities: 4,
            intra_affinity: 0.9,
            events_per_client: 60.0,
            label_noise: 0.0,
            seed: 11,
            ..Default::default()
        };
        let out = generate_synthetic(&spec).unwrap();
        let mut intra = 0usize;
        let mut total = 0usize;
        for seq in &out.dataset.sequences {
            let (lo, hi) = spec.block_bounds(out.communities[seq.client_id]);
            for e in &seq.events {
                total += 1;
                if e.item_id >= lo && e.item_id < hi {
                    intra += 1;
                }
            }
        }
        let block_share = 1.0 / spec.k_communities as f64;
        let expected = 0.9 + 0.1 * block_share;
        let got = intra as f64 / total as f64;
        assert!((got - expected).abs() < 0.05, "got {} expected {}", got, expected);
    }

    #[test]
    fn too_large_k_is_spec_error() {
        let spec = SyntheticSpec { n_items: 3, k_communities: 5, ..Default::default() };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Spec(_))));
    }

    fn seq_of_len(n: usize) -> ClientSequence {
        ClientSequence {
            client_id: 1,
            events: (0..n)
                .map(|i| EventRecord {
                    client_id: 1,
                    item_id: i,
                    timestamp: i as i64,
                    cat_attrs: vec![],
                    num_attrs: vec![],
                })
                .collect(),
        }
    }

    #[test]
    fn forced_lengths_give_full_sequence() {
        let mut rng = rng_stream(0, "t");
        let seq = seq_of_len(5);
        let slices = sample_slices(&seq, 2, 5, 5, &mut rng).unwrap();
        for s in &slices {
            assert_eq!(s.start, 0);
            assert_eq!(s.events, seq.events);
        }
    }

    #[test]
    fn degenerate_single_event_sequence() {
        let mut rng = rng_stream(0, "t");
        let seq = seq_of_len(1);
        let slices = sample_slices(&seq, 2, 1, 4, &mut rng).unwrap();
        for s in &slices {
            assert_eq!(s.len(), 1);
            assert_eq!(s.events[0], seq.events[0]);
        }
    }

    #[test]
    fn short_sequence_signals_skip() {
        let mut rng = rng_stream(0, "t");
        let seq = seq_of_len(2);
        assert_eq!(sample_slices(&seq, 2, 3, 8, &mut rng), Err(SkipClient));
    }

    #[test]
    fn slice_length_histogram_uniform_chi_square() {
        // len=10, L in [3,7]: 5 equally likely lengths. 10^4 draws, dof=4,
        // chi-square critical value at alpha=0.01 is 13.2767.
        let mut rng = rng_stream(42, "chi2");
        let seq = seq_of_len(10);
        let mut counts = [0usize; 5];
        let draws = 10_000;
        for _ in 0..draws / 2 {
            for s in sample_slices(&seq, 2, 3, 7, &mut rng).unwrap() {
                counts[s.len() - 3] += 1;
            }
        }
        let expected = draws as f64 / 5.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 13.2767, "chi2 = {} counts {:?}", chi2, counts);
    }

    #[test]
    fn label_noise_degrades_mutual_information() {
        fn mutual_information(xs: &[usize], ys: &[usize]) -> f64 {
            let n = xs.len() as f64;
            let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
            let mut px: BTreeMap<usize, f64> = BTreeMap::new();
            let mut py: BTreeMap<usize, f64> = BTreeMap::new();
            for (&x, &y) in xs.iter().zip(ys) {
                *joint.entry((x, y)).or_default() += 1.0;
                *px.entry(x).or_default() += 1.0;
                *py.entry(y).or_default() += 1.0;
            }
            joint
                .iter()
                .map(|(&(x, y), &c)| {
                    let p = c / n;
                    p * (p / (px[&x] / n * py[&y] / n)).ln()
                })
                .sum()
        }

        let noise_levels = [0.0, 0.2, 0.4];
        let mut avg = [0.0f64; 3];
        for seed in 0..5 {
            for (i, &noise) in noise_levels.iter().enumerate() {
                let spec = SyntheticSpec {
                    label_noise: noise,
                    seed: 100 + seed,
                    n_clients: 300,
                    ..Default::default()
                };
                let out = generate_synthetic(&spec).unwrap();
                let labels: Vec<usize> = (0..spec.n_clients)
                    .map(|c| out.labels.by_client[&c])
                    .collect();
                avg[i] += mutual_information(&out.communities, &labels) / 5.0;
            }
        }
        assert!(avg[0] > avg[1] && avg[1] > avg[2], "MI not decreasing: {:?}", avg);
    }

    proptest! {
        #[test]
        fn slices_are_contiguous_and_order_preserving(
            len in 1usize..40,
            l_min in 1usize..6,
            span in 0usize..10,
            seed in 0u64..500,
        ) {
            let seq = seq_of_len(len);
            let mut rng = rng_stream(seed, "prop/slices");
            let l_max = l_min + span;
            match sample_slices(&seq, 2, l_min, l_max, &mut rng) {
                Ok(slices) => {
                    for s in slices {
                        prop_assert!(s.len() >= l_min && s.len() <= l_max.min(len));
                        prop_assert_eq!(&seq.events[s.start..s.start + s.len()], &s.events[..]);
                    }
                }
                Err(SkipClient) => prop_assert!(len < l_min),
            }
        }
    }
}
