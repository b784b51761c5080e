//! Client-item interaction graph: construction, density, adjacency
//! features, the dense cosine-similarity index, and kNN/Jaccard machinery.
//!
//! Edge weights are `w(u,v) = c(u,v) / T(v)`, interaction count rescaled by
//! the item's total interaction count, so weights over each item's edges sum
//! to exactly 1 and hub items cannot dominate.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub client: usize,
    pub item: usize,
    /// Number of events between this client and item.
    pub count: u64,
    /// count / item's total interaction count, in (0, 1].
    pub weight: f64,
}

/// Undirected weighted bipartite graph over clients and items.
#[derive(Debug, Clone)]
pub struct BipartiteGraph {
    pub n_clients: usize,
    pub n_items: usize,
    /// Sorted by (client, item); one entry per interacting pair.
    pub edges: Vec<Edge>,
    /// Distinct-neighbor counts.
    pub client_degree: Vec<usize>,
    pub item_degree: Vec<usize>,
    /// Event totals.
    pub client_total: Vec<u64>,
    pub item_total: Vec<u64>,
    /// Edge index ranges per client (edges are client-sorted).
    client_spans: Vec<(usize, usize)>,
    /// Neighbor lists per item (client ids, ascending).
    item_neighbors: Vec<Vec<usize>>,
}

impl BipartiteGraph {
    /// One edge per interacting (client, item) pair, with event counts.
    pub fn build(dataset: &Dataset) -> Self {
        let mut counts: BTreeMap<(usize, usize), u64> = BTreeMap::new();
        for seq in &dataset.sequences {
            for e in &seq.events {
                *counts.entry((e.client_id, e.item_id)).or_default() += 1;
            }
        }
        Self::from_counts(dataset.n_clients, dataset.n_items, counts)
    }

    /// Construct directly from distinct (client, item, count) triples.
    pub fn from_pairs(
        n_clients: usize,
        n_items: usize,
        pairs: impl IntoIterator<Item = (usize, usize, u64)>,
    ) -> Result<Self> {
        let mut counts = BTreeMap::new();
        for (c, i, n) in pairs {
            if c >= n_clients || i >= n_items {
                return Err(Error::Spec(format!("edge ({}, {}) out of range", c, i)));
            }
            if n == 0 {
                return Err(Error::Spec("edge count must be >= 1".into()));
            }
            if counts.insert((c, i), n).is_some() {
                return Err(Error::Spec(format!("duplicate edge ({}, {})", c, i)));
            }
        }
        Ok(Self::from_counts(n_clients, n_items, counts))
    }

    fn from_counts(n_clients: usize, n_items: usize, counts: BTreeMap<(usize, usize), u64>) -> Self {
        let mut item_total = vec![0u64; n_items];
        let mut client_total = vec![0u64; n_clients];
        for (&(c, i), &n) in &counts {
            client_total[c] += n;
            item_total[i] += n;
        }
        let mut edges = Vec::with_capacity(counts.len());
        let mut client_degree = vec![0usize; n_clients];
        let mut item_degree = vec![0usize; n_items];
        let mut item_neighbors = vec![Vec::new(); n_items];
        for (&(client, item), &count) in &counts {
            client_degree[client] += 1;
            item_degree[item] += 1;
            item_neighbors[item].push(client);
            edges.push(Edge {
                client,
                item,
                count,
                weight: count as f64 / item_total[item] as f64,
            });
        }
        let mut client_spans = vec![(0, 0); n_clients];
        let mut start = 0;
        for (c, span) in client_spans.iter_mut().enumerate() {
            let mut end = start;
            while end < edges.len() && edges[end].client == c {
                end += 1;
            }
            *span = (start, end);
            start = end;
        }
        BipartiteGraph {
            n_clients,
            n_items,
            edges,
            client_degree,
            item_degree,
            client_total,
            item_total,
            client_spans,
            item_neighbors,
        }
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Edges of one client (its item neighborhood).
    pub fn client_edges(&self, client: usize) -> &[Edge] {
        let (s, e) = self.client_spans[client];
        &self.edges[s..e]
    }

    /// Clients adjacent to one item, ascending.
    pub fn item_clients(&self, item: usize) -> &[usize] {
        &self.item_neighbors[item]
    }

    pub fn has_edge(&self, client: usize, item: usize) -> bool {
        self.client_edges(client)
            .binary_search_by_key(&item, |e| e.item)
            .is_ok()
    }

    /// |E| / (N_cl * N_ncl), distinct-edge count.
    pub fn density(&self) -> Result<f64> {
        density_from_counts(self.n_edges() as u64, self.n_clients, self.n_items)
    }

    /// Export as `client_id,item_id,count,weight` with weights at 12
    /// significant digits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "client_id,item_id,count,weight")?;
        for e in &self.edges {
            writeln!(out, "{},{},{},{:.11e}", e.client, e.item, e.count, e.weight)?;
        }
        crate::write_atomic(path, &out)
    }
}

/// Bipartite graph density from raw counts.
pub fn density_from_counts(n_edges: u64, n_clients: usize, n_items: usize) -> Result<f64> {
    if n_clients == 0 || n_items == 0 {
        return Err(Error::Domain("density of graph with an empty node set".into()));
    }
    Ok(n_edges as f64 / (n_clients as f64 * n_items as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjacencyMode {
    Binary,
    Weighted,
}

/// First-order incidence features: per-client rows over the item catalog and
/// per-item rows over the client set.
#[derive(Debug, Clone)]
pub struct AdjacencyFeatures {
    pub mode: AdjacencyMode,
    /// [n_clients, n_items]
    pub client_rows: Tensor,
    /// [n_items, n_clients]
    pub item_rows: Tensor,
}

pub fn adjacency_features(g: &BipartiteGraph, mode: AdjacencyMode) -> AdjacencyFeatures {
    let mut client_rows = Tensor::zeros(&[g.n_clients, g.n_items]);
    let mut item_rows = Tensor::zeros(&[g.n_items, g.n_clients]);
    for e in &g.edges {
        let v = match mode {
            AdjacencyMode::Binary => 1.0,
            AdjacencyMode::Weighted => e.weight,
        };
        client_rows.data_mut()[e.client * g.n_items + e.item] = v;
        item_rows.data_mut()[e.item * g.n_clients + e.client] = v;
    }
    AdjacencyFeatures { mode, client_rows, item_rows }
}

/// Dense all-pairs cosine similarities between client feature rows, plus a
/// per-client descending similarity ranking (ties broken by smaller id).
#[derive(Debug, Clone)]
pub struct SimilarityIndex {
    /// [n, n]; zero rows are 0 against everything, including themselves.
    pub matrix: Tensor,
    /// ranking[u] lists all other clients, most similar first.
    pub ranking: Vec<Vec<usize>>,
}

impl SimilarityIndex {
    pub fn n(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn sim(&self, a: usize, b: usize) -> f64 {
        self.matrix.at(a, b)
    }
}

/// Cosine similarity between every pair of client rows of `feats`.
pub fn cosine_similarity_index(feats: &Tensor) -> Result<SimilarityIndex> {
    let n = feats.rows();
    if n < 2 {
        return Err(Error::Spec("similarity index needs at least 2 clients".into()));
    }
    let norms: Vec<f64> = (0..n)
        .map(|i| feats.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut matrix = Tensor::zeros(&[n, n]);
    for a in 0..n {
        if norms[a] == 0.0 {
            continue;
        }
        matrix.data_mut()[a * n + a] = 1.0;
        for b in a + 1..n {
            if norms[b] == 0.0 {
                continue;
            }
            let dot: f64 = feats.row(a).iter().zip(feats.row(b)).map(|(x, y)| x * y).sum();
            let s = dot / (norms[a] * norms[b]);
            matrix.data_mut()[a * n + b] = s;
            matrix.data_mut()[b * n + a] = s;
        }
    }
    let mut ranking = Vec::with_capacity(n);
    for a in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&b| b != a).collect();
        others.sort_by(|&x, &y| {
            matrix
                .at(a, y)
                .partial_cmp(&matrix.at(a, x))
                .unwrap()
                .then(x.cmp(&y))
        });
        ranking.push(others);
    }
    Ok(SimilarityIndex { matrix, ranking })
}

/// k nearest neighbors (Euclidean) of every row; self excluded, ties broken
/// by smaller id. Returned sets are sorted ascending.
pub fn knn_sets(embeddings: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = embeddings.rows();
    if k == 0 {
        return Err(Error::Domain("k must be positive".into()));
    }
    if k >= n {
        return Err(Error::Domain(format!("k = {} must be < {} points", k, n)));
    }
    let mut result = Vec::with_capacity(n);
    for a in 0..n {
        let mut dists: Vec<(f64, usize)> = (0..n)
            .filter(|&b| b != a)
            .map(|b| (crate::tensor::euclidean(embeddings.row(a), embeddings.row(b)), b))
            .collect();
        dists.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
        let mut ids: Vec<usize> = dists[..k].iter().map(|&(_, b)| b).collect();
        ids.sort_unstable();
        result.push(ids);
    }
    Ok(result)
}

/// 1 - |A∩B| / |A∪B| over id sets; errors only when both are empty.
pub fn jaccard_dissimilarity(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.is_empty() && b.is_empty() {
        return Err(Error::Domain("jaccard of two empty sets".into()));
    }
    let sa: std::collections::BTreeSet<usize> = a.iter().copied().collect();
    let sb: std::collections::BTreeSet<usize> = b.iter().copied().collect();
    let inter = sa.intersection(&sb).count() as f64;
    let union = sa.union(&sb).count() as f64;
    Ok(1.0 - inter / union)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use proptest::prelude::*;

    fn graph_from(pairs: &[(usize, usize, u64)], n_cl: usize, n_it: usize) -> BipartiteGraph {
        BipartiteGraph::from_pairs(n_cl, n_it, pairs.iter().copied()).unwrap()
    }

    #[test]
    fn weight_is_count_over_item_total() {
        // client 0 hits item 0 three times; item 0 has 10 total interactions
        let g = graph_from(&[(0, 0, 3), (1, 0, 7), (1, 1, 1)], 2, 2);
        assert!((g.edges[0].weight - 0.3).abs() < 1e-15);
        // item touched by one client once -> weight 1
        assert!((g.edges[2].weight - 1.0).abs() < 1e-15);
    }

    #[test]
    fn weights_sum_to_one_per_item() {
        let spec = SyntheticSpec { seed: 3, ..Default::default() };
        let data = generate_synthetic(&spec).unwrap();
        let g = BipartiteGraph::build(&data.dataset);
        let mut per_item = vec![0.0f64; g.n_items];
        for e in &g.edges {
            per_item[e.item] += e.weight;
        }
        for (item, &s) in per_item.iter().enumerate() {
            if g.item_total[item] > 0 {
                assert!((s - 1.0).abs() < 1e-9, "item {} sums to {}", item, s);
            }
        }
    }

    #[test]
    fn edge_counts_match_brute_force_pair_counting() {
        let spec = SyntheticSpec { n_clients: 50, seed: 9, ..Default::default() };
        let data = generate_synthetic(&spec).unwrap();
        let g = BipartiteGraph::build(&data.dataset);
        // oracle: hash-count over raw events
        let mut oracle: std::collections::HashMap<(usize, usize), u64> =
            std::collections::HashMap::new();
        for seq in &data.dataset.sequences {
            for e in &seq.events {
                *oracle.entry((e.client_id, e.item_id)).or_default() += 1;
            }
        }
        assert_eq!(g.n_edges(), oracle.len());
        for e in &g.edges {
            assert_eq!(oracle[&(e.client, e.item)], e.count);
        }
    }

    #[test]
    fn density_matches_published_regimes() {
        // (|E|, N_cl, N_ncl) pairs with known densities 0.110 and 0.205
        let d1 = density_from_counts(288_000, 14_300, 184).unwrap();
        assert!((d1 - 0.110).abs() <= 0.001, "d1 = {}", d1);
        let d2 = density_from_counts(1_970_000, 47_200, 204).unwrap();
        assert!((d2 - 0.205).abs() <= 0.001, "d2 = {}", d2);
    }

    #[test]
    fn complete_bipartite_density_is_one() {
        let pairs: Vec<(usize, usize, u64)> = (0..3)
            .flat_map(|c| (0..4).map(move |i| (c, i, 1)))
            .collect();
        let g = graph_from(&pairs, 3, 4);
        assert_eq!(g.density().unwrap(), 1.0);
    }

    #[test]
    fn empty_node_set_density_is_domain_error() {
        assert!(matches!(density_from_counts(0, 0, 5), Err(Error::Domain(_))));
    }

    #[test]
    fn binary_adjacency_rows() {
        let g = graph_from(&[(0, 1, 2), (0, 3, 1)], 2, 5);
        let feats = adjacency_features(&g, AdjacencyMode::Binary);
        assert_eq!(feats.client_rows.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0]);
        // isolated client -> zero vector
        assert_eq!(feats.client_rows.row(1), &[0.0; 5]);
    }

    #[test]
    fn weighted_adjacency_reproduces_edge_weights() {
        let spec = SyntheticSpec { n_clients: 30, seed: 4, ..Default::default() };
        let data = generate_synthetic(&spec).unwrap();
        let g = BipartiteGraph::build(&data.dataset);
        let feats = adjacency_features(&g, AdjacencyMode::Weighted);
        for e in &g.edges {
            assert_eq!(feats.client_rows.at(e.client, e.item), e.weight);
            assert_eq!(feats.item_rows.at(e.item, e.client), e.weight);
        }
        // support equals neighbor set exactly
        for c in 0..g.n_clients {
            let support: Vec<usize> = (0..g.n_items)
                .filter(|&i| feats.client_rows.at(c, i) != 0.0)
                .collect();
            let neighbors: Vec<usize> = g.client_edges(c).iter().map(|e| e.item).collect();
            assert_eq!(support, neighbors);
        }
    }

    #[test]
    fn similarity_identical_and_disjoint_rows() {
        let feats = Tensor::from_rows(&[
            vec![1.0, 2.0, 0.0],
            vec![1.0, 2.0, 0.0],
            vec![0.0, 0.0, 3.0],
        ])
        .unwrap();
        let idx = cosine_similarity_index(&feats).unwrap();
        assert!((idx.sim(0, 1) - 1.0).abs() < 1e-12);
        assert_eq!(idx.sim(0, 2), 0.0);
    }

    #[test]
    fn similarity_zero_rows_and_symmetry() {
        let feats = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 0.5]]).unwrap();
        let idx = cosine_similarity_index(&feats).unwrap();
        assert_eq!(idx.sim(0, 0), 0.0);
        assert_eq!(idx.sim(0, 1), 0.0);
        for a in 0..3 {
            for b in 0..3 {
                assert!((idx.sim(a, b) - idx.sim(b, a)).abs() < 1e-9);
                assert!(idx.sim(a, b) >= -1.0 - 1e-12 && idx.sim(a, b) <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn similarity_matches_naive_double_loop() {
        let mut rng = crate::rng_stream(17, "simtest");
        let mut feats = Tensor::normal(&mut rng, &[20, 8], 1.0);
        for v in feats.data_mut() {
            *v = v.abs();
        }
        let idx = cosine_similarity_index(&feats).unwrap();
        for a in 0..20 {
            for b in 0..20 {
                let expect = if a == b {
                    1.0
                } else {
                    crate::tensor::cosine(feats.row(a), feats.row(b))
                };
                assert!(
                    (idx.sim(a, b) - expect).abs() < 1e-12,
                    "({}, {}): {} vs {}",
                    a,
                    b,
                    idx.sim(a, b),
                    expect
                );
            }
        }
    }

    #[test]
    fn knn_collinear_points() {
        let emb = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![10.0]]).unwrap();
        let knn = knn_sets(&emb, 1).unwrap();
        assert_eq!(knn, vec![vec![1], vec![0], vec![1]]);
    }

    #[test]
    fn knn_all_others_when_k_is_n_minus_one() {
        let emb = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![5.0]]).unwrap();
        let knn = knn_sets(&emb, 3).unwrap();
        for (a, set) in knn.iter().enumerate() {
            let expect: Vec<usize> = (0..4).filter(|&b| b != a).collect();
            assert_eq!(set, &expect);
        }
    }

    #[test]
    fn knn_matches_brute_force_sort() {
        let mut rng = crate::rng_stream(5, "knn");
        let emb = Tensor::normal(&mut rng, &[50, 4], 1.0);
        let knn = knn_sets(&emb, 5).unwrap();
        for a in 0..50 {
            let mut all: Vec<(f64, usize)> = (0..50)
                .filter(|&b| b != a)
                .map(|b| (crate::tensor::euclidean(emb.row(a), emb.row(b)), b))
                .collect();
            all.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
            let mut expect: Vec<usize> = all[..5].iter().map(|&(_, b)| b).collect();
            expect.sort_unstable();
            assert_eq!(knn[a], expect);
        }
    }

    #[test]
    fn knn_zero_k_is_domain_error() {
        let emb = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(matches!(knn_sets(&emb, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn jaccard_cases() {
        assert_eq!(jaccard_dissimilarity(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(jaccard_dissimilarity(&[1, 2], &[3, 4]).unwrap(), 1.0);
        // |A∩B| = 2, |A∪B| = 8
        let a = [1, 2, 3, 4, 5];
        let b = [4, 5, 6, 7, 8];
        assert_eq!(jaccard_dissimilarity(&a, &b).unwrap(), 0.75);
        assert!(jaccard_dissimilarity(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn jaccard_is_symmetric(
            a in proptest::collection::vec(0usize..30, 1..10),
            b in proptest::collection::vec(0usize..30, 1..10),
        ) {
            let ab = jaccard_dissimilarity(&a, &b).unwrap();
            let ba = jaccard_dissimilarity(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn density_in_unit_interval(
            n_cl in 1usize..8,
            n_it in 1usize..8,
            mask in 1u64..u64::MAX,
        ) {
            let mut pairs = Vec::new();
            for c in 0..n_cl {
                for i in 0..n_it {
                    if (mask >> ((c * n_it + i) % 63)) & 1 == 1 {
                        pairs.push((c, i, 1u64));
                    }
                }
            }
            prop_assume!(!pairs.is_empty());
            let complete = pairs.len() == n_cl * n_it;
            let g = BipartiteGraph::from_pairs(n_cl, n_it, pairs).unwrap();
            let d = g.density().unwrap();
            prop_assert!(d > 0.0 && d <= 1.0);
            prop_assert_eq!(d == 1.0, complete);
        }
    }
}
