//! Undirected weighted item co-occurrence graphs.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{EventKind, Session, SplitDataset};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("malformed graph file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    /// Sessions are cut to this many items before pairs are expanded.
    pub max_session_len: usize,
    /// Per-kind multipliers; a pair contributes the product of its two kinds'. Missing kinds count 1.
    pub kind_multipliers: BTreeMap<EventKind, f64>,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig { max_session_len: 40, kind_multipliers: BTreeMap::new() }
    }
}

impl GraphConfig {
    fn multiplier(&self, k: EventKind) -> f64 {
        self.kind_multipliers.get(&k).copied().unwrap_or(1.0)
    }
}

/// Immutable co-occurrence graph. Edge keys are stored with `i < j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemGraph {
    nodes: BTreeMap<usize, usize>,
    co_counts: BTreeMap<(usize, usize), u64>,
    weights: BTreeMap<(usize, usize), f64>,
    max_count: u64,
    adjacency: BTreeMap<usize, Vec<(usize, f64)>>,
}

fn key(i: usize, j: usize) -> (usize, usize) {
    if i < j {
        (i, j)
    } else {
        (j, i)
    }
}

type KindPair = (EventKind, EventKind);

/// Distinct unordered pairs of one (truncated) session, each with the kinds of
/// the first occurrence of its endpoints.
fn session_pairs<I: Copy + Into<usize>>(s: &Session<I>, max_len: usize) -> Vec<((usize, usize), KindPair)> {
    let mut first: BTreeMap<usize, EventKind> = BTreeMap::new();
    for (pos, &it) in s.items.iter().take(max_len).enumerate() {
        let kind = s.kinds.get(pos).copied().unwrap_or(EventKind::View);
        first.entry(it.into()).or_insert(kind);
    }
    let distinct: Vec<(usize, EventKind)> = first.into_iter().collect();
    let mut out = Vec::with_capacity(distinct.len() * distinct.len().saturating_sub(1) / 2);
    for a in 0..distinct.len() {
        for b in a + 1..distinct.len() {
            let (ka, kb) = (distinct[a].1.min(distinct[b].1), distinct[a].1.max(distinct[b].1));
            out.push(((distinct[a].0, distinct[b].0), (ka, kb)));
        }
    }
    out
}

type PairCounts = BTreeMap<((usize, usize), KindPair), u64>;

fn merge(mut a: PairCounts, b: PairCounts) -> PairCounts {
    for (k, v) in b {
        *a.entry(k).or_default() += v;
    }
    a
}

impl ItemGraph {
    /// Builds the graph of `sessions`; node types come from `item_categories`.
    pub fn build(sessions: &[Session<usize>], item_categories: &[usize], config: &GraphConfig) -> ItemGraph {
        let nodes: BTreeMap<usize, usize> = sessions
            .iter()
            .flat_map(|s| s.items.iter())
            .map(|&i| (i, item_categories.get(i).copied().unwrap_or(0)))
            .collect();
        let counts: PairCounts = sessions
            .par_iter()
            .fold(PairCounts::new, |mut acc, s| {
                for p in session_pairs(s, config.max_session_len) {
                    *acc.entry(p).or_default() += 1;
                }
                acc
            })
            .reduce(PairCounts::new, merge);

        let mut co_counts: BTreeMap<(usize, usize), u64> = BTreeMap::new();
        let mut weighted: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (&(pair, (ka, kb)), &c) in &counts {
            *co_counts.entry(pair).or_default() += c;
            *weighted.entry(pair).or_default() += c as f64 * config.multiplier(ka) * config.multiplier(kb);
        }
        weighted.retain(|_, w| *w > 0.0);
        co_counts.retain(|k, _| weighted.contains_key(k));
        let max_w = weighted.values().copied().fold(0.0, f64::max);
        let weights = weighted.into_iter().map(|(k, w)| (k, w / max_w)).collect();
        let max_count = co_counts.values().copied().max().unwrap_or(0);
        ItemGraph::from_parts(nodes, co_counts, weights, max_count)
    }

    fn from_parts(
        nodes: BTreeMap<usize, usize>,
        co_counts: BTreeMap<(usize, usize), u64>,
        weights: BTreeMap<(usize, usize), f64>,
        max_count: u64,
    ) -> ItemGraph {
        let mut adjacency: BTreeMap<usize, Vec<(usize, f64)>> = nodes.keys().map(|&n| (n, Vec::new())).collect();
        for (&(i, j), &w) in &weights {
            adjacency.entry(i).or_default().push((j, w));
            adjacency.entry(j).or_default().push((i, w));
        }
        for list in adjacency.values_mut() {
            list.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        }
        ItemGraph { nodes, co_counts, weights, max_count, adjacency }
    }

    pub fn nodes(&self) -> &BTreeMap<usize, usize> {
        &self.nodes
    }

    pub fn contains(&self, i: usize) -> bool {
        self.nodes.contains_key(&i)
    }

    pub fn node_type(&self, i: usize) -> Option<usize> {
        self.nodes.get(&i).copied()
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_edges(&self) -> usize {
        self.weights.len()
    }

    pub fn max_count(&self) -> u64 {
        self.max_count
    }

    pub fn co_counts(&self) -> &BTreeMap<(usize, usize), u64> {
        &self.co_counts
    }

    pub fn co_count(&self, i: usize, j: usize) -> u64 {
        self.co_counts.get(&key(i, j)).copied().unwrap_or(0)
    }

    /// Symmetric edge weight, 0 when absent.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        self.weights.get(&key(i, j)).copied().unwrap_or(0.0)
    }

    /// Edges as `(i, j, weight)` with `i < j`, in key order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.weights.iter().map(|(&(i, j), &w)| (i, j, w))
    }

    /// All neighbours with weight ≥ `min_weight`, sorted by (−weight, index).
    pub fn neighbors(&self, i: usize, min_weight: f64) -> Result<Vec<(usize, f64)>, GraphError> {
        let list = self.adjacency.get(&i).ok_or(GraphError::UnknownNode(i))?;
        Ok(list.iter().copied().filter(|&(_, w)| w >= min_weight).collect())
    }

    /// Neighbour list without filtering; empty for unknown nodes.
    pub fn adjacency(&self, i: usize) -> &[(usize, f64)] {
        self.adjacency.get(&i).map_or(&[], Vec::as_slice)
    }

    pub fn write_ndjson<W: Write>(&self, mut out: W) -> Result<(), GraphError> {
        let header = Record::Header { n_nodes: self.n_nodes(), n_edges: self.n_edges(), max_count: self.max_count };
        writeln!(out, "{}", serde_json::to_string(&header)?)?;
        for (&id, &t) in &self.nodes {
            writeln!(out, "{}", serde_json::to_string(&Record::Node { id, r#type: t })?)?;
        }
        for (&(i, j), &weight) in &self.weights {
            let count = self.co_counts.get(&(i, j)).copied().unwrap_or(0);
            writeln!(out, "{}", serde_json::to_string(&Record::Edge { i, j, count, weight })?)?;
        }
        Ok(())
    }

    pub fn read_ndjson<R: BufRead>(input: R) -> Result<ItemGraph, GraphError> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| GraphError::Format("empty file".into()))??;
        let Record::Header { n_nodes, n_edges, max_count } = serde_json::from_str(&header)? else {
            return Err(GraphError::Format("first line is not a header".into()));
        };
        let mut nodes = BTreeMap::new();
        let mut co_counts = BTreeMap::new();
        let mut weights = BTreeMap::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line)? {
                Record::Node { id, r#type } => {
                    nodes.insert(id, r#type);
                }
                Record::Edge { i, j, count, weight } => {
                    if i >= j {
                        return Err(GraphError::Format(format!("edge ({i},{j}) not ordered")));
                    }
                    co_counts.insert((i, j), count);
                    weights.insert((i, j), weight);
                }
                Record::Header { .. } => return Err(GraphError::Format("repeated header".into())),
            }
        }
        if nodes.len() != n_nodes || weights.len() != n_edges {
            return Err(GraphError::Format("record counts disagree with header".into()));
        }
        if let Some(&(i, j)) = weights.keys().find(|(i, j)| !nodes.contains_key(i) || !nodes.contains_key(j)) {
            return Err(GraphError::Format(format!("edge ({i},{j}) references a missing node")));
        }
        Ok(ItemGraph::from_parts(nodes, co_counts, weights, max_count))
    }

    pub fn save(&self, path: &Path) -> Result<(), GraphError> {
        let mut buf = Vec::new();
        self.write_ndjson(&mut buf)?;
        crate::util::write_atomic(path, &buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ItemGraph, GraphError> {
        ItemGraph::read_ndjson(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Header { n_nodes: usize, n_edges: usize, max_count: u64 },
    Node { id: usize, r#type: usize },
    Edge { i: usize, j: usize, count: u64, weight: f64 },
}

pub fn build_graph(sessions: &[Session<usize>], item_categories: &[usize]) -> ItemGraph {
    ItemGraph::build(sessions, item_categories, &GraphConfig::default())
}

/// Training graph from the train side, testing graph from the test side.
pub fn build_split_graphs(split: &SplitDataset<usize>, item_categories: &[usize], config: &GraphConfig) -> (ItemGraph, ItemGraph) {
    let (g, g_prime) = rayon::join(
        || ItemGraph::build(&split.train, item_categories, config),
        || ItemGraph::build(&split.test, item_categories, config),
    );
    (g, g_prime)
}

/// Items that appear in `g_test` but not in `g_train`.
pub fn unseen_items(g_train: &ItemGraph, g_test: &ItemGraph) -> BTreeSet<usize> {
    g_test.nodes.keys().filter(|i| !g_train.contains(**i)).copied().collect()
}
