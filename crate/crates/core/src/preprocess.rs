//! Cleaning, text normalisation, encoding, scaling and optional PCA,
//! assembled into [`PreprocessedData`] by [`run_pipeline`].

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{self, IngestError, InteractionEvent, ItemId, ItemRecord, Session, SplitDataset};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("non-finite input at row {row}, column {col}")]
    NonFiniteInput { row: usize, col: usize },
    #[error("invalid target dimension {target} for {available} usable columns")]
    InvalidDim { target: usize, available: usize },
    #[error("no sessions survived preprocessing")]
    NoSessions,
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        FeatureMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        FeatureMatrix { rows: rows.len(), cols, data: rows.concat() }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn select_columns(&self, keep: &[usize]) -> FeatureMatrix {
        let mut out = FeatureMatrix::zeros(self.rows, keep.len());
        for i in 0..self.rows {
            for (k, &j) in keep.iter().enumerate() {
                out.set(i, k, self.get(i, j));
            }
        }
        out
    }

    fn check_finite(&self) -> Result<(), PreprocessError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(p) => Err(PreprocessError::NonFiniteInput { row: p / self.cols.max(1), col: p % self.cols.max(1) }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CleanStats {
    pub events_missing_ids: usize,
    pub duplicate_events: usize,
    pub items_missing_ids: usize,
    pub duplicate_items: usize,
    pub imputed_numeric: usize,
    pub imputed_categorical: usize,
}

/// Median of the present values; `None` when the column is entirely missing.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Per-column medians over present values (`None` for all-missing columns).
pub fn column_medians(items: &[ItemRecord]) -> Vec<Option<f64>> {
    let width = items.iter().map(|i| i.numeric_features.len()).max().unwrap_or(0);
    (0..width)
        .map(|j| {
            let present: Vec<f64> = items.iter().filter_map(|i| i.numeric_features.get(j).copied().flatten()).collect();
            median(&present)
        })
        .collect()
}

/// Fills missing numeric features with the supplied column values. Returns the number filled.
pub fn impute_numeric(items: &mut [ItemRecord], fill: &[Option<f64>]) -> usize {
    let mut filled = 0;
    for item in items {
        item.numeric_features.resize(fill.len(), None);
        for (v, f) in item.numeric_features.iter_mut().zip(fill) {
            if v.is_none() {
                *v = Some(f.unwrap_or(0.0));
                filled += 1;
            }
        }
    }
    filled
}

/// Removes events without ids, exact duplicate events and items without ids
/// or repeated ids (first kept); imputes numeric features with column medians
/// and empty categories with the modal category.
pub fn clean(events: Vec<InteractionEvent>, items: Vec<ItemRecord>) -> (Vec<InteractionEvent>, Vec<ItemRecord>, CleanStats) {
    let mut stats = CleanStats::default();

    let mut seen = HashSet::new();
    let mut kept_events = Vec::with_capacity(events.len());
    for ev in events {
        if ev.user_id.trim().is_empty() || ev.item_id.trim().is_empty() {
            stats.events_missing_ids += 1;
            continue;
        }
        let key = (ev.user_id.clone(), ev.item_id.clone(), ev.event_kind, ev.timestamp);
        if !seen.insert(key) {
            stats.duplicate_events += 1;
            continue;
        }
        kept_events.push(ev);
    }

    let mut ids = HashSet::new();
    let mut kept_items = Vec::with_capacity(items.len());
    for mut item in items {
        item.item_id = item.item_id.trim().to_string();
        item.category = item.category.trim().to_string();
        if item.item_id.is_empty() {
            stats.items_missing_ids += 1;
            continue;
        }
        if !ids.insert(item.item_id.clone()) {
            stats.duplicate_items += 1;
            continue;
        }
        kept_items.push(item);
    }

    let medians = column_medians(&kept_items);
    stats.imputed_numeric = impute_numeric(&mut kept_items, &medians);

    let mode = modal_category(&kept_items);
    for item in &mut kept_items {
        if item.category.is_empty() {
            item.category = mode.clone();
            stats.imputed_categorical += 1;
        }
    }
    (kept_events, kept_items, stats)
}

pub const UNKNOWN_CATEGORY: &str = "unknown";

/// Most frequent non-empty category, ties to the lexicographically smallest.
pub fn modal_category(items: &[ItemRecord]) -> String {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for i in items.iter().filter(|i| !i.category.is_empty()) {
        *counts.entry(i.category.as_str()).or_default() += 1;
    }
    counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
        .map_or_else(|| UNKNOWN_CATEGORY.to_string(), |(c, _)| c.to_string())
}

/// Lowercases, replaces every non-alphanumeric character with a space and
/// collapses whitespace. Unicode letters and digits are preserved.
pub fn normalize_text(s: &str) -> String {
    let mapped: String = s
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Hook for stemming / lemmatisation of tokens.
pub trait Stemmer: Send + Sync {
    fn stem(&self, token: &str) -> String;
}

/// Default: tokens pass through unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoStemmer;

impl Stemmer for NoStemmer {
    fn stem(&self, token: &str) -> String {
        token.to_string()
    }
}

pub fn tokenize(s: &str, stemmer: &dyn Stemmer) -> Vec<String> {
    normalize_text(s).split_whitespace().map(|t| stemmer.stem(t)).collect()
}

/// Label encoding: categories sorted lexicographically get 0..C-1.
pub fn encode_categoricals(items: &[ItemRecord]) -> (BTreeMap<String, usize>, Vec<usize>) {
    let cats: BTreeSet<&str> = items.iter().map(|i| i.category.as_str()).collect();
    let map: BTreeMap<String, usize> = cats.into_iter().enumerate().map(|(k, c)| (c.to_string(), k)).collect();
    let encoded = items.iter().map(|i| map[&i.category]).collect();
    (map, encoded)
}

/// Per-column min/max fitted on one set of rows and applied to another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(m: &FeatureMatrix, rows: impl IntoIterator<Item = usize>) -> Result<Self, PreprocessError> {
        m.check_finite()?;
        let mut min = vec![f64::INFINITY; m.cols];
        let mut max = vec![f64::NEG_INFINITY; m.cols];
        let mut any = false;
        for i in rows {
            any = true;
            for j in 0..m.cols {
                min[j] = min[j].min(m.get(i, j));
                max[j] = max[j].max(m.get(i, j));
            }
        }
        if !any {
            min.iter_mut().for_each(|v| *v = 0.0);
            max.iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(MinMaxScaler { min, max })
    }

    /// Maps into [0,1], clamping rows outside the fitted range. Constant columns map to 0.
    pub fn transform(&self, m: &FeatureMatrix) -> Result<FeatureMatrix, PreprocessError> {
        m.check_finite()?;
        let mut out = m.clone();
        for i in 0..m.rows {
            for j in 0..m.cols {
                let span = self.max[j] - self.min[j];
                let v = if span > 0.0 { ((m.get(i, j) - self.min[j]) / span).clamp(0.0, 1.0) } else { 0.0 };
                out.set(i, j, v);
            }
        }
        Ok(out)
    }
}

/// Per-column min-max to [0,1]; constant columns become 0.
pub fn scale_numeric(m: &FeatureMatrix) -> Result<FeatureMatrix, PreprocessError> {
    MinMaxScaler::fit(m, 0..m.rows)?.transform(m)
}

/// Indices of columns with non-zero variance.
pub fn variance_filter(m: &FeatureMatrix) -> Vec<usize> {
    (0..m.cols)
        .filter(|&j| {
            let col = m.column(j);
            col.iter().any(|&v| v != col[0])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    /// Input columns that survived the variance filter.
    pub kept_columns: Vec<usize>,
    pub mean: Vec<f64>,
    /// Unit principal directions, one per output column, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    pub projected: FeatureMatrix,
}

const POWER_MAX_ITERS: usize = 20_000;
const POWER_TOL: f64 = 1e-14;

/// Drops zero-variance columns, then projects the centred data onto its top
/// `target_dim` principal directions found by power iteration with deflation.
pub fn reduce_dimensions(m: &FeatureMatrix, target_dim: usize) -> Result<Reduction, PreprocessError> {
    m.check_finite()?;
    let kept_columns = variance_filter(m);
    let d = kept_columns.len();
    if target_dim == 0 || target_dim > d {
        return Err(PreprocessError::InvalidDim { target: target_dim, available: d });
    }
    let x = m.select_columns(&kept_columns);
    let n = x.rows;
    let mean: Vec<f64> = (0..d).map(|j| x.column(j).iter().sum::<f64>() / n as f64).collect();
    let mut centered = x.clone();
    for i in 0..n {
        for j in 0..d {
            centered.set(i, j, x.get(i, j) - mean[j]);
        }
    }
    let denom = (n.max(2) - 1) as f64;
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let r = centered.row(i);
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += r[a] * r[b] / denom;
            }
        }
    }
    let total_var: f64 = (0..d).map(|a| cov[a * d + a]).sum();

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(target_dim);
    let mut eigvals = Vec::with_capacity(target_dim);
    let mut deflated = cov.clone();
    for c in 0..target_dim {
        let mut v: Vec<f64> = (0..d).map(|j| 1.0 + 0.1 * ((j + 1) * (c + 3)) as f64 % 0.7).collect();
        orthonormalize(&mut v, &components);
        for _ in 0..POWER_MAX_ITERS {
            let mut w = matvec(&deflated, &v, d);
            orthonormalize(&mut w, &components);
            if w.iter().all(|x| *x == 0.0) {
                break;
            }
            let delta: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = w;
            if delta < POWER_TOL {
                break;
            }
        }
        // deterministic sign: largest-magnitude coordinate positive
        let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let cv = matvec(&cov, &v, d);
        let lambda: f64 = cv.iter().zip(&v).map(|(a, b)| a * b).sum();
        for a in 0..d {
            for b in 0..d {
                deflated[a * d + b] -= lambda * v[a] * v[b];
            }
        }
        eigvals.push(lambda.max(0.0));
        components.push(v);
    }

    let mut projected = FeatureMatrix::zeros(n, target_dim);
    for i in 0..n {
        for (k, comp) in components.iter().enumerate() {
            projected.set(i, k, centered.row(i).iter().zip(comp).map(|(a, b)| a * b).sum());
        }
    }
    let explained_variance_ratio = eigvals.iter().map(|l| if total_var > 0.0 { l / total_var } else { 0.0 }).collect();
    Ok(Reduction { kept_columns, mean, components, explained_variance: eigvals, explained_variance_ratio, projected })
}

fn matvec(a: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    (0..d).map(|r| a[r * d..(r + 1) * d].iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

/// Gram-Schmidt against `basis`, then normalise (left as zeros if degenerate).
fn orthonormalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-300 {
        v.iter_mut().for_each(|x| *x /= norm);
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub gap_seconds: i64,
    pub split_ratio: f64,
    /// Principal components to keep; `None` skips the projection.
    pub reduction_target: Option<usize>,
    /// Categoricals with at most this many levels are also one-hot encoded into the features.
    pub one_hot_max_cardinality: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            gap_seconds: ingest::DEFAULT_GAP_SECONDS,
            split_ratio: 0.7,
            reduction_target: None,
            one_hot_max_cardinality: 16,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub input_events: usize,
    pub input_items: usize,
    pub clean: CleanStats,
    pub items_added_from_events: usize,
    pub vocabulary_size: usize,
    pub one_hot_columns: usize,
    pub columns_dropped: Vec<String>,
    pub explained_variance_ratio: Vec<f64>,
    pub n_items: usize,
    pub n_categories: usize,
    pub n_sessions: usize,
    pub n_train_sessions: usize,
    pub n_test_sessions: usize,
    pub scaler_fit_rows: usize,
}

/// Output of the preprocessing pipeline; items are indexed `0..n_items`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessedData {
    /// Catalog in index order, text fields normalised.
    pub items: Vec<ItemRecord>,
    pub item_categories: Vec<usize>,
    pub item_index_map: BTreeMap<ItemId, usize>,
    pub category_index_map: BTreeMap<String, usize>,
    pub sessions: Vec<Session<usize>>,
    pub split: SplitDataset<usize>,
    pub feature_names: Vec<String>,
    pub feature_matrix: FeatureMatrix,
}

impl PreprocessedData {
    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_categories(&self) -> usize {
        self.category_index_map.len()
    }

    /// Items that occur in at least one training session.
    pub fn train_items(&self) -> BTreeSet<usize> {
        self.split.train.iter().flat_map(|s| s.items.iter().copied()).collect()
    }
}

/// Runs cleaning → text normalisation → encoding → sessionize/split →
/// scaling (fitted on train items) → feature selection → optional PCA.
pub fn run_pipeline(
    events: Vec<InteractionEvent>,
    items: Vec<ItemRecord>,
    config: &PipelineConfig,
    stemmer: &dyn Stemmer,
) -> Result<(PreprocessedData, PipelineReport), PreprocessError> {
    let mut report = PipelineReport { input_events: events.len(), input_items: items.len(), ..Default::default() };
    let (events, mut items, clean_stats) = clean(events, items);
    report.clean = clean_stats;

    // event items missing from the catalog join it with imputed attributes
    let width = items.iter().map(|i| i.numeric_features.len()).max().unwrap_or(0);
    let known: HashSet<ItemId> = items.iter().map(|i| i.item_id.clone()).collect();
    let mut extra: BTreeSet<&str> = BTreeSet::new();
    for ev in &events {
        if !known.contains(&ev.item_id) {
            extra.insert(ev.item_id.as_str());
        }
    }
    if !extra.is_empty() {
        let fill = column_medians(&items);
        let mode = modal_category(&items);
        report.items_added_from_events = extra.len();
        items.extend(extra.into_iter().map(|id| ItemRecord {
            item_id: id.to_string(),
            category: mode.clone(),
            numeric_features: fill.iter().map(|f| Some(f.unwrap_or(0.0))).collect::<Vec<_>>()[..width].to_vec(),
            text_fields: vec![],
        }));
    }
    items.sort_by(|a, b| a.item_id.cmp(&b.item_id));

    let mut vocab = BTreeSet::new();
    for item in &mut items {
        for t in &mut item.text_fields {
            *t = normalize_text(t);
            vocab.extend(tokenize(t, stemmer));
        }
    }
    report.vocabulary_size = vocab.len();

    let (category_index_map, item_categories) = encode_categoricals(&items);
    let item_index_map: BTreeMap<ItemId, usize> = items.iter().enumerate().map(|(k, i)| (i.item_id.clone(), k)).collect();

    let raw_sessions = ingest::sessionize(&events, config.gap_seconds);
    if raw_sessions.is_empty() {
        return Err(PreprocessError::NoSessions);
    }
    let sessions: Vec<Session<usize>> = raw_sessions.iter().map(|s| s.map_items(|id| item_index_map[id])).collect();
    let split = ingest::split_chronological(&sessions, config.split_ratio)?;

    // numeric block + optional one-hot block
    let numeric_rows: Vec<Vec<f64>> = items.iter().map(|i| i.numeric_features.iter().map(|v| v.unwrap_or(0.0)).collect()).collect();
    let numeric = if width == 0 { FeatureMatrix::zeros(items.len(), 0) } else { FeatureMatrix::from_rows(&numeric_rows) };
    let mut names: Vec<String> = (0..width).map(|j| format!("num_{j}")).collect();

    let train_items: BTreeSet<usize> = split.train.iter().flat_map(|s| s.items.iter().copied()).collect();
    let fit_rows: Vec<usize> = if train_items.is_empty() { (0..items.len()).collect() } else { train_items.iter().copied().collect() };
    report.scaler_fit_rows = fit_rows.len();
    let scaled = MinMaxScaler::fit(&numeric, fit_rows.iter().copied())?.transform(&numeric)?;

    let n_cat = category_index_map.len();
    let one_hot = n_cat <= config.one_hot_max_cardinality;
    let total_cols = width + if one_hot { n_cat } else { 0 };
    let mut features = FeatureMatrix::zeros(items.len(), total_cols);
    for i in 0..items.len() {
        for j in 0..width {
            features.set(i, j, scaled.get(i, j));
        }
        if one_hot {
            features.set(i, width + item_categories[i], 1.0);
        }
    }
    if one_hot {
        report.one_hot_columns = n_cat;
        names.extend(category_index_map.keys().map(|c| format!("cat={c}")));
    }

    let keep = variance_filter(&features);
    report.columns_dropped = (0..total_cols).filter(|j| !keep.contains(j)).map(|j| names[j].clone()).collect();
    let mut feature_matrix = features.select_columns(&keep);
    let mut feature_names: Vec<String> = keep.iter().map(|&j| names[j].clone()).collect();

    if let Some(target) = config.reduction_target {
        let red = reduce_dimensions(&feature_matrix, target)?;
        report.explained_variance_ratio = red.explained_variance_ratio.clone();
        feature_matrix = MinMaxScaler::fit(&red.projected, fit_rows.iter().copied())?.transform(&red.projected)?;
        feature_names = (0..target).map(|k| format!("pc_{k}")).collect();
    }

    report.n_items = items.len();
    report.n_categories = n_cat;
    report.n_sessions = sessions.len();
    report.n_train_sessions = split.train.len();
    report.n_test_sessions = split.test.len();

    Ok((
        PreprocessedData {
            items,
            item_categories,
            item_index_map,
            category_index_map,
            sessions,
            split,
            feature_names,
            feature_matrix,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{flatten_sessions, generate_synthetic, EventKind, SyntheticConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn item(id: &str, cat: &str, f: Vec<Option<f64>>) -> ItemRecord {
        ItemRecord { item_id: id.into(), category: cat.into(), numeric_features: f, text_fields: vec![] }
    }

    fn ev(u: &str, i: &str, ts: i64) -> InteractionEvent {
        InteractionEvent { user_id: u.into(), item_id: i.into(), event_kind: EventKind::View, value: None, timestamp: ts }
    }

    #[test]
    fn duplicate_events_collapse_to_one() {
        let evs = vec![ev("u", "a", 1), ev("u", "a", 1), ev("u", "a", 1), ev("", "a", 2), ev("u", "", 3)];
        let (out, _, stats) = clean(evs, vec![]);
        assert_eq!(out.len(), 1);
        assert_eq!(stats.duplicate_events, 2);
        assert_eq!(stats.events_missing_ids, 2);
    }

    #[test]
    fn median_imputation_fills_missing_numeric() {
        let mut items = vec![item("x", "c", vec![Some(1.0), None, Some(3.0)])];
        impute_numeric(&mut items, &[Some(2.0), Some(5.0), Some(4.0)]);
        assert_eq!(items[0].numeric_features, vec![Some(1.0), Some(5.0), Some(3.0)]);

        let items = vec![
            item("a", "c", vec![Some(1.0), None]),
            item("b", "", vec![Some(3.0), None]),
            item("c", "c", vec![None, None]),
            item("d", "z", vec![Some(10.0), None]),
        ];
        let (_, cleaned, stats) = clean(vec![], items);
        assert_eq!(cleaned[2].numeric_features[0], Some(3.0));
        assert_eq!(cleaned[1].category, "c");
        assert_eq!(stats.imputed_numeric, 5);
        assert_eq!(stats.imputed_categorical, 1);
    }

    #[test]
    fn dedup_matches_hash_set_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut evs: Vec<InteractionEvent> = (0..950)
            .map(|_| ev(&format!("u{}", rng.gen_range(0..20)), &format!("i{}", rng.gen_range(0..40)), rng.gen_range(0..500)))
            .collect();
        for _ in 0..50 {
            let k = rng.gen_range(0..evs.len());
            evs.push(evs[k].clone());
        }
        let oracle: HashSet<String> = evs.iter().map(|e| format!("{}|{}|{:?}|{}", e.user_id, e.item_id, e.event_kind, e.timestamp)).collect();
        let (out, _, _) = clean(evs, vec![]);
        assert_eq!(out.len(), oracle.len());
    }

    #[test]
    fn text_normalisation_examples() {
        assert_eq!(normalize_text("Blu-Ray  PLAYER!"), "blu ray player");
        assert_eq!(normalize_text(""), "");
        assert_eq!(normalize_text("  Café+2024 "), "café 2024");
        assert_eq!(tokenize("Blu-Ray  PLAYER!", &NoStemmer), vec!["blu", "ray", "player"]);
    }

    struct Truncate3;
    impl Stemmer for Truncate3 {
        fn stem(&self, t: &str) -> String {
            t.chars().take(3).collect()
        }
    }

    #[test]
    fn stemmer_hook_is_applied() {
        assert_eq!(tokenize("Players playing", &Truncate3), vec!["pla", "pla"]);
    }

    proptest! {
        #[test]
        fn normalize_text_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once);
        }
    }

    #[test]
    fn label_encoding_sorts_categories() {
        let items = vec![item("1", "b", vec![]), item("2", "a", vec![]), item("3", "c", vec![]), item("4", "a", vec![])];
        let (map, enc) = encode_categoricals(&items);
        assert_eq!(map, BTreeMap::from([("a".into(), 0), ("b".into(), 1), ("c".into(), 2)]));
        assert_eq!(enc, vec![1, 0, 2, 0]);
        let (single, _) = encode_categoricals(&[item("1", "only", vec![])]);
        assert_eq!(single["only"], 0);
    }

    #[test]
    fn label_encoding_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let items: Vec<ItemRecord> = (0..300).map(|i| item(&i.to_string(), &format!("cat{}", rng.gen_range(0..50)), vec![])).collect();
        let (map, enc) = encode_categoricals(&items);
        let mut sorted: Vec<String> = items.iter().map(|i| i.category.clone()).collect();
        sorted.sort();
        sorted.dedup();
        assert_eq!(map.len(), sorted.len());
        for (k, c) in sorted.iter().enumerate() {
            assert_eq!(map[c], k);
        }
        for (it, e) in items.iter().zip(enc) {
            assert_eq!(sorted[e], it.category);
        }
    }

    #[test]
    fn min_max_scaling() {
        let m = FeatureMatrix::from_rows(&[vec![2.0, 7.0], vec![4.0, 7.0], vec![6.0, 7.0]]);
        let s = scale_numeric(&m).unwrap();
        assert_eq!(s.column(0), vec![0.0, 0.5, 1.0]);
        assert_eq!(s.column(1), vec![0.0, 0.0, 0.0]);
        let bad = FeatureMatrix { rows: 1, cols: 1, data: vec![f64::NAN] };
        assert!(matches!(scale_numeric(&bad), Err(PreprocessError::NonFiniteInput { .. })));
    }

    #[test]
    fn scaled_random_columns_span_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..100).map(|_| (0..8).map(|_| rng.gen_range(-50.0..50.0)).collect()).collect();
        let s = scale_numeric(&FeatureMatrix::from_rows(&rows)).unwrap();
        for j in 0..8 {
            let col = s.column(j);
            let (mn, mx) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            assert_eq!((mn, mx), (0.0, 1.0));
        }
    }

    fn random_matrix(n: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // correlated columns give a spread spectrum
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let base: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (0..d).map(|j| base[j] * (j + 1) as f64 + 0.5 * base[(j + 1) % d]).collect()
            })
            .collect();
        FeatureMatrix::from_rows(&rows)
    }

    #[test]
    fn full_rank_reduction_reconstructs_centered_data() {
        let m = random_matrix(40, 5, 4);
        let red = reduce_dimensions(&m, 5).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..m.rows {
            for j in 0..5 {
                let centered = m.get(i, j) - red.mean[j];
                let recon: f64 = (0..5).map(|k| red.projected.get(i, k) * red.components[k][j]).sum();
                num += (centered - recon).powi(2);
                den += centered.powi(2);
            }
        }
        assert!((num / den).sqrt() < 1e-8);
    }

    #[test]
    fn rank_one_matrix_has_one_dominant_component() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| { let t = i as f64 * 0.3 - 2.0; vec![t, -2.0 * t, 0.5 * t] }).collect();
        let red = reduce_dimensions(&FeatureMatrix::from_rows(&rows), 1).unwrap();
        assert!(red.explained_variance_ratio[0] >= 0.999);
    }

    #[test]
    fn projection_matches_dense_eigen_oracle() {
        let m = random_matrix(50, 6, 5);
        let red = reduce_dimensions(&m, 3).unwrap();
        let n = m.rows as f64;
        let mean: Vec<f64> = (0..6).map(|j| m.column(j).iter().sum::<f64>() / n).collect();
        let cov = nalgebra::DMatrix::from_fn(6, 6, |a, b| {
            (0..m.rows).map(|i| (m.get(i, a) - mean[a]) * (m.get(i, b) - mean[b])).sum::<f64>() / (n - 1.0)
        });
        let eig = nalgebra::SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..6).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for (k, &e) in order.iter().take(3).enumerate() {
            let oracle: Vec<f64> = (0..6).map(|j| eig.eigenvectors[(j, e)]).collect();
            let same: f64 = oracle.iter().zip(&red.components[k]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let flipped: f64 = oracle.iter().zip(&red.components[k]).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
            assert!(same.min(flipped) < 1e-6, "component {k}: {same} / {flipped}");
            assert!((red.explained_variance[k] - eig.eigenvalues[e]).abs() < 1e-8);
        }
        for a in 0..3 {
            for b in 0..a {
                let c: f64 = red.components[a].iter().zip(&red.components[b]).map(|(x, y)| x * y).sum();
                assert!(c.abs() < 1e-6);
            }
        }
        let sorted = red.explained_variance.windows(2).all(|w| w[0] >= w[1]);
        assert!(sorted);
    }

    #[test]
    fn reduction_rejects_bad_dims() {
        let m = random_matrix(10, 3, 6);
        assert!(matches!(reduce_dimensions(&m, 0), Err(PreprocessError::InvalidDim { .. })));
        assert!(matches!(reduce_dimensions(&m, 4), Err(PreprocessError::InvalidDim { .. })));
    }

    fn synthetic(seed: u64, n_sessions: usize) -> (Vec<InteractionEvent>, Vec<ItemRecord>) {
        let cfg = SyntheticConfig { n_items: 40, n_sessions, n_blocks: 4, noise: 0.1, seed };
        let (items, sessions) = generate_synthetic(&cfg).unwrap();
        (flatten_sessions(&sessions), items)
    }

    #[test]
    fn pipeline_is_deterministic() {
        let run = || {
            let (e, i) = synthetic(7, 300);
            let (data, report) = run_pipeline(e, i, &PipelineConfig::default(), &NoStemmer).unwrap();
            (serde_json::to_vec(&data).unwrap(), serde_json::to_vec(&report).unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn fully_missing_column_is_dropped_and_reported() {
        let (e, mut items) = synthetic(8, 100);
        for it in &mut items {
            it.numeric_features.push(None);
        }
        let (data, report) = run_pipeline(e, items, &PipelineConfig::default(), &NoStemmer).unwrap();
        assert_eq!(report.columns_dropped, vec!["num_3".to_string()]);
        assert!(!data.feature_names.contains(&"num_3".to_string()));
    }

    #[test]
    fn pipeline_output_invariants_hold() {
        let (e, i) = synthetic(9, 1000);
        let catalog: BTreeSet<String> = i.iter().map(|x| x.item_id.clone()).collect();
        let cfg = PipelineConfig { reduction_target: Some(3), ..Default::default() };
        let (data, report) = run_pipeline(e, i, &cfg, &NoStemmer).unwrap();
        // bijection over surviving items, contiguous indices
        let keys: BTreeSet<String> = data.item_index_map.keys().cloned().collect();
        assert_eq!(keys, catalog);
        let mut idx: Vec<usize> = data.item_index_map.values().copied().collect();
        idx.sort();
        assert_eq!(idx, (0..data.n_items()).collect::<Vec<_>>());
        for (id, &k) in &data.item_index_map {
            assert_eq!(&data.items[k].item_id, id);
        }
        assert!(data.feature_matrix.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(data.items.iter().all(|it| it.numeric_features.iter().all(Option::is_some) && !it.category.is_empty()));
        assert_eq!(data.feature_matrix.cols, 3);
        assert_eq!(report.explained_variance_ratio.len(), 3);
        assert_eq!(data.split.train.len() + data.split.test.len(), data.sessions.len());
        assert_eq!(data.items[0].text_fields[0], "item 0 block 0");
    }

    #[test]
    fn events_for_unknown_items_extend_the_catalog() {
        let events = vec![ev("u", "a", 0), ev("u", "zz", 10), ev("v", "a", 0), ev("v", "b", 5)];
        let items = vec![item("a", "x", vec![Some(1.0)]), item("b", "y", vec![Some(3.0)])];
        let (data, report) = run_pipeline(events, items, &PipelineConfig { split_ratio: 0.5, ..Default::default() }, &NoStemmer).unwrap();
        assert_eq!(report.items_added_from_events, 1);
        let zz = data.item_index_map["zz"];
        assert_eq!(data.items[zz].numeric_features, vec![Some(2.0)]);
    }
}
