//! Event-log loading, seeded synthetic datasets, sessionization and the
//! chronological train/test split.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type ItemId = String;
pub type UserId = String;

pub const DEFAULT_GAP_SECONDS: i64 = 1800;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    View,
    AddToCart,
    Purchase,
    Rating,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::View => "view",
            EventKind::AddToCart => "add_to_cart",
            EventKind::Purchase => "purchase",
            EventKind::Rating => "rating",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub event_kind: EventKind,
    /// Star rating; present iff `event_kind` is `Rating`.
    pub value: Option<f64>,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: ItemId,
    pub category: String,
    /// `None` marks a missing value; cleaning imputes them.
    pub numeric_features: Vec<Option<f64>>,
    pub text_fields: Vec<String>,
}

/// Ordered interactions of one user without an inactivity gap.
///
/// `kinds` and `timestamps` run parallel to `items`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session<I = ItemId> {
    pub session_id: String,
    pub user_id: UserId,
    pub items: Vec<I>,
    pub kinds: Vec<EventKind>,
    pub timestamps: Vec<i64>,
    pub start_ts: i64,
    pub end_ts: i64,
}

impl<I> Session<I> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Same session with items mapped through `f`.
    pub fn map_items<J>(&self, f: impl FnMut(&I) -> J) -> Session<J> {
        Session {
            session_id: self.session_id.clone(),
            user_id: self.user_id.clone(),
            items: self.items.iter().map(f).collect(),
            kinds: self.kinds.clone(),
            timestamps: self.timestamps.clone(),
            start_ts: self.start_ts,
            end_ts: self.end_ts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset<I = ItemId> {
    pub train: Vec<Session<I>>,
    pub test: Vec<Session<I>>,
    pub split_ratio: f64,
}

/// Column mapping for an event CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSchema {
    pub user: String,
    pub item: String,
    /// Event-kind column; when absent every row gets `default_kind`.
    pub kind: Option<String>,
    pub timestamp: String,
    pub value: Option<String>,
    /// Raw timestamps are divided by this (1000 for millisecond logs).
    #[serde(default = "one")]
    pub timestamp_divisor: i64,
    /// Raw kind label → event kind.
    pub kind_map: BTreeMap<String, EventKind>,
    #[serde(default = "default_kind")]
    pub default_kind: EventKind,
}

fn one() -> i64 {
    1
}

fn default_kind() -> EventKind {
    EventKind::View
}

impl Default for EventSchema {
    fn default() -> Self {
        let kind_map = [
            ("view", EventKind::View),
            ("add_to_cart", EventKind::AddToCart),
            ("purchase", EventKind::Purchase),
            ("rating", EventKind::Rating),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        EventSchema {
            user: "user_id".into(),
            item: "item_id".into(),
            kind: Some("event_kind".into()),
            timestamp: "timestamp".into(),
            value: Some("value".into()),
            timestamp_divisor: 1,
            kind_map,
            default_kind: EventKind::View,
        }
    }
}

impl EventSchema {
    /// Retail Rocket `events.csv`: `timestamp,visitorid,event,itemid,transactionid`, millisecond stamps.
    pub fn retail_rocket() -> Self {
        let kind_map = [
            ("view", EventKind::View),
            ("addtocart", EventKind::AddToCart),
            ("transaction", EventKind::Purchase),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        EventSchema {
            user: "visitorid".into(),
            item: "itemid".into(),
            kind: Some("event".into()),
            timestamp: "timestamp".into(),
            value: None,
            timestamp_divisor: 1000,
            kind_map,
            default_kind: EventKind::View,
        }
    }

    /// Rating logs shaped like the Netflix Prize export: `user,item,rating,timestamp`.
    pub fn ratings(user: &str, item: &str, rating: &str, timestamp: &str) -> Self {
        EventSchema {
            user: user.into(),
            item: item.into(),
            kind: None,
            timestamp: timestamp.into(),
            value: Some(rating.into()),
            timestamp_divisor: 1,
            kind_map: BTreeMap::new(),
            default_kind: EventKind::Rating,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MalformedRow {
    /// Zero-based data row index (header excluded).
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadedEvents {
    pub events: Vec<InteractionEvent>,
    pub malformed: Vec<MalformedRow>,
}

impl LoadedEvents {
    pub fn skip_count(&self) -> usize {
        self.malformed.len()
    }
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize, IngestError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
}

pub fn load_events(path: &Path, schema: &EventSchema) -> Result<LoadedEvents, IngestError> {
    let file = fs::File::open(path)?;
    read_events(file, schema)
}

/// Parses an event CSV. Rows that fail validation are skipped and recorded.
pub fn read_events<R: std::io::Read>(reader: R, schema: &EventSchema) -> Result<LoadedEvents, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let user_col = column(&headers, &schema.user)?;
    let item_col = column(&headers, &schema.item)?;
    let ts_col = column(&headers, &schema.timestamp)?;
    let kind_col = schema.kind.as_deref().map(|k| column(&headers, k)).transpose()?;
    let value_col = match schema.value.as_deref() {
        Some(v) if schema.kind.is_none() => Some(column(&headers, v)?),
        Some(v) => headers.iter().position(|h| h.trim() == v),
        None => None,
    };
    if schema.timestamp_divisor <= 0 {
        return Err(IngestError::InvalidConfig("timestamp_divisor must be positive".into()));
    }

    let mut out = LoadedEvents::default();
    for (row, record) in rdr.records().enumerate() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                out.malformed.push(MalformedRow { row, reason: e.to_string() });
                continue;
            }
        };
        match parse_event(&record, schema, user_col, item_col, ts_col, kind_col, value_col) {
            Ok(ev) => out.events.push(ev),
            Err(reason) => out.malformed.push(MalformedRow { row, reason }),
        }
    }
    Ok(out)
}

fn parse_event(
    record: &csv::StringRecord,
    schema: &EventSchema,
    user_col: usize,
    item_col: usize,
    ts_col: usize,
    kind_col: Option<usize>,
    value_col: Option<usize>,
) -> Result<InteractionEvent, String> {
    let field = |i: usize| record.get(i).map(str::trim).ok_or_else(|| format!("missing field {i}"));
    let raw_ts = field(ts_col)?;
    let timestamp = raw_ts
        .parse::<i64>()
        .map_err(|_| format!("timestamp {raw_ts:?} is not an integer"))?
        / schema.timestamp_divisor;
    if timestamp < 0 {
        return Err(format!("negative timestamp {timestamp}"));
    }
    let event_kind = match kind_col {
        Some(c) => {
            let raw = field(c)?;
            *schema
                .kind_map
                .get(raw)
                .or_else(|| schema.kind_map.get(&raw.to_lowercase()))
                .ok_or_else(|| format!("unknown event kind {raw:?}"))?
        }
        None => schema.default_kind,
    };
    let raw_value = value_col.map(field).transpose()?.filter(|v| !v.is_empty());
    let value = match (event_kind, raw_value) {
        (EventKind::Rating, Some(v)) => {
            let v: f64 = v.parse().map_err(|_| format!("rating {v:?} is not a number"))?;
            if !(0.5..=5.0).contains(&v) {
                return Err(format!("rating {v} outside [0.5, 5]"));
            }
            Some(v)
        }
        (EventKind::Rating, None) => return Err("rating event without a value".into()),
        (_, _) => None,
    };
    Ok(InteractionEvent {
        user_id: field(user_col)?.to_string(),
        item_id: field(item_col)?.to_string(),
        event_kind,
        value,
        timestamp,
    })
}

/// Column mapping for an item metadata CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemSchema {
    pub item: String,
    pub category: String,
    pub numeric: Vec<String>,
    pub text: Vec<String>,
}

pub fn load_items(path: &Path, schema: &ItemSchema) -> Result<Vec<ItemRecord>, IngestError> {
    read_items(fs::File::open(path)?, schema)
}

/// Empty or unparseable numeric cells become missing values.
pub fn read_items<R: std::io::Read>(reader: R, schema: &ItemSchema) -> Result<Vec<ItemRecord>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let id_col = column(&headers, &schema.item)?;
    let cat_col = column(&headers, &schema.category)?;
    let num_cols = schema.numeric.iter().map(|c| column(&headers, c)).collect::<Result<Vec<_>, _>>()?;
    let text_cols = schema.text.iter().map(|c| column(&headers, c)).collect::<Result<Vec<_>, _>>()?;
    let mut items = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let get = |i: usize| record.get(i).unwrap_or("").trim();
        items.push(ItemRecord {
            item_id: get(id_col).to_string(),
            category: get(cat_col).to_string(),
            numeric_features: num_cols.iter().map(|&c| get(c).parse::<f64>().ok().filter(|v| v.is_finite())).collect(),
            text_fields: text_cols.iter().map(|&c| get(c).to_string()).collect(),
        });
    }
    Ok(items)
}

/// Splits each user's time-ordered events into sessions at gaps longer than
/// `gap_seconds`. Consecutive repeats of an item collapse to the first, and
/// gaps are measured from the last kept event, so re-sessionizing the
/// flattened output reproduces the same partition.
pub fn sessionize(events: &[InteractionEvent], gap_seconds: i64) -> Vec<Session> {
    assert!(gap_seconds > 0, "gap_seconds must be positive");
    let mut by_user: BTreeMap<&str, Vec<&InteractionEvent>> = BTreeMap::new();
    for ev in events {
        by_user.entry(ev.user_id.as_str()).or_default().push(ev);
    }
    let mut sessions = Vec::new();
    for (user, mut evs) in by_user {
        evs.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.item_id.cmp(&b.item_id)));
        let mut current: Option<Session> = None;
        let mut counter = 0usize;
        for ev in evs {
            let split = current.as_ref().is_some_and(|s| ev.timestamp - s.end_ts > gap_seconds);
            if split {
                sessions.extend(current.take());
            }
            let s = current.get_or_insert_with(|| {
                counter += 1;
                Session {
                    session_id: format!("{user}:{}", counter - 1),
                    user_id: user.to_string(),
                    items: Vec::new(),
                    kinds: Vec::new(),
                    timestamps: Vec::new(),
                    start_ts: ev.timestamp,
                    end_ts: ev.timestamp,
                }
            });
            if s.items.last() == Some(&ev.item_id) {
                continue;
            }
            s.end_ts = ev.timestamp;
            s.items.push(ev.item_id.clone());
            s.kinds.push(ev.event_kind);
            s.timestamps.push(ev.timestamp);
        }
        sessions.extend(current);
    }
    sessions
}

/// Inverse of [`sessionize`] for its own output: one event per session item.
pub fn flatten_sessions(sessions: &[Session]) -> Vec<InteractionEvent> {
    sessions
        .iter()
        .flat_map(|s| {
            s.items.iter().zip(&s.kinds).zip(&s.timestamps).map(move |((item, &kind), &ts)| InteractionEvent {
                user_id: s.user_id.clone(),
                item_id: item.clone(),
                event_kind: kind,
                value: (kind == EventKind::Rating).then_some(3.0),
                timestamp: ts,
            })
        })
        .collect()
}

/// `ceil(ratio · n)` without floating-point overshoot (0.7 · 10 must give 7, not 8).
pub fn train_count(ratio: f64, n: usize) -> usize {
    (((ratio * n as f64) - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Orders sessions by `(start_ts, session_id)` and assigns the first
/// `ceil(ratio · N)` to train, the rest to test.
pub fn split_chronological<I: Clone>(sessions: &[Session<I>], ratio: f64) -> Result<SplitDataset<I>, IngestError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(IngestError::InvalidConfig(format!("split ratio {ratio} outside (0,1)")));
    }
    if sessions.is_empty() {
        return Err(IngestError::EmptyInput("no sessions to split".into()));
    }
    let mut ordered: Vec<&Session<I>> = sessions.iter().collect();
    ordered.sort_by(|a, b| a.start_ts.cmp(&b.start_ts).then_with(|| a.session_id.cmp(&b.session_id)));
    let n_train = train_count(ratio, ordered.len());
    let (train, test) = ordered.split_at(n_train);
    Ok(SplitDataset {
        train: train.iter().map(|s| (*s).clone()).collect(),
        test: test.iter().map(|s| (*s).clone()).collect(),
        split_ratio: ratio,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_items: usize,
    pub n_sessions: usize,
    pub n_blocks: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        let bad = |m: &str| Err(IngestError::InvalidConfig(m.to_string()));
        if self.n_blocks < 2 {
            return bad("n_blocks must be at least 2");
        }
        if self.n_items == 0 || self.n_items % self.n_blocks != 0 {
            return bad("n_items must be a positive multiple of n_blocks");
        }
        if self.n_sessions == 0 {
            return bad("n_sessions must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad("noise must lie in [0,1]");
        }
        Ok(())
    }
}

pub const SESSION_LEN_RANGE: std::ops::RangeInclusive<usize> = 2..=12;
/// Largest step of the in-block walk.
const MAX_WALK_STEP: usize = 3;
const SYNTH_EVENT_SPACING: i64 = 30;
const SYNTH_SESSION_SPACING: i64 = 4000;

pub fn synthetic_item_id(i: usize) -> ItemId {
    format!("i{i:05}")
}

/// Block (category index) of synthetic item `i`.
pub fn synthetic_block(i: usize, cfg: &SyntheticConfig) -> usize {
    i / (cfg.n_items / cfg.n_blocks)
}

/// Seeded planted-block dataset.
///
/// Items are split into `n_blocks` equal contiguous blocks, the block index
/// being the category. Each session picks a home block; each item is, with
/// probability `1 - noise`, the next position of a short random walk (steps of
/// ±1..±3, wrapping) over the home block's items, and otherwise a uniform
/// draw from the items of the other blocks. Consecutive repeats never occur.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(Vec<ItemRecord>, Vec<Session>), IngestError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let block_size = cfg.n_items / cfg.n_blocks;

    let items: Vec<ItemRecord> = (0..cfg.n_items)
        .map(|i| {
            let block = i / block_size;
            let pos = i % block_size;
            let features = vec![
                Some(block as f64 + rng.gen_range(-0.3..0.3)),
                Some(rng.gen_range(1.0f64..100.0).ln()),
                Some(pos as f64 / block_size as f64),
            ];
            ItemRecord {
                item_id: synthetic_item_id(i),
                category: format!("block_{block}"),
                numeric_features: features,
                text_fields: vec![format!("Item #{i} (Block-{block})!")],
            }
        })
        .collect();

    let n_users = (cfg.n_sessions / 4).max(1);
    let mut sessions = Vec::with_capacity(cfg.n_sessions);
    for s in 0..cfg.n_sessions {
        let home = rng.gen_range(0..cfg.n_blocks);
        let len = rng.gen_range(SESSION_LEN_RANGE);
        let mut pos = rng.gen_range(0..block_size);
        let mut walked = false;
        let mut seq: Vec<usize> = Vec::with_capacity(len);
        while seq.len() < len {
            let item = if rng.gen::<f64>() < cfg.noise {
                let other = rng.gen_range(0..cfg.n_items - block_size);
                if other >= home * block_size {
                    other + block_size
                } else {
                    other
                }
            } else {
                if walked && block_size > 1 {
                    let step = rng.gen_range(1..=MAX_WALK_STEP.min(block_size - 1));
                    pos = if rng.gen::<bool>() {
                        (pos + step) % block_size
                    } else {
                        (pos + block_size - step) % block_size
                    };
                }
                walked = true;
                home * block_size + pos
            };
            if seq.last() == Some(&item) && block_size > 1 {
                continue;
            }
            seq.push(item);
        }
        let start = s as i64 * SYNTH_SESSION_SPACING;
        let timestamps: Vec<i64> = (0..len as i64).map(|k| start + k * SYNTH_EVENT_SPACING).collect();
        sessions.push(Session {
            session_id: format!("s{s:06}"),
            user_id: format!("u{:05}", s % n_users),
            items: seq.into_iter().map(synthetic_item_id).collect(),
            kinds: vec![EventKind::View; len],
            end_ts: *timestamps.last().unwrap(),
            start_ts: start,
            timestamps,
        });
    }
    Ok((items, sessions))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticManifest {
    pub seed: u64,
    pub config: SyntheticConfig,
    pub items_file: String,
    pub sessions_file: String,
}

pub const SYNTH_ITEMS_FILE: &str = "items.csv";
pub const SYNTH_SESSIONS_FILE: &str = "sessions.csv";
pub const SYNTH_MANIFEST_FILE: &str = "manifest.json";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// Writes `items.csv`, `sessions.csv` and `manifest.json` into `dir`.
pub fn write_synthetic(dir: &Path, cfg: &SyntheticConfig, items: &[ItemRecord], sessions: &[Session]) -> Result<(), IngestError> {
    fs::create_dir_all(dir)?;
    let n_feat = items.first().map_or(0, |i| i.numeric_features.len());
    let mut w = csv::Writer::from_path(dir.join(SYNTH_ITEMS_FILE))?;
    let mut header = vec!["item_id".to_string(), "category".to_string()];
    header.extend((0..n_feat).map(|k| format!("f{k}")));
    header.push("title".into());
    w.write_record(&header)?;
    for it in items {
        let mut row = vec![it.item_id.clone(), it.category.clone()];
        row.extend(it.numeric_features.iter().map(|v| fmt_opt(*v)));
        row.push(it.text_fields.join(" "));
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(SYNTH_SESSIONS_FILE))?;
    w.write_record(["session_id", "user_id", "start_ts", "end_ts", "items", "timestamps"])?;
    for s in sessions {
        let ts: Vec<String> = s.timestamps.iter().map(i64::to_string).collect();
        w.write_record([
            s.session_id.clone(),
            s.user_id.clone(),
            s.start_ts.to_string(),
            s.end_ts.to_string(),
            s.items.join(" "),
            ts.join(" "),
        ])?;
    }
    w.flush()?;

    let manifest = SyntheticManifest {
        seed: cfg.seed,
        config: cfg.clone(),
        items_file: SYNTH_ITEMS_FILE.into(),
        sessions_file: SYNTH_SESSIONS_FILE.into(),
    };
    fs::write(dir.join(SYNTH_MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

/// Reads a dataset produced by [`write_synthetic`].
pub fn read_synthetic(dir: &Path) -> Result<(SyntheticManifest, Vec<ItemRecord>, Vec<Session>), IngestError> {
    let manifest: SyntheticManifest = serde_json::from_str(&fs::read_to_string(dir.join(SYNTH_MANIFEST_FILE))?)?;
    let mut rdr = csv::Reader::from_path(dir.join(&manifest.items_file))?;
    let headers = rdr.headers()?.clone();
    let numeric: Vec<String> = headers.iter().filter(|h| h.starts_with('f')).map(str::to_string).collect();
    drop(rdr);
    let items = load_items(
        &dir.join(&manifest.items_file),
        &ItemSchema {
            item: "item_id".into(),
            category: "category".into(),
            numeric,
            text: vec!["title".into()],
        },
    )?;

    let mut rdr = csv::Reader::from_path(dir.join(&manifest.sessions_file))?;
    let mut sessions = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<i64, IngestError> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| IngestError::InvalidConfig(format!("bad integer in sessions row {rec:?}")))
        };
        let items: Vec<ItemId> = rec.get(4).unwrap_or("").split_whitespace().map(str::to_string).collect();
        let timestamps = rec
            .get(5)
            .unwrap_or("")
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| IngestError::InvalidConfig(format!("bad timestamp {t:?}"))))
            .collect::<Result<Vec<i64>, _>>()?;
        sessions.push(Session {
            session_id: rec.get(0).unwrap_or("").to_string(),
            user_id: rec.get(1).unwrap_or("").to_string(),
            kinds: vec![EventKind::View; items.len()],
            items,
            timestamps,
            start_ts: num(2)?,
            end_ts: num(3)?,
        });
    }
    Ok((manifest, items, sessions))
}
