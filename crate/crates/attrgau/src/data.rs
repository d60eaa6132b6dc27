//! Dataset ingestion and preprocessing: event parsing, optional gap-based
//! session segmentation, iterated rare-item/short-session filtering,
//! temporal train/test split, sequence splitting into (prefix, target)
//! examples, contiguous item-id remapping, and a synthetic session
//! generator with planted attribute structure.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio;
use crate::error::{Error, Result};
use crate::graph::{AttributeRecords, AttributeTriple};
use crate::rng::Rng;

/// One interaction event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawEvent {
    pub session_id: u64,
    pub timestamp_ms: i64,
    pub item_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// One (prefix, next item) instance produced by sequence splitting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionExample {
    pub prefix: Vec<u32>,
    pub target: u32,
    pub origin_session: u64,
    pub split: Split,
}

/// Bijective mapping between surviving original item ids and the
/// contiguous 0..|V| space, ordered by ascending original id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemRemap {
    originals: Vec<u64>,
}

impl ItemRemap {
    fn new(mut ids: Vec<u64>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        Self { originals: ids }
    }

    pub fn len(&self) -> usize {
        self.originals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.originals.is_empty()
    }

    pub fn to_new(&self, original: u64) -> Option<u32> {
        self.originals.binary_search(&original).ok().map(|i| i as u32)
    }

    pub fn to_original(&self, new_id: u32) -> Option<u64> {
        self.originals.get(new_id as usize).copied()
    }

    pub fn originals(&self) -> &[u64] {
        &self.originals
    }
}

/// Headline counts of a preprocessed bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleStats {
    pub train_sessions: usize,
    pub test_sessions: usize,
    pub train_examples: usize,
    pub test_examples: usize,
    pub num_items: usize,
    pub num_parents: usize,
    pub num_leaves: usize,
    pub avg_session_len: f64,
    pub dropped_triples: usize,
}

/// Fully preprocessed dataset: split examples, the id remapping, and the
/// remapped attribute records.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub train: Vec<SessionExample>,
    pub test: Vec<SessionExample>,
    pub item_map: ItemRemap,
    pub records: AttributeRecords,
    pub stats: BundleStats,
}

impl DatasetBundle {
    pub fn num_items(&self) -> usize {
        self.item_map.len()
    }

    /// Per-item interaction counts over the training sessions. Each origin
    /// session is reconstructed from its longest example so that every
    /// event is counted exactly once.
    pub fn train_interaction_counts(&self) -> Vec<usize> {
        let mut longest: HashMap<u64, &SessionExample> = HashMap::new();
        for e in &self.train {
            let slot = longest.entry(e.origin_session).or_insert(e);
            if e.prefix.len() > slot.prefix.len() {
                *slot = e;
            }
        }
        let mut counts = vec![0usize; self.num_items()];
        let mut origins: Vec<&SessionExample> = longest.into_values().collect();
        origins.sort_by_key(|e| e.origin_session);
        for e in origins {
            for &item in &e.prefix {
                counts[item as usize] += 1;
            }
            counts[e.target as usize] += 1;
        }
        counts
    }
}

// ── Events file ─────────────────────────────────────────────────────────
//
// Tab-separated `session_id<TAB>timestamp_ms<TAB>item_id`, UTF-8, with
// optional `#` comment lines.

pub fn parse_events<R: Read>(reader: R) -> Result<Vec<RawEvent>> {
    let mut content = String::new();
    let mut r = reader;
    r.read_to_string(&mut content)?;
    let mut events = Vec::new();
    for (lineno, raw) in content.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let mut next_field = |what: &str| -> Result<&str> {
            fields.next().ok_or_else(|| Error::Parse {
                line: lineno + 1,
                message: format!("missing {what}"),
            })
        };
        let session_id = next_field("session id")?.trim().parse().map_err(|e| Error::Parse {
            line: lineno + 1,
            message: format!("bad session id: {e}"),
        })?;
        let timestamp_ms = next_field("timestamp")?.trim().parse().map_err(|e| Error::Parse {
            line: lineno + 1,
            message: format!("bad timestamp: {e}"),
        })?;
        let item_id = next_field("item id")?.trim().parse().map_err(|e| Error::Parse {
            line: lineno + 1,
            message: format!("bad item id: {e}"),
        })?;
        events.push(RawEvent {
            session_id,
            timestamp_ms,
            item_id,
        });
    }
    events.sort_by_key(|e| (e.session_id, e.timestamp_ms));
    Ok(events)
}

pub fn load_events<P: AsRef<Path>>(path: P) -> Result<Vec<RawEvent>> {
    parse_events(BufReader::new(File::open(path)?))
}

pub fn write_events<W: Write>(w: &mut W, events: &[RawEvent]) -> Result<()> {
    for e in events {
        writeln!(w, "{}\t{}\t{}", e.session_id, e.timestamp_ms, e.item_id)?;
    }
    Ok(())
}

pub fn save_events<P: AsRef<Path>>(path: P, events: &[RawEvent]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_events(&mut w, events)?;
    w.flush()?;
    Ok(())
}

// ── Preprocessing ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct PreprocessOptions {
    /// Items with a global occurrence count below this are removed.
    pub min_item_count: usize,
    /// When set, a gap above this many milliseconds starts a new session
    /// within the same session id.
    pub session_gap_ms: Option<i64>,
    /// Sessions starting at or after this timestamp become test data.
    pub test_cutoff_ms: Option<i64>,
    /// Fallback when no explicit cutoff is given: the most recent fraction
    /// of sessions (by start time quantile) becomes the test split.
    pub test_fraction: f64,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            min_item_count: 5,
            session_gap_ms: None,
            test_cutoff_ms: None,
            test_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
struct RawSession {
    id: u64,
    start_ts: i64,
    items: Vec<u64>,
}

fn group_sessions(events: &[RawEvent], gap_ms: Option<i64>) -> Vec<RawSession> {
    let mut sessions: Vec<RawSession> = Vec::new();
    let mut next_id: u64 = 0;
    let mut current: Option<(u64, i64, RawSession)> = None; // (orig id, last ts, session)
    for e in events {
        let start_new = match &current {
            None => true,
            Some((orig, last_ts, _)) => {
                *orig != e.session_id
                    || gap_ms.is_some_and(|g| e.timestamp_ms - *last_ts > g)
            }
        };
        if start_new {
            if let Some((_, _, s)) = current.take() {
                sessions.push(s);
            }
            current = Some((
                e.session_id,
                e.timestamp_ms,
                RawSession {
                    id: next_id,
                    start_ts: e.timestamp_ms,
                    items: vec![e.item_id],
                },
            ));
            next_id += 1;
        } else if let Some((_, last_ts, s)) = current.as_mut() {
            *last_ts = e.timestamp_ms;
            s.items.push(e.item_id);
        }
    }
    if let Some((_, _, s)) = current {
        sessions.push(s);
    }
    sessions
}

/// Drop items occurring fewer than `min_count` times and sessions shorter
/// than two events, iterating to a fixed point so both conditions hold
/// simultaneously.
fn filter_to_fixed_point(mut sessions: Vec<RawSession>, min_count: usize) -> Vec<RawSession> {
    loop {
        let mut counts: HashMap<u64, usize> = HashMap::new();
        for s in &sessions {
            for &item in &s.items {
                *counts.entry(item).or_insert(0) += 1;
            }
        }
        let mut changed = false;
        for s in &mut sessions {
            let before = s.items.len();
            s.items.retain(|item| counts[item] >= min_count);
            changed |= s.items.len() != before;
        }
        let before = sessions.len();
        sessions.retain(|s| s.items.len() >= 2);
        changed |= sessions.len() != before;
        if !changed {
            return sessions;
        }
    }
}

fn split_into_examples(
    items: &[u32],
    origin: u64,
    split: Split,
    out: &mut Vec<SessionExample>,
) {
    for t in 1..items.len() {
        out.push(SessionExample {
            prefix: items[..t].to_vec(),
            target: items[t],
            origin_session: origin,
            split,
        });
    }
}

pub fn preprocess(
    events: &[RawEvent],
    attributes: &AttributeRecords,
    opts: &PreprocessOptions,
) -> Result<DatasetBundle> {
    if !(0.0..1.0).contains(&opts.test_fraction) {
        return Err(Error::Config(format!(
            "test fraction {} outside [0, 1)",
            opts.test_fraction
        )));
    }
    let mut events = events.to_vec();
    events.sort_by_key(|e| (e.session_id, e.timestamp_ms));
    let sessions = group_sessions(&events, opts.session_gap_ms);
    let sessions = filter_to_fixed_point(sessions, opts.min_item_count);
    if sessions.is_empty() {
        return Err(Error::Dataset(
            "no sessions survive filtering; check the events file and thresholds".into(),
        ));
    }

    // Temporal split on session start times.
    let cutoff = match opts.test_cutoff_ms {
        Some(c) => c,
        None => {
            let mut starts: Vec<i64> = sessions.iter().map(|s| s.start_ts).collect();
            starts.sort_unstable();
            let k = ((starts.len() as f64) * (1.0 - opts.test_fraction)).floor() as usize;
            if k >= starts.len() {
                i64::MAX
            } else {
                starts[k]
            }
        }
    };
    let (test_raw, train_raw): (Vec<RawSession>, Vec<RawSession>) =
        sessions.into_iter().partition(|s| s.start_ts >= cutoff);
    if train_raw.is_empty() {
        return Err(Error::Dataset("temporal split leaves no training sessions".into()));
    }

    // The item catalog is what training saw; remap by ascending original id.
    let train_items: BTreeSet<u64> = train_raw.iter().flat_map(|s| s.items.iter().copied()).collect();
    let item_map = ItemRemap::new(train_items.into_iter().collect());

    let remap_session = |s: &RawSession| -> Vec<u32> {
        s.items
            .iter()
            .filter_map(|&item| item_map.to_new(item))
            .collect()
    };

    let mut train = Vec::new();
    let mut total_len = 0usize;
    let mut train_sessions = 0usize;
    for s in &train_raw {
        let items = remap_session(s);
        total_len += items.len();
        train_sessions += 1;
        split_into_examples(&items, s.id, Split::Train, &mut train);
    }

    // Items unseen in training are dropped from test sessions; sessions
    // shrinking below two events contribute nothing.
    let mut test = Vec::new();
    let mut test_sessions = 0usize;
    for s in &test_raw {
        let items = remap_session(s);
        if items.len() < 2 {
            continue;
        }
        total_len += items.len();
        test_sessions += 1;
        split_into_examples(&items, s.id, Split::Test, &mut test);
    }

    if train.is_empty() {
        return Err(Error::Dataset("no training examples after splitting".into()));
    }

    // Remap attribute triples; those of filtered-out items are discarded.
    let mut kept_triples = Vec::new();
    let mut dropped_triples = 0usize;
    for t in &attributes.triples {
        match item_map.to_new(u64::from(t.item)) {
            Some(new_item) => kept_triples.push(AttributeTriple {
                item: new_item,
                parent: t.parent,
                leaf: t.leaf,
            }),
            None => dropped_triples += 1,
        }
    }
    let records = AttributeRecords::new(
        kept_triples,
        item_map.len(),
        attributes.num_parents,
        attributes.num_leaves,
    )?;

    let stats = BundleStats {
        train_sessions,
        test_sessions,
        train_examples: train.len(),
        test_examples: test.len(),
        num_items: item_map.len(),
        num_parents: records.num_parents,
        num_leaves: records.num_leaves,
        avg_session_len: total_len as f64 / (train_sessions + test_sessions) as f64,
        dropped_triples,
    };

    Ok(DatasetBundle {
        train,
        test,
        item_map,
        records,
        stats,
    })
}

/// Keep a uniform random fraction of training origin sessions (every
/// example of a kept session stays); the test split is untouched.
pub fn subsample_train(bundle: &DatasetBundle, fraction: f64, seed: u64) -> Result<DatasetBundle> {
    if !(0.0..=1.0).contains(&fraction) || fraction == 0.0 {
        return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    if fraction == 1.0 {
        return Ok(bundle.clone());
    }
    let origins: BTreeSet<u64> = bundle.train.iter().map(|e| e.origin_session).collect();
    let origins: Vec<u64> = origins.into_iter().collect();
    let keep_count = ((origins.len() as f64) * fraction).round() as usize;
    let mut rng = Rng::named(seed, "subsample");
    let kept: BTreeSet<u64> = rng
        .sample_distinct(origins.len(), keep_count)
        .into_iter()
        .map(|i| origins[i])
        .collect();

    let train: Vec<SessionExample> = bundle
        .train
        .iter()
        .filter(|e| kept.contains(&e.origin_session))
        .cloned()
        .collect();
    let mut out = bundle.clone();
    out.stats.train_sessions = kept.len();
    out.stats.train_examples = train.len();
    out.train = train;
    Ok(out)
}

// ── Synthetic generator ─────────────────────────────────────────────────

/// Parameters of the synthetic session generator. Each item gets one
/// uniformly drawn (parent, leaf) pair; sessions are random walks that,
/// with probability `coherence`, step within the current item's
/// leaf-attribute cohort and otherwise jump uniformly over the catalog.
///
/// Item popularity follows a Zipf profile with exponent
/// `popularity_exponent` (0 = uniform): session starts and within-cohort
/// draws are popularity-weighted, which gives the catalog a realistic
/// long tail. The uniform catalog jump is unaffected.
///
/// `popularity_shift_at` models catalog drift: sessions past that
/// fraction of the stream draw from a popularity ranking rotated by half
/// the catalog, so late sessions revolve around items that were tail
/// items earlier. Attribute assignments do not change.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub num_items: usize,
    pub num_parents: usize,
    pub num_leaves: usize,
    pub num_sessions: usize,
    pub coherence: f64,
    pub min_session_len: usize,
    pub max_session_len: usize,
    pub popularity_exponent: f64,
    pub popularity_shift_at: Option<f64>,
}

impl SynthConfig {
    pub fn new(
        num_items: usize,
        num_parents: usize,
        num_leaves: usize,
        num_sessions: usize,
        coherence: f64,
    ) -> Self {
        Self {
            num_items,
            num_parents,
            num_leaves,
            num_sessions,
            coherence,
            min_session_len: 2,
            max_session_len: 6,
            popularity_exponent: 0.8,
            popularity_shift_at: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_items == 0
            || self.num_parents == 0
            || self.num_leaves == 0
            || self.num_sessions == 0
        {
            return Err(Error::Config("synthetic sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.coherence) {
            return Err(Error::Config(format!(
                "coherence {} outside [0, 1]",
                self.coherence
            )));
        }
        if self.min_session_len < 2 || self.max_session_len < self.min_session_len {
            return Err(Error::Config("session length bounds are inconsistent".into()));
        }
        if self.popularity_exponent < 0.0 || !self.popularity_exponent.is_finite() {
            return Err(Error::Config(format!(
                "popularity exponent {} must be non-negative",
                self.popularity_exponent
            )));
        }
        if let Some(shift) = self.popularity_shift_at {
            if !(0.0..=1.0).contains(&shift) {
                return Err(Error::Config(format!(
                    "popularity shift point {shift} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Cumulative-weight table for popularity-biased draws.
struct WeightedDraw {
    cumulative: Vec<f64>,
}

impl WeightedDraw {
    fn new(weights: impl Iterator<Item = f64>) -> Self {
        let mut cumulative = Vec::new();
        let mut acc = 0.0;
        for w in weights {
            acc += w;
            cumulative.push(acc);
        }
        Self { cumulative }
    }

    fn draw(&self, rng: &mut Rng) -> usize {
        let total = *self.cumulative.last().expect("nonempty weight table");
        let u = rng.uniform() * total;
        self.cumulative.partition_point(|&c| c <= u)
    }
}

pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<(Vec<RawEvent>, AttributeRecords)> {
    config.validate()?;
    let mut rng = Rng::named(seed, "synth");

    let mut triples = Vec::with_capacity(config.num_items);
    let mut item_leaf = vec![0usize; config.num_items];
    for item in 0..config.num_items {
        let parent = rng.below(config.num_parents) as u32;
        let leaf = rng.below(config.num_leaves);
        item_leaf[item] = leaf;
        triples.push(AttributeTriple {
            item: item as u32,
            parent,
            leaf: leaf as u32,
        });
    }
    let mut cohorts: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (item, &leaf) in item_leaf.iter().enumerate() {
        cohorts.entry(leaf).or_default().push(item);
    }

    // Zipf weights over a random popularity ranking of the catalog; the
    // drifted phase uses the ranking rotated by half the catalog.
    let mut ranking: Vec<usize> = (0..config.num_items).collect();
    rng.shuffle(&mut ranking);
    let weights_for = |rotation: usize| -> Vec<f64> {
        let mut weight = vec![0.0; config.num_items];
        for (rank, &item) in ranking.iter().enumerate() {
            let effective = (rank + rotation) % config.num_items;
            weight[item] = 1.0 / ((effective + 1) as f64).powf(config.popularity_exponent);
        }
        weight
    };
    let make_tables = |weight: &[f64]| -> (WeightedDraw, BTreeMap<usize, WeightedDraw>) {
        let start = WeightedDraw::new(weight.iter().copied());
        let per_cohort = cohorts
            .iter()
            .map(|(&leaf, members)| {
                (
                    leaf,
                    WeightedDraw::new(members.iter().map(|&item| weight[item])),
                )
            })
            .collect();
        (start, per_cohort)
    };
    let early = make_tables(&weights_for(0));
    let late = config
        .popularity_shift_at
        .map(|_| make_tables(&weights_for(config.num_items / 2)));
    let shift_session = config
        .popularity_shift_at
        .map(|f| (f * config.num_sessions as f64).floor() as usize);

    let span = config.max_session_len - config.min_session_len + 1;
    let mut events = Vec::new();
    for session in 0..config.num_sessions {
        let (start_draw, cohort_draws) = match (&late, shift_session) {
            (Some(tables), Some(at)) if session >= at => tables,
            _ => &early,
        };
        let len = config.min_session_len + rng.below(span);
        let mut current = start_draw.draw(&mut rng);
        for step in 0..len {
            events.push(RawEvent {
                session_id: session as u64,
                timestamp_ms: (session as i64) * 60_000 + (step as i64) * 1_000,
                item_id: current as u64,
            });
            if step + 1 == len {
                break;
            }
            current = if rng.uniform() < config.coherence {
                let leaf = item_leaf[current];
                cohorts[&leaf][cohort_draws[&leaf].draw(&mut rng)]
            } else {
                rng.below(config.num_items)
            };
        }
    }

    let records = AttributeRecords::new(
        triples,
        config.num_items,
        config.num_parents,
        config.num_leaves,
    )?;
    Ok((events, records))
}

// ── Bundle cache file ───────────────────────────────────────────────────

const BUNDLE_MAGIC: &[u8; 8] = b"AGAUBDL\0";
const BUNDLE_VERSION: u32 = 1;

fn write_examples<W: Write>(w: &mut W, examples: &[SessionExample]) -> Result<()> {
    binio::write_u64(w, examples.len() as u64)?;
    for e in examples {
        binio::write_u64(w, e.origin_session)?;
        binio::write_u32(w, e.target)?;
        binio::write_u32(w, e.prefix.len() as u32)?;
        for &item in &e.prefix {
            binio::write_u32(w, item)?;
        }
    }
    Ok(())
}

fn read_examples<R: Read>(r: &mut R, split: Split) -> Result<Vec<SessionExample>> {
    let count = binio::read_u64(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let origin_session = binio::read_u64(r)?;
        let target = binio::read_u32(r)?;
        let len = binio::read_u32(r)? as usize;
        let mut prefix = Vec::with_capacity(len);
        for _ in 0..len {
            prefix.push(binio::read_u32(r)?);
        }
        out.push(SessionExample {
            prefix,
            target,
            origin_session,
            split,
        });
    }
    Ok(out)
}

impl DatasetBundle {
    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_header(w, BUNDLE_MAGIC, BUNDLE_VERSION)?;
        binio::write_u64(w, self.item_map.originals.len() as u64)?;
        binio::write_u64_slice(w, &self.item_map.originals)?;
        binio::write_u64(w, self.records.num_items as u64)?;
        binio::write_u64(w, self.records.num_parents as u64)?;
        binio::write_u64(w, self.records.num_leaves as u64)?;
        binio::write_u64(w, self.records.triples.len() as u64)?;
        for t in &self.records.triples {
            binio::write_u32(w, t.item)?;
            binio::write_u32(w, t.parent)?;
            binio::write_u32(w, t.leaf)?;
        }
        write_examples(w, &self.train)?;
        write_examples(w, &self.test)?;
        binio::write_u64(w, self.stats.train_sessions as u64)?;
        binio::write_u64(w, self.stats.test_sessions as u64)?;
        binio::write_f64(w, self.stats.avg_session_len)?;
        binio::write_u64(w, self.stats.dropped_triples as u64)?;
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        binio::expect_header(r, BUNDLE_MAGIC, BUNDLE_VERSION)?;
        let n_items = binio::read_u64(r)? as usize;
        let originals = binio::read_u64_vec(r, n_items)?;
        let num_items = binio::read_u64(r)? as usize;
        let num_parents = binio::read_u64(r)? as usize;
        let num_leaves = binio::read_u64(r)? as usize;
        let n_triples = binio::read_u64(r)? as usize;
        let mut triples = Vec::with_capacity(n_triples);
        for _ in 0..n_triples {
            triples.push(AttributeTriple {
                item: binio::read_u32(r)?,
                parent: binio::read_u32(r)?,
                leaf: binio::read_u32(r)?,
            });
        }
        let train = read_examples(r, Split::Train)?;
        let test = read_examples(r, Split::Test)?;
        let train_sessions = binio::read_u64(r)? as usize;
        let test_sessions = binio::read_u64(r)? as usize;
        let avg_session_len = binio::read_f64(r)?;
        let dropped_triples = binio::read_u64(r)? as usize;
        let records = AttributeRecords::new(triples, num_items, num_parents, num_leaves)?;
        let stats = BundleStats {
            train_sessions,
            test_sessions,
            train_examples: train.len(),
            test_examples: test.len(),
            num_items,
            num_parents,
            num_leaves,
            avg_session_len,
            dropped_triples,
        };
        Ok(Self {
            train,
            test,
            item_map: ItemRemap { originals },
            records,
            stats,
        })
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests;
