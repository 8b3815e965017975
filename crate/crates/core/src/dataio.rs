//! Session log ingestion: parsing, filtering, time-based split, prefix
//! augmentation, and padded batching.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{RestcError, Result};

pub const SECONDS_PER_DAY: i64 = 86_400;
/// Items seen fewer times than this across the whole log are dropped.
pub const MIN_ITEM_OCCURRENCES: usize = 5;
pub const PAD: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawEvent {
    pub session_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParsedLog {
    pub events: Vec<RawEvent>,
    pub malformed: usize,
}

pub fn parse_sessions(path: &Path) -> Result<ParsedLog> {
    let file = fs::File::open(path).map_err(|e| RestcError::io(path, e))?;
    parse_sessions_from(file, path)
}

/// Parses `session_id,item_id,timestamp` lines. A first line whose timestamp
/// is not an integer is taken as a header.
pub fn parse_sessions_from<R: Read>(reader: R, origin: &Path) -> Result<ParsedLog> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut log = ParsedLog::default();
    let mut lines = 0usize;
    for (i, record) in rdr.records().enumerate() {
        let parsed = record.ok().and_then(|r| {
            if r.len() != 3 || r[0].is_empty() || r[1].is_empty() {
                return None;
            }
            let ts: i64 = r[2].parse().ok()?;
            (ts >= 0).then(|| RawEvent {
                session_id: r[0].to_string(),
                item_id: r[1].to_string(),
                timestamp: ts,
            })
        });
        match parsed {
            Some(event) => log.events.push(event),
            None if i == 0 => continue,
            None => log.malformed += 1,
        }
        lines += 1;
    }
    if log.malformed > 0 {
        log::warn!("{}: skipped {} malformed line(s)", origin.display(), log.malformed);
    }
    if lines > 0 && 2 * log.malformed > lines {
        return Err(RestcError::Format {
            path: origin.to_path_buf(),
            message: format!("{} of {lines} lines are malformed", log.malformed),
        });
    }
    Ok(log)
}

/// Dense item indexing: `1..=N` for retained items, 0 for padding, `N+1` for [CLS].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    external: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_ids<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self::default();
        for id in ids {
            vocab.insert(id.into());
        }
        vocab
    }

    fn insert(&mut self, id: String) -> usize {
        if let Some(&i) = self.index.get(&id) {
            return i;
        }
        self.external.push(id.clone());
        let i = self.external.len();
        self.index.insert(id, i);
        i
    }

    /// Number of real items `N`.
    pub fn len(&self) -> usize {
        self.external.len()
    }

    pub fn is_empty(&self) -> bool {
        self.external.is_empty()
    }

    pub fn cls(&self) -> usize {
        self.len() + 1
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn external(&self, index: usize) -> Option<&str> {
        index.checked_sub(1).and_then(|i| self.external.get(i)).map(String::as_str)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, id) in self.external.iter().enumerate() {
            out.push_str(&format!("{}\t{id}\n", i + 1));
        }
        fs::write(path, out).map_err(|e| RestcError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| RestcError::io(path, e))?;
        let mut vocab = Self::default();
        for (n, line) in text.lines().enumerate() {
            let bad = || RestcError::Format {
                path: path.to_path_buf(),
                message: format!("line {}: expected `index<TAB>item_id`", n + 1),
            };
            let (idx, id) = line.split_once('\t').ok_or_else(bad)?;
            let idx: usize = idx.parse().map_err(|_| bad())?;
            if idx != vocab.len() + 1 || vocab.insert(id.to_string()) != idx {
                return Err(bad());
            }
        }
        Ok(vocab)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    pub id: String,
    pub items: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitDataset {
    pub train: Vec<Session>,
    pub test: Vec<Session>,
    pub vocab: Vocab,
}

impl SplitDataset {
    /// Total clicks retained across both splits.
    pub fn clicks(&self) -> usize {
        self.train.iter().chain(&self.test).map(|s| s.items.len()).sum()
    }
}

/// Groups, filters, and splits raw events.
///
/// Item-frequency filtering runs once, before the session-length filter.
/// Sessions ending within `test_window_days` of the latest retained
/// timestamp form the test split; the vocabulary comes from train only.
pub fn filter_and_split(events: &[RawEvent], test_window_days: i64) -> Result<SplitDataset> {
    if events.is_empty() {
        return Err(RestcError::EmptyDataset("no events to process".into()));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut grouped: HashMap<&str, Vec<(i64, &str)>> = HashMap::new();
    let mut occurrences: HashMap<&str, usize> = HashMap::new();
    for e in events {
        let slot = grouped.entry(&e.session_id).or_insert_with(|| {
            order.push(&e.session_id);
            Vec::new()
        });
        slot.push((e.timestamp, &e.item_id));
        *occurrences.entry(&e.item_id).or_default() += 1;
    }

    let mut kept: Vec<(&str, Vec<&str>, i64)> = Vec::new();
    for sid in order {
        let mut clicks = grouped.remove(sid).expect("grouped session");
        clicks.sort_by_key(|&(ts, _)| ts);
        let last_ts = clicks.last().map_or(0, |c| c.0);
        let items: Vec<&str> = clicks
            .into_iter()
            .filter(|(_, item)| occurrences[item] >= MIN_ITEM_OCCURRENCES)
            .map(|(_, item)| item)
            .collect();
        if items.len() >= 2 {
            kept.push((sid, items, last_ts));
        }
    }
    let Some(max_ts) = kept.iter().map(|k| k.2).max() else {
        return Err(RestcError::EmptyDataset(
            "every session was removed by the length/frequency filters".into(),
        ));
    };
    let cutoff = max_ts - test_window_days * SECONDS_PER_DAY;

    let mut vocab = Vocab::default();
    let mut train = Vec::new();
    let mut pending_test = Vec::new();
    for (sid, items, last_ts) in kept {
        if last_ts > cutoff {
            pending_test.push((sid, items));
        } else {
            let items = items.into_iter().map(|i| vocab.insert(i.to_string())).collect();
            train.push(Session {
                id: sid.to_string(),
                items,
            });
        }
    }
    if train.is_empty() {
        return Err(RestcError::EmptyDataset(format!(
            "no training sessions end before the {test_window_days}-day test window"
        )));
    }
    let test = pending_test
        .into_iter()
        .filter_map(|(sid, items)| {
            let items: Vec<usize> = items.into_iter().filter_map(|i| vocab.index_of(i)).collect();
            (items.len() >= 2).then(|| Session {
                id: sid.to_string(),
                items,
            })
        })
        .collect();
    Ok(SplitDataset { train, test, vocab })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentedExample {
    pub prefix: Vec<usize>,
    pub target: usize,
    /// Length `M` of the observed prefix before any truncation.
    pub original_length: usize,
}

/// `[v1..vM]` → `([v1], v2), ([v1, v2], v3), …, ([v1..v(M-1)], vM)`.
pub fn augment_prefixes(session: &[usize]) -> Result<Vec<AugmentedExample>> {
    if session.len() < 2 {
        return Err(RestcError::Contract(format!(
            "prefix augmentation needs a session of length >= 2, got {}",
            session.len()
        )));
    }
    Ok((1..session.len())
        .map(|k| AugmentedExample {
            prefix: session[..k].to_vec(),
            target: session[k],
            original_length: k,
        })
        .collect())
}

pub fn augment_all(sessions: &[Session]) -> Result<Vec<AugmentedExample>> {
    let mut out = Vec::new();
    for s in sessions {
        out.extend(augment_prefixes(&s.items)?);
    }
    Ok(out)
}

/// Longest training prefix, capped.
pub fn max_prefix_len(examples: &[AugmentedExample], cap: usize) -> usize {
    examples.iter().map(|e| e.prefix.len()).max().unwrap_or(1).min(cap).max(1)
}

/// A padded mini-batch. Each row holds the (possibly truncated) prefix, then
/// [CLS], then padding, over `max_len + 1` columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub width: usize,
    pub items: Vec<usize>,
    pub mask: Vec<bool>,
    /// Real items per row after truncation.
    pub lengths: Vec<usize>,
    pub original_lengths: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Batch {
    pub fn from_examples(examples: &[&AugmentedExample], max_len: usize, cls: usize) -> Self {
        let width = max_len + 1;
        let mut batch = Batch {
            width,
            items: vec![PAD; examples.len() * width],
            mask: vec![false; examples.len() * width],
            lengths: Vec::with_capacity(examples.len()),
            original_lengths: Vec::with_capacity(examples.len()),
            targets: Vec::with_capacity(examples.len()),
        };
        for (r, ex) in examples.iter().enumerate() {
            let start = ex.prefix.len().saturating_sub(max_len);
            let prefix = &ex.prefix[start..];
            let row = &mut batch.items[r * width..(r + 1) * width];
            row[..prefix.len()].copy_from_slice(prefix);
            row[prefix.len()] = cls;
            batch.mask[r * width..r * width + prefix.len() + 1].fill(true);
            batch.lengths.push(prefix.len());
            batch.original_lengths.push(ex.original_length);
            batch.targets.push(ex.target);
        }
        batch
    }

    pub fn size(&self) -> usize {
        self.targets.len()
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.items[r * self.width..(r + 1) * self.width]
    }

    pub fn prefix(&self, r: usize) -> &[usize] {
        &self.row(r)[..self.lengths[r]]
    }

    pub fn mask_row(&self, r: usize) -> &[bool] {
        &self.mask[r * self.width..(r + 1) * self.width]
    }
}

/// Splits examples into batches of `batch_size` (last partial batch kept),
/// shuffling first when a seed is given.
pub fn make_batches(
    examples: &[AugmentedExample],
    batch_size: usize,
    max_len: usize,
    cls: usize,
    shuffle_seed: Option<u64>,
) -> Vec<Batch> {
    let mut refs: Vec<&AugmentedExample> = examples.iter().collect();
    if let Some(seed) = shuffle_seed {
        refs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    refs.chunks(batch_size.max(1))
        .map(|chunk| Batch::from_examples(chunk, max_len, cls))
        .collect()
}

pub fn write_examples(path: &Path, examples: &[AugmentedExample]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| RestcError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let prefix: Vec<String> = ex.prefix.iter().map(usize::to_string).collect();
        writeln!(w, "{}\t{}", ex.target, prefix.join(" ")).map_err(|e| RestcError::io(path, e))?;
    }
    w.flush().map_err(|e| RestcError::io(path, e))
}

pub fn read_examples(path: &Path) -> Result<Vec<AugmentedExample>> {
    let file = fs::File::open(path).map_err(|e| RestcError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| RestcError::io(path, e))?;
        let bad = || RestcError::Format {
            path: path.to_path_buf(),
            message: format!("line {}: expected `target<TAB>prefix`", n + 1),
        };
        let (target, prefix) = line.split_once('\t').ok_or_else(bad)?;
        let target = target.parse().map_err(|_| bad())?;
        let prefix: Vec<usize> = prefix
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        if prefix.is_empty() {
            return Err(bad());
        }
        out.push(AugmentedExample {
            original_length: prefix.len(),
            prefix,
            target,
        });
    }
    Ok(out)
}
