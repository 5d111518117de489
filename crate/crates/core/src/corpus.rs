//! Query-log ingestion and the data preparation shared by training and evaluation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDateTime;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense index into a [`Vocabulary`].
pub type TokenId = usize;

pub const START: TokenId = 0;
pub const STOP: TokenId = 1;
pub const UNK: TokenId = 2;

/// Default vocabulary size, special symbols included.
pub const DEFAULT_VOCAB_SIZE: usize = 79;
/// Users with fewer training queries than this share the rare-user row.
pub const DEFAULT_RARE_THRESHOLD: usize = 15;
/// Training-time truncation of the character portion of a query.
pub const DEFAULT_MAX_TRAIN_CHARS: usize = 40;

/// Row identifier in the user-embedding table. Id 1 is the shared rare user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UserId(pub u32);

impl UserId {
    pub const RARE: UserId = UserId(1);

    /// Row of `U` holding this user's embedding.
    pub fn row(self) -> usize {
        debug_assert!(self.0 >= 1);
        self.0 as usize - 1
    }

    pub fn from_row(row: usize) -> Self {
        UserId(row as u32 + 1)
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub user_key: String,
    pub text: String,
    pub timestamp: i64,
}

impl QueryRecord {
    pub fn new(user_key: impl Into<String>, text: impl Into<String>, timestamp: i64) -> Self {
        Self {
            user_key: user_key.into(),
            text: text.into(),
            timestamp,
        }
    }
}

/// Column layout of a tab-separated query log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogFormat {
    pub user_column: usize,
    pub query_column: usize,
    pub time_column: usize,
    pub time_format: String,
    pub has_header: bool,
}

impl Default for LogFormat {
    /// AOL layout: `AnonID \t Query \t QueryTime \t ItemRank \t ClickURL`.
    fn default() -> Self {
        Self {
            user_column: 0,
            query_column: 1,
            time_column: 2,
            time_format: "%Y-%m-%d %H:%M:%S".to_string(),
            has_header: true,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadedLog {
    pub records: Vec<QueryRecord>,
    pub skipped: usize,
}

pub fn load_query_log(path: &Path, format: &LogFormat) -> Result<LoadedLog> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut log = LoadedLog::default();
    let needed = format
        .user_column
        .max(format.query_column)
        .max(format.time_column);

    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if lineno == 0 && format.has_header {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() <= needed {
            log.skipped += 1;
            continue;
        }
        let text = normalize_query(fields[format.query_column]);
        let user_key = fields[format.user_column].trim();
        if text.is_empty() || user_key.is_empty() {
            log.skipped += 1;
            continue;
        }
        let Some(timestamp) = parse_time(fields[format.time_column], &format.time_format) else {
            log.skipped += 1;
            continue;
        };
        log.records
            .push(QueryRecord::new(user_key, text, timestamp));
    }

    if log.records.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "no parseable rows in {}",
            path.display()
        )));
    }
    Ok(log)
}

fn parse_time(raw: &str, format: &str) -> Option<i64> {
    let raw = raw.trim();
    if format == "unix" {
        return raw.parse().ok();
    }
    NaiveDateTime::parse_from_str(raw, format)
        .ok()
        .map(|t| t.and_utc().timestamp())
}

/// Lowercase, trim, and collapse internal whitespace runs to one space.
pub fn normalize_query(raw: &str) -> String {
    let lower = raw.to_lowercase();
    let mut out = String::with_capacity(lower.len());
    for word in lower.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Symbol {
    Start,
    Stop,
    Unk,
    Char(char),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<Symbol>,
    index: HashMap<char, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered character list; specials come first.
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Result<Self> {
        let mut symbols = vec![Symbol::Start, Symbol::Stop, Symbol::Unk];
        let mut index = HashMap::new();
        for c in chars {
            if index.insert(c, symbols.len()).is_some() {
                return Err(Error::Format(format!(
                    "duplicate vocabulary character {c:?}"
                )));
            }
            symbols.push(Symbol::Char(c));
        }
        Ok(Self { symbols, index })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.symbols
    }

    /// The character symbols in id order.
    pub fn chars(&self) -> impl Iterator<Item = char> + '_ {
        self.symbols.iter().filter_map(|s| match s {
            Symbol::Char(c) => Some(*c),
            _ => None,
        })
    }

    pub fn id_of(&self, c: char) -> TokenId {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    pub fn symbol(&self, id: TokenId) -> Option<Symbol> {
        self.symbols.get(id).copied()
    }

    pub fn char_of(&self, id: TokenId) -> Option<char> {
        match self.symbols.get(id) {
            Some(Symbol::Char(c)) => Some(*c),
            _ => None,
        }
    }
}

/// START, STOP, UNK and the most frequent training characters, ordered by
/// frequency then codepoint, capped at `max_size` symbols in total.
pub fn build_vocabulary(records: &[QueryRecord], max_size: usize) -> Result<Vocabulary> {
    if records.is_empty() {
        return Err(Error::EmptyCorpus("cannot build a vocabulary".into()));
    }
    if max_size < 3 {
        return Err(Error::Config(format!(
            "vocabulary size {max_size} leaves no room for START/STOP/UNK"
        )));
    }
    let mut counts: HashMap<char, u64> = HashMap::new();
    for record in records {
        for c in record.text.chars() {
            *counts.entry(c).or_default() += 1;
        }
    }
    let mut ranked: Vec<(char, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Vocabulary::from_chars(ranked.into_iter().take(max_size - 3).map(|(c, _)| c))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserTable {
    ids: HashMap<String, UserId>,
    counts: HashMap<String, usize>,
    rare_threshold: usize,
    retained: usize,
}

impl UserTable {
    pub fn id_of(&self, user_key: &str) -> Option<UserId> {
        self.ids.get(user_key).copied()
    }

    pub fn query_count(&self, user_key: &str) -> usize {
        self.counts.get(user_key).copied().unwrap_or(0)
    }

    pub fn rare_threshold(&self) -> usize {
        self.rare_threshold
    }

    /// Number of embedding rows: retained users plus the rare-user row.
    pub fn k(&self) -> usize {
        self.retained + 1
    }

    pub fn retained_users(&self) -> usize {
        self.retained
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, UserId)> {
        self.ids.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

pub fn assign_user_ids(records: &[QueryRecord], rare_threshold: usize) -> Result<UserTable> {
    if rare_threshold == 0 {
        return Err(Error::Config("rare_threshold must be at least 1".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut order: Vec<&str> = Vec::new();
    for record in records {
        let count = counts.entry(record.user_key.clone()).or_default();
        if *count == 0 {
            order.push(&record.user_key);
        }
        *count += 1;
    }
    let mut ids = HashMap::with_capacity(order.len());
    let mut next = 2u32;
    for key in order {
        if counts[key] < rare_threshold {
            ids.insert(key.to_string(), UserId::RARE);
        } else {
            ids.insert(key.to_string(), UserId(next));
            next += 1;
        }
    }
    Ok(UserTable {
        ids,
        counts,
        rare_threshold,
        retained: (next - 2) as usize,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Number of users held out entirely for testing.
    pub test_users: usize,
    /// Chronological tail fraction of each remaining user's queries used for validation.
    pub valid_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_users: 1,
            valid_fraction: 0.02,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<QueryRecord>,
    pub valid: Vec<QueryRecord>,
    pub test: Vec<QueryRecord>,
}

/// Groups records by user in first-seen order, each user's records sorted by
/// timestamp with file order as tiebreak.
pub fn group_by_user(records: &[QueryRecord]) -> Vec<(String, Vec<QueryRecord>)> {
    let mut position: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<(String, Vec<QueryRecord>)> = Vec::new();
    for record in records {
        let slot = *position.entry(&record.user_key).or_insert_with(|| {
            groups.push((record.user_key.clone(), Vec::new()));
            groups.len() - 1
        });
        groups[slot].1.push(record.clone());
    }
    for (_, queries) in &mut groups {
        queries.sort_by_key(|r| r.timestamp);
    }
    groups
}

pub fn make_splits(records: &[QueryRecord], config: &SplitConfig) -> Result<DatasetSplit> {
    if !(0.0..=1.0).contains(&config.valid_fraction) {
        return Err(Error::Config(format!(
            "valid_fraction {} outside [0, 1]",
            config.valid_fraction
        )));
    }
    let groups = group_by_user(records);
    if groups.len() < 2 {
        return Err(Error::Config(format!(
            "need at least two users, found {}",
            groups.len()
        )));
    }
    if config.test_users >= groups.len() {
        return Err(Error::Config(format!(
            "{} test users requested but only {} users available",
            config.test_users,
            groups.len()
        )));
    }

    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let mut is_test = vec![false; groups.len()];
    for &g in &order[..config.test_users] {
        is_test[g] = true;
    }

    let mut split = DatasetSplit::default();
    for (g, (_, queries)) in groups.into_iter().enumerate() {
        if is_test[g] {
            split.test.extend(queries);
            continue;
        }
        let n_valid = (queries.len() as f64 * config.valid_fraction).floor() as usize;
        let cut = queries.len() - n_valid;
        let mut queries = queries;
        split.valid.extend(queries.drain(cut..));
        split.train.extend(queries);
    }
    Ok(split)
}

/// `[START] + chars + [STOP]`; `max_len` truncates the character portion.
pub fn encode_query(vocab: &Vocabulary, text: &str, max_len: Option<usize>) -> Vec<TokenId> {
    let limit = max_len.unwrap_or(usize::MAX);
    let mut ids = Vec::with_capacity(text.len().min(limit) + 2);
    ids.push(START);
    ids.extend(text.chars().take(limit).map(|c| vocab.id_of(c)));
    ids.push(STOP);
    ids
}

/// Inverse of [`encode_query`] on in-vocabulary text; UNK decodes to U+FFFD.
pub fn decode(vocab: &Vocabulary, ids: &[TokenId]) -> String {
    ids.iter()
        .filter_map(|&id| match vocab.symbol(id) {
            Some(Symbol::Char(c)) => Some(c),
            Some(Symbol::Unk) => Some(char::REPLACEMENT_CHARACTER),
            _ => None,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixSample {
    pub prefix: String,
    pub completion: String,
    pub source_query: String,
}

/// Splits `query` at a point drawn uniformly from `{2, …, len − 1}` characters.
pub fn sample_prefix<R: Rng + ?Sized>(rng: &mut R, query: &str) -> Option<PrefixSample> {
    let chars: Vec<char> = query.chars().collect();
    if chars.len() < 3 {
        return None;
    }
    let cut = rng.gen_range(2..chars.len());
    Some(PrefixSample {
        prefix: chars[..cut].iter().collect(),
        completion: chars[cut..].iter().collect(),
        source_query: query.to_string(),
    })
}

/// Writes `user \t timestamp \t query` lines.
pub fn write_records(path: &Path, records: &[QueryRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        writeln!(out, "{}\t{}\t{}", r.user_key, r.timestamp, r.text)
            .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<QueryRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.splitn(3, '\t');
        let (Some(user), Some(ts), Some(text)) = (fields.next(), fields.next(), fields.next())
        else {
            return Err(Error::Format(format!(
                "{}:{}: expected 3 fields",
                path.display(),
                lineno + 1
            )));
        };
        let timestamp = ts.parse().map_err(|_| {
            Error::Format(format!(
                "{}:{}: bad timestamp {ts:?}",
                path.display(),
                lineno + 1
            ))
        })?;
        records.push(QueryRecord::new(user, text, timestamp));
    }
    Ok(records)
}

pub const TRAIN_FILE: &str = "train.tsv";
pub const VALID_FILE: &str = "valid.tsv";
pub const TEST_FILE: &str = "test.tsv";

pub fn save_splits(dir: &Path, split: &DatasetSplit) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_records(&dir.join(TRAIN_FILE), &split.train)?;
    write_records(&dir.join(VALID_FILE), &split.valid)?;
    write_records(&dir.join(TEST_FILE), &split.test)
}

pub fn load_splits(dir: &Path) -> Result<DatasetSplit> {
    let read_opt = |name: &str| -> Result<Vec<QueryRecord>> {
        let path = dir.join(name);
        if path.exists() {
            read_records(&path)
        } else {
            Ok(Vec::new())
        }
    };
    Ok(DatasetSplit {
        train: read_records(&dir.join(TRAIN_FILE))?,
        valid: read_opt(VALID_FILE)?,
        test: read_opt(TEST_FILE)?,
    })
}

/// Query frequencies over a record set, keyed by text.
pub fn query_counts(records: &[QueryRecord]) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for r in records {
        *counts.entry(r.text.clone()).or_default() += 1;
    }
    counts
}

/// The `n` most frequent queries, ties broken lexicographically.
pub fn most_frequent_queries(records: &[QueryRecord], n: usize) -> Vec<String> {
    let mut ranked: Vec<(String, u64)> = query_counts(records).into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.into_iter().take(n).map(|(q, _)| q).collect()
}
