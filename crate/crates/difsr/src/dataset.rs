//! Interaction-log ingestion and batching.
//!
//! Input is a TSV of (user, item, timestamp) rows plus a JSON-Lines catalog
//! of per-item attributes. Ingestion applies iterative 5-core filtering
//! (users and items below five occurrences are dropped until nothing
//! changes), rebuilds dense vocabularies, and exposes leave-one-out views:
//! last item per user → test, second-to-last → validation, every other
//! prefix → training.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Read, Write};
use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_OCCURRENCES: usize = 5;
pub const DEFAULT_MAX_VALUES_PER_ITEM: usize = 8;

/// Padding / "no value" slot shared by the item and attribute vocabularies.
pub const PAD: u32 = 0;

#[derive(Debug, Clone)]
pub struct AttributeCatalog {
    pub name: String,
    /// Real values; dense index `i+1` ↔ `values[i]` (0 is "no value").
    pub values: Vec<String>,
    /// Per item dense index (slot 0 = padding, always empty), the value
    /// indices in catalog order, deduplicated, capped.
    pub per_item: Vec<Vec<u32>>,
    /// a_j: the widest per-item value list after capping.
    pub max_per_item: usize,
}

impl AttributeCatalog {
    pub fn vocab_size(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone)]
pub struct InteractionDataset {
    /// Dense user index → external id.
    pub users: Vec<String>,
    /// Per user, chronologically ordered item indices (never the pad index).
    pub sequences: Vec<Vec<u32>>,
    /// Real item ids; dense index `i+1` ↔ `item_ids[i]` (0 is padding).
    pub item_ids: Vec<String>,
    pub attributes: Vec<AttributeCatalog>,
}

impl InteractionDataset {
    /// Number of real items (the embedding table adds one padding row).
    pub fn item_count(&self) -> usize {
        self.item_ids.len()
    }

    pub fn action_count(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }

    pub fn item_index(&self, id: &str) -> Option<u32> {
        self.item_ids
            .iter()
            .position(|x| x == id)
            .map(|i| i as u32 + 1)
    }

    pub fn item_id(&self, index: u32) -> Option<&str> {
        if index == PAD {
            return None;
        }
        self.item_ids.get(index as usize - 1).map(|s| s.as_str())
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.users.iter().position(|u| u == id)
    }

    pub fn manifest(&self) -> Manifest {
        let users = self.users.len();
        let items = self.item_count();
        let actions = self.action_count();
        let sparsity = 100.0 * (1.0 - actions as f64 / (users as f64 * items as f64));
        Manifest {
            format_version: 1,
            users,
            items,
            actions,
            avg_actions_per_user: actions as f64 / users as f64,
            avg_actions_per_item: actions as f64 / items as f64,
            sparsity_percent: sparsity,
            attributes: self
                .attributes
                .iter()
                .map(|a| AttrManifest {
                    name: a.name.clone(),
                    values: a.vocab_size(),
                    max_values_per_item: a.max_per_item,
                })
                .collect(),
        }
    }
}

/// Dataset summary mirroring the usual statistics table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub users: usize,
    pub items: usize,
    pub actions: usize,
    pub avg_actions_per_user: f64,
    pub avg_actions_per_item: f64,
    pub sparsity_percent: f64,
    pub attributes: Vec<AttrManifest>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttrManifest {
    pub name: String,
    pub values: usize,
    pub max_values_per_item: usize,
}

// ── ingestion ────────────────────────────────────────────────────────────

struct RawRow {
    user: String,
    item: String,
    ts: i64,
    line: usize,
}

fn parse_interactions(path: &Path) -> Result<Vec<RawRow>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let path_str = path.display().to_string();
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if i == 0 {
            if line.trim_end() != "user_id\titem_id\ttimestamp" {
                return Err(Error::Parse {
                    path: path_str,
                    line: lineno,
                    msg: "expected header `user_id\\titem_id\\ttimestamp`".into(),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (user, item, ts) = match (fields.next(), fields.next(), fields.next(), fields.next()) {
            (Some(u), Some(v), Some(t), None) => (u, v, t),
            _ => {
                return Err(Error::Parse {
                    path: path_str,
                    line: lineno,
                    msg: "expected exactly three tab-separated fields".into(),
                })
            }
        };
        let ts: i64 = ts.parse().map_err(|_| Error::Parse {
            path: path_str.clone(),
            line: lineno,
            msg: format!("bad timestamp `{ts}`"),
        })?;
        if user.is_empty() || item.is_empty() {
            return Err(Error::Parse {
                path: path_str,
                line: lineno,
                msg: "empty user or item id".into(),
            });
        }
        rows.push(RawRow {
            user: user.to_string(),
            item: item.to_string(),
            ts,
            line: lineno,
        });
    }
    Ok(rows)
}

#[derive(Deserialize)]
struct AttrLine {
    item_id: String,
    attributes: BTreeMap<String, Vec<String>>,
}

fn parse_attributes(path: &Path) -> Result<Vec<AttrLine>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let path_str = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: AttrLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path_str.clone(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(parsed);
    }
    Ok(out)
}

/// Drop rows of users/items occurring fewer than five times, repeatedly,
/// until stable. Removing a user can push an item below the threshold and
/// vice versa, hence the fixpoint.
fn five_core(mut rows: Vec<RawRow>) -> Vec<RawRow> {
    loop {
        let mut user_count: HashMap<String, usize> = HashMap::new();
        let mut item_count: HashMap<String, usize> = HashMap::new();
        for r in &rows {
            *user_count.entry(r.user.clone()).or_default() += 1;
            *item_count.entry(r.item.clone()).or_default() += 1;
        }
        let before = rows.len();
        rows.retain(|r| {
            user_count[&r.user] >= MIN_OCCURRENCES && item_count[&r.item] >= MIN_OCCURRENCES
        });
        if rows.len() == before {
            return rows;
        }
    }
}

/// Build the dataset from an interactions TSV and an attributes JSONL file.
pub fn ingest(
    interactions_path: &Path,
    attributes_path: &Path,
    max_values_per_item: usize,
) -> Result<InteractionDataset> {
    let rows = parse_interactions(interactions_path)?;
    let rows = five_core(rows);
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }

    // Dense indices by first appearance in file order, for determinism.
    let mut user_index: HashMap<String, usize> = HashMap::new();
    let mut users: Vec<String> = Vec::new();
    let mut item_index: HashMap<String, u32> = HashMap::new();
    let mut item_ids: Vec<String> = Vec::new();
    for r in &rows {
        user_index.entry(r.user.clone()).or_insert_with(|| {
            users.push(r.user.clone());
            users.len() - 1
        });
        item_index.entry(r.item.clone()).or_insert_with(|| {
            item_ids.push(r.item.clone());
            item_ids.len() as u32
        });
    }

    let mut per_user: Vec<Vec<(i64, usize, u32)>> = vec![Vec::new(); users.len()];
    for r in &rows {
        per_user[user_index[&r.user]].push((r.ts, r.line, item_index[&r.item]));
    }
    let sequences: Vec<Vec<u32>> = per_user
        .into_iter()
        .map(|mut v| {
            // Ties in timestamp keep input order via the line number.
            v.sort_by_key(|&(ts, line, _)| (ts, line));
            v.into_iter().map(|(_, _, item)| item).collect()
        })
        .collect();

    // Attribute catalogs: types are the union of keys, in sorted order.
    let attr_lines = parse_attributes(attributes_path)?;
    let mut type_names: Vec<String> = attr_lines
        .iter()
        .flat_map(|l| l.attributes.keys().cloned())
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    type_names.sort();

    let mut catalog_by_item: HashMap<&str, &BTreeMap<String, Vec<String>>> = HashMap::new();
    for l in &attr_lines {
        catalog_by_item.insert(l.item_id.as_str(), &l.attributes);
    }

    let mut attributes = Vec::new();
    for name in type_names {
        let mut value_index: HashMap<String, u32> = HashMap::new();
        let mut values: Vec<String> = Vec::new();
        let mut per_item: Vec<Vec<u32>> = vec![Vec::new(); item_ids.len() + 1];
        // Iterate items in dense-index order so value indices are stable.
        for (i, id) in item_ids.iter().enumerate() {
            let Some(cat) = catalog_by_item.get(id.as_str()) else {
                continue;
            };
            let Some(vals) = cat.get(&name) else {
                continue;
            };
            let mut seen = HashSet::new();
            for v in vals {
                if !seen.insert(v.as_str()) {
                    continue; // duplicate within one item's list
                }
                if per_item[i + 1].len() >= max_values_per_item {
                    break; // keep the first `cap` in catalog order
                }
                let ix = *value_index.entry(v.clone()).or_insert_with(|| {
                    values.push(v.clone());
                    values.len() as u32
                });
                per_item[i + 1].push(ix);
            }
        }
        let max_per_item = per_item.iter().map(|v| v.len()).max().unwrap_or(0);
        attributes.push(AttributeCatalog {
            name,
            values,
            per_item,
            max_per_item,
        });
    }

    Ok(InteractionDataset {
        users,
        sequences,
        item_ids,
        attributes,
    })
}

// ── leave-one-out split ──────────────────────────────────────────────────

/// One prediction instance: `sequences[user][..ctx_len]` → `target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub user: usize,
    pub ctx_len: usize,
    pub target: u32,
}

#[derive(Debug, Clone)]
pub struct SplitViews {
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Users too short for validation/test whose data went wholly to train.
    pub short_sequences: usize,
}

/// Leave-one-out: per user with n ≥ 3 the last item is the test target and
/// the second-to-last the validation target; training consists of every
/// prefix `[v₁..v_k] → v_{k+1}` with target index up to n−1. Sequences
/// shorter than 3 contribute training prefixes only.
pub fn split_leave_one_out(ds: &InteractionDataset) -> SplitViews {
    let mut views = SplitViews {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        short_sequences: 0,
    };
    for (u, seq) in ds.sequences.iter().enumerate() {
        let n = seq.len();
        if n < 3 {
            views.short_sequences += 1;
            for k in 1..n {
                views.train.push(Sample {
                    user: u,
                    ctx_len: k,
                    target: seq[k],
                });
            }
            continue;
        }
        for k in 1..=(n - 2) {
            views.train.push(Sample {
                user: u,
                ctx_len: k,
                target: seq[k],
            });
        }
        views.valid.push(Sample {
            user: u,
            ctx_len: n - 2,
            target: seq[n - 2],
        });
        views.test.push(Sample {
            user: u,
            ctx_len: n - 1,
            target: seq[n - 1],
        });
    }
    views
}

// ── batching ─────────────────────────────────────────────────────────────

/// Left-padded model input for a group of samples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub max_len: usize,
    /// `size × max_len`, left-padded with 0; position t holds the item index.
    pub items: Vec<u32>,
    /// Per attribute type: `size × max_len × a_j` value indices, 0-padded.
    pub attr_values: Vec<Vec<u32>>,
    /// Real context length per row (≤ max_len).
    pub lengths: Vec<usize>,
    /// Next item per row; never the padding index.
    pub targets: Vec<u32>,
    /// Per attribute type: `size × |fj|` multi-hot vector of the target
    /// item's values, over real value classes (class c ↔ value index c+1).
    pub attr_multi_hot: Vec<Vec<f64>>,
}

impl Batch {
    /// Row groups for mean-pooled attribute embedding: for attribute `j`,
    /// per (row, position), the table rows (= value indices) to average.
    pub fn attr_groups(&self, j: usize) -> Rc<Vec<Vec<usize>>> {
        let a = &self.attr_values[j];
        let aj = if self.size * self.max_len == 0 {
            0
        } else {
            a.len() / (self.size * self.max_len)
        };
        let mut groups = Vec::with_capacity(self.size * self.max_len);
        for p in 0..self.size * self.max_len {
            let vals: Vec<usize> = a[p * aj..(p + 1) * aj]
                .iter()
                .filter(|&&v| v != PAD)
                .map(|&v| v as usize)
                .collect();
            groups.push(vals);
        }
        Rc::new(groups)
    }
}

fn build_batch(ds: &InteractionDataset, samples: &[Sample], max_len: usize) -> Batch {
    let size = samples.len();
    let mut items = vec![PAD; size * max_len];
    let mut lengths = vec![0; size];
    let mut targets = vec![PAD; size];
    for (b, s) in samples.iter().enumerate() {
        let seq = &ds.sequences[s.user][..s.ctx_len];
        let keep = seq.len().min(max_len);
        let ctx = &seq[seq.len() - keep..]; // most recent `max_len` items
        lengths[b] = keep;
        targets[b] = s.target;
        items[b * max_len + (max_len - keep)..(b + 1) * max_len].copy_from_slice(ctx);
    }

    let mut attr_values = Vec::new();
    let mut attr_multi_hot = Vec::new();
    for cat in &ds.attributes {
        let aj = cat.max_per_item.max(1);
        let mut vals = vec![PAD; size * max_len * aj];
        let mut hot = vec![0.0; size * cat.vocab_size()];
        for b in 0..size {
            for t in 0..max_len {
                let item = items[b * max_len + t];
                if item == PAD {
                    continue;
                }
                let list = &cat.per_item[item as usize];
                for (s, &v) in list.iter().enumerate() {
                    vals[(b * max_len + t) * aj + s] = v;
                }
            }
            for &v in &cat.per_item[targets[b] as usize] {
                hot[b * cat.vocab_size() + (v as usize - 1)] = 1.0;
            }
        }
        attr_values.push(vals);
        attr_multi_hot.push(hot);
    }

    Batch {
        size,
        max_len,
        items,
        attr_values,
        lengths,
        targets,
        attr_multi_hot,
    }
}

/// Deterministic batch stream: the sample order is a Fisher-Yates shuffle
/// seeded by (seed, epoch); the final short batch is kept.
pub struct Batches<'a> {
    ds: &'a InteractionDataset,
    order: Vec<Sample>,
    max_len: usize,
    batch_size: usize,
    next: usize,
}

impl<'a> Iterator for Batches<'a> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let batch = build_batch(self.ds, &self.order[self.next..end], self.max_len);
        self.next = end;
        Some(batch)
    }
}

pub fn make_batches<'a>(
    ds: &'a InteractionDataset,
    view: &[Sample],
    max_len: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    shuffle: bool,
) -> Batches<'a> {
    assert!(max_len >= 1 && batch_size >= 1);
    let mut order = view.to_vec();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch.wrapping_add(1));
        order.shuffle(&mut rng);
    }
    Batches {
        ds,
        order,
        max_len,
        batch_size,
        next: 0,
    }
}

/// Convenience for building one batch from explicit samples (evaluation
/// shards, diagnostics).
pub fn batch_of(ds: &InteractionDataset, samples: &[Sample], max_len: usize) -> Batch {
    build_batch(ds, samples, max_len)
}

// ── binary cache ─────────────────────────────────────────────────────────

const CACHE_MAGIC: &[u8; 8] = b"DIFSRDS\x01";

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

/// Serialize to the on-disk cache (`dataset.bin`).
pub fn write_cache(ds: &InteractionDataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    put_u32(&mut out, ds.users.len() as u32);
    for u in &ds.users {
        put_str(&mut out, u);
    }
    put_u32(&mut out, ds.item_ids.len() as u32);
    for i in &ds.item_ids {
        put_str(&mut out, i);
    }
    for seq in &ds.sequences {
        put_u32(&mut out, seq.len() as u32);
        for &v in seq {
            put_u32(&mut out, v);
        }
    }
    put_u32(&mut out, ds.attributes.len() as u32);
    for cat in &ds.attributes {
        put_str(&mut out, &cat.name);
        put_u32(&mut out, cat.values.len() as u32);
        for v in &cat.values {
            put_str(&mut out, v);
        }
        put_u32(&mut out, cat.max_per_item as u32);
        put_u32(&mut out, cat.per_item.len() as u32);
        for list in &cat.per_item {
            put_u32(&mut out, list.len() as u32);
            for &v in list {
                put_u32(&mut out, v);
            }
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

struct CacheReader {
    buf: Vec<u8>,
    pos: usize,
    path: String,
}

impl CacheReader {
    fn err(&self, msg: &str) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line: 0,
            msg: msg.into(),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        if self.pos + 4 > self.buf.len() {
            return Err(self.err("truncated cache"));
        }
        let v = u32::from_le_bytes(self.buf[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        if self.pos + len > self.buf.len() {
            return Err(self.err("truncated cache"));
        }
        let s = std::str::from_utf8(&self.buf[self.pos..self.pos + len])
            .map_err(|_| self.err("invalid utf-8 in cache"))?
            .to_string();
        self.pos += len;
        Ok(s)
    }
}

/// Load a dataset cache written by [`write_cache`].
pub fn read_cache(path: &Path) -> Result<InteractionDataset> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = CacheReader {
        buf,
        pos: 0,
        path: path.display().to_string(),
    };
    if r.buf.len() < 8 || &r.buf[..8] != CACHE_MAGIC {
        return Err(r.err("not a dataset cache (bad magic)"));
    }
    r.pos = 8;

    let n_users = r.u32()? as usize;
    let users: Vec<String> = (0..n_users).map(|_| r.str()).collect::<Result<_>>()?;
    let n_items = r.u32()? as usize;
    let item_ids: Vec<String> = (0..n_items).map(|_| r.str()).collect::<Result<_>>()?;
    let mut sequences = Vec::with_capacity(n_users);
    for _ in 0..n_users {
        let len = r.u32()? as usize;
        let mut seq = Vec::with_capacity(len);
        for _ in 0..len {
            let v = r.u32()?;
            if v == PAD || v as usize > n_items {
                return Err(r.err("item index out of range in cache"));
            }
            seq.push(v);
        }
        sequences.push(seq);
    }
    let n_attrs = r.u32()? as usize;
    let mut attributes = Vec::with_capacity(n_attrs);
    for _ in 0..n_attrs {
        let name = r.str()?;
        let n_values = r.u32()? as usize;
        let values: Vec<String> = (0..n_values).map(|_| r.str()).collect::<Result<_>>()?;
        let max_per_item = r.u32()? as usize;
        let rows = r.u32()? as usize;
        if rows != n_items + 1 {
            return Err(r.err("attribute table row count mismatch"));
        }
        let mut per_item = Vec::with_capacity(rows);
        for _ in 0..rows {
            let len = r.u32()? as usize;
            let mut list = Vec::with_capacity(len);
            for _ in 0..len {
                let v = r.u32()?;
                if v == PAD || v as usize > n_values {
                    return Err(r.err("attribute value index out of range in cache"));
                }
                list.push(v);
            }
            per_item.push(list);
        }
        attributes.push(AttributeCatalog {
            name,
            values,
            per_item,
            max_per_item,
        });
    }
    Ok(InteractionDataset {
        users,
        sequences,
        item_ids,
        attributes,
    })
}

#[cfg(test)]
mod tests;
