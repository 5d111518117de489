//! Most-popular-completion baseline over a prefix trie.
//!
//! # Index file format
//!
//! All integers little-endian.
//!
//! ```text
//! magic        8 bytes   "QACMPC\0\0"
//! version      u32       currently 1
//! min_count    u64
//! n_queries    u64
//!   query      u32 byte length, UTF-8 bytes, u64 count      (sorted by text)
//! n_nodes      u64
//!   node       u32 codepoint (0 for the root)
//!              u32 terminal query index (u32::MAX if none)
//!              u32 child count, then that many u32 node indices
//! checksum     u32       CRC-32 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::corpus::{query_counts, QueryRecord};
use crate::error::{Error, Result};

pub const DEFAULT_MIN_COUNT: u64 = 3;
const MAGIC: &[u8; 8] = b"QACMPC\0\0";
const VERSION: u32 = 1;
const NONE: u32 = u32::MAX;
/// Completions cached at every node.
const CACHED_TOP: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
struct Node {
    ch: char,
    terminal: Option<u32>,
    children: BTreeMap<char, u32>,
    /// Best queries in the subtree, by count desc then text asc.
    top: Vec<u32>,
}

impl Node {
    fn new(ch: char) -> Self {
        Self {
            ch,
            terminal: None,
            children: BTreeMap::new(),
            top: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MpcIndex {
    min_count: u64,
    queries: Vec<(String, u64)>,
    nodes: Vec<Node>,
}

/// Indexes every query seen at least `min_count` times.
pub fn build_mpc_index(records: &[QueryRecord], min_count: u64) -> MpcIndex {
    MpcIndex::from_counts(query_counts(records), min_count)
}

/// Up to `top_n` indexed queries starting with `prefix`, by count desc then text asc.
pub fn mpc_complete(index: &MpcIndex, prefix: &str, top_n: usize) -> Vec<(String, u64)> {
    index.complete(prefix, top_n)
}

impl MpcIndex {
    pub fn from_counts(counts: BTreeMap<String, u64>, min_count: u64) -> Self {
        let queries: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(q, c)| *c >= min_count && *c > 0 && !q.is_empty())
            .collect();
        let mut nodes = vec![Node::new('\0')];
        for (qi, (query, _)) in queries.iter().enumerate() {
            let mut at = 0usize;
            for ch in query.chars() {
                at = match nodes[at].children.get(&ch) {
                    Some(&next) => next as usize,
                    None => {
                        nodes.push(Node::new(ch));
                        let id = (nodes.len() - 1) as u32;
                        nodes[at].children.insert(ch, id);
                        id as usize
                    }
                };
            }
            nodes[at].terminal = Some(qi as u32);
        }
        let mut index = Self {
            min_count,
            queries,
            nodes,
        };
        index.fill_top();
        index
    }

    fn better(&self, a: u32, b: u32) -> std::cmp::Ordering {
        let (qa, ca) = &self.queries[a as usize];
        let (qb, cb) = &self.queries[b as usize];
        cb.cmp(ca).then_with(|| qa.cmp(qb))
    }

    fn fill_top(&mut self) {
        // children always have larger ids than their parent
        for id in (0..self.nodes.len()).rev() {
            let mut top: Vec<u32> = self.nodes[id].terminal.into_iter().collect();
            for &child in self.nodes[id].children.values() {
                top.extend_from_slice(&self.nodes[child as usize].top);
            }
            top.sort_by(|&a, &b| self.better(a, b));
            top.truncate(CACHED_TOP);
            self.nodes[id].top = top;
        }
    }

    fn locate(&self, prefix: &str) -> Option<usize> {
        let mut at = 0usize;
        for ch in prefix.chars() {
            at = *self.nodes[at].children.get(&ch)? as usize;
        }
        Some(at)
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Indexed queries with their counts, sorted by text.
    pub fn queries(&self) -> &[(String, u64)] {
        &self.queries
    }

    pub fn count(&self, query: &str) -> Option<u64> {
        self.queries
            .binary_search_by(|(q, _)| q.as_str().cmp(query))
            .ok()
            .map(|i| self.queries[i].1)
    }

    /// Whether some indexed query starts with `prefix`.
    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.locate(prefix)
            .is_some_and(|n| !self.nodes[n].top.is_empty())
    }

    pub fn complete(&self, prefix: &str, top_n: usize) -> Vec<(String, u64)> {
        let Some(node) = self.locate(prefix) else {
            return Vec::new();
        };
        let ids: Vec<u32> = if top_n <= CACHED_TOP {
            self.nodes[node].top.iter().take(top_n).copied().collect()
        } else {
            let mut all = Vec::new();
            let mut stack = vec![node];
            while let Some(n) = stack.pop() {
                all.extend(self.nodes[n].terminal);
                stack.extend(self.nodes[n].children.values().map(|&c| c as usize));
            }
            all.sort_by(|&a, &b| self.better(a, b));
            all.truncate(top_n);
            all
        };
        ids.into_iter()
            .map(|i| self.queries[i as usize].clone())
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.min_count.to_le_bytes());
        out.extend_from_slice(&(self.queries.len() as u64).to_le_bytes());
        for (q, c) in &self.queries {
            out.extend_from_slice(&(q.len() as u32).to_le_bytes());
            out.extend_from_slice(q.as_bytes());
            out.extend_from_slice(&c.to_le_bytes());
        }
        out.extend_from_slice(&(self.nodes.len() as u64).to_le_bytes());
        for node in &self.nodes {
            out.extend_from_slice(&(node.ch as u32).to_le_bytes());
            out.extend_from_slice(&node.terminal.unwrap_or(NONE).to_le_bytes());
            out.extend_from_slice(&(node.children.len() as u32).to_le_bytes());
            for &child in node.children.values() {
                out.extend_from_slice(&child.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("not an MPC index file".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = crate::archive::ByteReader::new(&body[MAGIC.len()..]);
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let min_count = r.u64()?;
        let n_queries = r.u64()? as usize;
        let mut queries = Vec::with_capacity(n_queries.min(1 << 20));
        for _ in 0..n_queries {
            let len = r.u32()? as usize;
            let text = String::from_utf8(r.bytes(len)?.to_vec())
                .map_err(|_| Error::Format("query is not UTF-8".into()))?;
            queries.push((text, r.u64()?));
        }
        let n_nodes = r.u64()? as usize;
        let mut nodes = Vec::with_capacity(n_nodes.min(1 << 20));
        let mut child_lists = Vec::with_capacity(n_nodes.min(1 << 20));
        for _ in 0..n_nodes {
            let ch =
                char::from_u32(r.u32()?).ok_or_else(|| Error::Format("bad codepoint".into()))?;
            let terminal = match r.u32()? {
                NONE => None,
                i if (i as usize) < n_queries => Some(i),
                i => return Err(Error::Format(format!("terminal index {i} out of range"))),
            };
            let n_children = r.u32()? as usize;
            let mut children = Vec::with_capacity(n_children.min(1 << 16));
            for _ in 0..n_children {
                children.push(r.u32()?);
            }
            nodes.push(Node::new(ch));
            nodes.last_mut().expect("pushed").terminal = terminal;
            child_lists.push(children);
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes in MPC index".into()));
        }
        for (id, children) in child_lists.into_iter().enumerate() {
            for child in children {
                if child as usize <= id || child as usize >= n_nodes {
                    return Err(Error::Format(format!("child index {child} out of order")));
                }
                let ch = nodes[child as usize].ch;
                nodes[id].children.insert(ch, child);
            }
        }
        let mut index = Self {
            min_count,
            queries,
            nodes,
        };
        index.fill_top();
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
