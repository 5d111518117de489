//! Single-file model archive.
//!
//! All integers little-endian.
//!
//! ```text
//! magic        8 bytes   "QACMODEL"
//! version      u32       currently 1
//! header       u32 length + UTF-8 JSON {config, vocabulary, user_keys}
//! n_tensors    u32
//!   tensor     u32 name length, name bytes,
//!              u8 dtype (1 = f32, 2 = f64), u32 rank, rank × u64 dims,
//!              element data in row-major order
//! checksum     u32       CRC-32 of every preceding byte
//! ```
//!
//! Parameter tensors use the names from [`Parameters::tensors`]; the user
//! table is stored as `user_embeddings`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{UserId, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{FloatWidth, ModelConfig, Parameters, UserEmbeddings};

const MAGIC: &[u8; 8] = b"QACMODEL";
pub const FORMAT_VERSION: u32 = 1;
const USER_TENSOR: &str = "user_embeddings";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelArchive {
    pub params: Parameters,
    pub users: UserEmbeddings,
    pub vocab: Vocabulary,
    /// Training user keys and their embedding rows.
    pub user_keys: BTreeMap<String, UserId>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocabulary: Vec<String>,
    #[serde(default)]
    user_keys: BTreeMap<String, u32>,
}

pub fn save_model(
    params: &Parameters,
    users: &UserEmbeddings,
    vocab: &Vocabulary,
    user_keys: &BTreeMap<String, UserId>,
    path: &Path,
) -> Result<()> {
    let bytes = encode(params, users, vocab, user_keys)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelArchive> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn encode(
    params: &Parameters,
    users: &UserEmbeddings,
    vocab: &Vocabulary,
    user_keys: &BTreeMap<String, UserId>,
) -> Result<Vec<u8>> {
    if vocab.len() != params.config.vocab_size {
        return Err(Error::Dimension(format!(
            "vocabulary has {} symbols, model expects {}",
            vocab.len(),
            params.config.vocab_size
        )));
    }
    let header = Header {
        config: params.config.clone(),
        vocabulary: vocab.chars().map(String::from).collect(),
        user_keys: user_keys.iter().map(|(k, v)| (k.clone(), v.0)).collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let width = params.config.float_width;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let mut tensors = params.tensors();
    tensors.push((
        USER_TENSOR,
        users.table.shape().to_vec(),
        users.table.as_slice().expect("standard layout"),
    ));
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(match width {
            FloatWidth::F32 => 1,
            FloatWidth::F64 => 2,
        });
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in data {
            match width {
                FloatWidth::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                FloatWidth::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<ModelArchive> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a model archive".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = ByteReader::new(&body[MAGIC.len()..]);
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = r.u32()? as usize;
    let header: Header =
        serde_json::from_slice(r.bytes(header_len)?).map_err(|e| Error::Format(e.to_string()))?;
    let mut chars = Vec::with_capacity(header.vocabulary.len());
    for s in &header.vocabulary {
        let mut it = s.chars();
        match (it.next(), it.next()) {
            (Some(c), None) => chars.push(c),
            _ => {
                return Err(Error::Format(format!(
                    "vocabulary entry {s:?} is not one character"
                )))
            }
        }
    }
    let vocab = Vocabulary::from_chars(chars)?;
    let mut params = Parameters::zeros(&header.config)?;
    if vocab.len() != params.config.vocab_size {
        return Err(Error::Format("vocabulary does not match config".into()));
    }

    let n_tensors = r.u32()? as usize;
    let mut loaded: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for _ in 0..n_tensors {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(name_len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let dtype = r.u8()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let data = match dtype {
            1 => (0..n)
                .map(|_| r.f32().map(f64::from))
                .collect::<Result<Vec<_>>>()?,
            2 => (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?,
            other => return Err(Error::Format(format!("unknown dtype {other}"))),
        };
        loaded.insert(name, (shape, data));
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes in model archive".into()));
    }

    let expected: Vec<(&'static str, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    for ((name, shape), (_, slot)) in expected.iter().zip(params.tensors_mut()) {
        let (got_shape, data) = loaded
            .remove(*name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        if &got_shape != shape {
            return Err(Error::Format(format!(
                "tensor {name} has shape {got_shape:?}, expected {shape:?}"
            )));
        }
        slot.copy_from_slice(&data);
    }
    let (shape, data) = loaded
        .remove(USER_TENSOR)
        .ok_or_else(|| Error::Format("missing user embeddings".into()))?;
    if shape.len() != 2 || shape[1] != params.config.user_dim || shape[0] == 0 {
        return Err(Error::Format(format!("user table has shape {shape:?}")));
    }
    if let Some(extra) = loaded.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra}")));
    }
    let users = UserEmbeddings {
        table: Array2::from_shape_vec((shape[0], shape[1]), data)
            .map_err(|e| Error::Format(e.to_string()))?,
    };
    let user_keys = header
        .user_keys
        .into_iter()
        .map(|(k, v)| (k, UserId(v)))
        .collect();
    Ok(ModelArchive {
        params,
        users,
        vocab,
        user_keys,
    })
}

/// Bounds-checked little-endian cursor.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    pub fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }

    pub fn f32(&mut self) -> Result<f32> {
        self.array().map(f32::from_le_bytes)
    }

    pub fn f64(&mut self) -> Result<f64> {
        self.array().map(f64::from_le_bytes)
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }
}
