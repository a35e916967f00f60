//! Descriptor banks and episode files.
//!
//! A bank is an immutable `count × dim` matrix of `f32` rows, each tagged
//! with a unique string id. On disk it is a pair of files:
//!
//! ```text
//! <path>           "NEDB" | u32 version=1 | u32 count | u32 dim | count*dim f32   (all little-endian)
//! <path>.ids.json  ["id0", "id1", ...]
//! ```
//!
//! Episodes live in a line-delimited JSON file, one ranking instance per line:
//!
//! ```text
//! {"context_dim": 24}                                   (optional header)
//! {"context":[0.1,...],"pos":"r12","neg":["r3","r40"],"task":"image"}
//! ```

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::atomic::write_atomic;
use crate::error::{Error, Result};

pub const BANK_MAGIC: [u8; 4] = *b"NEDB";
pub const BANK_VERSION: u32 = 1;
const HEADER_LEN: u64 = 16;

#[derive(Clone, PartialEq)]
pub struct DescriptorBank {
    dim: usize,
    data: Vec<f32>,
    ids: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl fmt::Debug for DescriptorBank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DescriptorBank")
            .field("dim", &self.dim)
            .field("count", &self.len())
            .finish()
    }
}

impl DescriptorBank {
    /// Builds a bank from a row-major buffer, enforcing every bank invariant.
    pub fn new(dim: usize, data: Vec<f32>, ids: Vec<String>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("bank dimension must be positive".into()));
        }
        if data.len() != dim * ids.len() {
            return Err(Error::IdCountMismatch {
                expected: data.len() / dim,
                found: ids.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEntry {
                row: pos / dim,
                col: pos % dim,
                offset: HEADER_LEN + 4 * pos as u64,
            });
        }
        let mut lookup = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if lookup.insert(id.clone(), row).is_some() {
                return Err(Error::DuplicateId { id: id.clone(), row });
            }
        }
        Ok(Self {
            dim,
            data,
            ids,
            lookup,
        })
    }

    pub fn from_rows<S: Into<String>>(dim: usize, rows: impl IntoIterator<Item = (S, Vec<f32>)>) -> Result<Self> {
        let mut data = Vec::new();
        let mut ids = Vec::new();
        for (id, row) in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            ids.push(id.into());
            data.extend_from_slice(&row);
        }
        Self::new(dim, data, ids)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, row: usize) -> &str {
        &self.ids[row]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn row_f64(&self, row: usize) -> Array1<f64> {
        self.row(row).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }
}

pub fn ids_sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids.json");
    PathBuf::from(s)
}

/// Serializes the matrix part of a bank (the ids go to the sidecar).
pub fn encode_bank(bank: &DescriptorBank) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN as usize + 4 * bank.data.len());
    out.extend_from_slice(&BANK_MAGIC);
    out.extend_from_slice(&BANK_VERSION.to_le_bytes());
    out.extend_from_slice(&(bank.len() as u32).to_le_bytes());
    out.extend_from_slice(&(bank.dim as u32).to_le_bytes());
    for v in &bank.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses a bank payload together with its id list.
pub fn decode_bank(bytes: &[u8], ids: Vec<String>) -> Result<DescriptorBank> {
    let (count, dim) = decode_header(bytes)?;
    if ids.len() != count {
        return Err(Error::IdCountMismatch {
            expected: count,
            found: ids.len(),
        });
    }
    let data: Vec<f32> = bytes[HEADER_LEN as usize..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    DescriptorBank::new(dim, data, ids)
}

fn decode_header(bytes: &[u8]) -> Result<(usize, usize)> {
    if bytes.len() < 4 || bytes[..4] != BANK_MAGIC {
        return Err(Error::BadMagic {
            expected: BANK_MAGIC,
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN as usize {
        return Err(Error::TruncatedPayload {
            expected: HEADER_LEN,
            found: bytes.len() as u64,
        });
    }
    let word = |at: usize| u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]);
    let version = word(4);
    if version != BANK_VERSION {
        return Err(Error::VersionMismatch {
            expected: BANK_VERSION,
            found: version,
        });
    }
    let count = word(8) as usize;
    let dim = word(12) as usize;
    if dim == 0 {
        return Err(Error::Format("bank header declares dim = 0".into()));
    }
    let expected = HEADER_LEN + 4 * (count as u64) * (dim as u64);
    let found = bytes.len() as u64;
    if found < expected {
        return Err(Error::TruncatedPayload { expected, found });
    }
    if found > expected {
        return Err(Error::TrailingBytes { expected, found });
    }
    Ok((count, dim))
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<DescriptorBank> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    // Header problems are reported before touching the sidecar.
    decode_header(&bytes)?;
    let sidecar = ids_sidecar_path(path);
    let raw = std::fs::read(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let ids: Vec<String> =
        serde_json::from_slice(&raw).map_err(|e| Error::Format(format!("{}: {e}", sidecar.display())))?;
    decode_bank(&bytes, ids)
}

pub fn save_bank(bank: &DescriptorBank, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ids = serde_json::to_vec(&bank.ids).expect("string list serializes");
    write_atomic(path, &encode_bank(bank))?;
    write_atomic(&ids_sidecar_path(path), &ids)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskLabel {
    #[serde(rename = "text")]
    Text,
    #[serde(rename = "image")]
    Image,
    #[serde(rename = "both")]
    TextImage,
}

impl TaskLabel {
    pub const ALL: [TaskLabel; 3] = [TaskLabel::Text, TaskLabel::Image, TaskLabel::TextImage];

    pub fn class_index(self) -> usize {
        self as usize
    }

    pub fn from_class_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// One ranking instance: a context vector, one positive and K negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetEpisode {
    pub context: Vec<f64>,
    pub positive_id: String,
    pub negative_ids: Vec<String>,
    pub task_label: TaskLabel,
    /// Bank rows of `positive_id` and `negative_ids`, resolved at load.
    pub positive_row: usize,
    pub negative_rows: Vec<usize>,
}

impl TargetEpisode {
    pub fn k(&self) -> usize {
        self.negative_ids.len()
    }

    /// Builds an episode from bank rows; ids are taken from the bank.
    pub fn from_rows(
        bank: &DescriptorBank,
        context: Vec<f64>,
        positive_row: usize,
        negative_rows: Vec<usize>,
        task_label: TaskLabel,
    ) -> Result<Self> {
        if negative_rows.is_empty() {
            return Err(Error::InvalidArgument("an episode needs at least one negative".into()));
        }
        if negative_rows.contains(&positive_row) {
            return Err(Error::InvalidArgument("positive appears among negatives".into()));
        }
        if let Some(&bad) = std::iter::once(&positive_row)
            .chain(&negative_rows)
            .find(|&&r| r >= bank.len())
        {
            return Err(Error::InvalidArgument(format!("row {bad} out of range")));
        }
        Ok(Self {
            context,
            positive_id: bank.id(positive_row).to_owned(),
            negative_ids: negative_rows.iter().map(|&r| bank.id(r).to_owned()).collect(),
            task_label,
            positive_row,
            negative_rows,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct EpisodeRecord<'a> {
    context: std::borrow::Cow<'a, [f64]>,
    pos: std::borrow::Cow<'a, str>,
    neg: Vec<std::borrow::Cow<'a, str>>,
    task: TaskLabel,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeHeader {
    context_dim: usize,
}

/// Parses episode text, resolving ids against `bank`.
pub fn parse_episodes(text: &str, bank: &DescriptorBank) -> Result<Vec<TargetEpisode>> {
    let mut context_dim = bank.dim();
    let mut episodes = Vec::new();
    let mut seen_record = false;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        if !seen_record {
            if let Ok(header) = serde_json::from_str::<EpisodeHeader>(raw) {
                if header.context_dim == 0 {
                    return Err(Error::MalformedLine {
                        line,
                        reason: "context_dim must be positive".into(),
                    });
                }
                context_dim = header.context_dim;
                seen_record = true;
                continue;
            }
        }
        seen_record = true;
        let rec: EpisodeRecord = serde_json::from_str(raw).map_err(|e| Error::MalformedLine {
            line,
            reason: e.to_string(),
        })?;
        if rec.context.len() != context_dim {
            return Err(Error::LineDimensionMismatch { line });
        }
        if rec.context.iter().any(|v| !v.is_finite()) {
            return Err(Error::MalformedLine {
                line,
                reason: "non-finite context entry".into(),
            });
        }
        if rec.neg.is_empty() {
            return Err(Error::MalformedLine {
                line,
                reason: "no negatives".into(),
            });
        }
        if rec.neg.contains(&rec.pos) {
            return Err(Error::MalformedLine {
                line,
                reason: format!("positive {:?} listed among negatives", rec.pos),
            });
        }
        let resolve = |id: &str| {
            bank.position(id).ok_or_else(|| Error::UnknownId {
                line,
                id: id.to_owned(),
            })
        };
        let positive_row = resolve(&rec.pos)?;
        let negative_rows = rec.neg.iter().map(|n| resolve(n)).collect::<Result<Vec<_>>>()?;
        episodes.push(TargetEpisode {
            context: rec.context.into_owned(),
            positive_id: rec.pos.into_owned(),
            negative_ids: rec.neg.into_iter().map(|n| n.into_owned()).collect(),
            task_label: rec.task,
            positive_row,
            negative_rows,
        });
    }
    Ok(episodes)
}

pub fn load_episodes(path: impl AsRef<Path>, bank: &DescriptorBank) -> Result<Vec<TargetEpisode>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_episodes(&text, bank)
}

/// Renders episodes as line-delimited JSON. A header line is written only
/// when the context length differs from `bank_dim`.
pub fn format_episodes(episodes: &[TargetEpisode], bank_dim: usize) -> String {
    let mut out = String::new();
    if let Some(first) = episodes.first() {
        if first.context.len() != bank_dim {
            let header = EpisodeHeader {
                context_dim: first.context.len(),
            };
            out.push_str(&serde_json::to_string(&header).expect("header serializes"));
            out.push('\n');
        }
    }
    for ep in episodes {
        let rec = EpisodeRecord {
            context: std::borrow::Cow::Borrowed(&ep.context),
            pos: std::borrow::Cow::Borrowed(&ep.positive_id),
            neg: ep.negative_ids.iter().map(|s| std::borrow::Cow::Borrowed(s.as_str())).collect(),
            task: ep.task_label,
        };
        out.push_str(&serde_json::to_string(&rec).expect("episode serializes"));
        out.push('\n');
    }
    out
}

pub fn save_episodes(episodes: &[TargetEpisode], bank_dim: usize, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), format_episodes(episodes, bank_dim).as_bytes())
}
