//! The retrieval corpus: document embeddings, relevance judgments, and the
//! conversation-level split table, persisted as a single HCRP container.

use std::io::Read;
use std::path::Path;

use crate::binfmt;

use super::EvalError;

const MAGIC: &[u8; 4] = b"HCRP";
const VERSION: u32 = 1;

/// Which partition a query's conversation belongs to. Splits are assigned
/// per conversation, never per trigger, so no conversation leaks across
/// partitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn to_u8(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One retrieval trigger's ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub trigger_id: String,
    pub conversation_id: String,
    /// 1-based turn index of the trigger within its conversation.
    pub turn: u32,
    pub split: Split,
    /// Indices into the corpus document table. May be empty; such queries
    /// are excluded from metric averages but still counted.
    pub relevant: Vec<u32>,
}

/// Documents plus judged queries.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    /// Embedding width.
    pub d: usize,
    pub doc_ids: Vec<String>,
    /// `doc_count x d`, row-major, unit rows.
    pub embeddings: Vec<f64>,
    pub queries: Vec<QueryRecord>,
}

impl Corpus {
    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn doc_embedding(&self, idx: usize) -> &[f64] {
        &self.embeddings[idx * self.d..(idx + 1) * self.d]
    }

    pub fn queries_in(&self, split: Split) -> impl Iterator<Item = &QueryRecord> {
        self.queries.iter().filter(move |q| q.split == split)
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        binfmt::write_u32(&mut buf, VERSION).unwrap();
        binfmt::write_u32(&mut buf, self.d as u32).unwrap();
        binfmt::write_u32(&mut buf, self.doc_ids.len() as u32).unwrap();
        for id in &self.doc_ids {
            binfmt::write_str(&mut buf, id).unwrap();
        }
        binfmt::write_f64_slice(&mut buf, &self.embeddings).unwrap();
        binfmt::write_u32(&mut buf, self.queries.len() as u32).unwrap();
        for q in &self.queries {
            binfmt::write_str(&mut buf, &q.trigger_id).unwrap();
            binfmt::write_str(&mut buf, &q.conversation_id).unwrap();
            binfmt::write_u32(&mut buf, q.turn).unwrap();
            buf.push(q.split.to_u8());
            binfmt::write_u32(&mut buf, q.relevant.len() as u32).unwrap();
            for &r in &q.relevant {
                binfmt::write_u32(&mut buf, r).unwrap();
            }
        }
        let crc = binfmt::crc32(&buf);
        binfmt::write_u32(&mut buf, crc).unwrap();
        binfmt::atomic_write(path, &buf).map_err(|e| EvalError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let bytes = std::fs::read(path).map_err(|e| EvalError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let fail = |reason: &str| EvalError::Decode {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };

        if bytes.len() < 4 {
            return Err(fail("file shorter than trailing checksum"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = binfmt::crc32(body);
        if stored != computed {
            return Err(EvalError::ChecksumMismatch {
                path: path.display().to_string(),
                stored,
                computed,
            });
        }

        let mut r = body;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| fail("file shorter than magic"))?;
        if &magic != MAGIC {
            return Err(fail("bad magic, not an HCRP corpus"));
        }
        let version = binfmt::read_u32(&mut r).map_err(|_| fail("truncated version"))?;
        if version != VERSION {
            return Err(fail("unsupported version"));
        }
        let d = binfmt::read_u32(&mut r).map_err(|_| fail("truncated header"))? as usize;
        let doc_count = binfmt::read_u32(&mut r).map_err(|_| fail("truncated header"))? as usize;
        let mut doc_ids = Vec::with_capacity(doc_count);
        for _ in 0..doc_count {
            doc_ids.push(binfmt::read_str(&mut r).map_err(|_| fail("truncated doc id"))?);
        }
        let embeddings = binfmt::read_f64_vec(&mut r, doc_count * d)
            .map_err(|_| fail("truncated document embeddings"))?;
        let query_count =
            binfmt::read_u32(&mut r).map_err(|_| fail("truncated query count"))? as usize;
        let mut queries = Vec::with_capacity(query_count);
        for _ in 0..query_count {
            let trigger_id =
                binfmt::read_str(&mut r).map_err(|_| fail("truncated trigger id"))?;
            let conversation_id =
                binfmt::read_str(&mut r).map_err(|_| fail("truncated conversation id"))?;
            let turn = binfmt::read_u32(&mut r).map_err(|_| fail("truncated turn"))?;
            let mut split_byte = [0u8; 1];
            r.read_exact(&mut split_byte)
                .map_err(|_| fail("truncated split tag"))?;
            let split = Split::from_u8(split_byte[0]).ok_or_else(|| fail("unknown split tag"))?;
            let rel_count =
                binfmt::read_u32(&mut r).map_err(|_| fail("truncated qrel count"))? as usize;
            let mut relevant = Vec::with_capacity(rel_count);
            for _ in 0..rel_count {
                let idx = binfmt::read_u32(&mut r).map_err(|_| fail("truncated qrel"))?;
                if idx as usize >= doc_count {
                    return Err(fail("qrel index out of range"));
                }
                relevant.push(idx);
            }
            queries.push(QueryRecord {
                trigger_id,
                conversation_id,
                turn,
                split,
                relevant,
            });
        }
        if !r.is_empty() {
            return Err(fail("trailing bytes before checksum"));
        }
        Ok(Corpus {
            d,
            doc_ids,
            embeddings,
            queries,
        })
    }
}
