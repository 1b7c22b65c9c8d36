//! On-disk cache of precomputed hidden-state traces.
//!
//! Each trace holds the LLM hidden states for one retrieval trigger (stored
//! float32, as captured) plus the teacher's embedding for the rewritten
//! query (float64, unit norm). Traces live under a directory keyed by a
//! digest of the generation settings, so changing the model name, tokenizer
//! max length, or generation length invalidates the whole cache by
//! construction rather than by bookkeeping.

use std::io::Read;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::binfmt;

const MAGIC: &[u8; 4] = b"HTRC";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("trace file {path}: {reason}")]
    Decode { path: String, reason: String },
    #[error("trace file {path}: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch {
        path: String,
        stored: u32,
        computed: u32,
    },
    #[error("trigger id {0:?} is not usable as a file name")]
    BadTriggerId(String),
    #[error("no cached trace for trigger {trigger_id} at {path}")]
    Missing { trigger_id: String, path: String },
    #[error("invalid trace {trigger_id}: {reason}")]
    Invalid { trigger_id: String, reason: String },
}

/// The generation settings that hidden states depend on. Two keys agree
/// exactly when their caches are interchangeable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheKey {
    pub model_name: String,
    pub tokenizer_max_length: u32,
    pub generation_length: u32,
}

impl CacheKey {
    /// Digest used as the cache subdirectory name: FNV-1a 64 over the
    /// joined key fields, in fixed-width hex.
    pub fn digest(&self) -> String {
        let joined = format!(
            "{}|{}|{}",
            self.model_name, self.tokenizer_max_length, self.generation_length
        );
        format!("{:016x}", binfmt::fnv1a64(joined.as_bytes()))
    }
}

/// One trigger's worth of cached data.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub trigger_id: String,
    pub conversation_id: String,
    /// The generated query text. Unused by the student (it reads hidden
    /// states), kept for inspection.
    pub query_text: String,
    /// Sequence length.
    pub n: usize,
    /// LLM hidden dimension.
    pub d_h: usize,
    /// Hidden states, `n x d_h` row-major, float32 as captured.
    pub hidden: Vec<f32>,
    /// Teacher embedding for the rewritten query, unit norm. Absent until
    /// the teacher has been run over the trace.
    pub teacher: Option<Vec<f64>>,
}

impl Trace {
    /// Hidden states widened to f64 for the head's forward pass.
    pub fn hidden_f64(&self) -> Vec<f64> {
        self.hidden.iter().map(|&x| f64::from(x)).collect()
    }

    /// Structural invariants: at least one token, a full hidden-state
    /// matrix, and (when present) a unit-norm teacher embedding.
    pub fn validate(&self) -> Result<(), TraceError> {
        let fail = |reason: String| TraceError::Invalid {
            trigger_id: self.trigger_id.clone(),
            reason,
        };
        if self.n == 0 {
            return Err(fail("token count is zero".into()));
        }
        if self.hidden.len() != self.n * self.d_h {
            return Err(fail(format!(
                "hidden states hold {} values, expected {} x {}",
                self.hidden.len(),
                self.n,
                self.d_h
            )));
        }
        if let Some(t) = &self.teacher {
            let norm = t.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(fail(format!("teacher embedding norm {norm} is not 1")));
            }
        }
        Ok(())
    }
}

fn io_err(path: &Path, source: std::io::Error) -> TraceError {
    TraceError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn decode_err(path: &Path, reason: impl Into<String>) -> TraceError {
    TraceError::Decode {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn encode(trace: &Trace) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    binfmt::write_u32(&mut buf, VERSION).unwrap();
    binfmt::write_str(&mut buf, &trace.trigger_id).unwrap();
    binfmt::write_str(&mut buf, &trace.conversation_id).unwrap();
    binfmt::write_str(&mut buf, &trace.query_text).unwrap();
    binfmt::write_u32(&mut buf, trace.n as u32).unwrap();
    binfmt::write_u32(&mut buf, trace.d_h as u32).unwrap();
    binfmt::write_f32_slice(&mut buf, &trace.hidden).unwrap();
    match &trace.teacher {
        None => buf.push(0),
        Some(t) => {
            buf.push(1);
            binfmt::write_u32(&mut buf, t.len() as u32).unwrap();
            binfmt::write_f64_slice(&mut buf, t).unwrap();
        }
    }
    let crc = binfmt::crc32(&buf);
    binfmt::write_u32(&mut buf, crc).unwrap();
    buf
}

fn decode(path: &Path, bytes: &[u8]) -> Result<Trace, TraceError> {
    if bytes.len() < 4 {
        return Err(decode_err(path, "file shorter than trailing checksum"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = binfmt::crc32(body);
    if stored != computed {
        return Err(TraceError::ChecksumMismatch {
            path: path.display().to_string(),
            stored,
            computed,
        });
    }

    let mut r = body;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| decode_err(path, "file shorter than magic"))?;
    if &magic != MAGIC {
        return Err(decode_err(path, "bad magic, not an HTRC trace"));
    }
    let version =
        binfmt::read_u32(&mut r).map_err(|_| decode_err(path, "truncated version field"))?;
    if version != VERSION {
        return Err(decode_err(path, format!("unsupported version {version}")));
    }
    let trigger_id =
        binfmt::read_str(&mut r).map_err(|_| decode_err(path, "truncated trigger id"))?;
    let conversation_id =
        binfmt::read_str(&mut r).map_err(|_| decode_err(path, "truncated conversation id"))?;
    let query_text =
        binfmt::read_str(&mut r).map_err(|_| decode_err(path, "truncated query text"))?;
    let n = binfmt::read_u32(&mut r).map_err(|_| decode_err(path, "truncated header"))? as usize;
    let d_h = binfmt::read_u32(&mut r).map_err(|_| decode_err(path, "truncated header"))? as usize;
    let hidden = binfmt::read_f32_vec(&mut r, n * d_h)
        .map_err(|_| decode_err(path, "truncated hidden states"))?;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)
        .map_err(|_| decode_err(path, "truncated teacher flag"))?;
    let teacher = match flag[0] {
        0 => None,
        1 => {
            let d = binfmt::read_u32(&mut r)
                .map_err(|_| decode_err(path, "truncated teacher width"))?
                as usize;
            Some(
                binfmt::read_f64_vec(&mut r, d)
                    .map_err(|_| decode_err(path, "truncated teacher embedding"))?,
            )
        }
        f => return Err(decode_err(path, format!("unknown teacher flag {f}"))),
    };
    if !r.is_empty() {
        return Err(decode_err(
            path,
            format!("{} trailing bytes before checksum", r.len()),
        ));
    }
    let trace = Trace {
        trigger_id,
        conversation_id,
        query_text,
        n,
        d_h,
        hidden,
        teacher,
    };
    trace.validate().map_err(|e| decode_err(path, e.to_string()))?;
    Ok(trace)
}

fn check_trigger_id(id: &str) -> Result<(), TraceError> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(TraceError::BadTriggerId(id.to_string()))
    }
}

/// A directory of traces for one cache key: `<root>/<digest>/<trigger_id>.htrc`.
#[derive(Debug, Clone)]
pub struct TraceStore {
    dir: PathBuf,
}

impl TraceStore {
    pub fn open(root: &Path, key: &CacheKey) -> Self {
        Self {
            dir: root.join(key.digest()),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, trigger_id: &str) -> PathBuf {
        self.dir.join(format!("{trigger_id}.htrc"))
    }

    pub fn contains(&self, trigger_id: &str) -> bool {
        check_trigger_id(trigger_id).is_ok() && self.path_for(trigger_id).is_file()
    }

    pub fn write(&self, trace: &Trace) -> Result<(), TraceError> {
        check_trigger_id(&trace.trigger_id)?;
        trace.validate()?;
        let path = self.path_for(&trace.trigger_id);
        binfmt::atomic_write(&path, &encode(trace)).map_err(|e| io_err(&path, e))
    }

    pub fn read(&self, trigger_id: &str) -> Result<Trace, TraceError> {
        check_trigger_id(trigger_id)?;
        let path = self.path_for(trigger_id);
        let bytes = std::fs::read(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                TraceError::Missing {
                    trigger_id: trigger_id.to_string(),
                    path: path.display().to_string(),
                }
            } else {
                io_err(&path, e)
            }
        })?;
        decode(&path, &bytes)
    }

    /// Trigger ids present in the store, sorted for deterministic
    /// iteration order.
    pub fn list(&self) -> Result<Vec<String>, TraceError> {
        let entries = match std::fs::read_dir(&self.dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&self.dir, e)),
        };
        let mut ids = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| io_err(&self.dir, e))?;
            let name = entry.file_name();
            let Some(name) = name.to_str() else { continue };
            if let Some(stem) = name.strip_suffix(".htrc") {
                if check_trigger_id(stem).is_ok() {
                    ids.push(stem.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Reads every trace in the store, in sorted trigger-id order.
    pub fn read_all(&self) -> Result<Vec<Trace>, TraceError> {
        self.list()?.iter().map(|id| self.read(id)).collect()
    }
}
