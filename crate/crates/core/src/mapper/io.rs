//! HSPH parameter files: a little-endian container holding the head's
//! config followed by every parameter block in declaration order, with an
//! optional trailing optimizer-state section for training checkpoints.

use std::io::Read;
use std::path::Path;

use crate::binfmt;
use crate::optim::OptimizerState;

use super::{param_specs, MapperConfig, MapperError, MapperParams};

const MAGIC: &[u8; 4] = b"HSPH";
const VERSION: u32 = 1;

fn io_err(path: &Path, source: std::io::Error) -> MapperError {
    MapperError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn decode_err(path: &Path, reason: impl Into<String>) -> MapperError {
    MapperError::Decode {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn encode(params: &MapperParams, opt: Option<&OptimizerState>) -> Vec<u8> {
    let c = &params.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    binfmt::write_u32(&mut buf, VERSION).unwrap();
    for dim in [c.d_h, c.d_m, c.d, c.layers, c.heads, c.ff_dim, c.max_positions] {
        binfmt::write_u32(&mut buf, dim as u32).unwrap();
    }
    binfmt::write_u64(&mut buf, c.seed).unwrap();
    binfmt::write_u32(&mut buf, params.blocks.len() as u32).unwrap();
    for block in &params.blocks {
        binfmt::write_f64_slice(&mut buf, block).unwrap();
    }
    match opt {
        None => buf.push(0),
        Some(state) => {
            buf.push(1);
            binfmt::write_u64(&mut buf, state.step).unwrap();
            for block in state.m.iter().chain(state.v.iter()) {
                binfmt::write_f64_slice(&mut buf, block).unwrap();
            }
        }
    }
    buf
}

/// Writes parameters only (flag byte 0).
pub fn save_params(path: &Path, params: &MapperParams) -> Result<(), MapperError> {
    binfmt::atomic_write(path, &encode(params, None)).map_err(|e| io_err(path, e))
}

/// Writes parameters plus optimizer state (flag byte 1), for resumable
/// checkpoints.
pub fn save_checkpoint(
    path: &Path,
    params: &MapperParams,
    opt: &OptimizerState,
) -> Result<(), MapperError> {
    binfmt::atomic_write(path, &encode(params, Some(opt))).map_err(|e| io_err(path, e))
}

fn decode(path: &Path, bytes: &[u8]) -> Result<(MapperParams, Option<OptimizerState>), MapperError> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| decode_err(path, "file shorter than magic"))?;
    if &magic != MAGIC {
        return Err(decode_err(path, "bad magic, not an HSPH parameter file"));
    }
    let version =
        binfmt::read_u32(&mut r).map_err(|_| decode_err(path, "truncated version field"))?;
    if version != VERSION {
        return Err(decode_err(path, format!("unsupported version {version}")));
    }

    let mut dims = [0usize; 7];
    for d in dims.iter_mut() {
        *d = binfmt::read_u32(&mut r).map_err(|_| decode_err(path, "truncated config header"))?
            as usize;
    }
    let seed =
        binfmt::read_u64(&mut r).map_err(|_| decode_err(path, "truncated config header"))?;
    let config = MapperConfig {
        d_h: dims[0],
        d_m: dims[1],
        d: dims[2],
        layers: dims[3],
        heads: dims[4],
        ff_dim: dims[5],
        max_positions: dims[6],
        seed,
    };
    config
        .validate()
        .map_err(|e| decode_err(path, format!("invalid stored config: {e}")))?;

    let specs = param_specs(&config);
    let block_count =
        binfmt::read_u32(&mut r).map_err(|_| decode_err(path, "truncated block count"))? as usize;
    if block_count != specs.len() {
        return Err(decode_err(
            path,
            format!(
                "block count {block_count} does not match config ({} expected)",
                specs.len()
            ),
        ));
    }

    let mut blocks = Vec::with_capacity(specs.len());
    for spec in &specs {
        let block = binfmt::read_f64_vec(&mut r, spec.len())
            .map_err(|_| decode_err(path, format!("truncated inside block `{}`", spec.name)))?;
        blocks.push(block);
    }

    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)
        .map_err(|_| decode_err(path, "missing trailer flag"))?;
    let opt = match flag[0] {
        0 => None,
        1 => {
            let step = binfmt::read_u64(&mut r)
                .map_err(|_| decode_err(path, "truncated optimizer step"))?;
            let mut read_blocks = |what: &str| -> Result<Vec<Vec<f64>>, MapperError> {
                specs
                    .iter()
                    .map(|spec| {
                        binfmt::read_f64_vec(&mut r, spec.len()).map_err(|_| {
                            decode_err(path, format!("truncated optimizer {what} block"))
                        })
                    })
                    .collect()
            };
            let m = read_blocks("m")?;
            let v = read_blocks("v")?;
            Some(OptimizerState { step, m, v })
        }
        f => return Err(decode_err(path, format!("unknown trailer flag {f}"))),
    };
    if !r.is_empty() {
        return Err(decode_err(
            path,
            format!("{} trailing bytes after trailer", r.len()),
        ));
    }

    Ok((MapperParams { config, blocks }, opt))
}

/// Loads parameters, ignoring any optimizer state that may be present.
pub fn load_params(path: &Path) -> Result<MapperParams, MapperError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(decode(path, &bytes)?.0)
}

/// Loads a checkpoint; errors if the file has no optimizer state.
pub fn load_checkpoint(path: &Path) -> Result<(MapperParams, OptimizerState), MapperError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let (params, opt) = decode(path, &bytes)?;
    let opt = opt.ok_or_else(|| decode_err(path, "file holds no optimizer state"))?;
    Ok((params, opt))
}

/// Loads parameters and verifies they were built for the expected
/// architecture (seed excluded).
pub fn load_params_expecting(
    path: &Path,
    expected: &MapperConfig,
) -> Result<MapperParams, MapperError> {
    let params = load_params(path)?;
    let found = &params.config;
    let mismatch = |field: &'static str, found: usize, expected: usize| MapperError::ConfigMismatch {
        path: path.display().to_string(),
        field,
        found,
        expected,
    };
    if found.d_h != expected.d_h {
        return Err(mismatch("d_h", found.d_h, expected.d_h));
    }
    if found.d_m != expected.d_m {
        return Err(mismatch("d_m", found.d_m, expected.d_m));
    }
    if found.d != expected.d {
        return Err(mismatch("d", found.d, expected.d));
    }
    if found.layers != expected.layers {
        return Err(mismatch("layers", found.layers, expected.layers));
    }
    if found.heads != expected.heads {
        return Err(mismatch("heads", found.heads, expected.heads));
    }
    if found.ff_dim != expected.ff_dim {
        return Err(mismatch("ff_dim", found.ff_dim, expected.ff_dim));
    }
    if found.max_positions != expected.max_positions {
        return Err(mismatch(
            "max_positions",
            found.max_positions,
            expected.max_positions,
        ));
    }
    Ok(params)
}
