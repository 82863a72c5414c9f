//! Binary checkpoint format.
//!
//! A checkpoint captures everything needed to continue training
//! bit-identically: model config and parameters, optimizer moments, data
//! cursors, step/token counters and the base seed (per-step randomness is
//! derived from seed and step, so no extra RNG state is needed). The file is
//! little-endian throughout, carries a version and an element-type tag, and
//! ends in a SHA-256 checksum of the preceding bytes.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use super::optimizer::OptimState;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamSet};
use crate::tensor::{Dtype, Elem, Tensor};

const MAGIC: &[u8; 8] = b"MDLMCKPT";
const VERSION: u32 = 1;

/// Full training state held by a checkpoint file.
pub struct Checkpoint<E> {
    pub model_cfg: ModelConfig,
    pub params: ParamSet<E>,
    pub opt: Option<OptimState<E>>,
    /// Name of the stage this checkpoint was taken in.
    pub stage: String,
    pub base_seed: u64,
    pub global_step: u64,
    pub tokens_seen: u64,
    /// Optimizer steps completed within the current stage.
    pub stage_step: u64,
    /// Tokens consumed within the current stage.
    pub stage_tokens: u64,
    /// Pretraining corpus read positions, in corpus order.
    pub data_cursors: Vec<u64>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> Result<()> {
    w.write_all(bytes)?;
    Ok(())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let bytes = s.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(bad(format!("string of {} bytes too long", bytes.len())));
    }
    w.write_u16::<LittleEndian>(bytes.len() as u16)?;
    write_bytes(w, bytes)
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u16::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| bad("non-UTF-8 string"))
}

fn write_values<E: Elem, W: Write>(w: &mut W, data: &[E]) -> Result<()> {
    for &v in data {
        write_bytes(w, &v.to_le_bytes_vec())?;
    }
    Ok(())
}

fn read_values<E: Elem, R: Read>(r: &mut R, n: usize) -> Result<Vec<E>> {
    let width = E::DTYPE.byte_width();
    let mut buf = vec![0u8; n * width];
    r.read_exact(&mut buf)?;
    let out = buf
        .chunks_exact(width)
        .map(|c| match E::DTYPE {
            Dtype::F32 => E::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64),
            Dtype::F64 => E::from_f64(f64::from_le_bytes(c.try_into().unwrap())),
        })
        .collect();
    Ok(out)
}

fn write_tensor<E: Elem, W: Write>(w: &mut W, t: &Tensor<E>) -> Result<()> {
    if t.shape().len() > u8::MAX as usize {
        return Err(bad("tensor rank too large"));
    }
    w.write_u8(t.shape().len() as u8)?;
    for &d in t.shape() {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    write_values(w, t.data())
}

fn read_tensor<E: Elem, R: Read>(r: &mut R) -> Result<Tensor<E>> {
    let rank = r.read_u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.read_u32::<LittleEndian>()? as usize);
    }
    let n: usize = shape.iter().product();
    let data = read_values(r, n)?;
    Tensor::new(shape, data)
}

pub fn save<E: Elem>(ckpt: &Checkpoint<E>, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    write_bytes(&mut buf, MAGIC)?;
    buf.write_u32::<LittleEndian>(VERSION)?;
    buf.write_u8(E::DTYPE.tag())?;

    let cfg_json = serde_json::to_string(&ckpt.model_cfg)
        .map_err(|e| bad(format!("config serialization: {e}")))?;
    write_str(&mut buf, &cfg_json)?;
    write_str(&mut buf, &ckpt.stage)?;
    for v in [
        ckpt.base_seed,
        ckpt.global_step,
        ckpt.tokens_seen,
        ckpt.stage_step,
        ckpt.stage_tokens,
    ] {
        buf.write_u64::<LittleEndian>(v)?;
    }
    buf.write_u32::<LittleEndian>(ckpt.data_cursors.len() as u32)?;
    for &c in &ckpt.data_cursors {
        buf.write_u64::<LittleEndian>(c)?;
    }

    buf.write_u32::<LittleEndian>(ckpt.params.len() as u32)?;
    for (name, t) in ckpt.params.iter() {
        write_str(&mut buf, name)?;
        write_tensor(&mut buf, t)?;
    }

    match &ckpt.opt {
        None => buf.write_u8(0)?,
        Some(opt) => {
            if opt.m.len() != ckpt.params.len() || opt.v.len() != ckpt.params.len() {
                return Err(bad("optimizer moments misaligned with parameters"));
            }
            buf.write_u8(1)?;
            buf.write_u64::<LittleEndian>(opt.step)?;
            for t in opt.m.iter().chain(opt.v.iter()) {
                write_values(&mut buf, t.data())?;
            }
        }
    }

    let digest = Sha256::digest(&buf);
    write_bytes(&mut buf, &digest)?;

    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<E: Elem>(path: &Path) -> Result<Checkpoint<E>> {
    let bytes = std::fs::read(path)
        .map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() < MAGIC.len() + 4 + 1 + 32 {
        return Err(bad(format!("{} is truncated", path.display())));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != checksum {
        return Err(bad(format!("{} fails its checksum", path.display())));
    }

    let mut r = Cursor::new(body);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad(format!("{} is not a checkpoint file", path.display())));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version > VERSION {
        return Err(bad(format!(
            "checkpoint version {version} newer than supported {VERSION}"
        )));
    }
    let tag = r.read_u8()?;
    let dtype = Dtype::from_tag(tag).ok_or_else(|| bad(format!("unknown dtype tag {tag}")))?;
    if dtype != E::DTYPE {
        return Err(bad(format!(
            "checkpoint stores {dtype:?} values but {:?} was requested",
            E::DTYPE
        )));
    }

    let cfg_json = read_str(&mut r)?;
    let model_cfg: ModelConfig =
        serde_json::from_str(&cfg_json).map_err(|e| bad(format!("bad model config: {e}")))?;
    let stage = read_str(&mut r)?;
    let base_seed = r.read_u64::<LittleEndian>()?;
    let global_step = r.read_u64::<LittleEndian>()?;
    let tokens_seen = r.read_u64::<LittleEndian>()?;
    let stage_step = r.read_u64::<LittleEndian>()?;
    let stage_tokens = r.read_u64::<LittleEndian>()?;

    let n_cursors = r.read_u32::<LittleEndian>()? as usize;
    let mut data_cursors = Vec::with_capacity(n_cursors);
    for _ in 0..n_cursors {
        data_cursors.push(r.read_u64::<LittleEndian>()?);
    }

    let n_tensors = r.read_u32::<LittleEndian>()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..n_tensors {
        let name = read_str(&mut r)?;
        let t = read_tensor::<E, _>(&mut r)?;
        params.insert(&name, t);
    }

    let opt = match r.read_u8()? {
        0 => None,
        1 => {
            let step = r.read_u64::<LittleEndian>()?;
            let read_moments = |r: &mut Cursor<&[u8]>| -> Result<Vec<Tensor<E>>> {
                params
                    .tensors()
                    .iter()
                    .map(|p| {
                        let data = read_values(r, p.len())?;
                        Tensor::new(p.shape().to_vec(), data)
                    })
                    .collect()
            };
            let m = read_moments(&mut r)?;
            let v = read_moments(&mut r)?;
            Some(OptimState { step, m, v })
        }
        other => return Err(bad(format!("bad optimizer flag {other}"))),
    };

    if r.position() as usize != body.len() {
        return Err(bad(format!(
            "{} has trailing bytes",
            path.display()
        )));
    }

    Ok(Checkpoint {
        model_cfg,
        params,
        opt,
        stage,
        base_seed,
        global_step,
        tokens_seen,
        stage_step,
        stage_tokens,
        data_cursors,
    })
}
