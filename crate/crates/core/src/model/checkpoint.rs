//! Binary checkpoint container. All integers little-endian:
//!
//! ```text
//! magic    8 bytes  "HRMCKPT\0"
//! version  u32      1
//! config   u32 length + UTF-8 JSON (ModelConfig)
//! meta     u32 length + UTF-8 JSON (free-form object)
//! count    u32
//! count × tensor:
//!   name   u16 length + UTF-8, prefixed "params/" or "ema/"
//!   dtype  u8 (1 = f32, 2 = f64)
//!   ndim   u8
//!   dims   ndim × u64
//!   data   product(dims) little-endian values
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelError, Parameters, Result};
use crate::tensor::{DType, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"HRMCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint<S> {
    pub config: ModelConfig,
    pub params: Parameters<S>,
    pub ema: Option<Parameters<S>>,
    pub meta: serde_json::Value,
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn write_blob(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    let len = u32::try_from(bytes.len()).map_err(|_| corrupt("header record too large"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn write_tensor<S: Scalar>(w: &mut impl Write, name: &str, t: &Tensor<S>) -> Result<()> {
    let name_len = u16::try_from(name.len()).map_err(|_| corrupt("tensor name too long"))?;
    w.write_all(&name_len.to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[S::DTYPE.code(), t.shape().len() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * S::DTYPE.size());
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_checkpoint<S: Scalar>(w: &mut impl Write, ckpt: &Checkpoint<S>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(&ckpt.config).map_err(|e| corrupt(e.to_string()))?;
    write_blob(w, &config)?;
    let meta = serde_json::to_vec(&ckpt.meta).map_err(|e| corrupt(e.to_string()))?;
    write_blob(w, &meta)?;
    let count = ckpt.params.len() + ckpt.ema.as_ref().map_or(0, |e| e.len());
    w.write_all(&(count as u32).to_le_bytes())?;
    for (name, t) in ckpt.params.iter() {
        write_tensor(w, &format!("params/{name}"), t)?;
    }
    if let Some(ema) = &ckpt.ema {
        for (name, t) in ema.iter() {
            write_tensor(w, &format!("ema/{name}"), t)?;
        }
    }
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_blob(r: &mut impl Read) -> Result<Vec<u8>> {
    let len = u32::from_le_bytes(read_array(r)?) as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Reads a checkpoint, converting stored values to `S`.
pub fn read_checkpoint<S: Scalar>(r: &mut impl Read) -> Result<Checkpoint<S>> {
    if &read_array::<8>(r)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(read_array(r)?);
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let config: ModelConfig =
        serde_json::from_slice(&read_blob(r)?).map_err(|e| corrupt(format!("config: {e}")))?;
    let meta = serde_json::from_slice(&read_blob(r)?).map_err(|e| corrupt(format!("meta: {e}")))?;
    let count = u32::from_le_bytes(read_array(r)?);
    let mut params = BTreeMap::new();
    let mut ema = BTreeMap::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_array(r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| corrupt("non-UTF-8 tensor name"))?;
        let [code, ndim] = read_array::<2>(r)?;
        let dtype = DType::from_code(code).ok_or_else(|| corrupt(format!("{name}: dtype code {code}")))?;
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(read_array(r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * dtype.size()];
        r.read_exact(&mut bytes)?;
        let data: Vec<S> = match dtype {
            DType::F32 => bytes.chunks_exact(4).map(|c| S::lit(f32::read_le(c).into())).collect(),
            DType::F64 => bytes.chunks_exact(8).map(|c| S::lit(f64::read_le(c))).collect(),
        };
        let t = Tensor::new(shape, data).map_err(|e| corrupt(format!("{name}: {e}")))?;
        if let Some(rest) = name.strip_prefix("params/") {
            params.insert(rest.to_string(), t);
        } else if let Some(rest) = name.strip_prefix("ema/") {
            ema.insert(rest.to_string(), t);
        } else {
            return Err(corrupt(format!("unknown tensor group in {name}")));
        }
    }
    let params = Parameters::from_map(params);
    params.check_layout(&config)?;
    let ema = if ema.is_empty() {
        None
    } else {
        let ema = Parameters::from_map(ema);
        ema.check_layout(&config)?;
        Some(ema)
    };
    Ok(Checkpoint {
        config,
        params,
        ema,
        meta,
    })
}

pub fn save_checkpoint<S: Scalar>(path: impl AsRef<Path>, ckpt: &Checkpoint<S>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<S>> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
