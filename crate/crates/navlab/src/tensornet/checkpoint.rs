//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  b"NVLB"
//! version    u16      = 1
//! dtype      u8       4 = f32, 8 = f64
//! flags      u8       reserved, 0
//! fp_len     u32      architecture fingerprint length
//! fp         fp_len   UTF-8 fingerprint string
//! meta_count u32
//!   per entry: key_len u16, key (UTF-8), tag u8 (0 = f64, 1 = string),
//!              payload (f64 LE | len u32 + UTF-8)
//! par_count  u32
//!   per parameter: name_len u16, name (UTF-8), ndim u8, dims u32 x ndim,
//!                  step u64, value dtype x numel, m dtype x numel,
//!                  v dtype x numel
//! checksum   u64      FNV-1a over every preceding byte
//! ```
//!
//! Round-trips are bit-exact at the stored precision. Loading validates the
//! magic, version, dtype, structure, and checksum before touching any
//! parameter, so a corrupted file never yields a partial set.

use super::{Dtype, Elem, ParamSet, TensorError};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

const MAGIC: &[u8; 4] = b"NVLB";
const VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u16),
    #[error("checkpoint stores {found:?} but {expected:?} was requested")]
    DtypeMismatch { found: Dtype, expected: Dtype },
    #[error("checkpoint is corrupted: {0}")]
    Corrupted(String),
    #[error("checksum mismatch: file is corrupted")]
    ChecksumMismatch,
    #[error("architecture fingerprint mismatch:\n  expected: {expected}\n  found:    {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Sidecar values stored with a checkpoint (step counters, config scalars,
/// variant tags).
#[derive(Debug, Clone, PartialEq)]
pub enum MetaValue {
    Number(f64),
    Text(String),
}

pub type CheckpointMeta = BTreeMap<String, MetaValue>;

struct Fnv1a(u64);

impl Fnv1a {
    fn new() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }
    fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x1000_0000_01b3);
        }
    }
}

/// Serialize a parameter set (values + optimizer state) with its
/// architecture fingerprint and metadata.
pub fn save_checkpoint<E: Elem, P: AsRef<Path>>(
    params: &ParamSet<E>,
    path: P,
    fingerprint: &str,
    meta: &CheckpointMeta,
) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.write_u16::<LittleEndian>(VERSION).unwrap();
    buf.write_u8(E::DTYPE.size() as u8).unwrap();
    buf.write_u8(0).unwrap();
    write_str32(&mut buf, fingerprint);
    buf.write_u32::<LittleEndian>(meta.len() as u32).unwrap();
    for (k, v) in meta {
        write_str16(&mut buf, k);
        match v {
            MetaValue::Number(x) => {
                buf.write_u8(0).unwrap();
                buf.write_f64::<LittleEndian>(*x).unwrap();
            }
            MetaValue::Text(s) => {
                buf.write_u8(1).unwrap();
                write_str32(&mut buf, s);
            }
        }
    }
    buf.write_u32::<LittleEndian>(params.len() as u32).unwrap();
    for (name, p) in params.iter() {
        write_str16(&mut buf, name);
        buf.write_u8(p.value.ndim() as u8).unwrap();
        for d in p.value.shape() {
            buf.write_u32::<LittleEndian>(*d as u32).unwrap();
        }
        buf.write_u64::<LittleEndian>(p.step).unwrap();
        write_values(&mut buf, &p.value);
        write_values(&mut buf, &p.m);
        write_values(&mut buf, &p.v);
    }
    let mut h = Fnv1a::new();
    h.update(&buf);
    buf.write_u64::<LittleEndian>(h.0).unwrap();

    let path_str = path.as_ref().display().to_string();
    std::fs::write(path.as_ref(), &buf).map_err(|source| CheckpointError::Io {
        path: path_str,
        source,
    })
}

/// Load a checkpoint and verify its fingerprint against `expected`.
pub fn load_checkpoint<E: Elem, P: AsRef<Path>>(
    path: P,
    expected_fingerprint: &str,
) -> Result<(ParamSet<E>, CheckpointMeta), CheckpointError> {
    let (params, fingerprint, meta) = load_checkpoint_raw::<E, P>(path)?;
    if fingerprint != expected_fingerprint {
        return Err(CheckpointError::FingerprintMismatch {
            expected: expected_fingerprint.to_string(),
            found: fingerprint,
        });
    }
    Ok((params, meta))
}

/// Load a checkpoint without fingerprint verification, returning the stored
/// fingerprint for the caller to inspect.
pub fn load_checkpoint_raw<E: Elem, P: AsRef<Path>>(
    path: P,
) -> Result<(ParamSet<E>, String, CheckpointMeta), CheckpointError> {
    let path_str = path.as_ref().display().to_string();
    let data = std::fs::read(path.as_ref()).map_err(|source| CheckpointError::Io {
        path: path_str,
        source,
    })?;
    if data.len() < 8 + 8 {
        return Err(CheckpointError::Corrupted("file too short".into()));
    }
    let (body, tail) = data.split_at(data.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let mut h = Fnv1a::new();
    h.update(body);
    if h.0 != stored {
        return Err(CheckpointError::ChecksumMismatch);
    }

    let mut r = Cursor::new(body);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(corrupt)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.read_u16::<LittleEndian>().map_err(corrupt)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let dsize = r.read_u8().map_err(corrupt)?;
    let found = match dsize {
        4 => Dtype::F32,
        8 => Dtype::F64,
        other => {
            return Err(CheckpointError::Corrupted(format!(
                "unknown dtype size {other}"
            )))
        }
    };
    if found != E::DTYPE {
        return Err(CheckpointError::DtypeMismatch {
            found,
            expected: E::DTYPE,
        });
    }
    let _flags = r.read_u8().map_err(corrupt)?;
    let fingerprint = read_str32(&mut r)?;
    let meta_count = r.read_u32::<LittleEndian>().map_err(corrupt)?;
    let mut meta = CheckpointMeta::new();
    for _ in 0..meta_count {
        let key = read_str16(&mut r)?;
        let tag = r.read_u8().map_err(corrupt)?;
        let value = match tag {
            0 => MetaValue::Number(r.read_f64::<LittleEndian>().map_err(corrupt)?),
            1 => MetaValue::Text(read_str32(&mut r)?),
            other => {
                return Err(CheckpointError::Corrupted(format!(
                    "unknown meta tag {other}"
                )))
            }
        };
        meta.insert(key, value);
    }
    let par_count = r.read_u32::<LittleEndian>().map_err(corrupt)?;
    let mut params = ParamSet::new();
    for _ in 0..par_count {
        let name = read_str16(&mut r)?;
        let ndim = r.read_u8().map_err(corrupt)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u32::<LittleEndian>().map_err(corrupt)? as usize);
        }
        let step = r.read_u64::<LittleEndian>().map_err(corrupt)?;
        let numel: usize = shape.iter().product();
        let value = read_values::<E>(&mut r, &shape, numel)?;
        let m = read_values::<E>(&mut r, &shape, numel)?;
        let v = read_values::<E>(&mut r, &shape, numel)?;
        params.add(&name, value)?;
        let p = params.get_mut(&name)?;
        p.m = m;
        p.v = v;
        p.step = step;
    }
    let mut trailing = Vec::new();
    r.read_to_end(&mut trailing).map_err(corrupt)?;
    if !trailing.is_empty() {
        return Err(CheckpointError::Corrupted(format!(
            "{} unexpected trailing bytes",
            trailing.len()
        )));
    }
    Ok((params, fingerprint, meta))
}

fn corrupt(e: std::io::Error) -> CheckpointError {
    CheckpointError::Corrupted(e.to_string())
}

fn write_str16(buf: &mut Vec<u8>, s: &str) {
    buf.write_u16::<LittleEndian>(s.len() as u16).unwrap();
    buf.extend_from_slice(s.as_bytes());
}

fn write_str32(buf: &mut Vec<u8>, s: &str) {
    buf.write_u32::<LittleEndian>(s.len() as u32).unwrap();
    buf.extend_from_slice(s.as_bytes());
}

fn read_str16(r: &mut Cursor<&[u8]>) -> Result<String, CheckpointError> {
    let len = r.read_u16::<LittleEndian>().map_err(corrupt)? as usize;
    read_utf8(r, len)
}

fn read_str32(r: &mut Cursor<&[u8]>) -> Result<String, CheckpointError> {
    let len = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
    read_utf8(r, len)
}

fn read_utf8(r: &mut Cursor<&[u8]>, len: usize) -> Result<String, CheckpointError> {
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes).map_err(corrupt)?;
    String::from_utf8(bytes).map_err(|e| CheckpointError::Corrupted(e.to_string()))
}

fn write_values<E: Elem>(buf: &mut Vec<u8>, arr: &ArrayD<E>) {
    match E::DTYPE {
        Dtype::F32 => {
            for v in arr.iter() {
                buf.write_f32::<LittleEndian>(v.as_f64() as f32).unwrap();
            }
        }
        Dtype::F64 => {
            for v in arr.iter() {
                buf.write_f64::<LittleEndian>(v.as_f64()).unwrap();
            }
        }
    }
}

fn read_values<E: Elem>(
    r: &mut Cursor<&[u8]>,
    shape: &[usize],
    numel: usize,
) -> Result<ArrayD<E>, CheckpointError> {
    let mut data = Vec::with_capacity(numel);
    match E::DTYPE {
        Dtype::F32 => {
            for _ in 0..numel {
                data.push(E::from_f64(
                    r.read_f32::<LittleEndian>().map_err(corrupt)? as f64
                ));
            }
        }
        Dtype::F64 => {
            for _ in 0..numel {
                data.push(E::from_f64(r.read_f64::<LittleEndian>().map_err(corrupt)?));
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(shape), data)
        .map_err(|e| CheckpointError::Corrupted(e.to_string()))
}
