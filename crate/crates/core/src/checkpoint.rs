//! Bit-exact tensor checkpoint format.
//!
//! Layout per file: magic `FDTL`, u8 version, u8 dtype (0 = f32, 1 = f64),
//! u8 rank, rank x u64 little-endian extents, then the little-endian payload.
//! A checkpoint directory holds one file per named parameter plus a
//! `manifest.json` mapping name to file.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FDTL";
pub const VERSION: u8 = 1;

/// On-disk element type. Compute is always f64; f32 is a storage option.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

pub fn write_tensor(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + t.numel() * 8);
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(dtype.code());
    let rank = t.dims().len();
    if rank > u8::MAX as usize {
        return Err(Error::Format(format!("rank {rank} exceeds format limit")));
    }
    buf.push(rank as u8);
    for &d in t.dims() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        Dtype::F32 => {
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_tensor(&buf).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn decode_tensor(buf: &[u8]) -> Result<Tensor> {
    if buf.len() < 7 || &buf[..4] != MAGIC {
        return Err(Error::Format("missing FDTL magic".into()));
    }
    if buf[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", buf[4])));
    }
    let dtype = Dtype::from_code(buf[5])?;
    let rank = buf[6] as usize;
    let header = 7 + rank * 8;
    if buf.len() < header {
        return Err(Error::Format("truncated extent table".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let mut ext = [0u8; 8];
        ext.copy_from_slice(&buf[7 + i * 8..7 + (i + 1) * 8]);
        dims.push(u64::from_le_bytes(ext) as usize);
    }
    let numel: usize = dims.iter().product();
    let width = match dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    if buf.len() != header + numel * width {
        return Err(Error::Format(format!(
            "payload size {} does not match dims {dims:?} ({} expected)",
            buf.len() - header,
            numel * width
        )));
    }
    let mut data = Vec::with_capacity(numel);
    match dtype {
        Dtype::F32 => {
            for chunk in buf[header..].chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
        Dtype::F64 => {
            for chunk in buf[header..].chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
    }
    Tensor::new(dims, data)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub params: BTreeMap<String, String>,
}

fn file_name_for(index: usize, name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("p{index:04}_{safe}.fdtl")
}

/// Write a named parameter set: one tensor file each plus `manifest.json`.
pub fn save_named(dir: &Path, params: &BTreeMap<String, Tensor>, dtype: Dtype) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut manifest = Manifest {
        params: BTreeMap::new(),
    };
    for (i, (name, t)) in params.iter().enumerate() {
        let file = file_name_for(i, name);
        write_tensor(&dir.join(&file), t, dtype)?;
        manifest.params.insert(name.clone(), file);
    }
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
    fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_named(dir: &Path) -> Result<BTreeMap<String, Tensor>> {
    let path = dir.join("manifest.json");
    let json = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let manifest: Manifest =
        serde_json::from_str(&json).map_err(|e| Error::Format(format!("manifest decode: {e}")))?;
    let mut out = BTreeMap::new();
    for (name, file) in manifest.params {
        out.insert(name, read_tensor(&dir.join(file))?);
    }
    Ok(out)
}

/// Path of the single-tensor file used for standalone grids (spectrograms,
/// video features).
pub fn tensor_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.fdtl"))
}
