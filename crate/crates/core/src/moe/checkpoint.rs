//! Versioned binary checkpoint format.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        8 bytes   "D2MOECKP"
//! version      u32       1
//! in_dim       u32
//! hidden       u32
//! classes      u32
//! experts      u32
//! layers       u32
//! layout       u8        0 = all_1hop, 1 = half_half
//! backbone     u8        0 = gcn, 1 = sage
//! batch_norm   u8        0 / 1
//! gamma        f64
//! dropout      f64
//! tensor_count u32
//! tensor_count times:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   rows       u32
//!   cols       u32
//!   data       rows * cols f32
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::moe::{Backbone, ExpertLayout, ModelConfig, ModelParams};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"D2MOECKP";
pub const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_checkpoint<T: Scalar>(params: &ModelParams<T>, w: &mut impl Write) -> Result<()> {
    let c = params.config();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [c.in_dim, c.hidden, c.classes, c.experts, c.layers] {
        put_u32(w, v)?;
    }
    let layout = match c.layout {
        ExpertLayout::AllOneHop => 0u8,
        ExpertLayout::HalfHalf => 1,
    };
    let backbone = match c.backbone {
        Backbone::Gcn => 0u8,
        Backbone::Sage => 1,
    };
    w.write_all(&[layout, backbone, u8::from(c.batch_norm)])?;
    w.write_all(&c.gamma.to_le_bytes())?;
    w.write_all(&c.dropout.to_le_bytes())?;
    put_u32(w, params.len())?;
    for p in params.tensors() {
        put_u32(w, p.name.len())?;
        w.write_all(p.name.as_bytes())?;
        put_u32(w, p.value.rows())?;
        put_u32(w, p.value.cols())?;
        for v in p.value.as_slice() {
            let f = v.to_f32().ok_or_else(|| Error::Checkpoint(format!("{} not representable", p.name)))?;
            w.write_all(&f.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Reader<'a, R> {
    inner: &'a mut R,
}

impl<R: Read> Reader<'_, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
}

pub fn read_checkpoint<T: Scalar>(r: &mut impl Read) -> Result<ModelParams<T>> {
    let mut r = Reader { inner: r };
    if &r.bytes::<8>()? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let in_dim = r.u32()?;
    let hidden = r.u32()?;
    let classes = r.u32()?;
    let experts = r.u32()?;
    let layers = r.u32()?;
    let layout = match r.u8()? {
        0 => ExpertLayout::AllOneHop,
        1 => ExpertLayout::HalfHalf,
        b => return Err(Error::Checkpoint(format!("unknown layout tag {b}"))),
    };
    let backbone = match r.u8()? {
        0 => Backbone::Gcn,
        1 => Backbone::Sage,
        b => return Err(Error::Checkpoint(format!("unknown backbone tag {b}"))),
    };
    let batch_norm = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(Error::Checkpoint(format!("bad norm flag {b}"))),
    };
    let gamma = r.f64()?;
    let dropout = r.f64()?;
    let config = ModelConfig {
        in_dim,
        hidden,
        classes,
        experts,
        layers,
        dropout,
        gamma,
        batch_norm,
        layout,
        backbone,
    };
    let mut params = ModelParams::<T>::zeros(&config)?;
    let count = r.u32()?;
    if count != params.len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, configuration defines {}",
            params.len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let len = r.u32()?;
        let mut name = vec![0u8; len];
        r.inner
            .read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rows = r.u32()?;
        let cols = r.u32()?;
        let id = params
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name:?}")))?;
        if seen[id.index()] {
            return Err(Error::Checkpoint(format!("duplicate tensor {name:?}")));
        }
        seen[id.index()] = true;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(T::from_f64_lossy(f32::from_le_bytes(r.bytes()?) as f64));
        }
        params
            .set(id, Matrix::from_vec(rows, cols, data)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(params)
}

pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelParams<T>> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}
