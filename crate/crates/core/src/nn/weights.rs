//! `MONW` weight files.
//!
//! ```text
//! "MONW"  version:u32  records:u32
//! record := kind:u8  dims:u32*  payload:f32*        (all little-endian)
//!   kind 1  conv        dims = out, in, 3, 3   payload = weights, bias
//!   kind 2  batch norm  dims = channels        payload = gain, shift, running mean, running var
//! ```
//!
//! Optimizer moments use the same layout under the magic `MONA`, with one
//! `kind 3` record per parameter slice (`dims = len`, payload = m then v)
//! preceded by the step counter as a u64.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::adam::AdamState;
use super::batchnorm::BatchNorm;
use super::conv::{ConvLayer, KERNEL};
use super::model::MonetModel;

pub const WEIGHT_MAGIC: &[u8; 4] = b"MONW";
pub const ADAM_MAGIC: &[u8; 4] = b"MONA";
pub const FORMAT_VERSION: u32 = 1;

const KIND_CONV: u8 = 1;
const KIND_BN: u8 = 2;
const KIND_MOMENTS: u8 = 3;

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f32s<W: Write>(w: &mut W, vals: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(vals.len() * 4);
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("dimension {n} does not fit in u32")))
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| Error::Format(format!("truncated weight file: {e}")))?;
        Ok(b)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut buf = vec![0u8; n * 4];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("truncated payload: {e}")))?;
        let vals: Vec<f32> = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite value in payload".into()));
        }
        Ok(vals)
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<u32> {
        let m = self.bytes::<4>()?;
        if &m != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&m),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        self.u32()
    }

    fn finish(mut self) -> Result<()> {
        let mut rest = [0u8; 1];
        match self.inner.read(&mut rest)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes after last record".into())),
        }
    }
}

pub fn write_weights<W: Write>(model: &MonetModel<f32>, mut w: W) -> Result<()> {
    w.write_all(WEIGHT_MAGIC)?;
    put_u32(&mut w, FORMAT_VERSION)?;
    let records = model.convs().len() + model.norms().iter().flatten().count();
    put_u32(&mut w, len_u32(records)?)?;
    for (conv, bn) in model.convs().iter().zip(model.norms()) {
        w.write_all(&[KIND_CONV])?;
        for d in [conv.out_ch, conv.in_ch, KERNEL, KERNEL] {
            put_u32(&mut w, len_u32(d)?)?;
        }
        put_f32s(&mut w, &conv.weights)?;
        put_f32s(&mut w, &conv.bias)?;
        if let Some(bn) = bn {
            w.write_all(&[KIND_BN])?;
            put_u32(&mut w, len_u32(bn.channels())?)?;
            for part in [&bn.gain, &bn.shift, &bn.running_mean, &bn.running_var] {
                put_f32s(&mut w, part)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_weights<R: Read>(r: R) -> Result<MonetModel<f32>> {
    let mut rd = Reader { inner: r };
    let records = rd.header(WEIGHT_MAGIC)?;
    let mut convs: Vec<ConvLayer<f32>> = Vec::new();
    let mut norms: Vec<Option<BatchNorm<f32>>> = Vec::new();
    for _ in 0..records {
        match rd.u8()? {
            KIND_CONV => {
                let (out_ch, in_ch, kh, kw) = (rd.u32()? as usize, rd.u32()? as usize, rd.u32()?, rd.u32()?);
                if kh as usize != KERNEL || kw as usize != KERNEL {
                    return Err(Error::Format(format!("conv kernel must be 3x3, found {kh}x{kw}")));
                }
                let weights = rd.f32s(out_ch * in_ch * KERNEL * KERNEL)?;
                let bias = rd.f32s(out_ch)?;
                convs.push(ConvLayer { in_ch, out_ch, weights, bias });
                norms.push(None);
            }
            KIND_BN => {
                let c = rd.u32()? as usize;
                let mut bn = BatchNorm::new(c);
                bn.gain = rd.f32s(c)?;
                bn.shift = rd.f32s(c)?;
                bn.running_mean = rd.f32s(c)?;
                bn.running_var = rd.f32s(c)?;
                match norms.last_mut() {
                    Some(slot @ None) => *slot = Some(bn),
                    _ => return Err(Error::Format("batch norm record without a preceding conv".into())),
                }
            }
            other => return Err(Error::Format(format!("unknown record kind {other}"))),
        }
    }
    rd.finish()?;
    let width = convs.first().map(|c| c.out_ch).ok_or_else(|| Error::Format("no layers".into()))?;
    MonetModel::from_parts(width, convs, norms)
}

pub fn save_weights(model: &MonetModel<f32>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_weights(model, &mut buf)?;
    atomic_write(path, &buf)
}

pub fn load_weights(path: &Path) -> Result<MonetModel<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::ingest(path, e))?;
    read_weights(bytes.as_slice())
}

pub fn write_adam<W: Write>(state: &AdamState<f32>, mut w: W) -> Result<()> {
    w.write_all(ADAM_MAGIC)?;
    put_u32(&mut w, FORMAT_VERSION)?;
    put_u32(&mut w, len_u32(state.m.len())?)?;
    w.write_all(&state.step.to_le_bytes())?;
    for (m, v) in state.m.iter().zip(&state.v) {
        w.write_all(&[KIND_MOMENTS])?;
        put_u32(&mut w, len_u32(m.len())?)?;
        put_f32s(&mut w, m)?;
        put_f32s(&mut w, v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_adam<R: Read>(r: R) -> Result<AdamState<f32>> {
    let mut rd = Reader { inner: r };
    let records = rd.header(ADAM_MAGIC)?;
    let step = rd.u64()?;
    let mut state = AdamState { step, m: Vec::new(), v: Vec::new() };
    for _ in 0..records {
        if rd.u8()? != KIND_MOMENTS {
            return Err(Error::Format("expected a moment record".into()));
        }
        let n = rd.u32()? as usize;
        state.m.push(rd.f32s(n)?);
        state.v.push(rd.f32s(n)?);
    }
    rd.finish()?;
    Ok(state)
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
