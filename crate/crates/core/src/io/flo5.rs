//! Optical flow container: `FLO5`, `u32` height, `u32` width (little-endian),
//! `h·w` `(dx, dy)` f32 pairs in row-major order, then `h·w` validity bytes.

use super::Reader;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"FLO5";

/// Decodes to flow `[2, h, w]` and validity `[1, h, w]` (0 or 1).
pub fn decode(bytes: &[u8]) -> Result<(Tensor, Tensor)> {
    let mut r = Reader::new(bytes, "FLO5");
    if r.take(4)? != MAGIC {
        return Err(Error::format("FLO5: bad magic"));
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let n = super::check_extent("FLO5", h, w, 9, r.remaining())?;
    let pairs = r.take(8 * n)?;
    let mask = r.take(n)?;
    if r.remaining() != 0 {
        return Err(Error::format(format!("FLO5: {} trailing bytes", r.remaining())));
    }
    let mut flow = vec![0.0; 2 * n];
    for p in 0..n {
        for c in 0..2 {
            let o = p * 8 + c * 4;
            let v = f32::from_le_bytes(pairs[o..o + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format(format!("FLO5: non-finite displacement at pixel {p}")));
            }
            flow[c * n + p] = v as f64;
        }
    }
    let valid = mask
        .iter()
        .map(|&m| match m {
            0 => Ok(0.0),
            1 => Ok(1.0),
            v => Err(Error::format(format!("FLO5: validity byte {v} is not 0 or 1"))),
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((Tensor::new(&[2, h, w], flow)?, Tensor::new(&[1, h, w], valid)?))
}

pub fn encode(flow: &Tensor, valid: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match *flow.shape() {
        [2, h, w] => (h, w),
        ref s => return Err(Error::shape(format!("flow must be [2, h, w], got {s:?}"))),
    };
    if valid.numel() != h * w {
        return Err(Error::shape(format!(
            "validity {:?} does not match flow {:?}",
            valid.shape(),
            flow.shape()
        )));
    }
    let n = h * w;
    let mut out = Vec::with_capacity(12 + 9 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    let d = flow.data();
    for p in 0..n {
        for c in 0..2 {
            let v = d[c * n + p];
            if !v.is_finite() {
                return Err(Error::NonFinite("flow displacement is not finite".into()));
            }
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.extend(valid.data().iter().map(|&v| u8::from(v != 0.0)));
    Ok(out)
}
