//! Binary PPM (`P6`) colour images, 8 bits per sample.

use super::{check_extent, HeaderTokens};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Decodes to a `[3, h, w]` tensor with samples scaled to `[0, 1]`.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut hdr = HeaderTokens::new(bytes, "PPM", true);
    if hdr.next_token()? != "P6" {
        return Err(Error::format("PPM: missing P6 magic"));
    }
    let w = hdr.next_usize("width")?;
    let h = hdr.next_usize("height")?;
    let maxval = hdr.next_usize("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(format!(
            "PPM: maxval {maxval} unsupported (only 8-bit samples)"
        )));
    }
    let start = hdr.end_header()?;
    let body = &bytes[start..];
    let n = check_extent("PPM", h, w, 3, body.len())?;
    let m = maxval as f64;
    let hw = h * w;
    let mut data = vec![0.0; 3 * hw];
    for p in 0..n {
        for c in 0..3 {
            let v = body[p * 3 + c] as usize;
            if v > maxval {
                return Err(Error::format(format!("PPM: sample {v} exceeds maxval {maxval}")));
            }
            data[c * hw + p] = v as f64 / m;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Encodes a `[3, h, w]` tensor in `[0, 1]`, rounding to the nearest 1/255.
pub fn encode(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match *img.shape() {
        [3, h, w] => (h, w),
        [1, 3, h, w] => (h, w),
        ref s => return Err(Error::shape(format!("PPM needs a [3, h, w] image, got {s:?}"))),
    };
    let hw = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * hw);
    let d = img.data();
    for p in 0..hw {
        for c in 0..3 {
            let v = d[c * hw + p];
            if !v.is_finite() {
                return Err(Error::NonFinite("PPM sample is not finite".into()));
            }
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}
