//! Grayscale PFM (`Pf`) float maps. Rows are stored bottom to top; a negative
//! scale marks little-endian samples.

use super::{check_extent, HeaderTokens};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Decodes to a `[1, h, w]` tensor. NaN samples are rejected.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut hdr = HeaderTokens::new(bytes, "PFM", false);
    match hdr.next_token()? {
        "Pf" => {}
        "PF" => return Err(Error::format("PFM: colour PF maps are not supported")),
        _ => return Err(Error::format("PFM: missing Pf magic")),
    }
    let w = hdr.next_usize("width")?;
    let h = hdr.next_usize("height")?;
    let scale_tok = hdr.next_token()?;
    let scale: f64 = scale_tok
        .parse()
        .map_err(|_| Error::format(format!("PFM: bad scale {scale_tok:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format(format!("PFM: invalid scale {scale}")));
    }
    let little = scale < 0.0;
    let start = hdr.end_header()?;
    let body = &bytes[start..];
    check_extent("PFM", h, w, 4, body.len())?;
    let mut data = vec![0.0; h * w];
    for row in 0..h {
        let src_row = h - 1 - row;
        for x in 0..w {
            let o = (src_row * w + x) * 4;
            let b: [u8; 4] = body[o..o + 4].try_into().unwrap();
            let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            if v.is_nan() {
                return Err(Error::format(format!("PFM: NaN at row {row}, column {x}")));
            }
            data[row * w + x] = v as f64;
        }
    }
    Tensor::new(&[1, h, w], data)
}

/// Encodes the trailing `h×w` plane of a `[1, h, w]` or `[1, 1, h, w]` map
/// as little-endian f32.
pub fn encode(map: &Tensor) -> Result<Vec<u8>> {
    let s = map.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
        return Err(Error::shape(format!("PFM needs a single-channel map, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * h * w);
    let d = map.data();
    for row in (0..h).rev() {
        for &v in &d[row * w..(row + 1) * w] {
            if v.is_nan() {
                return Err(Error::NonFinite("PFM sample is NaN".into()));
            }
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bottom_to_top_rows() {
        let t = Tensor::new(&[1, 2, 1], vec![1.0, 2.0]).unwrap();
        let b = encode(&t).unwrap();
        let body = &b[b.len() - 8..];
        assert_eq!(f32::from_le_bytes(body[..4].try_into().unwrap()), 2.0);
        assert_eq!(decode(&b).unwrap(), t);
    }

    #[test]
    fn big_endian_and_nan() {
        let mut b = b"Pf\n1 1\n1.0\n".to_vec();
        b.extend(3.5f32.to_be_bytes());
        assert_eq!(decode(&b).unwrap().data(), &[3.5]);
        let mut b = b"Pf\n1 1\n-1.0\n".to_vec();
        b.extend(f32::NAN.to_le_bytes());
        assert!(matches!(decode(&b), Err(Error::Format(_))));
    }
}
