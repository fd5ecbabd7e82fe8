//! Space-time slices: one pixel row from every frame stacked into an image.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Row `row` of each map in `[n, 1, h, w]`, as an `n × w` grid of raw values.
pub fn slice(maps: &Tensor, row: usize) -> Result<Tensor> {
    let [n, c, h, w] = maps.dims4("depth maps")?;
    if c != 1 {
        return Err(Error::shape(format!("x-t slice needs single-channel maps, got {c} channels")));
    }
    if row >= h {
        return Err(Error::config(format!(
            "row {row} is out of range; valid rows are 0..={}",
            h - 1
        )));
    }
    let d = maps.data();
    let mut out = Vec::with_capacity(n * w);
    for i in 0..n {
        let base = (i * h + row) * w;
        out.extend_from_slice(&d[base..base + w]);
    }
    Tensor::new(&[n, w], out)
}

/// Min-max scales the whole slice to 0..=255; a constant slice maps to 0.
pub fn normalize(slice: &Tensor) -> Vec<u8> {
    let d = slice.data();
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    d.iter()
        .map(|&v| {
            if span > 0.0 && span.is_finite() {
                ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

/// Binary PGM (P5) of the normalized slice.
pub fn render_pgm(maps: &Tensor, row: usize) -> Result<Vec<u8>> {
    let s = slice(maps, row)?;
    if !s.all_finite() {
        return Err(Error::NonFinite(format!("row {row} contains non-finite depth")));
    }
    let (n, w) = (s.shape()[0], s.shape()[1]);
    let mut out = format!("P5\n{w} {n}\n255\n").into_bytes();
    out.extend(normalize(&s));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alternating_frames_give_stripes() {
        let maps = Tensor::from_fn(&[4, 1, 3, 5], |i| if i[0] % 2 == 0 { 1.0 } else { 2.0 });
        let img = render_pgm(&maps, 1).unwrap();
        let px = &img[img.len() - 20..];
        for (r, chunk) in px.chunks(5).enumerate() {
            let want = if r % 2 == 0 { 0 } else { 255 };
            assert!(chunk.iter().all(|&p| p == want));
        }
    }

    #[test]
    fn bad_row_names_range() {
        let maps = Tensor::zeros(&[2, 1, 3, 4]);
        let e = render_pgm(&maps, 3).unwrap_err().to_string();
        assert!(e.contains("0..=2"), "{e}");
    }
}
