//! Binary greymap (P5) output for saliency heatmaps.

use crate::error::{Error, Result};

/// Encodes `values` (row-major `h×w`) as an 8-bit PGM, scaled so the
/// minimum maps to 0 and the maximum to 255. A constant map is all zeros.
pub fn encode_pgm(values: &[f64], h: usize, w: usize) -> Result<Vec<u8>> {
    if values.len() != h * w || h == 0 || w == 0 {
        return Err(Error::shape(
            "encode_pgm",
            format!("{} values for a {h}x{w} map", values.len()),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("heatmap value".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

/// Width, height and pixels of a P5 file written by [`encode_pgm`].
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || Error::Data("not an 8-bit P5 greymap".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let pixels = bytes.get(pos..).ok_or_else(bad)?.to_vec();
    if pixels.len() != w * h {
        return Err(bad());
    }
    Ok((w, h, pixels))
}
