//! Binary 8-bit portable graymaps (P5).

use crate::error::{Error, Result};

/// Row-major `width × height` values scaled so 0 is black and the image
/// maximum is white. Non-positive or non-finite maxima give a black image.
pub fn encode(width: usize, height: usize, values: &[f32]) -> Vec<u8> {
    assert_eq!(values.len(), width * height, "pgm data size");
    let max = values.iter().copied().filter(|v| v.is_finite()).fold(0.0f32, f32::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if max > 0.0 && v.is_finite() {
            (v.max(0.0) / max * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

/// `(width, height, pixels)` of a P5 image.
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::Parse(format!("pgm: {m}"));
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
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("not an 8-bit P5 image"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing data"))?;
    if data.len() != w * h {
        return Err(bad("pixel count"));
    }
    Ok((w, h, data.to_vec()))
}
