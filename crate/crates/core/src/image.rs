//! Binary portable pixmaps (P6, maxval 255).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes a P6 image into a `(1, 3, h, w)` tensor scaled to `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // whitespace and comments between header fields
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("P6: header ends early".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(Error::Format(format!(
            "expected a binary pixmap (P6), got magic {:?}",
            fields[0]
        )));
    }
    let num = |i: usize, what: &str| -> Result<usize> {
        fields[i]
            .parse()
            .map_err(|_| Error::Format(format!("P6: bad {what} {:?}", fields[i])))
    };
    let (w, h, max) = (num(1, "width")?, num(2, "height")?, num(3, "maxval")?);
    if max != 255 {
        return Err(Error::Format(format!(
            "P6: maxval {max} unsupported (need 255)"
        )));
    }
    if w == 0 || h == 0 {
        return Err(Error::Format(format!("P6: empty image {w}x{h}")));
    }
    // exactly one whitespace byte before the raster
    pos += 1;
    let need = 3 * w * h;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != need {
        return Err(Error::Format(format!(
            "P6: {w}x{h} needs {need} raster bytes, found {}",
            raster.len()
        )));
    }
    Ok(Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
        raster[(y * w + x) * 3 + c] as f64 / 255.0
    }))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&std::fs::read(path)?)
}

/// Encodes channels 0..3 of image 0, clamping to `[0, 1]`.
pub fn encode_ppm(t: &Tensor) -> Result<Vec<u8>> {
    let [_, c, h, w] = t.shape();
    if c != 3 {
        return Err(Error::Argument(format!("pixmap needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push((t.at(0, ch, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}
