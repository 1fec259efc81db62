//! Binary PPM ("P6") export for quick inspection of renders.

use std::fs;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Quantize a value to 8 bits: clamp to [0,1], scale by 255, round half up.
pub fn quantize(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    img.expect_shape("export_ppm image", &[None, None, Some(3)])?;
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(img.to_f64_vec().into_iter().map(quantize));
    Ok(out)
}

pub fn export_ppm(img: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_ppm(img)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a P6 file written by [`export_ppm`] back as an f32 `[H, W, 3]` tensor in [0,1].
pub fn import_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::with_capacity(4);
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
            return Err(Error::Format(format!("{}: short PPM header", path.display())));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(Error::Format(format!("{}: not an 8-bit P6 file", path.display())));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("{}: bad PPM dimension {s}", path.display())))
    };
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let body = bytes.get(pos..pos + w * h * 3).ok_or_else(|| Error::Truncation {
        path: path.to_path_buf(),
        expected: w * h * 3,
        found: bytes.len().saturating_sub(pos),
    })?;
    Tensor::from_f32(vec![h, w, 3], body.iter().map(|&b| b as f32 / 255.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_pixel_bytes() {
        let img = Tensor::from_f32(vec![1, 1, 3], vec![1.0; 3]).unwrap();
        let mut expected = b"P6\n1 1\n255\n".to_vec();
        expected.extend_from_slice(&[0xFF; 3]);
        assert_eq!(encode_ppm(&img).unwrap(), expected);
    }

    #[test]
    fn half_rounds_up() {
        let img = Tensor::from_f32(vec![1, 1, 3], vec![0.5; 3]).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[128, 128, 128]);
    }

    #[test]
    fn wrong_shape_rejected() {
        let img = Tensor::from_f32(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(encode_ppm(&img), Err(Error::Shape(_))));
        let img = Tensor::from_f32(vec![2, 2, 4], vec![0.0; 16]).unwrap();
        assert!(matches!(encode_ppm(&img), Err(Error::Shape(_))));
    }

    #[test]
    fn out_of_range_values_clamp() {
        assert_eq!(quantize(-3.0), 0);
        assert_eq!(quantize(7.0), 255);
        assert_eq!(quantize(f64::NAN), 0);
    }
}
