//! PNG and JSON helpers for images and tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

/// Reads an 8-bit image as a `[3, H, W]` tensor in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data))
}

/// 8-bit RGB encoding of a `[3, H, W]` tensor (values clamped to `[0, 1]`).
pub fn to_rgb8(t: &Tensor) -> Result<(u32, u32, Vec<u8>)> {
    let (c, h, w) = t.chw()?;
    if c != 3 {
        return Err(Error::ShapeMismatch {
            expected: vec![3, h, w],
            got: t.shape().to_vec(),
        });
    }
    let mut buf = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                buf.push((t.at3(ch, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok((w as u32, h as u32, buf))
}

pub fn write_png(path: &Path, t: &Tensor) -> Result<()> {
    let (w, h, buf) = to_rgb8(t)?;
    image::save_buffer(path, &buf, w, h, image::ColorType::Rgb8)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, serde_json::to_vec(t)?)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let t: Tensor = serde_json::from_slice(&std::fs::read(path)?)?;
    Tensor::try_new(t.shape(), t.data().to_vec())
}
