//! 8-bit grayscale PNG encoding.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Quantizes `[0, 1]` intensities to bytes (round half away from zero).
pub fn to_gray8(image: &Tensor) -> Vec<u8> {
    image
        .data()
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Encodes an `H×W` image as an 8-bit grayscale PNG.
pub fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.cols() as u32, image.rows() as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer
            .write_image_data(&to_gray8(image))
            .map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode_png(image)?)?;
    Ok(())
}

/// Decodes an 8-bit grayscale PNG to `(width, height, bytes)`.
pub fn decode_png(bytes: &[u8]) -> Result<(u32, u32, Vec<u8>)> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png("expected 8-bit grayscale".into()));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width, info.height, buf))
}
