//! Minimal PNG encode/decode for backend payloads (RGB8 plus UTF-8 text chunks).

use std::io::Cursor;

use crate::error::{Error, Result};

/// A decoded RGB8 image with its text metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    /// Row-major RGB triples.
    pub pixels: Vec<u8>,
    pub text: Vec<(String, String)>,
}

impl RgbImage {
    pub fn text_value(&self, key: &str) -> Option<&str> {
        self.text.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set_text(&mut self, key: &str, value: &str) {
        match self.text.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value.to_string(),
            None => self.text.push((key.to_string(), value.to_string())),
        }
    }
}

fn decode_error(e: impl std::fmt::Display) -> Error {
    Error::Domain(format!("undecodable image: {e}"))
}

pub fn encode(image: &RgbImage) -> Result<Vec<u8>> {
    if image.pixels.len() != image.width as usize * image.height as usize * 3 {
        return Err(Error::validation("pixels", "buffer size does not match dimensions"));
    }
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, image.width, image.height);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        encoder.set_compression(png::Compression::Fast);
        for (k, v) in &image.text {
            encoder.add_itxt_chunk(k.clone(), v.clone()).map_err(decode_error)?;
        }
        let mut writer = encoder.write_header().map_err(decode_error)?;
        writer.write_image_data(&image.pixels).map_err(decode_error)?;
        writer.finish().map_err(decode_error)?;
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<RgbImage> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(decode_error)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| decode_error("image too large"))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(decode_error)?;
    buf.truncate(frame.buffer_size());
    let pixels = match frame.color_type {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err(decode_error("unexpanded palette image")),
    };
    let info = reader.info();
    let mut text = Vec::new();
    for chunk in &info.utf8_text {
        text.push((chunk.keyword.clone(), chunk.get_text().map_err(decode_error)?));
    }
    for chunk in &info.uncompressed_latin1_text {
        text.push((chunk.keyword.clone(), chunk.text.clone()));
    }
    Ok(RgbImage {
        width: frame.width,
        height: frame.height,
        pixels,
        text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrips_pixels_and_text() {
        let img = RgbImage {
            width: 3,
            height: 2,
            pixels: (0..18).collect(),
            text: vec![("air:class_label".into(), "feu de forêt".into())],
        };
        let bytes = encode(&img).unwrap();
        assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");
        assert_eq!(decode(&bytes).unwrap(), img);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"not a png").is_err());
    }
}
