use std::io::Cursor;
use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Ppm,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Ppm => "ppm",
        }
    }

    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "png" => Some(ImageFormat::Png),
            "ppm" => Some(ImageFormat::Ppm),
            _ => None,
        }
    }
}

impl std::str::FromStr for ImageFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "png" => Ok(ImageFormat::Png),
            "ppm" => Ok(ImageFormat::Ppm),
            other => Err(Error::invalid(format!("unknown image format {other:?}"))),
        }
    }
}

/// 8-bit RGB PNG without ancillary chunks.
pub fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width() as u32, image.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Encoding(e.to_string()))?;
        writer
            .write_image_data(image.data())
            .map_err(|e| Error::Encoding(e.to_string()))?;
        writer.finish().map_err(|e| Error::Encoding(e.to_string()))?;
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Encoding(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Encoding("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Encoding(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Encoding(format!(
            "expected 8-bit RGB, found {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Image::from_raw(info.width as usize, info.height as usize, buf)
}

/// Binary PPM (P6, maxval 255).
pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend_from_slice(image.data());
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let bad = |msg: &str| Error::Encoding(format!("malformed PPM: {msg}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("header ends early"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("only P6 with maxval 255 is supported"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("height"))?;
    // Exactly one whitespace byte separates the header from the raster.
    let raster = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
    Image::from_raw(width, height, raster.to_vec())
}

pub fn encode(image: &Image, format: ImageFormat) -> Result<Vec<u8>> {
    match format {
        ImageFormat::Png => encode_png(image),
        ImageFormat::Ppm => Ok(encode_ppm(image)),
    }
}

/// Writes `image` in the format named by the path's extension (PNG when the
/// extension is missing or unknown).
pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = ImageFormat::from_path(path).unwrap_or(ImageFormat::Png);
    std::fs::write(path, encode(image, format)?)?;
    Ok(())
}
