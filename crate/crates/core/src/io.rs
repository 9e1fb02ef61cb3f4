//! 8-bit grayscale image files: binary PGM (P5) and PNG.

use std::fs;
use std::path::Path;

use image::{ColorType, DynamicImage, ImageFormat};

use crate::error::{Error, Result};
use crate::image::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FileKind {
    Pgm,
    Png,
}

fn kind_from_extension(path: &Path) -> Result<FileKind> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("pgm") => Ok(FileKind::Pgm),
        Some("png") => Ok(FileKind::Png),
        _ => Err(Error::UnsupportedFormat(format!(
            "{}: expected a .pgm or .png extension",
            path.display()
        ))),
    }
}

/// Loads an 8-bit grayscale image; stored codes map to intensities unchanged.
pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P5") {
        return decode_pgm(&bytes);
    }
    if bytes.starts_with(b"P2") || bytes.starts_with(b"P6") || bytes.starts_with(b"P3") {
        return Err(Error::UnsupportedFormat(format!(
            "{}: only binary 8-bit PGM (P5) is supported",
            path.display()
        )));
    }
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)?;
    match img {
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            let data = buf.into_raw().into_iter().map(f64::from).collect();
            GrayImage::new(w as usize, h as usize, data)
        }
        other => {
            let color = other.color();
            if color.has_color() {
                Err(Error::ColorInput {
                    path: path.to_path_buf(),
                    channels: color.channel_count(),
                })
            } else {
                Err(Error::UnsupportedFormat(format!(
                    "{}: {color:?} is not 8-bit grayscale",
                    path.display()
                )))
            }
        }
    }
}

/// Clamps to `[0, 255]` and rounds half away from zero.
pub fn quantize(v: f64) -> u8 {
    v.clamp(0.0, 255.0).round() as u8
}

/// Saves with the format implied by the file extension.
pub fn save_image(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let kind = kind_from_extension(path)?;
    let pixels: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let bytes = match kind {
        FileKind::Pgm => encode_pgm(img.width(), img.height(), &pixels),
        FileKind::Png => {
            let mut out = std::io::Cursor::new(Vec::new());
            image::write_buffer_with_format(
                &mut out,
                &pixels,
                img.width() as u32,
                img.height() as u32,
                ColorType::L8,
                ImageFormat::Png,
            )?;
            out.into_inner()
        }
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        *field = pgm_header_number(bytes, &mut pos)?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!(
            "PGM maxval {maxval}; only 8-bit (255) is supported"
        )));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::UnsupportedFormat("truncated PGM header".into()));
    }
    pos += 1;
    let raster = &bytes[pos..];
    if raster.len() < width * height {
        return Err(Error::UnsupportedFormat(format!(
            "PGM raster has {} bytes, expected {}",
            raster.len(),
            width * height
        )));
    }
    let data = raster[..width * height].iter().map(|&b| f64::from(b)).collect();
    GrayImage::new(width, height, data)
}

fn pgm_header_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::UnsupportedFormat("malformed PGM header".into()))
}
