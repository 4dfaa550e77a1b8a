//! PNG decoding and pinned-settings encoding with atomic writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageReader};
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::raster::{Plane, RasterImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageKind {
    Png,
    /// JPEG input, only decoded when lossy input is explicitly allowed.
    Lossy,
}

pub fn image_kind(path: &Path) -> Option<ImageKind> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    match ext.as_str() {
        "png" => Some(ImageKind::Png),
        "jpg" | "jpeg" => Some(ImageKind::Lossy),
        _ => None,
    }
}

/// Image files below `dir`, sorted by path. Lossy files are listed too; callers decide.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(dir).to_path_buf();
            Error::io(path, e.into())
        })?;
        if entry.file_type().is_file() && image_kind(entry.path()).is_some() {
            out.push(entry.into_path());
        }
    }
    Ok(out)
}

fn decode_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Decodes an 8-bit gray or RGB image. Alpha and other bit depths are rejected.
pub fn read_image(path: &Path) -> Result<RasterImage> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => decode_error(path, other.to_string()),
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let result = match decoded {
        DynamicImage::ImageLuma8(buf) => RasterImage::from_interleaved(h, w, 1, buf.as_raw()),
        DynamicImage::ImageRgb8(buf) => RasterImage::from_interleaved(h, w, 3, buf.as_raw()),
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgba8(_) => {
            return Err(decode_error(path, "alpha channel is not supported"));
        }
        DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgba16(_)
        | DynamicImage::ImageRgba32F(_) => {
            return Err(decode_error(path, "alpha channel is not supported"));
        }
        other => {
            return Err(decode_error(
                path,
                format!("only 8-bit samples are supported, got {:?}", other.color()),
            ))
        }
    };
    result.map_err(|e| decode_error(path, e.to_string()))
}

fn encode_png(image: &RasterImage) -> Result<Vec<u8>> {
    let color = match image.channels() {
        1 => ExtendedColorType::L8,
        _ => ExtendedColorType::Rgb8,
    };
    let mut bytes = Vec::new();
    PngEncoder::new_with_quality(&mut bytes, CompressionType::Default, FilterType::Adaptive)
        .write_image(
            &image.to_interleaved(),
            image.width() as u32,
            image.height() as u32,
            color,
        )
        .map_err(|e| Error::InvalidImage(e.to_string()))?;
    Ok(bytes)
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let mut tmp = tempfile::Builder::new()
        .prefix(".specpeak-")
        .suffix(".tmp")
        .tempfile_in(parent)
        .map_err(|e| Error::io(parent, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_png(path: &Path, image: &RasterImage) -> Result<()> {
    write_atomic(path, &encode_png(image)?)
}

/// 8-bit grayscale PNG of an arbitrary-size plane (no minimum side).
pub fn write_gray_png(path: &Path, plane: &Plane<u8>) -> Result<()> {
    let mut bytes = Vec::new();
    PngEncoder::new_with_quality(&mut bytes, CompressionType::Default, FilterType::Adaptive)
        .write_image(
            plane.as_slice(),
            plane.width() as u32,
            plane.height() as u32,
            ExtendedColorType::L8,
        )
        .map_err(|e| Error::InvalidImage(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// 1-bit grayscale PNG; `true` is white.
pub fn write_bilevel_png(path: &Path, bits: &Plane<bool>) -> Result<()> {
    let (h, w) = bits.dims();
    let stride = w.div_ceil(8);
    let mut packed = vec![0u8; stride * h];
    for r in 0..h {
        for (c, &b) in bits.row(r).iter().enumerate() {
            if b {
                packed[r * stride + c / 8] |= 0x80 >> (c % 8);
            }
        }
    }
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut bytes, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::InvalidImage(e.to_string()))?;
        writer
            .write_image_data(&packed)
            .map_err(|e| Error::InvalidImage(e.to_string()))?;
    }
    write_atomic(path, &bytes)
}
