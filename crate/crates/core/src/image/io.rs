use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::ImageGrid;
use crate::error::{Error, Result};

/// On-disk image formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    /// 16-bit grayscale PNG.
    Png,
    /// 16-bit grayscale TIFF.
    Tiff,
    /// Little-endian `f32` samples with a JSON sidecar next to the data file.
    F32,
}

impl ImageFormat {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        match ext.as_str() {
            "png" => Ok(Self::Png),
            "tif" | "tiff" => Ok(Self::Tiff),
            "f32" | "bin" | "raw" => Ok(Self::F32),
            _ => Err(Error::io(path, format!("unknown image format extension {ext:?}"))),
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Self::Png => "png",
            Self::Tiff => "tif",
            Self::F32 => "f32",
        }
    }
}

impl FromStr for ImageFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "png" => Ok(Self::Png),
            "tif" | "tiff" => Ok(Self::Tiff),
            "f32" | "float" | "f32le" => Ok(Self::F32),
            other => Err(Error::invalid(format!("unknown image format {other:?}"))),
        }
    }
}

/// JSON sidecar of the float-binary format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub width: usize,
    pub height: usize,
    pub pixel_pitch_um: Option<f64>,
    pub dtype: String,
}

impl Sidecar {
    pub const DTYPE: &'static str = "f32le";

    pub fn path_for(data: &Path) -> PathBuf {
        data.with_extension("json")
    }

    fn parse(path: &Path, text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::io(path, format!("corrupt sidecar: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::io(path, "sidecar is not a JSON object"))?;
        let dim = |key: &str| -> Result<usize> {
            let v = obj
                .get(key)
                .ok_or_else(|| Error::io(path, format!("sidecar is missing key \"{key}\"")))?;
            v.as_u64()
                .and_then(|n| usize::try_from(n).ok())
                .ok_or_else(|| Error::io(path, format!("sidecar key \"{key}\" is not a size: {v}")))
        };
        let width = dim("width")?;
        let height = dim("height")?;
        let pixel_pitch_um = match obj.get("pixel_pitch_um") {
            None | Some(Value::Null) => None,
            Some(v) => Some(
                v.as_f64()
                    .ok_or_else(|| Error::io(path, format!("sidecar key \"pixel_pitch_um\" is not a number: {v}")))?,
            ),
        };
        let dtype = match obj.get("dtype") {
            None => Self::DTYPE.to_string(),
            Some(v) => v
                .as_str()
                .ok_or_else(|| Error::io(path, "sidecar key \"dtype\" is not a string"))?
                .to_string(),
        };
        if dtype != Self::DTYPE {
            return Err(Error::io(path, format!("unsupported dtype {dtype:?}")));
        }
        Ok(Self {
            width,
            height,
            pixel_pitch_um,
            dtype,
        })
    }
}

pub fn load_image(path: &Path, format: ImageFormat) -> Result<ImageGrid> {
    match format {
        ImageFormat::Png | ImageFormat::Tiff => load_integer(path),
        ImageFormat::F32 => load_f32(path),
    }
}

/// Writes `image`. Integer formats round to the nearest count and clamp to
/// `[0, 65535]`; the float format also writes `<stem>.json`.
pub fn save_image(image: &ImageGrid, path: &Path, format: ImageFormat) -> Result<()> {
    match format {
        ImageFormat::Png | ImageFormat::Tiff => save_integer(image, path, format),
        ImageFormat::F32 => save_f32(image, path),
    }
}

fn load_integer(path: &Path) -> Result<ImageGrid> {
    let decoded = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::io(path, format!("cannot decode: {e}")))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let pixels: Vec<f64> = match decoded {
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(f64::from).collect(),
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(f64::from).collect(),
        other => {
            return Err(Error::io(
                path,
                format!("expected a grayscale image, found {:?}", other.color()),
            ))
        }
    };
    ImageGrid::new(w, h, pixels).map_err(|e| Error::io(path, e))
}

fn save_integer(image: &ImageGrid, path: &Path, format: ImageFormat) -> Result<()> {
    let data: Vec<u16> = image
        .pixels()
        .iter()
        .map(|v| v.round().clamp(0.0, u16::MAX as f64) as u16)
        .collect();
    let w = u32::try_from(image.width()).map_err(|_| Error::io(path, "image too wide"))?;
    let h = u32::try_from(image.height()).map_err(|_| Error::io(path, "image too tall"))?;
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w, h, data).ok_or_else(|| Error::io(path, "buffer size mismatch"))?;
    let fmt = match format {
        ImageFormat::Png => image::ImageFormat::Png,
        _ => image::ImageFormat::Tiff,
    };
    buf.save_with_format(path, fmt).map_err(|e| Error::io(path, e))
}

fn load_f32(path: &Path) -> Result<ImageGrid> {
    let sidecar_path = Sidecar::path_for(path);
    let text = fs::read_to_string(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
    let meta = Sidecar::parse(&sidecar_path, &text)?;
    let count = meta
        .width
        .checked_mul(meta.height)
        .and_then(|n| n.checked_mul(4).map(|_| n))
        .ok_or_else(|| Error::io(&sidecar_path, "dimensions overflow"))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != count * 4 {
        return Err(Error::io(
            path,
            format!(
                "expected {} bytes for {}x{} f32 samples, found {}",
                count * 4,
                meta.width,
                meta.height,
                bytes.len()
            ),
        ));
    }
    let pixels = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(ImageGrid::new(meta.width, meta.height, pixels)
        .map_err(|e| Error::io(path, e))?
        .with_pixel_pitch(meta.pixel_pitch_um))
}

fn save_f32(image: &ImageGrid, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(image.len() * 4);
    for &v in image.pixels() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let meta = Sidecar {
        width: image.width(),
        height: image.height(),
        pixel_pitch_um: image.pixel_pitch_um(),
        dtype: Sidecar::DTYPE.to_string(),
    };
    let sidecar_path = Sidecar::path_for(path);
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::io(&sidecar_path, e))?;
    fs::write(&sidecar_path, text).map_err(|e| Error::io(&sidecar_path, e))
}
