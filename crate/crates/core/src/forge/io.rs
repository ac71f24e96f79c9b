//! PNG and Middlebury `.flo` readers and writers.

use std::fs;
use std::path::Path;

use crate::domain::{ChangeMask, FlowField, Image, MaskKind};
use crate::error::{ensure, Error, Result};

/// `.flo` magic tag, the float 202021.25 stored little-endian.
pub const FLO_MAGIC: &[u8; 4] = b"PIEH";

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

pub fn write_png_rgb(path: &Path, img: &Image) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.to_rgb8())
        .expect("buffer size matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

/// Raw 8-bit RGB pixels and dimensions `(height, width)`.
pub fn read_rgb8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    Ok((img.height() as usize, img.width() as usize, img.into_raw()))
}

pub fn read_png_rgb(path: &Path) -> Result<Image> {
    let (h, w, bytes) = read_rgb8(path)?;
    Image::from_rgb8(h, w, &bytes).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_gray8(path: &Path, height: usize, width: usize, data: Vec<u8>) -> Result<()> {
    let buf = image::GrayImage::from_raw(width as u32, height as u32, data)
        .expect("buffer size matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

pub fn read_gray8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    Ok((img.height() as usize, img.width() as usize, img.into_raw()))
}

/// Binary masks are stored as 0 / 255.
pub fn write_mask_png(path: &Path, mask: &ChangeMask) -> Result<()> {
    write_gray8(path, mask.height(), mask.width(), mask.to_gray8())
}

pub fn read_mask_png(path: &Path) -> Result<ChangeMask> {
    let (h, w, bytes) = read_gray8(path)?;
    let data = bytes
        .iter()
        .map(|&b| match b {
            0 => Ok(0.0),
            255 => Ok(1.0),
            other => Err(Error::format(path, format!("mask value {other} is neither 0 nor 255"))),
        })
        .collect::<Result<Vec<f64>>>()?;
    ChangeMask::new(h, w, data, MaskKind::GroundTruth)
}

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let (h, w) = (flow.height(), flow.width());
    let mut out = Vec::with_capacity(12 + 8 * h * w);
    out.extend_from_slice(FLO_MAGIC);
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for (u, v) in flow.u().iter().zip(flow.v()) {
        out.extend_from_slice(&(*u as f32).to_le_bytes());
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_flo(path: &Path, bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::format(path, "file shorter than the .flo header"));
    }
    if &bytes[..4] != FLO_MAGIC {
        return Err(Error::format(path, "missing PIEH magic tag"));
    }
    let int = |o: usize| i32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let (w, h) = (int(4), int(8));
    if w <= 0 || h <= 0 {
        return Err(Error::format(path, format!("invalid dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = 12 + 8 * w * h;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes for {w}x{h}, found {}", bytes.len()),
        ));
    }
    let float = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for i in 0..w * h {
        u.push(float(12 + 8 * i));
        v.push(float(16 + 8 * i));
    }
    FlowField::new(h, w, u, v).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    fs::write(path, encode_flo(flow)).map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flo(path, &bytes)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Validation error naming `path` unless it exists.
pub(crate) fn require_exists(path: &Path) -> Result<()> {
    ensure!(path.exists(), "missing file: {}", path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flo_starts_with_magic_and_round_trips() {
        let f = FlowField::from_fn(3, 5, |y, x| (x as f64 * 0.25 - 1.0, y as f64 * -1.5)).unwrap();
        let bytes = encode_flo(&f);
        assert_eq!(&bytes[..4], b"PIEH");
        assert_eq!(bytes.len(), 12 + 8 * 15);
        assert_eq!(decode_flo(Path::new("x.flo"), &bytes).unwrap(), f);
    }

    #[test]
    fn flo_is_float32() {
        let f = FlowField::new(1, 1, vec![0.1], vec![1.0 / 3.0]).unwrap();
        let back = decode_flo(Path::new("x.flo"), &encode_flo(&f)).unwrap();
        assert_eq!(back, f.to_f32_precision());
        assert_ne!(back, f);
    }

    #[test]
    fn malformed_flo_is_a_format_error() {
        let f = FlowField::zeros(2, 2);
        let bytes = encode_flo(&f);
        let p = Path::new("bad.flo");
        for broken in [&bytes[..bytes.len() - 1], &bytes[..8]] {
            assert!(matches!(decode_flo(p, broken), Err(Error::Format { .. })));
        }
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode_flo(p, &wrong), Err(Error::Format { .. })));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_flo(p, &long), Err(Error::Format { .. })));
    }

    #[test]
    fn png_and_mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(16, 24, |y, x| [(x * 10) as f64 / 255.0, (y * 15) as f64 / 255.0, 1.0]).unwrap();
        let p = dir.path().join("a.png");
        write_png_rgb(&p, &img).unwrap();
        assert_eq!(read_png_rgb(&p).unwrap(), img);

        let mask = ChangeMask::new(2, 3, vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0], MaskKind::GroundTruth).unwrap();
        let m = dir.path().join("m.png");
        write_mask_png(&m, &mask).unwrap();
        assert_eq!(read_mask_png(&m).unwrap(), mask);

        write_gray8(&m, 1, 2, vec![0, 128]).unwrap();
        assert!(matches!(read_mask_png(&m), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_flo(Path::new("/nonexistent/x.flo")).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}
