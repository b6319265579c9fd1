//! Header-only media inspection.
//!
//! Media filters need widths, heights and byte sizes, not pixels, so this
//! module parses just the container headers (PNG IHDR, JPEG SOFn, BMP
//! info header). Anything unreadable is an [`MediaError::Unreadable`]
//! routed to fault tolerance by the calling operator.

use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MediaDims {
    pub width: u32,
    pub height: u32,
}

impl MediaDims {
    pub fn aspect_ratio(&self) -> f64 {
        self.width as f64 / self.height.max(1) as f64
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum MediaError {
    #[error("unreadable media {path}: {reason}")]
    Unreadable { path: String, reason: String },
}

impl MediaError {
    fn new(path: &Path, reason: impl fmt::Display) -> Self {
        MediaError::Unreadable {
            path: path.display().to_string(),
            reason: reason.to_string(),
        }
    }
}

pub fn file_size(path: &Path) -> Result<u64, MediaError> {
    std::fs::metadata(path)
        .map(|m| m.len())
        .map_err(|e| MediaError::new(path, e))
}

/// Width and height from the container header of a PNG, JPEG or BMP file.
pub fn image_dimensions(path: &Path) -> Result<MediaDims, MediaError> {
    let bytes = std::fs::read(path).map_err(|e| MediaError::new(path, e))?;
    parse_dimensions(&bytes).map_err(|reason| MediaError::new(path, reason))
}

fn parse_dimensions(bytes: &[u8]) -> Result<MediaDims, String> {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        return png_dimensions(bytes);
    }
    if bytes.starts_with(&[0xFF, 0xD8]) {
        return jpeg_dimensions(bytes);
    }
    if bytes.starts_with(b"BM") {
        return bmp_dimensions(bytes);
    }
    Err("unknown container (expected PNG, JPEG or BMP)".to_string())
}

fn png_dimensions(bytes: &[u8]) -> Result<MediaDims, String> {
    // Signature (8) + chunk length (4) + "IHDR" (4) + width (4) + height (4).
    if bytes.len() < 24 || &bytes[12..16] != b"IHDR" {
        return Err("truncated PNG header".to_string());
    }
    Ok(MediaDims {
        width: u32::from_be_bytes(bytes[16..20].try_into().unwrap()),
        height: u32::from_be_bytes(bytes[20..24].try_into().unwrap()),
    })
}

fn jpeg_dimensions(bytes: &[u8]) -> Result<MediaDims, String> {
    let mut pos = 2usize;
    while pos + 4 <= bytes.len() {
        if bytes[pos] != 0xFF {
            return Err("corrupt JPEG marker stream".to_string());
        }
        let marker = bytes[pos + 1];
        match marker {
            // Markers without a length payload.
            0xD8 | 0x01 | 0xD0..=0xD7 => {
                pos += 2;
                continue;
            }
            0xD9 => break,
            _ => {}
        }
        let len = u16::from_be_bytes([bytes[pos + 2], bytes[pos + 3]]) as usize;
        if len < 2 {
            return Err("corrupt JPEG segment length".to_string());
        }
        let is_sof = matches!(marker, 0xC0..=0xCF) && !matches!(marker, 0xC4 | 0xC8 | 0xCC);
        if is_sof {
            // Segment: length(2) precision(1) height(2) width(2).
            if pos + 9 > bytes.len() {
                return Err("truncated JPEG SOF segment".to_string());
            }
            return Ok(MediaDims {
                height: u16::from_be_bytes([bytes[pos + 5], bytes[pos + 6]]) as u32,
                width: u16::from_be_bytes([bytes[pos + 7], bytes[pos + 8]]) as u32,
            });
        }
        pos += 2 + len;
    }
    Err("no JPEG SOF segment found".to_string())
}

fn bmp_dimensions(bytes: &[u8]) -> Result<MediaDims, String> {
    if bytes.len() < 26 {
        return Err("truncated BMP header".to_string());
    }
    let width = i32::from_le_bytes(bytes[18..22].try_into().unwrap());
    // Height may be negative for top-down bitmaps.
    let height = i32::from_le_bytes(bytes[22..26].try_into().unwrap());
    Ok(MediaDims {
        width: width.unsigned_abs(),
        height: height.unsigned_abs(),
    })
}

/// Synthetic media fixtures: minimal files whose headers parse like real
/// ones. Used to exercise the media filters and fault paths without
/// shipping binary assets.
pub mod synth {
    /// Minimal PNG: signature plus an IHDR chunk (CRC not validated here).
    pub fn png_bytes(width: u32, height: u32) -> Vec<u8> {
        let mut out = Vec::with_capacity(33);
        out.extend_from_slice(b"\x89PNG\r\n\x1a\n");
        out.extend_from_slice(&13u32.to_be_bytes());
        out.extend_from_slice(b"IHDR");
        out.extend_from_slice(&width.to_be_bytes());
        out.extend_from_slice(&height.to_be_bytes());
        out.extend_from_slice(&[8, 2, 0, 0, 0]); // bit depth, color type, ...
        out.extend_from_slice(&[0, 0, 0, 0]); // CRC placeholder
        out
    }

    /// Minimal JPEG: SOI, APP0, SOF0 with the given dimensions, EOI.
    pub fn jpeg_bytes(width: u16, height: u16) -> Vec<u8> {
        let mut out = vec![0xFF, 0xD8];
        out.extend_from_slice(&[0xFF, 0xE0, 0x00, 0x10]);
        out.extend_from_slice(b"JFIF\0");
        out.extend_from_slice(&[0x01, 0x01, 0x00, 0x00, 0x01, 0x00, 0x01, 0x00, 0x00]);
        out.extend_from_slice(&[0xFF, 0xC0, 0x00, 0x11, 0x08]);
        out.extend_from_slice(&height.to_be_bytes());
        out.extend_from_slice(&width.to_be_bytes());
        out.extend_from_slice(&[
            0x03, 0x01, 0x22, 0x00, 0x02, 0x11, 0x01, 0x03, 0x11, 0x01,
        ]);
        out.extend_from_slice(&[0xFF, 0xD9]);
        out
    }

    /// Minimal BMP: file header plus a BITMAPINFOHEADER, no pixel data.
    pub fn bmp_bytes(width: i32, height: i32) -> Vec<u8> {
        let mut out = Vec::with_capacity(54);
        out.extend_from_slice(b"BM");
        out.extend_from_slice(&54u32.to_le_bytes());
        out.extend_from_slice(&[0; 4]);
        out.extend_from_slice(&54u32.to_le_bytes());
        out.extend_from_slice(&40u32.to_le_bytes());
        out.extend_from_slice(&width.to_le_bytes());
        out.extend_from_slice(&height.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&24u16.to_le_bytes());
        out.extend_from_slice(&[0; 24]);
        out
    }
}
