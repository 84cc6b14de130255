//! Raster file formats: the raw-float `SARF` container, binary and ASCII
//! PGM/PPM, optional PNG, and display quicklooks.
//!
//! ```text
//! SARF   "SARF"  version:u32  height:u32  width:u32  f32 payload (row-major, little-endian)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::AmplitudeImage;
use crate::nn::weights::atomic_write;

pub const SARF_MAGIC: &[u8; 4] = b"SARF";
pub const SARF_VERSION: u32 = 1;
/// Percentile mapped to white in quicklooks.
pub const QUICKLOOK_PERCENTILE: f64 = 0.995;

pub fn encode_sarf(img: &AmplitudeImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * img.len());
    out.extend_from_slice(SARF_MAGIC);
    for v in [SARF_VERSION, img.height() as u32, img.width() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &p in img.pixels() {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    out
}

pub fn decode_sarf(bytes: &[u8]) -> Result<AmplitudeImage> {
    if bytes.len() < 16 || &bytes[..4] != SARF_MAGIC {
        return Err(Error::Format("not a SARF file (bad magic)".into()));
    }
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    let (version, h, w) = (word(4), word(8) as usize, word(12) as usize);
    if version != SARF_VERSION {
        return Err(Error::Format(format!("unsupported SARF version {version}")));
    }
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("SARF dimensions overflow".into()))?;
    if bytes.len() - 16 != expected {
        return Err(Error::Format(format!(
            "SARF payload holds {} bytes, {h}x{w} needs {expected}",
            bytes.len() - 16
        )));
    }
    let px = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    AmplitudeImage::new(h, w, px)
}

pub fn write_sarf(path: &Path, img: &AmplitudeImage) -> Result<()> {
    atomic_write(path, &encode_sarf(img))
}

pub fn read_sarf(path: &Path) -> Result<AmplitudeImage> {
    let bytes = fs::read(path).map_err(|e| Error::ingest(path, e))?;
    decode_sarf(&bytes).map_err(|e| Error::ingest(path, e))
}

/// ITU-R BT.601 luma.
pub fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

struct Tokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Tokens<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("malformed PNM header or sample".into()))
    }
}

/// Decodes P2/P5 (gray) and P3/P6 (RGB, converted to luma) into `[0, 1]`.
pub fn decode_pnm(bytes: &[u8]) -> Result<AmplitudeImage> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::Format("not a PNM file".into()));
    }
    let kind = bytes[1];
    let channels = match kind {
        b'2' | b'5' => 1,
        b'3' | b'6' => 3,
        _ => return Err(Error::Format(format!("unsupported PNM type P{}", kind as char))),
    };
    let mut t = Tokens { bytes, pos: 2 };
    let (w, h, maxval) = (t.number()?, t.number()?, t.number()?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("invalid PNM header {w}x{h} maxval {maxval}")));
    }
    let n = w * h * channels;
    let samples: Vec<f64> = if kind == b'2' || kind == b'3' {
        (0..n).map(|_| t.number().map(|v| v as f64)).collect::<Result<_>>()?
    } else {
        // exactly one whitespace byte separates the header from the raster
        let start = t.pos + 1;
        let width = if maxval < 256 { 1 } else { 2 };
        let raster = bytes
            .get(start..start + n * width)
            .ok_or_else(|| Error::Format("truncated PNM raster".into()))?;
        if width == 1 {
            raster.iter().map(|&b| b as f64).collect()
        } else {
            raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64).collect()
        }
    };
    if samples.iter().any(|&v| v > maxval as f64) {
        return Err(Error::Format("PNM sample exceeds maxval".into()));
    }
    let m = maxval as f64;
    let px = if channels == 1 {
        samples.into_iter().map(|v| v / m).collect()
    } else {
        samples.chunks_exact(3).map(|c| luma(c[0], c[1], c[2]) / m).collect()
    };
    AmplitudeImage::new(h, w, px)
}

/// 8-bit binary PGM of `img` scaled so that `white` maps to 255.
pub fn encode_pgm(img: &AmplitudeImage, white: f64) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    let scale = if white > 0.0 { 255.0 / white } else { 0.0 };
    out.extend(img.pixels().iter().map(|&p| (p * scale).round().clamp(0.0, 255.0) as u8));
    out
}

/// Binary PGM with maxval 1 (one bit of information per pixel).
pub fn encode_mask_pgm(height: usize, width: usize, flags: &[bool]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n1\n").into_bytes();
    out.extend(flags.iter().map(|&f| f as u8));
    out
}

#[cfg(feature = "png")]
pub fn decode_png(bytes: &[u8]) -> Result<AmplitudeImage> {
    use png::{BitDepth, ColorType, Transformations};
    let fmt = |e: png::DecodingError| Error::Format(format!("PNG: {e}"));
    let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
    dec.set_transformations(Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(fmt)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("PNG too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let samples: Vec<f64> = match info.bit_depth {
        BitDepth::Sixteen => buf[..info.buffer_size()]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect(),
        _ => buf[..info.buffer_size()].iter().map(|&b| b as f64 / 255.0).collect(),
    };
    let stride = match info.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err(Error::Format("unexpanded palette PNG".into())),
    };
    let mut px = Vec::with_capacity(w * h);
    for row in samples.chunks_exact(samples.len() / h) {
        for p in row.chunks_exact(stride).take(w) {
            px.push(if stride >= 3 { luma(p[0], p[1], p[2]) } else { p[0] });
        }
    }
    AmplitudeImage::new(h, w, px)
}

#[cfg(feature = "png")]
pub fn encode_png(img: &AmplitudeImage, white: f64) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Format(format!("PNG: {e}")))?;
        let scale = if white > 0.0 { 255.0 / white } else { 0.0 };
        let data: Vec<u8> = img.pixels().iter().map(|&p| (p * scale).round().clamp(0.0, 255.0) as u8).collect();
        w.write_image_data(&data).map_err(|e| Error::Format(format!("PNG: {e}")))?;
    }
    Ok(out)
}

/// Reads SARF, PGM/PPM or (with the `png` feature) PNG, chosen by content.
pub fn read_image(path: &Path) -> Result<AmplitudeImage> {
    let bytes = fs::read(path).map_err(|e| Error::ingest(path, e))?;
    let decoded = if bytes.starts_with(SARF_MAGIC) {
        decode_sarf(&bytes)
    } else if bytes.starts_with(b"P") {
        decode_pnm(&bytes)
    } else if bytes.starts_with(b"\x89PNG") {
        #[cfg(feature = "png")]
        {
            decode_png(&bytes)
        }
        #[cfg(not(feature = "png"))]
        {
            Err(Error::Format("PNG support is disabled in this build".into()))
        }
    } else {
        Err(Error::Format("unrecognized image format".into()))
    };
    decoded.map_err(|e| Error::ingest(path, e))
}

/// Amplitude at the given quantile (nearest rank).
pub fn percentile(img: &AmplitudeImage, q: f64) -> f64 {
    let mut v = img.pixels().to_vec();
    let k = ((v.len() - 1) as f64 * q.clamp(0.0, 1.0)).round() as usize;
    let (_, x, _) = v.select_nth_unstable_by(k, f64::total_cmp);
    *x
}

/// 8-bit display rendering clipped at the 99.5th percentile: PNG when the
/// feature is enabled, otherwise PGM. Returns the file extension used.
pub fn write_quicklook(stem: &Path, img: &AmplitudeImage) -> Result<std::path::PathBuf> {
    let white = percentile(img, QUICKLOOK_PERCENTILE);
    #[cfg(feature = "png")]
    let (ext, bytes) = ("png", encode_png(img, white)?);
    #[cfg(not(feature = "png"))]
    let (ext, bytes) = ("pgm", encode_pgm(img, white));
    let path = stem.with_extension(ext);
    atomic_write(&path, &bytes)?;
    Ok(path)
}
