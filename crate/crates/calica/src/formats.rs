//! File formats: Velodyne `.bin` scans, 8-bit PPM (P6) and PNG images, and
//! network checkpoints.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use calica_core::cloud::PointCloud;
use calica_core::image::RgbImage;
use calica_core::nn::checkpoint::{self, CheckpointError};
use calica_core::nn::{NnError, Tensor};

const PNG_MAGIC: &[u8] = b"\x89PNG";

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported image format (magic bytes {magic})")]
    UnsupportedFormat { magic: String },
    #[error("malformed PPM: {0}")]
    MalformedPpm(String),
    #[error("malformed PNG: {0}")]
    MalformedPng(String),
    #[error("velodyne scan length {0} is not a multiple of 16 bytes")]
    VelodyneLength(usize),
    #[error("velodyne point {index} has a non-finite coordinate")]
    VelodyneNonFinite { index: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint does not match the model: {0}")]
    CheckpointMismatch(#[from] NnError),
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    std::fs::read(path).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `bytes`, creating missing parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let io = |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, bytes).map_err(io)
}

// ------------------------------------------------------------- velodyne

/// Decodes little-endian `f32` quadruples `(x, y, z, reflectance)`.
pub fn decode_velodyne(bytes: &[u8]) -> Result<PointCloud, FormatError> {
    if bytes.len() % 16 != 0 {
        return Err(FormatError::VelodyneLength(bytes.len()));
    }
    let n = bytes.len() / 16;
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for (index, rec) in bytes.chunks_exact(16).enumerate() {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().expect("4 bytes"));
        let p = [f(0) as f64, f(1) as f64, f(2) as f64];
        if !p.iter().all(|c| c.is_finite()) {
            return Err(FormatError::VelodyneNonFinite { index });
        }
        points.push(p);
        intensity.push(f(3));
    }
    Ok(PointCloud::with_intensity(points, intensity).expect("lengths match and points are finite"))
}

/// Inverse of [`decode_velodyne`]; clouds without intensity are written with
/// zero reflectance.
pub fn encode_velodyne(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for (i, p) in cloud.points().iter().enumerate() {
        let r = cloud.intensity().map_or(0.0, |v| v[i]);
        for v in [p[0] as f32, p[1] as f32, p[2] as f32, r] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn load_velodyne(path: &Path) -> Result<PointCloud, FormatError> {
    decode_velodyne(&read_file(path)?)
}

pub fn save_velodyne(path: &Path, cloud: &PointCloud) -> Result<(), FormatError> {
    write_file(path, &encode_velodyne(cloud))
}

// ------------------------------------------------------------------ PPM

struct PpmHeader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PpmHeader<'_> {
    fn skip_space(&mut self) {
        while let Some(&c) = self.bytes.get(self.pos) {
            if c == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, FormatError> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| FormatError::MalformedPpm(format!("bad {what} at byte {start}")))
    }
}

/// Decodes a binary PPM with `maxval <= 255`; samples are scaled by
/// `1/maxval`.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage, FormatError> {
    if !bytes.starts_with(b"P6") {
        return Err(FormatError::UnsupportedFormat { magic: magic_string(bytes) });
    }
    let mut h = PpmHeader { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(FormatError::MalformedPpm(format!("empty image {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(FormatError::MalformedPpm(format!("maxval {maxval} is not 8-bit")));
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(FormatError::MalformedPpm("missing separator after maxval".into()));
    }
    let body = &bytes[h.pos + 1..];
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| FormatError::MalformedPpm(format!("image {width}x{height} too large")))?;
    if body.len() < need {
        return Err(FormatError::MalformedPpm(format!("truncated body: {} of {need} bytes", body.len())));
    }
    let scale = 1.0 / maxval as f32;
    let data = body[..need].iter().map(|&b| (b as f32 * scale).min(1.0)).collect();
    Ok(RgbImage::from_vec(width, height, data))
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.to_u8());
    out
}

// ------------------------------------------------------------------ PNG

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage, FormatError> {
    let bad = |e: png::DecodingError| FormatError::MalformedPng(e.to_string());
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| FormatError::MalformedPng("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(FormatError::MalformedPng("unexpanded palette".into())),
    };
    let mut rgb = Vec::with_capacity(w * h * 3);
    for row in buf.chunks(info.line_size).take(h) {
        for px in row[..w * channels].chunks_exact(channels) {
            let c = if channels < 3 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
            rgb.extend(c);
        }
    }
    Ok(RgbImage::from_u8(w, h, &rgb))
}

pub fn encode_png(image: &RgbImage) -> Vec<u8> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, image.width() as u32, image.height() as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().expect("in-memory PNG header");
    w.write_image_data(&image.to_u8()).expect("in-memory PNG data");
    w.finish().expect("in-memory PNG trailer");
    out
}

// --------------------------------------------------------------- images

fn magic_string(bytes: &[u8]) -> String {
    let head = &bytes[..bytes.len().min(4)];
    if head.is_empty() {
        return "<empty>".into();
    }
    head.iter().map(|b| format!("{b:02x}")).collect::<Vec<_>>().join(" ")
}

/// PPM (P6) or PNG, chosen by the magic bytes.
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage, FormatError> {
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if bytes.starts_with(PNG_MAGIC) {
        decode_png(bytes)
    } else {
        Err(FormatError::UnsupportedFormat { magic: magic_string(bytes) })
    }
}

pub fn load_image(path: &Path) -> Result<RgbImage, FormatError> {
    decode_image(&read_file(path)?)
}

/// PNG for a `.png` extension, PPM otherwise.
pub fn save_image(path: &Path, image: &RgbImage) -> Result<(), FormatError> {
    let png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    write_file(path, &if png { encode_png(image) } else { encode_ppm(image) })
}

// ----------------------------------------------------------- checkpoints

pub fn save_checkpoint(path: &Path, model: &calica_core::calicanet::CalicaNet<f32>) -> Result<(), FormatError> {
    write_file(path, &checkpoint::encode(model.params()))
}

/// Loads parameters into `model`, which must have been built with the
/// configuration the checkpoint was trained with.
pub fn load_checkpoint(path: &Path, model: &mut calica_core::calicanet::CalicaNet<f32>) -> Result<(), FormatError> {
    let entries: Vec<(String, Tensor<f32>)> = checkpoint::decode(&read_file(path)?)?;
    model.params_mut().load_named(entries.iter().map(|(n, t)| (n.as_str(), t)))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_red_pixel() {
        let img = decode_image(b"P6\n1 1\n255\n\xff\x00\x00").unwrap();
        assert_eq!((img.width(), img.height()), (1, 1));
        assert_eq!(img.get(0, 0), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let img = decode_ppm(b"P6 # made by hand\n2 # width\n1\n255\n\x00\x00\x00\xff\xff\xff").unwrap();
        assert_eq!(img.get(1, 0), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn truncated_ppm_is_malformed() {
        let e = decode_ppm(b"P6\n2 2\n255\n\x00\x00\x00").unwrap_err();
        assert!(matches!(e, FormatError::MalformedPpm(ref m) if m.contains("truncated")), "{e}");
    }

    #[test]
    fn unknown_magic_is_named() {
        let e = decode_image(b"GIF89a").unwrap_err();
        assert_eq!(e.to_string(), "unsupported image format (magic bytes 47 49 46 38)");
    }

    #[test]
    fn png_round_trip() {
        let img = RgbImage::from_u8(3, 2, &[0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 120, 130, 140, 150, 160, 170]);
        assert_eq!(decode_image(&encode_png(&img)).unwrap(), img);
    }

    #[test]
    fn velodyne_rejects_ragged_length() {
        assert!(matches!(decode_velodyne(&[0; 17]), Err(FormatError::VelodyneLength(17))));
    }

    #[test]
    fn velodyne_rejects_nan() {
        let mut b = vec![0u8; 32];
        b[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_velodyne(&b), Err(FormatError::VelodyneNonFinite { index: 1 })));
    }
}
