//! On-disk formats: binary/ASCII portable graymaps and the little-endian
//! raw-float containers `RIMG` (images) and `RFLD` (deformation fields).
//!
//! Raw containers store single-precision floats. Images held in memory use
//! double precision, so a save/load round trip is bit-exact for any image
//! whose intensities are single-precision values (every image read from disk
//! is).

use std::fs;
use std::path::Path;

use super::{DeformationField, Image};
use crate::error::{Error, Result};
use crate::metrics::Mask;

const IMAGE_MAGIC: &[u8; 4] = b"RIMG";
const FIELD_MAGIC: &[u8; 4] = b"RFLD";

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let bytes = fs::read(path.as_ref())?;
    decode_image(&bytes)
}

pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match extension(path).as_deref() {
        Some("pgm") => encode_pgm(img.width(), img.height(), img.data()),
        Some("rimg") => encode_raw(IMAGE_MAGIC, img.width(), img.height(), &[img.data()]),
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "cannot infer image format from extension {:?}",
                other.unwrap_or("")
            )))
        }
    };
    fs::write(path, bytes)?;
    Ok(())
}

/// Masks travel as graymaps: 255 for members, 0 otherwise.
pub fn save_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let data: Vec<f64> = mask
        .data()
        .iter()
        .map(|&b| if b { 1.0 } else { 0.0 })
        .collect();
    fs::write(path, encode_pgm(mask.width(), mask.height(), &data))?;
    Ok(())
}

/// Any image format is accepted; pixels at or above one half are members.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let img = load_image(path)?;
    Mask::new(
        img.width(),
        img.height(),
        img.data().iter().map(|&v| v >= 0.5).collect(),
    )
}

pub fn save_field(field: &DeformationField, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_raw(
        FIELD_MAGIC,
        field.width(),
        field.height(),
        &[field.dx(), field.dy()],
    );
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_field(path: impl AsRef<Path>) -> Result<DeformationField> {
    let bytes = fs::read(path.as_ref())?;
    let (w, h, mut planes) = decode_raw(&bytes, FIELD_MAGIC, 2)?;
    let dy = planes.pop().unwrap();
    let dx = planes.pop().unwrap();
    DeformationField::new(w, h, dx, dy)
}

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
}

pub(crate) fn decode_image(bytes: &[u8]) -> Result<Image> {
    if bytes.starts_with(IMAGE_MAGIC) {
        let (w, h, mut planes) = decode_raw(bytes, IMAGE_MAGIC, 1)?;
        Image::new(w, h, planes.pop().unwrap())
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P2") {
        decode_pgm(bytes)
    } else {
        Err(Error::UnsupportedFormat(
            "expected a portable graymap (P5/P2) or an RIMG container".into(),
        ))
    }
}

fn encode_pgm(w: usize, h: usize, data: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        data.iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

/// Whitespace- and comment-aware header tokenizer for graymaps.
struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn token(&mut self) -> Result<&str> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while let Some(&c) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if c == b'\n' {
                            break;
                        }
                    }
                }
                Some(c) if c.is_ascii_whitespace() => self.pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("truncated graymap header".into())),
            }
        }
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|c| !c.is_ascii_whitespace())
        {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::Format("non-ascii graymap header".into()))
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self.token()?;
        tok.parse()
            .map_err(|_| Error::Format(format!("bad graymap {what}: {tok:?}")))
    }
}

fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    let mut rd = HeaderReader { bytes, pos: 0 };
    let magic = rd.token()?.to_owned();
    let w = rd.number("width")?;
    let h = rd.number("height")?;
    let maxval = rd.number("max value")?;
    if w == 0 || h == 0 {
        return Err(Error::Format("zero-sized image".into()));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("max value {maxval} out of range")));
    }
    let n = w * h;
    let scale = maxval as f64;
    let raw: Vec<usize> = if magic == "P5" {
        // Exactly one whitespace byte separates the header from the raster.
        let start = rd.pos + 1;
        let bpp = if maxval > 255 { 2 } else { 1 };
        let body = bytes
            .get(start..)
            .filter(|b| b.len() >= n * bpp)
            .ok_or_else(|| {
                Error::Format(format!("truncated raster: expected {} bytes", n * bpp))
            })?;
        if bpp == 1 {
            body[..n].iter().map(|&b| b as usize).collect()
        } else {
            body[..2 * n]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as usize)
                .collect()
        }
    } else {
        (0..n).map(|_| rd.number("pixel")).collect::<Result<_>>()?
    };
    if let Some(bad) = raw.iter().find(|&&v| v > maxval) {
        return Err(Error::Format(format!(
            "pixel {bad} exceeds max value {maxval}"
        )));
    }
    Image::new(w, h, raw.into_iter().map(|v| v as f64 / scale).collect())
}

fn encode_raw(magic: &[u8; 4], w: usize, h: usize, planes: &[&[f64]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + planes.len() * w * h * 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    for plane in planes {
        for &v in plane.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn decode_raw(
    bytes: &[u8],
    magic: &[u8; 4],
    planes: usize,
) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    if bytes.len() < 12 || &bytes[..4] != magic {
        return Err(Error::Format(format!(
            "missing {} header",
            String::from_utf8_lossy(magic)
        )));
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if w == 0 || h == 0 {
        return Err(Error::Format("zero-sized image".into()));
    }
    let n = w * h;
    let body = &bytes[12..];
    if body.len() != planes * n * 4 {
        return Err(Error::Format(format!(
            "expected {} payload bytes, found {}",
            planes * n * 4,
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("non-finite value in raw container".into()));
    }
    Ok((w, h, values.chunks(n).map(|c| c.to_vec()).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_image;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn graymap_is_rescaled_by_max_value() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend([0u8, 255, 128, 64]);
        let img = decode_image(&bytes).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn ascii_graymap_with_comments() {
        let img = decode_image(b"P2\n# a comment\n2 2\n# another\n4\n0 4 2\n1\n").unwrap();
        assert_eq!(img.data(), &[0.0, 1.0, 0.5, 0.25]);
    }

    #[test]
    fn sixteen_bit_graymap() {
        let mut bytes = b"P5 2 2 1000 ".to_vec();
        for v in [0u16, 1000, 500, 250] {
            bytes.extend(v.to_be_bytes());
        }
        let img = decode_image(&bytes).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0, 0.5, 0.25]);
    }

    #[test]
    fn truncated_files_are_format_errors() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend([0u8, 255, 128]);
        assert!(matches!(decode_image(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode_image(b"P5\n2 "), Err(Error::Format(_))));
        let img = Image::constant(3, 3, 0.5).unwrap();
        let mut raw = encode_raw(IMAGE_MAGIC, 3, 3, &[img.data()]);
        raw.pop();
        assert!(matches!(decode_image(&raw), Err(Error::Format(_))));
    }

    #[test]
    fn zero_sized_and_unknown_inputs() {
        assert!(matches!(
            decode_image(b"P5\n0 2\n255\n"),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            decode_image(b"GIF89a"),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn constant_half_saves_as_128() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.pgm");
        save_image(&Image::constant(3, 2, 0.5).unwrap(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.ends_with(&[128u8; 6]));
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
    }

    #[test]
    fn graymap_round_trip_within_quantization() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.pgm");
        let img = random_image(&mut rng, 7, 5);
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn raw_round_trip_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.rimg");
        let src = random_image(&mut rng, 6, 4);
        // Quantize to single precision once, as loading from disk would.
        let img = Image::new(6, 4, src.data().iter().map(|&v| v as f32 as f64).collect()).unwrap();
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn field_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.rfld");
        let field =
            DeformationField::from_fn(5, 3, |x, y| (x as f64 * 0.5, -(y as f64) * 0.25)).unwrap();
        save_field(&field, &path).unwrap();
        assert_eq!(load_field(&path).unwrap(), field);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"RFLD");
        assert_eq!(bytes.len(), 12 + 2 * 15 * 4);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing").join("x.pgm");
        let img = Image::constant(2, 2, 0.1).unwrap();
        assert!(matches!(save_image(&img, &path), Err(Error::Io(_))));
    }

    #[test]
    fn unknown_extension_is_rejected() {
        let img = Image::constant(2, 2, 0.1).unwrap();
        assert!(matches!(
            save_image(&img, "x.bmp"),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mask = Mask::new(3, 2, vec![true, false, false, true, true, false]).unwrap();
        save_mask(&mask, &path).unwrap();
        assert_eq!(load_mask(&path).unwrap(), mask);
    }
}
