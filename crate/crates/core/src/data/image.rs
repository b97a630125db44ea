use std::path::Path;

use crate::error::{Error, Result};

/// Grayscale image with row-major pixels in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Format(format!(
                "{} pixels do not form a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

/// Maps [0, 1] to the nearest 8-bit level.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(image: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.pixels.iter().map(|&v| quantize(v)));
    out
}

/// Parses a binary P5 file with maxval 255. Header comments are allowed.
pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut fields = [0usize; 3];
    let magic = next_token(bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(Error::Format(format!(
            "expected PGM magic P5, found {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    for (slot, name) in fields.iter_mut().zip(["width", "height", "maxval"]) {
        let tok = next_token(bytes, &mut pos)?;
        *slot = std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad PGM {name} {:?}", String::from_utf8_lossy(tok))))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PGM maxval {maxval}; expected 255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let n = width * height;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::Format(format!("PGM raster truncated: need {n} bytes")))?;
    Image::new(width, height, raster.iter().map(|&b| b as f64 / 255.0).collect())
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::Format("PGM header truncated".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(&bytes[start..*pos])
}

pub fn load_pgm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path)?;
    decode_pgm(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_pgm(image: &Image, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pgm(image))?;
    Ok(())
}

fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let pos = if dst_len == 1 {
        (src_len - 1) as f64 / 2.0
    } else {
        dst as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64
    };
    let lo = (pos.floor() as usize).min(src_len - 1);
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, pos - lo as f64)
}

/// Bilinear resampling of a row-major `width x height` grid. The centers of
/// the corner pixels of source and target coincide.
pub fn resample_bilinear(data: &[f64], width: usize, height: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    if (width, height) == (out_w, out_h) {
        return data.to_vec();
    }
    let cols: Vec<_> = (0..out_w).map(|x| source_coord(x, width, out_w)).collect();
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let (y0, y1, fy) = source_coord(y, height, out_h);
        for &(x0, x1, fx) in &cols {
            let top = data[y0 * width + x0] * (1.0 - fx) + data[y0 * width + x1] * fx;
            let bottom = data[y1 * width + x0] * (1.0 - fx) + data[y1 * width + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

pub fn resize_bilinear(image: &Image, width: usize, height: usize) -> Result<Image> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("resize target must be non-empty".into()));
    }
    Image::new(
        width,
        height,
        resample_bilinear(&image.pixels, image.width, image.height, width, height),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn black_and_white_levels() {
        let img = decode_pgm(b"P5\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!(img.pixels, vec![0.0, 1.0]);
        let black = decode_pgm(&encode_pgm(&Image::filled(3, 2, 0.0))).unwrap();
        assert!(black.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = decode_pgm(b"P5\n# made by hand\n1 1\n255\n\x80").unwrap();
        assert_eq!(img.pixels, vec![128.0 / 255.0]);
    }

    #[test]
    fn rejects_bad_magic_maxval_and_truncation() {
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
        let e = decode_pgm(b"P5\n1 1\n65535\n\x00\x00").unwrap_err().to_string();
        assert!(e.contains("maxval"), "{e}");
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n2").is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = Image::new(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(resize_bilinear(&img, 3, 2).unwrap(), img);
        let c = resize_bilinear(&Image::filled(5, 7, 0.25), 11, 3).unwrap();
        assert!(c.pixels.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn upsample_two_by_two_by_hand() {
        // Target samples sit at source positions 0, 1/3, 2/3, 1 on each axis.
        let img = Image::new(2, 2, vec![0.0, 3.0, 6.0, 9.0]).unwrap();
        let up = resize_bilinear(&img, 4, 4).unwrap();
        let expected = [
            0.0, 1.0, 2.0, 3.0, //
            2.0, 3.0, 4.0, 5.0, //
            4.0, 5.0, 6.0, 7.0, //
            6.0, 7.0, 8.0, 9.0,
        ];
        for (a, e) in up.pixels.iter().zip(expected) {
            assert!((a - e).abs() < 1e-12, "{:?}", up.pixels);
        }
    }

    #[test]
    fn downsample_four_to_two_by_hand() {
        // Corner alignment keeps the four corner pixels.
        let img = Image::new(4, 4, (0..16).map(|v| v as f64).collect()).unwrap();
        assert_eq!(resize_bilinear(&img, 2, 2).unwrap().pixels, vec![0.0, 3.0, 12.0, 15.0]);
    }

    proptest! {
        #[test]
        fn pgm_round_trip_within_quantization(w in 1usize..12, h in 1usize..12, pool in prop::collection::vec(0.0f64..=1.0, 144)) {
            let pixels = pool[..w * h].to_vec();
            let img = Image::new(w, h, pixels).unwrap();
            let back = decode_pgm(&encode_pgm(&img)).unwrap();
            prop_assert_eq!((back.width, back.height), (w, h));
            for (a, b) in img.pixels.iter().zip(&back.pixels) {
                prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
            }
            prop_assert_eq!(encode_pgm(&back), encode_pgm(&img));
        }
    }
}
