//! Binary PPM (P6) and PGM (P5) images with maxval 255, as C×H×W tensors on
//! the 0–255 scale.

use std::fs;
use std::path::Path;

use peel_core::{PeelError, Result, Tensor};

pub const MAXVAL: u32 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm,
    Ppm,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "ppm" => Some(Self::Ppm),
            "pgm" => Some(Self::Pgm),
            _ => None,
        }
    }

    fn channels(self) -> usize {
        match self {
            Self::Pgm => 1,
            Self::Ppm => 3,
        }
    }

    fn magic(self) -> &'static str {
        match self {
            Self::Pgm => "P5",
            Self::Ppm => "P6",
        }
    }
}

struct Header {
    format: ImageFormat,
    width: usize,
    height: usize,
    payload_offset: usize,
}

fn malformed(msg: impl std::fmt::Display) -> PeelError {
    PeelError::Validation(format!("malformed image header: {msg}"))
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let format = match bytes.get(..2) {
        Some(b"P5") => ImageFormat::Pgm,
        Some(b"P6") => ImageFormat::Ppm,
        _ => return Err(malformed("expected magic P5 or P6")),
    };
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments between fields
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(malformed(format!("missing header field {}", i + 1)));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| malformed(format!("header field '{text}' out of range")))?;
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(malformed("no whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(malformed(format!("empty image {width}×{height}")));
    }
    if maxval != MAXVAL {
        return Err(PeelError::Validation(format!(
            "maxval must be {MAXVAL}, got {maxval}"
        )));
    }
    Ok(Header {
        format,
        width: width as usize,
        height: height as usize,
        payload_offset: pos,
    })
}

/// Decodes an image into a C×H×W tensor (C = 1 or 3).
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes)?;
    let c = h.format.channels();
    let plane = h.width * h.height;
    let need = plane * c;
    let payload = &bytes[h.payload_offset..];
    if payload.len() < need {
        return Err(PeelError::Validation(format!(
            "truncated payload: {} of {need} bytes",
            payload.len()
        )));
    }
    // interleaved RGB to planar
    let mut data = vec![0.0; need];
    for (i, &b) in payload[..need].iter().enumerate() {
        data[(i % c) * plane + i / c] = f64::from(b);
    }
    Tensor::new(vec![c, h.height, h.width], data)
}

/// Encodes a 1×H×W or 3×H×W tensor, rounding to the nearest integer and
/// clamping into 0–255. Returns the bytes and the number of clamped values.
pub fn encode(t: &Tensor) -> Result<(Vec<u8>, usize)> {
    let (c, height, width) = t.chw()?;
    let format = match c {
        1 => ImageFormat::Pgm,
        3 => ImageFormat::Ppm,
        _ => {
            return Err(PeelError::Shape(format!(
                "images need 1 or 3 channels, got {c}"
            )))
        }
    };
    t.validate_finite("image")?;
    let mut out = format!("{}\n{width} {height}\n{MAXVAL}\n", format.magic()).into_bytes();
    let plane = height * width;
    let mut clamped = 0;
    out.reserve(plane * c);
    for i in 0..plane {
        for ch in 0..c {
            let v = t.data()[ch * plane + i].round();
            if !(0.0..=255.0).contains(&v) {
                clamped += 1;
            }
            out.push(v.clamp(0.0, 255.0) as u8);
        }
    }
    Ok((out, clamped))
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|source| PeelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

/// Writes the image and returns the clamp count.
pub fn write_image(t: &Tensor, path: &Path) -> Result<usize> {
    let (bytes, clamped) = encode(t)?;
    if clamped > 0 {
        log::warn!("{}: clamped {clamped} values into 0–255", path.display());
    }
    fs::write(path, bytes).map_err(|source| PeelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(clamped)
}

/// Reads `.ppm`/`.pgm` as images and anything else as `.tns`.
pub fn read_any(path: &Path) -> Result<Tensor> {
    match ImageFormat::from_path(path) {
        Some(_) => read_image(path),
        None => peel_core::tensor::read_tns(path),
    }
}

/// Writes by extension; the clamp count is 0 for `.tns`.
pub fn write_any(t: &Tensor, path: &Path) -> Result<usize> {
    match ImageFormat::from_path(path) {
        Some(_) => write_image(t, path),
        None => peel_core::tensor::write_tns(t, path).map(|()| 0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_with_comments() {
        let mut bytes = b"P5 # gray\n2 # w\n1\n255\n".to_vec();
        bytes.extend([7, 200]);
        let t = decode(&bytes).unwrap();
        assert_eq!(t.dims(), &[1, 1, 2]);
        assert_eq!(t.data(), &[7.0, 200.0]);
    }

    #[test]
    fn ppm_is_interleaved() {
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend([1, 2, 3, 4, 5, 6]);
        let t = decode(&bytes).unwrap();
        assert_eq!(t.dims(), &[3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(encode(&t).unwrap().0, bytes);
    }

    #[test]
    fn maxval_other_than_255_rejected() {
        let mut bytes = b"P5\n1 1\n65535\n".to_vec();
        bytes.extend([0, 0]);
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("maxval"), "{err}");
    }

    #[test]
    fn malformed_and_truncated() {
        assert!(decode(b"P3\n1 1\n255\n0").is_err());
        assert!(decode(b"P5\n1\n").is_err());
        assert!(decode(b"P5\n0 4\n255\n").is_err());
        let err = decode(b"P6\n2 2\n255\n\x01\x02").unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn clamp_count_matches_constructed_image() {
        let data = vec![-3.0, 0.0, 255.0, 255.4, 255.6, 300.0, -0.4, -0.6, 17.0];
        let expected = data
            .iter()
            .filter(|v: &&f64| !(0.0..=255.0).contains(&v.round()))
            .count();
        assert_eq!(expected, 4);
        let t = Tensor::new(vec![1, 3, 3], data).unwrap();
        let (bytes, clamped) = encode(&t).unwrap();
        assert_eq!(clamped, expected);
        let back = decode(&bytes).unwrap();
        assert_eq!(
            back.data(),
            &[0.0, 0.0, 255.0, 255.0, 255.0, 255.0, 0.0, 0.0, 17.0]
        );
    }

    #[test]
    fn wrong_channel_count_rejected() {
        assert!(encode(&Tensor::zeros(&[2, 2, 2])).is_err());
    }

    proptest! {
        #[test]
        fn integer_images_round_trip(
            c in prop::sample::select(vec![1usize, 3]),
            h in 1usize..6,
            w in 1usize..6,
            seed in any::<u64>(),
        ) {
            let mut s = seed;
            let t = Tensor::from_fn(&[c, h, w], |_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f64::from((s >> 56) as u8)
            });
            let (bytes, clamped) = encode(&t).unwrap();
            prop_assert_eq!(clamped, 0);
            prop_assert_eq!(decode(&bytes).unwrap(), t);
        }
    }
}
