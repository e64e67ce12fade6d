//! Raw RGB8 images, their content digests, and the binary PPM (P6) codec.
//!
//! The codec is strict: `P6\n<width> <height>\n255\n` followed by exactly
//! `3 * width * height` bytes. Because only one byte sequence encodes a given
//! image, the digest of an image equals the SHA-256 of its PPM file.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub const MAX_DIMENSION: u32 = 4096;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("bad PPM magic (expected \"P6\\n\")")]
    BadMagic,
    #[error("malformed PPM header: {0}")]
    BadHeader(&'static str),
    #[error("unsupported maxval {0} (only 255)")]
    BadMaxval(u32),
    #[error("dimensions {width}x{height} outside 1..={max}", max = MAX_DIMENSION)]
    BadDimensions { width: u32, height: u32 },
    #[error("pixel payload is {actual} bytes, expected {expected}")]
    BadLength { expected: usize, actual: usize },
}

/// SHA-256 content hash of an image.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..12])
    }
}

impl FromStr for Digest {
    type Err = hex::FromHexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)?;
        Ok(Digest(out))
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A decoded image: row-major RGB8.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBlob {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
    digest: Digest,
}

impl fmt::Debug for ImageBlob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageBlob")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("digest", &self.digest)
            .finish()
    }
}

impl ImageBlob {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if !(1..=MAX_DIMENSION).contains(&width) || !(1..=MAX_DIMENSION).contains(&height) {
            return Err(ImageError::BadDimensions { width, height });
        }
        let expected = 3 * width as usize * height as usize;
        if pixels.len() != expected {
            return Err(ImageError::BadLength {
                expected,
                actual: pixels.len(),
            });
        }
        let digest = Digest::of_bytes(&encode_ppm(width, height, &pixels));
        Ok(ImageBlob {
            width,
            height,
            pixels,
            digest,
        })
    }

    /// Image filled with one color.
    pub fn solid(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self, ImageError> {
        let n = width as usize * height as usize;
        let pixels = rgb.iter().copied().cycle().take(3 * n).collect();
        ImageBlob::new(width, height, pixels)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        encode_ppm(self.width, self.height, &self.pixels)
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self, ImageError> {
        let (width, height, offset) = parse_ppm_header(bytes)?;
        ImageBlob::new(width, height, bytes[offset..].to_vec())
    }

    /// Left-right mirror image.
    pub fn mirrored(&self) -> ImageBlob {
        let w = self.width as usize;
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for row in self.pixels.chunks_exact(3 * w) {
            for px in row.chunks_exact(3).rev() {
                pixels.extend_from_slice(px);
            }
        }
        ImageBlob::new(self.width, self.height, pixels).expect("same shape")
    }
}

fn encode_ppm(width: u32, height: u32, pixels: &[u8]) -> Vec<u8> {
    let header = format!("P6\n{width} {height}\n255\n");
    let mut out = Vec::with_capacity(header.len() + pixels.len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(pixels);
    out
}

/// Parses the strict header and returns (width, height, payload offset).
/// Does not check the payload length.
pub fn parse_ppm_header(bytes: &[u8]) -> Result<(u32, u32, usize), ImageError> {
    if !bytes.starts_with(b"P6\n") {
        return Err(ImageError::BadMagic);
    }
    let mut pos = 3;
    let width = read_decimal(bytes, &mut pos, b' ')?;
    let height = read_decimal(bytes, &mut pos, b'\n')?;
    let maxval = read_decimal(bytes, &mut pos, b'\n')?;
    if maxval != 255 {
        return Err(ImageError::BadMaxval(maxval));
    }
    if !(1..=MAX_DIMENSION).contains(&width) || !(1..=MAX_DIMENSION).contains(&height) {
        return Err(ImageError::BadDimensions { width, height });
    }
    let expected = 3 * width as usize * height as usize;
    if bytes.len() - pos != expected {
        return Err(ImageError::BadLength {
            expected,
            actual: bytes.len() - pos,
        });
    }
    Ok((width, height, pos))
}

fn read_decimal(bytes: &[u8], pos: &mut usize, terminator: u8) -> Result<u32, ImageError> {
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
        if *pos - start > 5 {
            return Err(ImageError::BadHeader("number too long"));
        }
    }
    let digits = &bytes[start..*pos];
    if digits.is_empty() {
        return Err(ImageError::BadHeader("expected a decimal number"));
    }
    if digits.len() > 1 && digits[0] == b'0' {
        return Err(ImageError::BadHeader("leading zero"));
    }
    if bytes.get(*pos) != Some(&terminator) {
        return Err(ImageError::BadHeader("unexpected separator"));
    }
    *pos += 1;
    // At most five ASCII digits, so this cannot overflow.
    Ok(digits.iter().fold(0u32, |acc, d| acc * 10 + u32::from(d - b'0')))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ImageBlob {
        ImageBlob::new(2, 1, vec![1, 2, 3, 4, 5, 6]).unwrap()
    }

    #[test]
    fn ppm_exact_bytes() {
        let ppm = tiny().to_ppm();
        assert_eq!(&ppm[..11], b"P6\n2 1\n255\n");
        assert_eq!(&ppm[11..], &[1, 2, 3, 4, 5, 6]);
        assert_eq!(ImageBlob::from_ppm(&ppm).unwrap(), tiny());
    }

    #[test]
    fn digest_is_hash_of_ppm_file() {
        let img = tiny();
        assert_eq!(img.digest(), Digest::of_bytes(&img.to_ppm()));
        let parsed: Digest = img.digest().to_hex().parse().unwrap();
        assert_eq!(parsed, img.digest());
    }

    #[test]
    fn rejects_malformed_headers() {
        let bad: &[(&[u8], ImageError)] = &[
            (b"P5\n1 1\n255\n\0\0\0", ImageError::BadMagic),
            (b"P6\n1 1\n65535\n\0\0\0", ImageError::BadMaxval(65535)),
            (b"P6\n0 1\n255\n", ImageError::BadDimensions { width: 0, height: 1 }),
            (b"P6\n01 1\n255\n\0\0\0", ImageError::BadHeader("leading zero")),
            (b"P6\n1\t1\n255\n\0\0\0", ImageError::BadHeader("unexpected separator")),
            (b"P6\n# c\n1 1\n255\n\0\0\0", ImageError::BadHeader("expected a decimal number")),
            (
                b"P6\n1 1\n255\n\0\0",
                ImageError::BadLength { expected: 3, actual: 2 },
            ),
        ];
        for (bytes, err) in bad {
            assert_eq!(ImageBlob::from_ppm(bytes).unwrap_err(), *err);
        }
        assert!(matches!(
            ImageBlob::new(4097, 1, vec![0; 3 * 4097]),
            Err(ImageError::BadDimensions { .. })
        ));
    }

    #[test]
    fn mirror_twice_is_identity() {
        let img = ImageBlob::new(3, 2, (0..18).collect()).unwrap();
        assert_eq!(img.mirrored().pixel(0, 1), img.pixel(2, 1));
        assert_eq!(img.mirrored().mirrored(), img);
    }
}
