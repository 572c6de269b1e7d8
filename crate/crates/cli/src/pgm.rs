//! Binary greymap (P5, maxval 255) images.

use std::fs;
use std::path::Path;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Greymap {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Greymap {
    /// Maps intensities in `[0, 1]` to bytes, rounding half away from zero.
    pub fn from_intensities(width: usize, height: usize, values: &[f64]) -> Greymap {
        assert_eq!(values.len(), width * height, "pixel count");
        let pixels = values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Greymap { width, height, pixels }
    }

    pub fn intensities(&self) -> Vec<f32> {
        self.pixels.iter().map(|&b| b as f32 / 255.0).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Greymap, String> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated PGM header".into());
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        if fields[0] != "P5" {
            return Err(format!("not a binary PGM (magic `{}`)", fields[0]));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PGM header field `{s}`"));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(format!("PGM maxval {maxval} is not 255"));
        }
        let raster = bytes.get(pos..).unwrap_or_default();
        if raster.len() != width * height {
            return Err(format!(
                "PGM raster has {} bytes, header promises {}",
                raster.len(),
                width * height
            ));
        }
        Ok(Greymap {
            width,
            height,
            pixels: raster.to_vec(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.encode()).map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Greymap, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Greymap::decode(&bytes).map_err(|m| CliError::Data(format!("{}: {m}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode() {
        let g = Greymap::from_intensities(3, 2, &[0.0, 0.5, 1.0, 2.0, -1.0, 0.25]);
        assert_eq!(g.pixels, vec![0, 128, 255, 255, 0, 64]);
        let bytes = g.encode();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(Greymap::decode(&bytes).unwrap(), g);
    }

    #[test]
    fn header_comments_and_errors() {
        let mut b = b"P5 # comment\n2 1\n255\n".to_vec();
        b.extend([7, 9]);
        assert_eq!(Greymap::decode(&b).unwrap().pixels, vec![7, 9]);
        assert!(Greymap::decode(b"P2\n1 1\n255\n0").is_err());
        assert!(Greymap::decode(b"P5\n2 2\n255\n\x01").is_err());
        assert!(Greymap::decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }
}
