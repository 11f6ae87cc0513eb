//! 8-bit RGB images and the binary PPM / PGM formats used on disk.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::ImageSize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    size: ImageSize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(size: ImageSize, data: Vec<u8>) -> Result<Self> {
        if data.len() != size.pixels() * 3 {
            return Err(Error::dims(format!(
                "rgb buffer has {} bytes, expected {}",
                data.len(),
                size.pixels() * 3
            )));
        }
        Ok(Self { size, data })
    }

    pub fn filled(size: ImageSize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(size.pixels() * 3).collect();
        Self { size, data }
    }

    pub fn size(&self) -> ImageSize {
        self.size
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, index: usize) -> [u8; 3] {
        let o = index * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, index: usize, rgb: [u8; 3]) {
        let o = index * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Per-pixel mean of the three channels, scaled to [0, 1].
    pub fn intensity(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|c| (c[0] as f64 + c[1] as f64 + c[2] as f64) / (3.0 * 255.0))
            .collect()
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut buf = format!("P6\n{} {}\n255\n", self.size.w, self.size.h).into_bytes();
        buf.extend_from_slice(&self.data);
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = std::io::BufReader::new(file);
        let bad = |msg: &str| Error::Dataset(format!("{}: {msg}", path.display()));
        let mut header = Vec::new();
        while header.len() < 4 {
            let tok = next_token(&mut reader).map_err(|e| Error::io(path, e))?;
            match tok {
                Some(t) => header.push(t),
                None => return Err(bad("truncated PPM header")),
            }
        }
        if header[0] != "P6" {
            return Err(bad("not a binary PPM (P6)"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PPM header field"));
        let (w, h, maxval) = (parse(&header[1])?, parse(&header[2])?, parse(&header[3])?);
        if maxval != 255 {
            return Err(bad("only 8-bit PPM is supported"));
        }
        let size = ImageSize::new(h, w)?;
        let mut data = vec![0u8; size.pixels() * 3];
        reader
            .read_exact(&mut data)
            .map_err(|_| bad("truncated PPM pixel data"))?;
        Self::new(size, data)
    }
}

// Reads one whitespace-delimited header token, skipping `#` comments, and
// consumes exactly one trailing whitespace byte.
fn next_token<R: BufRead>(r: &mut R) -> std::io::Result<Option<String>> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Ok((!tok.is_empty()).then_some(tok));
        }
        let c = byte[0] as char;
        if c == '#' && tok.is_empty() {
            let mut line = String::new();
            r.read_line(&mut line)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(Some(tok));
        }
        tok.push(c);
    }
}

/// Writes values in [0, 1] as a 16-bit binary PGM (P5, big-endian samples).
pub fn write_pgm16(path: &Path, size: ImageSize, values: &[f64]) -> Result<()> {
    if values.len() != size.pixels() {
        return Err(Error::dims("pgm value count does not match image size"));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);
    write!(out, "P5\n{} {}\n65535\n", size.w, size.h).map_err(io)?;
    for &v in values {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.write_all(&q.to_be_bytes()).map_err(io)?;
    }
    out.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        let size = ImageSize::new(3, 5).unwrap();
        let data: Vec<u8> = (0..45).map(|i| (i * 37 % 256) as u8).collect();
        let img = RgbImage::new(size, data).unwrap();
        img.write_ppm(&p).unwrap();
        assert_eq!(RgbImage::read_ppm(&p).unwrap(), img);
    }

    #[test]
    fn ppm_with_comment_and_whitespace_pixel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.ppm");
        // first pixel byte is '\n' (10), which must not be eaten by the header parser
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[10, 20, 30]);
        std::fs::write(&p, bytes).unwrap();
        let img = RgbImage::read_ppm(&p).unwrap();
        assert_eq!(img.pixel(0), [10, 20, 30]);
    }

    #[test]
    fn truncated_ppm_is_dataset_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ppm");
        std::fs::write(&p, b"P6\n2 2\n255\n\x01\x02").unwrap();
        assert!(matches!(RgbImage::read_ppm(&p), Err(Error::Dataset(_))));
    }

    #[test]
    fn pgm16_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.pgm");
        let size = ImageSize::new(1, 2).unwrap();
        write_pgm16(&p, size, &[0.0, 1.0]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..], b"P5\n2 1\n65535\n\x00\x00\xff\xff");
    }
}
