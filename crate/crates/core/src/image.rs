//! 8-bit RGB images and the binary portable pixmap formats.

use crate::error::{DcaeError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major, `3 * width * height` bytes.
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(DcaeError::Input(format!("empty image {width}x{height}")));
        }
        if pixels.len() != 3 * width * height {
            return Err(DcaeError::Input(format!(
                "{width}x{height} image needs {} bytes, got {}",
                3 * width * height,
                pixels.len()
            )));
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        Self::new(width, height, rgb.repeat(width * height))
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * 3 + c]
    }
}

/// Cursor over PNM header tokens: whitespace separated, `#` to end of line
/// is a comment.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn token(&mut self) -> Result<&'a [u8]> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' || b == b'\r' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(DcaeError::UnsupportedFormat("truncated PNM header".into())),
            }
        }
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#')
        {
            self.pos += 1;
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let t = self.token()?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DcaeError::UnsupportedFormat(format!("bad PNM {what}")))
    }
}

pub fn read_ppm(bytes: &[u8]) -> Result<Image> {
    let mut h = Header { bytes, pos: 0 };
    let magic = h.token()?;
    if magic != b"P6" {
        return Err(DcaeError::UnsupportedFormat(format!(
            "expected binary PPM `P6`, found `{}`",
            String::from_utf8_lossy(magic)
        )));
    }
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(DcaeError::UnsupportedFormat(format!(
            "maxval {maxval}, only 255 is supported"
        )));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(DcaeError::UnsupportedFormat("truncated PPM header".into())),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| DcaeError::UnsupportedFormat("PPM dimensions overflow".into()))?;
    let raster = &bytes[h.pos..];
    if raster.len() != need {
        return Err(DcaeError::UnsupportedFormat(format!(
            "PPM raster has {} bytes, expected {need}",
            raster.len()
        )));
    }
    Image::new(width, height, raster.to_vec())
        .map_err(|e| DcaeError::UnsupportedFormat(e.to_string()))
}

pub fn write_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Binary greymap `P5`, maxval 255.
pub fn write_pgm(width: usize, height: usize, values: &[u8]) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(DcaeError::dim(format!(
            "{width}x{height} greymap needs {} values, got {}",
            width * height,
            values.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(values);
    Ok(out)
}

pub fn read_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut h = Header { bytes, pos: 0 };
    if h.token()? != b"P5" {
        return Err(DcaeError::UnsupportedFormat("expected binary PGM `P5`".into()));
    }
    let width = h.number("width")?;
    let height = h.number("height")?;
    if h.number("maxval")? != 255 {
        return Err(DcaeError::UnsupportedFormat("only maxval 255 is supported".into()));
    }
    let raster = bytes.get(h.pos + 1..).unwrap_or(&[]);
    if raster.len() != width * height {
        return Err(DcaeError::UnsupportedFormat("PGM raster length mismatch".into()));
    }
    Ok((width, height, raster.to_vec()))
}
