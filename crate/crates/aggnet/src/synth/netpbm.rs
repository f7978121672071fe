//! Binary netpbm I/O: 16-bit PGM (P5) for depth, 8-bit PPM (P6) for color.
//!
//! Depth is stored as millimeters in big-endian u16 samples, zero meaning
//! invalid, so a write/read round trip is exact at millimeter quantization.
//! Parse errors carry the byte offset at which reading stopped.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Real;

pub const DEPTH_MAXVAL: u32 = 65535;
pub const RGB_MAXVAL: u32 = 255;

/// Millimeter quantization used by the 16-bit depth format.
pub fn meters_to_mm(v: Real) -> Result<u16> {
    let mm = (v as f64 * 1000.0).round();
    if !(0.0..=65535.0).contains(&mm) {
        return Err(Error::numeric(format!(
            "depth {v} m outside the storable range [0, 65.535]"
        )));
    }
    Ok(mm as u16)
}

pub fn mm_to_meters(mm: u16) -> Real {
    (mm as f64 / 1000.0) as Real
}

/// Write a 16-bit PGM. `comments` become `#` header lines (seed, spec hash).
pub fn write_pgm16(w: &mut dyn Write, width: usize, height: usize, meters: &[Real], comments: &[String]) -> Result<()> {
    if meters.len() != width * height {
        return Err(Error::shape(format!(
            "pgm payload {} does not match {}x{}",
            meters.len(),
            width,
            height
        )));
    }
    let io_err = |e| Error::io("<pgm>", e);
    w.write_all(b"P5\n").map_err(io_err)?;
    for c in comments {
        writeln!(w, "# {c}").map_err(io_err)?;
    }
    writeln!(w, "{width} {height}").map_err(io_err)?;
    writeln!(w, "{DEPTH_MAXVAL}").map_err(io_err)?;
    for &v in meters {
        let mm = meters_to_mm(v)?;
        w.write_all(&mm.to_be_bytes()).map_err(io_err)?;
    }
    Ok(())
}

/// Write an 8-bit PPM from planar RGB in [0,1] (shape 3 x height x width).
pub fn write_ppm8(w: &mut dyn Write, width: usize, height: usize, rgb: &[Real], comments: &[String]) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(Error::shape(format!(
            "ppm payload {} does not match 3x{}x{}",
            rgb.len(),
            height,
            width
        )));
    }
    let io_err = |e| Error::io("<ppm>", e);
    w.write_all(b"P6\n").map_err(io_err)?;
    for c in comments {
        writeln!(w, "# {c}").map_err(io_err)?;
    }
    writeln!(w, "{width} {height}").map_err(io_err)?;
    writeln!(w, "{RGB_MAXVAL}").map_err(io_err)?;
    let plane = width * height;
    for i in 0..plane {
        for c in 0..3 {
            let v = (rgb[c * plane + i] as f64).clamp(0.0, 1.0);
            let byte = (v * 255.0).round() as u8;
            w.write_all(&[byte]).map_err(io_err)?;
        }
    }
    Ok(())
}

pub struct Pgm16 {
    pub width: usize,
    pub height: usize,
    /// Meters; zero samples stay zero (invalid).
    pub meters: Vec<Real>,
}

pub struct Ppm8 {
    pub width: usize,
    pub height: usize,
    /// Planar RGB in [0,1].
    pub rgb: Vec<Real>,
}

struct HeaderParser<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn new(data: &'a [u8]) -> Self {
        HeaderParser { data, pos: 0 }
    }

    fn expect_magic(&mut self, magic: &[u8; 2]) -> Result<()> {
        if self.data.len() < 2 || &self.data[..2] != magic {
            return Err(Error::parse(
                format!("expected magic {:?}", std::str::from_utf8(magic).unwrap()),
                0,
            ));
        }
        self.pos = 2;
        Ok(())
    }

    /// Next whitespace-delimited token, skipping `#` comment lines.
    fn token(&mut self) -> Result<&'a str> {
        loop {
            while self.pos < self.data.len() && self.data[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.data.len() && self.data[self.pos] == b'#' {
                while self.pos < self.data.len() && self.data[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        if self.pos >= self.data.len() {
            return Err(Error::parse("unexpected end of header", self.pos));
        }
        let start = self.pos;
        while self.pos < self.data.len() && !self.data[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.data[start..self.pos])
            .map_err(|_| Error::parse("header token is not ASCII", start))
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        let at = self.pos;
        let tok = self.token()?;
        tok.parse::<u32>()
            .map_err(|_| Error::parse(format!("bad {what}: '{tok}'"), at))
    }

    /// Consume the single whitespace byte separating header and payload.
    fn payload(&mut self) -> Result<&'a [u8]> {
        if self.pos >= self.data.len() || !self.data[self.pos].is_ascii_whitespace() {
            return Err(Error::parse("missing separator before payload", self.pos));
        }
        self.pos += 1;
        Ok(&self.data[self.pos..])
    }

    fn offset(&self) -> usize {
        self.pos
    }
}

pub fn read_pgm16(data: &[u8]) -> Result<Pgm16> {
    let mut p = HeaderParser::new(data);
    p.expect_magic(b"P5")?;
    let width = p.number("width")? as usize;
    let height = p.number("height")? as usize;
    let maxval = p.number("maxval")?;
    if maxval != DEPTH_MAXVAL {
        return Err(Error::parse(
            format!("depth pgm must use maxval {DEPTH_MAXVAL}, got {maxval}"),
            p.offset(),
        ));
    }
    if width == 0 || height == 0 || width.saturating_mul(height) > (1 << 28) {
        return Err(Error::parse(format!("unreasonable dims {width}x{height}"), p.offset()));
    }
    let header_end = p.offset();
    let payload = p.payload()?;
    let need = width * height * 2;
    if payload.len() < need {
        return Err(Error::parse(
            format!("truncated pixel data: have {}, need {need}", payload.len()),
            header_end + 1 + payload.len(),
        ));
    }
    let meters = payload[..need]
        .chunks_exact(2)
        .map(|b| mm_to_meters(u16::from_be_bytes([b[0], b[1]])))
        .collect();
    Ok(Pgm16 { width, height, meters })
}

pub fn read_ppm8(data: &[u8]) -> Result<Ppm8> {
    let mut p = HeaderParser::new(data);
    p.expect_magic(b"P6")?;
    let width = p.number("width")? as usize;
    let height = p.number("height")? as usize;
    let maxval = p.number("maxval")?;
    if maxval != RGB_MAXVAL {
        return Err(Error::parse(
            format!("color ppm must use maxval {RGB_MAXVAL}, got {maxval}"),
            p.offset(),
        ));
    }
    if width == 0 || height == 0 || width.saturating_mul(height) > (1 << 28) {
        return Err(Error::parse(format!("unreasonable dims {width}x{height}"), p.offset()));
    }
    let header_end = p.offset();
    let payload = p.payload()?;
    let plane = width * height;
    let need = 3 * plane;
    if payload.len() < need {
        return Err(Error::parse(
            format!("truncated pixel data: have {}, need {need}", payload.len()),
            header_end + 1 + payload.len(),
        ));
    }
    let mut rgb = vec![0.0 as Real; need];
    for i in 0..plane {
        for c in 0..3 {
            rgb[c * plane + i] = payload[i * 3 + c] as Real / 255.0;
        }
    }
    Ok(Ppm8 { width, height, rgb })
}

pub fn read_pgm16_file(path: &Path) -> Result<Pgm16> {
    let data = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_pgm16(&data)
}

pub fn read_ppm8_file(path: &Path) -> Result<Ppm8> {
    let data = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_ppm8(&data)
}
