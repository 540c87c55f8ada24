//! Binary PGM (P5) and PPM (P6) image reading and writing, maxval 255.
//!
//! The parser accepts `#` comments and arbitrary whitespace in the header
//! per the PNM convention; the writers emit one canonical header form so
//! identical pixel data always produces byte-identical files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageU8 {
    pub w: usize,
    pub h: usize,
    /// 1 (grayscale) or 3 (color).
    pub channels: usize,
    /// Row-major, channel-minor samples.
    pub data: Vec<u8>,
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Parse("truncated PNM header".into()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad PNM header token {:?}", String::from_utf8_lossy(tok))))
    }
}

pub fn read_pnm(bytes: &[u8]) -> Result<ImageU8> {
    let mut r = HeaderReader { bytes, pos: 0 };
    let magic = r.token()?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(Error::Parse(format!(
                "unsupported PNM magic {:?} (binary P5/P6 only)",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let w = r.number()?;
    let h = r.number()?;
    let maxval = r.number()?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Parse(format!("unsupported maxval {maxval} (expected 1..=255)")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if r.pos >= bytes.len() || !bytes[r.pos].is_ascii_whitespace() {
        return Err(Error::Parse("missing raster separator".into()));
    }
    r.pos += 1;
    let n = w * h * channels;
    let raster = &bytes[r.pos..];
    if raster.len() < n {
        return Err(Error::Parse(format!(
            "raster truncated: expected {n} bytes, got {}",
            raster.len()
        )));
    }
    Ok(ImageU8 {
        w,
        h,
        channels,
        data: raster[..n].to_vec(),
    })
}

pub fn write_pgm(img: &ImageU8) -> Result<Vec<u8>> {
    if img.channels != 1 {
        return Err(Error::invalid("PGM output requires a single channel"));
    }
    let mut out = format!("P5\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend_from_slice(&img.data);
    Ok(out)
}

pub fn write_ppm(img: &ImageU8) -> Result<Vec<u8>> {
    if img.channels != 3 {
        return Err(Error::invalid("PPM output requires three channels"));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend_from_slice(&img.data);
    Ok(out)
}

impl ImageU8 {
    /// Convert to a [0, 1] float grid.
    pub fn to_grid(&self) -> Grid {
        let data = self.data.iter().map(|&b| b as f64 / 255.0).collect();
        Grid::from_vec(self.h, self.w, self.channels, data).expect("consistent image")
    }

    /// Quantize a [0, 1] float grid back to 8-bit samples.
    pub fn from_grid(grid: &Grid) -> Self {
        let data = grid
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        ImageU8 {
            w: grid.w(),
            h: grid.h(),
            channels: grid.c(),
            data,
        }
    }
}

/// Read a PGM/PPM file into a [0, 1] grid.
pub fn load_image(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(read_pnm(&bytes)?.to_grid())
}

/// Write a [0, 1] grid as PGM (1 channel) or PPM (3 channels).
pub fn save_image(path: impl AsRef<Path>, grid: &Grid) -> Result<()> {
    let path = path.as_ref();
    let img = ImageU8::from_grid(grid);
    let bytes = match img.channels {
        1 => write_pgm(&img)?,
        3 => write_ppm(&img)?,
        c => return Err(Error::invalid(format!("cannot write {c}-channel image"))),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Render one channel of a grid as a max-normalized PGM: the largest
/// value maps to 255, an all-zero channel stays black.
pub fn grid_to_pgm_bytes(grid: &Grid, channel: usize) -> Result<Vec<u8>> {
    if channel >= grid.c() {
        return Err(Error::invalid(format!(
            "channel {channel} out of range for {} channels",
            grid.c()
        )));
    }
    let mut max = 0.0f64;
    for y in 0..grid.h() {
        for x in 0..grid.w() {
            max = max.max(grid.at(y, x, channel));
        }
    }
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut data = Vec::with_capacity(grid.h() * grid.w());
    for y in 0..grid.h() {
        for x in 0..grid.w() {
            data.push((grid.at(y, x, channel).max(0.0) * scale).round() as u8);
        }
    }
    write_pgm(&ImageU8 {
        w: grid.w(),
        h: grid.h(),
        channels: 1,
        data,
    })
}
