//! Dense H×W×C grids of `f64`, the storage type shared by images, feature
//! volumes and heatmap stacks.
//!
//! Layout is row-major and channel-minor: element `(y, x, ch)` lives at
//! `(y * w + x) * c + ch`. Pixel `(row i, col j)` sits at continuous
//! coordinate `(x = j, y = i)` with the origin at the top-left pixel center.

use crate::error::{Error, Result};

/// Dense H×W×C grid of real values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Grid {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::shape(
                "Grid::from_vec",
                format!("{} values for {h}x{w}x{c}", h * w * c),
                format!("{}", data.len()),
            ));
        }
        Ok(Grid { h, w, c, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}x{}", self.h, self.w, self.c)
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, ch: usize) -> usize {
        debug_assert!(y < self.h && x < self.w && ch < self.c);
        (y * self.w + x) * self.c + ch
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[self.idx(y, x, ch)]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, ch: usize) -> &mut f64 {
        let i = self.idx(y, x, ch);
        &mut self.data[i]
    }

    /// Value at a possibly out-of-range position; zero outside the grid.
    #[inline]
    pub fn at_or_zero(&self, y: isize, x: isize, ch: usize) -> f64 {
        if y < 0 || x < 0 || y as usize >= self.h || x as usize >= self.w {
            0.0
        } else {
            self.at(y as usize, x as usize, ch)
        }
    }

    /// The C-length descriptor at row-major linear position `pos`.
    #[inline]
    pub fn descriptor(&self, pos: usize) -> &[f64] {
        &self.data[pos * self.c..(pos + 1) * self.c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &Grid) -> Result<Grid> {
        self.check_same_shape(other, "Grid::add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Grid {
            h: self.h,
            w: self.w,
            c: self.c,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Grid) -> Result<()> {
        self.check_same_shape(other, "Grid::add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Grid) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Concatenate along the channel axis; spatial sizes must match.
    pub fn concat_channels(parts: &[&Grid]) -> Result<Grid> {
        let (h, w) = (parts[0].h, parts[0].w);
        for p in parts {
            if p.h != h || p.w != w {
                return Err(Error::shape(
                    "Grid::concat_channels",
                    format!("{h}x{w} spatial"),
                    p.shape_str(),
                ));
            }
        }
        let c: usize = parts.iter().map(|p| p.c).sum();
        let mut out = Grid::zeros(h, w, c);
        for y in 0..h {
            for x in 0..w {
                let mut ch = 0;
                for p in parts {
                    let src = p.idx(y, x, 0);
                    let dst = out.idx(y, x, ch);
                    out.data[dst..dst + p.c].copy_from_slice(&p.data[src..src + p.c]);
                    ch += p.c;
                }
            }
        }
        Ok(out)
    }

    /// Slice a channel range into a new grid.
    pub fn channel_slice(&self, start: usize, count: usize) -> Grid {
        assert!(start + count <= self.c);
        let mut out = Grid::zeros(self.h, self.w, count);
        for y in 0..self.h {
            for x in 0..self.w {
                let src = self.idx(y, x, start);
                let dst = out.idx(y, x, 0);
                out.data[dst..dst + count].copy_from_slice(&self.data[src..src + count]);
            }
        }
        out
    }

    fn check_same_shape(&self, other: &Grid, context: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(context, self.shape_str(), other.shape_str()));
        }
        Ok(())
    }

    /// Order-fixed sum used as a regression fingerprint in golden tests.
    pub fn checksum(&self) -> f64 {
        let mut acc = 0.0;
        for (i, v) in self.data.iter().enumerate() {
            acc += v * (1.0 + (i % 17) as f64 * 0.25);
        }
        acc
    }
}

/// Pyramid scale of a feature volume: 1x is the coarsest (input/4),
/// 4x the finest (input/1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ScaleTag {
    #[serde(rename = "1x")]
    X1,
    #[serde(rename = "2x")]
    X2,
    #[serde(rename = "4x")]
    X4,
}

impl ScaleTag {
    pub const ALL: [ScaleTag; 3] = [ScaleTag::X1, ScaleTag::X2, ScaleTag::X4];

    /// Spatial downsampling factor relative to the extractor input.
    pub fn downsample(self) -> usize {
        match self {
            ScaleTag::X1 => 4,
            ScaleTag::X2 => 2,
            ScaleTag::X4 => 1,
        }
    }

    pub fn index(self) -> usize {
        match self {
            ScaleTag::X1 => 0,
            ScaleTag::X2 => 1,
            ScaleTag::X4 => 2,
        }
    }
}

impl std::fmt::Display for ScaleTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScaleTag::X1 => write!(f, "1x"),
            ScaleTag::X2 => write!(f, "2x"),
            ScaleTag::X4 => write!(f, "4x"),
        }
    }
}

/// A feature volume: a grid of local descriptors plus its pyramid scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub grid: Grid,
    pub scale: ScaleTag,
}

impl FeatureVolume {
    pub fn new(grid: Grid, scale: ScaleTag) -> Result<Self> {
        if grid.h() == 0 || grid.w() == 0 || grid.c() == 0 {
            return Err(Error::invalid(format!(
                "feature volume dimensions must be positive, got {}",
                grid.shape_str()
            )));
        }
        if !grid.all_finite() {
            return Err(Error::invalid("feature volume contains non-finite values"));
        }
        Ok(FeatureVolume { grid, scale })
    }
}
