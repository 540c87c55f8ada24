//! Ground-truth heatmap rendering and sub-pixel decoding.
//!
//! Landmark channels hold an unnormalized Gaussian bump
//! `exp(-((x-a)^2 + (y-b)^2) / (2 sigma^2))` evaluated at pixel centers;
//! boundary channels hold the same Gaussian of the distance to a
//! piecewise-linear polyline, truncated to zero beyond `3 sigma`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

pub const DEFAULT_SIGMA: f64 = 1.5;

/// Channel maxima below this are decoded as invisible.
pub const DECODE_VISIBILITY_EPS: f64 = 1e-6;

/// A set of 2-D landmarks with per-point visibility flags.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub points: Vec<(f64, f64)>,
    pub visibility: Vec<bool>,
    /// (width, height) of the frame the coordinates live in.
    pub image_size: (usize, usize),
}

impl LandmarkSet {
    pub fn new(points: Vec<(f64, f64)>, visibility: Vec<bool>, image_size: (usize, usize)) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("landmark set must contain at least one point"));
        }
        if points.len() != visibility.len() {
            return Err(Error::shape(
                "LandmarkSet::new",
                format!("{} visibility flags", points.len()),
                format!("{}", visibility.len()),
            ));
        }
        if points.iter().any(|&(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::invalid("landmark coordinates must be finite"));
        }
        Ok(LandmarkSet {
            points,
            visibility,
            image_size,
        })
    }

    /// All points visible.
    pub fn all_visible(points: Vec<(f64, f64)>, image_size: (usize, usize)) -> Result<Self> {
        let n = points.len();
        Self::new(points, vec![true; n], image_size)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Rescale coordinates into a different frame.
    pub fn scaled_to(&self, out_size: (usize, usize)) -> LandmarkSet {
        let (iw, ih) = (self.image_size.0 as f64, self.image_size.1 as f64);
        let (ow, oh) = (out_size.0 as f64, out_size.1 as f64);
        let sx = if iw > 1.0 { (ow - 1.0) / (iw - 1.0) } else { 1.0 };
        let sy = if ih > 1.0 { (oh - 1.0) / (ih - 1.0) } else { 1.0 };
        LandmarkSet {
            points: self.points.iter().map(|&(x, y)| (x * sx, y * sy)).collect(),
            visibility: self.visibility.clone(),
            image_size: out_size,
        }
    }
}

/// Ordered landmark-index sequences tracing facial contours.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct BoundaryDefinition {
    pub boundaries: Vec<Vec<usize>>,
}

impl BoundaryDefinition {
    pub fn new(boundaries: Vec<Vec<usize>>) -> Result<Self> {
        for (p, seq) in boundaries.iter().enumerate() {
            if seq.len() < 2 {
                return Err(Error::invalid(format!(
                    "boundary {p} must reference at least 2 landmarks, got {}",
                    seq.len()
                )));
            }
            if seq.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::invalid(format!(
                    "boundary {p} contains an immediately repeated landmark index"
                )));
            }
        }
        Ok(BoundaryDefinition { boundaries })
    }

    pub fn empty() -> Self {
        BoundaryDefinition { boundaries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.boundaries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boundaries.is_empty()
    }

    pub fn validate_against(&self, n_landmarks: usize) -> Result<()> {
        for (p, seq) in self.boundaries.iter().enumerate() {
            if let Some(&bad) = seq.iter().find(|&&i| i >= n_landmarks) {
                return Err(Error::invalid(format!(
                    "boundary {p} references landmark {bad}, but only {n_landmarks} exist"
                )));
            }
        }
        Ok(())
    }

    /// The 13 contours of the 68-point annotation convention: jaw line,
    /// both eyebrows, nose bridge and base, upper/lower arcs of both eyes
    /// and of the outer and inner lips.
    pub fn standard_68() -> Self {
        let b: Vec<Vec<usize>> = vec![
            (0..=16).collect(),
            (17..=21).collect(),
            (22..=26).collect(),
            (27..=30).collect(),
            (31..=35).collect(),
            vec![36, 37, 38, 39],
            vec![39, 40, 41, 36],
            vec![42, 43, 44, 45],
            vec![45, 46, 47, 42],
            (48..=54).collect(),
            vec![54, 55, 56, 57, 58, 59, 48],
            (60..=64).collect(),
            vec![64, 65, 66, 67, 60],
        ];
        BoundaryDefinition { boundaries: b }
    }
}

/// A stack of landmark and boundary response maps.
///
/// The first `n_landmarks` channels are per-landmark maps, the remaining
/// `n_boundaries` channels are per-contour maps. All values lie in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub grid: Grid,
    pub n_landmarks: usize,
    pub n_boundaries: usize,
    pub sigma: f64,
}

impl HeatmapStack {
    pub fn new(grid: Grid, n_landmarks: usize, n_boundaries: usize, sigma: f64) -> Result<Self> {
        if grid.c() != n_landmarks + n_boundaries {
            return Err(Error::shape(
                "HeatmapStack::new",
                format!("{} channels", n_landmarks + n_boundaries),
                format!("{}", grid.c()),
            ));
        }
        if grid.h() == 0 || grid.w() == 0 {
            return Err(Error::invalid("heatmap dimensions must be positive"));
        }
        if sigma <= 0.0 {
            return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
        }
        Ok(HeatmapStack {
            grid,
            n_landmarks,
            n_boundaries,
            sigma,
        })
    }

    pub fn channels(&self) -> usize {
        self.grid.c()
    }

    /// Append the channels of `other` (same spatial size and sigma) after
    /// this stack's channels, as boundary channels.
    pub fn with_boundary_channels(self, other: HeatmapStack) -> Result<HeatmapStack> {
        let grid = Grid::concat_channels(&[&self.grid, &other.grid])?;
        HeatmapStack::new(grid, self.n_landmarks, other.channels(), self.sigma)
    }

    pub fn values_in_unit_interval(&self) -> bool {
        self.grid.data().iter().all(|&v| (0.0..=1.0).contains(&v))
    }
}

/// Render one Gaussian channel per landmark. Channels of invisible
/// landmarks are identically zero.
pub fn render_landmark_heatmaps(
    landmarks: &LandmarkSet,
    out_size: (usize, usize),
    sigma: f64,
) -> Result<HeatmapStack> {
    let (h, w) = out_size;
    if sigma <= 0.0 {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid("output size must be positive"));
    }
    let m = landmarks.len();
    let mut grid = Grid::zeros(h, w, m);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (ch, (&(ax, ay), &vis)) in landmarks.points.iter().zip(&landmarks.visibility).enumerate() {
        if !vis {
            continue;
        }
        for y in 0..h {
            let dy = y as f64 - ay;
            for x in 0..w {
                let dx = x as f64 - ax;
                *grid.at_mut(y, x, ch) = (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    HeatmapStack::new(grid, m, 0, sigma)
}

/// Squared distance from point `p` to segment `a`-`b`.
fn point_segment_dist2(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (ux, uy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        ((ux * vx + uy * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (ux - t * vx, uy - t * vy);
    dx * dx + dy * dy
}

/// Render one truncated-Gaussian distance-field channel per boundary.
///
/// Invisible landmarks are skipped when forming each polyline; a boundary
/// left with a single visible point degenerates to distance-to-point, and
/// one with no visible points renders as all zero.
pub fn render_boundary_heatmaps(
    landmarks: &LandmarkSet,
    boundaries: &BoundaryDefinition,
    out_size: (usize, usize),
    sigma: f64,
) -> Result<HeatmapStack> {
    let (h, w) = out_size;
    if sigma <= 0.0 {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid("output size must be positive"));
    }
    boundaries.validate_against(landmarks.len())?;
    let p = boundaries.len();
    let mut grid = Grid::zeros(h, w, p);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let cutoff2 = (3.0 * sigma) * (3.0 * sigma);
    for (ch, seq) in boundaries.boundaries.iter().enumerate() {
        let pts: Vec<(f64, f64)> = seq
            .iter()
            .filter(|&&i| landmarks.visibility[i])
            .map(|&i| landmarks.points[i])
            .collect();
        if pts.is_empty() {
            continue;
        }
        for y in 0..h {
            for x in 0..w {
                let q = (x as f64, y as f64);
                let mut d2 = f64::INFINITY;
                if pts.len() == 1 {
                    let (dx, dy) = (q.0 - pts[0].0, q.1 - pts[0].1);
                    d2 = dx * dx + dy * dy;
                } else {
                    for ab in pts.windows(2) {
                        d2 = d2.min(point_segment_dist2(q, ab[0], ab[1]));
                    }
                }
                if d2 <= cutoff2 {
                    *grid.at_mut(y, x, ch) = (-d2 * inv).exp();
                }
            }
        }
    }
    HeatmapStack::new(grid, 0, p, sigma)
}

/// Render landmark channels followed by boundary channels in one stack.
pub fn render_full_stack(
    landmarks: &LandmarkSet,
    boundaries: &BoundaryDefinition,
    out_size: (usize, usize),
    sigma: f64,
) -> Result<HeatmapStack> {
    let lm = render_landmark_heatmaps(landmarks, out_size, sigma)?;
    if boundaries.is_empty() {
        return Ok(lm);
    }
    let bd = render_boundary_heatmaps(landmarks, boundaries, out_size, sigma)?;
    lm.with_boundary_channels(bd)
}

/// Decode the landmark channels of a stack back to coordinates.
///
/// Each channel's coordinate is the intensity-weighted centroid of a
/// window around the global argmax (ties broken toward the smallest
/// row-major index). The window half-width is `ceil(2 sigma)`: a truncated
/// 3x3 centroid systematically shrinks sub-pixel offsets by ~3.7x at
/// sigma 1.5, which is far outside the 0.2 px round-trip budget, while a
/// +/- 2 sigma window keeps the bias below 0.09 px for sigma in [1, 3].
/// Channels whose maximum falls below [`DECODE_VISIBILITY_EPS`] decode as
/// invisible at (0, 0).
pub fn decode_heatmaps(stack: &HeatmapStack) -> Result<LandmarkSet> {
    if stack.n_landmarks == 0 {
        return Err(Error::invalid("stack has no landmark channels to decode"));
    }
    let g = &stack.grid;
    let (h, w) = (g.h(), g.w());
    let half = (2.0 * stack.sigma).ceil().max(1.0) as isize;
    let mut points = Vec::with_capacity(stack.n_landmarks);
    let mut visibility = Vec::with_capacity(stack.n_landmarks);
    for ch in 0..stack.n_landmarks {
        let mut best = f64::NEG_INFINITY;
        let (mut by, mut bx) = (0usize, 0usize);
        for y in 0..h {
            for x in 0..w {
                let v = g.at(y, x, ch);
                if v > best {
                    best = v;
                    by = y;
                    bx = x;
                }
            }
        }
        if best < DECODE_VISIBILITY_EPS {
            points.push((0.0, 0.0));
            visibility.push(false);
            continue;
        }
        let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for dy in -half..=half {
            let y = by as isize + dy;
            if y < 0 || y >= h as isize {
                continue;
            }
            for dx in -half..=half {
                let x = bx as isize + dx;
                if x < 0 || x >= w as isize {
                    continue;
                }
                let v = g.at(y as usize, x as usize, ch);
                sw += v;
                sx += v * x as f64;
                sy += v * y as f64;
            }
        }
        points.push((sx / sw, sy / sw));
        visibility.push(true);
    }
    LandmarkSet::new(points, visibility, (w, h))
}
