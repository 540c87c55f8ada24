//! Joint image/landmark augmentation: flip, rotation, scaling and crop
//! jitter applied through one affine map, plus grayscale, box blur and
//! rectangle occlusion. All randomness comes from an explicit caller
//! seeded state.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::grid::Grid;
use crate::heatmaps::LandmarkSet;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPolicy {
    pub rotation_max_deg: f64,
    pub scale_jitter: f64,
    pub crop_jitter: f64,
    pub gray_p: f64,
    pub blur_p: f64,
    pub occlusion_p: f64,
    pub flip_p: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            rotation_max_deg: 45.0,
            scale_jitter: 0.2,
            crop_jitter: 0.1,
            gray_p: 0.20,
            blur_p: 0.30,
            occlusion_p: 0.40,
            flip_p: 0.50,
        }
    }
}

impl AugmentationPolicy {
    /// Geometry-only identity: no rotation, scaling, jitter, flip or
    /// photometric ops.
    pub fn disabled() -> Self {
        AugmentationPolicy {
            rotation_max_deg: 0.0,
            scale_jitter: 0.0,
            crop_jitter: 0.0,
            gray_p: 0.0,
            blur_p: 0.0,
            occlusion_p: 0.0,
            flip_p: 0.0,
        }
    }

    /// The geometric draws only, for commutation tests.
    pub fn geometry_only(mut self) -> Self {
        self.gray_p = 0.0;
        self.blur_p = 0.0;
        self.occlusion_p = 0.0;
        self
    }
}

/// Record of what one augmentation draw did.
#[derive(Debug, Clone, PartialEq)]
pub struct AppliedAugmentation {
    pub flipped: bool,
    /// Forward landmark map in pixel units: `p_out = A * (p_in, 1)`.
    /// Identity when the draw fell back to the un-augmented sample.
    pub affine: [[f64; 3]; 2],
    pub grayed: bool,
    pub blurred: bool,
    /// Occlusion rectangle (x, y, side, fill value in [0, 1]).
    pub occlusion: Option<(usize, usize, usize, f64)>,
}

impl AppliedAugmentation {
    fn identity() -> Self {
        AppliedAugmentation {
            flipped: false,
            affine: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            grayed: false,
            blurred: false,
            occlusion: None,
        }
    }
}

const MAX_GEOMETRY_RETRIES: usize = 8;

fn apply_affine(m: &[[f64; 3]; 2], p: (f64, f64)) -> (f64, f64) {
    (
        m[0][0] * p.0 + m[0][1] * p.1 + m[0][2],
        m[1][0] * p.0 + m[1][1] * p.1 + m[1][2],
    )
}

fn invert_affine(m: &[[f64; 3]; 2]) -> [[f64; 3]; 2] {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = 1.0 / det;
    let a = m[1][1] * inv;
    let b = -m[0][1] * inv;
    let c = -m[1][0] * inv;
    let d = m[0][0] * inv;
    [
        [a, b, -(a * m[0][2] + b * m[1][2])],
        [c, d, -(c * m[0][2] + d * m[1][2])],
    ]
}

/// Warp image-like data by the inverse of a forward landmark map, with
/// bilinear sampling and zero padding. Also used by the
/// render/augment commutation checks.
pub fn warp_by_affine(image: &Grid, forward: &[[f64; 3]; 2]) -> Grid {
    let inv = invert_affine(forward);
    let (h, w, c) = image.shape();
    let mut out = Grid::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = apply_affine(&inv, (x as f64, y as f64));
            for ch in 0..c {
                *out.at_mut(y, x, ch) = crate::oracle::bilinear_at(image, sx, sy, ch);
            }
        }
    }
    out
}

/// Apply one augmentation draw to an image and its landmarks.
///
/// Geometric parameters are redrawn up to 8 times if a draw leaves no
/// landmark inside the frame; after that the un-augmented inputs are
/// returned. The flip permutation (when provided) relabels points so
/// left/right semantics survive mirroring.
pub fn augment(
    image: &Grid,
    landmarks: &LandmarkSet,
    flip_permutation: Option<&[usize]>,
    policy: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
) -> (Grid, LandmarkSet, AppliedAugmentation) {
    let (h, w) = (image.h(), image.w());
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;

    struct AcceptedDraw {
        flip: bool,
        affine: [[f64; 3]; 2],
        points: Vec<(f64, f64)>,
        visibility: Vec<bool>,
    }
    let mut accepted: Option<AcceptedDraw> = None;
    for _ in 0..MAX_GEOMETRY_RETRIES {
        let flip = policy.flip_p > 0.0 && rng.random_range(0.0..1.0) < policy.flip_p;
        let angle = if policy.rotation_max_deg > 0.0 {
            rng.random_range(-policy.rotation_max_deg..policy.rotation_max_deg)
                .to_radians()
        } else {
            0.0
        };
        let scale = if policy.scale_jitter > 0.0 {
            rng.random_range(1.0 - policy.scale_jitter..1.0 + policy.scale_jitter)
        } else {
            1.0
        };
        let (tx, ty) = if policy.crop_jitter > 0.0 {
            (
                rng.random_range(-policy.crop_jitter..policy.crop_jitter) * w as f64,
                rng.random_range(-policy.crop_jitter..policy.crop_jitter) * h as f64,
            )
        } else {
            (0.0, 0.0)
        };

        // Compose: optional mirror about the vertical axis, then
        // rotation+scale about the image center, then translation.
        let (cos, sin) = (angle.cos() * scale, angle.sin() * scale);
        let fx = if flip { -1.0 } else { 1.0 };
        // x' = cos*(fx*(x - cx)) - sin*(y - cy) + cx + tx (mirror maps
        // x - cx to cx - x, i.e. (W-1) - x before centering).
        let m = [
            [cos * fx, -sin, cx + tx - cos * fx * cx + sin * cy],
            [sin * fx, cos, cy + ty - sin * fx * cx - cos * cy],
        ];

        let source_order: Vec<usize> = match (flip, flip_permutation) {
            (true, Some(perm)) if perm.len() == landmarks.len() => perm.to_vec(),
            _ => (0..landmarks.len()).collect(),
        };
        let points: Vec<(f64, f64)> = source_order
            .iter()
            .map(|&i| apply_affine(&m, landmarks.points[i]))
            .collect();
        let visibility: Vec<bool> = source_order.iter().map(|&i| landmarks.visibility[i]).collect();

        let any_in_frame = points
            .iter()
            .zip(&visibility)
            .any(|(&(x, y), &v)| v && x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64);
        if any_in_frame {
            accepted = Some(AcceptedDraw {
                flip,
                affine: m,
                points,
                visibility,
            });
            break;
        }
    }

    let (mut out_image, out_landmarks, mut applied) = match accepted {
        Some(draw) => {
            let warped = if draw.affine == AppliedAugmentation::identity().affine {
                image.clone()
            } else {
                warp_by_affine(image, &draw.affine)
            };
            let lm = LandmarkSet {
                points: draw.points,
                visibility: draw.visibility,
                image_size: landmarks.image_size,
            };
            (
                warped,
                lm,
                AppliedAugmentation {
                    flipped: draw.flip,
                    affine: draw.affine,
                    ..AppliedAugmentation::identity()
                },
            )
        }
        None => (image.clone(), landmarks.clone(), AppliedAugmentation::identity()),
    };

    if policy.gray_p > 0.0 && rng.random_range(0.0..1.0) < policy.gray_p {
        out_image = to_gray(&out_image);
        applied.grayed = true;
    }
    if policy.blur_p > 0.0 && rng.random_range(0.0..1.0) < policy.blur_p {
        out_image = box_blur3(&out_image);
        applied.blurred = true;
    }
    if policy.occlusion_p > 0.0 && rng.random_range(0.0..1.0) < policy.occlusion_p {
        let short = h.min(w) as f64;
        let side = (rng.random_range(0.10..0.30) * short).round().max(1.0) as usize;
        let x0 = rng.random_range(0..w.saturating_sub(side).max(1));
        let y0 = rng.random_range(0..h.saturating_sub(side).max(1));
        let fill = rng.random_range(0.0..1.0);
        for y in y0..(y0 + side).min(h) {
            for x in x0..(x0 + side).min(w) {
                for ch in 0..out_image.c() {
                    *out_image.at_mut(y, x, ch) = fill;
                }
            }
        }
        applied.occlusion = Some((x0, y0, side, fill));
    }

    (out_image, out_landmarks, applied)
}

fn to_gray(image: &Grid) -> Grid {
    if image.c() == 1 {
        return image.clone();
    }
    let c = image.c() as f64;
    let mut out = Grid::zeros(image.h(), image.w(), image.c());
    for y in 0..image.h() {
        for x in 0..image.w() {
            let mean: f64 = (0..image.c()).map(|ch| image.at(y, x, ch)).sum::<f64>() / c;
            for ch in 0..image.c() {
                *out.at_mut(y, x, ch) = mean;
            }
        }
    }
    out
}

fn box_blur3(image: &Grid) -> Grid {
    let (h, w, c) = image.shape();
    let mut out = Grid::zeros(h, w, c);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for ch in 0..c {
                let mut acc = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        acc += image.at_or_zero(y + dy, x + dx, ch);
                    }
                }
                *out.at_mut(y as usize, x as usize, ch) = acc / 9.0;
            }
        }
    }
    out
}
