//! Soft transformation: patch correlation between target and reference
//! descriptors, and correlation-weighted gathering of reference features.
//!
//! The dense correlation kernel is the hot spot of the whole pipeline:
//! `C[i][j] = <q_i, k_j>` over all (HW)^2 row pairs. [`correlate`]
//! materializes the full matrix with a blocked, row-parallel kernel;
//! [`correlate_select`] runs the same loops but keeps only the per-row
//! argmax index `D` and maximum `A`, which is what the transfer itself
//! needs and keeps full-resolution passes inside memory budget. Both
//! paths scan `j` in ascending order so argmax ties resolve to the
//! smallest index, and both must agree with the naive triple loop in
//! `oracle` to 1e-6.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{FeatureVolume, Grid, ScaleTag};
use crate::nn::{self, ChannelAffine, Conv2d};

/// Rows of flattened k x k x C patch descriptors, one per spatial
/// position of the source volume in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMatrix {
    rows: Vec<f64>,
    n_rows: usize,
    dim: usize,
    patch_size: usize,
    unit_norm: bool,
    zero_rows: Vec<bool>,
}

impl PatchMatrix {
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn is_unit_norm(&self) -> bool {
        self.unit_norm
    }

    /// Rows that were all-zero before normalization (and stayed zero).
    pub fn zero_rows(&self) -> &[bool] {
        &self.zero_rows
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }
}

/// Extract the zero-padded k x k x C neighborhood descriptor at every
/// position. `k` must be odd so the window centers on its position.
pub fn unfold(volume: &FeatureVolume, k: usize) -> Result<PatchMatrix> {
    if k.is_multiple_of(2) || k == 0 {
        return Err(Error::invalid(format!("patch size must be odd, got {k}")));
    }
    let g = &volume.grid;
    let (h, w, c) = g.shape();
    let half = (k / 2) as isize;
    let dim = k * k * c;
    let mut rows = Vec::with_capacity(h * w * dim);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for dy in -half..=half {
                for dx in -half..=half {
                    for ch in 0..c {
                        rows.push(g.at_or_zero(y + dy, x + dx, ch));
                    }
                }
            }
        }
    }
    Ok(PatchMatrix {
        rows,
        n_rows: h * w,
        dim,
        patch_size: k,
        unit_norm: false,
        zero_rows: vec![false; h * w],
    })
}

/// Scale every nonzero row to unit L2 norm; all-zero rows stay zero and
/// are flagged.
pub fn l2_normalize(patches: &PatchMatrix) -> PatchMatrix {
    let mut out = patches.clone();
    let dim = out.dim;
    for (i, row) in out.rows.chunks_mut(dim).enumerate() {
        let norm2: f64 = row.iter().map(|v| v * v).sum();
        if norm2 == 0.0 {
            out.zero_rows[i] = true;
        } else {
            let inv = 1.0 / norm2.sqrt();
            for v in row {
                *v *= inv;
            }
            out.zero_rows[i] = false;
        }
    }
    out.unit_norm = true;
    out
}

/// Full correlation matrix plus the per-row argmax index list `D` and
/// maximum list `A`.
#[derive(Debug, Clone)]
pub struct CorrelationArtifacts {
    /// Row-major (n_query x n_key) correlation matrix.
    pub c: Grid,
    pub d: Vec<usize>,
    pub a: Vec<f64>,
}

/// Just the argmax selection of a correlation pass: `d[i]` is the most
/// correlated key position for query `i`, `a[i]` its correlation.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub d: Vec<usize>,
    pub a: Vec<f64>,
}

impl CorrelationArtifacts {
    pub fn selection(&self) -> Selection {
        Selection {
            d: self.d.clone(),
            a: self.a.clone(),
        }
    }

    /// Maps for RHM1 container serialization: `c` as (n x m) map, `d` and
    /// `a` as 1 x n maps.
    pub fn to_maps(&self) -> Vec<(&'static str, Grid)> {
        let n = self.d.len();
        let d_grid = Grid::from_vec(1, n, 1, self.d.iter().map(|&v| v as f64).collect()).unwrap();
        let a_grid = Grid::from_vec(1, n, 1, self.a.clone()).unwrap();
        vec![("c", self.c.clone()), ("d", d_grid), ("a", a_grid)]
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let mut ia = a.chunks_exact(4);
    let mut ib = b.chunks_exact(4);
    for (ca, cb) in ia.by_ref().zip(ib.by_ref()) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    let tail: f64 = ia
        .remainder()
        .iter()
        .zip(ib.remainder())
        .map(|(x, y)| x * y)
        .sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Key rows packed four at a time in interleaved (column-major panel)
/// layout: lane `l` of group `i` holds `key_row(4p + l)[i]`. The panel
/// kernel then reads one contiguous group of four per descriptor element,
/// which compiles to a broadcast-multiply over a single vector load.
struct PackedKeys {
    panels: Vec<f64>,
    full_panels: usize,
}

fn pack_keys(kref: &PatchMatrix) -> PackedKeys {
    let dim = kref.dim;
    let full_panels = kref.n_rows / 4;
    let mut panels = vec![0.0f64; full_panels * dim * 4];
    let pack_one = |p: usize, out: &mut [f64]| {
        for lane in 0..4 {
            let row = kref.row(4 * p + lane);
            for i in 0..dim {
                out[i * 4 + lane] = row[i];
            }
        }
    };
    if full_panels * dim >= 1 << 20 {
        panels
            .par_chunks_mut(dim * 4)
            .enumerate()
            .for_each(|(p, out)| pack_one(p, out));
    } else {
        for (p, out) in panels.chunks_mut(dim * 4).enumerate() {
            pack_one(p, out);
        }
    }
    PackedKeys { panels, full_panels }
}

/// One query row against one packed panel of four key rows.
#[inline]
fn dot_panel(q: &[f64], panel: &[f64]) -> [f64; 4] {
    let mut acc = [0.0f64; 4];
    for (&qv, group) in q.iter().zip(panel.chunks_exact(4)) {
        acc[0] += qv * group[0];
        acc[1] += qv * group[1];
        acc[2] += qv * group[2];
        acc[3] += qv * group[3];
    }
    acc
}

/// Register tile: two query rows against two packed panels (eight key
/// rows). Four independent four-lane accumulators keep the FMA units
/// busier than one dot at a time.
#[inline]
#[allow(clippy::type_complexity)]
fn dot_tile_2x2(q0: &[f64], q1: &[f64], pa: &[f64], pb: &[f64]) -> ([f64; 4], [f64; 4], [f64; 4], [f64; 4]) {
    let mut a0a = [0.0f64; 4];
    let mut a0b = [0.0f64; 4];
    let mut a1a = [0.0f64; 4];
    let mut a1b = [0.0f64; 4];
    let iter = q0
        .iter()
        .zip(q1)
        .zip(pa.chunks_exact(4).zip(pb.chunks_exact(4)));
    for ((&qa, &qb), (ga, gb)) in iter {
        for l in 0..4 {
            a0a[l] += qa * ga[l];
            a0b[l] += qa * gb[l];
            a1a[l] += qb * ga[l];
            a1b[l] += qb * gb[l];
        }
    }
    (a0a, a0b, a1a, a1b)
}

#[inline]
fn fold_best(best: &mut f64, d: &mut usize, vs: [f64; 4], j0: usize) {
    for (o, v) in vs.into_iter().enumerate() {
        if v > *best {
            *best = v;
            *d = j0 + o;
        }
    }
}

fn check_correlate_inputs(q: &PatchMatrix, kref: &PatchMatrix) -> Result<()> {
    if q.dim != kref.dim {
        return Err(Error::shape(
            "correlate",
            format!("descriptor length {}", q.dim),
            format!("{}", kref.dim),
        ));
    }
    if !q.unit_norm || !kref.unit_norm {
        return Err(Error::invalid("correlate requires l2-normalized patch matrices"));
    }
    Ok(())
}

/// Key-row block size: blocks stay L1/L2 resident while a chunk of query
/// rows streams over them.
const KEY_BLOCK: usize = 64;
const QUERY_CHUNK: usize = 32;

/// Compute the full correlation matrix with argmax selection.
///
/// Row-parallel and blocked over key rows; agrees with the naive triple
/// loop to 1e-6 and with [`correlate_select`] bit-for-bit on `d`/`a`.
pub fn correlate(q: &PatchMatrix, kref: &PatchMatrix) -> Result<CorrelationArtifacts> {
    check_correlate_inputs(q, kref)?;
    let n = q.n_rows;
    let m = kref.n_rows;
    let mut c = vec![0.0f64; n * m];
    let mut d = vec![0usize; n];
    let mut a = vec![0.0f64; n];

    let packed = pack_keys(kref);
    let dim = q.dim;
    let do_chunk = |i0: usize, c_chunk: &mut [f64], d_chunk: &mut [usize], a_chunk: &mut [f64]| {
        let rows_here = c_chunk.len() / m;
        let mut best = vec![f64::NEG_INFINITY; rows_here];
        // Panel blocks stay cache-resident while the chunk's query rows
        // stream over them; ascending j keeps argmax ties on the
        // smallest index.
        for p0 in (0..packed.full_panels).step_by(KEY_BLOCK / 4) {
            let p1 = (p0 + KEY_BLOCK / 4).min(packed.full_panels);
            for r in 0..rows_here {
                let qrow = q.row(i0 + r);
                let out = &mut c_chunk[r * m..(r + 1) * m];
                for p in p0..p1 {
                    let vs = dot_panel(qrow, &packed.panels[p * dim * 4..(p + 1) * dim * 4]);
                    let j = 4 * p;
                    out[j..j + 4].copy_from_slice(&vs);
                    for (o, v) in vs.into_iter().enumerate() {
                        if v > best[r] {
                            best[r] = v;
                            d_chunk[r] = j + o;
                        }
                    }
                }
            }
        }
        // Remainder key rows beyond the last full panel.
        #[allow(clippy::needless_range_loop)]
        for r in 0..rows_here {
            let qrow = q.row(i0 + r);
            let out = &mut c_chunk[r * m..(r + 1) * m];
            for j in packed.full_panels * 4..m {
                let v = dot(qrow, kref.row(j));
                out[j] = v;
                if v > best[r] {
                    best[r] = v;
                    d_chunk[r] = j;
                }
            }
        }
        a_chunk.copy_from_slice(&best);
    };

    if n * m * q.dim >= 1 << 22 {
        c.par_chunks_mut(QUERY_CHUNK * m)
            .zip(d.par_chunks_mut(QUERY_CHUNK))
            .zip(a.par_chunks_mut(QUERY_CHUNK))
            .enumerate()
            .for_each(|(chunk_idx, ((c_chunk, d_chunk), a_chunk))| {
                do_chunk(chunk_idx * QUERY_CHUNK, c_chunk, d_chunk, a_chunk);
            });
    } else {
        do_chunk(0, &mut c, &mut d, &mut a);
    }

    Ok(CorrelationArtifacts {
        c: Grid::from_vec(n, m, 1, c)?,
        d,
        a,
    })
}

/// Same correlation scan as [`correlate`] but streaming: only the per-row
/// argmax survives, so nothing of size (HW)^2 is ever allocated.
pub fn correlate_select(q: &PatchMatrix, kref: &PatchMatrix) -> Result<Selection> {
    check_correlate_inputs(q, kref)?;
    let n = q.n_rows;
    let m = kref.n_rows;
    let mut d = vec![0usize; n];
    let mut a = vec![0.0f64; n];

    let packed = pack_keys(kref);
    let dim = q.dim;
    let panel_len = dim * 4;
    let do_chunk = |i0: usize, d_chunk: &mut [usize], a_chunk: &mut [f64]| {
        let rows_here = d_chunk.len();
        let mut best = vec![f64::NEG_INFINITY; rows_here];
        // Panel blocks stay cache-resident while the chunk's query rows
        // stream over them in pairs; j always scans ascending per row, so
        // argmax ties land on the smallest index.
        for p0 in (0..packed.full_panels).step_by(KEY_BLOCK / 4) {
            let p1 = (p0 + KEY_BLOCK / 4).min(packed.full_panels);
            let mut r = 0;
            while r + 2 <= rows_here {
                let q0 = q.row(i0 + r);
                let q1 = q.row(i0 + r + 1);
                let mut p = p0;
                while p + 2 <= p1 {
                    let pa = &packed.panels[p * panel_len..(p + 1) * panel_len];
                    let pb = &packed.panels[(p + 1) * panel_len..(p + 2) * panel_len];
                    let (a0a, a0b, a1a, a1b) = dot_tile_2x2(q0, q1, pa, pb);
                    fold_best(&mut best[r], &mut d_chunk[r], a0a, 4 * p);
                    fold_best(&mut best[r], &mut d_chunk[r], a0b, 4 * (p + 1));
                    fold_best(&mut best[r + 1], &mut d_chunk[r + 1], a1a, 4 * p);
                    fold_best(&mut best[r + 1], &mut d_chunk[r + 1], a1b, 4 * (p + 1));
                    p += 2;
                }
                while p < p1 {
                    let pa = &packed.panels[p * panel_len..(p + 1) * panel_len];
                    fold_best(&mut best[r], &mut d_chunk[r], dot_panel(q0, pa), 4 * p);
                    fold_best(&mut best[r + 1], &mut d_chunk[r + 1], dot_panel(q1, pa), 4 * p);
                    p += 1;
                }
                r += 2;
            }
            if r < rows_here {
                let qrow = q.row(i0 + r);
                for p in p0..p1 {
                    let pa = &packed.panels[p * panel_len..(p + 1) * panel_len];
                    fold_best(&mut best[r], &mut d_chunk[r], dot_panel(qrow, pa), 4 * p);
                }
            }
        }
        for r in 0..rows_here {
            let qrow = q.row(i0 + r);
            for j in packed.full_panels * 4..m {
                let v = dot(qrow, kref.row(j));
                if v > best[r] {
                    best[r] = v;
                    d_chunk[r] = j;
                }
            }
        }
        a_chunk.copy_from_slice(&best);
    };

    if n * m * q.dim >= 1 << 22 {
        d.par_chunks_mut(QUERY_CHUNK)
            .zip(a.par_chunks_mut(QUERY_CHUNK))
            .enumerate()
            .for_each(|(chunk_idx, (d_chunk, a_chunk))| {
                do_chunk(chunk_idx * QUERY_CHUNK, d_chunk, a_chunk);
            });
    } else {
        do_chunk(0, &mut d, &mut a);
    }

    Ok(Selection { d, a })
}

/// Gather the most correlated value descriptor per position and reweight
/// it by the correlation maximum: `F_S[i] = F_V[D[i]] * A[i]`.
pub fn soft_transfer(values: &FeatureVolume, d: &[usize], a: &[f64]) -> Result<FeatureVolume> {
    let g = &values.grid;
    let n = g.h() * g.w();
    if d.len() != n || a.len() != n {
        return Err(Error::shape(
            "soft_transfer",
            format!("selection of length {n}"),
            format!("d: {}, a: {}", d.len(), a.len()),
        ));
    }
    if let Some(&bad) = d.iter().find(|&&j| j >= n) {
        return Err(Error::invalid(format!(
            "soft_transfer index {bad} out of range for {n} positions"
        )));
    }
    let c = g.c();
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        let src = g.descriptor(d[i]);
        out.extend(src.iter().map(|&v| v * a[i]));
    }
    Ok(FeatureVolume {
        grid: Grid::from_vec(g.h(), g.w(), c, out)?,
        scale: values.scale,
    })
}

/// Gradient of [`soft_transfer`] with respect to the value volume, with
/// the selection treated as a constant of the forward pass: a scatter-add
/// of `gout[i] * a[i]` into position `d[i]`.
pub fn soft_transfer_backward(gout: &Grid, d: &[usize], a: &[f64], value_shape: (usize, usize, usize)) -> Grid {
    let (h, w, c) = value_shape;
    let mut gv = Grid::zeros(h, w, c);
    for (i, (&src, &att)) in d.iter().zip(a).enumerate() {
        let goff = i * c;
        let voff = src * c;
        for ch in 0..c {
            gv.data_mut()[voff + ch] += gout.data()[goff + ch] * att;
        }
    }
    gv
}

/// Histogram of attention values over [-1, 1], a compact diagnostic kept
/// in forward-pass intermediates instead of the full correlation matrix.
pub fn attention_histogram(a: &[f64], bins: usize) -> Vec<usize> {
    let mut hist = vec![0usize; bins];
    for &v in a {
        let t = ((v + 1.0) / 2.0).clamp(0.0, 1.0);
        let b = ((t * bins as f64) as usize).min(bins - 1);
        hist[b] += 1;
    }
    hist
}

/// Local feature extractor: three stages of 3x3 convolution, bias,
/// per-channel affine and ReLU, with stride-2 convolutions used twice,
/// once or never for scales 1x/2x/4x. Channel widths are (32, 64, C_out).
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorWeights {
    pub stages: Vec<ExtractorStage>,
    pub scale: ScaleTag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorStage {
    pub conv: Conv2d,
    pub affine: ChannelAffine,
}

pub const EXTRACTOR_WIDTHS: (usize, usize) = (32, 64);

fn stage_strides(scale: ScaleTag) -> [usize; 3] {
    match scale {
        ScaleTag::X1 => [2, 2, 1],
        ScaleTag::X2 => [2, 1, 1],
        ScaleTag::X4 => [1, 1, 1],
    }
}

impl ExtractorWeights {
    /// Seeded random weights for a `cin`-channel input producing `cout`
    /// channels at `scale`.
    pub fn seeded(scale: ScaleTag, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let widths = [EXTRACTOR_WIDTHS.0, EXTRACTOR_WIDTHS.1, cout];
        let strides = stage_strides(scale);
        let mut stages = Vec::with_capacity(3);
        let mut prev = cin;
        for s in 0..3 {
            stages.push(ExtractorStage {
                conv: Conv2d::seeded(3, prev, widths[s], strides[s], 1, rng),
                affine: ChannelAffine::identity(widths[s]),
            });
            prev = widths[s];
        }
        ExtractorWeights { stages, scale }
    }

    /// All-zero weights (used by shape and linearity tests).
    pub fn zeroed(scale: ScaleTag, cin: usize, cout: usize) -> Self {
        let widths = [EXTRACTOR_WIDTHS.0, EXTRACTOR_WIDTHS.1, cout];
        let strides = stage_strides(scale);
        let mut stages = Vec::with_capacity(3);
        let mut prev = cin;
        for s in 0..3 {
            stages.push(ExtractorStage {
                conv: Conv2d::zeros(3, prev, widths[s], strides[s], 1),
                // Zero scale keeps the whole stage linear in nothing: the
                // all-zero-input example requires zero output.
                affine: ChannelAffine {
                    scale: vec![1.0; widths[s]],
                    shift: vec![0.0; widths[s]],
                },
            });
            prev = widths[s];
        }
        ExtractorWeights { stages, scale }
    }

    pub fn cin(&self) -> usize {
        self.stages[0].conv.cin
    }

    pub fn cout(&self) -> usize {
        self.stages.last().unwrap().conv.cout
    }

    pub fn forward(&self, input: &Grid) -> Result<(FeatureVolume, ExtractorCache)> {
        let ds = self.scale.downsample();
        if !input.h().is_multiple_of(ds) || !input.w().is_multiple_of(ds) {
            return Err(Error::shape(
                "extractor",
                format!("spatial size divisible by {ds} for scale {}", self.scale),
                input.shape_str(),
            ));
        }
        if input.c() != self.cin() {
            return Err(Error::shape(
                "extractor",
                format!("{} input channels", self.cin()),
                input.shape_str(),
            ));
        }
        let mut cache = ExtractorCache {
            inputs: Vec::with_capacity(3),
            pre_affine: Vec::with_capacity(3),
            pre_relu: Vec::with_capacity(3),
        };
        let mut x = input.clone();
        for stage in &self.stages {
            cache.inputs.push(x.clone());
            let conv_out = stage.conv.forward(&x)?;
            cache.pre_affine.push(conv_out.clone());
            let affine_out = stage.affine.forward(&conv_out);
            cache.pre_relu.push(affine_out.clone());
            x = nn::relu(&affine_out);
        }
        Ok((FeatureVolume::new(x, self.scale)?, cache))
    }

    pub fn backward(&self, cache: &ExtractorCache, gout: &Grid) -> Result<(Grid, ExtractorGrads)> {
        let mut g = gout.clone();
        let mut stages = Vec::with_capacity(3);
        for (i, stage) in self.stages.iter().enumerate().rev() {
            let g_affine = nn::relu_backward(&cache.pre_relu[i], &g);
            let (g_conv, affine_grads) = stage.affine.backward(&cache.pre_affine[i], &g_affine);
            let (g_in, conv_grads) = stage.conv.backward(&cache.inputs[i], &g_conv)?;
            stages.push(ExtractorStageGrads {
                conv: conv_grads,
                affine: affine_grads,
            });
            g = g_in;
        }
        stages.reverse();
        Ok((g, ExtractorGrads { stages }))
    }
}

#[derive(Debug, Clone)]
pub struct ExtractorCache {
    pub inputs: Vec<Grid>,
    pub pre_affine: Vec<Grid>,
    pub pre_relu: Vec<Grid>,
}

#[derive(Debug, Clone)]
pub struct ExtractorGrads {
    pub stages: Vec<ExtractorStageGrads>,
}

#[derive(Debug, Clone)]
pub struct ExtractorStageGrads {
    pub conv: crate::nn::Conv2dGrads,
    pub affine: crate::nn::ChannelAffineGrads,
}

/// Deterministic forward pass through the local feature extractor.
pub fn extract_local_features(
    image: &Grid,
    weights: &ExtractorWeights,
    target_scale: ScaleTag,
) -> Result<FeatureVolume> {
    if weights.scale != target_scale {
        return Err(Error::invalid(format!(
            "extractor weights are for scale {}, requested {}",
            weights.scale, target_scale
        )));
    }
    Ok(weights.forward(image)?.0)
}
