//! Multi-scale feature fusion: residual concat-convolution blocks and
//! transposed-convolution upscaling across the 1x/2x/4x scales, ending in
//! a 1x1 projection squashed to [0, 1] heatmaps.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{FeatureVolume, Grid, ScaleTag};
use crate::heatmaps::HeatmapStack;
use crate::nn::{self, Conv2d, Conv2dGrads, ConvTranspose2d};

/// Spatial size and channel count of one pyramid scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ScaleSpec {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

/// The three transformed-feature scales. Spatial size doubles and channel
/// count halves per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ScaleTable {
    pub scales: [ScaleSpec; 3],
}

impl ScaleTable {
    /// Full-resolution table: 32x32x256, 64x64x128, 128x128x64.
    pub fn full() -> Self {
        ScaleTable {
            scales: [
                ScaleSpec { h: 32, w: 32, c: 256 },
                ScaleSpec { h: 64, w: 64, c: 128 },
                ScaleSpec { h: 128, w: 128, c: 64 },
            ],
        }
    }

    /// Quarter-scale table used by fast tests: 8x8x32, 16x16x16, 32x32x8.
    pub fn quarter() -> Self {
        ScaleTable {
            scales: [
                ScaleSpec { h: 8, w: 8, c: 32 },
                ScaleSpec { h: 16, w: 16, c: 16 },
                ScaleSpec { h: 32, w: 32, c: 8 },
            ],
        }
    }

    /// Sixteenth-scale table for gradient harnesses where every forward
    /// pass must be cheap: 4x4x8, 8x8x4, 16x16x2.
    pub fn micro() -> Self {
        ScaleTable {
            scales: [
                ScaleSpec { h: 4, w: 4, c: 8 },
                ScaleSpec { h: 8, w: 8, c: 4 },
                ScaleSpec { h: 16, w: 16, c: 2 },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..2 {
            let (a, b) = (self.scales[i], self.scales[i + 1]);
            if b.h != 2 * a.h || b.w != 2 * a.w || a.c != 2 * b.c {
                return Err(Error::invalid(format!(
                    "scale table step {i}: {}x{}x{} -> {}x{}x{} must double space and halve channels",
                    a.h, a.w, a.c, b.h, b.w, b.c
                )));
            }
        }
        if self.scales[0].h == 0 || !self.scales[0].h.is_multiple_of(4) {
            return Err(Error::invalid(
                "coarsest scale extent must be a positive multiple of 4".to_string(),
            ));
        }
        Ok(())
    }

    pub fn spec(&self, scale: ScaleTag) -> ScaleSpec {
        self.scales[scale.index()]
    }

    /// Extent of the extractor input images: 4x the coarsest scale.
    pub fn image_extent(&self) -> usize {
        self.scales[0].h * 4
    }
}

/// Weights of the fusion module: per scale a stack of residual fusion
/// convolutions, two upscale steps, and the final 1x1 projection.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    pub ff: [Vec<Conv2d>; 3],
    pub up: [ConvTranspose2d; 2],
    pub proj: Conv2d,
    pub table: ScaleTable,
}

impl FusionWeights {
    pub fn seeded(table: &ScaleTable, out_channels: usize, blocks_per_scale: usize, rng: &mut impl Rng) -> Result<Self> {
        table.validate()?;
        if blocks_per_scale == 0 {
            return Err(Error::invalid("fusion needs at least one block per scale"));
        }
        let ff = [0, 1, 2].map(|s| {
            let c = table.scales[s].c;
            (0..blocks_per_scale)
                .map(|_| Conv2d::seeded(3, 3 * c, c, 1, 1, rng))
                .collect()
        });
        let up = [0, 1].map(|s| {
            ConvTranspose2d::seeded(4, table.scales[s].c, table.scales[s + 1].c, 2, 1, rng)
        });
        let proj = Conv2d::seeded(1, table.scales[2].c, out_channels, 1, 0, rng);
        Ok(FusionWeights {
            ff,
            up,
            proj,
            table: *table,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.proj.cout
    }
}

/// One residual fusion step: `fg + Conv(Concat(fe, fs, fg))`, with no
/// nonlinearity after the residual add.
pub fn ff_block(fe: &FeatureVolume, fs: &FeatureVolume, fg: &FeatureVolume, conv: &Conv2d) -> Result<FeatureVolume> {
    Ok(ff_block_cached(fe, fs, fg, conv)?.0)
}

fn ff_block_cached(
    fe: &FeatureVolume,
    fs: &FeatureVolume,
    fg: &FeatureVolume,
    conv: &Conv2d,
) -> Result<(FeatureVolume, Grid)> {
    let shapes = [fe.grid.shape(), fs.grid.shape(), fg.grid.shape()];
    if shapes[0] != shapes[1] || shapes[1] != shapes[2] {
        return Err(Error::shape(
            "ff_block",
            fe.grid.shape_str(),
            format!("{} / {}", fs.grid.shape_str(), fg.grid.shape_str()),
        ));
    }
    let cat = Grid::concat_channels(&[&fe.grid, &fs.grid, &fg.grid])?;
    let conv_out = conv.forward(&cat)?;
    let out = fg.grid.add(&conv_out)?;
    Ok((
        FeatureVolume {
            grid: out,
            scale: fg.scale,
        },
        cat,
    ))
}

/// Backward through one fusion block: returns gradients for fe, fs, fg
/// and the convolution.
pub fn ff_block_backward(
    cat: &Grid,
    conv: &Conv2d,
    gout: &Grid,
) -> Result<(Grid, Grid, Grid, Conv2dGrads)> {
    let (gcat, conv_grads) = conv.backward(cat, gout)?;
    let c = conv.cout;
    let gfe = gcat.channel_slice(0, c);
    let gfs = gcat.channel_slice(c, c);
    // Residual: fg receives the block gradient directly plus its share of
    // the convolution input gradient.
    let mut gfg = gcat.channel_slice(2 * c, c);
    gfg.add_assign(gout)?;
    Ok((gfe, gfs, gfg, conv_grads))
}

/// Transposed-convolution upscale step: doubles spatial size, halves
/// channels.
pub fn upscale(volume: &FeatureVolume, weights: &ConvTranspose2d, out_scale: ScaleTag) -> Result<FeatureVolume> {
    let out = weights.forward(&volume.grid)?;
    Ok(FeatureVolume {
        grid: out,
        scale: out_scale,
    })
}

#[derive(Debug)]
pub struct MsffmCache {
    /// Concatenated inputs of every fusion block, per scale.
    pub ff_cats: [Vec<Grid>; 3],
    /// Inputs of each upscale step.
    pub up_inputs: [Grid; 2],
    /// Feature entering the final projection.
    pub pre_projection: Grid,
    /// Logistic output (needed for the squashing gradient).
    pub output: Grid,
}

/// Full fusion pass: ff(1x) -> up -> ff(2x) -> up -> ff(4x) -> 1x1
/// projection -> logistic squashing into an (M+P)-channel heatmap stack.
pub fn msffm_forward(
    fe_by_scale: &[FeatureVolume; 3],
    fs_by_scale: &[FeatureVolume; 3],
    fg_1x: &FeatureVolume,
    weights: &FusionWeights,
    n_landmarks: usize,
    n_boundaries: usize,
    sigma: f64,
) -> Result<(HeatmapStack, MsffmCache)> {
    for (i, &tag) in ScaleTag::ALL.iter().enumerate() {
        let spec = weights.table.spec(tag);
        for (name, v) in [("fe", &fe_by_scale[i]), ("fs", &fs_by_scale[i])] {
            if v.grid.shape() != (spec.h, spec.w, spec.c) {
                return Err(Error::shape(
                    "msffm_forward",
                    format!("{name} at {tag}: {}x{}x{}", spec.h, spec.w, spec.c),
                    v.grid.shape_str(),
                ));
            }
        }
    }
    let spec0 = weights.table.scales[0];
    if fg_1x.grid.shape() != (spec0.h, spec0.w, spec0.c) {
        return Err(Error::shape(
            "msffm_forward",
            format!("fg at 1x: {}x{}x{}", spec0.h, spec0.w, spec0.c),
            fg_1x.grid.shape_str(),
        ));
    }
    if n_landmarks + n_boundaries != weights.out_channels() {
        return Err(Error::shape(
            "msffm_forward",
            format!("{} output channels", weights.out_channels()),
            format!("{n_landmarks}+{n_boundaries}"),
        ));
    }

    let mut ff_cats: [Vec<Grid>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut up_inputs: [Option<Grid>; 2] = [None, None];
    let mut g = fg_1x.clone();
    for i in 0..3 {
        for conv in &weights.ff[i] {
            let (next, cat) = ff_block_cached(&fe_by_scale[i], &fs_by_scale[i], &g, conv)?;
            ff_cats[i].push(cat);
            g = next;
        }
        if i < 2 {
            up_inputs[i] = Some(g.grid.clone());
            g = upscale(&g, &weights.up[i], ScaleTag::ALL[i + 1])?;
        }
    }
    let pre_projection = g.grid.clone();
    let logits = weights.proj.forward(&g.grid)?;
    let output = nn::logistic(&logits);
    let stack = HeatmapStack::new(output.clone(), n_landmarks, n_boundaries, sigma)?;
    Ok((
        stack,
        MsffmCache {
            ff_cats,
            up_inputs: [up_inputs[0].take().unwrap(), up_inputs[1].take().unwrap()],
            pre_projection,
            output,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct FusionGrads {
    pub ff: [Vec<Conv2dGrads>; 3],
    pub up: [Conv2dGrads; 2],
    pub proj: Conv2dGrads,
}

/// Backward through the fusion module given the gradient with respect to
/// the squashed output heatmaps. Returns gradients for every fe/fs scale,
/// for fg at 1x, and for all fusion weights.
pub fn msffm_backward(
    weights: &FusionWeights,
    cache: &MsffmCache,
    gout: &Grid,
) -> Result<(Vec<Grid>, Vec<Grid>, Grid, FusionGrads)> {
    let glogits = nn::logistic_backward(&cache.output, gout);
    let (mut g, proj_grads) = weights.proj.backward(&cache.pre_projection, &glogits)?;

    let mut gfe: Vec<Option<Grid>> = vec![None, None, None];
    let mut gfs: Vec<Option<Grid>> = vec![None, None, None];
    let mut ff_grads: [Vec<Conv2dGrads>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut up_grads: [Option<Conv2dGrads>; 2] = [None, None];

    for i in (0..3).rev() {
        for (b, conv) in weights.ff[i].iter().enumerate().rev() {
            let (bfe, bfs, bfg, cg) = ff_block_backward(&cache.ff_cats[i][b], conv, &g)?;
            match &mut gfe[i] {
                Some(acc) => acc.add_assign(&bfe)?,
                slot => *slot = Some(bfe),
            }
            match &mut gfs[i] {
                Some(acc) => acc.add_assign(&bfs)?,
                slot => *slot = Some(bfs),
            }
            ff_grads[i].push(cg);
            g = bfg;
        }
        ff_grads[i].reverse();
        if i > 0 {
            let (gin, ug) = weights.up[i - 1].backward(&cache.up_inputs[i - 1], &g)?;
            up_grads[i - 1] = Some(ug);
            g = gin;
        }
    }

    Ok((
        gfe.into_iter().map(|g| g.unwrap()).collect(),
        gfs.into_iter().map(|g| g.unwrap()).collect(),
        g,
        FusionGrads {
            ff: ff_grads,
            up: [up_grads[0].take().unwrap(), up_grads[1].take().unwrap()],
            proj: proj_grads,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_volume(spec: ScaleSpec, tag: ScaleTag, rng: &mut ChaCha8Rng) -> FeatureVolume {
        let data = (0..spec.h * spec.w * spec.c)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        FeatureVolume::new(Grid::from_vec(spec.h, spec.w, spec.c, data).unwrap(), tag).unwrap()
    }

    fn volumes(table: &ScaleTable, rng: &mut ChaCha8Rng) -> ([FeatureVolume; 3], [FeatureVolume; 3], FeatureVolume) {
        let fe = [0, 1, 2].map(|i| random_volume(table.scales[i], ScaleTag::ALL[i], rng));
        let fs = [0, 1, 2].map(|i| random_volume(table.scales[i], ScaleTag::ALL[i], rng));
        let fg = random_volume(table.scales[0], ScaleTag::X1, rng);
        (fe, fs, fg)
    }

    #[test]
    fn scale_tables_validate() {
        ScaleTable::full().validate().unwrap();
        ScaleTable::quarter().validate().unwrap();
        ScaleTable::micro().validate().unwrap();
        let broken = ScaleTable {
            scales: [
                ScaleSpec { h: 8, w: 8, c: 32 },
                ScaleSpec { h: 16, w: 16, c: 32 },
                ScaleSpec { h: 32, w: 32, c: 16 },
            ],
        };
        assert!(broken.validate().is_err());
    }

    #[test]
    fn ff_block_zero_weights_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let spec = ScaleSpec { h: 4, w: 4, c: 3 };
        let (fe, fs, fg) = (
            random_volume(spec, ScaleTag::X1, &mut rng),
            random_volume(spec, ScaleTag::X1, &mut rng),
            random_volume(spec, ScaleTag::X1, &mut rng),
        );
        let conv = Conv2d::zeros(3, 9, 3, 1, 1);
        let out = ff_block(&fe, &fs, &fg, &conv).unwrap();
        assert_eq!(out.grid, fg.grid);
    }

    #[test]
    fn ff_block_bias_only_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let spec = ScaleSpec { h: 4, w: 4, c: 2 };
        let zero = FeatureVolume::new(Grid::zeros(4, 4, 2), ScaleTag::X1).unwrap();
        let fg = random_volume(spec, ScaleTag::X1, &mut rng);
        let mut conv = Conv2d::zeros(3, 6, 2, 1, 1);
        conv.bias = vec![0.5, -0.25];
        let out = ff_block(&zero, &zero, &fg, &conv).unwrap();
        for i in 0..out.grid.len() {
            let expect = fg.grid.data()[i] + conv.bias[i % 2];
            assert!((out.grid.data()[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn ff_block_matches_naive_convolution_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let spec = ScaleSpec { h: 8, w: 8, c: 3 };
        let fe = random_volume(spec, ScaleTag::X1, &mut rng);
        let fs = random_volume(spec, ScaleTag::X1, &mut rng);
        let fg = random_volume(spec, ScaleTag::X1, &mut rng);
        let conv = Conv2d::seeded(3, 9, 3, 1, 1, &mut rng);
        let out = ff_block(&fe, &fs, &fg, &conv).unwrap();
        let cat = Grid::concat_channels(&[&fe.grid, &fs.grid, &fg.grid]).unwrap();
        let conv_ref = crate::oracle::conv2d_naive(&cat, &conv.weight, &conv.bias, 3, 3, 1, 1);
        let want = fg.grid.add(&conv_ref).unwrap();
        assert!(out.grid.max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn ff_block_rejects_shape_mismatch() {
        let a = FeatureVolume::new(Grid::zeros(4, 4, 2), ScaleTag::X1).unwrap();
        let b = FeatureVolume::new(Grid::zeros(4, 4, 3), ScaleTag::X1).unwrap();
        let conv = Conv2d::zeros(3, 6, 2, 1, 1);
        assert!(ff_block(&a, &b, &a, &conv).is_err());
    }

    #[test]
    fn msffm_shapes_for_quarter_and_full_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let table = ScaleTable::quarter();
        let weights = FusionWeights::seeded(&table, 4, 1, &mut rng).unwrap();
        let (fe, fs, fg) = volumes(&table, &mut rng);
        let (out, _) = msffm_forward(&fe, &fs, &fg, &weights, 3, 1, 1.5).unwrap();
        assert_eq!(out.grid.shape(), (32, 32, 4));
        assert!(out.values_in_unit_interval());
    }

    #[test]
    fn msffm_constant_collapse_with_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let table = ScaleTable::quarter();
        let mut weights = FusionWeights::seeded(&table, 2, 1, &mut rng).unwrap();
        for scale in &mut weights.ff {
            for conv in scale {
                conv.weight.fill(0.0);
                conv.bias.fill(0.0);
            }
        }
        for up in &mut weights.up {
            up.weight.fill(0.0);
            up.bias.fill(0.0);
        }
        weights.proj.weight.fill(0.0);
        weights.proj.bias = vec![0.3, -1.2];
        let (fe, fs, fg) = volumes(&table, &mut rng);
        let (out, _) = msffm_forward(&fe, &fs, &fg, &weights, 1, 1, 1.5).unwrap();
        for (i, &v) in out.grid.data().iter().enumerate() {
            let expect = 1.0 / (1.0 + (-weights.proj.bias[i % 2]).exp());
            assert!((v - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn msffm_zero_ff_weights_reduces_to_upscale_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let table = ScaleTable::quarter();
        let mut weights = FusionWeights::seeded(&table, 2, 1, &mut rng).unwrap();
        for scale in &mut weights.ff {
            for conv in scale {
                conv.weight.fill(0.0);
                conv.bias.fill(0.0);
            }
        }
        let (fe, fs, fg) = volumes(&table, &mut rng);
        let (_, cache) = msffm_forward(&fe, &fs, &fg, &weights, 1, 1, 1.5).unwrap();
        let chain = weights.up[1]
            .forward(&weights.up[0].forward(&fg.grid).unwrap())
            .unwrap();
        assert!(cache.pre_projection.max_abs_diff(&chain) < 1e-12);
    }

    #[test]
    fn msffm_supports_multiple_blocks_per_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let table = ScaleTable::micro();
        let weights = FusionWeights::seeded(&table, 3, 2, &mut rng).unwrap();
        let (fe, fs, fg) = volumes(&table, &mut rng);
        let (out, cache) = msffm_forward(&fe, &fs, &fg, &weights, 2, 1, 1.5).unwrap();
        assert_eq!(out.grid.shape(), (16, 16, 3));
        assert_eq!(cache.ff_cats[0].len(), 2);
    }

    #[test]
    fn msffm_golden_checksum() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xF05);
        let table = ScaleTable::quarter();
        let weights = FusionWeights::seeded(&table, 4, 1, &mut rng).unwrap();
        let (fe, fs, fg) = volumes(&table, &mut rng);
        let (out, _) = msffm_forward(&fe, &fs, &fg, &weights, 3, 1, 1.5).unwrap();
        // Frozen from the first verified run of the fusion stack.
        let golden = 6382.412477012021;
        assert!(
            (out.grid.checksum() - golden).abs() < 1e-8,
            "checksum {} drifted from golden {golden}",
            out.grid.checksum()
        );
    }
}
