//! Hand-written differentiable kernels on [`Grid`]s: convolution,
//! transposed convolution, average pooling, fully connected layers and
//! pointwise activations, each with an explicit backward pass.
//!
//! All kernels are plain `f64` loops. Forward convolutions parallelize
//! over output rows once the work is large enough; every output element
//! is written by exactly one worker, so results do not depend on the
//! worker count.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Work threshold (multiply-adds) below which kernels stay single-threaded.
const PAR_THRESHOLD: usize = 1 << 21;

/// 2-D convolution, weight layout `[ky][kx][cin][cout]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn zeros(k: usize, cin: usize, cout: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            weight: vec![0.0; k * k * cin * cout],
            bias: vec![0.0; cout],
            k,
            cin,
            cout,
            stride,
            pad,
        }
    }

    /// Random weights and small random biases. Nonzero bias keeps the
    /// pre-activations of near-zero inputs (heatmap tails) away from the
    /// ReLU kink, where finite differences are undefined.
    pub fn seeded(k: usize, cin: usize, cout: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let mut layer = Self::zeros(k, cin, cout, stride, pad);
        let fan_in = (k * k * cin) as f64;
        let fan_out = (k * k * cout) as f64;
        let a = (6.0 / (fan_in + fan_out)).sqrt();
        for w in &mut layer.weight {
            *w = rng.random_range(-a..a);
        }
        for b in &mut layer.bias {
            *b = rng.random_range(-0.1..0.1);
        }
        layer
    }

    #[inline]
    fn widx(&self, ky: usize, kx: usize, ci: usize, co: usize) -> usize {
        ((ky * self.k + kx) * self.cin + ci) * self.cout + co
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Grid) -> Result<Grid> {
        if x.c() != self.cin {
            return Err(Error::shape("Conv2d::forward", format!("{} input channels", self.cin), x.shape_str()));
        }
        let (oh, ow) = self.out_size(x.h(), x.w());
        let mut out = Grid::zeros(oh, ow, self.cout);
        let row_cost = ow * self.cout * self.k * self.k * self.cin;
        let (k, stride, pad, cin, cout) = (self.k, self.stride, self.pad, self.cin, self.cout);
        let run_row = |oy: usize, row: &mut [f64]| {
            for ox in 0..ow {
                let base = ox * cout;
                row[base..base + cout].copy_from_slice(&self.bias);
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= x.h() {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix as usize >= x.w() {
                            continue;
                        }
                        let xoff = x.idx(iy as usize, ix as usize, 0);
                        let xs = &x.data()[xoff..xoff + cin];
                        let woff = (ky * k + kx) * cin * cout;
                        for (ci, &xv) in xs.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let ws = &self.weight[woff + ci * cout..woff + (ci + 1) * cout];
                            for (co, &wv) in ws.iter().enumerate() {
                                row[base + co] += xv * wv;
                            }
                        }
                    }
                }
            }
        };
        if oh * row_cost >= PAR_THRESHOLD {
            out.data_mut()
                .par_chunks_mut(ow * cout)
                .enumerate()
                .for_each(|(oy, row)| run_row(oy, row));
        } else {
            for (oy, row) in out.data_mut().chunks_mut(ow * cout).enumerate() {
                run_row(oy, row);
            }
        }
        Ok(out)
    }

    /// Gradients with respect to input, weight and bias.
    pub fn backward(&self, x: &Grid, gout: &Grid) -> Result<(Grid, Conv2dGrads)> {
        let (oh, ow) = self.out_size(x.h(), x.w());
        if gout.shape() != (oh, ow, self.cout) {
            return Err(Error::shape(
                "Conv2d::backward",
                format!("{oh}x{ow}x{}", self.cout),
                gout.shape_str(),
            ));
        }
        let mut gx = Grid::zeros(x.h(), x.w(), self.cin);
        let mut gw = vec![0.0; self.weight.len()];
        let mut gb = vec![0.0; self.cout];
        for oy in 0..oh {
            for ox in 0..ow {
                let goff = gout.idx(oy, ox, 0);
                let gs = &gout.data()[goff..goff + self.cout];
                for (co, &gv) in gs.iter().enumerate() {
                    gb[co] += gv;
                }
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy as usize >= x.h() {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix as usize >= x.w() {
                            continue;
                        }
                        let xoff = x.idx(iy as usize, ix as usize, 0);
                        for ci in 0..self.cin {
                            let xv = x.data()[xoff + ci];
                            let wbase = self.widx(ky, kx, ci, 0);
                            let mut acc = 0.0;
                            for (co, &gv) in gs.iter().enumerate() {
                                gw[wbase + co] += xv * gv;
                                acc += self.weight[wbase + co] * gv;
                            }
                            gx.data_mut()[xoff + ci] += acc;
                        }
                    }
                }
            }
        }
        Ok((gx, Conv2dGrads { weight: gw, bias: gb }))
    }
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Transposed 2-D convolution (fractionally strided), weight layout
/// `[ky][kx][cin][cout]`. With kernel 4, stride 2, padding 1 it exactly
/// doubles the spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn zeros(k: usize, cin: usize, cout: usize, stride: usize, pad: usize) -> Self {
        ConvTranspose2d {
            weight: vec![0.0; k * k * cin * cout],
            bias: vec![0.0; cout],
            k,
            cin,
            cout,
            stride,
            pad,
        }
    }

    pub fn seeded(k: usize, cin: usize, cout: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let mut layer = Self::zeros(k, cin, cout, stride, pad);
        let fan_in = (k * k * cin) as f64;
        let fan_out = (k * k * cout) as f64;
        let a = (6.0 / (fan_in + fan_out)).sqrt();
        for w in &mut layer.weight {
            *w = rng.random_range(-a..a);
        }
        for b in &mut layer.bias {
            *b = rng.random_range(-0.1..0.1);
        }
        layer
    }

    #[inline]
    fn widx(&self, ky: usize, kx: usize, ci: usize, co: usize) -> usize {
        ((ky * self.k + kx) * self.cin + ci) * self.cout + co
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - 1) * self.stride + self.k - 2 * self.pad,
            (w - 1) * self.stride + self.k - 2 * self.pad,
        )
    }

    pub fn forward(&self, x: &Grid) -> Result<Grid> {
        if x.c() != self.cin {
            return Err(Error::shape(
                "ConvTranspose2d::forward",
                format!("{} input channels", self.cin),
                x.shape_str(),
            ));
        }
        let (oh, ow) = self.out_size(x.h(), x.w());
        let mut out = Grid::zeros(oh, ow, self.cout);
        let (k, stride, pad, cin, cout) = (self.k, self.stride, self.pad, self.cin, self.cout);
        let run_row = |oy: usize, row: &mut [f64]| {
            for ox in 0..ow {
                let base = ox * cout;
                row[base..base + cout].copy_from_slice(&self.bias);
                // Output position oy receives input iy where
                // oy = iy*stride - pad + ky  =>  iy = (oy + pad - ky) / stride.
                for ky in 0..k {
                    let ny = oy as isize + pad as isize - ky as isize;
                    if ny < 0 || ny % stride as isize != 0 {
                        continue;
                    }
                    let iy = (ny / stride as isize) as usize;
                    if iy >= x.h() {
                        continue;
                    }
                    for kx in 0..k {
                        let nx = ox as isize + pad as isize - kx as isize;
                        if nx < 0 || nx % stride as isize != 0 {
                            continue;
                        }
                        let ix = (nx / stride as isize) as usize;
                        if ix >= x.w() {
                            continue;
                        }
                        let xoff = x.idx(iy, ix, 0);
                        let woff = (ky * k + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = x.data()[xoff + ci];
                            if xv == 0.0 {
                                continue;
                            }
                            let ws = &self.weight[woff + ci * cout..woff + (ci + 1) * cout];
                            for (co, &wv) in ws.iter().enumerate() {
                                row[base + co] += xv * wv;
                            }
                        }
                    }
                }
            }
        };
        let row_cost = ow * cout * k * k * cin / (stride * stride);
        if oh * row_cost >= PAR_THRESHOLD {
            out.data_mut()
                .par_chunks_mut(ow * cout)
                .enumerate()
                .for_each(|(oy, row)| run_row(oy, row));
        } else {
            for (oy, row) in out.data_mut().chunks_mut(ow * cout).enumerate() {
                run_row(oy, row);
            }
        }
        Ok(out)
    }

    pub fn backward(&self, x: &Grid, gout: &Grid) -> Result<(Grid, Conv2dGrads)> {
        let (oh, ow) = self.out_size(x.h(), x.w());
        if gout.shape() != (oh, ow, self.cout) {
            return Err(Error::shape(
                "ConvTranspose2d::backward",
                format!("{oh}x{ow}x{}", self.cout),
                gout.shape_str(),
            ));
        }
        let mut gx = Grid::zeros(x.h(), x.w(), self.cin);
        let mut gw = vec![0.0; self.weight.len()];
        let mut gb = vec![0.0; self.cout];
        for (i, &gv) in gout.data().iter().enumerate() {
            gb[i % self.cout] += gv;
        }
        // Iterate the forward scatter: input (iy,ix) contributes to output
        // (iy*stride - pad + ky, ix*stride - pad + kx).
        for iy in 0..x.h() {
            for ix in 0..x.w() {
                let xoff = x.idx(iy, ix, 0);
                for ky in 0..self.k {
                    let oy = (iy * self.stride + ky) as isize - self.pad as isize;
                    if oy < 0 || oy as usize >= oh {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ox = (ix * self.stride + kx) as isize - self.pad as isize;
                        if ox < 0 || ox as usize >= ow {
                            continue;
                        }
                        let goff = gout.idx(oy as usize, ox as usize, 0);
                        let gs = &gout.data()[goff..goff + self.cout];
                        for ci in 0..self.cin {
                            let xv = x.data()[xoff + ci];
                            let wbase = self.widx(ky, kx, ci, 0);
                            let mut acc = 0.0;
                            for (co, &gv) in gs.iter().enumerate() {
                                gw[wbase + co] += xv * gv;
                                acc += self.weight[wbase + co] * gv;
                            }
                            gx.data_mut()[xoff + ci] += acc;
                        }
                    }
                }
            }
        }
        Ok((gx, Conv2dGrads { weight: gw, bias: gb }))
    }
}

/// Fully connected layer, weight layout `[in][out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Linear {
            weight: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
            n_in,
            n_out,
        }
    }

    pub fn seeded(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let mut layer = Self::zeros(n_in, n_out);
        let a = (6.0 / (n_in + n_out) as f64).sqrt();
        for w in &mut layer.weight {
            *w = rng.random_range(-a..a);
        }
        layer
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_in {
            return Err(Error::shape("Linear::forward", format!("{}", self.n_in), format!("{}", x.len())));
        }
        let mut y = self.bias.clone();
        for (i, &xv) in x.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let ws = &self.weight[i * self.n_out..(i + 1) * self.n_out];
            for (o, &wv) in ws.iter().enumerate() {
                y[o] += xv * wv;
            }
        }
        Ok(y)
    }

    pub fn backward(&self, x: &[f64], gout: &[f64]) -> (Vec<f64>, LinearGrads) {
        let mut gx = vec![0.0; self.n_in];
        let mut gw = vec![0.0; self.weight.len()];
        for (i, &xv) in x.iter().enumerate() {
            let ws = &self.weight[i * self.n_out..(i + 1) * self.n_out];
            let mut acc = 0.0;
            for (o, &gv) in gout.iter().enumerate() {
                gw[i * self.n_out + o] = xv * gv;
                acc += ws[o] * gv;
            }
            gx[i] = acc;
        }
        (
            gx,
            LinearGrads {
                weight: gw,
                bias: gout.to_vec(),
            },
        )
    }
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Non-overlapping k x k average pooling. Height and width must divide k.
pub fn avg_pool(x: &Grid, k: usize) -> Result<Grid> {
    if k == 0 || !x.h().is_multiple_of(k) || !x.w().is_multiple_of(k) {
        return Err(Error::shape(
            "avg_pool",
            format!("spatial size divisible by {k}"),
            x.shape_str(),
        ));
    }
    let (oh, ow, c) = (x.h() / k, x.w() / k, x.c());
    let mut out = Grid::zeros(oh, ow, c);
    let norm = 1.0 / (k * k) as f64;
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut acc = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        acc += x.at(oy * k + dy, ox * k + dx, ch);
                    }
                }
                *out.at_mut(oy, ox, ch) = acc * norm;
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_backward(gout: &Grid, k: usize) -> Grid {
    let mut gx = Grid::zeros(gout.h() * k, gout.w() * k, gout.c());
    let norm = 1.0 / (k * k) as f64;
    for oy in 0..gout.h() {
        for ox in 0..gout.w() {
            for ch in 0..gout.c() {
                let g = gout.at(oy, ox, ch) * norm;
                for dy in 0..k {
                    for dx in 0..k {
                        *gx.at_mut(oy * k + dy, ox * k + dx, ch) = g;
                    }
                }
            }
        }
    }
    gx
}

pub fn relu(x: &Grid) -> Grid {
    x.map(|v| v.max(0.0))
}

/// Gradient of relu given the pre-activation input.
pub fn relu_backward(x: &Grid, gout: &Grid) -> Grid {
    debug_assert_eq!(x.shape(), gout.shape());
    let data = x
        .data()
        .iter()
        .zip(gout.data())
        .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
        .collect();
    Grid::from_vec(x.h(), x.w(), x.c(), data).expect("same shape")
}

pub fn relu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn relu_vec_backward(x: &[f64], gout: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(gout)
        .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
        .collect()
}

pub fn logistic(x: &Grid) -> Grid {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Gradient of the logistic squashing given its output `y`.
pub fn logistic_backward(y: &Grid, gout: &Grid) -> Grid {
    debug_assert_eq!(y.shape(), gout.shape());
    let data = y
        .data()
        .iter()
        .zip(gout.data())
        .map(|(&yv, &gv)| gv * yv * (1.0 - yv))
        .collect();
    Grid::from_vec(y.h(), y.w(), y.c(), data).expect("same shape")
}

/// Per-channel affine `y = scale[c] * x + shift[c]`, the batch-norm
/// stand-in used inside the feature extractors.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAffine {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl ChannelAffine {
    pub fn identity(c: usize) -> Self {
        ChannelAffine {
            scale: vec![1.0; c],
            shift: vec![0.0; c],
        }
    }

    pub fn forward(&self, x: &Grid) -> Grid {
        let c = self.scale.len();
        debug_assert_eq!(x.c(), c);
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| self.scale[i % c] * v + self.shift[i % c])
            .collect();
        Grid::from_vec(x.h(), x.w(), x.c(), data).expect("same shape")
    }

    pub fn backward(&self, x: &Grid, gout: &Grid) -> (Grid, ChannelAffineGrads) {
        let c = self.scale.len();
        let mut gscale = vec![0.0; c];
        let mut gshift = vec![0.0; c];
        let mut gx = vec![0.0; x.len()];
        for (i, (&xv, &gv)) in x.data().iter().zip(gout.data()).enumerate() {
            let ch = i % c;
            gscale[ch] += gv * xv;
            gshift[ch] += gv;
            gx[i] = gv * self.scale[ch];
        }
        (
            Grid::from_vec(x.h(), x.w(), x.c(), gx).expect("same shape"),
            ChannelAffineGrads {
                scale: gscale,
                shift: gshift,
            },
        )
    }
}

#[derive(Debug, Clone)]
pub struct ChannelAffineGrads {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_grid(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Grid {
        let data = (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Grid::from_vec(h, w, c, data).unwrap()
    }

    #[test]
    fn conv_matches_dense_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &stride in &[1usize, 2] {
            let conv = Conv2d::seeded(3, 3, 4, stride, 1, &mut rng);
            let x = random_grid(6, 6, 3, &mut rng);
            let got = conv.forward(&x).unwrap();
            let want = oracle::conv2d_naive(&x, &conv.weight, &conv.bias, 3, 4, stride, 1);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-10);
        }
    }

    #[test]
    fn conv_stride2_halves_even_sizes() {
        let conv = Conv2d::zeros(3, 2, 5, 2, 1);
        assert_eq!(conv.out_size(8, 12), (4, 6));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let conv = Conv2d::zeros(3, 2, 2, 1, 1);
        assert!(conv.forward(&Grid::zeros(4, 4, 3)).is_err());
    }

    #[test]
    fn transposed_conv_ones_kernel_spreads_single_value() {
        let mut up = ConvTranspose2d::zeros(4, 1, 1, 2, 1);
        up.weight.fill(1.0);
        let x = Grid::from_vec(1, 1, 1, vec![3.5]).unwrap();
        let y = up.forward(&x).unwrap();
        assert_eq!(y.shape(), (2, 2, 1));
        for &v in y.data() {
            assert!((v - 3.5).abs() < 1e-15);
        }
    }

    #[test]
    fn transposed_conv_doubles_spatial_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let up = ConvTranspose2d::seeded(4, 3, 2, 2, 1, &mut rng);
        let x = random_grid(5, 7, 3, &mut rng);
        let y = up.forward(&x).unwrap();
        assert_eq!(y.shape(), (10, 14, 2));
    }

    #[test]
    fn transposed_conv_zero_input_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut up = ConvTranspose2d::seeded(4, 2, 3, 2, 1, &mut rng);
        up.bias = vec![0.25, -1.0, 2.0];
        let y = up.forward(&Grid::zeros(3, 3, 2)).unwrap();
        for i in 0..y.len() {
            assert_eq!(y.data()[i], up.bias[i % 3]);
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_strided_conv() {
        // <conv_t(x), y> == <x, conv(y)> when both use the same kernel and
        // zero bias; this pins the index arithmetic of both kernels.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut up = ConvTranspose2d::seeded(4, 2, 3, 2, 1, &mut rng);
        up.bias.fill(0.0);
        let mut down = Conv2d::zeros(4, 3, 2, 2, 1);
        // conv weight [ky][kx][cin=3][cout=2] mirrors up weight [ky][kx][2][3].
        for ky in 0..4 {
            for kx in 0..4 {
                for a in 0..2 {
                    for b in 0..3 {
                        down.weight[((ky * 4 + kx) * 3 + b) * 2 + a] =
                            up.weight[((ky * 4 + kx) * 2 + a) * 3 + b];
                    }
                }
            }
        }
        let x = random_grid(4, 4, 2, &mut rng);
        let y = random_grid(8, 8, 3, &mut rng);
        let up_x = up.forward(&x).unwrap();
        let down_y = down.forward(&y).unwrap();
        let lhs: f64 = up_x.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(down_y.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn avg_pool_and_backward_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_grid(6, 4, 2, &mut rng);
        let y = avg_pool(&x, 2).unwrap();
        assert_eq!(y.shape(), (3, 2, 2));
        assert!(
            (y.at(0, 0, 0) - (x.at(0, 0, 0) + x.at(0, 1, 0) + x.at(1, 0, 0) + x.at(1, 1, 0)) / 4.0).abs() < 1e-12
        );
        let gx = avg_pool_backward(&y, 2);
        assert_eq!(gx.shape(), x.shape());
        assert!(avg_pool(&x, 5).is_err());
    }

    #[test]
    fn linear_forward_matches_manual() {
        let layer = Linear {
            weight: vec![1.0, 2.0, 3.0, 4.0],
            bias: vec![0.5, -0.5],
            n_in: 2,
            n_out: 2,
        };
        let y = layer.forward(&[1.0, -1.0]).unwrap();
        assert_eq!(y, vec![1.0 - 3.0 + 0.5, 2.0 - 4.0 - 0.5]);
    }
}
