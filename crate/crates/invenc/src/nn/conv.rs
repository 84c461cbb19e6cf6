//! Convolution, group normalization, and pooling on (B, C, H, W) tensors.

use ndarray::{Array1, Array2, Array4, Axis};
use rand_chacha::ChaCha8Rng;

use super::{he_uniform, Im, Mat, Param};

/// 2-D convolution via im2col + GEMM. Weights shaped (Cin·K·K, Cout).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    cache: Option<ConvCache>,
}

#[derive(Debug, Clone)]
struct ConvCache {
    cols: Array2<f64>,
    in_shape: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Param::new(he_uniform(&[fan_in, out_channels], fan_in, rng), true),
            bias: Param::new(ndarray::ArrayD::zeros(vec![out_channels]), false),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Im) -> Array2<f64> {
        let (b, c, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let k = self.kernel;
        let ckk = c * k * k;
        let xs = x.as_slice().expect("input must be standard layout");
        let mut cols = Array2::<f64>::zeros((b * oh * ow, ckk));
        let cs = cols.as_slice_mut().unwrap();
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((bi * oh + oy) * ow + ox) * ckk;
                    for ci in 0..c {
                        let base = (bi * c + ci) * h * w;
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                let col = row + (ci * k + ky) * k + kx;
                                if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                    cs[col] = xs[base + iy as usize * w + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(
        &self,
        dcols: &Array2<f64>,
        in_shape: (usize, usize, usize, usize),
        out_hw: (usize, usize),
    ) -> Im {
        let (b, c, h, w) = in_shape;
        let (oh, ow) = out_hw;
        let k = self.kernel;
        let ckk = c * k * k;
        let ds = dcols.as_slice().unwrap();
        let mut dx = Im::zeros(in_shape);
        let xs = dx.as_slice_mut().unwrap();
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((bi * oh + oy) * ow + ox) * ckk;
                    for ci in 0..c {
                        let base = (bi * c + ci) * h * w;
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                    xs[base + iy as usize * w + ix as usize] +=
                                        ds[row + (ci * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn gemm_forward(&self, cols: &Array2<f64>, b: usize, oh: usize, ow: usize) -> Im {
        let w2 = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let bias = self
            .bias
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        let mut y2 = cols.dot(&w2);
        y2 += &bias;
        let y = Array4::from_shape_vec(
            (b, oh, ow, self.out_channels),
            y2.into_raw_vec_and_offset().0,
        )
        .unwrap();
        y.permuted_axes([0, 3, 1, 2]).as_standard_layout().to_owned()
    }

    pub fn output(&self, x: &Im) -> Im {
        let (b, _, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let cols = self.im2col(x);
        self.gemm_forward(&cols, b, oh, ow)
    }

    pub fn forward(&mut self, x: &Im) -> Im {
        let (b, _, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let cols = self.im2col(x);
        let y = self.gemm_forward(&cols, b, oh, ow);
        self.cache = Some(ConvCache {
            cols,
            in_shape: x.dim(),
            out_hw: (oh, ow),
        });
        y
    }

    pub fn backward(&mut self, dy: &Im) -> Im {
        let cache = self.cache.as_ref().expect("backward before forward");
        let (b, _, _, _) = cache.in_shape;
        let (oh, ow) = cache.out_hw;
        let dy2 = dy
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((b * oh * ow, self.out_channels))
            .unwrap();
        let dw = cache.cols.t().dot(&dy2);
        let db = dy2.sum_axis(Axis(0));
        self.weight.grad += &dw.into_dyn();
        self.bias.grad += &db.into_dyn();
        let w2 = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let dcols = dy2.dot(&w2.t());
        self.col2im(&dcols, cache.in_shape, cache.out_hw)
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn named_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub fn named_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Param)>,
    ) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

/// Group normalization with learnable per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: Param,
    pub beta: Param,
    groups: usize,
    eps: f64,
    cache: Option<GnCache>,
}

#[derive(Debug, Clone)]
struct GnCache {
    xhat: Im,
    inv_std: Array2<f64>, // (batch, groups)
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "groups must divide channels");
        Self {
            gamma: Param::new(ndarray::ArrayD::from_elem(vec![channels], 1.0), false),
            beta: Param::new(ndarray::ArrayD::zeros(vec![channels]), false),
            groups,
            eps: 1e-5,
            cache: None,
        }
    }

    fn normalize(&self, x: &Im) -> (Im, Array2<f64>) {
        let (b, c, h, w) = x.dim();
        let cpg = c / self.groups;
        let m = (cpg * h * w) as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array2::<f64>::zeros((b, self.groups));
        for bi in 0..b {
            for g in 0..self.groups {
                let mut slice = xhat.slice_mut(ndarray::s![bi, g * cpg..(g + 1) * cpg, .., ..]);
                let mean = slice.sum() / m;
                let var = slice.mapv(|v| (v - mean) * (v - mean)).sum() / m;
                let is = 1.0 / (var + self.eps).sqrt();
                slice.mapv_inplace(|v| (v - mean) * is);
                inv_std[[bi, g]] = is;
            }
        }
        (xhat, inv_std)
    }

    fn affine(&self, xhat: &Im) -> Im {
        let (b, c, h, w) = xhat.dim();
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut y = xhat.clone();
        for bi in 0..b {
            for ci in 0..c {
                let mut s = y.slice_mut(ndarray::s![bi, ci, .., ..]);
                let (g, be) = (gamma[ci], beta[ci]);
                s.mapv_inplace(|v| v * g + be);
                let _ = (h, w);
            }
        }
        y
    }

    pub fn output(&self, x: &Im) -> Im {
        let (xhat, _) = self.normalize(x);
        self.affine(&xhat)
    }

    pub fn forward(&mut self, x: &Im) -> Im {
        let (xhat, inv_std) = self.normalize(x);
        let y = self.affine(&xhat);
        self.cache = Some(GnCache { xhat, inv_std });
        y
    }

    pub fn backward(&mut self, dy: &Im) -> Im {
        let cache = self.cache.as_ref().expect("backward before forward");
        let (b, c, h, w) = dy.dim();
        let cpg = c / self.groups;
        let m = (cpg * h * w) as f64;
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();

        // per-channel affine gradients
        let mut dgamma = Array1::<f64>::zeros(c);
        let mut dbeta = Array1::<f64>::zeros(c);
        for ci in 0..c {
            let dy_c = dy.slice(ndarray::s![.., ci, .., ..]);
            let xh_c = cache.xhat.slice(ndarray::s![.., ci, .., ..]);
            dgamma[ci] = (&dy_c * &xh_c).sum();
            dbeta[ci] = dy_c.sum();
        }
        self.gamma.grad += &dgamma.into_dyn();
        self.beta.grad += &dbeta.into_dyn();

        let mut dx = Im::zeros(dy.raw_dim());
        for bi in 0..b {
            for g in 0..self.groups {
                let range = g * cpg..(g + 1) * cpg;
                let xh = cache.xhat.slice(ndarray::s![bi, range.clone(), .., ..]);
                let dy_g = dy.slice(ndarray::s![bi, range.clone(), .., ..]);
                // dxhat = dy * gamma (per channel)
                let mut dxhat = dy_g.to_owned();
                for (ci_local, mut plane) in dxhat.outer_iter_mut().enumerate() {
                    let gm = gamma[g * cpg + ci_local];
                    plane.mapv_inplace(|v| v * gm);
                }
                let sum_dxhat = dxhat.sum();
                let sum_dxhat_xhat = (&dxhat * &xh).sum();
                let is = cache.inv_std[[bi, g]];
                let mut out = dx.slice_mut(ndarray::s![bi, range, .., ..]);
                ndarray::Zip::from(&mut out)
                    .and(&dxhat)
                    .and(&xh)
                    .for_each(|o, &dxh, &xhv| {
                        *o = is / m * (m * dxh - sum_dxhat - xhv * sum_dxhat_xhat);
                    });
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn named_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((format!("{prefix}.gamma"), &self.gamma));
        out.push((format!("{prefix}.beta"), &self.beta));
    }

    pub fn named_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Param)>,
    ) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma));
        out.push((format!("{prefix}.beta"), &mut self.beta));
    }
}

/// 2×2 max pooling with stride 2; ties resolve to the first maximum.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    cache: Option<(Vec<u32>, (usize, usize, usize, usize))>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        Self::default()
    }

    fn pool(&self, x: &Im) -> (Im, Vec<u32>) {
        let (b, c, h, w) = x.dim();
        let (oh, ow) = (h / 2, w / 2);
        let xs = x.as_slice().unwrap();
        let mut y = Im::zeros((b, c, oh, ow));
        let ys = y.as_slice_mut().unwrap();
        let mut arg = vec![0u32; b * c * oh * ow];
        for bc in 0..b * c {
            let base = bc * h * w;
            let obase = bc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..2 {
                        for kx in 0..2 {
                            let idx = base + (oy * 2 + ky) * w + ox * 2 + kx;
                            if xs[idx] > best {
                                best = xs[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    ys[obase + oy * ow + ox] = best;
                    arg[obase + oy * ow + ox] = best_idx as u32;
                }
            }
        }
        (y, arg)
    }

    pub fn output(&self, x: &Im) -> Im {
        self.pool(x).0
    }

    pub fn forward(&mut self, x: &Im) -> Im {
        let (y, arg) = self.pool(x);
        self.cache = Some((arg, x.dim()));
        y
    }

    pub fn backward(&self, dy: &Im) -> Im {
        let (arg, in_shape) = self.cache.as_ref().expect("backward before forward");
        let mut dx = Im::zeros(*in_shape);
        let dxs = dx.as_slice_mut().unwrap();
        for (o, &src) in dy.as_slice().unwrap().iter().zip(arg.iter()) {
            dxs[src as usize] += o;
        }
        dx
    }
}

/// Spatial mean over (H, W): (B, C, H, W) → (B, C).
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    cache: Option<(usize, usize, usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn output(&self, x: &Im) -> Mat {
        let (b, c, h, w) = x.dim();
        let mut y = Mat::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                y[[bi, ci]] = x.slice(ndarray::s![bi, ci, .., ..]).sum() / (h * w) as f64;
            }
        }
        y
    }

    pub fn forward(&mut self, x: &Im) -> Mat {
        self.cache = Some(x.dim());
        self.output(x)
    }

    pub fn backward(&self, dy: &Mat) -> Im {
        let (b, c, h, w) = self.cache.expect("backward before forward");
        let scale = 1.0 / (h * w) as f64;
        let mut dx = Im::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                dx.slice_mut(ndarray::s![bi, ci, .., ..])
                    .fill(dy[[bi, ci]] * scale);
            }
        }
        dx
    }
}
