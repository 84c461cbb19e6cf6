//! Dense layer, activations, and row normalization.

use ndarray::{Array1, Axis};
use rand_chacha::ChaCha8Rng;

use super::{he_uniform, Im, Mat, Param};

/// Fully connected layer, `y = x W + b`, weights shaped (in, out).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    cache_input: Option<Mat>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Param::new(he_uniform(&[in_dim, out_dim], in_dim, rng), true),
            bias: Param::new(ndarray::ArrayD::zeros(vec![out_dim]), false),
            cache_input: None,
        }
    }

    /// All-zero weights and bias; uniform outputs regardless of input.
    pub fn new_zeroed(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Param::new(ndarray::ArrayD::zeros(vec![in_dim, out_dim]), true),
            bias: Param::new(ndarray::ArrayD::zeros(vec![out_dim]), false),
            cache_input: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn output(&self, x: &Mat) -> Mat {
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let b = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut y = x.dot(&w);
        y += &b;
        y
    }

    pub fn forward(&mut self, x: &Mat) -> Mat {
        let y = self.output(x);
        self.cache_input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Mat) -> Mat {
        let x = self
            .cache_input
            .as_ref()
            .expect("backward before forward");
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let dw = x.t().dot(dy);
        let db = dy.sum_axis(Axis(0));
        self.weight.grad += &dw.into_dyn();
        self.bias.grad += &db.into_dyn();
        dy.dot(&w.t())
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

/// ReLU on 2-D activations.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Mat>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn output(&self, x: &Mat) -> Mat {
        x.mapv(|v| v.max(0.0))
    }

    pub fn forward(&mut self, x: &Mat) -> Mat {
        let y = self.output(x);
        self.mask = Some(x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        y
    }

    pub fn backward(&self, dy: &Mat) -> Mat {
        dy * self.mask.as_ref().expect("backward before forward")
    }
}

/// ReLU on 4-D activations.
#[derive(Debug, Clone, Default)]
pub struct Relu4 {
    mask: Option<Im>,
}

impl Relu4 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn output(&self, x: &Im) -> Im {
        x.mapv(|v| v.max(0.0))
    }

    pub fn forward(&mut self, x: &Im) -> Im {
        let y = self.output(x);
        self.mask = Some(x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        y
    }

    pub fn backward(&self, dy: &Im) -> Im {
        dy * self.mask.as_ref().expect("backward before forward")
    }
}

const ZERO_ROW_EPS: f64 = 1e-12;

/// Row-wise L2 normalization. A (near-)zero row maps to the first basis
/// vector rather than NaN, with zero gradient.
#[derive(Debug, Clone, Default)]
pub struct Normalize {
    cache: Option<(Mat, Array1<f64>)>, // (unit rows, input norms; norm 0 marks fallback)
}

impl Normalize {
    pub fn new() -> Self {
        Self::default()
    }

    fn compute(&self, x: &Mat) -> (Mat, Array1<f64>) {
        let mut y = x.clone();
        let mut norms = Array1::zeros(x.nrows());
        for (i, mut row) in y.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if n < ZERO_ROW_EPS {
                row.fill(0.0);
                if row.len() > 0 {
                    row[0] = 1.0;
                }
                norms[i] = 0.0;
            } else {
                row.mapv_inplace(|v| v / n);
                norms[i] = n;
            }
        }
        (y, norms)
    }

    pub fn output(&self, x: &Mat) -> Mat {
        self.compute(x).0
    }

    pub fn forward(&mut self, x: &Mat) -> Mat {
        let (y, norms) = self.compute(x);
        self.cache = Some((y.clone(), norms));
        y
    }

    pub fn backward(&self, dy: &Mat) -> Mat {
        let (units, norms) = self.cache.as_ref().expect("backward before forward");
        let mut dx = Mat::zeros(dy.raw_dim());
        for i in 0..dy.nrows() {
            let n = norms[i];
            if n == 0.0 {
                continue; // fallback rows are constant
            }
            let u = units.row(i);
            let g = dy.row(i);
            let radial = u.dot(&g);
            let mut out = dx.row_mut(i);
            for k in 0..g.len() {
                out[k] = (g[k] - u[k] * radial) / n;
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::Rng;
    use rand::SeedableRng;

    fn fd_check_linear(rows: usize, in_dim: usize, out_dim: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = Linear::new(in_dim, out_dim, &mut rng);
        let x = Mat::from_shape_fn((rows, in_dim), |_| rng.random_range(-1.0..1.0));
        // scalar objective: sum of squares of output
        let mut l = layer.clone();
        let y = l.forward(&x);
        let dy = y.mapv(|v| 2.0 * v);
        let dx = l.backward(&dy);

        let h = 1e-6;
        let f = |layer: &Linear, x: &Mat| -> f64 { layer.output(x).mapv(|v| v * v).sum() };
        for i in 0..rows {
            for j in 0..in_dim {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (f(&layer, &xp) - f(&layer, &xm)) / (2.0 * h);
                assert!((fd - dx[[i, j]]).abs() < 1e-6, "dx ({i},{j})");
            }
        }
        // weight gradient
        let dw = l.weight.grad.clone();
        for j in 0..in_dim {
            for k in 0..out_dim {
                let mut lp = layer.clone();
                lp.weight.value[[j, k]] += h;
                let mut lm = layer.clone();
                lm.weight.value[[j, k]] -= h;
                let fd = (f(&lp, &x) - f(&lm, &x)) / (2.0 * h);
                assert!((fd - dw[[j, k]]).abs() < 1e-6, "dw ({j},{k})");
            }
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        fd_check_linear(3, 4, 2, 42);
    }

    #[test]
    fn normalize_rows_are_unit() {
        let x = arr2(&[[3.0, 4.0], [0.0, 0.0], [1e-3, 0.0]]);
        let y = Normalize::new().output(&x);
        assert!((y[[0, 0]] - 0.6).abs() < 1e-12);
        assert!((y[[0, 1]] - 0.8).abs() < 1e-12);
        // zero row falls back to first basis vector
        assert_eq!(y[[1, 0]], 1.0);
        assert_eq!(y[[1, 1]], 0.0);
        for row in y.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Mat::from_shape_fn((4, 3), |_| rng.random_range(-2.0..2.0));
        // objective: sum over rows of (u · t)^2 with fixed t
        let t = ndarray::arr1(&[0.3, -0.7, 0.5]);
        let f = |x: &Mat| -> f64 {
            Normalize::new()
                .output(x)
                .rows()
                .into_iter()
                .map(|u| {
                    let d = u.dot(&t);
                    d * d
                })
                .sum()
        };
        let mut layer = Normalize::new();
        let u = layer.forward(&x);
        let mut dy = Mat::zeros(u.raw_dim());
        for (i, row) in u.rows().into_iter().enumerate() {
            let d = row.dot(&t);
            for k in 0..t.len() {
                dy[[i, k]] = 2.0 * d * t[k];
            }
        }
        let dx = layer.backward(&dy);
        let h = 1e-6;
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (f(&xp) - f(&xm)) / (2.0 * h);
                assert!(
                    (fd - dx[[i, j]]).abs() < 1e-6,
                    "({i},{j}): fd {fd} vs {}",
                    dx[[i, j]]
                );
            }
        }
    }
}
