//! Encoder backbone, projection head, and domain classifier.

pub mod checkpoint;

use std::path::PathBuf;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    Conv2d, GlobalAvgPool, GroupNorm, Im, Linear, Mat, MaxPool2, Normalize, Param, Relu, Relu4,
};
use crate::seed::{self, stream};

/// Smallest accepted input height/width.
pub const MIN_INPUT_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    SmallCnn,
    PretrainedConvnext,
}

/// Backbone selection. `small_cnn` is self-contained; `pretrained_convnext`
/// loads an externally converted weights file in the native format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub feature_dim: usize,
    pub frozen: bool,
    pub weights_path: Option<PathBuf>,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            kind: EncoderKind::SmallCnn,
            feature_dim: 128,
            frozen: false,
            weights_path: None,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 8 || self.feature_dim % 8 != 0 {
            return Err(Error::InvalidConfig(format!(
                "feature_dim must be a positive multiple of 8, got {}",
                self.feature_dim
            )));
        }
        if self.kind == EncoderKind::PretrainedConvnext && self.weights_path.is_none() {
            return Err(Error::InvalidConfig(
                "pretrained_convnext requires an explicit weights_path".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionSpec {
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub normalize: bool,
}

impl Default for ProjectionSpec {
    fn default() -> Self {
        Self {
            hidden_dim: 256,
            output_dim: 64,
            normalize: true,
        }
    }
}

impl ProjectionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.output_dim < 2 {
            return Err(Error::InvalidConfig(format!(
                "projection output_dim must be at least 2, got {}",
                self.output_dim
            )));
        }
        if self.hidden_dim == 0 {
            return Err(Error::InvalidConfig("projection hidden_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainClassifierSpec {
    pub hidden_dim: usize,
    pub num_domains: usize,
}

impl Default for DomainClassifierSpec {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            num_domains: 2,
        }
    }
}

impl DomainClassifierSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_domains must be at least 2, got {}",
                self.num_domains
            )));
        }
        if self.hidden_dim == 0 {
            return Err(Error::InvalidConfig("classifier hidden_dim must be positive".into()));
        }
        Ok(())
    }
}

fn norm_groups(channels: usize) -> usize {
    if channels % 4 == 0 {
        4
    } else if channels % 2 == 0 {
        2
    } else {
        1
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv2d,
    norm: GroupNorm,
    act: Relu4,
    pool: MaxPool2,
}

impl ConvBlock {
    fn new(cin: usize, cout: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, 3, 1, 1, rng),
            norm: GroupNorm::new(cout, norm_groups(cout)),
            act: Relu4::new(),
            pool: MaxPool2::new(),
        }
    }

    fn output(&self, x: &Im) -> Im {
        self.pool.output(&self.act.output(&self.norm.output(&self.conv.output(x))))
    }

    fn forward(&mut self, x: &Im) -> Im {
        let y = self.conv.forward(x);
        let y = self.norm.forward(&y);
        let y = self.act.forward(&y);
        self.pool.forward(&y)
    }

    fn backward(&mut self, dy: &Im) -> Im {
        let d = self.pool.backward(dy);
        let d = self.act.backward(&d);
        let d = self.norm.backward(&d);
        self.conv.backward(&d)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.conv.params_mut();
        v.extend(self.norm.params_mut());
        v
    }

    fn named_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.conv.named_params(&format!("{prefix}.conv"), out);
        self.norm.named_params(&format!("{prefix}.norm"), out);
    }

    fn named_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.conv.named_params_mut(&format!("{prefix}.conv"), out);
        self.norm.named_params_mut(&format!("{prefix}.norm"), out);
    }
}

/// Four conv-norm-activation-pool blocks followed by global average
/// pooling; fully convolutional, so any input of at least 32×32 works.
#[derive(Debug, Clone)]
pub struct Encoder {
    spec: EncoderSpec,
    blocks: Vec<ConvBlock>,
    gap: GlobalAvgPool,
}

impl Encoder {
    pub fn new(spec: EncoderSpec, seed: u64) -> Result<Self> {
        let mut enc = Self::build(spec, seed)?;
        if enc.spec.kind == EncoderKind::PretrainedConvnext {
            let path = enc.spec.weights_path.clone().expect("validated by build");
            checkpoint::load_encoder_weights(&mut enc, &path)?;
        }
        Ok(enc)
    }

    /// Skeleton with seeded random parameters and no external asset read;
    /// checkpoint loading overwrites every tensor afterwards.
    pub(crate) fn build(spec: EncoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let f = spec.feature_dim;
        let widths = [f / 8, f / 4, f / 2, f];
        let mut rng = seed::rng(seed, &[stream::MODEL, 1]);
        let mut blocks = Vec::with_capacity(4);
        let mut cin = 3;
        for &cout in &widths {
            blocks.push(ConvBlock::new(cin, cout, &mut rng));
            cin = cout;
        }
        Ok(Self {
            spec,
            blocks,
            gap: GlobalAvgPool::new(),
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn is_frozen(&self) -> bool {
        self.spec.frozen
    }

    fn check_input(&self, x: &Im) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
        }
        if h < MIN_INPUT_SIZE || w < MIN_INPUT_SIZE {
            return Err(Error::ImageTooSmall {
                height: h,
                width: w,
                min: MIN_INPUT_SIZE,
            });
        }
        Ok(())
    }

    /// Inference pass: (B, 3, H, W) in [0,1] → (B, feature_dim).
    pub fn encode(&self, x: &Im) -> Result<Mat> {
        self.check_input(x)?;
        let mut y = x.clone();
        for b in &self.blocks {
            y = b.output(&y);
        }
        Ok(self.gap.output(&y))
    }

    /// Training pass with cached activations.
    pub fn forward(&mut self, x: &Im) -> Result<Mat> {
        self.check_input(x)?;
        let mut y = x.clone();
        for b in &mut self.blocks {
            y = b.forward(&y);
        }
        Ok(self.gap.forward(&y))
    }

    /// Accumulates parameter gradients; the input gradient is discarded.
    pub fn backward(&mut self, dfeatures: &Mat) {
        let mut d = self.gap.backward(dfeatures);
        for b in self.blocks.iter_mut().rev() {
            d = b.backward(&d);
        }
    }

    /// Trainable parameters; empty when the encoder is frozen.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        if self.spec.frozen {
            return Vec::new();
        }
        let mut v = Vec::new();
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v
    }

    pub fn named_params<'a>(&'a self, out: &mut Vec<(String, &'a Param)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.named_params(&format!("encoder.block{i}"), out);
        }
    }

    pub fn named_params_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Param)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.named_params_mut(&format!("encoder.block{i}"), out);
        }
    }

    pub fn checksum(&self) -> u64 {
        let mut named = Vec::new();
        self.named_params(&mut named);
        crate::nn::params_checksum(&named)
    }
}

/// Two-layer MLP mapping backbone features to the unit-norm embedding z.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    spec: ProjectionSpec,
    in_dim: usize,
    l1: Linear,
    act: Relu,
    l2: Linear,
    norm: Normalize,
}

impl ProjectionHead {
    pub fn new(in_dim: usize, spec: ProjectionSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seed::rng(seed, &[stream::MODEL, 2]);
        Ok(Self {
            l1: Linear::new(in_dim, spec.hidden_dim, &mut rng),
            act: Relu::new(),
            l2: Linear::new(spec.hidden_dim, spec.output_dim, &mut rng),
            norm: Normalize::new(),
            in_dim,
            spec,
        })
    }

    pub fn spec(&self) -> &ProjectionSpec {
        &self.spec
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    /// Inference pass: rows are unit length when `normalize` is set.
    pub fn project(&self, features: &Mat) -> Result<Mat> {
        if features.ncols() != self.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "projection expects {} input features, got {}",
                self.in_dim,
                features.ncols()
            )));
        }
        let y = self.l2.output(&self.act.output(&self.l1.output(features)));
        Ok(if self.spec.normalize { self.norm.output(&y) } else { y })
    }

    pub fn forward(&mut self, features: &Mat) -> Result<Mat> {
        if features.ncols() != self.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "projection expects {} input features, got {}",
                self.in_dim,
                features.ncols()
            )));
        }
        let y = self.l1.forward(features);
        let y = self.act.forward(&y);
        let y = self.l2.forward(&y);
        Ok(if self.spec.normalize { self.norm.forward(&y) } else { y })
    }

    pub fn backward(&mut self, dz: &Mat) -> Mat {
        let d = if self.spec.normalize { self.norm.backward(dz) } else { dz.clone() };
        let d = self.l2.backward(&d);
        let d = self.act.backward(&d);
        self.l1.backward(&d)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.l1.params_mut();
        v.extend(self.l2.params_mut());
        v
    }

    pub fn named_params<'a>(&'a self, out: &mut Vec<(String, &'a Param)>) {
        self.l1.named_params("projection.l1", out);
        self.l2.named_params("projection.l2", out);
    }

    pub fn named_params_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Param)>) {
        self.l1.named_params_mut("projection.l1", out);
        self.l2.named_params_mut("projection.l2", out);
    }
}

/// Two-layer domain classifier head. The final layer starts at zero so an
/// untrained head emits uniform logits.
#[derive(Debug, Clone)]
pub struct DomainClassifier {
    spec: DomainClassifierSpec,
    in_dim: usize,
    l1: Linear,
    act: Relu,
    l2: Linear,
}

impl DomainClassifier {
    pub fn new(in_dim: usize, spec: DomainClassifierSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seed::rng(seed, &[stream::MODEL, 3]);
        Ok(Self {
            l1: Linear::new(in_dim, spec.hidden_dim, &mut rng),
            act: Relu::new(),
            l2: Linear::new_zeroed(spec.hidden_dim, spec.num_domains),
            in_dim,
            spec,
        })
    }

    pub fn spec(&self) -> &DomainClassifierSpec {
        &self.spec
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn num_domains(&self) -> usize {
        self.spec.num_domains
    }

    fn check_input(&self, z: &Mat) -> Result<()> {
        if z.ncols() != self.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "domain classifier expects {} input dims, got {}",
                self.in_dim,
                z.ncols()
            )));
        }
        Ok(())
    }

    /// Inference logits: (B, d) → (B, G).
    pub fn logits(&self, z: &Mat) -> Result<Mat> {
        self.check_input(z)?;
        Ok(self.l2.output(&self.act.output(&self.l1.output(z))))
    }

    pub fn forward(&mut self, z: &Mat) -> Result<Mat> {
        self.check_input(z)?;
        let y = self.l1.forward(z);
        let y = self.act.forward(&y);
        Ok(self.l2.forward(&y))
    }

    pub fn backward(&mut self, dlogits: &Mat) -> Mat {
        let d = self.l2.backward(dlogits);
        let d = self.act.backward(&d);
        self.l1.backward(&d)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.l1.params_mut();
        v.extend(self.l2.params_mut());
        v
    }

    pub fn named_params<'a>(&'a self, out: &mut Vec<(String, &'a Param)>) {
        self.l1.named_params("classifier.l1", out);
        self.l2.named_params("classifier.l2", out);
    }

    pub fn named_params_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Param)>) {
        self.l1.named_params_mut("classifier.l1", out);
        self.l2.named_params_mut("classifier.l2", out);
    }

    /// Hard predictions (argmax; ties resolve to the lowest index).
    pub fn predict(&self, z: &Mat) -> Result<Vec<usize>> {
        let logits = self.logits(z)?;
        Ok(argmax_rows(&logits))
    }
}

/// Row-wise argmax with first-wins tie-breaking.
pub fn argmax_rows(m: &Mat) -> Vec<usize> {
    m.axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (i, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Where the domain classifier (and evaluation embeddings) attach.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttachPoint {
    BackboneFeatures,
    ProjectionOutput,
}

impl std::fmt::Display for AttachPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttachPoint::BackboneFeatures => write!(f, "backbone_features"),
            AttachPoint::ProjectionOutput => write!(f, "projection_output"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{domain_loss, DomainLabels};

    fn unit_batch(b: usize, h: usize, w: usize) -> Im {
        Im::from_shape_fn((b, 3, h, w), |(bi, c, y, x)| {
            ((bi + c + y + x) % 7) as f64 / 7.0
        })
    }

    #[test]
    fn encode_shape_and_finiteness() {
        let enc = Encoder::new(
            EncoderSpec {
                frozen: false,
                ..Default::default()
            },
            42,
        )
        .unwrap();
        let x = unit_batch(4, 64, 64);
        let f = enc.encode(&x).unwrap();
        assert_eq!(f.dim(), (4, 128));
        assert!(f.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn frozen_encoder_is_bit_deterministic() {
        let enc = Encoder::new(
            EncoderSpec {
                frozen: true,
                ..Default::default()
            },
            7,
        )
        .unwrap();
        let x = unit_batch(2, 64, 64);
        let a = enc.encode(&x).unwrap();
        let b = enc.encode(&x).unwrap();
        for (p, q) in a.iter().zip(b.iter()) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
    }

    #[test]
    fn too_small_image_is_rejected() {
        let enc = Encoder::new(EncoderSpec::default(), 1).unwrap();
        let x = unit_batch(1, 16, 64);
        assert!(matches!(
            enc.encode(&x),
            Err(Error::ImageTooSmall { height: 16, .. })
        ));
    }

    #[test]
    fn full_scale_input_accepted_by_pretrained_kind() {
        // Round-trip a converted weights file, then run a 640x360 frame.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backbone.weights");
        let donor = Encoder::new(EncoderSpec::default(), 3).unwrap();
        checkpoint::save_encoder_weights(&donor, &path).unwrap();

        let enc = Encoder::new(
            EncoderSpec {
                kind: EncoderKind::PretrainedConvnext,
                feature_dim: 128,
                frozen: true,
                weights_path: Some(path),
            },
            0,
        )
        .unwrap();
        let x = unit_batch(1, 360, 640);
        let f = enc.encode(&x).unwrap();
        assert_eq!(f.dim(), (1, 128));
        assert!(f.iter().all(|v| v.is_finite()));
        assert_eq!(enc.checksum(), donor.checksum());
    }

    #[test]
    fn pretrained_kind_requires_weights_path() {
        let spec = EncoderSpec {
            kind: EncoderKind::PretrainedConvnext,
            weights_path: None,
            ..Default::default()
        };
        assert!(Encoder::new(spec, 0).is_err());
    }

    #[test]
    fn projection_rows_are_unit() {
        let head = ProjectionHead::new(16, ProjectionSpec::default(), 5).unwrap();
        let x = Mat::from_shape_fn((6, 16), |(i, j)| (i as f64 - j as f64) / 10.0);
        let z = head.project(&x).unwrap();
        assert_eq!(z.dim(), (6, 64));
        for row in z.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn projection_zero_input_gives_basis_vector() {
        let mut head = ProjectionHead::new(8, ProjectionSpec::default(), 5).unwrap();
        // zero the biases so a zero feature vector maps to the zero vector
        head.l1.bias.value.fill(0.0);
        head.l2.bias.value.fill(0.0);
        let x = Mat::zeros((1, 8));
        let z = head.project(&x).unwrap();
        assert_eq!(z[[0, 0]], 1.0);
        assert!(z.row(0).iter().skip(1).all(|&v| v == 0.0));
    }

    #[test]
    fn projection_empty_batch() {
        let head = ProjectionHead::new(8, ProjectionSpec::default(), 5).unwrap();
        let z = head.project(&Mat::zeros((0, 8))).unwrap();
        assert_eq!(z.dim(), (0, 64));
    }

    #[test]
    fn classifier_shape_and_untrained_chance_loss() {
        let spec = DomainClassifierSpec {
            hidden_dim: 128,
            num_domains: 10,
        };
        let clf = DomainClassifier::new(64, spec, 11).unwrap();
        let z = Mat::from_shape_fn((4, 64), |(i, j)| ((i * 31 + j) % 13) as f64 / 13.0);
        let logits = clf.logits(&z).unwrap();
        assert_eq!(logits.dim(), (4, 10));
        let labels = DomainLabels::new(vec![0, 1, 2, 3], 10).unwrap();
        let l = domain_loss(&logits, &labels).unwrap();
        assert!((l - 10.0f64.ln()).abs() < 0.2, "got {l}");
    }

    #[test]
    fn classifier_rejects_dim_mismatch() {
        let clf = DomainClassifier::new(64, DomainClassifierSpec::default(), 1).unwrap();
        let z = Mat::zeros((2, 32));
        assert!(matches!(clf.logits(&z), Err(Error::ShapeMismatch(_))));
    }

    /// Gradient routing through the GRL: with coefficient c, the projection
    /// parameter gradients of the domain loss must equal -c times the
    /// identity-wired gradients (checked against float64 finite differences).
    #[test]
    fn grl_routes_projection_gradients() {
        use crate::losses::{domain_loss_grad, GradientReversal};

        let in_dim = 6;
        let proj_spec = ProjectionSpec {
            hidden_dim: 5,
            output_dim: 4,
            normalize: true,
        };
        let clf_spec = DomainClassifierSpec {
            hidden_dim: 5,
            num_domains: 3,
        };
        let feats = Mat::from_shape_fn((4, in_dim), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.3);
        let labels = DomainLabels::new(vec![0, 1, 2, 1], 3).unwrap();

        let compute_loss = |proj: &ProjectionHead, clf: &DomainClassifier| -> f64 {
            let z = proj.project(&feats).unwrap();
            let logits = clf.logits(&z).unwrap();
            domain_loss(&logits, &labels).unwrap()
        };

        for &coeff in &[0.5f64, 1.0] {
            let mut proj = ProjectionHead::new(in_dim, proj_spec.clone(), 21).unwrap();
            let mut clf = DomainClassifier::new(4, clf_spec.clone(), 22).unwrap();
            // non-degenerate final layer so gradients reach the projection
            let mut rng = crate::seed::rng(33, &[9]);
            for v in clf.l2.weight.value.iter_mut() {
                use rand::Rng;
                *v = rng.random_range(-0.5..0.5);
            }

            // analytic pass through the GRL
            let z = proj.forward(&feats).unwrap();
            let grl = GradientReversal::new(coeff);
            let zr = grl.forward(&z);
            let logits = clf.forward(&zr).unwrap();
            let (_, dlogits) = domain_loss_grad(&logits, &labels).unwrap();
            let dzr = clf.backward(&dlogits);
            let dz = grl.backward(&dzr);
            proj.backward(&dz);

            // finite differences of the identity-wired loss wrt projection params
            let h = 1e-5;
            let grad_l1w = proj.l1.weight.grad.clone();
            for (j, k) in [(0usize, 0usize), (2, 3), (5, 1), (1, 4)] {
                let mut pp = proj.clone();
                pp.l1.weight.value[[j, k]] += h;
                let mut pm = proj.clone();
                pm.l1.weight.value[[j, k]] -= h;
                let fd = (compute_loss(&pp, &clf) - compute_loss(&pm, &clf)) / (2.0 * h);
                let want = -coeff * fd;
                let denom = want.abs().max(1e-8);
                assert!(
                    (grad_l1w[[j, k]] - want).abs() / denom < 1e-3,
                    "coeff {coeff} ({j},{k}): {} vs {want}",
                    grad_l1w[[j, k]]
                );
            }
        }
    }
}
