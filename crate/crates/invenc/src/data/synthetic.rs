//! Deterministic multi-domain synthetic dataset.
//!
//! Each domain owns a visual style (hue palette plus a texture pattern);
//! each image shows one of C shapes at a random position and scale. Style
//! and content are independent by construction: every domain draws the same
//! balanced content distribution.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::dataset::{Dataset, ImageRecord};
use crate::data::image_ops::hsv_to_rgb;
use crate::error::{Error, Result};
use crate::seed::{self, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_domains: usize,
    pub num_content_classes: usize,
    pub images_per_domain: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_domains: 4,
            num_content_classes: 3,
            images_per_domain: 50,
            image_size: 64,
            seed: 7,
        }
    }
}

const MAX_SHAPES: usize = 6;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains < 2 {
            return Err(Error::InvalidConfig("num_domains must be at least 2".into()));
        }
        if self.num_content_classes < 2 || self.num_content_classes > MAX_SHAPES {
            return Err(Error::InvalidConfig(format!(
                "num_content_classes must be in 2..={MAX_SHAPES}, got {}",
                self.num_content_classes
            )));
        }
        if self.images_per_domain == 0 {
            return Err(Error::InvalidConfig("images_per_domain must be at least 1".into()));
        }
        if self.image_size < 32 {
            return Err(Error::InvalidConfig(format!(
                "image_size must be at least 32, got {}",
                self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Texture {
    Flat,
    Stripes,
    Checker,
    Noise,
}

fn texture_for(domain: usize) -> Texture {
    match domain % 4 {
        0 => Texture::Flat,
        1 => Texture::Stripes,
        2 => Texture::Checker,
        _ => Texture::Noise,
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Circle,
    Triangle,
    Rectangle,
    Ring,
    Cross,
    Diamond,
}

const SHAPES: [Shape; MAX_SHAPES] = [
    Shape::Circle,
    Shape::Triangle,
    Shape::Rectangle,
    Shape::Ring,
    Shape::Cross,
    Shape::Diamond,
];

fn inside(shape: Shape, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Triangle => {
            // apex up: width grows linearly from the top vertex
            let t = (dy + r) / (2.0 * r);
            (0.0..=1.0).contains(&t) && dx.abs() <= t * r
        }
        Shape::Rectangle => dx.abs() <= 0.95 * r && dy.abs() <= 0.6 * r,
        Shape::Ring => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
        Shape::Cross => (dx.abs() <= 0.32 * r && dy.abs() <= r) || (dy.abs() <= 0.32 * r && dx.abs() <= r),
        Shape::Diamond => dx.abs() + dy.abs() <= r,
    }
}

/// Grayscale fill for content class `c`: a ladder spread over [0.05, 0.95]
/// so classes stay luminance-separable in every domain palette.
fn shape_shade(c: usize, num_classes: usize) -> f64 {
    if num_classes <= 1 {
        return 0.95;
    }
    0.05 + 0.9 * c as f64 / (num_classes - 1) as f64
}

fn render_image(spec: &SyntheticSpec, domain: usize, index: usize) -> (Array3<f64>, usize) {
    let s = spec.image_size;
    let mut rng = seed::rng(spec.seed, &[stream::SYNTH, domain as u64, index as u64]);
    let content = index % spec.num_content_classes;

    // domain palette: far-apart hues, slight per-image wobble
    let hue = domain as f64 / spec.num_domains as f64 + rng.random_range(-0.02..0.02);
    let value_wobble: f64 = rng.random_range(-0.05..0.05);
    let base = hsv_to_rgb(hue, 0.65, (0.50 + value_wobble).clamp(0.0, 1.0));
    let accent = hsv_to_rgb(hue, 0.50, (0.80 + value_wobble).clamp(0.0, 1.0));

    // shape parameters
    let cx = rng.random_range(0.32..0.68) * s as f64;
    let cy = rng.random_range(0.32..0.68) * s as f64;
    let r = rng.random_range(0.17..0.28) * s as f64;
    let shape = SHAPES[content];
    let shade = shape_shade(content, spec.num_content_classes);

    let texture = texture_for(domain);
    let cell = (s / 8).max(2);
    let mut img = Array3::<f64>::zeros((s, s, 3));
    for y in 0..s {
        for x in 0..s {
            let use_accent = match texture {
                Texture::Flat => false,
                Texture::Stripes => ((x + y) / cell) % 2 == 1,
                Texture::Checker => ((x / cell) % 2) ^ ((y / cell) % 2) == 1,
                Texture::Noise => rng.random_range(0.0..1.0) < 0.5,
            };
            let bg = if use_accent { accent } else { base };
            for ch in 0..3 {
                img[[y, x, ch]] = bg[ch];
            }
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            if inside(shape, dx, dy, r) {
                for ch in 0..3 {
                    img[[y, x, ch]] = shade;
                }
            }
        }
    }
    (img, content)
}

fn domain_name(g: usize, num_domains: usize) -> String {
    let width = num_domains.saturating_sub(1).to_string().len().max(2);
    format!("domain_{g:0width$}")
}

/// Deterministic generation: identical specs produce byte-identical pixels.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut records = Vec::with_capacity(spec.num_domains * spec.images_per_domain);
    let mut domain_names = Vec::with_capacity(spec.num_domains);
    for g in 0..spec.num_domains {
        let name = domain_name(g, spec.num_domains);
        for i in 0..spec.images_per_domain {
            let (pixels, content) = render_image(spec, g, i);
            records.push(ImageRecord {
                pixels,
                domain_label: g,
                content_label: Some(content),
                source_path: None,
                id: format!("{name}/img_{i:05}.png"),
            });
        }
        domain_names.push(name);
    }
    Ok(Dataset {
        num_domains: spec.num_domains,
        domain_names,
        records,
        num_content_classes: Some(spec.num_content_classes),
    })
}

#[derive(Serialize)]
struct ManifestOut<'a> {
    num_domains: usize,
    num_content_classes: usize,
    images_per_domain: usize,
    image_size: usize,
    seed: u64,
    files: Vec<ManifestFileOut<'a>>,
}

#[derive(Serialize)]
struct ManifestFileOut<'a> {
    path: &'a str,
    domain_label: usize,
    domain_name: &'a str,
    content_label: Option<usize>,
}

/// Writes the dataset as `dir/<domain>/<image>.png` plus `manifest.json`.
/// `dir` itself is created, but its parent must already exist.
pub fn export_dataset(dataset: &Dataset, spec: &SyntheticSpec, dir: &Path) -> Result<()> {
    if !dir.exists() {
        fs::create_dir(dir).map_err(|e| Error::io(dir, e))?;
    }
    for name in &dataset.domain_names {
        let sub = dir.join(name);
        if !sub.exists() {
            fs::create_dir(&sub).map_err(|e| Error::io(&sub, e))?;
        }
    }
    for rec in &dataset.records {
        let (h, w, _) = rec.pixels.dim();
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for (x, y, px) in img.enumerate_pixels_mut() {
            for ch in 0..3 {
                px.0[ch] = (rec.pixels[[y as usize, x as usize, ch]] * 255.0).round() as u8;
            }
        }
        let path = dir.join(&rec.id);
        img.save(&path).map_err(|e| {
            Error::io(&path, std::io::Error::other(e.to_string()))
        })?;
    }
    let manifest = ManifestOut {
        num_domains: dataset.num_domains,
        num_content_classes: spec.num_content_classes,
        images_per_domain: spec.images_per_domain,
        image_size: spec.image_size,
        seed: spec.seed,
        files: dataset
            .records
            .iter()
            .map(|r| ManifestFileOut {
                path: &r.id,
                domain_label: r.domain_label,
                domain_name: &dataset.domain_names[r.domain_label],
                content_label: r.content_label,
            })
            .collect(),
    };
    let mpath = dir.join("manifest.json");
    fs::write(
        &mpath,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_domains: 4,
            num_content_classes: 3,
            images_per_domain: 50,
            image_size: 64,
            seed: 7,
        }
    }

    #[test]
    fn counts_and_balance() {
        let ds = generate_synthetic_dataset(&desk_spec()).unwrap();
        assert_eq!(ds.len(), 200);
        assert_eq!(ds.num_domains, 4);
        for g in 0..4 {
            let in_domain: Vec<_> = ds.records.iter().filter(|r| r.domain_label == g).collect();
            assert_eq!(in_domain.len(), 50);
            // content balanced within each domain (±1)
            for c in 0..3 {
                let n = in_domain
                    .iter()
                    .filter(|r| r.content_label == Some(c))
                    .count();
                assert!((16..=17).contains(&n), "domain {g} class {c}: {n}");
            }
        }
    }

    #[test]
    fn factorial_design_is_exactly_balanced_when_divisible() {
        let ds = generate_synthetic_dataset(&SyntheticSpec {
            num_domains: 3,
            num_content_classes: 3,
            images_per_domain: 9,
            image_size: 32,
            seed: 1,
        })
        .unwrap();
        for g in 0..3 {
            for c in 0..3 {
                let n = ds
                    .records
                    .iter()
                    .filter(|r| r.domain_label == g && r.content_label == Some(c))
                    .count();
                assert_eq!(n, 3, "cell ({g},{c})");
            }
        }
    }

    #[test]
    fn generation_is_bit_deterministic() {
        let a = generate_synthetic_dataset(&desk_spec()).unwrap();
        let b = generate_synthetic_dataset(&desk_spec()).unwrap();
        for (ra, rb) in a.records.iter().zip(b.records.iter()) {
            for (p, q) in ra.pixels.iter().zip(rb.pixels.iter()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let ds = generate_synthetic_dataset(&SyntheticSpec {
            num_domains: 5,
            num_content_classes: 6,
            images_per_domain: 4,
            image_size: 32,
            seed: 3,
        })
        .unwrap();
        for r in &ds.records {
            assert!(r.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    /// The stated pixel-statistics oracle: mean-RGB nearest-centroid must
    /// separate the domains with accuracy >= 0.9.
    #[test]
    fn mean_rgb_centroid_oracle_separates_domains() {
        let ds = generate_synthetic_dataset(&desk_spec()).unwrap();
        let means: Vec<[f64; 3]> = ds
            .records
            .iter()
            .map(|r| {
                let mut m = [0.0; 3];
                let (h, w, _) = r.pixels.dim();
                for y in 0..h {
                    for x in 0..w {
                        for ch in 0..3 {
                            m[ch] += r.pixels[[y, x, ch]];
                        }
                    }
                }
                for v in &mut m {
                    *v /= (h * w) as f64;
                }
                m
            })
            .collect();
        let mut centroids = vec![[0.0f64; 3]; 4];
        let mut counts = vec![0usize; 4];
        for (m, r) in means.iter().zip(ds.records.iter()) {
            for ch in 0..3 {
                centroids[r.domain_label][ch] += m[ch];
            }
            counts[r.domain_label] += 1;
        }
        for (c, n) in centroids.iter_mut().zip(counts.iter()) {
            for v in c.iter_mut() {
                *v /= *n as f64;
            }
        }
        let correct = means
            .iter()
            .zip(ds.records.iter())
            .filter(|(m, r)| {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (g, c) in centroids.iter().enumerate() {
                    let d: f64 = (0..3).map(|ch| (m[ch] - c[ch]).powi(2)).sum();
                    if d < best_d {
                        best_d = d;
                        best = g;
                    }
                }
                best == r.domain_label
            })
            .count();
        let acc = correct as f64 / ds.len() as f64;
        assert!(acc >= 0.9, "centroid oracle accuracy {acc}");
    }

    #[test]
    fn export_layout_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("synth");
        let spec = SyntheticSpec {
            num_domains: 2,
            num_content_classes: 2,
            images_per_domain: 3,
            image_size: 32,
            seed: 2,
        };
        let ds = generate_synthetic_dataset(&spec).unwrap();
        export_dataset(&ds, &spec, &root).unwrap();
        assert!(root.join("manifest.json").is_file());
        assert!(root.join("domain_00").is_dir());
        assert!(root.join("domain_01").is_dir());

        let loaded = crate::data::load_dataset(&root).unwrap();
        assert_eq!(loaded.len(), 6);
        assert_eq!(loaded.num_domains, 2);
        assert_eq!(loaded.domain_labels(), vec![0, 0, 0, 1, 1, 1]);
        // manifest re-attaches content labels
        assert_eq!(loaded.num_content_classes, Some(2));
        for (a, b) in loaded.records.iter().zip(ds.records.iter()) {
            assert_eq!(a.content_label, b.content_label);
            // 8-bit quantization bound
            for (p, q) in a.pixels.iter().zip(b.pixels.iter()) {
                assert!((p - q).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn export_requires_existing_parent() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("missing").join("synth");
        let spec = SyntheticSpec {
            num_domains: 2,
            num_content_classes: 2,
            images_per_domain: 1,
            image_size: 32,
            seed: 2,
        };
        let ds = generate_synthetic_dataset(&spec).unwrap();
        let err = export_dataset(&ds, &spec, &root).unwrap_err();
        assert!(err.to_string().contains("missing"), "{err}");
    }
}
