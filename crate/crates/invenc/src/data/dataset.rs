//! Image records, directory ingestion, and batch construction.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed::{self, stream};

/// One image with its domain label and, for synthetic data, a content label.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    /// (H, W, C) pixels in [0, 1].
    pub pixels: Array3<f64>,
    pub domain_label: usize,
    pub content_label: Option<usize>,
    pub source_path: Option<PathBuf>,
    /// Stable identifier (relative path for loaded data).
    pub id: String,
}

/// Immutable collection of records; safe to share across threads.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<ImageRecord>,
    pub num_domains: usize,
    pub domain_names: Vec<String>,
    pub num_content_classes: Option<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn domain_labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.domain_label).collect()
    }

    pub fn content_labels(&self) -> Option<Vec<usize>> {
        self.records
            .iter()
            .map(|r| r.content_label)
            .collect::<Option<Vec<_>>>()
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png") | Some("jpg") | Some("jpeg")
    )
}

fn decode_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::UnreadableImage {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((h as usize, w as usize, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[[y as usize, x as usize, ch]] = px.0[ch] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Content labels recorded by the synthetic exporter, keyed by relative path.
#[derive(serde::Deserialize)]
struct ManifestFile {
    files: Vec<ManifestEntry>,
    #[serde(default)]
    num_content_classes: Option<usize>,
}

#[derive(serde::Deserialize)]
struct ManifestEntry {
    path: String,
    #[serde(default)]
    content_label: Option<usize>,
}

/// Loads `root/<domain_name>/*.{png,jpg,jpeg}`. Domain labels follow the
/// lexicographic byte order of the subdirectory names; record order is the
/// sorted relative path order, so repeated loads are identical.
///
/// A `manifest.json` written by the synthetic exporter, when present,
/// re-attaches content labels.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut domains: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    domains.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    if domains.is_empty() {
        return Err(Error::Dataset(format!(
            "{} contains no domain subdirectories",
            root.display()
        )));
    }

    let manifest: Option<ManifestFile> = fs::read_to_string(root.join("manifest.json"))
        .ok()
        .and_then(|raw| serde_json::from_str(&raw).ok());
    let content_by_path: std::collections::HashMap<String, usize> = manifest
        .as_ref()
        .map(|m| {
            m.files
                .iter()
                .filter_map(|f| f.content_label.map(|c| (f.path.clone(), c)))
                .collect()
        })
        .unwrap_or_default();

    let mut records = Vec::new();
    let mut domain_names = Vec::new();
    for (label, dir) in domains.iter().enumerate() {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
        if files.is_empty() {
            return Err(Error::Dataset(format!(
                "domain directory {} contains no images",
                dir.display()
            )));
        }
        for file in files {
            let pixels = decode_image(&file)?;
            let rel = format!(
                "{}/{}",
                name,
                file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
            );
            records.push(ImageRecord {
                pixels,
                domain_label: label,
                content_label: content_by_path.get(&rel).copied(),
                source_path: Some(file),
                id: rel,
            });
        }
        domain_names.push(name);
    }

    let num_content_classes = manifest.and_then(|m| m.num_content_classes).filter(|_| {
        // only meaningful when every record got a content label
        records.iter().all(|r| r.content_label.is_some())
    });

    Ok(Dataset {
        num_domains: domain_names.len(),
        domain_names,
        records,
        num_content_classes,
    })
}

/// One training batch: record indices plus their labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub domain_labels: Vec<usize>,
    pub content_labels: Option<Vec<usize>>,
}

/// Epoch-seeded shuffled batches. With `drop_last`, every batch has exactly
/// `batch_size` records.
pub fn make_batches(
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
    drop_last: bool,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
    }
    if drop_last && batch_size > dataset.len() {
        return Err(Error::InvalidConfig(format!(
            "batch_size {} exceeds dataset size {} with drop_last",
            batch_size,
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = seed::rng(seed, &[stream::BATCHES]);
    order.shuffle(&mut rng);

    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        if drop_last && chunk.len() < batch_size {
            break;
        }
        let indices = chunk.to_vec();
        let domain_labels = indices.iter().map(|&i| dataset.records[i].domain_label).collect();
        let content_labels = indices
            .iter()
            .map(|&i| dataset.records[i].content_label)
            .collect::<Option<Vec<_>>>();
        batches.push(Batch {
            indices,
            domain_labels,
            content_labels,
        });
    }
    Ok(batches)
}

/// Seeded stratified split: per class, a deterministic shuffle sends
/// `holdout_fraction` of the indices to the second set.
pub fn stratified_split(
    labels: &[usize],
    holdout_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let max_label = labels.iter().copied().max().unwrap_or(0);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); max_label + 1];
    for (i, &l) in labels.iter().enumerate() {
        per_class[l].push(i);
    }
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for (class, idxs) in per_class.iter_mut().enumerate() {
        let mut rng = seed::rng(seed, &[stream::SPLIT, class as u64]);
        idxs.shuffle(&mut rng);
        let n_hold = ((idxs.len() as f64) * holdout_fraction).round() as usize;
        let n_hold = n_hold.min(idxs.len());
        holdout.extend_from_slice(&idxs[..n_hold]);
        train.extend_from_slice(&idxs[n_hold..]);
    }
    train.sort_unstable();
    holdout.sort_unstable();
    (train, holdout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic_dataset, SyntheticSpec};

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_domains: 2,
            num_content_classes: 2,
            images_per_domain: 10,
            image_size: 32,
            seed: 5,
        }
    }

    #[test]
    fn batches_respect_drop_last() {
        let ds = generate_synthetic_dataset(&SyntheticSpec {
            num_domains: 4,
            num_content_classes: 2,
            images_per_domain: 50,
            image_size: 32,
            seed: 1,
        })
        .unwrap();
        let batches = make_batches(&ds, 32, 3, true).unwrap();
        assert_eq!(batches.len(), 6);
        assert!(batches.iter().all(|b| b.indices.len() == 32));
        let keep = make_batches(&ds, 32, 3, false).unwrap();
        assert_eq!(keep.len(), 7);
        assert_eq!(keep.last().unwrap().indices.len(), 200 - 6 * 32);
    }

    #[test]
    fn batches_are_seed_deterministic() {
        let ds = generate_synthetic_dataset(&tiny_spec()).unwrap();
        let a = make_batches(&ds, 4, 11, true).unwrap();
        let b = make_batches(&ds, 4, 11, true).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.indices, y.indices);
        }
    }

    #[test]
    fn different_seeds_shuffle_differently() {
        let ds = generate_synthetic_dataset(&tiny_spec()).unwrap();
        let firsts: Vec<Vec<usize>> = (0..20)
            .map(|s| make_batches(&ds, 4, s, true).unwrap()[0].indices.clone())
            .collect();
        let distinct: std::collections::HashSet<_> = firsts.iter().collect();
        assert!(distinct.len() > 1, "all 20 seeds produced the same first batch");
    }

    #[test]
    fn oversized_batch_with_drop_last_errors() {
        let ds = generate_synthetic_dataset(&tiny_spec()).unwrap();
        assert!(make_batches(&ds, 1000, 0, true).is_err());
        assert!(make_batches(&ds, 1000, 0, false).is_ok());
    }

    #[test]
    fn stratified_split_is_balanced_and_seeded() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let (train, hold) = stratified_split(&labels, 0.2, 9);
        assert_eq!(train.len(), 80);
        assert_eq!(hold.len(), 20);
        for class in 0..4 {
            assert_eq!(hold.iter().filter(|&&i| labels[i] == class).count(), 5);
        }
        let (t2, h2) = stratified_split(&labels, 0.2, 9);
        assert_eq!(train, t2);
        assert_eq!(hold, h2);
    }
}
