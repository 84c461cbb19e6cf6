//! Checkpoint persistence: a native binary parameter file plus a JSON
//! sidecar carrying the specs, config echo, and fingerprint.
//!
//! The sidecar is the portable, normative artifact; the binary blob holds
//! f64 parameter values and optimizer moments for bit-exact resumption.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{
    DomainClassifier, DomainClassifierSpec, Encoder, EncoderSpec, ProjectionHead, ProjectionSpec,
};
use crate::nn::Param;

const MAGIC: &[u8; 8] = b"INVENCK1";
const FORMAT_VERSION: u32 = 1;

/// SHA-256 hex digest of a JSON value's canonical serialization (object
/// keys are emitted in sorted order, so formatting and key order in the
/// source file cannot affect the digest).
pub fn fingerprint_value(value: &serde_json::Value) -> String {
    let canonical = serde_json::to_string(value).expect("JSON value serializes");
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    hex::encode(hasher.finalize())
}

/// Everything a resumed or evaluated run needs.
#[derive(Debug, Clone)]
pub struct CheckpointBundle {
    pub encoder: Encoder,
    pub projection: Option<ProjectionHead>,
    pub classifier: Option<DomainClassifier>,
    pub epoch: usize,
    pub seed: u64,
    pub adam_step: u64,
    /// Resolved run configuration as recorded at save time.
    pub config: serde_json::Value,
    pub fingerprint: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    fingerprint: String,
    epoch: usize,
    seed: u64,
    adam_step: u64,
    encoder_spec: EncoderSpec,
    projection_spec: Option<ProjectionSpec>,
    projection_in_dim: Option<usize>,
    classifier_spec: Option<DomainClassifierSpec>,
    classifier_in_dim: Option<usize>,
    config: serde_json::Value,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

fn write_tensor(buf: &mut Vec<u8>, name: &str, p: &Param) {
    let name_bytes = name.as_bytes();
    buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(name_bytes);
    let shape = p.value.shape();
    buf.push(shape.len() as u8);
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for arr in [&p.value, &p.m, &p.v] {
        for v in arr.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct TensorBlob {
    shape: Vec<usize>,
    value: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

fn read_exact_checked(data: &[u8], pos: &mut usize, len: usize, path: &Path) -> Result<Vec<u8>> {
    if *pos + len > data.len() {
        return Err(Error::Checkpoint(format!(
            "truncated parameter file {}",
            path.display()
        )));
    }
    let out = data[*pos..*pos + len].to_vec();
    *pos += len;
    Ok(out)
}

fn read_tensors(path: &Path) -> Result<BTreeMap<String, TensorBlob>> {
    let mut data = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let magic = read_exact_checked(&data, &mut pos, 8, path)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a parameter file (bad magic)",
            path.display()
        )));
    }
    let count_bytes = read_exact_checked(&data, &mut pos, 4, path)?;
    let count = u32::from_le_bytes(count_bytes.try_into().unwrap()) as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let nlen_b = read_exact_checked(&data, &mut pos, 4, path)?;
        let nlen = u32::from_le_bytes(nlen_b.try_into().unwrap()) as usize;
        let name = String::from_utf8(read_exact_checked(&data, &mut pos, nlen, path)?)
            .map_err(|_| Error::Checkpoint("invalid tensor name encoding".into()))?;
        let ndim = read_exact_checked(&data, &mut pos, 1, path)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let db = read_exact_checked(&data, &mut pos, 8, path)?;
            shape.push(u64::from_le_bytes(db.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut arrays = Vec::with_capacity(3);
        for _ in 0..3 {
            let raw = read_exact_checked(&data, &mut pos, numel * 8, path)?;
            let vals: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push(vals);
        }
        let v = arrays.pop().unwrap();
        let m = arrays.pop().unwrap();
        let value = arrays.pop().unwrap();
        out.insert(
            name,
            TensorBlob {
                shape,
                value,
                m,
                v,
            },
        );
    }
    Ok(out)
}

fn fill_params(
    named: Vec<(String, &mut Param)>,
    tensors: &mut BTreeMap<String, TensorBlob>,
    path: &Path,
) -> Result<()> {
    for (name, param) in named {
        let blob = tensors.remove(&name).ok_or_else(|| {
            Error::Checkpoint(format!("missing tensor '{name}' in {}", path.display()))
        })?;
        if blob.shape != param.value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                blob.shape,
                param.value.shape()
            )));
        }
        param.value = ArrayD::from_shape_vec(blob.shape.clone(), blob.value).unwrap();
        param.m = ArrayD::from_shape_vec(blob.shape.clone(), blob.m).unwrap();
        param.v = ArrayD::from_shape_vec(blob.shape, blob.v).unwrap();
        param.zero_grad();
    }
    Ok(())
}

/// Serializes just an encoder's parameters (the external-backbone asset
/// format consumed by `EncoderKind::PretrainedConvnext`).
pub fn save_encoder_weights(encoder: &Encoder, path: &Path) -> Result<()> {
    let mut named = Vec::new();
    encoder.named_params(&mut named);
    write_tensor_file(path, &named)
}

/// Loads parameters saved by [`save_encoder_weights`] into `encoder`.
pub fn load_encoder_weights(encoder: &mut Encoder, path: &Path) -> Result<()> {
    let mut tensors = read_tensors(path)?;
    let mut named = Vec::new();
    encoder.named_params_mut(&mut named);
    fill_params(named, &mut tensors, path)?;
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!(
            "unexpected tensor '{extra}' in {}",
            path.display()
        )));
    }
    Ok(())
}

fn write_tensor_file(path: &Path, named: &[(String, &Param)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, p) in named {
        write_tensor(&mut buf, name, p);
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes `<path>` (binary parameters) and `<path>.json` (sidecar).
pub fn save_checkpoint(bundle: &CheckpointBundle, path: &Path) -> Result<()> {
    let mut named: Vec<(String, &Param)> = Vec::new();
    bundle.encoder.named_params(&mut named);
    if let Some(p) = &bundle.projection {
        p.named_params(&mut named);
    }
    if let Some(c) = &bundle.classifier {
        c.named_params(&mut named);
    }
    write_tensor_file(path, &named)?;

    let sidecar = Sidecar {
        format_version: FORMAT_VERSION,
        fingerprint: bundle.fingerprint.clone(),
        epoch: bundle.epoch,
        seed: bundle.seed,
        adam_step: bundle.adam_step,
        encoder_spec: bundle.encoder.spec().clone(),
        projection_spec: bundle.projection.as_ref().map(|p| p.spec().clone()),
        projection_in_dim: bundle.projection.as_ref().map(|p| p.in_dim()),
        classifier_spec: bundle.classifier.as_ref().map(|c| c.spec().clone()),
        classifier_in_dim: bundle.classifier.as_ref().map(|c| c.in_dim()),
        config: bundle.config.clone(),
    };
    let sp = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&sp, json).map_err(|e| Error::io(&sp, e))?;
    Ok(())
}

/// Loads a checkpoint pair and verifies the sidecar's fingerprint against
/// its own recorded config (any edit to a semantic field is rejected).
pub fn load_checkpoint(path: &Path) -> Result<CheckpointBundle> {
    let sp = sidecar_path(path);
    let raw = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let sidecar: Sidecar = serde_json::from_str(&raw)
        .map_err(|e| Error::Checkpoint(format!("invalid sidecar {}: {e}", sp.display())))?;
    if sidecar.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {}",
            sidecar.format_version
        )));
    }
    let recomputed = fingerprint_value(&sidecar.config);
    if recomputed != sidecar.fingerprint {
        return Err(Error::FingerprintMismatch(format!(
            "sidecar {} records fingerprint {} but its config hashes to {}; \
             refusing to resume under a changed config",
            sp.display(),
            &sidecar.fingerprint[..16.min(sidecar.fingerprint.len())],
            &recomputed[..16],
        )));
    }

    // Rebuild module skeletons from the specs, then overwrite every tensor
    // from the blob (the external backbone asset is not re-read).
    let mut encoder = Encoder::build(sidecar.encoder_spec.clone(), 0)?;
    let mut projection = match (&sidecar.projection_spec, sidecar.projection_in_dim) {
        (Some(spec), Some(in_dim)) => Some(ProjectionHead::new(in_dim, spec.clone(), 0)?),
        _ => None,
    };
    let mut classifier = match (&sidecar.classifier_spec, sidecar.classifier_in_dim) {
        (Some(spec), Some(in_dim)) => Some(DomainClassifier::new(in_dim, spec.clone(), 0)?),
        _ => None,
    };

    let mut tensors = read_tensors(path)?;
    {
        let mut named: Vec<(String, &mut Param)> = Vec::new();
        encoder.named_params_mut(&mut named);
        if let Some(p) = projection.as_mut() {
            p.named_params_mut(&mut named);
        }
        if let Some(c) = classifier.as_mut() {
            c.named_params_mut(&mut named);
        }
        fill_params(named, &mut tensors, path)?;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!(
            "unexpected tensor '{extra}' in {}",
            path.display()
        )));
    }

    Ok(CheckpointBundle {
        encoder,
        projection,
        classifier,
        epoch: sidecar.epoch,
        seed: sidecar.seed,
        adam_step: sidecar.adam_step,
        config: sidecar.config,
        fingerprint: sidecar.fingerprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DomainClassifierSpec, EncoderSpec, ProjectionSpec};

    fn sample_bundle() -> CheckpointBundle {
        let encoder = Encoder::new(EncoderSpec::default(), 9).unwrap();
        let projection = ProjectionHead::new(128, ProjectionSpec::default(), 9).unwrap();
        let classifier = DomainClassifier::new(
            64,
            DomainClassifierSpec {
                hidden_dim: 32,
                num_domains: 4,
            },
            9,
        )
        .unwrap();
        let config = serde_json::json!({"train": {"lambda": 1.0, "seed": 9}});
        let fingerprint = fingerprint_value(&config);
        CheckpointBundle {
            encoder,
            projection: Some(projection),
            classifier: Some(classifier),
            epoch: 3,
            seed: 9,
            adam_step: 120,
            config,
            fingerprint,
        }
    }

    fn bundle_checksum(b: &CheckpointBundle) -> u64 {
        let mut named = Vec::new();
        b.encoder.named_params(&mut named);
        if let Some(p) = &b.projection {
            p.named_params(&mut named);
        }
        if let Some(c) = &b.classifier {
            c.named_params(&mut named);
        }
        crate::nn::params_checksum(&named)
    }

    #[test]
    fn round_trip_restores_parameters_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let bundle = sample_bundle();
        save_checkpoint(&bundle, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(bundle_checksum(&bundle), bundle_checksum(&loaded));
        assert_eq!(loaded.epoch, 3);
        assert_eq!(loaded.adam_step, 120);
        assert_eq!(loaded.fingerprint, bundle.fingerprint);
    }

    #[test]
    fn edited_sidecar_lambda_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&sample_bundle(), &path).unwrap();
        let sp = sidecar_path(&path);
        let tampered = fs::read_to_string(&sp)
            .unwrap()
            .replace("\"lambda\": 1.0", "\"lambda\": 0.0");
        fs::write(&sp, tampered).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::FingerprintMismatch(_))
        ));
    }

    #[test]
    fn fingerprint_ignores_key_order_and_whitespace() {
        let a: serde_json::Value = serde_json::from_str(r#"{"b": 1, "a": {"y": 2, "x": 3}}"#).unwrap();
        let b: serde_json::Value =
            serde_json::from_str("{\n  \"a\": {\"x\": 3, \"y\": 2},\n  \"b\": 1\n}").unwrap();
        assert_eq!(fingerprint_value(&a), fingerprint_value(&b));
        let c: serde_json::Value = serde_json::from_str(r#"{"b": 1, "a": {"y": 2, "x": 4}}"#).unwrap();
        assert_ne!(fingerprint_value(&a), fingerprint_value(&c));
    }
}
