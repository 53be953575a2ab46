//! Checkpoint persistence: one array container per parameter array plus
//! a manifest carrying array names, shapes, and the full model
//! configuration. Values are stored as `f64`, so `f32` training weights
//! round-trip bit-exactly.

use std::path::Path;


use crate::data::container;
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::layers::{real, Real};
use crate::model::net::ModelParams;

const MANIFEST: &str = "checkpoint.txt";
const FORMAT: &str = "perfmap-checkpoint-v1";

/// Writes `params` and `cfg` into `dir` (created if needed).
pub fn save<F: Real>(dir: &Path, params: &ModelParams<F>, cfg: &ModelConfig) -> Result<()> {
    params.validate_shapes(cfg)?;
    params.check_finite()?;
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut manifest = format!("format={FORMAT}\n");
    for (key, value) in cfg.to_kv() {
        manifest.push_str(&format!("model.{key}={value}\n"));
    }
    for (name, array) in params.entries() {
        let dims: Vec<String> = array.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("array.{name}={}\n", dims.join("x")));
        let as_f64 = array.mapv(|v| v.to_f64().expect("finite parameter"));
        container::write_f64(&dir.join(format!("{name}.pfsn")), as_f64.view())?;
    }
    std::fs::write(dir.join(MANIFEST), manifest).map_err(Error::io(&dir.join(MANIFEST)))
}

/// Reads a checkpoint back, verifying the format marker, the array set,
/// and every shape against the stored configuration.
pub fn load<F: Real>(dir: &Path) -> Result<(ModelParams<F>, ModelConfig)> {
    let manifest_path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&manifest_path).map_err(Error::io(&manifest_path))?;
    let mut cfg = ModelConfig::default();
    let mut listed: Vec<(String, Vec<usize>)> = Vec::new();
    let mut format_seen = false;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "checkpoint manifest line {} is not key=value: {line:?}",
                lineno + 1
            ))
        })?;
        if key == "format" {
            if value != FORMAT {
                return Err(Error::Config(format!(
                    "unsupported checkpoint format {value:?}"
                )));
            }
            format_seen = true;
        } else if let Some(model_key) = key.strip_prefix("model.") {
            cfg.apply_kv(model_key, value)?;
        } else if let Some(name) = key.strip_prefix("array.") {
            let dims = value
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| {
                    Error::Config(format!("bad shape {value:?} for checkpoint array {name}"))
                })?;
            listed.push((name.to_string(), dims));
        } else {
            return Err(Error::Config(format!(
                "unknown checkpoint manifest key {key:?}"
            )));
        }
    }
    if !format_seen {
        return Err(Error::Config(
            "checkpoint manifest is missing its format marker".to_string(),
        ));
    }
    cfg.validate()?;

    let mut params = ModelParams::<F>::zeros(&cfg)?;
    let expected: Vec<&'static str> = params.entries().iter().map(|(n, _)| *n).collect();
    let listed_names: Vec<&str> = listed.iter().map(|(n, _)| n.as_str()).collect();
    if listed_names != expected {
        return Err(Error::Config(format!(
            "checkpoint/config mismatch: manifest lists arrays {listed_names:?}, \
             config implies {expected:?}"
        )));
    }
    for ((name, dims), (_, mut slot)) in listed.iter().zip(params.entries_mut()) {
        let path = dir.join(format!("{name}.pfsn"));
        let stored = container::read_f64(&path)?;
        if stored.shape() != dims.as_slice() || stored.shape() != slot.shape() {
            return Err(Error::Config(format!(
                "checkpoint/config mismatch for {name}: file shape {:?}, expected {:?}",
                stored.shape(),
                slot.shape()
            )));
        }
        slot.zip_mut_with(&stored, |dst, &v| *dst = real::<F>(v));
    }
    params.check_finite()?;
    Ok((params, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::MapKind;
    use crate::model::Variant;
    use ndarray::ArrayD;

    fn cfg() -> ModelConfig {
        let mut cfg = ModelConfig::desk(MapKind::Tmax);
        cfg.bcs_patch = (2, 2);
        cfg.bcs_hidden_channels = 2;
        cfg.bcs_embed_dim = 2;
        cfg.encoder_channels = (3, 4, 5);
        cfg.encoder_kernel_sizes = (3, 3, 3);
        cfg.spatial_channels = 3;
        cfg.dense_dim = 2;
        cfg
    }

    #[test]
    fn round_trip_is_bit_exact_for_f32_weights() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cfg();
        let params = ModelParams::<f32>::init(&cfg, 5).unwrap();
        save(dir.path(), &params, &cfg).unwrap();
        let (loaded, loaded_cfg) = load::<f32>(dir.path()).unwrap();
        assert_eq!(loaded_cfg, cfg);
        assert_eq!(loaded, params);
    }

    #[test]
    fn round_trip_preserves_ablated_layouts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cfg().with_variant(Variant::D).with_variant(Variant::C);
        let params = ModelParams::<f32>::init(&cfg, 6).unwrap();
        save(dir.path(), &params, &cfg).unwrap();
        let (loaded, loaded_cfg) = load::<f32>(dir.path()).unwrap();
        assert!(loaded.bcs1.is_none());
        assert!(loaded.spatial.is_none());
        assert_eq!(loaded, params);
        assert!(!loaded_cfg.use_bcs);
    }

    #[test]
    fn tampered_array_shape_is_a_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cfg();
        let params = ModelParams::<f32>::init(&cfg, 7).unwrap();
        save(dir.path(), &params, &cfg).unwrap();
        let bogus = ArrayD::<f64>::zeros(ndarray::IxDyn(&[7, 3]));
        container::write_f64(&dir.path().join("head.weight.pfsn"), bogus.view()).unwrap();
        let err = load::<f32>(dir.path()).unwrap_err().to_string();
        assert!(err.contains("mismatch"), "{err}");
    }

    #[test]
    fn truncated_array_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cfg();
        let params = ModelParams::<f32>::init(&cfg, 8).unwrap();
        save(dir.path(), &params, &cfg).unwrap();
        let path = dir.path().join("enc1.weight.pfsn");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        let err = load::<f32>(dir.path()).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn missing_array_and_bad_manifest_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cfg();
        let params = ModelParams::<f32>::init(&cfg, 9).unwrap();
        save(dir.path(), &params, &cfg).unwrap();
        std::fs::remove_file(dir.path().join("enc2.bias.pfsn")).unwrap();
        assert!(load::<f32>(dir.path()).is_err());

        std::fs::write(dir.path().join(MANIFEST), "model.pool_factor=2\n").unwrap();
        let err = load::<f32>(dir.path()).unwrap_err().to_string();
        assert!(err.contains("format"), "{err}");
    }

    #[test]
    fn non_finite_weights_are_refused_on_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cfg();
        let mut params = ModelParams::<f32>::init(&cfg, 10).unwrap();
        params.head.bias[0] = f32::NAN;
        assert!(save(dir.path(), &params, &cfg).is_err());

        params.head.bias[0] = 0.0;
        save(dir.path(), &params, &cfg).unwrap();
        let path = dir.path().join("head.bias.pfsn");
        let mut poisoned = container::read_f64(&path).unwrap();
        poisoned[0] = f64::INFINITY;
        container::write_f64(&path, poisoned.view()).unwrap();
        let err = load::<f32>(dir.path()).unwrap_err().to_string();
        assert!(err.contains("non-finite"), "{err}");
    }
}
