//! Plain-text run configuration: UTF-8 `key=value` lines where the key's
//! dotted prefix routes to one of the four config sections
//! (`model.`, `train.`, `phantom.`, `preprocess.`).
//!
//! `#` starts a comment and blank lines are skipped, so a dumped config
//! is also a valid input config.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::TrainConfig;
use crate::model::ModelConfig;
use crate::phantom::DatasetSpec;
use crate::preprocess::PreprocessConfig;

/// Every tunable of a run, in one place.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub phantom: DatasetSpec,
    pub preprocess: PreprocessConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.phantom.validate()?;
        self.preprocess.validate()
    }

    /// Applies one dotted `key`/`value` pair to the owning section.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key.split_once('.') {
            Some(("model", rest)) => self.model.apply_kv(rest, value),
            Some(("train", rest)) => self.train.apply_kv(rest, value),
            Some(("phantom", rest)) => self.phantom.apply_kv(rest, value),
            Some(("preprocess", rest)) => self.preprocess.apply_kv(rest, value),
            _ => Err(Error::Config(format!(
                "key {key:?} has no section prefix \
                 (expected model., train., phantom., or preprocess.)"
            ))),
        }
    }

    /// Applies every assignment in a config file, in file order.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.split_once('#') {
                Some((before, _)) => before,
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key=value, got {raw:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.apply(key.trim(), value.trim()).map_err(|e| {
                Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
        }
        Ok(())
    }

    /// Dumps every field as `section.key = value` lines. The output
    /// parses back via [`Self::apply_file`], and serves as the
    /// provenance record written next to run outputs.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (section, kvs) in [
            ("model", self.model.to_kv()),
            ("train", self.train.to_kv()),
            ("phantom", self.phantom.to_kv()),
            ("preprocess", self.preprocess.to_kv()),
        ] {
            for (k, v) in kvs {
                out.push_str(&format!("{section}.{k} = {v}\n"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn dump_parses_back_to_the_same_config() {
        let mut cfg = RunConfig::default();
        cfg.model.dense_dim = 48;
        cfg.train.epochs = 12;
        cfg.phantom.count = 7;
        cfg.preprocess.shift_range = (-3, 11);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, cfg.to_text()).unwrap();

        let mut rebuilt = RunConfig::default();
        rebuilt.apply_file(&path).unwrap();
        assert_eq!(rebuilt, cfg);
    }

    #[test]
    fn comments_blanks_and_overrides_parse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        let mut f = fs::File::create(&path).unwrap();
        writeln!(f, "# a comment").unwrap();
        writeln!(f).unwrap();
        writeln!(f, "train.epochs = 3   # trailing comment").unwrap();
        writeln!(f, "model.target = ttp").unwrap();
        writeln!(f, "phantom.shape = 12,2,16,16").unwrap();
        drop(f);

        let mut cfg = RunConfig::default();
        cfg.apply_file(&path).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.target, crate::data::MapKind::Ttp);
        assert_eq!(cfg.phantom.base.shape, (12, 2, 16, 16));
    }

    #[test]
    fn bad_lines_report_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        for (content, needle) in [
            ("no_equals_here", "expected key=value"),
            ("epochs = 3", "no section prefix"),
            ("train.nope = 3", ":1:"),
            ("train.epochs = plenty", "invalid value"),
        ] {
            fs::write(&path, content).unwrap();
            let err = RunConfig::default().apply_file(&path).unwrap_err();
            assert!(err.to_string().contains(needle), "{content}: {err}");
        }

        // An apply error is not swallowed by the file-position wrapper.
        let mut cfg = RunConfig::default();
        let err = cfg.apply("model.unknown_knob", "1").unwrap_err();
        assert!(err.to_string().contains("unknown model config key"));
    }
}
