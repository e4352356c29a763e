use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sticker_core::alignment::AlignmentWeights;
use sticker_core::data::GeneratorConfig;
use sticker_core::encoders::EncoderConfig;
use sticker_core::fusion::FusionConfig;
use sticker_core::model::{AblationSpec, ModelConfig};
use sticker_core::trainer::TrainConfig;
use sticker_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("runs"),
        }
    }
}

/// Every setting a run depends on, one TOML table per section.
///
/// The encoder's vocabulary, patch geometry and maximum text length are
/// always taken from `data` when the model is built.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: GeneratorConfig,
    pub encoder: EncoderConfig,
    pub alignment: AlignmentWeights,
    pub fusion: FusionConfig,
    pub ablation: AblationSpec,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl RunConfig {
    /// Defaults, then the file at `path` (if any), then each `key=value`
    /// override with a dotted key such as `train.lr=1e-3`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            table = text.parse::<toml::Table>().map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: e.span().map_or(0, |s| line_of(&text, s.start)),
                msg: e.message().to_string(),
            })?;
        }
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            set_dotted(&mut table, key.trim(), parse_value(value.trim()))?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.model().validate()
    }

    pub fn model(&self) -> ModelConfig {
        let mut encoder = self.encoder.clone();
        encoder.vocab_size = self.data.vocab_size;
        encoder.patch_grid = self.data.patch_grid;
        encoder.patch_dim = self.data.patch_dim;
        encoder.max_text_len = encoder
            .max_text_len
            .max(self.data.max_dialogue_len())
            .max(self.data.comet_len);
        ModelConfig {
            encoder,
            alignment: self.alignment.clone(),
            fusion: self.fusion.clone(),
            ablation: self.ablation,
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    1 + text[..offset.min(text.len())].matches('\n').count()
}

/// Reads a TOML scalar or array; anything else is kept as a string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key {key:?}")));
    }
    let (last, sections) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for s in sections {
        let entry = cur
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{s:?} in {key:?} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_beat_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[train]\nlr = 0.01\nepochs = 2\n\n[data]\nseed = 7\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &["train.lr=0.5".into()]).unwrap();
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.data.seed, 7);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(
            RunConfig::load(None, &["train.learning_rate=1".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::load(None, &["train.lr=-1".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(RunConfig::load(None, &["lr".into()]), Err(Error::Config(_))));
    }

    #[test]
    fn file_syntax_errors_report_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        fs::write(&path, "[train]\nlr = 0.1\nepochs = = 3\n").unwrap();
        match RunConfig::load(Some(&path), &[]) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn model_follows_data_geometry() {
        let cfg = RunConfig::load(None, &["data.patch_grid=2".into(), "data.vocab_size=300".into()]).unwrap();
        let m = cfg.model();
        assert_eq!(m.encoder.patch_grid, 2);
        assert_eq!(m.encoder.vocab_size, 300);
        assert!(m.encoder.max_text_len >= cfg.data.max_dialogue_len());
    }
}
