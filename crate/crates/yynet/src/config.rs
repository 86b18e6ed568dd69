//! Config files: a TOML document with `[model]` and `[train]` tables whose
//! keys mirror the `ModelConfig` / `TrainConfig` field names exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use yynet_core::model::ModelConfig;
use yynet_core::optim::TrainConfig;

use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileConfig {
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_model() -> ModelConfig {
    ModelConfig::cifar10(16)
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig { model: default_model(), train: TrainConfig::default() }
    }
}

/// Resolve a preset name to a model config.
pub fn preset(name: &str) -> AppResult<ModelConfig> {
    match name {
        "cifar16" => Ok(ModelConfig::cifar10(16)),
        "cifar32" => Ok(ModelConfig::cifar10(32)),
        "cifar64" => Ok(ModelConfig::cifar10(64)),
        "imagenet" => Ok(ModelConfig::imagenet()),
        other => Err(AppError::Config(format!(
            "unknown preset '{other}' (expected cifar16, cifar32, cifar64 or imagenet)"
        ))),
    }
}

pub fn load(path: &Path) -> AppResult<FileConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AppError::Io(format!("cannot read {}: {e}", path.display())))?;
    let cfg: FileConfig = toml::from_str(&text)
        .map_err(|e| AppError::Format(format!("{}: {e}", path.display())))?;
    cfg.model.validate().map_err(AppError::from)?;
    cfg.train.validate().map_err(AppError::from)?;
    Ok(cfg)
}

pub fn save(path: &Path, cfg: &FileConfig) -> AppResult<()> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| AppError::Config(format!("cannot serialize config: {e}")))?;
    std::fs::write(path, text)
        .map_err(|e| AppError::Io(format!("cannot write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let d = std::env::temp_dir().join(format!("yynet-config-test-{}", std::process::id()));
        std::fs::create_dir_all(&d).unwrap();
        let mut cfg = FileConfig::default();
        cfg.model = ModelConfig::cifar10(32);
        cfg.model.fusion = yynet_core::blocks::FusionFormula::AMulI;
        cfg.train.epochs = 7;
        cfg.train.onecycle.pct_start = 0.25;
        let p = d.join("config.toml");
        save(&p, &cfg).unwrap();
        let back = load(&p).unwrap();
        assert_eq!(back, cfg);
        let _ = std::fs::remove_dir_all(&d);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let d = std::env::temp_dir().join(format!("yynet-config-test2-{}", std::process::id()));
        std::fs::create_dir_all(&d).unwrap();
        let p = d.join("partial.toml");
        std::fs::write(&p, "[train]\nepochs = 3\n").unwrap();
        let cfg = load(&p).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model, ModelConfig::cifar10(16));
        let _ = std::fs::remove_dir_all(&d);
    }

    #[test]
    fn invalid_rejected() {
        let d = std::env::temp_dir().join(format!("yynet-config-test3-{}", std::process::id()));
        std::fs::create_dir_all(&d).unwrap();
        let p = d.join("bad.toml");
        std::fs::write(&p, "[train]\nclip_norm = 0.0\n").unwrap();
        assert!(matches!(load(&p), Err(AppError::Config(_))));
        std::fs::write(&p, "not toml at all [").unwrap();
        assert!(matches!(load(&p), Err(AppError::Format(_))));
        let _ = std::fs::remove_dir_all(&d);
    }
}
