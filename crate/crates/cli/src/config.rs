use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use qgkit::corpus::SplitCounts;
use qgkit::decode::DecodeConfig;
use qgkit::exemplar_retrieval::ShotOrder;
use qgkit::promptkit::{DEFAULT_CHAT_MODEL, MAX_SHOTS};
use qgkit::trainjob::TrainHyperparams;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Endpoints {
    pub caption: Option<String>,
    pub ocr: Option<String>,
    pub embed: Option<String>,
    pub oracle: Option<String>,
    /// Full chat completions URL.
    pub chat: Option<String>,
    pub scorer: Option<String>,
}

impl Endpoints {
    fn any(&self) -> bool {
        [&self.caption, &self.ocr, &self.embed, &self.oracle, &self.chat, &self.scorer]
            .iter()
            .any(|e| e.is_some())
    }

    fn fill_from_env(&mut self) {
        let pairs = [
            (&mut self.caption, "MQG_CAPTION_URL"),
            (&mut self.ocr, "MQG_OCR_URL"),
            (&mut self.embed, "MQG_EMBED_URL"),
            (&mut self.oracle, "MQG_ORACLE_URL"),
            (&mut self.chat, "MQG_CHAT_URL"),
            (&mut self.scorer, "MQG_SCORER_URL"),
        ];
        for (slot, var) in pairs {
            if let Ok(v) = std::env::var(var) {
                if !v.trim().is_empty() {
                    *slot = Some(v);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub seed: u64,
    /// Defaults to the 3606:1204:1132 proportions of the complete examples.
    pub counts: Option<SplitCounts>,
}

/// Fixtures used in mock mode. Paths are relative to the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    pub image_fixtures: Option<PathBuf>,
    pub oracle_table: Option<PathBuf>,
    pub chat_reply: Option<String>,
    pub embed_dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub endpoints: Endpoints,
    pub decode: DecodeConfig,
    pub split: SplitConfig,
    pub shots: usize,
    pub shot_order: ShotOrder,
    pub mock_mode: bool,
    pub run_seeds: Vec<u64>,
    pub caption_candidates: usize,
    pub image_root: Option<PathBuf>,
    pub chat_model: String,
    pub train: TrainHyperparams,
    pub mock: MockConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            endpoints: Endpoints::default(),
            decode: DecodeConfig::question(),
            split: SplitConfig::default(),
            shots: 0,
            shot_order: ShotOrder::MostSimilarFirst,
            mock_mode: false,
            run_seeds: vec![0, 1, 2, 3],
            caption_candidates: 10,
            image_root: None,
            chat_model: DEFAULT_CHAT_MODEL.to_string(),
            train: TrainHyperparams::default(),
            mock: MockConfig::default(),
        }
    }
}

/// Flag values that override the file.
#[derive(Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mock: bool,
    pub shots: Option<usize>,
    pub image_root: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn parse(text: &str, is_json: bool) -> Result<Self> {
        if is_json {
            Ok(serde_json::from_str(text)?)
        } else {
            Ok(toml::from_str(text)?)
        }
    }

    /// Reads the config file (TOML, or JSON for `.json`), resolves its relative
    /// paths, then applies flags and environment variables.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                let is_json = p.extension().is_some_and(|e| e == "json");
                let mut c = Self::parse(&text, is_json)
                    .with_context(|| format!("parsing config {}", p.display()))?;
                c.resolve_paths(p.parent().unwrap_or(Path::new(".")));
                c
            }
            None => Self::default(),
        };
        config.mock_mode |= overrides.mock;
        if let Some(seed) = overrides.seed {
            config.split.seed = seed;
            config.run_seeds = vec![seed];
        }
        if let Some(shots) = overrides.shots {
            config.shots = shots;
        }
        if let Some(root) = &overrides.image_root {
            config.image_root = Some(root.clone());
        }
        if config.mock_mode {
            if config.endpoints.any() {
                bail!("mock mode cannot be combined with configured endpoints");
            }
        } else {
            config.endpoints.fill_from_env();
        }
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        join(&mut self.image_root);
        join(&mut self.mock.image_fixtures);
        join(&mut self.mock.oracle_table);
    }

    pub fn validate(&self) -> Result<()> {
        self.decode.validate()?;
        self.train.validate()?;
        if self.shots > MAX_SHOTS {
            bail!("shots must be at most {MAX_SHOTS}, got {}", self.shots);
        }
        if self.run_seeds.is_empty() {
            bail!("run_seeds must not be empty");
        }
        if self.caption_candidates == 0 {
            bail!("caption_candidates must be positive");
        }
        Ok(())
    }

    /// The endpoint a command needs outside mock mode.
    pub fn require<'a>(&'a self, endpoint: &'a Option<String>, name: &str) -> Result<&'a str> {
        endpoint
            .as_deref()
            .with_context(|| format!("no {name} endpoint configured and mock mode is off"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_partial_files() {
        let c = PipelineConfig::parse("shots = 3\n[decode]\nalpha = 0.5\n", false).unwrap();
        assert_eq!(c.shots, 3);
        assert_eq!(c.decode.alpha, 0.5);
        assert_eq!(c.decode.k, 4);
        assert_eq!(c.run_seeds, vec![0, 1, 2, 3]);
        let j = PipelineConfig::parse(r#"{"mock_mode": true, "split": {"seed": 9}}"#, true).unwrap();
        assert!(j.mock_mode);
        assert_eq!(j.split.seed, 9);
        assert!(PipelineConfig::parse("shot = 3", false).is_err());
    }

    #[test]
    fn validation() {
        let mut c = PipelineConfig::default();
        c.shots = 8;
        assert!(c.validate().is_err());
        c.shots = 7;
        c.validate().unwrap();
        c.run_seeds.clear();
        assert!(c.validate().is_err());
    }
}
