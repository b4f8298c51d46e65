use std::path::Path;

use deepnorm::data::{TaskKind, TaskSpec};
use deepnorm::init::InitFamily;
use deepnorm::layers::NormOrder;
use deepnorm::model::ModelConfig;
use deepnorm::train::{GridSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Diagnostic knobs shared by `init-stats` and `bound-check`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisOptions {
    /// Minimum source tokens in the probe batch.
    pub probe_tokens: usize,
    /// Allowed excess of sigma over 1.0 for `init-stats --assert-bound`.
    pub sigma_tolerance: f64,
    /// Monte-Carlo draws per bound-check row.
    pub bound_samples: usize,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            probe_tokens: 256,
            sigma_tolerance: 0.1,
            bound_samples: 100_000,
        }
    }
}

/// Everything a command can be configured with. File values override these
/// defaults and command-line flags override the file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskSpec,
    pub analysis: AnalysisOptions,
    pub grid: GridSpec,
}

/// Flags that may override config values. `None` leaves the value alone.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub order: Option<NormOrder>,
    pub init: Option<InitFamily>,
    pub enc: Option<usize>,
    pub dec: Option<usize>,
    pub d_model: Option<usize>,
    pub heads: Option<usize>,
    pub task: Option<TaskKind>,
}

impl CliConfig {
    pub fn from_json(text: &str) -> Result<Self, Failure> {
        serde_json::from_str(text).map_err(|e| Failure::Config(format!("config file: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        match path {
            None => Ok(CliConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_json(&text)
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        let m = &mut self.model;
        set(&mut self.train.seed, o.seed);
        set(&mut m.norm_order, o.order);
        set(&mut m.init_family, o.init);
        set(&mut m.enc_layers, o.enc);
        set(&mut m.dec_layers, o.dec);
        set(&mut m.d_model, o.d_model);
        set(&mut m.n_heads, o.heads);
        set(&mut self.task.kind, o.task);
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.model.validate()?;
        self.train.validate()?;
        self.task.validate(self.model.max_seq_len)?;
        if self.task.vocab_size > self.model.vocab_size {
            return Err(Failure::Config(format!(
                "task.vocab_size {} exceeds model.vocab_size {}",
                self.task.vocab_size, self.model.vocab_size
            )));
        }
        if self.analysis.probe_tokens == 0 {
            return Err(Failure::Config("analysis.probe_tokens must be >= 1".into()));
        }
        if !(self.analysis.sigma_tolerance >= 0.0) {
            return Err(Failure::Config("analysis.sigma_tolerance must be >= 0".into()));
        }
        if self.analysis.bound_samples < 1000 {
            return Err(Failure::Config("analysis.bound_samples must be >= 1000".into()));
        }
        Ok(())
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beats_defaults() {
        let mut cfg = CliConfig::from_json(r#"{"model": {"enc_layers": 3, "d_model": 32}, "train": {"seed": 9}}"#).unwrap();
        assert_eq!(cfg.model.dec_layers, 6);
        cfg.apply(&Overrides {
            enc: Some(5),
            ..Overrides::default()
        });
        assert_eq!((cfg.model.enc_layers, cfg.model.d_model, cfg.train.seed), (5, 32, 9));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(CliConfig::from_json(r#"{"modle": {}}"#).is_err());
        assert!(CliConfig::from_json(r#"{"model": {"layers": 2}}"#).is_err());
    }
}
