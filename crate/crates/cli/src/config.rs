//! TOML run configuration. Every section and field is optional.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use stepreward::corpus::DEFAULT_PROMPT_TEMPLATE;
use stepreward::dataset::SplitMap;
use stepreward::eval::SelectionScore;
use stepreward::reward::{CompilerRewardMap, TrainConfig};
use stepreward::rl::{RlConfig, WarmStart};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub corpus: CorpusSection,
    pub dataset: DatasetSection,
    pub augment: AugmentSection,
    pub reward: TrainConfig,
    pub compiler: CompilerRewardMap,
    pub rl: RlConfig,
    pub warm_start: WarmStart,
    pub toy: ToySection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub prompt_template: String,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub max_edits_per_line: usize,
    pub wall_time_ms: u64,
    pub split_map: SplitMap,
    /// Majority class capped at this multiple of the minority class.
    pub max_class_ratio: Option<f64>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { max_edits_per_line: 3, wall_time_ms: 2000, split_map: SplitMap::default(), max_class_ratio: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub wall_time_ms: u64,
    pub max_new_tests: usize,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self { wall_time_ms: 2000, max_new_tests: 5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySection {
    pub max_length: usize,
}

impl Default for ToySection {
    fn default() -> Self {
        Self { max_length: 64 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Samples per problem for pass@k.
    pub n: usize,
    pub ks: Vec<usize>,
    pub best_of: usize,
    pub rejection_trials: usize,
    pub selection: SelectionScore,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { n: 200, ks: vec![1, 10, 100], best_of: 4, rejection_trials: 104, selection: SelectionScore::Sum }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Propagates the global seed into every seeded component.
    pub fn apply_seed(&mut self, seed: u64) {
        self.reward.seed = seed;
        self.rl.seed = seed;
        self.warm_start.seed = seed;
        if let SplitMap::Hashed { seed: s, .. } = &mut self.dataset.split_map {
            *s = seed;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_fills_defaults() {
        let c: Config = toml::from_str("[rl]\nsteps = 7\n[eval]\nn = 8\n").unwrap();
        assert_eq!(c.rl.steps, 7);
        assert_eq!(c.rl.samples_per_task, RlConfig::default().samples_per_task);
        assert_eq!(c.eval.n, 8);
        assert_eq!(c.eval.best_of, 4);
    }

    #[test]
    fn unknown_field_rejected() {
        assert!(toml::from_str::<Config>("[rl]\nstepz = 7\n").is_err());
    }

    #[test]
    fn seed_reaches_every_section() {
        let mut c = Config::default();
        c.apply_seed(9);
        assert_eq!((c.reward.seed, c.rl.seed, c.warm_start.seed), (9, 9, 9));
        assert!(matches!(c.dataset.split_map, SplitMap::Hashed { seed: 9, .. }));
    }
}
