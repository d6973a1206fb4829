//! Declarative experiment configuration (TOML).

use std::path::{Path, PathBuf};

use bitlock_core::attacker::{AttackBudget, ThreatModel};
use bitlock_core::lockdown::{CentroidRule, Feasibility};
use bitlock_core::nn::{LayerSpec, ModelSpec, NoiseSpec};
use bitlock_core::planner::SynergyConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetSpec;
use crate::error::{HarnessError, Result};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub defense: DefenseConfig,
    #[serde(default)]
    pub sweeps: SweepConfig,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub bits: u8,
    /// Layer list; the desk CNN when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<LayerSpec>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { bits: 8, layers: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub hamming_distance: usize,
    pub inference_budgets: Vec<usize>,
    pub batch_size: usize,
    pub noise_std: f64,
    pub noise_samples: usize,
    /// Attack datasets drawn per budget.
    pub runs: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            hamming_distance: 100,
            inference_budgets: vec![20, 80, 160, 400, 900],
            batch_size: 16,
            noise_std: 0.0,
            noise_samples: 1,
            runs: 5,
        }
    }
}

impl AttackConfig {
    pub fn noise(&self) -> Result<NoiseSpec> {
        Ok(NoiseSpec::new(self.noise_std, self.noise_samples)?)
    }

    pub fn budgets(&self) -> Vec<AttackBudget> {
        self.inference_budgets
            .iter()
            .map(|&t| AttackBudget::new(self.hamming_distance, t, self.batch_size))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LockFeasibility {
    FullLock,
    AttackEmulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseConfig {
    /// Descending protection rates tried by the planner.
    pub alpha_grid: Vec<f64>,
    /// Locking thresholds tried by the planner; empty disables locking.
    pub eta_grid: Vec<f64>,
    /// Fixed pair used by the `protect` and `lock` stages.
    pub alpha: f64,
    pub eta: f64,
    pub trials: usize,
    pub emulations: usize,
    /// Inference budget of the attacker emulated while searching.
    pub search_inference_budget: usize,
    pub target_drop: f64,
    /// Runs per budget when scoring planner candidates.
    pub plan_runs: usize,
    pub lock_feasibility: LockFeasibility,
    pub centroid: CentroidRule,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            alpha_grid: vec![0.02, 0.01, 0.005, 0.0025],
            eta_grid: vec![0.01, 0.015, 0.02],
            alpha: 0.005,
            eta: 0.01,
            trials: 3,
            emulations: 2,
            search_inference_budget: 80,
            target_drop: 0.03,
            plan_runs: 2,
            lock_feasibility: LockFeasibility::FullLock,
            centroid: CentroidRule::ClosedForm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Attacker batch sizes crossed with the inference budgets.
    pub batch_sizes: Vec<usize>,
    pub noise_stds: Vec<f64>,
    pub noise_samples: Vec<usize>,
    /// Inference budget of every noise sweep cell.
    pub noise_inference_budget: usize,
    /// Detection group sizes compared for locking against pruning.
    pub group_sizes: Vec<usize>,
    pub clusters: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            batch_sizes: vec![4, 8, 16, 32],
            noise_stds: vec![0.005, 0.01, 0.02, 0.03],
            noise_samples: vec![1, 2, 3],
            noise_inference_budget: 160,
            group_sizes: vec![1, 4, 16, 64],
            clusters: 16,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let mut config = Self::from_toml(&text)?;
        // Relative dataset paths are taken relative to the config file.
        if let (DatasetSpec::Idx { train_images, train_labels, test_images, test_labels, .. }, Some(dir)) =
            (&mut config.dataset, path.parent())
        {
            for p in [train_images, train_labels, test_images, test_labels] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Apply `BITLOCK_*` overrides from `vars` (seed, output dir, bits, HD,
    /// runs).
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| HarnessError::Config(format!("cannot parse {key}={value}")))
        }
        for (key, value) in vars {
            match key.as_str() {
                "BITLOCK_SEED" => self.seed = parse(&key, &value)?,
                "BITLOCK_OUT_DIR" => self.output_dir = PathBuf::from(value),
                "BITLOCK_BITS" => self.model.bits = parse(&key, &value)?,
                "BITLOCK_HD" => self.attack.hamming_distance = parse(&key, &value)?,
                "BITLOCK_RUNS" => self.attack.runs = parse(&key, &value)?,
                "BITLOCK_EPOCHS" => self.training.epochs = parse(&key, &value)?,
                _ => {}
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: &str| Err(HarnessError::Config(m.into()));
        if !(2..=8).contains(&self.model.bits) {
            return cfg("model bits must lie in 2..=8");
        }
        self.dataset.validate()?;
        self.training.validate()?;
        let a = &self.attack;
        if a.inference_budgets.is_empty() || a.runs == 0 || a.batch_size == 0 {
            return cfg("attack needs budgets, runs and a batch size");
        }
        let noise = a.noise()?;
        for b in self.attack.budgets() {
            b.validate(&noise)?;
        }
        let d = &self.defense;
        if d.alpha_grid.is_empty() || d.trials == 0 || d.emulations == 0 || d.plan_runs == 0 {
            return cfg("defense needs an α grid, trials, emulations and plan runs");
        }
        if d.alpha_grid.windows(2).any(|w| w[0] < w[1]) {
            return cfg("α grid must be descending");
        }
        if d.alpha_grid.iter().chain([&d.alpha]).any(|a| !(0.0..=1.0).contains(a)) {
            return cfg("α values must lie in [0, 1]");
        }
        if d.eta_grid.iter().chain([&d.eta]).any(|e| e.is_nan() || *e <= 0.0) {
            return cfg("η values must be > 0");
        }
        let s = &self.sweeps;
        if s.batch_sizes.is_empty()
            || s.noise_stds.is_empty()
            || s.noise_samples.is_empty()
            || s.group_sizes.is_empty()
            || s.batch_sizes.contains(&0)
        {
            return cfg("sweep grids must be nonempty");
        }
        if s.group_sizes.iter().any(|g| !g.is_power_of_two() || *g > 512) || !s.clusters.is_power_of_two() {
            return cfg("group sizes and cluster count must be powers of two, groups ≤ 512");
        }
        Ok(())
    }

    /// Copy with the output directory cleared. Where a run writes its
    /// reports is not part of its identity.
    pub fn portable(&self) -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("."),
            ..self.clone()
        }
    }

    /// Hex SHA-256 of the canonical JSON form of [`Self::portable`].
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&self.portable()).expect("config serializes");
        Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let mut spec = ModelSpec::desk_cnn(self.dataset.input_shape()?, self.dataset.num_classes(), self.model.bits);
        if let Some(layers) = &self.model.layers {
            spec.layers = layers.clone();
        }
        Ok(spec)
    }

    /// Size of the attacker's sample pool: the largest batch anywhere.
    pub fn attack_pool_size(&self) -> usize {
        self.sweeps
            .batch_sizes
            .iter()
            .copied()
            .chain([self.attack.batch_size])
            .max()
            .unwrap_or(self.attack.batch_size)
    }

    pub fn search_threat(&self) -> Result<ThreatModel> {
        Ok(ThreatModel {
            budget: AttackBudget::new(
                self.attack.hamming_distance,
                self.defense.search_inference_budget,
                self.attack.batch_size,
            ),
            noise: self.attack.noise()?,
        })
    }

    pub fn synergy(&self) -> Result<SynergyConfig> {
        let threat = self.search_threat()?;
        let d = &self.defense;
        let mut config = SynergyConfig::new(threat);
        config.alpha_grid = d.alpha_grid.clone();
        config.eta_grid = if d.eta_grid.is_empty() {
            vec![None]
        } else {
            d.eta_grid.iter().map(|&e| Some(e)).collect()
        };
        config.trials = d.trials;
        config.emulations = d.emulations;
        config.eval_budgets = self.attack.budgets();
        config.eval_runs = d.plan_runs;
        config.target_drop = d.target_drop;
        config.lock_feasibility = self.feasibility()?;
        config.lock_centroid = d.centroid;
        Ok(config)
    }

    pub fn feasibility(&self) -> Result<Feasibility> {
        Ok(match self.defense.lock_feasibility {
            LockFeasibility::FullLock => Feasibility::FullLock,
            LockFeasibility::AttackEmulated => Feasibility::AttackEmulated {
                threat: self.search_threat()?,
                emulations: self.defense.emulations,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [dataset]
        kind = "synthetic"
        train = 100
        val = 50
        test = 50
    "#;

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        c.validate().unwrap();
        assert_eq!(c.attack.hamming_distance, 100);
        assert_eq!(c.attack.inference_budgets, vec![20, 80, 160, 400, 900]);
        assert_eq!(c.defense.alpha_grid, vec![0.02, 0.01, 0.005, 0.0025]);
        assert_eq!(c.model_spec().unwrap().input_shape, [1, 16, 16]);
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentConfig::from_toml("[dataset]\nkind = \"synthetic\"\ntrain = 1\nval = 1\ntest = 1\ncolour = 3").is_err());
        let mut c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        c.defense.alpha_grid = vec![0.01, 0.02];
        assert!(matches!(c.validate(), Err(HarnessError::Config(_))));
        let mut c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        c.attack.inference_budgets = vec![2];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        c.dataset = DatasetSpec::Idx {
            train_images: "/nonexistent/a".into(),
            train_labels: "/nonexistent/b".into(),
            test_images: "/nonexistent/c".into(),
            test_labels: "/nonexistent/d".into(),
            val: 10,
            seed: 0,
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn env_overrides_change_the_hash() {
        let mut c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let before = c.hash();
        c.apply_env([("BITLOCK_SEED".to_owned(), "9".to_owned()), ("PATH".to_owned(), "/bin".to_owned())])
            .unwrap();
        assert_eq!(c.seed, 9);
        assert_ne!(c.hash(), before);
        let seeded = c.hash();
        c.apply_env([("BITLOCK_OUT_DIR".to_owned(), "/tmp/elsewhere".to_owned())]).unwrap();
        assert_eq!(c.output_dir, PathBuf::from("/tmp/elsewhere"));
        assert_eq!(c.hash(), seeded);
        assert!(c.apply_env([("BITLOCK_BITS".to_owned(), "x".to_owned())]).is_err());
    }
}
