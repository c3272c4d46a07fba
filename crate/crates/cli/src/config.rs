//! Flat `key = value` run configuration.
//!
//! Later sources override earlier ones: defaults, then `--preset`, then
//! `--config`, then `--set` pairs and dedicated flags.

use std::path::Path;

use nodegam::layer::Mode;
use nodegam::network::{Arch, ModelConfig, Task};
use nodegam::preprocess::PreprocessConfig;
use nodegam::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
    /// Trees over all layers; split evenly across layers.
    pub total_trees: usize,
    /// `None` infers the task from the targets.
    pub task: Option<Task>,
    pub val_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            preprocess: PreprocessConfig::default(),
            total_trees: 2000,
            task: None,
            val_fraction: 0.2,
        }
    }
}

pub const KEYS: &[&str] = &[
    "mode",
    "arch",
    "num_layers",
    "total_trees",
    "depth",
    "addi_tree_dim",
    "output_dropout",
    "last_dropout",
    "colsample",
    "l2_lambda",
    "add_last_linear",
    "dim_att",
    "anneal_steps",
    "min_temperature",
    "task",
    "lr",
    "batch_size",
    "warmup_steps",
    "plateau_patience_steps",
    "plateau_decay_factor",
    "early_stop_steps",
    "checkpoint_count",
    "checkpoint_interval_steps",
    "eval_interval_steps",
    "max_train_hours",
    "max_steps",
    "seed",
    "mask_rate",
    "freeze_steps",
    "qh_nu1",
    "qh_nu2",
    "beta1",
    "beta2",
    "eps",
    "val_fraction",
    "n_quantiles",
    "quantile_noise",
    "target_smoothing",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value `{value}` for `{key}`"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "1" | "true" | "yes" => Ok(true),
        "0" | "false" | "no" => Ok(false),
        _ => Err(format!(
            "invalid value `{value}` for `{key}` (expected 0 or 1)"
        )),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        match key.trim() {
            "mode" => {
                m.mode = match v.to_ascii_lowercase().as_str() {
                    "gam" => Mode::Gam,
                    "ga2m" => Mode::Ga2m,
                    _ => return Err(format!("mode must be gam or ga2m, got `{v}`")),
                }
            }
            "arch" => {
                m.arch = match v.to_ascii_lowercase().as_str() {
                    "plain" => Arch::Plain,
                    "attention" => Arch::Attention,
                    _ => return Err(format!("arch must be plain or attention, got `{v}`")),
                }
            }
            "num_layers" => m.num_layers = parse(key, v)?,
            "total_trees" => self.total_trees = parse(key, v)?,
            "depth" => m.depth = parse(key, v)?,
            "addi_tree_dim" => m.addi_tree_dim = parse(key, v)?,
            "output_dropout" => m.output_dropout = parse(key, v)?,
            "last_dropout" => m.last_dropout = parse(key, v)?,
            "colsample" => m.colsample = parse(key, v)?,
            "l2_lambda" => m.l2_lambda = parse(key, v)?,
            "add_last_linear" => m.add_last_linear = parse_bool(key, v)?,
            "dim_att" => m.attention_dim = parse(key, v)?,
            "anneal_steps" => m.anneal_steps = parse(key, v)?,
            "min_temperature" => m.min_temperature = parse(key, v)?,
            "task" => {
                self.task = match v.to_ascii_lowercase().as_str() {
                    "auto" => None,
                    "binary" => Some(Task::Binary),
                    "regression" => Some(Task::Regression),
                    _ => {
                        return Err(format!(
                            "task must be auto, binary or regression, got `{v}`"
                        ))
                    }
                }
            }
            "lr" => t.lr = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "warmup_steps" => t.warmup_steps = parse(key, v)?,
            "plateau_patience_steps" => t.plateau_patience_steps = parse(key, v)?,
            "plateau_decay_factor" => t.plateau_decay_factor = parse(key, v)?,
            "early_stop_steps" => t.early_stop_steps = parse(key, v)?,
            "checkpoint_count" => t.checkpoint_count = parse(key, v)?,
            "checkpoint_interval_steps" => t.checkpoint_interval_steps = parse(key, v)?,
            "eval_interval_steps" => t.eval_interval_steps = parse(key, v)?,
            "max_train_hours" => t.max_train_hours = parse(key, v)?,
            "max_steps" => {
                t.max_steps = if v == "none" {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            "seed" => t.seed = parse(key, v)?,
            "mask_rate" => t.mask_rate = parse(key, v)?,
            "freeze_steps" => t.freeze_steps = parse(key, v)?,
            "qh_nu1" => t.optimizer.nu1 = parse(key, v)?,
            "qh_nu2" => t.optimizer.nu2 = parse(key, v)?,
            "beta1" => t.optimizer.beta1 = parse(key, v)?,
            "beta2" => t.optimizer.beta2 = parse(key, v)?,
            "eps" => t.optimizer.eps = parse(key, v)?,
            "val_fraction" => self.val_fraction = parse(key, v)?,
            "n_quantiles" => self.preprocess.n_quantiles = parse(key, v)?,
            "quantile_noise" => self.preprocess.noise = parse(key, v)?,
            "target_smoothing" => self.preprocess.smoothing = parse(key, v)?,
            other => return Err(format!("unknown config key `{other}`")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> String {
        let m = &self.model;
        let t = &self.train;
        match key {
            "mode" => match m.mode {
                Mode::Gam => "gam".into(),
                Mode::Ga2m => "ga2m".into(),
            },
            "arch" => match m.arch {
                Arch::Plain => "plain".into(),
                Arch::Attention => "attention".into(),
            },
            "num_layers" => m.num_layers.to_string(),
            "total_trees" => self.total_trees.to_string(),
            "depth" => m.depth.to_string(),
            "addi_tree_dim" => m.addi_tree_dim.to_string(),
            "output_dropout" => m.output_dropout.to_string(),
            "last_dropout" => m.last_dropout.to_string(),
            "colsample" => m.colsample.to_string(),
            "l2_lambda" => m.l2_lambda.to_string(),
            "add_last_linear" => (m.add_last_linear as u8).to_string(),
            "dim_att" => m.attention_dim.to_string(),
            "anneal_steps" => m.anneal_steps.to_string(),
            "min_temperature" => m.min_temperature.to_string(),
            "task" => match self.task {
                None => "auto".into(),
                Some(Task::Binary) => "binary".into(),
                Some(Task::Regression) => "regression".into(),
            },
            "lr" => t.lr.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "warmup_steps" => t.warmup_steps.to_string(),
            "plateau_patience_steps" => t.plateau_patience_steps.to_string(),
            "plateau_decay_factor" => t.plateau_decay_factor.to_string(),
            "early_stop_steps" => t.early_stop_steps.to_string(),
            "checkpoint_count" => t.checkpoint_count.to_string(),
            "checkpoint_interval_steps" => t.checkpoint_interval_steps.to_string(),
            "eval_interval_steps" => t.eval_interval_steps.to_string(),
            "max_train_hours" => t.max_train_hours.to_string(),
            "max_steps" => t.max_steps.map_or("none".into(), |s| s.to_string()),
            "seed" => t.seed.to_string(),
            "mask_rate" => t.mask_rate.to_string(),
            "freeze_steps" => t.freeze_steps.to_string(),
            "qh_nu1" => t.optimizer.nu1.to_string(),
            "qh_nu2" => t.optimizer.nu2.to_string(),
            "beta1" => t.optimizer.beta1.to_string(),
            "beta2" => t.optimizer.beta2.to_string(),
            "eps" => t.optimizer.eps.to_string(),
            "val_fraction" => self.val_fraction.to_string(),
            "n_quantiles" => self.preprocess.n_quantiles.to_string(),
            "quantile_noise" => self.preprocess.noise.to_string(),
            "target_smoothing" => self.preprocess.smoothing.to_string(),
            _ => unreachable!("every key in KEYS is handled"),
        }
    }

    /// Applies a `key = value` text; `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), String> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("{origin}:{}: expected `key = value`", lineno + 1))?;
            self.set(k, v)
                .map_err(|e| format!("{origin}:{}: {e}", lineno + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Effective configuration as a config file that reproduces the run.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k)))
            .collect()
    }

    /// The model config for `num_features` inputs and `num_outputs` heads.
    pub fn model_config(
        &self,
        num_features: usize,
        num_outputs: usize,
        task: Task,
    ) -> Result<ModelConfig, String> {
        let layers = self.model.num_layers.max(1);
        if self.total_trees < layers {
            return Err(format!(
                "total_trees ({}) must be at least num_layers ({layers})",
                self.total_trees
            ));
        }
        let mut m = self.model.clone();
        m.trees_per_layer = self.total_trees / layers;
        m.num_features = num_features;
        m.num_outputs = num_outputs;
        m.task = task;
        m.validate().map_err(|e| e.to_string())?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.train.validate().map_err(|e| e.to_string())?;
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err("val_fraction must lie in (0, 1)".into());
        }
        if self.preprocess.n_quantiles < 2 {
            return Err("n_quantiles must be at least 2".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text(
            "mode = ga2m\narch = plain\ndim_att = 0\nlr = 0.0005\nmax_steps = 77\ntask = binary\n",
            "t",
        )
        .unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text(), "echo").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn defaults_follow_the_recommended_setting() {
        let c = RunConfig::default();
        assert_eq!(c.model.num_layers, 3);
        assert_eq!(c.total_trees, 2000);
        assert_eq!(c.model.depth, 4);
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.model.colsample, 0.1);
        assert_eq!(c.model.last_dropout, 0.5);
        assert_eq!(c.train.batch_size, 2048);
        assert_eq!(c.model.anneal_steps, 4000);
    }

    #[test]
    fn rejects_unknown_and_bad_values() {
        let mut c = RunConfig::default();
        assert!(c.set("colour", "red").is_err());
        assert!(c.set("depth", "deep").is_err());
        assert!(c.set("add_last_linear", "2").is_err());
        assert!(c.apply_text("depth 3", "t").is_err());
    }

    #[test]
    fn ga2m_depth_one_is_rejected() {
        let mut c = RunConfig::default();
        c.set("mode", "ga2m").unwrap();
        c.set("depth", "1").unwrap();
        assert!(c.model_config(3, 1, Task::Regression).is_err());
    }
}
