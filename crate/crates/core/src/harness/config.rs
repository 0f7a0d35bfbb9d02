use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::KdConfig;
use crate::error::{Error, Result};
use crate::slimming::SlimConfig;

/// Experiment configuration. Every stage has its own section; omitted keys
/// fall back to the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub data: DataConfig,
    pub slim: SlimConfig,
    pub prune: PruneConfig,
    pub branch: BranchConfig,
    pub detector: DetectorConfig,
    pub kd: KdConfig,
    /// Any of `+P`, `+P+R`, `+P+R+KD`.
    pub variants: Vec<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            backbone: BackboneConfig::default(),
            data: DataConfig::default(),
            slim: SlimConfig::default(),
            prune: PruneConfig::default(),
            branch: BranchConfig::default(),
            detector: DetectorConfig::default(),
            kd: KdConfig::default(),
            variants: ["+P", "+P+R", "+P+R+KD"].map(String::from).to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub width: usize,
    pub groups: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { width: 8, groups: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub image_size: usize,
    pub classification_images: usize,
    pub classification_eval: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub max_objects: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            classification_images: 384,
            classification_eval: 96,
            train_scenes: 512,
            eval_scenes: 128,
            max_objects: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub rate: f64,
    /// Unify residual-group masks; off keeps group outputs unpruned.
    pub matching: bool,
    pub protected: Vec<String>,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            rate: 0.4,
            matching: true,
            protected: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BranchConfig {
    pub rate: f64,
    /// `all` or `extras`.
    pub scope: String,
    /// (reduce, output) widths of each extras stage.
    pub extras: Vec<(usize, usize)>,
    /// (reduce, output) widths of the ResBlock in each branch.
    pub resblock: (usize, usize),
    /// Anchor (w, h) per cell for each branch: the last backbone group,
    /// then each extras stage.
    pub anchor_sizes: Vec<Vec<(f64, f64)>>,
    pub match_threshold: f64,
}

impl Default for BranchConfig {
    fn default() -> Self {
        Self {
            rate: 0.4,
            scope: "all".into(),
            extras: vec![(32, 64)],
            resblock: (16, 64),
            anchor_sizes: vec![vec![(0.3, 0.3), (0.42, 0.42)], vec![(0.5, 0.5), (0.7, 0.7)]],
            match_threshold: 0.5,
        }
    }
}

/// Detector training. Epoch counts are the reference schedule; the run
/// uses `round(epochs·epoch_scale)` and scales the milestones and the
/// distillation μ step the same way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub epoch_scale: f64,
    /// Teacher epochs relative to the student's.
    pub teacher_epoch_factor: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            lr0: 0.004,
            epochs: 240,
            milestones: vec![160, 200],
            decay: 0.1,
            epoch_scale: 1.0,
            teacher_epoch_factor: 1.0,
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl DetectorConfig {
    pub fn scaled(&self, epochs: usize) -> usize {
        (epochs as f64 * self.epoch_scale).round() as usize
    }

    pub fn run_epochs(&self) -> usize {
        self.scaled(self.epochs).max(1)
    }

    pub fn run_milestones(&self) -> Vec<usize> {
        self.milestones.iter().map(|&m| self.scaled(m)).collect()
    }

    /// Step decay at the scaled milestones.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.run_milestones().iter().filter(|&&m| epoch >= m).count();
        self.lr0 * self.decay.powi(passed as i32)
    }
}

pub const VARIANTS: [&str; 3] = ["+P", "+P+R", "+P+R+KD"];

/// Directory name of a variant's artifacts.
pub fn variant_dir(variant: &str) -> String {
    match variant {
        "+P" => "p".into(),
        "+P+R" => "p_r".into(),
        "+P+R+KD" => "p_r_kd".into(),
        other => other.trim_start_matches('+').replace('+', "_").to_lowercase(),
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::parse(line, "config", e.message().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn check(&self) -> Result<()> {
        self.slim.check()?;
        self.kd.check()?;
        if !(0.0..1.0).contains(&self.prune.rate) {
            return Err(Error::invalid("prune.rate must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.branch.rate) {
            return Err(Error::invalid("branch.rate must be in [0, 1)"));
        }
        if !matches!(self.branch.scope.as_str(), "all" | "extras") {
            return Err(Error::invalid("branch.scope must be `all` or `extras`"));
        }
        if self.branch.anchor_sizes.len() != self.branch.extras.len() + 1 {
            return Err(Error::invalid(
                "branch.anchor_sizes needs one entry for the backbone feature plus one per extras stage",
            ));
        }
        for v in &self.variants {
            if !VARIANTS.contains(&v.as_str()) {
                return Err(Error::invalid(format!("unknown variant `{v}`")));
            }
        }
        if self.detector.batch_size < 2 || self.slim.batch_size < 2 {
            return Err(Error::invalid("batch sizes must be at least 2"));
        }
        Ok(())
    }

    /// Small, fast configuration for smoke runs and tests.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.data = DataConfig {
            image_size: 32,
            classification_images: 192,
            classification_eval: 48,
            train_scenes: 256,
            eval_scenes: 384,
            max_objects: 2,
        };
        c.slim.epoch_max = 30;
        c.slim.batch_size = 16;
        c.slim.input_hw = (32, 32);
        c.detector.lr0 = 0.02;
        c.detector.epoch_scale = 0.2;
        c.detector.batch_size = 16;
        c.detector.teacher_epoch_factor = 2.0;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_hyperparameters() {
        let c = PipelineConfig::default();
        assert_eq!(c.slim.lambda, 1e-4);
        assert_eq!(c.slim.lr0, 0.1);
        assert_eq!(c.detector.lr0, 0.004);
        assert_eq!(c.kd.alpha, 1.0);
        assert_eq!(c.kd.beta, 1.0);
        assert_eq!(c.kd.nu, 0.5);
        assert_eq!(c.kd.margin, 1.5);
        assert_eq!(c.kd.mu0, 0.9);
    }

    #[test]
    fn toml_round_trip_and_partial_sections() {
        let c = PipelineConfig::desk();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = PipelineConfig::from_toml("seed = 3\n[slim]\nlambda = 0.01\n").unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.slim.lambda, 0.01);
        assert_eq!(partial.slim.epoch_max, 120);
    }

    #[test]
    fn unknown_key_reports_line() {
        match PipelineConfig::from_toml("seed = 1\n\n[slim]\nlamda = 0.1\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn scaled_schedule() {
        let d = DetectorConfig {
            epoch_scale: 0.1,
            ..DetectorConfig::default()
        };
        assert_eq!(d.run_epochs(), 24);
        assert_eq!(d.run_milestones(), vec![16, 20]);
        assert_eq!(d.lr_at(15), 0.004);
        assert!((d.lr_at(16) - 0.0004).abs() < 1e-15);
        assert!((d.lr_at(23) - 0.00004).abs() < 1e-15);
    }
}
