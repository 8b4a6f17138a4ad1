//! Experiment configuration files (TOML).

use crate::attacks::{AttackConfig, AttackKind};
use crate::error::{Error, Result};
use crate::nn::{canonical, ArchitectureSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetId {
    FashionMnist,
    Cifar10,
    /// Class-prototype blobs shaped like the base model's input; for tests.
    Synthetic,
}

/// Model families compared in the robustness matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Base,
    DaeCnn,
    RetrainedDaeCnn,
    Cbc,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Base, Family::DaeCnn, Family::RetrainedDaeCnn, Family::Cbc];

    pub fn name(self) -> &'static str {
        match self {
            Family::Base => "base",
            Family::DaeCnn => "dae-cnn",
            Family::RetrainedDaeCnn => "retrained-dae-cnn",
            Family::Cbc => "cbc",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpecs {
    /// Canonical name (e.g. `fmnist-base`) or path to a spec file.
    pub base: String,
    pub dae: String,
    /// Explicit CBC spec; defaults to truncating `base` by `removed_layers`.
    #[serde(default)]
    pub cbc: Option<String>,
    #[serde(default = "two")]
    pub removed_layers: usize,
}

fn two() -> usize {
    2
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Subset {
    pub train: Option<usize>,
    pub test: Option<usize>,
    /// Test samples attacked per (model, attack) cell; default: all of `test`.
    pub attack: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f32,
    #[serde(default = "batch")]
    pub batch_size: usize,
}

fn batch() -> usize {
    128
}

/// One entry of the attack suite: `kind` plus any [`AttackConfig`] fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "toml::Table", into = "toml::Table")]
pub struct AttackEntry {
    pub kind: AttackKind,
    pub config: AttackConfig,
}

impl TryFrom<toml::Table> for AttackEntry {
    type Error = String;

    fn try_from(mut t: toml::Table) -> std::result::Result<Self, String> {
        let kind = t.remove("kind").ok_or("attack entry needs `kind`")?;
        let kind: AttackKind = kind.try_into().map_err(|e| format!("attack kind: {e}"))?;
        let config: AttackConfig = toml::Value::Table(t).try_into().map_err(|e| format!("attack `{}`: {e}", kind.name()))?;
        Ok(AttackEntry { kind, config })
    }
}

impl From<AttackEntry> for toml::Table {
    fn from(e: AttackEntry) -> Self {
        let mut t = toml::Table::try_from(&e.config).expect("attack config serializes");
        t.insert("kind".into(), toml::Value::String(e.kind.name().into()));
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSettings {
    pub removed_layers: Vec<usize>,
    /// Attacks for the sweep; default: the main suite.
    #[serde(default)]
    pub attacks: Option<Vec<AttackEntry>>,
}

/// Overrides applied by `--long-run` (full datasets, full-length training).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongRun {
    pub classifier_epochs: usize,
    pub dae_epochs: usize,
    #[serde(default)]
    pub subset: Subset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointPolicy {
    /// Load existing checkpoints instead of retraining.
    #[serde(default)]
    pub reuse: bool,
    /// Allow training when a checkpoint is missing.
    #[serde(default = "yes")]
    pub train: bool,
}

impl Default for CheckpointPolicy {
    fn default() -> Self {
        CheckpointPolicy {
            reuse: false,
            train: true,
        }
    }
}

fn yes() -> bool {
    true
}

fn default_sigmas() -> Vec<f32> {
    vec![0.3]
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetId,
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub models: ModelSpecs,
    #[serde(default)]
    pub subset: Subset,
    pub classifier: TrainSettings,
    pub dae: TrainSettings,
    #[serde(default = "default_sigmas")]
    pub noise_sigmas: Vec<f32>,
    #[serde(default)]
    pub attacks: Vec<AttackEntry>,
    #[serde(default)]
    pub families: Option<Vec<Family>>,
    #[serde(default)]
    pub sweep: Option<SweepSettings>,
    #[serde(default)]
    pub long_run: Option<LongRun>,
    #[serde(default)]
    pub checkpoints: CheckpointPolicy,
    #[serde(default)]
    pub verbose: bool,
    /// Directory relative spec/data paths resolve against (the config's own).
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, dir).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Switches to the long-run recipe: full-length training, full data unless the
    /// `long_run` section says otherwise.
    pub fn apply_long_run(&mut self) {
        let lr = self.long_run.clone().unwrap_or(LongRun {
            classifier_epochs: match self.dataset {
                DatasetId::Cifar10 => 150,
                _ => 50,
            },
            dae_epochs: match self.dataset {
                DatasetId::Cifar10 => 150,
                _ => 50,
            },
            subset: Subset::default(),
        });
        self.classifier.epochs = lr.classifier_epochs;
        self.dae.epochs = lr.dae_epochs;
        self.subset = lr.subset;
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// A canonical spec name or a spec file path.
    pub fn spec(&self, name_or_path: &str) -> Result<ArchitectureSpec> {
        if canonical::NAMES.contains(&name_or_path) {
            return canonical::by_name(name_or_path);
        }
        ArchitectureSpec::load(self.resolve(Path::new(name_or_path)))
    }

    pub fn data_dir(&self) -> PathBuf {
        match &self.data_dir {
            Some(d) => self.resolve(d),
            None => PathBuf::from(match self.dataset {
                DatasetId::Cifar10 => "data/cifar-10-batches-bin",
                _ => "data/fashion-mnist",
            }),
        }
    }

    pub fn families(&self) -> Vec<Family> {
        self.families.clone().unwrap_or_else(|| Family::ALL.to_vec())
    }

    pub fn validate(&self) -> Result<()> {
        for s in [&self.models.base, &self.models.dae] {
            self.spec(s)?;
        }
        if let Some(c) = &self.models.cbc {
            self.spec(c)?;
        }
        if self.noise_sigmas.is_empty() {
            return Err(Error::Config("`noise_sigmas` must not be empty".into()));
        }
        if self.noise_sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("noise sigmas must be >= 0".into()));
        }
        if let Some(s) = &self.sweep {
            if s.removed_layers.is_empty() {
                return Err(Error::Config("`sweep.removed_layers` must not be empty".into()));
            }
        }
        if matches!(&self.families, Some(f) if f.is_empty()) {
            return Err(Error::Config("`families` must not be empty".into()));
        }
        for a in self.attacks.iter().chain(self.sweep.iter().flat_map(|s| s.attacks.iter().flatten())) {
            a.config.validate()?;
        }
        for t in [&self.classifier, &self.dae] {
            if t.batch_size == 0 || !(t.lr > 0.0) {
                return Err(Error::Config("training needs batch_size >= 1 and lr > 0".into()));
            }
        }
        if self.dataset != DatasetId::Synthetic && !self.data_dir().is_dir() {
            return Err(Error::Config(format!(
                "data directory {} does not exist (see scripts/fetch_fashion_mnist.py)",
                self.data_dir().display()
            )));
        }
        Ok(())
    }

    /// SHA-256 of the resolved configuration (after overrides), ignoring
    /// settings that cannot change results (output location, checkpoint
    /// policy, logging).
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.verbose = false;
        c.checkpoints = CheckpointPolicy::default();
        let json = serde_json::to_vec(&c).expect("config serializes");
        format!("{:x}", Sha256::digest(json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = r#"
dataset = "synthetic"
[models]
base = "fmnist-base"
dae = "fmnist-dae"
[classifier]
epochs = 1
lr = 0.001
[dae]
epochs = 1
lr = 0.001
[[attacks]]
kind = "bim"
epsilon = 0.02
iterations = 5
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(MIN, ".").unwrap();
        assert_eq!(cfg.noise_sigmas, vec![0.3]);
        assert_eq!(cfg.models.removed_layers, 2);
        assert_eq!(cfg.attacks[0].kind, AttackKind::Bim);
        assert_eq!(cfg.attacks[0].config.iterations, 5);
        assert_eq!(cfg.attacks[0].config.mu, AttackConfig::default().mu);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml(&format!("{MIN}\nbogus = 1\n"), ".").is_err());
        let bad_attack = MIN.replace("iterations = 5", "iterations = 5\nstrength = 2");
        assert!(ExperimentConfig::from_toml(&bad_attack, ".").is_err());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = ExperimentConfig::from_toml(MIN, ".").unwrap();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.seed = 9;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn long_run_uses_full_length_epochs() {
        let mut cfg = ExperimentConfig::from_toml(MIN, ".").unwrap();
        cfg.subset.train = Some(10);
        cfg.apply_long_run();
        assert_eq!((cfg.classifier.epochs, cfg.dae.epochs), (50, 50));
        assert_eq!(cfg.subset.train, None);
    }
}
