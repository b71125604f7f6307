//! Experiment configuration: profile defaults (desk or paper scale) with
//! optional JSON overrides, section by section.

use crate::attacks::{AttackKind, IfgsmConfig, LbfgsConfig, PgdConfig};
use crate::detectors::{ArchId, EarlyStop, ScaleProfile, TrainConfig};
use crate::error::{Error, Result};
use crate::rdfs::{KernelKind, ReducedKind, SvmGrid};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Manipulation task under detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Resize,
    Median,
    Clahe,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Resize, Task::Median, Task::Clahe];

    pub fn name(self) -> &'static str {
        match self {
            Task::Resize => "resize",
            Task::Median => "median",
            Task::Clahe => "clahe",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.name())
    }
}

/// Where source images come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceSpec {
    /// Seeded filtered-noise textures; no downloads needed.
    Procedural { count: usize, width: usize, height: usize },
    /// Lossless PNG/PGM files.
    Directory { path: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub side: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub max_per_image: usize,
    pub source: SourceSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub id: ArchId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttacksConfig {
    /// How many H1 test patches to attack.
    pub count: usize,
    pub enabled: Vec<AttackKind>,
    pub fgsm: IfgsmConfig,
    pub pgd: PgdConfig,
    /// The wide PGD bound fails on the CLAHE task; this narrower setting is
    /// used there instead.
    pub pgd_clahe: PgdConfig,
    pub bfgs: LbfgsConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RdfsConfig {
    /// Fraction of the CNN training patches whose features train the
    /// reduced detectors.
    pub reduced_train_fraction: f64,
    pub fc: TrainConfig,
    pub kernel: KernelKind,
    pub cv_folds: usize,
    pub grid: SvmGrid,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub tasks: Vec<Task>,
    pub k_list: Vec<usize>,
    /// Adds the full-feature row (K = N) to the sweep.
    pub include_full: bool,
    pub repetitions: usize,
    pub detector_kinds: Vec<ReducedKind>,
}

/// Complete experiment configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub profile: ScaleProfile,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub architecture: ArchitectureConfig,
    pub training: TrainConfig,
    pub attacks: AttacksConfig,
    pub rdfs: RdfsConfig,
    pub plan: PlanConfig,
}

impl Config {
    /// Profile defaults. Desk scale keeps a full sweep within laptop budget;
    /// paper scale mirrors the published sizes and settings.
    pub fn defaults(profile: ScaleProfile) -> Self {
        match profile {
            ScaleProfile::Desk => Config {
                profile,
                seed: 7,
                out_dir: PathBuf::from("out"),
                dataset: DatasetConfig {
                    side: 32,
                    train_per_class: 5000,
                    val_per_class: 500,
                    test_per_class: 1000,
                    max_per_image: 100,
                    source: SourceSpec::Procedural { count: 120, width: 132, height: 132 },
                },
                architecture: ArchitectureConfig { id: ArchId::BayarStyle },
                training: TrainConfig {
                    learning_rate: 1e-3,
                    beta1: 0.9,
                    beta2: 0.999,
                    batch_size: 32,
                    max_epochs: 8,
                    early_stop: None,
                    seed: 0,
                },
                attacks: AttacksConfig {
                    count: 100,
                    enabled: vec![AttackKind::Pgd, AttackKind::Fgsm, AttackKind::Bfgs],
                    fgsm: IfgsmConfig::paper(),
                    pgd: PgdConfig::paper(),
                    pgd_clahe: PgdConfig::paper_clahe(),
                    bfgs: LbfgsConfig::default(),
                },
                rdfs: RdfsConfig {
                    reduced_train_fraction: 0.2,
                    fc: TrainConfig {
                        learning_rate: 1e-3,
                        beta1: 0.9,
                        beta2: 0.999,
                        batch_size: 32,
                        max_epochs: 50,
                        early_stop: Some(EarlyStop { window: 5, min_delta: 1e-3 }),
                        seed: 0,
                    },
                    kernel: KernelKind::Linear,
                    cv_folds: 5,
                    grid: SvmGrid::default(),
                },
                plan: PlanConfig {
                    tasks: vec![Task::Median],
                    k_list: vec![5, 10, 30, 50, 128],
                    include_full: true,
                    repetitions: 20,
                    detector_kinds: vec![ReducedKind::Fc, ReducedKind::Svm],
                },
            },
            ScaleProfile::Paper => Config {
                profile,
                seed: 7,
                out_dir: PathBuf::from("out"),
                dataset: DatasetConfig {
                    side: 64,
                    train_per_class: 100_000,
                    val_per_class: 3_000,
                    test_per_class: 10_000,
                    max_per_image: 100,
                    source: SourceSpec::Procedural { count: 2400, width: 256, height: 256 },
                },
                architecture: ArchitectureConfig { id: ArchId::BayarStyle },
                training: TrainConfig {
                    learning_rate: 1e-4,
                    beta1: 0.99,
                    beta2: 0.999,
                    batch_size: 32,
                    max_epochs: 40,
                    early_stop: None,
                    seed: 0,
                },
                attacks: AttacksConfig {
                    count: 500,
                    enabled: vec![AttackKind::Pgd, AttackKind::Fgsm, AttackKind::Bfgs],
                    fgsm: IfgsmConfig::paper(),
                    pgd: PgdConfig::paper(),
                    pgd_clahe: PgdConfig::paper_clahe(),
                    bfgs: LbfgsConfig::default(),
                },
                rdfs: RdfsConfig {
                    reduced_train_fraction: 0.2,
                    fc: TrainConfig {
                        learning_rate: 1e-5,
                        beta1: 0.99,
                        beta2: 0.999,
                        batch_size: 32,
                        max_epochs: 50,
                        early_stop: Some(EarlyStop { window: 5, min_delta: 1e-3 }),
                        seed: 0,
                    },
                    kernel: KernelKind::Linear,
                    cv_folds: 5,
                    grid: SvmGrid::default(),
                },
                plan: PlanConfig {
                    tasks: vec![Task::Resize, Task::Median, Task::Clahe],
                    k_list: vec![5, 10, 30, 50, 200, 400, 600],
                    include_full: true,
                    repetitions: 50,
                    detector_kinds: vec![ReducedKind::Fc, ReducedKind::Svm],
                },
            },
        }
    }

    /// Loads profile defaults and overlays a partial JSON config file:
    /// object fields replace defaults recursively, everything else must
    /// deserialize into the full schema (unknown keys are config errors).
    pub fn load(
        profile: ScaleProfile,
        config_path: Option<&Path>,
        seed: Option<u64>,
        out_dir: Option<&Path>,
    ) -> Result<Config> {
        let mut value =
            serde_json::to_value(Config::defaults(profile)).expect("defaults serialize");
        if let Some(path) = config_path {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            let overlay: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("invalid JSON in {}: {e}", path.display())))?;
            merge(&mut value, overlay);
        }
        let mut cfg: Config = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        if let Some(dir) = out_dir {
            cfg.out_dir = dir.to_path_buf();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let as_config = |e: crate::error::Error| Error::Config(e.to_string());
        self.training.validate().map_err(as_config)?;
        self.rdfs.fc.validate().map_err(as_config)?;
        if self.plan.repetitions == 0 {
            return Err(Error::Config("plan.repetitions must be at least 1".into()));
        }
        if self.plan.tasks.is_empty() {
            return Err(Error::Config("plan.tasks must not be empty".into()));
        }
        if self.plan.k_list.is_empty() && !self.plan.include_full {
            return Err(Error::Config("plan needs at least one K value".into()));
        }
        if self.plan.detector_kinds.is_empty() {
            return Err(Error::Config("plan.detector_kinds must not be empty".into()));
        }
        if self.plan.k_list.iter().any(|&k| k == 0) {
            return Err(Error::Config("K values must be positive".into()));
        }
        if !(0.0 < self.rdfs.reduced_train_fraction && self.rdfs.reduced_train_fraction <= 1.0) {
            return Err(Error::Config("rdfs.reduced_train_fraction must lie in (0, 1]".into()));
        }
        if self.attacks.enabled.is_empty() {
            return Err(Error::Config("attacks.enabled must not be empty".into()));
        }
        if self.attacks.count == 0 {
            return Err(Error::Config("attacks.count must be at least 1".into()));
        }
        for (kind, r) in [
            (AttackKind::Fgsm, self.attacks.fgsm.validate()),
            (AttackKind::Pgd, self.attacks.pgd.validate()),
            (AttackKind::Pgd, self.attacks.pgd_clahe.validate()),
            (AttackKind::Bfgs, self.attacks.bfgs.validate()),
        ] {
            r.map_err(|e| Error::Config(format!("{kind} attack config: {e}")))?;
        }
        Ok(())
    }

    /// Attack configuration for one attack family on one task.
    pub fn attack_config(&self, kind: AttackKind, task: Task) -> crate::attacks::AttackConfig {
        use crate::attacks::AttackConfig::*;
        match kind {
            AttackKind::Fgsm => Fgsm(self.attacks.fgsm.clone()),
            AttackKind::Bfgs => Bfgs(self.attacks.bfgs.clone()),
            AttackKind::Pgd => {
                if task == Task::Clahe {
                    Pgd(self.attacks.pgd_clahe.clone())
                } else {
                    Pgd(self.attacks.pgd.clone())
                }
            }
        }
    }
}

/// Recursive JSON-object merge: overlay wins, objects merge field-wise.
fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        Config::defaults(ScaleProfile::Desk).validate().unwrap();
        Config::defaults(ScaleProfile::Paper).validate().unwrap();
    }

    #[test]
    fn overlay_merges_partial_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"seed": 99, "plan": {"repetitions": 3}}"#).unwrap();
        let cfg = Config::load(ScaleProfile::Desk, Some(&path), None, None).unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.plan.repetitions, 3);
        // Untouched sections keep their defaults.
        assert_eq!(cfg.dataset.side, 32);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"plan": {"repetition": 3}}"#).unwrap();
        let err = Config::load(ScaleProfile::Desk, Some(&path), None, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn cli_flags_override_file() {
        let cfg = Config::load(ScaleProfile::Desk, None, Some(123), Some(Path::new("/tmp/x"))).unwrap();
        assert_eq!(cfg.seed, 123);
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn invalid_settings_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"plan": {"repetitions": 0}}"#).unwrap();
        assert!(matches!(
            Config::load(ScaleProfile::Desk, Some(&path), None, None),
            Err(Error::Config(_))
        ));
    }
}
