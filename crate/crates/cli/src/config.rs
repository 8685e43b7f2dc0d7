//! Experiment configuration: defaults reproduce the benchmark setup
//! (linear 5-spring system, BroGNet, the published training protocol).
//! Precedence is flags > config file > defaults, and unknown keys are
//! rejected.

use std::path::Path;

use brodyn::error::{Error, Result};
use brodyn::io::{kv_get, parse_kv, parse_num, render_kv, KvSection};
use brodyn::models::ModelFamily;
use brodyn::systems::{default_spec, SystemKind, SystemSpec};
use brodyn::training::TrainConfig;

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub kind: SystemKind,
    pub n: usize,
    pub kbt: f64,
    pub dt: f64,
    pub family: ModelFamily,
    pub force_head_linear: bool,
    pub train: TrainConfig,
    pub n_trajectories: usize,
    pub points_per_trajectory: usize,
    pub n_init: usize,
    pub seeds_per_init: usize,
    pub steps: usize,
    pub seed: u64,
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: SystemKind::Linear,
            n: 5,
            kbt: 1.0,
            dt: 1e-3,
            family: ModelFamily::BroGnet,
            force_head_linear: false,
            train: TrainConfig::default(),
            n_trajectories: 100,
            points_per_trajectory: 100,
            n_init: 100,
            seeds_per_init: 10,
            steps: 100,
            seed: 0,
            threads: 1,
        }
    }
}

impl ExperimentConfig {
    /// The physical system this config describes.
    pub fn spec(&self) -> Result<SystemSpec> {
        let mut spec = default_spec(self.kind, self.n)?;
        spec.kbt = self.kbt;
        spec.dt = self.dt;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec()?;
        self.train.validate()?;
        if self.n_trajectories == 0 || self.points_per_trajectory == 0 {
            return Err(Error::Config(
                "n_trajectories and points_per_trajectory must be >= 1".to_string(),
            ));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be >= 1".to_string()));
        }
        Ok(())
    }

    /// Loads and merges a config file over the defaults.
    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {origin}: {e}")))?;
        let sections = parse_kv(&text, &origin)?;
        let mut cfg = ExperimentConfig::default();
        for (section, entries) in &sections {
            match section.as_str() {
                "system" => {
                    for (k, v) in entries {
                        match k.as_str() {
                            "kind" => cfg.kind = SystemKind::parse(v)?,
                            "n" => cfg.n = parse_num(v, k, &origin)?,
                            "kbt" => cfg.kbt = parse_num(v, k, &origin)?,
                            "dt" => cfg.dt = parse_num(v, k, &origin)?,
                            _ => return unknown_key(section, k, &origin),
                        }
                    }
                }
                "model" => {
                    for (k, v) in entries {
                        match k.as_str() {
                            "family" => cfg.family = ModelFamily::parse(v)?,
                            "force_head_linear" => {
                                cfg.force_head_linear = parse_num(v, k, &origin)?
                            }
                            _ => return unknown_key(section, k, &origin),
                        }
                    }
                }
                "training" => {
                    for (k, v) in entries {
                        match k.as_str() {
                            "lr" => cfg.train.lr = parse_num(v, k, &origin)?,
                            "batch_size" => cfg.train.batch_size = parse_num(v, k, &origin)?,
                            "lambda" => cfg.train.lambda = parse_num(v, k, &origin)?,
                            "epsilon" => cfg.train.epsilon = parse_num(v, k, &origin)?,
                            "max_epochs" => cfg.train.max_epochs = parse_num(v, k, &origin)?,
                            "patience" => cfg.train.patience = parse_num(v, k, &origin)?,
                            "min_improvement" => {
                                cfg.train.min_improvement = parse_num(v, k, &origin)?
                            }
                            "split" => cfg.train.split = parse_num(v, k, &origin)?,
                            "sample_noise_in_training" => {
                                cfg.train.sample_noise_in_training = parse_num(v, k, &origin)?
                            }
                            _ => return unknown_key(section, k, &origin),
                        }
                    }
                }
                "data" => {
                    for (k, v) in entries {
                        match k.as_str() {
                            "n_trajectories" => cfg.n_trajectories = parse_num(v, k, &origin)?,
                            "points_per_trajectory" => {
                                cfg.points_per_trajectory = parse_num(v, k, &origin)?
                            }
                            _ => return unknown_key(section, k, &origin),
                        }
                    }
                }
                "evaluation" => {
                    for (k, v) in entries {
                        match k.as_str() {
                            "n_init" => cfg.n_init = parse_num(v, k, &origin)?,
                            "seeds_per_init" => cfg.seeds_per_init = parse_num(v, k, &origin)?,
                            "steps" => cfg.steps = parse_num(v, k, &origin)?,
                            _ => return unknown_key(section, k, &origin),
                        }
                    }
                }
                "run" => {
                    for (k, v) in entries {
                        match k.as_str() {
                            "seed" => cfg.seed = parse_num(v, k, &origin)?,
                            "threads" => cfg.threads = parse_num(v, k, &origin)?,
                            _ => return unknown_key(section, k, &origin),
                        }
                    }
                }
                _ => {
                    return Err(Error::Config(format!(
                        "{origin}: unknown section [{section}]"
                    )))
                }
            }
        }
        Ok(cfg)
    }

    /// Config echo for run manifests; parses back through `from_file`.
    pub fn to_kv(&self) -> Vec<KvSection> {
        vec![
            (
                "system".into(),
                vec![
                    ("kind".into(), self.kind.tag().into()),
                    ("n".into(), self.n.to_string()),
                    ("kbt".into(), brodyn::io::fmt_f64(self.kbt)),
                    ("dt".into(), brodyn::io::fmt_f64(self.dt)),
                ],
            ),
            (
                "model".into(),
                vec![
                    ("family".into(), self.family.tag().into()),
                    (
                        "force_head_linear".into(),
                        self.force_head_linear.to_string(),
                    ),
                ],
            ),
            (
                "training".into(),
                vec![
                    ("lr".into(), brodyn::io::fmt_f64(self.train.lr)),
                    ("batch_size".into(), self.train.batch_size.to_string()),
                    ("lambda".into(), brodyn::io::fmt_f64(self.train.lambda)),
                    ("epsilon".into(), brodyn::io::fmt_f64(self.train.epsilon)),
                    ("max_epochs".into(), self.train.max_epochs.to_string()),
                    ("patience".into(), self.train.patience.to_string()),
                    (
                        "min_improvement".into(),
                        brodyn::io::fmt_f64(self.train.min_improvement),
                    ),
                    ("split".into(), brodyn::io::fmt_f64(self.train.split)),
                    (
                        "sample_noise_in_training".into(),
                        self.train.sample_noise_in_training.to_string(),
                    ),
                ],
            ),
            (
                "data".into(),
                vec![
                    ("n_trajectories".into(), self.n_trajectories.to_string()),
                    (
                        "points_per_trajectory".into(),
                        self.points_per_trajectory.to_string(),
                    ),
                ],
            ),
            (
                "evaluation".into(),
                vec![
                    ("n_init".into(), self.n_init.to_string()),
                    ("seeds_per_init".into(), self.seeds_per_init.to_string()),
                    ("steps".into(), self.steps.to_string()),
                ],
            ),
            (
                "run".into(),
                vec![
                    ("seed".into(), self.seed.to_string()),
                    ("threads".into(), self.threads.to_string()),
                ],
            ),
        ]
    }

    pub fn render(&self) -> String {
        render_kv(&self.to_kv())
    }
}

fn unknown_key(section: &str, key: &str, origin: &str) -> Result<ExperimentConfig> {
    Err(Error::Config(format!(
        "{origin}: unknown key `{key}` in [{section}]"
    )))
}

/// Reads a dataset directory's sidecar to recover its spec and seed.
pub fn dataset_paths(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    (dir.join("pairs.csv"), dir.join("dataset.meta"))
}

pub fn checkpoint_paths(dir: &Path) -> CheckpointPaths {
    CheckpointPaths {
        params: dir.join("model.params"),
        opt_state: dir.join("optimizer.state"),
        history: dir.join("history.csv"),
        manifest: dir.join("manifest.txt"),
        spec: dir.join("system.spec"),
    }
}

pub struct CheckpointPaths {
    pub params: std::path::PathBuf,
    pub opt_state: std::path::PathBuf,
    pub history: std::path::PathBuf,
    pub manifest: std::path::PathBuf,
    pub spec: std::path::PathBuf,
}

/// Loads the system spec stored beside a checkpoint.
pub fn load_checkpoint_spec(path: &Path) -> Result<SystemSpec> {
    let origin = path.display().to_string();
    let sections = parse_kv(&std::fs::read_to_string(path)?, &origin)?;
    let entries = brodyn::io::kv_section(&sections, "spec", &origin)?;
    brodyn::io::spec_from_kv(entries, &origin)
}

pub fn save_checkpoint_spec(path: &Path, spec: &SystemSpec) -> Result<()> {
    let sections = vec![("spec".to_string(), brodyn::io::spec_to_kv(spec))];
    std::fs::write(path, render_kv(&sections))?;
    Ok(())
}

/// Restores the generation seed recorded in a dataset sidecar.
pub fn dataset_seed(meta_path: &Path) -> Result<u64> {
    let origin = meta_path.display().to_string();
    let sections = parse_kv(&std::fs::read_to_string(meta_path)?, &origin)?;
    let head = brodyn::io::kv_section(&sections, "meta", &origin)?;
    parse_num(kv_get(head, "seed", &origin)?, "seed", &origin)
}
