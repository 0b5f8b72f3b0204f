//! Run configuration: one TOML file describing every stage of a run.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mapkd_core::cluster::{FeatureKind, FeatureView};
use mapkd_core::dataset::DatasetConfig;
use mapkd_core::distill::{LossConfig, TrainConfig};
use mapkd_core::io::content_hash;
use mapkd_core::metrics::DEFAULT_THRESHOLD;
use mapkd_core::models::{Architecture, ModelSpec, Role};
use mapkd_core::trace::{GeometryConfig, SyntheticKind, TraceSplit};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SEED_ENV: &str = "MAPKD_SEED";
pub const OUT_ENV: &str = "MAPKD_OUT";

/// Where the trace comes from: a file on disk or a synthetic recipe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSource {
    /// Trace file; relative paths resolve against the config file's directory.
    pub path: Option<PathBuf>,
    /// Synthetic recipe such as `chain:1x500@0x401000,7x500@0x402000`.
    pub synthetic: Option<String>,
    /// Records to generate for a synthetic recipe.
    #[serde(default)]
    pub records: usize,
    /// Generator seed; the global seed when absent.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    pub view: FeatureView,
    pub k: usize,
    /// Extra `k` values tabulated in the SSE-versus-k table.
    pub sweep: Vec<usize>,
    pub restarts: usize,
    pub max_iters: usize,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            view: FeatureView::new(FeatureKind::PastBlockDelta, 1),
            k: 2,
            sweep: Vec::new(),
            restarts: 3,
            max_iters: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub dim: usize,
    pub layers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyConfig {
    pub arch: Architecture,
    pub teacher: Dims,
    pub student: Dims,
}

impl FamilyConfig {
    pub fn name(&self) -> String {
        self.arch.to_string()
    }
}

/// Trained and evaluated variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    StudentOnly,
    TeacherOnly,
    StandardKd,
    /// Per-cluster teachers distilled into one student.
    EnsembleKd,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::StudentOnly, Arm::TeacherOnly, Arm::StandardKd, Arm::EnsembleKd];

    pub fn name(self) -> &'static str {
        match self {
            Arm::StudentOnly => "student_only",
            Arm::TeacherOnly => "teacher_only",
            Arm::StandardKd => "standard_kd",
            Arm::EnsembleKd => "ensemble_kd",
        }
    }

    pub fn is_baseline(self) -> bool {
        self != Arm::EnsembleKd
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown arm `{s}` (expected one of student_only, teacher_only, standard_kd, ensemble_kd)"))
    }
}

fn default_arms() -> Vec<Arm> {
    Arm::ALL.to_vec()
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds trace generation, clustering, and every model's initialization
    /// and batch order.
    #[serde(default)]
    pub seed: u64,
    /// Run directory. Not part of the config hash.
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
    pub trace: TraceSource,
    #[serde(default)]
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub split: TraceSplit,
    #[serde(default)]
    pub clustering: ClusteringConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub teacher_train: TrainConfig,
    #[serde(default)]
    pub student_train: TrainConfig,
    #[serde(default = "default_arms")]
    pub arms: Vec<Arm>,
    /// Decision threshold for reported metrics.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    pub families: Vec<FamilyConfig>,
    /// Directory of the config file, for resolving a relative trace path.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Command-line and environment overrides.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub arms: Vec<Arm>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads a config file and applies overrides: flag, then environment,
    /// then file for the seed and output directory.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.apply(overrides)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, overrides: &Overrides) -> Result<(), CliError> {
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| CliError::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?,
            ),
            Err(_) => None,
        };
        if let Some(seed) = overrides.seed.or(env_seed) {
            self.seed = seed;
        }
        if let Some(out) = overrides.out.clone().or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from)) {
            self.out = Some(out);
        }
        if !overrides.arms.is_empty() {
            self.arms = overrides.arms.clone();
        }
        self.teacher_train.seed = self.seed;
        self.student_train.seed = self.seed;
        self.validate()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let t = &self.trace;
        match (&t.path, &t.synthetic) {
            (Some(_), None) => {}
            (None, Some(recipe)) => {
                recipe.parse::<SyntheticKind>()?;
                if t.records == 0 {
                    return Err(CliError::Config("trace.records must be >= 1 for a synthetic trace".into()));
                }
            }
            _ => return Err(CliError::Config("set exactly one of trace.path and trace.synthetic".into())),
        }
        self.geometry.validate()?;
        self.dataset.validate(&self.geometry)?;
        self.clustering.view.validate()?;
        if self.clustering.k == 0 {
            return Err(CliError::Config("clustering.k must be >= 1".into()));
        }
        if self.clustering.sweep.contains(&0) {
            return Err(CliError::Config("clustering.sweep values must be >= 1".into()));
        }
        self.loss.validate()?;
        self.teacher_train.validate()?;
        self.student_train.validate()?;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(CliError::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if self.arms.is_empty() {
            return Err(CliError::Config("select at least one arm".into()));
        }
        if self.families.is_empty() {
            return Err(CliError::Config("configure at least one [[families]] entry".into()));
        }
        let mut seen = BTreeSet::new();
        for f in &self.families {
            if !seen.insert(f.arch) {
                return Err(CliError::Config(format!("family `{}` is configured twice", f.arch)));
            }
            for spec in [self.teacher_spec(f), self.student_spec(f)] {
                spec.validate()?;
            }
        }
        Ok(())
    }

    /// Content hash of everything that shapes artifacts; the output
    /// directory and the arm selection are excluded.
    pub fn hash(&self) -> Result<String, CliError> {
        let mut keyed = self.clone();
        keyed.arms.clear();
        Ok(content_hash(&keyed)?)
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Config(format!("no output directory: set `out`, --out or {OUT_ENV}")))
    }

    pub fn trace_path(&self) -> Option<PathBuf> {
        self.trace.path.as_ref().map(|p| self.base_dir.join(p))
    }

    pub fn trace_seed(&self) -> u64 {
        self.trace.seed.unwrap_or(self.seed)
    }

    pub fn has_arm(&self, arm: Arm) -> bool {
        self.arms.contains(&arm)
    }

    fn spec(&self, f: &FamilyConfig, role: Role, dims: Dims) -> ModelSpec {
        ModelSpec::new(
            f.arch,
            role,
            dims.dim,
            dims.layers,
            self.dataset.input_shape(),
            self.dataset.num_labels(),
        )
    }

    pub fn teacher_spec(&self, f: &FamilyConfig) -> ModelSpec {
        self.spec(f, Role::Teacher, f.teacher)
    }

    pub fn student_spec(&self, f: &FamilyConfig) -> ModelSpec {
        self.spec(f, Role::Student, f.student)
    }
}
