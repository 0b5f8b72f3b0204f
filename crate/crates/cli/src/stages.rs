//! Pipeline stages. Each stage reads only on-disk artifacts of earlier
//! stages and writes its own atomically.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mapkd_core::cluster::{
    best_of, extract_features, extract_features_with, kmeans_assign, labels_per_position, rle_encode,
    sweep_k, write_plot_data, FeatureView, KMeansModel, KMeansParams, SweepRow,
};
use mapkd_core::dataset::{build_dataset, Dataset};
use mapkd_core::distill::{
    distill_student, standard_kd, train_supervised, train_teacher, write_curve, TeacherEnsemble, TrainOutcome,
};
use mapkd_core::io::{atomic_write, canonical_json};
use mapkd_core::metrics::{evaluate, precision_recall_f1};
use mapkd_core::models::{Checkpoint, Predictor};
use mapkd_core::report::{attach_compression, emit_report, ArmMetrics, ClusterSummary, FamilyMetrics, MetricsReport, METRICS_FILE};
use mapkd_core::trace::{generate_synthetic, parse_trace, split, write_trace, TraceRecord};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{Arm, FamilyConfig, RunConfig};
use crate::error::CliError;

pub const LOCK_FILE: &str = "config.lock";
pub const TRACE_FILE: &str = "trace.txt";
pub const CLUSTERS_FILE: &str = "clusters.json";
pub const PLOT_FILE: &str = "plot_data.csv";
pub const TRAIN_CACHE: &str = "dataset.cache";
pub const EVAL_CACHE: &str = "dataset_eval.cache";
pub const STUDENT_FILE: &str = "student.ckpt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Gen,
    Cluster,
    TrainTeachers,
    Distill,
    Baselines,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Gen,
        Stage::Cluster,
        Stage::TrainTeachers,
        Stage::Distill,
        Stage::Baselines,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Cluster => "cluster",
            Stage::TrainTeachers => "train-teachers",
            Stage::Distill => "distill",
            Stage::Baselines => "baselines",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }
}

pub fn teacher_file(k: usize) -> String {
    format!("teacher_{k}.ckpt")
}

pub fn baseline_file(arm: Arm) -> String {
    format!("baseline_{arm}.ckpt")
}

fn stamp(stage: Stage, hash: &str) -> String {
    format!("stage={} config_hash={hash}", stage.name())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Lock {
    config_hash: String,
    config: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterArtifact {
    pub stage: String,
    pub config_hash: String,
    pub view: FeatureView,
    pub model: KMeansModel,
    /// Cluster of every train-region position, run-length encoded.
    pub train_labels: Vec<(u32, u32)>,
    pub eval_labels: Vec<(u32, u32)>,
    /// Samples per cluster.
    pub train_sizes: Vec<usize>,
    pub eval_sizes: Vec<usize>,
    pub sweep: Vec<SweepRow>,
}

/// One run directory bound to a resolved config.
pub struct Run {
    pub cfg: RunConfig,
    pub hash: String,
    pub dir: PathBuf,
    pub force: bool,
}

impl Run {
    pub fn new(cfg: RunConfig, force: bool) -> Result<Self, CliError> {
        let hash = cfg.hash()?;
        let dir = cfg.out_dir()?.to_path_buf();
        Ok(Self { cfg, hash, dir, force })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn family_dir(&self, f: &FamilyConfig) -> PathBuf {
        self.dir.join(f.name())
    }

    pub fn run(&self, stage: Stage) -> Result<(), CliError> {
        self.prepare()?;
        eprintln!("[{}] {}", stage.name(), self.dir.display());
        match stage {
            Stage::Gen => self.gen(),
            Stage::Cluster => self.cluster(),
            Stage::TrainTeachers => self.train_teachers(),
            Stage::Distill => self.distill(),
            Stage::Baselines => self.baselines(),
            Stage::Eval => self.eval(),
            Stage::Report => self.report(),
        }
    }

    pub fn run_all(&self) -> Result<(), CliError> {
        for stage in Stage::ALL {
            self.run(stage)?;
        }
        Ok(())
    }

    /// Creates the run directory and records the resolved config in `config.lock`.
    fn prepare(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.dir).map_err(|e| mapkd_core::Error::Io {
            path: self.dir.clone(),
            source: e,
        })?;
        let lock_path = self.path(LOCK_FILE);
        if lock_path.exists() {
            let lock: Lock = serde_json::from_str(&read_text(&lock_path)?).map_err(mapkd_core::Error::from)?;
            if lock.config_hash == self.hash {
                return Ok(());
            }
        }
        let lock = Lock {
            config_hash: self.hash.clone(),
            config: serde_json::to_value(&self.cfg).map_err(mapkd_core::Error::from)?,
        };
        atomic_write(&lock_path, canonical_json(&lock)?.as_bytes())?;
        Ok(())
    }

    fn check_hash(&self, path: &Path, found: &str, stage: Stage) -> Result<(), CliError> {
        if found == self.hash {
            return Ok(());
        }
        if self.force {
            eprintln!("warning: using {} from config hash {found} (--force)", path.display());
            return Ok(());
        }
        Err(CliError::HashMismatch {
            path: path.to_path_buf(),
            found: found.to_string(),
            expected: self.hash.clone(),
            stage: stage.name(),
        })
    }

    fn require(&self, path: &Path, stage: Stage) -> Result<(), CliError> {
        if path.exists() {
            Ok(())
        } else {
            Err(CliError::Prerequisite {
                path: path.to_path_buf(),
                stage: stage.name(),
            })
        }
    }

    fn gen(&self) -> Result<(), CliError> {
        let cfg = &self.cfg;
        let records = match (cfg.trace_path(), &cfg.trace.synthetic) {
            (Some(path), _) => parse_trace(&path, &cfg.geometry)?,
            (None, Some(recipe)) => generate_synthetic(&recipe.parse()?, cfg.trace.records, cfg.trace_seed(), &cfg.geometry)?,
            (None, None) => unreachable!("validated config has a trace source"),
        };
        let mut buf = format!("# {}\n", stamp(Stage::Gen, &self.hash)).into_bytes();
        write_trace(&mut buf, &records).expect("writing to a Vec");
        atomic_write(&self.path(TRACE_FILE), &buf)?;
        eprintln!("  {} records", records.len());
        Ok(())
    }

    fn load_trace(&self) -> Result<Vec<TraceRecord>, CliError> {
        let path = self.path(TRACE_FILE);
        self.require(&path, Stage::Gen)?;
        let text = read_text(&path)?;
        let found = text
            .lines()
            .next()
            .and_then(|l| l.strip_prefix("# "))
            .and_then(|l| l.split_whitespace().find_map(|kv| kv.strip_prefix("config_hash=")))
            .unwrap_or("");
        self.check_hash(&path, found, Stage::Gen)?;
        Ok(parse_trace(&path, &self.cfg.geometry)?)
    }

    fn cluster(&self) -> Result<(), CliError> {
        let cfg = &self.cfg;
        let g = &cfg.geometry;
        let c = &cfg.clustering;
        let records = self.load_trace()?;
        let (train_r, eval_r) = split(&records, &cfg.split)?;
        let features = extract_features(train_r, &c.view, g)?;
        let params = KMeansParams {
            max_iters: c.max_iters,
            ..KMeansParams::new(c.k, cfg.seed)
        };
        let fit = best_of(&features, &params, c.restarts)?;
        let mut ks = c.sweep.clone();
        ks.push(c.k);
        ks.sort_unstable();
        ks.dedup();
        let sweep = sweep_k(&features, &ks, cfg.seed, c.restarts)?;

        let train_labels = labels_per_position(train_r.len(), &features.positions, &fit.labels);
        let eval_features = extract_features_with(eval_r, &c.view, g, &fit.model.standardization)?;
        let eval_assign = kmeans_assign(&fit.model, &eval_features)?;
        let eval_labels = labels_per_position(eval_r.len(), &eval_features.positions, &eval_assign);

        let train = build_dataset(train_r, &train_labels, &cfg.dataset, g)?;
        let eval = build_dataset(eval_r, &eval_labels, &cfg.dataset, g)?;
        let sizes = |d: &Dataset| -> Result<Vec<usize>, CliError> {
            Ok(d.partitions(c.k)?.iter().map(Vec::len).collect())
        };
        let artifact = ClusterArtifact {
            stage: Stage::Cluster.name().into(),
            config_hash: self.hash.clone(),
            view: c.view,
            model: fit.model,
            train_labels: rle_encode(&train_labels),
            eval_labels: rle_encode(&eval_labels),
            train_sizes: sizes(&train)?,
            eval_sizes: sizes(&eval)?,
            sweep,
        };
        train.write_cache(&self.path(TRAIN_CACHE), &self.hash)?;
        eval.write_cache(&self.path(EVAL_CACHE), &self.hash)?;
        let mut plot = format!("# {}\n", stamp(Stage::Cluster, &self.hash)).into_bytes();
        write_plot_data(&mut plot, train_r, &train_labels, g).expect("writing to a Vec");
        atomic_write(&self.path(PLOT_FILE), &plot)?;
        atomic_write(&self.path(CLUSTERS_FILE), canonical_json(&artifact)?.as_bytes())?;
        eprintln!(
            "  k={} sse={:.6} train sizes {:?} eval sizes {:?}",
            c.k, artifact.model.sse, artifact.train_sizes, artifact.eval_sizes
        );
        Ok(())
    }

    fn load_clusters(&self) -> Result<ClusterArtifact, CliError> {
        let path = self.path(CLUSTERS_FILE);
        self.require(&path, Stage::Cluster)?;
        let a: ClusterArtifact = serde_json::from_str(&read_text(&path)?).map_err(mapkd_core::Error::from)?;
        self.check_hash(&path, &a.config_hash, Stage::Cluster)?;
        if a.model.k != self.cfg.clustering.k {
            return Err(CliError::Config(format!(
                "{} holds k={} but the config asks for k={}",
                path.display(),
                a.model.k,
                self.cfg.clustering.k
            )));
        }
        Ok(a)
    }

    fn load_dataset(&self, name: &str) -> Result<Dataset, CliError> {
        let path = self.path(name);
        self.require(&path, Stage::Cluster)?;
        let (found, data) = Dataset::read_cache_any(&path)?;
        self.check_hash(&path, &found, Stage::Cluster)?;
        Ok(data)
    }

    fn load_checkpoint(&self, path: &Path, stage: Stage) -> Result<Checkpoint, CliError> {
        self.require(path, stage)?;
        let ckpt = Checkpoint::load(path)?;
        self.check_hash(path, ckpt.meta_str("config_hash").unwrap_or(""), stage)?;
        Ok(ckpt)
    }

    fn save_outcome(
        &self,
        f: &FamilyConfig,
        arm_name: &str,
        file: &str,
        stage: Stage,
        outcome: &TrainOutcome,
        extra: serde_json::Value,
    ) -> Result<(), CliError> {
        let dir = self.family_dir(f);
        let mut meta = json!({
            "stage": stage.name(),
            "config_hash": self.hash,
            "family": f.name(),
            "arm": arm_name,
            "best_epoch": outcome.best_epoch,
            "precision": outcome.best.precision,
            "recall": outcome.best.recall,
            "f1": outcome.best.f1,
        });
        if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
            m.extend(e);
        }
        Checkpoint::new(outcome.model.clone(), meta).save(&dir.join(file))?;
        write_curve(
            &dir.join("curves").join(format!("{arm_name}.csv")),
            &outcome.curve,
            Some(&stamp(stage, &self.hash)),
        )?;
        eprintln!(
            "  {}/{arm_name}: best epoch {} F1 {:.4}",
            f.name(),
            outcome.best_epoch,
            outcome.best.f1
        );
        Ok(())
    }

    fn train_teachers(&self) -> Result<(), CliError> {
        let clusters = self.load_clusters()?;
        let train = self.load_dataset(TRAIN_CACHE)?;
        let eval = self.load_dataset(EVAL_CACHE)?;
        let k = clusters.model.k;
        let parts = train.partitions(k)?;
        let eval_parts = eval.partitions(k)?;
        for f in &self.cfg.families {
            let spec = self.cfg.teacher_spec(f);
            for (c, (idx, eval_idx)) in parts.iter().zip(&eval_parts).enumerate() {
                let outcome = train_teacher(c, &spec, &train, idx, &eval, eval_idx, &self.cfg.teacher_train)?;
                self.save_outcome(
                    f,
                    &format!("teacher_{c}"),
                    &teacher_file(c),
                    Stage::TrainTeachers,
                    &outcome,
                    json!({ "cluster": c }),
                )?;
            }
        }
        Ok(())
    }

    fn load_teachers(&self, f: &FamilyConfig, k: usize) -> Result<(Vec<Predictor>, Vec<f64>), CliError> {
        let mut teachers = Vec::with_capacity(k);
        let mut f1 = Vec::with_capacity(k);
        for c in 0..k {
            let ckpt = self.load_checkpoint(&self.family_dir(f).join(teacher_file(c)), Stage::TrainTeachers)?;
            f1.push(ckpt.metadata.get("f1").and_then(|v| v.as_f64()).unwrap_or(0.0));
            teachers.push(ckpt.model);
        }
        Ok((teachers, f1))
    }

    fn distill(&self) -> Result<(), CliError> {
        if !self.cfg.has_arm(Arm::EnsembleKd) {
            eprintln!("  skipped: arm {} not selected", Arm::EnsembleKd);
            return Ok(());
        }
        let clusters = self.load_clusters()?;
        let k = clusters.model.k;
        let mut loaded = Vec::with_capacity(self.cfg.families.len());
        for f in &self.cfg.families {
            loaded.push(self.load_teachers(f, k)?);
        }
        let train = self.load_dataset(TRAIN_CACHE)?;
        let eval = self.load_dataset(EVAL_CACHE)?;
        let parts = train.partitions(k)?;
        for (f, (teachers, f1)) in self.cfg.families.iter().zip(loaded) {
            let ensemble = TeacherEnsemble::new(teachers, f1, &self.cfg.loss.lambda_mode)?;
            let spec = self.cfg.student_spec(f);
            let outcome = distill_student(&ensemble, &train, &parts, &eval, &spec, &self.cfg.loss, &self.cfg.student_train)?;
            self.save_outcome(
                f,
                Arm::EnsembleKd.name(),
                STUDENT_FILE,
                Stage::Distill,
                &outcome,
                json!({ "lambdas": ensemble.lambdas, "teacher_f1": ensemble.f1 }),
            )?;
        }
        Ok(())
    }

    fn baselines(&self) -> Result<(), CliError> {
        let wanted: Vec<Arm> = Arm::ALL.into_iter().filter(|a| a.is_baseline() && self.cfg.has_arm(*a)).collect();
        if wanted.is_empty() {
            eprintln!("  skipped: no baseline arm selected");
            return Ok(());
        }
        let train = self.load_dataset(TRAIN_CACHE)?;
        let eval = self.load_dataset(EVAL_CACHE)?;
        let all = vec![train.all_indices()];
        let eval_idx = eval.all_indices();
        let cfg = &self.cfg;
        for f in &cfg.families {
            let (tspec, sspec) = (cfg.teacher_spec(f), cfg.student_spec(f));
            if wanted.contains(&Arm::StudentOnly) {
                let o = train_supervised(&sspec, &train, &all, &eval, &eval_idx, &cfg.student_train)?;
                self.save_outcome(f, Arm::StudentOnly.name(), &baseline_file(Arm::StudentOnly), Stage::Baselines, &o, json!({}))?;
            }
            if wanted.contains(&Arm::TeacherOnly) || wanted.contains(&Arm::StandardKd) {
                let teacher = train_supervised(&tspec, &train, &all, &eval, &eval_idx, &cfg.teacher_train)?;
                self.save_outcome(f, Arm::TeacherOnly.name(), &baseline_file(Arm::TeacherOnly), Stage::Baselines, &teacher, json!({}))?;
                if wanted.contains(&Arm::StandardKd) {
                    let o = standard_kd(&teacher.model, &train, &eval, &sspec, &cfg.loss, &cfg.student_train)?;
                    self.save_outcome(
                        f,
                        Arm::StandardKd.name(),
                        &baseline_file(Arm::StandardKd),
                        Stage::Baselines,
                        &o,
                        json!({ "lambda": cfg.loss.lambda_mode.base() }),
                    )?;
                }
            }
        }
        Ok(())
    }

    fn arm_metrics(&self, ckpt: &Checkpoint, data: &Dataset, idx: &[usize]) -> Result<ArmMetrics, CliError> {
        let counts = evaluate(&ckpt.model, data, idx, self.cfg.threshold)?;
        let best_epoch = ckpt.metadata.get("best_epoch").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        Ok(ArmMetrics::new(
            precision_recall_f1(&counts),
            counts,
            ckpt.model.param_count(),
            best_epoch,
        ))
    }

    fn eval(&self) -> Result<(), CliError> {
        let cfg = &self.cfg;
        let clusters = self.load_clusters()?;
        let eval = self.load_dataset(EVAL_CACHE)?;
        let k = clusters.model.k;
        let eval_parts = eval.partitions(k)?;
        let all = eval.all_indices();
        let mut families = BTreeMap::new();
        for f in &cfg.families {
            let dir = self.family_dir(f);
            let mut fam = FamilyMetrics {
                teacher_params: mapkd_core::models::param_count(&cfg.teacher_spec(f)),
                student_params: mapkd_core::models::param_count(&cfg.student_spec(f)),
                ..Default::default()
            };
            for arm in Arm::ALL.into_iter().filter(|a| cfg.has_arm(*a)) {
                let (file, stage) = if arm.is_baseline() {
                    (baseline_file(arm), Stage::Baselines)
                } else {
                    (STUDENT_FILE.to_string(), Stage::Distill)
                };
                let ckpt = self.load_checkpoint(&dir.join(file), stage)?;
                if arm == Arm::EnsembleKd {
                    fam.lambdas = ckpt
                        .metadata
                        .get("lambdas")
                        .and_then(|v| serde_json::from_value(v.clone()).ok())
                        .unwrap_or_default();
                    for (c, idx) in eval_parts.iter().enumerate() {
                        let t = self.load_checkpoint(&dir.join(teacher_file(c)), Stage::TrainTeachers)?;
                        fam.arms.insert(format!("teacher_{c}"), self.arm_metrics(&t, &eval, idx)?);
                    }
                }
                fam.arms.insert(arm.name().to_string(), self.arm_metrics(&ckpt, &eval, &all)?);
            }
            families.insert(f.name(), fam);
        }
        let mut report = MetricsReport {
            stage: Stage::Eval.name().into(),
            config_hash: self.hash.clone(),
            seeds: vec![cfg.seed],
            threshold: cfg.threshold,
            clusters: ClusterSummary {
                feature_view: clusters.view.kind.to_string(),
                k,
                sse: clusters.model.sse,
                train_sizes: clusters.train_sizes,
                eval_sizes: clusters.eval_sizes,
                sweep: clusters.sweep,
            },
            families,
            compression: None,
            reference_compression: None,
        };
        attach_compression(&mut report)?;
        atomic_write(
            &self.path(METRICS_FILE),
            mapkd_core::io::stable_json_pretty(&report)?.as_bytes(),
        )?;
        for (name, fam) in &report.families {
            for (arm, m) in &fam.arms {
                eprintln!("  {name}/{arm}: P {:.4} R {:.4} F1 {:.4}", m.precision, m.recall, m.f1);
            }
        }
        Ok(())
    }

    fn report(&self) -> Result<(), CliError> {
        let path = self.path(METRICS_FILE);
        self.require(&path, Stage::Eval)?;
        let report = MetricsReport::load(&path)?;
        self.check_hash(&path, &report.config_hash, Stage::Eval)?;
        emit_report(&self.dir, &report)?;
        Ok(())
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| {
        CliError::Core(mapkd_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}
