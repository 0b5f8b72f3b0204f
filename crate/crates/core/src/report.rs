//! Run summaries: the machine-readable `metrics.json` and the markdown report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::SweepRow;
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{compression_summary, CompressionSummary, Confusion, Prf};
use crate::models::{Architecture, REFERENCE_CONFIGS, Role};

pub const METRICS_FILE: &str = "metrics.json";
pub const REPORT_FILE: &str = "report.md";

/// Arms in report order; per-cluster teachers follow as `teacher_<k>`.
pub const ARMS: [&str; 4] = ["student_only", "teacher_only", "standard_kd", "ensemble_kd"];

/// Average compression rate stated in the abstract.
pub const STATED_MEAN_COMPRESSION: f64 = 552.0;
/// Average compression rate stated in the results discussion.
pub const STATED_MEAN_COMPRESSION_ALT: f64 = 522.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Confusion,
    pub params: usize,
    pub best_epoch: usize,
}

impl ArmMetrics {
    pub fn new(prf: Prf, counts: Confusion, params: usize, best_epoch: usize) -> Self {
        Self {
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
            counts,
            params,
            best_epoch,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FamilyMetrics {
    pub teacher_params: usize,
    pub student_params: usize,
    /// Keyed by arm name.
    pub arms: BTreeMap<String, ArmMetrics>,
    /// KD weight used for each per-cluster teacher.
    pub lambdas: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub feature_view: String,
    pub k: usize,
    pub sse: f64,
    pub train_sizes: Vec<usize>,
    pub eval_sizes: Vec<usize>,
    pub sweep: Vec<SweepRow>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Pipeline stage that produced the metrics.
    pub stage: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub threshold: f64,
    pub clusters: ClusterSummary,
    /// Keyed by architecture name.
    pub families: BTreeMap<String, FamilyMetrics>,
    /// Ratios of the configured teacher/student pairs.
    pub compression: Option<CompressionSummary>,
    /// Ratios implied by the published reference parameter counts.
    pub reference_compression: Option<CompressionSummary>,
}

impl MetricsReport {
    pub fn arm(&self, family: &str, arm: &str) -> Option<&ArmMetrics> {
        self.families.get(family)?.arms.get(arm)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Compression ratios implied by the published reference parameter counts.
pub fn reference_compression() -> Result<CompressionSummary> {
    let pairs: Vec<(String, usize, usize)> = Architecture::ALL
        .iter()
        .map(|&arch| {
            let count = |role| {
                REFERENCE_CONFIGS
                    .iter()
                    .find(|c| c.0 == arch && c.1 == role)
                    .map(|c| c.4)
                    .expect("every family has both roles")
            };
            (arch.to_string(), count(Role::Teacher), count(Role::Student))
        })
        .collect();
    compression_summary(&pairs)
}

/// Fills `compression` from the per-family parameter counts.
pub fn attach_compression(report: &mut MetricsReport) -> Result<()> {
    let pairs: Vec<(String, usize, usize)> = report
        .families
        .iter()
        .map(|(name, f)| (name.clone(), f.teacher_params, f.student_params))
        .collect();
    report.compression = if pairs.is_empty() {
        None
    } else {
        Some(compression_summary(&pairs)?)
    };
    report.reference_compression = Some(reference_compression()?);
    Ok(())
}

fn teacher_arms(report: &MetricsReport) -> Vec<String> {
    let mut names: BTreeSet<(usize, String)> = BTreeSet::new();
    for f in report.families.values() {
        for name in f.arms.keys() {
            if let Some(k) = name.strip_prefix("teacher_").and_then(|k| k.parse::<usize>().ok()) {
                names.insert((k, name.clone()));
            }
        }
    }
    names.into_iter().map(|(_, n)| n).collect()
}

fn cell(m: Option<&ArmMetrics>, f: impl Fn(&ArmMetrics) -> String) -> String {
    m.map(f).unwrap_or_else(|| "absent".into())
}

/// Every regular file below `dir`, as sorted `/`-separated relative paths.
pub fn list_artifacts(dir: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(dir, e))?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let path = e.path();
            let name = e.file_name().to_string_lossy().into_owned();
            // temp files of in-flight atomic writes
            if name.starts_with('.') {
                continue;
            }
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("walk stays below root");
                out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

/// Markdown rendering of a report plus the artifact list.
pub fn render_markdown(report: &MetricsReport, artifacts: &[String]) -> String {
    let mut s = String::new();
    let families: Vec<&String> = report.families.keys().collect();
    let _ = writeln!(s, "# Run report\n");
    let _ = writeln!(s, "- stage: report (metrics from `{}`)", report.stage);
    let _ = writeln!(s, "- config hash: `{}`", report.config_hash);
    let seeds: Vec<String> = report.seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(s, "- seeds: {}", seeds.join(", "));
    let _ = writeln!(s, "- decision threshold: {}", report.threshold);
    let c = &report.clusters;
    let _ = writeln!(
        s,
        "- clustering: k = {} on the `{}` view, SSE {:.6}, train cluster sizes {:?}, eval cluster sizes {:?}\n",
        c.k, c.feature_view, c.sse, c.train_sizes, c.eval_sizes
    );

    let _ = writeln!(s, "## F1 by arm\n");
    let _ = write!(s, "| arm |");
    for f in &families {
        let _ = write!(s, " {f} |");
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "|---|{}", "---|".repeat(families.len()));
    for arm in ARMS {
        let _ = write!(s, "| {arm} |");
        for f in &families {
            let _ = write!(s, " {} |", cell(report.arm(f, arm), |m| format!("{:.4}", m.f1)));
        }
        let _ = writeln!(s);
    }
    let _ = writeln!(s);

    let _ = writeln!(s, "## Arm details\n");
    let _ = writeln!(s, "| family | arm | precision | recall | F1 | params | best epoch |");
    let _ = writeln!(s, "|---|---|---|---|---|---|---|");
    for f in &families {
        for arm in ARMS {
            match report.arm(f, arm) {
                Some(m) => {
                    let _ = writeln!(
                        s,
                        "| {f} | {arm} | {:.4} | {:.4} | {:.4} | {} | {} |",
                        m.precision, m.recall, m.f1, m.params, m.best_epoch
                    );
                }
                None => {
                    let _ = writeln!(s, "| {f} | {arm} | absent | absent | absent | absent | absent |");
                }
            }
        }
    }
    let _ = writeln!(s);

    let teachers = teacher_arms(report);
    if !teachers.is_empty() {
        let _ = writeln!(s, "## Per-cluster teachers (own-cluster evaluation)\n");
        let _ = writeln!(s, "| family | teacher | precision | recall | F1 | lambda |");
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        for f in &families {
            let fam = &report.families[*f];
            for t in &teachers {
                let k: usize = t["teacher_".len()..].parse().expect("teacher arm names are numbered");
                let lambda = fam.lambdas.get(k).map_or("absent".to_string(), |l| format!("{l:.4}"));
                match fam.arms.get(t) {
                    Some(m) => {
                        let _ = writeln!(s, "| {f} | {t} | {:.4} | {:.4} | {:.4} | {lambda} |", m.precision, m.recall, m.f1);
                    }
                    None => {
                        let _ = writeln!(s, "| {f} | {t} | absent | absent | absent | {lambda} |");
                    }
                }
            }
        }
        let _ = writeln!(s);
    }

    if !c.sweep.is_empty() {
        let _ = writeln!(s, "## SSE versus k\n");
        let _ = writeln!(s, "| k | SSE |");
        let _ = writeln!(s, "|---|---|");
        for row in &c.sweep {
            let _ = writeln!(s, "| {} | {:.6} |", row.k, row.sse);
        }
        let _ = writeln!(s);
    }

    let _ = writeln!(s, "## Compression\n");
    let _ = writeln!(s, "| family | teacher params | student params | ratio |");
    let _ = writeln!(s, "|---|---|---|---|");
    for f in &families {
        let fam = &report.families[*f];
        let ratio = report
            .compression
            .as_ref()
            .and_then(|c| c.per_family.get(*f))
            .map_or("absent".to_string(), |r| format!("{r:.1}x"));
        let _ = writeln!(s, "| {f} | {} | {} | {ratio} |", fam.teacher_params, fam.student_params);
    }
    if let Some(c) = &report.compression {
        let _ = writeln!(s, "\nMean ratio of the configured pairs: {:.1}x.", c.mean);
    }
    if let Some(r) = &report.reference_compression {
        let per: Vec<String> = r.per_family.iter().map(|(k, v)| format!("{k} {v:.1}x")).collect();
        let _ = writeln!(
            s,
            "\nPublished reference parameter counts give {} (mean {:.1}x). \
             The published text states an average of both {STATED_MEAN_COMPRESSION:.0}x and \
             {STATED_MEAN_COMPRESSION_ALT:.0}x; the counts support the latter, so computed values are reported.",
            per.join(", "),
            r.mean
        );
    }
    let _ = writeln!(s);

    let _ = writeln!(s, "## Artifacts\n");
    for a in artifacts {
        let _ = writeln!(s, "- `{a}`");
    }
    s
}

/// Writes `metrics.json` (sorted keys) and `report.md` into `dir`.
pub fn emit_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    io::atomic_write(&dir.join(METRICS_FILE), io::stable_json_pretty(report)?.as_bytes())?;
    let mut artifacts = list_artifacts(dir)?;
    if !artifacts.iter().any(|a| a == REPORT_FILE) {
        artifacts.push(REPORT_FILE.into());
        artifacts.sort();
    }
    io::atomic_write(&dir.join(REPORT_FILE), render_markdown(report, &artifacts).as_bytes())
}
