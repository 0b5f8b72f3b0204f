//! Loss functions and the three training procedures: per-cluster teachers,
//! multi-teacher student distillation, and the unclustered baselines.
//!
//! All multi-label losses take `[batch, q]` matrices of raw logits (or
//! probabilities for [`bce_loss`]) and return batch-averaged scalars. The
//! `*_grad` variants also return the gradient with respect to the student
//! logits, which is what [`Predictor::forward_backward`] consumes.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{self, Prf};
use crate::models::{build_model, ModelSpec, Predictor};
use crate::nn::{sigmoid, Matrix, Optimizer, OptimizerKind};

/// Probability clamp used by every log term.
pub const EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum LambdaMode {
    /// The same `lambda` for every teacher.
    Fixed { lambda: f64 },
    /// `lambda_k = base * f1_k / max_j f1_j`, clamped to `[0, 1]`.
    F1Weighted { base: f64 },
}

impl LambdaMode {
    pub fn base(&self) -> f64 {
        match *self {
            LambdaMode::Fixed { lambda } => lambda,
            LambdaMode::F1Weighted { base } => base,
        }
    }
}

impl Default for LambdaMode {
    fn default() -> Self {
        LambdaMode::Fixed { lambda: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    pub lambda_mode: LambdaMode,
    /// Soft-term weight of the single-label loss.
    pub alpha: f64,
    /// Hard-term weight of the single-label loss.
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 4.0,
            lambda_mode: LambdaMode::default(),
            alpha: 0.5,
            beta: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        let base = self.lambda_mode.base();
        if !(0.0..=1.0).contains(&base) {
            return Err(Error::config(format!("lambda must lie in [0, 1], got {base}")));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::config("alpha and beta must be nonnegative"));
        }
        Ok(())
    }
}

/// Order in which an epoch visits the mini-batches of several partitions.
/// Both visit partitions in ascending order and shuffle within each.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterSchedule {
    /// All batches of partition 0, then all of partition 1, and so on.
    Sequential,
    /// Rounds of one batch per partition, partition 0 first, skipping
    /// exhausted partitions.
    #[default]
    Interleaved,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Seeds both parameter initialization and batch shuffling.
    pub seed: u64,
    /// Stop after this many epochs without a validation improvement; 0 disables.
    pub patience: usize,
    pub threshold: f64,
    pub schedule: ClusterSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            patience: 0,
            threshold: metrics::DEFAULT_THRESHOLD,
            schedule: ClusterSchedule::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }
}

fn same_shape(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::shape(format!("{what}: empty batch")));
    }
    Ok(())
}

fn clamp(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

fn bce_cell(y: f64, p: f64) -> f64 {
    let p = clamp(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Binary cross-entropy of probabilities against 0/1 labels, averaged over
/// labels and batch.
pub fn bce_loss(labels: &Matrix, probs: &Matrix) -> Result<f64> {
    same_shape(labels, probs, "bce labels vs probabilities")?;
    let sum: f64 = labels.data().iter().zip(probs.data()).map(|(&y, &p)| bce_cell(y, p)).sum();
    Ok(sum / labels.len() as f64)
}

/// [`bce_loss`] on `sigmoid(logits)` plus its logit gradient.
pub fn bce_loss_grad(labels: &Matrix, logits: &Matrix) -> Result<(f64, Matrix)> {
    same_shape(labels, logits, "bce labels vs logits")?;
    let probs = logits.map(sigmoid);
    let loss = bce_loss(labels, &probs)?;
    let n = labels.len() as f64;
    let grad = Matrix::from_vec(
        labels.rows(),
        labels.cols(),
        labels
            .data()
            .iter()
            .zip(probs.data())
            .map(|(&y, &p)| if p == clamp(p) { (p - y) / n } else { 0.0 })
            .collect(),
    );
    Ok((loss, grad))
}

/// Temperature-softened sigmoid of one logit.
pub fn soft_sigmoid(y: f64, t: f64) -> f64 {
    sigmoid(y / t)
}

pub fn soft_sigmoid_all(logits: &Matrix, t: f64) -> Matrix {
    logits.map(|y| soft_sigmoid(y, t))
}

/// Temperature softmax of one logit vector.
pub fn softmax_t(logits: &[f64], t: f64) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::shape("softmax of an empty logit vector"));
    }
    if t.is_nan() || t <= 0.0 {
        return Err(Error::config(format!("temperature must be > 0, got {t}")));
    }
    let max = logits.iter().map(|z| z / t).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z / t - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Classic single-label distillation loss `alpha * L_soft + beta * L_hard`:
/// `L_soft` is the cross-entropy of the student's T-softened distribution
/// against the teacher's, `L_hard` the cross-entropy of the student's
/// unsoftened distribution against the true class.
pub fn single_label_kd_loss(teacher: &[f64], student: &[f64], truth: usize, t: f64, alpha: f64, beta: f64) -> Result<f64> {
    if teacher.len() != student.len() {
        return Err(Error::shape(format!("{} teacher vs {} student logits", teacher.len(), student.len())));
    }
    if truth >= student.len() {
        return Err(Error::shape(format!("true class {truth} outside {} classes", student.len())));
    }
    let pt = softmax_t(teacher, t)?;
    let ps = softmax_t(student, t)?;
    let soft: f64 = -pt.iter().zip(&ps).map(|(a, b)| a * clamp(*b).ln()).sum::<f64>();
    let hard = -clamp(softmax_t(student, 1.0)?[truth]).ln();
    Ok(alpha * soft + beta * hard)
}

fn kl_cell(zt: f64, zs: f64) -> f64 {
    let (zt, zs) = (clamp(zt), clamp(zs));
    zt * (zt / zs).ln() + (1.0 - zt) * ((1.0 - zt) / (1.0 - zs)).ln()
}

/// Sum over labels of the two-outcome KL divergence between teacher and
/// student soft-sigmoid outputs, in nats, averaged over the batch.
pub fn multilabel_kd_loss(teacher: &Matrix, student: &Matrix, t: f64) -> Result<f64> {
    same_shape(teacher, student, "teacher vs student logits")?;
    let sum: f64 = teacher
        .data()
        .iter()
        .zip(student.data())
        .map(|(&a, &b)| kl_cell(soft_sigmoid(a, t), soft_sigmoid(b, t)))
        .sum();
    Ok(sum / teacher.rows() as f64)
}

/// [`multilabel_kd_loss`] plus its gradient with respect to the student logits.
pub fn multilabel_kd_loss_grad(teacher: &Matrix, student: &Matrix, t: f64) -> Result<(f64, Matrix)> {
    let loss = multilabel_kd_loss(teacher, student, t)?;
    let b = teacher.rows() as f64;
    let grad = Matrix::from_vec(
        student.rows(),
        student.cols(),
        teacher
            .data()
            .iter()
            .zip(student.data())
            .map(|(&a, &s)| {
                let zs = soft_sigmoid(s, t);
                if zs == clamp(zs) {
                    (zs - clamp(soft_sigmoid(a, t))) / (t * b)
                } else {
                    0.0
                }
            })
            .collect(),
    );
    Ok((loss, grad))
}

/// `lambda * KD + (1 - lambda) * BCE`, the BCE term on the student's
/// unsoftened sigmoid.
pub fn total_loss(labels: &Matrix, teacher: &Matrix, student: &Matrix, lambda: f64, t: f64) -> Result<f64> {
    let kd = multilabel_kd_loss(teacher, student, t)?;
    let bce = bce_loss(labels, &student.map(sigmoid))?;
    Ok(lambda * kd + (1.0 - lambda) * bce)
}

/// [`total_loss`] plus its gradient with respect to the student logits.
pub fn total_loss_grad(labels: &Matrix, teacher: &Matrix, student: &Matrix, lambda: f64, t: f64) -> Result<(f64, Matrix)> {
    let (kd, gkd) = multilabel_kd_loss_grad(teacher, student, t)?;
    let (bce, gbce) = bce_loss_grad(labels, student)?;
    let grad = Matrix::from_vec(
        gkd.rows(),
        gkd.cols(),
        gkd.data()
            .iter()
            .zip(gbce.data())
            .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
            .collect(),
    );
    Ok((lambda * kd + (1.0 - lambda) * bce, grad))
}

/// One row of a training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: Predictor,
    pub best_epoch: usize,
    pub best: Prf,
    pub curve: Vec<EpochRecord>,
}

/// Frozen per-cluster teachers with their validation F1 and KD weights.
#[derive(Debug, Clone)]
pub struct TeacherEnsemble {
    pub teachers: Vec<Predictor>,
    pub f1: Vec<f64>,
    pub lambdas: Vec<f64>,
}

impl TeacherEnsemble {
    pub fn new(teachers: Vec<Predictor>, f1: Vec<f64>, mode: &LambdaMode) -> Result<Self> {
        if teachers.is_empty() {
            return Err(Error::config("an ensemble needs at least one teacher"));
        }
        if teachers.len() != f1.len() {
            return Err(Error::shape(format!("{} teachers but {} F1 scores", teachers.len(), f1.len())));
        }
        let q = teachers[0].spec().out_labels;
        if teachers.iter().any(|t| t.spec().out_labels != q) {
            return Err(Error::shape("teachers disagree on the label count"));
        }
        let lambdas = match *mode {
            LambdaMode::Fixed { lambda } => vec![lambda; teachers.len()],
            LambdaMode::F1Weighted { base } => {
                let max = f1.iter().copied().fold(0.0, f64::max);
                f1.iter()
                    .map(|&f| if max > 0.0 { (base * f / max).clamp(0.0, 1.0) } else { base })
                    .collect()
            }
        };
        Ok(Self { teachers, f1, lambdas })
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }
}

/// Training samples visited together: a cluster partition with an optional
/// frozen teacher whose logits are aligned row-for-row with `indices`.
struct Segment<'a> {
    indices: &'a [usize],
    teacher_logits: Option<Matrix>,
    lambda: f64,
}

const SHUFFLE_STREAM: u64 = 0x5eed_ba7c;

/// One epoch of `(segment, row offsets)` batches in visiting order.
fn epoch_batches(segments: &[Segment<'_>], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<(usize, Vec<usize>)> {
    let per_segment: Vec<Vec<Vec<usize>>> = segments
        .iter()
        .map(|seg| {
            let mut order: Vec<usize> = (0..seg.indices.len()).collect();
            order.shuffle(rng);
            order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
        })
        .collect();
    match cfg.schedule {
        ClusterSchedule::Sequential => per_segment
            .into_iter()
            .enumerate()
            .flat_map(|(s, batches)| batches.into_iter().map(move |b| (s, b)))
            .collect(),
        ClusterSchedule::Interleaved => {
            let rounds = per_segment.iter().map(Vec::len).max().unwrap_or(0);
            let mut iters: Vec<_> = per_segment.into_iter().map(Vec::into_iter).collect();
            let mut out = Vec::new();
            for _ in 0..rounds {
                for (s, it) in iters.iter_mut().enumerate() {
                    if let Some(b) = it.next() {
                        out.push((s, b));
                    }
                }
            }
            out
        }
    }
}

/// Mini-batch training shared by every arm: each epoch visits the segments in
/// order, shuffling within each, and validates on `(eval, eval_idx)`.
fn train_loop(
    spec: &ModelSpec,
    train: &Dataset,
    segments: &[Segment<'_>],
    eval: &Dataset,
    eval_idx: &[usize],
    temperature: f64,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if spec.out_labels != train.num_labels() || spec.input_len() != train.input_len() {
        return Err(Error::shape(format!(
            "{} spec does not fit the dataset ({} inputs, {} labels)",
            spec.arch,
            train.input_len(),
            train.num_labels()
        )));
    }
    let mut model = build_model(spec, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, model.params().iter().map(Matrix::shape));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut best: Option<(usize, Prf, Predictor)> = None;
    let mut curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (s, batch) in epoch_batches(segments, cfg, &mut rng) {
            let seg = &segments[s];
            let ids: Vec<usize> = batch.iter().map(|&r| seg.indices[r]).collect();
            let inputs = train.batch_inputs(&ids);
            let labels = train.batch_labels(&ids);
            let teacher = seg.teacher_logits.as_ref().map(|m| m.select_rows(&batch));
            let (loss, grads) = model.forward_backward(inputs, |logits| match &teacher {
                Some(t) => total_loss_grad(&labels, t, logits, seg.lambda, temperature),
                None => bce_loss_grad(&labels, logits),
            })?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            opt.step(model.params_mut(), &grads);
            loss_sum += loss;
            batches += 1;
        }
        let prf = metrics::precision_recall_f1(&metrics::evaluate(&model, eval, eval_idx, cfg.threshold)?);
        curve.push(EpochRecord {
            epoch,
            train_loss: if batches > 0 { loss_sum / batches as f64 } else { 0.0 },
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
        });
        let improved = match &best {
            None => true,
            // without validation data the latest epoch wins
            Some((_, b, _)) => eval_idx.is_empty() || prf.f1 > b.f1,
        };
        if improved {
            best = Some((epoch, prf, model.clone()));
        } else if cfg.patience > 0 && epoch - best.as_ref().map_or(0, |b| b.0) >= cfg.patience {
            break;
        }
    }
    let (best_epoch, best, model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        best_epoch,
        best,
        curve,
    })
}

fn empty_cluster(cluster: usize) -> Error {
    Error::EmptyCluster {
        cluster,
        hint: "it has no training samples; use a smaller k".into(),
    }
}

/// Trains a predictor on BCE over the given partitions (visited in order),
/// validating on `eval_idx`.
pub fn train_supervised(
    spec: &ModelSpec,
    train: &Dataset,
    partitions: &[Vec<usize>],
    eval: &Dataset,
    eval_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let segments: Vec<Segment> = partitions
        .iter()
        .map(|p| Segment {
            indices: p,
            teacher_logits: None,
            lambda: 0.0,
        })
        .collect();
    train_loop(spec, train, &segments, eval, eval_idx, 1.0, cfg)
}

/// Teacher for one cluster: BCE on the cluster's training samples, validated
/// on the cluster's evaluation samples.
pub fn train_teacher(
    cluster: usize,
    spec: &ModelSpec,
    train: &Dataset,
    train_idx: &[usize],
    eval: &Dataset,
    eval_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train_idx.is_empty() {
        return Err(empty_cluster(cluster));
    }
    train_supervised(spec, train, &[train_idx.to_vec()], eval, eval_idx, cfg)
}

/// Distills the ensemble into a fresh student. Each epoch visits clusters in
/// ascending order; cluster `k` samples are scored against teacher `k` with
/// weight `lambda_k`. The student is validated on all of `eval`.
pub fn distill_student(
    ensemble: &TeacherEnsemble,
    train: &Dataset,
    partitions: &[Vec<usize>],
    eval: &Dataset,
    student: &ModelSpec,
    loss: &LossConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    loss.validate()?;
    if partitions.len() != ensemble.len() {
        return Err(Error::shape(format!(
            "{} partitions for {} teachers",
            partitions.len(),
            ensemble.len()
        )));
    }
    if let Some(t) = ensemble.teachers.iter().find(|t| t.spec().out_labels != student.out_labels) {
        return Err(Error::shape(format!(
            "teacher predicts {} labels, student {}",
            t.spec().out_labels,
            student.out_labels
        )));
    }
    let segments = partitions
        .iter()
        .zip(&ensemble.teachers)
        .zip(&ensemble.lambdas)
        .map(|((idx, teacher), &lambda)| {
            Ok(Segment {
                indices: idx,
                teacher_logits: Some(metrics::predict_logits(teacher, train, idx)?),
                lambda,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    train_loop(student, train, &segments, eval, &eval.all_indices(), loss.temperature, cfg)
}

#[derive(Debug, Clone)]
pub struct Baselines {
    pub student_only: TrainOutcome,
    pub teacher_only: TrainOutcome,
    pub standard_kd: TrainOutcome,
}

/// Student-only and teacher-only BCE training on unclustered data, and a
/// student distilled from the unclustered teacher at the configured base lambda.
pub fn train_baselines(
    train: &Dataset,
    eval: &Dataset,
    teacher: &ModelSpec,
    student: &ModelSpec,
    loss: &LossConfig,
    teacher_cfg: &TrainConfig,
    student_cfg: &TrainConfig,
) -> Result<Baselines> {
    let all = vec![train.all_indices()];
    let eval_idx = eval.all_indices();
    let student_only = train_supervised(student, train, &all, eval, &eval_idx, student_cfg)?;
    let teacher_only = train_supervised(teacher, train, &all, eval, &eval_idx, teacher_cfg)?;
    let standard_kd = standard_kd(&teacher_only.model, train, eval, student, loss, student_cfg)?;
    Ok(Baselines {
        student_only,
        teacher_only,
        standard_kd,
    })
}

/// Single-teacher distillation over unclustered data with a fixed lambda.
pub fn standard_kd(
    teacher: &Predictor,
    train: &Dataset,
    eval: &Dataset,
    student: &ModelSpec,
    loss: &LossConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let fixed = LambdaMode::Fixed {
        lambda: loss.lambda_mode.base(),
    };
    let ensemble = TeacherEnsemble::new(vec![teacher.clone()], vec![0.0], &fixed)?;
    let loss = LossConfig {
        lambda_mode: fixed,
        ..*loss
    };
    distill_student(&ensemble, train, &[train.all_indices()], eval, student, &loss, cfg)
}

/// Writes a training curve as CSV, optionally preceded by a `# comment` line.
pub fn write_curve(path: &Path, curve: &[EpochRecord], comment: Option<&str>) -> Result<()> {
    let mut buf = Vec::new();
    if let Some(c) = comment {
        writeln!(buf, "# {c}").expect("writing to a Vec");
    }
    writeln!(buf, "epoch,train_loss,precision,recall,f1").expect("writing to a Vec");
    for r in curve {
        writeln!(buf, "{},{},{},{},{}", r.epoch, r.train_loss, r.precision, r.recall, r.f1).expect("writing to a Vec");
    }
    crate::io::atomic_write(path, &buf)
}

#[cfg(test)]
mod tests;
