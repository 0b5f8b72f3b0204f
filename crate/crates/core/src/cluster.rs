//! Per-access feature extraction and k-means partitioning of a trace.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{block_delta, GeometryConfig, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    PastBlockAddress,
    PastBlockDelta,
    PastInstructionPointer,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 3] = [
        FeatureKind::PastBlockAddress,
        FeatureKind::PastBlockDelta,
        FeatureKind::PastInstructionPointer,
    ];

    pub fn label(self) -> &'static str {
        match self {
            FeatureKind::PastBlockAddress => "Past Block Address",
            FeatureKind::PastBlockDelta => "Past Block Address Deltas",
            FeatureKind::PastInstructionPointer => "Past Instruction Pointer",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::PastBlockAddress => "past_block_address",
            FeatureKind::PastBlockDelta => "past_block_delta",
            FeatureKind::PastInstructionPointer => "past_instruction_pointer",
        })
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "past_block_address" | "address" => Ok(FeatureKind::PastBlockAddress),
            "past_block_delta" | "delta" => Ok(FeatureKind::PastBlockDelta),
            "past_instruction_pointer" | "ip" => Ok(FeatureKind::PastInstructionPointer),
            other => Err(Error::config(format!("unknown feature view `{other}`"))),
        }
    }
}

/// Which per-access history the clustering sees, and how far back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureView {
    pub kind: FeatureKind,
    #[serde(default = "default_window")]
    pub window: usize,
}

fn default_window() -> usize {
    1
}

impl FeatureView {
    pub fn new(kind: FeatureKind, window: usize) -> Self {
        Self { kind, window }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::config("feature window must be at least 1"));
        }
        Ok(())
    }
}

/// Per-dimension z-score parameters. A zero `scale` marks a constant
/// dimension, which standardizes to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn fit(values: &[f64], dim: usize) -> Self {
        let n = (values.len() / dim.max(1)) as f64;
        let mut mean = vec![0.0; dim];
        for row in values.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for row in values.chunks_exact(dim) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .zip(&mean)
            .map(|(s, m)| {
                let sd = (s / n).sqrt();
                // spread below rounding noise of the mean counts as constant
                if sd <= m.abs() * 1e-12 || sd == 0.0 {
                    0.0
                } else {
                    sd
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, values: &mut [f64]) {
        let dim = self.dim();
        for row in values.chunks_exact_mut(dim) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = if *s == 0.0 { 0.0 } else { (*v - m) / s };
            }
        }
    }

    pub fn invert(&self, values: &mut [f64]) {
        let dim = self.dim();
        for row in values.chunks_exact_mut(dim) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = *v * s + m;
            }
        }
    }
}

/// Feature rows (standardized) with the trace positions they describe.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub dim: usize,
    pub values: Vec<f64>,
    pub positions: Vec<usize>,
    pub standardization: Standardization,
}

impl FeatureMatrix {
    /// Wraps already-prepared rows without rescaling them.
    pub fn from_rows(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || !values.len().is_multiple_of(dim) {
            return Err(Error::shape(format!("{} values do not form rows of width {dim}", values.len())));
        }
        let n = values.len() / dim;
        Ok(Self {
            dim,
            values,
            positions: (0..n).collect(),
            standardization: Standardization::identity(dim),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// Raw (unscaled) feature rows and their trace positions.
pub fn extract_raw(
    records: &[TraceRecord],
    view: &FeatureView,
    geometry: &GeometryConfig,
) -> Result<(Vec<f64>, Vec<usize>)> {
    view.validate()?;
    let w = view.window;
    if records.len() <= w {
        return Err(Error::InsufficientRecords {
            required: w + 1,
            available: records.len(),
        });
    }
    let blocks: Vec<u64> = records.iter().map(|r| geometry.block_address(r.addr)).collect();
    let positions: Vec<usize> = (w..records.len()).collect();
    let mut values = Vec::with_capacity(positions.len() * w);
    for &t in &positions {
        match view.kind {
            FeatureKind::PastBlockAddress => values.extend(blocks[t - w..t].iter().map(|&b| b as f64)),
            FeatureKind::PastInstructionPointer => values.extend(records[t - w..t].iter().map(|r| r.ip as f64)),
            // deltas into positions t-w+1 ..= t
            FeatureKind::PastBlockDelta => {
                values.extend((t + 1 - w..=t).map(|u| block_delta(blocks[u - 1], blocks[u]) as f64))
            }
        }
    }
    Ok((values, positions))
}

/// Extracts features and standardizes them with their own statistics.
pub fn extract_features(records: &[TraceRecord], view: &FeatureView, geometry: &GeometryConfig) -> Result<FeatureMatrix> {
    let (mut values, positions) = extract_raw(records, view, geometry)?;
    let standardization = Standardization::fit(&values, view.window);
    standardization.apply(&mut values);
    Ok(FeatureMatrix {
        dim: view.window,
        values,
        positions,
        standardization,
    })
}

/// Extracts features and scales them with previously fitted parameters.
pub fn extract_features_with(
    records: &[TraceRecord],
    view: &FeatureView,
    geometry: &GeometryConfig,
    standardization: &Standardization,
) -> Result<FeatureMatrix> {
    if standardization.dim() != view.window {
        return Err(Error::shape(format!(
            "standardization has {} dims, view window is {}",
            standardization.dim(),
            view.window
        )));
    }
    let (mut values, positions) = extract_raw(records, view, geometry)?;
    standardization.apply(&mut values);
    Ok(FeatureMatrix {
        dim: view.window,
        values,
        positions,
        standardization: standardization.clone(),
    })
}

/// Squared Euclidean distance.
pub fn squared_euclidean(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(format!("vector lengths {} and {}", x.len(), y.len())));
    }
    Ok(sq_dist(x, y))
}

#[inline]
fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Index and distance of the nearest centroid; ties go to the lowest index.
#[inline]
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub view: Option<FeatureView>,
    pub standardization: Standardization,
    pub sse: f64,
    /// SSE after every assignment step, initial seeding first.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansModel {
    pub fn dim(&self) -> usize {
        self.standardization.dim()
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub model: KMeansModel,
    /// Cluster of every feature row.
    pub labels: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iters: 100,
            tol: 1e-9,
        }
    }
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans_fit(features: &FeatureMatrix, params: &KMeansParams) -> Result<KMeansFit> {
    let KMeansParams { k, seed, max_iters, tol } = *params;
    let n = features.n_rows();
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    if k > n {
        return Err(Error::config(format!("k = {k} exceeds the {n} feature rows")));
    }
    if let Some(i) = features.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("feature value at flat index {i}")));
    }
    let dim = features.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeanspp_init(features, k, &mut rng);

    let (mut labels, mut dists) = assign_all(features, &centroids);
    let mut sse: f64 = dists.iter().sum();
    let mut history = vec![sse];
    let mut iterations = 0;

    while iterations < max_iters {
        iterations += 1;
        // update step
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l as usize] += 1;
            for (s, v) in sums[l as usize].iter_mut().zip(features.row(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            } else {
                // reseed at the point farthest from its own centroid
                let far = dists
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc })
                    .0;
                centroids[j] = features.row(far).to_vec();
                dists[far] = 0.0;
            }
        }
        // assignment step
        let (new_labels, new_dists) = assign_all(features, &centroids);
        let new_sse: f64 = new_dists.iter().sum();
        history.push(new_sse);
        let stable = new_labels == labels;
        let improvement = sse - new_sse;
        labels = new_labels;
        dists = new_dists;
        sse = new_sse;
        if stable || improvement <= tol * sse.max(f64::MIN_POSITIVE) {
            break;
        }
    }

    Ok(KMeansFit {
        model: KMeansModel {
            k,
            centroids,
            view: None,
            standardization: features.standardization.clone(),
            sse,
            sse_history: history,
            iterations,
        },
        labels,
    })
}

fn kmeanspp_init(features: &FeatureMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = features.n_rows();
    let mut centroids = Vec::with_capacity(k);
    centroids.push(features.row(rng.gen_range(0..n)).to_vec());
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(features.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let c = features.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(features.row(i), &c));
        }
        centroids.push(c);
    }
    centroids
}

fn assign_all(features: &FeatureMatrix, centroids: &[Vec<f64>]) -> (Vec<u32>, Vec<f64>) {
    (0..features.n_rows())
        .map(|i| {
            let (j, d) = nearest(features.row(i), centroids);
            (j as u32, d)
        })
        .unzip()
}

fn check_dim(model: &KMeansModel, features: &FeatureMatrix) -> Result<()> {
    let want = model.centroids.first().map_or(0, Vec::len);
    if features.dim != want {
        return Err(Error::shape(format!(
            "features have {} dims, centroids have {want}",
            features.dim
        )));
    }
    Ok(())
}

/// Nearest-centroid cluster of every feature row.
pub fn kmeans_assign(model: &KMeansModel, features: &FeatureMatrix) -> Result<Vec<u32>> {
    check_dim(model, features)?;
    Ok(assign_all(features, &model.centroids).0)
}

/// Sum of squared distances from each row to its nearest centroid.
pub fn sse(model: &KMeansModel, features: &FeatureMatrix) -> Result<f64> {
    check_dim(model, features)?;
    Ok(assign_all(features, &model.centroids).1.iter().sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub sse: f64,
}

/// Fits every `k` (keeping the best of `restarts` seeded runs) and tabulates SSE.
pub fn sweep_k(features: &FeatureMatrix, k_values: &[usize], seed: u64, restarts: usize) -> Result<Vec<SweepRow>> {
    k_values
        .iter()
        .map(|&k| {
            let best = best_of(features, &KMeansParams::new(k, seed), restarts)?;
            Ok(SweepRow { k, sse: best.model.sse })
        })
        .collect()
}

/// Lowest-SSE fit over `restarts` seeds `seed, seed + 1, ...`.
pub fn best_of(features: &FeatureMatrix, params: &KMeansParams, restarts: usize) -> Result<KMeansFit> {
    let mut best: Option<KMeansFit> = None;
    for r in 0..restarts.max(1) as u64 {
        let fit = kmeans_fit(
            features,
            &KMeansParams {
                seed: params.seed.wrapping_add(r),
                ..*params
            },
        )?;
        if best.as_ref().is_none_or(|b| fit.model.sse < b.model.sse) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Cluster id per trace position; positions without a feature row get 0.
pub fn labels_per_position(trace_len: usize, positions: &[usize], labels: &[u32]) -> Vec<u32> {
    let mut out = vec![0; trace_len];
    for (&p, &l) in positions.iter().zip(labels) {
        out[p] = l;
    }
    out
}

/// Run-length encodes a label sequence as `(label, run)` pairs.
pub fn rle_encode(labels: &[u32]) -> Vec<(u32, u32)> {
    let mut runs: Vec<(u32, u32)> = Vec::new();
    for &l in labels {
        match runs.last_mut() {
            Some((v, n)) if *v == l && *n < u32::MAX => *n += 1,
            _ => runs.push((l, 1)),
        }
    }
    runs
}

pub fn rle_decode(runs: &[(u32, u32)]) -> Vec<u32> {
    runs.iter().flat_map(|&(l, n)| std::iter::repeat_n(l, n as usize)).collect()
}

/// Writes `page_address,instruction_pointer,block_index,cluster_id` rows for
/// 3-D scatter rendering by external tools.
pub fn write_plot_data(
    mut out: impl Write,
    records: &[TraceRecord],
    labels_per_position: &[u32],
    geometry: &GeometryConfig,
) -> std::io::Result<()> {
    writeln!(out, "page_address,instruction_pointer,block_index,cluster_id")?;
    for (r, l) in records.iter().zip(labels_per_position) {
        writeln!(
            out,
            "{},{},{},{}",
            geometry.page_address(r.addr),
            r.ip,
            geometry.block_index(r.addr),
            l
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{generate_synthetic, SyntheticKind};

    fn recs_from_blocks(blocks: &[u64]) -> Vec<TraceRecord> {
        blocks.iter().map(|b| TraceRecord::new(0x10, b * 64)).collect()
    }

    #[test]
    fn delta_view_rows() {
        let g = GeometryConfig::default();
        let (vals, pos) = extract_raw(
            &recs_from_blocks(&[5, 6, 8]),
            &FeatureView::new(FeatureKind::PastBlockDelta, 1),
            &g,
        )
        .unwrap();
        assert_eq!(vals, vec![1.0, 2.0]);
        assert_eq!(pos, vec![1, 2]);
    }

    #[test]
    fn ip_view_rows() {
        let g = GeometryConfig::default();
        let recs = vec![TraceRecord::new(0xa, 0), TraceRecord::new(0xa, 64), TraceRecord::new(0xb, 128)];
        let (vals, pos) = extract_raw(&recs, &FeatureView::new(FeatureKind::PastInstructionPointer, 2), &g).unwrap();
        assert_eq!(pos, vec![2]);
        assert_eq!(vals, vec![10.0, 10.0]);
    }

    #[test]
    fn short_trace_is_error() {
        let g = GeometryConfig::default();
        let view = FeatureView::new(FeatureKind::PastBlockAddress, 3);
        assert!(extract_raw(&recs_from_blocks(&[1, 2, 3]), &view, &g).is_err());
        assert!(extract_raw(&recs_from_blocks(&[1, 2, 3, 4]), &view, &g).is_ok());
        assert!(extract_raw(&recs_from_blocks(&[1, 2]), &FeatureView::new(FeatureKind::PastBlockDelta, 0), &g).is_err());
    }

    #[test]
    fn sliding_window_oracle() {
        let g = GeometryConfig::default();
        let recs = generate_synthetic(&SyntheticKind::Random { range: 5000 }, 300, 11, &g).unwrap();
        for kind in FeatureKind::ALL {
            for w in [1, 3] {
                let (vals, pos) = extract_raw(&recs, &FeatureView::new(kind, w), &g).unwrap();
                let mut want = Vec::new();
                for t in w..recs.len() {
                    for j in 0..w {
                        let v = match kind {
                            FeatureKind::PastBlockAddress => (recs[t - w + j].addr / 64) as f64,
                            FeatureKind::PastInstructionPointer => recs[t - w + j].ip as f64,
                            FeatureKind::PastBlockDelta => {
                                let u = t - w + 1 + j;
                                (recs[u].addr / 64) as f64 - (recs[u - 1].addr / 64) as f64
                            }
                        };
                        want.push(v);
                    }
                }
                assert_eq!(vals, want, "{kind} window {w}");
                assert_eq!(pos.len(), recs.len() - w);
            }
        }
    }

    #[test]
    fn standardization_properties() {
        let g = GeometryConfig::default();
        let recs = generate_synthetic(&SyntheticKind::Random { range: 1 << 30 }, 500, 3, &g).unwrap();
        let view = FeatureView::new(FeatureKind::PastBlockAddress, 2);
        let fm = extract_features(&recs, &view, &g).unwrap();
        for d in 0..2 {
            let col: Vec<f64> = fm.values.iter().skip(d).step_by(2).copied().collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
        }
        let (raw, _) = extract_raw(&recs, &view, &g).unwrap();
        let mut back = fm.values.clone();
        fm.standardization.invert(&mut back);
        for (a, b) in back.iter().zip(&raw) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
        // constant dimension maps to zeros
        let constant = vec![TraceRecord::new(7, 64); 10];
        let fm = extract_features(&constant, &FeatureView::new(FeatureKind::PastInstructionPointer, 1), &g).unwrap();
        assert!(fm.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn squared_distance() {
        assert_eq!(squared_euclidean(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 25.0);
        assert_eq!(squared_euclidean(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        assert!(squared_euclidean(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn four_points_two_clusters() {
        let fm = FeatureMatrix::from_rows(1, vec![0.0, 1.0, 10.0, 11.0]).unwrap();
        for seed in 0..10 {
            let fit = kmeans_fit(&fm, &KMeansParams::new(2, seed)).unwrap();
            let mut c: Vec<f64> = fit.model.centroids.iter().map(|c| c[0]).collect();
            c.sort_by(f64::total_cmp);
            assert_eq!(c, vec![0.5, 10.5]);
            assert_eq!(fit.model.sse, 1.0);
            assert_eq!(sse(&fit.model, &fm).unwrap(), 1.0);
        }
    }

    #[test]
    fn k_equal_one_is_mean() {
        let fm = FeatureMatrix::from_rows(2, vec![1.0, 2.0, 3.0, 5.0, -4.0, 8.0]).unwrap();
        let fit = kmeans_fit(&fm, &KMeansParams::new(1, 0)).unwrap();
        assert_eq!(fit.model.centroids[0], vec![0.0, 5.0]);
        // total variance * n
        assert_eq!(fit.model.sse, (1.0 + 9.0 + 16.0) + (9.0 + 0.0 + 9.0));
    }

    #[test]
    fn errors() {
        let fm = FeatureMatrix::from_rows(1, vec![0.0, 1.0]).unwrap();
        assert!(kmeans_fit(&fm, &KMeansParams::new(3, 0)).is_err());
        assert!(kmeans_fit(&fm, &KMeansParams::new(0, 0)).is_err());
        let nan = FeatureMatrix::from_rows(1, vec![0.0, f64::NAN]).unwrap();
        assert!(matches!(kmeans_fit(&nan, &KMeansParams::new(1, 0)), Err(Error::NonFinite(_))));
        let fit = kmeans_fit(&fm, &KMeansParams::new(1, 0)).unwrap();
        let wide = FeatureMatrix::from_rows(2, vec![0.0, 1.0]).unwrap();
        assert!(kmeans_assign(&fit.model, &wide).is_err());
        assert!(sse(&fit.model, &wide).is_err());
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        let model = KMeansModel {
            k: 3,
            centroids: vec![vec![-1.0], vec![1.0], vec![5.0]],
            view: None,
            standardization: Standardization::identity(1),
            sse: 0.0,
            sse_history: vec![],
            iterations: 0,
        };
        let fm = FeatureMatrix::from_rows(1, vec![0.0, 5.0, 3.0]).unwrap();
        assert_eq!(kmeans_assign(&model, &fm).unwrap(), vec![0, 2, 1]);
    }

    #[test]
    fn duplicate_point_adds_its_distance() {
        let fm = FeatureMatrix::from_rows(1, vec![0.0, 1.0, 10.0, 11.0]).unwrap();
        let fit = kmeans_fit(&fm, &KMeansParams::new(2, 1)).unwrap();
        let fm2 = FeatureMatrix::from_rows(1, vec![0.0, 1.0, 10.0, 11.0, 11.0]).unwrap();
        assert_eq!(sse(&fit.model, &fm2).unwrap(), 1.0 + 0.25);
    }

    #[test]
    fn one_point_per_cluster_has_zero_sse() {
        let fm = FeatureMatrix::from_rows(1, vec![3.0, -1.0, 8.0, 2.5]).unwrap();
        let rows = sweep_k(&fm, &[4], 0, 1).unwrap();
        assert_eq!(rows[0].sse, 0.0);
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        // many duplicates: k-means++ may pick duplicate seeds, repair keeps k clusters alive
        let mut v = vec![0.0; 20];
        v.extend([100.0, 101.0, 102.0]);
        let fm = FeatureMatrix::from_rows(1, v).unwrap();
        for seed in 0..20 {
            let fit = kmeans_fit(&fm, &KMeansParams::new(3, seed)).unwrap();
            assert!(fit.model.centroids.iter().flatten().all(|c| c.is_finite()));
            assert!(fit.model.sse <= 2.0 + 1e-12, "seed {seed}: sse {}", fit.model.sse);
        }
    }

    #[test]
    fn rle_round_trip() {
        let labels = vec![0, 0, 1, 1, 1, 0, 2];
        let runs = rle_encode(&labels);
        assert_eq!(runs, vec![(0, 2), (1, 3), (0, 1), (2, 1)]);
        assert_eq!(rle_decode(&runs), labels);
    }

    #[test]
    fn plot_rows() {
        let g = GeometryConfig::default();
        let recs = vec![TraceRecord::new(0x400, 4096 + 128)];
        let mut out = Vec::new();
        write_plot_data(&mut out, &recs, &[2], &g).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "page_address,instruction_pointer,block_index,cluster_id\n1,1024,2,2\n"
        );
    }
}
