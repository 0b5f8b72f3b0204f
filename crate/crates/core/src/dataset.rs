//! Model-ready samples: segmented block-address histories as inputs and
//! future-delta bitmaps as multi-label targets.
//!
//! A sample sits at trace position `t` (the access that triggers the
//! prediction). Its input covers the `lookback` block addresses ending at
//! `t`, oldest first; its label marks every delta `block(u) - block(t)` seen
//! among the next `future_window` accesses `u`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, PayloadReader, PayloadWriter};
use crate::nn::Matrix;
use crate::trace::{block_delta, GeometryConfig, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// History length `n`.
    pub lookback: usize,
    /// Future accesses scanned for label deltas.
    pub future_window: usize,
    /// Largest predicted delta magnitude `D`; labels have `2D` bits.
    pub delta_bound: usize,
    /// Segment count `p`.
    pub segments: usize,
    pub segment_bits: u32,
    /// Keep only future accesses on the current page.
    pub page_filter: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            lookback: 10,
            future_window: 128,
            delta_bound: 128,
            segments: 8,
            segment_bits: 4,
            page_filter: true,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self, geometry: &GeometryConfig) -> Result<()> {
        geometry.validate()?;
        if self.lookback == 0 || self.future_window == 0 || self.delta_bound == 0 {
            return Err(Error::config("lookback, future_window and delta_bound must be at least 1"));
        }
        if self.segments == 0 || self.segment_bits == 0 {
            return Err(Error::config("segments and segment_bits must be at least 1"));
        }
        let limit = 64 - geometry.block_bits();
        if self.address_bits() > limit as u64 {
            return Err(Error::config(format!(
                "segments x segment_bits = {} exceeds the {limit} block-address bits",
                self.address_bits()
            )));
        }
        Ok(())
    }

    /// Modeled block-address width `m`.
    pub fn address_bits(&self) -> u64 {
        self.segments as u64 * self.segment_bits as u64
    }

    /// Label width `q = 2D`.
    pub fn num_labels(&self) -> usize {
        2 * self.delta_bound
    }

    /// `(rows, cols)` of one input matrix.
    pub fn input_shape(&self) -> (usize, usize) {
        (self.segments, self.lookback)
    }

    fn truncate(&self, block: u64) -> u64 {
        let m = self.address_bits();
        if m >= 64 {
            block
        } else {
            block & ((1u64 << m) - 1)
        }
    }
}

/// Splits the low `segments * segment_bits` bits of a block address into
/// segments, most significant first, each scaled to `[0, 1]`.
pub fn segment_address(block: u64, segments: usize, segment_bits: u32) -> Vec<f64> {
    let mut out = vec![0.0; segments];
    write_segments(block, segments, segment_bits, &mut out, 1);
    out
}

/// Raw (unscaled) segment values, most significant first.
pub fn raw_segments(block: u64, segments: usize, segment_bits: u32) -> Vec<u64> {
    let mask = (1u64 << segment_bits) - 1;
    (0..segments)
        .map(|i| {
            let shift = (segments - 1 - i) as u64 * segment_bits as u64;
            if shift >= 64 {
                0
            } else {
                (block >> shift) & mask
            }
        })
        .collect()
}

/// Writes scaled segments into `out[0], out[stride], ...`.
fn write_segments(block: u64, segments: usize, segment_bits: u32, out: &mut [f64], stride: usize) {
    let mask = (1u64 << segment_bits) - 1;
    let scale = mask as f64;
    for i in 0..segments {
        let shift = (segments - 1 - i) as u64 * segment_bits as u64;
        let v = if shift >= 64 { 0 } else { (block >> shift) & mask };
        out[i * stride] = v as f64 / scale;
    }
}

/// Bit position of delta `d` in a `2D`-wide bitmap: negatives first, then
/// positives. Delta 0 and `|d| > D` have no bit.
#[inline]
pub fn delta_index(d: i64, bound: usize) -> Option<usize> {
    let b = bound as i64;
    match d {
        _ if d < -b || d > b || d == 0 => None,
        _ if d < 0 => Some((d + b) as usize),
        _ => Some((d + b - 1) as usize),
    }
}

/// Inverse of [`delta_index`].
#[inline]
pub fn index_delta(index: usize, bound: usize) -> i64 {
    let (i, b) = (index as i64, bound as i64);
    if i < b {
        i - b
    } else {
        i - b + 1
    }
}

/// Fixed-width multi-label target.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DeltaBitmap {
    len: usize,
    words: Vec<u64>,
}

impl DeltaBitmap {
    pub fn new(len: usize) -> Self {
        Self {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn from_words(len: usize, words: Vec<u64>) -> Self {
        debug_assert_eq!(words.len(), len.div_ceil(64));
        Self { len, words }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize) {
        assert!(i < self.len, "bit {i} out of range");
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(|&i| self.get(i))
    }

    pub fn to_f64(&self) -> Vec<f64> {
        (0..self.len).map(|i| if self.get(i) { 1.0 } else { 0.0 }).collect()
    }
}

/// Label for trace position `t` from the block-address sequence.
pub fn build_label(blocks: &[u64], t: usize, config: &DatasetConfig, geometry: &GeometryConfig) -> Result<DeltaBitmap> {
    if t + 1 >= blocks.len() {
        return Err(Error::config(format!(
            "position {t} has no future access in a trace of {} blocks",
            blocks.len()
        )));
    }
    let mut bits = DeltaBitmap::new(config.num_labels());
    fill_label(blocks, t, config, geometry, &mut bits);
    Ok(bits)
}

fn fill_label(blocks: &[u64], t: usize, config: &DatasetConfig, geometry: &GeometryConfig, bits: &mut DeltaBitmap) {
    let cur = blocks[t];
    let page = geometry.page_of_block(cur);
    let end = (t + config.future_window).min(blocks.len() - 1);
    for &b in &blocks[t + 1..=end] {
        if config.page_filter && geometry.page_of_block(b) != page {
            continue;
        }
        if let Some(i) = delta_index(block_delta(cur, b), config.delta_bound) {
            bits.set(i);
        }
    }
}

/// All samples of one trace region.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    /// Block address of every trace position, truncated to the modeled width.
    blocks: Vec<u64>,
    positions: Vec<usize>,
    labels: Vec<u64>,
    cluster_ids: Vec<u32>,
}

/// Borrowed view of one sample.
#[derive(Debug, Clone)]
pub struct Sample<'a> {
    pub position: usize,
    pub cluster_id: u32,
    dataset: &'a Dataset,
    index: usize,
}

impl Sample<'_> {
    /// `segments x lookback` input, row-major; column `j` is history access `j`.
    pub fn input(&self) -> Vec<f64> {
        self.dataset.input(self.index)
    }

    pub fn label(&self) -> DeltaBitmap {
        self.dataset.label(self.index)
    }
}

/// Builds one sample per position `t` in `[lookback - 1, len - 2]`.
///
/// `cluster_labels` holds one cluster id per trace position.
pub fn build_dataset(
    records: &[TraceRecord],
    cluster_labels: &[u32],
    config: &DatasetConfig,
    geometry: &GeometryConfig,
) -> Result<Dataset> {
    config.validate(geometry)?;
    if cluster_labels.len() != records.len() {
        return Err(Error::shape(format!(
            "{} cluster labels for {} records",
            cluster_labels.len(),
            records.len()
        )));
    }
    if records.len() < config.lookback + 1 {
        return Err(Error::InsufficientRecords {
            required: config.lookback + 1,
            available: records.len(),
        });
    }
    let raw: Vec<u64> = records.iter().map(|r| geometry.block_address(r.addr)).collect();
    let positions: Vec<usize> = (config.lookback - 1..records.len() - 1).collect();
    let words = config.num_labels().div_ceil(64);
    let mut labels = Vec::with_capacity(positions.len() * words);
    let mut scratch = DeltaBitmap::new(config.num_labels());
    for &t in &positions {
        scratch.words.iter_mut().for_each(|w| *w = 0);
        fill_label(&raw, t, config, geometry, &mut scratch);
        labels.extend_from_slice(&scratch.words);
    }
    let cluster_ids = positions.iter().map(|&t| cluster_labels[t]).collect();
    Ok(Dataset {
        config: *config,
        blocks: raw.iter().map(|&b| config.truncate(b)).collect(),
        positions,
        labels,
        cluster_ids,
    })
}

const CACHE_MAGIC: &[u8; 8] = b"MAPKDDS1";

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    stage: String,
    config_hash: String,
    config: DatasetConfig,
    blocks: usize,
    samples: usize,
    words_per_label: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.config.num_labels()
    }

    pub fn input_len(&self) -> usize {
        self.config.segments * self.config.lookback
    }

    pub fn sample(&self, i: usize) -> Sample<'_> {
        Sample {
            position: self.positions[i],
            cluster_id: self.cluster_ids[i],
            dataset: self,
            index: i,
        }
    }

    pub fn samples(&self) -> impl Iterator<Item = Sample<'_>> {
        (0..self.len()).map(|i| self.sample(i))
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn cluster_ids(&self) -> &[u32] {
        &self.cluster_ids
    }

    fn words(&self) -> usize {
        self.num_labels().div_ceil(64)
    }

    pub fn label(&self, i: usize) -> DeltaBitmap {
        let w = self.words();
        DeltaBitmap::from_words(self.num_labels(), self.labels[i * w..(i + 1) * w].to_vec())
    }

    pub fn input(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.input_len()];
        self.write_input(i, &mut out);
        out
    }

    fn write_input(&self, i: usize, out: &mut [f64]) {
        let (p, n) = (self.config.segments, self.config.lookback);
        let t = self.positions[i];
        for (j, &b) in self.blocks[t + 1 - n..=t].iter().enumerate() {
            write_segments(b, p, self.config.segment_bits, &mut out[j..], n);
        }
    }

    /// Inputs of the given samples as a `batch x (segments * lookback)` matrix.
    pub fn batch_inputs(&self, idx: &[usize]) -> Matrix {
        let len = self.input_len();
        let mut m = Matrix::zeros(idx.len(), len);
        for (r, &i) in idx.iter().enumerate() {
            self.write_input(i, m.row_mut(r));
        }
        m
    }

    /// Labels of the given samples as a `batch x q` 0/1 matrix.
    pub fn batch_labels(&self, idx: &[usize]) -> Matrix {
        let q = self.num_labels();
        let w = self.words();
        let mut m = Matrix::zeros(idx.len(), q);
        for (r, &i) in idx.iter().enumerate() {
            let words = &self.labels[i * w..(i + 1) * w];
            let row = m.row_mut(r);
            for (b, v) in row.iter_mut().enumerate() {
                if words[b / 64] >> (b % 64) & 1 == 1 {
                    *v = 1.0;
                }
            }
        }
        m
    }

    /// Sample indices grouped by cluster id; every id must be below `k`.
    pub fn partitions(&self, k: usize) -> Result<Vec<Vec<usize>>> {
        let mut parts = vec![Vec::new(); k];
        for (i, &c) in self.cluster_ids.iter().enumerate() {
            let slot = parts.get_mut(c as usize).ok_or_else(|| {
                Error::config(format!("sample {i} carries cluster {c} but only {k} clusters exist"))
            })?;
            slot.push(i);
        }
        Ok(parts)
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    pub fn write_cache(&self, path: &Path, config_hash: &str) -> Result<()> {
        let header = CacheHeader {
            stage: "dataset".into(),
            config_hash: config_hash.into(),
            config: self.config,
            blocks: self.blocks.len(),
            samples: self.len(),
            words_per_label: self.words(),
        };
        let mut w = PayloadWriter::new();
        for &b in &self.blocks {
            w.u64(b);
        }
        for (&p, &c) in self.positions.iter().zip(&self.cluster_ids) {
            w.u64(p as u64);
            w.u32(c);
        }
        for &word in &self.labels {
            w.u64(word);
        }
        io::write_container(path, CACHE_MAGIC, &header, &w.into_bytes())
    }

    /// Loads a cache, returning `None` when it was built under another config hash.
    pub fn read_cache(path: &Path, config_hash: &str) -> Result<Option<Dataset>> {
        let (hash, data) = Self::read_cache_any(path)?;
        Ok((hash == config_hash).then_some(data))
    }

    /// Loads a cache regardless of its config hash, returning the hash too.
    pub fn read_cache_any(path: &Path) -> Result<(String, Dataset)> {
        let (header, payload) = io::read_container(path, CACHE_MAGIC)?;
        let header: CacheHeader = serde_json::from_value(header)?;
        let corrupt = || Error::Artifact {
            path: path.to_path_buf(),
            message: "truncated dataset payload".into(),
        };
        let mut r = PayloadReader::new(&payload);
        let blocks = (0..header.blocks).map(|_| r.u64()).collect::<Option<Vec<_>>>().ok_or_else(corrupt)?;
        let mut positions = Vec::with_capacity(header.samples);
        let mut cluster_ids = Vec::with_capacity(header.samples);
        for _ in 0..header.samples {
            positions.push(r.u64().ok_or_else(corrupt)? as usize);
            cluster_ids.push(r.u32().ok_or_else(corrupt)?);
        }
        let labels = (0..header.samples * header.words_per_label)
            .map(|_| r.u64())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(corrupt)?;
        if !r.is_done() {
            return Err(corrupt());
        }
        Ok((
            header.config_hash,
            Dataset {
                config: header.config,
                blocks,
                positions,
                labels,
                cluster_ids,
            },
        ))
    }
}
