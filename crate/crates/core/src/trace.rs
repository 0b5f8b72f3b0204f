//! Memory access traces: parsing, address geometry, synthetic generation and
//! train/eval splitting.
//!
//! The on-disk format is plain text, one access per line, holding the
//! instruction pointer and the data address as hex fields:
//!
//! ```text
//! # ip addr
//! 0x401a2b 0x7ffd8040
//! 0x401a30,0x7ffd8080
//! ```
//!
//! The `0x` prefix is optional and the file may be gzip-compressed.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use flate2::read::GzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One memory access event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceRecord {
    pub ip: u64,
    pub addr: u64,
}

impl TraceRecord {
    pub fn new(ip: u64, addr: u64) -> Self {
        Self { ip, addr }
    }
}

/// Cache block and page sizes used to derive block/page views of an address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub block_size: u64,
    pub page_size: u64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            block_size: 64,
            page_size: 4096,
        }
    }
}

impl GeometryConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.block_size.is_power_of_two() {
            return Err(Error::config(format!(
                "block_size {} is not a power of two",
                self.block_size
            )));
        }
        if !self.page_size.is_power_of_two() {
            return Err(Error::config(format!(
                "page_size {} is not a power of two",
                self.page_size
            )));
        }
        if self.page_size < self.block_size {
            return Err(Error::config(format!(
                "page_size {} is smaller than block_size {}",
                self.page_size, self.block_size
            )));
        }
        Ok(())
    }

    pub fn block_bits(&self) -> u32 {
        self.block_size.trailing_zeros()
    }

    pub fn blocks_per_page(&self) -> u64 {
        self.page_size / self.block_size
    }

    #[inline]
    pub fn block_address(&self, addr: u64) -> u64 {
        addr / self.block_size
    }

    #[inline]
    pub fn page_address(&self, addr: u64) -> u64 {
        addr / self.page_size
    }

    /// Position of the block inside its page.
    #[inline]
    pub fn block_index(&self, addr: u64) -> u64 {
        self.block_address(addr) % self.blocks_per_page()
    }

    /// Page number of a block address.
    #[inline]
    pub fn page_of_block(&self, block: u64) -> u64 {
        block / self.blocks_per_page()
    }
}

/// Decodes one non-comment, non-blank trace line.
///
/// Implement this to read foreign trace formats through [`parse_trace_with`].
pub trait LineDecoder {
    fn decode(&self, line: &str) -> std::result::Result<TraceRecord, String>;
}

/// The canonical `ip addr` hex-pair format.
#[derive(Debug, Clone, Copy, Default)]
pub struct HexPairDecoder;

impl LineDecoder for HexPairDecoder {
    fn decode(&self, line: &str) -> std::result::Result<TraceRecord, String> {
        let mut fields = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty());
        let ip = fields.next().ok_or("missing ip field")?;
        let addr = fields.next().ok_or("missing addr field")?;
        if let Some(extra) = fields.next() {
            return Err(format!("unexpected extra field `{extra}`"));
        }
        Ok(TraceRecord {
            ip: parse_hex(ip)?,
            addr: parse_hex(addr)?,
        })
    }
}

fn parse_hex(field: &str) -> std::result::Result<u64, String> {
    let digits = field
        .strip_prefix("0x")
        .or_else(|| field.strip_prefix("0X"))
        .unwrap_or(field);
    if digits.is_empty() {
        return Err(format!("empty hex field `{field}`"));
    }
    u64::from_str_radix(digits, 16).map_err(|e| format!("bad hex field `{field}`: {e}"))
}

/// Parses a trace file in the canonical format.
pub fn parse_trace(path: impl AsRef<Path>, geometry: &GeometryConfig) -> Result<Vec<TraceRecord>> {
    parse_trace_with(path, geometry, &HexPairDecoder)
}

/// Parses a trace file with a caller-supplied line decoder.
pub fn parse_trace_with(
    path: impl AsRef<Path>,
    geometry: &GeometryConfig,
    decoder: &dyn LineDecoder,
) -> Result<Vec<TraceRecord>> {
    let path = path.as_ref();
    geometry.validate()?;
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 2];
    let gz = match file.read(&mut magic) {
        Ok(2) => magic == [0x1f, 0x8b],
        Ok(_) => false,
        Err(e) => return Err(Error::io(path, e)),
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader: Box<dyn BufRead> = if gz {
        Box::new(BufReader::new(GzDecoder::new(file)))
    } else {
        Box::new(BufReader::new(file))
    };
    let records = read_records(reader, decoder).map_err(|e| match e {
        ReadError::Io(source) => Error::io(path, source),
        ReadError::Line { line, message } => Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        },
    })?;
    if records.is_empty() {
        return Err(Error::EmptyTrace(path.display().to_string()));
    }
    Ok(records)
}

enum ReadError {
    Io(std::io::Error),
    Line { line: usize, message: String },
}

fn read_records(reader: impl BufRead, decoder: &dyn LineDecoder) -> std::result::Result<Vec<TraceRecord>, ReadError> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(ReadError::Io)?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let record = decoder.decode(trimmed).map_err(|message| ReadError::Line {
            line: idx + 1,
            message,
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Parses trace text held in memory. Used by tests and by converters.
pub fn parse_trace_str(text: &str) -> Result<Vec<TraceRecord>> {
    let records = read_records(text.as_bytes(), &HexPairDecoder).map_err(|e| match e {
        ReadError::Io(source) => Error::io("<memory>", source),
        ReadError::Line { line, message } => Error::Parse {
            path: "<memory>".into(),
            line,
            message,
        },
    })?;
    if records.is_empty() {
        return Err(Error::EmptyTrace("<memory>".into()));
    }
    Ok(records)
}

/// Writes records in the canonical format, preceded by a header comment.
pub fn write_trace(mut out: impl Write, records: &[TraceRecord]) -> std::io::Result<()> {
    writeln!(out, "# ip addr")?;
    for r in records {
        writeln!(out, "{:#x} {:#x}", r.ip, r.addr)?;
    }
    out.flush()
}

pub fn block_addresses(records: &[TraceRecord], geometry: &GeometryConfig) -> Vec<u64> {
    records.iter().map(|r| geometry.block_address(r.addr)).collect()
}

/// Signed block-address deltas between consecutive accesses.
pub fn deltas(records: &[TraceRecord], geometry: &GeometryConfig) -> Result<Vec<i64>> {
    if records.len() < 2 {
        return Err(Error::InsufficientRecords {
            required: 2,
            available: records.len(),
        });
    }
    Ok(records
        .windows(2)
        .map(|w| block_delta(geometry.block_address(w[0].addr), geometry.block_address(w[1].addr)))
        .collect())
}

/// `to - from` as a signed block delta.
#[inline]
pub fn block_delta(from: u64, to: u64) -> i64 {
    to.wrapping_sub(from) as i64
}

/// One phase of a multi-phase synthetic trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub stride: i64,
    pub len: usize,
    pub ip: u64,
}

/// Synthetic trace recipes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyntheticKind {
    /// Constant block stride from `base_block`, single instruction pointer.
    Stride { stride: i64, base_block: u64, ip: u64 },
    /// Concatenated phases. Unless `contiguous`, phases sharing an ip
    /// continue one address stream and each distinct ip walks its own
    /// disjoint address region; `contiguous` phases all continue a single
    /// stream, so a phase switch only changes the stride.
    MultiPhase {
        phases: Vec<Phase>,
        #[serde(default)]
        contiguous: bool,
    },
    /// Uniform random blocks in `[0, range)` with a small pool of ips.
    Random { range: u64 },
}

const REGION_SHIFT: u32 = 24;
const RANDOM_IP_POOL: u64 = 16;

impl SyntheticKind {
    pub fn stride(stride: i64) -> Self {
        SyntheticKind::Stride {
            stride,
            base_block: 0,
            ip: 0x400000,
        }
    }

    /// The bundled alternating stride-1 / stride-7 recipe used by the
    /// desk-scale experiment: `rounds` alternations of `chunk` accesses
    /// each along one contiguous stream, with one ip per stride.
    pub fn two_phase(chunk: usize, rounds: usize) -> Self {
        let mut phases = Vec::with_capacity(rounds * 2);
        for _ in 0..rounds {
            phases.push(Phase {
                stride: 1,
                len: chunk,
                ip: 0x401000,
            });
            phases.push(Phase {
                stride: 7,
                len: chunk,
                ip: 0x402000,
            });
        }
        SyntheticKind::MultiPhase { phases, contiguous: true }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SyntheticKind::Stride {
                stride,
                base_block,
                ip,
            } => write!(f, "stride:{stride}@{ip:#x}+{base_block:#x}"),
            SyntheticKind::MultiPhase { phases, contiguous } => {
                write!(f, "{}:", if *contiguous { "chain" } else { "multi" })?;
                for (i, p) in phases.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{}x{}@{:#x}", p.stride, p.len, p.ip)?;
                }
                Ok(())
            }
            SyntheticKind::Random { range } => write!(f, "random:{range}"),
        }
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    /// Compact recipe syntax: `stride:S[@IP][+BASE]`,
    /// `multi:S1xLEN1@IP1,S2xLEN2@IP2,...` (per-ip regions), `chain:...`
    /// (same phase list, one contiguous stream), `random:RANGE`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, body) = s
            .split_once(':')
            .ok_or_else(|| Error::config(format!("synthetic recipe `{s}` has no `kind:` prefix")))?;
        let bad = |what: &str| Error::config(format!("bad {what} in synthetic recipe `{s}`"));
        let int = |v: &str| -> Result<u64> {
            match v.strip_prefix("0x") {
                Some(h) => u64::from_str_radix(h, 16).map_err(|_| bad("number")),
                None => v.parse().map_err(|_| bad("number")),
            }
        };
        match kind {
            "stride" => {
                let (rest, base) = match body.split_once('+') {
                    Some((r, b)) => (r, int(b)?),
                    None => (body, 0),
                };
                let (stride, ip) = match rest.split_once('@') {
                    Some((st, ip)) => (st, int(ip)?),
                    None => (rest, 0x400000),
                };
                Ok(SyntheticKind::Stride {
                    stride: stride.parse().map_err(|_| bad("stride"))?,
                    base_block: base,
                    ip,
                })
            }
            "multi" | "chain" => {
                let phases = body
                    .split(',')
                    .map(|p| {
                        let (sl, ip) = p.split_once('@').ok_or_else(|| bad("phase"))?;
                        let (st, len) = sl.split_once('x').ok_or_else(|| bad("phase"))?;
                        Ok(Phase {
                            stride: st.parse().map_err(|_| bad("stride"))?,
                            len: len.parse().map_err(|_| bad("phase length"))?,
                            ip: int(ip)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(SyntheticKind::MultiPhase {
                    phases,
                    contiguous: kind == "chain",
                })
            }
            "random" => Ok(SyntheticKind::Random { range: int(body)? }),
            other => Err(Error::config(format!("unknown synthetic trace kind `{other}`"))),
        }
    }
}

/// Generates `n` records from a recipe. Deterministic in `seed`.
///
/// A multi-phase recipe is cycled when `n` exceeds the summed phase length.
pub fn generate_synthetic(
    kind: &SyntheticKind,
    n: usize,
    seed: u64,
    geometry: &GeometryConfig,
) -> Result<Vec<TraceRecord>> {
    geometry.validate()?;
    if n == 0 {
        return Err(Error::config("synthetic trace length must be at least 1"));
    }
    let bs = geometry.block_size;
    match kind {
        SyntheticKind::Stride {
            stride,
            base_block,
            ip,
        } => {
            if *stride == 0 {
                return Err(Error::config("stride must be nonzero"));
            }
            (0..n)
                .map(|i| {
                    let block = (*base_block as i128) + (*stride as i128) * i as i128;
                    let addr = block * bs as i128;
                    if !(0..=u64::MAX as i128).contains(&addr) {
                        return Err(Error::config(format!(
                            "stride {stride} leaves the 64-bit address space after {i} accesses"
                        )));
                    }
                    Ok(TraceRecord::new(*ip, addr as u64))
                })
                .collect()
        }
        SyntheticKind::MultiPhase { phases, contiguous } => {
            if phases.is_empty() || phases.iter().all(|p| p.len == 0) {
                return Err(Error::config("multi-phase recipe has no accesses"));
            }
            if let Some(p) = phases.iter().find(|p| p.stride == 0) {
                return Err(Error::config(format!("phase at ip {:#x} has zero stride", p.ip)));
            }
            // one cursor per distinct ip (or a single shared one), each in its own region
            let mut streams: Vec<(u64, i64)> = Vec::new();
            let mut out = Vec::with_capacity(n);
            'outer: loop {
                for phase in phases {
                    let slot = match streams.iter().position(|(ip, _)| *contiguous || *ip == phase.ip) {
                        Some(s) => s,
                        None => {
                            let region = (streams.len() as i64 + 1) << REGION_SHIFT;
                            streams.push((phase.ip, region + (1 << (REGION_SHIFT - 1))));
                            streams.len() - 1
                        }
                    };
                    for _ in 0..phase.len {
                        if out.len() == n {
                            break 'outer;
                        }
                        let cursor = &mut streams[slot].1;
                        if *cursor < 0 {
                            return Err(Error::config("phase stride walks below address 0"));
                        }
                        out.push(TraceRecord::new(phase.ip, *cursor as u64 * bs));
                        *cursor += phase.stride;
                    }
                }
            }
            Ok(out)
        }
        SyntheticKind::Random { range } => {
            if *range == 0 {
                return Err(Error::config("random range must be at least 1 block"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..n)
                .map(|_| {
                    let ip = 0x400000 + 4 * rng.gen_range(0..RANDOM_IP_POOL);
                    let block = rng.gen_range(0..*range);
                    TraceRecord::new(ip, block * bs)
                })
                .collect())
        }
    }
}

/// Record counts for the skip / train / eval regions of a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSplit {
    pub skip: usize,
    pub train: usize,
    pub eval: usize,
}

impl Default for TraceSplit {
    fn default() -> Self {
        Self {
            skip: 1_000_000,
            train: 8_000_000,
            eval: 2_000_000,
        }
    }
}

/// Splits `records` into consecutive train and eval regions after `skip`.
pub fn split<'a>(records: &'a [TraceRecord], split: &TraceSplit) -> Result<(&'a [TraceRecord], &'a [TraceRecord])> {
    let required = split
        .skip
        .checked_add(split.train)
        .and_then(|v| v.checked_add(split.eval))
        .ok_or_else(|| Error::config("trace split overflows"))?;
    if required > records.len() {
        return Err(Error::InsufficientRecords {
            required,
            available: records.len(),
        });
    }
    let train_end = split.skip + split.train;
    Ok((&records[split.skip..train_end], &records[train_end..required]))
}
