//! Predictor families at teacher and student scale.
//!
//! Every model maps a batch of `segments x lookback` inputs (one row per
//! sample, row-major) to `out_labels` raw logits. Width (`dim`) and depth
//! (`layers`) are the only scaling knobs.

mod checkpoint;
mod mixer;
mod recurrent;
mod resnet;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Matrix, Var};

pub use checkpoint::Checkpoint;
pub use resnet::{BlockKind, ResidualLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Recurrent,
    Mixer,
    ResidualConv,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::Recurrent, Architecture::Mixer, Architecture::ResidualConv];

    /// One-letter family tag used in report tables.
    pub fn tag(self) -> &'static str {
        match self {
            Architecture::Recurrent => "L",
            Architecture::Mixer => "M",
            Architecture::ResidualConv => "R",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Recurrent => "recurrent",
            Architecture::Mixer => "mixer",
            Architecture::ResidualConv => "residual_conv",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recurrent" | "lstm" => Ok(Architecture::Recurrent),
            "mixer" | "mlp_mixer" => Ok(Architecture::Mixer),
            "residual_conv" | "resnet" => Ok(Architecture::ResidualConv),
            other => Err(Error::config(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub dim: usize,
    pub layers: usize,
    pub role: Role,
    /// `(segments, lookback)`.
    pub input_shape: (usize, usize),
    pub out_labels: usize,
}

/// Published reference configurations: `(arch, role, dim, layers, parameters)`.
pub const REFERENCE_CONFIGS: [(Architecture, Role, usize, usize, usize); 6] = [
    (Architecture::Recurrent, Role::Teacher, 128, 40, 5_302_000),
    (Architecture::Mixer, Role::Teacher, 512, 20, 5_484_000),
    (Architecture::ResidualConv, Role::Teacher, 30, 50, 5_423_000),
    (Architecture::Recurrent, Role::Student, 16, 1, 11_904),
    (Architecture::Mixer, Role::Student, 18, 8, 10_206),
    (Architecture::ResidualConv, Role::Student, 4, 11, 9_324),
];

impl ModelSpec {
    pub fn new(arch: Architecture, role: Role, dim: usize, layers: usize, input_shape: (usize, usize), out_labels: usize) -> Self {
        Self {
            arch,
            dim,
            layers,
            role,
            input_shape,
            out_labels,
        }
    }

    /// Reference teacher/student configuration for 8x10 inputs and 256 labels.
    pub fn reference(arch: Architecture, role: Role) -> Self {
        let (_, _, dim, layers, _) = REFERENCE_CONFIGS
            .iter()
            .copied()
            .find(|c| c.0 == arch && c.1 == role)
            .expect("every family has both roles");
        Self::new(arch, role, dim, layers, (8, 10), 256)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 {
            return Err(Error::config(format!("{} spec needs dim >= 1 and layers >= 1", self.arch)));
        }
        if self.input_shape.0 == 0 || self.input_shape.1 == 0 || self.out_labels == 0 {
            return Err(Error::config("input shape and label count must be nonzero"));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.0 * self.input_shape.1
    }
}

/// Initialization rule of one parameter tensor.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Uniform(f64),
    Const(f64),
}

#[derive(Debug, Clone)]
pub(crate) struct ParamDef {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl ParamDef {
    pub fn uniform(name: impl Into<String>, rows: usize, cols: usize, bound: f64) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
            init: Init::Uniform(bound),
        }
    }

    pub fn constant(name: impl Into<String>, rows: usize, cols: usize, value: f64) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
            init: Init::Const(value),
        }
    }

    /// Linear layer `fan_in -> fan_out`: weight then bias.
    pub fn linear(prefix: &str, fan_in: usize, fan_out: usize) -> [Self; 2] {
        let bound = 1.0 / (fan_in as f64).sqrt();
        [
            Self::uniform(format!("{prefix}.weight"), fan_in, fan_out, bound),
            Self::uniform(format!("{prefix}.bias"), 1, fan_out, bound),
        ]
    }

    /// Per-column affine of a normalization: gamma then beta.
    pub fn norm(prefix: &str, width: usize) -> [Self; 2] {
        [
            Self::constant(format!("{prefix}.gamma"), 1, width, 1.0),
            Self::constant(format!("{prefix}.beta"), 1, width, 0.0),
        ]
    }
}

/// Hands out parameter variables in declaration order.
pub(crate) struct ParamCursor {
    vars: Vec<Var>,
    next: usize,
}

impl ParamCursor {
    pub fn next(&mut self) -> Var {
        let v = self.vars[self.next];
        self.next += 1;
        v
    }

    pub fn pair(&mut self) -> (Var, Var) {
        (self.next(), self.next())
    }

    fn finished(&self) -> bool {
        self.next == self.vars.len()
    }
}

fn param_defs(spec: &ModelSpec) -> Vec<ParamDef> {
    match spec.arch {
        Architecture::Recurrent => recurrent::param_defs(spec),
        Architecture::Mixer => mixer::param_defs(spec),
        Architecture::ResidualConv => resnet::param_defs(spec),
    }
}

/// Exact number of trainable scalars of a spec.
pub fn param_count(spec: &ModelSpec) -> usize {
    param_defs(spec).iter().map(|d| d.rows * d.cols).sum()
}

/// A model instance: spec plus named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    spec: ModelSpec,
    seed: u64,
    names: Vec<String>,
    params: Vec<Matrix>,
}

/// Seeded initialization of a spec.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Predictor> {
    Predictor::build(spec, seed)
}

impl Predictor {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let defs = param_defs(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(defs.len());
        let mut params = Vec::with_capacity(defs.len());
        for d in defs {
            let m = match d.init {
                Init::Const(v) => Matrix::filled(d.rows, d.cols, v),
                Init::Uniform(b) => Matrix::from_fn(d.rows, d.cols, |_, _| rng.gen_range(-b..=b)),
            };
            names.push(d.name);
            params.push(m);
        }
        Ok(Self {
            spec: *spec,
            seed,
            names,
            params,
        })
    }

    pub(crate) fn from_parts(spec: ModelSpec, seed: u64, names: Vec<String>, params: Vec<Matrix>) -> Result<Self> {
        let defs = param_defs(&spec);
        if defs.len() != params.len()
            || defs
                .iter()
                .zip(names.iter().zip(&params))
                .any(|(d, (n, p))| d.name != *n || (d.rows, d.cols) != p.shape())
        {
            return Err(Error::shape(format!("parameters do not match the {} spec", spec.arch)));
        }
        Ok(Self {
            spec,
            seed,
            names,
            params,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Matrix::len).sum()
    }

    fn check_input(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols() != self.spec.input_len() {
            return Err(Error::shape(format!(
                "input rows have {} values, the {} model expects {}x{}",
                inputs.cols(),
                self.spec.arch,
                self.spec.input_shape.0,
                self.spec.input_shape.1
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `g`; parameter `i` gets gradient slot `i`.
    pub fn forward_graph<'p>(&'p self, g: &mut Graph<'p>, inputs: Matrix) -> Result<Var> {
        self.check_input(&inputs)?;
        let batch = inputs.rows();
        let x = g.constant(inputs);
        let mut cursor = ParamCursor {
            vars: self.params.iter().enumerate().map(|(i, p)| g.param(i, p)).collect(),
            next: 0,
        };
        let out = match self.spec.arch {
            Architecture::Recurrent => recurrent::forward(&self.spec, g, &mut cursor, x, batch),
            Architecture::Mixer => mixer::forward(&self.spec, g, &mut cursor, x, batch),
            Architecture::ResidualConv => resnet::forward(&self.spec, g, &mut cursor, x, batch),
        };
        debug_assert!(cursor.finished(), "forward did not consume every parameter");
        Ok(out)
    }

    /// Logits for a `batch x (segments * lookback)` input matrix.
    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, inputs.clone())?;
        Ok(g.value(out).clone())
    }

    /// Forward plus parameter gradients of a scalar objective whose gradient
    /// with respect to the logits is produced by `loss_grad`.
    pub fn forward_backward<T>(
        &self,
        inputs: Matrix,
        loss_grad: impl FnOnce(&Matrix) -> Result<(T, Matrix)>,
    ) -> Result<(T, Vec<Option<Matrix>>)> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, inputs)?;
        let (value, seed) = loss_grad(g.value(out))?;
        let grads = g.backward(out, seed, self.params.len());
        Ok((value, grads))
    }
}

/// Row-gather index that reads column `t` of every `rows x cols` sample.
pub(crate) fn column_index(batch: usize, rows: usize, cols: usize, t: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(batch * rows);
    for b in 0..batch {
        for i in 0..rows {
            idx.push((b * rows * cols + i * cols + t) as u32);
        }
    }
    idx
}

#[cfg(test)]
mod tests;
