//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed, not copied; [`Graph::backward`] returns their gradients in the
//! order they were registered by index.

use super::matrix::{gemm, Matrix};

const NORM_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Marks an absent source element in a gather map (reads as zero).
pub const GATHER_ZERO: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value<'p> {
    Owned(Matrix),
    Borrowed(&'p Matrix),
}

impl Value<'_> {
    fn get(&self) -> &Matrix {
        match self {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }
}

enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    Gather {
        src: Var,
        index: Vec<u32>,
    },
    SliceCols {
        src: Var,
        start: usize,
    },
    Norm {
        src: Var,
        gamma: Var,
        beta: Var,
        group_rows: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanRows {
        src: Var,
        group: usize,
    },
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        self.nodes[v.0].value.get()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Registers a borrowed parameter; `slot` indexes the gradient output.
    pub fn param(&mut self, slot: usize, value: &'p Matrix) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(value),
            op: Op::Param(slot),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// Adds a `1 x cols` row vector to every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (x, b) = (self.value(a), self.value(bias));
        assert_eq!(b.rows(), 1);
        assert_eq!(x.cols(), b.cols(), "bias width");
        let mut out = x.clone();
        let cols = out.cols();
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&b.data()[..cols]) {
                *o += bv;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(out, Op::AddBias(a, bias), ng)
    }

    /// `x * w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_bias(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shapes");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Matrix::from_vec(x.rows(), x.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shapes");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Matrix::from_vec(x.rows(), x.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()));
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    /// Builds a `rows x cols` matrix whose element `i` is `src.data()[index[i]]`,
    /// or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(&mut self, src: Var, rows: usize, cols: usize, index: Vec<u32>) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length");
        let s = self.value(src).data();
        let data = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { s[i as usize] })
            .collect();
        let out = Matrix::from_vec(rows, cols, data);
        let ng = self.ng(src);
        self.push(out, Op::Gather { src, index }, ng)
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, width: usize) -> Var {
        let s = self.value(src);
        assert!(start + width <= s.cols(), "column slice out of range");
        let out = Matrix::from_fn(s.rows(), width, |r, c| s.get(r, start + c));
        let ng = self.ng(src);
        self.push(out, Op::SliceCols { src, start }, ng)
    }

    /// Normalizes each group of `group_rows` consecutive rows jointly over all
    /// of its elements, then applies a per-column affine transform.
    ///
    /// `group_rows == 1` is layer normalization over the feature axis; with
    /// channels as columns and one sample's spatial positions as a group it is
    /// single-group normalization of a feature map.
    pub fn norm(&mut self, src: Var, gamma: Var, beta: Var, group_rows: usize) -> Var {
        let x = self.value(src);
        let (g, b) = (self.value(gamma), self.value(beta));
        let cols = x.cols();
        assert_eq!(g.shape(), (1, cols), "norm gamma shape");
        assert_eq!(b.shape(), (1, cols), "norm beta shape");
        assert!(group_rows > 0 && x.rows().is_multiple_of(group_rows), "norm group size");
        let groups = x.rows() / group_rows;
        let gsize = group_rows * cols;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(groups);
        let mut out = Matrix::zeros(x.rows(), cols);
        for gi in 0..groups {
            let block = &x.data()[gi * gsize..(gi + 1) * gsize];
            let mean = block.iter().sum::<f64>() / gsize as f64;
            let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gsize as f64;
            let istd = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(istd);
            let xh = &mut xhat[gi * gsize..(gi + 1) * gsize];
            let o = &mut out.data_mut()[gi * gsize..(gi + 1) * gsize];
            for (i, v) in block.iter().enumerate() {
                let h = (v - mean) * istd;
                xh[i] = h;
                let c = i % cols;
                o[i] = h * g.data()[c] + b.data()[c];
            }
        }
        let ng = self.ng(src) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::Norm {
                src,
                gamma,
                beta,
                group_rows,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Averages each group of `group` consecutive rows into one row.
    pub fn mean_rows(&mut self, src: Var, group: usize) -> Var {
        let x = self.value(src);
        assert!(group > 0 && x.rows().is_multiple_of(group), "mean_rows group size");
        let groups = x.rows() / group;
        let cols = x.cols();
        let mut out = Matrix::zeros(groups, cols);
        let scale = 1.0 / group as f64;
        for gi in 0..groups {
            for r in gi * group..(gi + 1) * group {
                for (o, v) in out.row_mut(gi).iter_mut().zip(x.row(r)) {
                    *o += v;
                }
            }
            for o in out.row_mut(gi) {
                *o *= scale;
            }
        }
        let ng = self.ng(src);
        self.push(out, Op::MeanRows { src, group }, ng)
    }

    /// Back-propagates `seed` (the gradient of a scalar objective with respect
    /// to `root`) and returns one gradient slot per registered parameter.
    pub fn backward(&self, root: Var, seed: Matrix, n_params: usize) -> Vec<Option<Matrix>> {
        assert_eq!(seed.shape(), self.value(root).shape(), "seed gradient shape");
        let mut grads: Vec<Option<Matrix>> = (0..=root.0).map(|_| None).collect();
        let mut params: Vec<Option<Matrix>> = (0..n_params).map(|_| None).collect();
        grads[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(slot) => accumulate(&mut params[*slot], dy),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        let mut da = Matrix::zeros(av.rows(), av.cols());
                        gemm(false, true, 1.0, &dy, bv, 0.0, &mut da);
                        accumulate(&mut grads[a.0], da);
                    }
                    if self.ng(*b) {
                        let mut db = Matrix::zeros(bv.rows(), bv.cols());
                        gemm(true, false, 1.0, av, &dy, 0.0, &mut db);
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::AddBias(a, bias) => {
                    if self.ng(*bias) {
                        let mut db = Matrix::zeros(1, dy.cols());
                        for r in 0..dy.rows() {
                            for (o, v) in db.data_mut().iter_mut().zip(dy.row(r)) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads[bias.0], db);
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads[a.0], dy);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) && self.ng(*b) {
                        accumulate(&mut grads[a.0], dy.clone());
                        accumulate(&mut grads[b.0], dy);
                    } else if self.ng(*a) {
                        accumulate(&mut grads[a.0], dy);
                    } else if self.ng(*b) {
                        accumulate(&mut grads[b.0], dy);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        accumulate(&mut grads[a.0], zip_map(&dy, bv, |d, y| d * y));
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads[b.0], zip_map(&dy, av, |d, x| d * x));
                    }
                }
                Op::Sigmoid(a) => {
                    let dx = zip_map(&dy, node.value.get(), |d, s| d * s * (1.0 - s));
                    accumulate(&mut grads[a.0], dx);
                }
                Op::Tanh(a) => {
                    let dx = zip_map(&dy, node.value.get(), |d, t| d * (1.0 - t * t));
                    accumulate(&mut grads[a.0], dx);
                }
                Op::Relu(a) => {
                    let dx = zip_map(&dy, self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 });
                    accumulate(&mut grads[a.0], dx);
                }
                Op::Gelu(a) => {
                    let dx = zip_map(&dy, self.value(*a), |d, x| d * gelu_grad(x));
                    accumulate(&mut grads[a.0], dx);
                }
                Op::Gather { src, index } => {
                    let sv = self.value(*src);
                    let mut ds = Matrix::zeros(sv.rows(), sv.cols());
                    let dsd = ds.data_mut();
                    for (&ix, &d) in index.iter().zip(dy.data()) {
                        if ix != GATHER_ZERO {
                            dsd[ix as usize] += d;
                        }
                    }
                    accumulate(&mut grads[src.0], ds);
                }
                Op::SliceCols { src, start } => {
                    let sv = self.value(*src);
                    let mut ds = Matrix::zeros(sv.rows(), sv.cols());
                    for r in 0..dy.rows() {
                        ds.row_mut(r)[*start..*start + dy.cols()].copy_from_slice(dy.row(r));
                    }
                    accumulate(&mut grads[src.0], ds);
                }
                Op::Norm {
                    src,
                    gamma,
                    beta,
                    group_rows,
                    xhat,
                    inv_std,
                } => {
                    let cols = dy.cols();
                    let gv = self.value(*gamma);
                    if self.ng(*gamma) || self.ng(*beta) {
                        let mut dg = Matrix::zeros(1, cols);
                        let mut db = Matrix::zeros(1, cols);
                        for (i, (&d, &h)) in dy.data().iter().zip(xhat).enumerate() {
                            let c = i % cols;
                            dg.data_mut()[c] += d * h;
                            db.data_mut()[c] += d;
                        }
                        if self.ng(*gamma) {
                            accumulate(&mut grads[gamma.0], dg);
                        }
                        if self.ng(*beta) {
                            accumulate(&mut grads[beta.0], db);
                        }
                    }
                    if self.ng(*src) {
                        let gsize = group_rows * cols;
                        let mut dx = Matrix::zeros(dy.rows(), cols);
                        for (gi, &istd) in inv_std.iter().enumerate() {
                            let range = gi * gsize..(gi + 1) * gsize;
                            let dyg = &dy.data()[range.clone()];
                            let xh = &xhat[range.clone()];
                            let mut mean_dxh = 0.0;
                            let mut mean_dxh_xh = 0.0;
                            for (i, (&d, &h)) in dyg.iter().zip(xh).enumerate() {
                                let dxh = d * gv.data()[i % cols];
                                mean_dxh += dxh;
                                mean_dxh_xh += dxh * h;
                            }
                            mean_dxh /= gsize as f64;
                            mean_dxh_xh /= gsize as f64;
                            let out = &mut dx.data_mut()[range];
                            for (i, (&d, &h)) in dyg.iter().zip(xh).enumerate() {
                                let dxh = d * gv.data()[i % cols];
                                out[i] = istd * (dxh - mean_dxh - h * mean_dxh_xh);
                            }
                        }
                        accumulate(&mut grads[src.0], dx);
                    }
                }
                Op::MeanRows { src, group } => {
                    let sv = self.value(*src);
                    let scale = 1.0 / *group as f64;
                    let mut ds = Matrix::zeros(sv.rows(), sv.cols());
                    for r in 0..sv.rows() {
                        for (o, d) in ds.row_mut(r).iter_mut().zip(dy.row(r / group)) {
                            *o = d * scale;
                        }
                    }
                    accumulate(&mut grads[src.0], ds);
                }
            }
        }
        params
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}
