//! Residual convolutional network over the input matrix as a one-channel
//! image.
//!
//! `layers` is the nominal network depth. It sets the residual block count
//! to `(layers - 2) / 3` (at least one); depths of 50 and more use
//! bottleneck blocks (expansion 4), shallower ones use two-convolution basic
//! blocks. Blocks are spread over up to four stages in 3:4:6:3 proportion;
//! each stage after the first halves the spatial size and doubles the base
//! width. Normalization is per sample over each feature map, with a
//! per-channel affine.

use super::{ModelSpec, ParamCursor, ParamDef};
use crate::nn::{Graph, Var, GATHER_ZERO};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

impl BlockKind {
    fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResidualLayout {
    pub kind: BlockKind,
    /// Residual blocks per stage.
    pub stages: Vec<usize>,
}

const STAGE_WEIGHTS: [usize; 4] = [3, 4, 6, 3];
const BOTTLENECK_DEPTH: usize = 50;

impl ResidualLayout {
    pub fn for_depth(layers: usize) -> Self {
        let blocks = (layers.saturating_sub(2) / 3).max(1);
        let kind = if layers >= BOTTLENECK_DEPTH {
            BlockKind::Bottleneck
        } else {
            BlockKind::Basic
        };
        let n_stages = blocks.min(STAGE_WEIGHTS.len());
        let weights = &STAGE_WEIGHTS[..n_stages];
        let wsum: usize = weights.iter().sum();
        let extra = blocks - n_stages;
        // largest-remainder apportionment of the blocks beyond one per stage
        let mut stages: Vec<usize> = weights.iter().map(|w| 1 + extra * w / wsum).collect();
        let mut rema: Vec<(usize, usize)> = weights.iter().enumerate().map(|(i, w)| (extra * w % wsum, i)).collect();
        rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let assigned: usize = stages.iter().sum();
        for &(_, i) in rema.iter().take(blocks - assigned) {
            stages[i] += 1;
        }
        Self { kind, stages }
    }
}

struct BlockPlan {
    kind: BlockKind,
    in_ch: usize,
    planes: usize,
    stride: usize,
}

impl BlockPlan {
    fn out_ch(&self) -> usize {
        self.planes * self.kind.expansion()
    }

    fn has_projection(&self) -> bool {
        self.stride != 1 || self.in_ch != self.out_ch()
    }
}

fn plan(spec: &ModelSpec) -> (Vec<BlockPlan>, usize) {
    let layout = ResidualLayout::for_depth(spec.layers);
    let mut blocks = Vec::new();
    let mut ch = spec.dim;
    for (s, &count) in layout.stages.iter().enumerate() {
        let planes = spec.dim << s;
        for b in 0..count {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let bp = BlockPlan {
                kind: layout.kind,
                in_ch: ch,
                planes,
                stride,
            };
            ch = bp.out_ch();
            blocks.push(bp);
        }
    }
    (blocks, ch)
}

fn conv_def(name: String, k: usize, cin: usize, cout: usize) -> ParamDef {
    let fan_in = k * k * cin;
    ParamDef::uniform(name, fan_in, cout, (6.0 / fan_in as f64).sqrt())
}

pub(crate) fn param_defs(spec: &ModelSpec) -> Vec<ParamDef> {
    let w = spec.dim;
    let mut defs = vec![conv_def("stem.conv".into(), 3, 1, w)];
    defs.extend(ParamDef::norm("stem.norm", w));
    let (blocks, out_ch) = plan(spec);
    for (i, b) in blocks.iter().enumerate() {
        let pre = format!("block{i}");
        match b.kind {
            BlockKind::Basic => {
                defs.push(conv_def(format!("{pre}.conv1"), 3, b.in_ch, b.planes));
                defs.extend(ParamDef::norm(&format!("{pre}.norm1"), b.planes));
                defs.push(conv_def(format!("{pre}.conv2"), 3, b.planes, b.planes));
                defs.extend(ParamDef::norm(&format!("{pre}.norm2"), b.planes));
            }
            BlockKind::Bottleneck => {
                defs.push(conv_def(format!("{pre}.conv1"), 1, b.in_ch, b.planes));
                defs.extend(ParamDef::norm(&format!("{pre}.norm1"), b.planes));
                defs.push(conv_def(format!("{pre}.conv2"), 3, b.planes, b.planes));
                defs.extend(ParamDef::norm(&format!("{pre}.norm2"), b.planes));
                defs.push(conv_def(format!("{pre}.conv3"), 1, b.planes, b.out_ch()));
                defs.extend(ParamDef::norm(&format!("{pre}.norm3"), b.out_ch()));
            }
        }
        if b.has_projection() {
            defs.push(conv_def(format!("{pre}.proj"), 1, b.in_ch, b.out_ch()));
            defs.extend(ParamDef::norm(&format!("{pre}.proj_norm"), b.out_ch()));
        }
    }
    defs.extend(ParamDef::linear("head", out_ch, spec.out_labels));
    defs
}

/// Feature map rows are `(sample, y, x)`, columns are channels.
#[derive(Clone, Copy)]
struct Map {
    var: Var,
    h: usize,
    w: usize,
    c: usize,
}

fn out_size(n: usize, k: usize, stride: usize) -> usize {
    let pad = k / 2;
    (n + 2 * pad - k) / stride + 1
}

/// `k x k` convolution (zero padding `k / 2`) as im2col followed by a matmul.
fn conv(g: &mut Graph, x: Map, weight: Var, k: usize, stride: usize, batch: usize) -> Map {
    let (ho, wo) = (out_size(x.h, k, stride), out_size(x.w, k, stride));
    let cout = g.value(weight).cols();
    if k == 1 && stride == 1 {
        let var = g.matmul(x.var, weight);
        return Map { var, c: cout, ..x };
    }
    let pad = (k / 2) as isize;
    let mut idx = Vec::with_capacity(batch * ho * wo * k * k * x.c);
    for b in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad;
                        let ix = (ox * stride + kx) as isize - pad;
                        let inside = (0..x.h as isize).contains(&iy) && (0..x.w as isize).contains(&ix);
                        for c in 0..x.c {
                            idx.push(if inside {
                                (((b * x.h + iy as usize) * x.w + ix as usize) * x.c + c) as u32
                            } else {
                                GATHER_ZERO
                            });
                        }
                    }
                }
            }
        }
    }
    let cols = g.gather(x.var, batch * ho * wo, k * k * x.c, idx);
    let var = g.matmul(cols, weight);
    Map { var, h: ho, w: wo, c: cout }
}

fn conv_norm(g: &mut Graph, params: &mut ParamCursor, x: Map, k: usize, stride: usize, batch: usize) -> Map {
    let w = params.next();
    let y = conv(g, x, w, k, stride, batch);
    let (gamma, beta) = params.pair();
    let var = g.norm(y.var, gamma, beta, y.h * y.w);
    Map { var, ..y }
}

fn relu(g: &mut Graph, x: Map) -> Map {
    Map { var: g.relu(x.var), ..x }
}

pub(crate) fn forward(spec: &ModelSpec, g: &mut Graph, params: &mut ParamCursor, x: Var, batch: usize) -> Var {
    let (p, n) = spec.input_shape;
    // [batch, p * n] row-major is already [(sample, y, x), 1]
    let image = g.gather(x, batch * p * n, 1, (0..(batch * p * n) as u32).collect());
    let mut h = Map { var: image, h: p, w: n, c: 1 };
    h = conv_norm(g, params, h, 3, 1, batch);
    h = relu(g, h);

    let (blocks, _) = plan(spec);
    for b in &blocks {
        let input = h;
        let y = match b.kind {
            BlockKind::Basic => {
                let y = conv_norm(g, params, input, 3, b.stride, batch);
                let y = relu(g, y);
                conv_norm(g, params, y, 3, 1, batch)
            }
            BlockKind::Bottleneck => {
                let y = conv_norm(g, params, input, 1, 1, batch);
                let y = relu(g, y);
                let y = conv_norm(g, params, y, 3, b.stride, batch);
                let y = relu(g, y);
                conv_norm(g, params, y, 1, 1, batch)
            }
        };
        let shortcut = if b.has_projection() {
            conv_norm(g, params, input, 1, b.stride, batch)
        } else {
            input
        };
        let sum = g.add(y.var, shortcut.var);
        h = relu(g, Map { var: sum, ..y });
    }
    let pooled = g.mean_rows(h.var, h.h * h.w);
    let (wh, bh) = params.pair();
    g.linear(pooled, wh, bh)
}
