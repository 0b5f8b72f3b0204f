//! MLP-Mixer over history tokens: each of the `lookback` columns is a token
//! of `segments` values. Blocks are pre-norm with a token-mixing MLP (width
//! equal to the token count) and a channel-mixing MLP (width `dim / 2`).

use super::{ModelSpec, ParamCursor, ParamDef};
use crate::nn::{Graph, Var};

pub(crate) fn channel_hidden(dim: usize) -> usize {
    (dim / 2).max(1)
}

pub(crate) fn param_defs(spec: &ModelSpec) -> Vec<ParamDef> {
    let (p, n) = spec.input_shape;
    let d = spec.dim;
    let hc = channel_hidden(d);
    let mut defs: Vec<ParamDef> = ParamDef::linear("embed", p, d).into();
    for l in 0..spec.layers {
        defs.extend(ParamDef::norm(&format!("block{l}.token_norm"), d));
        defs.extend(ParamDef::linear(&format!("block{l}.token_fc1"), n, n));
        defs.extend(ParamDef::linear(&format!("block{l}.token_fc2"), n, n));
        defs.extend(ParamDef::norm(&format!("block{l}.channel_norm"), d));
        defs.extend(ParamDef::linear(&format!("block{l}.channel_fc1"), d, hc));
        defs.extend(ParamDef::linear(&format!("block{l}.channel_fc2"), hc, d));
    }
    defs.extend(ParamDef::norm("final_norm", d));
    defs.extend(ParamDef::linear("head", d, spec.out_labels));
    defs
}

/// Gather map turning `[batch * a, b]` into `[batch * b, a]` (per-sample transpose).
fn transpose_index(batch: usize, a: usize, b: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(batch * a * b);
    for s in 0..batch {
        for j in 0..b {
            for i in 0..a {
                idx.push(((s * a + i) * b + j) as u32);
            }
        }
    }
    idx
}

pub(crate) fn forward(spec: &ModelSpec, g: &mut Graph, params: &mut ParamCursor, x: Var, batch: usize) -> Var {
    let (p, n) = spec.input_shape;
    let d = spec.dim;
    // [batch, p * n] -> tokens [batch * n, p]
    let tokens = g.gather(x, batch * n, p, transpose_index(batch, p, n));
    let (we, be) = params.pair();
    let mut h = g.linear(tokens, we, be);

    let to_channels = transpose_index(batch, n, d);
    let to_tokens = transpose_index(batch, d, n);
    for _ in 0..spec.layers {
        let (g1, b1) = params.pair();
        let (w1, c1) = params.pair();
        let (w2, c2) = params.pair();
        let y = g.norm(h, g1, b1, 1);
        let yt = g.gather(y, batch * d, n, to_channels.clone());
        let z = g.linear(yt, w1, c1);
        let z = g.gelu(z);
        let z = g.linear(z, w2, c2);
        let z = g.gather(z, batch * n, d, to_tokens.clone());
        h = g.add(h, z);

        let (g2, b2) = params.pair();
        let (w3, c3) = params.pair();
        let (w4, c4) = params.pair();
        let y = g.norm(h, g2, b2, 1);
        let z = g.linear(y, w3, c3);
        let z = g.gelu(z);
        let z = g.linear(z, w4, c4);
        h = g.add(h, z);
    }
    let (gf, bf) = params.pair();
    let y = g.norm(h, gf, bf, 1);
    let pooled = g.mean_rows(y, n);
    let (wh, bh) = params.pair();
    g.linear(pooled, wh, bh)
}
