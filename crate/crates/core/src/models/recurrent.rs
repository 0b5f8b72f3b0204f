//! Stacked gated recurrent cells (input, forget, cell, output gates) over
//! the history axis.

use super::{column_index, ModelSpec, ParamCursor, ParamDef};
use crate::nn::{Graph, Matrix, Var};

/// Width of the per-step input projection applied before the first cell.
pub(crate) const STEP_EMBED: usize = 96;

pub(crate) fn param_defs(spec: &ModelSpec) -> Vec<ParamDef> {
    let (p, _) = spec.input_shape;
    let h = spec.dim;
    let bound = 1.0 / (h as f64).sqrt();
    let mut defs: Vec<ParamDef> = ParamDef::linear("embed", p, STEP_EMBED).into();
    for l in 0..spec.layers {
        let input = if l == 0 { STEP_EMBED } else { h };
        defs.push(ParamDef::uniform(format!("cell{l}.w_ih"), input, 4 * h, bound));
        defs.push(ParamDef::uniform(format!("cell{l}.w_hh"), h, 4 * h, bound));
        defs.push(ParamDef::uniform(format!("cell{l}.b_ih"), 1, 4 * h, bound));
        defs.push(ParamDef::uniform(format!("cell{l}.b_hh"), 1, 4 * h, bound));
    }
    defs.extend(ParamDef::linear("head", h, spec.out_labels));
    defs
}

pub(crate) fn forward(spec: &ModelSpec, g: &mut Graph, params: &mut ParamCursor, x: Var, batch: usize) -> Var {
    let (p, n) = spec.input_shape;
    let h = spec.dim;
    let (we, be) = params.pair();
    let mut seq: Vec<Var> = (0..n)
        .map(|t| {
            let step = g.gather(x, batch, p, column_index(batch, p, n, t));
            let e = g.linear(step, we, be);
            g.relu(e)
        })
        .collect();

    for _ in 0..spec.layers {
        let (w_ih, w_hh) = params.pair();
        let (b_ih, b_hh) = params.pair();
        let mut hidden = g.constant(Matrix::zeros(batch, h));
        let mut cell = g.constant(Matrix::zeros(batch, h));
        let mut outputs = Vec::with_capacity(n);
        for &input in &seq {
            let xi = g.linear(input, w_ih, b_ih);
            let hh = g.linear(hidden, w_hh, b_hh);
            let gates = g.add(xi, hh);
            let i_pre = g.slice_cols(gates, 0, h);
            let f_pre = g.slice_cols(gates, h, h);
            let c_pre = g.slice_cols(gates, 2 * h, h);
            let o_pre = g.slice_cols(gates, 3 * h, h);
            let i = g.sigmoid(i_pre);
            let f = g.sigmoid(f_pre);
            let cand = g.tanh(c_pre);
            let o = g.sigmoid(o_pre);
            let kept = g.mul(f, cell);
            let fresh = g.mul(i, cand);
            cell = g.add(kept, fresh);
            let squashed = g.tanh(cell);
            hidden = g.mul(o, squashed);
            outputs.push(hidden);
        }
        seq = outputs;
    }

    let (wh, bh) = params.pair();
    let last = *seq.last().expect("lookback is at least 1");
    g.linear(last, wh, bh)
}
