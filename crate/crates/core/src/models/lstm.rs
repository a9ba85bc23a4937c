//! Stacked (bi)directional LSTM with additive temporal attention pooling.

use super::{check_input, classify, frames_matrix, Builder, Forward, Init, ModelConfig};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParameterSet;
use crate::pose::PoseSequence;

const DIRS: [&str; 2] = ["fwd", "bwd"];

pub(super) fn init(b: &mut Builder, config: &ModelConfig) -> Result<()> {
    let c = &config.lstm;
    let dirs = config.lstm_directions();
    for l in 0..c.layers {
        let input = if l == 0 { config.input_width() } else { c.hidden * dirs };
        for d in &DIRS[..dirs] {
            let p = format!("encoder.lstm{l}.{d}");
            b.add(&format!("{p}.w_ih"), &[input, 4 * c.hidden], Init::FanIn)?;
            b.add(&format!("{p}.w_hh"), &[c.hidden, 4 * c.hidden], Init::FanIn)?;
            b.add(&format!("{p}.b"), &[4 * c.hidden], Init::Zeros)?;
        }
    }
    let width = c.hidden * dirs;
    b.linear("encoder.attn", width, c.attention_dim)?;
    b.add("encoder.attn.v", &[c.attention_dim, 1], Init::FanIn)
}

/// One direction of one layer over the `F × in` input; returns `F × hidden`
/// in time order. Gate layout in the 4·hidden axis is input, forget, cell, output.
fn run_direction<'a>(
    g: &mut Graph<'a>,
    params: &'a ParameterSet,
    prefix: &str,
    x: Var,
    hidden: usize,
    reverse: bool,
) -> Result<Var> {
    let w_ih = g.param(params, &format!("{prefix}.w_ih"))?;
    let w_hh = g.param(params, &format!("{prefix}.w_hh"))?;
    let bias = g.param(params, &format!("{prefix}.b"))?;
    let projected = g.matmul(x, w_ih);
    let projected = g.add_row(projected, bias);
    let frames = g.shape(x).0;
    let mut h = g.zeros(1, hidden);
    let mut c = g.zeros(1, hidden);
    let mut outputs = Vec::with_capacity(frames);
    for step in 0..frames {
        let t = if reverse { frames - 1 - step } else { step };
        let xt = g.row(projected, t);
        let rec = g.matmul(h, w_hh);
        let gates = g.add(xt, rec);
        let i = g.slice_cols(gates, 0, hidden);
        let i = g.sigmoid(i);
        let f = g.slice_cols(gates, hidden, hidden);
        let f = g.sigmoid(f);
        let cand = g.slice_cols(gates, 2 * hidden, hidden);
        let cand = g.tanh(cand);
        let o = g.slice_cols(gates, 3 * hidden, hidden);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c);
        let write = g.mul(i, cand);
        c = g.add(keep, write);
        let ct = g.tanh(c);
        h = g.mul(o, ct);
        outputs.push(h);
    }
    if reverse {
        outputs.reverse();
    }
    Ok(g.concat_rows(&outputs))
}

pub fn lstm_forward<'a>(
    g: &mut Graph<'a>,
    params: &'a ParameterSet,
    config: &ModelConfig,
    pose: &PoseSequence,
) -> Result<Forward> {
    check_input(config, pose)?;
    let c = &config.lstm;
    let dirs = config.lstm_directions();
    let mut x = frames_matrix(g, pose, usize::MAX);
    for l in 0..c.layers {
        let mut outs = Vec::with_capacity(dirs);
        for (di, d) in DIRS[..dirs].iter().enumerate() {
            let p = format!("encoder.lstm{l}.{d}");
            outs.push(run_direction(g, params, &p, x, c.hidden, di == 1)?);
        }
        x = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
    }
    // α = softmax_t(vᵀ tanh(W h_t + b)), context = Σ α_t h_t
    let proj = super::linear(g, params, "encoder.attn", x)?;
    let proj = g.tanh(proj);
    let v = g.param(params, "encoder.attn.v")?;
    let scores = g.matmul(proj, v);
    let scores = g.transpose(scores);
    let alpha = g.softmax_rows(scores);
    let context = g.matmul(alpha, x);
    let logits = classify(g, params, context)?;
    Ok(Forward {
        logits,
        embedding: context,
        attention: vec![alpha],
    })
}
