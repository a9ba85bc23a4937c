//! Pre-norm transformer encoder that classifies from a prepended class token.

use super::{affine, check_input, classify, frames_matrix, linear, Builder, Forward, Init, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParameterSet;
use crate::pose::PoseSequence;

pub(super) fn init(b: &mut Builder, config: &ModelConfig) -> Result<()> {
    let c = &config.transformer;
    let d = c.hidden;
    let inner = c.heads * c.head_dim;
    b.linear("encoder.embed", config.input_width(), d)?;
    b.add("encoder.cls", &[1, d], Init::Embedding)?;
    b.add("encoder.pos", &[c.max_seq, d], Init::Embedding)?;
    for l in 0..c.layers {
        let p = format!("encoder.layer{l}");
        b.norm(&format!("{p}.ln1"), d)?;
        b.linear(&format!("{p}.attn.q"), d, inner)?;
        b.linear(&format!("{p}.attn.k"), d, inner)?;
        b.linear(&format!("{p}.attn.v"), d, inner)?;
        b.linear(&format!("{p}.attn.o"), inner, d)?;
        b.norm(&format!("{p}.ln2"), d)?;
        b.linear(&format!("{p}.ffn1"), d, c.ffn_hidden)?;
        b.linear(&format!("{p}.ffn2"), c.ffn_hidden, d)?;
    }
    b.norm("encoder.ln_f", d)
}

/// Runs the encoder over an `L × (K·2)` frame matrix (`L < max_seq`) and
/// returns the final-normalized `(L+1) × hidden` token states, class token
/// first, plus every head's attention probabilities.
pub fn transformer_tokens<'a>(
    g: &mut Graph<'a>,
    params: &'a ParameterSet,
    config: &ModelConfig,
    frames: Var,
) -> Result<(Var, Vec<Var>)> {
    let c = &config.transformer;
    let (len, width) = g.shape(frames);
    if len == 0 || len >= c.max_seq {
        return Err(Error::Shape(format!(
            "transformer takes 1..{} frames, got {len}",
            c.max_seq - 1
        )));
    }
    if width != config.input_width() {
        return Err(Error::Shape(format!(
            "frame width {width}, expected {}",
            config.input_width()
        )));
    }
    let emb = linear(g, params, "encoder.embed", frames)?;
    let cls = g.param(params, "encoder.cls")?;
    let seq = g.concat_rows(&[cls, emb]);
    let pos = g.param(params, "encoder.pos")?;
    let pos = g.slice_rows(pos, 0, len + 1);
    let mut x = g.add(seq, pos);
    let scale = 1.0 / (c.head_dim as f32).sqrt();
    let mut maps = Vec::with_capacity(c.layers * c.heads);
    for l in 0..c.layers {
        let p = format!("encoder.layer{l}");
        let h = g.layer_norm_rows(x);
        let h = affine(g, params, &format!("{p}.ln1"), h)?;
        let q = linear(g, params, &format!("{p}.attn.q"), h)?;
        let k = linear(g, params, &format!("{p}.attn.k"), h)?;
        let v = linear(g, params, &format!("{p}.attn.v"), h)?;
        let mut heads = Vec::with_capacity(c.heads);
        for head in 0..c.heads {
            let start = head * c.head_dim;
            let qh = g.slice_cols(q, start, c.head_dim);
            let kh = g.slice_cols(k, start, c.head_dim);
            let vh = g.slice_cols(v, start, c.head_dim);
            let scores = g.matmul_bt(qh, kh);
            let scores = g.scale(scores, scale);
            let probs = g.softmax_rows(scores);
            maps.push(probs);
            heads.push(g.matmul(probs, vh));
        }
        let joined = g.concat_cols(&heads);
        let attended = linear(g, params, &format!("{p}.attn.o"), joined)?;
        x = g.add(x, attended);
        let h = g.layer_norm_rows(x);
        let h = affine(g, params, &format!("{p}.ln2"), h)?;
        let h = linear(g, params, &format!("{p}.ffn1"), h)?;
        let h = g.gelu(h);
        let h = linear(g, params, &format!("{p}.ffn2"), h)?;
        x = g.add(x, h);
    }
    let x = g.layer_norm_rows(x);
    let x = affine(g, params, "encoder.ln_f", x)?;
    Ok((x, maps))
}

/// Frames beyond `max_seq − 1` are dropped before the class token is prepended.
pub fn transformer_forward<'a>(
    g: &mut Graph<'a>,
    params: &'a ParameterSet,
    config: &ModelConfig,
    pose: &PoseSequence,
) -> Result<Forward> {
    check_input(config, pose)?;
    let frames = frames_matrix(g, pose, config.transformer.max_seq - 1);
    let (tokens, attention) = transformer_tokens(g, params, config, frames)?;
    let cls = g.row(tokens, 0);
    let logits = classify(g, params, cls)?;
    Ok(Forward {
        logits,
        embedding: cls,
        attention,
    })
}
