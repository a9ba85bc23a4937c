//! Spatio-temporal graph convolution network, uni-label partition.

use super::{affine, check_input, classify, Builder, Forward, Init, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParameterSet;
use crate::pose::{PoseSequence, SkeletonGraph, COORDS};

pub(super) fn init(b: &mut Builder, config: &ModelConfig) -> Result<()> {
    let c = &config.stgcn;
    let k = config.keypoints;
    let mut cin = COORDS;
    for (i, (&cout, &stride)) in c.channels.iter().zip(&c.strides).enumerate() {
        let p = format!("encoder.block{i}");
        b.add(&format!("{p}.importance"), &[k, k], Init::Ones)?;
        b.linear(&format!("{p}.gcn"), cin, cout)?;
        b.norm(&format!("{p}.norm1"), cout)?;
        b.linear(&format!("{p}.tcn"), c.temporal_kernel * cout, cout)?;
        b.norm(&format!("{p}.norm2"), cout)?;
        if needs_projection(i, cin, cout, stride) {
            b.linear(&format!("{p}.res"), cin, cout)?;
            b.norm(&format!("{p}.res_norm"), cout)?;
        }
        cin = cout;
    }
    Ok(())
}

fn needs_projection(block: usize, cin: usize, cout: usize, stride: usize) -> bool {
    block > 0 && (cin != cout || stride != 1)
}

/// Runs every block and pools over frames and nodes; returns `1 × C_last`.
pub fn stgcn_encode<'a>(
    g: &mut Graph<'a>,
    params: &'a ParameterSet,
    config: &ModelConfig,
    pose: &PoseSequence,
    skeleton: &SkeletonGraph,
) -> Result<Var> {
    check_input(config, pose)?;
    let k = config.keypoints;
    if skeleton.node_count() != k {
        return Err(Error::Shape(format!(
            "clip has {k} keypoints, skeleton has {} nodes",
            skeleton.node_count()
        )));
    }
    let c = &config.stgcn;
    let adj = g.constant(k, k, skeleton.adjacency_normalized().to_vec());
    let mut x = g.constant(pose.frames() * k, COORDS, pose.data().to_vec());
    let mut cin = COORDS;
    for (i, (&cout, &stride)) in c.channels.iter().zip(&c.strides).enumerate() {
        let p = format!("encoder.block{i}");
        let mask = g.param(params, &format!("{p}.importance"))?;
        let a = g.mul(adj, mask);
        // spatial: Ā⊙M · X · W + b
        let gw = g.param(params, &format!("{p}.gcn.w"))?;
        let gb = g.param(params, &format!("{p}.gcn.b"))?;
        let h = g.matmul(x, gw);
        let h = g.graph_mix(a, h, k);
        let h = g.add_row(h, gb);
        let h = g.layer_norm_rows(h);
        let h = affine(g, params, &format!("{p}.norm1"), h)?;
        let h = g.relu(h);
        // temporal
        let tw = g.param(params, &format!("{p}.tcn.w"))?;
        let tb = g.param(params, &format!("{p}.tcn.b"))?;
        let h = g.temporal_conv(h, tw, k, c.temporal_kernel, stride);
        let h = g.add_row(h, tb);
        let h = g.layer_norm_rows(h);
        let h = affine(g, params, &format!("{p}.norm2"), h)?;
        let h = if i == 0 {
            h
        } else if needs_projection(i, cin, cout, stride) {
            let rw = g.param(params, &format!("{p}.res.w"))?;
            let rb = g.param(params, &format!("{p}.res.b"))?;
            let r = g.temporal_conv(x, rw, k, 1, stride);
            let r = g.add_row(r, rb);
            let r = g.layer_norm_rows(r);
            let r = affine(g, params, &format!("{p}.res_norm"), r)?;
            g.add(h, r)
        } else {
            g.add(h, x)
        };
        x = g.relu(h);
        cin = cout;
    }
    Ok(g.mean_rows(x))
}

pub fn stgcn_forward<'a>(
    g: &mut Graph<'a>,
    params: &'a ParameterSet,
    config: &ModelConfig,
    pose: &PoseSequence,
    skeleton: &SkeletonGraph,
) -> Result<Forward> {
    let embedding = stgcn_encode(g, params, config, pose, skeleton)?;
    let logits = classify(g, params, embedding)?;
    Ok(Forward {
        logits,
        embedding,
        attention: Vec::new(),
    })
}
