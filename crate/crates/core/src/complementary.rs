//! Cross-image attention over patch nodes.
//!
//! Every node is pooled to a token; single-head scaled dot-product attention
//! over all tokens of the mini-batch gives the weighted edge matrix and a
//! per-node update that is broadcast back over the node's feature map. The
//! block then applies a residual 3x3 conv and a per-node layernorm.
//!
//! Node order carries no positional signal, so the block is equivariant under
//! any permutation of the nodes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::kaiming_bound;
use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::patch::{CropMode, PatchNode, Region};
use crate::tensor::{Tape, Tensor, Var, LAYERNORM_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub channels: usize,
    pub d_k: usize,
    pub d_v: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            channels: 16,
            d_k: 16,
            d_v: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerParams {
    pub config: TransformerConfig,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub conv_weight: Tensor,
    pub conv_bias: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct TransformerVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub conv_weight: Var,
    pub conv_bias: Var,
    pub ln_gamma: Var,
    pub ln_beta: Var,
    pub d_k: usize,
}

impl TransformerParams {
    pub fn init<R: Rng + ?Sized>(config: &TransformerConfig, rng: &mut R) -> Result<Self> {
        let TransformerConfig { channels: c, d_k, d_v } = *config;
        if c == 0 || d_k == 0 || d_v == 0 {
            return Err(Error::Config(format!("bad transformer dims {config:?}")));
        }
        let xavier = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        let (bq, bv, bo) = (xavier(c, d_k), xavier(c, d_v), xavier(d_v, c));
        let bc = 0.5 * kaiming_bound(9 * c);
        Ok(TransformerParams {
            config: config.clone(),
            w_q: Tensor::uniform(&[c, d_k], -bq, bq, rng),
            w_k: Tensor::uniform(&[c, d_k], -bq, bq, rng),
            w_v: Tensor::uniform(&[c, d_v], -bv, bv, rng),
            w_o: Tensor::uniform(&[d_v, c], -bo, bo, rng),
            conv_weight: Tensor::uniform(&[c, c, 3, 3], -bc, bc, rng),
            conv_bias: Tensor::zeros(&[c]),
            ln_gamma: Tensor::ones(&[1, c]),
            ln_beta: Tensor::zeros(&[1, c]),
        })
    }

    pub fn vars_from(&self, leaves: &[Var]) -> TransformerVars {
        TransformerVars {
            w_q: leaves[0],
            w_k: leaves[1],
            w_v: leaves[2],
            w_o: leaves[3],
            conv_weight: leaves[4],
            conv_bias: leaves[5],
            ln_gamma: leaves[6],
            ln_beta: leaves[7],
            d_k: self.config.d_k,
        }
    }
}

impl Parameters for TransformerParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("transformer.w_q".into(), &self.w_q),
            ("transformer.w_k".into(), &self.w_k),
            ("transformer.w_v".into(), &self.w_v),
            ("transformer.w_o".into(), &self.w_o),
            ("transformer.conv.weight".into(), &self.conv_weight),
            ("transformer.conv.bias".into(), &self.conv_bias),
            ("transformer.ln.gamma".into(), &self.ln_gamma),
            ("transformer.ln.beta".into(), &self.ln_beta),
        ]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("transformer.w_q".into(), &mut self.w_q),
            ("transformer.w_k".into(), &mut self.w_k),
            ("transformer.w_v".into(), &mut self.w_v),
            ("transformer.w_o".into(), &mut self.w_o),
            ("transformer.conv.weight".into(), &mut self.conv_weight),
            ("transformer.conv.bias".into(), &mut self.conv_bias),
            ("transformer.ln.gamma".into(), &mut self.ln_gamma),
            ("transformer.ln.beta".into(), &mut self.ln_beta),
        ]
    }
}

/// Spatially mean-pools node feature maps `[n, c, h, w]` into tokens `[n, c]`.
pub fn node_vectors(tape: &mut Tape, features: Var) -> Result<Var> {
    if tape.shape(features).len() != 4 {
        return Err(Error::invalid(
            "node_vectors",
            format!("expected [n,c,h,w], got {:?}", tape.shape(features)),
        ));
    }
    tape.mean_trailing(features, 2)
}

/// `softmax(Q K^T / sqrt(d_k)) V`; returns `(output, weights)`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, d_k: usize) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk[0] != sv[0] {
        return Err(Error::Shape {
            op: "attention",
            lhs: sq,
            rhs: sk.into_iter().chain(sv).collect(),
        });
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d_k as f64).sqrt());
    let weights = tape.softmax(scaled, 1)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Row-stochastic `[n, n]` edge weights between node tokens `[n, c]`.
pub fn edge_weights(tape: &mut Tape, tokens: Var, vars: &TransformerVars) -> Result<Var> {
    let q = tape.matmul(tokens, vars.w_q)?;
    let k = tape.matmul(tokens, vars.w_k)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (vars.d_k as f64).sqrt());
    tape.softmax(scaled, 1)
}

#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    /// Updated node features, same shape as the input.
    pub features: Var,
    /// `[n, n]` attention weights used as graph edges.
    pub edges: Var,
}

/// One attention block over all nodes of a mini-batch.
pub fn transformer_block(tape: &mut Tape, features: Var, vars: &TransformerVars) -> Result<BlockOutput> {
    let shape = tape.shape(features).to_vec();
    let tokens = node_vectors(tape, features)?;
    let c = shape[1];
    if tape.shape(vars.w_q)[0] != c || tape.shape(vars.w_o)[1] != c {
        return Err(Error::shape("transformer_block", &shape, tape.shape(vars.w_q)));
    }
    let q = tape.matmul(tokens, vars.w_q)?;
    let k = tape.matmul(tokens, vars.w_k)?;
    let v = tape.matmul(tokens, vars.w_v)?;
    let (attended, edges) = attention(tape, q, k, v, vars.d_k)?;
    let update = tape.matmul(attended, vars.w_o)?;
    let h = tape.add_nc(features, update)?;
    let conv = tape.conv3x3(h, vars.conv_weight, vars.conv_bias)?;
    let conv = tape.relu(conv);
    let r = tape.add(h, conv)?;

    let n = shape[0];
    let flat = tape.reshape(r, &[n, shape[1..].iter().product()])?;
    let normed = tape.layernorm(flat, 1, LAYERNORM_EPS)?;
    let normed = tape.reshape(normed, &shape)?;
    let rows = vec![0; n];
    let gamma = tape.gather_rows(vars.ln_gamma, &rows)?;
    let beta = tape.gather_rows(vars.ln_beta, &rows)?;
    let scaled = tape.mul_nc(normed, gamma)?;
    let out = tape.add_nc(scaled, beta)?;
    Ok(BlockOutput { features: out, edges })
}

/// Per-class attention map of one image, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub image_id: String,
    pub class_id: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl AttentionMap {
    pub fn zeros(image_id: &str, class_id: usize, height: usize, width: usize) -> Self {
        AttentionMap {
            image_id: image_id.to_string(),
            class_id,
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.height, self.width], self.values.clone())
    }

    /// 8-bit grayscale bytes, `round(255 * A)`.
    pub fn to_gray(&self) -> Vec<u8> {
        self.values
            .iter()
            .map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
            .collect()
    }

    /// Exact float payload (tensor serialization of the `[h, w]` map).
    pub fn to_raw(&self) -> Vec<u8> {
        self.to_tensor().to_bytes()
    }

    pub fn from_raw(image_id: &str, class_id: usize, bytes: &[u8]) -> Result<Self> {
        let (t, _) = Tensor::from_bytes(bytes)?;
        if t.rank() != 2 {
            return Err(Error::Format {
                path: image_id.to_string(),
                msg: format!("attention payload has shape {:?}", t.shape()),
            });
        }
        Ok(AttentionMap {
            image_id: image_id.to_string(),
            class_id,
            height: t.shape()[0],
            width: t.shape()[1],
            values: t.into_data(),
        })
    }
}

/// Min-max normalizes a map to `[0, 1]`; a constant map becomes zero.
pub fn normalize_map(tape: &mut Tape, map: Var) -> Var {
    let neg = tape.scale(map, -1.0);
    let neg_min = tape.max(neg);
    let shifted = tape.add_scalar_var(map, neg_min).expect("scalar shift");
    let range = tape.max(shifted);
    if tape.value(range).item() > 0.0 {
        tape.div_scalar_var(shifted, range).expect("scalar range")
    } else {
        shifted
    }
}

fn check_grid_coverage(nodes: &[&PatchNode], side: usize, image: usize) -> Result<()> {
    let Some(first) = nodes.first() else {
        return Err(Error::invalid(
            "splice_attention",
            format!("image {image} has no patches"),
        ));
    };
    let p = first.spec.region.height;
    let (top, left) = nodes.iter().fold((usize::MAX, usize::MAX), |(t, l), n| {
        (t.min(n.spec.region.top), l.min(n.spec.region.left))
    });
    for gy in 0..side {
        for gx in 0..side {
            let want = Region {
                top: top + gy * p,
                left: left + gx * p,
                height: p,
                width: p,
            };
            if !nodes.iter().any(|n| n.spec.region == want) {
                return Err(Error::invalid(
                    "splice_attention",
                    format!("image {image}: missing patch for grid cell ({gy}, {gx})"),
                ));
            }
        }
    }
    Ok(())
}

/// Splices per-node class maps `[n, h, w]` into one `[height, width]` map per batch image.
///
/// Grid patches are placed at their regions and summed; proposal boxes are fused by
/// per-pixel maximum with uncovered pixels left at zero. Background nodes are skipped.
/// Each spliced map is then min-max normalized.
pub fn splice_attention(
    tape: &mut Tape,
    node_maps: Var,
    nodes: &[PatchNode],
    images: usize,
    (height, width): (usize, usize),
) -> Result<Vec<Var>> {
    let s = tape.shape(node_maps).to_vec();
    if s.len() != 3 || s[0] != nodes.len() {
        return Err(Error::invalid(
            "splice_attention",
            format!("node maps {s:?} do not match {} nodes", nodes.len()),
        ));
    }
    let mut out = Vec::with_capacity(images);
    for image in 0..images {
        let mine: Vec<&PatchNode> = nodes
            .iter()
            .filter(|n| n.image == image && !n.spec.background)
            .collect();
        let mode = mine.first().map(|n| n.spec.mode);
        match mode {
            Some(CropMode::Grid { side }) => check_grid_coverage(&mine, side, image)?,
            Some(CropMode::Proposals { .. }) => {}
            None => {
                return Err(Error::invalid(
                    "splice_attention",
                    format!("image {image} has no foreground nodes"),
                ))
            }
        }
        let mut canvas: Option<Var> = None;
        for n in &mine {
            let r = n.spec.region;
            let m = tape.slice(node_maps, 0, n.id, 1)?;
            let m = tape.resize_bilinear(m, r.height, r.width)?;
            let placed = tape.pad2d(m, r.top, r.left, height, width)?;
            canvas = Some(match (canvas, mode) {
                (None, _) => placed,
                (Some(c), Some(CropMode::Grid { .. })) => tape.add(c, placed)?,
                (Some(c), _) => tape.maximum(c, placed)?,
            });
        }
        let canvas = tape.reshape(canvas.expect("at least one node"), &[height, width])?;
        out.push(normalize_map(tape, canvas));
    }
    Ok(out)
}

/// Cuts an image-level map `[height, width]` back into per-node masks `[k, h, w]`
/// at feature resolution, for the given nodes in order.
pub fn node_masks(tape: &mut Tape, map: Var, nodes: &[&PatchNode], (h, w): (usize, usize)) -> Result<Var> {
    let mut parts = Vec::with_capacity(nodes.len());
    for n in nodes {
        let r = n.spec.region;
        let rows = tape.slice(map, 0, r.top, r.height)?;
        let cell = tape.slice(rows, 1, r.left, r.width)?;
        let cell = tape.resize_bilinear(cell, h, w)?;
        parts.push(tape.reshape(cell, &[1, h, w])?);
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    tape.concat(&parts, 0)
}
