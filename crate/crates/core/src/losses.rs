//! Soft-complementary objective: erase, preserve, total variation and classification terms.

use serde::{Deserialize, Serialize};

use crate::encoder::{self, HeadVars};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Floor applied to probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub erase: f64,
    pub preserve: f64,
    pub tv: f64,
    pub class: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            erase: 1.0,
            preserve: 1.0,
            tv: 0.8,
            class: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(erase: f64, preserve: f64, tv: f64, class: f64) -> Result<Self> {
        let w = LossWeights {
            erase,
            preserve,
            tv,
            class,
        };
        w.validate()?;
        Ok(w)
    }

    /// Classification term only.
    pub fn class_only() -> Self {
        LossWeights {
            erase: 0.0,
            preserve: 0.0,
            tv: 0.0,
            class: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.erase, self.preserve, self.tv, self.class];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and >= 0, got {all:?}"
            )));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.erase, self.preserve, self.tv, self.class]
    }
}

/// Scalar values of the four terms and the weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_d: f64,
    pub l_p: f64,
    pub l_tv: f64,
    pub l_c: f64,
    pub total: f64,
}

pub const CSV_HEADER: &str = "epoch,step,l_D,l_P,l_TV,l_c,total";

impl LossBreakdown {
    /// Weighted total in the same evaluation order the tape uses.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        combine(w, self.l_d, self.l_p, self.l_tv, self.l_c)
    }

    pub fn csv_row(&self, epoch: usize, step: usize) -> String {
        format!(
            "{epoch},{step},{},{},{},{},{}",
            self.l_d, self.l_p, self.l_tv, self.l_c, self.total
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.l_d, self.l_p, self.l_tv, self.l_c, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn combine(w: &LossWeights, d: f64, p: f64, tv: f64, c: f64) -> f64 {
    w.erase * d - w.preserve * p + w.tv * tv + w.class * c
}

/// Keeps values strictly above `t`, zeroes the rest.
pub fn threshold_map(map: &Tensor, t: f64) -> Result<Tensor> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::invalid("threshold_map", format!("threshold {t} outside (0, 1)")));
    }
    Ok(map.map(|v| if v > t { v } else { 0.0 }))
}

fn fit_mask(tape: &mut Tape, mask: Var, features: Var) -> Result<Var> {
    let (fs, ms) = (tape.shape(features).to_vec(), tape.shape(mask).to_vec());
    if fs.len() != 4 || ms.len() != 3 || fs[0] != ms[0] {
        return Err(Error::shape("mask_apply", &fs, &ms));
    }
    if ms[1..] == fs[2..] {
        Ok(mask)
    } else {
        tape.resize_bilinear(mask, fs[2], fs[3])
    }
}

/// Both halves of a masking: `(phi(M, N), phi(1 - M, N))` for masks `[n, h, w]` and
/// features `[n, c, h', w']`. Masks are resized to feature resolution when needed.
///
/// The halves are `N - (N - M*N)` and `N - M*N`, which add back to `N` exactly.
pub fn mask_pair(tape: &mut Tape, mask: Var, features: Var) -> Result<(Var, Var)> {
    let mask = fit_mask(tape, mask, features)?;
    let kept = tape.mul_spatial(features, mask)?;
    let erased = tape.sub(features, kept)?;
    let kept = tape.sub(features, erased)?;
    Ok((kept, erased))
}

/// `phi(M, N)`: every channel multiplied by the mask.
pub fn mask_apply(tape: &mut Tape, mask: Var, features: Var) -> Result<Var> {
    Ok(mask_pair(tape, mask, features)?.0)
}

/// `phi(1 - M, N)`.
pub fn mask_complement(tape: &mut Tape, mask: Var, features: Var) -> Result<Var> {
    Ok(mask_pair(tape, mask, features)?.1)
}

/// Image-level logits `[1, classes]`: class scores averaged over the image's nodes.
pub fn image_logits(tape: &mut Tape, features: Var, head: HeadVars) -> Result<Var> {
    let logits = encoder::classify(tape, features, head)?;
    let n = tape.shape(logits)[0];
    let avg = tape.constant(Tensor::full(&[1, n], 1.0 / n as f64));
    tape.matmul(avg, logits)
}

/// `log P(c)` with `c` a foreground class in `1..=classes`, floored at [`LOG_FLOOR`].
pub fn class_log_prob(tape: &mut Tape, features: Var, head: HeadVars, class: usize) -> Result<Var> {
    let logits = image_logits(tape, features, head)?;
    let k = tape.shape(logits)[1];
    if class == 0 || class > k {
        return Err(Error::invalid(
            "class_log_prob",
            format!("class {class} outside 1..={k}"),
        ));
    }
    let z = tape.slice(logits, 1, class - 1, 1)?;
    let z = tape.reshape(z, &[1])?;
    let p = tape.sigmoid(z);
    let p = tape.clamp_min(p, LOG_FLOOR);
    Ok(tape.log(p))
}

/// `log P(c | phi(1 - A_prev, N))` on one image's node features.
pub fn erase_score(tape: &mut Tape, prev_masks: Var, features: Var, head: HeadVars, class: usize) -> Result<Var> {
    let erased = mask_complement(tape, prev_masks, features)?;
    class_log_prob(tape, erased, head, class)
}

/// `log P(c | phi(A_new, N))` on one image's node features.
pub fn preserve_score(tape: &mut Tape, new_masks: Var, features: Var, head: HeadVars, class: usize) -> Result<Var> {
    let kept = mask_apply(tape, new_masks, features)?;
    class_log_prob(tape, kept, head, class)
}

/// Square root of all squared horizontal and vertical neighbour differences of `[h, w]`.
pub fn tv_loss(tape: &mut Tape, map: Var) -> Result<Var> {
    let s = tape.shape(map).to_vec();
    if s.len() != 2 {
        return Err(Error::invalid("tv_loss", format!("expected [h, w], got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let mut parts = Vec::new();
    if w > 1 {
        let a = tape.slice(map, 1, 0, w - 1)?;
        let b = tape.slice(map, 1, 1, w - 1)?;
        parts.push(tape.sub(a, b)?);
    }
    if h > 1 {
        let a = tape.slice(map, 0, 0, h - 1)?;
        let b = tape.slice(map, 0, 1, h - 1)?;
        parts.push(tape.sub(a, b)?);
    }
    let mut total = None;
    for d in parts {
        let sq = tape.mul(d, d)?;
        let s = tape.sum(sq);
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    match total {
        Some(t) => Ok(tape.sqrt(t)),
        None => {
            // 1x1 map: keep the result connected to the input so gradients are zero, not missing
            let z = tape.scale(map, 0.0);
            let z = tape.sum(z);
            Ok(z)
        }
    }
}

/// Plain evaluation of [`tv_loss`].
pub fn tv_value(map: &Tensor) -> f64 {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let d = map.data();
    let mut horiz = 0.0;
    for y in 0..h {
        for x in 0..w.saturating_sub(1) {
            let v = d[y * w + x] - d[y * w + x + 1];
            horiz += v * v;
        }
    }
    let mut vert = 0.0;
    for y in 0..h.saturating_sub(1) {
        for x in 0..w {
            let v = d[y * w + x] - d[(y + 1) * w + x];
            vert += v * v;
        }
    }
    (horiz + vert).sqrt()
}

/// Mean binary cross-entropy of sigmoid(logits) `[1, K]` against a `{0, 1}` label vector.
pub fn classification_loss(tape: &mut Tape, logits: Var, labels: &[f64]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.iter().product::<usize>() != labels.len() {
        return Err(Error::shape("classification_loss", &s, &[labels.len()]));
    }
    if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::invalid(
            "classification_loss",
            format!("label {bad} is not 0 or 1"),
        ));
    }
    let pos = tape.constant(Tensor::from_parts(s.clone(), labels.to_vec()));
    let neg = tape.constant(Tensor::from_parts(s, labels.iter().map(|y| 1.0 - y).collect()));
    let p = tape.sigmoid(logits);
    let p = tape.clamp_min(p, LOG_FLOOR);
    let log_p = tape.log(p);
    let flipped = tape.scale(logits, -1.0);
    let q = tape.sigmoid(flipped);
    let q = tape.clamp_min(q, LOG_FLOOR);
    let log_q = tape.log(q);
    let a = tape.mul(pos, log_p)?;
    let b = tape.mul(neg, log_q)?;
    let ll = tape.add(a, b)?;
    let m = tape.mean(ll);
    Ok(tape.scale(m, -1.0))
}

/// Inputs for the loss of one image in a mini-batch.
#[derive(Clone, Copy, Debug)]
pub struct ImageTerms<'a> {
    /// Node features of this image only, `[n_i, c, h, w]`.
    pub features: Var,
    /// Thresholded previous-epoch attention cut to the nodes, `[n_i, h, w]` (constant).
    pub prev_masks: Var,
    /// Current attention cut to the nodes, `[n_i, h, w]`.
    pub new_masks: Var,
    /// Current spliced attention map `[H, W]`.
    pub attention: Var,
    /// Image-level multi-hot labels over the foreground classes.
    pub labels: &'a [f64],
    /// Shared class of the mini-batch, in `1..=K`.
    pub class: usize,
}

/// Tape handles of the batch-averaged terms and the weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_d: Var,
    pub l_p: Var,
    pub l_tv: Var,
    pub l_c: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let v = |x: Var| tape.value(x).item();
        LossBreakdown {
            l_d: v(self.l_d),
            l_p: v(self.l_p),
            l_tv: v(self.l_tv),
            l_c: v(self.l_c),
            total: v(self.total),
        }
    }
}

/// `l1*l_D - l2*l_P + l3*l_TV + l4*l_c`, each term averaged over the batch images.
pub fn soft_complementary_loss(
    tape: &mut Tape,
    images: &[ImageTerms<'_>],
    head: HeadVars,
    weights: &LossWeights,
) -> Result<LossVars> {
    weights.validate()?;
    if images.is_empty() {
        return Err(Error::invalid("soft_complementary_loss", "empty batch"));
    }
    let mut sums: Option<[Var; 4]> = None;
    for img in images {
        let d = erase_score(tape, img.prev_masks, img.features, head, img.class)?;
        let p = preserve_score(tape, img.new_masks, img.features, head, img.class)?;
        let tv = tv_loss(tape, img.attention)?;
        let logits = image_logits(tape, img.features, head)?;
        let c = classification_loss(tape, logits, img.labels)?;
        let terms = [d, p, tv, c];
        sums = Some(match sums {
            None => terms,
            Some(acc) => {
                let mut out = acc;
                for (o, t) in out.iter_mut().zip(terms) {
                    *o = tape.add(*o, t)?;
                }
                out
            }
        });
    }
    let inv = 1.0 / images.len() as f64;
    let [d, p, tv, c] = sums.expect("non-empty batch").map(|v| tape.scale(v, inv));
    let wd = tape.scale(d, weights.erase);
    let wp = tape.scale(p, weights.preserve);
    let wtv = tape.scale(tv, weights.tv);
    let wc = tape.scale(c, weights.class);
    let total = tape.sub(wd, wp)?;
    let total = tape.add(total, wtv)?;
    let total = tape.add(total, wc)?;
    Ok(LossVars {
        l_d: d,
        l_p: p,
        l_tv: tv,
        l_c: c,
        total,
    })
}
