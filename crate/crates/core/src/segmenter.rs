//! Stage-2 segmentation head trained on pseudo-labels, with mutual-complementary
//! label refinement after every epoch.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::encoder::{kaiming_bound, ConvLayer};
use crate::error::{Error, Result};
use crate::labels::{mutual_update, LabelMap};
use crate::losses::LOG_FLOOR;
use crate::par;
use crate::params::{sgd_step, Parameters};
use crate::tensor::{Tape, Tensor, Var};

/// Two 3x3 conv + ReLU layers and a 1x1 layer scoring `K + 1` classes per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmenterParams {
    pub layers: [ConvLayer; 3],
}

impl SegmenterParams {
    pub fn init<R: Rng + ?Sized>(channels: usize, classes: usize, rng: &mut R) -> Self {
        let conv = |cin: usize, cout: usize, rng: &mut R| {
            let b = kaiming_bound(cin * 9);
            ConvLayer {
                weight: Tensor::uniform(&[cout, cin, 3, 3], -b, b, rng),
                bias: Tensor::zeros(&[cout]),
            }
        };
        let first = conv(3, channels, rng);
        let second = conv(channels, channels, rng);
        let b = kaiming_bound(channels);
        let head = ConvLayer {
            weight: Tensor::uniform(&[classes + 1, channels], -b, b, rng),
            bias: Tensor::zeros(&[classes + 1]),
        };
        SegmenterParams {
            layers: [first, second, head],
        }
    }

    pub fn classes(&self) -> usize {
        self.layers[2].bias.numel() - 1
    }
}

impl Parameters for SegmenterParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("segmenter.conv{i}.weight"), &l.weight));
            out.push((format!("segmenter.conv{i}.bias"), &l.bias));
        }
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("segmenter.conv{i}.weight"), &mut l.weight));
            out.push((format!("segmenter.conv{i}.bias"), &mut l.bias));
        }
        out
    }
}

/// Per-pixel class scores `[n, K + 1, h, w]` from images `[n, 3, h, w]`.
pub fn segment_logits(tape: &mut Tape, leaves: &[Var], images: Var) -> Result<Var> {
    let x = tape.conv3x3(images, leaves[0], leaves[1])?;
    let x = tape.relu(x);
    let x = tape.conv3x3(x, leaves[2], leaves[3])?;
    let x = tape.relu(x);
    tape.conv1x1(x, leaves[4], leaves[5])
}

/// Mean per-pixel cross-entropy of softmax scores against `targets` (one label map per image).
pub fn pixel_cross_entropy(tape: &mut Tape, logits: Var, targets: &[&LabelMap]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    let (n, k, h, w) = (s[0], s[1], s[2], s[3]);
    if targets.len() != n {
        return Err(Error::invalid(
            "pixel_cross_entropy",
            format!("{} targets for {n} images", targets.len()),
        ));
    }
    let mut onehot = Tensor::zeros(&s);
    for (i, t) in targets.iter().enumerate() {
        if (t.height, t.width) != (h, w) {
            return Err(Error::shape("pixel_cross_entropy", &[h, w], &[t.height, t.width]));
        }
        for (p, &c) in t.data.iter().enumerate() {
            if c as usize >= k {
                return Err(Error::invalid(
                    "pixel_cross_entropy",
                    format!("label {c} outside 0..{k}"),
                ));
            }
            onehot.data_mut()[(i * k + c as usize) * h * w + p] = 1.0;
        }
    }
    let p = tape.softmax(logits, 1)?;
    let p = tape.clamp_min(p, LOG_FLOOR);
    let logp = tape.log(p);
    let mask = tape.constant(onehot);
    let picked = tape.mul(logp, mask)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / (n * h * w) as f64))
}

/// Argmax labels restricted to background and `allowed`; ties go to the lowest class.
pub fn predict(model: &SegmenterParams, image: &Tensor, allowed: &[usize]) -> Result<LabelMap> {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let mut tape = Tape::new();
    let leaves = model.leaves(&mut tape);
    let x = tape.constant(image.reshaped(&[1, 3, h, w])?);
    let logits = segment_logits(&mut tape, &leaves, x)?;
    let z = tape.value(logits).data();
    let plane = h * w;
    let mut data = vec![0u8; plane];
    for (p, out) in data.iter_mut().enumerate() {
        let mut best = (0usize, z[p]);
        for &c in allowed {
            if c > model.classes() {
                return Err(Error::invalid(
                    "predict",
                    format!("class {c} outside 1..={}", model.classes()),
                ));
            }
            let v = z[c * plane + p];
            if v > best.1 {
                best = (c, v);
            }
        }
        *out = best.0 as u8;
    }
    LabelMap::new(h, w, data)
}

#[derive(Clone, Debug)]
pub struct SegmenterOutcome {
    pub model: SegmenterParams,
    /// Labels after each epoch; unchanged from the input when refinement is off.
    pub labels: Vec<Vec<LabelMap>>,
    /// Total background pixels of the label set, before training and after each epoch.
    pub background: Vec<usize>,
    /// Mean cross-entropy per epoch.
    pub losses: Vec<f64>,
}

/// Trains the head on `initial` labels. With `refine`, labels become
/// `mutual_update(C_t, prediction)` after every epoch and the next epoch trains on them.
pub fn train_segmenter(
    cfg: &ExperimentConfig,
    data: &Dataset,
    initial: &[LabelMap],
    refine: bool,
) -> Result<SegmenterOutcome> {
    if initial.len() != data.scenes.len() {
        return Err(Error::invalid(
            "train_segmenter",
            format!("{} label maps for {} scenes", initial.len(), data.scenes.len()),
        ));
    }
    let (h, w) = data.image_size();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    let mut model = SegmenterParams::init(cfg.segmenter_channels, cfg.classes, &mut rng);
    let mut current = initial.to_vec();
    let count = |ls: &[LabelMap]| ls.iter().map(LabelMap::background_count).sum::<usize>();
    let mut background = vec![count(&current)];
    let mut history = Vec::new();
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..data.scenes.len()).collect();
    for epoch in 0..cfg.segmenter_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut pixels = Vec::with_capacity(chunk.len() * 3 * h * w);
            for &i in chunk {
                pixels.extend_from_slice(data.scenes[i].image.data());
            }
            let targets: Vec<&LabelMap> = chunk.iter().map(|&i| &current[i]).collect();
            let mut tape = Tape::new();
            let leaves = model.leaves(&mut tape);
            let x = tape.constant(Tensor::new(&[chunk.len(), 3, h, w], pixels)?);
            let logits = segment_logits(&mut tape, &leaves, x)?;
            let loss = pixel_cross_entropy(&mut tape, logits, &targets)?;
            let v = tape.value(loss).item();
            if !v.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("segmenter loss {v}"),
                });
            }
            tape.backward(loss)?;
            sgd_step(&mut model, &tape, &leaves, cfg.segmenter_learning_rate);
            sum += v;
            steps += 1;
        }
        losses.push(sum / steps.max(1) as f64);
        if refine {
            let preds = par::map_range(data.scenes.len(), |i| {
                predict(&model, &data.scenes[i].image, &data.scenes[i].classes())
            });
            current = current
                .iter()
                .zip(preds)
                .map(|(c, p)| mutual_update(c, &p?))
                .collect::<Result<_>>()?;
        }
        let bg = count(&current);
        if bg > *background.last().unwrap() {
            return Err(Error::invalid(
                "train_segmenter",
                format!(
                    "background grew from {} to {bg} at epoch {epoch}",
                    background.last().unwrap()
                ),
            ));
        }
        background.push(bg);
        log::info!("segmenter epoch {epoch}: loss {:.5} background {bg}", losses[epoch]);
        history.push(current.clone());
    }
    Ok(SegmenterOutcome {
        model,
        labels: history,
        background,
        losses,
    })
}

/// Final labels of a run, or the input labels when no epoch ran.
pub fn final_labels<'a>(out: &'a SegmenterOutcome, initial: &'a [LabelMap]) -> &'a [LabelMap] {
    out.labels.last().map(Vec::as_slice).unwrap_or(initial)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, max_relative_error};

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z0 = Tensor::uniform(&[2, 3, 2, 2], -2.0, 2.0, &mut rng);
        let a = LabelMap::new(2, 2, vec![0, 1, 2, 1]).unwrap();
        let b = LabelMap::new(2, 2, vec![2, 2, 0, 0]).unwrap();
        let direct = |z: &Tensor| {
            let mut total = 0.0;
            for (i, t) in [&a, &b].iter().enumerate() {
                for p in 0..4 {
                    let e: Vec<f64> = (0..3).map(|c| z.data()[(i * 3 + c) * 4 + p].exp()).collect();
                    total -= (e[t.data[p] as usize] / e.iter().sum::<f64>()).ln();
                }
            }
            total / 8.0
        };
        let mut tape = Tape::new();
        let z = tape.leaf(z0.clone());
        let l = pixel_cross_entropy(&mut tape, z, &[&a, &b]).unwrap();
        assert!((tape.value(l).item() - direct(&z0)).abs() < 1e-12);
        tape.backward(l).unwrap();
        let numeric = finite_diff_grad(|z| direct(z), &z0, 1e-5).unwrap();
        assert!(max_relative_error(tape.grad(z).unwrap(), &numeric, 1e-3, 1e-6) < 1e-4);

        let bad = LabelMap::new(2, 2, vec![3, 0, 0, 0]).unwrap();
        assert!(pixel_cross_entropy(&mut tape, z, &[&a, &bad]).is_err());
        assert!(pixel_cross_entropy(&mut tape, z, &[&a]).is_err());
    }

    #[test]
    fn prediction_respects_allowed_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = SegmenterParams::init(4, 3, &mut rng);
        // class 2 dominates everywhere
        m.layers[2].weight = Tensor::zeros(&[4, 4]);
        m.layers[2].bias = Tensor::new(&[4], vec![0.0, 1.0, 5.0, 2.0]).unwrap();
        let img = Tensor::uniform(&[3, 8, 8], 0.0, 1.0, &mut rng);
        assert!(predict(&m, &img, &[2]).unwrap().data.iter().all(|&v| v == 2));
        assert!(predict(&m, &img, &[1, 3]).unwrap().data.iter().all(|&v| v == 3));
        assert_eq!(predict(&m, &img, &[]).unwrap().background_count(), 64);
        assert!(predict(&m, &img, &[4]).is_err());
    }

    #[test]
    fn refinement_never_grows_background() {
        let cfg = ExperimentConfig {
            scenes: 12,
            image_size: 16,
            classes: 2,
            segmenter_epochs: 3,
            scene: crate::config::SceneConfig {
                object_min: 5,
                object_max: 7,
                ..Default::default()
            },
            ..Default::default()
        };
        let (data, _) = crate::data::generate_dataset(&cfg.data()).unwrap();
        let initial: Vec<LabelMap> = data.scenes.iter().map(|_| LabelMap::background(16, 16)).collect();
        let out = train_segmenter(&cfg, &data, &initial, true).unwrap();
        assert_eq!(out.background.len(), 4);
        assert!(out.background.windows(2).all(|w| w[1] <= w[0]));
        let fixed = train_segmenter(&cfg, &data, &initial, false).unwrap();
        assert_eq!(final_labels(&fixed, &initial), initial.as_slice());
        assert!(out.losses.iter().all(|l| l.is_finite()));
    }
}
