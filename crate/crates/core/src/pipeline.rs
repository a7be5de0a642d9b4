//! The P-GNN model, its training loop, attention inference and the whole-image CAM baseline.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::complementary::{self, AttentionMap, TransformerParams, TransformerVars};
use crate::config::ExperimentConfig;
use crate::data::{Dataset, Scene};
use crate::encoder::{self, EncoderParams, EncoderVars};
use crate::error::{Error, Result};
use crate::labels::{self, LabelMap};
use crate::losses::{self, ImageTerms, LossBreakdown, LossVars, LossWeights};
use crate::par;
use crate::params::{sgd_step, Parameters};
use crate::patch::{self, CropMode, Patch, PatchNode, ScoredBox};
use crate::tensor::{Tape, Tensor, Var};

/// Encoder, class-embedding table `[K + 1, C]` and one attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct PgnnModel {
    pub encoder: EncoderParams,
    pub class_table: Tensor,
    pub transformer: TransformerParams,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub class_table: Var,
    pub block: TransformerVars,
}

impl PgnnModel {
    pub fn init(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(&cfg.encoder(), &mut rng)?;
        let c = encoder.config.out_channels();
        let class_table = Tensor::uniform(&[cfg.classes + 1, c], -0.1, 0.1, &mut rng);
        let transformer = TransformerParams::init(&cfg.transformer(), &mut rng)?;
        Ok(PgnnModel {
            encoder,
            class_table,
            transformer,
        })
    }

    pub fn vars_from(&self, leaves: &[Var]) -> ModelVars {
        let ne = self.encoder.named().len();
        ModelVars {
            encoder: self.encoder.vars_from(&leaves[..ne]),
            class_table: leaves[ne],
            block: self.transformer.vars_from(&leaves[ne + 1..]),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> (Vec<Var>, ModelVars) {
        let leaves = self.leaves(tape);
        let vars = self.vars_from(&leaves);
        (leaves, vars)
    }
}

impl Parameters for PgnnModel {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.named();
        out.push(("pgnn.class_table".into(), &self.class_table));
        out.extend(self.transformer.named());
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.encoder.named_mut();
        out.push(("pgnn.class_table".into(), &mut self.class_table));
        out.extend(self.transformer.named_mut());
        out
    }
}

/// Crops every scene once; proposal mode takes each scene's boxes from `boxes`.
pub fn crop_scenes(cfg: &ExperimentConfig, data: &Dataset, boxes: Option<&[ScoredBox]>) -> Result<Vec<Vec<Patch>>> {
    data.scenes
        .iter()
        .map(|s| match cfg.crop {
            CropMode::Grid { side } => patch::crop_grid(&s.image, side, &s.id),
            CropMode::Proposals { k } => {
                let boxes = boxes.ok_or_else(|| Error::Config("proposal mode needs proposal boxes".into()))?;
                patch::crop_proposals(&s.image, boxes, k, cfg.patch_side, &s.id)
            }
        })
        .collect()
}

/// Tape handles produced by one forward pass over a same-class mini-batch.
#[derive(Clone, Debug)]
pub struct BatchForward {
    pub nodes: Vec<PatchNode>,
    /// Node features after the attention block, `[n, C, h, w]`.
    pub features: Var,
    /// `[n, n]` edge weights.
    pub edges: Var,
    /// Spliced attention per batch image, `[H, W]`.
    pub attention: Vec<Var>,
    /// Node index range of each batch image.
    pub ranges: Vec<Range<usize>>,
}

pub fn forward_batch(
    tape: &mut Tape,
    vars: &ModelVars,
    patches: &[&[Patch]],
    class: usize,
    image_size: (usize, usize),
) -> Result<BatchForward> {
    let owned: Vec<Vec<Patch>> = patches.iter().map(|p| p.to_vec()).collect();
    let (nodes, embedded) = patch::build_nodes(tape, &owned, &vars.encoder, vars.class_table, class)?;
    let block = complementary::transformer_block(tape, embedded, &vars.block)?;
    let maps = encoder::cam(tape, block.features, vars.encoder.head)?;
    let s = tape.shape(maps).to_vec();
    let maps = tape.slice(maps, 1, class - 1, 1)?;
    let maps = tape.reshape(maps, &[s[0], s[2], s[3]])?;
    let attention = complementary::splice_attention(tape, maps, &nodes, patches.len(), image_size)?;
    let mut ranges = Vec::with_capacity(patches.len());
    let mut at = 0;
    for p in patches {
        ranges.push(at..at + p.len());
        at += p.len();
    }
    Ok(BatchForward {
        nodes,
        features: block.features,
        edges: block.edges,
        attention,
        ranges,
    })
}

/// Soft-complementary loss of a forward pass; `prev[i]` is image `i`'s previous-epoch map.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    tape: &mut Tape,
    vars: &ModelVars,
    fwd: &BatchForward,
    scenes: &[&Scene],
    prev: &[&Tensor],
    class: usize,
    weights: &LossWeights,
    threshold: f64,
) -> Result<LossVars> {
    let fshape = tape.shape(fwd.features).to_vec();
    let res = (fshape[2], fshape[3]);
    let mut terms = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let r = fwd.ranges[i].clone();
        let nodes: Vec<&PatchNode> = fwd.nodes[r.clone()].iter().collect();
        let features = tape.slice(fwd.features, 0, r.start, r.len())?;
        let prev_map = tape.constant(losses::threshold_map(prev[i], threshold)?);
        let prev_masks = complementary::node_masks(tape, prev_map, &nodes, res)?;
        let new_masks = complementary::node_masks(tape, fwd.attention[i], &nodes, res)?;
        terms.push(ImageTerms {
            features,
            prev_masks,
            new_masks,
            attention: fwd.attention[i],
            labels: &scene.labels,
            class,
        });
    }
    losses::soft_complementary_loss(tape, &terms, vars.encoder.head, weights)
}

/// One mini-batch: a shared class and the dataset indices of its images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub class: usize,
    pub images: Vec<usize>,
}

/// Splits `pool` into chunks of `size`; a trailing single image joins the previous chunk.
fn chunk_pool(pool: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = pool.chunks(size).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|c| c.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

/// Same-class batches covering every (image, class) pair once, in shuffled order.
pub fn epoch_batches<R: rand::Rng>(data: &Dataset, batch_size: usize, rng: &mut R) -> Vec<Batch> {
    let mut out = Vec::new();
    for class in 1..=data.config.classes {
        let mut pool = data.indices_with(class);
        pool.shuffle(rng);
        for images in chunk_pool(&pool, batch_size) {
            out.push(Batch { class, images });
        }
    }
    out.shuffle(rng);
    out
}

/// Batches in dataset order, used for inference.
pub fn ordered_batches(data: &Dataset, batch_size: usize) -> Vec<Batch> {
    let mut out = Vec::new();
    for class in 1..=data.config.classes {
        for images in chunk_pool(&data.indices_with(class), batch_size) {
            out.push(Batch { class, images });
        }
    }
    out
}

/// Attention maps keyed by (scene index, class).
pub type MapStore = BTreeMap<(usize, usize), Tensor>;

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: PgnnModel,
    pub history: Vec<StepRecord>,
    /// Maps produced during the final epoch.
    pub maps: MapStore,
}

/// Builds the tape for one training step and returns it with the loss handles.
pub fn step_tape(
    model: &PgnnModel,
    cfg: &ExperimentConfig,
    data: &Dataset,
    patches: &[Vec<Patch>],
    batch: &Batch,
    prev: &[&Tensor],
) -> Result<(Tape, Vec<Var>, BatchForward, LossVars)> {
    let mut tape = Tape::new();
    let (leaves, vars) = model.bind(&mut tape);
    let sets: Vec<&[Patch]> = batch.images.iter().map(|&i| patches[i].as_slice()).collect();
    let fwd = forward_batch(&mut tape, &vars, &sets, batch.class, data.image_size())?;
    let scenes: Vec<&Scene> = batch.images.iter().map(|&i| &data.scenes[i]).collect();
    let loss = batch_loss(
        &mut tape,
        &vars,
        &fwd,
        &scenes,
        prev,
        batch.class,
        &cfg.weights(),
        cfg.threshold,
    )?;
    Ok((tape, leaves, fwd, loss))
}

/// Trains with plain SGD. Each epoch erases against the previous epoch's maps
/// (zero maps in the first epoch). `on_step` sees every loss breakdown.
pub fn train_pgnn(
    cfg: &ExperimentConfig,
    data: &Dataset,
    boxes: Option<&[ScoredBox]>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let patches = crop_scenes(cfg, data, boxes)?;
    let mut model = PgnnModel::init(cfg, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let (h, w) = data.image_size();
    let zero = Tensor::zeros(&[h, w]);
    let mut prev = MapStore::new();
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut current = MapStore::new();
        for (step, batch) in epoch_batches(data, cfg.batch_size, &mut rng).iter().enumerate() {
            let prev_maps: Vec<&Tensor> = batch
                .images
                .iter()
                .map(|&i| prev.get(&(i, batch.class)).unwrap_or(&zero))
                .collect();
            let (mut tape, leaves, fwd, loss) = step_tape(&model, cfg, data, &patches, batch, &prev_maps)?;
            let record = StepRecord {
                epoch,
                step,
                loss: loss.breakdown(&tape),
            };
            if !record.loss.is_finite() {
                log::error!("non-finite loss at epoch {epoch} step {step}: {:?}", record.loss);
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("{:?}", record.loss),
                });
            }
            tape.backward(loss.total)?;
            sgd_step(&mut model, &tape, &leaves, cfg.learning_rate);
            if !model.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: "parameters became non-finite".into(),
                });
            }
            for (&i, &a) in batch.images.iter().zip(&fwd.attention) {
                current.insert((i, batch.class), tape.value(a).clone());
            }
            on_step(&record);
            history.push(record);
        }
        if let Some(last) = history.last() {
            log::info!("epoch {epoch}: total {:.5} l_c {:.5}", last.loss.total, last.loss.l_c);
        }
        prev = current;
    }
    Ok(TrainOutcome {
        model,
        history,
        maps: prev,
    })
}

/// Attention maps for every scene and each class in its label set, from fixed batches.
pub fn infer_attention(
    model: &PgnnModel,
    cfg: &ExperimentConfig,
    data: &Dataset,
    boxes: Option<&[ScoredBox]>,
) -> Result<Vec<Vec<AttentionMap>>> {
    let patches = crop_scenes(cfg, data, boxes)?;
    let batches = ordered_batches(data, cfg.batch_size);
    let size = data.image_size();
    let results = par::map_slice(&batches, |b| -> Result<Vec<(usize, AttentionMap)>> {
        let mut tape = Tape::new();
        let (_, vars) = model.bind(&mut tape);
        let sets: Vec<&[Patch]> = b.images.iter().map(|&i| patches[i].as_slice()).collect();
        let fwd = forward_batch(&mut tape, &vars, &sets, b.class, size)?;
        Ok(b.images
            .iter()
            .zip(&fwd.attention)
            .map(|(&i, &a)| {
                let map = AttentionMap {
                    image_id: data.scenes[i].id.clone(),
                    class_id: b.class,
                    height: size.0,
                    width: size.1,
                    values: tape.value(a).data().to_vec(),
                };
                (i, map)
            })
            .collect())
    });
    collect_maps(data, results)
}

fn collect_maps(data: &Dataset, results: Vec<Result<Vec<(usize, AttentionMap)>>>) -> Result<Vec<Vec<AttentionMap>>> {
    let mut out = vec![Vec::new(); data.scenes.len()];
    for r in results {
        for (i, m) in r? {
            out[i].push(m);
        }
    }
    for maps in &mut out {
        maps.sort_by_key(|m| m.class_id);
    }
    Ok(out)
}

/// Pseudo-labels from per-scene class maps.
pub fn pseudo_labels(maps: &[Vec<AttentionMap>], t_bg: f64) -> Result<Vec<LabelMap>> {
    maps.iter().map(|m| labels::maps_to_labels(m, t_bg)).collect()
}

// ---- CAM baseline: same encoder and head on whole images, classification loss only ----

pub fn train_cam(cfg: &ExperimentConfig, data: &Dataset) -> Result<EncoderParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = EncoderParams::init(&cfg.encoder(), &mut rng)?;
    let mut order: Vec<usize> = (0..data.scenes.len()).collect();
    let (h, w) = data.image_size();
    for epoch in 0..cfg.cam_epochs {
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut pixels = Vec::with_capacity(chunk.len() * 3 * h * w);
            let mut labels = Vec::new();
            for &i in chunk {
                pixels.extend_from_slice(data.scenes[i].image.data());
                labels.extend_from_slice(&data.scenes[i].labels);
            }
            let mut tape = Tape::new();
            let (leaves, vars) = model.bind(&mut tape);
            let x = tape.constant(Tensor::new(&[chunk.len(), 3, h, w], pixels)?);
            let f = encoder::embed(&mut tape, x, &vars)?;
            let logits = encoder::classify(&mut tape, f, vars.head)?;
            let loss = losses::classification_loss(&mut tape, logits, &labels)?;
            let v = tape.value(loss).item();
            if !v.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("cam baseline loss {v}"),
                });
            }
            tape.backward(loss)?;
            sgd_step(&mut model, &tape, &leaves, cfg.cam_learning_rate);
        }
    }
    Ok(model)
}

/// Class activation maps of each scene's labelled classes, upsampled and min-max normalized.
pub fn cam_attention(model: &EncoderParams, data: &Dataset) -> Result<Vec<Vec<AttentionMap>>> {
    let (h, w) = data.image_size();
    let results = par::map_range(data.scenes.len(), |i| -> Result<Vec<(usize, AttentionMap)>> {
        let s = &data.scenes[i];
        let mut tape = Tape::new();
        let (_, vars) = model.bind(&mut tape);
        let x = tape.constant(s.image.reshaped(&[1, 3, h, w])?);
        let f = encoder::embed(&mut tape, x, &vars)?;
        let maps = encoder::cam(&mut tape, f, vars.head)?;
        let fs = tape.shape(maps).to_vec();
        let mut out = Vec::new();
        for c in s.classes() {
            let m = tape.slice(maps, 1, c - 1, 1)?;
            let m = tape.reshape(m, &[fs[2], fs[3]])?;
            let m = tape.resize_bilinear(m, h, w)?;
            let m = complementary::normalize_map(&mut tape, m);
            out.push((
                i,
                AttentionMap {
                    image_id: s.id.clone(),
                    class_id: c,
                    height: h,
                    width: w,
                    values: tape.value(m).data().to_vec(),
                },
            ));
        }
        Ok(out)
    });
    collect_maps(data, results)
}
