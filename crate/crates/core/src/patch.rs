//! Cropping images into patches and turning them into graph nodes.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderVars};
use crate::error::{Error, Result};
use crate::tensor::{resize_plane, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CropMode {
    /// `side x side` square tiles.
    Grid { side: usize },
    /// Top-`k` scored proposal boxes plus one background node.
    Proposals { k: usize },
}

impl fmt::Display for CropMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CropMode::Grid { side } => write!(f, "grid{side}"),
            CropMode::Proposals { k } => write!(f, "proposals{k}"),
        }
    }
}

/// Pixel rectangle `[top, top+height) x [left, left+width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSpec {
    pub mode: CropMode,
    pub image_id: String,
    /// Region in the source image. The background node of proposal mode spans the image.
    pub region: Region,
    pub background: bool,
}

/// A cropped patch ready for embedding.
#[derive(Clone, Debug)]
pub struct Patch {
    pub spec: PatchSpec,
    /// `[3, p, p]` pixels.
    pub pixels: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredBox {
    pub image_id: String,
    pub region: Region,
    pub score: f64,
    /// Line order in the source file, used as the tie-break.
    pub order: usize,
}

fn image_dims(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        [3, h, w] => Ok((*h, *w)),
        s => Err(Error::invalid("crop", format!("expected [3,H,W] image, got {s:?}"))),
    }
}

fn crop(image: &Tensor, r: Region) -> Tensor {
    let w = image.shape()[2];
    let h = image.shape()[1];
    let mut out = Vec::with_capacity(3 * r.height * r.width);
    for c in 0..3 {
        for y in r.top..r.top + r.height {
            let row = (c * h + y) * w;
            out.extend_from_slice(&image.data()[row + r.left..row + r.left + r.width]);
        }
    }
    Tensor::from_parts(vec![3, r.height, r.width], out)
}

fn resize_rgb(t: &Tensor, side: usize) -> Tensor {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let mut out = Vec::with_capacity(3 * side * side);
    for c in 0..3 {
        out.extend(resize_plane(
            &t.data()[c * h * w..(c + 1) * h * w],
            (h, w),
            (side, side),
        ));
    }
    Tensor::from_parts(vec![3, side, side], out)
}

/// Largest centred square whose side is divisible by `side`.
pub fn central_square(height: usize, width: usize, side: usize) -> Region {
    let edge = (height.min(width) / side) * side;
    Region {
        top: (height - edge) / 2,
        left: (width - edge) / 2,
        height: edge,
        width: edge,
    }
}

/// Tiles the central square crop of `image` into `side * side` equal squares, in raster order.
pub fn crop_grid(image: &Tensor, side: usize, image_id: &str) -> Result<Vec<Patch>> {
    let (h, w) = image_dims(image)?;
    if side == 0 {
        return Err(Error::invalid("crop_grid", "side count must be at least 1"));
    }
    if h.min(w) < encoder::MIN_INPUT_SIDE * side {
        return Err(Error::precondition(
            "crop_grid",
            format!(
                "{h}x{w} image too small for {side}x{side} patches of at least {} px",
                encoder::MIN_INPUT_SIDE
            ),
        ));
    }
    let square = central_square(h, w, side);
    let p = square.height / side;
    let mut patches = Vec::with_capacity(side * side);
    for gy in 0..side {
        for gx in 0..side {
            let region = Region {
                top: square.top + gy * p,
                left: square.left + gx * p,
                height: p,
                width: p,
            };
            patches.push(Patch {
                spec: PatchSpec {
                    mode: CropMode::Grid { side },
                    image_id: image_id.to_string(),
                    region,
                    background: false,
                },
                pixels: crop(image, region),
            });
        }
    }
    Ok(patches)
}

/// Top-`k` boxes for `image_id` (ties by file order), each resized to `patch_side`,
/// followed by one background patch: the whole image with every selected box zeroed.
pub fn crop_proposals(
    image: &Tensor,
    boxes: &[ScoredBox],
    k: usize,
    patch_side: usize,
    image_id: &str,
) -> Result<Vec<Patch>> {
    let (h, w) = image_dims(image)?;
    if k == 0 {
        return Err(Error::invalid("crop_proposals", "k must be at least 1"));
    }
    if patch_side < encoder::MIN_INPUT_SIDE {
        return Err(Error::precondition(
            "crop_proposals",
            format!("patch side {patch_side} too small"),
        ));
    }
    let mut mine: Vec<&ScoredBox> = boxes.iter().filter(|b| b.image_id == image_id).collect();
    if mine.is_empty() {
        return Err(Error::Data(format!("no proposal boxes for image {image_id}")));
    }
    for b in &mine {
        let r = b.region;
        if !b.score.is_finite() {
            return Err(Error::Data(format!("non-finite score for a box of {image_id}")));
        }
        if r.height == 0 || r.width == 0 || r.top + r.height > h || r.left + r.width > w {
            return Err(Error::Data(format!("box {r:?} outside {h}x{w} image {image_id}")));
        }
    }
    if mine.len() < k {
        log::warn!("image {image_id}: only {} boxes for k = {k}; using all", mine.len());
    }
    // equal scores fall back to file order
    mine.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.order.cmp(&b.order)));
    mine.truncate(k);

    let mode = CropMode::Proposals { k };
    let mut patches: Vec<Patch> = mine
        .iter()
        .map(|b| Patch {
            spec: PatchSpec {
                mode,
                image_id: image_id.to_string(),
                region: b.region,
                background: false,
            },
            pixels: resize_rgb(&crop(image, b.region), patch_side),
        })
        .collect();

    let mut rest = image.clone();
    for b in &mine {
        let r = b.region;
        for c in 0..3 {
            for y in r.top..r.top + r.height {
                for x in r.left..r.left + r.width {
                    rest.set(&[c, y, x], 0.0);
                }
            }
        }
    }
    patches.push(Patch {
        spec: PatchSpec {
            mode,
            image_id: image_id.to_string(),
            region: Region {
                top: 0,
                left: 0,
                height: h,
                width: w,
            },
            background: true,
        },
        pixels: resize_rgb(&rest, patch_side),
    });
    Ok(patches)
}

/// Parses a proposal file: `image_id top left height width score` per line.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_boxes(text: &str) -> Result<Vec<ScoredBox>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: String| Error::Format {
            path: "<boxes>".into(),
            msg: format!("line {}: {msg}", lineno + 1),
        };
        if fields.len() != 6 {
            return Err(bad(format!("expected 6 fields, got {}", fields.len())));
        }
        let num = |i: usize| -> Result<usize> {
            let v: f64 = fields[i]
                .parse()
                .map_err(|_| bad(format!("bad number {:?}", fields[i])))?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(bad(format!("expected a non-negative integer, got {}", fields[i])));
            }
            Ok(v as usize)
        };
        let score: f64 = fields[5]
            .parse()
            .map_err(|_| bad(format!("bad score {:?}", fields[5])))?;
        out.push(ScoredBox {
            image_id: fields[0].to_string(),
            region: Region {
                top: num(1)?,
                left: num(2)?,
                height: num(3)?,
                width: num(4)?,
            },
            score,
            order: out.len(),
        });
    }
    if out.is_empty() {
        return Err(Error::Data("proposal box file is empty".into()));
    }
    Ok(out)
}

/// Class index of a node: background nodes get 0, foreground nodes the batch's shared class.
pub fn assign_class(spec: &PatchSpec, batch_class: usize) -> usize {
    if spec.background {
        0
    } else {
        batch_class
    }
}

/// Graph node metadata. Features live on the tape, one row per node.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchNode {
    pub id: usize,
    /// Position of the source image in the mini-batch.
    pub image: usize,
    pub class_index: usize,
    pub spec: PatchSpec,
}

/// Embeds all patches of a mini-batch and adds their class embeddings.
///
/// `patches[i]` holds the patches of batch image `i`. Node order is image order,
/// then patch order within the image. `class_table` is `[classes + 1, channels]`.
pub fn build_nodes(
    tape: &mut Tape,
    patches: &[Vec<Patch>],
    encoder: &EncoderVars,
    class_table: Var,
    batch_class: usize,
) -> Result<(Vec<PatchNode>, Var)> {
    let first = patches
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::invalid("build_nodes", "no patches"))?;
    let shape = first.pixels.shape().to_vec();
    let mut nodes = Vec::new();
    let mut pixels = Vec::new();
    for (image, list) in patches.iter().enumerate() {
        for p in list {
            if p.pixels.shape() != shape.as_slice() {
                return Err(Error::shape("build_nodes", &shape, p.pixels.shape()));
            }
            nodes.push(PatchNode {
                id: nodes.len(),
                image,
                class_index: assign_class(&p.spec, batch_class),
                spec: p.spec.clone(),
            });
            pixels.extend_from_slice(p.pixels.data());
        }
    }
    let rows = tape.shape(class_table)[0];
    if batch_class >= rows {
        return Err(Error::invalid(
            "build_nodes",
            format!("class {batch_class} outside embedding table of {rows}"),
        ));
    }
    let batch = tape.constant(Tensor::from_parts(
        vec![nodes.len(), shape[0], shape[1], shape[2]],
        pixels,
    ));
    let feats = encoder::embed(tape, batch, encoder)?;
    let classes: Vec<usize> = nodes.iter().map(|n| n.class_index).collect();
    let emb = tape.gather_rows(class_table, &classes)?;
    let out = tape.add_nc(feats, emb)?;
    Ok((nodes, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, EncoderParams};
    use crate::tensor::{finite_diff_grad, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::new(&[3, h, w], (0..3 * h * w).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn grid_single_patch() {
        let img = ramp(32, 32);
        let p = crop_grid(&img, 1, "a").unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].pixels, img);
    }

    #[test]
    fn grid_tiles_exactly() {
        let img = ramp(32, 32);
        let patches = crop_grid(&img, 4, "a").unwrap();
        assert_eq!(patches.len(), 16);
        let mut hits = vec![0u8; 32 * 32];
        for p in &patches {
            let r = p.spec.region;
            assert_eq!((r.height, r.width), (8, 8));
            for y in 0..8 {
                for x in 0..8 {
                    hits[(r.top + y) * 32 + r.left + x] += 1;
                    for c in 0..3 {
                        assert_eq!(p.pixels.get(&[c, y, x]), img.get(&[c, r.top + y, r.left + x]));
                    }
                }
            }
        }
        assert!(hits.iter().all(|&h| h == 1));
        // raster order
        assert_eq!(patches[1].spec.region.left, 8);
        assert_eq!(patches[4].spec.region.top, 8);
    }

    #[test]
    fn grid_centre_crops_non_square() {
        let img = ramp(33, 32);
        let patches = crop_grid(&img, 4, "a").unwrap();
        assert_eq!(
            patches[0].spec.region,
            Region {
                top: 0,
                left: 0,
                height: 8,
                width: 8
            }
        );
        assert_eq!(
            central_square(33, 32, 4),
            Region {
                top: 0,
                left: 0,
                height: 32,
                width: 32
            }
        );
        assert_eq!(
            central_square(40, 35, 4),
            Region {
                top: 4,
                left: 1,
                height: 32,
                width: 32
            }
        );
        assert!(crop_grid(&ramp(31, 40), 4, "a").is_err());
        assert!(crop_grid(&img, 0, "a").is_err());
    }

    fn boxes(text: &str) -> Vec<ScoredBox> {
        parse_boxes(text).unwrap()
    }

    #[test]
    fn proposals_left_half() {
        let img = Tensor::ones(&[3, 16, 16]);
        let b = boxes("a 0 0 16 8 0.9\n");
        let p = crop_proposals(&img, &b, 1, 16, "a").unwrap();
        assert_eq!(p.len(), 2);
        assert!(!p[0].spec.background && p[1].spec.background);
        // background: left half zeroed, right half visible
        let bg = &p[1].pixels;
        assert_eq!(bg.get(&[0, 5, 2]), 0.0);
        assert_eq!(bg.get(&[0, 5, 12]), 1.0);
    }

    #[test]
    fn proposals_top_k_and_ties() {
        let img = Tensor::ones(&[3, 16, 16]);
        let b = boxes("a 0 0 8 8 0.1\na 0 8 8 8 0.7\na 8 0 8 8 0.5\na 8 8 8 8 0.9\na 2 2 8 8 0.3\n");
        let p = crop_proposals(&img, &b, 3, 8, "a").unwrap();
        let picked: Vec<Region> = p[..3].iter().map(|p| p.spec.region).collect();
        let mut sorted = b.clone();
        sorted.sort_by(|x, y| y.score.partial_cmp(&x.score).unwrap());
        let expect: Vec<Region> = sorted[..3].iter().map(|b| b.region).collect();
        assert_eq!(picked, expect);

        let tie = boxes("a 0 0 8 8 0.5\na 8 8 8 8 0.5\n");
        let p = crop_proposals(&img, &tie, 1, 8, "a").unwrap();
        assert_eq!(p[0].spec.region.top, 0);

        // fewer than k: use all
        let p = crop_proposals(&img, &tie, 5, 8, "a").unwrap();
        assert_eq!(p.len(), 3);
        assert!(crop_proposals(&img, &tie, 1, 8, "missing").is_err());
        assert!(crop_proposals(&img, &boxes("a 10 10 8 8 1"), 1, 8, "a").is_err());
    }

    #[test]
    fn box_file_errors() {
        assert!(parse_boxes("").is_err());
        assert!(parse_boxes("# only comments\n\n").is_err());
        assert!(parse_boxes("a 0 0 8 8").is_err());
        assert!(parse_boxes("a 0 0 8 x 0.5").is_err());
        assert!(parse_boxes("a 0 -1 8 8 0.5").is_err());
        let b = parse_boxes("img_1 1 2 3 4 0.25\n").unwrap();
        assert_eq!(
            b[0].region,
            Region {
                top: 1,
                left: 2,
                height: 3,
                width: 4
            }
        );
    }

    #[test]
    fn class_assignment() {
        let mut spec = PatchSpec {
            mode: CropMode::Proposals { k: 1 },
            image_id: "a".into(),
            region: Region {
                top: 0,
                left: 0,
                height: 8,
                width: 8,
            },
            background: true,
        };
        assert_eq!(assign_class(&spec, 3), 0);
        spec.background = false;
        assert_eq!(assign_class(&spec, 3), 3);
        spec.mode = CropMode::Grid { side: 2 };
        assert_eq!(assign_class(&spec, 2), 2);
    }

    fn small_encoder() -> EncoderParams {
        let cfg = EncoderConfig {
            channels: vec![3, 4, 4],
            pool_after: Some(0),
            classes: 2,
        };
        EncoderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn zero_class_embedding_is_identity() {
        let enc = small_encoder();
        let img = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let patches = vec![crop_grid(&img, 2, "a").unwrap()];
        let mut tape = Tape::new();
        let (_, ev) = enc.bind(&mut tape);
        let table = tape.leaf(Tensor::zeros(&[3, 4]));
        let (nodes, feats) = build_nodes(&mut tape, &patches, &ev, table, 1).unwrap();
        assert_eq!(nodes.len(), 4);
        let px: Vec<f64> = patches[0].iter().flat_map(|p| p.pixels.data().to_vec()).collect();
        let raw = tape.constant(Tensor::new(&[4, 3, 8, 8], px).unwrap());
        let plain = encoder::embed(&mut tape, raw, &ev).unwrap();
        assert_eq!(tape.value(feats), tape.value(plain));
    }

    #[test]
    fn same_class_gets_same_embedding_and_gradient_flows() {
        let enc = small_encoder();
        let img = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let patches = vec![crop_grid(&img, 2, "a").unwrap()];
        let table0 = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let run = |table_value: &Tensor, tape: &mut Tape, leaf: bool| {
            let (_, ev) = enc.bind(tape);
            let table = if leaf {
                tape.leaf(table_value.clone())
            } else {
                tape.constant(table_value.clone())
            };
            let (nodes, feats) = build_nodes(tape, &patches, &ev, table, 2).unwrap();
            assert!(nodes.iter().all(|n| n.class_index == 2));
            let sq = tape.mul(feats, feats).unwrap();
            let loss = tape.sum(sq);
            (table, feats, loss)
        };
        let mut tape = Tape::new();
        let (table, feats, loss) = run(&table0, &mut tape, true);
        // added per-channel offset identical across the two same-class nodes
        let raw_plus = tape.value(feats).clone();
        let mut zeroed = table0.clone();
        zeroed.data_mut().fill(0.0);
        let mut t2 = Tape::new();
        let (_, f0, _) = run(&zeroed, &mut t2, false);
        let base = t2.value(f0);
        for node in 0..4 {
            for ch in 0..4 {
                let off = raw_plus.get(&[node, ch, 0, 0]) - base.get(&[node, ch, 0, 0]);
                assert!((off - table0.get(&[2, ch])).abs() < 1e-12);
            }
        }
        tape.backward(loss).unwrap();
        let analytic = tape.grad(table).unwrap().clone();
        assert!(
            analytic.data()[..8].iter().all(|&g| g == 0.0),
            "unused rows get no gradient"
        );
        let numeric = finite_diff_grad(
            |t| {
                let mut tape = Tape::new();
                let (_, _, l) = run(t, &mut tape, false);
                tape.value(l).item()
            },
            &table0,
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(&analytic, &numeric, 1e-3, 1e-6) <= 1e-4);
    }

    #[test]
    fn mixed_patch_sizes_rejected() {
        let enc = small_encoder();
        let mut tape = Tape::new();
        let (_, ev) = enc.bind(&mut tape);
        let table = tape.leaf(Tensor::zeros(&[3, 4]));
        let a = crop_grid(&Tensor::zeros(&[3, 16, 16]), 2, "a").unwrap();
        let b = crop_grid(&Tensor::zeros(&[3, 16, 16]), 1, "b").unwrap();
        assert!(build_nodes(&mut tape, &[a, b], &ev, table, 1).is_err());
    }
}
