//! Seeded synthetic scenes: class shapes with a distinctive core colour and a body
//! colour that distractor blobs share, on noisy backgrounds.
//!
//! Ground-truth masks are kept in a separate [`GroundTruth`] store that the
//! training code never receives.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::patch::{Region, ScoredBox};
use crate::tensor::Tensor;

const CORE: [[f64; 3]; 8] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.85, 0.15],
    [0.15, 0.20, 0.95],
    [0.95, 0.90, 0.10],
    [0.90, 0.15, 0.90],
    [0.10, 0.90, 0.90],
    [1.00, 0.55, 0.05],
    [0.05, 0.05, 0.05],
];

const BODY: [[f64; 3]; 8] = [
    [0.70, 0.50, 0.35],
    [0.35, 0.60, 0.45],
    [0.45, 0.45, 0.70],
    [0.70, 0.65, 0.40],
    [0.65, 0.40, 0.60],
    [0.40, 0.65, 0.70],
    [0.75, 0.55, 0.50],
    [0.55, 0.55, 0.55],
];

pub const MAX_CLASSES: usize = 8;
const PLACEMENT_TRIES: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub seed: u64,
    pub image_size: usize,
    pub classes: usize,
    pub scenes: usize,
    /// Object side range in pixels, inclusive.
    pub object_min: usize,
    pub object_max: usize,
    /// Probability that a scene holds a second class.
    pub second_class: f64,
    pub distractors_max: usize,
    /// Amplitude of per-pixel background noise.
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 7,
            image_size: 32,
            classes: 4,
            scenes: 200,
            object_min: 12,
            object_max: 18,
            second_class: 0.3,
            distractors_max: 2,
            noise: 0.08,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > MAX_CLASSES {
            return Err(Error::Config(format!(
                "classes must be in 1..={MAX_CLASSES}, got {}",
                self.classes
            )));
        }
        if self.scenes == 0 {
            return Err(Error::Config("scenes must be positive".into()));
        }
        if self.object_min < 4 || self.object_min > self.object_max || self.object_max > self.image_size {
            return Err(Error::Config(format!(
                "object size range {}..={} does not fit {}px images",
                self.object_min, self.object_max, self.image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.second_class) {
            return Err(Error::Config("second_class must be a probability".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Disc,
    Diamond,
    Cross,
}

impl Shape {
    fn of_class(c: usize) -> Shape {
        [Shape::Square, Shape::Disc, Shape::Diamond, Shape::Cross][(c - 1) % 4]
    }

    /// Whether offset `(dy, dx)` inside a `side`-box belongs to the shape.
    fn covers(self, dy: usize, dx: usize, side: usize) -> bool {
        let c = (side as f64 - 1.0) / 2.0;
        let (y, x) = ((dy as f64 - c).abs(), (dx as f64 - c).abs());
        let r = side as f64 / 2.0;
        match self {
            Shape::Square => true,
            Shape::Disc => y * y + x * x <= r * r,
            Shape::Diamond => y + x <= r,
            Shape::Cross => y <= r / 2.0 || x <= r / 2.0,
        }
    }
}

/// Training-visible part of a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    /// `[3, H, W]`, every value a multiple of 1/255.
    pub image: Tensor,
    /// Multi-hot over foreground classes `1..=K` (index `c - 1`).
    pub labels: Vec<f64>,
    /// Object bounding boxes, used to synthesize proposals.
    pub objects: Vec<(usize, Region)>,
}

impl Scene {
    pub fn classes(&self) -> Vec<usize> {
        (1..=self.labels.len()).filter(|&c| self.labels[c - 1] == 1.0).collect()
    }

    pub fn has_class(&self, c: usize) -> bool {
        c >= 1 && c <= self.labels.len() && self.labels[c - 1] == 1.0
    }
}

/// Evaluation-only ground-truth masks, keyed by scene id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub maps: BTreeMap<String, LabelMap>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DataConfig,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn indices_with(&self, class: usize) -> Vec<usize> {
        (0..self.scenes.len())
            .filter(|&i| self.scenes[i].has_class(class))
            .collect()
    }

    pub fn image_size(&self) -> (usize, usize) {
        let s = self.scenes[0].image.shape();
        (s[1], s[2])
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn free(occupied: &[Region], r: Region, gap: usize) -> bool {
    occupied.iter().all(|o| {
        r.top + r.height + gap <= o.top
            || o.top + o.height + gap <= r.top
            || r.left + r.width + gap <= o.left
            || o.left + o.width + gap <= r.left
    })
}

/// Random `side` square inside `area` that keeps a 1px gap to everything in `occupied`.
fn place<R: Rng>(rng: &mut R, area: Region, side: usize, occupied: &[Region]) -> Option<Region> {
    if side > area.height || side > area.width {
        return None;
    }
    for _ in 0..PLACEMENT_TRIES {
        let r = Region {
            top: area.top + rng.random_range(0..=area.height - side),
            left: area.left + rng.random_range(0..=area.width - side),
            height: side,
            width: side,
        };
        if free(occupied, r, 1) {
            return Some(r);
        }
    }
    None
}

fn paint(img: &mut [f64], size: usize, y: usize, x: usize, rgb: [f64; 3]) {
    for (c, v) in rgb.iter().enumerate() {
        img[(c * size + y) * size + x] = *v;
    }
}

fn scene<R: Rng>(cfg: &DataConfig, index: usize, rng: &mut R) -> Result<(Scene, LabelMap)> {
    let size = cfg.image_size;
    let id = format!("s{index:04}");
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.45));
    let mut img = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let n = rng.random_range(-cfg.noise..=cfg.noise);
            paint(&mut img, size, y, x, base.map(|b| b + n));
        }
    }
    let mut classes: Vec<usize> = (1..=cfg.classes).collect();
    classes.shuffle(rng);
    let count = if cfg.classes > 1 && rng.random_bool(cfg.second_class) {
        2
    } else {
        1
    };
    classes.truncate(count);

    let whole = Region {
        top: 0,
        left: 0,
        height: size,
        width: size,
    };
    // two objects get one half of the image each
    let areas = if count == 2 {
        let half = size / 2;
        let (a, b) = if rng.random_bool(0.5) {
            (
                Region { height: half, ..whole },
                Region {
                    top: half,
                    height: size - half,
                    ..whole
                },
            )
        } else {
            (
                Region { width: half, ..whole },
                Region {
                    left: half,
                    width: size - half,
                    ..whole
                },
            )
        };
        vec![a, b]
    } else {
        vec![whole]
    };
    let mut gt = LabelMap::background(size, size);
    let mut occupied = Vec::new();
    let mut objects = Vec::new();
    for (&c, &area) in classes.iter().zip(&areas) {
        let hi = cfg.object_max.min(area.height.min(area.width) - 1).max(cfg.object_min);
        let side = rng.random_range(cfg.object_min..=hi);
        let r = place(rng, area, side, &occupied).ok_or_else(|| {
            Error::Data(format!(
                "scene {id}: no room for a {side}px object after {PLACEMENT_TRIES} tries"
            ))
        })?;
        let shape = Shape::of_class(c);
        let core = side.div_ceil(3);
        let lo = (side - core) / 2;
        for dy in 0..side {
            for dx in 0..side {
                if !shape.covers(dy, dx, side) {
                    continue;
                }
                let in_core = (lo..lo + core).contains(&dy) && (lo..lo + core).contains(&dx);
                let colour = if in_core { CORE[c - 1] } else { BODY[c - 1] };
                let jitter = rng.random_range(-0.03..=0.03);
                paint(&mut img, size, r.top + dy, r.left + dx, colour.map(|v| v + jitter));
                gt.set(r.top + dy, r.left + dx, c as u8);
            }
        }
        occupied.push(r);
        objects.push((c, r));
    }
    let distractors = rng.random_range(0..=cfg.distractors_max);
    for _ in 0..distractors {
        let side = rng.random_range(3..=cfg.object_min.max(4) / 2 + 2);
        let Some(r) = place(rng, whole, side, &occupied) else {
            continue;
        };
        let colour = BODY[rng.random_range(0..cfg.classes)];
        for dy in 0..side {
            for dx in 0..side {
                paint(&mut img, size, r.top + dy, r.left + dx, colour);
            }
        }
        occupied.push(r);
    }
    let img: Vec<f64> = img.into_iter().map(quantize).collect();
    let mut labels = vec![0.0; cfg.classes];
    for &c in &classes {
        labels[c - 1] = 1.0;
    }
    let scene = Scene {
        id,
        image: Tensor::new(&[3, size, size], img)?,
        labels,
        objects,
    };
    Ok((scene, gt))
}

/// Generates `cfg.scenes` scenes and their ground truth; identical seeds give identical output.
pub fn generate_dataset(cfg: &DataConfig) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scenes = Vec::with_capacity(cfg.scenes);
    let mut gt = GroundTruth::default();
    for i in 0..cfg.scenes {
        let (s, g) = scene(cfg, i, &mut rng)?;
        gt.maps.insert(s.id.clone(), g);
        scenes.push(s);
    }
    Ok((
        Dataset {
            config: cfg.clone(),
            scenes,
        },
        gt,
    ))
}

/// Uniformly samples `size` distinct scenes containing `class`.
pub fn sample_batch<R: Rng + ?Sized>(data: &Dataset, class: usize, size: usize, rng: &mut R) -> Result<Vec<usize>> {
    let pool = data.indices_with(class);
    if pool.len() < size {
        return Err(Error::Data(format!(
            "class {class}: {} images available, batch needs {size}",
            pool.len()
        )));
    }
    Ok(pool.choose_multiple(rng, size).copied().collect())
}

/// Synthetic proposal boxes: a jittered box around every object plus random boxes.
pub fn synth_proposals(data: &Dataset, per_image: usize, seed: u64) -> Vec<ScoredBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = data.image_size();
    let mut out = Vec::new();
    for s in &data.scenes {
        for &(_, r) in &s.objects {
            let grow = rng.random_range(0..=3usize);
            let top = r.top.saturating_sub(grow);
            let left = r.left.saturating_sub(grow);
            let region = Region {
                top,
                left,
                height: (r.top + r.height + grow).min(h) - top,
                width: (r.left + r.width + grow).min(w) - left,
            };
            out.push(ScoredBox {
                image_id: s.id.clone(),
                region,
                score: rng.random_range(0.6..1.0),
                order: out.len(),
            });
        }
        for _ in s.objects.len()..per_image {
            let side = rng.random_range(8..=h.min(w) / 2);
            let region = Region {
                top: rng.random_range(0..=h - side),
                left: rng.random_range(0..=w - side),
                height: side,
                width: side,
            };
            out.push(ScoredBox {
                image_id: s.id.clone(),
                region,
                score: rng.random_range(0.0..0.6),
                order: out.len(),
            });
        }
    }
    out
}

pub fn format_boxes(boxes: &[ScoredBox]) -> String {
    let mut s = String::from("# image_id top left height width score\n");
    for b in boxes {
        s.push_str(&format!(
            "{} {} {} {} {} {}\n",
            b.image_id, b.region.top, b.region.left, b.region.height, b.region.width, b.score
        ));
    }
    s
}

// ---- on-disk layout: images/<id>.ppm, gt/<id>.pgm, labels.txt, data.toml ----

fn ppm(image: &Tensor) -> Vec<u8> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((image.get(&[c, y, x]) * 255.0).round() as u8);
            }
        }
    }
    out
}

fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    };
    let text_end = bytes
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == b'\n')
        .nth(2)
        .map(|(i, _)| i + 1)
        .ok_or_else(|| bad("truncated header"))?;
    let header = String::from_utf8_lossy(&bytes[..text_end]);
    let f: Vec<&str> = header.split_whitespace().collect();
    if f.len() != 4 || f[0] != "P6" || f[3] != "255" {
        return Err(bad("expected a P6 header with maxval 255"));
    }
    let w: usize = f[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = f[2].parse().map_err(|_| bad("bad height"))?;
    let px = bytes
        .get(text_end..text_end + 3 * w * h)
        .ok_or_else(|| bad("short raster"))?;
    let mut data = vec![0.0; 3 * h * w];
    for (i, rgb) in px.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = rgb[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(data: &Dataset, gt: &GroundTruth, dir: &Path) -> Result<()> {
    for sub in ["images", "gt"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut labels = String::new();
    for s in &data.scenes {
        write(&dir.join("images").join(format!("{}.ppm", s.id)), &ppm(&s.image))?;
        let cls: Vec<String> = s.classes().iter().map(|c| c.to_string()).collect();
        let objs: Vec<String> = s
            .objects
            .iter()
            .map(|(c, r)| format!("{c}:{}:{}:{}:{}", r.top, r.left, r.height, r.width))
            .collect();
        labels.push_str(&format!("{} {} {}\n", s.id, cls.join(","), objs.join(",")));
        if let Some(g) = gt.maps.get(&s.id) {
            g.save(&dir.join("gt").join(format!("{}.pgm", s.id)))?;
        }
    }
    write(&dir.join("labels.txt"), labels.as_bytes())?;
    let cfg = toml::to_string(&data.config).map_err(|e| Error::Config(e.to_string()))?;
    write(&dir.join("data.toml"), cfg.as_bytes())
}

/// Loads the training view of a saved dataset; ground truth is loaded separately.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let cfg_path = dir.join("data.toml");
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let config: DataConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", cfg_path.display())))?;
    let lpath = dir.join("labels.txt");
    let listing = std::fs::read_to_string(&lpath).map_err(|e| Error::io(&lpath, e))?;
    let bad = |line: usize, msg: &str| Error::Format {
        path: lpath.display().to_string(),
        msg: format!("line {}: {msg}", line + 1),
    };
    let mut scenes = Vec::new();
    for (i, line) in listing.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 2 {
            return Err(bad(i, "expected `id classes [objects]`"));
        }
        let mut labels = vec![0.0; config.classes];
        for c in f[1].split(',') {
            let c: usize = c.parse().map_err(|_| bad(i, "bad class"))?;
            if c == 0 || c > config.classes {
                return Err(bad(i, "class out of range"));
            }
            labels[c - 1] = 1.0;
        }
        let mut objects = Vec::new();
        for o in f.get(2).map(|s| s.split(',').collect::<Vec<_>>()).unwrap_or_default() {
            let v: Vec<usize> = o
                .split(':')
                .map(|x| x.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(i, "bad object"))?;
            if v.len() != 5 {
                return Err(bad(i, "bad object"));
            }
            objects.push((
                v[0],
                Region {
                    top: v[1],
                    left: v[2],
                    height: v[3],
                    width: v[4],
                },
            ));
        }
        let image = read_ppm(&dir.join("images").join(format!("{}.ppm", f[0])))?;
        scenes.push(Scene {
            id: f[0].to_string(),
            image,
            labels,
            objects,
        });
    }
    if scenes.is_empty() {
        return Err(Error::Data(format!("{} lists no scenes", lpath.display())));
    }
    Ok(Dataset { config, scenes })
}

/// Reads every `<id>.pgm` in `dir`.
pub fn load_label_dir(dir: &Path) -> Result<BTreeMap<String, LabelMap>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for e in entries {
        let path = e.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "pgm") {
            let id = path.file_stem().unwrap().to_string_lossy().into_owned();
            out.insert(id, LabelMap::load(&path)?);
        }
    }
    Ok(out)
}

pub fn load_ground_truth(dir: &Path) -> Result<GroundTruth> {
    Ok(GroundTruth {
        maps: load_label_dir(&dir.join("gt"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig {
            scenes: 40,
            ..DataConfig::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        let (a, ga) = generate_dataset(&small()).unwrap();
        let (b, gb) = generate_dataset(&small()).unwrap();
        assert_eq!(a.scenes, b.scenes);
        assert_eq!(ga, gb);
        let (c, _) = generate_dataset(&DataConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.scenes[0].image, c.scenes[0].image);
    }

    #[test]
    fn labels_match_ground_truth() {
        let (d, gt) = generate_dataset(&small()).unwrap();
        for s in &d.scenes {
            let g = &gt.maps[&s.id];
            let want: Vec<u8> = s.classes().iter().map(|&c| c as u8).collect();
            assert_eq!(g.classes(), want, "{}", s.id);
        }
    }

    #[test]
    fn pixels_are_quantized() {
        let (d, _) = generate_dataset(&small()).unwrap();
        for v in d.scenes[0].image.data() {
            assert_eq!(*v, quantize(*v));
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn class_frequency_within_bounds() {
        let (d, gt) = generate_dataset(&DataConfig::default()).unwrap();
        let n = d.scenes.len() as f64;
        for c in 1..=4 {
            let share = d.indices_with(c).len() as f64 / n;
            assert!((0.15..=0.50).contains(&share), "class {c} in {share} of scenes");
        }
        for g in gt.maps.values() {
            let fg = 1.0 - g.background_count() as f64 / (32.0 * 32.0);
            assert!((0.05..=0.70).contains(&fg), "foreground share {fg}");
        }
    }

    #[test]
    fn sample_batch_filters_and_errors() {
        let (d, _) = generate_dataset(&small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_batch(&d, 2, 3, &mut rng).unwrap();
        assert_eq!(b.len(), 3);
        assert!(b.iter().all(|&i| d.scenes[i].has_class(2)));
        let err = sample_batch(&d, 9, 3, &mut rng).unwrap_err();
        assert!(err.to_string().contains("class 9"), "{err}");
    }

    #[test]
    fn infeasible_placement_is_error() {
        let cfg = DataConfig {
            image_size: 20,
            object_min: 12,
            object_max: 12,
            second_class: 1.0,
            ..small()
        };
        assert!(matches!(generate_dataset(&cfg), Err(Error::Data(_))));
    }

    #[test]
    fn disk_roundtrip() {
        let (d, gt) = generate_dataset(&DataConfig { scenes: 5, ..small() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, &gt, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.scenes, d.scenes);
        assert_eq!(load_ground_truth(dir.path()).unwrap(), gt);
    }

    #[test]
    fn proposals_cover_objects() {
        let (d, _) = generate_dataset(&small()).unwrap();
        let boxes = synth_proposals(&d, 4, 3);
        let text = format_boxes(&boxes);
        let parsed = crate::patch::parse_boxes(&text).unwrap();
        assert_eq!(parsed.len(), boxes.len());
        for s in &d.scenes {
            assert!(boxes.iter().filter(|b| b.image_id == s.id).count() >= 4);
        }
    }
}
