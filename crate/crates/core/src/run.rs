//! Run directories: what each CLI subcommand reads and writes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde_json::{json, Value};

use crate::complementary::AttentionMap;
use crate::config::ExperimentConfig;
use crate::data::{self, Dataset, GroundTruth};
use crate::encoder::MIN_INPUT_SIDE;
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::losses::CSV_HEADER;
use crate::metrics::{self, ConfusionCounts};
use crate::par;
use crate::params::{load_checkpoint, save_checkpoint};
use crate::patch::{self, CropMode, ScoredBox};
use crate::pgm;
use crate::pipeline::{self, PgnnModel};
use crate::segmenter;

pub const CONFIG_SNAPSHOT: &str = "config.snapshot";
pub const LOSSES_CSV: &str = "losses.csv";
pub const CHECKPOINTS: &str = "checkpoints";
pub const PSEUDO_LABELS: &str = "pseudo_labels";
pub const REFINED_LABELS: &str = "refined_labels";
pub const ATTENTION: &str = "attention";
pub const METRICS_JSON: &str = "metrics.json";
pub const REFINE_JSON: &str = "refine.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const DATA_DIR: &str = "data";
pub const BOXES_TXT: &str = "boxes.txt";
const PGNN_CKPT: &str = "pgnn.ckpt";
const SEGMENTER_CKPT: &str = "segmenter.ckpt";

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn write_json(p: &Path, v: &Value) -> Result<()> {
    write_text(
        p,
        &format!("{}\n", serde_json::to_string_pretty(v).expect("json serializes")),
    )
}

/// Attention file stem for one image and class.
pub fn map_stem(image_id: &str, class: usize) -> String {
    format!("{image_id}_c{class}")
}

/// Writes the dataset (and synthetic proposal boxes) to `dir`.
pub fn generate_data(cfg: &ExperimentConfig, dir: &Path) -> Result<Dataset> {
    cfg.validate()?;
    let (data, gt) = data::generate_dataset(&cfg.data())?;
    data::save_dataset(&data, &gt, dir)?;
    let boxes = data::synth_proposals(&data, cfg.proposals_per_image, cfg.seed);
    write_text(&dir.join(BOXES_TXT), &data::format_boxes(&boxes))?;
    Ok(data)
}

fn check_dataset(cfg: &ExperimentConfig, data: &Dataset) -> Result<()> {
    if data.config.classes != cfg.classes || data.config.image_size != cfg.image_size {
        return Err(Error::Config(format!(
            "dataset has {} classes at {}px, config expects {} at {}px",
            data.config.classes, data.config.image_size, cfg.classes, cfg.image_size
        )));
    }
    Ok(())
}

fn load_boxes(path: &Path) -> Result<Vec<ScoredBox>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    patch::parse_boxes(&text)
}

/// Proposal boxes for proposal mode: an explicit file, else synthetic boxes.
fn resolve_boxes(cfg: &ExperimentConfig, data: &Dataset, file: Option<&Path>) -> Result<Option<Vec<ScoredBox>>> {
    match (cfg.crop, file) {
        (CropMode::Grid { .. }, _) => Ok(None),
        (CropMode::Proposals { .. }, Some(f)) => load_boxes(f).map(Some),
        (CropMode::Proposals { .. }, None) => Ok(Some(data::synth_proposals(data, cfg.proposals_per_image, cfg.seed))),
    }
}

/// Aggregate metrics of `pred` against `gt`, keyed by scene order.
fn score_labels(data: &Dataset, pred: &[LabelMap], gt: &GroundTruth, cfg: &ExperimentConfig) -> Result<Value> {
    let mut missing = Vec::new();
    let mut pairs = Vec::new();
    for (s, p) in data.scenes.iter().zip(pred) {
        match gt.maps.get(&s.id) {
            Some(g) => pairs.push((p, g)),
            None => missing.push(format!("{}: no ground truth", s.id)),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    let (total, _) = metrics::confusion_all(&pairs, cfg.classes, None)?;
    let mut report = metrics::report(&total, cfg.include_background);
    report["images"] = json!(pairs.len());
    Ok(report)
}

/// Everything `train` produces, in memory.
#[derive(Clone, Debug)]
pub struct TrainArtifacts {
    pub model: PgnnModel,
    pub maps: Vec<Vec<AttentionMap>>,
    pub labels: Vec<LabelMap>,
    /// `None` when the dataset has no ground truth.
    pub metrics: Option<Value>,
}

/// Trains P-GNN and derives attention maps and pseudo-labels, writing nothing.
pub fn train_in_memory(
    cfg: &ExperimentConfig,
    data: &Dataset,
    gt: Option<&GroundTruth>,
    boxes: Option<&[ScoredBox]>,
    on_step: impl FnMut(&pipeline::StepRecord),
) -> Result<TrainArtifacts> {
    let out = pipeline::train_pgnn(cfg, data, boxes, on_step)?;
    let maps = pipeline::infer_attention(&out.model, cfg, data, boxes)?;
    let labels = pipeline::pseudo_labels(&maps, cfg.background_threshold)?;
    let metrics = gt.map(|g| score_labels(data, &labels, g, cfg)).transpose()?;
    Ok(TrainArtifacts {
        model: out.model,
        maps,
        labels,
        metrics,
    })
}

fn write_maps(maps: &[Vec<AttentionMap>], dir: &Path, raw: bool) -> Result<usize> {
    mkdir(dir)?;
    let mut n = 0;
    for m in maps.iter().flatten() {
        let stem = map_stem(&m.image_id, m.class_id);
        pgm::write(&dir.join(format!("{stem}.pgm")), m.width, m.height, &m.to_gray())?;
        if raw {
            let p = dir.join(format!("{stem}.raw"));
            std::fs::write(&p, m.to_raw()).map_err(|e| Error::io(&p, e))?;
        }
        n += 1;
    }
    Ok(n)
}

fn write_labels(data: &Dataset, labels: &[LabelMap], dir: &Path) -> Result<()> {
    mkdir(dir)?;
    for (s, l) in data.scenes.iter().zip(labels) {
        l.save(&dir.join(format!("{}.pgm", s.id)))?;
    }
    Ok(())
}

/// `train`: uses the dataset in `data_dir` (or generates one from the config), trains,
/// and fills `run_dir`. Returns the metrics report when ground truth is available.
pub fn train(
    cfg: &ExperimentConfig,
    data_dir: Option<&Path>,
    boxes_file: Option<&Path>,
    run_dir: &Path,
) -> Result<Option<Value>> {
    cfg.validate()?;
    mkdir(run_dir)?;
    write_text(&run_dir.join(CONFIG_SNAPSHOT), &cfg.to_toml())?;
    let (data, gt) = match data_dir {
        Some(d) => {
            let data = data::load_dataset(d)?;
            let gt = d.join("gt").is_dir().then(|| data::load_ground_truth(d)).transpose()?;
            (data, gt)
        }
        None => {
            let (d, g) = data::generate_dataset(&cfg.data())?;
            (d, Some(g))
        }
    };
    check_dataset(cfg, &data)?;
    data::save_dataset(
        &data,
        gt.as_ref().unwrap_or(&GroundTruth::default()),
        &run_dir.join(DATA_DIR),
    )?;
    let boxes = resolve_boxes(cfg, &data, boxes_file)?;
    if let Some(b) = &boxes {
        write_text(&run_dir.join(BOXES_TXT), &data::format_boxes(b))?;
    }

    let csv_path = run_dir.join(LOSSES_CSV);
    let file = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut csv = BufWriter::new(file);
    writeln!(csv, "{CSV_HEADER}").map_err(|e| Error::io(&csv_path, e))?;
    let mut write_err = None;
    let result = train_in_memory(cfg, &data, gt.as_ref(), boxes.as_deref(), |r| {
        if write_err.is_none() {
            if let Err(e) = writeln!(csv, "{}", r.loss.csv_row(r.epoch, r.step)) {
                write_err = Some(e);
            }
        }
    });
    // keep the rows logged before a divergence
    csv.flush().map_err(|e| Error::io(&csv_path, e))?;
    if let Some(e) = write_err {
        return Err(Error::io(&csv_path, e));
    }
    let art = result?;

    let ckpt = run_dir.join(CHECKPOINTS);
    mkdir(&ckpt)?;
    save_checkpoint(&art.model, &ckpt.join(PGNN_CKPT))?;
    write_maps(&art.maps, &run_dir.join(ATTENTION), false)?;
    write_labels(&data, &art.labels, &run_dir.join(PSEUDO_LABELS))?;
    if let Some(m) = &art.metrics {
        write_json(&run_dir.join(METRICS_JSON), m)?;
    }
    Ok(art.metrics)
}

/// Config snapshot and dataset of an existing run.
pub fn open_run(run_dir: &Path) -> Result<(ExperimentConfig, Dataset, Option<GroundTruth>)> {
    let cfg = ExperimentConfig::load(&run_dir.join(CONFIG_SNAPSHOT))?;
    let dir = run_dir.join(DATA_DIR);
    let data = data::load_dataset(&dir)?;
    let gt = data::load_ground_truth(&dir)?;
    let gt = (!gt.maps.is_empty()).then_some(gt);
    Ok((cfg, data, gt))
}

/// Label maps for every scene from `dir`, failing with the full list of missing ids.
fn labels_for_scenes(data: &Dataset, dir: &Path) -> Result<Vec<LabelMap>> {
    let mut found = data::load_label_dir(dir)?;
    let missing: Vec<String> = data
        .scenes
        .iter()
        .filter(|s| !found.contains_key(&s.id))
        .map(|s| format!("{}: missing from {}", s.id, dir.display()))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    Ok(data.scenes.iter().map(|s| found.remove(&s.id).unwrap()).collect())
}

/// `refine-labels`: trains the segmenter on a run's pseudo-labels with mutual-complementary
/// updates and writes the refined labels plus a report.
pub fn refine(run_dir: &Path) -> Result<Value> {
    let (cfg, data, gt) = open_run(run_dir)?;
    let initial = labels_for_scenes(&data, &run_dir.join(PSEUDO_LABELS))?;
    let out = segmenter::train_segmenter(&cfg, &data, &initial, true)?;
    let refined = segmenter::final_labels(&out, &initial);
    write_labels(&data, refined, &run_dir.join(REFINED_LABELS))?;
    let ckpt = run_dir.join(CHECKPOINTS);
    mkdir(&ckpt)?;
    save_checkpoint(&out.model, &ckpt.join(SEGMENTER_CKPT))?;
    let mut report = json!({
        "background_pixels": out.background,
        "losses": out.losses,
    });
    if let Some(g) = &gt {
        report["before"] = score_labels(&data, &initial, g, &cfg)?;
        report["after"] = score_labels(&data, refined, g, &cfg)?;
    }
    write_json(&run_dir.join(REFINE_JSON), &report)?;
    Ok(report)
}

/// `export-maps`: recomputes attention from a run's checkpoint and writes PGM and raw files.
pub fn export_maps(run_dir: &Path, out_dir: &Path) -> Result<usize> {
    let (cfg, data, _) = open_run(run_dir)?;
    let mut model = PgnnModel::init(&cfg, cfg.seed)?;
    load_checkpoint(&mut model, &run_dir.join(CHECKPOINTS).join(PGNN_CKPT))?;
    let boxes_path = run_dir.join(BOXES_TXT);
    let boxes = match cfg.crop {
        CropMode::Grid { .. } => None,
        CropMode::Proposals { .. } => Some(load_boxes(&boxes_path)?),
    };
    let maps = pipeline::infer_attention(&model, &cfg, &data, boxes.as_deref())?;
    write_maps(&maps, out_dir, true)
}

/// `evaluate`: compares same-named PGM label maps in two directories.
pub fn evaluate(
    pred_dir: &Path,
    gt_dir: &Path,
    classes: Option<usize>,
    include_background: bool,
    ignore: Option<u8>,
) -> Result<Value> {
    let pred = data::load_label_dir(pred_dir)?;
    let gt = data::load_label_dir(gt_dir)?;
    let mut problems: Vec<String> = gt
        .keys()
        .filter(|k| !pred.contains_key(*k))
        .map(|k| format!("{k}: missing from {}", pred_dir.display()))
        .collect();
    problems.extend(
        pred.keys()
            .filter(|k| !gt.contains_key(*k))
            .map(|k| format!("{k}: missing from {}", gt_dir.display())),
    );
    for (k, p) in &pred {
        if let Some(g) = gt.get(k) {
            if (p.height, p.width) != (g.height, g.width) {
                problems.push(format!(
                    "{k}: size {}x{} vs {}x{}",
                    p.height, p.width, g.height, g.width
                ));
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::MissingFiles(problems));
    }
    if gt.is_empty() {
        return Err(Error::MissingFiles(vec![format!(
            "{}: no .pgm files",
            gt_dir.display()
        )]));
    }
    let k = match classes {
        Some(k) => k,
        None => pred
            .values()
            .chain(gt.values())
            .flat_map(|m| m.data.iter().copied().filter(|&v| Some(v) != ignore))
            .max()
            .unwrap_or(0)
            .max(1) as usize,
    };
    let ids: Vec<&String> = gt.keys().collect();
    let pairs: Vec<(&LabelMap, &LabelMap)> = ids.iter().map(|id| (&pred[*id], &gt[*id])).collect();
    let (total, each) = metrics::confusion_all(&pairs, k, ignore)?;
    let mut report = metrics::report(&total, include_background);
    let per_image: BTreeMap<&str, Value> = ids
        .iter()
        .zip(&each)
        .map(|(id, c)| (id.as_str(), counts_json(c)))
        .collect();
    report["images"] = json!(ids.len());
    report["per_image"] = json!(per_image);
    Ok(report)
}

fn counts_json(c: &ConfusionCounts) -> Value {
    json!({"tp": c.tp, "fp": c.fp, "fn": c.fn_})
}

/// Swept hyperparameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    PatchCount,
    Lambda,
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patch_count" => Ok(SweepAxis::PatchCount),
            "lambda" => Ok(SweepAxis::Lambda),
            other => Err(Error::Config(format!(
                "unknown sweep axis {other:?}; expected patch_count or lambda"
            ))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::PatchCount => "patch_count",
            SweepAxis::Lambda => "lambda",
        })
    }
}

/// Grid sides of the patch-count axis: 4, 16, 36 and 64 patches.
pub const PATCH_SIDES: [usize; 4] = [2, 4, 6, 8];

/// Loss-weight rows of the lambda axis.
pub const LAMBDA_ROWS: [[f64; 4]; 5] = [
    [1.0, 1.0, 1.0, 1.0],
    [1.0, 1.0, 1.0, 0.8],
    [1.0, 1.0, 0.8, 1.0],
    [1.0, 0.8, 1.0, 1.0],
    [0.8, 1.0, 1.0, 1.0],
];

/// One sweep cell: its axis value, and metrics or the error that stopped it.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub key: Vec<String>,
    pub outcome: std::result::Result<(f64, f64, f64), String>,
}

impl SweepRow {
    fn csv(&self) -> String {
        let tail = match &self.outcome {
            Ok((p, r, m)) => format!("{p},{r},{m},ok"),
            Err(kind) => format!(",,,{kind}"),
        };
        format!("{},{tail}", self.key.join(","))
    }
}

pub fn sweep_header(axis: SweepAxis) -> &'static str {
    match axis {
        SweepAxis::PatchCount => "patch_count,grid_side,precision,recall,miou,status",
        SweepAxis::Lambda => "lambda1,lambda2,lambda3,lambda4,precision,recall,miou,status",
    }
}

/// Base config shared by every cell. The patch axis needs room for an 8x8 grid of
/// encodable cells, so images grow to that size with object sizes scaled alongside.
pub fn sweep_base(cfg: &ExperimentConfig, axis: SweepAxis) -> ExperimentConfig {
    let mut base = cfg.clone();
    if axis == SweepAxis::PatchCount {
        let need = MIN_INPUT_SIDE * PATCH_SIDES[PATCH_SIDES.len() - 1];
        if base.image_size < need {
            let scale = |v: usize| (v * need).div_ceil(base.image_size);
            base.scene.object_min = scale(base.scene.object_min);
            base.scene.object_max = scale(base.scene.object_max).min(need);
            base.image_size = need;
        }
    }
    base
}

/// Per-cell configs in table order.
pub fn sweep_cells(cfg: &ExperimentConfig, axis: SweepAxis) -> Vec<(Vec<String>, ExperimentConfig)> {
    let base = sweep_base(cfg, axis);
    match axis {
        SweepAxis::PatchCount => PATCH_SIDES
            .iter()
            .map(|&s| {
                let c = ExperimentConfig {
                    crop: CropMode::Grid { side: s },
                    ..base.clone()
                };
                (vec![(s * s).to_string(), s.to_string()], c)
            })
            .collect(),
        SweepAxis::Lambda => LAMBDA_ROWS
            .iter()
            .map(|&l| {
                let c = ExperimentConfig {
                    lambda: l,
                    ..base.clone()
                };
                (l.iter().map(|v| v.to_string()).collect(), c)
            })
            .collect(),
    }
}

/// `sweep`: one full pseudo-label run per cell on one shared dataset. Writes `sweep.csv`
/// even when cells fail; failed cells carry their error kind and make the call fail.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, out_dir: &Path) -> Result<Vec<SweepRow>> {
    let base = sweep_base(cfg, axis);
    base.validate()?;
    mkdir(out_dir)?;
    let (data, gt) = data::generate_dataset(&base.data())?;
    let cells = sweep_cells(cfg, axis);
    let rows: Vec<SweepRow> = par::map_slice(&cells, |(key, c)| {
        let outcome = (|| -> Result<(f64, f64, f64)> {
            c.validate()?;
            let boxes = resolve_boxes(c, &data, None)?;
            let art = train_in_memory(c, &data, Some(&gt), boxes.as_deref(), |_| {})?;
            let m = art.metrics.expect("ground truth given");
            let num = |k: &str| m[k].as_f64().unwrap_or(f64::NAN);
            Ok((num("mean_precision"), num("mean_recall"), num("mean_iou")))
        })();
        SweepRow {
            key: key.clone(),
            outcome: outcome.map_err(|e| {
                log::error!("sweep cell {key:?}: {e}");
                e.kind().to_string()
            }),
        }
    });
    let mut text = format!("{}\n", sweep_header(axis));
    for r in &rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    write_text(&out_dir.join(SWEEP_CSV), &text)?;
    let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
    if failed > 0 {
        return Err(Error::Data(format!(
            "{failed} of {} sweep cells failed; sweep.csv is partial",
            rows.len()
        )));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_cells_follow_tables() {
        let cfg = ExperimentConfig::default();
        let p = sweep_cells(&cfg, SweepAxis::PatchCount);
        let counts: Vec<&str> = p.iter().map(|(k, _)| k[0].as_str()).collect();
        assert_eq!(counts, ["4", "16", "36", "64"]);
        for (_, c) in &p {
            c.validate().unwrap();
            assert_eq!(c.image_size, 64);
        }
        let l = sweep_cells(&cfg, SweepAxis::Lambda);
        assert_eq!(l.len(), 5);
        assert!(l.iter().any(|(_, c)| c.lambda == [1.0, 1.0, 0.8, 1.0]));
        assert!(l.iter().all(|(_, c)| c.image_size == cfg.image_size));
        assert!("other".parse::<SweepAxis>().is_err());
        assert_eq!("lambda".parse::<SweepAxis>().unwrap(), SweepAxis::Lambda);
    }

    #[test]
    fn evaluate_lists_every_missing_file() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        for id in ["x", "y", "z"] {
            m.save(&a.path().join(format!("{id}.pgm"))).unwrap();
        }
        for id in ["z", "w"] {
            m.save(&b.path().join(format!("{id}.pgm"))).unwrap();
        }
        match evaluate(a.path(), b.path(), None, false, None) {
            Err(Error::MissingFiles(list)) => {
                assert_eq!(list.len(), 3, "{list:?}");
                for id in ["x:", "y:", "w:"] {
                    assert!(list.iter().any(|l| l.starts_with(id)), "{list:?}");
                }
            }
            other => panic!("{other:?}"),
        }
        let r = evaluate(a.path(), a.path(), None, false, None).unwrap();
        assert_eq!(r["mean_iou"], 1.0);
        assert_eq!(r["images"], 3);
    }
}
