use pgnn_core::config::{ExperimentConfig, SceneConfig};
use pgnn_core::data;
use pgnn_core::labels::LabelMap;
use pgnn_core::losses::CSV_HEADER;
use pgnn_core::params::{load_checkpoint, Parameters};
use pgnn_core::patch::CropMode;
use pgnn_core::pipeline::PgnnModel;
use pgnn_core::run;

fn small() -> ExperimentConfig {
    ExperimentConfig {
        image_size: 16,
        scenes: 8,
        classes: 2,
        epochs: 2,
        encoder_channels: vec![3, 4, 4],
        key_dim: 4,
        crop: CropMode::Grid { side: 2 },
        segmenter_epochs: 2,
        scene: SceneConfig {
            object_min: 5,
            object_max: 7,
            ..SceneConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

#[test]
fn ground_truth_never_reaches_training() {
    let cfg = small();
    let (data, gt) = data::generate_dataset(&cfg.data()).unwrap();
    let mut corrupted = gt.clone();
    for m in corrupted.maps.values_mut() {
        *m = LabelMap::new(m.height, m.width, vec![1; m.height * m.width]).unwrap();
    }
    let a = run::train_in_memory(&cfg, &data, Some(&gt), None, |_| {}).unwrap();
    let b = run::train_in_memory(&cfg, &data, Some(&corrupted), None, |_| {}).unwrap();
    let c = run::train_in_memory(&cfg, &data, None, None, |_| {}).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.model, c.model);
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.maps, b.maps);
    assert_ne!(a.metrics, b.metrics);
    assert!(c.metrics.is_none());
}

#[test]
fn run_directory_round_trip() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let metrics = run::train(&cfg, None, None, &run_dir).unwrap().unwrap();
    assert!(metrics["mean_iou"].as_f64().is_some());

    let csv = std::fs::read_to_string(run_dir.join(run::LOSSES_CSV)).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.len() == 7 && r.iter().all(|v| v.is_finite())));
    assert_eq!(rows.last().unwrap()[0], (cfg.epochs - 1) as f64);

    let (snap, data, gt) = run::open_run(&run_dir).unwrap();
    assert_eq!(snap, cfg);
    assert!(gt.is_some());

    let mut model = PgnnModel::init(&cfg, 0).unwrap();
    load_checkpoint(&mut model, &run_dir.join(run::CHECKPOINTS).join("pgnn.ckpt")).unwrap();
    assert!(model.all_finite());

    let out = dir.path().join("maps");
    let n = run::export_maps(&run_dir, &out).unwrap();
    let expected: usize = data.scenes.iter().map(|s| s.classes().len()).sum();
    assert_eq!(n, expected);
    for s in &data.scenes {
        for c in s.classes() {
            let stem = run::map_stem(&s.id, c);
            let exported = std::fs::read(out.join(format!("{stem}.pgm"))).unwrap();
            let trained = std::fs::read(run_dir.join(run::ATTENTION).join(format!("{stem}.pgm"))).unwrap();
            assert_eq!(exported, trained, "{stem}");
        }
    }

    let report = run::evaluate(
        &run_dir.join(run::PSEUDO_LABELS),
        &run_dir.join(run::DATA_DIR).join("gt"),
        Some(cfg.classes),
        false,
        None,
    )
    .unwrap();
    assert_eq!(report["mean_iou"], metrics["mean_iou"]);

    let refined = run::refine(&run_dir).unwrap();
    let bg: Vec<u64> = refined["background_pixels"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert_eq!(bg.len(), cfg.segmenter_epochs + 1);
    assert!(bg.windows(2).all(|w| w[1] <= w[0]));
    assert!(run_dir.join(run::REFINED_LABELS).is_dir());
}

#[test]
fn saved_dataset_trains_like_generated() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    run::generate_data(&cfg, &data_dir).unwrap();
    let from_disk = run::train(&cfg, Some(&data_dir), None, &dir.path().join("a")).unwrap();
    let generated = run::train(&cfg, None, None, &dir.path().join("b")).unwrap();
    assert_eq!(from_disk, generated);
}

#[test]
fn bad_config_is_rejected_before_writing() {
    let cfg = ExperimentConfig {
        threshold: 1.5,
        ..small()
    };
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let err = run::train(&cfg, None, None, &run_dir).unwrap_err();
    assert_eq!(err.kind(), "config");
    assert!(!run_dir.exists());
}
