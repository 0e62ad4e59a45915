//! Small end-to-end run through the library API on synthetic blobs.

use dermanet::augment::{balancing_plan, materialize_balanced, AugmentConfig, MixUpConfig};
use dermanet::dataset::{
    apply_split_csv, load_manifest, stratified_split, write_split_csv, ClassCounts, LesionClass, Split, SplitSpec,
};
use dermanet::evalx::{emit_report, evaluate_scores, read_metrics_json};
use dermanet::model::{AttentionConfig, BackboneSpec, Classifier, HeadConfig, ModelSpec};
use dermanet::synth::{blob_quadrant, quadrant_of, write_blob_dataset, BlobSpec};
use dermanet::train::{load_records, predict, run_schedule, RunSink, StageConfig, TrainOptions};
use dermanet::xai::{grad_cam_default, saliency_map};

fn spec() -> ModelSpec {
    ModelSpec {
        backbone: BackboneSpec {
            channels: vec![8, 16, 16],
            strides: vec![2, 2, 2],
            ..BackboneSpec::toy()
        },
        attention: AttentionConfig {
            reduction_ratio: 4,
            channels: None,
        },
        head: HeadConfig {
            dropout: 0.3,
            hidden_sizes: vec![32],
            num_classes: 7,
        },
    }
}

#[test]
fn blobs_train_evaluate_explain() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let blobs = BlobSpec {
        size: 24,
        counts: ClassCounts([12, 16, 20, 10, 20, 40, 16]),
        seed: 3,
    };
    let csv = write_blob_dataset(&data, &blobs).unwrap();
    let manifest = load_manifest(&csv, &data.join("images")).unwrap();
    assert_eq!(manifest.len(), 134);
    assert_eq!(manifest.get("blob_00000").unwrap().metadata.get("quadrant").map(String::as_str), Some("0"));

    let split = stratified_split(manifest.clone(), &SplitSpec::default()).unwrap();
    let split_csv = dir.path().join("split.csv");
    write_split_csv(&split, &split_csv).unwrap();
    let reloaded = apply_split_csv(manifest, &split_csv).unwrap();
    assert_eq!(reloaded.split_counts(Split::Test), split.split_counts(Split::Test));

    let plan = balancing_plan(&split.split_counts(Split::Train), 0.6).unwrap();
    let balanced = materialize_balanced(&split, &plan, &AugmentConfig::default(), 42).unwrap();
    assert_eq!(balanced.split_counts(Split::Train), plan.targets);
    // A mismatched plan is refused.
    assert!(materialize_balanced(&split, &balancing_plan(&ClassCounts([1; 7]), 0.6).unwrap(), &AugmentConfig::default(), 42).is_err());

    let target = (24, 24);
    let train = load_records(balanced.in_split(Split::Train), target).unwrap();
    let val = load_records(balanced.in_split(Split::Val), target).unwrap();
    let test = load_records(balanced.in_split(Split::Test), target).unwrap();
    assert_eq!(train.len(), plan.total());

    let opts = TrainOptions {
        batch_size: 16,
        mixup: MixUpConfig {
            enabled: false,
            ..MixUpConfig::default()
        },
        ..TrainOptions::default()
    };
    let stages = [
        StageConfig::new(1, 4, 3e-3, 1e-4),
        StageConfig::new(2, 4, 3e-3, 1e-4),
        StageConfig::new(3, 4, 1e-3, 1e-5),
    ];
    let mut model = Classifier::build(&spec(), 42).unwrap();
    let run_dir = dir.path().join("run");
    let mut sink = RunSink::to_dir(&run_dir, false).unwrap();
    let report = run_schedule(&mut model, &train, &val, &stages, &opts, &mut sink).unwrap();
    assert!(run_dir.join("checkpoints/best").exists());
    assert!(!run_dir.join("checkpoints/stage1_epoch1").exists());
    let best = report.best.unwrap();
    assert!(best.val_accuracy > 0.5, "best val accuracy {}", best.val_accuracy);

    let scores = predict(&model, &test.images, 32).unwrap();
    let labels = test.label_indices();
    let eval = evaluate_scores(&scores, &labels).unwrap();
    assert_eq!(eval.confusion.total() as usize, test.len());
    let files = emit_report(&eval.report(), eval.roc.as_ref(), &eval.confusion, &dir.path().join("eval")).unwrap();
    let back = read_metrics_json(&files.metrics_json).unwrap();
    assert_eq!(back, eval.report());
    assert!(files.roc_png.unwrap().exists());

    let mut hits = 0;
    for (i, img) in test.images.iter().enumerate() {
        let class = LesionClass::ALL[labels[i]];
        let cam = grad_cam_default(&model, img, class.index()).unwrap();
        let (y, x) = cam.argmax();
        if quadrant_of(y, x, 24, 24) == blob_quadrant(class) {
            hits += 1;
        }
        let sal = saliency_map(&model, img, class.index()).unwrap();
        assert!(sal.grid.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    // Loose: the small model only needs to beat the 1-in-4 chance rate.
    assert!(hits * 4 > test.len(), "{hits}/{}", test.len());
}
