use proptest::prelude::*;

use super::*;
use crate::dataset::{split, synth_generate, LabeledMolecule, SynthConfig};
use crate::imbalance::WeightVector;

fn encoder_config() -> EncoderConfig {
    EncoderConfig {
        num_layers: 1,
        hidden_dim: 8,
        num_heads: 2,
        max_spd_bucket: 3,
        num_element_categories: 4,
        dropout_rate: 0.1,
        ..EncoderConfig::default()
    }
}

fn synth(n: usize, seed: u64) -> Dataset {
    let mut cfg = SynthConfig::new(n, 4, -1.5, seed);
    cfg.nodes_per_graph = (3, 6);
    split(&synth_generate(&cfg).unwrap(), 0.75, seed).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        validation_interval: 2,
        optimizer: AdamConfig {
            learning_rate: 3e-3,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn path_graph(n: usize) -> FeaturizedGraph {
    let g = synth_generate(&SynthConfig {
        nodes_per_graph: (n, n),
        ..SynthConfig::new(1, 4, -1.0, 0)
    })
    .unwrap()
    .featurize()
    .unwrap()
    .remove(0);
    assert_eq!(g.num_nodes(), n);
    g
}

#[test]
fn mask_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let count = |n, mode, rng: &mut ChaCha8Rng| select_mask(&path_graph(n), mode, rng).unwrap().len();
    assert_eq!(count(17, MaskMode::FixedCount(1), &mut rng), 1);
    assert_eq!(count(10, MaskMode::Proportion(0.3), &mut rng), 3);
    // round(0.45) = 0, raised to one node
    assert_eq!(count(3, MaskMode::Proportion(0.15), &mut rng), 1);
    assert_eq!(count(4, MaskMode::FixedCount(9), &mut rng), 4);
    assert_eq!(count(5, MaskMode::Proportion(1.0), &mut rng), 5);
}

#[test]
fn empty_graph_cannot_be_masked() {
    let empty = FeaturizedGraph::new(vec![], vec![]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        select_mask(&empty, MaskMode::FixedCount(1), &mut rng),
        Err(PipelineError::EmptyGraph)
    ));
}

#[test]
fn mask_labels_are_original_categories() {
    let graphs = synth(20, 3).featurize().unwrap();
    let refs: Vec<&FeaturizedGraph> = graphs.iter().collect();
    let plan = MaskPlan::draw(&refs, MaskMode::Proportion(0.5), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    for ((g, nodes), labels) in graphs.iter().zip(&plan.masked).zip(&plan.labels) {
        let expected: Vec<usize> = nodes.iter().map(|&n| g.features()[n].atomic_number_index as usize).collect();
        assert_eq!(&expected, labels);
    }
    assert_eq!(plan.total_masked(), plan.labels.iter().map(Vec::len).sum::<usize>());
}

#[test]
fn masks_are_fresh_each_epoch() {
    let graphs: Vec<FeaturizedGraph> = (0..100).map(|i| path_graph(4 + i % 6)).collect();
    let refs: Vec<&FeaturizedGraph> = graphs.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let first = MaskPlan::draw(&refs, MaskMode::FixedCount(1), &mut rng).unwrap();
    let second = MaskPlan::draw(&refs, MaskMode::FixedCount(1), &mut rng).unwrap();
    assert_ne!(first.masked, second.masked);
}

#[test]
fn mask_mode_names() {
    assert_eq!(MaskMode::FixedCount(1).to_string(), "fixed_count_1");
    assert_eq!(MaskMode::Proportion(0.15).to_string(), "proportion_0.15");
    assert_eq!(MaskMode::FixedCount(1).label(), "1 node");
    assert_eq!(MaskMode::Proportion(0.8).label(), "80%");
    let json = serde_json::to_string(&MaskMode::Proportion(0.3)).unwrap();
    assert_eq!(json, r#"{"proportion":0.3}"#);
    assert!(MaskMode::Proportion(0.0).validate().is_err());
    assert!(MaskMode::FixedCount(0).validate().is_err());
}

#[test]
fn train_config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { validation_interval: 0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(PipelineError::InvalidConfig(_))));
    }
    let err = serde_json::from_str::<TrainConfig>(r#"{"scheme":"cubic"}"#).unwrap_err();
    assert!(err.to_string().contains("unknown variant"), "{err}");
}

#[test]
fn one_epoch_on_one_graph() {
    let dataset = Dataset::new(
        vec![LabeledMolecule::smiles("CCO", Some(1.0))],
        CategorySpace::Elements,
    );
    let enc = EncoderConfig {
        num_element_categories: 119,
        ..encoder_config()
    };
    let run = pretrain(&dataset, &enc, &quick(1)).unwrap();
    assert_eq!(run.loss_log.len(), 1);
    let bytes = run.checkpoint.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, run.checkpoint);
}

#[test]
fn pretraining_is_deterministic() {
    let dataset = synth(24, 1);
    let run = || pretrain(&dataset, &encoder_config(), &quick(3)).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.loss_log, b.loss_log);
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
}

#[test]
fn pretraining_results_do_not_depend_on_thread_count() {
    let dataset = synth(24, 2);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| pretrain(&dataset, &encoder_config(), &quick(2)).unwrap())
    };
    assert_eq!(run(1).checkpoint.to_bytes(), run(3).checkpoint.to_bytes());
}

#[test]
fn all_ones_weights_match_no_weight() {
    let data = TrainingData::new(&synth(24, 4), &encoder_config()).unwrap();
    let config = quick(3);
    let plain = pretrain_prepared(&data, &encoder_config(), &config).unwrap();
    let ones = pretrain_with_weights(&data, &encoder_config(), &config, WeightVector::ones(4)).unwrap();
    for (a, b) in plain.loss_log.train_losses().iter().zip(ones.loss_log.train_losses()) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn huge_learning_rate_aborts() {
    let data = TrainingData::new(&synth(24, 5), &encoder_config()).unwrap();
    let config = TrainConfig {
        scheme: WeightScheme::Reciprocal,
        optimizer: AdamConfig {
            learning_rate: 1e300,
            ..AdamConfig::default()
        },
        ..quick(5)
    };
    match pretrain_prepared(&data, &encoder_config(), &config) {
        Err(PipelineError::NonFiniteLoss { epoch }) => assert!((1..=5).contains(&epoch)),
        other => panic!("expected NonFiniteLoss, got {:?}", other.map(|r| r.loss_log)),
    }
}

#[test]
fn head_size_must_match_the_space() {
    let enc = EncoderConfig {
        num_element_categories: 7,
        ..encoder_config()
    };
    let err = pretrain(&synth(8, 0), &enc, &quick(1)).err().unwrap();
    assert!(matches!(err, PipelineError::CategoryMismatch { space: 4, head: 7 }));
}

fn constant_target_dataset(value: f64) -> Dataset {
    let mut d = synth(40, 6);
    for r in &mut d.records {
        r.target = Some(value);
    }
    d
}

#[test]
fn constant_target_is_learned() {
    let dataset = constant_target_dataset(2.5);
    let config = TrainConfig {
        optimizer: AdamConfig {
            learning_rate: 2e-2,
            ..AdamConfig::default()
        },
        ..quick(40)
    };
    let run = finetune(FinetuneInit::Fresh, &dataset, &encoder_config(), &config).unwrap();
    assert!(run.min_validation_mae < 0.05 * 2.5, "{}", run.min_validation_mae);
    assert!(run.min_validation_mae < run.initial_validation_mae);
    let logged: Vec<usize> = run
        .loss_log
        .entries()
        .iter()
        .filter(|e| e.validation.is_some())
        .map(|e| e.epoch)
        .collect();
    assert_eq!(logged, (1..=20).map(|i| 2 * i).collect::<Vec<_>>());
    assert_eq!(run.loss_log.min_validation(), Some(run.min_validation_mae));
}

#[test]
fn validation_also_runs_on_the_last_epoch() {
    let run = finetune(
        FinetuneInit::Fresh,
        &constant_target_dataset(1.0),
        &encoder_config(),
        &TrainConfig {
            validation_interval: 4,
            ..quick(5)
        },
    )
    .unwrap();
    let logged: Vec<usize> = run.loss_log.entries().iter().filter(|e| e.validation.is_some()).map(|e| e.epoch).collect();
    assert_eq!(logged, vec![4, 5]);
}

#[test]
fn fresh_and_checkpoint_starts_differ_in_provenance() {
    let dataset = synth(24, 7);
    let pre = pretrain(&dataset, &encoder_config(), &quick(1)).unwrap();
    let fresh = finetune(FinetuneInit::Fresh, &dataset, &encoder_config(), &quick(2)).unwrap();
    let warm = finetune(FinetuneInit::Checkpoint(&pre.checkpoint), &dataset, &encoder_config(), &quick(2)).unwrap();
    assert_eq!(fresh.init, InitProvenance::NoPretraining);
    assert_eq!(warm.init, InitProvenance::Checkpoint);
    assert_eq!(fresh.init.to_string(), "no_pretraining");
    assert_eq!(fresh.loss_log.len(), warm.loss_log.len());
}

#[test]
fn finetune_needs_targets() {
    let mut dataset = synth(12, 8);
    let first_validation = dataset.validation_indices()[0];
    dataset.records[first_validation].target = None;
    let err = finetune(FinetuneInit::Fresh, &dataset, &encoder_config(), &quick(1)).err().unwrap();
    let train_len = dataset.train_indices().len();
    assert!(matches!(err, PipelineError::MissingTargets(i) if i == train_len));
}

#[test]
fn finetune_needs_a_validation_split() {
    let mut dataset = synth(12, 9);
    dataset.split_assignment = None;
    let err = finetune(FinetuneInit::Fresh, &dataset, &encoder_config(), &quick(1)).err().unwrap();
    assert!(matches!(err, PipelineError::EmptyValidationSplit));
}

fn sample_checkpoint() -> Checkpoint {
    pretrain(&synth(12, 10), &encoder_config(), &quick(1)).unwrap().checkpoint
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    let checkpoint = sample_checkpoint();
    save_checkpoint(&checkpoint, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    for (a, b) in checkpoint.parameters.tensors().iter().zip(back.parameters.tensors()) {
        let bits = |t: &crate::autodiff::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(back, checkpoint);
    assert_eq!(&std::fs::read(&path).unwrap()[..8], &MAGIC);
}

#[test]
fn truncated_checkpoint_is_corrupt() {
    let bytes = sample_checkpoint().to_bytes();
    for cut in [4, 20, bytes.len() - 8, bytes.len() - 1] {
        assert!(
            matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(CheckpointError::CorruptPayload(_))),
            "cut at {cut}"
        );
    }
}

#[test]
fn flipped_payload_bit_is_corrupt() {
    let mut bytes = sample_checkpoint().to_bytes();
    let last = bytes.len() - 3;
    bytes[last] ^= 0x10;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::CorruptPayload(_))));
}

#[test]
fn bumped_version_is_rejected() {
    let mut checkpoint = sample_checkpoint();
    checkpoint.format_version = FORMAT_VERSION + 1;
    let err = Checkpoint::from_bytes(&checkpoint.to_bytes()).unwrap_err();
    assert!(matches!(
        err,
        CheckpointError::VersionMismatch { found: Some(v), .. } if v == (FORMAT_VERSION + 1) as u64
    ));
}

#[test]
fn missing_checkpoint_is_io_error() {
    assert!(matches!(
        load_checkpoint("/nonexistent/model.bin"),
        Err(CheckpointError::Io(_))
    ));
}

fn tiny_grid() -> GridConfig {
    GridConfig {
        encoder: encoder_config(),
        pretrain: quick(2),
        finetune: quick(2),
        schemes: vec![WeightScheme::Log],
        mask_modes: vec![MaskMode::Proportion(0.3)],
        seeds: vec![3],
        groups: None,
    }
}

#[test]
fn single_cell_grid_matches_direct_calls() {
    let dataset = synth(24, 11);
    let config = tiny_grid();
    let report = run_experiment_grid(&dataset, &config, None).unwrap();
    assert_eq!(report.cells.len(), 1);
    let cell = &report.cells[0];
    assert!(cell.error.is_none());

    let (pre_seeds, fine_seeds, recall_seed) = cell_seeds(3);
    let pre = pretrain(
        &dataset,
        &config.encoder,
        &TrainConfig {
            scheme: WeightScheme::Log,
            mask_mode: MaskMode::Proportion(0.3),
            seeds: pre_seeds,
            ..config.pretrain.clone()
        },
    )
    .unwrap();
    assert_eq!(cell.loss_log, pre.loss_log);
    let tuned = finetune(
        FinetuneInit::Checkpoint(&pre.checkpoint),
        &dataset,
        &config.encoder,
        &TrainConfig {
            seeds: fine_seeds,
            ..config.finetune.clone()
        },
    )
    .unwrap();
    assert_eq!(cell.min_validation_mae, Some(tuned.min_validation_mae));
    assert_eq!(cell.finetune_log, tuned.loss_log);

    let data = TrainingData::new(&dataset, &config.encoder).unwrap();
    let model = Encoder::with_parameters(pre.checkpoint.encoder.clone(), pre.checkpoint.parameters.clone()).unwrap();
    let recall = crate::metrics::evaluate_recall(
        &model,
        &data.validation,
        data.space,
        MaskMode::Proportion(0.3),
        &crate::metrics::GroupSpec::default_for(data.space),
        recall_seed,
    )
    .unwrap();
    assert_eq!(cell.recall_report.as_ref(), Some(&recall));
}

#[test]
fn grid_resumes_missing_cells_only() {
    let dataset = synth(16, 12);
    let config = GridConfig {
        schemes: vec![WeightScheme::NoWeight, WeightScheme::Reciprocal],
        pretrain: quick(1),
        finetune: quick(1),
        ..tiny_grid()
    };
    let dir = tempfile::tempdir().unwrap();
    let first = run_experiment_grid(&dataset, &config, Some(dir.path())).unwrap();
    assert_eq!(first.cells.len(), 2);

    let cells = dir.path().join("cells");
    let keep = cells.join(format!("{}.json", cell_file_name(WeightScheme::NoWeight, MaskMode::Proportion(0.3), 3)));
    let redo = cells.join(format!("{}.json", cell_file_name(WeightScheme::Reciprocal, MaskMode::Proportion(0.3), 3)));
    // a marker only a reused cell can carry
    let mut kept: GridCell = serde_json::from_slice(&std::fs::read(&keep).unwrap()).unwrap();
    kept.runtime_seconds = -1.0;
    std::fs::write(&keep, serde_json::to_vec(&kept).unwrap()).unwrap();
    std::fs::remove_file(&redo).unwrap();

    let second = run_experiment_grid(&dataset, &config, Some(dir.path())).unwrap();
    assert_eq!(second.cells[0].runtime_seconds, -1.0);
    assert!(second.cells[1].runtime_seconds >= 0.0);
    assert!(redo.exists());
    assert_eq!(second.without_timings().cells[1], first.without_timings().cells[1]);
}

#[test]
fn failed_cells_are_recorded_and_the_grid_continues() {
    let mut dataset = synth(16, 13);
    // fine-tuning needs targets; pre-training does not
    let v = dataset.validation_indices()[0];
    dataset.records[v].target = None;
    let config = GridConfig {
        schemes: vec![WeightScheme::NoWeight, WeightScheme::Log],
        pretrain: quick(1),
        finetune: quick(1),
        ..tiny_grid()
    };
    let report = run_experiment_grid(&dataset, &config, None).unwrap();
    assert_eq!(report.cells.len(), 2);
    assert_eq!(report.failed(), 2);
    assert!(report.cells[0].error.as_deref().unwrap().contains("no target"));
}

#[test]
fn empty_grid_axes_are_rejected() {
    let config = GridConfig {
        seeds: vec![],
        ..tiny_grid()
    };
    assert!(matches!(
        run_experiment_grid(&synth(8, 0), &config, None),
        Err(PipelineError::InvalidConfig(_))
    ));
}

#[test]
fn grid_config_defaults_to_table_shape() {
    let config: GridConfig = serde_json::from_str("{}").unwrap();
    assert_eq!(config.cells().len(), 20);
    assert!(serde_json::from_str::<GridConfig>(r#"{"typo": 1}"#).is_err());
}

proptest! {
    #[test]
    fn masks_are_unique_sorted_and_in_range(n in 1usize..40, p in 0.01f64..1.0, k in 1usize..50, seed: u64) {
        let g = path_graph(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for mode in [MaskMode::Proportion(p), MaskMode::FixedCount(k)] {
            let nodes = select_mask(&g, mode, &mut rng).unwrap();
            prop_assert!(!nodes.is_empty());
            prop_assert!(nodes.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(nodes.iter().all(|&i| i < n));
            prop_assert_eq!(nodes.len(), mode.count(n));
        }
        let expected = ((p * n as f64).round() as usize).max(1).min(n);
        prop_assert_eq!(MaskMode::Proportion(p).count(n), expected);
    }

    #[test]
    fn loss_log_json_round_trip(losses in prop::collection::vec(0.0f64..10.0, 0..20)) {
        let log = LossLog::from_losses(&losses);
        let back: LossLog = serde_json::from_str(&serde_json::to_string(&log).unwrap()).unwrap();
        prop_assert_eq!(back, log);
    }
}
