mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use retexture::dataio::RenderDims;
use retexture::metrics::Classifier;
use retexture::trainer::{
    batch_objective, evaluate, evaluate_textures, list_checkpoints, prepare_training_set, run_ablation, train,
    train_step, AblationVariant, Batch, BatchPlan, EvalConfig, TrainConfig, TrainState, TrainingSet, TRAIN_LOG,
};
use retexture::{Error, ImageTensor};

use common::*;

fn flat(state: &TrainState) -> Vec<f64> {
    state
        .generator
        .params()
        .iter()
        .flat_map(|(_, t)| t.data.clone())
        .collect()
}

fn first_batch(set: &TrainingSet, config: &TrainConfig) -> Batch {
    BatchPlan::new(&set.index, config.batch_shape(), config.seed)
        .unwrap()
        .epoch(0)
        .remove(0)
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let (body, ds) = dataset(dir.path(), 2, 2, 1);
    let env = env(&body, &ds);
    let config = TrainConfig {
        learning_rate: 0.0,
        ..tiny_config()
    };
    let set = prepare_training_set(&ds.index, &env, &config).unwrap();
    let mut state = TrainState::new(&config).unwrap();
    let before = flat(&state);
    let batch = first_batch(&set, &config);
    for _ in 0..2 {
        let l = train_step(&mut state, &set, &env, &config, &batch).unwrap();
        assert!(l.is_finite());
    }
    assert_eq!(before, flat(&state));
}

#[test]
fn pixel_l1_on_one_record_decreases() {
    let dir = tempfile::tempdir().unwrap();
    let (body, ds) = dataset(dir.path(), 2, 1, 2);
    let env = env(&body, &ds);
    let config = TrainConfig {
        loss_variant: AblationVariant::PixelL1,
        resample_backgrounds: false,
        ..tiny_config()
    };
    let set = prepare_training_set(&ds.index, &env, &config).unwrap();
    let mut state = TrainState::new(&config).unwrap();
    let batch = Batch {
        records: vec![0],
        identities: vec![set.items[0].identity],
    };
    let losses: Vec<f64> = (0..20)
        .map(|_| train_step(&mut state, &set, &env, &config, &batch).unwrap().image)
        .collect();
    let mut best = losses[0];
    let mut stale = 0;
    for &l in &losses[1..] {
        if l < best {
            best = l;
            stale = 0;
        } else {
            stale += 1;
            assert!(stale <= 3, "no improvement for more than 3 steps: {:?}", losses);
        }
    }
    assert!(losses[19] < losses[0], "{:?}", losses);
}

#[test]
fn training_is_deterministic_and_idnet_is_frozen() {
    let dir = tempfile::tempdir().unwrap();
    let (body, ds) = dataset(dir.path(), 4, 4, 3);
    let env = env(&body, &ds);
    let config = TrainConfig {
        max_iterations: Some(3),
        ..tiny_config()
    };
    let idnet_hash = env.idnet.params().fingerprint();
    let set = prepare_training_set(&ds.index, &env, &config).unwrap();
    let a = train(&config, &set, &env, None).unwrap();
    let b = train(&config, &set, &env, None).unwrap();
    assert_eq!(a.state.iteration, 3);
    assert_eq!(flat(&a.state), flat(&b.state));
    assert_eq!(a.history, b.history);
    assert_eq!(env.idnet.params().fingerprint(), idnet_hash);
}

#[test]
fn resume_replays_the_same_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let (body, ds) = dataset(dir.path(), 4, 4, 4);
    let env = env(&body, &ds);
    let config = TrainConfig {
        epochs: 3,
        ..tiny_config()
    };
    let set = prepare_training_set(&ds.index, &env, &config).unwrap();
    let per_epoch = BatchPlan::new(&set.index, config.batch_shape(), config.seed)
        .unwrap()
        .batches_per_epoch();

    let full_dir = tempfile::tempdir().unwrap();
    let full = train(&config, &set, &env, Some(full_dir.path())).unwrap();
    assert_eq!(full.checkpoints.len(), 4);

    let part_dir = tempfile::tempdir().unwrap();
    let interrupted = TrainConfig {
        max_iterations: Some(per_epoch + 1),
        ..config.clone()
    };
    train(&interrupted, &set, &env, Some(part_dir.path())).unwrap();
    // Drop the checkpoint written at the interruption point; resume from epoch 1.
    let cks = list_checkpoints(part_dir.path()).unwrap();
    std::fs::remove_file(&cks.last().unwrap().1).unwrap();
    let resumed = train(&config, &set, &env, Some(part_dir.path())).unwrap();
    assert_eq!(resumed.history.first().unwrap().iteration, per_epoch + 1);
    assert_eq!(flat(&resumed.state), flat(&full.state));
    assert_eq!(
        std::fs::read_to_string(full_dir.path().join(TRAIN_LOG)).unwrap(),
        std::fs::read_to_string(part_dir.path().join(TRAIN_LOG)).unwrap()
    );
}

#[test]
fn every_variant_passes_a_gradient_check() {
    let dir = tempfile::tempdir().unwrap();
    let (body, ds) = dataset(dir.path(), 2, 2, 5);
    let env = env(&body, &ds);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for variant in AblationVariant::ALL {
        let config = TrainConfig {
            loss_variant: variant,
            triplet_margin: 50.0,
            ..tiny_config()
        };
        let set = prepare_training_set(&ds.index, &env, &config).unwrap();
        let state = TrainState::new(&config).unwrap();
        let batch = if variant == AblationVariant::Triplet {
            first_batch(&set, &config)
        } else {
            Batch {
                records: vec![0],
                identities: vec![set.items[0].identity],
            }
        };
        let (_, grads) = batch_objective(&state, &set, &env, &config, &batch).unwrap();
        let dir_vec: Vec<Vec<f64>> = grads
            .iter()
            .map(|g| g.iter().map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let analytic: f64 = grads
            .iter()
            .zip(&dir_vec)
            .flat_map(|(g, d)| g.iter().zip(d).map(|(a, b)| a * b))
            .sum();
        let h = 1e-6;
        let at = |sign: f64| {
            let mut s = state.clone();
            for (i, d) in dir_vec.iter().enumerate() {
                for (p, dv) in s.generator.params_mut().get_mut(i).data.iter_mut().zip(d) {
                    *p += sign * h * dv;
                }
            }
            batch_objective(&s, &set, &env, &config, &batch).unwrap().0.total
        };
        let numeric = (at(1.0) - at(-1.0)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
        assert!(
            rel < 1e-2,
            "{}: analytic {} numeric {} rel {}",
            variant,
            analytic,
            numeric,
            rel
        );
    }
}

#[test]
fn no_pose_uses_different_render_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let (body, ds) = dataset(dir.path(), 2, 2, 6);
    let env = env(&body, &ds);
    let aligned = prepare_training_set(&ds.index, &env, &tiny_config()).unwrap();
    let config = TrainConfig {
        loss_variant: AblationVariant::NoPose,
        ..tiny_config()
    };
    let random = prepare_training_set(&ds.index, &env, &config).unwrap();
    for (a, b) in aligned.items.iter().zip(&random.items) {
        assert_ne!(a.rt.entries(), b.rt.entries());
    }
}

#[test]
fn missing_cache_names_precompute() {
    let dir = tempfile::tempdir().unwrap();
    let (body, ds) = dataset(dir.path(), 2, 2, 7);
    let env = env(&body, &ds);
    std::fs::remove_file(&ds.index.records[1].cache_path).unwrap();
    let err = prepare_training_set(&ds.index, &env, &tiny_config()).unwrap_err();
    assert!(matches!(err, Error::Dataset(_)));
    let msg = err.to_string();
    assert!(
        msg.contains("precompute") && msg.contains(&ds.index.records[1].stem()),
        "{}",
        msg
    );
}

struct Uniform;

impl Classifier for Uniform {
    fn class_probabilities(&self, _: &ImageTensor) -> retexture::Result<Vec<f64>> {
        Ok(vec![0.25; 4])
    }
}

#[test]
fn ground_truth_textures_score_perfect_mask_ssim() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ds) = dataset(dir.path(), 2, 3, 8);
    let dims = RenderDims {
        image: IMAGE,
        texture: TEXTURE,
    };
    let gt = |i: usize, _: &ImageTensor| Ok(ds.textures[&ds.index.records[i].identity].clone());
    let report = evaluate_textures(&ds.index, dims, &gt, &Uniform, &EvalConfig::default()).unwrap();
    assert_eq!(report.n_images, 6);
    assert!((report.mask_ssim - 1.0).abs() < 1e-6, "{}", report.mask_ssim);
    assert!((report.is_score - 1.0).abs() < 1e-12);
    let again = evaluate_textures(&ds.index, dims, &gt, &Uniform, &EvalConfig::default()).unwrap();
    assert_eq!(report, again);
}

#[test]
fn evaluation_is_deterministic_and_rejects_empty_sets() {
    let dir = tempfile::tempdir().unwrap();
    let (body, ds) = dataset(dir.path(), 2, 2, 9);
    let env = env(&body, &ds);
    let state = TrainState::new(&tiny_config()).unwrap();
    let a = evaluate(&state.generator, &ds.index, &env.idnet, &EvalConfig::default()).unwrap();
    let b = evaluate(&state.generator, &ds.index, &env.idnet, &EvalConfig::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.n_images, ds.index.len());
    let empty = ds.index.filter_identities(&[], ds.index.split);
    assert!(matches!(
        evaluate(&state.generator, &empty, &env.idnet, &EvalConfig::default()),
        Err(Error::Dataset(_))
    ));
}

#[test]
fn ablation_table_has_a_column_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let (body, ds) = dataset(dir.path(), 4, 4, 10);
    let env = env(&body, &ds);
    let config = TrainConfig {
        max_iterations: Some(1),
        ..tiny_config()
    };
    let grid = [AblationVariant::Reid, AblationVariant::PixelL1];
    let test = ds.index.filter_identities(&[4], ds.index.split);
    let table = run_ablation(&grid, &config, &ds.index, &test, &env, &EvalConfig::default()).unwrap();
    assert_eq!(table.variants(), grid.to_vec());
    let text = table.to_text();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[0].split_whitespace().count(), 3);
    for row in &lines[1..5] {
        assert_eq!(row.split_whitespace().count(), 3, "{}", row);
    }
    assert_eq!(table.to_key_value().lines().count(), 10);
    let again = run_ablation(&grid, &config, &ds.index, &test, &env, &EvalConfig::default()).unwrap();
    assert_eq!(table, again);
    assert!(matches!("bogus".parse::<AblationVariant>(), Err(Error::Config(_))));
}

#[test]
fn config_round_trips_through_toml() {
    let config = tiny_config();
    assert_eq!(TrainConfig::from_toml_str(&config.to_toml()).unwrap(), config);
    let partial = TrainConfig::from_toml_str("epochs = 3\nloss_variant = \"no_pcb\"\n").unwrap();
    assert_eq!(partial.epochs, 3);
    assert_eq!(partial.loss_variant, AblationVariant::NoPcb);
    assert!(matches!(
        TrainConfig::from_toml_str("batch_size = 15\n"),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        TrainConfig::from_toml_str("bogus_key = 1\n"),
        Err(Error::Config(_))
    ));
}
