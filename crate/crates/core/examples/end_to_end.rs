//! Full desk-scale pipeline: synthetic data, render-tensor caches, identity
//! network, texture generator with the re-ID objective, and evaluation on
//! unseen identities.
//!
//! cargo run --release --example end_to_end -- [out_dir] [iterations]

use std::path::PathBuf;
use std::time::Instant;

use retexture::bodymodel::make_desk_body;
use retexture::dataio::{
    generate_synthetic_dataset, precompute_render_tensors, BackgroundPool, RenderDims, SyntheticDatasetSpec,
    BACKGROUNDS_DIR,
};
use retexture::idnet::{train_idnet, IdNetTrainConfig, IdNetVariant};
use retexture::losses::ReferenceTexture;
use retexture::trainer::{evaluate, prepare_training_set, train, EvalConfig, TrainConfig, TrainEnv, TrainState};

fn main() -> retexture::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("target/end_to_end"));
    let iterations: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let clock = Instant::now();

    let body = make_desk_body(1);
    let mut ds = generate_synthetic_dataset(&SyntheticDatasetSpec::desk(10, 16, 1), &body, &out)?;
    let config = TrainConfig {
        max_iterations: Some(iterations),
        ..TrainConfig::default()
    };
    let dims = RenderDims {
        image: config.image_dims(),
        texture: config.texture_dims(),
    };
    ds.index = precompute_render_tensors(&ds.index, &body, dims, &out.join("cache"), 1)?.index;
    let train_ids: Vec<u32> = (1..=8).collect();
    let train_index = ds.index.filter_identities(&train_ids, retexture::dataio::Split::Train);
    let test_index = ds.index.filter_identities(&[9, 10], retexture::dataio::Split::Test);
    println!("data ready in {:.1}s", clock.elapsed().as_secs_f64());

    let trained = train_idnet(&train_index, IdNetVariant::Pcb, &IdNetTrainConfig::default())?;
    println!(
        "idnet holdout top-1 {:.3} on {} images ({:.1}s)",
        trained.holdout_accuracy,
        trained.holdout_count,
        clock.elapsed().as_secs_f64()
    );

    let env = TrainEnv {
        body: body.clone(),
        reference: ReferenceTexture::new(
            ds.reference.clone(),
            body.face_hand_mask.resampled(dims.texture.0, dims.texture.1),
        )?,
        idnet: trained.net,
        idnet_global: None,
        perceptual: None,
        backgrounds: BackgroundPool::from_dir(&out.join(BACKGROUNDS_DIR), dims.image)?,
    };
    let eval = EvalConfig::default();
    let before = evaluate(&TrainState::new(&config)?.generator, &test_index, &env.idnet, &eval)?;
    let set = prepare_training_set(&train_index, &env, &config)?;
    let outcome = train(&config, &set, &env, Some(&out.join("run")))?;
    let after = evaluate(&outcome.state.generator, &test_index, &env.idnet, &eval)?;
    println!(
        "test mask-SSIM {:.4} -> {:.4} after {} iterations ({:.1}s)",
        before.mask_ssim,
        after.mask_ssim,
        outcome.state.iteration,
        clock.elapsed().as_secs_f64()
    );
    Ok(())
}
