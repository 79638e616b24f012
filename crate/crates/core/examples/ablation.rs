//! Trains every loss variant from the same initialization and prints the
//! metric table.
//!
//! cargo run --release --example ablation -- [iterations]

use retexture::bodymodel::make_desk_body;
use retexture::dataio::{
    generate_synthetic_dataset, precompute_render_tensors, BackgroundPool, Split, SyntheticDatasetSpec, BACKGROUNDS_DIR,
};
use retexture::idnet::{
    train_idnet, train_perceptual_on_index, IdNetTrainConfig, IdNetVariant, PerceptualConfig, PerceptualTrainConfig,
};
use retexture::losses::ReferenceTexture;
use retexture::trainer::{run_ablation, AblationVariant, EvalConfig, TrainConfig, TrainEnv};

fn main() -> retexture::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let dir = std::path::PathBuf::from("target/ablation_demo");
    let _ = std::fs::remove_dir_all(&dir);
    let body = make_desk_body(1);
    let config = TrainConfig {
        max_iterations: Some(iterations),
        ..TrainConfig::default()
    };
    let mut ds = generate_synthetic_dataset(&SyntheticDatasetSpec::desk(10, 16, 1), &body, &dir)?;
    ds.index = precompute_render_tensors(&ds.index, &body, config.render_dims(), &dir.join("cache"), 1)?.index;
    let train = ds.index.filter_identities(&(1..=8).collect::<Vec<_>>(), Split::Train);
    let test = ds.index.filter_identities(&[9, 10], Split::Test);

    let (th, tw) = config.texture_dims();
    let env = TrainEnv {
        reference: ReferenceTexture::new(ds.reference.clone(), body.face_hand_mask.resampled(th, tw))?,
        idnet: train_idnet(&train, IdNetVariant::Pcb, &IdNetTrainConfig::default())?.net,
        idnet_global: Some(train_idnet(&train, IdNetVariant::Global, &IdNetTrainConfig::default())?.net),
        perceptual: Some(
            train_perceptual_on_index(&train, PerceptualConfig::desk(), &PerceptualTrainConfig::default())?.0,
        ),
        backgrounds: BackgroundPool::from_dir(&dir.join(BACKGROUNDS_DIR), config.image_dims())?,
        body,
    };
    let table = run_ablation(
        &AblationVariant::ALL,
        &config,
        &train,
        &test,
        &env,
        &EvalConfig::default(),
    )?;
    print!("{}", table.to_text());
    Ok(())
}
