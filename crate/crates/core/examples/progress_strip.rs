//! Trains briefly with per-epoch checkpoints, then renders one test image
//! through every checkpoint into a progress strip.
//!
//! cargo run --release --example progress_strip -- [out_dir]

use std::path::PathBuf;

use retexture::bodymodel::make_desk_body;
use retexture::cli::render_progress_strip;
use retexture::dataio::{
    generate_synthetic_dataset, precompute_render_tensors, BackgroundPool, Split, SyntheticDatasetSpec, BACKGROUNDS_DIR,
};
use retexture::idnet::{train_idnet, IdNetTrainConfig, IdNetVariant};
use retexture::losses::ReferenceTexture;
use retexture::rendering::load_render_tensor;
use retexture::trainer::{list_checkpoints, prepare_training_set, train, TrainConfig, TrainEnv};

fn main() -> retexture::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("target/progress_strip"));
    let _ = std::fs::remove_dir_all(&out);
    let body = make_desk_body(1);
    let config = TrainConfig {
        epochs: 4,
        ..TrainConfig::default()
    };
    let mut ds = generate_synthetic_dataset(&SyntheticDatasetSpec::desk(6, 8, 2), &body, &out)?;
    ds.index = precompute_render_tensors(&ds.index, &body, config.render_dims(), &out.join("cache"), 1)?.index;
    let train_index = ds.index.filter_identities(&[1, 2, 3, 4, 5], Split::Train);
    let test_index = ds.index.filter_identities(&[6], Split::Test);

    let (th, tw) = config.texture_dims();
    let env = TrainEnv {
        reference: ReferenceTexture::new(ds.reference.clone(), body.face_hand_mask.resampled(th, tw))?,
        idnet: train_idnet(&train_index, IdNetVariant::Pcb, &IdNetTrainConfig::default())?.net,
        idnet_global: None,
        perceptual: None,
        backgrounds: BackgroundPool::from_dir(&out.join(BACKGROUNDS_DIR), config.image_dims())?,
        body,
    };
    let run = out.join("run");
    train(
        &config,
        &prepare_training_set(&train_index, &env, &config)?,
        &env,
        Some(&run),
    )?;
    let checkpoints: Vec<PathBuf> = list_checkpoints(&run)?.into_iter().map(|(_, p)| p).collect();

    let rt = load_render_tensor(&test_index.records[0].cache_path)?;
    let image = test_index.load_image(0, config.image_dims())?;
    let strip = out.join("strip.png");
    render_progress_strip(&checkpoints, &image, &rt, &strip)?;
    println!("{} checkpoints -> {}", checkpoints.len(), strip.display());
    Ok(())
}
