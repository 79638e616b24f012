#![allow(dead_code)]

use std::path::Path;

use retexture::bodymodel::{make_desk_body, BodyModelSpec};
use retexture::dataio::{
    generate_synthetic_dataset, precompute_render_tensors, BackgroundPool, RenderDims, SyntheticDataset,
    SyntheticDatasetSpec, BACKGROUNDS_DIR,
};
use retexture::generator::GeneratorConfig;
use retexture::idnet::{IdNet, IdNetConfig, IdNetVariant, PerceptualConfig, PerceptualNet};
use retexture::losses::ReferenceTexture;
use retexture::trainer::{TrainConfig, TrainEnv};

pub const IMAGE: (usize, usize) = (64, 32);
pub const TEXTURE: (usize, usize) = (16, 16);

/// Synthetic dataset with caches already built.
pub fn dataset(dir: &Path, ids: usize, views: usize, seed: u64) -> (BodyModelSpec, SyntheticDataset) {
    let body = make_desk_body(1);
    let spec = SyntheticDatasetSpec {
        texture_dims: TEXTURE,
        ..SyntheticDatasetSpec::desk(ids, views, seed)
    };
    let mut ds = generate_synthetic_dataset(&spec, &body, dir).unwrap();
    let dims = RenderDims {
        image: IMAGE,
        texture: TEXTURE,
    };
    let report = precompute_render_tensors(&ds.index, &body, dims, &dir.join("cache"), 1).unwrap();
    assert!(report.failures.is_empty());
    ds.index = report.index;
    (body, ds)
}

pub fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig {
        in_dims: (IMAGE.0, IMAGE.1, 3),
        out_dims: (TEXTURE.0, TEXTURE.1, 3),
        depth: 2,
        base_channels: 4,
        seed: 11,
    }
}

pub fn tiny_idnet(classes: Vec<u32>, variant: IdNetVariant) -> IdNet {
    IdNet::init(IdNetConfig {
        widths: [4, 4, 8, 8],
        part_dim: 8,
        seed: 3,
        ..IdNetConfig::desk(classes, variant)
    })
    .unwrap()
}

pub fn env(body: &BodyModelSpec, ds: &SyntheticDataset) -> TrainEnv {
    let classes: Vec<u32> = ds.textures.keys().copied().collect();
    TrainEnv {
        body: body.clone(),
        reference: ReferenceTexture::new(
            ds.reference.clone(),
            body.face_hand_mask.resampled(TEXTURE.0, TEXTURE.1),
        )
        .unwrap(),
        idnet: tiny_idnet(classes.clone(), IdNetVariant::Pcb),
        idnet_global: Some(tiny_idnet(classes, IdNetVariant::Global)),
        perceptual: Some(
            PerceptualNet::init(PerceptualConfig {
                widths: vec![4, 4, 4, 8, 8],
                ..PerceptualConfig::desk()
            })
            .unwrap(),
        ),
        backgrounds: BackgroundPool::from_dir(&ds.root.join(BACKGROUNDS_DIR), IMAGE).unwrap(),
    }
}

/// Two groups of two, tiny generator, one epoch.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        groups_per_batch: 2,
        images_per_group: 2,
        epochs: 1,
        learning_rate: 1e-3,
        generator: tiny_generator(),
        ..TrainConfig::default()
    }
}
