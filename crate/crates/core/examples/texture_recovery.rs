//! Recovers one synthetic identity's texture from four posed views by
//! optimizing the texels directly under pixel-l1 through the render tensors.
//!
//! cargo run --release --example texture_recovery -- [out_dir]

use std::path::PathBuf;
use std::sync::Arc;

use retexture::autodiff::{Graph, ParamSet, Tensor};
use retexture::bodymodel::make_desk_body;
use retexture::dataio::{generate_synthetic_dataset, precompute_render_tensors, RenderDims, SyntheticDatasetSpec};
use retexture::losses;
use retexture::optim::{Adam, AdamConfig};
use retexture::rendering::load_render_tensor;
use retexture::Texture;

fn main() -> retexture::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("target/texture_recovery"));
    let body = make_desk_body(1);
    let spec = SyntheticDatasetSpec::desk(1, 4, 3);
    let dims = RenderDims {
        image: spec.image_dims,
        texture: spec.texture_dims,
    };
    let mut ds = generate_synthetic_dataset(&spec, &body, &out)?;
    ds.index = precompute_render_tensors(&ds.index, &body, dims, &out.join("cache"), 1)?.index;
    let rts = ds
        .index
        .records
        .iter()
        .map(|r| load_render_tensor(&r.cache_path).map(Arc::new))
        .collect::<retexture::Result<Vec<_>>>()?;
    let targets: Vec<Vec<f64>> = ds
        .index
        .load_images(dims.image)?
        .iter()
        .map(|i| i.to_planar())
        .collect();
    let (th, tw) = dims.texture;
    let truth = &ds.textures[&1];
    // Texels seen by at least one view; the rest are unconstrained.
    let mut visible = vec![false; th * tw];
    for rt in &rts {
        visible
            .iter_mut()
            .zip(rt.visible_texels().bits())
            .for_each(|(v, &b)| *v |= b);
    }
    let truth_planar = truth.to_planar();
    let visible_mae = |p: &[f64]| {
        let errs: Vec<f64> = (0..p.len())
            .filter(|k| visible[k % (th * tw)])
            .map(|k| (p[k] - truth_planar[k]).abs())
            .collect();
        errs.iter().sum::<f64>() / errs.len() as f64
    };

    let mut params = ParamSet::new();
    params.push("texture", Tensor::new(vec![3, th, tw], vec![0.5; 3 * th * tw]));
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: 0.02,
            weight_decay: 0.0,
            ..AdamConfig::default()
        },
        &params,
    );
    let background = vec![0.5; 3 * dims.image.0 * dims.image.1];
    for it in 0..=300 {
        let mut g = Graph::new();
        let t = g.input(params.get(0).clone(), true);
        let per_view: Vec<_> = rts
            .iter()
            .zip(&targets)
            .map(|(rt, x)| {
                let y = g.render(t, rt.clone(), &background);
                losses::graph::pixel_l1(&mut g, y, x)
            })
            .collect();
        let total = per_view.into_iter().reduce(|a, b| g.add(a, b)).expect("four views");
        if it % 50 == 0 {
            println!(
                "iteration {:3}: loss {:9.3}, visible-texel MAE {:.4}",
                it,
                g.scalar(total),
                visible_mae(&params.get(0).data)
            );
        }
        let grad = g.backward(total).get_or_zeros(t, 3 * th * tw);
        adam.update(&mut params, &[grad]);
        params.get_mut(0).data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Texture::from_planar(th, tw, &params.get(0).data)?.save_png(&out.join("recovered.png"))?;
    truth.save_png(&out.join("truth.png"))?;
    println!("wrote {}", out.join("recovered.png").display());
    Ok(())
}
