//! Poses the desk body, builds a render tensor and renders a texture over a
//! gray background. Also checks the operator's adjoint on the spot.
//!
//! cargo run --release --example pose_and_render -- [out_dir]

use std::path::PathBuf;

use retexture::bodymodel::{make_desk_body, pose_mesh, PoseParams, ShapeParams, Translation};
use retexture::dataio::{default_camera, identity_texture, walking_poses, MID_GRAY};
use retexture::rendering::{apply, apply_transpose, build_render_tensor, pose_mask};
use retexture::RgbGrid;

fn main() -> retexture::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("target/pose_and_render"));
    std::fs::create_dir_all(&out).map_err(|source| retexture::Error::Io {
        path: out.clone(),
        source,
    })?;
    let body = make_desk_body(1);
    let image = (64, 32);
    let texture = identity_texture(&body, 3, (32, 32), 0);

    let mut panels = Vec::new();
    for (k, pose) in walking_poses(4).into_iter().enumerate() {
        let mut theta = pose.as_slice().to_vec();
        // Root yaw: a quarter turn per view.
        theta[1] = k as f64 * std::f64::consts::FRAC_PI_2;
        let mesh = pose_mesh(
            &body,
            &ShapeParams::zeros(),
            &PoseParams::new(theta)?,
            &Translation::zero(),
        )?;
        let rt = build_render_tensor(&mesh, &default_camera(image), image, texture.dims())?;
        let rendered = apply(&rt, &texture, &RgbGrid::filled(image.0, image.1, MID_GRAY))?;

        // <R t, u> = <t, R^T u> for any u.
        let u = RgbGrid::from_fn(image.0, image.1, |r, c| [(r % 5) as f64, (c % 3) as f64, 1.0]);
        let lhs: f64 = apply(&rt, &texture, &RgbGrid::zeros(image.0, image.1))?
            .data()
            .iter()
            .zip(u.data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = texture
            .data()
            .iter()
            .zip(apply_transpose(&rt, &u)?.data())
            .map(|(a, b)| a * b)
            .sum();
        println!(
            "view {}: {} covered pixels, {} nonzeros, adjoint gap {:.1e}",
            k,
            pose_mask(&rt).count(),
            rt.entries().len(),
            (lhs - rhs).abs()
        );
        panels.push(rendered);
    }
    let strip = RgbGrid::from_fn(image.0, image.1 * panels.len(), |r, c| {
        panels[c / image.1].pixel(r, c % image.1)
    });
    strip.save_png(&out.join("views.png"))?;
    texture.save_png(&out.join("texture.png"))?;
    println!("wrote {}", out.join("views.png").display());
    Ok(())
}
