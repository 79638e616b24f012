//! Writes a small synthetic dataset and a contact sheet of its first views.
//!
//! cargo run --release --example synthetic_dataset -- [out_dir]

use std::path::PathBuf;

use retexture::bodymodel::make_desk_body;
use retexture::dataio::{generate_synthetic_dataset, SyntheticDatasetSpec};
use retexture::ImageTensor;

fn main() -> retexture::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("target/synthetic_demo"));
    let body = make_desk_body(1);
    let ds = generate_synthetic_dataset(&SyntheticDatasetSpec::desk(4, 6, 7), &body, &out)?;
    println!(
        "{} images of {} identities under {}",
        ds.index.len(),
        ds.textures.len(),
        out.display()
    );

    // One row per identity: its views side by side.
    let views: Vec<ImageTensor> = ds.index.load_images((64, 32))?;
    let (rows, cols) = (ds.textures.len(), views.len() / ds.textures.len());
    let sheet = ImageTensor::from_fn(64 * rows, 32 * cols, |r, c| {
        views[(r / 64) * cols + c / 32].pixel(r % 64, c % 32)
    });
    sheet.save_png(&out.join("sheet.png"))?;
    println!("contact sheet: {}", out.join("sheet.png").display());
    Ok(())
}
