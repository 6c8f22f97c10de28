//! Writes the procedural 10-class dataset and prints one sample per class.
//!
//! `cargo run --example synth_dataset -- [out_dir]`

use std::path::PathBuf;

use qprune::data::{synth_images, Dataset, Normalization, RawImages, SYNTH_CLASSES};

fn main() -> qprune::Result<()> {
    let raw = synth_images(200, 0);
    if let Some(dir) = std::env::args().nth(1).map(PathBuf::from) {
        raw.write_dir(&dir)?;
        let back = RawImages::read_dir(&dir)?;
        println!("wrote {} images to {}", back.len(), dir.display());
    }
    let ds = Dataset::from_raw(&raw, &Normalization::default())?;
    let [_, h, w] = raw.shape;
    for class in 0..SYNTH_CLASSES {
        let i = ds.labels.iter().position(|&l| l == class).expect("every class present");
        println!("class {class}:");
        let px = &raw.pixels[i * 3 * h * w..][..h * w];
        for y in (0..h).step_by(4) {
            let row: String = (0..w)
                .step_by(2)
                .map(|x| if px[y * w + x] > 128 { '#' } else { '.' })
                .collect();
            println!("  {row}");
        }
    }
    Ok(())
}
