//! Grid subsampling for the semantic loss: how close a stride-`s` grid image
//! stays to the full image in feature space, and how views compare.
//!
//! ```text
//! cargo run --release --example semantic_grid
//! ```

use hg3nerf::scenes::{generate_dataset, GenConfig};
use hg3nerf::semantics::{hsg_loss, GridImage, SemanticEncoder, ToyLinearEncoder};

fn main() -> anyhow::Result<()> {
    let ds = generate_dataset(&GenConfig::default())?;
    let enc = ToyLinearEncoder::new(0);
    let v = ds.train()[0];
    let full = enc.encode(&ds.images[v], "")?;

    println!("{:>6} {:>7} {:>10} {:>10}", "stride", "grid", "cosine", "loss");
    for s in 1..=8 {
        let grid = GridImage::sample(&ds.images[v], s);
        let f = enc.encode(&grid.image, "")?;
        println!(
            "{s:>6} {:>7} {:>10.6} {:>10.6}",
            format!("{}x{}", grid.image.height(), grid.image.width()),
            full.cosine(&f),
            hsg_loss(&f, &full)?
        );
    }

    println!("\ncross-view cosine (full images)");
    let feats = ds
        .records
        .iter()
        .zip(&ds.images)
        .map(|(r, img)| Ok((r.image.clone(), enc.encode(img, "")?)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    for (name, f) in &feats {
        println!("  {name}: {:.4}", full.cosine(f));
    }
    Ok(())
}
