//! The five comparison runs on one dataset: plain NeRF, each guidance on its
//! own, both together and direct depth supervision.
//!
//! ```text
//! cargo run --release --example ablation -- [iterations] [mismatch]
//! ```

use std::time::Instant;

use hg3nerf::scenes::{generate_dataset, GenConfig};
use hg3nerf::training::{ablation_rows, evaluate, train, TrainConfig};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HG3_LOG", "warn")).init();
    let mut args = std::env::args().skip(1);
    let iters: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(2000);
    let mut gen = GenConfig::default();
    if let Some(m) = args.next() {
        gen.priors.mismatch_delta = m.parse()?;
    }
    let ds = generate_dataset(&gen)?;
    let base = TrainConfig {
        total_iterations: iters,
        ..TrainConfig::toy()
    };

    println!("| run | psnr | ssim | depth_rmse | time |\n|---|---|---|---|---|");
    for (name, cfg) in ablation_rows(&base) {
        let t = Instant::now();
        let state = train(&ds, &cfg, None)?;
        let r = evaluate(&ds, &ds.test(), &state.coarse, &state.fine, &cfg.render, None)?;
        println!(
            "| {name} | {:.3} | {:.4} | {} | {:.0}s |",
            r.psnr,
            r.ssim,
            r.depth_rmse.map_or("-".into(), |d| format!("{d:.4}")),
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
