//! Generates a small scene, trains the toy model with depth-guided sampling
//! and reports held-out metrics.
//!
//! ```text
//! cargo run --release --example train_toy -- [iterations] [hgg|nerf|hsg|both|direct] [seed]
//! ```

use std::time::Instant;

use hg3nerf::scenes::{generate_dataset, GenConfig};
use hg3nerf::training::{evaluate, train, Flags, TrainConfig};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HG3_LOG", "warn")).init();
    let mut args = std::env::args().skip(1);
    let iters: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(2000);
    let mode = args.next().unwrap_or_else(|| "hgg".into());
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let flags = match mode.as_str() {
        "nerf" => Flags::default(),
        "hsg" => Flags { hsg: true, ..Flags::default() },
        "both" => Flags { hgg: true, hsg: true, ..Flags::default() },
        "direct" => Flags { direct_depth_baseline: true, ..Flags::default() },
        _ => Flags { hgg: true, ..Flags::default() },
    };

    let t = Instant::now();
    let ds = generate_dataset(&GenConfig::default())?;
    println!(
        "dataset: {} train / {} test views, {} priors ({:.1?})",
        ds.train().len(),
        ds.test().len(),
        ds.priors.len(),
        t.elapsed()
    );

    let cfg = TrainConfig {
        total_iterations: iters,
        flags,
        seed,
        ..TrainConfig::toy()
    };
    let t = Instant::now();
    let state = train(&ds, &cfg, None)?;
    let secs = t.elapsed().as_secs_f64();
    println!(
        "{mode}: {iters} iterations in {secs:.1}s ({:.2} ms/iter), {} parameters per field",
        1e3 * secs / iters.max(1) as f64,
        state.fine.num_parameters()
    );
    if let Some(last) = state.metrics.last() {
        println!("last batch: hpg {:.5}, train psnr {:.2}", last.hpg, last.psnr_train);
    }

    let report = evaluate(&ds, &ds.test(), &state.coarse, &state.fine, &cfg.render, None)?;
    println!(
        "test: psnr {:.2} dB, ssim {:.3}, depth rmse {}",
        report.psnr,
        report.ssim,
        report.depth_rmse.map_or("-".into(), |d| format!("{d:.3}"))
    );
    Ok(())
}
