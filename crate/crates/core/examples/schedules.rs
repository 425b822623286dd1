//! The two coarse-to-fine schedules: the depth window shrinking factor and
//! the semantic grid stride, plus the sampling window they drive.
//!
//! ```text
//! cargo run --release --example schedules -- [iterations]
//! ```

use hg3nerf::sampling::{hgg_gamma, hgg_window, inverse_transform_samples, stratified_samples, HggSchedule};
use hg3nerf::semantics::{grid_dims, hsg_stride, HsgSchedule};
use hg3nerf::training::TrainConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let total: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20_000);
    let cfg = TrainConfig {
        total_iterations: total,
        ..TrainConfig::toy()
    };
    let hgg = HggSchedule::new(cfg.n_hgg(), cfg.epsilon_hgg).unwrap();
    let hsg = HsgSchedule::new(cfg.n_hsg(), HsgSchedule::default_s_max(64, 64)).unwrap();
    println!("window schedule over {} iterations, stride schedule over {}", cfg.n_hgg(), cfg.n_hsg());
    let (near, far, prior) = (2.0, 6.0, 3.6);

    println!("{:>7} {:>7} {:>17} {:>7} {:>6}", "iter", "gamma", "window", "stride", "grid");
    for k in 0..=20 {
        let i = total * k / 20;
        let g = hgg_gamma(i, &hgg);
        let (lo, hi) = hgg_window(prior, near, far, g).unwrap();
        let s = hsg_stride(i, &hsg);
        let (gh, gw) = grid_dims(64, 64, s);
        println!("{i:>7} {g:>7.4} [{lo:>6.3}, {hi:>6.3}] {s:>7} {:>6}", format!("{gh}x{gw}"));
    }

    // coarse samples in the early window, then fine samples from made-up weights
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (lo, hi) = hgg_window(prior, near, far, hgg_gamma(0, &hgg)).unwrap();
    let coarse = stratified_samples(lo, hi, 8, true, &mut rng).unwrap();
    println!("\ncoarse samples in [{lo:.3}, {hi:.3}]: {:.3?}", coarse.ts);
    let edges: Vec<f64> = (0..=8).map(|k| lo + (hi - lo) * k as f64 / 8.0).collect();
    let weights = [0.0, 0.05, 0.1, 0.5, 0.25, 0.1, 0.0, 0.0];
    let fine = inverse_transform_samples(&edges, &weights, 12, &mut rng).unwrap();
    println!("fine samples: {:.3?}", fine.ts);
}
