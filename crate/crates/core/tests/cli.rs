use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hg3nerf::evalio::{depth_rmse, psnr, read_pfm, read_png, ssim};
use hg3nerf::rendering::RenderConfig;
use hg3nerf::scenes::{GenConfig, PriorSpec, RigSpec, SceneDataset};
use hg3nerf::training::{AblationRow, EvalReport, TrainConfig};

fn hg3(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hg3"))
        .args(args)
        .env("HG3_LOG", "error")
        .output()
        .expect("spawn hg3")
}

fn ok(args: &[&str]) -> Output {
    let out = hg3(args);
    assert!(
        out.status.success(),
        "hg3 {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_config(dir: &Path) -> PathBuf {
    let cfg = GenConfig {
        rig: RigSpec {
            width: 24,
            height: 24,
            focal: 26.0,
            n_test: 2,
            ..RigSpec::default()
        },
        priors: PriorSpec {
            density_fraction: 0.05,
            ..PriorSpec::default()
        },
        quadrature: 1024,
        ..GenConfig::default()
    };
    let path = dir.join("gen.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    path
}

fn tiny_train() -> TrainConfig {
    let mut t = TrainConfig {
        total_iterations: 12,
        rays_per_batch: 8,
        render: RenderConfig {
            n_coarse: 6,
            n_fine: 6,
            ..RenderConfig::default()
        },
        hsg_every: 4,
        hsg_chunk: 16,
        metrics_every: 4,
        ..TrainConfig::toy()
    };
    t.field.hidden = 8;
    t.field.color_hidden = 4;
    t
}

fn run_config(dir: &Path, dataset: &Path, out: &Path, train: &TrainConfig) -> PathBuf {
    let doc = serde_json::json!({ "dataset": dataset, "out": out, "train": train });
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    path
}

/// A scratch directory with a small generated dataset in `data/`.
fn scratch() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gen_config(dir.path());
    let data = dir.path().join("data");
    ok(&["gen", "--config", s(&cfg), "--out", s(&data), "--threads", "1"]);
    (dir, data)
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gen_config(dir.path());
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["gen", "--config", s(&cfg), "--out", s(&a), "--seed", "4"]);
    ok(&["gen", "--config", s(&cfg), "--out", s(&b), "--seed", "4", "--threads", "1"]);
    ok(&["gen", "--config", s(&cfg), "--out", s(&c), "--seed", "5"]);
    let names = files_under(&a);
    assert_eq!(names, files_under(&b));
    for n in &names {
        assert_eq!(std::fs::read(a.join(n)).unwrap(), std::fs::read(b.join(n)).unwrap(), "{n:?}");
    }
    assert_ne!(
        std::fs::read(a.join("images/000.png")).unwrap(),
        std::fs::read(c.join("images/000.png")).unwrap()
    );
}

#[test]
fn gen_view_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gen_config(dir.path());
    for v in ["3", "6", "9"] {
        let out = dir.path().join(format!("v{v}"));
        ok(&["gen", "--config", s(&cfg), "--out", s(&out), "--views", v]);
        let ds = SceneDataset::load(&out).unwrap();
        assert_eq!(ds.train().len(), v.parse::<usize>().unwrap());
        assert_eq!(ds.test().len(), 2);
    }
    for bad in ["4", "0", "x"] {
        let out = hg3(&["gen", "--out", s(&dir.path().join("bad")), "--views", bad]);
        assert_eq!(out.status.code(), Some(64), "--views {bad}");
    }
}

/// Mean |prior - depth / opacity| at the prior pixels, read back from disk.
fn prior_deviation(dir: &Path) -> f64 {
    let ds = SceneDataset::load(dir).unwrap();
    let total: f64 = ds
        .priors
        .iter()
        .map(|p| {
            let (r, c) = (p.v as usize, p.u as usize);
            let d = ds.depths[p.image_id].get(r, c) / ds.opacities[p.image_id].get(r, c);
            (p.depth - d).abs()
        })
        .sum();
    total / ds.priors.len() as f64
}

#[test]
fn gen_mismatch_biases_the_priors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gen_config(dir.path());
    let (clean, biased) = (dir.path().join("clean"), dir.path().join("biased"));
    ok(&["gen", "--config", s(&cfg), "--out", s(&clean)]);
    ok(&["gen", "--config", s(&cfg), "--out", s(&biased), "--mismatch", "0.005"]);
    let (e0, e1) = (prior_deviation(&clean), prior_deviation(&biased));
    // the maps are stored as f32
    assert!(e0 < 1e-5, "{e0}");
    assert!(e1 > 10.0 * e0.max(1e-5), "{e1} vs {e0}");
}

#[test]
fn refuses_to_overwrite_without_force() {
    let (dir, data) = scratch();
    let cfg = gen_config(dir.path());
    let again = hg3(&["gen", "--config", s(&cfg), "--out", s(&data)]);
    assert_eq!(again.status.code(), Some(1));
    assert!(!again.stderr.is_empty());
    ok(&["gen", "--config", s(&cfg), "--out", s(&data), "--force"]);

    let out = dir.path().join("run");
    let run = run_config(dir.path(), &data, &out, &tiny_train());
    ok(&["train", "--config", s(&run), "--iters", "0"]);
    assert_eq!(hg3(&["train", "--config", s(&run), "--iters", "0"]).status.code(), Some(1));
    ok(&["train", "--config", s(&run), "--iters", "0", "--force"]);
}

#[test]
fn zero_iterations_write_only_the_initial_checkpoint() {
    let (dir, data) = scratch();
    let out = dir.path().join("run");
    let run = run_config(dir.path(), &data, &out, &tiny_train());
    ok(&["train", "--config", s(&run), "--iters", "0"]);
    let files = files_under(&out);
    assert_eq!(files, vec![PathBuf::from("config.json"), PathBuf::from("model.ckpt")]);
    // the resolved config records the override
    let resolved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["total_iterations"], 0);
}

#[test]
fn training_reruns_identically_from_the_resolved_config() {
    let (dir, data) = scratch();
    let train = TrainConfig {
        flags: hg3nerf::training::Flags {
            hgg: true,
            hsg: true,
            direct_depth_baseline: false,
        },
        ..tiny_train()
    };
    let a = dir.path().join("a");
    let run = run_config(dir.path(), &data, &a, &train);
    ok(&["train", "--config", s(&run), "--threads", "1"]);
    let b = dir.path().join("b");
    let resolved = a.join("config.json");
    ok(&["train", "--config", s(&resolved), "--out", s(&b), "--threads", "1"]);
    for f in ["model.ckpt", "metrics.ndjson"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(!std::fs::read(a.join("metrics.ndjson")).unwrap().is_empty());
}

#[test]
fn non_finite_loss_exits_with_two() {
    let (dir, data) = scratch();
    let out = dir.path().join("run");
    let train = TrainConfig {
        lr_start: 1e300,
        lr_end: 1e300,
        ..tiny_train()
    };
    let run = run_config(dir.path(), &data, &out, &train);
    let res = hg3(&["train", "--config", s(&run)]);
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stderr).contains("diagnostic dump"));
}

#[test]
fn eval_against_its_own_renders_hits_the_cap() {
    let (dir, data) = scratch();
    let out = dir.path().join("run");
    let run = run_config(dir.path(), &data, &out, &tiny_train());
    ok(&["train", "--config", s(&run), "--iters", "0"]);
    let ckpt = out.join("model.ckpt");
    let renders = dir.path().join("renders");
    ok(&["render", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--out", s(&renders), "--split", "train"]);

    // swap the stored training images for the model's own renders
    let ds = SceneDataset::load(&data).unwrap();
    for &v in &ds.train() {
        let name = &ds.records[v].image;
        std::fs::copy(renders.join(format!("{name}.png")), data.join("images").join(format!("{name}.png"))).unwrap();
        assert!(renders.join(format!("{name}_depth.pfm")).exists());
    }
    let res = ok(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--split", "train"]);
    let text = String::from_utf8_lossy(&res.stdout);
    assert!(text.starts_with("psnr 99.000"), "{text}");
}

#[test]
fn eval_json_matches_recomputation_from_files() {
    let (dir, data) = scratch();
    let out = dir.path().join("run");
    let run = run_config(dir.path(), &data, &out, &tiny_train());
    ok(&["train", "--config", s(&run)]);
    let report_dir = dir.path().join("eval");
    ok(&[
        "eval",
        "--checkpoint",
        s(&out.join("model.ckpt")),
        "--dataset",
        s(&data),
        "--out",
        s(&report_dir),
    ]);
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(report_dir.join("metrics.json")).unwrap()).unwrap();
    let ds = SceneDataset::load(&data).unwrap();
    assert_eq!(report.views.len(), ds.test().len());
    let (mut p, mut q, mut d) = (0.0, 0.0, 0.0);
    for m in &report.views {
        let name = &ds.records[m.view].image;
        let img = read_png(&report_dir.join(format!("{name}.png"))).unwrap();
        let gt = read_png(&data.join("images").join(format!("{name}.png"))).unwrap();
        let depth = read_pfm(&report_dir.join(format!("{name}_depth.pfm"))).unwrap();
        let mask: Vec<bool> = ds.opacities[m.view].data.iter().map(|&a| a > 0.5).collect();
        let rmse = depth_rmse(&depth.data, &ds.depths[m.view].data, &mask).unwrap();
        assert!((psnr(&img, &gt).unwrap() - m.psnr).abs() < 1e-9);
        assert!((ssim(&img, &gt).unwrap() - m.ssim).abs() < 1e-9);
        // depth maps go through f32 on disk
        assert!((rmse - m.depth_rmse.unwrap()).abs() < 1e-5);
        p += m.psnr;
        q += m.ssim;
        d += rmse;
    }
    let n = report.views.len() as f64;
    assert!((report.psnr - p / n).abs() < 1e-9);
    assert!((report.ssim - q / n).abs() < 1e-9);
    assert!((report.depth_rmse.unwrap() - d / n).abs() < 1e-5);
    // barely trained: finite and well below the cap
    assert!(report.psnr.is_finite() && report.psnr > 0.0 && report.psnr < 40.0);
}

#[test]
fn ablate_writes_a_five_row_table() {
    let (dir, data) = scratch();
    let base = dir.path().join("base.json");
    let doc = serde_json::json!({ "dataset": data, "out": dir.path(), "train": tiny_train() });
    std::fs::write(&base, doc.to_string()).unwrap();
    let out = dir.path().join("ablate");
    ok(&[
        "ablate", "--dataset", s(&data), "--out", s(&out), "--config", s(&base), "--iters", "6", "--threads", "1",
    ]);
    let rows: Vec<AblationRow> = serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["nerf", "hgg", "hsg", "hgg+hsg", "direct-depth"]);
    for r in &rows {
        assert!(r.psnr.is_finite() && r.ssim.is_finite() && r.depth_rmse.is_some());
    }
    let md = std::fs::read_to_string(out.join("ablation.md")).unwrap();
    assert!(md.starts_with("| run | psnr | ssim | depth_rmse |"));
    assert_eq!(md.lines().count(), 2 + 5);
    for sub in ["nerf", "hgg", "hsg", "hgg_hsg", "direct-depth"] {
        assert!(out.join(sub).join("config.json").exists() && out.join(sub).join("metrics.json").exists());
    }
}

#[test]
fn argument_and_input_errors() {
    assert_eq!(hg3(&["frobnicate"]).status.code(), Some(64));
    assert_eq!(hg3(&["gen"]).status.code(), Some(64));
    assert_eq!(hg3(&["train", "--config", "x.json", "--iters", "-3"]).status.code(), Some(64));
    assert_eq!(hg3(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(hg3(&["train", "--config", s(&missing)]).status.code(), Some(1));

    // unknown keys in a run config are rejected
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"dataset": "d", "out": "o", "train": {}, "extra": 1}"#).unwrap();
    let res = hg3(&["train", "--config", s(&bad)]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("extra"));
}

#[test]
fn shipped_toy_config_is_the_toy_preset() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.json");
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let train: TrainConfig = serde_json::from_value(doc["train"].clone()).unwrap();
    let want = TrainConfig {
        flags: hg3nerf::training::Flags {
            hgg: true,
            hsg: true,
            direct_depth_baseline: false,
        },
        ..TrainConfig::toy()
    };
    assert_eq!(train, want);
}
