use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use auvnet::baker::TexturedExport;
use auvnet::config::RunConfig;
use auvnet::networks::Category;

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn auvnet(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_auvnet"));
    cmd.args(args).env_remove("AUV_THREADS");
    if let Some(t) = threads {
        cmd.env("AUV_THREADS", t);
    }
    cmd.output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = auvnet(args, Some("1"));
    assert!(
        out.status.success(),
        "auvnet {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_run(dir: &Path, lr: f64) -> PathBuf {
    let mut run = RunConfig::for_category(Category::Head, 16, 8);
    run.epoch_scale = 0.01;
    run.points = 256;
    run.smooth_subset = 64;
    run.optim.lr = lr;
    let path = dir.join("head.json");
    std::fs::write(&path, serde_json::to_string_pretty(&run).unwrap()).unwrap();
    path
}

#[test]
fn config_errors_exit_with_2() {
    let dir = scratch("config");
    let bad = dir.join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&auvnet(&["train-toy", "--config", s(&bad)], None)), 2);
    assert_eq!(code(&auvnet(&["train", "--category", "spaceship"], None)), 2);

    let data = dir.join("data");
    ok(&["gen-data", "--kind", "heads", "--count", "1", "--resolution", "32", "--out", s(&data)]);
    let out = auvnet(&["preprocess", "--data", s(&data), "--out", s(&dir.join("pre"))], Some("zero"));
    assert_eq!(code(&out), 2);
}

#[test]
fn data_errors_exit_with_3() {
    let dir = scratch("data");
    let empty = dir.join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    assert_eq!(code(&auvnet(&["preprocess", "--data", s(&empty)], None)), 3);
    let missing = dir.join("missing.auvn");
    assert_eq!(code(&auvnet(&["render-basis", "--model", s(&missing)], None)), 3);
}

#[test]
fn diverging_training_exits_with_4() {
    let dir = scratch("numerical");
    let data = dir.join("data");
    let pre = dir.join("pre");
    ok(&["gen-data", "--kind", "heads", "--count", "2", "--resolution", "32", "--out", s(&data)]);
    ok(&["preprocess", "--data", s(&data), "--points", "512", "--resolution", "16", "--out", s(&pre)]);
    let cfg = tiny_run(&dir, 1e30);
    let out = auvnet(&["train", "--config", s(&cfg), "--data", s(&pre), "--out", s(&dir.join("run"))], Some("1"));
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pipeline_is_deterministic_and_transfer_swaps_textures() {
    let dir = scratch("pipeline");
    let data = dir.join("data");
    let pre = dir.join("pre");
    ok(&["gen-data", "--kind", "heads", "--count", "2", "--resolution", "64", "--seed", "3", "--out", s(&data)]);
    ok(&["preprocess", "--data", s(&data), "--points", "512", "--resolution", "16", "--out", s(&pre)]);
    let cfg = tiny_run(&dir, 1e-4);

    let (a, b) = (dir.join("run_a"), dir.join("run_b"));
    for out in [&a, &b] {
        ok(&["train", "--config", s(&cfg), "--seed", "7", "--data", s(&pre), "--out", s(out)]);
    }
    let ckpt_a = std::fs::read(a.join("model.auvn")).unwrap();
    assert_eq!(ckpt_a, std::fs::read(b.join("model.auvn")).unwrap());
    assert!(a.join("metrics.csv").exists());

    let model = a.join("model.auvn");
    let baked = dir.join("baked");
    for head in ["head_0000", "head_0001"] {
        let obj = data.join(format!("{head}.obj"));
        ok(&["bake", "--model", s(&model), "--shape", s(&obj), "--points", "2048", "--resolution", "32", "--out", s(&baked)]);
    }
    let ea = baked.join("head_0000.obj");
    let eb = baked.join("head_0001.obj");
    let swapped = dir.join("swapped");
    ok(&["transfer", "--a", s(&ea), "--b", s(&eb), "--out", s(&swapped)]);
    let t = TexturedExport::load(&swapped.join("head_0000_with_head_0001.obj")).unwrap();
    let (xa, xb) = (TexturedExport::load(&ea).unwrap(), TexturedExport::load(&eb).unwrap());
    assert_eq!(t.textures, xb.textures);
    assert_eq!(t.mesh.positions, xa.mesh.positions);
    assert_eq!(t.mesh.uvs, xa.mesh.uvs);

    let basis = dir.join("basis");
    ok(&["render-basis", "--model", s(&model), "--resolution", "8", "--out", s(&basis)]);
    let pngs = std::fs::read_dir(&basis).unwrap().count();
    assert_eq!(pngs, 64 + 16);
}
