//! End-to-end command tests: exit codes, file formats, determinism.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_regionmeta"))
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("regionmeta-cli-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

const SMALL_CFG: &str = "\
seed = 5
dataset.regions = 6
dataset.classes = 3
dataset.tiles_per_region = 40
dataset.sigma = 1.0
dataset.image_size = 8
dataset.channels = 3
dataset.min_class_fraction = 0.2
model.depth = 3
model.width = 4
train.alpha = 0.3
train.beta = 0.05
train.k = 2
train.n = 3
train.iterations = 12
eval.shots = 0,1
eval.tasks = 6
eval.query_per_class = 3
eval.grid_tasks = 3
eval.grid_alphas = 0.05,0.3
eval.grid_steps = 1,2
analysis.tasks = 12
analysis.slice_points = 8
analysis.slice_query_tasks = 2
";

fn write_cfg(dir: &Path) -> PathBuf {
    let path = dir.join("exp.cfg");
    fs::write(&path, SMALL_CFG).unwrap();
    path
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().to_string();
                files.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn generate_is_deterministic_and_counted() {
    let dir = workdir("generate");
    let cfg = write_cfg(&dir);
    for out_name in ["g1", "g2"] {
        let out = run(bin()
            .args(["generate", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.join(out_name)));
        assert_ok(&out);
    }
    assert_eq!(
        dir_bytes(&dir.join("g1")),
        dir_bytes(&dir.join("g2")),
        "regeneration must be byte-identical"
    );

    let index = fs::read_to_string(dir.join("g1/dataset/index.tsv")).unwrap();
    let records = index.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(records, 6 * 40);

    let manifest = fs::read_to_string(dir.join("g1/dataset/manifest.txt")).unwrap();
    assert!(manifest.contains("generator.sigma = 1"), "{manifest}");
    assert!(manifest.contains("generator.seed = 5"), "{manifest}");
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn train_writes_provenance_and_reproduces() {
    let dir = workdir("train");
    let cfg = write_cfg(&dir);
    for out_name in ["t1", "t2"] {
        for mode in ["pretrain", "maml"] {
            let out = run(bin()
                .args(["train", "--mode", mode, "--config"])
                .arg(&cfg)
                .arg("--out")
                .arg(dir.join(out_name)));
            assert_ok(&out);
        }
    }
    // provenance byte sits after magic (8) and version (4)
    let pre = fs::read(dir.join("t1/pretrain.ckpt")).unwrap();
    assert_eq!(pre[12], 1);
    let maml = fs::read(dir.join("t1/maml.ckpt")).unwrap();
    assert_eq!(maml[12], 2);
    let random = fs::read(dir.join("t1/random.ckpt")).unwrap();
    assert_eq!(random[12], 0);

    assert_eq!(pre, fs::read(dir.join("t2/pretrain.ckpt")).unwrap());
    assert_eq!(maml, fs::read(dir.join("t2/maml.ckpt")).unwrap());

    let loss = fs::read_to_string(dir.join("t1/loss_maml.csv")).unwrap();
    assert_eq!(loss.lines().count(), 12 + 1, "header plus one row per iteration");
    assert!(loss.starts_with("iteration,loss\n"));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn evaluate_is_repeatable_and_covers_shots() {
    let dir = workdir("evaluate");
    let cfg = write_cfg(&dir);
    assert_ok(&run(bin()
        .args(["train", "--mode", "maml", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("run"))));
    for _ in 0..2 {
        let out = run(bin()
            .args(["evaluate", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.join("run"))
            .arg(dir.join("run/maml.ckpt"))
            .arg(dir.join("run/random.ckpt")));
        assert_ok(&out);
    }
    let metrics = fs::read_to_string(dir.join("run/metrics_maml.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2 + 1, "header plus 2 shots");
    assert!(metrics.starts_with(
        "shot,seed,tasks,accuracy_mean,accuracy_std,kappa_mean,kappa_std,miou_mean,miou_std,query_loss_mean\n"
    ));
    // second run rewrote the same bytes
    let again = fs::read_to_string(dir.join("run/metrics_maml.csv")).unwrap();
    assert_eq!(metrics, again);
    assert!(dir.join("run/metrics_random.csv").exists());
    assert!(dir.join("run/metrics_maml_pooled.csv").exists());
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn analyze_outputs_have_required_rows() {
    let dir = workdir("analyze");
    let cfg = write_cfg(&dir);
    assert_ok(&run(bin()
        .args(["train", "--mode", "maml", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("run"))));

    let out = run(bin()
        .args(["analyze", "weight-pca", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("run"))
        .arg(dir.join("run/maml.ckpt")));
    assert_ok(&out);
    let pca = fs::read_to_string(dir.join("run/weight_pca.csv")).unwrap();
    assert!(pca.starts_with("kind,region_id,task_id,pc1,pc2\n"));
    let theta_rows = pca.lines().filter(|l| l.starts_with("theta,")).count();
    assert_eq!(theta_rows, 1, "exactly one theta row");
    assert_eq!(pca.lines().filter(|l| l.starts_with("adapted,")).count(), 12);

    let out = run(bin()
        .args(["analyze", "loss-slice", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("run"))
        .arg(dir.join("run/maml.ckpt")));
    assert_ok(&out);
    let slice = fs::read_to_string(dir.join("run/loss_slice.csv")).unwrap();
    assert!(slice.starts_with("alpha,query_task_id,loss\n"));
    let zero_rows = slice
        .lines()
        .filter(|l| l.starts_with("0.000000,"))
        .count();
    assert_eq!(zero_rows, 2, "one α=0 row per query task");
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn exit_codes_follow_failure_classes() {
    let dir = workdir("codes");
    let cfg = write_cfg(&dir);

    // usage errors: 2
    let out = run(bin().arg("frobnicate"));
    assert_eq!(out.status.code(), Some(2));
    let out = run(bin()
        .args(["analyze", "foo", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("x"))
        .arg("whatever.ckpt"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    // unknown config key: 2
    let bad = dir.join("bad.cfg");
    fs::write(&bad, "dataset.sgima = 2\n").unwrap();
    let out = run(bin().args(["generate", "--config"]).arg(&bad).arg("--out").arg(dir.join("y")));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config key"));

    // missing checkpoint: 4
    let out = run(bin()
        .args(["evaluate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("z"))
        .arg(dir.join("absent.ckpt")));
    assert_eq!(out.status.code(), Some(4));

    // numerical divergence: 3
    let diverge = dir.join("diverge.cfg");
    fs::write(
        &diverge,
        SMALL_CFG.replace("train.alpha = 0.3", "train.alpha = 1000000000.0"),
    )
    .unwrap();
    let out = run(bin()
        .args(["train", "--mode", "pretrain", "--config"])
        .arg(&diverge)
        .arg("--out")
        .arg(dir.join("w")));
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    fs::remove_dir_all(&dir).unwrap();
}
