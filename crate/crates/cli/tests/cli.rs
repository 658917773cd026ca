use std::path::Path;
use std::process::Command;

const CONFIG: &str = "
model.depth = 2
model.hidden = 16
model.head_count = 4
head.depth = 1
spec.height = 2
spec.width = 2
spec.vocab = 3
data.train_count = 100
data.heldout_count = 10
train.batch_size = 8
train.steps = 5
optim.warmup = 0
eval.queries = 10
eval.heldout = 10
eval.generations = 5
eval.order_pairs = 5
sample.count = 2
viz.count = 1
";

fn run(dir: &Path, command: &str, config: &str, extra: &[&str]) -> (i32, String) {
    let path = dir.join(format!("{command}.cfg"));
    std::fs::write(&path, config).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gridlm"))
        .arg(command)
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.join("out"))
        .args(extra)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    let text = format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    (out.status.code().unwrap(), text)
}

#[test]
fn every_command_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    for command in ["train", "sample", "eval", "viz"] {
        let extra: &[&str] = if command == "train" { &[] } else { &["--seed", "1"] };
        let (code, text) = run(dir.path(), command, CONFIG, extra);
        assert_eq!(code, 0, "{command}: {text}");
    }
    let ablate = format!("{CONFIG}ablate.cells = objective.n=1 | objective.n=2\n");
    let (code, text) = run(dir.path(), "ablate", &ablate, &[]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("2 cells (0 failed)"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = run(dir.path(), "train", &format!("{CONFIG}model.colour = red\n"), &[]);
    assert_eq!(code, 2);
    assert!(text.contains("model.colour"));
    assert_eq!(run(dir.path(), "train", CONFIG, &[]).0, 0);
    let (code, text) = run(dir.path(), "sample", &format!("{CONFIG}sample.class = 4\n"), &[]);
    assert_eq!(code, 2, "{text}");
    let hash_dir = std::fs::read_dir(dir.path().join("out")).unwrap().flatten().next().unwrap().path();
    let ckpt = hash_dir.join("train/final.ckpt");
    let foreign = format!("{CONFIG}model.seed = 9\neval.checkpoint = {}\n", ckpt.display());
    assert_eq!(run(dir.path(), "eval", &foreign, &[]).0, 2);
    assert_eq!(run(dir.path(), "eval", &foreign, &["--force"]).0, 0);
}

#[test]
fn numeric_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = run(dir.path(), "train", &format!("{CONFIG}optim.lr = 1e300\noptim.clip = 0\n"), &[]);
    assert_eq!(code, 3, "{text}");
    let ckpt = std::fs::read_dir(dir.path().join("out")).unwrap().flatten().next().unwrap().path().join("train/last_good.ckpt");
    assert!(ckpt.exists());
}
