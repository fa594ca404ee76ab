use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use zsugr::dataset::SplitSpec;

const TINY: &str = r#"
[dataset]
samples_per_class = 12

[provider.dims]
backbone_channels = 8
grid_h = 2
grid_w = 2
clip_tokens = 5
clip_channels = 8
semantic_dim = 8

[split]
n_splits = 2

[gcat]
encoder_blocks = 1
decoder_blocks = 1
heads = 2

[stage1]
epochs = 1

[gan]
iterations = 5
hidden_dim = 8
noise_dim = 4
n_syn_per_class = 10

[classifier]
epochs = 5
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_zsugr"))
            .args(["--preset", "desk", "--config"])
            .arg(self.dir.path().join("tiny.toml"))
            .arg("--outdir")
            .arg(self.out())
            .args(args)
            .env("ZSUGR_LOG", "warn")
            .output()
            .unwrap()
    }
}

fn split_json(out: &Path, i: usize) -> String {
    fs::read_to_string(out.join(i.to_string()).join("split").join("split.json")).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn split_is_reproducible() {
    let ws = Workspace::new();
    let o = ws.run(&["split"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let first: Vec<String> = (0..2).map(|i| split_json(&ws.out(), i)).collect();
    fs::remove_dir_all(ws.out()).unwrap();
    assert!(ws.run(&["split"]).status.success());
    let second: Vec<String> = (0..2).map(|i| split_json(&ws.out(), i)).collect();
    assert_eq!(first, second);
    let s = SplitSpec::from_json(&first[0]).unwrap();
    assert_eq!((s.seen_classes.len(), s.unseen_classes.len()), (10, 6));
}

#[test]
fn class_counts_are_configurable() {
    let ws = Workspace::new();
    let o = ws.run(&["--n-seen", "12", "--n-unseen", "4", "split"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = SplitSpec::from_json(&split_json(&ws.out(), 1)).unwrap();
    assert_eq!((s.seen_classes.len(), s.unseen_classes.len()), (12, 4));
}

#[test]
fn config_errors_exit_with_2() {
    let ws = Workspace::new();
    let o = ws.run(&["--n-seen", "12", "--n-unseen", "5", "split"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert_eq!(ws.run(&["--ablate", "encoder=off", "split"]).status.code(), Some(2));
    assert_eq!(ws.run(&["--gate-activation", "tanh", "split"]).status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_zsugr"))
        .args(["--preset", "desk", "show-config"])
        .env("ZSUGR_GAN_NOT_A_KEY", "1")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_upstream_exits_with_3() {
    let ws = Workspace::new();
    let o = ws.run(&["train-gcat", "--split", "0"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("split"), "{}", stderr(&o));
}

#[test]
fn ablation_flags_reach_the_config() {
    let o = Command::new(env!("CARGO_BIN_EXE_zsugr"))
        .args(["--preset", "desk", "--ablate", "decoder=off", "--gate-activation", "sigmoid", "show-config"])
        .output()
        .unwrap();
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("variant = \"encoder-only\""), "{text}");
    assert!(text.contains("gate_activation = \"sigmoid\""), "{text}");
}

#[test]
fn run_all_and_visualize() {
    let ws = Workspace::new();
    let o = ws.run(&["--gate-activation", "sigmoid", "run-all"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("mean"), "{table}");
    let gcat = fs::read_to_string(ws.out().join("0").join("gcat").join("gcat.json")).unwrap();
    assert!(gcat.contains("\"sigmoid\""));
    assert!(ws.out().join("aggregate").join("aggregate.json").is_file());

    let o = ws.run(&["--gate-activation", "sigmoid", "visualize", "--split", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let listed = String::from_utf8(o.stdout).unwrap();
    assert_eq!(listed.lines().count(), 6);
    assert!(listed.lines().all(|l| l.ends_with(".png") && Path::new(l).is_file()));

    // Switching the activation without --force mixes lineages at eval time.
    let o = ws.run(&["eval"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}
