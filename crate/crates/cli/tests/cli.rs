use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const CONFIG: &str = r#"
seed = 3
deterministic = true

[dataset]
name = "synthetic"

[dataset.synthetic]
n = 400
dim = 8
clusters = 4
separation = 6.0

[arch]
latent_dims = [2]
max_depth = 3
bottom_up_width = 16
transform_width = 8
router_width = 8
encoder_hidden = [16]
decoder_hidden = [16]
likelihood = "gaussian"

[growth]
epochs_per_step = 4
final_epochs = 4
max_leaves = 3
batch_size = 64

[evaluation]
samples = 2
iw_samples = 5
iw_chunk = 5
"#;

fn treevae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_treevae"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn train(dir: &Path) -> Output {
    let cfg = write_config(dir, CONFIG);
    let out = dir.join("run");
    treevae(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
}

/// One trained run shared by the read-only tests.
fn shared_run() -> &'static Path {
    static RUN: OnceLock<tempfile::TempDir> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let o = train(dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
        dir
    })
    .path()
}

fn ckpt() -> String {
    shared_run().join("run/final_checkpoint").to_string_lossy().into_owned()
}

#[test]
fn train_writes_run_directory() {
    let run = shared_run().join("run");
    for f in [
        "final_checkpoint",
        "metrics.csv",
        "topology.json",
        "config.toml",
        "loss.csv",
        "occupancy.json",
    ] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    assert!(run.join("snapshots/00_root.json").is_file());
    assert!(std::fs::read_dir(run.join("checkpoints")).unwrap().count() >= 2);
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("dataset,seed,DP,LP,ACC,NMI,LL,RL,ELBO\nsynthetic,3,"));
}

#[test]
fn effective_config_round_trips() {
    let run = shared_run().join("run");
    let text = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(text.contains("epochs_per_step = 4"));
    let dir = tempfile::tempdir().unwrap();
    let o = treevae(&[
        "train",
        "--config",
        run.join("config.toml").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(run.join("metrics.csv")).unwrap(),
        std::fs::read(dir.path().join("metrics.csv")).unwrap()
    );
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train(dir.path()).status.success());
    let a = std::fs::read(shared_run().join("run/metrics.csv")).unwrap();
    let b = std::fs::read(dir.path().join("run/metrics.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unknown_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("learning_speed = 3\n{CONFIG}"));
    let o = treevae(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_speed"));
}

#[test]
fn invalid_value_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &CONFIG.replace("max_leaves = 3", "max_leaves = 1"));
    let o = treevae(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("[dataset]\nname = \"mnist\"\nroot = {:?}\n", dir.path().join("nothing")),
    );
    let o = treevae(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn eval_reproduces_training_metrics() {
    let o = treevae(&["eval", "--checkpoint", &ckpt()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let logged = std::fs::read_to_string(shared_run().join("run/metrics.csv")).unwrap();
    assert_eq!(String::from_utf8(o.stdout).unwrap(), logged);
}

#[test]
fn eval_with_single_importance_sample() {
    let o = treevae(&["eval", "--checkpoint", &ckpt(), "--k", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let ll: f64 = text.lines().nth(1).unwrap().split(',').nth(6).unwrap().parse().unwrap();
    assert!(ll.is_finite());
}

#[test]
fn eval_shape_mismatch_names_both_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &CONFIG.replace("dim = 8", "dim = 5"));
    let o = treevae(&["eval", "--checkpoint", &ckpt(), "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let e = stderr(&o);
    assert!(e.contains("[5]") && e.contains("[8]"), "{e}");
}

#[test]
fn corrupt_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("broken.ckpt");
    let bytes = std::fs::read(ckpt()).unwrap();
    std::fs::write(&bad, &bytes[..bytes.len() / 3]).unwrap();
    let cfg = shared_run().join("config.toml");
    let o = treevae(&[
        "eval",
        "--checkpoint",
        bad.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checkpoint"));
}

#[test]
fn generate_vectors_as_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = treevae(&[
        "generate",
        "--checkpoint",
        &ckpt(),
        "--mode",
        "unconditional",
        "--n",
        "5",
        "--out",
        out,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("unconditional.csv")).unwrap();
    let leaves = 3;
    assert_eq!(text.lines().count(), 1 + 5 * leaves);
    assert_eq!(text.lines().next().unwrap().split(',').count(), 2 + 8);

    let o = treevae(&[
        "generate",
        "--checkpoint",
        &ckpt(),
        "--mode",
        "conditional",
        "--n",
        "4",
        "--out",
        out,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read_to_string(dir.path().join("conditional.csv"))
            .unwrap()
            .lines()
            .count(),
        5
    );

    let o = treevae(&[
        "generate",
        "--checkpoint",
        &ckpt(),
        "--mode",
        "reconstruct",
        "--n",
        "3",
        "--out",
        out,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("reconstruct.csv")).unwrap();
    assert_eq!(text.lines().filter(|l| l.contains(",input,")).count(), 3);
    assert_eq!(text.lines().filter(|l| l.contains(",reconstruction,")).count(), 3);
}

#[test]
fn generate_mode_typo_lists_modes() {
    let o = treevae(&["generate", "--checkpoint", &ckpt(), "--mode", "uncondtional"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("conditional") && e.contains("unconditional") && e.contains("reconstruct"));
}

#[test]
fn export_json_and_dot() {
    let o = treevae(&["export-tree", "--checkpoint", &ckpt(), "--format", "json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("\"leaves\"") && text.contains("\"representatives\""));

    let o = treevae(&["export-tree", "--checkpoint", &ckpt(), "--format", "dot"]);
    assert!(o.status.success());
    let dot = String::from_utf8(o.stdout).unwrap();
    assert!(dot.starts_with("digraph"));
    let nodes = dot.lines().filter(|l| l.contains("[label=")).count();
    let edges = dot.lines().filter(|l| l.contains("->")).count();
    assert_eq!(nodes, 5);
    assert_eq!(edges, nodes - 1);
}

#[test]
fn checkpoint_without_config_needs_a_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let lone = dir.path().join("model.ckpt");
    std::fs::copy(ckpt(), &lone).unwrap();
    let o = treevae(&["export-tree", "--checkpoint", lone.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = treevae(&[
        "generate",
        "--checkpoint",
        lone.to_str().unwrap(),
        "--mode",
        "conditional",
        "--n",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}
