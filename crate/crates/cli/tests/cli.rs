use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5
dataset.root = "data"

[training]
n_samples = 200
theta0 = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0001]

[training.forest]
n_trees = 4

[training.lbp]
max_iters = 10

[training.powell]
max_iters = 1
line_evals = 4

[synth]
scenes = 12

[synth.recipe]
width = 32
height = 32
"#;

fn tcrf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcrf"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), TINY).unwrap();
    ok(tcrf(dir.path(), &["synth", "--config", "exp.toml", "--out", "data"]));
    dir
}

#[test]
fn synth_train_infer_eval() {
    let dir = setup();
    let d = dir.path();
    assert!(d.join("data/manifest.toml").is_file());

    let train = ok(tcrf(d, &["train", "--config", "exp.toml", "--out", "run"]));
    assert!(train.contains("tcrf model: 6 train / 1 tune / 5 test scenes"), "{train}");
    assert!(train.contains("theta = ["));
    let trace = std::fs::read_to_string(d.join("run/trace.csv")).unwrap();
    assert!(trace.lines().count() >= 2);

    let infer = ok(tcrf(d, &["infer", "--config", "exp.toml", "--model", "run/model.tcrf", "--out", "maps"]));
    assert!(infer.contains("overall on 5 labeled scenes"), "{infer}");
    let first = infer.lines().next().unwrap().split(':').next().unwrap().to_string();
    for f in ["base.png", "occlusion.png", "base_color.png", "occlusion_color.png"] {
        assert!(d.join("maps").join(&first).join(f).is_file(), "{f}");
    }
    let img = image::open(d.join("maps").join(&first).join("base.png")).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));

    let eval = ok(tcrf(d, &["eval", "--config", "exp.toml", "--model", "run/model.tcrf", "--out", "run"]));
    assert!(eval.contains("base confusion"), "{eval}");
    let csv = std::fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert!(csv.starts_with("layer,class,completeness,correctness\n"));
    assert_eq!(csv.lines().filter(|l| l.contains(",OA,")).count(), 2);
    assert_eq!(csv.lines().count(), 1 + 4 + 1 + 3 + 1);
}

#[test]
fn reruns_are_byte_identical_and_modes_compare() {
    let dir = setup();
    let d = dir.path();
    ok(tcrf(d, &["train", "--config", "exp.toml", "--out", "a"]));
    ok(tcrf(d, &["train", "--config", "exp.toml", "--out", "b"]));
    assert_eq!(std::fs::read(d.join("a/model.tcrf")).unwrap(), std::fs::read(d.join("b/model.tcrf")).unwrap());
    ok(tcrf(d, &["eval", "--config", "exp.toml", "--model", "a/model.tcrf", "--out", "a"]));
    ok(tcrf(d, &["eval", "--config", "exp.toml", "--model", "b/model.tcrf", "--out", "b"]));
    assert_eq!(std::fs::read(d.join("a/metrics.csv")).unwrap(), std::fs::read(d.join("b/metrics.csv")).unwrap());

    let crf = ok(tcrf(d, &["train", "--config", "exp.toml", "--mode", "crf", "--out", "c"]));
    assert!(crf.starts_with("independent-crf model"), "{crf}");
    assert!(crf.contains(", 0.0000, "), "inter-level weight pinned: {crf}");
    let cmp = ok(tcrf(
        d,
        &["eval", "--config", "exp.toml", "--model", "c/model.tcrf", "--compare", "a/model.tcrf", "--out", "cmp"],
    ));
    assert!(cmp.contains("OA delta (second - first)"), "{cmp}");
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let code = |out: Output| out.status.code().unwrap();

    // unknown flag
    assert_eq!(code(tcrf(d, &["train", "--bogus"])), 1);
    assert_eq!(code(tcrf(d, &["--help"])), 0);
    // invalid config value
    std::fs::write(d.join("bad.toml"), "site_size = 0\n").unwrap();
    assert_eq!(code(tcrf(d, &["train", "--config", "bad.toml"])), 1);
    // no dataset
    assert_eq!(code(tcrf(d, &["train", "--dataset", "nowhere"])), 1);
    // unreadable model container
    std::fs::write(d.join("junk.tcrf"), b"not a model").unwrap();
    std::fs::write(d.join("exp.toml"), TINY).unwrap();
    ok(tcrf(d, &["synth", "--config", "exp.toml", "--out", "data"]));
    assert_eq!(code(tcrf(d, &["infer", "--config", "exp.toml", "--model", "junk.tcrf"])), 2);
    // missing channel in a scene
    std::fs::remove_file(d.join("data/scenes").join(first_scene(d)).join("channels/dsm.grid")).unwrap();
    let missing = tcrf(d, &["train", "--config", "exp.toml", "--out", "run"]);
    assert_eq!(code(missing), 2);
}

fn first_scene(d: &Path) -> String {
    let mut ids: Vec<String> = std::fs::read_dir(d.join("data/scenes"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    ids.sort();
    ids.remove(0)
}
