//! End-to-end checks of the `promptlab` binary: flag handling, file IO,
//! exit codes, and report structure.

use std::path::Path;
use std::process::{Command, Output};

fn promptlab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_promptlab"))
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY_CONFIG: &str = r#"
protocol = "plain"
seeds = [0]

[model]
num_layers = 2
num_heads = 2
d_t = 8
d_v = 12
d_joint = 8
mlp_ratio = 2
image_height = 8
image_width = 8
vocab_size = 32
max_seq_len = 8
template_tokens = [1, 2]

[schedule]
kind = "mpl"
add = 2
remove = 1
depth = 2

[train]
shots = 2
epochs = 1
batch_size_train = 4
batch_size_eval = 16

[data]
source = "synthetic"
classes = 2
per_class = 4
height = 8
width = 8
cell = 4
"#;

#[test]
fn profile_prints_table_and_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let sched = dir.path().join("sched.toml");
    write(&sched, "kind = \"deep_vpt\"\nadd = 16\n");
    let out_path = dir.path().join("profile.json");
    let out = promptlab()
        .args(["profile"])
        .arg(&sched)
        .args(["--patches", "196", "--layers", "12"])
        .arg("--out")
        .arg(&out_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("213"), "every layer should run 16+196+1 rows:\n{text}");

    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    let layers = json["per_layer"].as_array().unwrap();
    assert_eq!(layers.len(), 12);
    assert!(layers.iter().all(|l| l["context_len"] == 213));
}

#[test]
fn profile_without_layer_count_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let sched = dir.path().join("sched.toml");
    write(&sched, "kind = \"plain\"\n");
    let out = promptlab()
        .args(["profile"])
        .arg(&sched)
        .args(["--patches", "16"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("--layers"));
}

#[test]
fn run_writes_report_and_prints_summary() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    write(&config, TINY_CONFIG);
    let report_path = dir.path().join("report.json");
    let out = promptlab()
        .args(["run"])
        .arg(&config)
        .arg("--out")
        .arg(&report_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("heldout"));

    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(json["per_seed"].as_array().unwrap().len(), 1);
    assert!(json["per_seed"][0]["heldout"]["accuracy"].is_number());
    assert!(json["versions"]["report_schema"].is_number());
}

#[test]
fn seed_flag_overrides_the_config_seed_list() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    write(&config, &TINY_CONFIG.replace("seeds = [0]", "seeds = [0, 1, 2]"));
    let report_path = dir.path().join("report.json");
    let out = promptlab()
        .args(["run"])
        .arg(&config)
        .args(["--seed", "7"])
        .arg("--out")
        .arg(&report_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    let seeds = json["per_seed"].as_array().unwrap();
    assert_eq!(seeds.len(), 1);
    assert_eq!(seeds[0]["seed"], 7);
}

#[test]
fn default_output_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("reports");
    std::fs::create_dir_all(&out_dir).unwrap();
    let config = dir.path().join("exp.toml");
    write(&config, TINY_CONFIG);
    let out = promptlab()
        .args(["run"])
        .arg(&config)
        .env("PROMPTLAB_OUT_DIR", &out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(out_dir.join("report.json").exists());
}

#[test]
fn malformed_config_exits_2_and_names_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    write(&config, "[model]\nnum_layors = 6\n");
    let out = promptlab().args(["run"]).arg(&config).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("num_layors"), "stderr: {}", stderr(&out));
}

#[test]
fn missing_config_file_exits_4() {
    let out = promptlab()
        .args(["run", "/definitely/not/here.toml"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn invalid_schedule_is_rejected_with_the_violated_rule() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    write(
        &config,
        &TINY_CONFIG.replace(
            "kind = \"mpl\"\nadd = 2\nremove = 1\ndepth = 2",
            "kind = \"explicit\"\nlayers = [{ add = 1, remove = 2 }, { add = 0 }]",
        ),
    );
    let out = promptlab().args(["run"]).arg(&config).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(
        stderr(&out).contains("removal draws only from the block added at the same layer"),
        "stderr: {}",
        stderr(&out)
    );
}

#[test]
fn gradcheck_passes_and_reports_max_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    write(&config, TINY_CONFIG);
    let out_path = dir.path().join("gradcheck.json");
    let out = promptlab()
        .args(["gradcheck"])
        .arg(&config)
        .arg("--out")
        .arg(&out_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("PASS"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(json["pass"], true);
    assert!(json["max_rel_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn run_on_a_saved_dataset_directory_round_trips() {
    use promptlab_cli::dataset_store::save_dataset;
    use promptlab_core::data::{make_synthetic_dataset, SyntheticSpec};

    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("ds");
    let dataset = make_synthetic_dataset(&SyntheticSpec {
        classes: 2,
        per_class: 4,
        noise: 0.05,
        height: 8,
        width: 8,
        cell: 4,
        ..SyntheticSpec::default()
    })
    .unwrap();
    save_dataset(&data_dir, &dataset).unwrap();

    let config = dir.path().join("exp.toml");
    let text = TINY_CONFIG.replace(
        "source = \"synthetic\"\nclasses = 2\nper_class = 4\nheight = 8\nwidth = 8\ncell = 4",
        "source = \"dir\"\npath = \"ds\"",
    );
    write(&config, &text);
    let report_path = dir.path().join("report.json");
    let out = promptlab()
        .args(["run"])
        .arg(&config)
        .arg("--out")
        .arg(&report_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
}
