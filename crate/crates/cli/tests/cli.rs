use std::path::Path;
use std::process::{Command, Output};

fn fusedopt(args: &[&str], out_env: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fusedopt"));
    cmd.args(args).env_remove("FUSEDOPT_OUT");
    if let Some(d) = out_env {
        cmd.env("FUSEDOPT_OUT", d);
    }
    cmd.output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const TINY_LM: &str = "experiment = \"train_lm\"\nsteps = 4\nbatch_size = 2\neval_interval = 2\n\
                       [model]\nd_model = 8\nlayers = 1\ncontext = 8\n[data]\ntokens = 1000\nval_fraction = 0.1\n";

#[test]
fn run_writes_into_out_dir_and_honours_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "lm.toml", TINY_LM);
    let out = dir.path().join("out");
    let o = fusedopt(&["run", &cfg, "--seed", "5", "--out", out.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("seed=5"));
    let summary = std::fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(summary.contains("\"seed\": 5"));
    let steps = std::fs::read_to_string(out.join("steps_adalomo.csv")).unwrap();
    assert!(steps.starts_with("step,alpha,train_loss,backward_passes\n"));
    assert_eq!(steps.lines().count(), 5);
    assert!(!steps.contains('\r'));
}

#[test]
fn default_out_dir_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "traj.toml", "experiment = \"trajectory2d\"\nsteps = 10\n");
    let root = dir.path().join("env_out");
    let o = fusedopt(&["run", &cfg], Some(&root));
    assert!(o.status.success());
    for m in ["sgd", "momentum", "adam", "variance"] {
        assert!(root.join("trajectory2d").join(format!("traj_{m}.csv")).is_file());
    }
}

#[test]
fn parallel_seeds_get_separate_directories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "lm.toml", TINY_LM);
    let out = dir.path().join("par");
    let o = fusedopt(&["run", &cfg, "--out", out.to_str().unwrap(), "--parallel", "2"], None);
    assert!(o.status.success());
    assert!(out.join("seed_0/eval_adalomo.csv").is_file());
    assert!(out.join("seed_1/eval_adalomo.csv").is_file());
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.toml", "experiment = \"train_lm\"\nsteps = \"many\"\n");
    let o = fusedopt(&["run", &bad, "--out", dir.path().to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("steps"));
    let o = fusedopt(&["run", "/nonexistent/config.toml"], None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn empty_corpus_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "empty.txt", "");
    let cfg = write(
        dir.path(),
        "file.toml",
        "experiment = \"train_lm\"\nsteps = 1\n[data]\nsource = \"file\"\npath = \"empty.txt\"\n",
    );
    let o = fusedopt(&["run", &cfg, "--out", dir.path().join("o").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn divergence_exits_3_naming_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "blowup.toml",
        "experiment = \"train_mlp\"\nsteps = 200\n[model]\nwidths = [4, 16, 1]\ninit_std = 1.0\n\
         [optimizer]\nmethods = [\"sgd\"]\nalpha = 1e6\n",
    );
    let o = fusedopt(&["run", &cfg, "--out", dir.path().join("o").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("at step"));
}

#[test]
fn estimate_prints_key_value_report() {
    let o = fusedopt(&["estimate", "--method", "adamw", "--params", "7b"], None);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("total_bytes: 112000000000"));
    assert!(text.contains("total_per_m: 16.000000"));

    let o = fusedopt(&["estimate", "--method", "lora", "--params", "1000", "--adapter", "10"], None);
    assert!(String::from_utf8_lossy(&o.stdout).contains("total_bytes: 2140"));

    let o = fusedopt(&["estimate", "--method", "adalomo", "--llama7b"], None);
    assert!(String::from_utf8_lossy(&o.stdout).contains("total_per_m: 2.00"));

    let o = fusedopt(&["estimate", "--method", "rmsprop", "--params", "10"], None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn compare_gradnorm_reports_pass_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "gn.toml",
        "experiment = \"gradnorm_compare\"\nsteps = 3\nbatch_size = 2\n[optimizer]\nmethods = [\"lomo\"]\n\
         [model]\nd_model = 8\nlayers = 1\ncontext = 8\n[data]\ntokens = 1000\nval_fraction = 0.1\n",
    );
    let o = fusedopt(&["compare-gradnorm", &cfg, "--out", dir.path().join("o").to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    let passes = |label: &str| {
        text.lines()
            .map(|l| l.split_whitespace().collect::<Vec<_>>())
            .find(|t| t.len() == 5 && t[0] == label)
            .map(|t| t[1].to_string())
    };
    assert_eq!(passes("lomo_clip").as_deref(), Some("6"));
    assert_eq!(passes("lomo_noclip").as_deref(), Some("3"));
    assert!(text.contains("eval_loss_rel_diff"));

    let lm = write(dir.path(), "lm.toml", TINY_LM);
    let o = fusedopt(&["compare-gradnorm", &lm], None);
    assert_eq!(o.status.code(), Some(2));
}
