use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gazelab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gazelab"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("GAZELAB_OUT")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"
name = "tiny"
seeds = [1, 2]
steps = 3
batch_size = 8

[data]
train_pairs = 60
heldout_pairs = 20
eval_prompts = 8
candidates_per_prompt = 4

[policy]
d_model = 16
max_len = 16

[reward]
epochs = 1

[reward.dims]
d_model = 16
n_blocks = 1
max_len = 16

[convergence]
window = 2
"#;

fn tiny_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, format!("{extra}\n{TINY}")).unwrap();
    p
}

#[test]
fn dry_run_prints_the_resolved_plan_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let o = gazelab(&["run", "--config", cfg.to_str().unwrap(), "--dry-run"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("run 'tiny': ppo with sparse reward"), "{out}");
    // every default is listed
    for key in ["[ppo]", "center_scores", "[grpo]", "group_size", "[convergence]", "fraction"] {
        assert!(out.contains(key), "{key} missing:\n{out}");
    }
    assert!(!tmp.path().join("runs").exists());
}

#[test]
fn invalid_configs_exit_non_zero_with_field_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "gaze_mode = \"add\"");
    let o = gazelab(&["validate-config", cfg.to_str().unwrap()], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("gaze_mode"), "{}", stderr(&o));

    let cfg = tiny_config(tmp.path(), "");
    let o = gazelab(&["validate-config", cfg.to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = gazelab(
        &["validate-config", cfg.to_str().unwrap(), "--set", "scheme=gaze_rm", "--set", "eval_every=0"],
        tmp.path(),
    );
    let err = stderr(&o);
    assert!(!o.status.success());
    assert!(err.contains("gaze_mode") && err.contains("eval_every"), "{err}");

    fs::write(tmp.path().join("bad.toml"), "steps = \"many\"\n").unwrap();
    let o = gazelab(&["validate-config", "bad.toml"], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("bad.toml"), "{}", stderr(&o));
}

#[test]
fn run_compare_and_export() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let cfg = cfg.to_str().unwrap();
    let o = gazelab(&["run", "--config", cfg, "--out", "out"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = gazelab(
        &["run", "--config", cfg, "--out", "out", "--set", "name=distrib", "--set", "scheme=gaze_distrib"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let run = tmp.path().join("out/tiny");
    for f in ["metrics.jsonl", "report.csv", "report.txt", "config.resolved.toml", "seed-1/best_policy.grlf"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let o = gazelab(&["compare", "out/tiny", "out/distrib", "--csv", "merged.csv"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.contains("sparse") && table.contains("gaze_distrib"), "{table}");
    assert_eq!(fs::read_to_string(tmp.path().join("merged.csv")).unwrap().lines().count(), 3);

    let o = gazelab(&["compare", "out/tiny"], tmp.path());
    assert!(o.status.success());
    let own = stdout(&o);
    // a baseline that never converged has no defined speedup, even against itself
    assert!(own.contains("1.00x") || own.contains("n/a"), "{own}");
    assert_eq!(own.lines().count(), 2);
    let o = gazelab(&["compare", "out/distrib"], tmp.path());
    assert!(!o.status.success());
    let o = gazelab(&["compare", "out/nowhere"], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("report.csv"), "{}", stderr(&o));

    let o = gazelab(&["export-curves", "out/tiny", "--normalize"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(run.join("curves/validation_score.csv")).unwrap();
    assert!(csv.starts_with("step,seed,scheme,value\n"));
    let o = gazelab(&["export-curves", "out/tiny", "--out", "raw"], tmp.path());
    assert!(o.status.success());
    let raw = fs::read_to_string(tmp.path().join("raw/train_reward.csv")).unwrap();
    // steps 1..=3 for two seeds
    assert_eq!(raw.lines().count(), 1 + 3 * 2);
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "seeds = [9]\n");
    let cfg = fs::read_to_string(&cfg).unwrap().replace("seeds = [1, 2]\n", "");
    fs::write(tmp.path().join("one.toml"), cfg).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_gazelab"))
        .args(["run", "--config", "one.toml"])
        .current_dir(tmp.path())
        .env("GAZELAB_OUT", tmp.path().join("envroot"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("single seed"));
    assert!(tmp.path().join("envroot/tiny/seed-9/metrics.jsonl").exists());
}

#[test]
fn gaze_report_reads_a_corpus_file() {
    let tmp = tempfile::tempdir().unwrap();
    // keyword ids come after the four special tokens in the default task
    fs::write(tmp.path().join("c.txt"), "# ids\n4 5\n\n4\n").unwrap();
    let o = gazelab(&["gaze-report", "--corpus", "c.txt"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().map(str::to_owned).collect();
    assert_eq!(lines[0], "class,mean_attention");
    assert!(lines.len() >= 2);
    fs::write(tmp.path().join("bad.txt"), "4 x\n").unwrap();
    let o = gazelab(&["gaze-report", "--corpus", "bad.txt"], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("bad.txt:1"), "{}", stderr(&o));
}
