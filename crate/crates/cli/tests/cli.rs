use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn xrec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xrec"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn xrec")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = xrec(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr_of(dir: &Path, args: &[&str]) -> String {
    let out = xrec(dir, args);
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

const SMALL_WORLD: [&str; 6] = ["--num-users", "24", "--num-items", "24", "--interactions-per-user", "6"];
const SMALL_LM: [&str; 10] = [
    "--lm-dim", "16", "--lm-layers", "1", "--lm-heads", "2", "--lm-epochs", "1", "--lm-max-len", "64",
];

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["a", "b"] {
        let mut args = vec!["gen-data", "--seed", "7", "--out", out];
        args.extend(SMALL_WORLD);
        ok(d, &args);
    }
    for f in ["samples.jsonl", "user_profiles.jsonl", "item_profiles.jsonl"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn gen_data_k_core_filter() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args = vec!["gen-data", "--seed", "2", "--out", "core", "--k-core", "7"];
    args.extend(SMALL_WORLD);
    let out = ok(d, &args);
    assert!(out.contains("7-core filter dropped"), "{out}");
    // six interactions per user cannot support a 7-core
    assert_eq!(fs::read_to_string(d.join("core/samples.jsonl")).unwrap().lines().count(), 0);
}

#[test]
fn end_to_end_small_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args = vec!["gen-data", "--seed", "1", "--out", "data"];
    args.extend(SMALL_WORLD);
    ok(d, &args);
    ok(d, &["train-gnn", "--data", "data", "--run", "run", "--seed", "1", "--gnn-epochs", "20"]);

    fs::write(d.join("adapter.cfg"), "lr = 0.5\nweight_decay = 0.001\noptimizer = sgd\n").unwrap();
    let mut args = vec![
        "train-adapter", "--config", "adapter.cfg", "--data", "data", "--run", "run", "--ablation", "wo-injection",
        "--lr", "0.01", "--gpu-profile", "a100_mig",
    ];
    args.extend(SMALL_LM);
    ok(d, &args);
    let rc = fs::read_to_string(d.join("run/wo-inj/run_config")).unwrap();
    for line in ["use_injection=false", "use_embeddings=true", "lr=0.01", "weight_decay=0.001", "gpu_profile=a100_mig"] {
        assert!(rc.lines().any(|l| l == line), "missing {line} in\n{rc}");
    }
    assert!(d.join("run/lm.bin").exists());
    assert!(d.join("run/wo-inj/loss_trace.csv").exists());

    ok(d, &["generate", "--data", "data", "--run", "run", "--ablation", "wo-injection"]);
    let generated = fs::read_to_string(d.join("run/wo-inj/generated.jsonl")).unwrap();
    let n_test = generated.lines().count();
    assert!(n_test > 0);

    ok(d, &["evaluate", "--data", "data", "--run", "run", "--generated", "run/wo-inj/generated.jsonl", "--fraction", "0.1"]);
    let rows = fs::read_to_string(d.join("run/wo-inj/rows.csv")).unwrap();
    let scored = (0.1 * n_test as f64).ceil() as usize;
    assert_eq!(rows.lines().count(), 1 + 3 * scored);
    let report = fs::read_to_string(d.join("run/wo-inj/report.md")).unwrap();
    assert!(report.contains("| w/o-inj |"));

    ok(d, &["report", "--summaries", "run/wo-inj/summary.json", "run/wo-inj/summary.json", "--out", "all.md"]);
    let all = fs::read_to_string(d.join("all.md")).unwrap();
    assert_eq!(all.lines().filter(|l| l.starts_with("| w/o-inj |")).count(), 2);

    let csv = fs::read_to_string(d.join("emissions.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "command,gpu_profile,seconds,kg_co2e");
    let commands: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(commands, ["train-gnn", "train-adapter", "generate", "evaluate"]);
    assert!(lines[2].starts_with("train-adapter,a100_mig,"));
}

#[test]
fn emissions_command() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["emissions", "--hours", "1"]);
    assert_eq!(out.trim(), "0.240240");
    let out = ok(dir.path(), &["emissions", "--hours", "2", "--gpu-profile", "a100_mig"]);
    assert_eq!(out.trim(), "0.343200");
    let err = stderr_of(dir.path(), &["emissions", "--hours", "0"]);
    assert!(err.contains("strictly positive"), "{err}");
}

#[test]
fn diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(stderr_of(d, &["frobnicate"]).contains("unrecognized subcommand"));
    assert!(stderr_of(d, &["gen-data", "--out", "x", "--bogus"]).contains("--bogus"));
    let err = stderr_of(d, &["train-adapter", "--data", "nope", "--run", "nothing"]);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("missing file") && err.contains("train-gnn"), "{err}");
    let err = stderr_of(d, &["train-gnn", "--config", "absent.cfg", "--data", "x", "--run", "y"]);
    assert!(err.contains("absent.cfg"), "{err}");
}
