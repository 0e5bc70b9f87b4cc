use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hourglass::config::KEYS;

const TINY: &[&str] = &[
    "--hierarchy", "1@1 1@2 1@1",
    "--d_model", "16",
    "--d_ff", "32",
    "--n_heads", "2",
    "--max_len", "32",
    "--seq_len", "32",
    "--batch_size", "2",
    "--synth_bytes", "40000",
    "--eval_window", "32",
    "--eval_stride", "8",
    "--eval_tail", "8",
];

fn hourglass(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hourglass"))
        .args(args)
        .arg("--out_dir")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn with_tiny<'a>(cmd: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd];
    v.extend_from_slice(TINY);
    v.extend_from_slice(extra);
    v
}

/// Value printed as `name = value` on stdout.
fn printed(o: &Output, name: &str) -> String {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{name} = ")).map(str::to_string))
        .unwrap_or_else(|| panic!("no `{name}` in output:\n{}", stdout(o)))
}

#[test]
fn help_lists_every_option() {
    let dir = tempfile::tempdir().unwrap();
    let o = hourglass(dir.path(), &["--help"]);
    assert!(o.status.success());
    let help = stdout(&o);
    for (key, _) in KEYS {
        assert!(help.contains(&format!("--{key}")), "help misses --{key}");
    }
    for cmd in ["train", "eval", "audit", "cost", "synth"] {
        assert!(help.contains(cmd));
    }
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(hourglass(dir.path(), &["frobnicate"]).status.code(), Some(1));
    let o = hourglass(dir.path(), &["cost", "--hierarchy", "2@1 8@3"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "d_model = 16\nwarp_factor = 9\n").unwrap();
    let o = hourglass(dir.path(), &["cost", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("line 2") && err.contains("warp_factor"), "{err}");
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no-such-corpus.txt");
    let o = hourglass(dir.path(), &with_tiny("train", &["--steps", "2", "--warmup_steps", "0", "--corpus", missing.to_str().unwrap()]));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no-such-corpus.txt"));

    let junk = dir.path().join("junk.bin");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let o = hourglass(dir.path(), &with_tiny("eval", &["--checkpoint", junk.to_str().unwrap()]));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let o = hourglass(dir.path(), &with_tiny("train", &["--steps", "20", "--eval_every", "10", "--warmup_steps", "2"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let run = Path::new(&printed(&o, "run_dir")).to_path_buf();
    let val: f64 = printed(&o, "val_bpc").parse().unwrap();
    assert!(val.is_finite() && val > 0.0);

    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().skip(1).collect();
    assert_eq!(rows.len(), 20);
    let evals = rows.iter().filter(|r| !r.split(',').nth(3).unwrap().is_empty()).count();
    assert!(evals >= 2, "{metrics}");
    assert!(run.join("config.txt").exists());

    let ckpt = run.join("checkpoint.bin");
    let o = hourglass(dir.path(), &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--eval_window", "32", "--eval_stride", "8", "--eval_tail", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bpc = printed(&o, "bpc");
    let decimals = bpc.split('.').nth(1).unwrap();
    assert_eq!(decimals.len(), 4, "{bpc}");
    assert!(run.join("eval.csv").exists());

    // A window that is not a multiple of the shorten factor is a usage error.
    let o = hourglass(dir.path(), &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--eval_window", "31", "--eval_stride", "8", "--eval_tail", "8"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn identical_runs_write_identical_metrics() {
    let strip = |text: String| -> Vec<String> {
        text.lines()
            .map(|l| {
                let mut f: Vec<&str> = l.split(',').collect();
                f.remove(4);
                f.join(",")
            })
            .collect()
    };
    let mut seen = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let o = hourglass(dir.path(), &with_tiny("train", &["--steps", "6", "--eval_every", "3", "--warmup_steps", "1"]));
        assert!(o.status.success(), "{}", stderr(&o));
        let run = Path::new(&printed(&o, "run_dir")).to_path_buf();
        assert!(run.file_name().unwrap().to_str().unwrap().ends_with("-s0"));
        seen.push((run.file_name().unwrap().to_owned(), strip(fs::read_to_string(run.join("metrics.csv")).unwrap())));
    }
    assert_eq!(seen[0], seen[1]);
}

#[test]
fn default_configuration_runs() {
    let dir = tempfile::tempdir().unwrap();
    let o = hourglass(dir.path(), &["train", "--steps", "1", "--warmup_steps", "0", "--synth_bytes", "20000", "--eval_batches", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn untrained_model_scores_about_eight_bits() {
    let dir = tempfile::tempdir().unwrap();
    let o = hourglass(dir.path(), &with_tiny("eval", &[]));
    assert!(o.status.success(), "{}", stderr(&o));
    let bpc: f64 = printed(&o, "bpc").parse().unwrap();
    assert!((bpc - 8.0).abs() < 0.1, "{bpc}");
}

#[test]
fn audit_passes_and_catches_sabotage() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["audit", "--hierarchy", "1@1 1@3 1@1", "--audit_len", "12", "--audit_seeds", "1"];
    let o = hourglass(dir.path(), &args);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).starts_with("PASS"));

    let mut bad = args.to_vec();
    bad.extend(["--sabotage_shift", "1"]);
    let o = hourglass(dir.path(), &bad);
    assert_eq!(o.status.code(), Some(3));
    let out = stdout(&o);
    assert!(out.starts_with("FAIL") && out.contains("logits["), "{out}");
}

fn cost_ratio(dir: &Path, hierarchy: &str, len: &str, column: &str) -> f64 {
    let o = hourglass(dir, &["cost", "--hierarchy", hierarchy, "--seq_len", len, "--max_len", len]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let line = out.lines().find(|l| l.starts_with("# baseline")).expect("baseline line");
    let field = line.split(';').find(|f| f.trim().starts_with(&format!("ratio {column} "))).unwrap();
    field.trim().rsplit(' ').next().unwrap().parse().unwrap()
}

fn total_scores(dir: &Path, hierarchy: &str, len: &str) -> u64 {
    let o = hourglass(dir, &["cost", "--hierarchy", hierarchy, "--seq_len", len, "--max_len", len]);
    let out = stdout(&o);
    let total = out.lines().find(|l| l.starts_with("total,")).unwrap();
    total.split(',').nth(3).unwrap().parse().unwrap()
}

#[test]
fn cost_report_ratios() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cost_ratio(dir.path(), "6@1", "256", "total"), 1.0);
    assert!(cost_ratio(dir.path(), "2@1 8@4 2@1", "2048", "scores") < 1.0);
    let (a, b) = (total_scores(dir.path(), "12@1", "256"), total_scores(dir.path(), "12@1", "512"));
    assert_eq!(b, 4 * a);
}

#[test]
fn synth_with_one_letter_is_solved() {
    let dir = tempfile::tempdir().unwrap();
    let o = hourglass(
        dir.path(),
        &["synth", "--repeats_alphabet", "1", "--repeats_len", "24", "--synth_steps", "60", "--synth_eval_every", "30"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let last = stdout(&o).lines().last().unwrap().to_string();
    let f: Vec<f64> = last.split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(f[0], 60.0);
    assert!(f[1..].iter().all(|&a| a == 1.0), "{last}");
}
