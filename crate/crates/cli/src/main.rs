//! `hourglass <train|eval|audit|cost|synth> [--config FILE] [--key value …]`
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime
//! failure, 3 audit failure.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command};

use hourglass::audit::{
    audit_cell, audit_grid, estimate_cost, expressivity_experiment, grid_len, AuditCell,
    AuditReport, ClassAccuracy, CostEstimate, ExpressivityConfig,
};
use hourglass::config::{RunConfig, KEYS};
use hourglass::data::{load_corpus, synth_text, Corpus, RepeatsTask, Split};
use hourglass::model::{ForwardOptions, Hierarchy, Hourglass};
use hourglass::nn::InitScheme;
use hourglass::tensor::Float;
use hourglass::train::{eval_overlapping, load_checkpoint, MetricsWriter, Trainer};
use hourglass::Error;

/// Seed of the synthetic text used when no corpus is configured. Fixed so
/// that every run, whatever its own seed, sees the same data.
const SYNTH_TEXT_SEED: u64 = 0x7e47;

const COMMANDS: &[(&str, &str)] = &[
    ("train", "train a model; writes config.txt, metrics.csv and checkpoint.bin to the run directory"),
    ("eval", "overlapping-window evaluation of a checkpoint (or of a fresh model when none is given)"),
    ("audit", "jacobian leak audit of the configured model, or of the whole grid with --audit-grid true"),
    ("cost", "per-stage operation counts and the ratio to an all-full-resolution stack of equal depth"),
    ("synth", "repeats-task expressivity experiment; writes per-class accuracy per evaluation"),
];

enum Failure {
    Error(Error),
    /// Training diverged; carries the message.
    Diverged(String),
    AuditFailed(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Precision {
    F32,
    F64,
}

fn precision() -> Result<Precision, Error> {
    match std::env::var("HOURGLASS_PRECISION").as_deref() {
        Err(_) | Ok("") | Ok("f32") => Ok(Precision::F32),
        Ok("f64") => Ok(Precision::F64),
        Ok(other) => Err(Error::Config(format!(
            "HOURGLASS_PRECISION must be f32 or f64, got `{other}`"
        ))),
    }
}

fn key_args() -> Vec<Arg> {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .global(true)
        .help("flat `key = value` file; flags given on the command line override it")];
    for (key, help) in KEYS {
        let mut arg = Arg::new(*key)
            .long(*key)
            .value_name("VALUE")
            .allow_hyphen_values(true)
            .global(true)
            .help(*help);
        if key.contains('_') {
            arg = arg.alias(key.replace('_', "-"));
        }
        args.push(arg);
    }
    args
}

fn cli() -> Command {
    let mut cmd = Command::new("hourglass")
        .about("Hierarchical autoregressive Transformer: train, evaluate, audit, cost, synth")
        .after_help(
            "Every option is also a config-file key (written with underscores).\n\
             Artifacts go to <out_dir>/<config hash>-s<seed>/.\n\
             HOURGLASS_PRECISION=f32|f64 selects the working precision (audit always uses f64).\n\
             Exit codes: 0 success, 1 usage, 2 runtime, 3 audit failure.",
        )
        .subcommand_required(true)
        .arg_required_else_help(true)
        .args(key_args());
    for (name, about) in COMMANDS {
        cmd = cmd.subcommand(Command::new(*name).about(*about));
    }
    cmd
}

/// Defaults ← `base` text ← `--config` file ← flags.
fn build_config(m: &ArgMatches, base: Option<&str>) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::default();
    if let Some(text) = base {
        cfg.apply_text(text)?;
    }
    if let Some(path) = m.get_one::<String>("config") {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        cfg.apply_text(&text)
            .map_err(|e| Error::Config(format!("{path}: {}", bare(&e))))?;
    }
    for key in RunConfig::keys() {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)
                .map_err(|e| Error::Config(format!("--{key}: {}", bare(&e))))?;
        }
    }
    cfg.resolve()
}

fn bare(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Parse { .. } | Error::Validation { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    // Global flags are visible from the subcommand's matches.
    match run(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::AuditFailed(n)) => {
            eprintln!("audit failed: {n} configuration(s) leak");
            ExitCode::from(3)
        }
        Err(Failure::Diverged(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(name: &str, m: &ArgMatches) -> CmdResult {
    let prec = precision()?;
    match name {
        "train" => {
            let cfg = build_config(m, None)?;
            match prec {
                Precision::F32 => cmd_train::<f32>(&cfg),
                Precision::F64 => cmd_train::<f64>(&cfg),
            }
        }
        "eval" => {
            // Model settings come from the checkpoint; flags still override.
            let probe = build_config(m, None)?;
            let cfg = match &probe.checkpoint {
                Some(path) => {
                    let text = checkpoint_config(path, prec)?;
                    let mut cfg = build_config(m, Some(&text))?;
                    cfg.checkpoint = Some(path.clone());
                    cfg
                }
                None => probe,
            };
            match prec {
                Precision::F32 => cmd_eval::<f32>(&cfg),
                Precision::F64 => cmd_eval::<f64>(&cfg),
            }
        }
        "audit" => cmd_audit(&build_config(m, None)?),
        "cost" => cmd_cost(&build_config(m, None)?),
        "synth" => cmd_synth(&build_config(m, None)?),
        other => Err(Error::Usage(format!("unknown command `{other}`")).into()),
    }
}

fn checkpoint_config(path: &Path, prec: Precision) -> Result<String, Error> {
    Ok(match prec {
        Precision::F32 => load_checkpoint::<f32>(path)?.config,
        Precision::F64 => load_checkpoint::<f64>(path)?.config,
    })
}

fn load_data(cfg: &RunConfig) -> Result<Corpus, Error> {
    match &cfg.corpus {
        Some(path) => load_corpus(path, cfg.splits),
        None => {
            log::info!("no corpus configured; using {} bytes of synthetic text", cfg.synth_bytes);
            Corpus::from_bytes(&synth_text(cfg.synth_bytes, SYNTH_TEXT_SEED), cfg.splits, None)
        }
    }
}

fn run_dir(cfg: &RunConfig) -> Result<PathBuf, Error> {
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn append_csv(path: &Path, header: &str, line: &str) -> Result<(), Error> {
    let fresh = !path.exists();
    let io = |e| Error::Io {
        path: path.into(),
        source: e,
    };
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    if fresh {
        writeln!(f, "{header}").map_err(io)?;
    }
    writeln!(f, "{line}").map_err(io)
}

fn cmd_train<T: Float>(cfg: &RunConfig) -> CmdResult {
    let corpus = load_data(cfg)?;
    let model = Hourglass::new(cfg.model_spec())?;
    let dir = run_dir(cfg)?;
    let text = cfg.to_text();
    write_file(&dir.join("config.txt"), &text)?;

    let (mut trainer, resumed) = match &cfg.checkpoint {
        Some(path) => {
            let ck = load_checkpoint::<T>(path)?;
            let saved = RunConfig::parse(&ck.config)?;
            if saved.model_spec() != cfg.model_spec() {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different model configuration",
                    path.display()
                ))
                .into());
            }
            log::info!("resuming from {} at step {}", path.display(), ck.state.step);
            (Trainer::from_state(model, cfg.train.clone(), ck.state)?, true)
        }
        None => (Trainer::<T>::new(model, cfg.train.clone())?, false),
    };
    let mut metrics = MetricsWriter::open(dir.join("metrics.csv"), resumed)?;
    let ckpt = dir.join("checkpoint.bin");
    let mut last_val = None;
    trainer.run(
        &corpus,
        cfg.train.steps,
        |row| {
            if let Some(v) = row.val_bpc {
                log::info!("step {} train_bpc {:.4} val_bpc {v:.4}", row.step, row.train_bpc);
                last_val = Some(v);
            }
            metrics.write(row)
        },
        Some((&ckpt, &text)),
    )?;
    println!("run_dir = {}", dir.display());
    if let Some(v) = last_val {
        println!("val_bpc = {v:.4}");
    }
    Ok(())
}

fn cmd_eval<T: Float>(cfg: &RunConfig) -> CmdResult {
    let corpus = load_data(cfg)?;
    let model = Hourglass::new(cfg.model_spec())?;
    let params = match &cfg.checkpoint {
        Some(path) => load_checkpoint::<T>(path)?.state.params,
        None => {
            log::warn!("no checkpoint given; evaluating a freshly initialised model");
            model.init_params::<T>(cfg.train.seed, InitScheme::Standard)?
        }
    };
    let sfd = &model.spec().sfd;
    let opts = ForwardOptions {
        shorten_factor: cfg.eval_k.or(sfd.enabled.then(|| sfd.factor_set[0])),
        ..ForwardOptions::default()
    };
    let split = if cfg.eval_split == "test" { Split::Test } else { Split::Valid };
    let report = eval_overlapping(
        &model,
        &params,
        corpus.split(split),
        cfg.eval_window,
        cfg.eval_stride,
        cfg.eval_tail,
        cfg.train.batch_size,
        &opts,
    )?;
    println!("bpc = {:.4}", report.bpc);
    let line = format!(
        "{},{},{},{},{},{},{},{:.6}",
        cfg.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        cfg.eval_split,
        cfg.eval_window,
        cfg.eval_stride,
        cfg.eval_tail,
        opts.shorten_factor.map(|k| k.to_string()).unwrap_or_default(),
        report.positions,
        report.bpc
    );
    append_csv(
        &run_dir(cfg)?.join("eval.csv"),
        "checkpoint,split,window,stride,tail,shorten_factor,positions,bpc",
        &line,
    )?;
    Ok(())
}

fn cmd_audit(cfg: &RunConfig) -> CmdResult {
    let seeds: Vec<u64> = (0..cfg.audit_seeds as u64).collect();
    let cells = if cfg.audit_grid {
        audit_grid(&[2, 3, 4], &[1, 2], &seeds, cfg.audit_len, cfg.sabotage_shift)
    } else {
        let len = grid_len(&cfg.hierarchy, cfg.audit_len);
        if len == 0 {
            return Err(Error::Usage(format!(
                "audit_len {} is shorter than the hierarchy's shorten factor {}",
                cfg.audit_len,
                cfg.hierarchy.total_factor()
            ))
            .into());
        }
        seeds
            .iter()
            .map(|&seed| AuditCell {
                hierarchy: cfg.hierarchy.clone(),
                shorten: cfg.shorten,
                upsample: cfg.upsample,
                len,
                seed,
                sabotage_shift: cfg.sabotage_shift,
            })
            .collect()
    };
    let dir = run_dir(cfg)?;
    let mut csv = format!("{}\n", AuditReport::csv_header());
    let mut json = String::new();
    let mut failed = 0;
    for cell in &cells {
        let report = audit_cell(cell, cfg.audit_tolerance)?;
        let worst = report.worst.map_or(0.0, |w| w.magnitude);
        println!(
            "{} {:<60} worst {worst:.3e}",
            if report.pass { "PASS" } else { "FAIL" },
            report.fingerprint
        );
        if !report.pass {
            failed += 1;
            let names: Vec<String> = report
                .offenders
                .iter()
                .map(|o| format!("logits[{}] <- input[{}] ({:.3e})", o.output, o.input, o.magnitude))
                .collect();
            println!("     offending positions: {}", names.join(", "));
        }
        csv.push_str(&report.csv_line());
        csv.push('\n');
        json.push_str(&report.json_line());
        json.push('\n');
    }
    write_file(&dir.join("audit.csv"), &csv)?;
    write_file(&dir.join("audit.jsonl"), &json)?;
    println!("{} of {} configurations pass", cells.len() - failed, cells.len());
    if failed > 0 {
        return Err(Failure::AuditFailed(failed));
    }
    Ok(())
}

fn cost_rows(est: &CostEstimate, out: &mut String) {
    for s in &est.stages {
        let o = &s.ops;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            s.name,
            s.length,
            s.layers,
            o.scores,
            o.rel_position,
            o.weighted_sum,
            o.projections,
            o.feed_forward,
            o.resampling,
            o.output,
            o.total(),
            s.activation_words
        ));
    }
    let t = est.totals();
    out.push_str(&format!(
        "total,{},,{},{},{},{},{},{},{},{},{}\n",
        est.seq_len,
        t.scores,
        t.rel_position,
        t.weighted_sum,
        t.projections,
        t.feed_forward,
        t.resampling,
        t.output,
        t.total(),
        est.activation_words()
    ));
}

fn cmd_cost(cfg: &RunConfig) -> CmdResult {
    let l = cfg.train.seq_len;
    let est = estimate_cost(&cfg.hierarchy, l, &cfg.model, cfg.shorten, cfg.upsample);
    let n = cfg.hierarchy.total_layers();
    let baseline = Hierarchy::parse(&format!("{n}@1"))?;
    let base = estimate_cost(&baseline, l, &cfg.model, cfg.shorten, cfg.upsample);
    let mut out = String::from(
        "stage,length,layers,scores,rel_position,weighted_sum,projections,feed_forward,resampling,output,total,activation_words\n",
    );
    cost_rows(&est, &mut out);
    let ratio = |a: u64, b: u64| if b == 0 { f64::NAN } else { a as f64 / b as f64 };
    let (t, bt) = (est.totals(), base.totals());
    out.push_str(&format!(
        "# baseline \"{baseline}\": total {} ; ratio total {:.4} ; ratio scores {:.4} ; ratio activation_words {:.4}\n",
        bt.total(),
        ratio(t.total(), bt.total()),
        ratio(t.scores, bt.scores),
        ratio(est.activation_words(), base.activation_words())
    ));
    print!("{out}");
    write_file(&run_dir(cfg)?.join("cost.csv"), &out)?;
    Ok(())
}

fn cmd_synth(cfg: &RunConfig) -> CmdResult {
    let ecfg = ExpressivityConfig {
        task: RepeatsTask::new(cfg.repeats_alphabet, cfg.repeats_len)?,
        k: cfg.synth_k,
        with_vanilla: cfg.synth_vanilla,
        max_steps: cfg.synth_steps,
        eval_every: cfg.synth_eval_every.max(1),
        seed: cfg.train.seed,
        ..ExpressivityConfig::default()
    };
    let dir = run_dir(cfg)?;
    let mut csv = format!("{}\n", ClassAccuracy::CSV_HEADER);
    println!("{}", ClassAccuracy::CSV_HEADER);
    let result = expressivity_experiment(&ecfg, |acc| {
        println!("{}", acc.csv_line());
        csv.push_str(&acc.csv_line());
        csv.push('\n');
    })?;
    write_file(&dir.join("repeats.csv"), &csv)?;
    if let Some(msg) = result.failure {
        return Err(Failure::Diverged(msg));
    }
    Ok(())
}
