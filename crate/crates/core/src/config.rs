//! Flat `key = value` run configuration shared by files, command-line
//! overrides and checkpoints.

use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Hierarchy, ModelSpec, SfdSpec};
use crate::nn::ModelConfig;
use crate::resample::{ShortenMethod, UpsampleMethod};
use crate::train::{AdamConfig, Schedule, TrainConfig};

/// Every setting of a run. Each field is reachable through exactly one key.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub hierarchy: Hierarchy,
    pub shorten: ShortenMethod,
    pub upsample: UpsampleMethod,
    /// Shorten factors sampled per step; empty disables shorten-factor dropout.
    pub sfd_factors: Vec<usize>,
    pub train: TrainConfig,
    /// Byte corpus; when unset a synthetic English-like text is generated.
    pub corpus: Option<PathBuf>,
    pub synth_bytes: usize,
    pub splits: [f64; 3],
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub eval_split: String,
    pub eval_window: usize,
    pub eval_stride: usize,
    pub eval_tail: usize,
    pub eval_k: Option<usize>,
    pub audit_grid: bool,
    pub audit_len: usize,
    pub audit_seeds: usize,
    pub audit_tolerance: f64,
    pub sabotage_shift: Option<usize>,
    pub repeats_alphabet: usize,
    pub repeats_len: usize,
    pub synth_k: usize,
    pub synth_vanilla: bool,
    pub synth_steps: u64,
    pub synth_eval_every: u64,
}

/// Default window length: a multiple of the default hierarchy's factor.
const DEFAULT_LEN: usize = 384;

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig {
                max_len: DEFAULT_LEN,
                ..ModelConfig::default()
            },
            hierarchy: Hierarchy::parse("2@1 8@3 2@1").expect("default hierarchy"),
            shorten: ShortenMethod::AvgPool,
            upsample: UpsampleMethod::Repeat,
            sfd_factors: Vec::new(),
            train: TrainConfig {
                seq_len: DEFAULT_LEN,
                schedule: Schedule::CosineCycle { total: 0 },
                ..TrainConfig::default()
            },
            corpus: None,
            synth_bytes: 1 << 20,
            splits: [0.9, 0.05, 0.05],
            out_dir: PathBuf::from("runs"),
            checkpoint: None,
            eval_split: "valid".into(),
            eval_window: DEFAULT_LEN,
            eval_stride: 64,
            eval_tail: 64,
            eval_k: None,
            audit_grid: false,
            audit_len: 48,
            audit_seeds: 3,
            audit_tolerance: 1e-12,
            sabotage_shift: None,
            repeats_alphabet: 4,
            repeats_len: 384,
            synth_k: 3,
            synth_vanilla: true,
            synth_steps: 5000,
            synth_eval_every: 100,
        }
    }
}

/// `(key, description)` of every accepted key, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("hierarchy", "stack layout, e.g. \"2@1 8@3 2@1\""),
    ("shorten", "avg_pool | linear_pool | attn_pool_avg | attn_pool_linear"),
    ("upsample", "repeat | linear | attn_identityU | attn_linearU"),
    ("sfd_factors", "comma-separated shorten factors sampled per step (empty = off)"),
    ("vocab_size", "number of token ids"),
    ("d_model", "model width"),
    ("d_ff", "feed-forward hidden width"),
    ("n_heads", "attention heads"),
    ("dropout", "dropout rate on sublayer outputs"),
    ("attention_window", "local attention span of full-resolution layers (0 = full)"),
    ("max_len", "longest sequence the relative tables cover"),
    ("batch_size", "sequences per step"),
    ("seq_len", "training window length"),
    ("steps", "optimisation steps"),
    ("lr", "peak learning rate"),
    ("warmup_steps", "linear warmup steps"),
    ("schedule", "cosine | cosine:N | inv_sqrt (cosine cycles over `steps`)"),
    ("adam_beta1", "Adam first-moment decay"),
    ("adam_beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam epsilon"),
    ("seed", "seed for initialisation, data order, dropout and factor draws"),
    ("eval_every", "steps between validation passes and checkpoints"),
    ("eval_batches", "validation batches per pass"),
    ("corpus", "byte file to train on (empty = synthetic text)"),
    ("synth_bytes", "size of the synthetic text when no corpus is given"),
    ("splits", "train,valid,test fractions"),
    ("out_dir", "parent directory of run directories"),
    ("checkpoint", "checkpoint to evaluate or resume from"),
    ("eval_split", "valid | test"),
    ("eval_window", "evaluation window length"),
    ("eval_stride", "evaluation window step"),
    ("eval_tail", "positions scored per window after the first"),
    ("eval_k", "shorten factor used for evaluation (0 = model default)"),
    ("audit_grid", "audit every shortener × upsampler × k ∈ {2,3,4} × depth ∈ {1,2}"),
    ("audit_len", "maximum audited sequence length"),
    ("audit_seeds", "random parameter draws per audited configuration"),
    ("audit_tolerance", "largest accepted derivative on a forbidden position"),
    ("sabotage_shift", "replace the k-1 pre-shortening shift by this value (0 = off)"),
    ("repeats_alphabet", "letters in the repeats task"),
    ("repeats_len", "repeats sequence length (multiple of 3)"),
    ("synth_k", "shorten factor of the repeats experiment"),
    ("synth_vanilla", "give the repeats model full-resolution layers"),
    ("synth_steps", "maximum repeats training steps"),
    ("synth_eval_every", "steps between repeats accuracy reports"),
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn opt_zero(v: usize) -> Option<usize> {
    (v != 0).then_some(v)
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        KEYS.iter().map(|(k, _)| *k)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let v = v
            .strip_prefix('"')
            .and_then(|s| s.strip_suffix('"'))
            .unwrap_or(v);
        match key {
            "hierarchy" => self.hierarchy = Hierarchy::parse(v)?,
            "shorten" => self.shorten = v.parse()?,
            "upsample" => self.upsample = v.parse()?,
            "sfd_factors" => {
                self.sfd_factors = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_num(key, s))
                    .collect::<Result<_>>()?
            }
            "vocab_size" => self.model.vocab_size = parse_num(key, v)?,
            "d_model" => self.model.d_model = parse_num(key, v)?,
            "d_ff" => self.model.d_ff = parse_num(key, v)?,
            "n_heads" => self.model.n_heads = parse_num(key, v)?,
            "dropout" => self.model.dropout = parse_num(key, v)?,
            "attention_window" => self.model.attention_window = opt_zero(parse_num(key, v)?),
            "max_len" => self.model.max_len = parse_num(key, v)?,
            "batch_size" => self.train.batch_size = parse_num(key, v)?,
            "seq_len" => self.train.seq_len = parse_num(key, v)?,
            "steps" => self.train.steps = parse_num(key, v)?,
            "lr" => self.train.lr_peak = parse_num(key, v)?,
            "warmup_steps" => self.train.warmup_steps = parse_num(key, v)?,
            "schedule" => self.train.schedule = v.parse()?,
            "adam_beta1" => self.train.adam.beta1 = parse_num(key, v)?,
            "adam_beta2" => self.train.adam.beta2 = parse_num(key, v)?,
            "adam_eps" => self.train.adam.eps = parse_num(key, v)?,
            "seed" => self.train.seed = parse_num(key, v)?,
            "eval_every" => self.train.eval_every = parse_num(key, v)?,
            "eval_batches" => self.train.eval_batches = parse_num(key, v)?,
            "corpus" => self.corpus = opt_path(v),
            "synth_bytes" => self.synth_bytes = parse_num(key, v)?,
            "splits" => {
                let parts: Vec<f64> = v
                    .split(',')
                    .map(|s| parse_num(key, s.trim()))
                    .collect::<Result<_>>()?;
                self.splits = parts.try_into().map_err(|_| {
                    Error::Config(format!("`{key}`: expected three comma-separated fractions"))
                })?;
            }
            "out_dir" => self.out_dir = PathBuf::from(v),
            "checkpoint" => self.checkpoint = opt_path(v),
            "eval_split" => match v {
                "valid" | "test" => self.eval_split = v.to_string(),
                _ => return Err(Error::Config(format!("`{key}`: expected valid or test, got `{v}`"))),
            },
            "eval_window" => self.eval_window = parse_num(key, v)?,
            "eval_stride" => self.eval_stride = parse_num(key, v)?,
            "eval_tail" => self.eval_tail = parse_num(key, v)?,
            "eval_k" => self.eval_k = opt_zero(parse_num(key, v)?),
            "audit_grid" => self.audit_grid = parse_bool(key, v)?,
            "audit_len" => self.audit_len = parse_num(key, v)?,
            "audit_seeds" => self.audit_seeds = parse_num(key, v)?,
            "audit_tolerance" => self.audit_tolerance = parse_num(key, v)?,
            "sabotage_shift" => self.sabotage_shift = opt_zero(parse_num(key, v)?),
            "repeats_alphabet" => self.repeats_alphabet = parse_num(key, v)?,
            "repeats_len" => self.repeats_len = parse_num(key, v)?,
            "synth_k" => self.synth_k = parse_num(key, v)?,
            "synth_vanilla" => self.synth_vanilla = parse_bool(key, v)?,
            "synth_steps" => self.synth_steps = parse_num(key, v)?,
            "synth_eval_every" => self.synth_eval_every = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped; errors name the key and line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, found `{line}`", i + 1))
            })?;
            let key = key.trim();
            self.set(key, value).map_err(|e| {
                Error::Config(format!("line {}: key `{key}`: {}", i + 1, strip_prefix(&e)))
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Canonical text form: every key in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::keys() {
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }

    fn get(&self, key: &str) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        match key {
            "hierarchy" => format!("\"{}\"", self.hierarchy),
            "shorten" => self.shorten.to_string(),
            "upsample" => self.upsample.to_string(),
            "sfd_factors" => join(&self.sfd_factors),
            "vocab_size" => self.model.vocab_size.to_string(),
            "d_model" => self.model.d_model.to_string(),
            "d_ff" => self.model.d_ff.to_string(),
            "n_heads" => self.model.n_heads.to_string(),
            "dropout" => self.model.dropout.to_string(),
            "attention_window" => self.model.attention_window.unwrap_or(0).to_string(),
            "max_len" => self.model.max_len.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "seq_len" => self.train.seq_len.to_string(),
            "steps" => self.train.steps.to_string(),
            "lr" => self.train.lr_peak.to_string(),
            "warmup_steps" => self.train.warmup_steps.to_string(),
            "schedule" => match self.train.schedule {
                Schedule::CosineCycle { total: 0 } => "cosine".into(),
                Schedule::CosineCycle { total } => format!("cosine:{total}"),
                Schedule::InvSqrt => "inv_sqrt".into(),
            },
            "adam_beta1" => self.train.adam.beta1.to_string(),
            "adam_beta2" => self.train.adam.beta2.to_string(),
            "adam_eps" => self.train.adam.eps.to_string(),
            "seed" => self.train.seed.to_string(),
            "eval_every" => self.train.eval_every.to_string(),
            "eval_batches" => self.train.eval_batches.to_string(),
            "corpus" => path_text(&self.corpus),
            "synth_bytes" => self.synth_bytes.to_string(),
            "splits" => self.splits.map(|x| x.to_string()).join(","),
            "out_dir" => self.out_dir.display().to_string(),
            "checkpoint" => path_text(&self.checkpoint),
            "eval_split" => self.eval_split.clone(),
            "eval_window" => self.eval_window.to_string(),
            "eval_stride" => self.eval_stride.to_string(),
            "eval_tail" => self.eval_tail.to_string(),
            "eval_k" => self.eval_k.unwrap_or(0).to_string(),
            "audit_grid" => self.audit_grid.to_string(),
            "audit_len" => self.audit_len.to_string(),
            "audit_seeds" => self.audit_seeds.to_string(),
            "audit_tolerance" => format!("{:e}", self.audit_tolerance),
            "sabotage_shift" => self.sabotage_shift.unwrap_or(0).to_string(),
            "repeats_alphabet" => self.repeats_alphabet.to_string(),
            "repeats_len" => self.repeats_len.to_string(),
            "synth_k" => self.synth_k.to_string(),
            "synth_vanilla" => self.synth_vanilla.to_string(),
            "synth_steps" => self.synth_steps.to_string(),
            "synth_eval_every" => self.synth_eval_every.to_string(),
            other => unreachable!("key `{other}` missing from get"),
        }
    }

    /// Fills derived defaults (cosine cycle length) and checks consistency.
    pub fn resolve(mut self) -> Result<Self> {
        if let Schedule::CosineCycle { total: 0 } = self.train.schedule {
            self.train.schedule = Schedule::CosineCycle { total: self.train.steps };
        }
        self.model.validate()?;
        self.train.validate()?;
        Ok(self)
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            cfg: self.model.clone(),
            hierarchy: self.hierarchy.clone(),
            shorten: self.shorten,
            upsample: self.upsample,
            sfd: if self.sfd_factors.is_empty() {
                SfdSpec::disabled()
            } else {
                SfdSpec::new(&self.sfd_factors)
            },
        }
    }

    /// Short hash of the settings that determine a training run. Paths of
    /// outputs and evaluation-only keys are excluded.
    pub fn run_hash(&self) -> String {
        const EXCLUDED: &[&str] = &["out_dir", "checkpoint"];
        let mut h = Sha256::new();
        for key in Self::keys().filter(|k| !EXCLUDED.contains(k)) {
            h.update(format!("{key}={}\n", self.get(key)));
        }
        hex::encode(h.finalize())[..12].to_string()
    }

    /// `out_dir/<hash>-s<seed>`.
    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(format!("{}-s{}", self.run_hash(), self.train.seed))
    }

    pub fn adam(&self) -> AdamConfig {
        self.train.adam
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("hierarchy", "2@1 1@2 4@4 1@2 2@1").unwrap();
        cfg.set("sfd_factors", "2, 3").unwrap();
        cfg.set("corpus", "/tmp/x.bin").unwrap();
        cfg.set("lr", "0.001").unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn every_key_is_settable_and_printed() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        for key in RunConfig::keys() {
            assert!(text.lines().any(|l| l.starts_with(&format!("{key} ="))), "{key}");
        }
        assert_eq!(text.lines().count(), KEYS.len());
    }

    #[test]
    fn unknown_keys_and_bad_values_name_key_and_line() {
        let err = RunConfig::parse("steps = 10\nwidth = 3\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("width"), "{err}");
        let err = RunConfig::parse("# c\n\nsteps = ten\n").unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("steps"), "{err}");
    }

    #[test]
    fn cosine_cycle_defaults_to_steps() {
        let cfg = RunConfig::parse("steps = 300\nwarmup_steps = 10\nschedule = cosine").unwrap();
        let cfg = cfg.resolve().unwrap();
        assert_eq!(cfg.train.schedule, Schedule::CosineCycle { total: 300 });
    }

    #[test]
    fn run_dir_depends_on_settings_and_seed() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.seed = 1;
        let mut c = a.clone();
        c.out_dir = "elsewhere".into();
        assert_ne!(a.run_dir(), b.run_dir());
        assert_eq!(a.run_hash(), c.run_hash());
    }
}
