use crate::error::{Error, Result};
use crate::model::{Hierarchy, Level};
use crate::nn::{
    declare_block, declare_layernorm, declare_linear, embed, layernorm, linear,
    transformer_block, Ctx, GeometryKind, InitScheme, ModelConfig, ParamSpecs, Params, Role,
};
use crate::resample::{
    declare_shorten, declare_upsample, shift_right, shorten, upsample, ShortenMethod,
    UpsampleMethod,
};
use crate::tensor::{Float, Graph, Tensor, Var};

/// Shorten-factor dropout: the factor of the single shortening level is
/// drawn uniformly from `factor_set` at every training step.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SfdSpec {
    pub enabled: bool,
    pub factor_set: Vec<usize>,
}

impl SfdSpec {
    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn new(factor_set: &[usize]) -> Self {
        let mut set = factor_set.to_vec();
        set.sort_unstable();
        set.dedup();
        SfdSpec {
            enabled: true,
            factor_set: set,
        }
    }
}

/// Everything that determines the architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub cfg: ModelConfig,
    pub hierarchy: Hierarchy,
    pub shorten: ShortenMethod,
    pub upsample: UpsampleMethod,
    pub sfd: SfdSpec,
}

/// Per-call switches of the forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Factor of the shortening level when shorten-factor dropout is on.
    pub shorten_factor: Option<usize>,
    /// Replaces the `k − 1` pre-shortening shift at every level. Only the
    /// leak auditor uses this, to check that a too-small shift is caught.
    pub pre_shorten_shift: Option<usize>,
}

/// The hierarchical language model.
///
/// Parameter paths: `embed/table`, per level `l{i}/rel` (relative table),
/// `l{i}/pre/{j}`, `l{i}/post/{j}`, `l{i}/shorten`, `l{i}/upsample`, the
/// innermost stack `l{n}/core/{j}`, then `final_norm` and `out`.
#[derive(Clone, Debug)]
pub struct Hourglass {
    spec: ModelSpec,
    specs: ParamSpecs,
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

impl Hourglass {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.cfg.validate()?;
        if spec.sfd.enabled {
            if spec.hierarchy.depth() != 1 {
                return Err(Error::Config(format!(
                    "shorten-factor dropout needs exactly one shortening level, `{}` has {}",
                    spec.hierarchy,
                    spec.hierarchy.depth()
                )));
            }
            if !spec.shorten.factor_free() || !spec.upsample.factor_free() {
                return Err(Error::Config(format!(
                    "shorten-factor dropout needs avg_pool with repeat or attn_identityU, got {} / {}",
                    spec.shorten, spec.upsample
                )));
            }
            if spec.sfd.factor_set.is_empty() || spec.sfd.factor_set.iter().any(|&k| k < 2) {
                return Err(Error::Config(format!(
                    "shorten-factor set {:?} must be non-empty with factors >= 2",
                    spec.sfd.factor_set
                )));
            }
        }
        let divisor = Self::divisor_of(&spec);
        if !spec.cfg.max_len.is_multiple_of(divisor) {
            return Err(Error::Config(format!(
                "max_len {} is not divisible by the hierarchy's factor {divisor}",
                spec.cfg.max_len
            )));
        }
        let mut specs = ParamSpecs::new();
        Self::declare(&spec, &mut specs);
        Ok(Hourglass { spec, specs })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.spec.cfg
    }

    pub fn param_specs(&self) -> &ParamSpecs {
        &self.specs
    }

    pub fn init_params<T: Float>(&self, seed: u64, scheme: InitScheme) -> Result<Params<T>> {
        Params::initialize(&self.specs, seed, scheme)
    }

    fn divisor_of(spec: &ModelSpec) -> usize {
        if spec.sfd.enabled {
            spec.sfd.factor_set.iter().fold(1, |acc, &k| lcm(acc, k))
        } else {
            spec.hierarchy.total_factor()
        }
    }

    /// Every sequence length must be a multiple of this.
    pub fn length_divisor(&self) -> usize {
        Self::divisor_of(&self.spec)
    }

    /// Smallest factor each level can run at, outermost first.
    fn min_factors(spec: &ModelSpec) -> Vec<usize> {
        let mut f = spec.hierarchy.root().factors();
        if spec.sfd.enabled {
            f[0] = spec.sfd.factor_set[0];
        }
        f
    }

    fn declare(spec: &ModelSpec, specs: &mut ParamSpecs) {
        let cfg = &spec.cfg;
        let d = cfg.d_model;
        specs.add("embed/table", &[cfg.vocab_size, d], Role::Embedding);
        let mins = Self::min_factors(spec);
        let mut level = spec.hierarchy.root();
        let mut idx = 0;
        let mut resolution = 1;
        loop {
            let rows = ceil_div(cfg.max_len, resolution);
            let attn_resample = |s: ShortenMethod, u: UpsampleMethod| {
                !matches!(s, ShortenMethod::AvgPool | ShortenMethod::LinearPool)
                    || !matches!(u, UpsampleMethod::Repeat | UpsampleMethod::Linear)
            };
            match level {
                Level::Leaf { layers } => {
                    if *layers > 0 {
                        specs.add(format!("l{idx}/rel"), &[rows, d], Role::RelTable);
                    }
                    for j in 0..*layers {
                        declare_block(specs, &format!("l{idx}/core/{j}"), cfg);
                    }
                    break;
                }
                Level::Shortened {
                    pre,
                    factor,
                    inner,
                    post,
                } => {
                    if pre + post > 0 || attn_resample(spec.shorten, spec.upsample) {
                        specs.add(format!("l{idx}/rel"), &[rows, d], Role::RelTable);
                    }
                    for j in 0..*pre {
                        declare_block(specs, &format!("l{idx}/pre/{j}"), cfg);
                    }
                    declare_shorten(specs, &format!("l{idx}/shorten"), spec.shorten, *factor, cfg);
                    declare_upsample(specs, &format!("l{idx}/upsample"), spec.upsample, *factor, cfg);
                    for j in 0..*post {
                        declare_block(specs, &format!("l{idx}/post/{j}"), cfg);
                    }
                    resolution *= mins[idx];
                    level = inner;
                    idx += 1;
                }
            }
        }
        declare_layernorm(specs, "final_norm", d);
        declare_linear(specs, "out", d, cfg.vocab_size, true);
    }

    fn effective_factor(&self, level_idx: usize, declared: usize, opts: &ForwardOptions) -> Result<usize> {
        let sfd = &self.spec.sfd;
        match (level_idx, opts.shorten_factor) {
            (0, Some(k)) if sfd.enabled => {
                if sfd.factor_set.contains(&k) {
                    Ok(k)
                } else {
                    Err(Error::Config(format!(
                        "shorten factor {k} is not in the trained set {:?}",
                        sfd.factor_set
                    )))
                }
            }
            (0, Some(k)) if k != declared => Err(Error::Config(format!(
                "shorten factor {k} requested but the model was built with {declared}"
            ))),
            (0, None) if sfd.enabled && !sfd.factor_set.contains(&declared) => Err(Error::Config(
                format!(
                    "no shorten factor given and the declared {declared} is not in {:?}",
                    sfd.factor_set
                ),
            )),
            _ => Ok(declared),
        }
    }

    fn check_len(&self, len: usize, opts: &ForwardOptions) -> Result<()> {
        let div = match opts.shorten_factor {
            Some(k) if self.spec.sfd.enabled => k,
            _ => self.spec.hierarchy.total_factor(),
        };
        if len == 0 || !len.is_multiple_of(div) {
            return Err(Error::Usage(format!(
                "sequence length {len} must be a positive multiple of {div} for hierarchy `{}`",
                self.spec.hierarchy
            )));
        }
        if len > self.spec.cfg.max_len {
            return Err(Error::Config(format!(
                "sequence length {len} exceeds max_len {}",
                self.spec.cfg.max_len
            )));
        }
        Ok(())
    }

    /// Logits `[B, L, V]` for row-major `tokens` of shape `[batch, len]`.
    /// `logits[p]` depends only on tokens before `p`.
    pub fn forward<T: Float>(
        &self,
        ctx: &Ctx<'_, T>,
        tokens: &[usize],
        batch: usize,
        len: usize,
        opts: &ForwardOptions,
    ) -> Result<Var> {
        self.check_len(len, opts)?;
        let x = embed(ctx, tokens, batch, len)?;
        self.forward_embedded(ctx, x, opts)
    }

    /// Forward pass from already embedded tokens `[B, L, d]` (before the
    /// input shift by one).
    pub fn forward_embedded<T: Float>(&self, ctx: &Ctx<'_, T>, emb: Var, opts: &ForwardOptions) -> Result<Var> {
        let shape = ctx.g.shape(emb);
        if shape.len() != 3 || shape[2] != self.spec.cfg.d_model {
            return Err(Error::Dimension(format!("embedded input {shape:?}")));
        }
        self.check_len(shape[1], opts)?;
        let x = shift_right(ctx.g, emb, 1)?;
        let x = self.level_forward(ctx, x, self.spec.hierarchy.root(), 0, opts)?;
        let x = layernorm(ctx, x, "final_norm")?;
        linear(ctx, x, "out")
    }

    fn blocks<T: Float>(
        &self,
        ctx: &Ctx<'_, T>,
        mut x: Var,
        idx: usize,
        group: &str,
        n: usize,
    ) -> Result<Var> {
        if n == 0 {
            return Ok(x);
        }
        let len = ctx.g.shape(x)[1];
        let kind = if idx == 0 {
            GeometryKind::LocalSelf
        } else {
            GeometryKind::CausalSelf
        };
        let geom = ctx.geometry(kind, len, 1);
        let table = format!("l{idx}/rel");
        for j in 0..n {
            x = transformer_block(ctx, x, &format!("l{idx}/{group}/{j}"), &table, &geom)?;
        }
        Ok(x)
    }

    fn level_forward<T: Float>(
        &self,
        ctx: &Ctx<'_, T>,
        x: Var,
        level: &Level,
        idx: usize,
        opts: &ForwardOptions,
    ) -> Result<Var> {
        match level {
            Level::Leaf { layers } => self.blocks(ctx, x, idx, "core", *layers),
            Level::Shortened {
                pre,
                factor,
                inner,
                post,
            } => {
                let g = ctx.g;
                let k = self.effective_factor(idx, *factor, opts)?;
                let x = self.blocks(ctx, x, idx, "pre", *pre)?;
                let shift = opts.pre_shorten_shift.unwrap_or(k - 1);
                let shifted = shift_right(g, x, shift)?;
                let table = format!("l{idx}/rel");
                let short = shorten(ctx, shifted, self.spec.shorten, k, &format!("l{idx}/shorten"), &table)?;
                let short = self.level_forward(ctx, short, inner, idx + 1, opts)?;
                let up = upsample(ctx, x, short, self.spec.upsample, k, &format!("l{idx}/upsample"), &table)?;
                let x = g.add(x, up)?;
                self.blocks(ctx, x, idx, "post", *post)
            }
        }
    }

    /// Evaluates logits without recording gradients.
    pub fn logits<T: Float>(
        &self,
        params: &Params<T>,
        tokens: &[usize],
        batch: usize,
        len: usize,
        opts: &ForwardOptions,
    ) -> Result<Tensor<T>> {
        let g = Graph::new();
        let ctx = Ctx::eval(&g, &self.spec.cfg, params);
        let out = self.forward(&ctx, tokens, batch, len, opts)?;
        Ok((*g.value(out)).clone())
    }

    /// Greedy decoding: appends `steps` argmax tokens to `prefix`,
    /// recomputing the full forward pass at every step.
    pub fn greedy_sample<T: Float>(
        &self,
        params: &Params<T>,
        prefix: &[usize],
        steps: usize,
        opts: &ForwardOptions,
    ) -> Result<Vec<usize>> {
        let mut seq = prefix.to_vec();
        if steps == 0 {
            return Ok(seq);
        }
        let div = match opts.shorten_factor {
            Some(k) if self.spec.sfd.enabled => k,
            _ => self.spec.hierarchy.total_factor(),
        };
        let max_len = self.spec.cfg.max_len;
        if prefix.len() + steps > max_len {
            return Err(Error::Usage(format!(
                "prefix of {} plus {steps} steps exceeds max_len {max_len}",
                prefix.len()
            )));
        }
        let vocab = self.spec.cfg.vocab_size;
        for _ in 0..steps {
            let pos = seq.len();
            let len = ceil_div(pos + 1, div) * div;
            let mut window = seq.clone();
            window.resize(len, 0);
            let logits = self.logits(params, &window, 1, len, opts)?;
            let row = &logits.data()[pos * vocab..(pos + 1) * vocab];
            let next = row
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            seq.push(next);
        }
        Ok(seq)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}
