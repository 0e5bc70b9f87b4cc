//! Central finite differences against autodiff for every layer type, with
//! respect to inputs and to every parameter tensor, in f64.

use hourglass::model::{ForwardOptions, Hierarchy, Hourglass, ModelSpec, SfdSpec};
use hourglass::nn::{
    declare_attention, declare_block, rel_attention, transformer_block, AttnGeometry, Ctx,
    GeometryKind, InitScheme, ModelConfig, ParamSpecs, Params, Role,
};
use hourglass::resample::{declare_shorten, declare_upsample, shorten, upsample, ShortenMethod, UpsampleMethod};
use hourglass::tensor::{finite_diff_check, FiniteDiffReport, Graph, Tensor, Var};
use hourglass::train::lm_loss;
use hourglass::Result;

pub const EPS: f64 = 1e-3;
pub const MAX_REL: f64 = 1e-5;
const LEN: usize = 6;
const TABLE: &str = "rel";

/// Outcome of one finite-difference comparison.
#[derive(Debug)]
pub struct Check {
    pub name: String,
    pub max_rel: f64,
    /// The analytic gradient is identically zero.
    pub vanished: bool,
    detail: String,
}

impl Check {
    fn new(name: String, r: &FiniteDiffReport) -> Self {
        let i = r.worst_index;
        let detail = format!(
            "rel err {:e} at {i} (a={:e} n={:e} max={:e})",
            r.max_rel_err,
            r.analytic[i],
            r.numeric[i],
            r.analytic.iter().fold(0.0f64, |m, a| m.max(a.abs()))
        );
        Check {
            name,
            max_rel: r.max_rel_err,
            vanished: r.analytic.iter().all(|&a| a == 0.0),
            detail,
        }
    }

    pub fn ok(&self) -> bool {
        self.max_rel < MAX_REL
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.name, self.detail)
    }
}

/// Panics on the first failing check.
pub fn assert_all(checks: &[Check]) {
    for c in checks {
        assert!(c.ok(), "{c}");
    }
}

fn cfg() -> ModelConfig {
    ModelConfig {
        vocab_size: 5,
        d_model: 4,
        d_ff: 8,
        n_heads: 2,
        dropout: 0.0,
        attention_window: None,
        max_len: LEN,
    }
}

/// Deterministic, sign-varying input values.
fn input(shape: &[usize], phase: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|i| (0.9 * i as f64 + phase).sin()).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Reduces `out` to a scalar with fixed, non-uniform weights so that no
/// gradient cancels by symmetry.
fn readout(g: &Graph<f64>, out: Var) -> Result<Var> {
    let w = input(&g.shape(out), 0.37);
    let prod = g.mul(out, g.constant(w))?;
    Ok(g.sum_all(prod))
}

fn with_table(mut specs: ParamSpecs) -> ParamSpecs {
    specs.add(TABLE, &[LEN, cfg().d_model], Role::RelTable);
    specs
}

/// Checks `f(x)` with respect to `x` and to each parameter in turn.
fn check_layer<F>(name: &str, specs: &ParamSpecs, x: &Tensor<f64>, f: F) -> Vec<Check>
where
    F: Fn(&Ctx<'_, f64>, Var) -> Result<Var>,
{
    let cfg = cfg();
    let params = Params::initialize(specs, 11, InitScheme::Audit).unwrap();
    let r = finite_diff_check(
        |g, v| {
            let ctx = Ctx::eval(g, &cfg, &params);
            readout(g, f(&ctx, v)?)
        },
        x,
        EPS,
    )
    .unwrap();
    let mut out = vec![Check::new(format!("{name} input"), &r)];

    for spec in specs.iter() {
        let r = finite_diff_check(
            |g, v| {
                let ctx = Ctx::eval(g, &cfg, &params);
                ctx.bind(&spec.path, v);
                let xv = g.constant(x.clone());
                readout(g, f(&ctx, xv)?)
            },
            params.get(&spec.path).unwrap(),
            EPS,
        )
        .unwrap();
        out.push(Check::new(format!("{name} {}", spec.path), &r));
    }
    out
}

pub fn rel_attention_checks() -> Vec<Check> {
    let mut specs = ParamSpecs::new();
    declare_attention(&mut specs, "attn", &cfg());
    let specs = with_table(specs);
    let geom = AttnGeometry::new(GeometryKind::CausalSelf, LEN, 1, None);
    let x = input(&[1, LEN, 4], 0.1);
    check_layer("rel_attention", &specs, &x, |ctx, v| rel_attention(ctx, "attn", v, v, TABLE, &geom))
}

pub fn transformer_block_checks() -> Vec<Check> {
    let mut specs = ParamSpecs::new();
    declare_block(&mut specs, "block", &cfg());
    let specs = with_table(specs);
    let geom = AttnGeometry::new(GeometryKind::CausalSelf, LEN, 1, None);
    let x = input(&[2, LEN, 4], 0.2);
    check_layer("transformer_block", &specs, &x, |ctx, v| transformer_block(ctx, v, "block", TABLE, &geom))
}

pub fn shortener_checks() -> Vec<Check> {
    let k = 2;
    let mut out = Vec::new();
    for method in ShortenMethod::ALL {
        let mut specs = ParamSpecs::new();
        declare_shorten(&mut specs, "short", method, k, &cfg());
        let specs = with_table(specs);
        let x = input(&[1, LEN, 4], 0.3);
        out.extend(check_layer(method.name(), &specs, &x, |ctx, v| shorten(ctx, v, method, k, "short", TABLE)));
    }
    out
}

pub fn upsampler_checks() -> Vec<Check> {
    let k = 3;
    let mut out = Vec::new();
    for method in UpsampleMethod::ALL {
        let mut specs = ParamSpecs::new();
        declare_upsample(&mut specs, "up", method, k, &cfg());
        let specs = with_table(specs);
        let full = input(&[1, LEN, 4], 0.4);
        let short = input(&[1, LEN / k, 4], 0.5);
        // With respect to the shortened activations…
        out.extend(check_layer(&format!("{} (short)", method.name()), &specs, &short, |ctx, v| {
            let xf = ctx.g.constant(full.clone());
            upsample(ctx, xf, v, method, k, "up", TABLE)
        }));
        // …and to the full-resolution residual where the method reads it.
        if !matches!(method, UpsampleMethod::Repeat | UpsampleMethod::Linear) {
            out.extend(check_layer(&format!("{} (full)", method.name()), &specs, &full, |ctx, v| {
                let xs = ctx.g.constant(short.clone());
                upsample(ctx, v, xs, method, k, "up", TABLE)
            }));
        }
    }
    out
}

pub fn full_model_checks() -> Vec<Check> {
    let mut out = Vec::new();
    for (shorten, upsample) in [
        (ShortenMethod::AttnPoolLinear, UpsampleMethod::AttnLinearU),
        (ShortenMethod::LinearPool, UpsampleMethod::Linear),
    ] {
        let model = Hourglass::new(ModelSpec {
            cfg: cfg(),
            hierarchy: Hierarchy::parse("1@1 1@2 1@1").unwrap(),
            shorten,
            upsample,
            sfd: SfdSpec::disabled(),
        })
        .unwrap();
        let params = model.init_params::<f64>(5, InitScheme::Audit).unwrap();
        let tokens = [1usize, 4, 0, 2, 2, 3];
        for spec in model.param_specs().iter() {
            let r = finite_diff_check(
                |g, v| {
                    let ctx = Ctx::eval(g, model.cfg(), &params);
                    ctx.bind(&spec.path, v);
                    let logits = model.forward(&ctx, &tokens, 1, LEN, &ForwardOptions::default())?;
                    lm_loss(g, logits, &tokens, None)
                },
                params.get(&spec.path).unwrap(),
                EPS,
            )
            .unwrap();
            out.push(Check::new(format!("{shorten}/{upsample} {}", spec.path), &r));
        }
    }
    out
}

/// Every layer type, in a fixed order.
pub fn all_checks() -> Vec<Check> {
    let mut out = rel_attention_checks();
    out.extend(transformer_block_checks());
    out.extend(shortener_checks());
    out.extend(upsampler_checks());
    out.extend(full_model_checks());
    out
}
