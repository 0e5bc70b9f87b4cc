use proptest::prelude::*;

use hourglass::audit::{audit_cell, AuditCell};
use hourglass::data::{gen_repeats, Batcher, Corpus, RepeatsTask};
use hourglass::model::{ForwardOptions, Hierarchy, Hourglass, ModelSpec, SfdSpec};
use hourglass::nn::{
    declare_attention, declare_block, rel_attention, rel_attention_with_weights, transformer_block,
    AttnGeometry, Ctx, GeometryKind, InitScheme, ModelConfig, ParamSpecs, Params, Role,
};
use hourglass::resample::{
    declare_shorten, declare_upsample, shorten, upsample, ShortenMethod, UpsampleMethod,
};
use hourglass::tensor::{Graph, Tensor};
use hourglass::train::{bpc, lm_loss, plan_windows};

fn tiny(vocab: usize, max_len: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: 8,
        d_ff: 16,
        n_heads: 2,
        dropout: 0.0,
        attention_window: None,
        max_len,
    }
}

fn shorten_method() -> impl Strategy<Value = ShortenMethod> {
    prop::sample::select(ShortenMethod::ALL.to_vec())
}

fn upsample_method() -> impl Strategy<Value = UpsampleMethod> {
    prop::sample::select(UpsampleMethod::ALL.to_vec())
}

fn values(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.61 + seed as f64).sin()).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

fn hourglass(h: &str, cfg: ModelConfig, s: ShortenMethod, u: UpsampleMethod) -> Hourglass {
    Hourglass::new(ModelSpec {
        cfg,
        hierarchy: Hierarchy::parse(h).unwrap(),
        shorten: s,
        upsample: u,
        sfd: SfdSpec::disabled(),
    })
    .unwrap()
}

/// Valid hierarchy text: a palindromic factor ladder with arbitrary layer counts.
fn hierarchy_text() -> impl Strategy<Value = String> {
    (1usize..=3, prop::collection::vec(2usize..=4, 1..=3), prop::collection::vec(0usize..=3, 7))
        .prop_map(|(core, factors, layers)| {
            let mut res = vec![1usize];
            for f in &factors {
                res.push(res.last().unwrap() * f);
            }
            let n = res.len();
            let mut parts = Vec::new();
            for (i, r) in res.iter().enumerate().take(n - 1) {
                parts.push(format!("{}@{r}", layers[i]));
            }
            parts.push(format!("{core}@{}", res[n - 1]));
            for (i, r) in res.iter().enumerate().take(n - 1).rev() {
                parts.push(format!("{}@{r}", layers[i + 3]));
            }
            parts.join(" ")
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hierarchy_display_round_trips(text in hierarchy_text()) {
        let h = Hierarchy::parse(&text).unwrap();
        let again = Hierarchy::parse(&h.to_string()).unwrap();
        prop_assert_eq!(&h, &again);
        let product: usize = h.root().factors().iter().product();
        prop_assert_eq!(h.total_factor(), product);
    }

    #[test]
    fn eval_windows_score_every_position_once(
        n in 1usize..400,
        window in 1usize..64,
        stride_frac in 0.0f64..1.0,
    ) {
        let stride = 1 + ((window - 1) as f64 * stride_frac) as usize;
        prop_assume!(n >= window);
        let plan = plan_windows(n, window, stride, stride).unwrap();
        let mut coverage = vec![0u32; n];
        for w in &plan {
            prop_assert!(w.start + w.len <= n);
            for c in &mut coverage[w.start + w.score_from..w.start + w.len] {
                *c += 1;
            }
        }
        prop_assert!(coverage.iter().all(|&c| c == 1), "{:?}", coverage);
    }

    #[test]
    fn batch_targets_are_one_step_shifts(
        bytes in prop::collection::vec(any::<u8>(), 64..400),
        len in 2usize..16,
        step in 0u64..50,
        seed in any::<u64>(),
    ) {
        prop_assume!((bytes.len() - 1) / len >= 2);
        let mut b = Batcher::new(&bytes, len, 2, seed).unwrap();
        let batch = b.batch(step);
        for (row, start) in b.starts(step).into_iter().enumerate() {
            let inp = &batch.inputs[row * len..(row + 1) * len];
            let tgt = &batch.targets[row * len..(row + 1) * len];
            prop_assert_eq!(&inp[1..], &tgt[..len - 1]);
            prop_assert_eq!(tgt[len - 1], bytes[start + len] as usize);
        }
    }

    #[test]
    fn split_boundaries_are_offset_arithmetic(n in 3usize..5000) {
        let bytes: Vec<u8> = (0..n).map(|i| (i % 251) as u8).collect();
        let c = Corpus::from_bytes(&bytes, [0.9, 0.05, 0.05], None).unwrap();
        prop_assert_eq!(c.train.len() + c.valid.len() + c.test.len(), n);
        prop_assert_eq!(&bytes[..c.train.len()], &c.train[..]);
        prop_assert_eq!(&bytes[n - c.test.len()..], &c.test[..]);
        let again = Corpus::from_bytes(&bytes, [0.9, 0.05, 0.05], None).unwrap();
        prop_assert_eq!(c.train.len(), again.train.len());
    }

    #[test]
    fn uniform_logits_give_log2_v_bits(v in 2usize..300, len in 1usize..8) {
        let g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(&[1, len, v]));
        let targets: Vec<usize> = (0..len).map(|i| (i * 7) % v).collect();
        let loss = lm_loss(&g, logits, &targets, None).unwrap();
        let nats = g.value(loss).item();
        prop_assert!(nats > 0.0);
        prop_assert!((bpc(nats) - (v as f64).log2()).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, seed in 0u64..100) {
        let g = Graph::<f64>::new();
        let x = g.constant(values(&[rows, cols], seed).cast());
        let y = g.value(g.softmax(x, None).unwrap());
        for r in y.data().chunks(cols) {
            prop_assert!(r.iter().all(|&p| p >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_and_reshape_preserve_values(a in 1usize..5, b in 1usize..5, c in 1usize..5) {
        let g = Graph::<f64>::new();
        let t = values(&[a, b, c], 3);
        let x = g.constant(t.clone());
        let y = g.value(g.reshape(g.transpose(x).unwrap(), &[a * b * c]).unwrap());
        let mut before = t.data().to_vec();
        let mut after = y.data().to_vec();
        before.sort_by(f64::total_cmp);
        after.sort_by(f64::total_cmp);
        prop_assert_eq!(before, after);
    }

    #[test]
    fn resamplers_obey_length_algebra(
        s in shorten_method(),
        u in upsample_method(),
        k in 2usize..=4,
        groups in 1usize..4,
    ) {
        let l = k * groups;
        let cfg = tiny(4, l);
        let mut specs = ParamSpecs::new();
        declare_shorten(&mut specs, "s", s, k, &cfg);
        declare_upsample(&mut specs, "u", u, k, &cfg);
        specs.add("rel", &[l, cfg.d_model], Role::RelTable);
        let params = Params::<f64>::initialize(&specs, 1, InitScheme::Audit).unwrap();
        let g = Graph::new();
        let ctx = Ctx::eval(&g, &cfg, &params);
        let x = g.constant(values(&[2, l, cfg.d_model], 1));
        let short = shorten(&ctx, x, s, k, "s", "rel").unwrap();
        prop_assert_eq!(g.shape(short), vec![2, groups, cfg.d_model]);
        let up = upsample(&ctx, x, short, u, k, "u", "rel").unwrap();
        prop_assert_eq!(g.shape(up), vec![2, l, cfg.d_model]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Changing token `j` leaves every logit row `p <= j` bitwise unchanged.
    #[test]
    fn model_is_causal_under_token_edits(
        s in shorten_method(),
        u in upsample_method(),
        k in 2usize..=3,
        depth in 1usize..=2,
        seed in 0u64..1000,
        edit in any::<prop::sample::Index>(),
    ) {
        let h = if depth == 1 {
            format!("1@1 1@{k} 1@1")
        } else {
            format!("1@1 1@{k} 1@{} 1@{k} 1@1", k * k)
        };
        let len = k.pow(depth as u32) * 2;
        let model = hourglass(&h, tiny(6, len), s, u);
        let params = model.init_params::<f64>(seed, InitScheme::Audit).unwrap();
        let tokens: Vec<usize> = (0..len).map(|i| (i * 5 + seed as usize) % 6).collect();
        let j = edit.index(len);
        let mut edited = tokens.clone();
        edited[j] = (edited[j] + 1) % 6;
        let opts = ForwardOptions::default();
        let a = model.logits(&params, &tokens, 1, len, &opts).unwrap();
        let b = model.logits(&params, &edited, 1, len, &opts).unwrap();
        let v = 6;
        for p in 0..=j {
            prop_assert_eq!(&a.data()[p * v..(p + 1) * v], &b.data()[p * v..(p + 1) * v], "row {}", p);
        }
        if j + 1 < len {
            prop_assert_ne!(&a.data()[(j + 1) * v..], &b.data()[(j + 1) * v..]);
        }
    }

    /// Sequences in a batch do not influence each other.
    #[test]
    fn batch_rows_are_independent(
        s in shorten_method(),
        u in upsample_method(),
        seed in 0u64..1000,
    ) {
        let len = 12;
        let model = hourglass("1@1 1@3 1@1", tiny(6, len), s, u);
        let params = model.init_params::<f64>(seed, InitScheme::Audit).unwrap();
        let a: Vec<usize> = (0..len).map(|i| (i * 5 + seed as usize) % 6).collect();
        let b: Vec<usize> = (0..len).map(|i| (i * 3 + 1 + seed as usize) % 6).collect();
        let opts = ForwardOptions::default();
        let both = model.logits(&params, &[a.clone(), b.clone()].concat(), 2, len, &opts).unwrap();
        let alone_a = model.logits(&params, &a, 1, len, &opts).unwrap();
        let alone_b = model.logits(&params, &b, 1, len, &opts).unwrap();
        let half = both.data().len() / 2;
        for (x, y) in both.data()[..half].iter().zip(alone_a.data()).chain(both.data()[half..].iter().zip(alone_b.data())) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Exact zero dependency of `logits[p]` on `input[j]`, `j >= p`, for
    /// hierarchies up to three shortenings deep.
    #[test]
    fn jacobian_audit_passes_up_to_depth_three(
        s in shorten_method(),
        u in upsample_method(),
        k in 2usize..=3,
        depth in 1usize..=3,
        seed in 0u64..1000,
    ) {
        let hierarchy = hourglass::audit::grid_hierarchy(k, depth);
        let len = hierarchy.total_factor() * if depth == 3 && k == 3 { 1 } else { 2 };
        let report = audit_cell(
            &AuditCell { hierarchy, shorten: s, upsample: u, len, seed, sabotage_shift: None },
            1e-12,
        )
        .unwrap();
        prop_assert!(report.pass, "{:?}", report.worst);
    }
}

#[test]
fn identical_forwards_are_bit_identical() {
    let model = hourglass("1@1 2@2 1@1", tiny(6, 8), ShortenMethod::AttnPoolLinear, UpsampleMethod::AttnLinearU);
    let params = model.init_params::<f32>(3, InitScheme::Standard).unwrap();
    let tokens = [1, 2, 3, 4, 5, 0, 1, 2];
    let a = model.logits(&params, &tokens, 1, 8, &ForwardOptions::default()).unwrap();
    let b = model.logits(&params, &tokens, 1, 8, &ForwardOptions::default()).unwrap();
    assert_eq!(a, b);
}

fn block_setup(len: usize, window: Option<usize>) -> (ModelConfig, Params<f64>) {
    let cfg = ModelConfig {
        attention_window: window,
        ..tiny(4, len)
    };
    let mut specs = ParamSpecs::new();
    declare_block(&mut specs, "b", &cfg);
    declare_attention(&mut specs, "a", &cfg);
    specs.add("rel", &[len, cfg.d_model], Role::RelTable);
    (cfg, Params::initialize(&specs, 9, InitScheme::Audit).unwrap())
}

#[test]
fn zero_projections_make_a_block_the_identity() {
    let len = 6;
    let (cfg, mut params) = block_setup(len, None);
    params.zero_matching(&["attn/o", "ff/fc2/w", "ff/fc2/b"]);
    let g = Graph::new();
    let ctx = Ctx::eval(&g, &cfg, &params);
    let x = g.constant(values(&[1, len, cfg.d_model], 2));
    let geom = AttnGeometry::new(GeometryKind::CausalSelf, len, 1, None);
    let y = transformer_block(&ctx, x, "b", "rel", &geom).unwrap();
    assert_eq!(*g.value(y), *g.value(x));
}

#[test]
fn attention_weights_sum_to_one_over_allowed_keys() {
    let len = 7;
    let (cfg, params) = block_setup(len, Some(3));
    let g = Graph::new();
    let ctx = Ctx::eval(&g, &cfg, &params);
    let x = g.constant(values(&[1, len, cfg.d_model], 4));
    for kind in [GeometryKind::CausalSelf, GeometryKind::LocalSelf] {
        let geom = AttnGeometry::new(kind, len, 1, cfg.attention_window);
        let (_, w) = rel_attention_with_weights(&ctx, "a", x, x, "rel", &geom).unwrap();
        let w = g.value(w);
        for (r, row) in w.data().chunks(len).enumerate() {
            let q = r % len;
            let allowed: f64 = (0..len).filter(|&c| geom.allowed(q, c)).map(|c| row[c]).sum();
            assert!((allowed - 1.0).abs() < 1e-12, "{kind:?} query {q}: {allowed}");
            for c in (0..len).filter(|&c| !geom.allowed(q, c)) {
                assert!(row[c] < 1e-30, "{kind:?} masked ({q}, {c}) = {}", row[c]);
            }
        }
    }
}

/// With a local window, outputs depend only on relative offsets: running
/// on a suffix of the sequence reproduces the outputs wherever the window
/// lies inside the suffix.
#[test]
fn relative_attention_is_translation_consistent() {
    let (len, w, cut) = (10, 3, 4);
    let (cfg, params) = block_setup(len, Some(w));
    let run = |x: &Tensor<f64>| {
        let g = Graph::new();
        let ctx = Ctx::eval(&g, &cfg, &params);
        let l = x.shape()[1];
        let geom = AttnGeometry::new(GeometryKind::LocalSelf, l, 1, Some(w));
        let xv = g.constant(x.clone());
        let out = rel_attention(&ctx, "a", xv, xv, "rel", &geom).unwrap();
        (*g.value(out)).clone()
    };
    let d = cfg.d_model;
    let full = values(&[1, len, d], 5);
    let suffix = Tensor::from_f64(&[1, len - cut, d], &full.to_f64_vec()[cut * d..]).unwrap();
    let (a, b) = (run(&full), run(&suffix));
    for p in cut + w - 1..len {
        let ra = &a.data()[p * d..(p + 1) * d];
        let rb = &b.data()[(p - cut) * d..(p - cut + 1) * d];
        for (x, y) in ra.iter().zip(rb) {
            assert!((x - y).abs() < 1e-12, "position {p}: {x} vs {y}");
        }
    }
}

/// Without full-resolution layers, a logit row cannot see the tokens of
/// its own shortening group except the one just before it, which reaches
/// it through the residual path.
#[test]
fn zero_vanilla_rows_ignore_their_group() {
    for k in [2usize, 3, 4] {
        let len = 4 * k;
        let hierarchy = Hierarchy::parse(&format!("0@1 2@{k} 0@1")).unwrap();
        let report = audit_cell(
            &AuditCell { hierarchy, shorten: ShortenMethod::LinearPool, upsample: UpsampleMethod::Linear, len, seed: 3, sabotage_shift: None },
            1e-12,
        )
        .unwrap();
        assert!(report.pass);
        for p in 0..len {
            for j in (p / k) * k..p.saturating_sub(1) {
                assert_eq!(report.entry(p, j), 0.0, "k={k}: logits[{p}] sees input[{j}]");
            }
            if p >= 1 {
                assert!(report.entry(p, p - 1) > 0.0, "k={k}: residual edge {p}<-{}", p - 1);
            }
        }
    }
}

#[test]
fn repeats_task_predictability() {
    let task = RepeatsTask::new(4, 384).unwrap();
    let r = gen_repeats(&task, 64, 1);
    let mut counts = [0usize; 4];
    for s in &r.sequences {
        for c in s.chunks(3) {
            assert_eq!(c[1], task.separator());
            assert_eq!(c[2], c[0]);
            counts[c[0]] += 1;
        }
    }
    let n: usize = counts.iter().sum();
    let entropy: f64 = counts.iter().map(|&c| c as f64 / n as f64).map(|p| -p * p.log2()).sum();
    assert!((entropy - 2.0).abs() < 0.01, "{entropy}");
}

#[test]
fn sfd_registry_evaluates_at_every_trained_factor_only() {
    let model = Hourglass::new(ModelSpec {
        cfg: tiny(6, 12),
        hierarchy: Hierarchy::parse("1@1 1@2 1@1").unwrap(),
        shorten: ShortenMethod::AvgPool,
        upsample: UpsampleMethod::Repeat,
        sfd: SfdSpec::new(&[2, 3]),
    })
    .unwrap();
    let params = model.init_params::<f64>(0, InitScheme::Standard).unwrap();
    let tokens: Vec<usize> = (0..12).map(|i| i % 6).collect();
    for k in [2, 3] {
        let opts = ForwardOptions { shorten_factor: Some(k), ..ForwardOptions::default() };
        let l = model.logits(&params, &tokens, 1, 12, &opts).unwrap();
        assert!(l.data().iter().all(|x| x.is_finite()));
    }
    for k in [1, 4, 6] {
        let opts = ForwardOptions { shorten_factor: Some(k), ..ForwardOptions::default() };
        assert!(model.logits(&params, &tokens, 1, 12, &opts).is_err(), "k={k}");
    }
}
