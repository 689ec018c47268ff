//! Equivalence oracles: the incremental session must reproduce the batched
//! forward's next-token choices exactly, and the whole-model reverse-mode
//! gradient must match central finite differences of the same objective.

use photon_core::gradcheck::rel_err;
use photon_core::infer::{PhotonSession, Sampler};
use photon_core::model::{model_forward, HierarchyConfig, ModelParams};
use photon_core::seeded_rng;
use photon_core::tape::Tape;
use photon_core::tensor::{ops, Element, Tensor};
use photon_core::train::{token_nll, total_loss, LossWeights};

fn toy() -> (HierarchyConfig, ModelParams<Tensor<f64>>) {
    let cfg = HierarchyConfig::toy(&[2, 2], &[8, 16, 16], 1, 2, 17);
    let mut rng = seeded_rng(110);
    let params = ModelParams::init(&cfg, 0.12, &mut rng).unwrap();
    (cfg, params)
}

/// Argmax of the batched forward's row `n` (the prediction of the token
/// after an n-token prefix), with the prefix padded to the chunk grid.
fn reforward_argmax(
    cfg: &HierarchyConfig,
    params: &ModelParams<Tensor<f64>>,
    prefix: &[u32],
) -> u32 {
    let mut padded = cfg.pad_to_multiple(prefix);
    if padded.len() == prefix.len() {
        // Row `prefix.len()` must exist: extend one full chunk group.
        padded.extend(std::iter::repeat(cfg.pad_id).take(cfg.chunk_product()));
    }
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let states = model_forward(&tape, cfg, &bound, &padded).unwrap();
    let logits = tape.value(states.logits);
    let row = logits.row(prefix.len());
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

#[test]
fn greedy_stream_equals_argmax_reforward_chain() {
    let (cfg, params) = toy();
    let mut rng = seeded_rng(111);
    let prompt: Vec<u32> = (0..10)
        .map(|_| rand::Rng::gen_range(&mut rng, 0..17u32))
        .collect();
    let n = 30;

    let mut session = PhotonSession::new(&cfg, &params, 4096).unwrap();
    session.prefill(&prompt).unwrap();
    let (streamed, _) = session.generate(n, &mut Sampler::greedy()).unwrap();

    let mut chain = prompt.clone();
    for step in 0..n {
        let next = reforward_argmax(&cfg, &params, &chain);
        assert_eq!(
            next, streamed[step],
            "step {step}: stream {:?} vs chain {:?}",
            &streamed[..=step],
            &chain[prompt.len()..]
        );
        chain.push(next);
    }
}

/// Loss values recomputed with plain loops (no tape), targets frozen at the
/// supplied values; the independent oracle for both the loss arithmetic and
/// the finite-difference sweep.
struct FrozenTargets {
    rec: Vec<Tensor<f64>>,
    ctx: Vec<Tensor<f64>>,
}

fn plain_loss(
    cfg: &HierarchyConfig,
    params: &ModelParams<Tensor<f64>>,
    tokens: &[u32],
    weights: &LossWeights,
    frozen: Option<&FrozenTargets>,
) -> (f64, FrozenTargets) {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let states = model_forward(&tape, cfg, &bound, tokens).unwrap();
    let t = tokens.len();

    // Next-token NLL over rows 1..T−1, stable log-sum-exp per row.
    let logits = tape.value(states.logits);
    let mut nll_sum = 0.0;
    let mut n = 0usize;
    for i in 1..t {
        if tokens[i] == cfg.pad_id {
            continue;
        }
        let row = logits.row(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        nll_sum += z.ln() + mx - row[tokens[i] as usize];
        n += 1;
    }
    let nll = nll_sum / n as f64;

    // Targets: either frozen (finite-difference mode) or this forward's own.
    let own_rec: Vec<Tensor<f64>> = (1..=cfg.levels)
        .map(|lv| {
            if lv == 1 {
                tape.value(states.token_embeds)
            } else {
                tape.value(states.enc_x[lv - 2])
            }
        })
        .collect();
    let own_ctx: Vec<Tensor<f64>> = (1..=cfg.levels)
        .map(|lv| tape.value(states.agg[lv - 1]))
        .collect();
    let (rec_t, ctx_t) = match frozen {
        Some(f) => (&f.rec, &f.ctx),
        None => (&own_rec, &own_ctx),
    };

    let mut rec_sum = 0.0;
    let mut rec_norm = 0u64;
    for lv in 1..=cfg.levels {
        let pred = tape.value(states.rec[lv - 1]);
        let target = &rec_t[lv - 1];
        for (a, b) in pred.data().iter().zip(target.data()) {
            rec_sum += (a - b) * (a - b);
        }
        rec_norm += pred.numel() as u64;
    }
    let rec = rec_sum / rec_norm as f64;

    let mut ctx = 0.0;
    for lv in 1..=cfg.levels {
        let m = t / cfg.coarsening(lv);
        if m < 2 {
            continue;
        }
        let x = tape.value(states.enc_x[lv - 1]);
        let a = &ctx_t[lv - 1];
        let mut level_sum = 0.0;
        for g in 2..=m {
            for (p, q) in x.row(g - 2).iter().zip(a.row(g - 1)) {
                level_sum += (p - q) * (p - q);
            }
        }
        ctx += level_sum / (m - 1) as f64;
    }

    (
        nll + weights.alpha * rec + weights.beta * ctx,
        FrozenTargets {
            rec: own_rec,
            ctx: own_ctx,
        },
    )
}

#[test]
fn plain_loss_oracle_matches_tape_bundle() {
    let (cfg, params) = toy();
    let mut rng = seeded_rng(112);
    let tokens: Vec<u32> = (0..16)
        .map(|_| rand::Rng::gen_range(&mut rng, 0..17u32))
        .collect();
    let weights = LossWeights {
        alpha: 0.7,
        beta: 0.3,
    };
    let (plain, _) = plain_loss(&cfg, &params, &tokens, &weights, None);

    let tape = Tape::new();
    let bound = params.bind(&tape);
    let states = model_forward(&tape, &cfg, &bound, &tokens).unwrap();
    let (_, bundle) = total_loss(&tape, &cfg, &bound, &states, &tokens, &weights).unwrap();
    assert!(
        (plain - bundle.total).abs() < 1e-12,
        "plain {plain} vs tape {}",
        bundle.total
    );
    assert!(
        (bundle.total - (bundle.token_nll + 0.7 * bundle.rec_loss + 0.3 * bundle.context_loss))
            .abs()
            < 1e-12
    );
}

#[test]
fn whole_model_gradient_matches_finite_differences() {
    let (cfg, params) = toy();
    let mut rng = seeded_rng(113);
    let tokens: Vec<u32> = (0..16)
        .map(|_| rand::Rng::gen_range(&mut rng, 0..17u32))
        .collect();
    let weights = LossWeights {
        alpha: 0.7,
        beta: 0.3,
    };

    // Reverse-mode gradients of the full objective.
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let states = model_forward(&tape, &cfg, &bound, &tokens).unwrap();
    let (total, _) = total_loss(&tape, &cfg, &bound, &states, &tokens, &weights).unwrap();
    let grads = tape.backward(total).unwrap();
    let mut named: std::collections::BTreeMap<String, Tensor<f64>> = Default::default();
    bound.visit(&mut |name, var| {
        if let Some(g) = grads.get(*var) {
            named.insert(name, g.clone());
        }
    });

    // Frozen targets: the auxiliary losses stop gradients through their
    // target branch, so the finite-difference function holds targets at the
    // base parameters.
    let (_, frozen) = plain_loss(&cfg, &params, &tokens, &weights, None);

    // Sample parameter coordinates across all tensors.
    let mut layout: Vec<(String, usize)> = Vec::new();
    params.visit(&mut |name, t| layout.push((name, t.numel())));
    let mut worst = 0.0f64;
    for trial in 0..30 {
        let (name, numel) = &layout[rand::Rng::gen_range(&mut rng, 0..layout.len())];
        let idx = rand::Rng::gen_range(&mut rng, 0..*numel);
        let h = 1e-5;
        let eval = |delta: f64| {
            let mut p = params.clone();
            p.visit_mut(&mut |n, t| {
                if &n == name {
                    t.data_mut()[idx] += delta;
                }
            });
            plain_loss(&cfg, &p, &tokens, &weights, Some(&frozen)).0
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let analytic = named
            .get(name)
            .map(|g| g.data()[idx])
            .unwrap_or(0.0);
        let e = rel_err(analytic, numeric);
        worst = worst.max(e);
        assert!(
            e < 1e-4,
            "trial {trial}: {name}[{idx}] analytic {analytic} vs numeric {numeric} (rel {e})"
        );
    }
    assert!(worst < 1e-4);
}

#[test]
fn loss_identity_with_zero_weights_is_exact() {
    let (cfg, params) = toy();
    let mut rng = seeded_rng(114);
    let tokens: Vec<u32> = (0..16)
        .map(|_| rand::Rng::gen_range(&mut rng, 0..17u32))
        .collect();

    let run_total = || {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let states = model_forward(&tape, &cfg, &bound, &tokens).unwrap();
        let (total, bundle) =
            total_loss(&tape, &cfg, &bound, &states, &tokens, &LossWeights::TOKEN_ONLY).unwrap();
        let grads = tape.backward(total).unwrap();
        let mut named: std::collections::BTreeMap<String, Tensor<f64>> = Default::default();
        bound.visit(&mut |name, var| {
            if let Some(g) = grads.get(*var) {
                named.insert(name, g.clone());
            }
        });
        (bundle.total, named)
    };
    let run_nll_only = || {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let states = model_forward(&tape, &cfg, &bound, &tokens).unwrap();
        let (mean, _, _) = token_nll(&tape, states.logits, &tokens, cfg.pad_id).unwrap();
        let grads = tape.backward(mean).unwrap();
        let mut named: std::collections::BTreeMap<String, Tensor<f64>> = Default::default();
        bound.visit(&mut |name, var| {
            if let Some(g) = grads.get(*var) {
                named.insert(name, g.clone());
            }
        });
        (tape.value(mean).item(), named)
    };

    let (total, g_total) = run_total();
    let (nll, g_nll) = run_nll_only();
    assert_eq!(total.to_bits(), nll.to_bits(), "total must equal NLL bitwise");
    assert_eq!(g_total.len(), g_nll.len());
    for (name, g) in &g_total {
        let other = &g_nll[name];
        assert_eq!(g.shape(), other.shape());
        for (a, b) in g.data().iter().zip(other.data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "grad {name} differs bitwise");
        }
    }
}

#[test]
fn padded_reforward_rows_are_pad_invariant() {
    // The row used by the re-forward chain must not depend on pad contents.
    let (cfg, params) = toy();
    let prefix: Vec<u32> = vec![3, 1, 4, 1, 5, 9];
    let run = |pad: u32| {
        let mut padded = prefix.clone();
        while padded.len() % cfg.chunk_product() != 0 {
            padded.push(pad);
        }
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let states = model_forward(&tape, &cfg, &bound, &padded).unwrap();
        tape.value(states.logits).row(prefix.len()).to_vec()
    };
    assert_eq!(run(0), run(7));
}

#[test]
fn f32_pipeline_runs_end_to_end() {
    // The 32-bit flag exercises the same code paths at lower precision.
    let cfg = HierarchyConfig::toy(&[2, 2], &[8, 16, 16], 1, 2, 17);
    let mut rng = seeded_rng(115);
    let params = ModelParams::<Tensor<f32>>::init(&cfg, 0.12, &mut rng).unwrap();
    let tokens: Vec<u32> = (0..8).map(|i| (i % 17) as u32).collect();
    let tape: Tape<f32> = Tape::new();
    let bound = params.bind(&tape);
    let states = model_forward(&tape, &cfg, &bound, &tokens).unwrap();
    let (total, bundle) = total_loss(
        &tape,
        &cfg,
        &bound,
        &states,
        &tokens,
        &LossWeights {
            alpha: 0.5,
            beta: 0.5,
        },
    )
    .unwrap();
    assert!(bundle.total.is_finite());
    let grads = tape.backward(total).unwrap();
    assert!(grads.get(bound.lm_head).is_some());

    let mut session = PhotonSession::new(&cfg, &params, 256).unwrap();
    session.prefill(&tokens).unwrap();
    let (out, _) = session.generate(8, &mut Sampler::greedy()).unwrap();
    assert_eq!(out.len(), 8);
}
