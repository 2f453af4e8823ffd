//! The runtime oracle suite behind the `verify` subcommand: gradient and
//! HVP checks against finite differences, exact-solver checks against a
//! straight-line Gaussian elimination, stochastic-vs-exact inverse
//! agreement, and the influence-vs-leave-one-out correlation that embodies
//! the minimizer assumption. Every check prints one pass/fail row.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{synth_corpus, Dataset};
use crate::error::Result;
use crate::ihvp::{
    stochastic_ihvp, ExactSolver, IhvpConfig, IhvpMethod, ModelCurvature,
};
use crate::influence::{InfluenceEngine, Target};
use crate::model::{
    build_model_tape, data_grad, init_params, loss_grad, nll_loss, train, train_from, Checkpoint,
    Example, ModelConfig, ModelMode,
};
use crate::saliency::{token_saliency, ScoreKind};
use crate::second_order::hvp;
use crate::tape::{Bindings, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn pass(name: &'static str, detail: String) -> Self {
        CheckOutcome {
            name,
            passed: true,
            detail,
        }
    }

    fn fail(name: &'static str, detail: String) -> Self {
        CheckOutcome {
            name,
            passed: false,
            detail,
        }
    }

    fn from_bound(name: &'static str, value: f64, bound: f64) -> Self {
        CheckOutcome {
            name,
            passed: value < bound,
            detail: format!("{value:.3e} (bound {bound:.0e})"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    /// Train split to verify against; a deterministic synthetic corpus is
    /// generated when absent.
    pub corpus: Option<Dataset>,
    pub damping: f64,
    pub scale: Option<f64>,
    pub depth: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            corpus: None,
            damping: 1e-3,
            scale: None,
            depth: 2000,
            repeats: 8,
            seed: 0,
        }
    }
}

fn inf_rel_err(a: &[f64], b: &[f64], atol: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        let diff = (x - y).abs();
        if diff < atol {
            continue;
        }
        worst = worst.max(diff / x.abs().max(y.abs()));
    }
    worst
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if den == 0.0 {
        diff
    } else {
        diff / den
    }
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
        let mut r = vec![0.0; v.len()];
        for (pos, &i) in idx.iter().enumerate() {
            r[i] = pos as f64;
        }
        r
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let mean = (n - 1.0) / 2.0;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        da += (x - mean) * (x - mean);
        db += (y - mean) * (y - mean);
    }
    num / (da.sqrt() * db.sqrt())
}

/// Leave-one-out ground truth: actually retrain without one example,
/// warm-started from the base parameters (the convex objective has a
/// unique minimizer, so the warm start changes nothing but the runtime).
pub fn loo_retrain(
    corpus: &Dataset,
    cfg: &ModelConfig,
    base: &Checkpoint,
    remove_id: usize,
) -> Result<Checkpoint> {
    let mut reduced = corpus.clone();
    reduced.examples.remove(remove_id);
    train_from(&reduced, cfg, base.theta.clone())
}

fn random_example(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Example {
    let n = rng.gen_range(2..8);
    let tokens = (0..n)
        .map(|_| rng.gen_range(0..cfg.vocab_size as u32))
        .collect();
    Example::new(tokens, rng.gen_range(0..cfg.c as u32))
}

fn random_config(rng: &mut ChaCha8Rng, mode: ModelMode) -> ModelConfig {
    ModelConfig {
        mode,
        vocab_size: rng.gen_range(6..14),
        d: rng.gen_range(2..5),
        h: rng.gen_range(2..5),
        c: rng.gen_range(2..4),
        unk_id: 0,
        seed: rng.gen(),
        lr: 0.5,
        epochs: 1,
        l2: if rng.gen_bool(0.5) { 1e-3 } else { 0.0 },
    }
}

fn perturbed(theta: &crate::params::ParamVector, rng: &mut ChaCha8Rng) -> crate::params::ParamVector {
    let mut t = theta.clone();
    for x in t.data_mut() {
        *x += rng.gen::<f64>() * 0.4 - 0.2;
    }
    t
}

/// Tape gradient vs central finite differences on random models.
fn check_grad_fd(mode: ModelMode, draws: usize, seed: u64) -> CheckOutcome {
    let name = match mode {
        ModelMode::Mlp => "gradient_vs_fd_mlp",
        ModelMode::Convex => "gradient_vs_fd_convex",
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let cfg = random_config(&mut rng, mode);
        let theta = match init_params(&cfg) {
            Ok(t) => perturbed(&t, &mut rng),
            Err(e) => return CheckOutcome::fail(name, e.to_string()),
        };
        let z = random_example(&mut rng, &cfg);
        let (_, analytic) = match loss_grad(&z, &theta, &cfg) {
            Ok(v) => v,
            Err(e) => return CheckOutcome::fail(name, e.to_string()),
        };
        let base = theta.extract_trainable();
        let h = 1e-4;
        let mut numeric = Vec::with_capacity(base.len());
        let mut buf = base.clone();
        for i in 0..base.len() {
            let probe = |v: f64, buf: &mut Vec<f64>| -> f64 {
                buf[i] = base[i] + v;
                let mut th = theta.clone();
                th.set_trainable(buf);
                buf[i] = base[i];
                nll_loss(&z, &th, &cfg).unwrap()
            };
            let up = probe(h, &mut buf);
            let down = probe(-h, &mut buf);
            numeric.push((up - down) / (2.0 * h));
        }
        worst = worst.max(inf_rel_err(&analytic, &numeric, 1e-12));
    }
    CheckOutcome::from_bound(name, worst, 1e-5)
}

/// Engine HVP vs finite differences of gradients, plus the closed-form
/// quadratic case.
fn check_hvp(seed: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    // quadratic: loss = 0.5 theta' A theta on the tape
    {
        let p = 7;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = vec![0.0; p * p];
        for i in 0..p {
            for j in 0..=i {
                let v = rng.gen::<f64>() - 0.5;
                a[i * p + j] = v;
                a[j * p + i] = v;
            }
        }
        let mut tape = Tape::new();
        let theta = tape.var("theta", &[p, 1]).unwrap();
        let ac = tape.constant(Tensor::new(vec![p, p], a.clone()).unwrap());
        let atheta = tape.matmul(ac, theta).unwrap();
        let q = tape.dot(theta, atheta).unwrap();
        let loss = tape.scale(q, 0.5).unwrap();
        let params = crate::params::ParamVector::new(&[("theta", vec![p, 1], true)]);
        let tvals: Vec<f64> = (0..p).map(|_| rng.gen::<f64>() - 0.5).collect();
        let v: Vec<f64> = (0..p).map(|_| rng.gen::<f64>() - 0.5).collect();
        let mut b = Bindings::new();
        b.set("theta", Tensor::new(vec![p, 1], tvals).unwrap());
        match hvp(&mut tape, loss, &params, &v, &b) {
            Ok(hv) => {
                let want: Vec<f64> = (0..p)
                    .map(|i| (0..p).map(|j| a[i * p + j] * v[j]).sum())
                    .collect();
                let err = rel_l2(&hv, &want);
                out.push(CheckOutcome::from_bound("hvp_quadratic_exact", err, 1e-12));
            }
            Err(e) => out.push(CheckOutcome::fail("hvp_quadratic_exact", e.to_string())),
        }
    }
    // random models vs (grad(theta + hv) - grad(theta - hv)) / 2h
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let mut worst: f64 = 0.0;
        for _ in 0..6 {
            let cfg = random_config(&mut rng, ModelMode::Mlp);
            let theta = perturbed(&init_params(&cfg).unwrap(), &mut rng);
            let z = random_example(&mut rng, &cfg);
            let pt = theta.trainable_len();
            let v: Vec<f64> = (0..pt).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();

            let mt = build_model_tape(&z.tokens, z.label, &cfg).unwrap();
            let mut tape = mt.tape;
            let analytic = hvp(&mut tape, mt.loss, &theta, &v, &theta.bindings()).unwrap();

            let h = 1e-4;
            let base = theta.extract_trainable();
            let at = |scale: f64| -> Vec<f64> {
                let shifted: Vec<f64> =
                    base.iter().zip(&v).map(|(t, vi)| t + scale * vi).collect();
                let mut th = theta.clone();
                th.set_trainable(&shifted);
                loss_grad(&z, &th, &cfg).unwrap().1
            };
            let gu = at(h);
            let gd = at(-h);
            let numeric: Vec<f64> = gu
                .iter()
                .zip(&gd)
                .map(|(u, d)| (u - d) / (2.0 * h))
                .collect();
            worst = worst.max(rel_l2(&analytic, &numeric));
        }
        out.push(CheckOutcome::from_bound("hvp_vs_fd_of_gradients", worst, 1e-4));
    }
    out
}

/// Hand-rolled backward pass against the tape gradient.
fn check_fast_vs_tape(seed: u64) -> CheckOutcome {
    let name = "fast_gradient_vs_tape";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for mode in [ModelMode::Mlp, ModelMode::Convex] {
        for _ in 0..4 {
            let cfg = random_config(&mut rng, mode);
            let theta = perturbed(&init_params(&cfg).unwrap(), &mut rng);
            let z = random_example(&mut rng, &cfg);
            let (_, fast) = loss_grad(&z, &theta, &cfg).unwrap();
            let mt = build_model_tape(&z.tokens, z.label, &cfg).unwrap();
            let mut tape = mt.tape;
            let names: Vec<String> = theta
                .trainable_segments()
                .map(|s| s.name.clone())
                .collect();
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let grads = tape.gradient(mt.loss, &refs, &theta.bindings()).unwrap();
            let mut flat = Vec::new();
            for n in &refs {
                flat.extend_from_slice(grads[*n].data());
            }
            worst = worst.max(inf_rel_err(&fast, &flat, 1e-13));
        }
    }
    CheckOutcome::from_bound(name, worst, 1e-10)
}

fn gauss_solve(n: usize, a_in: &[f64], b_in: &[f64]) -> Vec<f64> {
    let mut a = a_in.to_vec();
    let mut b = b_in.to_vec();
    for col in 0..n {
        let mut pivot = col;
        for row in (col + 1)..n {
            if a[row * n + col].abs() > a[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * n + col];
        for row in (col + 1)..n {
            let factor = a[row * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in (row + 1)..n {
            acc -= a[row * n + k] * x[k];
        }
        x[row] = acc / a[row * n + row];
    }
    x
}

struct ConvexFixture {
    corpus: Dataset,
    cfg: ModelConfig,
    checkpoint: Checkpoint,
}

fn convex_fixture(corpus: Option<&Dataset>, l2: f64, seed: u64) -> Result<ConvexFixture> {
    let corpus = match corpus {
        Some(c) => c.clone(),
        None => synth_corpus(seed.wrapping_add(17), 200, 10, 10, 0.0)?.0,
    };
    let cfg = ModelConfig {
        mode: ModelMode::Convex,
        vocab_size: corpus.vocab.len(),
        d: 10,
        h: 0,
        c: corpus.max_label() as usize + 1,
        unk_id: 0,
        seed: 3,
        lr: 2.0,
        epochs: 150_000,
        l2,
    };
    let checkpoint = train(&corpus, &cfg)?;
    Ok(ConvexFixture {
        corpus,
        cfg,
        checkpoint,
    })
}

fn check_exact_solver(fx: &ConvexFixture, opts: &VerifyOptions) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let mut curv = match ModelCurvature::new(&fx.corpus, &fx.checkpoint.theta, &fx.cfg) {
        Ok(c) => c,
        Err(e) => return vec![CheckOutcome::fail("ihvp_exact_residual", e.to_string())],
    };
    let solver = match ExactSolver::prepare(&mut curv, opts.damping) {
        Ok(s) => s,
        Err(e) => {
            return vec![
                CheckOutcome::fail("ihvp_exact_residual", e.to_string()),
                CheckOutcome::fail("ihvp_exact_vs_gauss_oracle", "solver unavailable".into()),
            ]
        }
    };
    let p = solver.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7e57);
    let v: Vec<f64> = (0..p).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    match solver.solve(&v) {
        Ok(u) => {
            let mut back = vec![0.0; p];
            solver.matrix().matvec(&u, &mut back);
            out.push(CheckOutcome::from_bound(
                "ihvp_exact_residual",
                rel_l2(&back, &v),
                1e-10,
            ));
            let oracle = gauss_solve(p, solver.matrix().data(), &v);
            out.push(CheckOutcome::from_bound(
                "ihvp_exact_vs_gauss_oracle",
                rel_l2(&u, &oracle),
                1e-8,
            ));
        }
        Err(e) => out.push(CheckOutcome::fail("ihvp_exact_residual", e.to_string())),
    }
    out
}

fn check_damping_toy(opts: &VerifyOptions) -> CheckOutcome {
    // softmax shift invariance makes the undamped, unridged Hessian
    // exactly singular; only the damping keeps this solvable
    let name = "exact_ihvp_on_degenerate_toy";
    let fx = match convex_fixture(None, 0.0, opts.seed.wrapping_add(5)) {
        Ok(f) => f,
        Err(e) => return CheckOutcome::fail(name, e.to_string()),
    };
    let mut curv = match ModelCurvature::new(&fx.corpus, &fx.checkpoint.theta, &fx.cfg) {
        Ok(c) => c,
        Err(e) => return CheckOutcome::fail(name, e.to_string()),
    };
    match ExactSolver::prepare(&mut curv, opts.damping) {
        Ok(_) => CheckOutcome::pass(name, format!("solvable at damping {:.0e}", opts.damping)),
        Err(e) => CheckOutcome::fail(name, e.to_string()),
    }
}

fn check_stochastic(fx: &ConvexFixture, opts: &VerifyOptions) -> CheckOutcome {
    let name = "ihvp_stochastic_vs_exact";
    let mut curv = match ModelCurvature::new(&fx.corpus, &fx.checkpoint.theta, &fx.cfg) {
        Ok(c) => c,
        Err(e) => return CheckOutcome::fail(name, e.to_string()),
    };
    let solver = match ExactSolver::prepare(&mut curv, opts.damping) {
        Ok(s) => s,
        Err(e) => return CheckOutcome::fail(name, e.to_string()),
    };
    let p = solver.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let icfg = IhvpConfig {
        method: IhvpMethod::Stochastic,
        damping: opts.damping,
        scale: opts.scale,
        depth: opts.depth,
        repeats: opts.repeats,
        seed: opts.seed,
    };
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let v: Vec<f64> = (0..p).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let exact = match solver.solve(&v) {
            Ok(u) => u,
            Err(e) => return CheckOutcome::fail(name, e.to_string()),
        };
        match stochastic_ihvp(&mut curv, &icfg, &v) {
            Ok(est) => worst = worst.max(rel_l2(&est.value, &exact)),
            Err(e) => return CheckOutcome::fail(name, e.to_string()),
        }
    }
    CheckOutcome::from_bound(name, worst, 0.05)
}

fn check_influence_vs_loo(opts: &VerifyOptions) -> CheckOutcome {
    let name = "influence_vs_leave_one_out";
    let fx = match convex_fixture(None, 1e-3, opts.seed.wrapping_add(29)) {
        Ok(f) => f,
        Err(e) => return CheckOutcome::fail(name, e.to_string()),
    };
    let (_, _, test_set, _) = match synth_corpus(opts.seed.wrapping_add(17), 200, 10, 10, 0.0) {
        Ok(t) => t,
        Err(e) => return CheckOutcome::fail(name, e.to_string()),
    };
    match influence_vs_loo(&fx.corpus, &fx.cfg, &fx.checkpoint, &test_set.examples[0], 10) {
        Ok((rho, signs)) => CheckOutcome {
            name,
            passed: rho >= 0.9 && signs >= 0.9,
            detail: format!("spearman {rho:.3}, sign agreement {signs:.2}"),
        },
        Err(e) => CheckOutcome::fail(name, e.to_string()),
    }
}

/// Predicted vs realized leave-one-out change of a test token's saliency,
/// over the `top` training points by gradient norm. Returns the Spearman
/// correlation and the sign-agreement rate.
pub fn influence_vs_loo(
    corpus: &Dataset,
    cfg: &ModelConfig,
    checkpoint: &Checkpoint,
    test_example: &Example,
    top: usize,
) -> Result<(f64, f64)> {
    let n = corpus.examples.len() as f64;
    let report = token_saliency(
        test_example,
        test_example.label,
        &checkpoint.theta,
        cfg,
        ScoreKind::default(),
    )?;
    let pos = report.top_position();
    let base_s = report.tokens[pos].score;
    let target = Target::saliency(
        test_example,
        pos,
        test_example.label,
        &checkpoint.theta,
        cfg,
        ScoreKind::default(),
    )?;
    let ihvp = IhvpConfig {
        damping: 0.0,
        ..IhvpConfig::default()
    };
    let mut engine = InfluenceEngine::new(corpus, &checkpoint.theta, cfg, ihvp)?;
    engine.prepare_target(&target)?;

    // the `top` training points with the largest gradient norm
    let mut by_norm: Vec<(usize, f64)> = (0..corpus.examples.len())
        .map(|i| {
            let g = data_grad(&corpus.examples[i], &checkpoint.theta, cfg)?;
            Ok((i, g.iter().map(|x| x * x).sum::<f64>().sqrt()))
        })
        .collect::<Result<_>>()?;
    by_norm.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

    let mut predicted = Vec::new();
    let mut actual = Vec::new();
    for &(id, _) in by_norm.iter().take(top) {
        let influence = engine.influence_of_train(id)?;
        predicted.push(-influence / n);
        let retrained = loo_retrain(corpus, cfg, checkpoint, id)?;
        let new_s = token_saliency(
            test_example,
            test_example.label,
            &retrained.theta,
            cfg,
            ScoreKind::default(),
        )?
        .tokens[pos]
            .score;
        actual.push(new_s - base_s);
    }
    let rho = spearman(&predicted, &actual);
    let signs = predicted
        .iter()
        .zip(&actual)
        .filter(|(p, a)| (p.is_sign_positive() && a.is_sign_positive())
            || (p.is_sign_negative() && a.is_sign_negative()))
        .count() as f64
        / predicted.len() as f64;
    Ok((rho, signs))
}

/// Runs the whole suite; the caller renders the table and exit code.
pub fn run_all(opts: &VerifyOptions) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    out.push(check_grad_fd(ModelMode::Mlp, 10, opts.seed.wrapping_add(1)));
    out.push(check_grad_fd(ModelMode::Convex, 10, opts.seed.wrapping_add(2)));
    out.extend(check_hvp(opts.seed.wrapping_add(3)));
    out.push(check_fast_vs_tape(opts.seed.wrapping_add(4)));
    let fx = convex_fixture(opts.corpus.as_ref(), 5e-2, opts.seed)?;
    out.extend(check_exact_solver(&fx, opts));
    out.push(check_damping_toy(opts));
    out.push(check_stochastic(&fx, opts));
    out.push(check_influence_vs_loo(opts));
    Ok(out)
}
