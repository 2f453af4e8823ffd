//! Inverse-Hessian-vector products: an exact dense solver for small P and
//! the stochastic single-sample estimator.
//!
//! The Hessian here is always the damped average-loss Hessian H + lambda I
//! over the trainable subspace. The exact route assembles H column by
//! column from Hessian-vector products and factors it once; the stochastic
//! route runs the truncated-Neumann recursion
//!
//!   h_0 = v,   h_j = v + (I - sigma (H_zj + lambda I)) h_{j-1}
//!
//! with one uniformly drawn training point per step, repeated r times and
//! averaged; sigma rescales the spectrum into the convergence region and is
//! divided back out of the result. Per-sample Hessians are never formed:
//! each step is a single HVP against the current iterate.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{l2_norm, ldlt, DenseMatrix, LdltFactor};
use crate::model::{build_model_tape, ModelConfig};
use crate::params::ParamVector;
use crate::second_order::{bind_hvp_vector, hvp_nodes};
use crate::tape::{Bindings, Evaluator, NodeId, Tape};

/// Dense assembly/factorization cap on the trainable parameter count.
pub const DENSE_CAP: usize = 4096;

const DIVERGENCE_FACTOR: f64 = 1e8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IhvpMethod {
    Exact,
    Stochastic,
}

impl IhvpMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            IhvpMethod::Exact => "exact",
            IhvpMethod::Stochastic => "stochastic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(IhvpMethod::Exact),
            "stochastic" => Ok(IhvpMethod::Stochastic),
            other => Err(Error::InvalidArgument(format!(
                "unknown ihvp method `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct IhvpConfig {
    pub method: IhvpMethod,
    /// Damping lambda added to the Hessian diagonal.
    pub damping: f64,
    /// Recursion scale sigma; None derives 1 / (10 * lambda_max estimate).
    pub scale: Option<f64>,
    /// Recursion depth t.
    pub depth: usize,
    /// Independent repeats r, averaged.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for IhvpConfig {
    fn default() -> Self {
        IhvpConfig {
            method: IhvpMethod::Exact,
            damping: 1e-3,
            scale: None,
            depth: 2000,
            repeats: 8,
            seed: 0,
        }
    }
}

impl IhvpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.damping < 0.0 {
            return Err(Error::InvalidArgument("damping must be nonnegative".into()));
        }
        if self.method == IhvpMethod::Stochastic {
            if self.depth == 0 || self.repeats == 0 {
                return Err(Error::InvalidArgument(
                    "stochastic ihvp needs depth >= 1 and repeats >= 1".into(),
                ));
            }
            if let Some(s) = self.scale {
                if s <= 0.0 {
                    return Err(Error::InvalidArgument("scale must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

/// Source of per-training-point Hessian-vector products. The model-backed
/// implementation lives below; synthetic sources drive the oracle tests.
pub trait CurvatureSource {
    /// Trainable parameter count.
    fn dim(&self) -> usize;
    /// Number of training points.
    fn count(&self) -> usize;
    /// out = (Hessian of point `idx`'s loss) * v.
    fn point_hvp(&mut self, idx: usize, v: &[f64], out: &mut [f64]) -> Result<()>;

    /// out = average over points of point_hvp.
    fn avg_hvp(&mut self, v: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.count();
        let mut buf = vec![0.0; self.dim()];
        out.fill(0.0);
        for i in 0..n {
            self.point_hvp(i, v, &mut buf)?;
            for (o, b) in out.iter_mut().zip(&buf) {
                *o += b;
            }
        }
        let inv = 1.0 / n as f64;
        for o in out.iter_mut() {
            *o *= inv;
        }
        Ok(())
    }
}

/// One example's HVP computation, recorded once and re-run per vector.
struct ExampleHvp {
    tape: Tape,
    outs: Vec<NodeId>,
    ev: Evaluator,
    bindings: Bindings,
    primed: bool,
}

impl ExampleHvp {
    fn build(
        tokens: &[u32],
        label: u32,
        theta: &ParamVector,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let mt = build_model_tape(tokens, label, cfg)?;
        let mut tape = mt.tape;
        let outs = hvp_nodes(&mut tape, mt.loss, theta)?;
        let mut ev = Evaluator::new(&tape, &outs);
        let vnames: Vec<String> = theta
            .trainable_segments()
            .map(|s| format!("v_{}", s.name))
            .collect();
        let vrefs: Vec<&str> = vnames.iter().map(String::as_str).collect();
        ev.track_dirty(&tape, &vrefs);
        let mut bindings = theta.bindings();
        // prime v with zeros so the first full run has every var bound
        bind_hvp_vector(&mut bindings, theta, &vec![0.0; theta.trainable_len()])?;
        Ok(ExampleHvp {
            tape,
            outs,
            ev,
            bindings,
            primed: false,
        })
    }

    fn hvp(&mut self, theta: &ParamVector, v: &[f64], out: &mut [f64]) -> Result<()> {
        bind_hvp_vector(&mut self.bindings, theta, v)?;
        if self.primed {
            self.ev.run_dirty(&self.tape, &self.bindings)?;
        } else {
            self.ev.run(&self.tape, &self.bindings)?;
            self.primed = true;
        }
        let mut at = 0;
        for &o in &self.outs {
            let val = self.ev.value(o);
            out[at..at + val.len()].copy_from_slice(val.data());
            at += val.len();
        }
        Ok(())
    }
}

/// Model-backed curvature: per-example HVP tapes built on demand with a
/// one-slot cache, so example-outer loops (Hessian columns) pay one build
/// per example while random access (the stochastic recursion) stays cheap.
pub struct ModelCurvature<'a> {
    corpus: &'a Dataset,
    theta: &'a ParamVector,
    cfg: &'a ModelConfig,
    slot: Option<(usize, ExampleHvp)>,
}

impl<'a> ModelCurvature<'a> {
    pub fn new(corpus: &'a Dataset, theta: &'a ParamVector, cfg: &'a ModelConfig) -> Result<Self> {
        if corpus.examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(ModelCurvature {
            corpus,
            theta,
            cfg,
            slot: None,
        })
    }
}

impl CurvatureSource for ModelCurvature<'_> {
    fn dim(&self) -> usize {
        self.theta.trainable_len()
    }

    fn count(&self) -> usize {
        self.corpus.examples.len()
    }

    fn point_hvp(&mut self, idx: usize, v: &[f64], out: &mut [f64]) -> Result<()> {
        if self.slot.as_ref().map(|(i, _)| *i) != Some(idx) {
            let z = &self.corpus.examples[idx];
            let built = ExampleHvp::build(&z.tokens, z.label, self.theta, self.cfg)?;
            self.slot = Some((idx, built));
        }
        let (_, hvp) = self.slot.as_mut().unwrap();
        hvp.hvp(self.theta, v, out)
    }
}

/// Dense damped Hessian assembled column-by-column via HVPs on unit
/// vectors. Errors beyond the cap; checks and enforces symmetry.
pub fn assemble_hessian(curv: &mut dyn CurvatureSource) -> Result<DenseMatrix> {
    let p = curv.dim();
    if p > DENSE_CAP {
        return Err(Error::HessianCap { p, cap: DENSE_CAP });
    }
    let n = curv.count();
    let mut h = DenseMatrix::zeros(p);
    let mut unit = vec![0.0; p];
    let mut col = vec![0.0; p];
    let inv_n = 1.0 / n as f64;
    // example-outer so each point's tape is built once
    for idx in 0..n {
        for j in 0..p {
            unit[j] = 1.0;
            curv.point_hvp(idx, &unit, &mut col)?;
            unit[j] = 0.0;
            for i in 0..p {
                *h.at_mut(i, j) += col[i] * inv_n;
            }
        }
    }
    let asym = h.max_asymmetry();
    if asym >= 1e-9 {
        return Err(Error::Numerical(format!(
            "assembled Hessian asymmetry {asym:.3e} exceeds 1e-9"
        )));
    }
    h.symmetrize();
    Ok(h)
}

/// Largest-eigenvalue estimate of the damped average Hessian by a fixed
/// number of power-iteration steps from a seeded start vector.
pub fn estimate_lambda_max(
    curv: &mut dyn CurvatureSource,
    damping: f64,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    let p = curv.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u: Vec<f64> = (0..p).map(|_| rng.gen::<f64>() - 0.5).collect();
    let norm = l2_norm(&u);
    for x in u.iter_mut() {
        *x /= norm;
    }
    let mut w = vec![0.0; p];
    let mut lambda = damping;
    for _ in 0..steps {
        curv.avg_hvp(&u, &mut w)?;
        for (wi, ui) in w.iter_mut().zip(&u) {
            *wi += damping * ui;
        }
        lambda = l2_norm(&w);
        if lambda == 0.0 {
            return Ok(damping.max(f64::MIN_POSITIVE));
        }
        for (ui, wi) in u.iter_mut().zip(&w) {
            *ui = wi / lambda;
        }
    }
    Ok(lambda)
}

/// Exact inverse: factors H + lambda I once; solves are then cheap and a
/// relative residual below 1e-10 is enforced with iterative refinement.
#[derive(Debug)]
pub struct ExactSolver {
    matrix: DenseMatrix,
    factor: LdltFactor,
    p: usize,
}

impl ExactSolver {
    pub fn prepare(curv: &mut dyn CurvatureSource, damping: f64) -> Result<Self> {
        let mut matrix = assemble_hessian(curv)?;
        matrix.add_diagonal(damping);
        let factor = ldlt(&matrix)?;
        Ok(ExactSolver {
            p: matrix.n(),
            matrix,
            factor,
        })
    }

    pub fn from_matrix(mut matrix: DenseMatrix, damping: f64) -> Result<Self> {
        matrix.add_diagonal(damping);
        let factor = ldlt(&matrix)?;
        Ok(ExactSolver {
            p: matrix.n(),
            matrix,
            factor,
        })
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    /// The damped matrix that was factored.
    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn solve(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.p {
            return Err(Error::Dimension(format!(
                "rhs length {} vs dimension {}",
                v.len(),
                self.p
            )));
        }
        let vnorm = l2_norm(v);
        if vnorm == 0.0 {
            return Ok(vec![0.0; self.p]);
        }
        let mut u = self.factor.solve(v);
        let mut residual = vec![0.0; self.p];
        let mut rel = f64::INFINITY;
        for _ in 0..4 {
            self.matrix.matvec(&u, &mut residual);
            for (r, b) in residual.iter_mut().zip(v) {
                *r = b - *r;
            }
            rel = l2_norm(&residual) / vnorm;
            if rel < 1e-12 {
                break;
            }
            let corr = self.factor.solve(&residual);
            for (ui, ci) in u.iter_mut().zip(&corr) {
                *ui += ci;
            }
        }
        if !(rel < 1e-10) {
            return Err(Error::Numerical(format!(
                "solve residual {rel:.3e} exceeds 1e-10; the damped system is \
                 too ill-conditioned"
            )));
        }
        Ok(u)
    }
}

/// Result of the stochastic estimator.
#[derive(Clone, Debug)]
pub struct IhvpEstimate {
    /// The sigma-corrected estimate of (H + lambda I)^{-1} v.
    pub value: Vec<f64>,
    /// Worst last-step relative update ||h_t - h_{t-1}|| / ||h_t|| across
    /// the repeats; reported so callers can judge whether the recursion
    /// depth stabilized rather than guessing a stopping rule.
    pub last_rel_update: f64,
    /// The sigma actually used (given or derived).
    pub scale_used: f64,
}

/// Stochastic truncated-Neumann estimate of (H + lambda I)^{-1} v, with
/// one uniformly resampled training point per recursion step and r
/// independently seeded repeats averaged. Deterministic given the seed.
pub fn stochastic_ihvp(
    curv: &mut dyn CurvatureSource,
    cfg: &IhvpConfig,
    v: &[f64],
) -> Result<IhvpEstimate> {
    cfg.validate()?;
    let p = curv.dim();
    if v.len() != p {
        return Err(Error::Dimension(format!(
            "rhs length {} vs dimension {}",
            v.len(),
            p
        )));
    }
    let sigma = match cfg.scale {
        Some(s) => s,
        None => {
            let lmax = estimate_lambda_max(curv, cfg.damping, 20, cfg.seed)?;
            1.0 / (10.0 * lmax)
        }
    };
    let n = curv.count();
    let vnorm = l2_norm(v);
    let limit = DIVERGENCE_FACTOR * vnorm;

    let mut avg = vec![0.0; p];
    let mut h = vec![0.0; p];
    let mut prev = vec![0.0; p];
    let mut hz = vec![0.0; p];
    let mut worst_update = 0.0f64;
    for run in 0..cfg.repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(run as u64 + 1);
        h.copy_from_slice(v);
        for step in 0..cfg.depth {
            if step + 1 == cfg.depth {
                prev.copy_from_slice(&h);
            }
            let idx = rng.gen_range(0..n);
            curv.point_hvp(idx, &h, &mut hz)?;
            for i in 0..p {
                h[i] = v[i] + h[i] - sigma * (hz[i] + cfg.damping * h[i]);
            }
            let norm = l2_norm(&h);
            if norm > limit || !norm.is_finite() {
                return Err(Error::IhvpDiverged { step, norm });
            }
        }
        let hnorm = l2_norm(&h);
        if hnorm > 0.0 {
            let diff: f64 = h
                .iter()
                .zip(&prev)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            worst_update = worst_update.max(diff / hnorm);
        }
        for (a, hi) in avg.iter_mut().zip(&h) {
            *a += hi;
        }
    }
    let scale = sigma / cfg.repeats as f64;
    for a in avg.iter_mut() {
        *a *= scale;
    }
    Ok(IhvpEstimate {
        value: avg,
        last_rel_update: worst_update,
        scale_used: sigma,
    })
}

/// Spec-shaped convenience: exact (H + lambda I)^{-1} v for a model corpus.
pub fn exact_ihvp(
    corpus: &Dataset,
    theta: &ParamVector,
    cfg: &ModelConfig,
    v: &[f64],
    damping: f64,
) -> Result<Vec<f64>> {
    let mut curv = ModelCurvature::new(corpus, theta, cfg)?;
    let solver = ExactSolver::prepare(&mut curv, damping)?;
    solver.solve(v)
}

/// Spec-shaped convenience: dense average-loss Hessian for a model corpus
/// (undamped).
pub fn model_hessian(
    corpus: &Dataset,
    theta: &ParamVector,
    cfg: &ModelConfig,
) -> Result<DenseMatrix> {
    let mut curv = ModelCurvature::new(corpus, theta, cfg)?;
    assemble_hessian(&mut curv)
}
