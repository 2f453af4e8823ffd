//! The classifier family: embedding lookup, average pooling, an optional
//! tanh hidden layer, and a softmax output, trained by full-batch descent
//! on average negative log-likelihood.
//!
//! Two modes exist on purpose. `mlp` is the demonstration model. `convex`
//! freezes the embedding table after random init and classifies the mean
//! embedding with a single softmax layer; the training problem is then
//! convex (strictly, with any ridge), so the loss minimizer the influence
//! machinery assumes actually exists and leave-one-out oracles are exact
//! ground truth rather than approximations.
//!
//! Training and per-example gradients run on a hand-derived backward pass
//! for speed (retraining oracles need thousands of runs); the tape engine
//! computes the same gradients and the two are held equal in tests.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Gradient-infinity-norm stopping tolerance for convex-mode descent.
pub const CONVEX_GRAD_TOL: f64 = 1e-8;

/// One training or test point: a token sequence and its class id.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: u32,
}

impl Example {
    pub fn new(tokens: Vec<u32>, label: u32) -> Self {
        Example { tokens, label }
    }

    /// Copy with one token substituted.
    pub fn with_token(&self, position: usize, token: u32) -> Self {
        let mut tokens = self.tokens.clone();
        tokens[position] = token;
        Example {
            tokens,
            label: self.label,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelMode {
    Mlp,
    Convex,
}

impl ModelMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelMode::Mlp => "mlp",
            ModelMode::Convex => "convex",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ModelMode::Mlp),
            "convex" => Ok(ModelMode::Convex),
            other => Err(Error::InvalidArgument(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub mode: ModelMode,
    pub vocab_size: usize,
    /// Embedding width.
    pub d: usize,
    /// Hidden width (ignored in convex mode).
    pub h: usize,
    /// Class count.
    pub c: usize,
    /// Reserved unknown-token id.
    pub unk_id: u32,
    pub seed: u64,
    pub lr: f64,
    /// Descent steps in mlp mode; iteration cap in convex mode.
    pub epochs: usize,
    /// Ridge coefficient on the non-embedding weights.
    pub l2: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d == 0 || self.c == 0 {
            return Err(Error::InvalidArgument(
                "vocab_size, d and c must be at least 1".into(),
            ));
        }
        if self.mode == ModelMode::Mlp && self.h == 0 {
            return Err(Error::InvalidArgument("h must be at least 1 in mlp mode".into()));
        }
        if (self.unk_id as usize) >= self.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "unk_id {} outside vocabulary of {}",
                self.unk_id, self.vocab_size
            )));
        }
        if self.l2 < 0.0 {
            return Err(Error::InvalidArgument("l2 must be nonnegative".into()));
        }
        Ok(())
    }

    /// Segment layout implied by the config: name, shape, trainable.
    pub fn layout(&self) -> Vec<(&'static str, Vec<usize>, bool)> {
        let (v, d, h, c) = (self.vocab_size, self.d, self.h, self.c);
        match self.mode {
            ModelMode::Mlp => vec![
                ("emb", vec![v, d], true),
                ("w1", vec![d, h], true),
                ("b1", vec![1, h], true),
                ("w2", vec![h, c], true),
                ("b2", vec![1, c], true),
            ],
            ModelMode::Convex => vec![
                ("emb", vec![v, d], false),
                ("w_out", vec![d, c], true),
                ("b_out", vec![1, c], true),
            ],
        }
    }

    /// Total parameter count P.
    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, shape, _)| shape.iter().product::<usize>())
            .sum()
    }
}

/// A trained model: config, parameters and provenance of the training set.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub theta: ParamVector,
    /// FNV-1a over the canonical bytes of the training corpus.
    pub train_fingerprint: u64,
    /// Infinity norm of the average-loss gradient at the final parameters.
    pub final_grad_inf: f64,
}

impl Checkpoint {
    pub fn matches_corpus(&self, corpus: &Dataset) -> bool {
        self.train_fingerprint == data::fingerprint(corpus)
    }
}

/// Uniform(-0.1, 0.1) weights and embeddings from the config seed; biases
/// zero. The UNK row is initialized and trained like any other row.
pub fn init_params(cfg: &ModelConfig) -> Result<ParamVector> {
    cfg.validate()?;
    let layout = cfg.layout();
    let mut theta = ParamVector::new(&layout);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for (name, shape, _) in &layout {
        if name.starts_with('b') {
            continue; // biases stay zero
        }
        let len: usize = shape.iter().product();
        let vals: Vec<f64> = (0..len).map(|_| rng.gen::<f64>() * 0.2 - 0.1).collect();
        let seg = theta.segment(name).unwrap();
        let (offset, len) = (seg.offset, seg.len());
        theta.data_mut()[offset..offset + len].copy_from_slice(&vals);
    }
    Ok(theta)
}

// ---- fast forward / backward ------------------------------------------------

/// Reusable buffers for the hand-rolled forward/backward pass.
#[derive(Default)]
pub struct Scratch {
    xbar: Vec<f64>,
    pre: Vec<f64>,
    hid: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
    dlogits: Vec<f64>,
    dpre: Vec<f64>,
    dxbar: Vec<f64>,
}

impl Scratch {
    pub fn new() -> Self {
        Self::default()
    }

    fn reserve(&mut self, cfg: &ModelConfig) {
        self.xbar.resize(cfg.d, 0.0);
        self.pre.resize(cfg.h, 0.0);
        self.hid.resize(cfg.h, 0.0);
        self.logits.resize(cfg.c, 0.0);
        self.probs.resize(cfg.c, 0.0);
        self.dlogits.resize(cfg.c, 0.0);
        self.dpre.resize(cfg.h, 0.0);
        self.dxbar.resize(cfg.d, 0.0);
    }
}

fn check_example(z: &Example, cfg: &ModelConfig) -> Result<()> {
    if z.tokens.is_empty() {
        return Err(Error::EmptyExample);
    }
    if let Some(&bad) = z.tokens.iter().find(|&&t| (t as usize) >= cfg.vocab_size) {
        return Err(Error::InvalidArgument(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    if (z.label as usize) >= cfg.c {
        return Err(Error::LabelOutOfRange {
            label: z.label,
            classes: cfg.c,
        });
    }
    Ok(())
}

fn forward(z: &Example, theta: &ParamVector, cfg: &ModelConfig, s: &mut Scratch) -> Result<()> {
    check_example(z, cfg)?;
    s.reserve(cfg);
    let d = cfg.d;
    let emb = theta.segment_slice("emb").unwrap();
    s.xbar.fill(0.0);
    for &t in &z.tokens {
        let row = &emb[t as usize * d..(t as usize + 1) * d];
        for (x, e) in s.xbar.iter_mut().zip(row) {
            *x += e;
        }
    }
    let inv_n = 1.0 / z.tokens.len() as f64;
    for x in s.xbar.iter_mut() {
        *x *= inv_n;
    }

    match cfg.mode {
        ModelMode::Mlp => {
            let w1 = theta.segment_slice("w1").unwrap();
            let b1 = theta.segment_slice("b1").unwrap();
            let w2 = theta.segment_slice("w2").unwrap();
            let b2 = theta.segment_slice("b2").unwrap();
            let (h, c) = (cfg.h, cfg.c);
            for k in 0..h {
                let mut acc = b1[k];
                for j in 0..d {
                    acc += s.xbar[j] * w1[j * h + k];
                }
                s.pre[k] = acc;
                s.hid[k] = acc.tanh();
            }
            for cc in 0..c {
                let mut acc = b2[cc];
                for k in 0..h {
                    acc += s.hid[k] * w2[k * c + cc];
                }
                s.logits[cc] = acc;
            }
        }
        ModelMode::Convex => {
            let w = theta.segment_slice("w_out").unwrap();
            let b = theta.segment_slice("b_out").unwrap();
            let c = cfg.c;
            for cc in 0..c {
                let mut acc = b[cc];
                for j in 0..d {
                    acc += s.xbar[j] * w[j * c + cc];
                }
                s.logits[cc] = acc;
            }
        }
    }

    // Stable softmax.
    let max = s
        .logits
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (p, l) in s.probs.iter_mut().zip(&s.logits) {
        *p = (l - max).exp();
        sum += *p;
    }
    let inv = 1.0 / sum;
    for p in s.probs.iter_mut() {
        *p *= inv;
    }
    Ok(())
}

/// Softmax class probabilities for one example.
pub fn predict_probs(z: &Example, theta: &ParamVector, cfg: &ModelConfig) -> Result<Vec<f64>> {
    let mut s = Scratch::new();
    forward(z, theta, cfg, &mut s)?;
    Ok(s.probs.clone())
}

/// Predicted class, ties broken toward the lower class id.
pub fn predict_label(z: &Example, theta: &ParamVector, cfg: &ModelConfig) -> Result<u32> {
    let probs = predict_probs(z, theta, cfg)?;
    Ok(argmax_low(&probs))
}

fn argmax_low(v: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best as u32
}

fn ridge_half_sq(theta: &ParamVector, cfg: &ModelConfig) -> f64 {
    if cfg.l2 == 0.0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for seg in theta.trainable_segments() {
        if seg.name == "emb" {
            continue;
        }
        let s = theta.segment_slice(&seg.name).unwrap();
        acc += s.iter().map(|x| x * x).sum::<f64>();
    }
    0.5 * cfg.l2 * acc
}

/// Per-example loss: -log p(label) plus the ridge term. Each example
/// carries the full ridge so that the corpus average equals average NLL
/// plus one ridge term, which keeps leave-one-out objectives consistent.
pub fn nll_loss(z: &Example, theta: &ParamVector, cfg: &ModelConfig) -> Result<f64> {
    let mut s = Scratch::new();
    forward(z, theta, cfg, &mut s)?;
    Ok(-s.probs[z.label as usize].ln() + ridge_half_sq(theta, cfg))
}

/// Adds this example's data-loss gradient (no ridge) over the trainable
/// subspace into `acc`; returns -log p(label).
fn add_data_grad(
    z: &Example,
    theta: &ParamVector,
    cfg: &ModelConfig,
    s: &mut Scratch,
    acc: &mut [f64],
) -> Result<f64> {
    forward(z, theta, cfg, s)?;
    let (d, c) = (cfg.d, cfg.c);
    for (dl, p) in s.dlogits.iter_mut().zip(&s.probs) {
        *dl = *p;
    }
    s.dlogits[z.label as usize] -= 1.0;

    match cfg.mode {
        ModelMode::Mlp => {
            let h = cfg.h;
            let w1 = theta.segment_slice("w1").unwrap();
            let w2 = theta.segment_slice("w2").unwrap();
            // trainable layout: emb, w1, b1, w2, b2
            let vd = cfg.vocab_size * d;
            let (emb_a, rest) = acc.split_at_mut(vd);
            let (w1_a, rest) = rest.split_at_mut(d * h);
            let (b1_a, rest) = rest.split_at_mut(h);
            let (w2_a, b2_a) = rest.split_at_mut(h * c);

            for k in 0..h {
                let mut dh = 0.0;
                for cc in 0..c {
                    dh += w2[k * c + cc] * s.dlogits[cc];
                    w2_a[k * c + cc] += s.hid[k] * s.dlogits[cc];
                }
                s.dpre[k] = dh * (1.0 - s.hid[k] * s.hid[k]);
            }
            for (cc, g) in s.dlogits.iter().enumerate() {
                b2_a[cc] += g;
            }
            for j in 0..d {
                let mut dx = 0.0;
                for k in 0..h {
                    dx += w1[j * h + k] * s.dpre[k];
                    w1_a[j * h + k] += s.xbar[j] * s.dpre[k];
                }
                s.dxbar[j] = dx;
            }
            for (k, g) in s.dpre.iter().enumerate() {
                b1_a[k] += g;
            }
            let inv_n = 1.0 / z.tokens.len() as f64;
            for &t in &z.tokens {
                let row = &mut emb_a[t as usize * d..(t as usize + 1) * d];
                for (e, dx) in row.iter_mut().zip(&s.dxbar) {
                    *e += dx * inv_n;
                }
            }
        }
        ModelMode::Convex => {
            // trainable layout: w_out, b_out
            let (w_a, b_a) = acc.split_at_mut(d * c);
            for j in 0..d {
                for cc in 0..c {
                    w_a[j * c + cc] += s.xbar[j] * s.dlogits[cc];
                }
            }
            for (cc, g) in s.dlogits.iter().enumerate() {
                b_a[cc] += g;
            }
        }
    }
    Ok(-s.probs[z.label as usize].ln())
}

/// Adds the ridge gradient l2 * w over the non-embedding trainable
/// coordinates into `acc`.
fn add_ridge_grad(theta: &ParamVector, cfg: &ModelConfig, acc: &mut [f64]) {
    if cfg.l2 == 0.0 {
        return;
    }
    let mut at = 0;
    for seg in theta.trainable_segments() {
        let len = seg.len();
        if seg.name != "emb" {
            let w = &theta.data()[seg.offset..seg.offset + len];
            for (a, x) in acc[at..at + len].iter_mut().zip(w) {
                *a += cfg.l2 * x;
            }
        }
        at += len;
    }
}

/// Per-example loss and gradient over the trainable subspace, ridge
/// included. This is the hand-derived fast path used wherever gradients
/// are needed in bulk; it is held equal to the tape gradient in tests.
pub fn loss_grad(z: &Example, theta: &ParamVector, cfg: &ModelConfig) -> Result<(f64, Vec<f64>)> {
    let mut s = Scratch::new();
    let mut g = vec![0.0; theta.trainable_len()];
    let data = add_data_grad(z, theta, cfg, &mut s, &mut g)?;
    add_ridge_grad(theta, cfg, &mut g);
    Ok((data + ridge_half_sq(theta, cfg), g))
}

/// Data-only per-example gradient: the NLL term without the ridge share.
/// Upweighting a training point upweights its NLL, not the regularizer,
/// so this is the gradient the influence formulas consume; the ridge still
/// contributes to the Hessian through the full objective.
pub fn data_grad(z: &Example, theta: &ParamVector, cfg: &ModelConfig) -> Result<Vec<f64>> {
    let mut s = Scratch::new();
    let mut g = vec![0.0; theta.trainable_len()];
    add_data_grad(z, theta, cfg, &mut s, &mut g)?;
    Ok(g)
}

fn validate_dataset(corpus: &Dataset, cfg: &ModelConfig) -> Result<()> {
    if corpus.examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for z in &corpus.examples {
        check_example(z, cfg)?;
    }
    Ok(())
}

/// Average loss over a corpus and its gradient over the trainable subspace.
pub fn average_loss_grad(
    corpus: &Dataset,
    theta: &ParamVector,
    cfg: &ModelConfig,
    grad: &mut [f64],
    scratch: &mut Scratch,
) -> Result<f64> {
    grad.fill(0.0);
    let mut loss = 0.0;
    for z in &corpus.examples {
        loss += add_data_grad(z, theta, cfg, scratch, grad)?;
    }
    let inv_n = 1.0 / corpus.examples.len() as f64;
    loss *= inv_n;
    for g in grad.iter_mut() {
        *g *= inv_n;
    }
    add_ridge_grad(theta, cfg, grad);
    Ok(loss + ridge_half_sq(theta, cfg))
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Full-batch gradient descent from the seeded init.
pub fn train(corpus: &Dataset, cfg: &ModelConfig) -> Result<Checkpoint> {
    let theta = init_params(cfg)?;
    train_from(corpus, cfg, theta)
}

/// Full-batch gradient descent from a given starting point. Convexity
/// makes the minimizer unique, so warm starts reach the same answer; the
/// leave-one-out oracles rely on that to stay within their time budget.
pub fn train_from(corpus: &Dataset, cfg: &ModelConfig, theta: ParamVector) -> Result<Checkpoint> {
    cfg.validate()?;
    validate_dataset(corpus, cfg)?;
    let mut theta = theta;
    let mut grad = vec![0.0; theta.trainable_len()];
    let mut scratch = Scratch::new();
    for epoch in 0..cfg.epochs {
        let loss = average_loss_grad(corpus, &theta, cfg, &mut grad, &mut scratch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        if cfg.mode == ModelMode::Convex && inf_norm(&grad) < CONVEX_GRAD_TOL {
            break;
        }
        theta.add_trainable(&grad, -cfg.lr);
    }
    let final_loss = average_loss_grad(corpus, &theta, cfg, &mut grad, &mut scratch)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged {
            epoch: cfg.epochs,
            loss: final_loss,
        });
    }
    Ok(Checkpoint {
        config: cfg.clone(),
        theta,
        train_fingerprint: data::fingerprint(corpus),
        final_grad_inf: inf_norm(&grad),
    })
}

/// Argmax-match rate; ties break toward the lower class id.
pub fn accuracy(set: &Dataset, theta: &ParamVector, cfg: &ModelConfig) -> Result<f64> {
    if set.examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut s = Scratch::new();
    let mut hits = 0usize;
    for z in &set.examples {
        forward(z, theta, cfg, &mut s)?;
        if argmax_low(&s.probs) == z.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / set.examples.len() as f64)
}

// ---- tape construction -------------------------------------------------------

/// The model's computation recorded on a tape, with the handles the
/// attribution math needs: the embedded input (saliency differentiates
/// against it), the label probability and logit, and the training loss.
pub struct ModelTape {
    pub tape: Tape,
    /// Gather output, shape [N, d].
    pub embedded: NodeId,
    pub probs: NodeId,
    pub logits: NodeId,
    /// S_y: softmax probability of the chosen label.
    pub prob_label: NodeId,
    /// Pre-softmax score of the chosen label.
    pub logit_label: NodeId,
    /// -log S_y plus the ridge term.
    pub loss: NodeId,
}

/// Records one example's forward pass and loss for a given label.
pub fn build_model_tape(tokens: &[u32], label: u32, cfg: &ModelConfig) -> Result<ModelTape> {
    let z = Example::new(tokens.to_vec(), label);
    check_example(&z, cfg)?;
    let mut tape = Tape::new();
    for (name, shape, _) in cfg.layout() {
        tape.var(name, &shape)?;
    }
    let emb = tape.var_node("emb").unwrap();
    let rows: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let embedded = tape.gather(emb, rows)?;
    let xbar = tape.mean_rows(embedded)?;

    let logits = match cfg.mode {
        ModelMode::Mlp => {
            let w1 = tape.var_node("w1").unwrap();
            let b1 = tape.var_node("b1").unwrap();
            let w2 = tape.var_node("w2").unwrap();
            let b2 = tape.var_node("b2").unwrap();
            let pre = tape.matmul(xbar, w1)?;
            let pre = tape.add(pre, b1)?;
            let hid = tape.tanh(pre);
            let out = tape.matmul(hid, w2)?;
            tape.add(out, b2)?
        }
        ModelMode::Convex => {
            let w = tape.var_node("w_out").unwrap();
            let b = tape.var_node("b_out").unwrap();
            let out = tape.matmul(xbar, w)?;
            tape.add(out, b)?
        }
    };
    let probs = tape.softmax(logits)?;
    let hot = tape.constant(Tensor::one_hot(cfg.c, label as usize));
    let prob_label = tape.dot(probs, hot)?;
    let logit_label = tape.dot(logits, hot)?;

    let log_p = tape.log(prob_label);
    let mut loss = tape.scale(log_p, -1.0)?;
    if cfg.l2 > 0.0 {
        for (name, _, trainable) in cfg.layout() {
            if !trainable || name == "emb" {
                continue;
            }
            let w = tape.var_node(name).unwrap();
            let sq = tape.dot(w, w)?;
            loss = tape.add_scaled(loss, sq, 0.5 * cfg.l2)?;
        }
    }
    Ok(ModelTape {
        tape,
        embedded,
        probs,
        logits,
        prob_label,
        logit_label,
        loss,
    })
}
