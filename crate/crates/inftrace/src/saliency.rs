//! Gradient-based test-stimulus detection: per-token saliency scores.
//!
//! Each token carries w_y(e_t), the gradient of the predicted-label score
//! with respect to that token's *embedded input* (the gather output, theta
//! held fixed). The scalar saliency s(x_t) is the token's first-order
//! Taylor contribution to the score: the inner product of w_y(e_t) with
//! the embedding e_t itself. Under average pooling the raw gradient is the
//! same at every position (the encoder sees only the mean embedding), so
//! summing gradient components alone cannot rank tokens; the
//! gradient-times-embedding contribution is what separates positions and
//! is what UNK-erasure measures to first order.
//!
//! The score S is the softmax probability of the chosen label by default;
//! the pre-softmax logit variant sits behind a flag but is not the
//! default, because the influence math differentiates this exact scalar
//! and changing it silently changes the attribution target.

use crate::error::{Error, Result};
use crate::model::{build_model_tape, Example, ModelConfig};
use crate::params::ParamVector;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScoreKind {
    /// Softmax probability of the label.
    #[default]
    Probability,
    /// Pre-softmax logit of the label.
    Logit,
}

/// One token's saliency entry.
#[derive(Clone, Debug)]
pub struct TokenSaliency {
    pub position: usize,
    pub token: u32,
    /// w_y(e_t): gradient of the label score w.r.t. this token's embedding.
    pub gradient: Vec<f64>,
    /// s(x_t) = w_y(e_t) . e_t, the token's linear contribution to the
    /// label score.
    pub score: f64,
    /// 1-based rank, descending by score, ties to the lower position.
    pub rank: usize,
}

#[derive(Clone, Debug)]
pub struct SaliencyReport {
    pub example: Example,
    pub label: u32,
    pub kind: ScoreKind,
    /// Entries in token-position order.
    pub tokens: Vec<TokenSaliency>,
    /// Positions ordered by rank.
    pub ranking: Vec<usize>,
}

impl SaliencyReport {
    /// First k entries of the ranking as (position, token id, score).
    pub fn top(&self, k: usize) -> Result<Vec<(usize, u32, f64)>> {
        if k == 0 || k > self.tokens.len() {
            return Err(Error::InvalidArgument(format!(
                "k = {k} outside 1..={}",
                self.tokens.len()
            )));
        }
        Ok(self
            .ranking
            .iter()
            .take(k)
            .map(|&pos| {
                let t = &self.tokens[pos];
                (t.position, t.token, t.score)
            })
            .collect())
    }

    pub fn top_position(&self) -> usize {
        self.ranking[0]
    }
}

/// Per-token gradients of the label score w.r.t. the embedded input.
pub fn input_gradients(
    z: &Example,
    label: u32,
    theta: &ParamVector,
    cfg: &ModelConfig,
    kind: ScoreKind,
) -> Result<Vec<Vec<f64>>> {
    let mt = build_model_tape(&z.tokens, label, cfg)?;
    let mut tape = mt.tape;
    let score = match kind {
        ScoreKind::Probability => mt.prob_label,
        ScoreKind::Logit => mt.logit_label,
    };
    let adj = tape.adjoints(score, &[mt.embedded])?;
    let grad = tape.evaluate(adj.grads[0], &theta.bindings())?;
    Ok((0..z.tokens.len())
        .map(|i| grad.row_slice(i).to_vec())
        .collect())
}

/// Full per-token report: gradients, dimension-sum scores and ranking.
pub fn token_saliency(
    z: &Example,
    label: u32,
    theta: &ParamVector,
    cfg: &ModelConfig,
    kind: ScoreKind,
) -> Result<SaliencyReport> {
    let grads = input_gradients(z, label, theta, cfg, kind)?;
    let emb = theta.segment_slice("emb").ok_or_else(|| {
        Error::InvalidArgument("parameter vector has no embedding segment".into())
    })?;
    let d = cfg.d;
    let mut tokens: Vec<TokenSaliency> = grads
        .into_iter()
        .enumerate()
        .map(|(position, gradient)| {
            let t = z.tokens[position] as usize;
            let row = &emb[t * d..(t + 1) * d];
            let score = gradient.iter().zip(row).map(|(g, e)| g * e).sum();
            TokenSaliency {
                position,
                token: z.tokens[position],
                score,
                gradient,
                rank: 0,
            }
        })
        .collect();
    let mut ranking: Vec<usize> = (0..tokens.len()).collect();
    ranking.sort_by(|&a, &b| {
        tokens[b]
            .score
            .partial_cmp(&tokens[a].score)
            .expect("saliency scores are finite")
            .then(a.cmp(&b))
    });
    for (rank0, &pos) in ranking.iter().enumerate() {
        tokens[pos].rank = rank0 + 1;
    }
    Ok(SaliencyReport {
        example: z.clone(),
        label,
        kind,
        tokens,
        ranking,
    })
}

/// The [N, d] mask selecting one token row; dotted against the embedding
/// gradient it scalarizes the saliency of that position.
pub fn row_mask(n: usize, d: usize, position: usize) -> Tensor {
    let mut mask = Tensor::zeros(&[n, d]);
    mask.data_mut()[position * d..(position + 1) * d].fill(1.0);
    mask
}

/// Drop in the label score when `position` is erased to UNK; the
/// brute-force counterpart the saliency ranking is validated against.
pub fn erasure_drop(
    z: &Example,
    label: u32,
    position: usize,
    theta: &ParamVector,
    cfg: &ModelConfig,
) -> Result<f64> {
    let base = crate::model::predict_probs(z, theta, cfg)?[label as usize];
    let erased = z.with_token(position, cfg.unk_id);
    let after = crate::model::predict_probs(&erased, theta, cfg)?[label as usize];
    Ok(base - after)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_corpus;
    use crate::model::{init_params, predict_probs, train, ModelMode};
    use crate::testutil::*;

    fn convex_cfg(vocab: usize) -> ModelConfig {
        ModelConfig {
            mode: ModelMode::Convex,
            vocab_size: vocab,
            d: 4,
            h: 0,
            c: 2,
            unk_id: 0,
            seed: 9,
            lr: 2.0,
            epochs: 40_000,
            l2: 1e-3,
        }
    }

    #[test]
    fn convex_gradient_matches_softmax_jacobian_closed_form() {
        // S_y = softmax(W' xbar + b)_y with xbar = mean of embeddings:
        // dS_y/de_t = (1/N) * sum_c S_y (delta_cy - S_c) W[:, c]
        let cfg = convex_cfg(8);
        let theta = init_params(&cfg).unwrap();
        let z = Example::new(vec![1, 5, 3], 1);
        let grads = input_gradients(&z, 1, &theta, &cfg, ScoreKind::Probability).unwrap();

        let probs = predict_probs(&z, &theta, &cfg).unwrap();
        let w = theta.segment_slice("w_out").unwrap();
        let n = z.tokens.len() as f64;
        let (d, c) = (cfg.d, cfg.c);
        let y = 1usize;
        let mut closed = vec![0.0; d];
        for j in 0..d {
            let mut acc = 0.0;
            for cc in 0..c {
                let delta = if cc == y { 1.0 } else { 0.0 };
                acc += probs[y] * (delta - probs[cc]) * w[j * c + cc];
            }
            closed[j] = acc / n;
        }
        for row in &grads {
            let err = max_rel_err(row, &closed, 1e-15);
            assert!(err < 1e-12, "closed-form mismatch {err}");
        }
        // and the scalar scores are the gradient-times-embedding products
        let report = token_saliency(&z, 1, &theta, &cfg, ScoreKind::Probability).unwrap();
        let emb = theta.segment_slice("emb").unwrap();
        for (pos, &tok) in z.tokens.iter().enumerate() {
            let row = &emb[tok as usize * d..(tok as usize + 1) * d];
            let want: f64 = closed.iter().zip(row).map(|(g, e)| g * e).sum();
            assert!((report.tokens[pos].score - want).abs() < 1e-14);
        }
    }

    #[test]
    fn duplicated_tokens_share_identical_gradients() {
        let cfg = convex_cfg(8);
        let theta = init_params(&cfg).unwrap();
        let z = Example::new(vec![2, 7, 2], 0);
        let grads = input_gradients(&z, 0, &theta, &cfg, ScoreKind::Probability).unwrap();
        assert_eq!(grads[0], grads[2]);
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        // Distinct tokens, so perturbing one embedding-table row perturbs
        // exactly one input position.
        let cfg = ModelConfig {
            mode: ModelMode::Mlp,
            vocab_size: 9,
            d: 3,
            h: 5,
            c: 3,
            unk_id: 0,
            seed: 17,
            lr: 0.1,
            epochs: 1,
            l2: 0.0,
        };
        let theta = init_params(&cfg).unwrap();
        let z = Example::new(vec![1, 4, 7], 2);
        let grads = input_gradients(&z, 2, &theta, &cfg, ScoreKind::Probability).unwrap();
        for (pos, &tok) in z.tokens.iter().enumerate() {
            for j in 0..cfg.d {
                let h = 1e-4;
                let mut probe = |delta: f64| {
                    let mut th = theta.clone();
                    let seg = th.segment("emb").unwrap().clone();
                    th.data_mut()[seg.offset + tok as usize * cfg.d + j] += delta;
                    predict_probs(&z, &th, &cfg).unwrap()[2]
                };
                let fd = (probe(h) - probe(-h)) / (2.0 * h);
                let got = grads[pos][j];
                let denom = fd.abs().max(got.abs()).max(1e-8);
                assert!(
                    ((fd - got).abs() / denom) < 1e-5,
                    "pos {pos} dim {j}: {got} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn single_token_is_rank_one() {
        let cfg = convex_cfg(6);
        let theta = init_params(&cfg).unwrap();
        let report = token_saliency(&Example::new(vec![3], 0), 0, &theta, &cfg, ScoreKind::default())
            .unwrap();
        assert_eq!(report.tokens[0].rank, 1);
        assert_eq!(report.top(1).unwrap()[0].0, 0);
        assert!(report.top(2).is_err());
        assert!(report.top(0).is_err());
    }

    #[test]
    fn tied_scores_rank_the_earlier_position_first() {
        let cfg = convex_cfg(6);
        let theta = init_params(&cfg).unwrap();
        let z = Example::new(vec![4, 4], 1);
        let report = token_saliency(&z, 1, &theta, &cfg, ScoreKind::default()).unwrap();
        assert_eq!(report.tokens[0].score, report.tokens[1].score);
        assert_eq!(report.tokens[0].rank, 1);
        assert_eq!(report.tokens[1].rank, 2);
        assert_eq!(report.ranking, vec![0, 1]);
    }

    #[test]
    fn scores_sum_to_total_taylor_contribution() {
        // Scalarization consistency: the per-token scores add up to the
        // full gradient-times-embedding inner product over all positions.
        let cfg = convex_cfg(10);
        let theta = init_params(&cfg).unwrap();
        let z = Example::new(vec![1, 2, 9, 2], 0);
        let report = token_saliency(&z, 0, &theta, &cfg, ScoreKind::default()).unwrap();
        let total: f64 = report.tokens.iter().map(|t| t.score).sum();
        let grads = input_gradients(&z, 0, &theta, &cfg, ScoreKind::default()).unwrap();
        let emb = theta.segment_slice("emb").unwrap();
        let mut by_coords = 0.0;
        for (pos, &tok) in z.tokens.iter().enumerate() {
            let row = &emb[tok as usize * cfg.d..(tok as usize + 1) * cfg.d];
            by_coords += grads[pos].iter().zip(row).map(|(g, e)| g * e).sum::<f64>();
        }
        assert!((total - by_coords).abs() < 1e-15);
    }

    #[test]
    fn saliency_is_invariant_under_vocabulary_relabeling() {
        // Swap two vocabulary ids (rows of the embedding table plus the
        // token ids that point at them); scores must not move.
        let cfg = convex_cfg(8);
        let theta = init_params(&cfg).unwrap();
        let z = Example::new(vec![1, 5, 3], 1);
        let report = token_saliency(&z, 1, &theta, &cfg, ScoreKind::default()).unwrap();

        let (a, b) = (1usize, 6usize);
        let mut swapped = theta.clone();
        let seg = swapped.segment("emb").unwrap().clone();
        let d = cfg.d;
        for j in 0..d {
            swapped
                .data_mut()
                .swap(seg.offset + a * d + j, seg.offset + b * d + j);
        }
        let z2 = Example::new(
            z.tokens
                .iter()
                .map(|&t| {
                    if t as usize == a {
                        b as u32
                    } else if t as usize == b {
                        a as u32
                    } else {
                        t
                    }
                })
                .collect(),
            z.label,
        );
        let report2 = token_saliency(&z2, 1, &swapped, &cfg, ScoreKind::default()).unwrap();
        for (t1, t2) in report.tokens.iter().zip(&report2.tokens) {
            assert_eq!(t1.score, t2.score);
            assert_eq!(t1.rank, t2.rank);
        }
    }

    #[test]
    fn invalid_label_is_rejected() {
        let cfg = convex_cfg(6);
        let theta = init_params(&cfg).unwrap();
        assert!(matches!(
            token_saliency(&Example::new(vec![1], 0), 7, &theta, &cfg, ScoreKind::default()),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn trained_model_ranks_the_polarity_token_first() {
        // On the planted corpus the rank-1 salient token should agree with
        // the UNK-erasure argmax for most test examples.
        let (train_set, _, test_set, _) = synth_corpus(23, 200, 10, 25, 0.0).unwrap();
        let cfg = ModelConfig {
            mode: ModelMode::Mlp,
            vocab_size: train_set.vocab.len(),
            d: 8,
            h: 8,
            c: 2,
            unk_id: 0,
            seed: 4,
            lr: 2.0,
            epochs: 400,
            l2: 0.0,
        };
        let ckpt = train(&train_set, &cfg).unwrap();
        let mut agree = 0usize;
        for z in &test_set.examples {
            let report =
                token_saliency(z, z.label, &ckpt.theta, &cfg, ScoreKind::default()).unwrap();
            let mut best_pos = 0;
            let mut best_drop = f64::NEG_INFINITY;
            for pos in 0..z.tokens.len() {
                let drop = erasure_drop(z, z.label, pos, &ckpt.theta, &cfg).unwrap();
                if drop > best_drop {
                    best_drop = drop;
                    best_pos = pos;
                }
            }
            if report.top_position() == best_pos {
                agree += 1;
            }
        }
        let rate = agree as f64 / test_set.examples.len() as f64;
        assert!(rate >= 0.8, "saliency/erasure agreement {rate}");
    }
}
