//! Training-set adversarial perturbation and prediction fixing.
//!
//! Attacks edit training examples, one token each, chosen by a two-stage
//! greedy search: pick the token position most responsible for the test
//! example's salient region (by token influence), then the lexicon
//! substitute optimizing the perturbation influence toward the target —
//! plus a seeded handful of random-restart positions to escape local
//! optima. Mode `down` drives the model away from the region it should
//! focus on (minimize the substitution's influence on the gold-label
//! saliency); mode `up` drives it toward a region it should not focus on
//! (maximize influence on the strongest incorrect label's saliency);
//! `combined` alternates the two. Perturbed examples replace their
//! originals, and the edited corpus is evaluated by retraining from
//! scratch.
//!
//! Fixing runs the same machinery in reverse on misclassified dev
//! examples, draws substitutes from synonyms and antonyms both, and
//! appends the generated examples instead of replacing anything.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Lexicon};
use crate::error::{Error, Result};
use crate::influence::{InfluenceEngine, InfluenceScore, Target};
use crate::model::{
    accuracy, predict_probs, train, Checkpoint, Example, ModelConfig,
};
use crate::saliency::{token_saliency, ScoreKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackMode {
    Down,
    Up,
    Combined,
    Fix,
}

impl AttackMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackMode::Down => "down",
            AttackMode::Up => "up",
            AttackMode::Combined => "combined",
            AttackMode::Fix => "fix",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "down" => Ok(AttackMode::Down),
            "up" => Ok(AttackMode::Up),
            "combined" => Ok(AttackMode::Combined),
            "fix" => Ok(AttackMode::Fix),
            other => Err(Error::InvalidArgument(format!(
                "unknown attack mode `{other}`"
            ))),
        }
    }
}

/// Whether a substitution should maximize or minimize the perturbation
/// influence toward the prepared target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Max,
    Min,
}

#[derive(Clone, Debug)]
pub struct AttackConfig {
    pub mode: AttackMode,
    /// k: perturbed (or generated) training examples per test example.
    pub per_test: usize,
    /// T: random-restart candidate positions.
    pub restarts: usize,
    pub seed: u64,
    /// Configuration for retraining on the edited corpus.
    pub retrain: ModelConfig,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_test == 0 {
            return Err(Error::InvalidArgument("per_test must be at least 1".into()));
        }
        Ok(())
    }
}

/// One applied (or generated) substitution.
#[derive(Clone, Debug)]
pub struct PerturbationRecord {
    pub train_id: usize,
    pub position: usize,
    pub original: u32,
    pub substituted: u32,
    /// The perturbation-influence value of the chosen substitution.
    pub objective_value: f64,
    /// Which edit objective produced it.
    pub mode: &'static str,
    pub target_test_id: usize,
}

/// Lexicon resolved against a vocabulary: token id -> candidate ids.
/// Entries keep the lexicon's word order; unresolvable words are dropped
/// and counted.
#[derive(Clone, Debug, Default)]
pub struct ResolvedLexicon {
    synonyms: BTreeMap<u32, Vec<u32>>,
    antonyms: BTreeMap<u32, Vec<u32>>,
    pub unresolved: usize,
}

impl ResolvedLexicon {
    pub fn resolve(lexicon: &Lexicon, corpus: &Dataset) -> Self {
        let mut out = ResolvedLexicon::default();
        for (head, entry) in &lexicon.entries {
            if !corpus.vocab.contains(head) {
                out.unresolved += entry.synonyms.len() + entry.antonyms.len();
                continue;
            }
            let head_id = corpus.vocab.lookup(head);
            let mut resolve_list = |words: &[String]| -> Vec<u32> {
                words
                    .iter()
                    .filter_map(|w| {
                        if corpus.vocab.contains(w) {
                            Some(corpus.vocab.lookup(w))
                        } else {
                            out.unresolved += 1;
                            None
                        }
                    })
                    .collect()
            };
            let syns = resolve_list(&entry.synonyms);
            let ants = resolve_list(&entry.antonyms);
            out.synonyms.insert(head_id, syns);
            out.antonyms.insert(head_id, ants);
        }
        out
    }

    /// Substitution candidates for a token: synonyms, plus antonyms when
    /// permitted (fix mode only), excluding the token itself.
    pub fn candidates(&self, token: u32, antonyms: bool) -> Vec<u32> {
        let mut out: Vec<u32> = self
            .synonyms
            .get(&token)
            .map(|v| v.iter().copied().filter(|&t| t != token).collect())
            .unwrap_or_default();
        if antonyms {
            if let Some(ants) = self.antonyms.get(&token) {
                out.extend(ants.iter().copied().filter(|&t| t != token));
            }
        }
        out
    }

    pub fn covers(&self, token: u32, antonyms: bool) -> bool {
        !self.candidates(token, antonyms).is_empty()
    }
}

/// Positions of `z` with at least one usable substitute.
pub fn covered_positions(z: &Example, lex: &ResolvedLexicon, antonyms: bool) -> Vec<usize> {
    (0..z.tokens.len())
        .filter(|&p| lex.covers(z.tokens[p], antonyms))
        .collect()
}

/// The token position most responsible for the prepared target: argmax of
/// token influence over lexicon-covered positions, ties to the lower
/// position.
pub fn select_target_token(
    z: &Example,
    engine: &mut InfluenceEngine,
    lex: &ResolvedLexicon,
    antonyms: bool,
) -> Result<usize> {
    let covered = covered_positions(z, lex, antonyms);
    if covered.is_empty() {
        return Err(Error::NoCoveredPosition);
    }
    let mut best = covered[0];
    let mut best_value = f64::NEG_INFINITY;
    for &p in &covered {
        let v = engine.token_influence(z, p)?;
        if v > best_value {
            best_value = v;
            best = p;
        }
    }
    Ok(best)
}

/// Best lexicon substitute at a fixed position under the objective;
/// deterministic, candidates scored in lexicon order, ties keep the
/// earliest.
pub fn best_substitution(
    z: &Example,
    position: usize,
    engine: &mut InfluenceEngine,
    objective: Objective,
    lex: &ResolvedLexicon,
    antonyms: bool,
) -> Result<InfluenceScore> {
    let original = z.tokens[position];
    let candidates = lex.candidates(original, antonyms);
    if candidates.is_empty() {
        return Err(Error::EmptyLexiconEntry(format!("token {original}")));
    }
    let mut best: Option<InfluenceScore> = None;
    for cand in candidates {
        let z_tilde = z.with_token(position, cand);
        let value = engine.perturbation_influence(z, &z_tilde)?;
        let better = match &best {
            None => true,
            Some(b) => match objective {
                Objective::Max => value > b.value,
                Objective::Min => value < b.value,
            },
        };
        if better {
            best = Some(InfluenceScore {
                train_id: 0,
                substitution: Some((position, cand)),
                value,
            });
        }
    }
    Ok(best.expect("candidate list was non-empty"))
}

/// Two-stage greedy search plus T seeded random-restart positions; returns
/// the best record across all T+1 candidate positions, or None when no
/// position is lexicon-covered (the caller skips to the next-ranked
/// example).
pub fn greedy_perturb(
    z: &Example,
    engine: &mut InfluenceEngine,
    objective: Objective,
    lex: &ResolvedLexicon,
    antonyms: bool,
    restarts: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Option<InfluenceScore>> {
    let covered = covered_positions(z, lex, antonyms);
    if covered.is_empty() {
        return Ok(None);
    }
    let two_stage_pos = select_target_token(z, engine, lex, antonyms)?;
    let mut best = best_substitution(z, two_stage_pos, engine, objective, lex, antonyms)?;
    for _ in 0..restarts {
        let pos = covered[rng.gen_range(0..covered.len())];
        let cand = best_substitution(z, pos, engine, objective, lex, antonyms)?;
        let better = match objective {
            Objective::Max => cand.value > best.value,
            Objective::Min => cand.value < best.value,
        };
        if better {
            best = cand;
        }
    }
    Ok(Some(best))
}

/// A test example's attack surface: its gold label, the strongest
/// incorrect label, and the saliency targets for both.
struct TestTargets {
    gold: Target,
    wrong: Target,
}

fn most_probable_incorrect(probs: &[f64], gold: u32) -> u32 {
    let mut best: Option<usize> = None;
    for (c, &p) in probs.iter().enumerate() {
        if c as u32 == gold {
            continue;
        }
        if best.is_none() || p > probs[best.unwrap()] {
            best = Some(c);
        }
    }
    best.expect("at least two classes") as u32
}

fn build_targets(
    z: &Example,
    checkpoint: &Checkpoint,
    score_kind: ScoreKind,
) -> Result<TestTargets> {
    let theta = &checkpoint.theta;
    let cfg = &checkpoint.config;
    let probs = predict_probs(z, theta, cfg)?;
    let y = z.label;
    let y_prime = most_probable_incorrect(&probs, y);

    let gold_report = token_saliency(z, y, theta, cfg, score_kind)?;
    let gold = Target::saliency(z, gold_report.top_position(), y, theta, cfg, score_kind)?;
    let wrong_report = token_saliency(z, y_prime, theta, cfg, score_kind)?;
    let wrong = Target::saliency(z, wrong_report.top_position(), y_prime, theta, cfg, score_kind)?;
    Ok(TestTargets { gold, wrong })
}

fn slot_plan(mode: AttackMode, slot: usize) -> (bool, Objective, &'static str) {
    // (use gold target?, objective, record label)
    match mode {
        AttackMode::Down => (true, Objective::Min, "down"),
        AttackMode::Up => (false, Objective::Max, "up"),
        AttackMode::Combined => {
            if slot % 2 == 0 {
                (true, Objective::Min, "down")
            } else {
                (false, Objective::Max, "up")
            }
        }
        AttackMode::Fix => unreachable!("fix mode uses fix_predictions"),
    }
}

/// Crafts the training-set attack: for every test example, perturbs its
/// top-k most responsible training examples in place. A training example
/// already perturbed for an earlier test example is skipped in favor of
/// the next-ranked one; exhausting the pool is an error.
pub fn craft_attack(
    corpus: &Dataset,
    test_set: &Dataset,
    cfg: &AttackConfig,
    checkpoint: &Checkpoint,
    lexicon: &Lexicon,
    engine: &mut InfluenceEngine,
) -> Result<(Dataset, Vec<PerturbationRecord>)> {
    cfg.validate()?;
    if !matches!(
        cfg.mode,
        AttackMode::Down | AttackMode::Up | AttackMode::Combined
    ) {
        return Err(Error::InvalidArgument(
            "craft_attack handles modes down, up and combined".into(),
        ));
    }
    let lex = ResolvedLexicon::resolve(lexicon, corpus);
    let mut edited = corpus.clone();
    let mut records = Vec::new();
    let mut used: HashSet<usize> = HashSet::new();

    for (test_id, test_z) in test_set.examples.iter().enumerate() {
        let targets = build_targets(test_z, checkpoint, ScoreKind::default())?;
        // one inverse application per needed target, rankings shared
        // across this test example's slots
        let mut rankings: BTreeMap<bool, Vec<InfluenceScore>> = BTreeMap::new();
        for slot in 0..cfg.per_test {
            let (use_gold, objective, label) = slot_plan(cfg.mode, slot);
            if !rankings.contains_key(&use_gold) {
                let target = if use_gold { &targets.gold } else { &targets.wrong };
                engine.prepare_target(target)?;
                let ranked = engine.rank_training_examples(corpus.examples.len())?;
                rankings.insert(use_gold, ranked);
            } else {
                // rank order is cached, but the engine must hold the
                // matching inverse for the scoring below
                let target = if use_gold { &targets.gold } else { &targets.wrong };
                engine.prepare_target(target)?;
            }
            let ranked = &rankings[&use_gold];

            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(((test_id as u64) << 8) | slot as u64);

            let mut placed = false;
            for candidate in ranked {
                if used.contains(&candidate.train_id) {
                    continue;
                }
                let source = &corpus.examples[candidate.train_id];
                let found =
                    greedy_perturb(source, engine, objective, &lex, false, cfg.restarts, &mut rng)?;
                let Some(best) = found else { continue };
                let (position, substituted) = best.substitution.unwrap();
                used.insert(candidate.train_id);
                edited.examples[candidate.train_id] =
                    source.with_token(position, substituted);
                records.push(PerturbationRecord {
                    train_id: candidate.train_id,
                    position,
                    original: source.tokens[position],
                    substituted,
                    objective_value: best.value,
                    mode: label,
                    target_test_id: test_id,
                });
                placed = true;
                break;
            }
            if !placed {
                return Err(Error::BudgetExhausted { k: cfg.per_test });
            }
        }
    }
    Ok((edited, records))
}

/// Augments the corpus to fix misclassified dev examples: appended copies
/// of responsible training examples, edited to pull the model's focus
/// toward the gold salient region (maximize influence on w_y) and away
/// from the wrong one (minimize influence on w_y'), with substitutes drawn
/// from synonyms and antonyms both. Originals are retained.
pub fn fix_predictions(
    corpus: &Dataset,
    dev_set: &Dataset,
    cfg: &AttackConfig,
    checkpoint: &Checkpoint,
    lexicon: &Lexicon,
    engine: &mut InfluenceEngine,
) -> Result<(Dataset, Vec<PerturbationRecord>)> {
    cfg.validate()?;
    if cfg.mode != AttackMode::Fix {
        return Err(Error::InvalidArgument(
            "fix_predictions requires mode fix".into(),
        ));
    }
    let lex = ResolvedLexicon::resolve(lexicon, corpus);
    let mut augmented = corpus.clone();
    let mut records = Vec::new();

    for (dev_id, dev_z) in dev_set.examples.iter().enumerate() {
        let probs = predict_probs(dev_z, &checkpoint.theta, &checkpoint.config)?;
        let predicted = argmax_low(&probs);
        if predicted == dev_z.label {
            continue;
        }
        let targets = build_targets(dev_z, checkpoint, ScoreKind::default())?;
        let mut rankings: BTreeMap<bool, Vec<InfluenceScore>> = BTreeMap::new();
        let mut used_here: HashSet<usize> = HashSet::new();
        for slot in 0..cfg.per_test {
            // even slots reinforce the gold focus, odd slots suppress the
            // wrong focus
            let (use_gold, objective, label) = if slot % 2 == 0 {
                (true, Objective::Max, "fix-up-gold")
            } else {
                (false, Objective::Min, "fix-down-wrong")
            };
            let target = if use_gold { &targets.gold } else { &targets.wrong };
            engine.prepare_target(target)?;
            if !rankings.contains_key(&use_gold) {
                let ranked = engine.rank_training_examples(corpus.examples.len())?;
                rankings.insert(use_gold, ranked);
            }
            let ranked = &rankings[&use_gold];

            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(0x8000_0000_0000_0000 | ((dev_id as u64) << 8) | slot as u64);

            for candidate in ranked {
                if used_here.contains(&candidate.train_id) {
                    continue;
                }
                let source = &corpus.examples[candidate.train_id];
                let found =
                    greedy_perturb(source, engine, objective, &lex, true, cfg.restarts, &mut rng)?;
                let Some(best) = found else { continue };
                let (position, substituted) = best.substitution.unwrap();
                used_here.insert(candidate.train_id);
                augmented
                    .examples
                    .push(source.with_token(position, substituted));
                records.push(PerturbationRecord {
                    train_id: candidate.train_id,
                    position,
                    original: source.tokens[position],
                    substituted,
                    objective_value: best.value,
                    mode: label,
                    target_test_id: dev_id,
                });
                break;
            }
            // no usable source found: generate fewer than per_test
        }
    }
    Ok((augmented, records))
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

/// Outcome of retraining on an edited corpus.
#[derive(Clone, Debug)]
pub struct RetrainReport {
    pub accuracy: f64,
    pub baseline_accuracy: f64,
    /// (test id, baseline prediction, retrained prediction) where they
    /// differ.
    pub flips: Vec<(usize, u32, u32)>,
}

/// Trains from scratch on the edited corpus with the fixed retrain config
/// and reports accuracy plus per-example flips against the baseline
/// checkpoint.
pub fn evaluate_retrain(
    corpus: &Dataset,
    test_set: &Dataset,
    retrain_cfg: &ModelConfig,
    baseline: &Checkpoint,
) -> Result<RetrainReport> {
    if test_set.examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let retrained = train(corpus, retrain_cfg)?;
    let acc = accuracy(test_set, &retrained.theta, retrain_cfg)?;
    let baseline_acc = accuracy(test_set, &baseline.theta, &baseline.config)?;
    let mut flips = Vec::new();
    for (id, z) in test_set.examples.iter().enumerate() {
        let old = argmax_low(&predict_probs(z, &baseline.theta, &baseline.config)?);
        let new = argmax_low(&predict_probs(z, &retrained.theta, retrain_cfg)?);
        if old != new {
            flips.push((id, old, new));
        }
    }
    Ok(RetrainReport {
        accuracy: acc,
        baseline_accuracy: baseline_acc,
        flips,
    })
}

/// Re-checks a record against the engine: the chosen substitution must be
/// optimal under its objective among all candidates at its position.
pub fn verify_record_optimality(
    record: &PerturbationRecord,
    corpus: &Dataset,
    objective: Objective,
    lex: &ResolvedLexicon,
    antonyms: bool,
    engine: &mut InfluenceEngine,
) -> Result<bool> {
    let source = &corpus.examples[record.train_id];
    let best = best_substitution(source, record.position, engine, objective, lex, antonyms)?;
    Ok(best.substitution == Some((record.position, record.substituted))
        && best.value == record.objective_value)
}
