//! Command-line entry point: train a classifier, inspect saliency, trace
//! predictions back to training examples, craft training-set attacks or
//! fixes, run the verification suite, and aggregate sweep results.
//!
//! Human-readable structured text goes to standard output; machine-readable
//! records and CSVs go to disk, written atomically. Every subcommand is
//! deterministic given its full flag set.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use inftrace::attack::{
    craft_attack, evaluate_retrain, fix_predictions, AttackConfig, AttackMode,
};
use inftrace::data::{
    load_checkpoint, load_corpus, load_corpus_with_vocab, load_lexicon, save_checkpoint,
    save_corpus, save_lexicon, synth_corpus, write_atomic, Dataset, Lexicon, Split,
};
use inftrace::error::Error;
use inftrace::ihvp::{ExactSolver, IhvpConfig, IhvpMethod, ModelCurvature};
use inftrace::influence::{InfluenceEngine, Target};
use inftrace::model::{
    accuracy, nll_loss, predict_probs, train, Checkpoint, Example, ModelConfig, ModelMode,
};
use inftrace::saliency::{token_saliency, ScoreKind};
use inftrace::verify::{run_all, VerifyOptions};

#[derive(Parser)]
#[command(name = "inftrace", version, about = "Trace classifier predictions through \
token saliency and training-set influence; craft or repair training data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Model family: mlp | convex
    #[arg(long, default_value = "mlp")]
    mode: String,
    /// Embedding width
    #[arg(long, default_value_t = 8)]
    d: usize,
    /// Hidden width (mlp mode)
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    /// Descent steps (mlp) or iteration cap (convex)
    #[arg(long, default_value_t = 400)]
    epochs: usize,
    /// Learning rate
    #[arg(long, default_value_t = 2.0)]
    lr: f64,
    /// Ridge coefficient; defaults to 0 (mlp) or 1e-3 (convex)
    #[arg(long)]
    l2: Option<f64>,
}

impl ModelArgs {
    fn to_config(
        &self,
        vocab_size: usize,
        classes: usize,
        seed: u64,
    ) -> Result<ModelConfig, Error> {
        let mode = ModelMode::parse(&self.mode)?;
        let l2 = self.l2.unwrap_or(match mode {
            ModelMode::Mlp => 0.0,
            ModelMode::Convex => 1e-3,
        });
        Ok(ModelConfig {
            mode,
            vocab_size,
            d: self.d,
            h: self.hidden,
            c: classes,
            unk_id: inftrace::data::UNK_ID,
            seed,
            lr: self.lr,
            epochs: self.epochs,
            l2,
        })
    }
}

#[derive(Args, Clone)]
struct IhvpArgs {
    /// Inverse-Hessian method: exact | stochastic
    #[arg(long, default_value = "exact")]
    ihvp_method: String,
    /// Damping added to the Hessian diagonal
    #[arg(long, default_value_t = 1e-3)]
    damping: f64,
    /// Recursion scale sigma (stochastic); derived from a power-iteration
    /// estimate when omitted
    #[arg(long)]
    scale: Option<f64>,
    /// Recursion depth t (stochastic)
    #[arg(long, default_value_t = 2000)]
    depth: usize,
    /// Averaged repeats r (stochastic)
    #[arg(long, default_value_t = 8)]
    repeats: usize,
}

impl IhvpArgs {
    fn to_config(&self, seed: u64) -> Result<IhvpConfig, Error> {
        Ok(IhvpConfig {
            method: IhvpMethod::parse(&self.ihvp_method)?,
            damping: self.damping,
            scale: self.scale,
            depth: self.depth,
            repeats: self.repeats,
            seed,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the deterministic synthetic corpus and lexicon
    Synth {
        /// Output directory for train/dev/test.jsonl and lexicon.tsv
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        n_train: usize,
        #[arg(long, default_value_t = 200)]
        n_dev: usize,
        #[arg(long, default_value_t = 200)]
        n_test: usize,
        /// Label-flip probability in [0, 0.5)
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
    /// Train a checkpoint on a corpus
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Where to write the checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Class count; inferred from the corpus labels when omitted
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Per-token saliency report for test examples
    Saliency {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Restrict to one test example id
        #[arg(long)]
        example: Option<usize>,
        /// Label to explain: gold | predicted | a class id
        #[arg(long, default_value = "gold")]
        label: String,
        /// Use the pre-softmax logit as the saliency score
        #[arg(long, default_value_t = false)]
        logit_saliency: bool,
        /// Also write the records to this file
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Salient tokens plus their most responsible training examples
    Trace {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        example: Option<usize>,
        /// Label to explain: gold | predicted | a class id
        #[arg(long, default_value = "gold")]
        label: String,
        /// Salient tokens per test example
        #[arg(long, default_value_t = 1)]
        top_k: usize,
        /// Training examples per salient token
        #[arg(long, default_value_t = 5)]
        top_m: usize,
        #[command(flatten)]
        ihvp: IhvpArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for persisted per-example gradients
        #[arg(long)]
        grad_cache: Option<PathBuf>,
        /// Also write JSON records to this file
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Training-set adversarial sweep with retraining evaluation
    Attack {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated modes: down,up,combined
        #[arg(long, default_value = "down")]
        attack_mode: String,
        /// Comma-separated per-test budgets; 0 emits a baseline row
        #[arg(long, default_value = "1")]
        per_test: String,
        /// Random-restart candidate positions T
        #[arg(long, default_value_t = 5)]
        restarts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of sweep seeds (seed, seed+1, ...)
        #[arg(long, default_value_t = 1)]
        num_seeds: u64,
        #[command(flatten)]
        ihvp: IhvpArgs,
        /// Output directory for records and sweep.csv
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Augment the corpus to fix misclassified dev examples
    Fix {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        /// Optional held-out test split, reported alongside dev accuracy
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated generation budgets per misclassified example
        #[arg(long, default_value = "4")]
        per_test: String,
        #[arg(long, default_value_t = 5)]
        restarts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        num_seeds: u64,
        #[command(flatten)]
        ihvp: IhvpArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Run the oracle verification suite
    Verify {
        /// Optional corpus; a deterministic synthetic one is used otherwise
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        ihvp: IhvpArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Aggregate sweep CSVs into a mean/sd table
    Report {
        /// CSV files produced by attack/fix sweeps
        #[arg(long, num_args = 1.., required = true)]
        csv: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn init_jobs(jobs: Option<usize>) {
    if let Some(n) = jobs {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode, Error> {
    match cmd {
        Command::Synth {
            out,
            seed,
            n_train,
            n_dev,
            n_test,
            noise,
        } => {
            let (train_set, dev, test, lexicon) =
                synth_corpus(seed, n_train, n_dev, n_test, noise)?;
            std::fs::create_dir_all(&out)?;
            save_corpus(out.join("train.jsonl"), &train_set)?;
            save_corpus(out.join("dev.jsonl"), &dev)?;
            save_corpus(out.join("test.jsonl"), &test)?;
            save_lexicon(out.join("lexicon.tsv"), &lexicon)?;
            println!(
                "synth\tseed {seed}\ttrain {n_train}\tdev {n_dev}\ttest {n_test}\tnoise {noise}\tvocab {}",
                train_set.vocab.len()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            corpus,
            checkpoint,
            model,
            seed,
            classes,
        } => {
            let train_set = load_corpus(&corpus)?;
            if train_set.is_empty() {
                return Err(Error::EmptyDataset);
            }
            let classes = classes.unwrap_or(train_set.max_label() as usize + 1);
            let cfg = model.to_config(train_set.vocab.len(), classes, seed)?;
            let ckpt = train(&train_set, &cfg)?;
            let mut loss = 0.0;
            for z in &train_set.examples {
                loss += nll_loss(z, &ckpt.theta, &cfg)?;
            }
            loss /= train_set.len() as f64;
            let acc = accuracy(&train_set, &ckpt.theta, &cfg)?;
            save_checkpoint(&checkpoint, &ckpt)?;
            println!(
                "train\tloss {loss:.6}\taccuracy {acc:.4}\tgrad_inf {:.3e}\tparams {}",
                ckpt.final_grad_inf,
                cfg.param_count()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Saliency {
            corpus,
            checkpoint,
            test,
            example,
            label,
            logit_saliency,
            out,
        } => {
            let (train_set, ckpt) = load_pair(&corpus, &checkpoint)?;
            let test_set = load_corpus_with_vocab(&test, &train_set.vocab, Split::Test)?;
            let kind = if logit_saliency {
                ScoreKind::Logit
            } else {
                ScoreKind::Probability
            };
            let ids = select_ids(&test_set, example)?;
            let mut file = String::new();
            for id in ids {
                let z = &test_set.examples[id];
                let used = resolve_label(&label, z, &ckpt)?;
                let report = token_saliency(z, used, &ckpt.theta, &ckpt.config, kind)?;
                println!("example {id}\tlabel {used}");
                for t in &report.tokens {
                    let line = format!(
                        "{}\t{}\t{:.16e}\t{}",
                        t.position,
                        test_set.vocab.word(t.token),
                        t.score,
                        t.rank
                    );
                    println!("{line}");
                    file.push_str(&format!("{id}\t{line}\n"));
                }
            }
            if let Some(path) = out {
                write_atomic(path, file.as_bytes())?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Trace {
            corpus,
            checkpoint,
            test,
            example,
            label,
            top_k,
            top_m,
            ihvp,
            seed,
            grad_cache,
            out,
            jobs,
        } => {
            init_jobs(jobs);
            let (train_set, ckpt) = load_pair(&corpus, &checkpoint)?;
            let test_set = load_corpus_with_vocab(&test, &train_set.vocab, Split::Test)?;
            let ihvp_cfg = ihvp.to_config(seed)?;
            let mut engine =
                InfluenceEngine::new(&train_set, &ckpt.theta, &ckpt.config, ihvp_cfg)?;
            if let Some(dir) = grad_cache {
                engine = engine.with_cache_dir(dir);
            }
            let ids = select_ids(&test_set, example)?;
            let mut json_lines = String::new();
            for id in ids {
                let z = &test_set.examples[id];
                let used = resolve_label(&label, z, &ckpt)?;
                let trace =
                    trace_example(&mut engine, &train_set, z, id, used, top_k, top_m, &ckpt)?;
                print_trace(&trace);
                json_lines.push_str(&serde_json::to_string(&trace).expect("serializable"));
                json_lines.push('\n');
            }
            if let Some(path) = out {
                write_atomic(path, json_lines.as_bytes())?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Attack {
            corpus,
            test,
            lexicon,
            checkpoint,
            attack_mode,
            per_test,
            restarts,
            seed,
            num_seeds,
            ihvp,
            out,
            jobs,
        } => {
            init_jobs(jobs);
            let (train_set, ckpt) = load_pair(&corpus, &checkpoint)?;
            let test_set = load_corpus_with_vocab(&test, &train_set.vocab, Split::Test)?;
            if test_set.is_empty() {
                return Err(Error::EmptyDataset);
            }
            let lexicon = load_lexicon(&lexicon)?;
            let modes: Vec<AttackMode> = attack_mode
                .split(',')
                .map(AttackMode::parse)
                .collect::<Result<_, _>>()?;
            let budgets = parse_budgets(&per_test)?;
            let ihvp_cfg = ihvp.to_config(seed)?;
            std::fs::create_dir_all(&out)?;

            let solver = prepare_shared_solver(&train_set, &ckpt, &ihvp_cfg)?;
            let mut runs = Vec::new();
            for &mode in &modes {
                for &k in &budgets {
                    for s in 0..num_seeds {
                        runs.push((mode, k, seed + s));
                    }
                }
            }
            let rows: Vec<Result<(String, f64), Error>> = runs
                .par_iter()
                .map(|&(mode, k, run_seed)| {
                    attack_run(
                        &train_set, &test_set, &lexicon, &ckpt, &ihvp_cfg, &solver, mode, k,
                        run_seed, restarts, &out,
                    )
                })
                .collect();
            let mut csv = String::from("mode,k,seed,accuracy\n");
            for (row, (mode, k, run_seed)) in rows.into_iter().zip(&runs) {
                let (line, acc) = row?;
                csv.push_str(&line);
                println!(
                    "attack\t{}\tk={k}\tseed={run_seed}\taccuracy {acc:.4}",
                    mode.as_str()
                );
            }
            write_atomic(out.join("sweep.csv"), csv.as_bytes())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Fix {
            corpus,
            dev,
            test,
            lexicon,
            checkpoint,
            per_test,
            restarts,
            seed,
            num_seeds,
            ihvp,
            out,
            jobs,
        } => {
            init_jobs(jobs);
            let (train_set, ckpt) = load_pair(&corpus, &checkpoint)?;
            let dev_set = load_corpus_with_vocab(&dev, &train_set.vocab, Split::Dev)?;
            if dev_set.is_empty() {
                return Err(Error::EmptyDataset);
            }
            let test_set = match &test {
                Some(p) => Some(load_corpus_with_vocab(p, &train_set.vocab, Split::Test)?),
                None => None,
            };
            let lexicon = load_lexicon(&lexicon)?;
            let budgets = parse_budgets(&per_test)?;
            let ihvp_cfg = ihvp.to_config(seed)?;
            std::fs::create_dir_all(&out)?;

            let solver = prepare_shared_solver(&train_set, &ckpt, &ihvp_cfg)?;
            let mut runs = Vec::new();
            for &k in &budgets {
                for s in 0..num_seeds {
                    runs.push((k, seed + s));
                }
            }
            let rows: Vec<Result<String, Error>> = runs
                .par_iter()
                .map(|&(k, run_seed)| {
                    fix_run(
                        &train_set,
                        &dev_set,
                        test_set.as_ref(),
                        &lexicon,
                        &ckpt,
                        &ihvp_cfg,
                        &solver,
                        k,
                        run_seed,
                        restarts,
                        &out,
                    )
                })
                .collect();
            let mut csv = String::from("mode,k,seed,accuracy\n");
            for row in rows {
                csv.push_str(&row?);
            }
            write_atomic(out.join("sweep.csv"), csv.as_bytes())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { corpus, ihvp, seed } => {
            let loaded = match corpus {
                Some(p) => {
                    let ds = load_corpus(&p)?;
                    if ds.is_empty() {
                        return Err(Error::EmptyDataset);
                    }
                    Some(ds)
                }
                None => None,
            };
            let opts = VerifyOptions {
                corpus: loaded,
                damping: ihvp.damping,
                scale: ihvp.scale,
                depth: ihvp.depth,
                repeats: ihvp.repeats,
                seed,
            };
            let outcomes = run_all(&opts)?;
            let mut failures = 0;
            println!("{:<6}{:<36}detail", "status", "check");
            for c in &outcomes {
                let status = if c.passed { "PASS" } else { "FAIL" };
                if !c.passed {
                    failures += 1;
                }
                println!("{status:<6}{:<36}{}", c.name, c.detail);
            }
            if failures == 0 {
                println!("verify\tall {} checks passed", outcomes.len());
                Ok(ExitCode::SUCCESS)
            } else {
                println!("verify\t{failures} of {} checks failed", outcomes.len());
                Ok(ExitCode::from(1))
            }
        }
        Command::Report { csv } => {
            let mut rows: Vec<(String, usize, u64, f64)> = Vec::new();
            for path in &csv {
                let text = std::fs::read_to_string(path)?;
                for (i, line) in text.lines().enumerate() {
                    if i == 0 || line.trim().is_empty() {
                        continue;
                    }
                    let fields: Vec<&str> = line.split(',').collect();
                    if fields.len() != 4 {
                        return Err(Error::InvalidArgument(format!(
                            "{}: malformed CSV line `{line}`",
                            path.display()
                        )));
                    }
                    let parse = |s: &str| -> Result<f64, Error> {
                        s.parse()
                            .map_err(|_| Error::InvalidArgument(format!("bad number `{s}`")))
                    };
                    rows.push((
                        fields[0].to_string(),
                        parse(fields[1])? as usize,
                        parse(fields[2])? as u64,
                        parse(fields[3])?,
                    ));
                }
            }
            let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
            for (mode, k, _, acc) in rows {
                groups.entry((mode, k)).or_default().push(acc);
            }
            println!("mode\tk\truns\tmean\tsd");
            for ((mode, k), accs) in groups {
                let n = accs.len() as f64;
                let mean = accs.iter().sum::<f64>() / n;
                let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
                println!("{mode}\t{k}\t{}\t{mean:.4}\t{:.4}", accs.len(), var.sqrt());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load_pair(corpus: &Path, checkpoint: &Path) -> Result<(Dataset, Checkpoint), Error> {
    let train_set = load_corpus(corpus)?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ckpt = load_checkpoint(checkpoint)?;
    if !ckpt.matches_corpus(&train_set) {
        eprintln!(
            "warning: checkpoint fingerprint {:016x} does not match the corpus",
            ckpt.train_fingerprint
        );
    }
    Ok((train_set, ckpt))
}

fn select_ids(test_set: &Dataset, example: Option<usize>) -> Result<Vec<usize>, Error> {
    match example {
        Some(id) if id >= test_set.len() => Err(Error::InvalidArgument(format!(
            "example {id} outside the test set of {}",
            test_set.len()
        ))),
        Some(id) => Ok(vec![id]),
        None => Ok((0..test_set.len()).collect()),
    }
}

fn resolve_label(spec: &str, z: &Example, ckpt: &Checkpoint) -> Result<u32, Error> {
    match spec {
        "gold" => Ok(z.label),
        "predicted" => {
            let probs = predict_probs(z, &ckpt.theta, &ckpt.config)?;
            Ok(argmax_low(&probs))
        }
        other => {
            let id: u32 = other
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad --label `{other}`")))?;
            if id as usize >= ckpt.config.c {
                return Err(Error::LabelOutOfRange {
                    label: id,
                    classes: ckpt.config.c,
                });
            }
            Ok(id)
        }
    }
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

fn parse_budgets(spec: &str) -> Result<Vec<usize>, Error> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("bad per-test value `{s}`")))
        })
        .collect()
}

fn prepare_shared_solver(
    train_set: &Dataset,
    ckpt: &Checkpoint,
    ihvp_cfg: &IhvpConfig,
) -> Result<Option<Arc<ExactSolver>>, Error> {
    if ihvp_cfg.method != IhvpMethod::Exact {
        return Ok(None);
    }
    let mut curv = ModelCurvature::new(train_set, &ckpt.theta, &ckpt.config)?;
    Ok(Some(Arc::new(ExactSolver::prepare(
        &mut curv,
        ihvp_cfg.damping,
    )?)))
}

fn make_engine<'a>(
    train_set: &'a Dataset,
    ckpt: &'a Checkpoint,
    ihvp_cfg: &IhvpConfig,
    solver: &Option<Arc<ExactSolver>>,
) -> Result<InfluenceEngine<'a>, Error> {
    match solver {
        Some(s) => InfluenceEngine::with_shared_solver(
            train_set,
            &ckpt.theta,
            &ckpt.config,
            ihvp_cfg.clone(),
            Arc::clone(s),
        ),
        None => InfluenceEngine::new(train_set, &ckpt.theta, &ckpt.config, ihvp_cfg.clone()),
    }
}

// ---- trace ------------------------------------------------------------------

#[derive(Serialize)]
struct TraceSalient {
    position: usize,
    token: String,
    score: f64,
    sources: Vec<TraceSource>,
}

#[derive(Serialize)]
struct TraceSource {
    train_id: usize,
    influence: f64,
    token_position: usize,
    token: String,
    token_influence: f64,
}

#[derive(Serialize)]
struct TraceRecord {
    test_id: usize,
    label_used: u32,
    gold_label: u32,
    predicted: u32,
    salient: Vec<TraceSalient>,
}

#[allow(clippy::too_many_arguments)]
fn trace_example(
    engine: &mut InfluenceEngine,
    train_set: &Dataset,
    z: &Example,
    test_id: usize,
    label_used: u32,
    top_k: usize,
    top_m: usize,
    ckpt: &Checkpoint,
) -> Result<TraceRecord, Error> {
    let report = token_saliency(z, label_used, &ckpt.theta, &ckpt.config, ScoreKind::default())?;
    let probs = predict_probs(z, &ckpt.theta, &ckpt.config)?;
    let k = top_k.min(z.tokens.len());
    let mut salient = Vec::new();
    for (position, token, score) in report.top(k)? {
        let target = Target::saliency(
            z,
            position,
            label_used,
            &ckpt.theta,
            &ckpt.config,
            ScoreKind::default(),
        )?;
        engine.prepare_target(&target)?;
        let m = top_m.min(train_set.len());
        let ranked = engine.rank_training_examples(m)?;
        let mut sources = Vec::new();
        for s in ranked {
            let source = &train_set.examples[s.train_id];
            let mut best = (0usize, f64::NEG_INFINITY);
            for p in 0..source.tokens.len() {
                let v = engine.token_influence(source, p)?;
                if v > best.1 {
                    best = (p, v);
                }
            }
            sources.push(TraceSource {
                train_id: s.train_id,
                influence: s.value,
                token_position: best.0,
                token: train_set.vocab.word(source.tokens[best.0]).to_string(),
                token_influence: best.1,
            });
        }
        salient.push(TraceSalient {
            position,
            token: train_set.vocab.word(token).to_string(),
            score,
            sources,
        });
    }
    Ok(TraceRecord {
        test_id,
        label_used,
        gold_label: z.label,
        predicted: argmax_low(&probs),
        salient,
    })
}

fn print_trace(trace: &TraceRecord) {
    println!(
        "test {}\tlabel {}\tgold {}\tpredicted {}",
        trace.test_id, trace.label_used, trace.gold_label, trace.predicted
    );
    for s in &trace.salient {
        println!(
            "  salient\tpos {}\ttoken {}\tscore {:.16e}",
            s.position, s.token, s.score
        );
        for src in &s.sources {
            println!(
                "    train {}\tinfluence {:.16e}\ttoken-pos {}\ttoken {}\ttoken-influence {:.16e}",
                src.train_id, src.influence, src.token_position, src.token, src.token_influence
            );
        }
    }
}

// ---- attack / fix runs --------------------------------------------------------

fn records_text(
    records: &[inftrace::attack::PerturbationRecord],
    vocab: &inftrace::data::Vocab,
) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!(
            "{}\t{}\t{}->{}\t{:.16e}\t{}\t{}\n",
            r.train_id,
            r.position,
            vocab.word(r.original),
            vocab.word(r.substituted),
            r.objective_value,
            r.mode,
            r.target_test_id
        ));
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn attack_run(
    train_set: &Dataset,
    test_set: &Dataset,
    lexicon: &Lexicon,
    ckpt: &Checkpoint,
    ihvp_cfg: &IhvpConfig,
    solver: &Option<Arc<ExactSolver>>,
    mode: AttackMode,
    k: usize,
    run_seed: u64,
    restarts: usize,
    out: &Path,
) -> Result<(String, f64), Error> {
    let retrain = ModelConfig {
        seed: run_seed,
        ..ckpt.config.clone()
    };
    if k == 0 {
        // baseline: retrain on the unperturbed corpus
        let report = evaluate_retrain(train_set, test_set, &retrain, ckpt)?;
        let line = format!("baseline,0,{run_seed},{}\n", report.accuracy);
        return Ok((line, report.accuracy));
    }
    let mut engine = make_engine(train_set, ckpt, ihvp_cfg, solver)?;
    let acfg = AttackConfig {
        mode,
        per_test: k,
        restarts,
        seed: run_seed,
        retrain,
    };
    let (edited, records) = craft_attack(train_set, test_set, &acfg, ckpt, lexicon, &mut engine)?;
    let report = evaluate_retrain(&edited, test_set, &acfg.retrain, ckpt)?;
    let name = format!("records_{}_k{}_seed{}.tsv", mode.as_str(), k, run_seed);
    write_atomic(
        out.join(name),
        records_text(&records, &train_set.vocab).as_bytes(),
    )?;
    let line = format!("{},{k},{run_seed},{}\n", mode.as_str(), report.accuracy);
    Ok((line, report.accuracy))
}

#[allow(clippy::too_many_arguments)]
fn fix_run(
    train_set: &Dataset,
    dev_set: &Dataset,
    test_set: Option<&Dataset>,
    lexicon: &Lexicon,
    ckpt: &Checkpoint,
    ihvp_cfg: &IhvpConfig,
    solver: &Option<Arc<ExactSolver>>,
    k: usize,
    run_seed: u64,
    restarts: usize,
    out: &Path,
) -> Result<String, Error> {
    let retrain = ModelConfig {
        seed: run_seed,
        ..ckpt.config.clone()
    };
    if k == 0 {
        let report = evaluate_retrain(train_set, dev_set, &retrain, ckpt)?;
        let mut lines = format!("fix-baseline,0,{run_seed},{}\n", report.accuracy);
        if let Some(test) = test_set {
            let t = evaluate_retrain(train_set, test, &retrain, ckpt)?;
            lines.push_str(&format!("fix-baseline-test,0,{run_seed},{}\n", t.accuracy));
        }
        return Ok(lines);
    }
    let mut engine = make_engine(train_set, ckpt, ihvp_cfg, solver)?;
    let acfg = AttackConfig {
        mode: AttackMode::Fix,
        per_test: k,
        restarts,
        seed: run_seed,
        retrain,
    };
    let (augmented, records) =
        fix_predictions(train_set, dev_set, &acfg, ckpt, lexicon, &mut engine)?;
    let report = evaluate_retrain(&augmented, dev_set, &acfg.retrain, ckpt)?;
    let name = format!("records_fix_k{}_seed{}.tsv", k, run_seed);
    write_atomic(
        out.join(name),
        records_text(&records, &train_set.vocab).as_bytes(),
    )?;
    let mut lines = format!("fix,{k},{run_seed},{}\n", report.accuracy);
    if let Some(test) = test_set {
        let t = evaluate_retrain(&augmented, test, &acfg.retrain, ckpt)?;
        lines.push_str(&format!("fix-test,{k},{run_seed},{}\n", t.accuracy));
    }
    Ok(lines)
}
