//! Corpus and lexicon ingestion, vocabulary construction, synthetic
//! corpus generation, and checkpoint persistence.
//!
//! Corpus files are line-delimited JSON records with a `text` array of
//! pre-tokenized strings and an integer `label`. The vocabulary is built
//! from the train split only, in first-appearance order, with `<unk>`
//! pinned to id 0; dev/test tokens outside it map to `<unk>`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Checkpoint, Example, ModelConfig, ModelMode};
use crate::params::ParamVector;

pub const UNK: &str = "<unk>";
pub const UNK_ID: u32 = 0;

const CHECKPOINT_MAGIC: &str = "INFTRACE1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// Token string <-> id bijection with `<unk>` pinned at id 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab {
            words: Vec::new(),
            index: BTreeMap::new(),
        };
        v.intern(UNK);
        v
    }

    /// Id of `word`, inserting it if absent.
    pub fn intern(&mut self, word: &str) -> u32 {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.words.len() as u32;
        self.words.push(word.to_string());
        self.index.insert(word.to_string(), id);
        id
    }

    /// Id of `word`, or the UNK id.
    pub fn lookup(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub vocab: Vocab,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn max_label(&self) -> u32 {
        self.examples.iter().map(|z| z.label).max().unwrap_or(0)
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    text: Vec<String>,
    label: i64,
}

fn parse_line(path: &str, lineno: usize, line: &str) -> Result<Record> {
    let rec: Record = serde_json::from_str(line).map_err(|e| Error::CorpusParse {
        path: path.to_string(),
        line: lineno,
        detail: e.to_string(),
    })?;
    if rec.label < 0 || rec.label > u32::MAX as i64 {
        return Err(Error::CorpusParse {
            path: path.to_string(),
            line: lineno,
            detail: format!("unknown label value {}", rec.label),
        });
    }
    if rec.text.is_empty() {
        return Err(Error::CorpusParse {
            path: path.to_string(),
            line: lineno,
            detail: "empty token array".to_string(),
        });
    }
    Ok(rec)
}

/// Loads a train split, building the vocabulary in first-appearance order.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let paths = path.display().to_string();
    let mut vocab = Vocab::new();
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_line(&paths, i + 1, line)?;
        let tokens = rec.text.iter().map(|w| vocab.intern(w)).collect();
        examples.push(Example::new(tokens, rec.label as u32));
    }
    Ok(Dataset {
        examples,
        vocab,
        split: Split::Train,
    })
}

/// Loads a dev/test split against an existing vocabulary; out-of-vocabulary
/// tokens map to `<unk>`.
pub fn load_corpus_with_vocab(
    path: impl AsRef<Path>,
    vocab: &Vocab,
    split: Split,
) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let paths = path.display().to_string();
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_line(&paths, i + 1, line)?;
        let tokens = rec.text.iter().map(|w| vocab.lookup(w)).collect();
        examples.push(Example::new(tokens, rec.label as u32));
    }
    Ok(Dataset {
        examples,
        vocab: vocab.clone(),
        split,
    })
}

fn record_line(ds: &Dataset, z: &Example) -> String {
    let rec = Record {
        text: z
            .tokens
            .iter()
            .map(|&t| ds.vocab.word(t).to_string())
            .collect(),
        label: z.label as i64,
    };
    serde_json::to_string(&rec).expect("record serialization cannot fail")
}

/// Canonical byte serialization of a corpus: its JSONL save format.
pub fn canonical_bytes(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    for z in &ds.examples {
        out.extend_from_slice(record_line(ds, z).as_bytes());
        out.push(b'\n');
    }
    out
}

/// 64-bit FNV-1a over the corpus canonical bytes.
pub fn fingerprint(ds: &Dataset) -> u64 {
    fnv1a64(&canonical_bytes(ds))
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Atomic file write: temp file in the target directory, then rename.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            tempfile::NamedTempFile::new_in(d)?
        }
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn save_corpus(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    write_atomic(path, &canonical_bytes(ds))
}

// ---- lexicon ----------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LexEntry {
    pub synonyms: Vec<String>,
    pub antonyms: Vec<String>,
}

/// Word substitution table: headword -> synonyms and antonyms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lexicon {
    pub entries: BTreeMap<String, LexEntry>,
}

impl Lexicon {
    pub fn get(&self, word: &str) -> Option<&LexEntry> {
        self.entries.get(word)
    }

    /// Inserts an entry, dropping self-references.
    pub fn insert(&mut self, head: &str, synonyms: Vec<String>, antonyms: Vec<String>) {
        let entry = LexEntry {
            synonyms: synonyms.into_iter().filter(|w| w != head).collect(),
            antonyms: antonyms.into_iter().filter(|w| w != head).collect(),
        };
        self.entries.insert(head.to_string(), entry);
    }
}

fn split_words(field: &str) -> Vec<String> {
    field
        .split(',')
        .map(str::trim)
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Tab-separated lexicon: headword, comma-joined synonyms, comma-joined
/// antonyms (third field optional).
pub fn load_lexicon(path: impl AsRef<Path>) -> Result<Lexicon> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut lex = Lexicon::default();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let head = fields.next().unwrap_or("").trim().to_string();
        if head.is_empty() {
            continue;
        }
        if lex.entries.contains_key(&head) {
            return Err(Error::DuplicateHeadword(head));
        }
        let synonyms = split_words(fields.next().unwrap_or(""));
        let antonyms = split_words(fields.next().unwrap_or(""));
        lex.insert(&head, synonyms, antonyms);
    }
    Ok(lex)
}

pub fn save_lexicon(path: impl AsRef<Path>, lex: &Lexicon) -> Result<()> {
    let mut out = String::new();
    for (head, entry) in &lex.entries {
        out.push_str(head);
        out.push('\t');
        out.push_str(&entry.synonyms.join(","));
        out.push('\t');
        out.push_str(&entry.antonyms.join(","));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

// ---- synthetic corpus ---------------------------------------------------------

const POSITIVE: &[&str] = &[
    "good", "great", "fine", "nice", "superb", "lovely", "charming", "delightful",
];
const NEGATIVE: &[&str] = &[
    "bad", "awful", "poor", "dull", "dreadful", "nasty", "grim", "tedious",
];
const FILLERS: &[&str] = &[
    "the", "a", "movie", "film", "plot", "actor", "scene", "story", "show", "it", "was", "is",
    "and", "very", "quite", "this", "that", "one", "time", "end",
];
const FILLER_CLUSTERS: &[&[&str]] = &[
    &["movie", "film", "show"],
    &["plot", "story"],
    &["very", "quite"],
    &["actor", "scene"],
];

/// The planted positive and negative word sets of the synthetic corpus.
pub fn synth_polarity_words() -> (&'static [&'static str], &'static [&'static str]) {
    (POSITIVE, NEGATIVE)
}

/// Lexicon for the planted vocabulary: polarity words map to same-polarity
/// synonyms and opposite-polarity antonyms; a few filler clusters give the
/// substitution search room beyond the polarity token.
pub fn synth_lexicon() -> Lexicon {
    synth_lexicon_for(POSITIVE.len())
}

fn synth_lexicon_for(per_class: usize) -> Lexicon {
    let (pos, neg) = polarity_lists(per_class);
    let mut lex = Lexicon::default();
    for (i, w) in pos.iter().enumerate() {
        let syns: Vec<String> = pos
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, s)| s.clone())
            .collect();
        lex.insert(w, syns, neg.clone());
    }
    for (i, w) in neg.iter().enumerate() {
        let syns: Vec<String> = neg
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, s)| s.clone())
            .collect();
        lex.insert(w, syns, pos.clone());
    }
    for cluster in FILLER_CLUSTERS {
        for &w in cluster.iter() {
            let syns: Vec<String> = cluster
                .iter()
                .filter(|&&s| s != w)
                .map(|&s| s.to_string())
                .collect();
            lex.insert(w, syns, Vec::new());
        }
    }
    lex
}

/// Corpus generation knobs beyond the split sizes: how many polarity
/// words each class carries and how skewed their draw frequencies are.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub noise: f64,
    /// Polarity words per class; the first eight come from the named word
    /// lists, the rest are numbered variants of the class stem.
    pub polarity_per_class: usize,
    /// Zipf-like exponent over the polarity words; 0 draws them uniformly.
    pub frequency_skew: f64,
}

impl SynthSpec {
    pub fn new(seed: u64, n_train: usize, n_dev: usize, n_test: usize, noise: f64) -> Self {
        SynthSpec {
            seed,
            n_train,
            n_dev,
            n_test,
            noise,
            polarity_per_class: POSITIVE.len(),
            frequency_skew: 1.3,
        }
    }
}

fn polarity_lists(per_class: usize) -> (Vec<String>, Vec<String>) {
    let mut pos: Vec<String> = POSITIVE.iter().map(|s| s.to_string()).collect();
    let mut neg: Vec<String> = NEGATIVE.iter().map(|s| s.to_string()).collect();
    for i in pos.len()..per_class {
        pos.push(format!("shiny{i}"));
    }
    for i in neg.len()..per_class {
        neg.push(format!("bleak{i}"));
    }
    pos.truncate(per_class);
    neg.truncate(per_class);
    (pos, neg)
}

fn synth_sentence(
    rng: &mut ChaCha8Rng,
    noise: f64,
    pos: &[String],
    neg: &[String],
    polarity_dist: &WeightedIndex<f64>,
) -> (Vec<String>, u32) {
    let n_fill = rng.gen_range(5..=15);
    let mut words: Vec<String> = (0..n_fill)
        .map(|_| FILLERS[rng.gen_range(0..FILLERS.len())].to_string())
        .collect();
    let positive = rng.gen_bool(0.5);
    let pool = if positive { pos } else { neg };
    let word = &pool[polarity_dist.sample(rng)];
    let at = rng.gen_range(0..=words.len());
    words.insert(at, word.to_string());
    let polarity = if positive { 1 } else { 0 };
    let label = if noise > 0.0 && rng.gen_bool(noise) {
        1 - polarity
    } else {
        polarity
    };
    (words, label)
}

/// Deterministic two-class sentiment-like corpus: filler tokens plus
/// exactly one planted polarity token per example; the label equals the
/// polarity with probability 1 - noise.
pub fn synth_corpus(
    seed: u64,
    n_train: usize,
    n_dev: usize,
    n_test: usize,
    noise: f64,
) -> Result<(Dataset, Dataset, Dataset, Lexicon)> {
    synth_corpus_spec(&SynthSpec::new(seed, n_train, n_dev, n_test, noise))
}

/// Fully parameterized generator behind [`synth_corpus`].
pub fn synth_corpus_spec(spec: &SynthSpec) -> Result<(Dataset, Dataset, Dataset, Lexicon)> {
    if spec.n_train == 0 || spec.n_dev == 0 || spec.n_test == 0 {
        return Err(Error::InvalidArgument("split sizes must be at least 1".into()));
    }
    if !(0.0..0.5).contains(&spec.noise) {
        return Err(Error::InvalidArgument(format!(
            "noise {} outside [0, 0.5)",
            spec.noise
        )));
    }
    if spec.polarity_per_class == 0 {
        return Err(Error::InvalidArgument(
            "polarity_per_class must be at least 1".into(),
        ));
    }
    let noise = spec.noise;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (pos, neg) = polarity_lists(spec.polarity_per_class);
    let weights: Vec<f64> = (0..spec.polarity_per_class)
        .map(|i| 1.0 / ((i + 1) as f64).powf(spec.frequency_skew))
        .collect();
    let dist = WeightedIndex::new(weights.iter().copied())
        .map_err(|e| Error::InvalidArgument(format!("bad frequency weights: {e}")))?;

    let mut vocab = Vocab::new();
    let make = |n: usize, vocab: &mut Vocab, rng: &mut ChaCha8Rng, train: bool| {
        (0..n)
            .map(|_| {
                let (words, label) = synth_sentence(rng, noise, &pos, &neg, &dist);
                let tokens = words
                    .iter()
                    .map(|w| {
                        if train {
                            vocab.intern(w)
                        } else {
                            vocab.lookup(w)
                        }
                    })
                    .collect();
                Example::new(tokens, label)
            })
            .collect::<Vec<_>>()
    };
    let train_ex = make(spec.n_train, &mut vocab, &mut rng, true);
    let dev_ex = make(spec.n_dev, &mut vocab, &mut rng, false);
    let test_ex = make(spec.n_test, &mut vocab, &mut rng, false);

    let train = Dataset {
        examples: train_ex,
        vocab: vocab.clone(),
        split: Split::Train,
    };
    let dev = Dataset {
        examples: dev_ex,
        vocab: vocab.clone(),
        split: Split::Dev,
    };
    let test = Dataset {
        examples: test_ex,
        vocab,
        split: Split::Test,
    };
    Ok((train, dev, test, synth_lexicon_for(spec.polarity_per_class)))
}

// ---- checkpoint persistence ----------------------------------------------------

/// Versioned container: magic line, key-value text header, `end_header`,
/// then theta as little-endian 64-bit floats.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let cfg = &ckpt.config;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    out.push(b'\n');
    let mut kv = String::new();
    kv.push_str(&format!("mode {}\n", cfg.mode.as_str()));
    kv.push_str(&format!("vocab_size {}\n", cfg.vocab_size));
    kv.push_str(&format!("d {}\n", cfg.d));
    kv.push_str(&format!("h {}\n", cfg.h));
    kv.push_str(&format!("c {}\n", cfg.c));
    kv.push_str(&format!("unk_id {}\n", cfg.unk_id));
    kv.push_str(&format!("seed {}\n", cfg.seed));
    kv.push_str(&format!("lr {}\n", cfg.lr));
    kv.push_str(&format!("epochs {}\n", cfg.epochs));
    kv.push_str(&format!("l2 {}\n", cfg.l2));
    kv.push_str(&format!("fingerprint {:016x}\n", ckpt.train_fingerprint));
    kv.push_str(&format!("grad_inf {}\n", ckpt.final_grad_inf));
    kv.push_str("end_header\n");
    out.extend_from_slice(kv.as_bytes());
    for x in ckpt.theta.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    write_atomic(path, &out)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let paths = path.display().to_string();
    let magic_len = CHECKPOINT_MAGIC.len() + 1;
    if bytes.len() < magic_len
        || &bytes[..magic_len - 1] != CHECKPOINT_MAGIC.as_bytes()
        || bytes[magic_len - 1] != b'\n'
    {
        return Err(Error::BadMagic { path: paths });
    }
    let mut offset = magic_len;
    let mut fields: BTreeMap<String, String> = BTreeMap::new();
    loop {
        let line_end = bytes[offset..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::CheckpointFormat {
                path: paths.clone(),
                offset,
                detail: "unterminated header line".into(),
            })?;
        let line = std::str::from_utf8(&bytes[offset..offset + line_end]).map_err(|_| {
            Error::CheckpointFormat {
                path: paths.clone(),
                offset,
                detail: "non-utf8 header line".into(),
            }
        })?;
        offset += line_end + 1;
        if line == "end_header" {
            break;
        }
        match line.split_once(' ') {
            Some((k, v)) => {
                fields.insert(k.to_string(), v.to_string());
            }
            None => {
                return Err(Error::CheckpointFormat {
                    path: paths.clone(),
                    offset: offset - line_end - 1,
                    detail: format!("malformed header line `{line}`"),
                })
            }
        }
    }

    let field = |k: &str| -> Result<&String> {
        fields.get(k).ok_or_else(|| Error::CheckpointFormat {
            path: paths.clone(),
            offset,
            detail: format!("missing header field `{k}`"),
        })
    };
    let parse_err = |k: &str, v: &str| Error::CheckpointFormat {
        path: paths.clone(),
        offset,
        detail: format!("bad value `{v}` for `{k}`"),
    };
    macro_rules! num {
        ($k:expr, $t:ty) => {{
            let v = field($k)?;
            v.parse::<$t>().map_err(|_| parse_err($k, v))?
        }};
    }
    let mode = ModelMode::parse(field("mode")?)?;
    let cfg = ModelConfig {
        mode,
        vocab_size: num!("vocab_size", usize),
        d: num!("d", usize),
        h: num!("h", usize),
        c: num!("c", usize),
        unk_id: num!("unk_id", u32),
        seed: num!("seed", u64),
        lr: num!("lr", f64),
        epochs: num!("epochs", usize),
        l2: num!("l2", f64),
    };
    let fp_str = field("fingerprint")?;
    let train_fingerprint =
        u64::from_str_radix(fp_str, 16).map_err(|_| parse_err("fingerprint", fp_str))?;
    let final_grad_inf = num!("grad_inf", f64);

    let p = cfg.param_count();
    let body = &bytes[offset..];
    if body.len() != p * 8 {
        return Err(Error::CheckpointFormat {
            path: paths,
            offset,
            detail: format!("expected {} theta bytes, found {}", p * 8, body.len()),
        });
    }
    let data: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let proto = ParamVector::new(&cfg.layout());
    let theta = ParamVector::from_data(proto, data)?;
    Ok(Checkpoint {
        config: cfg,
        theta,
        train_fingerprint,
        final_grad_inf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelMode;
    use proptest::prelude::*;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn corpus_vocab_counts_distinct_tokens_plus_unk() {
        let dir = tmpdir();
        let path = dir.path().join("c.jsonl");
        fs::write(
            &path,
            "{\"text\":[\"aa\",\"bb\"],\"label\":0}\n{\"text\":[\"cc\",\"dd\",\"ee\"],\"label\":1}\n",
        )
        .unwrap();
        let ds = load_corpus(&path).unwrap();
        assert_eq!(ds.vocab.len(), 1 + 5);
        assert_eq!(ds.examples.len(), 2);
        // first-appearance order after the pinned unk
        assert_eq!(ds.vocab.word(0), UNK);
        assert_eq!(ds.vocab.word(1), "aa");
        assert_eq!(ds.vocab.word(5), "ee");

        let again = load_corpus(&path).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn corpus_roundtrip_is_identity() {
        let (train, _, _, _) = synth_corpus(11, 30, 2, 2, 0.1).unwrap();
        let dir = tmpdir();
        let path = dir.path().join("c.jsonl");
        save_corpus(&path, &train).unwrap();
        let back = load_corpus(&path).unwrap();
        assert_eq!(train.examples, back.examples);
        assert_eq!(train.vocab.len(), back.vocab.len());
    }

    #[test]
    fn malformed_corpus_lines_report_line_numbers() {
        let dir = tmpdir();
        let path = dir.path().join("c.jsonl");
        fs::write(&path, "{\"text\":[\"a\"],\"label\":0}\nnot json\n").unwrap();
        match load_corpus(&path) {
            Err(Error::CorpusParse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::write(&path, "{\"text\":[\"a\"],\"label\":-3}\n").unwrap();
        match load_corpus(&path) {
            Err(Error::CorpusParse { line, detail, .. }) => {
                assert_eq!(line, 1);
                assert!(detail.contains("unknown label"));
            }
            other => panic!("expected label error, got {other:?}"),
        }
    }

    #[test]
    fn dev_tokens_outside_train_vocab_map_to_unk() {
        let dir = tmpdir();
        let train_path = dir.path().join("train.jsonl");
        let dev_path = dir.path().join("dev.jsonl");
        fs::write(&train_path, "{\"text\":[\"aa\"],\"label\":0}\n").unwrap();
        fs::write(&dev_path, "{\"text\":[\"aa\",\"zz\"],\"label\":1}\n").unwrap();
        let train = load_corpus(&train_path).unwrap();
        let dev = load_corpus_with_vocab(&dev_path, &train.vocab, Split::Dev).unwrap();
        assert_eq!(dev.examples[0].tokens, vec![1, UNK_ID]);
    }

    #[test]
    fn lexicon_parses_tsv_fields() {
        let dir = tmpdir();
        let path = dir.path().join("lex.tsv");
        fs::write(&path, "good\tfine,great\tbad\nplain\tsimple\n").unwrap();
        let lex = load_lexicon(&path).unwrap();
        let good = lex.get("good").unwrap();
        assert_eq!(good.synonyms, vec!["fine", "great"]);
        assert_eq!(good.antonyms, vec!["bad"]);
        let plain = lex.get("plain").unwrap();
        assert_eq!(plain.synonyms, vec!["simple"]);
        assert!(plain.antonyms.is_empty());
    }

    #[test]
    fn lexicon_drops_self_references() {
        let dir = tmpdir();
        let path = dir.path().join("lex.tsv");
        fs::write(&path, "x\tx\n").unwrap();
        let lex = load_lexicon(&path).unwrap();
        assert!(lex.get("x").unwrap().synonyms.is_empty());
    }

    #[test]
    fn duplicate_headword_is_an_error() {
        let dir = tmpdir();
        let path = dir.path().join("lex.tsv");
        fs::write(&path, "x\ty\nx\tz\n").unwrap();
        assert!(matches!(
            load_lexicon(&path),
            Err(Error::DuplicateHeadword(w)) if w == "x"
        ));
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let a = synth_corpus(42, 600, 50, 50, 0.05).unwrap();
        let b = synth_corpus(42, 600, 50, 50, 0.05).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
        let ones = a.0.examples.iter().filter(|z| z.label == 1).count() as f64;
        let rate = ones / a.0.examples.len() as f64;
        assert!((0.45..=0.55).contains(&rate), "base rate {rate}");
    }

    #[test]
    fn planted_rule_is_perfect_at_zero_noise() {
        // Oracle: the label of every example equals the polarity of its
        // single planted polarity token.
        let (train, dev, test, _) = synth_corpus(7, 500, 60, 60, 0.0).unwrap();
        for ds in [&train, &dev, &test] {
            for z in &ds.examples {
                let mut polarity = None;
                for &t in &z.tokens {
                    let w = ds.vocab.word(t);
                    if POSITIVE.contains(&w) {
                        polarity = Some(1);
                    } else if NEGATIVE.contains(&w) {
                        polarity = Some(0);
                    }
                }
                assert_eq!(polarity.expect("one polarity token planted"), z.label);
            }
        }
    }

    #[test]
    fn sentence_lengths_are_in_range() {
        let (train, _, _, _) = synth_corpus(8, 200, 2, 2, 0.0).unwrap();
        for z in &train.examples {
            assert!((6..=16).contains(&z.tokens.len()));
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let cfg = ModelConfig {
            mode: ModelMode::Mlp,
            vocab_size: 9,
            d: 3,
            h: 2,
            c: 2,
            unk_id: 0,
            seed: 77,
            lr: 0.25,
            epochs: 10,
            l2: 1e-3,
        };
        let theta = crate::model::init_params(&cfg).unwrap();
        let ckpt = Checkpoint {
            config: cfg,
            theta,
            train_fingerprint: 0xdeadbeefcafef00d,
            final_grad_inf: 3.5e-7,
        };
        let dir = tmpdir();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, ckpt.config);
        assert_eq!(back.theta.data(), ckpt.theta.data());
        assert_eq!(back.train_fingerprint, ckpt.train_fingerprint);
        assert_eq!(back.final_grad_inf, ckpt.final_grad_inf);
    }

    #[test]
    fn corrupted_magic_and_truncation_are_detected() {
        let cfg = ModelConfig {
            mode: ModelMode::Convex,
            vocab_size: 4,
            d: 2,
            h: 0,
            c: 2,
            unk_id: 0,
            seed: 1,
            lr: 1.0,
            epochs: 5,
            l2: 0.0,
        };
        let ckpt = Checkpoint {
            config: cfg,
            theta: crate::model::init_params(&ModelConfig {
                mode: ModelMode::Convex,
                vocab_size: 4,
                d: 2,
                h: 0,
                c: 2,
                unk_id: 0,
                seed: 1,
                lr: 1.0,
                epochs: 5,
                l2: 0.0,
            })
            .unwrap(),
            train_fingerprint: 1,
            final_grad_inf: 0.0,
        };
        let dir = tmpdir();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad.ckpt");
        fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&bad), Err(Error::BadMagic { .. })));

        let bytes = fs::read(&path).unwrap();
        let trunc = dir.path().join("trunc.ckpt");
        fs::write(&trunc, &bytes[..bytes.len() - 5]).unwrap();
        match load_checkpoint(&trunc) {
            Err(Error::CheckpointFormat { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn fingerprint_flags_a_different_corpus() {
        let (train, _, _, _) = synth_corpus(1, 20, 2, 2, 0.0).unwrap();
        let (other, _, _, _) = synth_corpus(2, 20, 2, 2, 0.0).unwrap();
        let cfg = ModelConfig {
            mode: ModelMode::Convex,
            vocab_size: train.vocab.len(),
            d: 2,
            h: 0,
            c: 2,
            unk_id: 0,
            seed: 1,
            lr: 1.0,
            epochs: 50,
            l2: 1e-3,
        };
        let ckpt = crate::model::train(&train, &cfg).unwrap();
        assert!(ckpt.matches_corpus(&train));
        assert!(!ckpt.matches_corpus(&other));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn corpus_roundtrip_property(
            examples in prop::collection::vec(
                (prop::collection::vec("[a-e]{1,3}", 1..6), 0u32..3),
                1..12,
            )
        ) {
            let mut vocab = Vocab::new();
            let exs: Vec<Example> = examples
                .iter()
                .map(|(words, label)| {
                    Example::new(words.iter().map(|w| vocab.intern(w)).collect(), *label)
                })
                .collect();
            let ds = Dataset { examples: exs, vocab, split: Split::Train };
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.jsonl");
            save_corpus(&path, &ds).unwrap();
            let back = load_corpus(&path).unwrap();
            prop_assert_eq!(&ds.examples, &back.examples);
            prop_assert_eq!(fingerprint(&ds), fingerprint(&back));
        }
    }
}
