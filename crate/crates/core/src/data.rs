//! Synthetic classification task with easy and hard examples.
//!
//! Easy examples carry one class keyword within the first few positions.
//! Hard examples carry two "part" tokens more than one attention window
//! apart; the label is the sum of their values modulo the class count, so
//! neither token alone predicts it. Everything else is filler drawn
//! uniformly from the non-keyword vocabulary.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EatError, Result};

pub const CLS_ID: u32 = 0;
pub const PAD_ID: u32 = 1;
const SPECIAL_TOKENS: usize = 2;

/// Positions (after CLS) where an easy keyword may appear.
const EASY_KEYWORD_SPAN: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub ids: Vec<u32>,
    pub label: usize,
    pub difficulty: Difficulty,
}

impl Example {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub num_classes: usize,
    pub vocab_size: usize,
    /// Body length bounds, CLS excluded.
    pub min_len: usize,
    pub max_len: usize,
    pub easy_fraction: f64,
    /// Hard-example part tokens are placed more than this many positions apart.
    pub window: usize,
    pub keywords_per_class: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            num_classes: 2,
            vocab_size: 1000,
            min_len: 16,
            max_len: 48,
            easy_fraction: 0.5,
            window: 8,
            keywords_per_class: 4,
            train_size: 1600,
            dev_size: 400,
            seed: 42,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.easy_fraction) {
            return Err(EatError::invalid("easy fraction must lie in [0, 1]"));
        }
        if self.num_classes < 2 {
            return Err(EatError::invalid("need at least two classes"));
        }
        if self.min_len > self.max_len || self.min_len < self.window + 2 || self.min_len < EASY_KEYWORD_SPAN {
            return Err(EatError::invalid(format!(
                "body length bounds [{}, {}] cannot hold two tokens more than {} apart",
                self.min_len, self.max_len, self.window
            )));
        }
        let vocab = Vocab::new(self)?;
        if vocab.filler.len() < 8 {
            return Err(EatError::invalid("vocabulary leaves too few filler tokens"));
        }
        Ok(())
    }
}

/// Token inventory of a task: specials, class keywords, part tokens, filler.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    /// `easy[c]` are keywords of class `c`.
    pub easy: Vec<Vec<u32>>,
    /// `first_part[v]` / `second_part[v]` carry value `v` in hard examples.
    pub first_part: Vec<Vec<u32>>,
    pub second_part: Vec<Vec<u32>>,
    pub filler: Vec<u32>,
}

impl Vocab {
    pub fn new(spec: &TaskSpec) -> Result<Self> {
        let mut tokens = vec!["[CLS]".to_string(), "[PAD]".to_string()];
        let group = |prefix: &str, tokens: &mut Vec<String>| -> Vec<Vec<u32>> {
            (0..spec.num_classes)
                .map(|c| {
                    (0..spec.keywords_per_class)
                        .map(|j| {
                            tokens.push(format!("{prefix}{c}_{j}"));
                            (tokens.len() - 1) as u32
                        })
                        .collect()
                })
                .collect()
        };
        let easy = group("key", &mut tokens);
        let first_part = group("first", &mut tokens);
        let second_part = group("second", &mut tokens);
        if tokens.len() >= spec.vocab_size {
            return Err(EatError::invalid(format!(
                "vocab size {} too small for {} reserved tokens",
                spec.vocab_size,
                tokens.len()
            )));
        }
        let filler: Vec<u32> = (tokens.len() as u32..spec.vocab_size as u32).collect();
        for &id in &filler {
            tokens.push(format!("w{id}"));
        }
        debug_assert!(SPECIAL_TOKENS <= tokens.len());
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Ok(Vocab {
            tokens,
            index,
            easy,
            first_part,
            second_part,
            filler,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Class of an easy keyword, if `id` is one.
    pub fn keyword_class(&self, id: u32) -> Option<usize> {
        self.easy.iter().position(|ks| ks.contains(&id))
    }

    /// Value carried by a part token, if `id` is one.
    pub fn part_value(&self, id: u32) -> Option<usize> {
        self.first_part
            .iter()
            .position(|ks| ks.contains(&id))
            .or_else(|| self.second_part.iter().position(|ks| ks.contains(&id)))
    }
}

/// Maps text tokens to ids, prepending CLS.
pub fn tokenize<S: AsRef<str>>(tokens: &[S], vocab: &Vocab) -> Result<Vec<u32>> {
    let mut ids = Vec::with_capacity(tokens.len() + 1);
    ids.push(CLS_ID);
    for t in tokens {
        let t = t.as_ref();
        let id = vocab.id(t).ok_or_else(|| EatError::OutOfVocab(t.to_string()))?;
        if id == CLS_ID {
            return Err(EatError::invalid("[CLS] may only appear at position 0"));
        }
        ids.push(id);
    }
    Ok(ids)
}

/// Inverse of [`tokenize`] for the body (CLS dropped).
pub fn detokenize(ids: &[u32], vocab: &Vocab) -> Result<Vec<String>> {
    ids.iter()
        .skip(1)
        .map(|&id| {
            vocab
                .token(id)
                .map(str::to_string)
                .ok_or(EatError::UnknownToken { id, vocab: vocab.len() })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

/// Deterministic train/dev generation. Dev sequences never repeat a train
/// sequence.
pub fn synthesize(spec: &TaskSpec) -> Result<Splits> {
    spec.validate()?;
    let vocab = Vocab::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let train = generate_split(spec, &vocab, spec.train_size, &mut rng, &mut seen);
    let dev = generate_split(spec, &vocab, spec.dev_size, &mut rng, &mut seen);
    Ok(Splits { train, dev })
}

fn generate_split(
    spec: &TaskSpec,
    vocab: &Vocab,
    n: usize,
    rng: &mut ChaCha8Rng,
    seen: &mut HashSet<Vec<u32>>,
) -> Vec<Example> {
    let n_easy = (spec.easy_fraction * n as f64).round() as usize;
    let mut plan: Vec<(Difficulty, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        let (difficulty, j) = if i < n_easy {
            (Difficulty::Easy, i)
        } else {
            (Difficulty::Hard, i - n_easy)
        };
        plan.push((difficulty, j % spec.num_classes));
    }
    plan.shuffle(rng);
    plan.into_iter()
        .map(|(difficulty, label)| loop {
            let ex = generate_one(spec, vocab, difficulty, label, rng);
            if seen.insert(ex.ids.clone()) {
                break ex;
            }
        })
        .collect()
}

fn generate_one(spec: &TaskSpec, vocab: &Vocab, difficulty: Difficulty, label: usize, rng: &mut ChaCha8Rng) -> Example {
    let len = rng.random_range(spec.min_len..=spec.max_len);
    let mut body: Vec<u32> = (0..len).map(|_| vocab.filler[rng.random_range(0..vocab.filler.len())]).collect();
    match difficulty {
        Difficulty::Easy => {
            let pos = rng.random_range(0..EASY_KEYWORD_SPAN);
            body[pos] = pick(&vocab.easy[label], rng);
        }
        Difficulty::Hard => {
            let c = spec.num_classes;
            let a = rng.random_range(0..c);
            let b = (label + c - a) % c;
            let gap = rng.random_range(spec.window + 1..len);
            let first = rng.random_range(0..len - gap);
            body[first] = pick(&vocab.first_part[a], rng);
            body[first + gap] = pick(&vocab.second_part[b], rng);
        }
    }
    let mut ids = Vec::with_capacity(len + 1);
    ids.push(CLS_ID);
    ids.extend(body);
    Example {
        ids,
        label,
        difficulty,
    }
}

fn pick(options: &[u32], rng: &mut ChaCha8Rng) -> u32 {
    options[rng.random_range(0..options.len())]
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let file = File::create(path).map_err(|e| EatError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n").map_err(|e| EatError::io(path, e))?;
    }
    w.flush().map_err(|e| EatError::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let file = File::open(path).map_err(|e| EatError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| EatError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Label frequency of the most common class.
pub fn majority_fraction(examples: &[Example], num_classes: usize) -> f64 {
    let mut counts = vec![0usize; num_classes];
    for ex in examples {
        counts[ex.label] += 1;
    }
    counts.into_iter().max().unwrap_or(0) as f64 / examples.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TaskSpec {
        TaskSpec {
            train_size: 400,
            dev_size: 100,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn deterministic_by_seed() {
        let a = synthesize(&small()).unwrap();
        let b = synthesize(&small()).unwrap();
        assert_eq!(a, b);
        let c = synthesize(&TaskSpec { seed: 7, ..small() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn easy_fraction_one() {
        let s = synthesize(&TaskSpec { easy_fraction: 1.0, ..small() }).unwrap();
        assert!(s.train.iter().chain(&s.dev).all(|e| e.difficulty == Difficulty::Easy));
    }

    #[test]
    fn keyword_oracle() {
        let spec = small();
        let vocab = Vocab::new(&spec).unwrap();
        let s = synthesize(&spec).unwrap();
        let all: Vec<&Example> = s.train.iter().chain(&s.dev).collect();

        // easy: any keyword gives the label
        let easy: Vec<&&Example> = all.iter().filter(|e| e.difficulty == Difficulty::Easy).collect();
        let hits = easy
            .iter()
            .filter(|e| e.ids.iter().find_map(|&id| vocab.keyword_class(id)) == Some(e.label))
            .count();
        assert_eq!(hits, easy.len());

        // hard: best single part-token lookup table, fitted on the data itself
        let hard: Vec<&&Example> = all.iter().filter(|e| e.difficulty == Difficulty::Hard).collect();
        for which in 0..2 {
            let mut table: HashMap<u32, Vec<usize>> = HashMap::new();
            let token_of = |e: &Example| {
                e.ids.iter().copied().filter(|&id| vocab.part_value(id).is_some()).nth(which).unwrap()
            };
            for e in &hard {
                table.entry(token_of(e)).or_insert_with(|| vec![0; spec.num_classes])[e.label] += 1;
            }
            let correct: usize = table.values().map(|c| *c.iter().max().unwrap()).sum();
            let acc = correct as f64 / hard.len() as f64;
            assert!(acc <= 0.75, "single-token lookup accuracy {acc}");
        }
        assert!(hard.iter().all(|e| !e.ids.iter().any(|&id| vocab.keyword_class(id).is_some())));
    }

    #[test]
    fn structural_invariants() {
        let spec = small();
        let vocab = Vocab::new(&spec).unwrap();
        let s = synthesize(&spec).unwrap();
        let train: HashSet<&Vec<u32>> = s.train.iter().map(|e| &e.ids).collect();
        assert!(s.dev.iter().all(|e| !train.contains(&e.ids)));
        for e in s.train.iter().chain(&s.dev) {
            assert_eq!(e.ids[0], CLS_ID);
            assert!(e.ids[1..].iter().all(|&id| id != CLS_ID));
            assert!((spec.min_len + 1..=spec.max_len + 1).contains(&e.len()));
            assert!(e.label < spec.num_classes);
            if e.difficulty == Difficulty::Hard {
                let parts: Vec<usize> = (0..e.len()).filter(|&p| vocab.part_value(e.ids[p]).is_some()).collect();
                assert_eq!(parts.len(), 2);
                assert!(parts[1] - parts[0] > spec.window);
            }
        }
        for split in [&s.train, &s.dev] {
            let frac = majority_fraction(split, spec.num_classes);
            assert!(frac - 0.5 <= 0.02, "label imbalance {frac}");
        }
    }

    #[test]
    fn tokenizer() {
        let vocab = Vocab::new(&small()).unwrap();
        assert_eq!(tokenize::<&str>(&[], &vocab).unwrap(), vec![CLS_ID]);
        let body = ["key1_0", "w500", "first0_2"];
        let ids = tokenize(&body, &vocab).unwrap();
        assert_eq!(detokenize(&ids, &vocab).unwrap(), body);
        assert!(matches!(tokenize(&["nope"], &vocab), Err(EatError::OutOfVocab(_))));
        assert!(tokenize(&["[CLS]"], &vocab).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dev.jsonl");
        let s = synthesize(&small()).unwrap();
        write_jsonl(&path, &s.dev).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), s.dev);
    }
}
