//! Synthetic sequence-to-sequence corpora and their on-disk format.
//!
//! Pair `i` of a corpus is drawn from its own ChaCha8 stream
//! (`seed_from_u64(seed)` with stream number `i`), and the train, dev and
//! test splits occupy consecutive index ranges, so a corpus is reproducible
//! pair by pair on any platform.
//!
//! File format: a header line `# {json}` carrying the [`TaskSpec`] and split
//! name, then one pair per line as `x<TAB>y`, each a space-separated list of
//! token ids.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Token, TokenSeq, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    NoisyCopy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Corruption probability; only meaningful for `noisy_copy`.
    #[serde(default)]
    pub p_noise: f64,
    pub vocab: usize,
    /// Content length range, inclusive; EOS is appended on top.
    pub len_min: usize,
    pub len_max: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let vocab = Vocab::new(self.vocab)?;
        if !(0.0..=1.0).contains(&self.p_noise) {
            return Err(Error::Contract(format!("p_noise must lie in [0, 1], got {}", self.p_noise)));
        }
        if self.p_noise > 0.0 && self.kind != TaskKind::NoisyCopy {
            return Err(Error::Contract("p_noise is only valid for the noisy_copy task".into()));
        }
        if self.kind == TaskKind::NoisyCopy && self.p_noise > 0.0 && vocab.num_content() < 2 {
            return Err(Error::Contract("noisy_copy needs at least two content tokens to corrupt a token".into()));
        }
        if self.len_min == 0 || self.len_min > self.len_max {
            return Err(Error::Contract(format!("length range [{}, {}] is invalid", self.len_min, self.len_max)));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.vocab)
    }

    /// Longest target sequence including its EOS.
    pub fn max_target_len(&self) -> usize {
        self.len_max + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub x: TokenSeq,
    pub y: TokenSeq,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: TaskSpec,
    pub split: Split,
    pub pairs: Vec<Pair>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

impl Splits {
    pub fn get(&self, split: Split) -> &Corpus {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// Draws pair number `index` of the task.
pub fn generate_pair(spec: &TaskSpec, index: u64) -> Result<Pair> {
    let vocab = spec.vocab()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let content = vocab.num_content() as Token;
    let len = rng.gen_range(spec.len_min..=spec.len_max);
    let source: Vec<Token> = (0..len).map(|_| rng.gen_range(1..=content)).collect();
    let (x, y) = match spec.kind {
        TaskKind::Copy => (source.clone(), source),
        TaskKind::Reverse => {
            let mut y = source.clone();
            y.reverse();
            (source, y)
        }
        TaskKind::NoisyCopy => {
            let x = source
                .iter()
                .map(|&t| {
                    if spec.p_noise > 0.0 && rng.gen_bool(spec.p_noise) {
                        // uniform over the other content tokens
                        let r = rng.gen_range(1..content);
                        if r >= t {
                            r + 1
                        } else {
                            r
                        }
                    } else {
                        t
                    }
                })
                .collect();
            (x, source)
        }
    };
    Ok(Pair { x: TokenSeq::terminated(&x), y: TokenSeq::terminated(&y) })
}

pub fn generate_corpus(spec: &TaskSpec) -> Result<Splits> {
    spec.validate()?;
    let make = |split: Split, start: usize, count: usize| -> Result<Corpus> {
        let pairs = (start..start + count).map(|i| generate_pair(spec, i as u64)).collect::<Result<Vec<_>>>()?;
        Ok(Corpus { spec: spec.clone(), split, pairs })
    };
    Ok(Splits {
        train: make(Split::Train, 0, spec.train)?,
        dev: make(Split::Dev, spec.train, spec.dev)?,
        test: make(Split::Test, spec.train + spec.dev, spec.test)?,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: TaskSpec,
    split: Split,
}

fn join_ids(seq: &TokenSeq, out: &mut String) {
    for (i, t) in seq.ids().iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{t}");
    }
}

pub fn corpus_to_string(corpus: &Corpus) -> Result<String> {
    let header =
        serde_json::to_string(&Header { spec: corpus.spec.clone(), split: corpus.split }).map_err(|e| Error::Data(e.to_string()))?;
    let mut out = format!("# {header}\n");
    for p in &corpus.pairs {
        join_ids(&p.x, &mut out);
        out.push('\t');
        join_ids(&p.y, &mut out);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_corpus(text: &str) -> Result<Corpus> {
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or(Error::Parse { line: 1, msg: "empty corpus file".into() })?;
    let json = first.strip_prefix("# ").ok_or(Error::Parse { line: 1, msg: "missing '# ' header".into() })?;
    let header: Header = serde_json::from_str(json).map_err(|e| Error::Parse { line: 1, msg: format!("bad header: {e}") })?;
    header.spec.validate().map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?;
    let vocab = header.spec.vocab()?;
    let mut pairs = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: lineno, msg };
        let (xs, ys) = line.split_once('\t').ok_or_else(|| err("expected 'x<TAB>y'".into()))?;
        let parse_seq = |field: &str| -> Result<TokenSeq> {
            let ids = field
                .split(' ')
                .map(|s| s.parse::<Token>().map_err(|e| err(format!("bad token id {s:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let seq = TokenSeq::new(ids);
            seq.validate(vocab, None).map_err(|e| err(e.to_string()))?;
            Ok(seq)
        };
        pairs.push(Pair { x: parse_seq(xs)?, y: parse_seq(ys)? });
    }
    Ok(Corpus { spec: header.spec, split: header.split, pairs })
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    fs::write(path, corpus_to_string(corpus)?)?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    parse_corpus(&fs::read_to_string(path)?)
}
