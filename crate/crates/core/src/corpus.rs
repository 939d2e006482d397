//! Synthetic token corpora with planted cross-sequence redundancy.
//!
//! A corpus is built from `num_templates` random base sequences. Each output
//! sequence copies one template and resamples every position independently
//! with probability `mutation_rate`, so the mutation rate directly controls how
//! much structure sequences share. Sequence `i` is drawn from its own RNG
//! stream, which makes a longer corpus an extension of a shorter one with the
//! same seed.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token id reserved for padding; generated tokens are always >= 1.
pub const PAD_TOKEN: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelRule {
    /// Label is the index of the template the sequence was copied from.
    TemplateId,
    /// Label is the parity of the token sum.
    Parity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub vocab_size: u32,
    pub seq_len: usize,
    pub num_sequences: usize,
    pub num_templates: usize,
    pub mutation_rate: f64,
    pub seed: u64,
    pub label_rule: LabelRule,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(Error::invalid(format!(
                "mutation rate {} outside [0, 1]",
                self.mutation_rate
            )));
        }
        if self.num_templates == 0 {
            return Err(Error::invalid("need at least one template"));
        }
        if self.vocab_size < 2 {
            return Err(Error::invalid("vocabulary needs a pad token and one word"));
        }
        if self.seq_len == 0 {
            return Err(Error::invalid("sequence length must be positive"));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        match self.label_rule {
            LabelRule::TemplateId => self.num_templates,
            LabelRule::Parity => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub label: usize,
}

fn word<R: Rng>(rng: &mut R, vocab: u32) -> u32 {
    rng.gen_range(1..vocab)
}

pub fn generate(spec: &CorpusSpec) -> Result<Vec<TokenSequence>> {
    spec.validate()?;
    let mut trng = ChaCha8Rng::seed_from_u64(spec.seed);
    let templates: Vec<Vec<u32>> = (0..spec.num_templates)
        .map(|_| (0..spec.seq_len).map(|_| word(&mut trng, spec.vocab_size)).collect())
        .collect();

    let corpus = (0..spec.num_sequences)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64 + 1);
            let t = rng.gen_range(0..spec.num_templates);
            let tokens: Vec<u32> = templates[t]
                .iter()
                .map(|&tok| {
                    if rng.gen::<f64>() < spec.mutation_rate {
                        word(&mut rng, spec.vocab_size)
                    } else {
                        tok
                    }
                })
                .collect();
            let label = match spec.label_rule {
                LabelRule::TemplateId => t,
                LabelRule::Parity => (tokens.iter().map(|&v| u64::from(v)).sum::<u64>() % 2) as usize,
            };
            TokenSequence { tokens, label }
        })
        .collect();
    Ok(corpus)
}

/// FNV-1a; stable across platforms and releases.
fn stable_hash(word: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in word.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Whitespace tokenization with hashed word ids, truncated or padded to `seq_len`.
pub fn tokenize(text: &str, vocab_size: u32, seq_len: usize) -> TokenSequence {
    let words = u64::from(vocab_size.max(2) - 1);
    let mut tokens: Vec<u32> = text
        .split_whitespace()
        .take(seq_len)
        .map(|w| (stable_hash(w) % words) as u32 + 1)
        .collect();
    tokens.resize(seq_len, PAD_TOKEN);
    TokenSequence { tokens, label: 0 }
}

/// One record per line: `label<TAB>tok tok tok ...`.
pub fn write_corpus(path: &Path, corpus: &[TokenSequence]) -> Result<()> {
    let mut out = String::new();
    for seq in corpus {
        write!(out, "{}\t", seq.label).unwrap();
        for (i, t) in seq.tokens.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{t}").unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<TokenSequence>> {
    let file = fs::File::open(path)?;
    let mut corpus = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::format(path, format!("line {}: {what}", n + 1));
        let (label, toks) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
        let label = label.trim().parse().map_err(|_| bad("bad label"))?;
        let tokens = toks
            .split_whitespace()
            .map(|t| t.parse::<u32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("bad token id"))?;
        corpus.push(TokenSequence { tokens, label });
    }
    Ok(corpus)
}

/// Tokenizes every non-empty line of a UTF-8 text file.
pub fn read_text(path: &Path, vocab_size: u32, seq_len: usize) -> Result<Vec<TokenSequence>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| tokenize(l, vocab_size, seq_len))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(mutation_rate: f64, templates: usize, n: usize) -> CorpusSpec {
        CorpusSpec {
            vocab_size: 500,
            seq_len: 24,
            num_sequences: n,
            num_templates: templates,
            mutation_rate,
            seed: 11,
            label_rule: LabelRule::TemplateId,
        }
    }

    fn overlap(a: &[u32], b: &[u32]) -> f64 {
        a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
    }

    #[test]
    fn zero_mutation_copies_templates() {
        let c = generate(&spec(0.0, 3, 30)).unwrap();
        for a in &c {
            for b in &c {
                assert_eq!(a.label == b.label, a.tokens == b.tokens);
            }
        }
    }

    #[test]
    fn full_mutation_is_iid() {
        let s = spec(1.0, 2, 200);
        let c = generate(&s).unwrap();
        let mut total = 0.0;
        let mut pairs = 0;
        for i in 0..c.len() {
            for j in i + 1..c.len() {
                total += overlap(&c[i].tokens, &c[j].tokens);
                pairs += 1;
            }
        }
        let mean = total / f64::from(pairs);
        let expected = 1.0 / f64::from(s.vocab_size - 1);
        assert!((mean - expected).abs() < 3.0 * expected, "{mean} vs {expected}");
    }

    #[test]
    fn within_template_more_similar() {
        let c = generate(&spec(0.2, 2, 100)).unwrap();
        let (mut within, mut nw, mut across, mut na) = (0.0, 0, 0.0, 0);
        for i in 0..c.len() {
            for j in i + 1..c.len() {
                let o = overlap(&c[i].tokens, &c[j].tokens);
                if c[i].label == c[j].label {
                    within += o;
                    nw += 1;
                } else {
                    across += o;
                    na += 1;
                }
            }
        }
        assert!(within / f64::from(nw) >= across / f64::from(na));
    }

    #[test]
    fn prefix_stable_and_in_vocab() {
        let short = generate(&spec(0.3, 4, 10)).unwrap();
        let long = generate(&spec(0.3, 4, 40)).unwrap();
        assert_eq!(short[..], long[..10]);
        assert!(long.iter().flat_map(|s| &s.tokens).all(|&t| (1..500).contains(&t)));
    }

    #[test]
    fn rejects_bad_spec() {
        assert!(generate(&spec(1.5, 2, 3)).is_err());
        assert!(generate(&spec(0.1, 0, 3)).is_err());
    }

    #[test]
    fn tokenize_cases() {
        let t = tokenize("a a a", 100, 6);
        assert_eq!(t.tokens[0], t.tokens[1]);
        assert_eq!(t.tokens[1], t.tokens[2]);
        assert_eq!(&t.tokens[3..], &[PAD_TOKEN; 3]);
        assert_eq!(t.tokens.len(), 6);
        assert_eq!(tokenize("I like apple", 100, 2).tokens.len(), 2);
        assert_eq!(tokenize("x y z", 100, 8), tokenize("x y z", 100, 8));
    }

    #[test]
    fn corpus_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        let c = generate(&spec(0.5, 3, 12)).unwrap();
        write_corpus(&p, &c).unwrap();
        assert_eq!(read_corpus(&p).unwrap(), c);
    }
}
