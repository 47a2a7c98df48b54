//! Seeded probe sets: random language-modeling sequences and a synthetic
//! key–value retrieval task for long-context scoring.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    LanguageModeling,
    LongRangeRetrieval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSequence {
    pub tokens: Vec<u32>,
    /// Expected next token after the sequence (retrieval only).
    pub answer: Option<u32>,
}

/// Token layout of retrieval sequences:
/// `k1 v1 k2 v2 … kn vn <filler…> QUERY k?` with answer `v?`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalLayout {
    pub n_pairs: usize,
    pub query_token: u32,
    /// Half-open id range keys are drawn from.
    pub key_range: (u32, u32),
    /// Half-open id range values and filler are drawn from.
    pub value_range: (u32, u32),
}

impl RetrievalLayout {
    pub fn for_vocab(vocab: usize) -> Self {
        let v = vocab as u32;
        Self {
            n_pairs: 8,
            query_token: v - 1,
            key_range: (1, v / 2),
            value_range: (v / 2, v - 1),
        }
    }

    fn check(&self, vocab: usize, length: usize) -> Result<()> {
        let (k0, k1) = self.key_range;
        let (v0, v1) = self.value_range;
        let disjoint = k1 <= v0 || v1 <= k0;
        let q = self.query_token;
        let query_clear = !(k0..k1).contains(&q) && !(v0..v1).contains(&q);
        if k1 <= k0 || v1 <= v0 || !disjoint || !query_clear {
            return Err(Error::InvalidInput("retrieval layout ranges overlap or are empty".into()));
        }
        if [k1, v1, q + 1].iter().any(|&x| x as usize > vocab) {
            return Err(Error::InvalidInput("retrieval layout exceeds vocab".into()));
        }
        if ((k1 - k0) as usize) < self.n_pairs || self.n_pairs == 0 {
            return Err(Error::InvalidInput("not enough distinct keys for the pair count".into()));
        }
        if length < 2 * self.n_pairs + 3 {
            return Err(Error::InvalidInput(format!(
                "retrieval length {length} too short for {} pairs",
                self.n_pairs
            )));
        }
        Ok(())
    }
}

/// Recipe that regenerates a probe set; this is what run manifests record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub kind: ProbeKind,
    pub seed: u64,
    pub count: usize,
    pub length: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<RetrievalLayout>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub kind: ProbeKind,
    pub seed: u64,
    pub sequences: Vec<ProbeSequence>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<RetrievalLayout>,
}

impl ProbeSpec {
    pub fn language_modeling(seed: u64, count: usize, length: usize) -> Self {
        Self { kind: ProbeKind::LanguageModeling, seed, count, length, layout: None }
    }

    pub fn retrieval(seed: u64, count: usize, length: usize) -> Self {
        Self { kind: ProbeKind::LongRangeRetrieval, seed, count, length, layout: None }
    }

    pub fn generate(&self, config: &ModelConfig) -> Result<ProbeSet> {
        if self.length == 0 || self.length > config.max_seq_len {
            return Err(Error::SequenceTooLong { len: self.length, max: config.max_seq_len });
        }
        let kind_tag: u64 = match self.kind {
            ProbeKind::LanguageModeling => 1,
            ProbeKind::LongRangeRetrieval => 2,
        };
        let layout = match self.kind {
            ProbeKind::LanguageModeling => None,
            ProbeKind::LongRangeRetrieval => {
                let layout = self
                    .layout
                    .clone()
                    .unwrap_or_else(|| RetrievalLayout::for_vocab(config.vocab_size));
                layout.check(config.vocab_size, self.length)?;
                Some(layout)
            }
        };
        let sequences = (0..self.count)
            .map(|i| {
                let mut rng = rng::stream(self.seed, (kind_tag << 48) | i as u64);
                match &layout {
                    None => ProbeSequence {
                        tokens: (0..self.length)
                            .map(|_| rng.random_range(0..config.vocab_size as u32))
                            .collect(),
                        answer: None,
                    },
                    Some(layout) => retrieval_sequence(&mut rng, layout, self.length),
                }
            })
            .collect();
        Ok(ProbeSet { kind: self.kind, seed: self.seed, sequences, layout })
    }
}

fn retrieval_sequence(rng: &mut impl Rng, layout: &RetrievalLayout, length: usize) -> ProbeSequence {
    let mut keys: Vec<u32> = (layout.key_range.0..layout.key_range.1).collect();
    for i in 0..layout.n_pairs {
        let j = rng.random_range(i..keys.len());
        keys.swap(i, j);
    }
    keys.truncate(layout.n_pairs);
    let value = |rng: &mut dyn rand::RngCore| rng.random_range(layout.value_range.0..layout.value_range.1);
    let values: Vec<u32> = (0..layout.n_pairs).map(|_| value(rng)).collect();
    let mut tokens = Vec::with_capacity(length);
    for (k, v) in keys.iter().zip(&values) {
        tokens.push(*k);
        tokens.push(*v);
    }
    while tokens.len() < length - 2 {
        tokens.push(value(rng));
    }
    let pick = rng.random_range(0..layout.n_pairs);
    tokens.push(layout.query_token);
    tokens.push(keys[pick]);
    ProbeSequence { tokens, answer: Some(values[pick]) }
}

impl ProbeSet {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(|s| s.tokens.len()).sum()
    }

    /// Checks the retrieval contract: a trailing `QUERY key` pair whose key
    /// occurs exactly once earlier, immediately followed by the answer.
    pub fn validate_retrieval(&self) -> Result<()> {
        if self.kind != ProbeKind::LongRangeRetrieval {
            return Err(Error::InvalidInput("task score needs a long-range retrieval probe set".into()));
        }
        for (index, seq) in self.sequences.iter().enumerate() {
            let bad = |reason: &str| Error::MalformedTask { index, reason: reason.into() };
            let t = &seq.tokens;
            let answer = seq.answer.ok_or_else(|| bad("no planted answer"))?;
            if t.len() < 4 {
                return Err(bad("shorter than one pair plus query"));
            }
            let n = t.len();
            if let Some(layout) = &self.layout {
                if t[n - 2] != layout.query_token {
                    return Err(bad("second-to-last token is not the query marker"));
                }
            }
            let key = t[n - 1];
            let hits: Vec<usize> = (0..n - 2).filter(|&p| t[p] == key).collect();
            match hits.as_slice() {
                [p] if *p + 1 < n - 2 && t[p + 1] == answer => {}
                [] => return Err(bad("queried key never appears in the context")),
                [_] => return Err(bad("queried key is not followed by the answer")),
                _ => return Err(bad("queried key appears more than once")),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = ModelConfig::toy();
        let a = ProbeSpec::language_modeling(5, 3, 16).generate(&cfg).unwrap();
        let b = ProbeSpec::language_modeling(5, 3, 16).generate(&cfg).unwrap();
        let c = ProbeSpec::language_modeling(6, 3, 16).generate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.sequences.iter().all(|s| s.tokens.len() == 16));
    }

    #[test]
    fn retrieval_sequences_are_well_formed() {
        let cfg = ModelConfig::toy();
        let set = ProbeSpec::retrieval(9, 20, 64).generate(&cfg).unwrap();
        set.validate_retrieval().unwrap();
    }

    #[test]
    fn malformed_sequence_reported_with_index() {
        let cfg = ModelConfig::toy();
        let mut set = ProbeSpec::retrieval(9, 3, 64).generate(&cfg).unwrap();
        let s = &mut set.sequences[2];
        s.answer = Some(s.answer.unwrap() + 1);
        match set.validate_retrieval() {
            Err(Error::MalformedTask { index, .. }) => assert_eq!(index, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn too_long_rejected() {
        let cfg = ModelConfig::toy();
        assert!(ProbeSpec::language_modeling(1, 1, 257).generate(&cfg).is_err());
    }
}
