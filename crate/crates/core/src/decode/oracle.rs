//! Table-driven in-process oracle for tests and offline pipelines.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{OracleError, StepOracle, StepOutput, TokenId};
use crate::rng::{fnv1a, mix64, SplitMix64};

/// Maps text to token ids.
pub trait Tokenize {
    fn encode(&self, text: &str) -> Vec<TokenId>;
}

/// Next-token distribution and hidden state at one history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockEntry {
    pub logprobs: Vec<f64>,
    pub hidden: Vec<f64>,
}

/// Fixture format of [`MockOracle`].
///
/// `entries` is keyed by token histories written as vocabulary words joined
/// with single spaces; `""` is the empty history. A lookup uses the last
/// `context` tokens (prompt included). Without `fallback_seed` it backs off to
/// the longest suffix present in the table, so `""` must exist. With a seed,
/// histories missing from the table get a distribution synthesized from a hash
/// of the key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockOracleTable {
    pub vocab: Vec<String>,
    pub eos_token: TokenId,
    #[serde(default)]
    pub unk_token: Option<TokenId>,
    pub context: usize,
    pub hidden_dim: usize,
    #[serde(default)]
    pub entries: BTreeMap<String, MockEntry>,
    #[serde(default)]
    pub fallback_seed: Option<u64>,
}

const NORMALIZATION_TOLERANCE: f64 = 1e-6;

fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|l| l - lse).collect()
}

#[derive(Debug, Clone)]
pub struct MockOracle {
    table: MockOracleTable,
    word_ids: HashMap<String, TokenId>,
}

impl MockOracle {
    pub fn new(table: MockOracleTable) -> Result<Self, OracleError> {
        let invalid = |m: String| Err(OracleError::InvalidTable(m));
        let v = table.vocab.len();
        if v == 0 {
            return invalid("empty vocabulary".into());
        }
        if table.eos_token as usize >= v {
            return invalid(format!("eos_token {} outside vocabulary", table.eos_token));
        }
        if table.unk_token.is_some_and(|u| u as usize >= v) {
            return invalid("unk_token outside vocabulary".into());
        }
        if table.hidden_dim == 0 {
            return invalid("hidden_dim must be positive".into());
        }
        let mut word_ids = HashMap::with_capacity(v);
        for (i, w) in table.vocab.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return invalid(format!("vocabulary word {w:?} is empty or contains whitespace"));
            }
            if word_ids.insert(w.clone(), i as TokenId).is_some() {
                return invalid(format!("duplicate vocabulary word {w:?}"));
            }
        }
        for (key, entry) in &table.entries {
            if key.split(' ').filter(|s| !s.is_empty()).any(|w| !word_ids.contains_key(w)) {
                return invalid(format!("history {key:?} uses words outside the vocabulary"));
            }
            if entry.logprobs.len() != v {
                return invalid(format!("history {key:?}: {} log-probabilities for {v} words", entry.logprobs.len()));
            }
            if entry.hidden.len() != table.hidden_dim {
                return invalid(format!("history {key:?}: hidden state of wrong dimension"));
            }
            let lse = logsumexp(&entry.logprobs);
            if !(lse.abs() <= NORMALIZATION_TOLERANCE) {
                return invalid(format!("history {key:?}: log-probabilities sum to {lse} in log space"));
            }
        }
        if table.fallback_seed.is_none() && !table.entries.contains_key("") {
            return invalid("table without fallback_seed needs a root entry \"\"".into());
        }
        Ok(Self { table, word_ids })
    }

    pub fn from_json(text: &str) -> Result<Self, OracleError> {
        let table: MockOracleTable =
            serde_json::from_str(text).map_err(|e| OracleError::InvalidTable(e.to_string()))?;
        Self::new(table)
    }

    pub fn table(&self) -> &MockOracleTable {
        &self.table
    }

    /// Random explicit table over words `</s> t1 .. t{vocab_size-1}` with an entry
    /// for every history of up to `context` tokens.
    pub fn random(seed: u64, vocab_size: usize, hidden_dim: usize, context: usize) -> Self {
        assert!(vocab_size >= 1 && hidden_dim >= 1);
        let vocab: Vec<String> = (0..vocab_size)
            .map(|i| if i == 0 { "</s>".to_string() } else { format!("t{i}") })
            .collect();
        let mut rng = SplitMix64::new(seed);
        let mut entries = BTreeMap::new();
        let mut frontier: Vec<Vec<usize>> = vec![vec![]];
        for _ in 0..=context {
            let mut next = Vec::new();
            for history in &frontier {
                let key = history.iter().map(|&t| vocab[t].as_str()).collect::<Vec<_>>().join(" ");
                entries.insert(key, random_entry(&mut rng, vocab_size, hidden_dim));
                if history.len() < context {
                    for t in 0..vocab_size {
                        let mut h = history.clone();
                        h.push(t);
                        next.push(h);
                    }
                }
            }
            frontier = next;
        }
        Self::new(MockOracleTable {
            vocab,
            eos_token: 0,
            unk_token: None,
            context,
            hidden_dim,
            entries,
            fallback_seed: None,
        })
        .expect("generated table is valid")
    }

    /// Oracle with no table: every history is synthesized from `seed`.
    pub fn hashed(seed: u64, vocab_size: usize, hidden_dim: usize, context: usize) -> Self {
        let vocab: Vec<String> = (0..vocab_size)
            .map(|i| if i == 0 { "</s>".to_string() } else { format!("t{i}") })
            .collect();
        Self::new(MockOracleTable {
            vocab,
            eos_token: 0,
            unk_token: None,
            context,
            hidden_dim,
            entries: BTreeMap::new(),
            fallback_seed: Some(seed),
        })
        .expect("hashed table is valid")
    }

    fn key(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| self.table.vocab[t as usize].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Entry for a full token history.
    pub fn entry(&self, history: &[TokenId]) -> MockEntry {
        let start = history.len().saturating_sub(self.table.context);
        let window = &history[start..];
        if let Some(seed) = self.table.fallback_seed {
            let key = self.key(window);
            return match self.table.entries.get(&key) {
                Some(e) => e.clone(),
                None => {
                    let mut rng = SplitMix64::new(fnv1a(key.as_bytes()) ^ mix64(seed));
                    random_entry(&mut rng, self.table.vocab.len(), self.table.hidden_dim)
                }
            };
        }
        for drop in 0..=window.len() {
            if let Some(e) = self.table.entries.get(&self.key(&window[drop..])) {
                return e.clone();
            }
        }
        unreachable!("root entry checked at construction")
    }

    fn check(&self, token: TokenId) -> Result<(), OracleError> {
        if (token as usize) < self.table.vocab.len() {
            Ok(())
        } else {
            Err(OracleError::TokenOutOfRange(token))
        }
    }
}

fn random_entry(rng: &mut SplitMix64, vocab_size: usize, hidden_dim: usize) -> MockEntry {
    let logits: Vec<f64> = (0..vocab_size).map(|_| 4.0 * rng.next_f64()).collect();
    let hidden = (0..hidden_dim).map(|_| 2.0 * rng.next_f64() - 1.0).collect();
    MockEntry {
        logprobs: log_softmax(&logits),
        hidden,
    }
}

impl StepOracle for MockOracle {
    type State = Vec<TokenId>;

    fn vocab_size(&self) -> usize {
        self.table.vocab.len()
    }

    fn eos_token(&self) -> TokenId {
        self.table.eos_token
    }

    fn init(&self, prompt: &[TokenId]) -> Result<Self::State, OracleError> {
        for &t in prompt {
            self.check(t)?;
        }
        Ok(prompt.to_vec())
    }

    fn step(&self, state: &mut Self::State) -> Result<StepOutput, OracleError> {
        let e = self.entry(state);
        Ok(StepOutput {
            logprobs: e.logprobs,
            hidden: e.hidden,
        })
    }

    fn probe(&self, state: &mut Self::State, token: TokenId) -> Result<Vec<f64>, OracleError> {
        self.check(token)?;
        state.push(token);
        let hidden = self.entry(state).hidden;
        state.pop();
        Ok(hidden)
    }

    fn advance(&self, state: &mut Self::State, token: TokenId) -> Result<(), OracleError> {
        self.check(token)?;
        state.push(token);
        Ok(())
    }

    fn detokenize(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .filter(|&&t| t != self.table.eos_token)
            .map(|&t| self.table.vocab[t as usize].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl Tokenize for MockOracle {
    /// Lowercased whitespace words; unknown words map to `unk_token` or are dropped.
    fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .filter_map(|w| {
                self.word_ids
                    .get(&w.to_lowercase())
                    .copied()
                    .or(self.table.unk_token)
            })
            .collect()
    }
}
