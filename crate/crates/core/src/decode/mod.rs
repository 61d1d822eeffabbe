//! Contrastive-search decoding with n-gram bans, minimum length and perplexity reranking.
//!
//! At every step the `k` most probable tokens (after temperature scaling) that
//! are neither banned by the no-repeat-n-gram rule nor a premature end of
//! sequence are scored by
//!
//! ```text
//! (1 - alpha) * p(token)  -  alpha * max_h cos(hidden(token), h)
//! ```
//!
//! where `h` ranges over the hidden states of the context seen so far. The
//! winner is either the argmax or a seeded draw from the min-shifted scores.

mod oracle;
mod remote;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exemplar_retrieval::{cosine_slices, RetrievalError};
use crate::image_signals::{argmin_first, perplexity};
use crate::num::Real;
use crate::rng::{derive_seed, SplitMix64};

pub use oracle::{MockEntry, MockOracle, MockOracleTable, Tokenize};
pub use remote::{DelegatedGenerator, RemoteStepOracle};

pub type TokenId = u32;

/// Floor added to min-shifted contrastive scores before they are normalized into
/// sampling weights, so the lowest-scoring candidate keeps a non-zero chance.
pub const SAMPLING_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum OracleError {
    #[error(transparent)]
    Service(#[from] crate::http::ServiceError),
    #[error("token {0} is outside the vocabulary")]
    TokenOutOfRange(TokenId),
    #[error("no hidden state available for token {0}")]
    UnknownProbe(TokenId),
    #[error("invalid oracle table: {0}")]
    InvalidTable(String),
    #[error("oracle returned {got} log-probabilities for a vocabulary of {expected}")]
    ShapeMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DecodeError {
    #[error("invalid decode config: {0}")]
    InvalidConfig(String),
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("no admissible token at step {step}")]
    DecodingDeadlock { step: usize },
    #[error("hidden state dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("all {} candidates failed; first error: {}", .0.len(), .0.first().map(|e| e.to_string()).unwrap_or_default())]
    AllCandidatesFailed(Vec<DecodeError>),
}

impl DecodeError {
    pub fn kind(&self) -> &'static str {
        match self {
            DecodeError::InvalidConfig(_) => "InvalidConfig",
            DecodeError::EmptyPrompt => "EmptyPrompt",
            DecodeError::DecodingDeadlock { .. } => "DecodingDeadlock",
            DecodeError::DimMismatch { .. } => "DimMismatch",
            DecodeError::Oracle(_) => "OracleFailure",
            DecodeError::AllCandidatesFailed(_) => "AllCandidatesFailed",
        }
    }
}

/// How the next token is chosen among the scored top-k candidates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Seeded draw proportional to min-shifted scores.
    #[default]
    Sample,
    /// Highest score, earliest candidate on ties.
    Argmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub alpha: f64,
    pub k: usize,
    pub temperature: f64,
    pub no_repeat_ngram: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub num_candidates: usize,
    pub seed: u64,
    pub selection: Selection,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self::question()
    }
}

impl DecodeConfig {
    /// Settings for question generation.
    pub fn question() -> Self {
        Self {
            alpha: 0.6,
            k: 4,
            temperature: 1.0,
            no_repeat_ngram: 3,
            min_tokens: 0,
            max_tokens: 128,
            num_candidates: 10,
            seed: 0,
            selection: Selection::Sample,
        }
    }

    /// Settings for in-process caption generation (minimum 30 tokens).
    pub fn caption() -> Self {
        Self {
            min_tokens: 30,
            ..Self::question()
        }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        let bad = |m: &str| Err(DecodeError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if self.k == 0 {
            return bad("k must be positive");
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return bad("temperature must be positive");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        if self.max_tokens < self.min_tokens {
            return bad("max_tokens is smaller than min_tokens");
        }
        if self.num_candidates == 0 {
            return bad("num_candidates must be positive");
        }
        Ok(())
    }
}

/// Log-probabilities and hidden state for the next position.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub logprobs: Vec<f64>,
    pub hidden: Vec<f64>,
}

/// A language model that can be driven one token at a time.
pub trait StepOracle {
    type State;

    fn vocab_size(&self) -> usize;
    fn eos_token(&self) -> TokenId;
    fn init(&self, prompt: &[TokenId]) -> Result<Self::State, OracleError>;
    /// Next-token log-probabilities over the whole vocabulary plus the hidden
    /// state of the last context position.
    fn step(&self, state: &mut Self::State) -> Result<StepOutput, OracleError>;
    /// Hidden state the model would have after appending `token`.
    fn probe(&self, state: &mut Self::State, token: TokenId) -> Result<Vec<f64>, OracleError>;
    fn advance(&self, state: &mut Self::State, token: TokenId) -> Result<(), OracleError>;
    fn detokenize(&self, tokens: &[TokenId]) -> String;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationCandidate {
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub sum_logprob: f64,
    pub perplexity: f64,
}

/// `(1 - alpha) * exp(candidate_logprob) - alpha * max cos(candidate_hidden, h)`.
///
/// The penalty is zero without previous hidden states; a zero hidden vector
/// counts as similarity 0.
pub fn contrastive_score<T: Real>(
    candidate_logprob: T,
    candidate_hidden: &[T],
    previous_hiddens: &[Vec<T>],
    alpha: T,
) -> Result<T, DecodeError> {
    let mut penalty: Option<T> = None;
    for h in previous_hiddens {
        let sim = match cosine_slices(candidate_hidden, h) {
            Ok(s) => s,
            Err(RetrievalError::DimMismatch { left, right }) => {
                return Err(DecodeError::DimMismatch { left, right })
            }
            Err(_) => T::zero(),
        };
        penalty = Some(penalty.map_or(sim, |p| p.max(sim)));
    }
    let penalty = penalty.unwrap_or_else(T::zero);
    Ok((T::one() - alpha) * candidate_logprob.exp() - alpha * penalty)
}

/// Tokens that would complete an `n`-gram already present in `tokens_so_far`.
pub fn banned_tokens(tokens_so_far: &[TokenId], n: usize) -> HashSet<TokenId> {
    let mut banned = HashSet::new();
    if n == 0 || tokens_so_far.len() < n {
        return banned;
    }
    let prefix = &tokens_so_far[tokens_so_far.len() - (n - 1)..];
    for gram in tokens_so_far.windows(n) {
        if &gram[..n - 1] == prefix {
            banned.insert(gram[n - 1]);
        }
    }
    banned
}

/// Temperature-scaled log-probabilities, renormalized over the finite entries.
pub fn temper(logprobs: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 1.0 {
        return logprobs.to_vec();
    }
    let scaled: Vec<f64> = logprobs.iter().map(|lp| lp / temperature).collect();
    let max = scaled
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return scaled;
    }
    let lse = max
        + scaled
            .iter()
            .filter(|v| v.is_finite())
            .map(|v| (v - max).exp())
            .sum::<f64>()
            .ln();
    scaled.iter().map(|v| v - lse).collect()
}

/// Token ids ordered by descending log-probability, lower id first on ties, NaN last.
fn rank_tokens(logprobs: &[f64]) -> Vec<TokenId> {
    let mut order: Vec<TokenId> = (0..logprobs.len() as TokenId).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (logprobs[a as usize], logprobs[b as usize]);
        match (x.is_nan(), y.is_nan()) {
            (true, true) => std::cmp::Ordering::Equal,
            (true, false) => std::cmp::Ordering::Greater,
            (false, true) => std::cmp::Ordering::Less,
            _ => y.partial_cmp(&x).expect("non-NaN"),
        }
    });
    order
}

/// Index of the first maximal score.
fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn sample_index(scores: &[f64], rng: &mut SplitMix64) -> usize {
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = scores.iter().map(|s| s - min + SAMPLING_FLOOR).collect();
    let total: f64 = weights.iter().sum();
    let target = rng.next_f64() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Decodes a single candidate. Randomness (sampling mode only) comes from `candidate_seed`.
pub fn decode_one<O: StepOracle>(
    oracle: &O,
    prompt: &[TokenId],
    config: &DecodeConfig,
    candidate_seed: u64,
) -> Result<GenerationCandidate, DecodeError> {
    config.validate()?;
    if prompt.is_empty() {
        return Err(DecodeError::EmptyPrompt);
    }
    let vocab = oracle.vocab_size();
    let eos = oracle.eos_token();
    let mut rng = SplitMix64::new(candidate_seed);
    let mut state = oracle.init(prompt)?;
    let mut tokens: Vec<TokenId> = Vec::new();
    let mut context_hiddens: Vec<Vec<f64>> = Vec::new();
    let mut sum_logprob = 0.0;

    for step in 0..config.max_tokens {
        let out = oracle.step(&mut state)?;
        if out.logprobs.len() != vocab {
            return Err(OracleError::ShapeMismatch {
                expected: vocab,
                got: out.logprobs.len(),
            }
            .into());
        }
        context_hiddens.push(out.hidden);
        let tempered = temper(&out.logprobs, config.temperature);
        let banned = banned_tokens(&tokens, config.no_repeat_ngram);
        // The emitted sequence, end token included, must reach min_tokens.
        let suppress_eos = tokens.len() + 1 < config.min_tokens;
        let candidates: Vec<TokenId> = rank_tokens(&tempered)
            .into_iter()
            .filter(|t| !banned.contains(t) && !(suppress_eos && *t == eos))
            .take(config.k)
            .collect();
        if candidates.is_empty() {
            return Err(DecodeError::DecodingDeadlock { step });
        }
        let mut scores = Vec::with_capacity(candidates.len());
        for &token in &candidates {
            let hidden = oracle.probe(&mut state, token)?;
            scores.push(contrastive_score(
                tempered[token as usize],
                &hidden,
                &context_hiddens,
                config.alpha,
            )?);
        }
        let choice = match config.selection {
            Selection::Argmax => argmax_first(&scores),
            Selection::Sample => sample_index(&scores, &mut rng),
        };
        let token = candidates[choice];
        sum_logprob += out.logprobs[token as usize];
        tokens.push(token);
        oracle.advance(&mut state, token)?;
        if token == eos {
            break;
        }
    }

    let content_len = if tokens.last() == Some(&eos) {
        tokens.len() - 1
    } else {
        tokens.len()
    };
    let text = oracle.detokenize(&tokens[..content_len]);
    let perplexity = perplexity(sum_logprob, tokens.len()).expect("max_tokens >= 1");
    Ok(GenerationCandidate {
        tokens,
        text,
        sum_logprob,
        perplexity,
    })
}

/// All decoded candidates of one prompt and the position of the reranking winner.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedCandidates {
    pub candidates: Vec<Result<GenerationCandidate, DecodeError>>,
    pub best: usize,
}

impl RankedCandidates {
    /// Picks the successful candidate with the lowest perplexity, lowest index on ties.
    pub fn from_results(
        candidates: Vec<Result<GenerationCandidate, DecodeError>>,
    ) -> Result<Self, DecodeError> {
        let scores = candidates.iter().map(|c| match c {
            Ok(c) if !c.perplexity.is_nan() => c.perplexity,
            _ => f64::INFINITY,
        });
        let best = argmin_first(scores);
        match best {
            Some(best) if candidates[best].is_ok() => Ok(Self { candidates, best }),
            _ => Err(DecodeError::AllCandidatesFailed(
                candidates.into_iter().filter_map(Result::err).collect(),
            )),
        }
    }

    pub fn winner(&self) -> &GenerationCandidate {
        self.candidates[self.best]
            .as_ref()
            .expect("winner is a successful candidate")
    }

    pub fn into_winner(self) -> GenerationCandidate {
        self.candidates
            .into_iter()
            .nth(self.best)
            .and_then(Result::ok)
            .expect("winner is a successful candidate")
    }
}

/// Seed of candidate `index` for a generation seeded with `seed`.
pub fn candidate_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, index as u64)
}

/// Decodes `num_candidates` seeded candidates and ranks them by perplexity.
pub fn generate_ranked<O: StepOracle>(
    oracle: &O,
    prompt: &[TokenId],
    config: &DecodeConfig,
) -> Result<RankedCandidates, DecodeError> {
    config.validate()?;
    let results = (0..config.num_candidates)
        .map(|i| decode_one(oracle, prompt, config, candidate_seed(config.seed, i)))
        .collect();
    RankedCandidates::from_results(results)
}

/// The lowest-perplexity candidate among `num_candidates` seeded decodes.
pub fn generate<O: StepOracle>(
    oracle: &O,
    prompt: &[TokenId],
    config: &DecodeConfig,
) -> Result<GenerationCandidate, DecodeError> {
    generate_ranked(oracle, prompt, config).map(RankedCandidates::into_winner)
}

/// Anything that turns a formatted prompt into ranked question candidates.
pub trait QuestionGenerator: Send + Sync {
    fn generate_question(
        &self,
        prompt: &str,
        config: &DecodeConfig,
    ) -> Result<RankedCandidates, DecodeError>;
}

/// Runs contrastive search locally against a tokenizing oracle.
#[derive(Debug, Clone)]
pub struct OracleGenerator<O> {
    pub oracle: O,
}

impl<O> OracleGenerator<O> {
    pub fn new(oracle: O) -> Self {
        Self { oracle }
    }
}

impl<O> QuestionGenerator for OracleGenerator<O>
where
    O: StepOracle + Tokenize + Send + Sync,
{
    fn generate_question(
        &self,
        prompt: &str,
        config: &DecodeConfig,
    ) -> Result<RankedCandidates, DecodeError> {
        let tokens = self.oracle.encode(prompt);
        generate_ranked(&self.oracle, &tokens, config)
    }
}
