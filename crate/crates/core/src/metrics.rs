//! BLEU-4, METEOR and ROUGE-L over a shared tokenizer, an optional external
//! learned scorer, and averaging across independent runs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http::{JsonEndpoint, ServiceError};
use crate::num::Real;

/// Zero clipped n-gram counts are replaced by this value in BLEU.
pub const BLEU_EPSILON: f64 = 1e-9;

/// Node budget of the METEOR chunk search; beyond it the best alignment found so far is used.
pub const METEOR_SEARCH_BUDGET: usize = 2_000_000;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MetricError {
    #[error("{candidates} candidates for {references} references")]
    PairingError { candidates: usize, references: usize },
    #[error("runs cover different example sets")]
    RunMismatch,
    #[error("no runs to average")]
    NoRuns,
    #[error("external scorer failed: {0}")]
    External(#[from] ServiceError),
}

static TOKEN_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\p{P}|[^\s\p{P}]+").expect("valid token pattern"));

/// Lowercased tokens; every punctuation character is its own token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenizedText(pub Vec<String>);

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }
}

impl<S: Into<String>> FromIterator<S> for TokenizedText {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self(iter.into_iter().map(Into::into).collect())
    }
}

pub fn tokenize(text: &str) -> TokenizedText {
    let lower = text.to_lowercase();
    TOKEN_RE
        .find_iter(&lower)
        .map(|m| m.as_str().to_string())
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Corpus BLEU-4: pooled clipped precisions for orders 1 to 4, uniform weights,
/// brevity penalty, and [`BLEU_EPSILON`] in place of zero match counts.
pub fn bleu4<T: Real>(
    candidates: &[TokenizedText],
    references: &[TokenizedText],
) -> Result<T, MetricError> {
    if candidates.len() != references.len() {
        return Err(MetricError::PairingError {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if candidates.is_empty() {
        return Ok(T::zero());
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=4 {
            let ref_counts = ngram_counts(&r.0, n);
            for (gram, count) in ngram_counts(&c.0, n) {
                matches[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    let eps = T::of(BLEU_EPSILON);
    let quarter = T::of(0.25);
    let mut log_mean = T::zero();
    for n in 0..4 {
        let denominator = T::of_usize(totals[n].max(1));
        let numerator = if matches[n] == 0 {
            eps
        } else {
            T::of_usize(matches[n])
        };
        log_mean = log_mean + quarter * (numerator / denominator).ln();
    }
    let brevity = if cand_len >= ref_len {
        T::one()
    } else if cand_len == 0 {
        T::zero()
    } else {
        (T::one() - T::of_usize(ref_len) / T::of_usize(cand_len)).exp()
    };
    Ok(brevity * log_mean.exp())
}

/// Maximum-cardinality exact-match alignment with the fewest chunks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    /// `(candidate position, reference position)`, sorted by candidate position.
    pub pairs: Vec<(usize, usize)>,
    pub chunks: usize,
    /// False when the search budget ran out before optimality was proven.
    pub exact: bool,
}

/// Chunks of an alignment: maximal runs of pairs adjacent in both sequences.
pub fn count_chunks(pairs: &[(usize, usize)]) -> usize {
    if pairs.is_empty() {
        return 0;
    }
    1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

struct ChunkSearch<'a> {
    cand: &'a [usize],
    reference: &'a [usize],
    /// Reference positions per word id.
    positions: Vec<Vec<usize>>,
    /// Matches still owed per word to reach maximum cardinality.
    owed: Vec<usize>,
    /// Candidate occurrences of each word at or after position i.
    remaining_after: Vec<Vec<usize>>,
    used: Vec<bool>,
    current: Vec<Option<usize>>,
    best: Option<(usize, Vec<Option<usize>>)>,
    nodes: usize,
    budget: usize,
}

impl ChunkSearch<'_> {
    /// Depth-first over candidate positions; `continuations` counts pairs extending
    /// the previous pair diagonally, so chunks = matches - continuations.
    fn search(&mut self, i: usize, continuations: usize) {
        self.nodes += 1;
        if i == self.cand.len() {
            if self.best.as_ref().is_none_or(|(b, _)| continuations > *b) {
                self.best = Some((continuations, self.current.clone()));
            }
            return;
        }
        if self.nodes > self.budget && self.best.is_some() {
            return;
        }
        // Each later position adds at most one continuation.
        let ceiling = continuations + (self.cand.len() - i);
        if self.best.as_ref().is_some_and(|(b, _)| ceiling <= *b) {
            return;
        }
        let w = self.cand[i];
        let prev = if i > 0 { self.current[i - 1] } else { None };
        if self.owed[w] > 0 {
            let mut options: Vec<usize> = self.positions[w]
                .iter()
                .copied()
                .filter(|&j| !self.used[j])
                .collect();
            // Try the diagonal continuation first to find good bounds early.
            if let Some(p) = prev {
                if let Some(pos) = options.iter().position(|&j| j == p + 1) {
                    options.swap(0, pos);
                }
            }
            for j in options {
                let extends = prev == Some(j.wrapping_sub(1)) && j > 0;
                self.used[j] = true;
                self.owed[w] -= 1;
                self.current[i] = Some(j);
                self.search(i + 1, continuations + usize::from(extends));
                self.current[i] = None;
                self.owed[w] += 1;
                self.used[j] = false;
            }
        }
        // Skipping is allowed only if later occurrences can still pay what is owed.
        if self.remaining_after[i + 1].get(w).copied().unwrap_or(0) >= self.owed[w] {
            self.search(i + 1, continuations);
        }
    }
}

/// Exact-unigram alignment maximizing matches, then minimizing chunks.
pub fn meteor_alignment(candidate: &TokenizedText, reference: &TokenizedText) -> Alignment {
    meteor_alignment_with_budget(candidate, reference, METEOR_SEARCH_BUDGET)
}

pub fn meteor_alignment_with_budget(
    candidate: &TokenizedText,
    reference: &TokenizedText,
    budget: usize,
) -> Alignment {
    let mut ids: HashMap<&str, usize> = HashMap::new();
    let mut cand = Vec::with_capacity(candidate.len());
    let mut refs = Vec::with_capacity(reference.len());
    for (tokens, out) in [(&candidate.0, &mut cand), (&reference.0, &mut refs)] {
        for t in tokens {
            let next = ids.len();
            out.push(*ids.entry(t.as_str()).or_insert(next));
        }
    }
    // Reference-only words never need a slot.
    let vocab = ids.len();
    let mut positions = vec![Vec::new(); vocab];
    for (j, &w) in refs.iter().enumerate() {
        positions[w].push(j);
    }
    let mut cand_counts = vec![0usize; vocab];
    for &w in &cand {
        cand_counts[w] += 1;
    }
    let owed: Vec<usize> = (0..vocab)
        .map(|w| cand_counts[w].min(positions[w].len()))
        .collect();
    let mut remaining_after = vec![vec![0usize; vocab]; cand.len() + 1];
    for i in (0..cand.len()).rev() {
        remaining_after[i] = remaining_after[i + 1].clone();
        remaining_after[i][cand[i]] += 1;
    }
    let mut search = ChunkSearch {
        cand: &cand,
        reference: &refs,
        positions,
        owed,
        remaining_after,
        used: vec![false; refs.len()],
        current: vec![None; cand.len()],
        best: None,
        nodes: 0,
        budget,
    };
    debug_assert_eq!(search.reference.len(), refs.len());
    search.search(0, 0);
    let exact = search.nodes <= budget;
    let (_, assignment) = search.best.expect("skip-only path always completes");
    let pairs: Vec<(usize, usize)> = assignment
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| (i, j)))
        .collect();
    let chunks = count_chunks(&pairs);
    Alignment {
        pairs,
        chunks,
        exact,
    }
}

/// METEOR from match and chunk counts: `F = 10PR / (R + 9P)`, `penalty = 0.5 (chunks/m)^3`.
pub fn meteor_from_counts<T: Real>(matches: usize, chunks: usize, cand_len: usize, ref_len: usize) -> T {
    if matches == 0 {
        return T::zero();
    }
    let m = T::of_usize(matches);
    let precision = m / T::of_usize(cand_len);
    let recall = m / T::of_usize(ref_len);
    let f_mean = T::of(10.0) * precision * recall / (recall + T::of(9.0) * precision);
    let frag = T::of_usize(chunks) / m;
    let penalty = T::of(0.5) * frag * frag * frag;
    f_mean * (T::one() - penalty)
}

pub fn meteor<T: Real>(candidate: &TokenizedText, reference: &TokenizedText) -> T {
    let a = meteor_alignment(candidate, reference);
    meteor_from_counts(a.pairs.len(), a.chunks, candidate.len(), reference.len())
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// ROUGE-L F1 over the longest common subsequence.
pub fn rouge_l<T: Real>(candidate: &TokenizedText, reference: &TokenizedText) -> T {
    let l = lcs_len(&candidate.0, &reference.0);
    if l == 0 {
        return T::zero();
    }
    let lcs = T::of_usize(l);
    let p = lcs / T::of_usize(candidate.len());
    let r = lcs / T::of_usize(reference.len());
    T::of(2.0) * p * r / (p + r)
}

/// Learned pairwise metric served elsewhere.
pub trait ExternalScorer: Send + Sync {
    fn score_pair(&self, candidate: &str, reference: &str) -> Result<f64, ServiceError>;
}

#[derive(Serialize)]
struct ScorePairRequest<'a> {
    candidate: &'a str,
    reference: &'a str,
}

#[derive(Deserialize)]
struct ScorePairResponse {
    score: f64,
}

/// Client for `POST /v1/score_pair`.
#[derive(Debug, Clone)]
pub struct HttpScorer {
    endpoint: JsonEndpoint,
}

impl HttpScorer {
    pub fn new(base_url: impl Into<String>) -> Result<Self, ServiceError> {
        Ok(Self {
            endpoint: JsonEndpoint::new(base_url)?,
        })
    }
}

impl ExternalScorer for HttpScorer {
    fn score_pair(&self, candidate: &str, reference: &str) -> Result<f64, ServiceError> {
        let r: ScorePairResponse = self.endpoint.post(
            "/v1/score_pair",
            &ScorePairRequest {
                candidate,
                reference,
            },
        )?;
        Ok(r.score)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores<T> {
    pub bleu4: T,
    pub meteor: T,
    #[serde(rename = "rougeL")]
    pub rouge_l: T,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub external: Option<T>,
}

/// Where a run's predictions came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Seconds since the Unix epoch at which the predictions were produced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report<T> {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    pub num_examples: usize,
    pub corpus: Scores<T>,
    pub per_example: BTreeMap<String, Scores<T>>,
}

/// One scored pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPair {
    pub id: String,
    pub prediction: String,
    pub reference: String,
}

/// Scores every pair and aggregates: corpus-level BLEU, mean METEOR, ROUGE-L
/// and external score.
pub fn evaluate<T: Real>(
    pairs: &[EvalPair],
    scorer: Option<&dyn ExternalScorer>,
) -> Result<Report<T>, MetricError> {
    let cands: Vec<TokenizedText> = pairs.iter().map(|p| tokenize(&p.prediction)).collect();
    let refs: Vec<TokenizedText> = pairs.iter().map(|p| tokenize(&p.reference)).collect();
    let mut per_example = BTreeMap::new();
    for (i, pair) in pairs.iter().enumerate() {
        let pair_c = std::slice::from_ref(&cands[i]);
        let pair_r = std::slice::from_ref(&refs[i]);
        let external = match scorer {
            Some(s) => Some(T::of(s.score_pair(&pair.prediction, &pair.reference)?)),
            None => None,
        };
        per_example.insert(
            pair.id.clone(),
            Scores {
                bleu4: bleu4(pair_c, pair_r)?,
                meteor: meteor(&cands[i], &refs[i]),
                rouge_l: rouge_l(&cands[i], &refs[i]),
                external,
            },
        );
    }
    let n = T::of_usize(pairs.len().max(1));
    let mean = |f: fn(&Scores<T>) -> T| per_example.values().map(f).sum::<T>() / n;
    let corpus = Scores {
        bleu4: bleu4(&cands, &refs)?,
        meteor: mean(|s| s.meteor),
        rouge_l: mean(|s| s.rouge_l),
        external: scorer.map(|_| mean(|s| s.external.unwrap_or_else(T::zero))),
    };
    Ok(Report {
        provenance: None,
        num_examples: pairs.len(),
        corpus,
        per_example,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Averaged<T> {
    pub mean: Scores<T>,
    pub per_example_mean: BTreeMap<String, Scores<T>>,
    pub runs: Vec<Report<T>>,
}

fn mean_scores<'a, T: Real>(items: impl ExactSizeIterator<Item = &'a Scores<T>>) -> Scores<T> {
    let n = T::of_usize(items.len());
    let items: Vec<_> = items.collect();
    let all_external = items.iter().all(|s| s.external.is_some());
    Scores {
        bleu4: items.iter().map(|s| s.bleu4).sum::<T>() / n,
        meteor: items.iter().map(|s| s.meteor).sum::<T>() / n,
        rouge_l: items.iter().map(|s| s.rouge_l).sum::<T>() / n,
        external: all_external
            .then(|| items.iter().filter_map(|s| s.external).sum::<T>() / n),
    }
}

/// Field-wise arithmetic mean of the runs' corpus and per-example scores.
pub fn average_runs<T: Real>(reports: Vec<Report<T>>) -> Result<Averaged<T>, MetricError> {
    let first = reports.first().ok_or(MetricError::NoRuns)?;
    let ids: BTreeSet<&String> = first.per_example.keys().collect();
    for r in &reports[1..] {
        if r.per_example.keys().collect::<BTreeSet<_>>() != ids {
            return Err(MetricError::RunMismatch);
        }
    }
    let mean = mean_scores(reports.iter().map(|r| &r.corpus));
    let per_example_mean = ids
        .iter()
        .map(|&id| {
            let m = mean_scores(reports.iter().map(|r| &r.per_example[id]));
            (id.clone(), m)
        })
        .collect();
    Ok(Averaged {
        mean,
        per_example_mean,
        runs: reports,
    })
}
