//! HTTP-backed oracles: session-based stepping and one-shot delegated generation.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{
    DecodeConfig, DecodeError, GenerationCandidate, OracleError, QuestionGenerator,
    RankedCandidates, StepOracle, StepOutput, TokenId,
};
use crate::http::{JsonEndpoint, ServiceError};
use crate::image_signals::perplexity;

#[derive(Serialize)]
struct StepRequest<'a> {
    session: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    prompt_tokens: Option<&'a [TokenId]>,
    top_k: usize,
}

#[derive(Deserialize)]
struct StepCandidate {
    token: TokenId,
    logprob: f64,
    hidden: Vec<f64>,
}

#[derive(Deserialize)]
struct StepResponse {
    candidates: Vec<StepCandidate>,
    current_hidden: Vec<f64>,
    eos_token: TokenId,
}

#[derive(Serialize)]
struct CommitRequest<'a> {
    session: &'a str,
    token: TokenId,
}

#[derive(Debug, Clone)]
pub struct RemoteSession {
    id: String,
    prompt: Option<Vec<TokenId>>,
    probes: HashMap<TokenId, Vec<f64>>,
}

/// Client for `POST /v1/step` and `POST /v1/commit`.
///
/// The server only reports a pool of `pool_size` candidates per step; tokens
/// outside it get log-probability `-inf` and cannot be probed.
#[derive(Debug)]
pub struct RemoteStepOracle {
    endpoint: JsonEndpoint,
    vocab_size: usize,
    eos_token: TokenId,
    pool_size: usize,
    next_session: AtomicU64,
    session_prefix: String,
}

impl RemoteStepOracle {
    pub fn new(
        base_url: impl Into<String>,
        vocab_size: usize,
        eos_token: TokenId,
        pool_size: usize,
    ) -> Result<Self, ServiceError> {
        Ok(Self {
            endpoint: JsonEndpoint::new(base_url)?,
            vocab_size,
            eos_token,
            pool_size: pool_size.max(1),
            next_session: AtomicU64::new(0),
            session_prefix: format!("qgkit-{}", std::process::id()),
        })
    }
}

impl StepOracle for RemoteStepOracle {
    type State = RemoteSession;

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn eos_token(&self) -> TokenId {
        self.eos_token
    }

    fn init(&self, prompt: &[TokenId]) -> Result<Self::State, OracleError> {
        let n = self.next_session.fetch_add(1, Ordering::Relaxed);
        Ok(RemoteSession {
            id: format!("{}-{n}", self.session_prefix),
            prompt: Some(prompt.to_vec()),
            probes: HashMap::new(),
        })
    }

    fn step(&self, state: &mut Self::State) -> Result<StepOutput, OracleError> {
        let prompt = state.prompt.take();
        let response: StepResponse = self.endpoint.post(
            "/v1/step",
            &StepRequest {
                session: &state.id,
                prompt_tokens: prompt.as_deref(),
                top_k: self.pool_size,
            },
        )?;
        if response.eos_token != self.eos_token {
            return Err(ServiceError::Decode(format!(
                "server eos token {} differs from configured {}",
                response.eos_token, self.eos_token
            ))
            .into());
        }
        let mut logprobs = vec![f64::NEG_INFINITY; self.vocab_size];
        state.probes.clear();
        for c in response.candidates {
            let slot = logprobs
                .get_mut(c.token as usize)
                .ok_or(OracleError::TokenOutOfRange(c.token))?;
            *slot = c.logprob;
            state.probes.insert(c.token, c.hidden);
        }
        Ok(StepOutput {
            logprobs,
            hidden: response.current_hidden,
        })
    }

    fn probe(&self, state: &mut Self::State, token: TokenId) -> Result<Vec<f64>, OracleError> {
        state
            .probes
            .get(&token)
            .cloned()
            .ok_or(OracleError::UnknownProbe(token))
    }

    fn advance(&self, state: &mut Self::State, token: TokenId) -> Result<(), OracleError> {
        let _: serde_json::Value = self.endpoint.post(
            "/v1/commit",
            &CommitRequest {
                session: &state.id,
                token,
            },
        )?;
        state.probes.clear();
        Ok(())
    }

    fn detokenize(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(TokenId::to_string)
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
    #[serde(flatten)]
    config: &'a DecodeConfig,
}

#[derive(Deserialize)]
struct GenerateResponse {
    candidates: Vec<String>,
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    prompt: &'a str,
    completion: &'a str,
}

#[derive(Deserialize)]
struct ScoreResponse {
    sum_logprob: f64,
    num_tokens: usize,
}

/// Delegates contrastive search to the server (`POST /v1/generate`) and
/// reranks the returned texts by perplexity from `POST /v1/score`.
#[derive(Debug, Clone)]
pub struct DelegatedGenerator {
    endpoint: JsonEndpoint,
}

impl DelegatedGenerator {
    pub fn new(base_url: impl Into<String>) -> Result<Self, ServiceError> {
        Ok(Self {
            endpoint: JsonEndpoint::new(base_url)?,
        })
    }

    fn score(&self, prompt: &str, completion: &str) -> Result<GenerationCandidate, DecodeError> {
        let s: ScoreResponse = self
            .endpoint
            .post("/v1/score", &ScoreRequest { prompt, completion })
            .map_err(OracleError::from)?;
        let ppl = perplexity(s.sum_logprob, s.num_tokens).map_err(|_| {
            OracleError::from(ServiceError::Decode("score with zero tokens".into()))
        })?;
        Ok(GenerationCandidate {
            tokens: Vec::new(),
            text: completion.to_string(),
            sum_logprob: s.sum_logprob,
            perplexity: ppl,
        })
    }
}

impl QuestionGenerator for DelegatedGenerator {
    fn generate_question(
        &self,
        prompt: &str,
        config: &DecodeConfig,
    ) -> Result<RankedCandidates, DecodeError> {
        config.validate()?;
        let r: GenerateResponse = self
            .endpoint
            .post("/v1/generate", &GenerateRequest { prompt, config })
            .map_err(OracleError::from)?;
        if r.candidates.is_empty() {
            return Err(DecodeError::AllCandidatesFailed(Vec::new()));
        }
        let results = r
            .candidates
            .iter()
            .map(|text| self.score(prompt, text))
            .collect();
        RankedCandidates::from_results(results)
    }
}
