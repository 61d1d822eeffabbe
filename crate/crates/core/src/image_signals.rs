//! Textual signals extracted from an image: a perplexity-reranked caption and OCR text.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::http::{JsonEndpoint, ServiceError};
use crate::num::Real;
use crate::rng::{fnv1a, SplitMix64};

/// Default number of caption samples drawn per image.
pub const DEFAULT_CAPTION_CANDIDATES: usize = 10;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SignalError {
    #[error("perplexity of an empty sequence")]
    EmptySequence,
    #[error("image `{0}` not found")]
    ImageNotFound(String),
    #[error("caption service returned no candidates")]
    EmptyCaptionSet,
    #[error("caption candidate {index} is invalid: {reason}")]
    InvalidCandidate { index: usize, reason: String },
    #[error("caption service failure: {0}")]
    CaptionFailure(String),
    #[error("OCR service failure: {0}")]
    OcrFailure(String),
}

impl SignalError {
    /// Stable short name used in per-example error records.
    pub fn kind(&self) -> &'static str {
        match self {
            SignalError::EmptySequence => "EmptySequence",
            SignalError::ImageNotFound(_) => "ImageNotFound",
            SignalError::EmptyCaptionSet => "EmptyCaptionSet",
            SignalError::InvalidCandidate { .. } => "InvalidCandidate",
            SignalError::CaptionFailure(_) => "CaptionFailure",
            SignalError::OcrFailure(_) => "OcrFailure",
        }
    }
}

/// `exp(-sum_logprob / num_tokens)`.
pub fn perplexity<T: Real>(sum_logprob: T, num_tokens: usize) -> Result<T, SignalError> {
    if num_tokens == 0 {
        return Err(SignalError::EmptySequence);
    }
    Ok((-sum_logprob / T::of_usize(num_tokens)).exp())
}

/// Index of the smallest score; the lowest index wins ties. `None` when empty.
pub fn argmin_first<T: PartialOrd + Copy>(scores: impl IntoIterator<Item = T>) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, s) in scores.into_iter().enumerate() {
        match best {
            Some((_, b)) if !(s < b) => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionCandidate {
    pub text: String,
    /// Natural-log probability summed over the generated tokens.
    pub sum_logprob: f64,
    pub num_tokens: usize,
}

impl CaptionCandidate {
    pub fn perplexity(&self) -> Result<f64, SignalError> {
        perplexity(self.sum_logprob, self.num_tokens)
    }

    fn validate(&self, index: usize) -> Result<(), SignalError> {
        let reason = if self.num_tokens == 0 {
            "num_tokens must be at least 1"
        } else if !(self.sum_logprob <= 0.0) {
            "sum_logprob must be non-positive"
        } else {
            return Ok(());
        };
        Err(SignalError::InvalidCandidate {
            index,
            reason: reason.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSignals {
    pub description: String,
    pub ocr_text: String,
    pub caption_candidates: Vec<CaptionCandidate>,
}

/// A resolved image: the locator it came from plus its raw bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageInput {
    pub locator: String,
    pub bytes: Vec<u8>,
}

impl ImageInput {
    pub fn base64(&self) -> String {
        base64::engine::general_purpose::STANDARD.encode(&self.bytes)
    }
}

/// Hex SHA-256 of an image locator; the key of mock fixture maps.
pub fn locator_hash(locator: &str) -> String {
    hex::encode(Sha256::digest(locator.as_bytes()))
}

/// Resolves locators as file paths relative to a root directory.
#[derive(Debug, Clone)]
pub struct ImageResolver {
    root: PathBuf,
}

impl ImageResolver {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, locator: &str) -> Result<ImageInput, SignalError> {
        let path = self.root.join(locator);
        std::fs::read(&path)
            .map(|bytes| ImageInput {
                locator: locator.to_string(),
                bytes,
            })
            .map_err(|_| SignalError::ImageNotFound(locator.to_string()))
    }
}

pub trait CaptionService: Send + Sync {
    fn caption(
        &self,
        image: &ImageInput,
        num_candidates: usize,
    ) -> Result<Vec<CaptionCandidate>, ServiceError>;
}

pub trait OcrService: Send + Sync {
    /// Text lines in reading order.
    fn ocr(&self, image: &ImageInput) -> Result<Vec<String>, ServiceError>;
}

/// Requests caption candidates and OCR lines for one image (concurrently) and
/// picks the minimum-perplexity caption.
pub fn extract_signals(
    image: &ImageInput,
    caption_client: &dyn CaptionService,
    ocr_client: &dyn OcrService,
    num_candidates: usize,
) -> Result<ImageSignals, SignalError> {
    let (captions, lines) = std::thread::scope(|s| {
        let ocr = s.spawn(|| ocr_client.ocr(image));
        let captions = caption_client.caption(image, num_candidates.max(1));
        (captions, ocr.join().expect("OCR worker panicked"))
    });
    let candidates = captions.map_err(|e| SignalError::CaptionFailure(e.to_string()))?;
    let lines = lines.map_err(|e| SignalError::OcrFailure(e.to_string()))?;
    select_caption(candidates, &lines)
}

/// Builds [`ImageSignals`] from raw service responses.
pub fn select_caption(
    candidates: Vec<CaptionCandidate>,
    ocr_lines: &[String],
) -> Result<ImageSignals, SignalError> {
    if candidates.is_empty() {
        return Err(SignalError::EmptyCaptionSet);
    }
    let mut scores = Vec::with_capacity(candidates.len());
    for (i, c) in candidates.iter().enumerate() {
        c.validate(i)?;
        scores.push(c.perplexity()?);
    }
    let best = argmin_first(scores.iter().copied()).expect("non-empty");
    Ok(ImageSignals {
        description: candidates[best].text.clone(),
        ocr_text: ocr_lines.join(" "),
        caption_candidates: candidates,
    })
}

// HTTP clients

#[derive(Serialize)]
struct CaptionRequest<'a> {
    image_b64: &'a str,
    num_candidates: usize,
}

#[derive(Deserialize)]
struct CaptionResponse {
    candidates: Vec<CaptionCandidate>,
}

#[derive(Serialize)]
struct OcrRequest<'a> {
    image_b64: &'a str,
}

#[derive(Deserialize)]
struct OcrResponse {
    lines: Vec<String>,
}

/// Client for `POST /v1/caption`.
#[derive(Debug, Clone)]
pub struct HttpCaptionClient {
    endpoint: JsonEndpoint,
}

impl HttpCaptionClient {
    pub fn new(base_url: impl Into<String>) -> Result<Self, ServiceError> {
        Ok(Self {
            endpoint: JsonEndpoint::new(base_url)?,
        })
    }
}

impl CaptionService for HttpCaptionClient {
    fn caption(
        &self,
        image: &ImageInput,
        num_candidates: usize,
    ) -> Result<Vec<CaptionCandidate>, ServiceError> {
        let b64 = image.base64();
        let response: CaptionResponse = self.endpoint.post(
            "/v1/caption",
            &CaptionRequest {
                image_b64: &b64,
                num_candidates,
            },
        )?;
        Ok(response.candidates)
    }
}

/// Client for `POST /v1/ocr`.
#[derive(Debug, Clone)]
pub struct HttpOcrClient {
    endpoint: JsonEndpoint,
}

impl HttpOcrClient {
    pub fn new(base_url: impl Into<String>) -> Result<Self, ServiceError> {
        Ok(Self {
            endpoint: JsonEndpoint::new(base_url)?,
        })
    }
}

impl OcrService for HttpOcrClient {
    fn ocr(&self, image: &ImageInput) -> Result<Vec<String>, ServiceError> {
        let b64 = image.base64();
        let response: OcrResponse = self.endpoint.post("/v1/ocr", &OcrRequest { image_b64: &b64 })?;
        Ok(response.lines)
    }
}

// Mocks

/// A canned response or a canned failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Canned<T> {
    Ok(T),
    Err { error: String },
}

impl<T: Clone> Canned<T> {
    fn get(&self) -> Result<T, ServiceError> {
        match self {
            Canned::Ok(v) => Ok(v.clone()),
            Canned::Err { error } => Err(ServiceError::Service(error.clone())),
        }
    }
}

/// Fixture file for the mock image services, keyed by [`locator_hash`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockImageFixtures {
    #[serde(default)]
    pub caption: HashMap<String, Canned<Vec<CaptionCandidate>>>,
    #[serde(default)]
    pub ocr: HashMap<String, Canned<Vec<String>>>,
    /// Synthesize a deterministic response for locators missing from the maps.
    #[serde(default)]
    pub synthesize_missing: bool,
}

const SUBJECTS: &[&str] = &[
    "magnet", "map", "plant", "rock", "diagram", "beaker", "leaf", "bird", "circuit", "globe",
];
const QUALIFIERS: &[&str] = &[
    "a red", "a small", "a large", "a black", "a white", "two", "a blue", "a green",
];
const SETTINGS: &[&str] = &[
    "on a white background",
    "on a table",
    "in a field",
    "with labels",
    "in the sky",
    "on a page",
];
const OCR_WORDS: &[&str] = &["N", "S", "A", "B", "North", "South", "Ohio", "Texas", "1", "2"];

fn synth_captions(locator: &str, n: usize) -> Vec<CaptionCandidate> {
    let mut rng = SplitMix64::new(fnv1a(locator.as_bytes()));
    (0..n)
        .map(|_| {
            let text = format!(
                "{} {} {}",
                QUALIFIERS[rng.below(QUALIFIERS.len() as u64) as usize],
                SUBJECTS[rng.below(SUBJECTS.len() as u64) as usize],
                SETTINGS[rng.below(SETTINGS.len() as u64) as usize],
            );
            let num_tokens = text.split_whitespace().count() + 1;
            let mean_nll = 0.2 + 2.0 * rng.next_f64();
            CaptionCandidate {
                text,
                sum_logprob: -(mean_nll * num_tokens as f64),
                num_tokens,
            }
        })
        .collect()
}

fn synth_ocr(locator: &str) -> Vec<String> {
    let mut rng = SplitMix64::new(fnv1a(locator.as_bytes()) ^ 0x6f63_72);
    let lines = rng.below(3) as usize;
    (0..lines)
        .map(|_| {
            let words = 1 + rng.below(3) as usize;
            (0..words)
                .map(|_| OCR_WORDS[rng.below(OCR_WORDS.len() as u64) as usize])
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

/// In-process caption and OCR service driven by [`MockImageFixtures`].
#[derive(Debug, Clone, Default)]
pub struct MockImageService {
    fixtures: MockImageFixtures,
}

impl MockImageService {
    pub fn new(fixtures: MockImageFixtures) -> Self {
        Self { fixtures }
    }

    /// A mock that synthesizes every response.
    pub fn synthetic() -> Self {
        Self::new(MockImageFixtures {
            synthesize_missing: true,
            ..Default::default()
        })
    }

    fn missing(&self, what: &str, locator: &str) -> ServiceError {
        ServiceError::Service(format!("no {what} fixture for `{locator}`"))
    }
}

impl CaptionService for MockImageService {
    fn caption(
        &self,
        image: &ImageInput,
        num_candidates: usize,
    ) -> Result<Vec<CaptionCandidate>, ServiceError> {
        match self.fixtures.caption.get(&locator_hash(&image.locator)) {
            Some(canned) => canned.get(),
            None if self.fixtures.synthesize_missing => {
                Ok(synth_captions(&image.locator, num_candidates))
            }
            None => Err(self.missing("caption", &image.locator)),
        }
    }
}

impl OcrService for MockImageService {
    fn ocr(&self, image: &ImageInput) -> Result<Vec<String>, ServiceError> {
        match self.fixtures.ocr.get(&locator_hash(&image.locator)) {
            Some(canned) => canned.get(),
            None if self.fixtures.synthesize_missing => Ok(synth_ocr(&image.locator)),
            None => Err(self.missing("OCR", &image.locator)),
        }
    }
}
