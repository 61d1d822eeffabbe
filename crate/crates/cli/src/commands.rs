use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use qgkit::corpus::{
    filter_complete, read_records, split, MultimodalExample, SplitAssignment, SplitCounts,
};
use qgkit::decode::{
    DecodeConfig, DelegatedGenerator, MockOracle, MockOracleTable, OracleGenerator,
    QuestionGenerator,
};
use qgkit::exemplar_retrieval::{
    Embedding, EmbeddingService, HttpEmbeddingClient, Index, MockEmbedder,
};
use qgkit::image_signals::{
    extract_signals, CaptionService, HttpCaptionClient, HttpOcrClient, ImageResolver,
    ImageSignals, MockImageFixtures, MockImageService, OcrService,
};
use qgkit::metrics::{average_runs, evaluate, EvalPair, ExternalScorer, HttpScorer, Provenance};
use qgkit::promptkit::{
    build_chat_prompt, format_prompt, parse_chat_output, ChatMessage, ChatService,
    HttpChatClient, MockChat, Shot,
};
use qgkit::rng::{derive_seed, fnv1a};
use qgkit::trainjob::export_train_files;

use crate::config::PipelineConfig;
use crate::io::{read_json_file, read_jsonl_file, timestamp, write_json, write_jsonl};
use crate::mock::{default_mock_table, MOCK_CHAT_REPLY};

/// How a batch command ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    Partial,
    AllFailed,
}

impl Outcome {
    fn from_counts(total: usize, failed: usize) -> Self {
        match failed {
            0 => Outcome::Ok,
            f if f == total => Outcome::AllFailed,
            _ => Outcome::Partial,
        }
    }

    pub fn worst(self, other: Self) -> Self {
        use Outcome::*;
        match (self, other) {
            (AllFailed, _) | (_, AllFailed) => AllFailed,
            (Partial, _) | (_, Partial) => Partial,
            _ => Ok,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowError {
    pub kind: String,
    pub message: String,
}

impl RowError {
    fn new(kind: &str, message: impl ToString) -> Self {
        Self {
            kind: kind.to_string(),
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalRow {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signals: Option<ImageSignals>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<RowError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub prediction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<RowError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub source: String,
    pub seed: Option<u64>,
    pub timestamp: u64,
    pub num_examples: usize,
    pub num_failed: usize,
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        builder = builder.num_threads(j.max(1));
    }
    Ok(builder.build()?)
}

fn meta_path(predictions: &Path) -> PathBuf {
    let stem = predictions
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    predictions.with_file_name(format!("{stem}.meta.json"))
}

pub fn read_examples(path: &Path) -> Result<Vec<MultimodalExample>> {
    read_jsonl_file(path)
}

fn read_signals(path: &Path) -> Result<HashMap<String, ImageSignals>> {
    let rows: Vec<SignalRow> = read_jsonl_file(path)?;
    Ok(rows
        .into_iter()
        .filter_map(|r| r.signals.map(|s| (r.id, s)))
        .collect())
}

fn by_id(examples: &[MultimodalExample]) -> HashMap<&str, &MultimodalExample> {
    examples.iter().map(|e| (e.id.as_str(), e)).collect()
}

// preprocess

pub fn preprocess(corpus: &Path, out: &Path, config: &PipelineConfig) -> Result<Outcome> {
    let f = File::open(corpus).with_context(|| format!("opening {}", corpus.display()))?;
    let records =
        read_records(BufReader::new(f)).with_context(|| format!("reading {}", corpus.display()))?;
    let examples = filter_complete(&records)?;
    let counts = config
        .split
        .counts
        .unwrap_or_else(|| SplitCounts::proportional(examples.len()));
    let assignment = split(&examples, config.split.seed, counts)?;
    write_jsonl(&out.join("examples.jsonl"), &examples)?;
    write_json(&out.join("split.json"), &assignment)?;
    let c = assignment.counts();
    println!(
        "{} records, {} complete: train {} / validation {} / test {}",
        records.len(),
        examples.len(),
        c.train,
        c.validation,
        c.test
    );
    Ok(Outcome::Ok)
}

// describe

fn image_services(
    config: &PipelineConfig,
) -> Result<(Box<dyn CaptionService>, Box<dyn OcrService>)> {
    if config.mock_mode {
        let service = match &config.mock.image_fixtures {
            Some(p) => MockImageService::new(read_json_file::<MockImageFixtures>(p)?),
            None => MockImageService::synthetic(),
        };
        return Ok((Box::new(service.clone()), Box::new(service)));
    }
    let caption = HttpCaptionClient::new(config.require(&config.endpoints.caption, "caption")?)?;
    let ocr = HttpOcrClient::new(config.require(&config.endpoints.ocr, "OCR")?)?;
    Ok((Box::new(caption), Box::new(ocr)))
}

pub fn describe(
    examples_path: &Path,
    out: &Path,
    config: &PipelineConfig,
    jobs: Option<usize>,
) -> Result<Outcome> {
    let examples = read_examples(examples_path)?;
    let (caption, ocr) = image_services(config)?;
    let resolver = ImageResolver::new(config.image_root.clone().unwrap_or_else(|| ".".into()));
    let mut rows: Vec<SignalRow> = pool(jobs)?.install(|| {
        examples
            .par_iter()
            .map(|ex| {
                let result = resolver.resolve(&ex.image_ref).and_then(|image| {
                    extract_signals(&image, caption.as_ref(), ocr.as_ref(), config.caption_candidates)
                });
                match result {
                    Ok(s) => SignalRow { id: ex.id.clone(), signals: Some(s), error: None },
                    Err(e) => SignalRow {
                        id: ex.id.clone(),
                        signals: None,
                        error: Some(RowError::new(e.kind(), &e)),
                    },
                }
            })
            .collect()
    });
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    write_jsonl(out, &rows)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    println!("described {} images, {failed} failed", rows.len());
    Ok(Outcome::from_counts(rows.len(), failed))
}

// generate

fn mock_oracle(config: &PipelineConfig) -> Result<MockOracle> {
    let table: MockOracleTable = match &config.mock.oracle_table {
        Some(p) => read_json_file(p)?,
        None => default_mock_table(),
    };
    Ok(MockOracle::new(table)?)
}

fn question_generator(config: &PipelineConfig) -> Result<Box<dyn QuestionGenerator>> {
    if config.mock_mode {
        Ok(Box::new(OracleGenerator::new(mock_oracle(config)?)))
    } else {
        let url = config.require(&config.endpoints.oracle, "oracle")?;
        Ok(Box::new(DelegatedGenerator::new(url)?))
    }
}

/// Seed of one example within a run: independent of the order examples are processed in.
pub fn example_seed(run_seed: u64, id: &str) -> u64 {
    derive_seed(run_seed, fnv1a(id.as_bytes()))
}

fn generate_one(
    generator: &dyn QuestionGenerator,
    example: &MultimodalExample,
    signals: Option<&ImageSignals>,
    decode: &DecodeConfig,
) -> PredictionRow {
    let failed = |e: RowError| PredictionRow {
        id: example.id.clone(),
        prediction: String::new(),
        perplexity: None,
        raw: None,
        error: Some(e),
    };
    let Some(sig) = signals else {
        return failed(RowError::new("MissingSignals", format!("no image signals for {}", example.id)));
    };
    let prompt = match format_prompt(&example.background_text, &sig.description, &sig.ocr_text, &example.id) {
        Ok(p) => p,
        Err(e) => return failed(RowError::new(e.kind(), &e)),
    };
    match generator.generate_question(&prompt.text, decode) {
        Ok(ranked) => {
            let w = ranked.into_winner();
            PredictionRow {
                id: example.id.clone(),
                prediction: w.text,
                perplexity: Some(w.perplexity),
                raw: None,
                error: None,
            }
        }
        Err(e) => failed(RowError::new(e.kind(), &e)),
    }
}

fn test_examples<'a>(
    examples: &'a [MultimodalExample],
    assignment: &SplitAssignment,
) -> Result<Vec<&'a MultimodalExample>> {
    let index = by_id(examples);
    assignment
        .test
        .iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .with_context(|| format!("split names unknown example {id}"))
        })
        .collect()
}

pub fn generate(
    examples_path: &Path,
    signals_path: &Path,
    split_path: &Path,
    out: &Path,
    config: &PipelineConfig,
    jobs: Option<usize>,
) -> Result<Outcome> {
    let examples = read_examples(examples_path)?;
    let signals = read_signals(signals_path)?;
    let assignment: SplitAssignment = read_json_file(split_path)?;
    let test = test_examples(&examples, &assignment)?;
    let generator = question_generator(config)?;
    let pool = pool(jobs)?;
    let mut outcome = Outcome::Ok;
    for &run_seed in &config.run_seeds {
        let mut rows: Vec<PredictionRow> = pool.install(|| {
            test.par_iter()
                .map(|ex| {
                    let decode = DecodeConfig {
                        seed: example_seed(run_seed, &ex.id),
                        ..config.decode.clone()
                    };
                    generate_one(generator.as_ref(), ex, signals.get(&ex.id), &decode)
                })
                .collect()
        });
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let path = out.join(format!("predictions_seed{run_seed}.jsonl"));
        write_jsonl(&path, &rows)?;
        let failed = rows.iter().filter(|r| r.error.is_some()).count();
        write_json(
            &meta_path(&path),
            &RunMeta {
                source: "generate".into(),
                seed: Some(run_seed),
                timestamp: timestamp(),
                num_examples: rows.len(),
                num_failed: failed,
            },
        )?;
        println!("seed {run_seed}: {} predictions, {failed} failed", rows.len());
        outcome = outcome.worst(Outcome::from_counts(rows.len(), failed));
    }
    Ok(outcome)
}

// evaluate

/// Reference questions by id, from an examples file or a raw corpus.
fn read_references(path: &Path) -> Result<BTreeMap<String, String>> {
    let rows: Vec<Value> = read_jsonl_file(path)?;
    let mut refs = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        let id = row["id"]
            .as_str()
            .with_context(|| format!("{}: row {} has no string id", path.display(), i + 1))?;
        let reference = row
            .get("reference_question")
            .or_else(|| row.get("question"))
            .and_then(Value::as_str);
        if let Some(r) = reference {
            refs.insert(id.to_string(), r.to_string());
        }
    }
    Ok(refs)
}

fn scorer(config: &PipelineConfig) -> Result<Option<Box<dyn ExternalScorer>>> {
    match (&config.endpoints.scorer, config.mock_mode) {
        (Some(url), false) => Ok(Some(Box::new(HttpScorer::new(url)?))),
        _ => Ok(None),
    }
}

pub fn evaluate_cmd(
    predictions: &[PathBuf],
    references_path: &Path,
    out: &Path,
    config: &PipelineConfig,
) -> Result<Outcome> {
    if predictions.is_empty() {
        bail!("no prediction files given");
    }
    let refs = read_references(references_path)?;
    let scorer = scorer(config)?;
    let mut reports = Vec::new();
    for path in predictions {
        let rows: Vec<PredictionRow> = read_jsonl_file(path)?;
        let mut pairs = Vec::with_capacity(rows.len());
        for row in rows {
            let reference = refs
                .get(&row.id)
                .with_context(|| format!("{}: id {} has no reference", path.display(), row.id))?;
            pairs.push(EvalPair {
                id: row.id,
                prediction: row.prediction,
                reference: reference.clone(),
            });
        }
        let mut report = evaluate::<f64>(&pairs, scorer.as_deref())
            .with_context(|| format!("scoring {}", path.display()))?;
        let meta: Option<RunMeta> = match meta_path(path) {
            p if p.exists() => Some(read_json_file(&p)?),
            _ => None,
        };
        report.provenance = Some(Provenance {
            source: path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            seed: meta.as_ref().and_then(|m| m.seed),
            timestamp: meta.as_ref().map(|m| m.timestamp),
        });
        reports.push(report);
    }
    let average = average_runs(reports)?;
    write_json(out, &average)?;
    let m = &average.mean;
    println!(
        "{} runs: BLEU-4 {:.4}  METEOR {:.4}  ROUGE-L {:.4}{}",
        average.runs.len(),
        m.bleu4,
        m.meteor,
        m.rouge_l,
        m.external.map(|e| format!("  external {e:.4}")).unwrap_or_default()
    );
    Ok(Outcome::Ok)
}

// chat-baseline

fn embedder(config: &PipelineConfig) -> Result<Box<dyn EmbeddingService>> {
    if config.mock_mode {
        Ok(Box::new(MockEmbedder {
            dim: config.mock.embed_dim.unwrap_or(64),
        }))
    } else {
        let url = config.require(&config.endpoints.embed, "embedding")?;
        Ok(Box::new(HttpEmbeddingClient::new(url)?))
    }
}

fn chat_service(config: &PipelineConfig) -> Result<Box<dyn ChatService>> {
    if config.mock_mode {
        let reply = config.mock.chat_reply.clone().unwrap_or_else(|| MOCK_CHAT_REPLY.into());
        Ok(Box::new(MockChat::new(reply)))
    } else {
        let url = config.require(&config.endpoints.chat, "chat")?;
        let key = std::env::var("MQG_CHAT_API_KEY").ok().filter(|k| !k.is_empty());
        Ok(Box::new(HttpChatClient::new(url, &config.chat_model, key)?))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptRow {
    pub id: String,
    pub shot_ids: Vec<String>,
    pub messages: Vec<ChatMessage>,
}

fn formatted_input(
    example: &MultimodalExample,
    signals: &HashMap<String, ImageSignals>,
) -> Result<String> {
    let sig = signals
        .get(&example.id)
        .with_context(|| format!("no image signals for example {}", example.id))?;
    Ok(format_prompt(&example.background_text, &sig.description, &sig.ocr_text, &example.id)
        .with_context(|| format!("formatting example {}", example.id))?
        .text)
}

const EMBED_BATCH: usize = 64;

pub fn chat_baseline(
    examples_path: &Path,
    signals_path: &Path,
    split_path: &Path,
    out: &Path,
    config: &PipelineConfig,
    jobs: Option<usize>,
) -> Result<Outcome> {
    let examples = read_examples(examples_path)?;
    let signals = read_signals(signals_path)?;
    let assignment: SplitAssignment = read_json_file(split_path)?;
    let index = by_id(&examples);
    let embed = embedder(config)?;
    let chat = chat_service(config)?;
    let shots = config.shots;
    let pool = pool(jobs)?;

    let train: Vec<&MultimodalExample> = assignment
        .train
        .iter()
        .map(|id| index.get(id.as_str()).copied().with_context(|| format!("split names unknown example {id}")))
        .collect::<Result<_>>()?;
    let train_inputs: Vec<String> = train
        .iter()
        .map(|ex| formatted_input(ex, &signals))
        .collect::<Result<_>>()?;
    let exemplars = if shots > 0 && !train.is_empty() {
        let mut vectors = Vec::with_capacity(train_inputs.len());
        for chunk in train_inputs.chunks(EMBED_BATCH) {
            vectors.extend(embed.embed_batch(chunk).context("embedding training inputs")?);
        }
        let ids = train.iter().map(|e| e.id.clone()).collect();
        Some(Index::new(ids, vectors.into_iter().map(Embedding::new).collect())?)
    } else {
        None
    };
    let train_pos: HashMap<&str, usize> =
        train.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect();

    let test = test_examples(&examples, &assignment)?;
    let results: Vec<Result<(PromptRow, PredictionRow)>> = pool.install(|| {
        test.par_iter()
            .map(|ex| {
                let input = formatted_input(ex, &signals)?;
                let mut shot_ids = Vec::new();
                if let Some(idx) = &exemplars {
                    let query = Embedding::new(embed.embed(&input).context("embedding query")?);
                    let ranked = idx.top_k(&query, shots)?;
                    shot_ids = config.shot_order.arrange(ranked.into_iter().map(|(id, _)| id).collect());
                }
                let shot_list = shot_ids
                    .iter()
                    .map(|id| {
                        let i = train_pos[id.as_str()];
                        Shot {
                            input: train_inputs[i].clone(),
                            output: train[i].reference_question.clone(),
                        }
                    })
                    .collect();
                let prompt = build_chat_prompt(&input, shot_list)?;
                let raw = chat
                    .complete(&prompt)
                    .with_context(|| format!("chat request for example {}", ex.id))?;
                let row = match parse_chat_output(&raw) {
                    Ok(parsed) => PredictionRow {
                        id: ex.id.clone(),
                        prediction: parsed.question,
                        perplexity: None,
                        raw: Some(raw),
                        error: None,
                    },
                    Err(e) => PredictionRow {
                        id: ex.id.clone(),
                        prediction: String::new(),
                        perplexity: None,
                        raw: Some(raw),
                        error: Some(RowError::new(e.kind(), &e)),
                    },
                };
                let prompt_row = PromptRow {
                    id: ex.id.clone(),
                    shot_ids,
                    messages: prompt.messages(),
                };
                Ok((prompt_row, row))
            })
            .collect()
    });
    let (mut prompts, mut rows): (Vec<_>, Vec<_>) =
        results.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    prompts.sort_by(|a: &PromptRow, b| a.id.cmp(&b.id));
    rows.sort_by(|a: &PredictionRow, b| a.id.cmp(&b.id));
    let path = out.join(format!("predictions_chat_{shots}shot.jsonl"));
    write_jsonl(&out.join(format!("prompts_chat_{shots}shot.jsonl")), &prompts)?;
    write_jsonl(&path, &rows)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    write_json(
        &meta_path(&path),
        &RunMeta {
            source: format!("chat-baseline/{shots}-shot"),
            seed: None,
            timestamp: timestamp(),
            num_examples: rows.len(),
            num_failed: failed,
        },
    )?;
    println!("{shots}-shot chat baseline: {} predictions, {failed} unparseable", rows.len());
    Ok(Outcome::from_counts(rows.len(), failed))
}

// export-train

pub fn export_train(
    examples_path: &Path,
    signals_path: &Path,
    split_path: &Path,
    out: &Path,
    config: &PipelineConfig,
) -> Result<Outcome> {
    let examples = read_examples(examples_path)?;
    let signals = read_signals(signals_path)?;
    let assignment: SplitAssignment = read_json_file(split_path)?;
    let manifest = export_train_files(&examples, &signals, &assignment, &config.train, out)?;
    for f in &manifest.files {
        println!("{} {} {}", f.path, f.count, f.sha256);
    }
    Ok(Outcome::Ok)
}
