//! Service clients against an in-process HTTP server.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::{json, Value};

use qgkit::decode::{
    decode_one, DecodeConfig, DelegatedGenerator, MockOracle, QuestionGenerator,
    RemoteStepOracle, Selection, StepOracle, TokenId,
};
use qgkit::exemplar_retrieval::{EmbeddingService, HttpEmbeddingClient};
use qgkit::http::ServiceError;
use qgkit::image_signals::{extract_signals, HttpCaptionClient, HttpOcrClient, ImageInput};
use qgkit::metrics::{evaluate, EvalPair, HttpScorer};
use qgkit::promptkit::{build_chat_prompt, ChatService, HttpChatClient, Shot};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    auth: Option<String>,
    body: Value,
}

type Handler = dyn Fn(&str, &Value) -> (u16, Value) + Send + Sync;

struct FakeServer {
    url: String,
    seen: Arc<Mutex<Vec<Seen>>>,
}

impl FakeServer {
    fn start(handler: impl Fn(&str, &Value) -> (u16, Value) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        let log = seen.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let (handler, log) = (handler.clone(), log.clone());
                thread::spawn(move || serve(stream, &*handler, &log));
            }
        });
        Self { url, seen }
    }

    fn seen(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

fn serve(stream: TcpStream, handler: &Handler, log: &Mutex<Vec<Seen>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    loop {
        let mut request_line = String::new();
        if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
            return;
        }
        let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
        let (mut length, mut auth) = (0usize, None);
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let line = line.trim_end();
            if line.is_empty() {
                break;
            }
            let (name, value) = line.split_once(':').unwrap();
            match name.to_ascii_lowercase().as_str() {
                "content-length" => length = value.trim().parse().unwrap(),
                "authorization" => auth = Some(value.trim().to_string()),
                _ => {}
            }
        }
        let mut body = vec![0; length];
        reader.read_exact(&mut body).unwrap();
        let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
        let (status, reply) = handler(&path, &body);
        log.lock().unwrap().push(Seen { path, auth, body });
        let text = reply.to_string();
        let head = format!(
            "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n",
            text.len()
        );
        if writer.write_all(head.as_bytes()).and_then(|_| writer.write_all(text.as_bytes())).is_err() {
            return;
        }
    }
}

fn image() -> ImageInput {
    ImageInput {
        locator: "img/1.png".into(),
        bytes: vec![0x89, b'P', b'N', b'G'],
    }
}

#[test]
fn caption_and_ocr_clients() {
    let server = FakeServer::start(|path, _| match path {
        "/v1/caption" => (
            200,
            json!({"candidates": [
                {"text": "a magnet", "sum_logprob": -3.0, "num_tokens": 3},
                {"text": "two magnets on a table", "sum_logprob": -4.0, "num_tokens": 6},
            ]}),
        ),
        "/v1/ocr" => (200, json!({"lines": ["N", "S"]})),
        _ => (404, json!({})),
    });
    let caption = HttpCaptionClient::new(&server.url).unwrap();
    let ocr = HttpOcrClient::new(format!("{}/", server.url)).unwrap();
    let signals = extract_signals(&image(), &caption, &ocr, 2).unwrap();
    assert_eq!(signals.description, "two magnets on a table");
    assert_eq!(signals.ocr_text, "N S");
    let seen = server.seen();
    let cap = seen.iter().find(|s| s.path == "/v1/caption").unwrap();
    assert_eq!(cap.body["num_candidates"], 2);
    assert_eq!(cap.body["image_b64"], "iVBORw==");
}

#[test]
fn service_errors_surface_status_and_body() {
    let server = FakeServer::start(|_, _| (503, json!({"error": "overloaded"})));
    let ocr = HttpOcrClient::new(&server.url).unwrap();
    let caption = HttpCaptionClient::new(&server.url).unwrap();
    let err = extract_signals(&image(), &caption, &ocr, 1).unwrap_err();
    assert_eq!(err.kind(), "CaptionFailure");
    assert!(err.to_string().contains("503"));

    let bad = FakeServer::start(|_, _| (200, json!({"nope": 1})));
    let embed = HttpEmbeddingClient::new(&bad.url).unwrap();
    assert!(matches!(embed.embed("x"), Err(ServiceError::Decode(_))));

    let closed = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        format!("http://{}", l.local_addr().unwrap())
    };
    let embed = HttpEmbeddingClient::new(closed).unwrap();
    assert!(matches!(embed.embed("x"), Err(ServiceError::Transport(_))));
}

#[test]
fn embedding_client_single_and_batch() {
    let server = FakeServer::start(|_, body| {
        if let Some(texts) = body.get("texts").and_then(Value::as_array) {
            let vectors: Vec<Value> = texts.iter().map(|t| json!([t.as_str().unwrap().len(), 1.0])).collect();
            (200, json!({"vectors": vectors}))
        } else {
            (200, json!({"vector": [0.5, 0.5]}))
        }
    });
    let client = HttpEmbeddingClient::new(&server.url).unwrap();
    assert_eq!(client.embed("hello").unwrap(), vec![0.5, 0.5]);
    let batch = client.embed_batch(&["ab".into(), "abc".into()]).unwrap();
    assert_eq!(batch, vec![vec![2.0, 1.0], vec![3.0, 1.0]]);
    assert!(server.seen().iter().all(|s| s.path == "/v1/embed"));
}

#[test]
fn chat_client_sends_messages_and_key() {
    let server = FakeServer::start(|_, _| {
        (
            200,
            json!({"choices": [{"message": {"role": "assistant", "content": "Question context: A. Question: B?"}}]}),
        )
    });
    let url = format!("{}/v1/chat/completions", server.url);
    let client = HttpChatClient::new(url, "test-model", Some("secret".into())).unwrap();
    let shots = vec![Shot {
        input: "shot input".into(),
        output: "shot output".into(),
    }];
    let prompt = build_chat_prompt("query input", shots).unwrap();
    assert_eq!(client.complete(&prompt).unwrap(), "Question context: A. Question: B?");
    let seen = server.seen();
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer secret"));
    assert_eq!(seen[0].body["model"], "test-model");
    let roles: Vec<&str> = seen[0].body["messages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m["role"].as_str().unwrap())
        .collect();
    assert_eq!(roles, ["system", "user", "assistant", "user"]);
    assert_eq!(seen[0].body["messages"][3]["content"], "query input");
}

#[test]
fn scorer_client_feeds_evaluation() {
    let server = FakeServer::start(|_, body| {
        let same = body["candidate"] == body["reference"];
        (200, json!({"score": if same { 1.0 } else { 0.25 }}))
    });
    let scorer = HttpScorer::new(&server.url).unwrap();
    let pairs = vec![
        EvalPair { id: "1".into(), prediction: "a b".into(), reference: "a b".into() },
        EvalPair { id: "2".into(), prediction: "a b".into(), reference: "c d".into() },
    ];
    let report = evaluate::<f64>(&pairs, Some(&scorer)).unwrap();
    assert_eq!(report.corpus.external, Some(0.625));
    assert!(server.seen().iter().all(|s| s.path == "/v1/score_pair"));
}

/// Serves a [`MockOracle`] through the step/commit protocol.
fn step_server(oracle: MockOracle) -> FakeServer {
    let sessions: Mutex<HashMap<String, Vec<TokenId>>> = Mutex::new(HashMap::new());
    FakeServer::start(move |path, body| {
        let session = body["session"].as_str().unwrap().to_string();
        let mut sessions = sessions.lock().unwrap();
        match path {
            "/v1/step" => {
                if let Some(prompt) = body.get("prompt_tokens").and_then(Value::as_array) {
                    let p = prompt.iter().map(|t| t.as_u64().unwrap() as TokenId).collect();
                    sessions.insert(session.clone(), p);
                }
                let history = sessions.get_mut(&session).unwrap();
                let out = oracle.step(history).unwrap();
                let candidates: Vec<Value> = (0..oracle.vocab_size() as TokenId)
                    .map(|t| {
                        let hidden = oracle.probe(history, t).unwrap();
                        json!({"token": t, "logprob": out.logprobs[t as usize], "hidden": hidden})
                    })
                    .collect();
                (
                    200,
                    json!({"candidates": candidates, "current_hidden": out.hidden, "eos_token": oracle.eos_token()}),
                )
            }
            "/v1/commit" => {
                let token = body["token"].as_u64().unwrap() as TokenId;
                sessions.get_mut(&session).unwrap().push(token);
                (200, json!({}))
            }
            _ => (404, json!({})),
        }
    })
}

#[test]
fn remote_step_oracle_matches_local_decoding() {
    let local = MockOracle::random(7, 6, 3, 3);
    let server = step_server(local.clone());
    let remote = RemoteStepOracle::new(&server.url, 6, 0, 6).unwrap();
    for selection in [Selection::Argmax, Selection::Sample] {
        let config = DecodeConfig {
            max_tokens: 8,
            min_tokens: 2,
            selection,
            ..DecodeConfig::question()
        };
        for seed in 0..4 {
            let a = decode_one(&local, &[1, 2], &config, seed).unwrap();
            let b = decode_one(&remote, &[1, 2], &config, seed).unwrap();
            assert_eq!(a.tokens, b.tokens);
            assert!((a.sum_logprob - b.sum_logprob).abs() < 1e-12);
        }
    }
    let first = server.seen().into_iter().find(|s| s.path == "/v1/step").unwrap();
    assert_eq!(first.body["prompt_tokens"], json!([1, 2]));
    assert_eq!(first.body["top_k"], 6);
}

#[test]
fn remote_step_oracle_rejects_eos_mismatch() {
    let server = step_server(MockOracle::random(1, 4, 2, 2));
    let remote = RemoteStepOracle::new(&server.url, 4, 3, 4).unwrap();
    let err = decode_one(&remote, &[1], &DecodeConfig::question(), 0).unwrap_err();
    assert_eq!(err.kind(), "OracleFailure");
}

#[test]
fn delegated_generator_reranks_server_candidates() {
    let server = FakeServer::start(|path, body| match path {
        "/v1/generate" => (200, json!({"candidates": ["What is A?", "Which is B?", "Is C?"]})),
        "/v1/score" => {
            let sum = match body["completion"].as_str().unwrap() {
                "What is A?" => -6.0,
                "Which is B?" => -3.0,
                _ => -3.0,
            };
            (200, json!({"sum_logprob": sum, "num_tokens": 3}))
        }
        _ => (404, json!({})),
    });
    let generator = DelegatedGenerator::new(&server.url).unwrap();
    let config = DecodeConfig { seed: 42, ..DecodeConfig::question() };
    let ranked = generator.generate_question("prompt text", &config).unwrap();
    assert_eq!(ranked.best, 1);
    assert_eq!(ranked.winner().text, "Which is B?");
    let seen = server.seen();
    let gen = seen.iter().find(|s| s.path == "/v1/generate").unwrap();
    assert_eq!(gen.body["prompt"], "prompt text");
    assert_eq!(gen.body["alpha"], 0.6);
    assert_eq!(gen.body["num_candidates"], 10);
    assert_eq!(gen.body["seed"], 42);
}
