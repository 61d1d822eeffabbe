//! Generator prompt template, chat-baseline prompt assembly and chat output parsing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http::{JsonEndpoint, ServiceError};

pub const INSTRUCTION: &str = "Generate a question based on the following information.";
pub const BACKGROUND_MARKER: &str = "Background: ";
pub const IMAGE_MARKER: &str = "Image: ";
pub const IMAGE_TEXT_MARKER: &str = "Texts in image: ";

/// System message of the chat baseline.
pub const CHAT_SYSTEM_MESSAGE: &str = "You are a helpful assistant. Your job is to generate a question, which consists of a question background/context and the question itself, given the user's provided context information, which consists of an instruction, background, subject, topic, and category. Your answer should be in the following template: 'Question context: ... Question: ...'";

pub const MAX_SHOTS: usize = 7;
pub const DEFAULT_CHAT_MODEL: &str = "gpt-3.5-turbo-0301";

const CONTEXT_MARKER: &str = "Question context:";
const QUESTION_MARKER: &str = "Question:";

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PromptError {
    #[error("background text is empty")]
    EmptyBackground,
    #[error("{0} shots requested, at most 7 allowed")]
    TooManyShots(usize),
    #[error("chat output does not follow the `Question context: ... Question: ...` template: {0:?}")]
    MalformedChatOutput(String),
    #[error("chat output has an empty {0}")]
    EmptyField(&'static str),
}

impl PromptError {
    pub fn kind(&self) -> &'static str {
        match self {
            PromptError::EmptyBackground => "EmptyBackground",
            PromptError::TooManyShots(_) => "TooManyShots",
            PromptError::MalformedChatOutput(_) => "MalformedChatOutput",
            PromptError::EmptyField(_) => "EmptyField",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormattedPrompt {
    pub text: String,
    pub source_example_id: String,
}

/// Substitutes the three fields into the generator template verbatim.
pub fn format_prompt(
    input_text: &str,
    image_description: &str,
    image_text: &str,
    example_id: &str,
) -> Result<FormattedPrompt, PromptError> {
    if input_text.is_empty() {
        return Err(PromptError::EmptyBackground);
    }
    let text = format!(
        "{INSTRUCTION} {BACKGROUND_MARKER}{input_text}. {IMAGE_MARKER}{image_description}. {IMAGE_TEXT_MARKER}{image_text}."
    );
    Ok(FormattedPrompt {
        text,
        source_example_id: example_id.to_string(),
    })
}

/// Inverse of [`format_prompt`] for inputs that contain none of the markers.
pub fn split_prompt(text: &str) -> Option<(&str, &str, &str)> {
    let rest = text.strip_prefix(INSTRUCTION)?.strip_prefix(' ')?;
    let rest = rest.strip_prefix(BACKGROUND_MARKER)?;
    let (background, rest) = rest.split_once(&format!(". {IMAGE_MARKER}"))?;
    let (description, rest) = rest.split_once(&format!(". {IMAGE_TEXT_MARKER}"))?;
    let image_text = rest.strip_suffix('.')?;
    Some((background, description, image_text))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shot {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatPrompt {
    pub system_message: String,
    pub shots: Vec<Shot>,
    pub user_input: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatPrompt {
    /// System message, then alternating user/assistant turns per shot, then the query.
    pub fn messages(&self) -> Vec<ChatMessage> {
        let mut out = Vec::with_capacity(2 + 2 * self.shots.len());
        out.push(ChatMessage {
            role: Role::System,
            content: self.system_message.clone(),
        });
        for shot in &self.shots {
            out.push(ChatMessage {
                role: Role::User,
                content: shot.input.clone(),
            });
            out.push(ChatMessage {
                role: Role::Assistant,
                content: shot.output.clone(),
            });
        }
        out.push(ChatMessage {
            role: Role::User,
            content: self.user_input.clone(),
        });
        out
    }
}

pub fn build_chat_prompt(formatted_input: &str, shots: Vec<Shot>) -> Result<ChatPrompt, PromptError> {
    if shots.len() > MAX_SHOTS {
        return Err(PromptError::TooManyShots(shots.len()));
    }
    Ok(ChatPrompt {
        system_message: CHAT_SYSTEM_MESSAGE.to_string(),
        shots,
        user_input: formatted_input.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedChatOutput {
    pub question_context: String,
    pub question: String,
}

/// Leftmost, case-sensitive parse of `Question context: ... Question: ...`.
pub fn parse_chat_output(raw: &str) -> Result<ParsedChatOutput, PromptError> {
    let malformed = || PromptError::MalformedChatOutput(raw.to_string());
    let start = raw.find(CONTEXT_MARKER).ok_or_else(malformed)? + CONTEXT_MARKER.len();
    let tail = &raw[start..];
    let q = tail.find(QUESTION_MARKER).ok_or_else(malformed)?;
    let question_context = tail[..q].trim();
    let question = tail[q + QUESTION_MARKER.len()..].trim();
    if question_context.is_empty() {
        return Err(PromptError::EmptyField("question context"));
    }
    if question.is_empty() {
        return Err(PromptError::EmptyField("question"));
    }
    Ok(ParsedChatOutput {
        question_context: question_context.to_string(),
        question: question.to_string(),
    })
}

pub trait ChatService: Send + Sync {
    fn complete(&self, prompt: &ChatPrompt) -> Result<String, ServiceError>;
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage>,
    n: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

/// Chat-completions client; requests one completion per prompt.
#[derive(Debug, Clone)]
pub struct HttpChatClient {
    endpoint: JsonEndpoint,
    model: String,
}

impl HttpChatClient {
    /// `url` is the full completions URL, e.g. `https://host/v1/chat/completions`.
    pub fn new(url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Result<Self, ServiceError> {
        let mut endpoint = JsonEndpoint::new(url)?;
        if let Some(key) = api_key {
            endpoint = endpoint.with_bearer(key);
        }
        Ok(Self {
            endpoint,
            model: model.into(),
        })
    }
}

impl ChatService for HttpChatClient {
    fn complete(&self, prompt: &ChatPrompt) -> Result<String, ServiceError> {
        let response: ChatResponse = self.endpoint.post(
            "",
            &ChatRequest {
                model: &self.model,
                messages: prompt.messages(),
                n: 1,
            },
        )?;
        response
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| ServiceError::Decode("no choices in chat response".into()))
    }
}

/// Replies with the same text to every prompt.
#[derive(Debug, Clone)]
pub struct MockChat {
    pub reply: String,
}

impl MockChat {
    pub fn new(reply: impl Into<String>) -> Self {
        Self { reply: reply.into() }
    }
}

impl ChatService for MockChat {
    fn complete(&self, _prompt: &ChatPrompt) -> Result<String, ServiceError> {
        Ok(self.reply.clone())
    }
}
