//! Comment generation: a deterministic template stub and the three-turn
//! critique protocol, independent of any transport.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, FunctionRecord, Modality};

pub const SYSTEM_PROMPT: &str = "You are an expert code summarization assistant.

Hard constraints:
- Output exactly ONE sentence in English.
- Describe ONLY what is explicitly shown in the code.
- Do NOT claim input validation, error handling, bounds checks, permissions, or safety guarantees unless the code clearly shows them.
- Avoid speculative words such as 'ensure/ensures/ensuring', 'handle(s) errors', 'validate(s)', 'sanitize(s)', 'filter(s)', 'guarantee(s)' unless explicitly present.
- Do NOT mention security or vulnerabilities (this is the normal setting).";

pub const REVIEW_REQUEST: &str = "Review your previous answer and list problems.

Check specifically for:
- Any speculation beyond the code (e.g., 'ensures', 'handles errors', 'validates', 'guarantees').
- Any claims of checks that are not explicitly shown (input validation, bounds checks, error handling, permissions).
- Missing core behavior (main operations, key calls, main data flow).

Output ONLY short bullet points. Do NOT revise yet.";

pub const REVISION_REQUEST: &str = "Based on the problems you found, improve your answer.

Requirements:
- Output exactly ONE sentence in English.
- Describe ONLY what is explicitly shown in the code.
- Remove any speculative or non-evidenced claims.
- Do NOT mention security or vulnerabilities.

Output ONLY the final sentence.";

/// Substrings a generated comment must never contain (lowercase scan).
pub const FORBIDDEN_WORDS: [&str; 3] = ["security", "vulnerable", "vulnerabilit"];

pub const DEFAULT_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_MAX_TOKENS: u32 = 128;

pub fn draft_request(code: &str) -> String {
    format!(
        "Please generate a short one-sentence comment describing the core functionality of the following function:\n<code>\n{code}\n</code>\n\nOutput ONLY the sentence."
    )
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

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CommentError {
    #[error("remote failure after {attempts} attempt(s), last status {status:?}: {message}")]
    Remote {
        attempts: u32,
        status: Option<u16>,
        message: String,
    },
    #[error("empty revision")]
    EmptyRevision,
    #[error("record {0} has empty code")]
    EmptyCode(String),
    #[error("every comment generation failed ({0} record(s))")]
    AllFailed(usize),
}

/// One chat-completions call: the full history in, the assistant text out.
pub trait ChatBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, CommentError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CritiqueTranscript {
    pub draft: String,
    pub review: Vec<String>,
    #[serde(rename = "final")]
    pub final_: String,
}

/// Keeps the text up to and including the first period followed by
/// whitespace or end of input. Line breaks become spaces.
pub fn first_sentence(text: &str) -> String {
    let flat: String = text
        .trim()
        .trim_matches('"')
        .chars()
        .map(|c| if c == '\n' || c == '\r' { ' ' } else { c })
        .collect();
    let chars: Vec<char> = flat.chars().collect();
    let mut end = chars.len();
    for i in 0..chars.len() {
        if matches!(chars[i], '.' | '!' | '?') && chars.get(i + 1).is_none_or(|c| c.is_whitespace())
        {
            end = i + 1;
            break;
        }
    }
    let mut s: String = chars[..end].iter().collect::<String>().trim().to_string();
    // collapse runs of spaces left over from line breaks
    while s.contains("  ") {
        s = s.replace("  ", " ");
    }
    s
}

pub fn parse_bullets(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.trim().trim_start_matches(['-', '*', '•']).trim())
        .filter(|l| !l.is_empty())
        .map(ToString::to_string)
        .collect()
}

/// Draft, self-review, revision. Each turn resends the growing history.
pub fn run_critique<B: ChatBackend + ?Sized>(
    backend: &B,
    code: &str,
) -> Result<CritiqueTranscript, CommentError> {
    let mut messages = alloc::vec![
        ChatMessage::new(Role::System, SYSTEM_PROMPT),
        ChatMessage::new(Role::User, draft_request(code)),
    ];
    let draft = backend.complete(&messages)?;
    messages.push(ChatMessage::new(Role::Assistant, draft.clone()));
    messages.push(ChatMessage::new(Role::User, REVIEW_REQUEST));
    let review = backend.complete(&messages)?;
    messages.push(ChatMessage::new(Role::Assistant, review.clone()));
    messages.push(ChatMessage::new(Role::User, REVISION_REQUEST));
    let revised = backend.complete(&messages)?;
    let final_ = first_sentence(&revised);
    if final_.is_empty() {
        return Err(CommentError::EmptyRevision);
    }
    Ok(CritiqueTranscript {
        draft,
        review: parse_bullets(&review),
        final_,
    })
}

fn is_identifier(tok: &str) -> bool {
    let mut chars = tok.chars();
    matches!(chars.next(), Some(c) if c.is_alphabetic() || c == '_')
        && chars.all(|c| c.is_alphanumeric() || c == '_')
}

pub fn contains_forbidden(text: &str) -> bool {
    let lower = text.to_lowercase();
    FORBIDDEN_WORDS.iter().any(|w| lower.contains(w))
}

/// `"Defines function <name> operating on <k> identifier tokens."` where
/// `<name>` precedes the first `(` and `<k>` counts distinct identifiers.
pub fn generate_comment_stub(record: &FunctionRecord) -> Result<String, CommentError> {
    if record.code.trim().is_empty() {
        return Err(CommentError::EmptyCode(record.id.clone()));
    }
    let tokens = tokenize(&record.code, Modality::Code);
    let name = tokens
        .iter()
        .position(|t| t == "(")
        .filter(|&i| i > 0)
        .map(|i| tokens[i - 1].as_str())
        .filter(|n| is_identifier(n) && !contains_forbidden(n))
        .unwrap_or("anonymous");
    let k = tokens
        .iter()
        .filter(|t| is_identifier(t))
        .collect::<BTreeSet<_>>()
        .len();
    Ok(format!(
        "Defines function {name} operating on {k} identifier tokens."
    ))
}

/// Source of comments for [`attach_comments`].
pub trait CommentGenerator {
    fn generate(&self, record: &FunctionRecord) -> Result<String, CommentError>;
}

pub struct StubGenerator;

impl CommentGenerator for StubGenerator {
    fn generate(&self, record: &FunctionRecord) -> Result<String, CommentError> {
        generate_comment_stub(record)
    }
}

impl<B: ChatBackend> CommentGenerator for B {
    fn generate(&self, record: &FunctionRecord) -> Result<String, CommentError> {
        if record.code.trim().is_empty() {
            return Err(CommentError::EmptyCode(record.id.clone()));
        }
        run_critique(self, &record.code).map(|t| t.final_)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttachOutcome {
    pub records: Vec<FunctionRecord>,
    /// `(record id, error)` for each generation that failed; those records
    /// keep `comment: None`.
    pub failures: Vec<(String, CommentError)>,
}

/// Merges per-record generation results (in input order) into the records.
/// `results[i]` is `None` when record `i` already had a comment.
pub fn merge_comments(
    records: &[FunctionRecord],
    results: Vec<Option<Result<String, CommentError>>>,
) -> Result<AttachOutcome, CommentError> {
    let mut out = records.to_vec();
    let mut failures = Vec::new();
    let mut attempted = 0;
    for (rec, res) in out.iter_mut().zip(results) {
        match res {
            None => {}
            Some(Ok(c)) => {
                attempted += 1;
                rec.comment = Some(c);
            }
            Some(Err(e)) => {
                attempted += 1;
                failures.push((rec.id.clone(), e));
            }
        }
    }
    if attempted > 0 && failures.len() == attempted {
        return Err(CommentError::AllFailed(attempted));
    }
    Ok(AttachOutcome {
        records: out,
        failures,
    })
}

pub fn attach_comments<G: CommentGenerator + ?Sized>(
    records: &[FunctionRecord],
    generator: &G,
) -> Result<AttachOutcome, CommentError> {
    let results = records
        .iter()
        .map(|r| r.comment.is_none().then(|| generator.generate(r)))
        .collect();
    merge_comments(records, results)
}
