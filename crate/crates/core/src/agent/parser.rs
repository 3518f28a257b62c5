//! Delimiter grammar for action spans.
//!
//! ```text
//! span  := BEGIN_ACTION body END_ACTION
//! body  := ToolCall TOOL arg* | Terminate arg
//! arg   := KEY = " content* "
//! ```
//!
//! Tokens outside the single delimited span are ignored, so reasoning text
//! before `BEGIN_ACTION` and padding after `END_ACTION` are both accepted.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::action::{ArgKey, Args, Fact, StructuredAction, ToolId, ValueKind};
use crate::data::vocab::{self, TokenId, BEGIN_ACTION, END_ACTION, EQ, QUOTE, TERMINATE, TOOL_CALL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParseErrorKind {
    MissingDelimiter,
    UnknownTool,
    BadArgs,
    MultipleSpans,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub detail: String,
}

impl ParseError {
    fn new(kind: ParseErrorKind, detail: impl Into<String>) -> Self {
        ParseError {
            kind,
            detail: detail.into(),
        }
    }

    fn bad_args(detail: impl Into<String>) -> Self {
        ParseError::new(ParseErrorKind::BadArgs, detail)
    }
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.detail)
    }
}

impl std::error::Error for ParseError {}

pub fn parse_action(raw: &[TokenId]) -> Result<StructuredAction, ParseError> {
    let begins: Vec<usize> = positions(raw, BEGIN_ACTION);
    let ends: Vec<usize> = positions(raw, END_ACTION);
    if begins.is_empty() {
        return Err(ParseError::new(ParseErrorKind::MissingDelimiter, "no BEGIN_ACTION"));
    }
    if ends.is_empty() {
        return Err(ParseError::new(ParseErrorKind::MissingDelimiter, "no END_ACTION"));
    }
    if begins.len() > 1 || ends.len() > 1 {
        return Err(ParseError::new(
            ParseErrorKind::MultipleSpans,
            format!("{} BEGIN_ACTION / {} END_ACTION", begins.len(), ends.len()),
        ));
    }
    let (start, end) = (begins[0], ends[0]);
    if end < start {
        return Err(ParseError::new(
            ParseErrorKind::MissingDelimiter,
            "END_ACTION precedes BEGIN_ACTION",
        ));
    }
    parse_body(&raw[start + 1..end])
}

fn positions(raw: &[TokenId], t: TokenId) -> Vec<usize> {
    raw.iter()
        .enumerate()
        .filter_map(|(i, x)| (*x == t).then_some(i))
        .collect()
}

fn parse_body(body: &[TokenId]) -> Result<StructuredAction, ParseError> {
    match body.first() {
        Some(&TOOL_CALL) => {
            let tool = body
                .get(1)
                .and_then(|t| ToolId::from_token(*t))
                .ok_or_else(|| ParseError::new(ParseErrorKind::UnknownTool, "expected tool name"))?;
            let args = parse_args(&body[2..])?;
            check_schema(tool, &args)?;
            Ok(StructuredAction::ToolCall { tool, args })
        }
        Some(&TERMINATE) => {
            let mut args = parse_args(&body[1..])?;
            let answer = args
                .remove(&ArgKey::Answer)
                .ok_or_else(|| ParseError::bad_args("Terminate requires `answer`"))?;
            if !args.is_empty() {
                return Err(ParseError::bad_args("Terminate takes only `answer`"));
            }
            if answer.is_empty() {
                return Err(ParseError::bad_args("empty answer"));
            }
            Ok(StructuredAction::Terminate { answer })
        }
        _ => Err(ParseError::bad_args("expected ToolCall or Terminate")),
    }
}

fn parse_args(mut rest: &[TokenId]) -> Result<Args, ParseError> {
    let mut args = Args::new();
    while let Some(&key_tok) = rest.first() {
        let key = ArgKey::from_token(key_tok)
            .ok_or_else(|| ParseError::bad_args(format!("expected argument name, got {key_tok}")))?;
        if rest.get(1) != Some(&EQ) || rest.get(2) != Some(&QUOTE) {
            return Err(ParseError::bad_args(format!("expected `= \"` after {key_tok}")));
        }
        let close = rest[3..]
            .iter()
            .position(|t| *t == QUOTE)
            .ok_or_else(|| ParseError::bad_args("unterminated quote"))?;
        let value = &rest[3..3 + close];
        if let Some(bad) = value.iter().find(|t| !vocab::is_content(**t)) {
            return Err(ParseError::bad_args(format!("non-content token {bad} in value")));
        }
        if args.insert(key, value.to_vec()).is_some() {
            return Err(ParseError::bad_args(format!("duplicate argument {key_tok}")));
        }
        rest = &rest[3 + close + 1..];
    }
    Ok(args)
}

fn check_schema(tool: ToolId, args: &Args) -> Result<(), ParseError> {
    let schema = tool.schema();
    if args.len() != schema.len() {
        return Err(ParseError::bad_args(format!(
            "{} expects {} argument(s), got {}",
            tool.name(),
            schema.len(),
            args.len()
        )));
    }
    for (key, kind) in schema {
        let value = args.get(key).ok_or_else(|| {
            ParseError::bad_args(format!("{} missing `{:?}`", tool.name(), key))
        })?;
        if !value_matches(*kind, value) {
            return Err(ParseError::bad_args(format!(
                "{}: `{:?}` is not a valid {:?}",
                tool.name(),
                key,
                kind
            )));
        }
    }
    Ok(())
}

fn value_matches(kind: ValueKind, value: &[TokenId]) -> bool {
    let single = |f: fn(TokenId) -> Option<usize>| value.len() == 1 && f(value[0]).is_some();
    match kind {
        ValueKind::Text => true,
        ValueKind::Facts => Fact::from_tokens(value).is_some(),
        ValueKind::Doc => single(vocab::as_doc),
        ValueKind::Attr => single(vocab::as_attr),
        ValueKind::Path => single(vocab::as_file),
    }
}
