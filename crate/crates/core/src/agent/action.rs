use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::vocab::{self, TokenId, BEGIN_ACTION, END_ACTION, EQ, QUOTE, TERMINATE, TOOL_CALL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolId {
    Think,
    Reflect,
    BatchWebSearch,
    UrlCrawler,
    DocumentQa,
    FileRead,
    FileWrite,
    AssignTasks,
    TaskDone,
}

/// Shape a quoted argument value must have.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueKind {
    /// Zero or more content tokens.
    Text,
    /// One or more `attr value` pairs.
    Facts,
    Doc,
    Attr,
    Path,
}

impl ToolId {
    pub const ALL: [ToolId; 9] = [
        ToolId::Think,
        ToolId::Reflect,
        ToolId::BatchWebSearch,
        ToolId::UrlCrawler,
        ToolId::DocumentQa,
        ToolId::FileRead,
        ToolId::FileWrite,
        ToolId::AssignTasks,
        ToolId::TaskDone,
    ];

    pub fn token(self) -> TokenId {
        TokenId(vocab::TOOL_BASE + self as u16)
    }

    pub fn from_token(t: TokenId) -> Option<ToolId> {
        t.0.checked_sub(vocab::TOOL_BASE)
            .and_then(|i| ToolId::ALL.get(i as usize).copied())
    }

    pub fn name(self) -> &'static str {
        vocab::TOOL_NAMES[self as usize]
    }

    /// Cognitive tools act on the agent's own state and do not draw on the
    /// tool budget.
    pub fn is_cognitive(self) -> bool {
        matches!(self, ToolId::Think | ToolId::Reflect | ToolId::TaskDone)
    }

    /// Tools that count as an information-seeker invocation.
    pub fn is_seeker(self) -> bool {
        matches!(
            self,
            ToolId::BatchWebSearch | ToolId::UrlCrawler | ToolId::DocumentQa | ToolId::AssignTasks
        )
    }

    pub fn schema(self) -> &'static [(ArgKey, ValueKind)] {
        use ArgKey::*;
        match self {
            ToolId::Think => &[(Plan, ValueKind::Text)],
            ToolId::Reflect => &[(Note, ValueKind::Text)],
            ToolId::BatchWebSearch => &[(Query, ValueKind::Facts)],
            ToolId::UrlCrawler => &[(Doc, ValueKind::Doc)],
            ToolId::DocumentQa => &[(Doc, ValueKind::Doc), (Attr, ValueKind::Attr)],
            ToolId::FileRead => &[(Path, ValueKind::Path)],
            ToolId::FileWrite => &[(Path, ValueKind::Path), (Content, ValueKind::Text)],
            ToolId::AssignTasks => &[(Task, ValueKind::Facts)],
            ToolId::TaskDone => &[(Summary, ValueKind::Text)],
        }
    }
}

/// Argument names. Declaration order is the canonical serialization order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArgKey {
    Answer,
    Query,
    Plan,
    Note,
    Doc,
    Attr,
    Path,
    Content,
    Task,
    Summary,
}

impl ArgKey {
    const ALL: [ArgKey; 10] = [
        ArgKey::Answer,
        ArgKey::Query,
        ArgKey::Plan,
        ArgKey::Note,
        ArgKey::Doc,
        ArgKey::Attr,
        ArgKey::Path,
        ArgKey::Content,
        ArgKey::Task,
        ArgKey::Summary,
    ];

    pub fn token(self) -> TokenId {
        TokenId(vocab::KEY_BASE + self as u16)
    }

    pub fn from_token(t: TokenId) -> Option<ArgKey> {
        t.0.checked_sub(vocab::KEY_BASE)
            .and_then(|i| ArgKey::ALL.get(i as usize).copied())
    }
}

pub type Args = BTreeMap<ArgKey, Vec<TokenId>>;

/// One agent decision: invoke a tool or end the episode with an answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StructuredAction {
    ToolCall { tool: ToolId, args: Args },
    Terminate { answer: Vec<TokenId> },
}

impl StructuredAction {
    pub fn tool_call(tool: ToolId, args: impl IntoIterator<Item = (ArgKey, Vec<TokenId>)>) -> Self {
        StructuredAction::ToolCall {
            tool,
            args: args.into_iter().collect(),
        }
    }

    pub fn terminate(answer: Vec<TokenId>) -> Self {
        StructuredAction::Terminate { answer }
    }

    pub fn tool(&self) -> Option<ToolId> {
        match self {
            StructuredAction::ToolCall { tool, .. } => Some(*tool),
            StructuredAction::Terminate { .. } => None,
        }
    }

    /// Canonical token form, delimiters included.
    pub fn to_tokens(&self) -> Vec<TokenId> {
        let mut out = vec![BEGIN_ACTION];
        let push_arg = |out: &mut Vec<TokenId>, key: ArgKey, value: &[TokenId]| {
            out.push(key.token());
            out.push(EQ);
            out.push(QUOTE);
            out.extend_from_slice(value);
            out.push(QUOTE);
        };
        match self {
            StructuredAction::ToolCall { tool, args } => {
                out.push(TOOL_CALL);
                out.push(tool.token());
                for (k, v) in args {
                    push_arg(&mut out, *k, v);
                }
            }
            StructuredAction::Terminate { answer } => {
                out.push(TERMINATE);
                push_arg(&mut out, ArgKey::Answer, answer);
            }
        }
        out.push(END_ACTION);
        out
    }
}

/// An `attr = value` predicate over world entities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Fact {
    pub attr: u8,
    pub value: u8,
}

impl Fact {
    pub fn new(attr: usize, value: usize) -> Self {
        Fact {
            attr: attr as u8,
            value: value as u8,
        }
    }

    pub fn tokens(facts: &[Fact]) -> Vec<TokenId> {
        facts
            .iter()
            .flat_map(|f| [vocab::attr(f.attr as usize), vocab::value(f.value as usize)])
            .collect()
    }

    /// Inverse of [`Fact::tokens`]; `None` unless the slice is a non-empty
    /// run of `attr value` pairs.
    pub fn from_tokens(tokens: &[TokenId]) -> Option<Vec<Fact>> {
        if tokens.is_empty() || tokens.len() % 2 != 0 {
            return None;
        }
        tokens
            .chunks(2)
            .map(|p| Some(Fact::new(vocab::as_attr(p[0])?, vocab::as_value(p[1])?)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::vocab::Vocab;

    #[test]
    fn canonical_text() {
        let a = StructuredAction::tool_call(
            ToolId::DocumentQa,
            [(ArgKey::Attr, vec![vocab::attr(2)]), (ArgKey::Doc, vec![vocab::doc(9)])],
        );
        assert_eq!(
            Vocab::standard().decode(&a.to_tokens()),
            "BEGIN_ACTION ToolCall document_qa doc = \" d9 \" attr = \" a2 \" END_ACTION"
        );
    }

    #[test]
    fn tool_tokens_round_trip() {
        for t in ToolId::ALL {
            assert_eq!(ToolId::from_token(t.token()), Some(t));
            assert_eq!(Vocab::standard().symbol(t.token()), t.name());
        }
        assert_eq!(ToolId::from_token(ArgKey::Answer.token()), None);
    }

    #[test]
    fn facts_round_trip() {
        let f = vec![Fact::new(0, 3), Fact::new(5, 1)];
        assert_eq!(Fact::from_tokens(&Fact::tokens(&f)), Some(f));
        assert_eq!(Fact::from_tokens(&[vocab::attr(1)]), None);
        assert_eq!(Fact::from_tokens(&[]), None);
    }
}
