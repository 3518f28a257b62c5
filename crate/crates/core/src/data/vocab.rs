//! Token alphabet shared by the world, the parser and the model.
//!
//! The layout is fixed: structural symbols first, then tool and argument
//! names, observation words, and finally the content ranges (attributes,
//! values, file names, entities, documents). Every id below `SIZE` has a
//! symbol; unused slots are named `<unused:N>`.

use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index into the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u16);

impl TokenId {
    pub const fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(Vocab::standard().symbol(*self))
    }
}

pub const PAD: TokenId = TokenId(0);
pub const MASK: TokenId = TokenId(1);
pub const BOS: TokenId = TokenId(2);
pub const BEGIN_ACTION: TokenId = TokenId(3);
pub const END_ACTION: TokenId = TokenId(4);
pub const QUERY: TokenId = TokenId(5);
pub const END_QUERY: TokenId = TokenId(6);
pub const OBS: TokenId = TokenId(7);
pub const END_OBS: TokenId = TokenId(8);
pub const TOOL_CALL: TokenId = TokenId(9);
pub const TERMINATE: TokenId = TokenId(10);
pub const EQ: TokenId = TokenId(11);
pub const QUOTE: TokenId = TokenId(12);
/// Corrective suffix appended to the context when an action failed to parse.
pub const RETRY: TokenId = TokenId(13);
/// Suffix prompting the agent for a terminal action once tools are exhausted.
pub const FINISH: TokenId = TokenId(14);
pub const PLANNER: TokenId = TokenId(15);
pub const SEEKER: TokenId = TokenId(16);

const STRUCTURAL: [&str; 17] = [
    "<pad>",
    "<mask>",
    "<bos>",
    "BEGIN_ACTION",
    "END_ACTION",
    "QUERY",
    "END_QUERY",
    "OBS",
    "END_OBS",
    "ToolCall",
    "Terminate",
    "=",
    "\"",
    "<retry>",
    "<finish>",
    "<planner>",
    "<seeker>",
];

pub(crate) const TOOL_NAMES: [&str; 9] = [
    "think",
    "reflect",
    "batch_web_search",
    "url_crawler",
    "document_qa",
    "file_read",
    "file_write",
    "assign_tasks",
    "task_done",
];

pub(crate) const ARG_KEYS: [&str; 10] = [
    "answer", "query", "plan", "note", "doc", "attr", "path", "content", "task", "summary",
];

pub(crate) const OBS_WORDS: [&str; 10] = [
    "hits",
    "none",
    "fact",
    "page",
    "ok",
    "not_found",
    "error",
    "invalid_action",
    "bad_args",
    "assigned",
];

pub const TOOL_BASE: u16 = STRUCTURAL.len() as u16;
pub const KEY_BASE: u16 = TOOL_BASE + TOOL_NAMES.len() as u16;
pub const WORD_BASE: u16 = KEY_BASE + ARG_KEYS.len() as u16;
pub const ATTR_BASE: u16 = WORD_BASE + OBS_WORDS.len() as u16;
pub const MAX_ATTRS: u16 = 8;
pub const VALUE_BASE: u16 = ATTR_BASE + MAX_ATTRS;
pub const MAX_VALUES: u16 = 16;
pub const FILE_BASE: u16 = VALUE_BASE + MAX_VALUES;
pub const MAX_FILES: u16 = 8;
pub const ENTITY_BASE: u16 = FILE_BASE + MAX_FILES;
pub const MAX_ENTITIES: u16 = 48;
pub const DOC_BASE: u16 = ENTITY_BASE + MAX_ENTITIES;
pub const MAX_DOCS: u16 = 128;
/// Vocabulary size `V`, fixed for every run.
pub const SIZE: usize = 256;

const _: () = assert!((DOC_BASE + MAX_DOCS) as usize <= SIZE);

/// Observation word token by name. Panics on an unknown word.
pub fn word(name: &str) -> TokenId {
    let i = OBS_WORDS
        .iter()
        .position(|w| *w == name)
        .unwrap_or_else(|| panic!("unknown observation word {name}"));
    TokenId(WORD_BASE + i as u16)
}

pub fn attr(i: usize) -> TokenId {
    debug_assert!(i < MAX_ATTRS as usize);
    TokenId(ATTR_BASE + i as u16)
}

pub fn value(i: usize) -> TokenId {
    debug_assert!(i < MAX_VALUES as usize);
    TokenId(VALUE_BASE + i as u16)
}

pub fn file(i: usize) -> TokenId {
    debug_assert!(i < MAX_FILES as usize);
    TokenId(FILE_BASE + i as u16)
}

pub fn entity(i: usize) -> TokenId {
    debug_assert!(i < MAX_ENTITIES as usize);
    TokenId(ENTITY_BASE + i as u16)
}

pub fn doc(i: usize) -> TokenId {
    debug_assert!(i < MAX_DOCS as usize);
    TokenId(DOC_BASE + i as u16)
}

fn in_range(t: TokenId, base: u16, len: u16) -> Option<usize> {
    (t.0 >= base && t.0 < base + len).then(|| (t.0 - base) as usize)
}

pub fn as_attr(t: TokenId) -> Option<usize> {
    in_range(t, ATTR_BASE, MAX_ATTRS)
}

pub fn as_value(t: TokenId) -> Option<usize> {
    in_range(t, VALUE_BASE, MAX_VALUES)
}

pub fn as_file(t: TokenId) -> Option<usize> {
    in_range(t, FILE_BASE, MAX_FILES)
}

pub fn as_entity(t: TokenId) -> Option<usize> {
    in_range(t, ENTITY_BASE, MAX_ENTITIES)
}

pub fn as_doc(t: TokenId) -> Option<usize> {
    in_range(t, DOC_BASE, MAX_DOCS)
}

/// Tokens that may appear inside a quoted argument value.
pub fn is_content(t: TokenId) -> bool {
    t.0 >= WORD_BASE && t.0 < DOC_BASE + MAX_DOCS
}

#[derive(Debug)]
pub struct Vocab {
    symbols: Vec<String>,
    lookup: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn standard() -> &'static Vocab {
        static VOCAB: OnceLock<Vocab> = OnceLock::new();
        VOCAB.get_or_init(Vocab::build)
    }

    fn build() -> Vocab {
        let mut symbols: Vec<String> = Vec::with_capacity(SIZE);
        symbols.extend(STRUCTURAL.iter().map(|s| s.to_string()));
        symbols.extend(TOOL_NAMES.iter().map(|s| s.to_string()));
        symbols.extend(ARG_KEYS.iter().map(|s| s.to_string()));
        symbols.extend(OBS_WORDS.iter().map(|s| s.to_string()));
        symbols.extend((0..MAX_ATTRS).map(|i| format!("a{i}")));
        symbols.extend((0..MAX_VALUES).map(|i| format!("v{i}")));
        symbols.extend((0..MAX_FILES).map(|i| format!("f{i}")));
        symbols.extend((0..MAX_ENTITIES).map(|i| format!("e{i}")));
        symbols.extend((0..MAX_DOCS).map(|i| format!("d{i}")));
        let used = symbols.len();
        symbols.extend((used..SIZE).map(|i| format!("<unused:{i}>")));
        let lookup = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), TokenId(i as u16)))
            .collect();
        Vocab { symbols, lookup }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, t: TokenId) -> &str {
        &self.symbols[t.index()]
    }

    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.lookup.get(symbol).copied()
    }

    /// Splits on whitespace and maps each symbol to its id.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|s| {
                self.id(s)
                    .ok_or_else(|| Error::arg(format!("unknown symbol `{s}`")))
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[TokenId]) -> String {
        let mut out = String::new();
        for (i, t) in tokens.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.symbol(*t));
        }
        out
    }
}
