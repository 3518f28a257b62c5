use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::action::{ArgKey, Args, Fact, ToolId};
use crate::data::vocab::{self, word, TokenId, END_OBS, OBS};
use crate::data::World;

/// Tool output body. Serialized into history as `OBS body END_OBS`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Observation(pub Vec<TokenId>);

impl Observation {
    pub fn empty() -> Self {
        Observation(Vec::new())
    }

    pub fn error(code: &str) -> Self {
        Observation(vec![word("error"), word(code)])
    }

    pub fn is_error(&self) -> bool {
        self.0.first() == Some(&word("error"))
    }

    pub fn to_tokens(&self) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.0.len() + 2);
        out.push(OBS);
        out.extend_from_slice(&self.0);
        out.push(END_OBS);
        out
    }
}

/// In-episode file store for `file_read` / `file_write`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualFs {
    files: BTreeMap<usize, Vec<TokenId>>,
}

impl VirtualFs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }
}

fn hits(world: &World, query: &[Fact]) -> Vec<TokenId> {
    let found = world.search(query);
    if found.is_empty() {
        return vec![word("none")];
    }
    let mut out = vec![word("hits")];
    for d in found {
        out.push(vocab::doc(d.id as usize));
        out.push(vocab::entity(d.subject as usize));
    }
    out
}

fn arg<'a>(args: &'a Args, key: ArgKey) -> Option<&'a [TokenId]> {
    args.get(&key).map(Vec::as_slice)
}

/// Runs a tool call against the world. Failures are reported as error
/// observations; this never panics on schema-valid or schema-invalid args.
pub fn execute_tool(tool: ToolId, args: &Args, world: &World, fs: &mut VirtualFs) -> Observation {
    let single = |key, f: fn(TokenId) -> Option<usize>| {
        arg(args, key).and_then(|v| (v.len() == 1).then(|| f(v[0])).flatten())
    };
    match tool {
        ToolId::Think | ToolId::Reflect | ToolId::TaskDone => Observation::empty(),
        ToolId::BatchWebSearch | ToolId::AssignTasks => {
            let key = if tool == ToolId::BatchWebSearch {
                ArgKey::Query
            } else {
                ArgKey::Task
            };
            match arg(args, key).and_then(Fact::from_tokens) {
                Some(q) => {
                    let mut body = hits(world, &q);
                    if tool == ToolId::AssignTasks {
                        body.insert(0, word("assigned"));
                    }
                    Observation(body)
                }
                None => Observation::error("bad_args"),
            }
        }
        ToolId::UrlCrawler => match single(ArgKey::Doc, vocab::as_doc) {
            Some(d) => match world.document(d) {
                Some(doc) => {
                    let mut body = vec![word("page"), vocab::entity(doc.subject as usize)];
                    body.extend(Fact::tokens(&doc.facts));
                    Observation(body)
                }
                None => Observation::error("not_found"),
            },
            None => Observation::error("bad_args"),
        },
        ToolId::DocumentQa => {
            let (Some(d), Some(a)) = (single(ArgKey::Doc, vocab::as_doc), single(ArgKey::Attr, vocab::as_attr))
            else {
                return Observation::error("bad_args");
            };
            match world.document(d) {
                Some(doc) => match doc.mentions_attr(a as u8) {
                    Some(f) => {
                        let mut body = vec![word("fact"), vocab::entity(doc.subject as usize)];
                        body.extend(Fact::tokens(&[*f]));
                        Observation(body)
                    }
                    None => Observation(vec![word("not_found")]),
                },
                None => Observation::error("not_found"),
            }
        }
        ToolId::FileRead => match single(ArgKey::Path, vocab::as_file) {
            Some(p) => match fs.files.get(&p) {
                Some(content) => {
                    let mut body = vec![word("ok")];
                    body.extend_from_slice(content);
                    Observation(body)
                }
                None => Observation::error("not_found"),
            },
            None => Observation::error("bad_args"),
        },
        ToolId::FileWrite => match (single(ArgKey::Path, vocab::as_file), arg(args, ArgKey::Content)) {
            (Some(p), Some(content)) => {
                fs.files.insert(p, content.to_vec());
                Observation(vec![word("ok")])
            }
            _ => Observation::error("bad_args"),
        },
    }
}
