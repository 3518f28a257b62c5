//! Structured actions, the action parser, simulated tools and the episode
//! runtime.

pub mod action;
pub mod parser;
pub mod tools;

pub use action::{ArgKey, Args, Fact, StructuredAction, ToolId, ValueKind};
pub use parser::{parse_action, ParseError, ParseErrorKind};
pub use tools::{execute_tool, Observation, VirtualFs};
