use serde::{Deserialize, Serialize};

use super::task::TaskSpec;
use super::vocab::{TokenId, BOS, END_QUERY, QUERY};
use super::world::World;
use crate::agent::{execute_tool, parse_action, ArgKey, Fact, Observation, StructuredAction, ToolId, VirtualFs};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Agent,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub role: Role,
    pub tokens: Vec<TokenId>,
}

/// Accumulated interaction history `{q, (x_1, o_1), ...}` with its running
/// token serialization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct History {
    entries: Vec<HistoryEntry>,
    tokens: Vec<TokenId>,
}

pub fn query_tokens(query: &[Fact]) -> Vec<TokenId> {
    let mut out = vec![BOS, QUERY];
    out.extend(Fact::tokens(query));
    out.push(END_QUERY);
    out
}

impl History {
    pub fn new(query: &[Fact]) -> Self {
        let tokens = query_tokens(query);
        History {
            entries: vec![HistoryEntry {
                role: Role::User,
                tokens: tokens.clone(),
            }],
            tokens,
        }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn entries(&self) -> &[HistoryEntry] {
        &self.entries
    }

    pub fn rounds(&self) -> usize {
        (self.entries.len() - 1) / 2
    }

    /// Appends one completed round. Actions and observations always arrive
    /// as a pair, which keeps the alternation invariant.
    pub fn push_round(&mut self, action: &[TokenId], observation: &Observation) {
        let obs = observation.to_tokens();
        self.tokens.extend_from_slice(action);
        self.tokens.extend_from_slice(&obs);
        self.entries.push(HistoryEntry {
            role: Role::Agent,
            tokens: action.to_vec(),
        });
        self.entries.push(HistoryEntry {
            role: Role::Tool,
            tokens: obs,
        });
    }

    /// Token count after appending a round of the given sizes.
    pub fn len_with(&self, action_len: usize, observation: &Observation) -> usize {
        self.tokens.len() + action_len + observation.0.len() + 2
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Round {
    pub action: Vec<TokenId>,
    pub observation: Observation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub query: Vec<Fact>,
    pub rounds: Vec<Round>,
}

impl Trajectory {
    /// `(context, action, observation)` per round, where each context is the
    /// serialized history before that round.
    pub fn with_contexts(&self) -> Vec<(Vec<TokenId>, &[TokenId], &Observation)> {
        let mut history = History::new(&self.query);
        let mut out = Vec::with_capacity(self.rounds.len());
        for r in &self.rounds {
            out.push((history.tokens().to_vec(), r.action.as_slice(), &r.observation));
            history.push_round(&r.action, &r.observation);
        }
        out
    }
}

/// Plans the gold action sequence: an optional `think` that restates the
/// constraints, one cumulative search per document group the constraints
/// touch, then `Terminate` with the answer read off the last search.
pub fn build_gold_trajectory(task: &TaskSpec, world: &World) -> Result<Trajectory> {
    if !task.is_solvable(world) {
        return Err(Error::Generation(format!(
            "task {} is not uniquely solvable in world {}",
            task.task_id, world.seed
        )));
    }
    let mut actions = Vec::new();
    if task.constraints.len() > 1 {
        actions.push(StructuredAction::tool_call(
            ToolId::Think,
            [(ArgKey::Plan, Fact::tokens(&task.constraints))],
        ));
    }
    for g in task.groups(world) {
        let upto: Vec<Fact> = task
            .constraints
            .iter()
            .copied()
            .filter(|f| world.config.group_of(f.attr as usize) <= g)
            .collect();
        actions.push(StructuredAction::tool_call(
            ToolId::BatchWebSearch,
            [(ArgKey::Query, Fact::tokens(&upto))],
        ));
    }

    let mut fs = VirtualFs::new();
    let mut rounds = Vec::with_capacity(actions.len() + 1);
    let mut last_obs = Observation::empty();
    for a in actions {
        let StructuredAction::ToolCall { tool, args } = &a else {
            unreachable!("planned actions are tool calls")
        };
        last_obs = execute_tool(*tool, args, world, &mut fs);
        rounds.push(Round {
            action: a.to_tokens(),
            observation: last_obs.clone(),
        });
    }
    // The final search is over every constraint, so its hits all name the
    // unique satisfier.
    let answer = last_obs
        .0
        .get(2)
        .copied()
        .filter(|t| super::vocab::as_entity(*t) == Some(task.gold_answer as usize))
        .ok_or_else(|| Error::Generation(format!("final search for {} missed the answer", task.task_id)))?;
    rounds.push(Round {
        action: StructuredAction::terminate(vec![answer]).to_tokens(),
        observation: Observation::empty(),
    });
    Ok(Trajectory {
        task_id: task.task_id.clone(),
        query: task.constraints.clone(),
        rounds,
    })
}

/// Prefix layout of a training sequence: positions `[0, ctx_len)` are
/// clean context, `[ctx_len, total_len)` are the action span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanLayout {
    pub ctx_len: usize,
    pub total_len: usize,
}

impl SpanLayout {
    pub fn new(ctx_len: usize, total_len: usize) -> Result<Self> {
        let l = SpanLayout { ctx_len, total_len };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ctx_len > self.total_len {
            return Err(Error::arg(format!(
                "layout context length {} exceeds total {}",
                self.ctx_len, self.total_len
            )));
        }
        Ok(())
    }

    /// `I_ctx`.
    pub fn ctx(&self) -> std::ops::Range<usize> {
        0..self.ctx_len
    }

    /// `I_loss`.
    pub fn loss(&self) -> std::ops::Range<usize> {
        self.ctx_len..self.total_len
    }

    pub fn is_ctx(&self, i: usize) -> bool {
        i < self.ctx_len
    }

    pub fn is_loss(&self, i: usize) -> bool {
        i >= self.ctx_len && i < self.total_len
    }

    pub fn span_len(&self) -> usize {
        self.total_len - self.ctx_len
    }
}

/// One `(H_{t-1}, x_t)` pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    #[serde(rename = "context_tokens")]
    pub context: Vec<TokenId>,
    #[serde(rename = "action_tokens")]
    pub action: Vec<TokenId>,
    pub layout: SpanLayout,
}

impl TrainingExample {
    pub fn new(context: Vec<TokenId>, action: Vec<TokenId>) -> Self {
        let layout = SpanLayout {
            ctx_len: context.len(),
            total_len: context.len() + action.len(),
        };
        TrainingExample {
            context,
            action,
            layout,
        }
    }

    /// `context ∥ action`.
    pub fn tokens(&self) -> Vec<TokenId> {
        let mut t = Vec::with_capacity(self.layout.total_len);
        t.extend_from_slice(&self.context);
        t.extend_from_slice(&self.action);
        t
    }

    /// Extends the action span with `PAD` up to a multiple of `block_len`,
    /// so the denoiser sees the same span width it decodes at inference.
    pub fn padded(&self, block_len: usize) -> TrainingExample {
        let target = self.action.len().div_ceil(block_len.max(1)) * block_len.max(1);
        let mut action = self.action.clone();
        action.resize(target, super::vocab::PAD);
        TrainingExample::new(self.context.clone(), action)
    }
}

/// One example per round per trajectory. Every action must parse.
pub fn make_training_set(trajectories: &[Trajectory]) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::new();
    for traj in trajectories {
        for (round, (context, action, _)) in traj.with_contexts().into_iter().enumerate() {
            if let Err(e) = parse_action(action) {
                return Err(Error::UnparseableAction {
                    episode: traj.task_id.clone(),
                    round,
                    reason: e.kind,
                });
            }
            out.push(TrainingExample::new(context, action.to_vec()));
        }
    }
    Ok(out)
}
