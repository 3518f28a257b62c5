//! Budgeted think-act-observe loop shared by every policy.
//!
//! The loop never branches on the policy's regime: both backbones go through
//! the same serialization, parser, recovery path and budget checks.

use std::time::Instant;

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{execute_tool, parse_action, ArgKey, Fact, Observation, ParseErrorKind, StructuredAction, ToolId, VirtualFs};
use crate::data::vocab::{self, TokenId, BEGIN_ACTION, END_ACTION, FINISH, RETRY, TOOL_CALL};
use crate::data::{History, TaskSpec, Trajectory, World};
use crate::decoding::{decode, DecodeConfig, DecodeTrace, Predictor};
use crate::error::{Error, Result};
use crate::training::Regime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budget {
    /// Tokens of serialized history plus the action being decoded.
    pub context_cap: usize,
    pub t_max: usize,
    /// Environment-facing tool invocations; cognitive tools are free.
    pub tool_cap: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            context_cap: 2048,
            t_max: 15,
            tool_cap: 12,
        }
    }
}

impl Budget {
    pub fn validate(&self) -> Result<()> {
        if self.context_cap == 0 || self.t_max == 0 || self.tool_cap == 0 {
            return Err(Error::Config("budget limits must be positive".into()));
        }
        Ok(())
    }
}

/// `t_max=15,tool_cap=12,ctx=2048`; omitted keys keep their defaults.
impl std::str::FromStr for Budget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut b = Budget::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::arg(format!("budget entry `{part}` is not key=value")))?;
            let v: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::arg(format!("budget value `{v}` is not a count")))?;
            match k.trim() {
                "t_max" => b.t_max = v,
                "tool_cap" => b.tool_cap = v,
                "ctx" | "context_cap" => b.context_cap = v,
                other => return Err(Error::arg(format!("unknown budget key `{other}`"))),
            }
        }
        b.validate()?;
        Ok(b)
    }
}

/// Everything about the loop that must match across compared regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeConfig {
    pub budget: Budget,
    pub max_action_len: usize,
    pub retries: usize,
    pub retry_token: TokenId,
    pub finish_token: TokenId,
}

impl RuntimeConfig {
    pub fn new(budget: Budget, max_action_len: usize) -> Self {
        RuntimeConfig {
            budget,
            max_action_len,
            retries: 1,
            retry_token: RETRY,
            finish_token: FINISH,
        }
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("plain struct")))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A raw action span proposed by a policy.
#[derive(Debug, Clone, Default)]
pub struct Proposal {
    pub raw: Vec<TokenId>,
    pub trace: Option<DecodeTrace>,
}

pub trait Policy {
    fn regime(&self) -> Regime;

    fn max_action_len(&self) -> usize;

    /// Longest context plus action the policy accepts.
    fn max_sequence(&self) -> usize {
        usize::MAX
    }

    fn act(&mut self, context: &[TokenId]) -> Result<Proposal>;
}

/// Decodes actions from a trained model.
pub struct ModelPolicy<'a, P> {
    pub model: &'a P,
    pub decode: DecodeConfig,
}

impl<P: Predictor> Policy for ModelPolicy<'_, P> {
    fn regime(&self) -> Regime {
        self.decode.regime
    }

    fn max_action_len(&self) -> usize {
        self.decode.max_action_len
    }

    fn max_sequence(&self) -> usize {
        self.model.max_len()
    }

    fn act(&mut self, context: &[TokenId]) -> Result<Proposal> {
        let out = decode(self.model, context, &self.decode)?;
        Ok(Proposal {
            raw: out.raw,
            trace: Some(out.trace),
        })
    }
}

/// Replays fixed outputs in order, repeating the last one when exhausted.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    pub regime: Regime,
    pub outputs: Vec<Vec<TokenId>>,
    pub max_action_len: usize,
    next: usize,
}

impl ScriptedPolicy {
    pub fn new(regime: Regime, outputs: Vec<Vec<TokenId>>) -> Self {
        ScriptedPolicy {
            regime,
            outputs,
            max_action_len: 64,
            next: 0,
        }
    }

    pub fn gold(regime: Regime, trajectory: &Trajectory) -> Self {
        Self::new(regime, trajectory.rounds.iter().map(|r| r.action.clone()).collect())
    }

    /// Every span lacks its closing delimiter.
    pub fn malformed(regime: Regime) -> Self {
        Self::new(regime, vec![vec![BEGIN_ACTION, TOOL_CALL, ToolId::Think.token()]])
    }
}

impl Policy for ScriptedPolicy {
    fn regime(&self) -> Regime {
        self.regime
    }

    fn max_action_len(&self) -> usize {
        self.max_action_len
    }

    fn act(&mut self, _context: &[TokenId]) -> Result<Proposal> {
        let i = self.next.min(self.outputs.len().saturating_sub(1));
        self.next += 1;
        Ok(Proposal {
            raw: self.outputs.get(i).cloned().unwrap_or_default(),
            trace: None,
        })
    }
}

/// Randomly mixes long, malformed, cognitive, environment-facing and
/// terminal spans. Used to fuzz the budget checks.
#[derive(Debug, Clone)]
pub struct AdversarialPolicy {
    pub regime: Regime,
    pub max_action_len: usize,
    rng: ChaCha8Rng,
}

impl AdversarialPolicy {
    pub fn new(regime: Regime, max_action_len: usize, seed: u64) -> Self {
        AdversarialPolicy {
            regime,
            max_action_len,
            rng: crate::data::world::stream_rng(seed, 20, 0),
        }
    }
}

impl Policy for AdversarialPolicy {
    fn regime(&self) -> Regime {
        self.regime
    }

    fn max_action_len(&self) -> usize {
        self.max_action_len
    }

    fn act(&mut self, _context: &[TokenId]) -> Result<Proposal> {
        let r = &mut self.rng;
        let fact = |r: &mut ChaCha8Rng| Fact::new(r.random_range(0..8), r.random_range(0..16));
        let raw = match r.random_range(0..6) {
            0 => (0..r.random_range(0..self.max_action_len * 2))
                .map(|_| TokenId(r.random_range(0..vocab::SIZE as u16)))
                .collect(),
            1 => vec![BEGIN_ACTION, TOOL_CALL],
            2 => {
                let n = r.random_range(0..self.max_action_len);
                let plan = (0..n).map(|_| vocab::entity(r.random_range(0..48))).collect();
                StructuredAction::tool_call(ToolId::Think, [(ArgKey::Plan, plan)]).to_tokens()
            }
            3 | 4 => {
                let q = Fact::tokens(&[fact(r)]);
                StructuredAction::tool_call(ToolId::BatchWebSearch, [(ArgKey::Query, q)]).to_tokens()
            }
            _ if r.next_u32() % 8 == 0 => StructuredAction::terminate(vec![vocab::entity(r.random_range(0..48))]).to_tokens(),
            _ => {
                let q = Fact::tokens(&[fact(r), fact(r)]);
                StructuredAction::tool_call(ToolId::AssignTasks, [(ArgKey::Task, q)]).to_tokens()
            }
        };
        Ok(Proposal { raw, trace: None })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    AnsweredCorrect,
    AnsweredWrong,
    BudgetExhausted,
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Planner,
    Seeker,
}

/// Control-flow steps taken by the loop, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathEvent {
    FinishPrompt,
    Decode,
    Retry,
    Invalid,
    Execute,
    Terminate,
    RoundLimit,
    ToolLimit,
    ContextLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub raw: Vec<TokenId>,
    pub parse_error: Option<ParseErrorKind>,
    pub decode_steps: usize,
    /// Key of the decode trace line, if the policy produced one.
    pub trace: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based.
    pub round: usize,
    pub role: AgentRole,
    pub finish_prompted: bool,
    pub attempts: Vec<Attempt>,
    pub action: Option<StructuredAction>,
    pub observation: Observation,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Consumed {
    pub rounds: usize,
    /// Every executed tool call, cognitive ones included.
    pub tool_calls: usize,
    /// Calls counted against the tool cap.
    pub env_tool_calls: usize,
    pub seeker_calls: usize,
    /// Largest context-plus-action length fed to the policy, or history
    /// length, whichever is larger.
    pub peak_context: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task_id: String,
    pub regime: Regime,
    pub config_hash: String,
    pub gold_answer: TokenId,
    pub rounds: Vec<RoundRecord>,
    pub outcome: Outcome,
    pub consumed: Consumed,
    pub path: Vec<PathEvent>,
    pub wall_ms: f64,
}

impl EpisodeRecord {
    pub fn has_invalid_span(&self) -> bool {
        self.attempts().any(|a| a.parse_error.is_some())
    }

    pub fn attempts(&self) -> impl Iterator<Item = &Attempt> {
        self.rounds.iter().flat_map(|r| &r.attempts)
    }

    /// Copy with every wall-clock field zeroed.
    pub fn without_timing(&self) -> EpisodeRecord {
        let mut r = self.clone();
        r.wall_ms = 0.0;
        for round in &mut r.rounds {
            round.wall_ms = 0.0;
        }
        r
    }
}

/// One decode trace, keyed so episode records can reference it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub key: String,
    pub task_id: String,
    pub regime: Regime,
    pub round: usize,
    pub attempt: usize,
    pub trace: DecodeTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRun {
    pub record: EpisodeRecord,
    pub traces: Vec<TraceLine>,
}

/// The proposed span through its first `END_ACTION`; anything a block
/// decoder committed after it is not part of the action.
fn trim_action(raw: &[TokenId]) -> &[TokenId] {
    match raw.iter().position(|t| *t == END_ACTION) {
        Some(i) => &raw[..=i],
        None => raw,
    }
}

fn role_of(action: Option<&StructuredAction>) -> AgentRole {
    match action.and_then(StructuredAction::tool) {
        Some(t) if t.is_seeker() => AgentRole::Seeker,
        _ => AgentRole::Planner,
    }
}

struct Episode<'a> {
    task: &'a TaskSpec,
    regime: Regime,
    config: RuntimeConfig,
    record_rounds: Vec<RoundRecord>,
    traces: Vec<TraceLine>,
    path: Vec<PathEvent>,
    consumed: Consumed,
}

impl Episode<'_> {
    fn attempt(&mut self, policy: &mut dyn Policy, context: &[TokenId], round: usize, index: usize) -> Result<Attempt> {
        self.path.push(PathEvent::Decode);
        let mut p = policy.act(context)?;
        p.raw.truncate(self.config.max_action_len);
        self.consumed.peak_context = self.consumed.peak_context.max(context.len() + p.raw.len());
        let parse_error = parse_action(trim_action(&p.raw)).err().map(|e| e.kind);
        let mut attempt = Attempt {
            raw: p.raw,
            parse_error,
            decode_steps: 0,
            trace: None,
        };
        if let Some(trace) = p.trace {
            let key = format!("{}/r{round}/a{index}", self.task.task_id);
            attempt.decode_steps = trace.step_count();
            attempt.trace = Some(key.clone());
            self.traces.push(TraceLine {
                key,
                task_id: self.task.task_id.clone(),
                regime: self.regime,
                round,
                attempt: index,
                trace,
            });
        }
        Ok(attempt)
    }
}

/// Runs one task to completion. Every budget or parse failure ends up in
/// the record's outcome; errors are reserved for invalid inputs and policy
/// failures.
pub fn run_episode(task: &TaskSpec, world: &World, policy: &mut dyn Policy, budget: &Budget) -> Result<EpisodeRun> {
    budget.validate()?;
    if world.seed != task.seed {
        return Err(Error::arg(format!("task {} does not belong to world {}", task.task_id, world.seed)));
    }
    let config = RuntimeConfig::new(*budget, policy.max_action_len());
    let cap = budget.context_cap.min(policy.max_sequence());
    let gold = vocab::entity(task.gold_answer as usize);
    let start = Instant::now();
    let mut ep = Episode {
        task,
        regime: policy.regime(),
        config,
        record_rounds: Vec::new(),
        traces: Vec::new(),
        path: Vec::new(),
        consumed: Consumed::default(),
    };
    let mut history = History::new(&task.constraints);
    let mut fs = VirtualFs::new();
    let outcome = loop {
        if ep.record_rounds.len() >= budget.t_max {
            ep.path.push(PathEvent::RoundLimit);
            break Outcome::BudgetExhausted;
        }
        let finish_prompted = ep.consumed.env_tool_calls >= budget.tool_cap;
        let mut context = history.tokens().to_vec();
        if finish_prompted {
            ep.path.push(PathEvent::FinishPrompt);
            context.push(config.finish_token);
        }
        // Room for the context, a retry suffix and the longest action.
        if context.len() + config.retries + config.max_action_len > cap {
            ep.path.push(PathEvent::ContextLimit);
            break Outcome::Fallback;
        }
        let round = ep.record_rounds.len() + 1;
        let t0 = Instant::now();
        let mut attempts = vec![ep.attempt(policy, &context, round, 0)?];
        for i in 1..=config.retries {
            if attempts[i - 1].parse_error.is_none() {
                break;
            }
            ep.path.push(PathEvent::Retry);
            context.push(config.retry_token);
            attempts.push(ep.attempt(policy, &context, round, i)?);
        }
        let last = attempts.last().expect("at least one attempt");
        let action = parse_action(trim_action(&last.raw)).ok();
        let raw = trim_action(&last.raw).to_vec();
        ep.consumed.rounds = round;
        let mut rec = RoundRecord {
            round,
            role: role_of(action.as_ref()),
            finish_prompted,
            attempts,
            action: action.clone(),
            observation: Observation::empty(),
            wall_ms: 0.0,
        };
        let observation = match &action {
            None => {
                ep.path.push(PathEvent::Invalid);
                Observation::error("invalid_action")
            }
            Some(StructuredAction::Terminate { answer }) => {
                ep.path.push(PathEvent::Terminate);
                rec.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
                ep.record_rounds.push(rec);
                break if answer.as_slice() == [gold] {
                    Outcome::AnsweredCorrect
                } else {
                    Outcome::AnsweredWrong
                };
            }
            Some(StructuredAction::ToolCall { tool, args }) => {
                if finish_prompted && !tool.is_cognitive() {
                    // The single terminal prompt was ignored.
                    ep.path.push(PathEvent::ToolLimit);
                    rec.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
                    ep.record_rounds.push(rec);
                    break Outcome::BudgetExhausted;
                }
                ep.path.push(PathEvent::Execute);
                ep.consumed.tool_calls += 1;
                if !tool.is_cognitive() {
                    ep.consumed.env_tool_calls += 1;
                }
                if tool.is_seeker() {
                    ep.consumed.seeker_calls += 1;
                }
                execute_tool(*tool, args, world, &mut fs)
            }
        };
        rec.observation = observation.clone();
        rec.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        ep.record_rounds.push(rec);
        if finish_prompted {
            ep.path.push(PathEvent::ToolLimit);
            break Outcome::BudgetExhausted;
        }
        if history.len_with(raw.len(), &observation) > budget.context_cap {
            ep.path.push(PathEvent::ContextLimit);
            break Outcome::Fallback;
        }
        history.push_round(&raw, &observation);
        ep.consumed.peak_context = ep.consumed.peak_context.max(history.token_count());
    };
    let record = EpisodeRecord {
        task_id: task.task_id.clone(),
        regime: ep.regime,
        config_hash: config.hash(),
        gold_answer: gold,
        rounds: ep.record_rounds,
        outcome,
        consumed: ep.consumed,
        path: ep.path,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok(EpisodeRun {
        record,
        traces: ep.traces,
    })
}

/// Runs independent episodes on up to `jobs` threads. Results keep task
/// order regardless of scheduling.
pub fn run_episodes<P, F>(
    tasks: &[(&TaskSpec, &World)],
    make_policy: F,
    budget: &Budget,
    jobs: usize,
) -> Result<Vec<EpisodeRun>>
where
    P: Policy,
    F: Fn() -> P + Sync,
{
    let jobs = jobs.clamp(1, tasks.len().max(1));
    let chunk = tasks.len().div_ceil(jobs).max(1);
    let run_chunk = |part: &[(&TaskSpec, &World)]| -> Result<Vec<EpisodeRun>> {
        part.iter()
            .map(|(t, w)| run_episode(t, w, &mut make_policy(), budget))
            .collect()
    };
    if jobs == 1 {
        return run_chunk(tasks);
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = tasks.chunks(chunk).map(|part| s.spawn(move || run_chunk(part))).collect();
        let mut out = Vec::with_capacity(tasks.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::arg("episode worker panicked"))??);
        }
        Ok(out)
    })
}
