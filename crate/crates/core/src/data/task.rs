use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::world::{stream_rng, World};
use crate::agent::Fact;
use crate::error::{Error, Result};

/// A closed multi-constraint lookup: exactly one entity satisfies every
/// constraint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    /// Seed of the world this task is posed against.
    pub seed: u64,
    /// Sorted by attribute.
    pub constraints: Vec<Fact>,
    pub gold_answer: u16,
}

pub const MAX_CONSTRAINTS: usize = 4;
const ATTEMPTS_PER_SIZE: usize = 64;

impl TaskSpec {
    pub fn id_for(seed: u64, index: usize) -> String {
        format!("w{seed}-t{index}")
    }

    /// Index encoded in a task id produced by [`TaskSpec::id_for`].
    pub fn index_of(task_id: &str) -> Option<usize> {
        task_id.rsplit_once("-t")?.1.parse().ok()
    }

    /// Samples task `index` of `world`. Depends only on `(world.seed, index)`.
    pub fn sample(world: &World, index: usize) -> Result<TaskSpec> {
        let cfg = &world.config;
        let mut rng = stream_rng(world.seed, 2, index as u64);
        let max_m = MAX_CONSTRAINTS.min(cfg.attributes);
        let mut m = rng.random_range(1..=max_m);
        while m <= cfg.attributes {
            for _ in 0..ATTEMPTS_PER_SIZE {
                let gold = rng.random_range(0..world.entities.len());
                let mut attrs = sample(&mut rng, cfg.attributes, m).into_vec();
                attrs.sort_unstable();
                let entity = &world.entities[gold];
                let constraints: Vec<Fact> = attrs
                    .iter()
                    .map(|&a| Fact::new(a, entity.attributes[a] as usize))
                    .collect();
                if world.satisfiers(&constraints).len() == 1 {
                    return Ok(TaskSpec {
                        task_id: TaskSpec::id_for(world.seed, index),
                        seed: world.seed,
                        constraints,
                        gold_answer: gold as u16,
                    });
                }
            }
            m += 1;
        }
        Err(Error::Config(format!(
            "world {} admits no unique-answer task",
            world.seed
        )))
    }

    /// Rebuilds a task from its id; byte-identical to the original sample.
    pub fn regenerate(world: &World, task_id: &str) -> Result<TaskSpec> {
        let index = TaskSpec::index_of(task_id)
            .ok_or_else(|| Error::arg(format!("malformed task id `{task_id}`")))?;
        TaskSpec::sample(world, index)
    }

    /// Attribute groups (documents) the constraints touch, ascending.
    pub fn groups(&self, world: &World) -> Vec<usize> {
        let mut g: Vec<usize> = self
            .constraints
            .iter()
            .map(|f| world.config.group_of(f.attr as usize))
            .collect();
        g.dedup();
        g
    }

    pub fn is_solvable(&self, world: &World) -> bool {
        world.seed == self.seed && world.satisfiers(&self.constraints) == [self.gold_answer]
    }
}

pub fn sample_tasks(world: &World, count: usize) -> Result<Vec<TaskSpec>> {
    (0..count).map(|i| TaskSpec::sample(world, i)).collect()
}
