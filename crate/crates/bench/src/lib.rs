//! Shared inputs for the benchmarks.

use agentdiff::data::vocab::TokenId;
use agentdiff::data::{make_training_set, TaskSet, TrainingExample, WorldConfig};
use agentdiff::model::{ModelConfig, Parameters};

/// Default-sized model with fixed weights.
pub fn model() -> Parameters<f32> {
    Parameters::init(ModelConfig::default()).expect("default model config is valid")
}

/// Gold training examples from one world, longest context first.
pub fn examples() -> Vec<TrainingExample> {
    let set = TaskSet::generate(9, 1, 8, WorldConfig::default()).expect("world generation");
    let mut ex = make_training_set(&set.gold_trajectories().expect("gold trajectories")).expect("training set");
    ex.sort_by_key(|e| std::cmp::Reverse(e.context.len()));
    ex
}

pub fn context(len: usize) -> Vec<TokenId> {
    let ex = examples();
    let c = &ex[0].context;
    c[..len.min(c.len())].to_vec()
}
