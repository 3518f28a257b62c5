//! Token vocabulary, synthetic task world, gold trajectories and per-round
//! training examples.

pub mod task;
pub mod trajectory;
pub mod vocab;
pub mod world;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use task::{sample_tasks, TaskSpec};
pub use trajectory::{
    build_gold_trajectory, make_training_set, History, Round, SpanLayout, TrainingExample, Trajectory,
};
pub use vocab::{TokenId, Vocab};
pub use world::{Document, Entity, World, WorldConfig};

use crate::error::{Error, Result};

/// A group of worlds and the tasks posed against them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSet {
    pub worlds: Vec<World>,
    pub tasks: Vec<TaskSpec>,
}

/// Seed of world `index` in a task set built from `seed`.
pub fn world_seed(seed: u64, index: usize) -> u64 {
    seed * 1000 + index as u64
}

impl TaskSet {
    pub fn generate(seed: u64, worlds: usize, tasks_per_world: usize, config: WorldConfig) -> Result<TaskSet> {
        if worlds == 0 || worlds > 1000 {
            return Err(Error::Config("world count must be in 1..=1000".into()));
        }
        let mut out = TaskSet {
            worlds: Vec::with_capacity(worlds),
            tasks: Vec::with_capacity(worlds * tasks_per_world),
        };
        for i in 0..worlds {
            let w = World::generate(world_seed(seed, i), config)?;
            out.tasks.extend(sample_tasks(&w, tasks_per_world)?);
            out.worlds.push(w);
        }
        Ok(out)
    }

    pub fn world(&self, seed: u64) -> Option<&World> {
        self.worlds.iter().find(|w| w.seed == seed)
    }

    pub fn world_for(&self, task: &TaskSpec) -> Result<&World> {
        self.world(task.seed)
            .ok_or_else(|| Error::arg(format!("no world {} for task {}", task.seed, task.task_id)))
    }

    pub fn gold_trajectories(&self) -> Result<Vec<Trajectory>> {
        self.tasks
            .iter()
            .map(|t| build_gold_trajectory(t, self.world_for(t)?))
            .collect()
    }

    /// Writes `world_<seed>.json`, `tasks.json`, `trajectories.jsonl` and
    /// `train.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for w in &self.worlds {
            write_json(&dir.join(format!("world_{}.json", w.seed)), w)?;
        }
        write_json(&dir.join("tasks.json"), &self.tasks)?;
        let trajectories = self.gold_trajectories()?;
        write_jsonl(&dir.join("trajectories.jsonl"), &trajectories)?;
        write_jsonl(&dir.join("train.jsonl"), &make_training_set(&trajectories)?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<TaskSet> {
        let tasks: Vec<TaskSpec> = read_json(&dir.join("tasks.json"))?;
        let mut seeds: Vec<u64> = tasks.iter().map(|t| t.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let worlds = seeds
            .iter()
            .map(|s| read_json(&dir.join(format!("world_{s}.json"))))
            .collect::<Result<Vec<World>>>()?;
        Ok(TaskSet { worlds, tasks })
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Input {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads one JSON value per non-empty line; errors carry the 1-based line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Input {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_set_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let set = TaskSet::generate(3, 2, 10, WorldConfig::default()).unwrap();
        set.write(dir.path()).unwrap();
        let back = TaskSet::read(dir.path()).unwrap();
        assert_eq!(back, set);
        let examples: Vec<TrainingExample> = read_jsonl(&dir.path().join("train.jsonl")).unwrap();
        assert_eq!(examples, make_training_set(&set.gold_trajectories().unwrap()).unwrap());
    }

    #[test]
    fn bad_jsonl_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        fs::write(&p, "1\n2\nnope\n").unwrap();
        match read_jsonl::<u32>(&p) {
            Err(Error::Input { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
