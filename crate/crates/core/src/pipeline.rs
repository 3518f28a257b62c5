//! Directory-level steps chaining the modules: task generation, training,
//! episode runs and analysis. Each step reads and writes plain files so runs
//! can be resumed or compared later.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytics::{decode_dynamics, episode_metrics, read_records, read_traces, write_dynamics, write_metrics};
use crate::analytics::{DynamicsReport, MetricsReport};
use crate::corruption::NoiseLevel;
use crate::data::{read_jsonl, write_json, write_jsonl, TaskSet, TrainingExample, WorldConfig};
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::runtime::{hex, run_episodes, Budget, EpisodeRun, ModelPolicy, RuntimeConfig};
use crate::training::{heldout_mdm, train, write_loss_csv, TrainConfig, TrainOutcome};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const EPISODES_FILE: &str = "episodes.jsonl";
pub const TRACES_FILE: &str = "traces.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub seed: u64,
    pub worlds: usize,
    pub tasks_per_world: usize,
    pub world: WorldConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 1,
            worlds: 46,
            tasks_per_world: 100,
            world: WorldConfig::default(),
        }
    }
}

impl DataConfig {
    /// Held-out evaluation tasks: 200 tasks over worlds never used for
    /// training.
    pub fn heldout() -> Self {
        DataConfig {
            seed: 2,
            worlds: 20,
            tasks_per_world: 10,
            world: WorldConfig::default(),
        }
    }

    pub fn generate(&self) -> Result<TaskSet> {
        TaskSet::generate(self.seed, self.worlds, self.tasks_per_world, self.world)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSummary {
    pub tasks: usize,
    pub examples: usize,
}

pub fn gen_data(cfg: &DataConfig, dir: &Path) -> Result<DataSummary> {
    let set = cfg.generate()?;
    set.write(dir)?;
    write_json(&dir.join("data_config.json"), cfg)?;
    Ok(DataSummary {
        tasks: set.tasks.len(),
        examples: read_examples(dir)?.len(),
    })
}

pub fn read_examples(dir: &Path) -> Result<Vec<TrainingExample>> {
    read_jsonl(&dir.join(TRAIN_FILE))
}

/// Noise levels used to score held-out denoising loss: every level from
/// light to full masking.
pub fn heldout_levels(levels: usize) -> Result<Vec<NoiseLevel>> {
    (1..=levels).map(|k| NoiseLevel::new(k, levels)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub l_mdm: f64,
    pub l_ar: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config: TrainConfig,
    pub examples: usize,
    pub stream_hash: String,
    pub epochs: Vec<EpochRow>,
    pub checkpoint_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heldout_mdm: Option<f64>,
}

impl TrainSummary {
    /// Whether every epoch's mean total loss is below the previous one.
    pub fn strictly_decreasing(&self) -> bool {
        self.epochs.windows(2).all(|w| w[1].l_total < w[0].l_total)
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(fs::read(path)?)))
}

/// Trains on `data`, writes `checkpoint.json`, `loss.csv`, `epochs.csv` and
/// `train.json` into `out`. With `heldout` the denoising loss on those
/// examples is recorded too.
pub fn train_to_dir(
    cfg: &TrainConfig,
    data: &[TrainingExample],
    heldout: Option<&[TrainingExample]>,
    out: &Path,
) -> Result<(TrainOutcome, TrainSummary)> {
    fs::create_dir_all(out)?;
    let mut outcome = train(cfg, data, |_| {})?;
    let epochs: Vec<EpochRow> = outcome
        .epochs
        .iter()
        .map(|e| EpochRow {
            epoch: e.epoch,
            l_mdm: e.mean.l_mdm,
            l_ar: e.mean.l_ar,
            l_total: e.mean.l_total,
        })
        .collect();
    outcome.checkpoint.meta = serde_json::json!({
        "train_config": cfg,
        "stream_hash": outcome.stream_hash,
        "epochs": epochs,
    });
    let ckpt = out.join(CHECKPOINT_FILE);
    outcome.checkpoint.save(&ckpt)?;
    write_loss_csv(&out.join("loss.csv"), &outcome.steps)?;
    let mut w = csv::Writer::from_path(out.join("epochs.csv")).map_err(crate::training::csv_err)?;
    for e in &epochs {
        w.serialize(e).map_err(crate::training::csv_err)?;
    }
    w.flush()?;
    let heldout_mdm = match heldout {
        Some(h) => Some(heldout_mdm(
            &outcome.checkpoint.params,
            h,
            &heldout_levels(cfg.levels)?,
            cfg.objective.block_len,
            cfg.seed,
        )?),
        None => None,
    };
    let summary = TrainSummary {
        config: *cfg,
        examples: data.len(),
        stream_hash: outcome.stream_hash.clone(),
        epochs,
        checkpoint_sha256: file_sha256(&ckpt)?,
        heldout_mdm,
    };
    write_json(&out.join("train.json"), &summary)?;
    Ok((outcome, summary))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub decode: DecodeConfig,
    pub runtime: RuntimeConfig,
    pub config_hash: String,
    pub episodes: usize,
}

/// Runs every task in `tasks` with the checkpoint and writes
/// `episodes.jsonl`, `traces.jsonl` and `run.json` into `out`.
pub fn run_to_dir(
    ckpt: &Checkpoint<f32>,
    tasks: &TaskSet,
    decode: &DecodeConfig,
    budget: &Budget,
    jobs: usize,
    out: &Path,
) -> Result<(Vec<EpisodeRun>, RunSummary)> {
    decode.validate()?;
    budget.validate()?;
    fs::create_dir_all(out)?;
    let pairs = tasks
        .tasks
        .iter()
        .map(|t| Ok((t, tasks.world_for(t)?)))
        .collect::<Result<Vec<_>>>()?;
    if pairs.is_empty() {
        return Err(Error::arg("task set is empty"));
    }
    let params = &ckpt.params;
    let runs = run_episodes(
        &pairs,
        || ModelPolicy {
            model: params,
            decode: *decode,
        },
        budget,
        jobs,
    )?;
    let records: Vec<_> = runs.iter().map(|r| &r.record).collect();
    write_jsonl(&out.join(EPISODES_FILE), &records)?;
    let traces: Vec<_> = runs.iter().flat_map(|r| &r.traces).collect();
    write_jsonl(&out.join(TRACES_FILE), &traces)?;
    let runtime = RuntimeConfig::new(*budget, decode.max_action_len);
    let summary = RunSummary {
        decode: *decode,
        runtime,
        config_hash: runtime.hash(),
        episodes: runs.len(),
    };
    write_json(&out.join("run.json"), &summary)?;
    Ok((runs, summary))
}

/// Computes metrics and decoding dynamics for a run directory and writes
/// them next to its logs.
pub fn analyze_dir(run: &Path) -> Result<(MetricsReport, DynamicsReport)> {
    let records = read_records(&run.join(EPISODES_FILE))?;
    let traces = read_traces(&run.join(TRACES_FILE))?;
    let metrics = episode_metrics(&records)?;
    let dynamics = decode_dynamics(&traces)?;
    write_metrics(run, &metrics)?;
    write_dynamics(run, &dynamics)?;
    Ok((metrics, dynamics))
}

/// Files directly inside `dir`, sorted.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir)? {
        let e = e?;
        if e.file_type()?.is_file() {
            out.push(e.path());
        }
    }
    out.sort();
    Ok(out)
}

/// Digest over the names and contents of the files in `dir`, skipping
/// `skip`.
pub fn dir_hash(dir: &Path, skip: &[&str]) -> Result<String> {
    let mut h = Sha256::new();
    for p in list_files(dir)? {
        let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
        if skip.contains(&name.as_str()) {
            continue;
        }
        h.update(name.as_bytes());
        h.update([0]);
        h.update(fs::read(&p)?);
    }
    Ok(hex(&h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gen_data_is_deterministic() {
        let cfg = DataConfig {
            seed: 5,
            worlds: 2,
            tasks_per_world: 3,
            ..DataConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let s = gen_data(&cfg, a.path()).unwrap();
        gen_data(&cfg, b.path()).unwrap();
        assert_eq!(s.tasks, 6);
        assert!(s.examples >= 6);
        assert_eq!(dir_hash(a.path(), &[]).unwrap(), dir_hash(b.path(), &[]).unwrap());
    }

    #[test]
    fn heldout_levels_cover_every_level() {
        let l = heldout_levels(4).unwrap();
        assert_eq!(l.iter().map(|x| x.k()).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    }
}
