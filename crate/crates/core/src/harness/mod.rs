//! Experiment configuration, evaluation runners and result reporting.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::AutogradError;
use crate::executor::{DaggerConfig, ExecError};
use crate::gridworld::{generate_map, GridError, GridMap, MapStyle, NoiseModel, ViewMode, MIN_MAP_SIZE};
use crate::mapper::{MapperError, MapperTrainConfig};
use crate::metrics::nearest_rank;
use crate::planner::{PlannerError, PlannerTrainConfig};
use crate::synthesizer::{SynthError, SynthTrainConfig};

mod eval;
mod store;

pub use eval::{
    eval_cases, long_histogram_eval, memory_label, replay_episode, run_full_system, run_policy_eval, EvalCase, FullSystemReport,
    PolicyReport, ReplayOutput,
};
pub use store::{policy_checkpoint, CheckpointStore, MAPPER, SYNTH, VIN};

/// An episode counts as a success when it ends this close to the goal.
pub const SUCCESS_RADIUS: u32 = 3;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing checkpoints: {}", .0.join(", "))]
    MissingCheckpoints(Vec<String>),
    #[error("sanity check failed: {0}")]
    Sanity(String),
    #[error("no episodes to summarize for {0}")]
    Empty(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Mapper(#[from] MapperError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

impl HarnessError {
    /// Process exit status for the command line: 2 for configuration, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            _ => 1,
        }
    }
}

pub(crate) fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

/// Map seeds `start..start + count`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRange {
    pub start: u64,
    pub count: u64,
}

impl SeedRange {
    pub fn seeds(&self) -> std::ops::Range<u64> {
        self.start..self.start + self.count
    }

    fn overlaps(&self, other: &SeedRange) -> bool {
        self.start < other.start + other.count && other.start < self.start + self.count
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapConfig {
    pub width: usize,
    pub height: usize,
    pub style: MapStyle,
    pub train: SeedRange,
    pub val: SeedRange,
    pub test: SeedRange,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            width: 20,
            height: 20,
            style: MapStyle::Rooms,
            train: SeedRange { start: 0, count: 20 },
            val: SeedRange { start: 5000, count: 5 },
            test: SeedRange { start: 9000, count: 10 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl MapConfig {
    pub fn range(&self, split: Split) -> SeedRange {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn generate(&self, split: Split) -> Result<Vec<GridMap>, HarnessError> {
        Ok(self.range(split).seeds().map(|s| generate_map(s, self.width, self.height, self.style)).collect::<Result<_, _>>()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HistogramConfig {
    /// Bin width in actions.
    pub width: u32,
    /// Distances at or above this land in the last bin.
    pub max: u32,
    /// Also evaluate far goals for a separate histogram.
    pub long_trajectory: bool,
    pub long_d_min: u32,
    pub long_d_max: u32,
    pub long_t_max: usize,
    pub long_episodes: usize,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        HistogramConfig { width: 2, max: 30, long_trajectory: false, long_d_min: 32, long_d_max: 36, long_t_max: 40, long_episodes: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub maps: MapConfig,
    pub noise: NoiseModel,
    pub episodes: usize,
    pub d_min: u32,
    pub d_max: u32,
    pub t_max: usize,
    pub memory: Vec<ViewMode>,
    /// Policy kinds trained and evaluated; `open_loop` is always included.
    pub policies: Vec<crate::executor::PolicyKind>,
    /// Environment views given to the mapper in the full system.
    pub full_system_views: usize,
    pub histogram: HistogramConfig,
    pub mapper: MapperTrainConfig,
    pub planner: PlannerTrainConfig,
    pub synth: SynthTrainConfig,
    pub policy: DaggerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        use crate::executor::PolicyKind;
        ExperimentConfig {
            seed: 0,
            maps: MapConfig::default(),
            noise: NoiseModel::default(),
            episodes: 1000,
            d_min: 16,
            d_max: 18,
            t_max: 20,
            memory: vec![ViewMode::FromPath(None), ViewMode::FromPath(Some(10)), ViewMode::FromPath(Some(5)), ViewMode::FromEnv(40)],
            policies: vec![PolicyKind::Ours, PolicyKind::Gru, PolicyKind::ActionOnly, PolicyKind::NnMatch],
            full_system_views: 40,
            histogram: HistogramConfig::default(),
            mapper: MapperTrainConfig::default(),
            planner: PlannerTrainConfig::default(),
            synth: SynthTrainConfig::default(),
            policy: DaggerConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Sets the experiment seed and every training stage's seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.mapper.seed = seed;
        self.planner.seed = seed;
        self.planner.mapper.seed = seed;
        self.synth.seed = seed;
        self.policy.seed = seed;
        self
    }

    /// Training stages share the actuation noise of the experiment.
    pub fn dagger(&self) -> DaggerConfig {
        DaggerConfig { p_fail: self.noise.p_fail, t_max: self.t_max, ..self.policy.clone() }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let m = &self.maps;
        if m.width < MIN_MAP_SIZE || m.height < MIN_MAP_SIZE {
            return bad(format!("maps must be at least {MIN_MAP_SIZE}x{MIN_MAP_SIZE}"));
        }
        let splits = [("train", m.train), ("val", m.val), ("test", m.test)];
        for (name, r) in splits {
            if r.count == 0 {
                return bad(format!("{name} split is empty"));
            }
        }
        for i in 0..3 {
            for j in i + 1..3 {
                if splits[i].1.overlaps(&splits[j].1) {
                    return bad(format!("{} and {} map seeds overlap", splits[i].0, splits[j].0));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.noise.p_fail) {
            return bad(format!("p_fail {} is not a probability", self.noise.p_fail));
        }
        if self.d_min > self.d_max || self.histogram.long_d_min > self.histogram.long_d_max {
            return bad("distance bounds are inverted".into());
        }
        if self.d_min <= SUCCESS_RADIUS {
            return bad(format!("d_min must exceed the success radius {SUCCESS_RADIUS}"));
        }
        if self.t_max < self.d_max as usize || self.histogram.long_t_max < self.histogram.long_d_max as usize {
            return bad("t_max is shorter than the farthest goal".into());
        }
        if self.episodes == 0 || self.t_max == 0 {
            return bad("episodes and t_max must be positive".into());
        }
        if self.memory.is_empty() || self.policies.is_empty() {
            return bad("memory settings and policies must be non-empty".into());
        }
        if self.histogram.width == 0 {
            return bad("histogram bin width must be positive".into());
        }
        Ok(())
    }
}

/// Outcome of one evaluation episode under one method.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub method: String,
    pub episode: usize,
    pub initial_distance: u32,
    pub final_distance: u32,
    pub success: bool,
    pub failed_forwards: usize,
}

impl EpisodeResult {
    pub fn new(method: &str, episode: usize, initial_distance: u32, final_distance: u32, failed_forwards: usize) -> Self {
        EpisodeResult {
            method: method.to_string(),
            episode,
            initial_distance,
            final_distance,
            success: final_distance <= SUCCESS_RADIUS,
            failed_forwards,
        }
    }
}

/// Mean and 75th percentile of final distance, and percent successful.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub mean: f64,
    pub p75: f64,
    pub success: f64,
}

impl SummaryRow {
    pub fn format_row(&self) -> String {
        format!("{} {:.1} / {:.1} / {:.1}", self.method, self.mean, self.p75, self.success)
    }
}

pub fn summarize(method: &str, results: &[EpisodeResult]) -> Result<SummaryRow, HarnessError> {
    if results.is_empty() {
        return Err(HarnessError::Empty(method.to_string()));
    }
    let d: Vec<f64> = results.iter().map(|r| r.final_distance as f64).collect();
    let n = d.len() as f64;
    Ok(SummaryRow {
        method: method.to_string(),
        mean: d.iter().sum::<f64>() / n,
        p75: nearest_rank(&d, 0.75).expect("non-empty"),
        success: 100.0 * results.iter().filter(|r| r.success).count() as f64 / n,
    })
}

/// Results grouped by method, in evaluation order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodResults {
    pub methods: Vec<(String, Vec<EpisodeResult>)>,
}

impl MethodResults {
    pub fn push(&mut self, method: &str, results: Vec<EpisodeResult>) {
        self.methods.push((method.to_string(), results));
    }

    pub fn get(&self, method: &str) -> Option<&[EpisodeResult]> {
        self.methods.iter().find(|(m, _)| m == method).map(|(_, r)| r.as_slice())
    }

    pub fn success(&self, method: &str) -> Option<f64> {
        self.get(method).and_then(|r| summarize(method, r).ok()).map(|s| s.success)
    }

    pub fn summaries(&self) -> Result<Vec<SummaryRow>, HarnessError> {
        self.methods.iter().map(|(m, r)| summarize(m, r)).collect()
    }

    pub fn summary_csv(&self) -> Result<String, HarnessError> {
        let mut out = String::from("method,mean,p75,success\n");
        for s in self.summaries()? {
            out.push_str(&format!("{},{:.4},{:.1},{:.2}\n", s.method, s.mean, s.p75, s.success));
        }
        Ok(out)
    }

    pub fn episodes_jsonl(&self) -> String {
        let mut out = String::new();
        for (_, rs) in &self.methods {
            for r in rs {
                out.push_str(&serde_json::to_string(r).expect("result serializes"));
                out.push('\n');
            }
        }
        out
    }

    pub fn histogram_csv(&self, cfg: &HistogramConfig) -> String {
        let mut out = String::from("method,bin_lo,bin_hi,count\n");
        for (m, rs) in &self.methods {
            for row in emit_histogram(m, rs, cfg) {
                out.push_str(&format!("{},{},{},{}\n", row.method, row.bin_lo, row.bin_hi, row.count));
            }
        }
        out
    }
}

/// Count of final distances in `[bin_lo, bin_hi)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub method: String,
    pub bin_lo: u32,
    pub bin_hi: u32,
    pub count: usize,
}

/// Final-distance histogram of one method. Distances past `cfg.max` go in
/// the last bin, so counts always sum to the number of episodes; a method
/// with no episodes still gets its bins, all zero.
pub fn emit_histogram(method: &str, results: &[EpisodeResult], cfg: &HistogramConfig) -> Vec<HistogramRow> {
    let w = cfg.width.max(1);
    let bins = cfg.max.div_ceil(w).max(1);
    let mut counts = vec![0usize; bins as usize];
    for r in results {
        counts[((r.final_distance / w).min(bins - 1)) as usize] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramRow { method: method.to_string(), bin_lo: i as u32 * w, bin_hi: (i as u32 + 1) * w, count })
        .collect()
}

#[cfg(test)]
mod tests;
