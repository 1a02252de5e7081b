use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{io_err, ExperimentConfig, HarnessError, Split};
use crate::autograd::{load_checkpoint, save_checkpoint, ParamBundle};
use crate::executor::{dagger_train, PolicyKind, PolicyParams};
use crate::mapper::{train_mapper, MapperParams};
use crate::planner::{train_mapper_planner, PlannerTrainConfig, VinParams};
use crate::synthesizer::{train_synth, SynthParams};

pub const MAPPER: &str = "mapper";
pub const VIN: &str = "vin";
pub const SYNTH: &str = "synth";

pub fn policy_checkpoint(kind: PolicyKind) -> String {
    format!("policy_{}", kind.name())
}

/// Checkpoints and training logs under one output directory.
#[derive(Debug, Clone)]
pub struct CheckpointStore {
    out: PathBuf,
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

impl CheckpointStore {
    pub fn new(out: &Path) -> Self {
        CheckpointStore { out: out.to_path_buf() }
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join("checkpoints").join(format!("{name}.json"))
    }

    pub fn has(&self, name: &str) -> bool {
        self.path(name).is_file()
    }

    /// Fails listing every missing name, not just the first.
    pub fn require(&self, names: &[String]) -> Result<(), HarnessError> {
        let missing: Vec<String> = names.iter().filter(|n| !self.has(n)).cloned().collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::MissingCheckpoints(missing))
        }
    }

    pub fn save(&self, name: &str, bundle: &ParamBundle, step: usize) -> Result<(), HarnessError> {
        let path = self.path(name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        Ok(save_checkpoint(&path, bundle, step)?)
    }

    pub fn load(&self, name: &str) -> Result<ParamBundle, HarnessError> {
        self.require(&[name.to_string()])?;
        Ok(load_checkpoint(&self.path(name))?.0)
    }

    fn write_log<T: Serialize>(&self, stage: &str, log: &T) -> Result<(), HarnessError> {
        let text = serde_json::to_string(log).map_err(|e| HarnessError::Io(e.to_string()))?;
        write_file(&self.out.join("logs").join(format!("{stage}.json")), &text)
    }

    pub fn mapper(&self, cfg: &ExperimentConfig) -> Result<MapperParams, HarnessError> {
        Ok(MapperParams { cfg: cfg.mapper.model, bundle: self.load(MAPPER)? })
    }

    pub fn vin(&self) -> Result<VinParams, HarnessError> {
        Ok(VinParams { bundle: self.load(VIN)?, k: None })
    }

    pub fn synth(&self, cfg: &ExperimentConfig) -> Result<SynthParams, HarnessError> {
        Ok(SynthParams { cfg: cfg.synth.model, bundle: self.load(SYNTH)? })
    }

    pub fn policy(&self, cfg: &ExperimentConfig, kind: PolicyKind) -> Result<PolicyParams, HarnessError> {
        let bundle = self.load(&policy_checkpoint(kind))?;
        Ok(PolicyParams { kind, cfg: cfg.policy.policy, synth_cfg: cfg.synth.model, bundle })
    }

    /// Every policy listed in the configuration.
    pub fn policies(&self, cfg: &ExperimentConfig) -> Result<Vec<PolicyParams>, HarnessError> {
        self.require(&cfg.policies.iter().map(|&k| policy_checkpoint(k)).collect::<Vec<_>>())?;
        cfg.policies.iter().map(|&k| self.policy(cfg, k)).collect()
    }

    pub fn train_mapper(&self, cfg: &ExperimentConfig) -> Result<(), HarnessError> {
        let maps = cfg.maps.generate(Split::Train)?;
        let (params, log) = train_mapper(&maps, &cfg.mapper)?;
        self.save(MAPPER, &params.bundle, cfg.mapper.iters)?;
        self.write_log(MAPPER, &log)
    }

    /// Fine-tunes the stored mapper together with the planner; without a
    /// stored mapper one is trained first.
    pub fn train_planner(&self, cfg: &ExperimentConfig) -> Result<(), HarnessError> {
        let maps = cfg.maps.generate(Split::Train)?;
        let init = if self.has(MAPPER) { Some(self.mapper(cfg)?) } else { None };
        let pcfg = PlannerTrainConfig { mapper: cfg.mapper.clone(), ..cfg.planner.clone() };
        let (mapper, vin, log) = train_mapper_planner(&maps, &pcfg, init.as_ref())?;
        self.save(MAPPER, &mapper.bundle, cfg.planner.iters)?;
        self.save(VIN, &vin.bundle, cfg.planner.iters)?;
        self.write_log("planner", &log)
    }

    pub fn train_synth(&self, cfg: &ExperimentConfig) -> Result<(), HarnessError> {
        let maps = cfg.maps.generate(Split::Train)?;
        let (params, log) = train_synth(&maps, &cfg.synth)?;
        self.save(SYNTH, &params.bundle, cfg.synth.iters)?;
        self.write_log(SYNTH, &log)
    }

    pub fn train_policy(&self, cfg: &ExperimentConfig, kind: PolicyKind) -> Result<(), HarnessError> {
        let synth = self.synth(cfg)?;
        let maps = cfg.maps.generate(Split::Train)?;
        let dcfg = cfg.dagger();
        let (params, log) = dagger_train(kind, &maps, &synth, &dcfg)?;
        let name = policy_checkpoint(kind);
        self.save(&name, &params.bundle, dcfg.iters)?;
        self.write_log(&name, &log)
    }

    /// Every map of every split as an environment file.
    pub fn write_maps(&self, cfg: &ExperimentConfig) -> Result<usize, HarnessError> {
        let mut n = 0;
        for (split, name) in [(Split::Train, "train"), (Split::Val, "val"), (Split::Test, "test")] {
            for (seed, map) in cfg.maps.range(split).seeds().zip(cfg.maps.generate(split)?) {
                write_file(&self.out.join("maps").join(format!("{name}_{seed}.json")), &map.to_json())?;
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn write(&self, name: &str, text: &str) -> Result<PathBuf, HarnessError> {
        let path = self.out.join(name);
        write_file(&path, text)?;
        Ok(path)
    }
}
