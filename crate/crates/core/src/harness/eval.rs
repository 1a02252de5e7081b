use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EpisodeResult, ExperimentConfig, HarnessError, MethodResults};
use crate::executor::{
    build_signature, open_loop_rollout, rollout, ActionMode, Controller, FeatureSource, PolicyParams, RolloutRecord, Signature,
};
use crate::gridworld::{sample_episode, sample_view_set, Episode, GridMap, NoiseModel, RaycastConfig, ViewMode, ViewSet};
use crate::mapper::{build_map, Grid, MapperParams, EVAL_POOL};
use crate::planner::{oracle_cost_to_go, oracle_plan_from, vin_plan, CostToGo, PathPlan, VinParams};
use crate::synthesizer::SynthParams;

const EPISODE_SALT: u64 = 0x6570_6973;
const VIEW_SALT: u64 = 0x7669_6577;
const NOISE_SALT: u64 = 0x6e6f_6973;

/// Evaluation episode `index`: a sampled start and goal on a test map and
/// the oracle's plan between them.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub index: usize,
    pub map: usize,
    pub episode: Episode,
    pub ctg: CostToGo,
    pub plan: PathPlan,
}

fn stream_rng(seed: u64, salt: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(i as u64);
    rng
}

/// Episodes are drawn independently per index, so any prefix of the list is
/// itself a valid smaller evaluation.
pub fn eval_cases(seed: u64, maps: &[GridMap], d_min: u32, d_max: u32, count: usize) -> Result<Vec<EvalCase>, HarnessError> {
    (0..count)
        .map(|i| {
            let m = i % maps.len();
            let map = &maps[m];
            let episode = sample_episode(map, d_min, d_max, &mut stream_rng(seed, EPISODE_SALT, i))?;
            let ctg = oracle_cost_to_go(map, episode.goal)?;
            let plan = oracle_plan_from(&ctg, map, episode.start)?;
            Ok(EvalCase { index: i, map: m, episode, ctg, plan })
        })
        .collect()
}

/// Memory views of a case. Environment views are a prefix of a fixed pool.
fn case_views(seed: u64, case: &EvalCase, map: &GridMap, mode: ViewMode, rays: usize) -> Result<ViewSet, HarnessError> {
    let ray = RaycastConfig { rays, ..RaycastConfig::default() };
    let mut rng = stream_rng(seed, VIEW_SALT, case.index);
    Ok(match mode {
        ViewMode::FromEnv(n) => {
            let mut vs = sample_view_set(map, ViewMode::FromEnv(n.max(EVAL_POOL)), &mut rng, Some(&case.plan.poses), &ray)?;
            vs.views.truncate(n);
            vs
        }
        m => sample_view_set(map, m, &mut rng, Some(&case.plan.poses), &ray)?,
    })
}

/// Short label of a memory setting used in method names.
pub fn memory_label(mode: ViewMode) -> String {
    match mode {
        ViewMode::FromPath(None) => "all".into(),
        ViewMode::FromPath(Some(k)) => k.to_string(),
        ViewMode::FromEnv(n) => format!("env{n}"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Method {
    Initial,
    OpenLoop { noise: bool },
    Learned { policy: usize, mode: ViewMode },
}

fn method_list(cfg: &ExperimentConfig, policies: &[PolicyParams]) -> Vec<(String, Method)> {
    let mut out = vec![
        ("initial".to_string(), Method::Initial),
        ("open_loop_no_noise".to_string(), Method::OpenLoop { noise: false }),
        ("open_loop".to_string(), Method::OpenLoop { noise: true }),
    ];
    for (i, p) in policies.iter().enumerate() {
        if p.kind.uses_features() {
            for &mode in &cfg.memory {
                out.push((format!("{}_{}", p.kind.name(), memory_label(mode)), Method::Learned { policy: i, mode }));
            }
        } else {
            out.push((p.kind.name().to_string(), Method::Learned { policy: i, mode: ViewMode::FromPath(None) }));
        }
    }
    out
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    maps: &'a [GridMap],
    policies: &'a [PolicyParams],
    synths: Vec<SynthParams>,
}

struct Run {
    record: RolloutRecord,
    signature: Option<Signature>,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a ExperimentConfig, maps: &'a [GridMap], policies: &'a [PolicyParams]) -> Self {
        Runner { cfg, maps, policies, synths: policies.iter().map(|p| p.synth()).collect() }
    }

    fn run(&self, method: Method, case: &EvalCase) -> Result<Run, HarnessError> {
        let map = &self.maps[case.map];
        let mut rng = stream_rng(self.cfg.seed, NOISE_SALT, case.index);
        let t_max = self.cfg.t_max;
        let record = match method {
            Method::Initial => open_loop_rollout(&case.plan, map, &case.ctg, 0, NoiseModel::noiseless(), &mut rng)?,
            Method::OpenLoop { noise } => {
                let nm = if noise { self.cfg.noise } else { NoiseModel::noiseless() };
                open_loop_rollout(&case.plan, map, &case.ctg, t_max, nm, &mut rng)?
            }
            Method::Learned { policy, mode } => {
                let p = &self.policies[policy];
                let synth = &self.synths[policy];
                let views = case_views(self.cfg.seed, case, map, mode, synth.cfg.rays)?;
                let sig = build_signature(&case.plan, &views, synth, map, p.feature_source(FeatureSource::Synth))?;
                let ctl = Controller::Learned { params: p, signature: &sig, mode: ActionMode::Argmax };
                let rec = rollout(&ctl, map, &case.plan, &case.ctg, t_max, self.cfg.noise, &mut rng, synth.cfg.rays)?;
                return Ok(Run { record: rec, signature: Some(sig) });
            }
        };
        Ok(Run { record, signature: None })
    }

    fn evaluate(&self, cases: &[EvalCase]) -> Result<MethodResults, HarnessError> {
        let mut out = MethodResults::default();
        for (name, method) in method_list(self.cfg, self.policies) {
            let mut results = Vec::with_capacity(cases.len());
            for case in cases {
                let r = self.run(method, case)?.record;
                results.push(to_result(&name, case.index, &r));
            }
            log::info!("{name}: {:.1}% success", 100.0 * results.iter().filter(|r| r.success).count() as f64 / cases.len() as f64);
            out.push(&name, results);
        }
        Ok(out)
    }
}

fn to_result(method: &str, episode: usize, r: &RolloutRecord) -> EpisodeResult {
    let failed = r.steps.iter().filter(|s| s.forward_failed).count();
    EpisodeResult::new(method, episode, r.initial_distance, r.final_distance, failed)
}

/// Policy evaluation on oracle plans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub results: MethodResults,
}

impl PolicyReport {
    /// Replaying the plan without noise always arrives, replaying it under
    /// noise does worse, and nobody starts within the success radius.
    pub fn sanity(&self, noise: NoiseModel) -> Result<(), String> {
        let get = |m: &str| self.results.success(m).ok_or(format!("{m} row is missing"));
        let (clean, open, initial) = (get("open_loop_no_noise")?, get("open_loop")?, get("initial")?);
        if clean != 100.0 {
            return Err(format!("noiseless plan replay succeeded in {clean:.1}% of episodes, expected 100%"));
        }
        if noise.p_fail > 0.0 && open >= clean {
            return Err(format!("open loop under noise ({open:.1}%) is not below noiseless replay"));
        }
        if initial != 0.0 {
            return Err(format!("{initial:.1}% of episodes start inside the success radius"));
        }
        Ok(())
    }
}

/// Open loop, the noiseless replay and every policy under each memory
/// setting on `cfg.episodes` test episodes, with the sanity chain enforced.
pub fn run_policy_eval(cfg: &ExperimentConfig, maps: &[GridMap], policies: &[PolicyParams]) -> Result<PolicyReport, HarnessError> {
    let cases = eval_cases(cfg.seed, maps, cfg.d_min, cfg.d_max, cfg.episodes)?;
    let report = PolicyReport { results: Runner::new(cfg, maps, policies).evaluate(&cases)? };
    report.sanity(cfg.noise).map_err(HarnessError::Sanity)?;
    Ok(report)
}

/// Far goals with a longer horizon, every memory setting replaced by the full path.
pub fn long_histogram_eval(cfg: &ExperimentConfig, maps: &[GridMap], policies: &[PolicyParams]) -> Result<MethodResults, HarnessError> {
    let h = &cfg.histogram;
    let long = ExperimentConfig { t_max: h.long_t_max, memory: vec![ViewMode::FromPath(None)], ..cfg.clone() };
    let cases = eval_cases(cfg.seed ^ 0x6c6f_6e67, maps, h.long_d_min, h.long_d_max, h.long_episodes)?;
    Runner::new(&long, maps, policies).evaluate(&cases)
}

/// One episode of one method with its full trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayOutput {
    pub method: String,
    pub episode: Episode,
    pub plan: Vec<crate::gridworld::Action>,
    pub record: RolloutRecord,
    pub signature: Option<Signature>,
}

pub fn replay_episode(
    cfg: &ExperimentConfig,
    maps: &[GridMap],
    policies: &[PolicyParams],
    method: &str,
    index: usize,
) -> Result<ReplayOutput, HarnessError> {
    let methods = method_list(cfg, policies);
    let Some(&(_, m)) = methods.iter().find(|(n, _)| n == method) else {
        let names: Vec<&str> = methods.iter().map(|(n, _)| n.as_str()).collect();
        return Err(HarnessError::Config(format!("unknown method {method:?}; expected one of {}", names.join(", "))));
    };
    if index >= cfg.episodes {
        return Err(HarnessError::Config(format!("episode {index} is out of range (0..{})", cfg.episodes)));
    }
    let case = eval_cases(cfg.seed, maps, cfg.d_min, cfg.d_max, index + 1)?.pop().expect("one case");
    let run = Runner::new(cfg, maps, policies).run(m, &case)?;
    Ok(ReplayOutput { method: method.to_string(), episode: case.episode, plan: case.plan.actions, record: run.record, signature: run.signature })
}

/// Full navigation from views alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullSystemReport {
    pub results: MethodResults,
    /// Fraction of learned plans that reach the goal cell when replayed without noise.
    pub planning_success: f64,
}

/// The mapper fuses environment views, the learned planner plans on the
/// fused map, and the policy follows a signature of that plan synthesized
/// from the same views.
pub fn run_full_system(
    cfg: &ExperimentConfig,
    maps: &[GridMap],
    mapper: &MapperParams,
    vin: &VinParams,
    policy: &PolicyParams,
) -> Result<FullSystemReport, HarnessError> {
    let cases = eval_cases(cfg.seed, maps, cfg.d_min, cfg.d_max, cfg.episodes)?;
    let synth = policy.synth();
    let mut rows: Vec<(&str, Vec<EpisodeResult>)> =
        ["oracle_open_loop_no_noise", "full_open_loop_no_noise", "full_open_loop", "full_closed_loop"].map(|m| (m, Vec::new())).into();
    let mut planned = 0usize;
    for case in &cases {
        let map = &maps[case.map];
        let i = case.index;
        let views = case_views(cfg.seed, case, map, ViewMode::FromEnv(cfg.full_system_views), mapper.cfg.rays)?;
        let fused = build_map(mapper, &views, Grid::full(map))?;
        let plan = vin_plan(vin, &fused, case.episode.goal, case.episode.start)?;
        let clean = NoiseModel::noiseless();
        let noise_rng = || stream_rng(cfg.seed, NOISE_SALT, i);
        let oracle = open_loop_rollout(&case.plan, map, &case.ctg, cfg.t_max, clean, &mut noise_rng())?;
        let replay = open_loop_rollout(&plan, map, &case.ctg, cfg.t_max.max(plan.len()), clean, &mut noise_rng())?;
        planned += (replay.final_pose.cell() == case.episode.goal) as usize;
        let clean_t = open_loop_rollout(&plan, map, &case.ctg, cfg.t_max, clean, &mut noise_rng())?;
        let open = open_loop_rollout(&plan, map, &case.ctg, cfg.t_max, cfg.noise, &mut noise_rng())?;
        let closed = if plan.actions.is_empty() {
            // Nothing to follow: the agent stays put.
            open_loop_rollout(&plan, map, &case.ctg, cfg.t_max, cfg.noise, &mut noise_rng())?
        } else {
            let feats = if views.is_empty() { FeatureSource::None } else { policy.feature_source(FeatureSource::Synth) };
            let sig = build_signature(&plan, &views, &synth, map, feats)?;
            let ctl = Controller::Learned { params: policy, signature: &sig, mode: ActionMode::Argmax };
            rollout(&ctl, map, &plan, &case.ctg, cfg.t_max, cfg.noise, &mut noise_rng(), synth.cfg.rays)?
        };
        for (row, rec) in rows.iter_mut().zip([&oracle, &clean_t, &open, &closed]) {
            row.1.push(to_result(row.0, i, rec));
        }
    }
    let mut results = MethodResults::default();
    for (m, r) in rows {
        results.push(m, r);
    }
    let (c, o) = (results.success("full_closed_loop").unwrap_or(0.0), results.success("full_open_loop").unwrap_or(0.0));
    if c < o {
        log::warn!("closed loop ({c:.1}%) is below open loop ({o:.1}%)");
    }
    Ok(FullSystemReport { results, planning_success: planned as f64 / cases.len().max(1) as f64 })
}
