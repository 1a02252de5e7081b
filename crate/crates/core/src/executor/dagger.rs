use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    assemble_signature, choose_action, initial_state, InputBuilder, prepare_graph, signature_features, step_graph, ActionMode, ExecError,
    FeatureSource, PolicyConfig, PolicyKind, PolicyParams, PolicyRunner, Signature,
};
use crate::autograd::{AdamState, Graph, LrSchedule, Tensor, Var};
use crate::gridworld::{
    raycast_observe, sample_episode, sample_view_set, step, GridMap, NoiseModel, Observation, Pose, RaycastConfig, ViewMode, ViewSet,
};
use crate::planner::{expert_action_from, oracle_cost_to_go, oracle_plan_from, PathPlan};
use crate::synthesizer::{encode_observations, synth_graph, SynthParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DaggerConfig {
    pub seed: u64,
    pub iters: usize,
    /// Gradient steps between data-collection rounds.
    pub round_steps: usize,
    pub rollouts_per_round: usize,
    /// Leading fraction of `iters` whose rounds are rolled out by the expert
    /// instead of the policy.
    pub expert_fraction: f64,
    /// Trajectories per gradient step.
    pub batch: usize,
    pub lr: f64,
    /// Weight of the feature-regression term.
    pub lambda: f64,
    pub t_max: usize,
    pub d_min: u32,
    pub d_max: u32,
    pub p_fail: f64,
    pub dataset_cap: usize,
    /// Per-step probability of executing the expert action in policy rounds.
    pub beta: f64,
    /// Policy rollouts stop being recorded once the agent is farther than
    /// this many cells (Chebyshev) from every plan cell.
    pub max_deviation: Option<usize>,
    /// Fraction of `iters` over which signature features move to synthesized.
    pub alpha_ramp: f64,
    pub clip: f64,
    /// Memory modes, cycled over collected trajectories.
    pub view_modes: Vec<ViewMode>,
    pub policy: PolicyConfig,
}

impl Default for DaggerConfig {
    fn default() -> Self {
        DaggerConfig {
            seed: 0,
            iters: 6000,
            round_steps: 50,
            rollouts_per_round: 24,
            expert_fraction: 0.8,
            batch: 4,
            lr: 3e-3,
            lambda: 0.1,
            t_max: 20,
            d_min: 12,
            d_max: 20,
            p_fail: 0.2,
            dataset_cap: 4000,
            alpha_ramp: 0.5,
            max_deviation: Some(1),
            beta: 0.5,
            clip: 5.0,
            view_modes: vec![ViewMode::FromPath(None), ViewMode::FromPath(Some(10)), ViewMode::FromPath(Some(5)), ViewMode::FromEnv(40)],
            policy: PolicyConfig::default(),
        }
    }
}

impl DaggerConfig {
    /// Fraction of synthesized (versus actual) signature features at step `it`.
    pub fn alpha(&self, it: usize) -> f64 {
        let ramp = (self.alpha_ramp * self.iters as f64).max(1.0);
        (it as f64 / ramp).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaggerLog {
    pub losses: Vec<f64>,
    /// Dataset size after each collection round.
    pub dataset_sizes: Vec<usize>,
    pub alphas: Vec<f64>,
}

/// One visited trajectory with expert labels, ready for teacher forcing.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub plan: PathPlan,
    /// View encodings `[N, F]` in canonical order, and their poses.
    pub view_enc: Tensor,
    pub view_poses: Vec<Pose>,
    /// Actual features at `ρ_0..ρ_J`.
    pub actual: Vec<Vec<f64>>,
    /// Policy input at each visited pose.
    pub inputs: Vec<Vec<f64>>,
    /// Expert action code at each visited pose.
    pub labels: Vec<usize>,
}

/// Encoder features of a view set in canonical order.
fn view_encodings(synth: &SynthParams, views: &ViewSet) -> Result<(Tensor, Vec<Pose>), ExecError> {
    let order = views.canonical_order();
    let obs: Vec<&Observation> = order.iter().map(|&i| &views.views[i].obs).collect();
    let rows = encode_observations(synth, &obs)?;
    let f = synth.cfg.feature;
    let t = Tensor::new(vec![rows.len(), f], rows.concat())?;
    Ok((t, order.iter().map(|&i| views.views[i].pose).collect()))
}

/// Rolls out from a sampled episode and records expert labels. With
/// `policy = None` the expert acts; otherwise the policy samples actions.
#[allow(clippy::too_many_arguments)]
pub fn collect_trajectory<R: Rng>(
    map: &GridMap,
    synth: &SynthParams,
    policy: Option<&PolicyParams>,
    mode: ViewMode,
    alpha: f64,
    cfg: &DaggerConfig,
    rng: &mut R,
) -> Result<Trajectory, ExecError> {
    let ep = sample_episode(map, cfg.d_min, cfg.d_max, rng)?;
    let ctg = oracle_cost_to_go(map, ep.goal)?;
    let plan = oracle_plan_from(&ctg, map, ep.start)?;
    let ray = RaycastConfig { rays: synth.cfg.rays, ..RaycastConfig::default() };
    let views = sample_view_set(map, mode, rng, Some(&plan.poses), &ray)?;
    let (view_enc, view_poses) = view_encodings(synth, &views)?;
    let actual = signature_features(synth, map, &views, &plan.poses, FeatureSource::Actual)?;
    let signature: Option<Signature> = match policy {
        Some(p) => {
            let src = p.feature_source(FeatureSource::Blend(alpha));
            Some(assemble_signature(&plan, signature_features(&p.synth(), map, &views, &plan.poses, src)?))
        }
        None => None,
    };
    let mut runner = match (policy, &signature) {
        (Some(p), Some(s)) => Some(PolicyRunner::new(p, s)),
        _ => None,
    };
    let noise = NoiseModel { p_fail: cfg.p_fail };
    let mut pose = plan.poses[0];
    let mut inputs = Vec::with_capacity(cfg.t_max);
    let mut labels = Vec::with_capacity(cfg.t_max);
    let mut builder = InputBuilder::new(synth.clone());
    for _ in 0..cfg.t_max {
        let obs = raycast_observe(map, pose, &ray);
        let expert = match expert_action_from(&ctg, map, pose) {
            Ok(a) => a,
            Err(e) => {
                log::warn!("dropping rest of trajectory: {e}");
                break;
            }
        };
        if let (Some(_), Some(max)) = (&runner, cfg.max_deviation) {
            let off = plan.poses.iter().map(|p| p.x.abs_diff(pose.x).max(p.y.abs_diff(pose.y))).min().unwrap_or(0);
            if off > max {
                break;
            }
        }
        let action = match runner.as_mut() {
            Some(r) => {
                let a = choose_action(&r.step(&obs)?, ActionMode::Sample, rng);
                if cfg.beta > 0.0 && rng.gen::<f64>() < cfg.beta {
                    expert
                } else {
                    a
                }
            }
            None => expert,
        };
        inputs.push(builder.next(&obs)?);
        labels.push(expert.code());
        pose = step(map, pose, action, noise, rng).pose;
    }
    Ok(Trajectory { plan, view_enc, view_poses, actual, inputs, labels })
}

/// Teacher-forced loss of one trajectory, added into `g`.
fn trajectory_loss(g: &mut Graph, p: &PolicyParams, tr: &Trajectory, alpha: f64, lambda: f64) -> Result<Var, ExecError> {
    let f = p.synth_cfg.feature;
    let rows = tr.plan.poses.len();
    let actual = Tensor::new(vec![rows, f], tr.actual.concat())?;
    let sig = assemble_signature(&tr.plan, tr.actual.clone());
    let meta = sig.meta_tensor();
    let (feats, aux) = if p.kind.uses_features() {
        let enc = g.constant(tr.view_enc.clone());
        let (fhat, _) = synth_graph(g, &p.bundle, enc, &tr.view_poses, &tr.plan.poses)?;
        let act = g.constant(actual);
        let a = g.scale(act, 1.0 - alpha);
        let s = g.scale(fhat, alpha);
        let feats = g.add(a, s)?;
        (feats, Some(g.mse(fhat, act)?))
    } else {
        (g.constant(Tensor::zeros(&[rows, f])), None)
    };
    let prep = prepare_graph(g, p, &meta, feats)?;
    let mut state = initial_state(g, p, &prep);
    let mut logits = Vec::with_capacity(tr.inputs.len());
    for x in &tr.inputs {
        let x = g.constant(Tensor::vector(x.clone()));
        let (next, l) = step_graph(g, p, &prep, state, x)?;
        state = next;
        logits.push(l);
    }
    let logits = g.stack(&logits)?;
    let ce = g.cross_entropy(logits, &tr.labels)?;
    Ok(match aux {
        Some(m) => {
            let m = g.scale(m, lambda);
            g.add(ce, m)?
        }
        None => ce,
    })
}

/// DAgger: rounds in the leading `expert_fraction` of training roll out the
/// expert, later rounds sample the current policy (mixed per step with the
/// expert at rate `beta`); every visited pose is labelled by the expert and
/// added to the aggregate. Signature features move from actual to
/// synthesized over the first `alpha_ramp` of training.
pub fn dagger_train(
    kind: PolicyKind,
    envs: &[GridMap],
    synth: &SynthParams,
    cfg: &DaggerConfig,
) -> Result<(PolicyParams, DaggerLog), ExecError> {
    assert!(!envs.is_empty(), "dagger_train needs at least one environment");
    let mut params = PolicyParams::init(kind, cfg.seed, cfg.policy, synth);
    let mut opt = AdamState::new();
    let sched = LrSchedule::thirds(cfg.lr, cfg.iters);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6461_6767);
    let mut data: std::collections::VecDeque<Trajectory> = std::collections::VecDeque::new();
    let mut log = DaggerLog { losses: Vec::with_capacity(cfg.iters), dataset_sizes: Vec::new(), alphas: Vec::with_capacity(cfg.iters) };
    let round_steps = cfg.round_steps.max(1);
    let mut collected = 0usize;
    for it in 0..cfg.iters {
        let alpha = cfg.alpha(it);
        if it % round_steps == 0 {
            for _ in 0..cfg.rollouts_per_round {
                let map = &envs[rng.gen_range(0..envs.len())];
                let mode = cfg.view_modes[collected % cfg.view_modes.len()];
                let policy = (it as f64 >= cfg.expert_fraction * cfg.iters as f64).then_some(&params);
                data.push_back(collect_trajectory(map, synth, policy, mode, alpha, cfg, &mut rng)?);
                collected += 1;
                if data.len() > cfg.dataset_cap {
                    data.pop_front();
                }
            }
            log.dataset_sizes.push(data.len());
        }
        let mut g = Graph::new();
        let mut total = None;
        for _ in 0..cfg.batch {
            let tr = &data[rng.gen_range(0..data.len())];
            let l = trajectory_loss(&mut g, &params, tr, alpha, cfg.lambda)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        let loss = g.scale(total.expect("batch is non-empty"), 1.0 / cfg.batch as f64);
        let lv = g.item(loss);
        if !lv.is_finite() {
            return Err(ExecError::Diverged { step: it, loss: lv });
        }
        g.backward(loss)?;
        let mut grads = g.param_grads();
        grads.clip_global_norm(cfg.clip);
        opt.step(&mut params.bundle, &grads, &sched);
        log.losses.push(lv);
        log.alphas.push(alpha);
        if it % 100 == 0 {
            log::info!("{} step {it}: loss {lv:.4} alpha {alpha:.2} data {}", kind.name(), data.len());
        }
    }
    Ok((params, log))
}
