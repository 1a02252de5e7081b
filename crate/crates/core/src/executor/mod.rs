//! Path signatures and closed-loop plan execution: the pointer-attention
//! recurrent policy, its baselines, rollouts under actuation noise and DAgger.
//!
//! Signature entry `j` (1-based) pairs planned action `a_j` with the pose
//! `ρ_{j-1}` it is taken from, expressed relative to the plan start, and the
//! feature expected there.

mod dagger;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{dense_layer, gru_cell, softmax_in_place, AutogradError, Graph, ParamBundle, Tensor, Var};
use crate::gridworld::{raycast_observe, step, Action, GridMap, NoiseModel, Observation, Pose, RaycastConfig, ViewSet};
use crate::planner::{expert_action_from, CostToGo, PathPlan, PlannerError};
use crate::synthesizer::{encode_observations, relative_pose, synthesize_many, RelativePose, SynthConfig, SynthError, SynthParams};

pub use dagger::{collect_trajectory, dagger_train, DaggerConfig, DaggerLog, Trajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecError {
    #[error("plan has no actions")]
    EmptyPlan,
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Grid(#[from] crate::gridworld::GridError),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
}

/// Where signature features come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Synth,
    Actual,
    /// `(1 - α) · actual + α · synth`.
    Blend(f64),
    None,
}

/// Action one-hot, offset `(dx, dy) / 10`, relative heading one-hot.
pub const META_DIM: usize = 10;
const OFFSET_SCALE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureEntry {
    pub action: Action,
    /// Pose the action is taken from, relative to the plan start.
    pub offset: RelativePose,
    pub feature: Vec<f64>,
}

impl SignatureEntry {
    pub fn meta(&self) -> [f64; META_DIM] {
        let mut m = [0.0; META_DIM];
        m[self.action.code()] = 1.0;
        m[4] = self.offset.dx as f64 / OFFSET_SCALE;
        m[5] = self.offset.dy as f64 / OFFSET_SCALE;
        m[6 + self.offset.dh as usize] = 1.0;
        m
    }
}

/// One entry per plan step plus a terminal `(Stay, ρ_J)` entry used by the
/// nearest-neighbour baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub entries: Vec<SignatureEntry>,
    pub terminal: SignatureEntry,
}

impl Signature {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries followed by the terminal entry.
    pub fn all(&self) -> impl Iterator<Item = &SignatureEntry> {
        self.entries.iter().chain(std::iter::once(&self.terminal))
    }

    /// `[J + 1, META_DIM]` metadata rows.
    pub fn meta_tensor(&self) -> Tensor {
        let data = self.all().flat_map(|e| e.meta()).collect();
        Tensor::new(vec![self.len() + 1, META_DIM], data).expect("meta shape")
    }

    /// `[J + 1, F]` feature rows.
    pub fn feature_tensor(&self) -> Tensor {
        let f = self.terminal.feature.len();
        let data = self.all().flat_map(|e| e.feature.iter().copied()).collect();
        Tensor::new(vec![self.len() + 1, f], data).expect("feature shape")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("signature serializes")
    }
}

/// Poses whose features a signature needs: `ρ_0..ρ_J`.
pub fn signature_poses(plan: &PathPlan) -> &[Pose] {
    &plan.poses
}

/// Features at `poses` from the given source.
pub fn signature_features(
    synth: &SynthParams,
    map: &GridMap,
    views: &ViewSet,
    poses: &[Pose],
    source: FeatureSource,
) -> Result<Vec<Vec<f64>>, ExecError> {
    let actual = || -> Result<Vec<Vec<f64>>, ExecError> {
        let ray = RaycastConfig { rays: synth.cfg.rays, ..RaycastConfig::default() };
        let obs: Vec<Observation> = poses.iter().map(|&p| raycast_observe(map, p, &ray)).collect();
        Ok(encode_observations(synth, &obs.iter().collect::<Vec<_>>())?)
    };
    Ok(match source {
        FeatureSource::Synth => synthesize_many(synth, views, poses)?,
        FeatureSource::Actual => actual()?,
        FeatureSource::Blend(alpha) => {
            let s = synthesize_many(synth, views, poses)?;
            let a = actual()?;
            a.iter()
                .zip(&s)
                .map(|(a, s)| a.iter().zip(s).map(|(a, s)| (1.0 - alpha) * a + alpha * s).collect())
                .collect()
        }
        FeatureSource::None => vec![vec![0.0; synth.cfg.feature]; poses.len()],
    })
}

/// Path signature of `plan` with features from `source`.
pub fn build_signature(
    plan: &PathPlan,
    views: &ViewSet,
    synth: &SynthParams,
    map: &GridMap,
    source: FeatureSource,
) -> Result<Signature, ExecError> {
    if plan.actions.is_empty() {
        return Err(ExecError::EmptyPlan);
    }
    let feats = signature_features(synth, map, views, signature_poses(plan), source)?;
    Ok(assemble_signature(plan, feats))
}

/// Signature from precomputed features at `ρ_0..ρ_J`.
pub fn assemble_signature(plan: &PathPlan, mut feats: Vec<Vec<f64>>) -> Signature {
    let start = plan.poses[0];
    let terminal_feature = feats.pop().expect("feature per pose");
    let entries = plan
        .actions
        .iter()
        .zip(&plan.poses)
        .zip(feats)
        .map(|((&action, &pose), feature)| SignatureEntry { action, offset: relative_pose(pose, start), feature })
        .collect();
    let terminal = SignatureEntry { action: Action::Stay, offset: relative_pose(*plan.poses.last().unwrap(), start), feature: terminal_feature };
    Signature { entries, terminal }
}

/// Attention of pointer `eta` over entries `1..=j`: `e^{-|η - k|}`, divided by
/// its sum unless `literal`.
pub fn attention_weights(j: usize, eta: f64, literal: bool) -> Vec<f64> {
    let mut w: Vec<f64> = (1..=j).map(|k| -(eta - k as f64).abs()).collect();
    if literal {
        w.iter_mut().for_each(|v| *v = v.exp());
    } else {
        softmax_in_place(&mut w);
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Pointer attention over the signature with synthesized features.
    Ours,
    /// Same network, signature features zeroed.
    ActionOnly,
    /// Signature summarized by a GRU pass; no pointer.
    Gru,
    /// Learned-metric similarity between the current view and signature features.
    NnMatch,
}

impl PolicyKind {
    pub fn uses_features(self) -> bool {
        !matches!(self, PolicyKind::ActionOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Ours => "ours",
            PolicyKind::ActionOnly => "action_only",
            PolicyKind::Gru => "gru",
            PolicyKind::NnMatch => "nn_match",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub obs_hidden: usize,
    pub obs_out: usize,
    pub embed: usize,
    pub hidden: usize,
    /// Initial pointer-head bias, so the pointer starts near one entry per step.
    pub pointer_bias: f64,
    /// Unnormalized attention kernel.
    pub literal_attention: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { obs_hidden: 128, obs_out: 64, embed: 64, hidden: 64, pointer_bias: 2.5, literal_attention: false }
    }
}

/// Policy weights (`pol.*`, `sig.*`, `nn.*`) together with the policy's own
/// copy of the synthesizer (`synth.*`).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub kind: PolicyKind,
    pub cfg: PolicyConfig,
    pub synth_cfg: SynthConfig,
    pub bundle: ParamBundle,
}

impl PolicyParams {
    pub fn init(kind: PolicyKind, seed: u64, cfg: PolicyConfig, synth: &SynthParams) -> Self {
        let mut b = ParamBundle::new(seed);
        let f = synth.cfg.feature;
        let obs_in = policy_input_len(&synth.cfg);
        b.init_dense("pol.obs1", obs_in, cfg.obs_hidden);
        b.init_dense("pol.obs2", cfg.obs_hidden, cfg.obs_out);
        match kind {
            PolicyKind::Ours | PolicyKind::ActionOnly | PolicyKind::Gru => {
                b.init_uniform("pol.emb.m.w", &[cfg.embed, META_DIM], (6.0 / (META_DIM + cfg.embed) as f64).sqrt());
                b.init_uniform("pol.emb.f.w", &[cfg.embed, f], (6.0 / (f + cfg.embed) as f64).sqrt());
                b.init_const("pol.emb.b", &[cfg.embed], 0.0);
                let ctx = if kind == PolicyKind::Gru { cfg.hidden } else { cfg.embed };
                if kind == PolicyKind::Gru {
                    b.init_gru("sig.gru", cfg.embed, cfg.hidden);
                }
                b.init_gru("pol.gru", ctx + cfg.obs_out, cfg.hidden);
                let head_in = cfg.hidden + ctx + cfg.obs_out;
                b.init_dense("pol.act", head_in, 4);
                if kind != PolicyKind::Gru {
                    b.init_dense("pol.ptr", head_in, 1);
                    b.init_const("pol.ptr.b", &[1], cfg.pointer_bias);
                }
            }
            PolicyKind::NnMatch => {
                let mut eye = Tensor::zeros(&[f, f]);
                for i in 0..f {
                    eye.data_mut()[i * f + i] = 1.0;
                }
                b.insert("nn.a.w", eye);
            }
        }
        for (k, v) in synth.bundle.iter() {
            b.insert(k, v.clone());
        }
        PolicyParams { kind, cfg, synth_cfg: synth.cfg, bundle: b }
    }

    /// The synthesizer carried by this policy.
    pub fn synth(&self) -> SynthParams {
        let mut b = ParamBundle::new(self.bundle.seed);
        for (k, v) in self.bundle.iter().filter(|(k, _)| k.starts_with("synth.")) {
            b.insert(k, v.clone());
        }
        SynthParams { cfg: self.synth_cfg, bundle: b }
    }

    pub fn feature_source(&self, synth_source: FeatureSource) -> FeatureSource {
        if self.kind.uses_features() {
            synth_source
        } else {
            FeatureSource::None
        }
    }
}

/// Signature-derived graph values reused across steps.
pub enum Prepared {
    Attend { emb: Var, positions: Var, len: usize },
    Summary { s: Var },
    Match { keys: Var, actions: Var },
}

/// Embeds the signature: `meta: [J+1, META_DIM]`, `feats: [J+1, F]`.
pub fn prepare_graph(g: &mut Graph, p: &PolicyParams, meta: &Tensor, feats: Var) -> Result<Prepared, AutogradError> {
    let rows = meta.shape()[0];
    let b = &p.bundle;
    match p.kind {
        PolicyKind::NnMatch => {
            let a = g.param(b, "nn.a.w")?;
            let keys = g.dense(feats, a, None)?;
            let mut onehot = Vec::with_capacity(rows * 4);
            for r in 0..rows {
                onehot.extend_from_slice(&meta.data()[r * META_DIM..r * META_DIM + 4]);
            }
            let actions = g.constant(Tensor::new(vec![rows, 4], onehot)?);
            Ok(Prepared::Match { keys, actions })
        }
        kind => {
            // The terminal entry is attended too, so running past the plan reads Stay.
            let m = g.constant(meta.clone());
            let f = feats;
            let mw = g.param(b, "pol.emb.m.w")?;
            let fw = g.param(b, "pol.emb.f.w")?;
            let eb = g.param(b, "pol.emb.b")?;
            let em = g.dense(m, mw, Some(eb))?;
            let ef = g.dense(f, fw, None)?;
            let e = g.add(em, ef)?;
            let emb = g.relu(e);
            if kind == PolicyKind::Gru {
                // Last to first, so the entries needed first are freshest in the summary.
                let mut h = g.constant(Tensor::zeros(&[p.cfg.hidden]));
                for r in (0..rows).rev() {
                    let x = g.row(emb, r)?;
                    h = gru_cell(g, b, "sig.gru", x, h)?;
                }
                Ok(Prepared::Summary { s: h })
            } else {
                let positions = g.constant(Tensor::vector((1..=rows).map(|k| k as f64).collect()));
                Ok(Prepared::Attend { emb, positions, len: rows })
            }
        }
    }
}

/// Recurrent state `ζ` and pointer `η` as graph values.
#[derive(Debug, Clone, Copy)]
pub struct StepState {
    pub h: Var,
    pub eta: Var,
}

/// The GRU baseline starts from the signature summary, encoder-decoder style.
pub fn initial_state(g: &mut Graph, p: &PolicyParams, prep: &Prepared) -> StepState {
    let h = match prep {
        Prepared::Summary { s } => *s,
        _ => g.constant(Tensor::zeros(&[p.cfg.hidden])),
    };
    StepState { h, eta: g.constant(Tensor::vector(vec![1.0])) }
}

/// Attended signature read-out `ξ` at pointer `eta`.
pub fn attend_graph(g: &mut Graph, emb: Var, positions: Var, len: usize, eta: Var, literal: bool) -> Result<Var, AutogradError> {
    let rep = g.gather(eta, &vec![0; len])?;
    let d = g.sub(positions, rep)?;
    let d = g.abs(d);
    let neg = g.neg(d);
    let w = if literal { g.exp(neg) } else { g.softmax(neg)? };
    g.weighted_sum(w, emb)
}

/// One policy step on observation input `obs: [R*9 + F]` (raw observation
/// followed by its encoder feature). Returns the next state and action logits.
pub fn step_graph(
    g: &mut Graph,
    p: &PolicyParams,
    prep: &Prepared,
    state: StepState,
    obs: Var,
) -> Result<(StepState, Var), AutogradError> {
    let b = &p.bundle;
    match prep {
        Prepared::Match { keys, actions } => {
            let f = p.synth_cfg.feature;
            let feat = g.slice(obs, p.synth_cfg.obs_len(), f)?;
            let a = g.param(b, "nn.a.w")?;
            let q = g.dense(feat, a, None)?;
            let q = g.reshape(q, &[1, f])?;
            let sim = g.dense(*keys, q, None)?;
            let n = g.shape(sim)[0];
            let sim = g.reshape(sim, &[n])?;
            let w = g.softmax(sim)?;
            let mix = g.weighted_sum(w, *actions)?;
            let mix = g.add_scalar(mix, 1e-6);
            Ok((state, g.ln(mix)))
        }
        Prepared::Attend { emb, positions, len } => {
            let o = obs_encoder(g, b, obs)?;
            let xi = attend_graph(g, *emb, *positions, *len, state.eta, p.cfg.literal_attention)?;
            let x = g.concat(&[xi, o])?;
            let h = gru_cell(g, b, "pol.gru", x, state.h)?;
            let z = g.concat(&[h, xi, o])?;
            let logits = dense_layer(g, b, "pol.act", z)?;
            let pl = dense_layer(g, b, "pol.ptr", z)?;
            let inc = g.sigmoid(pl);
            let eta = g.add(state.eta, inc)?;
            Ok((StepState { h, eta }, logits))
        }
        Prepared::Summary { s } => {
            let o = obs_encoder(g, b, obs)?;
            let x = g.concat(&[*s, o])?;
            let h = gru_cell(g, b, "pol.gru", x, state.h)?;
            let z = g.concat(&[h, *s, o])?;
            let logits = dense_layer(g, b, "pol.act", z)?;
            Ok((StepState { h, eta: state.eta }, logits))
        }
    }
}

fn obs_encoder(g: &mut Graph, b: &ParamBundle, obs: Var) -> Result<Var, AutogradError> {
    let h = dense_layer(g, b, "pol.obs1", obs)?;
    let h = g.relu(h);
    let h = dense_layer(g, b, "pol.obs2", h)?;
    Ok(g.relu(h))
}

/// Length of a policy input for the given synthesizer shape.
pub fn policy_input_len(cfg: &SynthConfig) -> usize {
    cfg.obs_len() + 2 * cfg.feature
}

/// Builds policy inputs along a trajectory: raw observation, its encoder
/// feature, and the change of that feature since the previous step (zero at
/// the first step).
#[derive(Debug, Clone)]
pub struct InputBuilder {
    synth: SynthParams,
    prev: Option<Vec<f64>>,
}

impl InputBuilder {
    pub fn new(synth: SynthParams) -> Self {
        InputBuilder { synth, prev: None }
    }

    pub fn next(&mut self, obs: &Observation) -> Result<Vec<f64>, ExecError> {
        let f = encode_observations(&self.synth, &[obs])?.remove(0);
        let mut v = obs.flatten();
        v.extend_from_slice(&f);
        match &self.prev {
            Some(p) => v.extend(f.iter().zip(p).map(|(a, b)| (a - b).abs())),
            None => v.extend(std::iter::repeat(0.0).take(f.len())),
        }
        self.prev = Some(f);
        Ok(v)
    }
}

/// Numeric policy state.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyState {
    pub h: Vec<f64>,
    pub eta: f64,
    pub t: usize,
}

/// Stateful inference wrapper around the step graph.
pub struct PolicyRunner<'a> {
    params: &'a PolicyParams,
    inputs: InputBuilder,
    meta: Tensor,
    feats: Tensor,
    pub state: PolicyState,
}

impl<'a> PolicyRunner<'a> {
    pub fn new(params: &'a PolicyParams, sig: &Signature) -> Self {
        PolicyRunner {
            params,
            inputs: InputBuilder::new(params.synth()),
            meta: sig.meta_tensor(),
            feats: sig.feature_tensor(),
            state: PolicyState { h: vec![0.0; params.cfg.hidden], eta: 1.0, t: 0 },
        }
    }

    /// Action probabilities for `obs`, advancing the state.
    pub fn step(&mut self, obs: &Observation) -> Result<[f64; 4], ExecError> {
        let input = self.inputs.next(obs)?;
        let mut g = Graph::new();
        let feats = g.constant(self.feats.clone());
        let prep = prepare_graph(&mut g, self.params, &self.meta, feats)?;
        let state = if self.state.t == 0 {
            initial_state(&mut g, self.params, &prep)
        } else {
            let h = g.constant(Tensor::vector(self.state.h.clone()));
            StepState { h, eta: g.constant(Tensor::vector(vec![self.state.eta])) }
        };
        let x = g.constant(Tensor::vector(input));
        let (next, logits) = step_graph(&mut g, self.params, &prep, state, x)?;
        let probs = g.softmax(logits)?;
        self.state = PolicyState { h: g.data(next.h).to_vec(), eta: g.data(next.eta)[0], t: self.state.t + 1 };
        let p = g.data(probs);
        Ok([p[0], p[1], p[2], p[3]])
    }
}

/// How a learned policy turns probabilities into actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    Argmax,
    Sample,
}

pub fn choose_action<R: Rng + ?Sized>(probs: &[f64; 4], mode: ActionMode, rng: &mut R) -> Action {
    let code = match mode {
        ActionMode::Argmax => (0..4).fold(0, |b, i| if probs[i] > probs[b] { i } else { b }),
        ActionMode::Sample => {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = 3;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        }
    };
    Action::from_code(code).expect("four actions")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub pose: Pose,
    pub obs_hash: u64,
    pub action: Action,
    pub forward_failed: bool,
    pub collided: bool,
    pub eta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub steps: Vec<StepRecord>,
    pub initial_distance: u32,
    pub final_distance: u32,
    pub final_pose: Pose,
}

impl RolloutRecord {
    pub fn to_jsonl_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Who picks the actions.
pub enum Controller<'a> {
    /// Replays the plan, then stays.
    OpenLoop,
    /// Optimal action from the true current pose.
    Expert,
    Learned { params: &'a PolicyParams, signature: &'a Signature, mode: ActionMode },
}

/// Closed-loop execution for `t_max` steps from the plan start. Observations
/// come from `observe`; only learned controllers read them.
#[allow(clippy::too_many_arguments)]
pub fn rollout_with<R: Rng + ?Sized>(
    controller: &Controller,
    map: &GridMap,
    plan: &PathPlan,
    ctg: &CostToGo,
    t_max: usize,
    noise: NoiseModel,
    rng: &mut R,
    observe: &dyn Fn(&GridMap, Pose) -> Observation,
) -> Result<RolloutRecord, ExecError> {
    let mut pose = plan.poses[0];
    let mut runner = match controller {
        Controller::Learned { params, signature, .. } => Some(PolicyRunner::new(params, signature)),
        _ => None,
    };
    let mut steps = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let obs = observe(map, pose);
        let eta = runner.as_ref().map(|r| r.state.eta);
        let action = match controller {
            Controller::OpenLoop => plan.actions.get(t).copied().unwrap_or(Action::Stay),
            Controller::Expert => expert_action_from(ctg, map, pose)?,
            Controller::Learned { mode, .. } => {
                let probs = runner.as_mut().expect("learned runner").step(&obs)?;
                choose_action(&probs, *mode, rng)
            }
        };
        let out = step(map, pose, action, noise, rng);
        steps.push(StepRecord { pose, obs_hash: obs.fingerprint(), action, forward_failed: out.forward_failed, collided: out.collided, eta });
        pose = out.pose;
    }
    Ok(RolloutRecord { steps, initial_distance: ctg.get(plan.poses[0]), final_distance: ctg.get(pose), final_pose: pose })
}

pub fn rollout<R: Rng + ?Sized>(
    controller: &Controller,
    map: &GridMap,
    plan: &PathPlan,
    ctg: &CostToGo,
    t_max: usize,
    noise: NoiseModel,
    rng: &mut R,
    rays: usize,
) -> Result<RolloutRecord, ExecError> {
    let ray = RaycastConfig { rays, ..RaycastConfig::default() };
    rollout_with(controller, map, plan, ctg, t_max, noise, rng, &|m, p| raycast_observe(m, p, &ray))
}

/// Replays the plan verbatim for `t_max` steps.
pub fn open_loop_rollout<R: Rng + ?Sized>(
    plan: &PathPlan,
    map: &GridMap,
    ctg: &CostToGo,
    t_max: usize,
    noise: NoiseModel,
    rng: &mut R,
) -> Result<RolloutRecord, ExecError> {
    rollout(&Controller::OpenLoop, map, plan, ctg, t_max, noise, rng, RaycastConfig::default().rays)
}
