use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{encode_graph, encode_views_graph, obs_tensor, pair_graph, synth_graph, SynthConfig, SynthError, SynthParams};
use crate::autograd::{AdamState, Graph, LrSchedule};
use crate::gridworld::{raycast_observe, sample_view_set, GridMap, Observation, Pose, RaycastConfig, ViewMode, ViewSet};
use crate::mapper::EVAL_POOL;
use crate::metrics::average_precision;

/// Minimum Chebyshev distance for a same-heading negative.
pub const NEGATIVE_RADIUS: usize = 3;

/// A different heading, or at least [`NEGATIVE_RADIUS`] cells apart.
pub fn is_negative_pair(a: Pose, b: Pose) -> bool {
    a.d != b.d || a.x.abs_diff(b.x).max(a.y.abs_diff(b.y)) >= NEGATIVE_RADIUS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthTrainConfig {
    pub seed: u64,
    pub iters: usize,
    pub lr: f64,
    /// Reference views per sample, cycled.
    pub refs: Vec<usize>,
    /// Pairs per step, half positive.
    pub batch: usize,
    pub clip: f64,
    pub model: SynthConfig,
}

impl Default for SynthTrainConfig {
    fn default() -> Self {
        SynthTrainConfig { seed: 0, iters: 3000, lr: 3e-3, refs: vec![5, 10, 20, 40], batch: 32, clip: 5.0, model: SynthConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTrainLog {
    pub losses: Vec<f64>,
}

fn random_free_pose<R: Rng>(free: &[(usize, usize)], rng: &mut R) -> Pose {
    let (x, y) = free[rng.gen_range(0..free.len())];
    Pose::new(x, y, rng.gen_range(0..4))
}

/// `count` target/probe pairs, the first half positive (identical poses), the
/// rest negatives drawn uniformly among poses satisfying [`is_negative_pair`].
fn sample_pairs<R: Rng>(map: &GridMap, count: usize, rng: &mut R) -> Vec<(Pose, Pose, bool)> {
    let free = map.free_cells();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let t = random_free_pose(&free, rng);
        if i < count / 2 {
            out.push((t, t, true));
        } else {
            let probe = loop {
                let p = random_free_pose(&free, rng);
                if is_negative_pair(t, p) {
                    break p;
                }
            };
            out.push((t, probe, false));
        }
    }
    out
}

/// Pair logits for synthesized features at the targets against actual
/// features at the probes.
fn pair_logits(
    g: &mut Graph,
    params: &SynthParams,
    views: &ViewSet,
    pairs: &[(Pose, Pose, bool)],
    probe_obs: &[Observation],
) -> Result<crate::autograd::Var, SynthError> {
    let (enc, poses) = encode_views_graph(g, &params.bundle, views)?;
    let targets: Vec<Pose> = pairs.iter().map(|p| p.0).collect();
    let (fhat, _) = synth_graph(g, &params.bundle, enc, &poses, &targets)?;
    let refs: Vec<&Observation> = probe_obs.iter().collect();
    let x = g.constant(obs_tensor(&refs)?);
    let f = encode_graph(g, &params.bundle, x)?;
    Ok(pair_graph(g, &params.bundle, fhat, f)?)
}

/// Discriminative training of encoder, fusion net and pair classifier with
/// binary cross-entropy on balanced pairs.
pub fn train_synth(envs: &[GridMap], cfg: &SynthTrainConfig) -> Result<(SynthParams, SynthTrainLog), SynthError> {
    assert!(!envs.is_empty(), "train_synth needs at least one environment");
    let mut params = SynthParams::init(cfg.seed, cfg.model);
    let mut opt = AdamState::new();
    let sched = LrSchedule::thirds(cfg.lr, cfg.iters);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7379_6e74);
    let ray = RaycastConfig { rays: cfg.model.rays, ..RaycastConfig::default() };
    let mut losses = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let map = &envs[rng.gen_range(0..envs.len())];
        let n = cfg.refs[it % cfg.refs.len()];
        let views = sample_view_set(map, ViewMode::FromEnv(n), &mut rng, None, &ray)?;
        let pairs = sample_pairs(map, cfg.batch, &mut rng);
        let probe_obs: Vec<Observation> = pairs.iter().map(|p| raycast_observe(map, p.1, &ray)).collect();
        let labels: Vec<f64> = pairs.iter().map(|p| p.2 as u8 as f64).collect();
        let mut g = Graph::new();
        let logits = pair_logits(&mut g, &params, &views, &pairs, &probe_obs)?;
        let loss = g.bce_with_logits(logits, &labels)?;
        let lv = g.item(loss);
        if !lv.is_finite() {
            return Err(SynthError::Diverged { step: it, loss: lv });
        }
        g.backward(loss)?;
        let mut grads = g.param_grads();
        grads.clip_global_norm(cfg.clip);
        opt.step(&mut params.bundle, &grads, &sched);
        losses.push(lv);
        if it % 100 == 0 {
            log::info!("synth step {it}: loss {lv:.4}");
        }
    }
    Ok((params, SynthTrainLog { losses }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationEval {
    pub ap: f64,
    pub positive_rate: f64,
    pub pairs: usize,
}

/// Pairing AP on `envs` with `n_refs` reference views each. References are a
/// prefix of a fixed pool and the pairs do not depend on `n_refs`.
pub fn eval_localization_ap(
    params: &SynthParams,
    envs: &[GridMap],
    n_refs: usize,
    pairs_per_env: usize,
    seed: u64,
) -> Result<LocalizationEval, SynthError> {
    let ray = RaycastConfig { rays: params.cfg.rays, ..RaycastConfig::default() };
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, map) in envs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut views = sample_view_set(map, ViewMode::FromEnv(n_refs.max(EVAL_POOL)), &mut rng, None, &ray)?;
        views.views.truncate(n_refs);
        let pairs = sample_pairs(map, pairs_per_env, &mut rng);
        let probe_obs: Vec<Observation> = pairs.iter().map(|p| raycast_observe(map, p.1, &ray)).collect();
        let mut g = Graph::new();
        let logits = pair_logits(&mut g, params, &views, &pairs, &probe_obs)?;
        scores.extend_from_slice(g.data(logits));
        labels.extend(pairs.iter().map(|p| p.2));
    }
    Ok(LocalizationEval {
        ap: average_precision(&scores, &labels),
        positive_rate: crate::metrics::positive_rate(&labels),
        pairs: labels.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreCell {
    pub x: usize,
    pub y: usize,
    pub heading: u8,
    pub score: f64,
}

/// Pairing probability of the synthesized feature at every free pose against
/// the actual feature there.
pub fn score_grid(params: &SynthParams, map: &GridMap, views: &ViewSet) -> Result<Vec<ScoreCell>, SynthError> {
    let ray = RaycastConfig { rays: params.cfg.rays, ..RaycastConfig::default() };
    let poses: Vec<Pose> = map.free_cells().into_iter().flat_map(|(x, y)| (0..4).map(move |d| Pose::new(x, y, d))).collect();
    let pairs: Vec<(Pose, Pose, bool)> = poses.iter().map(|&p| (p, p, true)).collect();
    let probe_obs: Vec<Observation> = poses.iter().map(|&p| raycast_observe(map, p, &ray)).collect();
    let mut g = Graph::new();
    let logits = pair_logits(&mut g, params, views, &pairs, &probe_obs)?;
    let probs = g.sigmoid(logits);
    Ok(poses.iter().zip(g.data(probs)).map(|(p, &score)| ScoreCell { x: p.x, y: p.y, heading: p.d, score }).collect())
}

/// CSV with header `x,y,heading,score`.
pub fn write_score_grid_csv(path: &Path, cells: &[ScoreCell]) -> Result<(), SynthError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "x,y,heading,score")?;
    for c in cells {
        writeln!(f, "{},{},{},{}", c.x, c.y, c.heading, c.score)?;
    }
    f.flush()?;
    Ok(())
}
