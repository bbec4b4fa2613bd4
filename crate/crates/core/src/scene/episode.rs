//! Episodes: initial configurations, rollouts and expert demonstrations.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::Point;
use super::{sample_scene, scripted_expert, step, SceneState, SimConfig};
use crate::error::{Error, Result};

/// Episode seeds for evaluation live above this offset; training seeds below.
pub const EVAL_SEED_OFFSET: u64 = 1 << 40;

/// Seed of the `index`-th episode of stream `stream`.
pub fn episode_seed(stream: u64, index: u64) -> u64 {
    (stream << 20).wrapping_add(index)
}

pub fn eval_episode_seed(stream: u64, index: u64) -> u64 {
    EVAL_SEED_OFFSET + episode_seed(stream, index)
}

/// One rollout: `states[t]` is observed before `actions[t]` is applied. The
/// final state carries the action the controller emitted there (zero for the
/// expert at success), so `states.len() == actions.len()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub seed: u64,
    pub target: usize,
    pub states: Vec<SceneState>,
    pub actions: Vec<Point>,
    pub success: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn pole(&self) -> Point {
        self.states[0].pole
    }
}

/// Initial scene plus the designated target block for an episode seed.
pub fn sample_episode(seed: u64, n_blocks: usize, cfg: &SimConfig) -> Result<(SceneState, usize)> {
    let scene = sample_scene(seed, n_blocks, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7A26_E7B1_0C4D_9F13);
    let target = rng.random_range(0..n_blocks);
    Ok((scene, target))
}

/// Roll out `policy` for at most `max_steps` actions. Success means the
/// target block center came within the success radius of the pole.
pub fn run_episode(
    seed: u64,
    initial: SceneState,
    target: usize,
    max_steps: usize,
    cfg: &SimConfig,
    mut policy: impl FnMut(&SceneState, usize) -> Point,
) -> Trajectory {
    let mut states = Vec::with_capacity(max_steps + 1);
    let mut actions = Vec::with_capacity(max_steps + 1);
    let mut state = initial;
    let mut success = state.target_distance(target) <= cfg.success_radius;
    let mut steps = 0;
    while !success && steps < max_steps {
        let a = policy(&state, target);
        let next = step(&state, a, cfg);
        states.push(state);
        actions.push(a);
        state = next;
        steps += 1;
        success = state.target_distance(target) <= cfg.success_radius;
    }
    let last = if success { [0.0, 0.0] } else { policy(&state, target) };
    states.push(state);
    actions.push(last);
    Trajectory { seed, target, states, actions, success }
}

pub fn expert_episode(seed: u64, n_blocks: usize, max_steps: usize, cfg: &SimConfig) -> Result<Trajectory> {
    let (scene, target) = sample_episode(seed, n_blocks, cfg)?;
    Ok(run_episode(seed, scene, target, max_steps, cfg, |s, t| scripted_expert(s, t, cfg)))
}

/// Collect `quota` successful expert demonstrations from stream `stream`,
/// discarding failures. Gives up after `2 * quota` attempts.
pub fn generate_episodes(
    stream: u64,
    quota: usize,
    n_blocks: usize,
    max_steps: usize,
    cfg: &SimConfig,
) -> Result<Vec<Trajectory>> {
    let mut out = Vec::with_capacity(quota);
    let attempts = 2 * quota;
    for i in 0..attempts {
        if out.len() == quota {
            break;
        }
        let t = expert_episode(episode_seed(stream, i as u64), n_blocks, max_steps, cfg)?;
        if t.success {
            out.push(t);
        }
    }
    if out.len() < quota {
        return Err(Error::ExpertQuota { wanted: quota, got: out.len(), attempts });
    }
    Ok(out)
}
