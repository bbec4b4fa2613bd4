//! Minibatch training loop shared by the reconstruction models.

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::scene::Image;
use crate::slot::images_input;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Steps between checkpoints; the checkpoint loss is the mean training
    /// loss over the preceding interval.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 10_000, batch_size: 8, adam: AdamConfig::default(), checkpoint_every: 500, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss of every optimization step.
    pub losses: Vec<f64>,
    pub checkpoints: Vec<Checkpoint>,
    /// Lowest-loss checkpoint; its parameters are left in the store.
    pub best: Checkpoint,
}

/// Sample minibatches of `images`, minimize `loss`, checkpoint periodically
/// and restore the lowest-loss checkpoint at the end. A non-finite loss
/// aborts with [`Error::Diverged`]. `on_checkpoint` sees every checkpoint
/// with the current parameters.
pub fn train_reconstruction<L, C>(
    store: &mut ParamStore<f32>,
    images: &[Image],
    config: &TrainConfig,
    loss: L,
    mut on_checkpoint: C,
) -> Result<TrainReport>
where
    L: Fn(&mut Graph<'_, f32>, Var) -> Var,
    C: FnMut(&Checkpoint, &ParamStore<f32>) -> Result<()>,
{
    if images.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if config.batch_size == 0 || config.checkpoint_every == 0 {
        return Err(Error::Config("batch_size and checkpoint_every must be positive".into()));
    }
    let (h, w) = (images[0].height, images[0].width);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.adam, store);
    let mut losses = Vec::with_capacity(config.steps);
    let mut checkpoints = Vec::new();
    let mut best: Option<(Checkpoint, ParamStore<f32>)> = None;
    let mut window = 0.0;
    let mut window_len = 0usize;
    for step in 0..config.steps {
        let batch: Vec<&Image> = if config.batch_size <= images.len() {
            sample(&mut rng, images.len(), config.batch_size).iter().map(|i| &images[i]).collect()
        } else {
            (0..config.batch_size).map(|_| &images[rand::Rng::random_range(&mut rng, 0..images.len())]).collect()
        };
        let grads = {
            let mut g = Graph::new(store);
            let x = images_input(&mut g, &batch, h, w)?;
            let l = loss(&mut g, x);
            let value = g.scalar(l) as f64;
            if !value.is_finite() {
                return Err(Error::Diverged { step: step as u64, loss: value });
            }
            losses.push(value);
            window += value;
            window_len += 1;
            g.backward(l)
        };
        if !grads.all_finite() {
            return Err(Error::Diverged { step: step as u64, loss: f64::NAN });
        }
        adam.step(store, &grads);
        let done = step + 1;
        if done % config.checkpoint_every == 0 || done == config.steps {
            let ck = Checkpoint { step: done, loss: window / window_len as f64 };
            window = 0.0;
            window_len = 0;
            on_checkpoint(&ck, store)?;
            checkpoints.push(ck);
            if best.as_ref().map_or(true, |(b, _)| ck.loss < b.loss) {
                best = Some((ck, store.clone()));
            }
        }
    }
    let best = match best {
        Some((ck, params)) => {
            *store = params;
            ck
        }
        None => Checkpoint { step: 0, loss: f64::NAN },
    };
    Ok(TrainReport { losses, checkpoints, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slot::{SlotConfig, SlotModel};

    #[test]
    fn keeps_lowest_loss_checkpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let m = SlotModel::new(SlotConfig::micro(2, 8, 1), &mut store, &mut rng).unwrap();
        let img = Image { height: 8, width: 8, data: (0..192).map(|i| (i % 5) as f32 / 5.0).collect() };
        let cfg = TrainConfig {
            steps: 40,
            batch_size: 1,
            adam: AdamConfig { lr: 1e-2, warmup_steps: 0, ..Default::default() },
            checkpoint_every: 10,
            seed: 0,
        };
        let mut seen = Vec::new();
        let r = train_reconstruction(&mut store, &[img], &cfg, |g, x| m.loss(g, x), |c, _| {
            seen.push(c.step);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, [10, 20, 30, 40]);
        assert_eq!(r.losses.len(), 40);
        assert!(r.losses.iter().all(|&l| l >= 0.0));
        let min = r.checkpoints.iter().map(|c| c.loss).fold(f64::INFINITY, f64::min);
        assert_eq!(r.best.loss, min);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut store = ParamStore::<f32>::new();
        let r = train_reconstruction(&mut store, &[], &TrainConfig::default(), |g, x| g.mean_all(x), |_, _| Ok(()));
        assert!(matches!(r, Err(Error::Empty(_))));
    }
}
