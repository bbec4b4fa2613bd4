//! Keypoint regression from frozen representations and PCK scoring.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::Mlp;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::scene::geometry::{dist, Point};
use crate::scene::SceneState;
use crate::slot::MaskStack;

/// Mask-weighted mean pixel center of every slot in image-normalized
/// `(x, y)` coordinates. A slot with no mass sits at the image center.
pub fn mask_centroids(masks: &MaskStack) -> Vec<Point> {
    centroids(&masks.masks, masks.num_slots, masks.height, masks.width)
}

/// [`mask_centroids`] over a raw `[k, h, w]` weight array.
pub fn centroids(masks: &[f32], k: usize, h: usize, w: usize) -> Vec<Point> {
    let p = h * w;
    assert_eq!(masks.len(), k * p, "mask buffer size");
    (0..k)
        .map(|s| {
            let m = &masks[s * p..(s + 1) * p];
            let (mut sw, mut sx, mut sy) = (0.0f64, 0.0f64, 0.0f64);
            for r in 0..h {
                let y = (r as f64 + 0.5) / h as f64;
                for c in 0..w {
                    let v = m[r * w + c] as f64;
                    sw += v;
                    sx += v * (c as f64 + 0.5) / w as f64;
                    sy += v * y;
                }
            }
            if sw > 0.0 {
                [sx / sw, sy / sw]
            } else {
                [0.5, 0.5]
            }
        })
        .collect()
}

/// Regression targets: every block center followed by the effector, in
/// table units.
pub fn keypoint_targets(state: &SceneState) -> Vec<f32> {
    state.keypoints().iter().flat_map(|p| [p[0] as f32, p[1] as f32]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizerConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            steps: 4000,
            batch_size: 64,
            adam: AdamConfig { lr: 1e-3, warmup_steps: 100, ..Default::default() },
            seed: 0,
        }
    }
}

/// MLP from a representation vector to keypoint coordinates. Inputs are
/// standardized with statistics of the training set.
#[derive(Debug, Clone)]
pub struct Localizer {
    pub mlp: Mlp,
    pub params: ParamStore<f32>,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Localizer {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn predict(&self, inputs: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let d = self.input_dim();
        let mut data = Vec::with_capacity(inputs.len() * d);
        for x in inputs {
            if x.len() != d {
                return Err(Error::LengthMismatch(x.len(), d));
            }
            data.extend(x.iter().zip(&self.mean).zip(&self.std).map(|((&v, &m), &s)| (v - m) / s));
        }
        let mut g = Graph::new(&self.params);
        let xv = g.input(&[inputs.len(), d], data);
        let y = self.mlp.forward(&mut g, xv);
        let out = g.shape(y)[1];
        Ok(g.value(y).chunks(out).map(|c| c.to_vec()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizerReport {
    pub losses: Vec<f64>,
    pub upstream_checksum: Option<String>,
}

/// Fit a localizer by squared error. When `upstream` is given its checksum
/// is compared before and after training and a change aborts.
pub fn train_localizer(
    inputs: &[Vec<f32>],
    targets: &[Vec<f32>],
    config: &LocalizerConfig,
    upstream: Option<&ParamStore<f32>>,
) -> Result<(Localizer, LocalizerReport)> {
    if inputs.len() != targets.len() {
        return Err(Error::LengthMismatch(inputs.len(), targets.len()));
    }
    if inputs.is_empty() {
        return Err(Error::Empty("localizer training set"));
    }
    let before = upstream.map(|p| p.checksum());
    let d = inputs[0].len();
    let out = targets[0].len();
    let n = inputs.len();
    let mut mean = vec![0.0f64; d];
    for x in inputs {
        if x.len() != d {
            return Err(Error::LengthMismatch(x.len(), d));
        }
        mean.iter_mut().zip(x).for_each(|(m, &v)| *m += v as f64);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0f64; d];
    for x in inputs {
        var.iter_mut().zip(x).zip(&mean).for_each(|((s, &v), &m)| *s += (v as f64 - m).powi(2));
    }
    let std: Vec<f32> = var.iter().map(|s| (libm::sqrt(s / n as f64) as f32).max(1e-3)).collect();
    let mean: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
    let normed: Vec<Vec<f32>> =
        inputs.iter().map(|x| x.iter().zip(&mean).zip(&std).map(|((&v, &m), &s)| (v - m) / s).collect()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParamStore::new();
    let mut widths = vec![d];
    widths.extend(&config.hidden);
    widths.push(out);
    let mlp = Mlp::new(&mut params, "loc", &widths, &mut rng);
    let mut adam = Adam::new(config.adam, &params);
    let bs = config.batch_size.min(n).max(1);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let idx = sample(&mut rng, n, bs);
        let mut xb = Vec::with_capacity(bs * d);
        let mut yb = Vec::with_capacity(bs * out);
        for i in idx.iter() {
            xb.extend_from_slice(&normed[i]);
            if targets[i].len() != out {
                return Err(Error::LengthMismatch(targets[i].len(), out));
            }
            yb.extend_from_slice(&targets[i]);
        }
        let grads = {
            let mut g = Graph::new(&params);
            let x = g.input(&[bs, d], xb);
            let t = g.input(&[bs, out], yb);
            let y = mlp.forward(&mut g, x);
            let l = g.mse(y, t);
            let v = g.scalar(l) as f64;
            if !v.is_finite() {
                return Err(Error::Diverged { step: step as u64, loss: v });
            }
            losses.push(v);
            g.backward(l)
        };
        adam.step(&mut params, &grads);
    }
    let after = upstream.map(|p| p.checksum());
    if before != after {
        return Err(Error::FrozenViolated);
    }
    Ok((Localizer { mlp, params, mean, std }, LocalizerReport { losses, upstream_checksum: before }))
}

/// Per-keypoint PCK scores in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckReport {
    pub objects: Vec<String>,
    pub per_object: Vec<f64>,
    pub mean: f64,
    /// Fraction of the table length.
    pub threshold: f64,
    pub n_eval: usize,
}

/// Percentage of frames whose predicted keypoint lies within
/// `threshold * table_length` of the truth, per keypoint.
pub fn pck(
    predictions: &[Vec<Point>],
    truth: &[Vec<Point>],
    objects: &[String],
    threshold: f64,
    table_length: f64,
) -> Result<PckReport> {
    if predictions.len() != truth.len() {
        return Err(Error::LengthMismatch(predictions.len(), truth.len()));
    }
    if truth.is_empty() {
        return Err(Error::Empty("pck frames"));
    }
    if !(threshold > 0.0) {
        return Err(Error::Config("pck threshold must be positive".into()));
    }
    let k = objects.len();
    let radius = threshold * table_length;
    let mut hits = vec![0usize; k];
    for (p, t) in predictions.iter().zip(truth) {
        if p.len() != k {
            return Err(Error::LengthMismatch(p.len(), k));
        }
        if t.len() != k {
            return Err(Error::LengthMismatch(t.len(), k));
        }
        for j in 0..k {
            if dist(p[j], t[j]) <= radius {
                hits[j] += 1;
            }
        }
    }
    let per_object: Vec<f64> = hits.iter().map(|&h| 100.0 * h as f64 / truth.len() as f64).collect();
    let mean = if k == 0 { 0.0 } else { per_object.iter().sum::<f64>() / k as f64 };
    Ok(PckReport { objects: objects.to_vec(), per_object, mean, threshold, n_eval: truth.len() })
}

/// Split a flat `[x0, y0, x1, y1, ...]` vector into points.
pub fn to_points(flat: &[f32]) -> Vec<Point> {
    flat.chunks(2).map(|c| [c[0] as f64, c[1] as f64]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    #[test]
    fn single_pixel_centroid() {
        let (h, w) = (6, 8);
        let mut m = vec![0.0f32; h * w];
        m[3 * w + 5] = 1.0;
        let c = centroids(&m, 1, h, w)[0];
        assert!((c[0] - 5.5 / 8.0).abs() < 1e-12 && (c[1] - 3.5 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_and_empty_masks_center() {
        let c = centroids(&[0.25; 16], 1, 4, 4)[0];
        assert!((c[0] - 0.5).abs() < 1e-12 && (c[1] - 0.5).abs() < 1e-12);
        assert_eq!(centroids(&[0.0; 16], 1, 4, 4)[0], [0.5, 0.5]);
    }

    #[test]
    fn pck_counts_hits() {
        let names = ["a".to_string()];
        let t = vec![vec![[0.5, 0.5]], vec![[0.5, 0.5]]];
        let p = vec![vec![[0.55, 0.5]], vec![[0.9, 0.5]]];
        let r = pck(&p, &t, &names, 0.1, 1.0).unwrap();
        assert_eq!(r.per_object, [50.0]);
        assert!(pck(&p[..1], &t, &names, 0.1, 1.0).is_err());
        assert!(pck(&p, &t, &names, 0.0, 1.0).is_err());
    }

    #[test]
    fn frozen_upstream_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut up = ParamStore::<f32>::new();
        up.add("w", &[3], crate::Init::Normal(1.0), &mut rng);
        let xs = vec![vec![0.0f32, 1.0], vec![1.0, 0.0]];
        let ys = vec![vec![0.2f32, 0.4], vec![0.6, 0.8]];
        let cfg = LocalizerConfig { steps: 10, ..Default::default() };
        let (_, rep) = train_localizer(&xs, &ys, &cfg, Some(&up)).unwrap();
        assert_eq!(rep.upstream_checksum, Some(up.checksum()));
    }
}
