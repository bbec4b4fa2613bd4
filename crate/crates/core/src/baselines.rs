//! Object-agnostic baselines: a convolutional autoencoder trained with the
//! same reconstruction loss as the slot model, and a momentum-contrast
//! encoder.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, Mlp};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::real::Real;
use crate::scene::Image;
use crate::slot::{dense_features, images_input, ConvEncoder, ConvSpec, DecoderStage};
use crate::train::Checkpoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub height: usize,
    pub width: usize,
    pub encoder: Vec<ConvSpec>,
    /// Channels of the pointwise bottleneck on the encoder grid.
    pub bottleneck: usize,
    pub decoder: Vec<DecoderStage>,
}

impl AutoencoderConfig {
    /// Same trunk as [`crate::slot::SlotConfig::desk`].
    pub fn desk() -> Self {
        Self {
            height: 64,
            width: 64,
            encoder: crate::slot::SlotConfig::desk(1).encoder,
            bottleneck: 16,
            decoder: vec![
                DecoderStage { channels: 32, kernel: 3, upsample: true },
                DecoderStage { channels: 32, kernel: 3, upsample: true },
            ],
        }
    }

    pub fn micro() -> Self {
        Self {
            height: 8,
            width: 8,
            encoder: crate::slot::SlotConfig::micro(1, 4, 1).encoder,
            bottleneck: 4,
            decoder: vec![DecoderStage { channels: 4, kernel: 3, upsample: true }],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub config: AutoencoderConfig,
    pub encoder: ConvEncoder,
    pub bottleneck: Conv2d,
    pub decoder: Vec<Conv2d>,
    pub out: Conv2d,
}

impl Autoencoder {
    pub fn new<T: Real, R: Rng + ?Sized>(config: AutoencoderConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        if config.encoder.is_empty() || config.bottleneck == 0 {
            return Err(Error::Config("autoencoder needs an encoder and a bottleneck".into()));
        }
        let encoder = ConvEncoder::new(store, "ae.enc", &config.encoder, rng);
        let c = config.encoder.last().map_or(3, |s| s.channels);
        let bottleneck = Conv2d::new(store, "ae.bottleneck", c, config.bottleneck, 1, 1, true, rng);
        let mut decoder = Vec::new();
        let mut c_in = config.bottleneck;
        for (i, s) in config.decoder.iter().enumerate() {
            decoder.push(Conv2d::new(store, &alloc::format!("ae.dec{i}"), c_in, s.channels, s.kernel, 1, true, rng));
            c_in = s.channels;
        }
        let out = Conv2d::new(store, "ae.out", c_in, 3, 1, 1, true, rng);
        Ok(Self { config, encoder, bottleneck, decoder, out })
    }

    /// Reconstruction `[B, 3, H, W]`.
    pub fn reconstruct<T: Real>(&self, g: &mut Graph<'_, T>, images: Var) -> Var {
        let f = self.encoder.forward(g, images);
        let z = self.bottleneck.forward(g, f);
        let mut x = g.relu(z);
        let (mut h, mut w) = (g.shape(x)[2], g.shape(x)[3]);
        for (conv, stage) in self.decoder.iter().zip(&self.config.decoder) {
            x = conv.forward(g, x);
            x = g.relu(x);
            if stage.upsample {
                h *= 2;
                w *= 2;
                x = g.resize_bilinear(x, h, w);
            }
        }
        x = self.out.forward(g, x);
        if (h, w) != (self.config.height, self.config.width) {
            x = g.resize_bilinear(x, self.config.height, self.config.width);
        }
        x
    }

    /// Per-pixel, per-channel mean squared error, averaged over the batch.
    pub fn loss<T: Real>(&self, g: &mut Graph<'_, T>, images: Var) -> Var {
        let r = self.reconstruct(g, images);
        g.mse(r, images)
    }

    /// Reconstruction loss of a batch (inference only).
    pub fn reconstruction_loss<T: Real>(&self, store: &ParamStore<T>, images: &[&Image]) -> Result<f64> {
        let mut g = Graph::new(store);
        let x = images_input(&mut g, images, self.config.height, self.config.width)?;
        let l = self.loss(&mut g, x);
        Ok(g.scalar(l).f64())
    }

    /// Global average of the encoder grid, one `C`-vector per image.
    pub fn pooled_embedding<T: Real>(&self, store: &ParamStore<T>, images: &[&Image]) -> Result<Vec<Vec<f32>>> {
        let mut g = Graph::new(store);
        let x = images_input(&mut g, images, self.config.height, self.config.width)?;
        let f = self.encoder.forward(&mut g, x);
        Ok(global_average(&mut g, f))
    }

    /// Encoder trunk features resized to the image resolution.
    pub fn penultimate_features<T: Real>(&self, store: &ParamStore<T>, images: &[&Image]) -> Result<Vec<Vec<f32>>> {
        dense_features(&self.encoder, store, images, self.config.height, self.config.width)
    }
}

fn global_average<T: Real>(g: &mut Graph<'_, T>, f: Var) -> Vec<Vec<f32>> {
    let s = g.shape(f).to_vec();
    let flat = g.reshape(f, &[s[0], s[1], s[2] * s[3]]);
    let m = g.mean_axis(flat, 2);
    g.value(m).chunks(s[1]).map(|c| c.iter().map(|v| v.f64() as f32).collect()).collect()
}

/// Augmentations for contrastive views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Smallest crop side as a fraction of the image side.
    pub min_crop: f64,
    /// Brightness, contrast and saturation factors are drawn from
    /// `[1 - jitter, 1 + jitter]`.
    pub jitter: f64,
    pub jitter_prob: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { min_crop: 0.6, jitter: 0.4, jitter_prob: 0.8, flip_prob: 0.5 }
    }
}

/// Random square crop resized back to full resolution, color jitter and
/// horizontal flip.
pub fn augment<R: Rng + ?Sized>(img: &Image, cfg: &AugmentConfig, rng: &mut R) -> Image {
    let (h, w) = (img.height, img.width);
    let p = h * w;
    let side = rng.random_range(cfg.min_crop.min(1.0)..=1.0);
    let (ch, cw) = (side * h as f64, side * w as f64);
    let y0 = rng.random_range(0.0..=(h as f64 - ch));
    let x0 = rng.random_range(0.0..=(w as f64 - cw));
    let flip = rng.random_bool(cfg.flip_prob);
    let mut out = Image::zeros(h, w);
    for r in 0..h {
        let sy = (y0 + (r as f64 + 0.5) * ch / h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let ya = libm::floor(sy) as usize;
        let yb = (ya + 1).min(h - 1);
        let fy = (sy - ya as f64) as f32;
        for c in 0..w {
            let cc = if flip { w - 1 - c } else { c };
            let sx = (x0 + (cc as f64 + 0.5) * cw / w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let xa = libm::floor(sx) as usize;
            let xb = (xa + 1).min(w - 1);
            let fx = (sx - xa as f64) as f32;
            for k in 0..3 {
                let s = &img.data[k * p..(k + 1) * p];
                let top = s[ya * w + xa] * (1.0 - fx) + s[ya * w + xb] * fx;
                let bot = s[yb * w + xa] * (1.0 - fx) + s[yb * w + xb] * fx;
                out.data[k * p + r * w + c] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    if rng.random_bool(cfg.jitter_prob) {
        let j = cfg.jitter;
        let mut draw = || rng.random_range(1.0 - j..=1.0 + j) as f32;
        let (bright, contrast, sat) = (draw(), draw(), draw());
        let mean = out.data.iter().sum::<f32>() / out.data.len() as f32;
        for i in 0..p {
            let mut rgb = [out.data[i], out.data[p + i], out.data[2 * p + i]];
            let gray = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
            for v in rgb.iter_mut() {
                *v = gray + (*v - gray) * sat;
                *v = mean + (*v - mean) * contrast;
                *v *= bright;
            }
            for k in 0..3 {
                out.data[k * p + i] = rgb[k].clamp(0.0, 1.0);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub height: usize,
    pub width: usize,
    pub encoder: Vec<ConvSpec>,
    pub head_hidden: usize,
    pub embedding_dim: usize,
    pub queue_size: usize,
    pub temperature: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub augment: AugmentConfig,
    pub steps: usize,
    pub adam: AdamConfig,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            encoder: crate::slot::SlotConfig::desk(1).encoder,
            head_hidden: 128,
            embedding_dim: 128,
            queue_size: 16384,
            temperature: 0.1,
            batch_size: 16,
            momentum: 0.999,
            augment: AugmentConfig::default(),
            steps: 2000,
            adam: AdamConfig { lr: 1e-3, warmup_steps: 100, ..Default::default() },
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

/// Conv trunk, global average pooling and a projection head producing unit
/// embeddings.
#[derive(Debug, Clone)]
pub struct MocoEncoder {
    pub encoder: ConvEncoder,
    pub head: Mlp,
    pub height: usize,
    pub width: usize,
}

impl MocoEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(config: &ContrastiveConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        if config.encoder.is_empty() {
            return Err(Error::Config("contrastive encoder needs at least one convolution".into()));
        }
        if !(config.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        let encoder = ConvEncoder::new(store, "moco.enc", &config.encoder, rng);
        let c = config.encoder.last().map_or(3, |s| s.channels);
        let head = Mlp::new(store, "moco.head", &[c, config.head_hidden, config.embedding_dim], rng);
        Ok(Self { encoder, head, height: config.height, width: config.width })
    }

    /// Unit-norm embeddings `[B, dim]`.
    pub fn embed<T: Real>(&self, g: &mut Graph<'_, T>, images: Var) -> Var {
        let f = self.encoder.forward(g, images);
        let s = g.shape(f).to_vec();
        let flat = g.reshape(f, &[s[0], s[1], s[2] * s[3]]);
        let pooled = g.mean_axis(flat, 2);
        let z = self.head.forward(g, pooled);
        g.l2_normalize(z)
    }

    /// Unit embeddings as plain vectors (inference).
    pub fn embeddings<T: Real>(&self, store: &ParamStore<T>, images: &[&Image]) -> Result<Vec<Vec<f32>>> {
        let mut g = Graph::new(store);
        let x = images_input(&mut g, images, self.height, self.width)?;
        let e = self.embed(&mut g, x);
        let d = g.shape(e)[1];
        Ok(g.value(e).chunks(d).map(|c| c.iter().map(|v| v.f64() as f32).collect()).collect())
    }
}

/// Fixed-capacity FIFO of negative keys.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyQueue {
    pub capacity: usize,
    pub dim: usize,
    keys: VecDeque<Vec<f32>>,
}

impl KeyQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self { capacity, dim, keys: VecDeque::with_capacity(capacity) }
    }

    /// Queue pre-filled with random unit vectors.
    pub fn random<R: Rng + ?Sized>(capacity: usize, dim: usize, rng: &mut R) -> Self {
        let mut q = Self::new(capacity, dim);
        for _ in 0..capacity {
            let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
            q.push(v.iter().map(|x| x / n).collect());
        }
        q
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Append one key, evicting the oldest when full.
    pub fn push(&mut self, key: Vec<f32>) {
        assert_eq!(key.len(), self.dim, "key width");
        if self.capacity == 0 {
            return;
        }
        if self.keys.len() == self.capacity {
            self.keys.pop_front();
        }
        self.keys.push_back(key);
    }

    /// Keys oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Vec<f32>> {
        self.keys.iter()
    }

    /// `[dim, len]` matrix of keys as columns.
    fn as_columns<T: Real>(&self) -> Vec<T> {
        let n = self.keys.len();
        let mut out = vec![T::zero(); self.dim * n];
        for (j, k) in self.keys.iter().enumerate() {
            for (i, &v) in k.iter().enumerate() {
                out[i * n + j] = T::c(v as f64);
            }
        }
        out
    }
}

/// InfoNCE loss: each query must pick its key (index 0) against the queue.
/// `keys` is treated as a constant.
pub fn info_nce<T: Real>(g: &mut Graph<'_, T>, queries: Var, keys: &[T], queue: &KeyQueue, temperature: f64) -> Var {
    let s = g.shape(queries).to_vec();
    let (b, d) = (s[0], s[1]);
    assert_eq!(keys.len(), b * d, "one key per query");
    let k = g.input(&[b, d], keys.to_vec());
    let prod = g.mul(queries, k);
    let pos = g.sum_axis(prod, 1);
    let pos = g.reshape(pos, &[b, 1]);
    let logits = if queue.is_empty() {
        pos
    } else {
        let qm = g.input(&[d, queue.len()], queue.as_columns());
        let neg = g.linear(queries, qm, None);
        g.concat(&[pos, neg], 1)
    };
    let logits = g.scale(logits, T::c(1.0 / temperature));
    g.cross_entropy(logits, &vec![0; b])
}

/// `key ← m·key + (1 − m)·query`, parameter-wise.
pub fn ema_update(key: &mut ParamStore<f32>, query: &ParamStore<f32>, momentum: f64) {
    let m = momentum as f32;
    for (k, q) in key.iter_mut().zip(query.iter()) {
        assert_eq!(k.name, q.name, "parameter layouts differ");
        k.data.iter_mut().zip(&q.data).for_each(|(a, &b)| *a = m * *a + (1.0 - m) * b);
    }
}

#[derive(Debug, Clone)]
pub struct MocoState {
    pub model: MocoEncoder,
    pub query: ParamStore<f32>,
    pub key: ParamStore<f32>,
    pub queue: KeyQueue,
    pub losses: Vec<f64>,
}

/// Momentum-contrast training on augmented views of `images`.
pub fn moco_train<C>(images: &[Image], config: &ContrastiveConfig, mut on_checkpoint: C) -> Result<MocoState>
where
    C: FnMut(&Checkpoint, &ParamStore<f32>) -> Result<()>,
{
    if images.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut query = ParamStore::new();
    let model = MocoEncoder::new(config, &mut query, &mut rng)?;
    let mut key = query.clone();
    let mut queue = KeyQueue::random(config.queue_size, config.embedding_dim, &mut rng);
    let mut adam = Adam::new(config.adam, &query);
    let bs = config.batch_size.max(1);
    let mut losses = Vec::with_capacity(config.steps);
    let mut window = 0.0;
    let mut window_len = 0;
    for step in 0..config.steps {
        let idx: Vec<usize> = if bs <= images.len() {
            sample(&mut rng, images.len(), bs).into_vec()
        } else {
            (0..bs).map(|_| rng.random_range(0..images.len())).collect()
        };
        let qa: Vec<Image> = idx.iter().map(|&i| augment(&images[i], &config.augment, &mut rng)).collect();
        let ka: Vec<Image> = idx.iter().map(|&i| augment(&images[i], &config.augment, &mut rng)).collect();
        let keys: Vec<f32> = {
            let refs: Vec<&Image> = ka.iter().collect();
            model.embeddings(&key, &refs)?.concat()
        };
        let grads = {
            let mut g = Graph::new(&query);
            let refs: Vec<&Image> = qa.iter().collect();
            let x = images_input(&mut g, &refs, config.height, config.width)?;
            let qv = model.embed(&mut g, x);
            let l = info_nce(&mut g, qv, &keys, &queue, config.temperature);
            let v = g.scalar(l) as f64;
            if !v.is_finite() {
                return Err(Error::Diverged { step: step as u64, loss: v });
            }
            losses.push(v);
            window += v;
            window_len += 1;
            g.backward(l)
        };
        adam.step(&mut query, &grads);
        ema_update(&mut key, &query, config.momentum);
        for k in keys.chunks(config.embedding_dim) {
            queue.push(k.to_vec());
        }
        let done = step + 1;
        if config.checkpoint_every > 0 && (done % config.checkpoint_every == 0 || done == config.steps) {
            on_checkpoint(&Checkpoint { step: done, loss: window / window_len as f64 }, &query)?;
            window = 0.0;
            window_len = 0;
        }
    }
    Ok(MocoState { model, query, key, queue, losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn queue_is_fifo_with_fixed_capacity() {
        let mut q = KeyQueue::new(3, 1);
        for i in 0..5 {
            q.push(vec![i as f32]);
        }
        let got: Vec<f32> = q.iter().map(|k| k[0]).collect();
        assert_eq!(got, [2.0, 3.0, 4.0]);
    }

    #[test]
    fn augment_keeps_shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Image { height: 8, width: 8, data: (0..192).map(|i| (i % 11) as f32 / 10.0).collect() };
        for _ in 0..10 {
            let a = augment(&img, &AugmentConfig::default(), &mut rng);
            assert_eq!((a.height, a.width), (8, 8));
            assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn identity_augment_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Image { height: 6, width: 6, data: (0..108).map(|i| (i % 7) as f32 / 7.0).collect() };
        let cfg = AugmentConfig { min_crop: 1.0, jitter: 0.0, jitter_prob: 0.0, flip_prob: 0.0 };
        let a = augment(&img, &cfg, &mut rng);
        for (x, y) in a.data.iter().zip(&img.data) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn autoencoder_output_matches_input_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let ae = Autoencoder::new(AutoencoderConfig::micro(), &mut store, &mut rng).unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(&[2, 3, 8, 8], vec![0.5; 384]);
        let r = ae.reconstruct(&mut g, x);
        assert_eq!(g.shape(r), &[2, 3, 8, 8]);
        let img = Image::zeros(8, 8);
        assert_eq!(ae.pooled_embedding(&store, &[&img]).unwrap()[0].len(), 4);
    }
}
