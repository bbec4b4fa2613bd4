//! Goal-conditioned behavior cloning with pluggable perception inputs and
//! closed-loop rollout evaluation.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baselines::Autoencoder;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, Mlp};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::scene::episode::sample_episode;
use crate::scene::geometry::Point;
use crate::scene::{clamp_action, ground_truth_masks, render, step, GroundTruthMasks, Image, SceneState, SimConfig, Trajectory};
use crate::slot::{ConvSpec, SlotModel};

/// Observation contents fed to the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptionVariant {
    Rgb,
    RgbPlusGtSegmentation,
    /// Dense features of the frozen slot-model encoder, without RGB.
    SlotMasks,
    RgbPlusSlot,
    AutoencoderFeatures,
    RgbPlusAutoencoder,
}

impl PerceptionVariant {
    pub const ALL: [PerceptionVariant; 6] = [
        Self::Rgb,
        Self::RgbPlusGtSegmentation,
        Self::SlotMasks,
        Self::RgbPlusSlot,
        Self::AutoencoderFeatures,
        Self::RgbPlusAutoencoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Rgb => "rgb",
            Self::RgbPlusGtSegmentation => "rgb_plus_gt_segmentation",
            Self::SlotMasks => "slot_masks",
            Self::RgbPlusSlot => "rgb_plus_slot",
            Self::AutoencoderFeatures => "autoencoder_features",
            Self::RgbPlusAutoencoder => "rgb_plus_autoencoder",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn includes_rgb(self) -> bool {
        matches!(self, Self::Rgb | Self::RgbPlusGtSegmentation | Self::RgbPlusSlot | Self::RgbPlusAutoencoder)
    }

    pub fn needs_slot(self) -> bool {
        matches!(self, Self::SlotMasks | Self::RgbPlusSlot)
    }

    pub fn needs_autoencoder(self) -> bool {
        matches!(self, Self::AutoencoderFeatures | Self::RgbPlusAutoencoder)
    }

    pub fn needs_ground_truth(self) -> bool {
        self == Self::RgbPlusGtSegmentation
    }
}

/// Frozen representation used to build observations.
#[derive(Debug, Clone, Copy, Default)]
pub struct Perception<'a> {
    pub slot: Option<(&'a SlotModel, &'a ParamStore<f32>)>,
    pub autoencoder: Option<(&'a Autoencoder, &'a ParamStore<f32>)>,
}

impl Perception<'_> {
    /// Checksums of the representation parameters in use.
    pub fn checksums(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Some((_, p)) = self.slot {
            v.push(p.checksum());
        }
        if let Some((_, p)) = self.autoencoder {
            v.push(p.checksum());
        }
        v
    }
}

/// Channel-first stacked observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Observation {
    /// 2-D area averaging by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<Observation> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Config(alloc::format!("cannot downsample {}x{} by {factor}", self.height, self.width)));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let norm = 1.0 / (factor * factor) as f32;
        let mut data = vec![0.0f32; self.channels * h * w];
        for c in 0..self.channels {
            let src = &self.data[c * self.height * self.width..(c + 1) * self.height * self.width];
            let dst = &mut data[c * h * w..(c + 1) * h * w];
            for r in 0..self.height {
                for col in 0..self.width {
                    dst[(r / factor) * w + col / factor] += src[r * self.width + col] * norm;
                }
            }
        }
        Ok(Observation { channels: self.channels, height: h, width: w, data })
    }
}

/// Number of observation channels a variant produces.
pub fn observation_channels(variant: PerceptionVariant, n_blocks: usize, perception: &Perception<'_>) -> Result<usize> {
    let rgb = if variant.includes_rgb() { 3 } else { 0 };
    let extra = if variant.needs_ground_truth() {
        n_blocks + 3
    } else if variant.needs_slot() {
        perception.slot.ok_or_else(|| missing(variant))?.0.config.feature_channels()
    } else if variant.needs_autoencoder() {
        let ae = perception.autoencoder.ok_or_else(|| missing(variant))?.0;
        ae.config.encoder.last().map_or(3, |s| s.channels)
    } else {
        0
    };
    Ok(rgb + extra)
}

fn missing(variant: PerceptionVariant) -> Error {
    Error::Config(alloc::format!("variant {} requires a representation checkpoint", variant.name()))
}

/// Stack RGB with the variant's extra channels for a batch of frames.
/// `truth` is required for the ground-truth segmentation variant.
pub fn build_observations(
    images: &[&Image],
    truth: Option<&[GroundTruthMasks]>,
    variant: PerceptionVariant,
    perception: &Perception<'_>,
) -> Result<Vec<Observation>> {
    let extra: Option<Vec<Vec<f32>>> = if variant.needs_ground_truth() {
        let t = truth.ok_or_else(|| Error::Config("ground-truth masks required".into()))?;
        if t.len() != images.len() {
            return Err(Error::LengthMismatch(t.len(), images.len()));
        }
        Some(t.iter().map(GroundTruthMasks::stacked).collect())
    } else if variant.needs_slot() {
        let (m, p) = perception.slot.ok_or_else(|| missing(variant))?;
        Some(m.penultimate_features(p, images)?)
    } else if variant.needs_autoencoder() {
        let (m, p) = perception.autoencoder.ok_or_else(|| missing(variant))?;
        Some(m.penultimate_features(p, images)?)
    } else {
        None
    };
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let pixels = img.height * img.width;
            let mut data = Vec::new();
            if variant.includes_rgb() {
                data.extend_from_slice(&img.data);
            }
            if let Some(e) = &extra {
                if e[i].len() % pixels != 0 {
                    return Err(Error::Resolution { expected: (img.height, img.width), got: (0, e[i].len()) });
                }
                data.extend_from_slice(&e[i]);
            }
            Ok(Observation { channels: data.len() / pixels, height: img.height, width: img.width, data })
        })
        .collect()
}

pub fn build_observation(
    image: &Image,
    truth: Option<&GroundTruthMasks>,
    variant: PerceptionVariant,
    perception: &Perception<'_>,
) -> Result<Observation> {
    let t = truth.map(|t| vec![t.clone()]);
    Ok(build_observations(&[image], t.as_deref(), variant, perception)?.remove(0))
}

/// Per-channel 8-bit quantization of observations used to keep training
/// sets compact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantizer {
    pub lo: Vec<f32>,
    pub hi: Vec<f32>,
}

impl Quantizer {
    /// Channel ranges from sample observations.
    pub fn fit(obs: &[Observation]) -> Result<Self> {
        let first = obs.first().ok_or(Error::Empty("observations"))?;
        let c = first.channels;
        let p = first.height * first.width;
        let mut lo = vec![f32::INFINITY; c];
        let mut hi = vec![f32::NEG_INFINITY; c];
        for o in obs {
            for ch in 0..c {
                for &v in &o.data[ch * p..(ch + 1) * p] {
                    lo[ch] = lo[ch].min(v);
                    hi[ch] = hi[ch].max(v);
                }
            }
        }
        for ch in 0..c {
            // Keep the unit range for image-like channels so they quantize exactly.
            if lo[ch] >= 0.0 && hi[ch] <= 1.0 {
                lo[ch] = 0.0;
                hi[ch] = 1.0;
            } else if hi[ch] <= lo[ch] {
                hi[ch] = lo[ch] + 1.0;
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn encode(&self, obs: &Observation) -> Vec<u8> {
        let p = obs.height * obs.width;
        obs.data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i / p;
                let t = (v - self.lo[c]) / (self.hi[c] - self.lo[c]);
                libm::roundf(t.clamp(0.0, 1.0) * 255.0) as u8
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Explicit,
    Implicit,
}

/// Derivative-free energy minimization settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IbcInference {
    pub samples: usize,
    pub iters: usize,
    /// Fraction of lowest-energy candidates kept each round.
    pub keep_frac: f64,
    /// Initial resampling noise (normalized action units).
    pub sigma: f64,
    pub shrink: f64,
}

impl Default for IbcInference {
    fn default() -> Self {
        Self { samples: 256, iters: 3, keep_frac: 0.1, sigma: 0.3, shrink: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Side of the square policy input; observations are area-downsampled.
    pub input_size: usize,
    pub trunk: Vec<ConvSpec>,
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Use every `frame_stride`-th frame of each demonstration.
    pub frame_stride: usize,
    /// Random translation (pixels, policy resolution) applied to training
    /// inputs; `0` disables it.
    pub shift: usize,
    pub counter_samples: usize,
    pub inference: IbcInference,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Explicit,
            input_size: 32,
            trunk: vec![
                ConvSpec { channels: 32, kernel: 3, stride: 2 },
                ConvSpec { channels: 32, kernel: 3, stride: 1 },
                ConvSpec { channels: 32, kernel: 3, stride: 1 },
            ],
            hidden: vec![256, 256],
            steps: 5000,
            batch_size: 32,
            adam: AdamConfig { lr: 1e-3, warmup_steps: 200, clip_norm: Some(10.0), ..Default::default() },
            seed: 0,
            frame_stride: 2,
            shift: 0,
            counter_samples: 64,
            inference: IbcInference::default(),
        }
    }
}

/// Conv trunk with a spatial-softmax keypoint readout, followed by either an
/// action regressor or an energy head over `(features, action)`.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub kind: PolicyKind,
    pub trunk: Vec<Conv2d>,
    pub head: Mlp,
    pub in_channels: usize,
    pub n_blocks: usize,
    pub input_size: usize,
}

impl PolicyNet {
    pub fn new<R: Rng + ?Sized>(
        config: &PolicyConfig,
        obs_channels: usize,
        n_blocks: usize,
        store: &mut ParamStore<f32>,
        rng: &mut R,
    ) -> Result<Self> {
        if config.trunk.is_empty() {
            return Err(Error::Config("policy trunk needs at least one convolution".into()));
        }
        let in_channels = obs_channels + n_blocks;
        let mut trunk = Vec::new();
        let mut c = in_channels;
        for (i, s) in config.trunk.iter().enumerate() {
            trunk.push(Conv2d::new(store, &alloc::format!("pi.conv{i}"), c, s.channels, s.kernel, s.stride, true, rng));
            c = s.channels;
        }
        let feat = 2 * c + n_blocks;
        let mut widths = vec![feat + if config.kind == PolicyKind::Implicit { 2 } else { 0 }];
        widths.extend(&config.hidden);
        widths.push(if config.kind == PolicyKind::Implicit { 1 } else { 2 });
        let head = Mlp::new(store, "pi.head", &widths, rng);
        Ok(Self { kind: config.kind, trunk, head, in_channels, n_blocks, input_size: config.input_size })
    }

    /// Spatial-softmax keypoints of the trunk, concatenated with the target
    /// one-hot: `[B, 2 C + n_blocks]`.
    pub fn features(&self, g: &mut Graph<'_, f32>, x: Var, targets: &[usize]) -> Var {
        let mut h = x;
        for c in &self.trunk {
            h = c.forward(g, h);
            h = g.relu(h);
        }
        let s = g.shape(h).to_vec();
        let (b, c, hh, ww) = (s[0], s[1], s[2], s[3]);
        let flat = g.reshape(h, &[b, c, hh * ww]);
        let attn = g.softmax(flat, 2);
        let mut grid = Vec::with_capacity(hh * ww * 2);
        for r in 0..hh {
            for col in 0..ww {
                grid.push((col as f32 + 0.5) / ww as f32 * 2.0 - 1.0);
                grid.push((r as f32 + 0.5) / hh as f32 * 2.0 - 1.0);
            }
        }
        let gv = g.input(&[hh * ww, 2], grid);
        let kp = g.linear(attn, gv, None);
        let kp = g.reshape(kp, &[b, 2 * c]);
        let oh = g.input(&[b, self.n_blocks], one_hot(targets, self.n_blocks));
        g.concat(&[kp, oh], 1)
    }

    /// Normalized actions `[B, 2]`.
    pub fn regress(&self, g: &mut Graph<'_, f32>, x: Var, targets: &[usize]) -> Var {
        let f = self.features(g, x, targets);
        self.head.forward(g, f)
    }

    /// Energies `[B, M]` of `M` candidate actions per row (`actions` is
    /// `[B, M, 2]`, normalized units).
    pub fn energy_of(&self, g: &mut Graph<'_, f32>, features: Var, actions: &[f32], m: usize) -> Var {
        let s = g.shape(features).to_vec();
        let (b, f) = (s[0], s[1]);
        let fr = g.reshape(features, &[b, 1, f]);
        let fr = g.repeat(fr, 1, m);
        let a = g.input(&[b, m, 2], actions.to_vec());
        let x = g.concat(&[fr, a], 2);
        let e = self.head.forward(g, x);
        g.reshape(e, &[b, m])
    }
}

fn one_hot(targets: &[usize], n: usize) -> Vec<f32> {
    let mut v = vec![0.0; targets.len() * n];
    for (i, &t) in targets.iter().enumerate() {
        v[i * n + t] = 1.0;
    }
    v
}

/// Normalized policy input `[B, C + n_blocks, S, S]` from quantized frames.
fn assemble_input(frames: &[&[u8]], targets: &[usize], channels: usize, size: usize, n_blocks: usize) -> Vec<f32> {
    let p = size * size;
    let per = (channels + n_blocks) * p;
    let mut out = vec![0.0f32; frames.len() * per];
    for (i, (f, &t)) in frames.iter().zip(targets).enumerate() {
        let dst = &mut out[i * per..(i + 1) * per];
        for (o, &b) in dst[..channels * p].iter_mut().zip(f.iter()) {
            *o = b as f32 * (2.0 / 255.0) - 1.0;
        }
        for k in 0..n_blocks {
            let v = if k == t { 1.0 } else { 0.0 };
            dst[(channels + k) * p..(channels + k + 1) * p].iter_mut().for_each(|o| *o = v);
        }
    }
    out
}

/// Translate every plane of `x` by `(dy, dx)` with edge replication.
fn shift_planes(x: &mut [f32], planes: usize, size: usize, dy: isize, dx: isize) {
    let p = size * size;
    let mut tmp = vec![0.0f32; p];
    for c in 0..planes {
        let plane = &mut x[c * p..(c + 1) * p];
        for r in 0..size {
            let sr = (r as isize - dy).clamp(0, size as isize - 1) as usize;
            for col in 0..size {
                let sc = (col as isize - dx).clamp(0, size as isize - 1) as usize;
                tmp[r * size + col] = plane[sr * size + sc];
            }
        }
        plane.copy_from_slice(&tmp);
    }
}

/// Quantized demonstration frames ready for behavior cloning.
#[derive(Debug, Clone)]
pub struct DemoSet {
    pub variant: PerceptionVariant,
    pub channels: usize,
    pub size: usize,
    pub n_blocks: usize,
    pub quantizer: Quantizer,
    pub frames: Vec<u8>,
    pub targets: Vec<usize>,
    /// Expert actions divided by `max_step`.
    pub actions: Vec<[f32; 2]>,
    /// Checksums of the perception parameters used.
    pub perception_checksums: Vec<String>,
}

impl DemoSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn frame(&self, i: usize) -> &[u8] {
        let n = self.channels * self.size * self.size;
        &self.frames[i * n..(i + 1) * n]
    }
}

/// Observation of states at the policy input resolution, rendered at
/// `render_size` (which must match any representation model).
pub fn observe_states(
    states: &[&SceneState],
    variant: PerceptionVariant,
    perception: &Perception<'_>,
    render_size: usize,
    input_size: usize,
    sim: &SimConfig,
) -> Result<Vec<Observation>> {
    if input_size == 0 || render_size % input_size != 0 {
        return Err(Error::Config("render size must be a multiple of the policy input size".into()));
    }
    let images: Vec<Image> = states.iter().map(|s| render(s, render_size, render_size, sim)).collect();
    let truth: Option<Vec<GroundTruthMasks>> = variant
        .needs_ground_truth()
        .then(|| states.iter().map(|s| ground_truth_masks(s, render_size, render_size, sim)).collect());
    let refs: Vec<&Image> = images.iter().collect();
    let obs = build_observations(&refs, truth.as_deref(), variant, perception)?;
    obs.iter().map(|o| o.downsample(render_size / input_size)).collect()
}

/// Build a quantized training set from demonstrations.
pub fn demo_set(
    demos: &[Trajectory],
    variant: PerceptionVariant,
    perception: &Perception<'_>,
    render_size: usize,
    config: &PolicyConfig,
    sim: &SimConfig,
) -> Result<DemoSet> {
    let n_blocks = demos.first().ok_or(Error::Empty("demonstrations"))?.states[0].n_blocks();
    let stride = config.frame_stride.max(1);
    let mut picks: Vec<(&SceneState, usize, Point)> = Vec::new();
    for d in demos {
        for t in (0..d.len()).step_by(stride) {
            picks.push((&d.states[t], d.target, d.actions[t]));
        }
    }
    const CHUNK: usize = 32;
    let mut quantizer: Option<Quantizer> = None;
    let mut frames = Vec::new();
    let mut channels = 0;
    for chunk in picks.chunks(CHUNK) {
        let states: Vec<&SceneState> = chunk.iter().map(|c| c.0).collect();
        let obs = observe_states(&states, variant, perception, render_size, config.input_size, sim)?;
        let q = match &quantizer {
            Some(q) => q,
            None => {
                // Ranges from a spread-out sample of the whole set.
                let step = (picks.len() / 128).max(1);
                let sample_states: Vec<&SceneState> = picks.iter().step_by(step).map(|c| c.0).collect();
                let mut sample_obs = Vec::new();
                for s in sample_states.chunks(CHUNK) {
                    sample_obs.extend(observe_states(s, variant, perception, render_size, config.input_size, sim)?);
                }
                quantizer = Some(Quantizer::fit(&sample_obs)?);
                quantizer.as_ref().unwrap()
            }
        };
        for o in &obs {
            channels = o.channels;
            frames.extend(q.encode(o));
        }
    }
    let max_step = sim.max_step as f32;
    Ok(DemoSet {
        variant,
        channels,
        size: config.input_size,
        n_blocks,
        quantizer: quantizer.ok_or(Error::Empty("demonstrations"))?,
        frames,
        targets: picks.iter().map(|c| c.1).collect(),
        actions: picks.iter().map(|c| [c.2[0] as f32 / max_step, c.2[1] as f32 / max_step]).collect(),
        perception_checksums: perception.checksums(),
    })
}

/// Trained policy with everything needed to act from scene states.
#[derive(Debug, Clone)]
pub struct Policy {
    pub config: PolicyConfig,
    pub variant: PerceptionVariant,
    pub net: PolicyNet,
    pub params: ParamStore<f32>,
    pub quantizer: Quantizer,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTrainReport {
    pub losses: Vec<f64>,
}

/// Behavior cloning on a demonstration set: squared-error regression
/// (explicit) or contrastive energy training against uniform counter-actions
/// (implicit).
pub fn bc_train(set: &DemoSet, config: &PolicyConfig) -> Result<(Policy, PolicyTrainReport)> {
    if set.is_empty() {
        return Err(Error::Empty("demonstrations"));
    }
    if config.kind == PolicyKind::Implicit && config.counter_samples == 0 {
        return Err(Error::Config("implicit behavior cloning needs at least one counter-sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParamStore::new();
    let net = PolicyNet::new(config, set.channels, set.n_blocks, &mut params, &mut rng)?;
    let mut adam = Adam::new(config.adam, &params);
    let bs = config.batch_size.max(1);
    let s = set.size;
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let idx: Vec<usize> =
            if bs <= set.len() { sample(&mut rng, set.len(), bs).into_vec() } else { (0..bs).map(|_| rng.random_range(0..set.len())).collect() };
        let frames: Vec<&[u8]> = idx.iter().map(|&i| set.frame(i)).collect();
        let targets: Vec<usize> = idx.iter().map(|&i| set.targets[i]).collect();
        let mut input = assemble_input(&frames, &targets, set.channels, s, set.n_blocks);
        if config.shift > 0 {
            let per = net.in_channels * s * s;
            let sh = config.shift as i64;
            for chunk in input.chunks_mut(per) {
                let dy = rng.random_range(-sh..=sh) as isize;
                let dx = rng.random_range(-sh..=sh) as isize;
                shift_planes(chunk, set.channels, s, dy, dx);
            }
        }
        let grads = {
            let mut g = Graph::new(&params);
            let x = g.input(&[bs, net.in_channels, s, s], input);
            let l = match config.kind {
                PolicyKind::Explicit => {
                    let y = net.regress(&mut g, x, &targets);
                    let t: Vec<f32> = idx.iter().flat_map(|&i| set.actions[i]).collect();
                    let t = g.input(&[bs, 2], t);
                    g.mse(y, t)
                }
                PolicyKind::Implicit => {
                    let m = config.counter_samples + 1;
                    let mut cand = Vec::with_capacity(bs * m * 2);
                    for &i in &idx {
                        cand.extend(set.actions[i]);
                        for _ in 0..config.counter_samples {
                            cand.push(rng.random_range(-1.0f32..=1.0));
                            cand.push(rng.random_range(-1.0f32..=1.0));
                        }
                    }
                    let f = net.features(&mut g, x, &targets);
                    let e = net.energy_of(&mut g, f, &cand, m);
                    let logits = g.scale(e, -1.0);
                    g.cross_entropy(logits, &vec![0; bs])
                }
            };
            let v = g.scalar(l) as f64;
            if !v.is_finite() {
                return Err(Error::Diverged { step: step as u64, loss: v });
            }
            losses.push(v);
            g.backward(l)
        };
        adam.step(&mut params, &grads);
    }
    let policy = Policy {
        config: config.clone(),
        variant: set.variant,
        net,
        params,
        quantizer: set.quantizer.clone(),
        channels: set.channels,
    };
    Ok((policy, PolicyTrainReport { losses }))
}

/// Result of derivative-free energy minimization for one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct IbcResult {
    pub action: [f32; 2],
    pub energy: f32,
    /// Final candidate pool and its energies.
    pub pool: Vec<[f32; 2]>,
    pub energies: Vec<f32>,
}

/// Iterated sampling: evaluate candidates, keep the lowest-energy fraction,
/// resample around them with shrinking noise, and finally return the
/// minimum-energy candidate of the last pool. `energy` scores candidates
/// for every row at once (`rows × samples` energies, row-major).
pub fn ibc_minimize<R, E>(rows: usize, inf: &IbcInference, rng: &mut R, mut energy: E) -> Result<Vec<IbcResult>>
where
    R: Rng + ?Sized,
    E: FnMut(&[f32]) -> Result<Vec<f32>>,
{
    let m = inf.samples.max(1);
    let keep = ((m as f64 * inf.keep_frac).ceil() as usize).clamp(1, m);
    let mut pools: Vec<Vec<[f32; 2]>> = (0..rows)
        .map(|_| (0..m).map(|_| [rng.random_range(-1.0f32..=1.0), rng.random_range(-1.0f32..=1.0)]).collect())
        .collect();
    let mut sigma = inf.sigma;
    for it in 0..=inf.iters {
        let flat: Vec<f32> = pools.iter().flat_map(|p| p.iter().flatten().copied()).collect();
        let e = energy(&flat)?;
        if e.len() != rows * m {
            return Err(Error::LengthMismatch(e.len(), rows * m));
        }
        if it == inf.iters {
            return Ok(pools
                .into_iter()
                .enumerate()
                .map(|(r, pool)| {
                    let energies = e[r * m..(r + 1) * m].to_vec();
                    let best = (0..m).min_by(|&a, &b| energies[a].total_cmp(&energies[b])).unwrap_or(0);
                    IbcResult { action: pool[best], energy: energies[best], pool, energies }
                })
                .collect());
        }
        for (r, pool) in pools.iter_mut().enumerate() {
            let er = &e[r * m..(r + 1) * m];
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| er[a].total_cmp(&er[b]));
            let elite: Vec<[f32; 2]> = order[..keep].iter().map(|&i| pool[i]).collect();
            for (j, slot) in pool.iter_mut().enumerate() {
                let base = elite[j % keep];
                let nx: f64 = StandardNormal.sample(rng);
                let ny: f64 = StandardNormal.sample(rng);
                *slot = [
                    (base[0] + (nx * sigma) as f32).clamp(-1.0, 1.0),
                    (base[1] + (ny * sigma) as f32).clamp(-1.0, 1.0),
                ];
            }
        }
        sigma *= inf.shrink;
    }
    unreachable!("loop returns on the last iteration")
}

impl Policy {
    /// Normalized actions for quantized observations.
    fn act_normalized<R: Rng + ?Sized>(&self, obs: &[Observation], targets: &[usize], rng: &mut R) -> Result<Vec<[f32; 2]>> {
        let s = self.net.input_size;
        let codes: Vec<Vec<u8>> = obs.iter().map(|o| self.quantizer.encode(o)).collect();
        let frames: Vec<&[u8]> = codes.iter().map(|c| c.as_slice()).collect();
        let input = assemble_input(&frames, targets, self.channels, s, self.net.n_blocks);
        let b = obs.len();
        match self.net.kind {
            PolicyKind::Explicit => {
                let mut g = Graph::new(&self.params);
                let x = g.input(&[b, self.net.in_channels, s, s], input);
                let y = self.net.regress(&mut g, x, targets);
                Ok(g.value(y).chunks(2).map(|c| [c[0], c[1]]).collect())
            }
            PolicyKind::Implicit => {
                let mut g = Graph::new(&self.params);
                let x = g.input(&[b, self.net.in_channels, s, s], input);
                let f = self.net.features(&mut g, x, targets);
                let fv = g.value(f).to_vec();
                let fdim = g.shape(f)[1];
                let inf = self.config.inference;
                let res = ibc_minimize(b, &inf, rng, |cands| {
                    let mut g2 = Graph::new(&self.params);
                    let fin = g2.input(&[b, fdim], fv.clone());
                    let e = self.net.energy_of(&mut g2, fin, cands, inf.samples.max(1));
                    Ok(g2.value(e).to_vec())
                })?;
                Ok(res.into_iter().map(|r| r.action).collect())
            }
        }
    }

    /// Actions (table units, clamped to the step bound) for a batch of states.
    pub fn act<R: Rng + ?Sized>(
        &self,
        states: &[&SceneState],
        targets: &[usize],
        perception: &Perception<'_>,
        render_size: usize,
        sim: &SimConfig,
        rng: &mut R,
    ) -> Result<Vec<Point>> {
        let obs = observe_states(states, self.variant, perception, render_size, self.net.input_size, sim)?;
        let a = self.act_normalized(&obs, targets, rng)?;
        Ok(a.iter()
            .map(|v| clamp_action([v[0] as f64 * sim.max_step, v[1] as f64 * sim.max_step], sim.max_step))
            .collect())
    }
}

/// Outcome of one evaluation rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutOutcome {
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    pub final_distance: f64,
}

/// Roll out all episodes in lockstep so the controller can act on batches.
/// An episode succeeds once its target block is within the success radius
/// of the pole after at most `max_steps` actions.
pub fn rollout_batch<F>(seeds: &[u64], n_blocks: usize, max_steps: usize, sim: &SimConfig, mut act: F) -> Result<Vec<RolloutOutcome>>
where
    F: FnMut(&[&SceneState], &[usize]) -> Result<Vec<Point>>,
{
    let mut states = Vec::with_capacity(seeds.len());
    let mut targets = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let (st, t) = sample_episode(s, n_blocks, sim)?;
        states.push(st);
        targets.push(t);
    }
    let mut out: Vec<RolloutOutcome> = seeds
        .iter()
        .zip(&states)
        .zip(&targets)
        .map(|((&seed, s), &t)| {
            let d = s.target_distance(t);
            RolloutOutcome { seed, success: d <= sim.success_radius, steps: 0, final_distance: d }
        })
        .collect();
    for _ in 0..max_steps {
        let active: Vec<usize> = (0..seeds.len()).filter(|&i| !out[i].success).collect();
        if active.is_empty() {
            break;
        }
        let refs: Vec<&SceneState> = active.iter().map(|&i| &states[i]).collect();
        let tg: Vec<usize> = active.iter().map(|&i| targets[i]).collect();
        let actions = act(&refs, &tg)?;
        if actions.len() != active.len() {
            return Err(Error::LengthMismatch(actions.len(), active.len()));
        }
        for (&i, a) in active.iter().zip(actions) {
            states[i] = step(&states[i], a, sim);
            let d = states[i].target_distance(targets[i]);
            out[i].steps += 1;
            out[i].final_distance = d;
            out[i].success = d <= sim.success_radius;
        }
    }
    Ok(out)
}

/// Success statistics across independently trained policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvalReport {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub success_rates: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (zero for a single seed).
    pub sd: f64,
    pub n_episodes: usize,
    pub max_steps: usize,
    pub success_radius: f64,
}

impl PolicyEvalReport {
    pub fn new(
        variant: &str,
        seeds: Vec<u64>,
        success_rates: Vec<f64>,
        n_episodes: usize,
        max_steps: usize,
        success_radius: f64,
    ) -> Result<Self> {
        if seeds.len() != success_rates.len() {
            return Err(Error::LengthMismatch(seeds.len(), success_rates.len()));
        }
        if seeds.is_empty() {
            return Err(Error::Empty("policy seeds"));
        }
        let n = success_rates.len() as f64;
        let mean = success_rates.iter().sum::<f64>() / n;
        let sd = if success_rates.len() > 1 {
            libm::sqrt(success_rates.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0))
        } else {
            0.0
        };
        Ok(Self { variant: variant.into(), seeds, success_rates, mean, sd, n_episodes, max_steps, success_radius })
    }
}

/// Fraction of successful rollouts.
pub fn success_rate(outcomes: &[RolloutOutcome]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().filter(|o| o.success).count() as f64 / outcomes.len() as f64
}
