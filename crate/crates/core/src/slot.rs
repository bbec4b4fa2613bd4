//! Slot-attention autoencoder with fixed learnable slot initialization and
//! a conv-then-upsample spatial-broadcast decoder.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, GruCell, LayerNorm, Linear, Mlp, PositionEmbed};
use crate::params::{Init, ParamId, ParamStore};
use crate::real::Real;
use crate::scene::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// One decoder stage: convolution + ReLU, then optional ×2 bilinear upsampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderStage {
    pub channels: usize,
    pub kernel: usize,
    pub upsample: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotConfig {
    pub height: usize,
    pub width: usize,
    pub num_slots: usize,
    pub slot_dim: usize,
    pub iters: usize,
    pub mlp_hidden: usize,
    pub encoder: Vec<ConvSpec>,
    pub broadcast: (usize, usize),
    pub decoder: Vec<DecoderStage>,
    pub out_kernel: usize,
    /// Backpropagate through the last iteration only, passing the gradient
    /// of the earlier iterations straight through to the slot initialization.
    /// Forward values are unchanged.
    #[serde(default)]
    pub bilevel: bool,
}

impl SlotConfig {
    /// Desk-scale model for 64×64 frames.
    pub fn desk(num_slots: usize) -> Self {
        Self {
            height: 64,
            width: 64,
            num_slots,
            slot_dim: 64,
            iters: 3,
            mlp_hidden: 128,
            encoder: alloc::vec![
                ConvSpec { channels: 32, kernel: 5, stride: 2 },
                ConvSpec { channels: 32, kernel: 5, stride: 2 },
                ConvSpec { channels: 32, kernel: 5, stride: 1 },
            ],
            broadcast: (8, 8),
            decoder: alloc::vec![
                DecoderStage { channels: 32, kernel: 3, upsample: true },
                DecoderStage { channels: 32, kernel: 3, upsample: true },
            ],
            out_kernel: 1,
            bilevel: false,
        }
    }

    /// Tiny model used by gradient and oracle checks (8×8 frames).
    pub fn micro(num_slots: usize, slot_dim: usize, iters: usize) -> Self {
        Self {
            height: 8,
            width: 8,
            num_slots,
            slot_dim,
            iters,
            mlp_hidden: 8,
            encoder: alloc::vec![
                ConvSpec { channels: 4, kernel: 3, stride: 2 },
                ConvSpec { channels: 4, kernel: 3, stride: 1 },
            ],
            broadcast: (2, 2),
            decoder: alloc::vec![DecoderStage { channels: 4, kernel: 3, upsample: true }],
            out_kernel: 3,
            bilevel: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.num_slots == 0 || self.iters == 0 || self.slot_dim == 0 {
            return bad("K, T and D must be at least 1");
        }
        if self.height == 0 || self.width == 0 {
            return bad("resolution must be positive");
        }
        if self.encoder.is_empty() {
            return bad("encoder needs at least one convolution");
        }
        Ok(())
    }

    /// Spatial size of the encoder feature grid.
    pub fn feature_size(&self) -> (usize, usize) {
        self.encoder.iter().fold((self.height, self.width), |(h, w), c| {
            let p = c.kernel / 2;
            ((h + 2 * p - c.kernel) / c.stride + 1, (w + 2 * p - c.kernel) / c.stride + 1)
        })
    }

    pub fn feature_channels(&self) -> usize {
        self.encoder.last().map_or(3, |c| c.channels)
    }
}

/// Shared convolutional trunk (ReLU after every layer) plus positional embedding.
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    pub convs: Vec<Conv2d>,
    pub pos: PositionEmbed,
}

impl ConvEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, specs: &[ConvSpec], rng: &mut R) -> Self {
        let mut c_in = 3;
        let mut convs = Vec::with_capacity(specs.len());
        for (i, s) in specs.iter().enumerate() {
            convs.push(Conv2d::new(store, &format!("{name}.conv{i}"), c_in, s.channels, s.kernel, s.stride, true, rng));
            c_in = s.channels;
        }
        let pos = PositionEmbed::new(store, &format!("{name}.pos"), c_in, rng);
        Self { convs, pos }
    }

    /// Convolutional trunk output `[B, C, h, w]` (the dense feature map before
    /// positional augmentation).
    pub fn trunk<T: Real>(&self, g: &mut Graph<'_, T>, images: Var) -> Var {
        let mut x = images;
        for c in &self.convs {
            x = c.forward(g, x);
            x = g.relu(x);
        }
        x
    }

    /// Position-augmented features `[B, C, h, w]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, images: Var) -> Var {
        let x = self.trunk(g, images);
        self.pos.forward(g, x)
    }
}

#[derive(Debug, Clone)]
pub struct SlotModel {
    pub config: SlotConfig,
    pub encoder: ConvEncoder,
    pub feature_norm: LayerNorm,
    pub feature_mlp: Mlp,
    pub input_norm: LayerNorm,
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub slot_norm: LayerNorm,
    pub gru: GruCell,
    pub mlp_norm: LayerNorm,
    pub slot_mlp: Mlp,
    /// Learnable fixed slot initialization, `[K, D]`.
    pub slot_init: ParamId,
    pub decoder_pos: PositionEmbed,
    pub decoder: Vec<Conv2d>,
    pub decoder_out: Conv2d,
}

/// Decoder outputs for a batch.
#[derive(Debug, Clone, Copy)]
pub struct Decoded {
    /// `[B, K, 3, H*W]`
    pub recons: Var,
    /// `[B, K, 1, H*W]`, softmax across K
    pub masks: Var,
    /// `[B, 3, H*W]`
    pub combined: Var,
}

/// Slots after the last iteration and that iteration's attention.
#[derive(Debug, Clone, Copy)]
pub struct SlotVars {
    /// `[B, K, D]`
    pub slots: Var,
    /// `[B, N, K]`, normalized over K for every location
    pub attention: Var,
}

impl SlotModel {
    pub fn new<T: Real, R: Rng + ?Sized>(config: SlotConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.feature_channels();
        let d = config.slot_dim;
        let hid = config.mlp_hidden;
        let encoder = ConvEncoder::new(store, "enc", &config.encoder, rng);
        let feature_norm = LayerNorm::new(store, "feat_norm", c, rng);
        let feature_mlp = Mlp::new(store, "feat_mlp", &[c, d, d], rng);
        let input_norm = LayerNorm::new(store, "sa.norm_in", d, rng);
        let to_q = Linear::new(store, "sa.q", d, d, false, rng);
        let to_k = Linear::new(store, "sa.k", d, d, false, rng);
        let to_v = Linear::new(store, "sa.v", d, d, false, rng);
        let slot_norm = LayerNorm::new(store, "sa.norm_slots", d, rng);
        let gru = GruCell::new(store, "sa.gru", d, d, rng);
        let mlp_norm = LayerNorm::new(store, "sa.norm_mlp", d, rng);
        let slot_mlp = Mlp::new(store, "sa.mlp", &[d, hid, d], rng);
        let slot_init = store.add("sa.slot_init", &[config.num_slots, d], Init::Xavier { fan_in: config.num_slots, fan_out: d }, rng);
        let decoder_pos = PositionEmbed::new(store, "dec.pos", d, rng);
        let mut decoder = Vec::new();
        let mut c_in = d;
        for (i, s) in config.decoder.iter().enumerate() {
            decoder.push(Conv2d::new(store, &format!("dec.conv{i}"), c_in, s.channels, s.kernel, 1, true, rng));
            c_in = s.channels;
        }
        let decoder_out = Conv2d::new(store, "dec.out", c_in, 4, config.out_kernel, 1, true, rng);
        Ok(Self {
            config,
            encoder,
            feature_norm,
            feature_mlp,
            input_norm,
            to_q,
            to_k,
            to_v,
            slot_norm,
            gru,
            mlp_norm,
            slot_mlp,
            slot_init,
            decoder_pos,
            decoder,
            decoder_out,
        })
    }

    /// Stack images into a `[B, 3, H, W]` input, checking resolution.
    pub fn input<T: Real>(&self, g: &mut Graph<'_, T>, images: &[&Image]) -> Result<Var> {
        images_input(g, images, self.config.height, self.config.width)
    }

    /// Position-augmented feature grid `[B, C, h, w]`.
    pub fn encode<T: Real>(&self, g: &mut Graph<'_, T>, images: Var) -> Var {
        self.encoder.forward(g, images)
    }

    /// Iterative slot competition over a feature grid.
    pub fn slot_attention<T: Real>(&self, g: &mut Graph<'_, T>, features: Var) -> SlotVars {
        let s = g.shape(features).to_vec();
        let (b, c, n) = (s[0], s[1], s[2] * s[3]);
        let k = self.config.num_slots;
        let d = self.config.slot_dim;
        let x = g.reshape(features, &[b, c, n]);
        let x = g.transpose_last2(x);
        let x = self.feature_norm.forward(g, x);
        let x = self.feature_mlp.forward(g, x);
        let x = self.input_norm.forward(g, x);
        let keys = self.to_k.forward(g, x);
        let values = self.to_v.forward(g, x);
        let init = g.param(self.slot_init);
        let init = g.reshape(init, &[1, k, d]);
        let init = g.repeat(init, 0, b);
        let mut slots = init;
        let scale = T::one() / T::c(d as f64).sqrt();
        let mut attention = None;
        for it in 0..self.config.iters {
            if self.config.bilevel && it > 0 && it + 1 == self.config.iters {
                // slots = stop_grad(slots) + (init - stop_grad(init)); the
                // bracket is exactly zero, so the value is bit-identical.
                let frozen = g.input(&[b, k, d], g.value(slots).to_vec());
                let init_frozen = g.input(&[b, k, d], g.value(init).to_vec());
                let zero = g.sub(init, init_frozen);
                slots = g.add(frozen, zero);
            }
            let prev = slots;
            let sn = self.slot_norm.forward(g, slots);
            let q = self.to_q.forward(g, sn);
            let logits = g.bmm(keys, q, false, true); // [B, N, K]
            let logits = g.scale(logits, scale);
            let attn = g.softmax(logits, 2);
            attention = Some(attn);
            let weights = g.renorm(attn, 1, T::c(1e-8));
            let updates = g.bmm(weights, values, true, false); // [B, K, D]
            let u = g.reshape(updates, &[b * k, d]);
            let p = g.reshape(prev, &[b * k, d]);
            let h = self.gru.forward(g, u, p);
            let hn = self.mlp_norm.forward(g, h);
            let r = self.slot_mlp.forward(g, hn);
            let h = g.add(h, r);
            slots = g.reshape(h, &[b, k, d]);
        }
        SlotVars { slots, attention: attention.expect("iters >= 1") }
    }

    /// Spatial-broadcast decoding of `[B, K, D]` slots.
    pub fn decode<T: Real>(&self, g: &mut Graph<'_, T>, slots: Var) -> Decoded {
        let s = g.shape(slots).to_vec();
        let (b, k, d) = (s[0], s[1], s[2]);
        let (h0, w0) = self.config.broadcast;
        let (hh, ww) = (self.config.height, self.config.width);
        let x = g.reshape(slots, &[b * k, d, 1]);
        let x = g.repeat(x, 2, h0 * w0);
        let x = g.reshape(x, &[b * k, d, h0, w0]);
        let mut x = self.decoder_pos.forward(g, x);
        let (mut h, mut w) = (h0, w0);
        for (conv, stage) in self.decoder.iter().zip(&self.config.decoder) {
            x = conv.forward(g, x);
            x = g.relu(x);
            if stage.upsample {
                h *= 2;
                w *= 2;
                x = g.resize_bilinear(x, h, w);
            }
        }
        x = self.decoder_out.forward(g, x);
        if (h, w) != (hh, ww) {
            x = g.resize_bilinear(x, hh, ww);
        }
        let x = g.reshape(x, &[b, k, 4, hh * ww]);
        let recons = g.slice(x, 2, 0, 3);
        let alpha = g.slice(x, 2, 3, 1);
        let masks = g.softmax(alpha, 1);
        let m3 = g.repeat(masks, 2, 3);
        let weighted = g.mul(m3, recons);
        let combined = g.sum_axis(weighted, 1);
        Decoded { recons, masks, combined }
    }

    /// Full forward pass.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, images: Var) -> (SlotVars, Decoded) {
        let f = self.encode(g, images);
        let sv = self.slot_attention(g, f);
        let dec = self.decode(g, sv.slots);
        (sv, dec)
    }

    /// Mean over the batch of the per-pixel, per-channel squared
    /// reconstruction error of the mask-weighted combined image.
    pub fn loss<T: Real>(&self, g: &mut Graph<'_, T>, images: Var) -> Var {
        let (_, dec) = self.forward(g, images);
        let s = g.shape(images).to_vec();
        let target = g.reshape(images, &[s[0], 3, s[2] * s[3]]);
        g.mse(dec.combined, target)
    }

    /// Masks and per-slot reconstructions for each image (inference).
    pub fn extract_masks<T: Real>(&self, store: &ParamStore<T>, images: &[&Image]) -> Result<Vec<MaskStack>> {
        let mut g = Graph::new(store);
        let x = self.input(&mut g, images)?;
        let (_, dec) = self.forward(&mut g, x);
        let (k, h, w) = (self.config.num_slots, self.config.height, self.config.width);
        let masks = g.value(dec.masks);
        let recons = g.value(dec.recons);
        let combined = g.value(dec.combined);
        if masks.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("masks"));
        }
        let p = h * w;
        Ok((0..images.len())
            .map(|i| MaskStack {
                num_slots: k,
                height: h,
                width: w,
                masks: masks[i * k * p..(i + 1) * k * p].iter().map(|v| v.f64() as f32).collect(),
                recons: recons[i * k * 3 * p..(i + 1) * k * 3 * p].iter().map(|v| v.f64() as f32).collect(),
                combined: combined[i * 3 * p..(i + 1) * 3 * p].iter().map(|v| v.f64() as f32).collect(),
            })
            .collect())
    }

    /// Encoder trunk features bilinearly resized to the image resolution,
    /// `[C, H, W]` per image.
    pub fn penultimate_features<T: Real>(&self, store: &ParamStore<T>, images: &[&Image]) -> Result<Vec<Vec<f32>>> {
        dense_features(&self.encoder, store, images, self.config.height, self.config.width)
    }

    /// Reconstruction loss of a batch (inference only).
    pub fn reconstruction_loss<T: Real>(&self, store: &ParamStore<T>, images: &[&Image]) -> Result<f64> {
        if images.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut g = Graph::new(store);
        let x = self.input(&mut g, images)?;
        let l = self.loss(&mut g, x);
        Ok(g.scalar(l).f64())
    }
}

pub(crate) fn images_input<T: Real>(g: &mut Graph<'_, T>, images: &[&Image], h: usize, w: usize) -> Result<Var> {
    if images.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::Resolution { expected: (h, w), got: (img.height, img.width) });
        }
        data.extend(img.data.iter().map(|&v| T::c(v as f64)));
    }
    Ok(g.input(&[images.len(), 3, h, w], data))
}

pub(crate) fn dense_features<T: Real>(
    encoder: &ConvEncoder,
    store: &ParamStore<T>,
    images: &[&Image],
    h: usize,
    w: usize,
) -> Result<Vec<Vec<f32>>> {
    let mut g = Graph::new(store);
    let x = images_input(&mut g, images, h, w)?;
    let f = encoder.trunk(&mut g, x);
    let r = g.resize_bilinear(f, h, w);
    let c = g.shape(r)[1];
    let v = g.value(r);
    let per = c * h * w;
    Ok((0..images.len()).map(|i| v[i * per..(i + 1) * per].iter().map(|x| x.f64() as f32).collect()).collect())
}

/// Per-image masks `[K, H, W]`, per-slot reconstructions `[K, 3, H, W]` and
/// the combined reconstruction `[3, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskStack {
    pub num_slots: usize,
    pub height: usize,
    pub width: usize,
    pub masks: Vec<f32>,
    pub recons: Vec<f32>,
    pub combined: Vec<f32>,
}

impl MaskStack {
    pub fn mask(&self, k: usize) -> &[f32] {
        let p = self.height * self.width;
        &self.masks[k * p..(k + 1) * p]
    }

    /// Index of the slot with the largest mask value at each pixel.
    pub fn argmax(&self) -> Vec<usize> {
        let p = self.height * self.width;
        (0..p)
            .map(|i| {
                (0..self.num_slots)
                    .max_by(|&a, &b| self.masks[a * p + i].total_cmp(&self.masks[b * p + i]))
                    .unwrap_or(0)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro() -> (SlotModel, ParamStore<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let m = SlotModel::new(SlotConfig::micro(3, 8, 2), &mut store, &mut rng).unwrap();
        (m, store)
    }

    #[test]
    fn feature_size_follows_strides() {
        assert_eq!(SlotConfig::desk(8).feature_size(), (16, 16));
        assert_eq!(SlotConfig::micro(3, 8, 2).feature_size(), (4, 4));
    }

    #[test]
    fn rejects_degenerate_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        assert!(SlotModel::new(SlotConfig::micro(0, 8, 2), &mut store, &mut rng).is_err());
    }

    #[test]
    fn resolution_mismatch_is_an_error() {
        let (m, store) = micro();
        let img = Image::zeros(6, 8);
        assert!(matches!(m.extract_masks(&store, &[&img]), Err(Error::Resolution { .. })));
    }

    #[test]
    fn masks_sum_to_one() {
        let (m, store) = micro();
        let img = Image { height: 8, width: 8, data: (0..192).map(|i| (i % 7) as f32 / 7.0).collect() };
        let ms = &m.extract_masks(&store, &[&img]).unwrap()[0];
        for i in 0..64 {
            let s: f32 = (0..3).map(|k| ms.masks[k * 64 + i]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }
}
