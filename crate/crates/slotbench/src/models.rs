//! Trained models and their checkpoint encodings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use slotbench_core::baselines::{Autoencoder, AutoencoderConfig, ContrastiveConfig, MocoEncoder};
use slotbench_core::localize::{mask_centroids, Localizer};
use slotbench_core::nn::Mlp;
use slotbench_core::policy::{Perception, PerceptionVariant, Policy, PolicyConfig, PolicyNet, Quantizer};
use slotbench_core::scene::Image;
use slotbench_core::slot::{SlotConfig, SlotModel};
use slotbench_core::ParamStore;

use crate::checkpoint::Checkpoint;
use crate::config::ModelKind;
use crate::error::{HarnessError, Result};

const BATCH: usize = 32;

/// Architecture echo stored in representation checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "config")]
pub enum ReprArch {
    Slot(SlotConfig),
    Autoencoder(AutoencoderConfig),
    Moco(ContrastiveConfig),
}

impl ReprArch {
    pub fn kind(&self) -> ModelKind {
        match self {
            ReprArch::Slot(_) => ModelKind::Slot,
            ReprArch::Autoencoder(_) => ModelKind::Autoencoder,
            ReprArch::Moco(_) => ModelKind::Moco,
        }
    }
}

#[derive(Debug, Clone)]
pub enum ReprModel {
    Slot(SlotModel),
    Autoencoder(Autoencoder),
    Moco(MocoEncoder),
}

/// A representation model with its parameters.
#[derive(Debug, Clone)]
pub struct Repr {
    pub arch: ReprArch,
    pub model: ReprModel,
    pub params: ParamStore<f32>,
}

impl Repr {
    /// Freshly initialized model.
    pub fn init(arch: ReprArch, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let model = match &arch {
            ReprArch::Slot(c) => ReprModel::Slot(SlotModel::new(c.clone(), &mut params, &mut rng)?),
            ReprArch::Autoencoder(c) => ReprModel::Autoencoder(Autoencoder::new(c.clone(), &mut params, &mut rng)?),
            ReprArch::Moco(c) => ReprModel::Moco(MocoEncoder::new(c, &mut params, &mut rng)?),
        };
        Ok(Self { arch, model, params })
    }

    pub fn kind(&self) -> ModelKind {
        self.arch.kind()
    }

    pub fn to_checkpoint(&self, step: u64, loss: f64) -> Result<Checkpoint> {
        Ok(Checkpoint::new(self.kind().name(), serde_json::to_value(&self.arch)?, step, loss, &self.params))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let arch: ReprArch = serde_json::from_value(ck.header.config.clone())?;
        if arch.kind().name() != ck.header.model_kind {
            return Err(HarnessError::Checkpoint(format!(
                "model_kind {} disagrees with architecture {}",
                ck.header.model_kind,
                arch.kind().name()
            )));
        }
        let mut r = Self::init(arch, 0)?;
        ck.load_into(&mut r.params)?;
        Ok(r)
    }

    /// Localizer input per image: slot mask centroids for slot models, the
    /// pooled encoder grid for the autoencoder, the embedding for MoCo.
    pub fn localizer_inputs(&self, images: &[Image]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(BATCH) {
            let refs: Vec<&Image> = chunk.iter().collect();
            match &self.model {
                ReprModel::Slot(m) => {
                    for ms in m.extract_masks(&self.params, &refs)? {
                        out.push(mask_centroids(&ms).iter().flat_map(|p| [p[0] as f32, p[1] as f32]).collect());
                    }
                }
                ReprModel::Autoencoder(m) => out.extend(m.pooled_embedding(&self.params, &refs)?),
                ReprModel::Moco(m) => out.extend(m.embeddings(&self.params, &refs)?),
            }
        }
        Ok(out)
    }

    pub fn perception(&self) -> Perception<'_> {
        match &self.model {
            ReprModel::Slot(m) => Perception { slot: Some((m, &self.params)), autoencoder: None },
            ReprModel::Autoencoder(m) => Perception { slot: None, autoencoder: Some((m, &self.params)) },
            ReprModel::Moco(_) => Perception::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LocalizerEcho {
    widths: Vec<usize>,
}

pub fn localizer_checkpoint(loc: &Localizer, step: u64, loss: f64) -> Result<Checkpoint> {
    let mut widths = vec![loc.input_dim()];
    let mut store = loc.params.clone();
    for l in &loc.mlp.layers {
        widths.push(store.get(l.w).shape[1]);
    }
    store.push("loc.input_mean".into(), vec![loc.mean.len()], loc.mean.clone());
    store.push("loc.input_std".into(), vec![loc.std.len()], loc.std.clone());
    Ok(Checkpoint::new("localizer", serde_json::to_value(LocalizerEcho { widths })?, step, loss, &store))
}

pub fn localizer_from_checkpoint(ck: &Checkpoint) -> Result<Localizer> {
    if ck.header.model_kind != "localizer" {
        return Err(HarnessError::Checkpoint(format!("expected a localizer, found {}", ck.header.model_kind)));
    }
    let echo: LocalizerEcho = serde_json::from_value(ck.header.config.clone())?;
    let mut params = ParamStore::new();
    let mlp = Mlp::new(&mut params, "loc", &echo.widths, &mut ChaCha8Rng::seed_from_u64(0));
    ck.load_into(&mut params)?;
    let fetch = |n: &str| {
        ck.tensor(n).map(|(_, d)| d.to_vec()).ok_or_else(|| HarnessError::Checkpoint(format!("missing tensor {n}")))
    };
    Ok(Localizer { mlp, params, mean: fetch("loc.input_mean")?, std: fetch("loc.input_std")? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PolicyEcho {
    config: PolicyConfig,
    variant: PerceptionVariant,
    channels: usize,
    n_blocks: usize,
    quantizer: Quantizer,
}

pub fn policy_checkpoint(p: &Policy, step: u64, loss: f64) -> Result<Checkpoint> {
    let echo = PolicyEcho {
        config: p.config.clone(),
        variant: p.variant,
        channels: p.channels,
        n_blocks: p.net.n_blocks,
        quantizer: p.quantizer.clone(),
    };
    Ok(Checkpoint::new("policy", serde_json::to_value(echo)?, step, loss, &p.params))
}

pub fn policy_from_checkpoint(ck: &Checkpoint) -> Result<Policy> {
    if ck.header.model_kind != "policy" {
        return Err(HarnessError::Checkpoint(format!("expected a policy, found {}", ck.header.model_kind)));
    }
    let echo: PolicyEcho = serde_json::from_value(ck.header.config.clone())?;
    let mut params = ParamStore::new();
    let net = PolicyNet::new(&echo.config, echo.channels, echo.n_blocks, &mut params, &mut ChaCha8Rng::seed_from_u64(0))?;
    ck.load_into(&mut params)?;
    Ok(Policy {
        config: echo.config,
        variant: echo.variant,
        net,
        params,
        quantizer: echo.quantizer,
        channels: echo.channels,
    })
}
