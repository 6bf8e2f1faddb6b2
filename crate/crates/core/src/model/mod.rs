//! Dual-stream diffusion transformer.
//!
//! The video stream carries `[reference | condition | target]` tokens, one
//! per latent cell; the audio stream carries one token per audio latent
//! frame. Each block runs, per stream, self-attention, text
//! cross-attention, cross-modal attention, (audio only) the two context
//! attention layers, and an MLP. Every sublayer is pre-norm with adaLN
//! shift/scale/gate from the stream's timestep.
//!
//! Cross-modal routing is asymmetric:
//! * audio to video writes only into target tokens inside the edit mask;
//! * video to audio reads target tokens through `detach`, so audio losses
//!   never reach video-stream parameters.
//!
//! Masked target tokens are also invisible as keys to every other video
//! token in self-attention. Together with the routing above, no
//! unmasked-cell prediction depends on audio, at any depth.

mod checkpoint;
mod forward;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, ParamEntry};
pub use forward::{ForwardOptions, Plan};
pub use params::{ParamStore, ParamVars};

use crate::codec::LatentMask;
use crate::error::{Error, Result};
use crate::rope::{PositionScheme, RotarySplit, SequenceLayout, ROPE_BASE};
use crate::tensor::Tensor;

use params::{Attention, Layers, Linear, Mlp};

/// Null caption token; padded and dropped captions use it.
pub const NULL_TOKEN: usize = 0;

/// Grouped cross-modal window in frame units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grouping {
    pub group_size: f64,
    pub window: f64,
}

impl Grouping {
    pub fn half_width(&self) -> f64 {
        self.group_size * self.window / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub vocab: usize,
    pub caption_len: usize,
    pub mlp_ratio: usize,
    pub a2v: Grouping,
    pub v2a: Grouping,
    /// Acoustic context window `w`; a query sees base tokens within `w / 2`.
    pub context_window: usize,
    pub video_channels: usize,
    pub audio_channels: usize,
    pub layout: SequenceLayout,
    pub scheme: PositionScheme,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            dim: 64,
            heads: 4,
            vocab: 64,
            caption_len: 8,
            mlp_ratio: 4,
            a2v: Grouping {
                group_size: 1.25,
                window: 3.0,
            },
            v2a: Grouping {
                group_size: 0.8,
                window: 1.0,
            },
            context_window: 8,
            video_channels: 4,
            audio_channels: 8,
            layout: SequenceLayout::default(),
            scheme: PositionScheme::Aligned,
            rope_base: ROPE_BASE,
        }
    }
}

impl ModelConfig {
    /// A one-block configuration small enough for exhaustive gradient checks.
    pub fn micro() -> Self {
        Self {
            blocks: 1,
            dim: 12,
            heads: 2,
            vocab: 16,
            caption_len: 3,
            mlp_ratio: 2,
            context_window: 2,
            layout: SequenceLayout {
                frames: 2,
                audio_tokens: 4,
                grid_h: 2,
                grid_w: 2,
                ref_frames: 1,
            },
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if self.blocks == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.dim % 2 != 0 {
            return Err(Error::invalid("dim must be even"));
        }
        RotarySplit::new(self.head_dim())?;
        if self.vocab < 2 || self.caption_len == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid("vocab, caption_len and mlp_ratio must be positive"));
        }
        if self.a2v.half_width() < 0.0 || self.v2a.half_width() < 0.0 {
            return Err(Error::invalid("grouping sizes must be non-negative"));
        }
        Ok(())
    }
}

/// Everything the model conditions on. Latents are in model space.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    pub visual_caption: Vec<usize>,
    pub audio_caption: Vec<usize>,
    pub speech_caption: Vec<usize>,
    /// Base audio `[N_a, C_a]`; `None` when absent or dropped.
    pub base_audio: Option<Tensor>,
    /// Reference image latent `[cells, C_v]`.
    pub reference: Tensor,
    /// Masked video latent `[N_t * cells, C_v]`.
    pub cond_video: Tensor,
    pub mask: LatentMask,
}

impl ConditionBundle {
    pub fn drop_text(&mut self) {
        for cap in [
            &mut self.visual_caption,
            &mut self.audio_caption,
            &mut self.speech_caption,
        ] {
            cap.iter_mut().for_each(|t| *t = NULL_TOKEN);
        }
    }
}

/// Noisy (or clean) target latents and their timesteps.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamState {
    /// `[N_t * cells, C_v]`.
    pub video: Tensor,
    /// `[N_a, C_a]`.
    pub audio: Tensor,
    pub t_video: f64,
    pub t_audio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub video: Tensor,
    pub audio: Tensor,
}

impl Prediction {
    pub fn all_finite(&self) -> bool {
        self.video.all_finite() && self.audio.all_finite()
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    layers: Layers,
}

impl Model {
    /// Normal(0, 0.02) everywhere except the zero context output projections,
    /// and the condition embedding, which starts as a copy of the target one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let layers = Layers::register(&config, &mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        store.initialize(&mut rng);
        store.copy_param(layers.e_target.w, layers.e_cond.w);
        if let (Some(src), Some(dst)) = (layers.e_target.b, layers.e_cond.b) {
            store.copy_param(src, dst);
        }
        Ok(Self {
            config,
            params: store,
            layers,
        })
    }

    /// Rebuilds the layer map for `config` around existing parameter values.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut fresh = ParamStore::default();
        let layers = Layers::register(&config, &mut fresh);
        if fresh.names() != params.names() {
            return Err(Error::invalid("parameter manifest does not match config"));
        }
        for i in 0..fresh.len() {
            if fresh.get(i).shape() != params.get(i).shape() {
                return Err(Error::invalid(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    params.name(i),
                    params.get(i).shape(),
                    fresh.get(i).shape()
                )));
            }
        }
        Ok(Self {
            config,
            params,
            layers,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|t| t.len()).sum()
    }

    /// Indices of the zero-initialized context output projections.
    pub fn context_output_params(&self) -> Vec<usize> {
        self.layers
            .blocks
            .iter()
            .flat_map(|b| [b.audio.vis_ctx.o, b.audio.ac_ctx.o])
            .collect()
    }

    pub fn embedding_params(&self) -> (usize, usize) {
        (self.layers.e_target.w, self.layers.e_cond.w)
    }

    pub fn audio_head_params(&self) -> Vec<usize> {
        let mut v = linear_params(&self.layers.head_a);
        v.extend(linear_params(&self.layers.final_mod_a));
        v
    }

    /// Parameters that live only on the video stream.
    pub fn video_stream_params(&self) -> Vec<usize> {
        let l = &self.layers;
        let mut v = Vec::new();
        for lin in [&l.e_target, &l.e_cond, &l.e_ref, &l.t_embed_v.0, &l.t_embed_v.1] {
            v.extend(linear_params(lin));
        }
        for b in &l.blocks {
            v.extend(linear_params(&b.video.modulation));
            for a in [&b.video.self_attn, &b.video.text_attn] {
                v.extend(attention_params(a));
            }
            // a2v output only ever lands in the video stream.
            v.extend(attention_params(&b.video.a2v));
            v.extend(mlp_params(&b.video.mlp));
        }
        v.extend(linear_params(&l.final_mod_v));
        v.extend(linear_params(&l.head_v));
        v
    }

    /// Unmasked target cells when `mask` is applied to the target frames.
    pub fn unmasked_target_cells(mask: &LatentMask) -> Vec<usize> {
        mask.flags
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| (!b).then_some(i))
            .collect()
    }
}

fn linear_params(l: &Linear) -> Vec<usize> {
    let mut v = vec![l.w];
    v.extend(l.b);
    v
}

fn attention_params(a: &Attention) -> Vec<usize> {
    vec![a.q, a.k, a.v, a.o]
}

fn mlp_params(m: &Mlp) -> Vec<usize> {
    let mut v = linear_params(&m.up);
    v.extend(linear_params(&m.down));
    v
}
