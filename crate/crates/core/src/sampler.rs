//! Two-stage guided Euler sampling.
//!
//! Steps `1..=tau` combine a joint and a context-free prediction (2 forwards).
//! Later steps guide each stream against a degenerate anchor for the other
//! one: video against the prediction made with muted audio, audio against the
//! one made with static video (3 forwards, the joint branch shared).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{audio_encode, video_encode, CodecConfig};
use crate::error::{Error, Result};
use crate::model::{ConditionBundle, ForwardOptions, Model, Plan, Prediction, StreamState};
use crate::rope::SequenceLayout;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    /// Context guidance, then anchor guidance.
    TwoStage,
    /// The joint prediction alone, one forward per step.
    Plain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub steps: usize,
    pub tau: usize,
    pub s_ctx: f64,
    pub s_v: f64,
    pub s_a: f64,
    pub mode: GuidanceMode,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            tau: 10,
            s_ctx: 5.0,
            s_v: 5.0,
            s_a: 5.0,
            mode: GuidanceMode::TwoStage,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        let scales = [self.s_ctx, self.s_v, self.s_a];
        if self.steps == 0 || self.tau > self.steps || scales.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!("invalid guidance config {self:?}")));
        }
        Ok(())
    }

    /// Forwards the run will take.
    pub fn expected_forwards(&self) -> usize {
        match self.mode {
            GuidanceMode::Plain => self.steps,
            GuidanceMode::TwoStage => 2 * self.tau + 3 * (self.steps - self.tau),
        }
    }
}

/// Negative anchors in model space.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchors {
    /// Encoded silence, `[N_a, C_a]`.
    pub muted_audio: Tensor,
    /// Encoded all-white frames, `[N_t * cells, C_v]`.
    pub static_video: Tensor,
}

pub fn make_anchors(codec: &CodecConfig, layout: &SequenceLayout) -> Result<Anchors> {
    let silence = vec![0.0; layout.audio_tokens * codec.window];
    let (h, w) = (layout.grid_h * codec.patch, layout.grid_w * codec.patch);
    let white = Tensor::ones(&[layout.frames, h, w]);
    Ok(Anchors {
        muted_audio: audio_encode(&silence, codec)?.to_model(codec),
        static_video: video_encode(&white, codec)?.to_model(),
    })
}

/// Anything that predicts velocities; the model, or an oracle in tests.
pub trait Denoiser {
    fn predict(&mut self, state: &StreamState, cond: &ConditionBundle, opts: ForwardOptions) -> Result<Prediction>;
}

/// The model with a plan built once for the bundle's mask.
pub struct ModelDenoiser<'a> {
    pub model: &'a Model,
    pub plan: Plan,
}

impl<'a> ModelDenoiser<'a> {
    pub fn new(model: &'a Model, cond: &ConditionBundle) -> Result<Self> {
        Ok(Self {
            model,
            plan: model.plan(&cond.mask)?,
        })
    }
}

impl Denoiser for ModelDenoiser<'_> {
    fn predict(&mut self, state: &StreamState, cond: &ConditionBundle, opts: ForwardOptions) -> Result<Prediction> {
        self.model.forward(&self.plan, state, cond, opts)
    }
}

/// Forward counts, per step and in total.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassAccounting {
    pub per_step: Vec<usize>,
    pub total: usize,
}

impl PassAccounting {
    fn record(&mut self, n: usize) {
        self.per_step.push(n);
        self.total += n;
    }
}

/// `base + s * (full - base)`.
pub fn cfg_combine(base: &Tensor, full: &Tensor, s: f64) -> Result<Tensor> {
    base.zip_map(full, |b, f| b + s * (f - b))
}

/// Context guidance: joint prediction against a run with no context and no base audio.
pub fn guide_stage1(
    d: &mut dyn Denoiser,
    state: &StreamState,
    cond: &ConditionBundle,
    s_ctx: f64,
) -> Result<Prediction> {
    let joint = d.predict(state, cond, ForwardOptions::default())?;
    let mut bare = cond.clone();
    bare.base_audio = None;
    let ctx = d.predict(state, &bare, ForwardOptions { skip_context: true })?;
    Ok(Prediction {
        video: cfg_combine(&ctx.video, &joint.video, s_ctx)?,
        audio: cfg_combine(&ctx.audio, &joint.audio, s_ctx)?,
    })
}

/// Anchor guidance: each stream against the prediction made with the other stream anchored.
pub fn guide_stage2(
    d: &mut dyn Denoiser,
    state: &StreamState,
    cond: &ConditionBundle,
    anchors: &Anchors,
    s_v: f64,
    s_a: f64,
) -> Result<Prediction> {
    let joint = d.predict(state, cond, ForwardOptions::default())?;
    let muted = StreamState {
        audio: anchors.muted_audio.clone(),
        t_audio: 0.0,
        ..state.clone()
    };
    let a_drv = d.predict(&muted, cond, ForwardOptions::default())?;
    let still = StreamState {
        video: anchors.static_video.clone(),
        t_video: 0.0,
        ..state.clone()
    };
    let v_drv = d.predict(&still, cond, ForwardOptions::default())?;
    Ok(Prediction {
        video: cfg_combine(&a_drv.video, &joint.video, s_v)?,
        audio: cfg_combine(&v_drv.audio, &joint.audio, s_a)?,
    })
}

/// Standard-normal starting latents, video first.
pub fn initial_noise(layout: &SequenceLayout, cv: usize, ca: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = Tensor::randn(&[layout.frame_tokens(), cv], 1.0, &mut rng);
    let a = Tensor::randn(&[layout.audio_tokens, ca], 1.0, &mut rng);
    (v, a)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    /// Model-space target latents.
    pub video: Tensor,
    pub audio: Tensor,
    pub accounting: PassAccounting,
}

/// Euler-integrates from `t = 1` to `t = 0` in `steps` equal steps.
pub fn sample_with(
    d: &mut dyn Denoiser,
    cond: &ConditionBundle,
    anchors: &Anchors,
    g: &GuidanceConfig,
    noise: (Tensor, Tensor),
) -> Result<SampleOutput> {
    g.validate()?;
    let (video, audio) = noise;
    let mut state = StreamState {
        video,
        audio,
        t_video: 1.0,
        t_audio: 1.0,
    };
    let mut acc = PassAccounting::default();
    let dt = 1.0 / g.steps as f64;
    for i in 0..g.steps {
        let t = 1.0 - i as f64 * dt;
        state.t_video = t;
        state.t_audio = t;
        let step = i + 1;
        let (v, n) = match g.mode {
            GuidanceMode::Plain => (d.predict(&state, cond, ForwardOptions::default())?, 1),
            GuidanceMode::TwoStage if step <= g.tau => (guide_stage1(d, &state, cond, g.s_ctx)?, 2),
            GuidanceMode::TwoStage => (guide_stage2(d, &state, cond, anchors, g.s_v, g.s_a)?, 3),
        };
        acc.record(n);
        state.video = state.video.zip_map(&v.video, |z, u| z - dt * u)?;
        state.audio = state.audio.zip_map(&v.audio, |z, u| z - dt * u)?;
        if !(state.video.all_finite() && state.audio.all_finite()) {
            return Err(Error::NonFinite(format!("latent after sampling step {step}")));
        }
    }
    Ok(SampleOutput {
        video: state.video,
        audio: state.audio,
        accounting: acc,
    })
}

/// Samples with the model from seeded noise.
pub fn sample(
    model: &Model,
    cond: &ConditionBundle,
    codec: &CodecConfig,
    g: &GuidanceConfig,
    seed: u64,
) -> Result<SampleOutput> {
    let c = &model.config;
    let anchors = make_anchors(codec, &c.layout)?;
    let mut d = ModelDenoiser::new(model, cond)?;
    let noise = initial_noise(&c.layout, c.video_channels, c.audio_channels, seed);
    sample_with(&mut d, cond, &anchors, g, noise)
}
