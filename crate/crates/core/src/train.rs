//! Flow-matching training with the four-mode task router.
//!
//! Every step draws one scene and one mode, noises the active streams along
//! the straight path `z_t = (1 - t) z0 + t eps`, and regresses the velocity
//! `eps - z0`:
//! * joint: both streams noised, both losses, context on;
//! * audio-driven: audio is the clean latent at `t_a = 0`, video loss only;
//! * video-driven: video is clean at `t_v = 0`, audio loss only;
//! * context-null: both noised and scored, context layers skipped, no base audio.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::codec::{
    mask_to_latent, video_encode, AudioEncoder, CodecConfig, LatentMask, PixelMask,
};
use crate::error::{Error, Result};
use crate::model::{ConditionBundle, ForwardOptions, Model, ModelConfig, ParamVars, Plan, StreamState};
use crate::rope::SequenceLayout;
use crate::tensor::Tensor;
use crate::world::{Scene, WorldConfig, TOKEN_BAND, TOKEN_IDENTITY};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Joint,
    AudioDriven,
    VideoDriven,
    ContextNull,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Joint, Mode::AudioDriven, Mode::VideoDriven, Mode::ContextNull];

    pub fn scores_video(self) -> bool {
        self != Mode::VideoDriven
    }

    pub fn scores_audio(self) -> bool {
        self != Mode::AudioDriven
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Joint => "joint",
            Mode::AudioDriven => "audio-driven",
            Mode::VideoDriven => "video-driven",
            Mode::ContextNull => "context-null",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterConfig {
    pub p_joint: f64,
    pub p_audio_driven: f64,
    pub p_video_driven: f64,
    pub p_context_null: f64,
    pub text_drop: f64,
    pub base_audio_drop: f64,
    /// Per-side mask dilation is uniform in `0..=max_dilation` pixels.
    pub max_dilation: usize,
    pub bbox_prob: f64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            p_joint: 0.4,
            p_audio_driven: 0.2,
            p_video_driven: 0.2,
            p_context_null: 0.2,
            text_drop: 0.1,
            base_audio_drop: 0.1,
            max_dilation: 20,
            bbox_prob: 0.3,
        }
    }
}

impl RouterConfig {
    pub fn probabilities(&self) -> [f64; 4] {
        [self.p_joint, self.p_audio_driven, self.p_video_driven, self.p_context_null]
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.probabilities();
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !p.iter().all(|&x| unit(x)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("mode probabilities {p:?} must sum to 1")));
        }
        if !unit(self.text_drop) || !unit(self.base_audio_drop) || !unit(self.bbox_prob) {
            return Err(Error::invalid("drop and bbox probabilities must lie in [0, 1]"));
        }
        Ok(())
    }
}

pub fn sample_mode<R: Rng + ?Sized>(rng: &mut R, router: &RouterConfig) -> Mode {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (mode, p) in Mode::ALL.into_iter().zip(router.probabilities()) {
        acc += p;
        if u < acc {
            return mode;
        }
    }
    // Rounding left a sliver above the cumulative sum; give it to the last live mode.
    Mode::ALL
        .into_iter()
        .zip(router.probabilities())
        .rev()
        .find(|&(_, p)| p > 0.0)
        .map_or(Mode::Joint, |(m, _)| m)
}

/// What [`augment_mask`] did.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    /// Pixels added on the top, bottom, left and right.
    pub dilation: [usize; 4],
    pub bbox: bool,
}

/// Dilates each side independently, then maybe replaces each frame's mask by its bounding box.
pub fn augment_mask<R: Rng + ?Sized>(
    mask: &PixelMask,
    rng: &mut R,
    router: &RouterConfig,
) -> (PixelMask, Augmentation) {
    let mut d = [0usize; 4];
    for x in d.iter_mut() {
        *x = rng.gen_range(0..=router.max_dilation);
    }
    let bbox = rng.gen_bool(router.bbox_prob);
    let [top, bottom, left, right] = d;
    let (h, w) = (mask.height, mask.width);
    let mut out = PixelMask::empty(mask.frames, h, w);
    for f in 0..mask.frames {
        for y in 0..h {
            for x in 0..w {
                if !mask.get(f, y, x) {
                    continue;
                }
                // A pixel grows `top` rows up, `bottom` down, and so on.
                for yy in y.saturating_sub(top)..=(y + bottom).min(h - 1) {
                    for xx in x.saturating_sub(left)..=(x + right).min(w - 1) {
                        out.set(f, yy, xx, true);
                    }
                }
            }
        }
        if bbox {
            let on: Vec<(usize, usize)> = (0..h)
                .flat_map(|y| (0..w).map(move |x| (y, x)))
                .filter(|&(y, x)| out.get(f, y, x))
                .collect();
            if let (Some(y0), Some(y1), Some(x0), Some(x1)) = (
                on.iter().map(|p| p.0).min(),
                on.iter().map(|p| p.0).max(),
                on.iter().map(|p| p.1).min(),
                on.iter().map(|p| p.1).max(),
            ) {
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        out.set(f, y, x, true);
                    }
                }
            }
        }
    }
    (out, Augmentation { dilation: d, bbox })
}

/// Token layout implied by a world and codec.
pub fn layout_for(world: &WorldConfig, codec: &CodecConfig) -> SequenceLayout {
    SequenceLayout {
        frames: world.frames,
        audio_tokens: world.samples(codec).div_ceil(codec.window),
        grid_h: world.height / codec.patch,
        grid_w: world.width / codec.patch,
        ref_frames: 1,
    }
}

/// A scene in model space.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// `[N_t * cells, C_v]`.
    pub video: Tensor,
    /// `[N_a, C_a]`.
    pub audio: Tensor,
    pub reference: Tensor,
    pub base_audio: Tensor,
    pub mask: PixelMask,
    pub visual_caption: Vec<usize>,
    pub audio_caption: Vec<usize>,
    pub speech_caption: Vec<usize>,
}

impl Example {
    pub fn encode(scene: &Scene, codec: &CodecConfig) -> Result<Self> {
        let audio = AudioEncoder::new(codec);
        Ok(Self {
            video: video_encode(&scene.video, codec)?.to_model(),
            audio: audio.encode(&scene.target_audio)?.to_model(codec),
            reference: video_encode(&scene.reference, codec)?.to_model(),
            base_audio: audio.encode(&scene.base_audio)?.to_model(codec),
            mask: scene.mask.clone(),
            visual_caption: scene.meta.visual_caption.clone(),
            audio_caption: scene.meta.audio_caption.clone(),
            speech_caption: scene.meta.speech_caption.clone(),
        })
    }

    /// Replaces the band token in the audio caption.
    pub fn with_band(mut self, band: usize) -> Self {
        for t in self.audio_caption.iter_mut() {
            if (TOKEN_BAND..TOKEN_IDENTITY).contains(t) {
                *t = TOKEN_BAND + band;
            }
        }
        self
    }

    /// Conditioning with `mask` cut out of the condition video and the base audio present.
    pub fn condition(&self, mask: LatentMask) -> ConditionBundle {
        let mut cond_video = self.video.clone();
        let c = cond_video.cols();
        for (cell, &m) in mask.flags.iter().enumerate() {
            if m {
                cond_video.data_mut()[cell * c..(cell + 1) * c].fill(0.0);
            }
        }
        ConditionBundle {
            visual_caption: self.visual_caption.clone(),
            audio_caption: self.audio_caption.clone(),
            speech_caption: self.speech_caption.clone(),
            base_audio: Some(self.base_audio.clone()),
            reference: self.reference.clone(),
            cond_video,
            mask,
        }
    }
}

/// A point on the straight path from data (`t = 0`) to noise (`t = 1`).
pub fn noise_path(z0: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    z0.zip_map(eps, |a, e| (1.0 - t) * a + t * e)
}

#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub mode: Mode,
    pub t: f64,
    pub state: StreamState,
    /// Velocity targets; `None` for the stream this mode does not score.
    pub video_target: Option<Tensor>,
    pub audio_target: Option<Tensor>,
    pub cond: ConditionBundle,
    pub augmentation: Augmentation,
}

impl TrainBatch {
    pub fn options(&self) -> ForwardOptions {
        ForwardOptions {
            skip_context: self.mode == Mode::ContextNull,
        }
    }
}

pub fn make_batch<R: Rng + ?Sized>(
    ex: &Example,
    mode: Mode,
    rng: &mut R,
    router: &RouterConfig,
    codec: &CodecConfig,
) -> Result<TrainBatch> {
    let t: f64 = rng.gen();
    let eps_v = Tensor::randn(ex.video.shape(), 1.0, rng);
    let eps_a = Tensor::randn(ex.audio.shape(), 1.0, rng);
    let (mask, augmentation) = augment_mask(&ex.mask, rng, router);
    let drop_text = rng.gen_bool(router.text_drop);
    let drop_base = rng.gen_bool(router.base_audio_drop);

    let velocity = |z0: &Tensor, eps: &Tensor| eps.zip_map(z0, |e, z| e - z);
    let (video, t_video, video_target) = if mode == Mode::VideoDriven {
        (ex.video.clone(), 0.0, None)
    } else {
        (noise_path(&ex.video, &eps_v, t)?, t, Some(velocity(&ex.video, &eps_v)?))
    };
    let (audio, t_audio, audio_target) = if mode == Mode::AudioDriven {
        (ex.audio.clone(), 0.0, None)
    } else {
        (noise_path(&ex.audio, &eps_a, t)?, t, Some(velocity(&ex.audio, &eps_a)?))
    };

    let mut cond = ex.condition(mask_to_latent(&mask, codec)?);
    if drop_text {
        cond.drop_text();
    }
    if drop_base || mode == Mode::ContextNull {
        cond.base_audio = None;
    }
    Ok(TrainBatch {
        mode,
        t,
        state: StreamState {
            video,
            audio,
            t_video,
            t_audio,
        },
        video_target,
        audio_target,
        cond,
        augmentation,
    })
}

/// Records the batch loss on `g`: per-stream mean squared error, summed.
pub fn loss_graph(g: &mut Graph, p: &ParamVars, model: &Model, plan: &Plan, batch: &TrainBatch) -> Result<Var> {
    let (v, a) = model.forward_graph(g, p, plan, &batch.state, &batch.cond, batch.options())?;
    let mut terms = Vec::with_capacity(2);
    if let Some(tv) = &batch.video_target {
        let tv = g.constant(tv.clone());
        terms.push(g.mse(v, tv)?);
    }
    if let Some(ta) = &batch.audio_target {
        let ta = g.constant(ta.clone());
        terms.push(g.mse(a, ta)?);
    }
    match terms[..] {
        [one] => Ok(one),
        [x, y] => g.add(x, y),
        _ => Err(Error::invalid("batch scores no stream")),
    }
}

/// Loss value only.
pub fn compute_loss(model: &Model, batch: &TrainBatch) -> Result<f64> {
    let plan = model.plan(&batch.cond.mask)?;
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let loss = loss_graph(&mut g, &p, model, &plan, batch)?;
    Ok(g.value(loss).item())
}

/// Loss and one gradient tensor per parameter.
pub fn loss_and_grads(model: &Model, batch: &TrainBatch) -> Result<(f64, Vec<Tensor>)> {
    let plan = model.plan(&batch.cond.mask)?;
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true);
    let loss = loss_graph(&mut g, &p, model, &plan, batch)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("{} loss", batch.mode)));
    }
    let grads = g.backward(loss)?;
    Ok((value, (0..model.params.len()).map(|i| grads.wrt(p.get(i))).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Cosine decay from `lr` to 0 over the run; constant otherwise.
    pub cosine: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
            cosine: true,
        }
    }
}

impl OptimizerConfig {
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if !self.cosine || total == 0 {
            return self.lr;
        }
        self.lr * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos())
    }
}

/// Adam with bias correction and decoupled weight decay.
pub struct Adam {
    pub config: OptimizerConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(config: OptimizerConfig, params: &crate::model::ParamStore) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Clips `grads` in place; returns the norm before clipping.
    pub fn clip(&self, grads: &mut [Tensor]) -> f64 {
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let c = self.config.clip_norm;
        if c > 0.0 && norm > c {
            let s = c / norm;
            for g in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
        norm
    }

    pub fn update(&mut self, params: &mut crate::model::ParamStore, grads: &[Tensor], lr: f64) {
        let c = &self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let step = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *p -= lr * (step + c.weight_decay * *p);
            }
        }
    }
}

/// Everything a training run needs besides data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub router: RouterConfig,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            router: RouterConfig::default(),
            optimizer: OptimizerConfig::default(),
            steps: 2000,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub mode: Mode,
    pub loss: f64,
    pub grad_norm: f64,
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: Adam,
    pub router: RouterConfig,
    pub codec: CodecConfig,
    pub total_steps: usize,
    pub step: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, cfg: &TrainConfig, codec: &CodecConfig) -> Result<Self> {
        cfg.router.validate()?;
        let optimizer = Adam::new(cfg.optimizer.clone(), &model.params);
        Ok(Self {
            model,
            optimizer,
            router: cfg.router.clone(),
            codec: codec.clone(),
            total_steps: cfg.steps,
            step: 0,
            // Offset so batch draws do not replay the parameter-init stream.
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7452_4149_4e00_0000),
        })
    }

    /// Draws a scene and a mode, then takes one optimizer step.
    pub fn step(&mut self, examples: &[Example]) -> Result<StepRecord> {
        if examples.is_empty() {
            return Err(Error::invalid("training needs at least one scene"));
        }
        let ex = &examples[self.rng.gen_range(0..examples.len())];
        let mode = sample_mode(&mut self.rng, &self.router);
        let batch = make_batch(ex, mode, &mut self.rng, &self.router, &self.codec)?;
        let (loss, mut grads) = loss_and_grads(&self.model, &batch)
            .map_err(|e| Error::NonFinite(format!("step {}: {e}", self.step + 1)))?;
        let grad_norm = self.optimizer.clip(&mut grads);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("step {}: gradient norm", self.step + 1)));
        }
        if grad_norm > self.optimizer.config.clip_norm && self.optimizer.config.clip_norm > 0.0 {
            log::debug!("step {}: clipped gradient norm {grad_norm:.3}", self.step + 1);
        }
        let lr = self.optimizer.config.lr_at(self.step, self.total_steps);
        self.optimizer.update(&mut self.model.params, &grads, lr);
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            mode,
            loss,
            grad_norm,
        })
    }

    /// Runs the remaining steps, calling `on_step` after each.
    pub fn run(&mut self, examples: &[Example], mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        let mut out = Vec::with_capacity(self.total_steps.saturating_sub(self.step));
        while self.step < self.total_steps {
            let r = self.step(examples)?;
            on_step(&r);
            out.push(r);
        }
        Ok(out)
    }
}

/// Trains a fresh model from `cfg`; returns it with its loss curve.
pub fn train(
    examples: &[Example],
    cfg: &TrainConfig,
    codec: &CodecConfig,
    on_step: impl FnMut(&StepRecord),
) -> Result<(Model, Vec<StepRecord>)> {
    let model = Model::init(cfg.model.clone(), cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg, codec)?;
    let curve = trainer.run(examples, on_step)?;
    Ok((trainer.model, curve))
}

pub fn write_loss_csv(path: &Path, curve: &[StepRecord]) -> Result<()> {
    let mut out = String::from("step,mode,loss\n");
    for r in curve {
        out.push_str(&format!("{},{},{}\n", r.step, r.mode, r.loss));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::file(path, e))
}

/// Mean loss over the first and last `window` steps.
pub fn loss_drop(curve: &[StepRecord], window: usize) -> Option<(f64, f64)> {
    if window == 0 || curve.len() < window {
        return None;
    }
    let mean = |s: &[StepRecord]| s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64;
    Some((mean(&curve[..window]), mean(&curve[curve.len() - window..])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::generate_scene;

    fn small_world() -> WorldConfig {
        WorldConfig {
            frames: 4,
            height: 8,
            width: 8,
            object_size: 2,
            target_events: (1, 2),
            distractor_events: (0, 2),
            ..WorldConfig::default()
        }
    }

    fn small_model(world: &WorldConfig, codec: &CodecConfig) -> ModelConfig {
        ModelConfig {
            blocks: 1,
            dim: 16,
            heads: 2,
            layout: layout_for(world, codec),
            ..ModelConfig::default()
        }
    }

    fn example(seed: u64) -> (Example, CodecConfig) {
        let c = CodecConfig::default();
        let s = generate_scene(seed, &small_world(), &c).unwrap();
        (Example::encode(&s, &c).unwrap(), c)
    }

    #[test]
    fn router_validation() {
        assert!(RouterConfig::default().validate().is_ok());
        let bad = RouterConfig {
            p_joint: 0.5,
            ..RouterConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn degenerate_router_always_joint() {
        let r = RouterConfig {
            p_joint: 1.0,
            p_audio_driven: 0.0,
            p_video_driven: 0.0,
            p_context_null: 0.0,
            ..RouterConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..1000).all(|_| sample_mode(&mut rng, &r) == Mode::Joint));
    }

    #[test]
    fn mode_sequence_is_seeded() {
        let r = RouterConfig::default();
        let draw = |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            (0..50).map(|_| sample_mode(&mut rng, &r)).collect::<Vec<_>>()
        };
        assert_eq!(draw(4), draw(4));
        assert_ne!(draw(4), draw(5));
    }

    #[test]
    fn zero_dilation_without_bbox_is_identity() {
        let (ex, _) = example(2);
        let r = RouterConfig {
            max_dilation: 0,
            bbox_prob: 0.0,
            ..RouterConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment_mask(&ex.mask, &mut rng, &r).0, ex.mask);
    }

    #[test]
    fn path_endpoints_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z0 = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let eps = Tensor::randn(&[5, 4], 1.0, &mut rng);
        assert!(noise_path(&z0, &eps, 0.0).unwrap().bit_eq(&z0));
        assert!(noise_path(&z0, &eps, 1.0).unwrap().bit_eq(&eps));
        let mid = noise_path(&z0, &eps, 0.25).unwrap();
        for ((m, a), e) in mid.data().iter().zip(z0.data()).zip(eps.data()) {
            assert_eq!(*m, 0.75 * a + 0.25 * e);
        }
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let (ex, c) = example(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = make_batch(&ex, Mode::Joint, &mut rng, &RouterConfig::default(), &c).unwrap();
        let mut g = Graph::new();
        let v = g.constant(b.video_target.clone().unwrap());
        let a = g.constant(b.audio_target.clone().unwrap());
        let tv = g.constant(b.video_target.clone().unwrap());
        let ta = g.constant(b.audio_target.clone().unwrap());
        let l1 = g.mse(v, tv).unwrap();
        let l2 = g.mse(a, ta).unwrap();
        let l = g.add(l1, l2).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn audio_driven_loss_ignores_audio_head() {
        let (ex, c) = example(5);
        let w = small_world();
        let m = Model::init(small_model(&w, &c), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = make_batch(&ex, Mode::AudioDriven, &mut rng, &RouterConfig::default(), &c).unwrap();
        let (_, grads) = loss_and_grads(&m, &b).unwrap();
        for i in m.audio_head_params() {
            assert_eq!(grads[i].max_abs(), 0.0, "{}", m.params.name(i));
        }
    }

    #[test]
    fn fresh_model_joint_equals_context_null() {
        let (ex, c) = example(6);
        let w = small_world();
        let m = Model::init(small_model(&w, &c), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let joint = make_batch(&ex, Mode::Joint, &mut rng, &RouterConfig::default(), &c).unwrap();
        let mut null = joint.clone();
        null.mode = Mode::ContextNull;
        null.cond.base_audio = None;
        assert_eq!(
            compute_loss(&m, &joint).unwrap().to_bits(),
            compute_loss(&m, &null).unwrap().to_bits()
        );
    }

    #[test]
    fn zero_steps_leave_model_unchanged_and_runs_repeat() {
        let c = CodecConfig::default();
        let w = small_world();
        let exs: Vec<Example> = (0..4)
            .map(|s| Example::encode(&generate_scene(s, &w, &c).unwrap(), &c).unwrap())
            .collect();
        let mut cfg = TrainConfig {
            model: small_model(&w, &c),
            steps: 0,
            seed: 3,
            ..TrainConfig::default()
        };
        let (m0, curve) = train(&exs, &cfg, &c, |_| {}).unwrap();
        assert!(curve.is_empty());
        assert_eq!(m0.params, Model::init(cfg.model.clone(), 3).unwrap().params);

        cfg.steps = 5;
        let (a, ca) = train(&exs, &cfg, &c, |_| {}).unwrap();
        let (b, cb) = train(&exs, &cfg, &c, |_| {}).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(ca, cb);
        assert_ne!(a.params, m0.params);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let o = OptimizerConfig::default();
        assert_eq!(o.lr_at(0, 100), 1e-3);
        assert!((o.lr_at(50, 100) - 5e-4).abs() < 1e-15);
        assert!(o.lr_at(100, 100).abs() < 1e-15);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let store_shapes = [vec![2, 2], vec![3]];
        let mut grads: Vec<Tensor> = store_shapes.iter().map(|s| Tensor::full(s, 3.0)).collect();
        let adam = Adam {
            config: OptimizerConfig::default(),
            m: vec![],
            v: vec![],
            t: 0,
        };
        let before = adam.clip(&mut grads);
        assert!((before - 63f64.sqrt()).abs() < 1e-12);
        let after: f64 = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_csv_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        let curve = [StepRecord {
            step: 1,
            mode: Mode::AudioDriven,
            loss: 0.5,
            grad_norm: 1.0,
        }];
        write_loss_csv(&p, &curve).unwrap();
        assert_eq!(std::fs::read_to_string(p).unwrap(), "step,mode,loss\n1,audio-driven,0.5\n");
    }
}
