//! Edit one scene end to end and score the result.

use serde::{Deserialize, Serialize};

use crate::codec::{audio_envelope, mask_to_latent, video_decode, AudioLatent, CodecConfig, VideoLatent};
use crate::error::{Error, Result};
use crate::metrics::{
    band_dominance, ctx_f1, extract_onsets, sync_lag, BandCheck, CtxF1, IntervalSet, MetricsReport,
    ACTIVITY_THRESHOLD,
};
use crate::model::Model;
use crate::sampler::{sample, GuidanceConfig, PassAccounting};
use crate::tensor::Tensor;
use crate::train::Example;
use crate::world::{Scene, WorldConfig};

/// Onsets need the envelope to rise this far above its median.
pub const ONSET_RATIO: f64 = 10.0;
/// Largest audio-visual shift searched, in frames.
pub const MAX_SYNC_LAG: i64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditScores {
    pub band: usize,
    pub visual_events: Vec<i64>,
    pub audio_events: Vec<i64>,
    pub sync_lag: i64,
    pub sync_score: f64,
    pub band_check: BandCheck,
    pub ctx: CtxF1,
    pub generated: IntervalSet,
}

impl EditScores {
    /// Synchronized: events on both sides, best shift within one frame.
    pub fn in_sync(&self) -> bool {
        self.sync_score > 0.0 && self.sync_lag.abs() <= 1
    }

    pub fn report(&self, accounting: Option<&PassAccounting>) -> MetricsReport {
        MetricsReport {
            precision: self.ctx.precision,
            recall: self.ctx.recall,
            ctx_f1: self.ctx.f1,
            sync_lag: Some(self.sync_lag),
            sync_score: Some(self.sync_score),
            band_dominance: Some(self.band_check.dominant),
            band_margin: Some(self.band_check.margin),
            total_forwards: accounting.map(|a| a.total),
            loss_curve: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EditOutput {
    /// Model-space target latents.
    pub video: Tensor,
    pub audio: Tensor,
    /// Decoded grayscale frames, `[F, H, W]`, clamped to `[0, 1]`.
    pub pixels: Tensor,
    pub envelope: Vec<f64>,
    pub accounting: PassAccounting,
    pub scores: EditScores,
}

/// Frames whose mean brightness inside the scene mask crosses the midpoint of the blink levels.
pub fn blink_frames(pixels: &Tensor, scene: &Scene, world: &WorldConfig) -> Vec<i64> {
    let m = &scene.mask;
    let threshold = 0.5 * (world.on_level + world.off_level);
    (0..m.frames)
        .filter(|&f| {
            let (mut sum, mut n) = (0.0, 0usize);
            for y in 0..m.height {
                for x in 0..m.width {
                    if m.get(f, y, x) {
                        sum += pixels.data()[(f * m.height + y) * m.width + x];
                        n += 1;
                    }
                }
            }
            n > 0 && sum / n as f64 > threshold
        })
        .map(|f| f as i64)
        .collect()
}

/// Scores decoded outputs against the scene's ground truth.
pub fn score(
    pixels: &Tensor,
    audio: &AudioLatent,
    scene: &Scene,
    world: &WorldConfig,
    codec: &CodecConfig,
    band: usize,
) -> EditScores {
    let env = audio_envelope(audio);
    let tok = codec.token_duration();
    let fd = codec.frame_duration();
    let active: Vec<bool> = env.iter().map(|&e| e > ACTIVITY_THRESHOLD).collect();
    let generated = IntervalSet::from_active(&active, tok);
    let audio_events: Vec<i64> = extract_onsets(&env, ONSET_RATIO, ACTIVITY_THRESHOLD, tok)
        .iter()
        .map(|&t| (t / fd + 1e-9).floor() as i64)
        .collect();
    let visual_events = blink_frames(pixels, scene, world);
    let (lag, sync_score) = sync_lag(&visual_events, &audio_events, MAX_SYNC_LAG);
    EditScores {
        band,
        sync_lag: lag,
        sync_score,
        band_check: band_dominance(audio, band),
        ctx: ctx_f1(&generated, &scene.meta.protected_intervals, &scene.meta.target_intervals),
        generated,
        visual_events,
        audio_events,
    }
}

/// Regenerates the masked target and its audio, optionally asking for another band.
pub fn edit_scene(
    model: &Model,
    scene: &Scene,
    world: &WorldConfig,
    codec: &CodecConfig,
    band: Option<usize>,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<EditOutput> {
    let band = band.unwrap_or(scene.meta.band);
    if band >= codec.bands {
        return Err(Error::invalid(format!("band {band} outside 0..{}", codec.bands)));
    }
    let ex = Example::encode(scene, codec)?.with_band(band);
    let cond = ex.condition(mask_to_latent(&scene.mask, codec)?);
    let out = sample(model, &cond, codec, guidance, seed)?;
    let l = &model.config.layout;
    let latent = VideoLatent::from_model(&out.video, l.frames, (l.grid_h, l.grid_w))?;
    let pixels = video_decode(&latent, codec)?.map(|v| v.clamp(0.0, 1.0));
    let audio = AudioLatent::from_model(&out.audio, codec);
    let scores = score(&pixels, &audio, scene, world, codec, band);
    Ok(EditOutput {
        envelope: audio_envelope(&audio),
        video: out.video,
        audio: out.audio,
        pixels,
        accounting: out.accounting,
        scores,
    })
}
