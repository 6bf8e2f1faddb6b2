#![allow(dead_code)]

use avedit::codec::LatentMask;
use avedit::model::{ConditionBundle, Model, ModelConfig, StreamState, NULL_TOKEN};
use avedit::rope::SequenceLayout;
use avedit::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A two-block model over a 4-frame, 4x4-cell, 8-token layout.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        blocks: 2,
        dim: 24,
        heads: 2,
        vocab: 32,
        caption_len: 4,
        context_window: 4,
        layout: SequenceLayout {
            frames: 4,
            audio_tokens: 8,
            grid_h: 4,
            grid_w: 4,
            ref_frames: 1,
        },
        ..ModelConfig::default()
    }
}

/// Random mask with at least one masked and one unmasked cell.
pub fn random_mask(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> LatentMask {
    let l = &cfg.layout;
    let mut m = LatentMask::empty(l.frames, l.grid_h, l.grid_w);
    for f in m.flags.iter_mut() {
        *f = rng.gen_bool(0.4);
    }
    m.flags[0] = true;
    let last = m.flags.len() - 1;
    m.flags[last] = false;
    m
}

pub fn random_inputs(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> (StreamState, ConditionBundle) {
    let l = &cfg.layout;
    let (cv, ca) = (cfg.video_channels, cfg.audio_channels);
    let mask = random_mask(cfg, rng);
    let mut cond_video = Tensor::randn(&[l.frame_tokens(), cv], 1.0, rng);
    for (i, &m) in mask.flags.iter().enumerate() {
        if m {
            cond_video.data_mut()[i * cv..(i + 1) * cv].fill(0.0);
        }
    }
    let caption = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let mut c: Vec<usize> = (0..cfg.caption_len).map(|_| rng.gen_range(1..cfg.vocab)).collect();
        c[cfg.caption_len - 1] = NULL_TOKEN;
        c
    };
    let cond = ConditionBundle {
        visual_caption: caption(rng),
        audio_caption: caption(rng),
        speech_caption: caption(rng),
        base_audio: Some(Tensor::randn(&[l.audio_tokens, ca], 1.0, rng)),
        reference: Tensor::randn(&[l.cells(), cv], 1.0, rng),
        cond_video,
        mask,
    };
    let state = StreamState {
        video: Tensor::randn(&[l.frame_tokens(), cv], 1.0, rng),
        audio: Tensor::randn(&[l.audio_tokens, ca], 1.0, rng),
        t_video: rng.gen(),
        t_audio: rng.gen(),
    };
    (state, cond)
}

/// Replaces every parameter, zero-initialized ones included, with random values.
pub fn scramble(model: &mut Model, std: f64, rng: &mut ChaCha8Rng) {
    for t in model.params.iter_mut() {
        *t = Tensor::randn(t.shape(), std, rng);
    }
}
