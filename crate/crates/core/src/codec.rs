//! Deterministic toy codecs standing in for the video and audio autoencoders.
//!
//! Video: lossless 2x2 space-to-channel patchify, no temporal compression.
//! Audio: log band energies of non-overlapping windows. The "decoder" is the
//! per-token energy envelope, which is all the metrics need.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Energy floor applied before the log.
pub const ENERGY_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub sample_rate: usize,
    pub window: usize,
    pub bands: usize,
    pub fps: usize,
    pub patch: usize,
    /// Model-space audio latent is `(feature - audio_shift) / audio_scale`.
    pub audio_shift: f64,
    pub audio_scale: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            window: 250,
            bands: 8,
            fps: 8,
            patch: 2,
            audio_shift: -10.0,
            audio_scale: 5.0,
        }
    }
}

impl CodecConfig {
    pub fn channels_video(&self) -> usize {
        self.patch * self.patch
    }

    /// Seconds covered by one audio token.
    pub fn token_duration(&self) -> f64 {
        self.window as f64 / self.sample_rate as f64
    }

    pub fn frame_duration(&self) -> f64 {
        1.0 / self.fps as f64
    }

    /// Band index of DFT bin `k` (1-based; DC is excluded).
    pub fn band_of_bin(&self, k: usize) -> usize {
        let half = self.window / 2;
        ((k - 1) * self.bands / half).min(self.bands - 1)
    }

    /// A bin-aligned frequency in Hz at the middle of band `b`.
    pub fn band_center_hz(&self, b: usize) -> f64 {
        let half = self.window / 2;
        let lo = (b * half).div_ceil(self.bands) + 1;
        let hi = ((b + 1) * half).div_ceil(self.bands);
        let bin = (lo + hi) / 2;
        bin as f64 * self.sample_rate as f64 / self.window as f64
    }
}

/// `[frames, grid_h, grid_w, channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoLatent {
    pub values: Tensor,
}

impl VideoLatent {
    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.values.shape()[1], self.values.shape()[2])
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[3]
    }

    /// Model-space values, `2x - 1`, flattened to `[tokens, channels]`.
    pub fn to_model(&self) -> Tensor {
        let c = self.channels();
        self.values
            .map(|v| 2.0 * v - 1.0)
            .reshape(&[self.values.len() / c, c])
            .expect("non-empty latent")
    }

    pub fn from_model(t: &Tensor, frames: usize, grid: (usize, usize)) -> Result<Self> {
        let c = t.cols();
        let values = t
            .map(|v| (v + 1.0) / 2.0)
            .reshape(&[frames, grid.0, grid.1, c])?;
        Ok(Self { values })
    }
}

/// `[tokens, bands]` of log band energies.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioLatent {
    pub values: Tensor,
}

impl AudioLatent {
    pub fn tokens(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn to_model(&self, cfg: &CodecConfig) -> Tensor {
        self.values
            .map(|v| (v - cfg.audio_shift) / cfg.audio_scale)
    }

    pub fn from_model(t: &Tensor, cfg: &CodecConfig) -> Self {
        Self {
            values: t.map(|v| v * cfg.audio_scale + cfg.audio_shift),
        }
    }
}

/// Per-pixel edit mask, `[frames, height, width]` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelMask {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub flags: Vec<bool>,
}

impl PixelMask {
    pub fn empty(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            flags: vec![false; frames * height * width],
        }
    }

    pub fn get(&self, f: usize, y: usize, x: usize) -> bool {
        self.flags[(f * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, f: usize, y: usize, x: usize, v: bool) {
        self.flags[(f * self.height + y) * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&b| b).count()
    }

    /// True when every masked pixel of `other` is masked here.
    pub fn contains(&self, other: &PixelMask) -> bool {
        self.flags.len() == other.flags.len()
            && self.flags.iter().zip(&other.flags).all(|(&a, &b)| a || !b)
    }
}

/// Per-latent-cell mask, `[frames, grid_h, grid_w]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentMask {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub flags: Vec<bool>,
}

impl LatentMask {
    pub fn empty(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            flags: vec![false; frames * height * width],
        }
    }

    pub fn full(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            flags: vec![true; frames * height * width],
        }
    }

    pub fn is_empty(&self) -> bool {
        !self.flags.iter().any(|&b| b)
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&b| b).count()
    }

    /// Flat indices of masked cells in frame-major order.
    pub fn indices(&self) -> Vec<usize> {
        self.flags
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

/// Grayscale `[F, H, W]` in `[0, 1]` to `[F, H/2, W/2, 4]`.
pub fn video_encode(pixels: &Tensor, cfg: &CodecConfig) -> Result<VideoLatent> {
    let p = cfg.patch;
    let [f, h, w] = pixels.shape() else {
        return Err(Error::invalid(format!(
            "video_encode expects [F, H, W], got {:?}",
            pixels.shape()
        )));
    };
    let (f, h, w) = (*f, *h, *w);
    if h % p != 0 || w % p != 0 {
        return Err(Error::invalid(format!(
            "video_encode: {h}x{w} is not divisible by patch {p}"
        )));
    }
    let (hl, wl, c) = (h / p, w / p, p * p);
    let src = pixels.data();
    let mut out = vec![0.0; f * h * w];
    for fi in 0..f {
        for y in 0..h {
            for x in 0..w {
                let cell = (fi * hl + y / p) * wl + x / p;
                let ch = (y % p) * p + x % p;
                out[cell * c + ch] = src[(fi * h + y) * w + x];
            }
        }
    }
    Ok(VideoLatent {
        values: Tensor::new(vec![f, hl, wl, c], out)?,
    })
}

pub fn video_decode(latent: &VideoLatent, cfg: &CodecConfig) -> Result<Tensor> {
    let p = cfg.patch;
    if latent.channels() != p * p {
        return Err(Error::invalid(format!(
            "video_decode: {} channels for patch {p}",
            latent.channels()
        )));
    }
    let f = latent.frames();
    let (hl, wl) = latent.grid();
    let (h, w, c) = (hl * p, wl * p, p * p);
    let src = latent.values.data();
    let mut out = vec![0.0; f * h * w];
    for fi in 0..f {
        for y in 0..h {
            for x in 0..w {
                let cell = (fi * hl + y / p) * wl + x / p;
                out[(fi * h + y) * w + x] = src[cell * c + (y % p) * p + x % p];
            }
        }
    }
    Tensor::new(vec![f, h, w], out)
}

/// Reusable audio encoder; holds the FFT plan for one window length.
pub struct AudioEncoder {
    cfg: CodecConfig,
    fft: Arc<dyn Fft<f64>>,
}

impl AudioEncoder {
    pub fn new(cfg: &CodecConfig) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(cfg.window);
        Self {
            cfg: cfg.clone(),
            fft,
        }
    }

    /// One token per non-overlapping window; the last window is zero-padded.
    pub fn encode(&self, signal: &[f64]) -> Result<AudioLatent> {
        if signal.is_empty() {
            return Err(Error::invalid("audio_encode: empty signal"));
        }
        let n = self.cfg.window;
        let tokens = signal.len().div_ceil(n);
        let norm = (n * n) as f64;
        let mut feats = Vec::with_capacity(tokens * self.cfg.bands);
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for chunk in signal.chunks(n) {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(chunk.get(i).copied().unwrap_or(0.0), 0.0);
            }
            self.fft.process(&mut buf);
            let mut energy = vec![0.0; self.cfg.bands];
            for (k, x) in buf.iter().enumerate().take(n / 2 + 1).skip(1) {
                energy[self.cfg.band_of_bin(k)] += x.norm_sqr() / norm;
            }
            feats.extend(energy.into_iter().map(|e| e.max(ENERGY_FLOOR).ln()));
        }
        Ok(AudioLatent {
            values: Tensor::new(vec![tokens, self.cfg.bands], feats)?,
        })
    }
}

pub fn audio_encode(signal: &[f64], cfg: &CodecConfig) -> Result<AudioLatent> {
    AudioEncoder::new(cfg).encode(signal)
}

/// Per-token total band energy.
pub fn audio_envelope(latent: &AudioLatent) -> Vec<f64> {
    let c = latent.channels();
    latent
        .values
        .data()
        .chunks(c)
        .map(|row| row.iter().map(|v| v.exp()).sum())
        .collect()
}

/// OR-pools each `patch x patch` block of pixels into one latent cell.
pub fn mask_to_latent(mask: &PixelMask, cfg: &CodecConfig) -> Result<LatentMask> {
    let p = cfg.patch;
    if mask.height % p != 0 || mask.width % p != 0 {
        return Err(Error::invalid(format!(
            "mask_to_latent: {}x{} is not divisible by patch {p}",
            mask.height, mask.width
        )));
    }
    let (hl, wl) = (mask.height / p, mask.width / p);
    let mut out = LatentMask::empty(mask.frames, hl, wl);
    for f in 0..mask.frames {
        for y in 0..mask.height {
            for x in 0..mask.width {
                if mask.get(f, y, x) {
                    out.flags[(f * hl + y / p) * wl + x / p] = true;
                }
            }
        }
    }
    Ok(out)
}
