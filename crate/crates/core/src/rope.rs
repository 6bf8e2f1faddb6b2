//! Temporal position assignment shared by both streams, and rotary
//! embedding over continuous positions.
//!
//! Video tokens carry `(t, h, w)`; audio tokens carry `(t, 0, 0)`. With the
//! aligned scheme, condition and target frame `i` both sit at `t = i`, the
//! reference image at `t = 0`, and audio token `j` at `j * N_t / N_a`, so a
//! beep and the frame it belongs to land at nearly the same rotary phase.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::RotaryCoeffs;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    Reference,
    Condition,
    Target,
    Audio,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionScheme {
    /// Condition and target share frame indices; audio is rescaled onto frames.
    #[default]
    Aligned,
    /// Sequential indices: targets follow conditions, audio counts tokens.
    Naive,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceLayout {
    /// Target (and condition) video frames, `N_t`.
    pub frames: usize,
    /// Audio tokens, `N_a`.
    pub audio_tokens: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub ref_frames: usize,
}

impl Default for SequenceLayout {
    fn default() -> Self {
        Self {
            frames: 8,
            audio_tokens: 32,
            grid_h: 8,
            grid_w: 8,
            ref_frames: 1,
        }
    }
}

impl SequenceLayout {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0
            || self.audio_tokens == 0
            || self.grid_h == 0
            || self.grid_w == 0
            || self.ref_frames != 1
        {
            return Err(Error::invalid(format!("invalid sequence layout {self:?}")));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn ref_tokens(&self) -> usize {
        self.ref_frames * self.cells()
    }

    pub fn frame_tokens(&self) -> usize {
        self.frames * self.cells()
    }

    pub fn video_tokens(&self) -> usize {
        self.ref_tokens() + 2 * self.frame_tokens()
    }

    /// Frames per audio token, `N_t / N_a`.
    pub fn frame_ratio(&self) -> f64 {
        self.frames as f64 / self.audio_tokens as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenPosition {
    pub t: f64,
    pub h: usize,
    pub w: usize,
    pub segment: Segment,
}

/// Positions for the whole joint sequence: `[reference | condition | target | audio]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionTable {
    pub layout: SequenceLayout,
    pub scheme: PositionScheme,
    pub tokens: Vec<TokenPosition>,
}

impl PositionTable {
    pub fn range(&self, seg: Segment) -> Range<usize> {
        let l = &self.layout;
        let (r, f) = (l.ref_tokens(), l.frame_tokens());
        match seg {
            Segment::Reference => 0..r,
            Segment::Condition => r..r + f,
            Segment::Target => r + f..r + 2 * f,
            Segment::Audio => r + 2 * f..r + 2 * f + l.audio_tokens,
        }
    }

    pub fn segment(&self, seg: Segment) -> &[TokenPosition] {
        &self.tokens[self.range(seg)]
    }

    /// Reference, condition and target tokens in sequence order.
    pub fn video(&self) -> &[TokenPosition] {
        &self.tokens[..self.layout.video_tokens()]
    }

    pub fn audio(&self) -> &[TokenPosition] {
        self.segment(Segment::Audio)
    }
}

pub fn assign_positions(layout: &SequenceLayout, scheme: PositionScheme) -> PositionTable {
    let mut tokens = Vec::with_capacity(layout.video_tokens() + layout.audio_tokens);
    let frame = |tokens: &mut Vec<TokenPosition>, t: f64, segment: Segment| {
        for h in 0..layout.grid_h {
            for w in 0..layout.grid_w {
                tokens.push(TokenPosition { t, h, w, segment });
            }
        }
    };
    for _ in 0..layout.ref_frames {
        frame(&mut tokens, 0.0, Segment::Reference);
    }
    for i in 1..=layout.frames {
        frame(&mut tokens, i as f64, Segment::Condition);
    }
    let target_offset = match scheme {
        PositionScheme::Aligned => 0.0,
        PositionScheme::Naive => layout.frames as f64,
    };
    for i in 1..=layout.frames {
        frame(&mut tokens, target_offset + i as f64, Segment::Target);
    }
    // One rounding of the exact quotient j * N_t / N_a.
    let audio_t = |j: usize| match scheme {
        PositionScheme::Aligned => (j * layout.frames) as f64 / layout.audio_tokens as f64,
        PositionScheme::Naive => j as f64,
    };
    for j in 1..=layout.audio_tokens {
        tokens.push(TokenPosition {
            t: audio_t(j),
            h: 0,
            w: 0,
            segment: Segment::Audio,
        });
    }
    PositionTable {
        layout: layout.clone(),
        scheme,
        tokens,
    }
}

/// Number of rotary pairs per axis inside one head.
///
/// The pairs are split evenly over (temporal, height, width); leftover pairs
/// go to the temporal axis. Audio tokens have `h = w = 0`, so only their
/// temporal pairs rotate, using the same frequencies as video.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RotarySplit {
    pub temporal: usize,
    pub height: usize,
    pub width: usize,
}

impl RotarySplit {
    pub fn new(head_dim: usize) -> Result<Self> {
        if head_dim % 2 != 0 || head_dim < 6 {
            return Err(Error::invalid(format!(
                "rotary: head_dim {head_dim} must be even and hold one pair per axis"
            )));
        }
        let pairs = head_dim / 2;
        let per = pairs / 3;
        Ok(Self {
            temporal: pairs - 2 * per,
            height: per,
            width: per,
        })
    }

    pub fn pairs(&self) -> usize {
        self.temporal + self.height + self.width
    }
}

fn axis_freqs(pairs: usize, base: f64) -> impl Iterator<Item = f64> {
    (0..pairs).map(move |k| base.powf(-(k as f64) / pairs as f64))
}

/// Cos/sin coefficients for `positions` under `split`.
pub fn rotary_coeffs(positions: &[TokenPosition], split: RotarySplit, base: f64) -> RotaryCoeffs {
    let pairs = split.pairs();
    let mut cos = Vec::with_capacity(positions.len() * pairs);
    let mut sin = Vec::with_capacity(positions.len() * pairs);
    for p in positions {
        let angles = axis_freqs(split.temporal, base)
            .map(|f| f * p.t)
            .chain(axis_freqs(split.height, base).map(|f| f * p.h as f64))
            .chain(axis_freqs(split.width, base).map(|f| f * p.w as f64));
        for a in angles {
            cos.push(a.cos());
            sin.push(a.sin());
        }
    }
    RotaryCoeffs {
        rows: positions.len(),
        pairs,
        cos,
        sin,
    }
}

/// Rotates `x: [tokens, heads, head_dim]` by the rotary angles of `positions`.
pub fn apply_rotary(x: &Tensor, positions: &[TokenPosition], base: f64) -> Result<Tensor> {
    let [n, heads, hd] = x.shape() else {
        return Err(Error::invalid(format!(
            "apply_rotary expects [tokens, heads, head_dim], got {:?}",
            x.shape()
        )));
    };
    if *n != positions.len() {
        return Err(Error::invalid(format!(
            "apply_rotary: {n} tokens but {} positions",
            positions.len()
        )));
    }
    let split = RotarySplit::new(*hd)?;
    let c = rotary_coeffs(positions, split, base);
    let mut out = x.clone();
    let cols = heads * hd;
    for (r, row) in out.data_mut().chunks_mut(cols).enumerate() {
        for head in row.chunks_mut(*hd) {
            for p in 0..c.pairs {
                let (cs, sn) = (c.cos[r * c.pairs + p], c.sin[r * c.pairs + p]);
                let (x0, x1) = (head[2 * p], head[2 * p + 1]);
                head[2 * p] = x0 * cs - x1 * sn;
                head[2 * p + 1] = x0 * sn + x1 * cs;
            }
        }
    }
    Ok(out)
}

/// Grouped-window admissibility in frame units: `|p_k - p_q| <= group * window / 2`.
pub fn within_group(p_query: f64, p_key: f64, group_size: f64, window: f64) -> bool {
    (p_key - p_query).abs() <= group_size * window / 2.0 + 1e-9
}
