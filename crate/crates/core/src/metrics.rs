//! Interval Ctx-F1, onset-based sync lag and edit-success band checks.

use serde::{Deserialize, Serialize};

use crate::codec::AudioLatent;

/// Envelope energy above which an audio token counts as active.
///
/// Silence sits at `bands * 1e-8`, the base-audio noise floor near `5e-4`,
/// and a token fully covered by a unit-amplitude tone near `0.25`.
pub const ACTIVITY_THRESHOLD: f64 = 1e-2;

/// Sorted, disjoint, non-empty half-open intervals in seconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct IntervalSet {
    spans: Vec<[f64; 2]>,
}

impl From<Vec<[f64; 2]>> for IntervalSet {
    fn from(spans: Vec<[f64; 2]>) -> Self {
        Self::new(spans)
    }
}

impl From<IntervalSet> for Vec<[f64; 2]> {
    fn from(s: IntervalSet) -> Self {
        s.spans
    }
}

impl IntervalSet {
    /// Normalizes: drops empty spans, sorts, merges overlapping or touching ones.
    pub fn new(mut spans: Vec<[f64; 2]>) -> Self {
        spans.retain(|[s, e]| s < e);
        spans.sort_by(|a, b| a[0].total_cmp(&b[0]));
        let mut out: Vec<[f64; 2]> = Vec::with_capacity(spans.len());
        for [s, e] in spans {
            match out.last_mut() {
                Some(last) if s <= last[1] => last[1] = last[1].max(e),
                _ => out.push([s, e]),
            }
        }
        Self { spans: out }
    }

    pub fn spans(&self) -> &[[f64; 2]] {
        &self.spans
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// Total length.
    pub fn measure(&self) -> f64 {
        self.spans.iter().fold(0.0, |acc, [s, e]| acc + (e - s))
    }

    pub fn intersection(&self, other: &IntervalSet) -> IntervalSet {
        let (mut i, mut j) = (0, 0);
        let mut out = Vec::new();
        while i < self.spans.len() && j < other.spans.len() {
            let [a0, a1] = self.spans[i];
            let [b0, b1] = other.spans[j];
            let (s, e) = (a0.max(b0), a1.min(b1));
            if s < e {
                out.push([s, e]);
            }
            if a1 < b1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        Self { spans: out }
    }

    /// Runs of active tokens, each token covering `[j * dur, (j + 1) * dur)`.
    pub fn from_active(active: &[bool], token_duration: f64) -> Self {
        let spans = active
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(j, _)| [j as f64 * token_duration, (j + 1) as f64 * token_duration])
            .collect();
        Self::new(spans)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtxF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision is one minus the fraction of generated activity that overlaps
/// protected activity; recall is the fraction of reference activity covered.
pub fn ctx_f1(generated: &IntervalSet, protected: &IntervalSet, reference: &IntervalSet) -> CtxF1 {
    let g = generated.measure();
    let precision = if g == 0.0 {
        1.0
    } else {
        1.0 - generated.intersection(protected).measure() / g
    };
    let r = reference.measure();
    let recall = if r == 0.0 {
        1.0
    } else {
        generated.intersection(reference).measure() / r
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    CtxF1 {
        precision,
        recall,
        f1,
    }
}

fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Onset times: token `j` where the envelope crosses `max(ratio * median, floor)`
/// from below. The token before the first counts as silent.
pub fn extract_onsets(envelope: &[f64], ratio: f64, floor: f64, token_duration: f64) -> Vec<f64> {
    assert!(ratio > 1.0, "onset ratio must exceed 1");
    let threshold = (ratio * median(envelope)).max(floor);
    let mut prev_above = false;
    let mut out = Vec::new();
    for (j, &e) in envelope.iter().enumerate() {
        let above = e > threshold;
        if above && !prev_above {
            out.push(j as f64 * token_duration);
        }
        prev_above = above;
    }
    out
}

/// Best integer shift of `audio` relative to `visual` (frame bins).
///
/// Events match when they land in the same frame after shifting. Ties go to
/// the smaller `|lag|`, then to the negative lag. Returns `(lag, score)` with
/// `score = matches / max(|visual|, |audio|)`, or `(0, 0)` when either side is empty.
pub fn sync_lag(visual: &[i64], audio: &[i64], max_lag: i64) -> (i64, f64) {
    assert!(max_lag >= 1, "max_lag must be at least 1");
    let dedup = |x: &[i64]| {
        let mut v = x.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    let (v, a) = (dedup(visual), dedup(audio));
    if v.is_empty() || a.is_empty() {
        return (0, 0.0);
    }
    let matches = |lag: i64| v.iter().filter(|&&x| a.binary_search(&(x + lag)).is_ok()).count();
    let mut best = (0, matches(0));
    for mag in 1..=max_lag {
        for lag in [-mag, mag] {
            let m = matches(lag);
            if m > best.1 {
                best = (lag, m);
            }
        }
    }
    (best.0, best.1 as f64 / v.len().max(a.len()) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandCheck {
    pub dominant: bool,
    /// Mean feature of the instructed band minus the strongest other band.
    pub margin: f64,
}

/// Whether band `k` has the highest mean log-energy over active tokens.
pub fn band_dominance(latent: &AudioLatent, k: usize) -> BandCheck {
    let c = latent.channels();
    assert!(k < c, "band {k} out of range for {c} bands");
    let env = crate::codec::audio_envelope(latent);
    let active: Vec<&[f64]> = latent
        .values
        .data()
        .chunks(c)
        .zip(&env)
        .filter(|(_, &e)| e > ACTIVITY_THRESHOLD)
        .map(|(row, _)| row)
        .collect();
    if active.is_empty() {
        return BandCheck {
            dominant: false,
            margin: 0.0,
        };
    }
    let mean = |b: usize| active.iter().map(|r| r[b]).sum::<f64>() / active.len() as f64;
    let mk = mean(k);
    let margin = (0..c)
        .filter(|&b| b != k)
        .map(|b| mk - mean(b))
        .fold(f64::INFINITY, f64::min);
    BandCheck {
        dominant: margin > 0.0,
        margin,
    }
}

/// Everything `eval` reports; optional parts are absent when their inputs were.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub ctx_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sync_lag: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sync_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band_dominance: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band_margin: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_forwards: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_curve: Option<String>,
}
