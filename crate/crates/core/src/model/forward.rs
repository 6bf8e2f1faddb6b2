use std::rc::Rc;

use crate::autodiff::{Graph, RotaryCoeffs, Var};
use crate::codec::LatentMask;
use crate::error::{Error, Result};
use crate::rope::{
    assign_positions, rotary_coeffs, within_group, PositionTable, RotarySplit, Segment,
};
use crate::tensor::Tensor;

use super::params::{Attention, Linear, Mlp, ParamVars, AUDIO_SUBLAYERS, VIDEO_SUBLAYERS};
use super::{ConditionBundle, Model, ModelConfig, Prediction, StreamState, NULL_TOKEN};

/// Timesteps are scaled before the sinusoidal embedding so that `[0, 1]`
/// covers many periods of the fastest frequency.
const TIME_SCALE: f64 = 1000.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Bypass both context layers, as if no base audio or condition video existed.
    pub skip_context: bool,
}

/// Positions, rotary tables and attention masks for one edit mask.
///
/// Attention masks are `true` where a key is blocked.
#[derive(Clone, Debug)]
pub struct Plan {
    pub positions: PositionTable,
    pub mask: LatentMask,
    /// Sequence indices of masked target tokens.
    masked: Rc<[usize]>,
    /// Per video token: 0 for reference/condition (clean), 1 for target.
    mod_rows: Rc<[usize]>,
    rot_video: Rc<RotaryCoeffs>,
    rot_masked: Option<Rc<RotaryCoeffs>>,
    rot_target: Rc<RotaryCoeffs>,
    rot_cond: Rc<RotaryCoeffs>,
    rot_audio: Rc<RotaryCoeffs>,
    video_self: Rc<[bool]>,
    a2v: Option<Rc<[bool]>>,
    v2a: Rc<[bool]>,
    acoustic: Rc<[bool]>,
}

impl Plan {
    pub fn new(cfg: &ModelConfig, mask: &LatentMask) -> Result<Self> {
        let l = &cfg.layout;
        if (mask.frames, mask.height, mask.width) != (l.frames, l.grid_h, l.grid_w) {
            return Err(Error::invalid(format!(
                "mask is {}x{}x{}, layout expects {}x{}x{}",
                mask.frames, mask.height, mask.width, l.frames, l.grid_h, l.grid_w
            )));
        }
        let positions = assign_positions(l, cfg.scheme);
        let split = RotarySplit::new(cfg.head_dim())?;
        let rot = |p: &[_]| Rc::new(rotary_coeffs(p, split, cfg.rope_base));
        let target = positions.range(Segment::Target);
        let masked: Vec<usize> = mask.indices().iter().map(|i| target.start + i).collect();
        let nv = l.video_tokens();
        let is_masked = {
            let mut f = vec![false; nv];
            masked.iter().for_each(|&i| f[i] = true);
            f
        };
        let video_self: Vec<bool> = (0..nv * nv)
            .map(|k| is_masked[k % nv] && !is_masked[k / nv])
            .collect();
        let audio = positions.audio();
        let window_mask = |queries: &[f64], keys: &[f64], half: f64| -> Rc<[bool]> {
            queries
                .iter()
                .flat_map(|q| keys.iter().map(move |k| !within_group(*q, *k, half, 2.0)))
                .collect()
        };
        let audio_t: Vec<f64> = audio.iter().map(|p| p.t).collect();
        let target_t: Vec<f64> = positions.segment(Segment::Target).iter().map(|p| p.t).collect();
        let masked_pos: Vec<_> = masked.iter().map(|&i| positions.tokens[i]).collect();
        let masked_t: Vec<f64> = masked_pos.iter().map(|p| p.t).collect();
        // Acoustic context works in token units, not frame units.
        let token_idx: Vec<f64> = (0..l.audio_tokens).map(|j| j as f64).collect();
        let plan = Self {
            rot_video: rot(positions.video()),
            rot_masked: (!masked.is_empty()).then(|| rot(&masked_pos)),
            rot_target: rot(positions.segment(Segment::Target)),
            rot_cond: rot(positions.segment(Segment::Condition)),
            rot_audio: rot(audio),
            video_self: video_self.into(),
            a2v: (!masked.is_empty())
                .then(|| window_mask(&masked_t, &audio_t, cfg.a2v.half_width())),
            v2a: window_mask(&audio_t, &target_t, cfg.v2a.half_width()),
            acoustic: window_mask(&token_idx, &token_idx, cfg.context_window as f64 / 2.0),
            mod_rows: (0..nv).map(|i| usize::from(target.contains(&i))).collect(),
            masked: masked.into(),
            mask: mask.clone(),
            positions,
        };
        Ok(plan)
    }

    pub fn masked_tokens(&self) -> &[usize] {
        &self.masked
    }

    /// Blocked flag for audio query `j` against target video token `k`.
    pub fn v2a_blocked(&self, j: usize, k: usize) -> bool {
        self.v2a[j * self.positions.layout.frame_tokens() + k]
    }

    /// Blocked flag for the `q`-th masked token against audio token `j`.
    pub fn a2v_blocked(&self, q: usize, j: usize) -> Option<bool> {
        self.a2v
            .as_ref()
            .map(|m| m[q * self.positions.layout.audio_tokens + j])
    }

    /// Blocked flag for audio query `j` against base-audio token `k`.
    pub fn acoustic_blocked(&self, j: usize, k: usize) -> bool {
        self.acoustic[j * self.positions.layout.audio_tokens + k]
    }
}

/// Sinusoidal embedding of `t` in `dim` columns: `[cos(t f_k) | sin(t f_k)]`.
pub(crate) fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| (-(k as f64) * 10_000f64.ln() / half as f64).exp())
        .collect();
    let arg = |f: f64| t * TIME_SCALE * f;
    freqs
        .iter()
        .map(|&f| arg(f).cos())
        .chain(freqs.iter().map(|&f| arg(f).sin()))
        .collect()
}

/// Modulation rows for one sublayer.
#[derive(Clone, Copy)]
struct Modulation {
    shift: Var,
    scale: Var,
    gate: Var,
    /// Per-token rows (`[n, D]`) rather than a single broadcast row (`[1, D]`).
    per_token: bool,
}

struct Ctx<'a> {
    g: &'a mut Graph,
    p: &'a ParamVars,
    heads: usize,
}

struct AttnInputs<'r> {
    q_rot: Option<&'r Rc<RotaryCoeffs>>,
    k_rot: Option<&'r Rc<RotaryCoeffs>>,
    blocked: Option<&'r Rc<[bool]>>,
}

impl Ctx<'_> {
    fn linear(&mut self, x: Var, l: &Linear) -> Result<Var> {
        let y = self.g.matmul(x, self.p.get(l.w))?;
        match l.b {
            Some(b) => self.g.add_row(y, self.p.get(b)),
            None => Ok(y),
        }
    }

    fn mlp(&mut self, x: Var, m: &Mlp) -> Result<Var> {
        let h = self.linear(x, &m.up)?;
        let h = self.g.silu(h)?;
        self.linear(h, &m.down)
    }

    /// `LN(x) * (1 + scale) + shift`.
    fn modulate(&mut self, x: Var, shift: Var, scale: Var, per_token: bool) -> Result<Var> {
        let n = self.g.layer_norm(x)?;
        let s = self.g.add_scalar(scale, 1.0)?;
        if per_token {
            let y = self.g.mul(n, s)?;
            self.g.add(y, shift)
        } else {
            let y = self.g.mul_row(n, s)?;
            self.g.add_row(y, shift)
        }
    }

    fn gated(&mut self, x: Var, out: Var, m: &Modulation) -> Result<Var> {
        let y = if m.per_token {
            self.g.mul(out, m.gate)?
        } else {
            self.g.mul_row(out, m.gate)?
        };
        self.g.add(x, y)
    }

    fn normed(&mut self, x: Var, m: &Modulation) -> Result<Var> {
        self.modulate(x, m.shift, m.scale, m.per_token)
    }

    /// Multi-head attention from already-normalized queries `xq` and keys/values `xkv`.
    fn attention(&mut self, xq: Var, xkv: Var, a: &Attention, io: AttnInputs<'_>) -> Result<Var> {
        let g = &mut *self.g;
        let mut q = g.matmul(xq, self.p.get(a.q))?;
        let mut k = g.matmul(xkv, self.p.get(a.k))?;
        let v = g.matmul(xkv, self.p.get(a.v))?;
        if let Some(r) = io.q_rot {
            q = g.rotary(q, r.clone(), self.heads)?;
        }
        if let Some(r) = io.k_rot {
            k = g.rotary(k, r.clone(), self.heads)?;
        }
        let hd = g.shape(q)[1] / self.heads;
        let q = g.scale(q, 1.0 / (hd as f64).sqrt())?;
        let o = g.attention(q, k, v, self.heads, io.blocked.cloned())?;
        g.matmul(o, self.p.get(a.o))
    }

    /// `[rows, D]` modulation table from one timestep embedding MLP.
    fn time_features(&mut self, ts: &[f64], mlp: &(Linear, Linear), dim: usize) -> Result<Var> {
        let rows: Vec<Vec<f64>> = ts.iter().map(|&t| timestep_embedding(t, dim)).collect();
        let e = self.g.constant(Tensor::from_rows(&rows)?);
        let h = self.linear(e, &mlp.0)?;
        let h = self.g.silu(h)?;
        let h = self.linear(h, &mlp.1)?;
        self.g.silu(h)
    }

    fn modulations(&mut self, table: Var, sublayers: usize, dim: usize, per_token: bool) -> Result<Vec<Modulation>> {
        (0..sublayers)
            .map(|s| {
                let base = s * 3 * dim;
                Ok(Modulation {
                    shift: self.g.slice_cols(table, base, dim)?,
                    scale: self.g.slice_cols(table, base + dim, dim)?,
                    gate: self.g.slice_cols(table, base + 2 * dim, dim)?,
                    per_token,
                })
            })
            .collect()
    }

    fn text_tokens(&mut self, caption: &[usize], table: Var) -> Result<(Var, Rc<[bool]>)> {
        let ids: Rc<[usize]> = if caption.is_empty() {
            Rc::from([NULL_TOKEN])
        } else {
            caption.into()
        };
        let null: Vec<bool> = ids.iter().map(|&i| i == NULL_TOKEN).collect();
        Ok((self.g.gather(table, ids)?, null.into()))
    }
}

/// Repeats a key mask `[m]` for `rows` queries.
fn key_mask(keys: &[bool], rows: usize) -> Rc<[bool]> {
    (0..rows).flat_map(|_| keys.iter().copied()).collect()
}

fn check_shape(what: &str, t: &Tensor, expected: &[usize]) -> Result<()> {
    if t.shape() != expected {
        return Err(Error::invalid(format!(
            "{what} has shape {:?}, expected {expected:?}",
            t.shape()
        )));
    }
    Ok(())
}

impl Model {
    pub fn plan(&self, mask: &LatentMask) -> Result<Plan> {
        Plan::new(&self.config, mask)
    }

    fn check_inputs(&self, plan: &Plan, state: &StreamState, cond: &ConditionBundle) -> Result<()> {
        let c = &self.config;
        let l = &c.layout;
        let (cv, ca) = (c.video_channels, c.audio_channels);
        if plan.positions.layout != *l || plan.mask != cond.mask {
            return Err(Error::invalid("plan was built for a different layout or mask"));
        }
        check_shape("target video", &state.video, &[l.frame_tokens(), cv])?;
        check_shape("target audio", &state.audio, &[l.audio_tokens, ca])?;
        check_shape("reference", &cond.reference, &[l.cells(), cv])?;
        check_shape("condition video", &cond.cond_video, &[l.frame_tokens(), cv])?;
        if let Some(b) = &cond.base_audio {
            check_shape("base audio", b, &[l.audio_tokens, ca])?;
        }
        for cap in [&cond.visual_caption, &cond.audio_caption, &cond.speech_caption] {
            if let Some(&bad) = cap.iter().find(|&&t| t >= c.vocab) {
                return Err(Error::invalid(format!(
                    "caption token {bad} outside vocabulary of {}",
                    c.vocab
                )));
            }
        }
        Ok(())
    }

    /// Velocity prediction without recording gradients.
    pub fn forward(
        &self,
        plan: &Plan,
        state: &StreamState,
        cond: &ConditionBundle,
        opts: ForwardOptions,
    ) -> Result<Prediction> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let (v, a) = self.forward_graph(&mut g, &p, plan, state, cond, opts)?;
        let pred = Prediction {
            video: g.value(v).clone(),
            audio: g.value(a).clone(),
        };
        if !pred.all_finite() {
            return Err(Error::NonFinite("model prediction".into()));
        }
        Ok(pred)
    }

    /// Records the forward pass on `g`; returns `(video [N_t * cells, C_v], audio [N_a, C_a])`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        plan: &Plan,
        state: &StreamState,
        cond: &ConditionBundle,
        opts: ForwardOptions,
    ) -> Result<(Var, Var)> {
        self.check_inputs(plan, state, cond)?;
        let c = &self.config;
        let l = &self.layers;
        let d = c.dim;
        let nv = c.layout.video_tokens();
        let target = plan.positions.range(Segment::Target);
        let mut cx = Ctx {
            g,
            p,
            heads: c.heads,
        };

        // Embeddings.
        let r_in = cx.g.constant(cond.reference.clone());
        let c_in = cx.g.constant(cond.cond_video.clone());
        let t_in = cx.g.constant(state.video.clone());
        let a_in = cx.g.constant(state.audio.clone());
        let r = cx.linear(r_in, &l.e_ref)?;
        let cv = cx.linear(c_in, &l.e_cond)?;
        let tv = cx.linear(t_in, &l.e_target)?;
        let mut xv = cx.g.concat_rows(&[r, cv, tv])?;
        let mut xa = cx.linear(a_in, &l.e_audio)?;

        let base = if opts.skip_context { None } else { cond.base_audio.as_ref() };
        let base = base.map(|b| cx.g.constant(b.clone()));

        // Timestep features: video rows are [clean, t_video].
        let fv = cx.time_features(&[0.0, state.t_video], &l.t_embed_v, d)?;
        let fa = cx.time_features(&[state.t_audio], &l.t_embed_a, d)?;

        let text = p.get(l.text);
        let (txt_v, null_v) = cx.text_tokens(&cond.visual_caption, text)?;
        let audio_caption: Vec<usize> = cond
            .audio_caption
            .iter()
            .chain(&cond.speech_caption)
            .copied()
            .collect();
        let (txt_a, null_a) = cx.text_tokens(&audio_caption, text)?;
        let text_mask_v = key_mask(&null_v, nv);
        let text_mask_a = key_mask(&null_a, c.layout.audio_tokens);

        for b in &l.blocks {
            let (bv, ba) = (&b.video, &b.audio);
            let mv = cx.linear(fv, &bv.modulation)?;
            let mv = cx.g.gather(mv, plan.mod_rows.clone())?;
            let mv = cx.modulations(mv, VIDEO_SUBLAYERS, d, true)?;
            let ma = cx.linear(fa, &ba.modulation)?;
            let ma = cx.modulations(ma, AUDIO_SUBLAYERS, d, false)?;

            // Self-attention.
            let h = cx.normed(xv, &mv[0])?;
            let io = AttnInputs {
                q_rot: Some(&plan.rot_video),
                k_rot: Some(&plan.rot_video),
                blocked: Some(&plan.video_self),
            };
            let o = cx.attention(h, h, &bv.self_attn, io)?;
            xv = cx.gated(xv, o, &mv[0])?;
            let h = cx.normed(xa, &ma[0])?;
            let io = AttnInputs {
                q_rot: Some(&plan.rot_audio),
                k_rot: Some(&plan.rot_audio),
                blocked: None,
            };
            let o = cx.attention(h, h, &ba.self_attn, io)?;
            xa = cx.gated(xa, o, &ma[0])?;

            // Text cross-attention.
            let h = cx.normed(xv, &mv[1])?;
            let io = AttnInputs {
                q_rot: None,
                k_rot: None,
                blocked: Some(&text_mask_v),
            };
            let o = cx.attention(h, txt_v, &bv.text_attn, io)?;
            xv = cx.gated(xv, o, &mv[1])?;
            let h = cx.normed(xa, &ma[1])?;
            let io = AttnInputs {
                q_rot: None,
                k_rot: None,
                blocked: Some(&text_mask_a),
            };
            let o = cx.attention(h, txt_a, &ba.text_attn, io)?;
            xa = cx.gated(xa, o, &ma[1])?;

            // Cross-modal attention; both directions read the pre-exchange states.
            let (xv0, xa0) = (xv, xa);
            if let (Some(rot), Some(blocked)) = (&plan.rot_masked, &plan.a2v) {
                let h = cx.normed(xv0, &mv[2])?;
                let hq = cx.g.gather(h, plan.masked.clone())?;
                let kv = cx.g.layer_norm(xa0)?;
                let io = AttnInputs {
                    q_rot: Some(rot),
                    k_rot: Some(&plan.rot_audio),
                    blocked: Some(blocked),
                };
                let o = cx.attention(hq, kv, &bv.a2v, io)?;
                let o = cx.g.scatter(o, plan.masked.clone(), nv)?;
                xv = cx.gated(xv, o, &mv[2])?;
            }
            {
                let h = cx.normed(xa0, &ma[2])?;
                let tgt = cx.g.slice_rows(xv0, target.start, target.len())?;
                let tgt = cx.g.detach(tgt)?;
                let kv = cx.g.layer_norm(tgt)?;
                let io = AttnInputs {
                    q_rot: Some(&plan.rot_audio),
                    k_rot: Some(&plan.rot_target),
                    blocked: Some(&plan.v2a),
                };
                let o = cx.attention(h, kv, &ba.v2a, io)?;
                xa = cx.gated(xa, o, &ma[2])?;
            }

            // Context attention reads raw condition latents.
            if !opts.skip_context {
                let h = cx.normed(xa, &ma[3])?;
                let io = AttnInputs {
                    q_rot: Some(&plan.rot_audio),
                    k_rot: Some(&plan.rot_cond),
                    blocked: None,
                };
                let o = cx.attention(h, c_in, &ba.vis_ctx, io)?;
                xa = cx.gated(xa, o, &ma[3])?;
            }
            if let Some(base) = base {
                let h = cx.normed(xa, &ma[4])?;
                let io = AttnInputs {
                    q_rot: Some(&plan.rot_audio),
                    k_rot: Some(&plan.rot_audio),
                    blocked: Some(&plan.acoustic),
                };
                let o = cx.attention(h, base, &ba.ac_ctx, io)?;
                xa = cx.gated(xa, o, &ma[4])?;
            }

            // MLPs.
            let h = cx.normed(xv, &mv[3])?;
            let o = cx.mlp(h, &bv.mlp)?;
            xv = cx.gated(xv, o, &mv[3])?;
            let h = cx.normed(xa, &ma[5])?;
            let o = cx.mlp(h, &ba.mlp)?;
            xa = cx.gated(xa, o, &ma[5])?;
        }

        let xt = cx.g.slice_rows(xv, target.start, target.len())?;
        let fv_t = cx.g.slice_rows(fv, 1, 1)?;
        let out_v = head(&mut cx, xt, fv_t, &l.final_mod_v, &l.head_v, d)?;
        let out_a = head(&mut cx, xa, fa, &l.final_mod_a, &l.head_a, d)?;
        Ok((out_v, out_a))
    }
}

fn head(cx: &mut Ctx<'_>, x: Var, feat: Var, modl: &Linear, out: &Linear, d: usize) -> Result<Var> {
    let m = cx.linear(feat, modl)?;
    let shift = cx.g.slice_cols(m, 0, d)?;
    let scale = cx.g.slice_cols(m, d, d)?;
    let h = cx.modulate(x, shift, scale, false)?;
    cx.linear(h, out)
}
