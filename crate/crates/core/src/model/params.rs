use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

use super::ModelConfig;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Zero,
}

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    inits: Vec<Init>,
}

impl ParamStore {
    fn register(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.names.push(name);
        self.tensors.push(Tensor::zeros(shape));
        self.inits.push(init);
        self.names.len() - 1
    }

    pub(crate) fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        let inits = vec![Init::Normal; names.len()];
        Self {
            names,
            tensors,
            inits,
        }
    }

    /// Draws every `Normal` parameter in registration order.
    pub(super) fn initialize<R: Rng>(&mut self, rng: &mut R) {
        for (t, init) in self.tensors.iter_mut().zip(&self.inits) {
            if *init == Init::Normal {
                *t = Tensor::randn(t.shape(), INIT_STD, rng);
            }
        }
    }

    pub(super) fn copy_param(&mut self, src: usize, dst: usize) {
        self.tensors[dst] = self.tensors[src].clone();
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    /// All values concatenated in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    /// Binds every parameter as a named graph input.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> ParamVars {
        ParamVars(
            self.names
                .iter()
                .zip(&self.tensors)
                .map(|(n, t)| g.input(n, t.clone(), requires_grad))
                .collect(),
        )
    }

    /// Binds parameters as slices of one flat input vector.
    pub fn bind_flat(&self, g: &mut Graph, flat: Var) -> crate::Result<ParamVars> {
        let total: usize = self.tensors.iter().map(Tensor::len).sum();
        let column = g.reshape(flat, &[total, 1])?;
        let mut vars = Vec::with_capacity(self.len());
        let mut off = 0;
        for t in &self.tensors {
            let s = g.slice_rows(column, off, t.len())?;
            vars.push(g.reshape(s, t.shape())?);
            off += t.len();
        }
        Ok(ParamVars(vars))
    }
}

/// Graph handles for a [`ParamStore`], same order.
#[derive(Clone, Debug)]
pub struct ParamVars(pub Vec<Var>);

impl ParamVars {
    pub fn get(&self, i: usize) -> Var {
        self.0[i]
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Attention {
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub o: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Mlp {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct VideoBlock {
    /// `D -> 4 sublayers x (shift, scale, gate) x D`.
    pub modulation: Linear,
    pub self_attn: Attention,
    pub text_attn: Attention,
    pub a2v: Attention,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub(crate) struct AudioBlock {
    /// `D -> 6 sublayers x (shift, scale, gate) x D`.
    pub modulation: Linear,
    pub self_attn: Attention,
    pub text_attn: Attention,
    pub v2a: Attention,
    pub vis_ctx: Attention,
    pub ac_ctx: Attention,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub(crate) struct Block {
    pub video: VideoBlock,
    pub audio: AudioBlock,
}

#[derive(Clone, Debug)]
pub(crate) struct Layers {
    pub e_ref: Linear,
    pub e_cond: Linear,
    pub e_target: Linear,
    pub e_audio: Linear,
    pub text: usize,
    pub t_embed_v: (Linear, Linear),
    pub t_embed_a: (Linear, Linear),
    pub blocks: Vec<Block>,
    pub final_mod_v: Linear,
    pub head_v: Linear,
    pub final_mod_a: Linear,
    pub head_a: Linear,
}

pub(crate) const VIDEO_SUBLAYERS: usize = 4;
pub(crate) const AUDIO_SUBLAYERS: usize = 6;

struct Registrar<'a> {
    store: &'a mut ParamStore,
}

impl Registrar<'_> {
    fn linear(&mut self, name: &str, i: usize, o: usize, bias: bool) -> Linear {
        let w = self
            .store
            .register(format!("{name}.w"), &[i, o], Init::Normal);
        let b = bias.then(|| self.store.register(format!("{name}.b"), &[o], Init::Normal));
        Linear { w, b }
    }

    /// Query from `dim`, keys/values from `kv_in`; `zero_out` zeroes the output projection.
    fn attention(&mut self, name: &str, dim: usize, kv_in: usize, zero_out: bool) -> Attention {
        let mut reg = |suffix: &str, i: usize, init: Init| {
            self.store
                .register(format!("{name}.{suffix}"), &[i, dim], init)
        };
        let q = reg("q", dim, Init::Normal);
        let k = reg("k", kv_in, Init::Normal);
        let v = reg("v", kv_in, Init::Normal);
        let o = reg("o", dim, if zero_out { Init::Zero } else { Init::Normal });
        Attention { q, k, v, o }
    }

    fn mlp(&mut self, name: &str, dim: usize, hidden: usize) -> Mlp {
        Mlp {
            up: self.linear(&format!("{name}.up"), dim, hidden, true),
            down: self.linear(&format!("{name}.down"), hidden, dim, true),
        }
    }
}

impl Layers {
    pub fn register(cfg: &ModelConfig, store: &mut ParamStore) -> Self {
        let d = cfg.dim;
        let (cv, ca) = (cfg.video_channels, cfg.audio_channels);
        let hidden = d * cfg.mlp_ratio;
        let mut r = Registrar { store };
        let e_ref = r.linear("video.embed.ref", cv, d, true);
        let e_cond = r.linear("video.embed.cond", cv, d, true);
        let e_target = r.linear("video.embed.target", cv, d, true);
        let e_audio = r.linear("audio.embed", ca, d, true);
        let text = r
            .store
            .register("text.table".into(), &[cfg.vocab, d], Init::Normal);
        let t_embed_v = (
            r.linear("video.time.0", d, d, true),
            r.linear("video.time.1", d, d, true),
        );
        let t_embed_a = (
            r.linear("audio.time.0", d, d, true),
            r.linear("audio.time.1", d, d, true),
        );
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let v = format!("block{i}.video");
                let a = format!("block{i}.audio");
                Block {
                    video: VideoBlock {
                        modulation: r.linear(
                            &format!("{v}.modulation"),
                            d,
                            VIDEO_SUBLAYERS * 3 * d,
                            true,
                        ),
                        self_attn: r.attention(&format!("{v}.self"), d, d, false),
                        text_attn: r.attention(&format!("{v}.text"), d, d, false),
                        a2v: r.attention(&format!("{v}.a2v"), d, d, false),
                        mlp: r.mlp(&format!("{v}.mlp"), d, hidden),
                    },
                    audio: AudioBlock {
                        modulation: r.linear(
                            &format!("{a}.modulation"),
                            d,
                            AUDIO_SUBLAYERS * 3 * d,
                            true,
                        ),
                        self_attn: r.attention(&format!("{a}.self"), d, d, false),
                        text_attn: r.attention(&format!("{a}.text"), d, d, false),
                        v2a: r.attention(&format!("{a}.v2a"), d, d, false),
                        vis_ctx: r.attention(&format!("{a}.visual_context"), d, cv, true),
                        ac_ctx: r.attention(&format!("{a}.acoustic_context"), d, ca, true),
                        mlp: r.mlp(&format!("{a}.mlp"), d, hidden),
                    },
                }
            })
            .collect();
        Self {
            e_ref,
            e_cond,
            e_target,
            e_audio,
            text,
            t_embed_v,
            t_embed_a,
            blocks,
            final_mod_v: r.linear("video.final.modulation", d, 2 * d, true),
            head_v: r.linear("video.head", d, cv, true),
            final_mod_a: r.linear("audio.final.modulation", d, 2 * d, true),
            head_a: r.linear("audio.head", d, ca, true),
        }
    }
}
