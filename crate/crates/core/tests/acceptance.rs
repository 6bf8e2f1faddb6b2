//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines print in order and
//! uncaptured. Criteria 1-10 are hard; the end-to-end run (11) has soft
//! quality targets that are reported but do not fail the process.

mod common;

use std::collections::HashMap;
use std::time::{Duration, Instant};

use avedit::autodiff::finite_diff_check;
use avedit::codec::CodecConfig;
use avedit::metrics::{ctx_f1, IntervalSet};
use avedit::model::{ConditionBundle, ForwardOptions, Model, ModelConfig, Prediction, StreamState};
use avedit::pipeline::edit_scene;
use avedit::rope::{assign_positions, PositionScheme, Segment, SequenceLayout};
use avedit::sampler::{
    guide_stage1, guide_stage2, initial_noise, make_anchors, sample_with, Anchors, Denoiser, GuidanceConfig,
    GuidanceMode, ModelDenoiser,
};
use avedit::train::{
    augment_mask, layout_for, loss_drop, sample_mode, train, Example, Mode, RouterConfig, TrainConfig,
};
use avedit::world::{generate_scenes, WorldConfig};
use avedit::{Graph, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use common::{random_inputs, scramble, small_config};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn run(id: &str, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    });
    let took = start.elapsed();
    let pass = r.pass && took <= budget;
    let status = if pass { "PASS" } else { "FAIL" };
    println!(
        "{status} criterion {id:<4} {name}: {} [{:.1}s / budget {}s]",
        r.detail,
        took.as_secs_f64(),
        budget.as_secs()
    );
    pass
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

// 1. Temporal positions against the three-way assignment, computed independently.
fn rope_conformance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cases = vec![(4, 8), (4, 4), (8, 32), (3, 7)];
    while cases.len() < 100 {
        cases.push((rng.gen_range(1..=16), rng.gen_range(1..=64)));
    }
    let mut fractional = 0;
    for &(nt, na) in &cases {
        let layout = SequenceLayout {
            frames: nt,
            audio_tokens: na,
            grid_h: rng.gen_range(1..=4),
            grid_w: rng.gen_range(1..=4),
            ref_frames: 1,
        };
        let table = assign_positions(&layout, PositionScheme::Aligned);
        let cells = layout.cells();
        for p in table.segment(Segment::Reference) {
            if p.t != 0.0 {
                return outcome(false, format!("reference at {} for ({nt}, {na})", p.t));
            }
        }
        for seg in [Segment::Condition, Segment::Target] {
            for (k, p) in table.segment(seg).iter().enumerate() {
                let i = k / cells + 1;
                let (h, w) = ((k % cells) / layout.grid_w, k % layout.grid_w);
                if p.t != i as f64 || p.h != h || p.w != w {
                    return outcome(false, format!("{seg:?} token {k} at {p:?} for ({nt}, {na})"));
                }
            }
        }
        for (k, p) in table.audio().iter().enumerate() {
            let j = k + 1;
            // Exact rational check: p * N_a must equal j * N_t up to one rounding of the quotient.
            let exact = (j * nt) as f64 / na as f64;
            if p.t != exact || (p.t * na as f64 - (j * nt) as f64).abs() > 1e-9 * (j * nt) as f64 || p.h != 0 || p.w != 0
            {
                return outcome(false, format!("audio token {j} at {} for ({nt}, {na})", p.t));
            }
            if p.t.fract() != 0.0 {
                fractional += 1;
            }
        }
    }
    let ex = assign_positions(
        &SequenceLayout {
            frames: 4,
            audio_tokens: 8,
            grid_h: 1,
            grid_w: 1,
            ref_frames: 1,
        },
        PositionScheme::Aligned,
    );
    let got: Vec<f64> = ex.audio().iter().map(|p| p.t).collect();
    if got != [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0] {
        return outcome(false, format!("N_t=4, N_a=8 gave {got:?}"));
    }
    outcome(true, format!("100 layouts, {fractional} fractional audio positions"))
}

fn unmasked_rows(cond: &ConditionBundle, cv: usize) -> Vec<usize> {
    Model::unmasked_target_cells(&cond.mask)
        .into_iter()
        .flat_map(|c| c * cv..(c + 1) * cv)
        .collect()
}

// 2. Audio never reaches unmasked video predictions.
fn spatial_leakage() -> Outcome {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_fd: f64 = 0.0;
    let mut masked_moved = false;
    let mut coords = 0;
    for trial in 0..3 {
        let mut m = Model::init(cfg.clone(), trial).unwrap();
        scramble(&mut m, 0.3, &mut rng);
        let (s, c) = random_inputs(&cfg, &mut rng);
        let plan = m.plan(&c.mask).unwrap();
        let fwd = |s: &StreamState| m.forward(&plan, s, &c, ForwardOptions::default()).unwrap().video;
        let rows = unmasked_rows(&c, cfg.video_channels);
        let base = fwd(&s);
        // Bitwise: replace the whole audio stream, then each token alone.
        let mut other = s.clone();
        other.audio = Tensor::randn(s.audio.shape(), 3.0, &mut rng);
        let v = fwd(&other);
        if rows.iter().any(|&i| v.data()[i].to_bits() != base.data()[i].to_bits()) {
            return outcome(false, format!("trial {trial}: new audio changed an unmasked output"));
        }
        masked_moved |= v.data().iter().zip(base.data()).any(|(a, b)| a != b);
        let h = 1e-4;
        for k in 0..s.audio.len() {
            let mut plus = s.clone();
            plus.audio.data_mut()[k] += h;
            let mut minus = s.clone();
            minus.audio.data_mut()[k] -= h;
            let (vp, vm) = (fwd(&plus), fwd(&minus));
            for &i in &rows {
                if vp.data()[i].to_bits() != base.data()[i].to_bits() {
                    return outcome(false, format!("trial {trial}: audio coordinate {k} moved output {i}"));
                }
                worst_fd = worst_fd.max(((vp.data()[i] - vm.data()[i]) / (2.0 * h)).abs());
            }
            coords += 1;
        }
    }
    let pass = worst_fd <= 1e-10 && masked_moved;
    outcome(
        pass,
        format!("{coords} audio coordinates bit-identical, max |fd| {worst_fd:e}, masked cells respond: {masked_moved}"),
    )
}

// 3. Audio-only losses leave every video-stream parameter with exactly zero gradient.
fn asymmetric_detach() -> Outcome {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut nonzero_audio = 0;
    let mut checked = 0;
    for trial in 0..3 {
        let mut m = Model::init(cfg.clone(), trial).unwrap();
        scramble(&mut m, 0.3, &mut rng);
        let (s, c) = random_inputs(&cfg, &mut rng);
        let plan = m.plan(&c.mask).unwrap();
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, true);
        let (_, a) = m.forward_graph(&mut g, &p, &plan, &s, &c, ForwardOptions::default()).unwrap();
        let t = g.constant(Tensor::randn(s.audio.shape(), 1.0, &mut rng));
        let loss = g.mse(a, t).unwrap();
        let grads = g.backward(loss).unwrap();
        for i in m.video_stream_params() {
            checked += 1;
            if grads.wrt(p.get(i)).data().iter().any(|&v| v != 0.0) {
                return outcome(false, format!("{} has audio-loss gradient", m.params.name(i)));
            }
        }
        nonzero_audio += m.audio_head_params().iter().filter(|&&i| grads.wrt(p.get(i)).max_abs() > 0.0).count();
    }
    outcome(
        nonzero_audio > 0,
        format!("{checked} video-stream tensors exactly zero; audio head live ({nonzero_audio} tensors)"),
    )
}

fn toggle_differs(m: &Model, s: &StreamState, c: &ConditionBundle) -> (bool, f64) {
    let plan = m.plan(&c.mask).unwrap();
    let on = m.forward(&plan, s, c, ForwardOptions::default()).unwrap();
    let off = m.forward(&plan, s, c, ForwardOptions { skip_context: true }).unwrap();
    let bits = |p: &Prediction| p.video.data().iter().chain(p.audio.data()).map(|v| v.to_bits()).collect::<Vec<_>>();
    let diff = on.audio.max_abs_diff(&off.audio).max(on.video.max_abs_diff(&off.video));
    (bits(&on) != bits(&off), diff)
}

// 4. Context layers start inert and come alive with training.
fn zero_init_neutrality() -> Outcome {
    let codec = CodecConfig::default();
    let world = WorldConfig {
        frames: 4,
        height: 8,
        width: 8,
        object_size: 2,
        target_events: (1, 2),
        distractor_events: (1, 2),
        ..WorldConfig::default()
    };
    let cfg = TrainConfig {
        model: ModelConfig {
            layout: layout_for(&world, &codec),
            ..ModelConfig::default()
        },
        steps: 500,
        seed: 4,
        ..TrainConfig::default()
    };
    let scenes = generate_scenes(32, 4, &world, &codec).unwrap();
    let exs: Vec<Example> = scenes.iter().map(|s| Example::encode(s, &codec).unwrap()).collect();
    let probe = exs[0].condition(avedit::codec::mask_to_latent(&exs[0].mask, &codec).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let l = &cfg.model.layout;
    let state = StreamState {
        video: Tensor::randn(&[l.frame_tokens(), 4], 1.0, &mut rng),
        audio: Tensor::randn(&[l.audio_tokens, 8], 1.0, &mut rng),
        t_video: 0.5,
        t_audio: 0.5,
    };
    let fresh = Model::init(cfg.model.clone(), cfg.seed).unwrap();
    let (fresh_differs, _) = toggle_differs(&fresh, &state, &probe);
    let (trained, _) = train(&exs, &cfg, &codec, |_| {}).unwrap();
    let (trained_differs, diff) = toggle_differs(&trained, &state, &probe);
    outcome(
        !fresh_differs && trained_differs,
        format!("fresh model bit-identical: {}; after 500 steps max |delta| {diff:.3e}", !fresh_differs),
    )
}

/// Counts forwards and remembers every branch prediction.
struct Recorder<'a> {
    inner: ModelDenoiser<'a>,
    calls: Vec<Prediction>,
}

impl Denoiser for Recorder<'_> {
    fn predict(&mut self, s: &StreamState, c: &ConditionBundle, o: ForwardOptions) -> Result<Prediction> {
        let p = self.inner.predict(s, c, o)?;
        self.calls.push(p.clone());
        Ok(p)
    }
}

fn affine(base: &Tensor, full: &Tensor, s: f64) -> Tensor {
    // Written as (1 - s) base + s full, a different rounding path from the sampler.
    base.zip_map(full, |b, f| (1.0 - s) * b + s * f).unwrap()
}

// 5. Guided predictions are the documented affine combinations of their branches.
fn guidance_algebra() -> Outcome {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut m = Model::init(cfg.clone(), 5).unwrap();
    scramble(&mut m, 0.3, &mut rng);
    let (s, c) = random_inputs(&cfg, &mut rng);
    let anchors = Anchors {
        muted_audio: Tensor::full(s.audio.shape(), -1.7),
        static_video: Tensor::ones(s.video.shape()),
    };
    let plan = m.plan(&c.mask).unwrap();
    let fwd = |s: &StreamState, c: &ConditionBundle, skip: bool| {
        m.forward(&plan, s, c, ForwardOptions { skip_context: skip }).unwrap()
    };
    // Branches built by hand.
    let joint = fwd(&s, &c, false);
    let mut bare = c.clone();
    bare.base_audio = None;
    let ctx = fwd(&s, &bare, true);
    let muted = StreamState {
        audio: anchors.muted_audio.clone(),
        t_audio: 0.0,
        ..s.clone()
    };
    let a_drv = fwd(&muted, &c, false);
    let still = StreamState {
        video: anchors.static_video.clone(),
        t_video: 0.0,
        ..s.clone()
    };
    let v_drv = fwd(&still, &c, false);
    if joint.audio.max_abs_diff(&ctx.audio) < 1e-6 || joint.video.max_abs_diff(&a_drv.video) < 1e-6 {
        return outcome(false, "branches coincide; the check would be vacuous");
    }
    let mut worst: f64 = 0.0;
    for sc in [0.0, 1.0, 2.0] {
        let mut r = Recorder {
            inner: ModelDenoiser::new(&m, &c).unwrap(),
            calls: vec![],
        };
        let g1 = guide_stage1(&mut r, &s, &c, sc).unwrap();
        if r.calls.len() != 2 {
            return outcome(false, format!("stage 1 used {} forwards", r.calls.len()));
        }
        worst = worst
            .max(g1.video.max_abs_diff(&affine(&ctx.video, &joint.video, sc)))
            .max(g1.audio.max_abs_diff(&affine(&ctx.audio, &joint.audio, sc)));
        r.calls.clear();
        let g2 = guide_stage2(&mut r, &s, &c, &anchors, sc, sc).unwrap();
        if r.calls.len() != 3 {
            return outcome(false, format!("stage 2 used {} forwards", r.calls.len()));
        }
        worst = worst
            .max(g2.video.max_abs_diff(&affine(&a_drv.video, &joint.video, sc)))
            .max(g2.audio.max_abs_diff(&affine(&v_drv.audio, &joint.audio, sc)));
        if sc == 1.0 {
            worst = worst
                .max(g1.video.max_abs_diff(&joint.video))
                .max(g1.audio.max_abs_diff(&joint.audio))
                .max(g2.video.max_abs_diff(&joint.video))
                .max(g2.audio.max_abs_diff(&joint.audio));
        }
    }
    outcome(worst <= 1e-12, format!("s in {{0, 1, 2}}, max deviation {worst:e}"))
}

// 6. Forward-pass accounting.
fn pass_accounting() -> Outcome {
    let cfg = ModelConfig::micro();
    let m = Model::init(cfg.clone(), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (_, c) = random_inputs(&cfg, &mut rng);
    let l = &cfg.layout;
    let anchors = Anchors {
        muted_audio: Tensor::zeros(&[l.audio_tokens, cfg.audio_channels]),
        static_video: Tensor::ones(&[l.frame_tokens(), cfg.video_channels]),
    };
    let run_with = |g: &GuidanceConfig| {
        let mut r = Recorder {
            inner: ModelDenoiser::new(&m, &c).unwrap(),
            calls: vec![],
        };
        let noise = initial_noise(l, cfg.video_channels, cfg.audio_channels, 0);
        let out = sample_with(&mut r, &c, &anchors, g, noise).unwrap();
        (out.accounting, r.calls.len())
    };
    let (acc, calls) = run_with(&GuidanceConfig::default());
    let boundary_ok = acc.per_step[..10].iter().all(|&n| n == 2) && acc.per_step[10..].iter().all(|&n| n == 3);
    if acc.total != 140 || calls != 140 || !boundary_ok {
        return outcome(false, format!("T=50, tau=10 took {} recorded / {calls} actual", acc.total));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mut pairs = vec![(0, 1), (5, 5), (1, 1)];
    while pairs.len() < 20 {
        let t = rng.gen_range(1..=30);
        pairs.push((rng.gen_range(0..=t), t));
    }
    for &(tau, steps) in &pairs {
        let g = GuidanceConfig {
            steps,
            tau,
            ..GuidanceConfig::default()
        };
        let (acc, calls) = run_with(&g);
        let want = 2 * tau + 3 * (steps - tau);
        if acc.total != want || calls != want || acc.per_step.len() != steps {
            return outcome(false, format!("(tau={tau}, T={steps}): {} recorded, {calls} actual, want {want}", acc.total));
        }
    }
    outcome(true, "140 forwards at T=50, tau=10; 20 (tau, T) pairs match 2 tau + 3 (T - tau)")
}

// 7. Router and mask-augmentation statistics.
fn router_statistics() -> Outcome {
    let router = RouterConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 10_000;
    let mut counts: HashMap<Mode, usize> = HashMap::new();
    for _ in 0..n {
        *counts.entry(sample_mode(&mut rng, &router)).or_default() += 1;
    }
    let mut chi2 = 0.0;
    let mut worst_freq: f64 = 0.0;
    for (mode, p) in Mode::ALL.into_iter().zip(router.probabilities()) {
        let o = *counts.get(&mode).unwrap_or(&0) as f64;
        let e = p * n as f64;
        chi2 += (o - e).powi(2) / e;
        worst_freq = worst_freq.max((o / n as f64 - p).abs());
    }
    let p_value = 1.0 - ChiSquared::new(3.0).unwrap().cdf(chi2);

    // A small square in the middle of a large canvas, so dilation is never clipped.
    let (size, lo) = (64, 28);
    let mut mask = avedit::codec::PixelMask::empty(1, size, size);
    for y in lo..lo + 6 {
        for x in lo..lo + 6 {
            mask.set(0, y, x, true);
        }
    }
    let mut bbox = 0;
    let mut max_growth = 0;
    for _ in 0..n {
        let (out, aug) = augment_mask(&mask, &mut rng, &router);
        bbox += usize::from(aug.bbox);
        if !out.contains(&mask) {
            return outcome(false, "augmented mask lost original pixels");
        }
        let on: Vec<(usize, usize)> =
            (0..size).flat_map(|y| (0..size).map(move |x| (y, x))).filter(|&(y, x)| out.get(0, y, x)).collect();
        let growth = [
            lo - on.iter().map(|p| p.0).min().unwrap(),
            on.iter().map(|p| p.0).max().unwrap() - (lo + 5),
            lo - on.iter().map(|p| p.1).min().unwrap(),
            on.iter().map(|p| p.1).max().unwrap() - (lo + 5),
        ];
        if growth != aug.dilation {
            return outcome(false, format!("measured growth {growth:?} vs drawn {:?}", aug.dilation));
        }
        max_growth = max_growth.max(*growth.iter().max().unwrap());
    }
    let bbox_freq = bbox as f64 / n as f64;
    let pass = p_value > 0.01 && worst_freq <= 0.015 && (bbox_freq - 0.3).abs() <= 0.02 && max_growth <= 20;
    outcome(
        pass,
        format!(
            "chi2 {chi2:.2} (p = {p_value:.3}), max freq error {worst_freq:.4}, bbox {bbox_freq:.4}, max dilation {max_growth}px"
        ),
    )
}

// 8. Full one-block joint-loss gradient against central differences.
fn gradient_check() -> Outcome {
    let cfg = ModelConfig::micro();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut m = Model::init(cfg.clone(), 8).unwrap();
    scramble(&mut m, 0.3, &mut rng);
    let (s, c) = random_inputs(&cfg, &mut rng);
    let plan = m.plan(&c.mask).unwrap();
    let tv = Tensor::randn(s.video.shape(), 1.0, &mut rng);
    let ta = Tensor::randn(s.audio.shape(), 1.0, &mut rng);
    let flat = m.params.flatten();
    let n = flat.len();
    let x = Tensor::new(vec![n], flat).unwrap();
    let err = finite_diff_check(
        |g, x| {
            let p = m.params.bind_flat(g, x)?;
            let (v, a) = m.forward_graph(g, &p, &plan, &s, &c, ForwardOptions::default())?;
            let (tv, ta) = (g.constant(tv.clone()), g.constant(ta.clone()));
            let lv = g.mse(v, tv)?;
            let la = g.mse(a, ta)?;
            g.add(lv, la)
        },
        &x,
        1e-3,
    )
    .unwrap();
    outcome(err < 1e-4, format!("{n} parameters, max relative error {err:.2e}"))
}

/// Constant straight-path velocity towards a known target.
struct ConstantVelocity(Prediction);

impl Denoiser for ConstantVelocity {
    fn predict(&mut self, _: &StreamState, _: &ConditionBundle, _: ForwardOptions) -> Result<Prediction> {
        Ok(self.0.clone())
    }
}

// 9. Euler integration of an exact velocity field.
fn sampler_exactness() -> Outcome {
    let cfg = ModelConfig::default();
    let l = &cfg.layout;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z0v = Tensor::randn(&[l.frame_tokens(), 4], 1.0, &mut rng);
    let z0a = Tensor::randn(&[l.audio_tokens, 8], 1.0, &mut rng);
    let noise = initial_noise(l, 4, 8, 9);
    let vel = Prediction {
        video: noise.0.zip_map(&z0v, |e, z| e - z).unwrap(),
        audio: noise.1.zip_map(&z0a, |e, z| e - z).unwrap(),
    };
    let (_, c) = random_inputs(&cfg, &mut rng);
    let anchors = make_anchors(&CodecConfig::default(), l).unwrap();
    let g = GuidanceConfig {
        mode: GuidanceMode::Plain,
        ..GuidanceConfig::default()
    };
    let out = sample_with(&mut ConstantVelocity(vel), &c, &anchors, &g, noise).unwrap();
    let err = out.video.max_abs_diff(&z0v).max(out.audio.max_abs_diff(&z0a));
    outcome(err <= 1e-6, format!("50 steps, max abs error {err:.2e}"))
}

// 10. Interval Ctx-F1 against a 1 ms grid.
fn ctx_f1_oracle() -> Outcome {
    fn grid(spans: &[[f64; 2]]) -> Vec<bool> {
        let mut g = vec![false; 2000];
        for &[s, e] in spans {
            let (a, b) = ((s * 1000.0).round() as usize, (e * 1000.0).round() as usize);
            g[a..b].iter_mut().for_each(|x| *x = true);
        }
        g
    }
    fn oracle(gen: &[[f64; 2]], prot: &[[f64; 2]], refs: &[[f64; 2]]) -> (f64, f64, f64) {
        let (g, p, r) = (grid(gen), grid(prot), grid(refs));
        let count = |f: &dyn Fn(usize) -> bool| (0..2000).filter(|&i| f(i)).count() as f64;
        let ng = count(&|i| g[i]);
        let nr = count(&|i| r[i]);
        let precision = if ng == 0.0 { 1.0 } else { 1.0 - count(&|i| g[i] && p[i]) / ng };
        let recall = if nr == 0.0 { 1.0 } else { count(&|i| g[i] && r[i]) / nr };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        (precision, recall, f1)
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let random_spans = |rng: &mut ChaCha8Rng| -> Vec<[f64; 2]> {
        (0..rng.gen_range(0..5))
            .map(|_| {
                let a = rng.gen_range(0..1900);
                let b = a + rng.gen_range(1..100);
                [a as f64 / 1000.0, b as f64 / 1000.0]
            })
            .collect()
    };
    let mut cases = vec![(vec![[0.0, 1.0]], vec![[0.5, 1.0]], vec![[0.0, 1.0]])];
    while cases.len() < 1000 {
        cases.push((random_spans(&mut rng), random_spans(&mut rng), random_spans(&mut rng)));
    }
    let mut worst: f64 = 0.0;
    for (g, p, r) in &cases {
        let got = ctx_f1(&IntervalSet::new(g.clone()), &IntervalSet::new(p.clone()), &IntervalSet::new(r.clone()));
        let (op, or, of) = oracle(g, p, r);
        worst = worst
            .max((got.precision - op).abs())
            .max((got.recall - or).abs())
            .max((got.f1 - of).abs());
    }
    let w = ctx_f1(
        &IntervalSet::new(vec![[0.0, 1.0]]),
        &IntervalSet::new(vec![[0.5, 1.0]]),
        &IntervalSet::new(vec![[0.0, 1.0]]),
    );
    let worked = (w.precision - 0.5).abs() < 1e-12 && (w.recall - 1.0).abs() < 1e-12 && (w.f1 - 2.0 / 3.0).abs() < 1e-12;
    outcome(
        worst <= 1e-6 && worked,
        format!("1000 cases, max deviation {worst:.1e}; worked example P={:.3} R={:.3} F1={:.4}", w.precision, w.recall, w.f1),
    )
}

const TRAIN_SCENES: usize = 200;
const HELD_OUT: usize = 20;
const DATA_SEED: u64 = 2024;
const HELD_OUT_SEED: u64 = 7_000_001;
const TRAIN_SEED: u64 = 11;

struct EndToEnd {
    loss_first: f64,
    loss_last: f64,
    in_sync: usize,
    band_ok: usize,
    f1_two_stage: f64,
    f1_plain: f64,
}

fn end_to_end() -> EndToEnd {
    let codec = CodecConfig::default();
    let world = WorldConfig::default();
    let scenes = generate_scenes(TRAIN_SCENES, DATA_SEED, &world, &codec).unwrap();
    let exs: Vec<Example> = scenes.iter().map(|s| Example::encode(s, &codec).unwrap()).collect();
    let cfg = TrainConfig {
        model: ModelConfig {
            layout: layout_for(&world, &codec),
            ..ModelConfig::default()
        },
        steps: 2000,
        seed: TRAIN_SEED,
        ..TrainConfig::default()
    };
    let (model, curve) = train(&exs, &cfg, &codec, |_| {}).unwrap();
    let (loss_first, loss_last) = loss_drop(&curve, 50).unwrap();

    let held = generate_scenes(HELD_OUT, HELD_OUT_SEED, &world, &codec).unwrap();
    let two_stage = GuidanceConfig::default();
    let plain = GuidanceConfig {
        mode: GuidanceMode::Plain,
        ..GuidanceConfig::default()
    };
    let (mut in_sync, mut band_ok, mut f1_two_stage, mut f1_plain) = (0, 0, 0.0, 0.0);
    for (i, s) in held.iter().enumerate() {
        // A band that is neither the scene's own nor the distractor's.
        let band = (1..codec.bands)
            .map(|k| (s.meta.band + k) % codec.bands)
            .find(|&k| k != s.meta.distractor_band)
            .unwrap();
        let seed = 500 + i as u64;
        let a = edit_scene(&model, s, &world, &codec, Some(band), &two_stage, seed).unwrap();
        let b = edit_scene(&model, s, &world, &codec, Some(band), &plain, seed).unwrap();
        in_sync += usize::from(a.scores.in_sync());
        band_ok += usize::from(a.scores.band_check.dominant);
        f1_two_stage += a.scores.ctx.f1 / HELD_OUT as f64;
        f1_plain += b.scores.ctx.f1 / HELD_OUT as f64;
        println!(
            "  held-out {i:2}: band {} -> {band}; two-stage blinks {:?} onsets {:?} lag {} (score {:.2}) dominant {} (margin {:+.2}) f1 {:.3}; plain f1 {:.3}",
            s.meta.band,
            a.scores.visual_events,
            a.scores.audio_events,
            a.scores.sync_lag,
            a.scores.sync_score,
            a.scores.band_check.dominant,
            a.scores.band_check.margin,
            a.scores.ctx.f1,
            b.scores.ctx.f1
        );
    }
    EndToEnd {
        loss_first,
        loss_last,
        in_sync,
        band_ok,
        f1_two_stage,
        f1_plain,
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    // `cargo test -- --list` and name filters come through here too.
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let only: Vec<&str> = args.iter().skip(1).filter(|a| !a.starts_with('-')).map(String::as_str).collect();
    let wanted = |id: &str| only.is_empty() || only.contains(&id);

    let mut hard_ok = true;
    let hard: [(&str, &str, u64, fn() -> Outcome); 10] = [
        ("1", "rope conformance", 1, rope_conformance),
        ("2", "spatial routing leakage", 60, spatial_leakage),
        ("3", "asymmetric detach", 60, asymmetric_detach),
        ("4", "zero-init neutrality", 300, zero_init_neutrality),
        ("5", "guidance algebra", 60, guidance_algebra),
        ("6", "pass accounting", 60, pass_accounting),
        ("7", "router statistics", 60, router_statistics),
        ("8", "gradient correctness", 600, gradient_check),
        ("9", "sampler exactness", 60, sampler_exactness),
        ("10", "ctx-f1 oracle equivalence", 60, ctx_f1_oracle),
    ];
    for (id, name, budget, f) in hard {
        if wanted(id) {
            hard_ok &= run(id, name, secs(budget), f);
        }
    }

    if wanted("11") {
        let start = Instant::now();
        let r = end_to_end();
        let took = start.elapsed();
        let line = |id: &str, name: &str, pass: bool, detail: String| {
            let status = if pass { "PASS" } else { "FAIL" };
            println!("{status} criterion {id:<4} {name}: {detail} (soft target)");
        };
        line(
            "11a",
            "loss halves",
            r.loss_last <= 0.5 * r.loss_first,
            format!("first-50 mean {:.4}, last-50 mean {:.4}, ratio {:.3}", r.loss_first, r.loss_last, r.loss_last / r.loss_first),
        );
        line(
            "11b",
            "audio-visual sync",
            r.in_sync * 10 >= HELD_OUT * 7,
            format!("|lag| <= 1 on {}/{HELD_OUT} held-out scenes", r.in_sync),
        );
        line(
            "11c",
            "band edit",
            r.band_ok * 10 >= HELD_OUT * 7,
            format!("requested band dominant on {}/{HELD_OUT}", r.band_ok),
        );
        line(
            "11d",
            "two-stage ctx-f1 >= plain",
            r.f1_two_stage >= r.f1_plain,
            format!("mean ctx-f1 {:.4} vs {:.4}", r.f1_two_stage, r.f1_plain),
        );
        let budget = secs(45 * 60);
        let status = if took <= budget { "PASS" } else { "FAIL" };
        println!("{status} criterion 11   end-to-end runtime: {:.1} min / budget 45 min", took.as_secs_f64() / 60.0);
        hard_ok &= took <= budget;
    }

    if !hard_ok {
        std::process::exit(1);
    }
}
