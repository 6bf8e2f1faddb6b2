//! The "blinking beeper" micro-world.
//!
//! A target square blinks at a few frames; each blink emits a short tone in
//! the target band into the target audio. A distractor square elsewhere
//! blinks with tones in a different band, and those land in the base audio
//! together with a faint noise floor. Distractor and target take turns: they
//! never blink in the same frame, so ground-truth target audio never overlaps
//! protected activity.
//!
//! Dataset layout: `manifest.json` plus one `scene_NNNNN.bin` per scene. A
//! scene file is the magic `AVSC`, a `u32` version, a `u64` metadata length,
//! the JSON metadata, then five arrays (video, reference, target audio, base
//! audio, mask). Each array is a `u32` rank, `u32` extents and little-endian
//! `f32` values. All integers are little-endian.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, PixelMask};
use crate::error::{Error, Result};
use crate::metrics::IntervalSet;
use crate::model::NULL_TOKEN;
use crate::tensor::Tensor;

pub const TOKEN_SQUARE: usize = 1;
pub const TOKEN_BEEP: usize = 2;
pub const TOKEN_BLINK: usize = 3;
/// `TOKEN_BAND + k` names frequency band `k`.
pub const TOKEN_BAND: usize = 8;
/// `TOKEN_IDENTITY + q` names the quadrant the target sits in.
pub const TOKEN_IDENTITY: usize = 16;

const MAGIC: &[u8; 4] = b"AVSC";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub object_size: usize,
    /// Inclusive range of target blinks per scene.
    pub target_events: (usize, usize),
    pub distractor_events: (usize, usize),
    pub off_level: f64,
    pub on_level: f64,
    pub beep_seconds: f64,
    pub beep_amplitude: f64,
    /// Base-audio noise level relative to a unit-amplitude sine.
    pub noise_db: f64,
    pub caption_len: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 16,
            width: 16,
            object_size: 4,
            target_events: (1, 3),
            distractor_events: (1, 3),
            off_level: 0.2,
            on_level: 1.0,
            beep_seconds: 0.08,
            beep_amplitude: 1.0,
            noise_db: -30.0,
            caption_len: 8,
        }
    }
}

impl WorldConfig {
    pub fn samples(&self, codec: &CodecConfig) -> usize {
        self.frames * codec.sample_rate / codec.fps
    }

    pub fn validate(&self, codec: &CodecConfig) -> Result<()> {
        let (t0, t1) = self.target_events;
        let (d0, d1) = self.distractor_events;
        let ok = self.frames > 0
            && self.object_size > 0
            && self.object_size <= self.height.min(self.width)
            && self.height % codec.patch == 0
            && self.width % codec.patch == 0
            && t0 >= 1
            && t0 <= t1
            && d0 <= d1
            && t1 + d1 <= self.frames
            && codec.bands >= 2
            && codec.bands <= TOKEN_IDENTITY - TOKEN_BAND
            && self.caption_len >= 3
            && (self.frames * codec.sample_rate) % codec.fps == 0
            && self.beep_seconds > 0.0
            && self.beep_seconds <= codec.frame_duration();
        if !ok {
            return Err(Error::invalid(format!("invalid world config {self:?}")));
        }
        Ok(())
    }
}

/// Scene metadata stored as JSON inside the scene file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneMeta {
    pub seed: u64,
    pub band: usize,
    pub distractor_band: usize,
    /// Top-left pixel of each square, `(y, x)`.
    pub target_pos: (usize, usize),
    pub distractor_pos: (usize, usize),
    pub target_frames: Vec<usize>,
    pub distractor_frames: Vec<usize>,
    pub target_intervals: IntervalSet,
    pub protected_intervals: IntervalSet,
    pub visual_caption: Vec<usize>,
    pub audio_caption: Vec<usize>,
    pub speech_caption: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub meta: SceneMeta,
    /// Grayscale `[F, H, W]` in `[0, 1]`.
    pub video: Tensor,
    /// The target square lit on black, `[1, H, W]`.
    pub reference: Tensor,
    pub target_audio: Vec<f64>,
    pub base_audio: Vec<f64>,
    pub mask: PixelMask,
}

/// Rounds through `f32` so scenes survive the on-disk format bit-exactly.
fn q(x: f64) -> f64 {
    x as f32 as f64
}

fn place(rng: &mut ChaCha8Rng, cfg: &WorldConfig, codec: &CodecConfig) -> (usize, usize) {
    // Even offsets keep squares aligned to latent cells.
    let p = codec.patch;
    let span = |extent: usize| (extent - cfg.object_size) / p;
    (rng.gen_range(0..=span(cfg.height)) * p, rng.gen_range(0..=span(cfg.width)) * p)
}

fn overlaps(a: (usize, usize), b: (usize, usize), size: usize) -> bool {
    a.0 < b.0 + size && b.0 < a.0 + size && a.1 < b.1 + size && b.1 < a.1 + size
}

fn beep(signal: &mut [f64], start: usize, len: usize, hz: f64, amp: f64, sr: f64) {
    for (i, s) in signal.iter_mut().skip(start).take(len).enumerate() {
        *s += amp * (TAU * hz * i as f64 / sr).sin();
    }
}

pub fn generate_scene(seed: u64, cfg: &WorldConfig, codec: &CodecConfig) -> Result<Scene> {
    cfg.validate(codec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (f, h, w, size) = (cfg.frames, cfg.height, cfg.width, cfg.object_size);

    let target_pos = place(&mut rng, cfg, codec);
    let distractor_pos = (0..100)
        .map(|_| place(&mut rng, cfg, codec))
        .find(|&p| !overlaps(p, target_pos, size))
        .ok_or_else(|| Error::invalid("no room for the distractor after 100 tries"))?;

    let band = rng.gen_range(0..codec.bands);
    let distractor_band = (band + rng.gen_range(1..codec.bands)) % codec.bands;
    let n_target = rng.gen_range(cfg.target_events.0..=cfg.target_events.1);
    let n_distractor = rng.gen_range(cfg.distractor_events.0..=cfg.distractor_events.1);
    let frames = sample(&mut rng, f, n_target + n_distractor).into_vec();
    let mut target_frames = frames[..n_target].to_vec();
    let mut distractor_frames = frames[n_target..].to_vec();
    target_frames.sort_unstable();
    distractor_frames.sort_unstable();

    let mut video = Tensor::zeros(&[f, h, w]);
    let mut reference = Tensor::zeros(&[1, h, w]);
    let mut mask = PixelMask::empty(f, h, w);
    let paint = |t: &mut Tensor, fi: usize, pos: (usize, usize), v: f64| {
        for y in pos.0..pos.0 + size {
            for x in pos.1..pos.1 + size {
                t.data_mut()[(fi * h + y) * w + x] = q(v);
            }
        }
    };
    for fi in 0..f {
        let level = |lit: bool| if lit { cfg.on_level } else { cfg.off_level };
        paint(&mut video, fi, target_pos, level(target_frames.contains(&fi)));
        paint(&mut video, fi, distractor_pos, level(distractor_frames.contains(&fi)));
        for y in target_pos.0..target_pos.0 + size {
            for x in target_pos.1..target_pos.1 + size {
                mask.set(fi, y, x, true);
            }
        }
    }
    paint(&mut reference, 0, target_pos, cfg.on_level);

    let n = cfg.samples(codec);
    let sr = codec.sample_rate as f64;
    let frame_samples = codec.sample_rate / codec.fps;
    let beep_len = (cfg.beep_seconds * sr).round() as usize;
    let mut target_audio = vec![0.0; n];
    let mut base_audio = vec![0.0; n];
    let span = |fi: usize| {
        let s = (fi * frame_samples) as f64 / sr;
        [s, s + beep_len as f64 / sr]
    };
    for &fi in &target_frames {
        let hz = codec.band_center_hz(band);
        beep(&mut target_audio, fi * frame_samples, beep_len, hz, cfg.beep_amplitude, sr);
    }
    for &fi in &distractor_frames {
        let hz = codec.band_center_hz(distractor_band);
        beep(&mut base_audio, fi * frame_samples, beep_len, hz, cfg.beep_amplitude, sr);
    }
    let noise = 10f64.powf(cfg.noise_db / 20.0);
    for s in base_audio.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *s += noise * z;
    }
    target_audio.iter_mut().for_each(|s| *s = q(*s));
    base_audio.iter_mut().for_each(|s| *s = q(*s));

    let caption = |tokens: &[usize]| {
        let mut c = tokens.to_vec();
        c.resize(cfg.caption_len, NULL_TOKEN);
        c
    };
    let quadrant = usize::from(target_pos.0 >= h / 2) * 2 + usize::from(target_pos.1 >= w / 2);
    let meta = SceneMeta {
        seed,
        band,
        distractor_band,
        target_pos,
        distractor_pos,
        target_intervals: IntervalSet::new(target_frames.iter().map(|&fi| span(fi)).collect()),
        protected_intervals: IntervalSet::new(distractor_frames.iter().map(|&fi| span(fi)).collect()),
        target_frames,
        distractor_frames,
        visual_caption: caption(&[TOKEN_SQUARE, TOKEN_BLINK, TOKEN_IDENTITY + quadrant]),
        audio_caption: caption(&[TOKEN_BEEP, TOKEN_BAND + band]),
        speech_caption: caption(&[]),
    };
    Ok(Scene {
        meta,
        video,
        reference,
        target_audio,
        base_audio,
        mask,
    })
}

/// Seed of scene `index` in a dataset generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    // SplitMix64 finalizer over the pair.
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64)
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_scenes(count: usize, seed: u64, cfg: &WorldConfig, codec: &CodecConfig) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| generate_scene(scene_seed(seed, i), cfg, codec))
        .collect()
}

impl Scene {
    /// Checks the world's structural guarantees.
    pub fn validate(&self, cfg: &WorldConfig, codec: &CodecConfig) -> Result<()> {
        let m = &self.meta;
        let fail = |what: &str| Err(Error::invalid(format!("scene {}: {what}", m.seed)));
        let (f, h, w, size) = (cfg.frames, cfg.height, cfg.width, cfg.object_size);
        if self.video.shape() != [f, h, w] || self.mask.flags.len() != f * h * w {
            return fail("shape mismatch");
        }
        if overlaps(m.target_pos, m.distractor_pos, size) {
            return fail("objects overlap");
        }
        if m.target_frames.iter().any(|fi| m.distractor_frames.contains(fi)) {
            return fail("target and distractor blink together");
        }
        let inside = |pos: (usize, usize), y: usize, x: usize| {
            (pos.0..pos.0 + size).contains(&y) && (pos.1..pos.1 + size).contains(&x)
        };
        for fi in 0..f {
            for y in 0..h {
                for x in 0..w {
                    if self.mask.get(fi, y, x) != inside(m.target_pos, y, x) {
                        return fail("mask does not match the target footprint");
                    }
                }
            }
            let lit = self.video.data()[(fi * h + m.target_pos.0) * w + m.target_pos.1] > 0.5;
            if lit != m.target_frames.contains(&fi) {
                return fail("target blink frames disagree with pixels");
            }
        }
        // Each beep starts within its blink frame.
        let fd = codec.frame_duration();
        for [s, _] in m.target_intervals.spans() {
            let frame = (s / fd + 1e-9).floor() as usize;
            if !m.target_frames.contains(&frame) {
                return fail("target beep without a blink");
            }
        }
        if m.target_intervals.spans().len() != m.target_frames.len() {
            return fail("one interval per target blink expected");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub scene_count: usize,
    pub seed: u64,
    pub codec: CodecConfig,
    pub world: WorldConfig,
    pub files: Vec<String>,
}

fn scene_file(i: usize) -> String {
    format!("scene_{i:05}.bin")
}

fn put_array(buf: &mut Vec<u8>, shape: &[usize], data: &[f64]) {
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode_scene(scene: &Scene) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&scene.meta)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta);
    put_array(&mut buf, scene.video.shape(), scene.video.data());
    put_array(&mut buf, scene.reference.shape(), scene.reference.data());
    put_array(&mut buf, &[scene.target_audio.len()], &scene.target_audio);
    put_array(&mut buf, &[scene.base_audio.len()], &scene.base_audio);
    let m = &scene.mask;
    let flags: Vec<f64> = m.flags.iter().map(|&b| f64::from(u8::from(b))).collect();
    put_array(&mut buf, &[m.frames, m.height, m.width], &flags);
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::invalid("truncated scene file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn array(&mut self) -> Result<(Vec<usize>, Vec<f64>)> {
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::invalid(format!("bad array rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::invalid("array too large"))?;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::invalid("array too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok((shape, data))
    }
}

pub fn decode_scene(bytes: &[u8]) -> Result<Scene> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::invalid("not a scene file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::invalid(format!("unsupported scene version {version}")));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::invalid("metadata too large"))?;
    let meta: SceneMeta = serde_json::from_slice(r.take(len)?)?;
    let (vs, vd) = r.array()?;
    let (rs, rd) = r.array()?;
    let (_, target_audio) = r.array()?;
    let (_, base_audio) = r.array()?;
    let (ms, md) = r.array()?;
    if r.pos != bytes.len() {
        return Err(Error::invalid("trailing bytes in scene file"));
    }
    let [frames, height, width] = ms[..] else {
        return Err(Error::invalid("mask must be rank 3"));
    };
    Ok(Scene {
        meta,
        video: Tensor::new(vs, vd)?,
        reference: Tensor::new(rs, rd)?,
        target_audio,
        base_audio,
        mask: PixelMask {
            frames,
            height,
            width,
            flags: md.iter().map(|&v| v != 0.0).collect(),
        },
    })
}

pub fn write_scene(path: &Path, scene: &Scene) -> Result<()> {
    fs::write(path, encode_scene(scene)?).map_err(|e| Error::file(path, e))
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_scene(&bytes).map_err(|e| Error::file(path, e))
}

pub fn write_dataset(
    dir: &Path,
    scenes: &[Scene],
    seed: u64,
    world: &WorldConfig,
    codec: &CodecConfig,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let mut files = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let name = scene_file(i);
        write_scene(&dir.join(&name), s)?;
        files.push(name);
    }
    let manifest = DatasetManifest {
        version: VERSION,
        scene_count: scenes.len(),
        seed,
        codec: codec.clone(),
        world: world.clone(),
        files,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::file(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::file(&path, e))?;
    if m.files.len() != m.scene_count {
        return Err(Error::file(&path, "scene_count does not match the file list"));
    }
    Ok(m)
}

/// Reads every scene, checking the manifest against `codec` and the directory contents.
pub fn read_dataset(dir: &Path, codec: &CodecConfig) -> Result<(DatasetManifest, Vec<Scene>)> {
    let m = read_manifest(dir)?;
    if m.codec != *codec {
        return Err(Error::ConfigMismatch {
            expected: serde_json::to_string(codec)?,
            found: serde_json::to_string(&m.codec)?,
        });
    }
    let mut present: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::file(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".bin"))
        .collect();
    present.sort();
    let mut listed = m.files.clone();
    listed.sort();
    if present != listed {
        return Err(Error::file(dir, "scene files on disk do not match the manifest"));
    }
    let scenes = m
        .files
        .iter()
        .map(|f| read_scene(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    Ok((m, scenes))
}

pub fn dataset_paths(dir: &Path, m: &DatasetManifest) -> Vec<PathBuf> {
    m.files.iter().map(|f| dir.join(f)).collect()
}
