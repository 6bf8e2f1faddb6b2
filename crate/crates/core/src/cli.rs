//! `avedit` subcommands.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure. Every command that
//! writes an output directory echoes the configuration it actually used.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::codec::CodecConfig;
use crate::error::{Error, Result};
use crate::metrics::{ctx_f1, IntervalSet, MetricsReport};
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig};
use crate::pipeline::{edit_scene, EditScores};
use crate::sampler::{GuidanceConfig, GuidanceMode, PassAccounting};
use crate::train::{layout_for, train, write_loss_csv, Example, TrainConfig};
use crate::world::{
    generate_scene, read_dataset, read_manifest, read_scene, scene_seed, write_dataset, Scene, WorldConfig,
};

/// Worker threads for data generation; everything else runs on one thread.
pub const THREADS_ENV: &str = "AVEDIT_THREADS";

#[derive(Parser, Debug)]
#[command(name = "avedit", version, about = "Joint audio-visual editing on a synthetic micro-world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Edit one scene with a trained model.
    Sample(SampleArgs),
    /// Score a sample directory against reference intervals.
    Eval(EvalArgs),
    /// Print a checkpoint's configuration and parameter statistics.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    scenes: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// JSON file with optional `world` and `codec` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `world.frames=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Training config JSON; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: u64,
    /// Checkpoint path; the loss curve and config land next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// Band to request in the audio caption; defaults to the scene's own.
    #[arg(long)]
    edit_band: Option<usize>,
    #[arg(long, default_value_t = 10)]
    tau: usize,
    #[arg(long, default_value_t = 5.0)]
    s_ctx: f64,
    #[arg(long, default_value_t = 5.0)]
    s_v: f64,
    #[arg(long, default_value_t = 5.0)]
    s_a: f64,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Plain joint sampling: one forward per step, no guidance.
    #[arg(long)]
    plain: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Loss curve CSV to reference in the report.
    #[arg(long)]
    loss: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
}

/// `gen-data` configuration file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub world: WorldConfig,
    pub codec: CodecConfig,
}

/// Echoed into `sample` output directories.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub checkpoint: PathBuf,
    pub scene: PathBuf,
    pub band: usize,
    pub seed: u64,
    pub guidance: GuidanceConfig,
    pub world: WorldConfig,
    pub codec: CodecConfig,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Inspect(a) => inspect_cmd(a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Sets `key` (dot-separated) in `root`; the key must already exist.
pub fn apply_override(root: &mut Value, assignment: &str) -> std::result::Result<(), String> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| format!("override `{assignment}` is not KEY=VALUE"))?;
    let mut node = root;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| format!("unknown config key `{key}`"))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Loads `T` from an optional JSON file, then applies overrides.
fn load_config<T>(path: Option<&Path>, overrides: &[String]) -> std::result::Result<T, Failure>
where
    T: Serialize + for<'de> Deserialize<'de> + Default,
{
    let base: T = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::file(p, e))?;
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
        }
        None => T::default(),
    };
    if overrides.is_empty() {
        return Ok(base);
    }
    let mut v = serde_json::to_value(&base).map_err(Error::from)?;
    for o in overrides {
        apply_override(&mut v, o).map_err(Failure::Usage)?;
    }
    serde_json::from_value(v).map_err(|e| Failure::Usage(format!("override: {e}")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::file(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::file(path, e))
}

fn threads() -> std::result::Result<usize, Failure> {
    match std::env::var(THREADS_ENV) {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Failure::Usage(format!("{THREADS_ENV} must be a positive integer, got `{s}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn gen_data(a: GenDataArgs) -> std::result::Result<(), Failure> {
    let cfg: GenConfig = load_config(a.config.as_deref(), &a.overrides)?;
    cfg.world.validate(&cfg.codec).map_err(|e| Failure::Usage(e.to_string()))?;
    let workers = threads()?.min(a.scenes.max(1));
    let ids: Vec<usize> = (0..a.scenes).collect();
    let chunk = a.scenes.div_ceil(workers).max(1);
    let scenes: Vec<Scene> = std::thread::scope(|s| {
        let handles: Vec<_> = ids
            .chunks(chunk)
            .map(|part| {
                let cfg = &cfg;
                s.spawn(move || {
                    part.iter()
                        .map(|&i| generate_scene(scene_seed(a.seed, i), &cfg.world, &cfg.codec))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scene worker panicked"))
            .collect::<Result<Vec<Vec<_>>>>()
    })?
    .into_iter()
    .flatten()
    .collect();
    write_dataset(&a.out, &scenes, a.seed, &cfg.world, &cfg.codec)?;
    write_json(&a.out.join("config.json"), &cfg)?;
    log::info!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train_cmd(a: TrainArgs) -> std::result::Result<(), Failure> {
    let mut cfg: TrainConfig = load_config(a.config.as_deref(), &a.overrides)?;
    cfg.seed = a.seed;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    let manifest = read_manifest(&a.data)?;
    let codec = manifest.codec.clone();
    let (_, scenes) = read_dataset(&a.data, &codec)?;
    if scenes.is_empty() {
        return Err(Failure::Usage(format!("{} holds no scenes", a.data.display())));
    }
    // The token layout is fixed by the data.
    let layout = layout_for(&manifest.world, &codec);
    if cfg.model.layout != layout {
        log::info!("using the dataset layout {layout:?}");
    }
    cfg.model.layout = layout;
    cfg.model.video_channels = codec.channels_video();
    cfg.model.audio_channels = codec.bands;
    cfg.model.caption_len = manifest.world.caption_len;
    cfg.model.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    cfg.router.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let examples = scenes
        .iter()
        .map(|s| Example::encode(s, &codec))
        .collect::<Result<Vec<_>>>()?;
    let every = (cfg.steps / 20).max(1);
    let (model, curve) = train(&examples, &cfg, &codec, |r| {
        if r.step % every == 0 {
            log::info!("step {} {} loss {:.4}", r.step, r.mode, r.loss);
        }
    })?;
    save_checkpoint(&a.out, &model, cfg.seed, cfg.steps as u64)?;
    write_loss_csv(&sibling(&a.out, ".loss.csv"), &curve)?;
    write_json(&sibling(&a.out, ".config.json"), &cfg)?;
    Ok(())
}

fn write_pgm(path: &Path, frame: &[f64], h: usize, w: usize) -> Result<()> {
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend(frame.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, buf).map_err(|e| Error::file(path, e))
}

#[derive(Serialize)]
struct Latents<'a> {
    video_shape: &'a [usize],
    video: &'a [f64],
    audio_shape: &'a [usize],
    audio: &'a [f64],
}

#[derive(Serialize)]
struct Events<'a> {
    visual_frames: &'a [i64],
    audio_onset_frames: &'a [i64],
}

fn sample_cmd(a: SampleArgs) -> std::result::Result<(), Failure> {
    let (model, header) = load_checkpoint(&a.ckpt)?;
    let scene = read_scene(&a.scene)?;
    // Take world and codec from the scene's dataset when it has one.
    let gen = match a.scene.parent().map(read_manifest) {
        Some(Ok(m)) => GenConfig {
            world: m.world,
            codec: m.codec,
        },
        _ => GenConfig::default(),
    };
    let (world, codec) = (gen.world, gen.codec);
    if layout_for(&world, &codec) != model.config.layout {
        return Err(Failure::Usage(format!(
            "checkpoint layout {:?} does not fit the scene",
            model.config.layout
        )));
    }
    let guidance = GuidanceConfig {
        steps: a.steps,
        tau: a.tau,
        s_ctx: a.s_ctx,
        s_v: a.s_v,
        s_a: a.s_a,
        mode: if a.plain { GuidanceMode::Plain } else { GuidanceMode::TwoStage },
    };
    guidance.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(b) = a.edit_band.filter(|&b| b >= codec.bands) {
        return Err(Failure::Usage(format!("--edit-band {b} outside 0..{}", codec.bands)));
    }
    log::info!("checkpoint trained {} steps (seed {})", header.step, header.seed);
    let out = edit_scene(&model, &scene, &world, &codec, a.edit_band, &guidance, a.seed)?;

    let dir = &a.out;
    let frames = dir.join("frames");
    let reference = dir.join("reference");
    for d in [dir, &frames, &reference] {
        fs::create_dir_all(d).map_err(|e| Error::file(d, e))?;
    }
    let [f, h, w] = out.pixels.shape() else {
        unreachable!("decoded video is rank 3")
    };
    for fi in 0..*f {
        let frame = &out.pixels.data()[fi * h * w..(fi + 1) * h * w];
        write_pgm(&frames.join(format!("frame_{fi:03}.pgm")), frame, *h, *w)?;
    }
    let tok = codec.token_duration();
    let mut csv = String::from("token,time,energy\n");
    for (j, e) in out.envelope.iter().enumerate() {
        csv.push_str(&format!("{j},{},{e}\n", j as f64 * tok));
    }
    let env_path = dir.join("envelope.csv");
    fs::write(&env_path, csv).map_err(|e| Error::file(&env_path, e))?;
    write_json(
        &dir.join("latents.json"),
        &Latents {
            video_shape: out.video.shape(),
            video: out.video.data(),
            audio_shape: out.audio.shape(),
            audio: out.audio.data(),
        },
    )?;
    write_json(&dir.join("accounting.json"), &out.accounting)?;
    write_json(&dir.join("target.json"), &out.scores.generated)?;
    write_json(&reference.join("target.json"), &scene.meta.target_intervals)?;
    write_json(&reference.join("protected.json"), &scene.meta.protected_intervals)?;
    write_json(
        &dir.join("events.json"),
        &Events {
            visual_frames: &out.scores.visual_events,
            audio_onset_frames: &out.scores.audio_events,
        },
    )?;
    write_json(&dir.join("scores.json"), &out.scores)?;
    write_json(&dir.join("summary.json"), &out.scores.report(Some(&out.accounting)))?;
    write_json(
        &dir.join("config.json"),
        &SampleRecord {
            checkpoint: a.ckpt.clone(),
            scene: a.scene.clone(),
            band: out.scores.band,
            seed: a.seed,
            guidance,
            world,
            codec,
        },
    )?;
    println!("{}", serde_json::to_string(&out.scores.report(Some(&out.accounting))).map_err(Error::from)?);
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> std::result::Result<(), Failure> {
    let generated: IntervalSet = read_json(&a.pred.join("target.json"))?;
    let reference: IntervalSet = read_json(&a.reference.join("target.json"))?;
    let protected_path = a.reference.join("protected.json");
    let protected: IntervalSet = if protected_path.exists() {
        read_json(&protected_path)?
    } else {
        IntervalSet::default()
    };
    let ctx = ctx_f1(&generated, &protected, &reference);
    let mut report = MetricsReport {
        precision: ctx.precision,
        recall: ctx.recall,
        ctx_f1: ctx.f1,
        ..MetricsReport::default()
    };
    let scores_path = a.pred.join("scores.json");
    if scores_path.exists() {
        let s: EditScores = read_json(&scores_path)?;
        report.sync_lag = Some(s.sync_lag);
        report.sync_score = Some(s.sync_score);
        report.band_dominance = Some(s.band_check.dominant);
        report.band_margin = Some(s.band_check.margin);
    }
    let acc_path = a.pred.join("accounting.json");
    if acc_path.exists() {
        let acc: PassAccounting = read_json(&acc_path)?;
        report.total_forwards = Some(acc.total);
    }
    if let Some(loss) = &a.loss {
        if !loss.exists() {
            return Err(Failure::Usage(format!("{} does not exist", loss.display())));
        }
        report.loss_curve = Some(loss.display().to_string());
    }
    write_json(&a.out, &report)?;
    println!("{}", serde_json::to_string(&report).map_err(Error::from)?);
    Ok(())
}

#[derive(Serialize)]
struct ParamStats<'a> {
    name: &'a str,
    shape: &'a [usize],
    mean: f64,
    std: f64,
    max_abs: f64,
}

#[derive(Serialize)]
struct Inspection<'a> {
    config: &'a ModelConfig,
    seed: u64,
    step: u64,
    parameters: usize,
    tensors: Vec<ParamStats<'a>>,
}

fn inspect_cmd(a: InspectArgs) -> std::result::Result<(), Failure> {
    let (model, header) = load_checkpoint(&a.ckpt)?;
    let tensors = model
        .params
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let n = t.len() as f64;
            let mean = t.sum() / n;
            let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            ParamStats {
                name: model.params.name(i),
                shape: t.shape(),
                mean,
                std: var.sqrt(),
                max_abs: t.max_abs(),
            }
        })
        .collect();
    let report = Inspection {
        config: &model.config,
        seed: header.seed,
        step: header.step,
        parameters: model.num_parameters(),
        tensors,
    };
    println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
    Ok(())
}
