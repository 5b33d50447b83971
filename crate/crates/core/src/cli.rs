//! Command-line front end: `synth`, `translate`, `eval` and `ablate`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{AttentionMode, AttentionToyParams, ConditionToken, ScheduleKind};
use crate::error::Error;
use crate::flow::{read_flo, write_flo, FlowField};
use crate::grid::{read_tensor, write_tensor, Boundary, FrameImage, LatentGrid};
use crate::kv::{KeyValues, ParseError};
use crate::mask::{BinaryMask, MaskParams};
use crate::metrics::{token_consistency, warp_error, MetricReport};
use crate::pipeline::{run_video, DenoiserSpec, PipelineConfig, RunOutput, SequenceBundle};
use crate::synth::{generate, SceneSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_CONTRACT: i32 = 4;

pub const SCENE_FILE: &str = "scene.cfg";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    Parse(String),
    Missing(String),
    Contract(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Parse(_) => EXIT_PARSE,
            Self::Missing(_) => EXIT_MISSING,
            Self::Contract(_) => EXIT_CONTRACT,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Parse(m) => write!(f, "invalid input: {m}"),
            Self::Missing(m) => write!(f, "missing input: {m}"),
            Self::Contract(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Format(_) | Error::Truncated { .. } | Error::Validation(_) | Error::Image(_) => {
                Self::Parse(e.to_string())
            }
            Error::Io(ref io) if io.kind() == io::ErrorKind::NotFound => Self::Missing(e.to_string()),
            _ => Self::Contract(e.to_string()),
        }
    }
}

impl From<ParseError> for CliError {
    fn from(e: ParseError) -> Self {
        Self::Parse(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_context(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |e| {
        if e.kind() == io::ErrorKind::NotFound {
            CliError::Missing(format!("{}: {e}", path.display()))
        } else {
            CliError::Contract(format!("{}: {e}", path.display()))
        }
    }
}

fn with_path(path: &Path) -> impl FnOnce(Error) -> CliError + '_ {
    move |e| {
        let mapped = CliError::from(e);
        match mapped {
            CliError::Parse(m) => CliError::Parse(format!("{}: {m}", path.display())),
            CliError::Missing(m) => CliError::Missing(format!("{}: {m}", path.display())),
            CliError::Contract(m) => CliError::Contract(format!("{}: {m}", path.display())),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "latentwarp",
    version,
    about = "Flow-guided latent alignment for video translation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic scene with exact flow.
    Synth {
        spec: PathBuf,
        out_dir: PathBuf,
        /// Override the scene seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        json: bool,
    },
    /// Translate the key frames of a sequence directory.
    Translate {
        in_dir: PathBuf,
        out_dir: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        json: bool,
    },
    /// Recompute the metrics of a translated run.
    Eval {
        run_dir: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Compare full, no-alignment and self-attention-only runs.
    Ablate {
        in_dir: PathBuf,
        out_dir: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DenoiserChoice {
    Pointwise,
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AttentionChoice {
    CrossFrame,
    SelfOnly,
}

/// Pipeline flags; each overrides the matching key of `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct PipelineArgs {
    /// Flat key=value file with pipeline settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub t0: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f32>,
    #[arg(long)]
    pub threshold: Option<f32>,
    #[arg(long)]
    pub interval: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub denoiser: Option<DenoiserChoice>,
    #[arg(long)]
    pub latent_factor: Option<usize>,
    #[arg(long, value_enum)]
    pub attention: Option<AttentionChoice>,
}

pub const CONFIG_KEYS: &[&str] = &[
    "steps",
    "t0",
    "alpha",
    "threshold",
    "interval",
    "seed",
    "denoiser",
    "latent_factor",
    "attention",
    "detail_variance",
    "gain",
    "sharpness",
    "local_weight",
    "attention_seed",
    "style_gain",
    "style_bias",
    "schedule",
    "beta_start",
    "beta_end",
    "train_steps",
];

/// Builds a pipeline configuration from `key=value` settings; absent keys
/// keep their defaults.
pub fn pipeline_config_from_kv(kv: &KeyValues) -> std::result::Result<PipelineConfig, ParseError> {
    kv.reject_unknown(CONFIG_KEYS)?;
    let d = PipelineConfig::default();
    let bad = |message: String| ParseError { line: None, message };
    let toy = AttentionToyParams::default();
    let detail_variance = kv.get_or("detail_variance", toy.detail_variance)?;
    let denoiser = match kv.raw("denoiser").unwrap_or("pointwise") {
        "pointwise" => DenoiserSpec::Pointwise { detail_variance },
        "attention" => DenoiserSpec::Attention(AttentionToyParams {
            detail_variance,
            gain: kv.get_or("gain", toy.gain)?,
            sharpness: kv.get_or("sharpness", toy.sharpness)?,
            local_weight: kv.get_or("local_weight", toy.local_weight)?,
            seed: kv.get_or("attention_seed", toy.seed)?,
        }),
        other => return Err(bad(format!("unknown denoiser '{other}'"))),
    };
    let attention = match kv.raw("attention").unwrap_or("cross-frame") {
        "cross-frame" => AttentionMode::CrossFrame,
        "self-only" => AttentionMode::SelfOnly,
        other => return Err(bad(format!("unknown attention mode '{other}'"))),
    };
    let schedule = match (kv.raw("schedule").unwrap_or("strided"), d.schedule) {
        (
            "strided",
            ScheduleKind::StridedLinear {
                train_steps,
                beta_start,
                beta_end,
            },
        ) => ScheduleKind::StridedLinear {
            train_steps: kv.get_or("train_steps", train_steps)?,
            beta_start: kv.get_or("beta_start", beta_start)?,
            beta_end: kv.get_or("beta_end", beta_end)?,
        },
        ("linear", _) => ScheduleKind::Linear {
            beta_start: kv.get_or("beta_start", 1e-4)?,
            beta_end: kv.get_or("beta_end", 2e-2)?,
        },
        (other, _) => return Err(bad(format!("unknown schedule '{other}'"))),
    };
    let condition = match (kv.get::<f32>("style_gain")?, kv.get::<f32>("style_bias")?) {
        (None, None) => ConditionToken::default(),
        (g, b) => ConditionToken::new("style", vec![g.unwrap_or(1.0), b.unwrap_or(0.0)]),
    };
    let cfg = PipelineConfig {
        steps: kv.get_or("steps", d.steps)?,
        t0: kv.get_or("t0", d.t0)?,
        mask: MaskParams {
            alpha: kv.get_or("alpha", d.mask.alpha)?,
            threshold: kv.get_or("threshold", d.mask.threshold)?,
        },
        keyframe_interval: kv.get_or("interval", d.keyframe_interval)?,
        latent_factor: kv.get_or("latent_factor", d.latent_factor)?,
        seed: kv.get_or("seed", d.seed)?,
        schedule,
        attention,
        denoiser,
        condition,
        mask_mode: d.mask_mode,
    };
    cfg.validate().map_err(|e| bad(e.to_string()))?;
    Ok(cfg)
}

impl PipelineArgs {
    /// Reads `--config` (if any), applies flag overrides and validates.
    pub fn resolve(&self, default_denoiser: DenoiserChoice) -> CliResult<PipelineConfig> {
        let mut kv = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(io_context(path))?;
                KeyValues::parse(&text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?
            }
            None => KeyValues::default(),
        };
        if kv.raw("denoiser").is_none() {
            kv.set("denoiser", choice_name(default_denoiser));
        }
        let overrides: [(&str, Option<String>); 9] = [
            ("steps", self.steps.map(|v| v.to_string())),
            ("t0", self.t0.map(|v| v.to_string())),
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("threshold", self.threshold.map(|v| v.to_string())),
            ("interval", self.interval.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("denoiser", self.denoiser.map(|d| choice_name(d).to_string())),
            ("latent_factor", self.latent_factor.map(|v| v.to_string())),
            (
                "attention",
                self.attention.map(|a| match a {
                    AttentionChoice::CrossFrame => "cross-frame".to_string(),
                    AttentionChoice::SelfOnly => "self-only".to_string(),
                }),
            ),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                kv.set(key, v);
            }
        }
        Ok(pipeline_config_from_kv(&kv)?)
    }
}

fn choice_name(d: DenoiserChoice) -> &'static str {
    match d {
        DenoiserChoice::Pointwise => "pointwise",
        DenoiserChoice::Attention => "attention",
    }
}

pub fn frame_name(i: usize) -> String {
    format!("frame_{i:04}.png")
}

pub fn forward_flow_name(j: usize) -> String {
    format!("flow_fwd_{j:04}.flo")
}

pub fn backward_flow_name(j: usize) -> String {
    format!("flow_bwd_{j:04}.flo")
}

fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(io_context(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn checksums(dir: &Path, names: &[String]) -> CliResult<BTreeMap<String, String>> {
    names
        .iter()
        .map(|n| Ok((n.clone(), sha256_file(&dir.join(n))?)))
        .collect()
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Contract(format!("{}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Contract(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(io_context(path))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthManifest {
    pub command: String,
    pub version: String,
    pub scene: SceneSpec,
    pub frames: usize,
    pub boundary: Boundary,
    pub files: BTreeMap<String, String>,
}

/// Writes frames, flows, disocclusion masks, the scene echo and a manifest.
pub fn write_bundle(bundle: &SequenceBundle, spec: &SceneSpec, out_dir: &Path) -> CliResult<SynthManifest> {
    create_dir(out_dir)?;
    let mut names = Vec::new();
    for (i, frame) in bundle.frames.iter().enumerate() {
        let name = frame_name(i);
        frame.save_png(out_dir.join(&name)).map_err(CliError::from)?;
        names.push(name);
    }
    for j in 0..bundle.len() - 1 {
        for (name, flow) in [
            (forward_flow_name(j), &bundle.prev_to_cur[j]),
            (backward_flow_name(j), &bundle.cur_to_prev[j]),
        ] {
            write_flo(flow, out_dir.join(&name)).map_err(CliError::from)?;
            names.push(name);
        }
        if let Some(masks) = &bundle.disocclusion {
            let name = format!("disocclusion_{j:04}.lwt");
            write_tensor(&masks[j].to_grid(), out_dir.join(&name)).map_err(CliError::from)?;
            names.push(name);
        }
    }
    fs::write(out_dir.join(SCENE_FILE), spec.to_config_string()).map_err(io_context(out_dir))?;
    names.push(SCENE_FILE.to_string());
    let manifest = SynthManifest {
        command: "synth".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        scene: spec.clone(),
        frames: bundle.len(),
        boundary: bundle.boundary,
        files: checksums(out_dir, &names)?,
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn cmd_synth(spec_path: &Path, out_dir: &Path, seed: Option<u64>) -> CliResult<SynthManifest> {
    let text = fs::read_to_string(spec_path).map_err(io_context(spec_path))?;
    let mut spec = SceneSpec::parse(&text).map_err(|e| CliError::Parse(format!("{}: {e}", spec_path.display())))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let bundle = generate(&spec)?;
    write_bundle(&bundle, &spec, out_dir)
}

fn count_frames(dir: &Path) -> CliResult<usize> {
    if !dir.is_dir() {
        return Err(CliError::Missing(format!("{} is not a directory", dir.display())));
    }
    let mut n = 0;
    while dir.join(frame_name(n)).is_file() {
        n += 1;
    }
    if n == 0 {
        return Err(CliError::Missing(format!("no {} in {}", frame_name(0), dir.display())));
    }
    Ok(n)
}

/// Loads `frame_0000.png ..` and the flows of every pair up to `last` frame.
///
/// Missing flows are regenerated from `scene.cfg` when present.
pub fn load_bundle(dir: &Path, last: Option<usize>) -> CliResult<SequenceBundle> {
    let available = count_frames(dir)?;
    let n = last.map_or(available, |l| (l + 1).min(available));
    let frames = (0..n)
        .map(|i| {
            let path = dir.join(frame_name(i));
            FrameImage::load(&path).map_err(with_path(&path))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let scene_path = dir.join(SCENE_FILE);
    let scene = if scene_path.is_file() {
        let text = fs::read_to_string(&scene_path).map_err(io_context(&scene_path))?;
        Some(SceneSpec::parse(&text).map_err(|e| CliError::Parse(format!("{}: {e}", scene_path.display())))?)
    } else {
        None
    };
    let boundary = scene.as_ref().map_or(Boundary::Clamp, SceneSpec::boundary);
    let mut regenerated: Option<SequenceBundle> = None;
    let mut prev_to_cur = Vec::with_capacity(n.saturating_sub(1));
    let mut cur_to_prev = Vec::with_capacity(n.saturating_sub(1));
    for j in 0..n.saturating_sub(1) {
        let fwd = dir.join(forward_flow_name(j));
        let bwd = dir.join(backward_flow_name(j));
        if fwd.is_file() && bwd.is_file() {
            prev_to_cur.push(read_flo(&fwd).map_err(with_path(&fwd))?);
            cur_to_prev.push(read_flo(&bwd).map_err(with_path(&bwd))?);
            continue;
        }
        let Some(spec) = &scene else {
            let missing = if fwd.is_file() {
                backward_flow_name(j)
            } else {
                forward_flow_name(j)
            };
            return Err(CliError::Missing(format!(
                "flow for frame pair {j} -> {} ({missing}) not found in {}",
                j + 1,
                dir.display()
            )));
        };
        if regenerated.is_none() {
            regenerated = Some(generate(spec)?);
        }
        let synth = regenerated.as_ref().expect("just generated");
        if j >= synth.prev_to_cur.len() {
            return Err(CliError::Parse(format!(
                "{SCENE_FILE} describes fewer frames than {}",
                dir.display()
            )));
        }
        prev_to_cur.push(synth.prev_to_cur[j].clone());
        cur_to_prev.push(synth.cur_to_prev[j].clone());
    }
    let bundle = SequenceBundle {
        frames,
        prev_to_cur,
        cur_to_prev,
        boundary,
        disocclusion: None,
    };
    bundle.validate().map_err(|e| CliError::Parse(e.to_string()))?;
    Ok(bundle)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub file: String,
    pub latent_file: String,
    pub aligned_steps: usize,
    pub mask_file: Option<String>,
    pub mask_ones: Option<usize>,
    pub key_flow_file: Option<String>,
    pub valid_file: Option<String>,
    pub anchor_flow_file: Option<String>,
    pub warp_error: Option<f64>,
    pub masked_warp_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: PipelineConfig,
    pub denoiser: String,
    pub noise: String,
    pub source_frames: usize,
    pub boundary: Boundary,
    pub key_frames: Vec<usize>,
    pub frames: Vec<FrameRecord>,
    pub metrics: MetricReport,
    pub files: BTreeMap<String, String>,
}

/// Writes a run's frames, masks, latents and flows plus its manifest.
pub fn write_run(run: &RunOutput, source_frames: usize, boundary: Boundary, out_dir: &Path) -> CliResult<RunManifest> {
    create_dir(out_dir)?;
    let mut names = Vec::new();
    let mut records = Vec::new();
    let mut pair = 0usize;
    for (order, t) in run.translations.iter().enumerate() {
        let i = t.frame_index;
        let file = frame_name(i);
        t.frame.save_png(out_dir.join(&file)).map_err(CliError::from)?;
        names.push(file.clone());
        let latent_file = format!("latent_{i:04}.lwt");
        write_tensor(t.latent(), out_dir.join(&latent_file)).map_err(CliError::from)?;
        names.push(latent_file.clone());
        let mut record = FrameRecord {
            index: i,
            file,
            latent_file,
            aligned_steps: t.aligned_steps,
            mask_file: None,
            mask_ones: None,
            key_flow_file: None,
            valid_file: None,
            anchor_flow_file: None,
            warp_error: None,
            masked_warp_error: None,
        };
        if let Some(g) = &t.geometry {
            let mask_file = format!("mask_{i:04}.lwt");
            write_tensor(&g.mask.to_grid(), out_dir.join(&mask_file)).map_err(CliError::from)?;
            let key_flow_file = format!("keyflow_{i:04}.flo");
            write_flo(&g.cur_to_prev, out_dir.join(&key_flow_file)).map_err(CliError::from)?;
            let valid = BinaryMask::new(
                g.occlusion.height(),
                g.occlusion.width(),
                g.occlusion.values().iter().map(|&o| o >= 0.5).collect(),
            )?;
            let valid_file = format!("valid_{i:04}.lwt");
            write_tensor(&valid.to_grid(), out_dir.join(&valid_file)).map_err(CliError::from)?;
            let anchor_flow_file = format!("anchorflow_{i:04}.flo");
            write_flo(&run.anchor_flows[order - 1], out_dir.join(&anchor_flow_file)).map_err(CliError::from)?;
            names.extend([
                mask_file.clone(),
                key_flow_file.clone(),
                valid_file.clone(),
                anchor_flow_file.clone(),
            ]);
            record.mask_ones = Some(g.mask.count_ones());
            record.mask_file = Some(mask_file);
            record.key_flow_file = Some(key_flow_file);
            record.valid_file = Some(valid_file);
            record.anchor_flow_file = Some(anchor_flow_file);
            record.warp_error = run.metrics.per_pair.get(pair).copied();
            record.masked_warp_error = run.metrics.masked_per_pair.get(pair).copied().flatten();
            pair += 1;
        }
        records.push(record);
    }
    let manifest = RunManifest {
        command: "translate".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: run.config.clone(),
        denoiser: run.config.denoiser.name().into(),
        noise: "shared-per-frame".into(),
        source_frames,
        boundary,
        key_frames: run.key_indices.clone(),
        frames: records,
        metrics: run.metrics.clone(),
        files: checksums(out_dir, &names)?,
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

fn run_pipeline(in_dir: &Path, cfg: &PipelineConfig) -> CliResult<(RunOutput, usize, Boundary)> {
    let available = count_frames(in_dir)?;
    let last = cfg.key_indices(available).last().copied();
    let bundle = load_bundle(in_dir, last)?;
    let denoiser = cfg.denoiser.build(3)?;
    let run = run_video(&bundle, cfg, denoiser.as_ref())?;
    Ok((run, available, bundle.boundary))
}

pub fn cmd_translate(in_dir: &Path, out_dir: &Path, cfg: &PipelineConfig) -> CliResult<RunManifest> {
    let (run, available, boundary) = run_pipeline(in_dir, cfg)?;
    write_run(&run, available, boundary, out_dir)
}

/// Recomputes warp error and token consistency from the files of a run.
pub fn cmd_eval(run_dir: &Path) -> CliResult<MetricReport> {
    let manifest_path = run_dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(io_context(&manifest_path))?;
    let manifest: RunManifest =
        serde_json::from_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", manifest_path.display())))?;
    let load_frame = |name: &str| {
        let p = run_dir.join(name);
        FrameImage::load(&p).map_err(with_path(&p))
    };
    let load_flow = |name: &str| {
        let p = run_dir.join(name);
        read_flo(&p).map_err(with_path(&p))
    };
    let load_grid = |name: &str| -> CliResult<LatentGrid> {
        let p = run_dir.join(name);
        read_tensor(&p).map_err(with_path(&p))
    };
    let missing = |what: &str, i: usize| CliError::Parse(format!("manifest lists no {what} for frame {i}"));
    let mut frames = Vec::new();
    let mut latents = Vec::new();
    let mut flows = Vec::new();
    let mut valid = Vec::new();
    let mut anchor_flows: Vec<FlowField> = Vec::new();
    for (order, r) in manifest.frames.iter().enumerate() {
        frames.push(load_frame(&r.file)?);
        latents.push(load_grid(&r.latent_file)?);
        if order > 0 {
            flows.push(load_flow(
                r.key_flow_file.as_deref().ok_or_else(|| missing("key flow", r.index))?,
            )?);
            let grid = load_grid(r.valid_file.as_deref().ok_or_else(|| missing("valid mask", r.index))?)?;
            valid.push(BinaryMask::from_grid(&grid)?);
            anchor_flows.push(load_flow(
                r.anchor_flow_file
                    .as_deref()
                    .ok_or_else(|| missing("anchor flow", r.index))?,
            )?);
        }
    }
    if frames.is_empty() {
        return Err(CliError::Parse("manifest lists no frames".into()));
    }
    let mut report = warp_error(&frames, &flows, Some(&valid), manifest.boundary)?;
    report.token_consistency = token_consistency(&latents, &anchor_flows, manifest.boundary)?;
    Ok(report)
}

pub const ABLATIONS: [&str; 3] = ["full", "no-alignment", "self-only"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub metrics: MetricReport,
}

/// The three ablation configurations derived from `base`.
pub fn ablation_configs(base: &PipelineConfig) -> [(&'static str, PipelineConfig); 3] {
    [
        (
            ABLATIONS[0],
            PipelineConfig {
                attention: AttentionMode::CrossFrame,
                ..base.clone()
            },
        ),
        (
            ABLATIONS[1],
            PipelineConfig {
                attention: AttentionMode::CrossFrame,
                t0: base.steps,
                ..base.clone()
            },
        ),
        (
            ABLATIONS[2],
            PipelineConfig {
                attention: AttentionMode::SelfOnly,
                ..base.clone()
            },
        ),
    ]
}

pub fn cmd_ablate(in_dir: &Path, out_dir: &Path, base: &PipelineConfig) -> CliResult<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, cfg) in ablation_configs(base) {
        let (run, available, boundary) = run_pipeline(in_dir, &cfg)?;
        write_run(&run, available, boundary, &out_dir.join(name))?;
        rows.push(AblationRow {
            name: name.to_string(),
            metrics: run.metrics,
        });
    }
    write_json(&out_dir.join("ablation.json"), &rows)?;
    Ok(rows)
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"))
}

pub fn format_report(report: &MetricReport) -> String {
    let mut s = String::new();
    for (i, (e, m)) in report
        .per_pair
        .iter()
        .zip(report.masked_per_pair.iter().chain(std::iter::repeat(&None)))
        .enumerate()
    {
        s.push_str(&format!(
            "pair {i}: warp error {:.3}e-3, masked {}e-3\n",
            e * 1e3,
            fmt_opt(m.map(|m| m * 1e3), 3)
        ));
    }
    s.push_str(&format!("warp error: {}e-3\n", fmt_opt(report.mean_scaled(), 3)));
    s.push_str(&format!(
        "masked warp error: {}e-3\n",
        fmt_opt(report.masked_mean_scaled(), 3)
    ));
    s.push_str(&format!(
        "token consistency: {}\n",
        fmt_opt(report.token_consistency, 6)
    ));
    s
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<14} {:>16} {:>16} {:>18}\n",
        "config", "warp err (e-3)", "masked (e-3)", "token consistency"
    );
    for row in rows {
        s.push_str(&format!(
            "{:<14} {:>16} {:>16} {:>18}\n",
            row.name,
            fmt_opt(row.metrics.mean_scaled(), 3),
            fmt_opt(row.metrics.masked_mean_scaled(), 3),
            fmt_opt(row.metrics.token_consistency, 6)
        ));
    }
    s
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Contract(e.to_string()))
}

fn dispatch(command: Command, out: &mut dyn Write) -> CliResult<()> {
    let emit =
        |out: &mut dyn Write, text: String| writeln!(out, "{text}").map_err(|e| CliError::Contract(e.to_string()));
    match command {
        Command::Synth {
            spec,
            out_dir,
            seed,
            json,
        } => {
            let m = cmd_synth(&spec, &out_dir, seed)?;
            let text = if json {
                to_json(&m)?
            } else {
                format!(
                    "wrote {} frames and {} flow pairs to {}",
                    m.frames,
                    m.frames - 1,
                    out_dir.display()
                )
            };
            emit(out, text)
        }
        Command::Translate {
            in_dir,
            out_dir,
            pipeline,
            json,
        } => {
            let cfg = pipeline.resolve(DenoiserChoice::Pointwise)?;
            let m = cmd_translate(&in_dir, &out_dir, &cfg)?;
            let text = if json {
                to_json(&m)?
            } else {
                format!(
                    "translated key frames {:?} into {}\n{}",
                    m.key_frames,
                    out_dir.display(),
                    format_report(&m.metrics).trim_end()
                )
            };
            emit(out, text)
        }
        Command::Eval { run_dir, json } => {
            let report = cmd_eval(&run_dir)?;
            let text = if json {
                to_json(&report)?
            } else {
                format_report(&report).trim_end().to_string()
            };
            emit(out, text)
        }
        Command::Ablate {
            in_dir,
            out_dir,
            pipeline,
            json,
        } => {
            let cfg = pipeline.resolve(DenoiserChoice::Attention)?;
            let rows = cmd_ablate(&in_dir, &out_dir, &cfg)?;
            let text = if json {
                to_json(&rows)?
            } else {
                format_ablation(&rows).trim_end().to_string()
            };
            emit(out, text)
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_PARSE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{rendered}")
            } else {
                write!(out, "{rendered}")
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "latentwarp: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_match_pipeline_defaults() {
        let cfg = pipeline_config_from_kv(&KeyValues::default()).unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!((cfg.steps, cfg.t0, cfg.keyframe_interval), (20, 4, 10));
        assert_eq!((cfg.mask.alpha, cfg.mask.threshold), (5.0, 0.6));
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "steps=10\nt0=2\ndenoiser=attention\ngain=1.5\n").unwrap();
        let args = PipelineArgs {
            config: Some(path),
            t0: Some(3),
            ..PipelineArgs::default()
        };
        let cfg = args.resolve(DenoiserChoice::Pointwise).unwrap();
        assert_eq!((cfg.steps, cfg.t0), (10, 3));
        match cfg.denoiser {
            DenoiserSpec::Attention(p) => assert_eq!(p.gain, 1.5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_configs_are_parse_errors() {
        for text in [
            "steps=0\n",
            "t0=30\n",
            "denoiser=unet\n",
            "alpha=-1\n",
            "bogus=1\n",
            "steps\n",
        ] {
            let kv = KeyValues::parse(text);
            let failed = kv.map(|kv| pipeline_config_from_kv(&kv).is_err()).unwrap_or(true);
            assert!(failed, "{text}");
        }
    }

    #[test]
    fn error_mapping() {
        assert_eq!(CliError::from(Error::Validation("x".into())).exit_code(), EXIT_PARSE);
        assert_eq!(
            CliError::from(Error::Io(io::Error::new(io::ErrorKind::NotFound, "gone"))).exit_code(),
            EXIT_MISSING
        );
        assert_eq!(CliError::from(Error::Contract("x".into())).exit_code(), EXIT_CONTRACT);
        assert_eq!(
            CliError::from(Error::CacheMiss { timestep: 1, layer: 0 }).exit_code(),
            EXIT_CONTRACT
        );
    }

    #[test]
    fn usage_errors_exit_two() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(run(["latentwarp", "translate"], &mut out, &mut err), EXIT_PARSE);
        assert_eq!(
            run(["latentwarp", "eval", "x", "--steps", "3"], &mut out, &mut err),
            EXIT_PARSE
        );
        assert_eq!(run(["latentwarp", "--help"], &mut out, &mut err), EXIT_OK);
    }
}
