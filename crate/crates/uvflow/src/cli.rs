//! Command-line entry point: one binary, one subcommand per capability.
//! Every successful run writes a JSON manifest beside its primary output
//! (datasets carry `run_manifest.json` inside the directory) recording the
//! exact command, a digest of the effective configuration, seeds, input and
//! output file hashes, wall-clock time, and format versions, so any artifact
//! traces back to the run that made it.
//!
//! Exit codes: 0 success, 1 rejected flags or inputs, 2 runtime failure.
//! Logs go to standard error as timestamped lines. No subcommand writes to
//! any path it read. All compute runs on a single worker with ordered
//! reductions, so fixed seeds give bit-identical outputs; `--threads` caps
//! future parallel plumbing and `--deterministic` records the promise in the
//! manifest.

use crate::editkit::{self, EditRequest, Region};
use crate::error::{Result, UvError};
use crate::flowdit::{self, DisentangleConfig, FlowModel, ModelConfig, TrainConfig, TrainSample};
use crate::landmarks::{self, image_to_array, Detector, DetectorConfig, DetectorTrainConfig};
use crate::metrics::{self, MetricReport, MetricRow};
use crate::sampler::{self, GuidanceConfig};
use crate::spectra::{self, RadialSpectrum, Window};
use crate::toyfaces::{
    self, canonical_landmarks, dataset_gen, load_dataset, load_png, region_masks, save_png,
    DatasetConfig, Image, Portrait, CANVAS,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// The checked-in defaults. Every tunable key appears here; subcommands read
/// these when no `--config` is given.
pub const DEFAULT_CONFIG_TOML: &str = include_str!("../../../configs/default.toml");

/// Full pipeline configuration. Files must spell out every key; unknown keys
/// are errors, so a typo cannot silently fall back to a default.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub detector: DetectorConfig,
    pub detector_train: DetectorTrainConfig,
    pub sampler: GuidanceConfig,
}

impl CliConfig {
    pub fn embedded_default() -> CliConfig {
        toml::from_str(DEFAULT_CONFIG_TOML).expect("embedded default config parses")
    }

    /// Reads `path`, or the embedded defaults when none is given.
    pub fn load(path: Option<&Path>) -> Result<CliConfig> {
        match path {
            None => Ok(Self::embedded_default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| UvError::io(p, e))?;
                toml::from_str(&text).map_err(|e| {
                    UvError::validation("config file", format!("{}: {e}", p.display()))
                })
            }
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "uvflow",
    version,
    about = "Facial texture recovery on a procedural toy domain: conditional \
             flow matching, landmark-guided sampling, attention-group editing"
)]
struct Cli {
    /// Upper bound on worker threads
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Force ordered reductions so equal inputs give bit-identical outputs
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Render a procedural face-texture dataset with ground truth
    Gen(GenArgs),
    /// Train the landmark detector or the texture flow model
    #[command(subcommand)]
    Train(TrainCmd),
    /// Reconstruct a texture from a portrait with landmark guidance
    Sample(SampleArgs),
    /// Recombine one portrait's identity with another's style
    Transfer(TransferArgs),
    /// Replace mouth or brow features from a reference portrait
    Edit(EditArgs),
    /// Spectral and layer-ablation reports
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Score predicted textures against dataset ground truth
    Eval(EvalArgs),
}

#[derive(Subcommand, Debug)]
enum TrainCmd {
    /// Train the landmark detector on rendered textures
    Landmarks(TrainLandmarksArgs),
    /// Train the conditional texture flow model
    Model(TrainModelArgs),
}

#[derive(Subcommand, Debug)]
enum AnalyzeCmd {
    /// Radial power spectrum and per-frequency noise crossing times
    Snr(SnrArgs),
    /// Progressive attention-scaling sweep over a layer order
    Ablation(AblationArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// Number of samples
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of portraits carrying synthetic occluders
    #[arg(long, default_value_t = 0.35)]
    occlusion_rate: f32,
    /// Maximum portrait pose shift per axis, in pixels
    #[arg(long, default_value_t = 4)]
    pose_max: i32,
}

#[derive(Args, Debug)]
struct TrainLandmarksArgs {
    /// Dataset directory from `gen`
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint
    #[arg(long)]
    out: PathBuf,
    /// Passes over the dataset
    #[arg(long, default_value_t = 150)]
    epochs: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Config file; embedded defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Batch size override
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainModelArgs {
    /// Dataset directory from `gen`
    #[arg(long)]
    data: PathBuf,
    /// Config file; embedded defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output checkpoint
    #[arg(long)]
    out: PathBuf,
    /// Adam step count override
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Mix group-truncation supervision into training
    #[arg(long)]
    disentangle: bool,
    /// Truncation probability per boundary
    #[arg(long, default_value_t = 0.3, requires = "disentangle")]
    p: f64,
    /// Continue from an existing checkpoint
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    /// Flow model checkpoint
    #[arg(long)]
    model: PathBuf,
    /// Landmark detector checkpoint
    #[arg(long)]
    detector: PathBuf,
    /// Conditioning portrait PNG
    #[arg(long)]
    input: PathBuf,
    /// Output texture PNG
    #[arg(long)]
    out: PathBuf,
    /// Guidance strength override; 0 disables guidance
    #[arg(long)]
    eta: Option<f64>,
    /// Euler step count override
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the guidance trace CSV here
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Config file; embedded defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TransferArgs {
    /// Portrait whose face layout survives the transfer
    #[arg(long)]
    identity: PathBuf,
    /// Portrait contributing palette and style
    #[arg(long)]
    style: PathBuf,
    /// Flow model checkpoint
    #[arg(long)]
    model: PathBuf,
    /// Landmark detector checkpoint
    #[arg(long)]
    detector: PathBuf,
    /// Output texture PNG
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV path; defaults next to the texture
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Guidance strength override
    #[arg(long)]
    eta: Option<f64>,
    /// Euler step count override
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Config file; embedded defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EditArgs {
    /// Portrait being edited
    #[arg(long)]
    source: PathBuf,
    /// Portrait the edited regions are taken from
    #[arg(long)]
    reference: PathBuf,
    /// Comma-separated region names: mouth, brow
    #[arg(long)]
    regions: String,
    /// Flow model checkpoint (must be disentanglement-trained)
    #[arg(long)]
    model: PathBuf,
    /// Landmark detector checkpoint
    #[arg(long)]
    detector: PathBuf,
    /// Output texture PNG
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV path; defaults next to the texture
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Guidance strength override
    #[arg(long)]
    eta: Option<f64>,
    /// Euler step count override
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Config file; embedded defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SnrArgs {
    /// Dataset directory from `gen`
    #[arg(long)]
    data: PathBuf,
    /// Output CSV
    #[arg(long)]
    out: PathBuf,
    /// Time grid as start:end:count, strictly inside (0, 1)
    #[arg(long, default_value = "0.05:0.95:19")]
    tgrid: String,
    /// Apply a Hann taper before the transform
    #[arg(long)]
    hann: bool,
}

#[derive(Args, Debug)]
struct AblationArgs {
    /// Flow model checkpoint
    #[arg(long)]
    model: PathBuf,
    /// Conditioning portrait PNG
    #[arg(long)]
    input: PathBuf,
    /// Layer sweep order
    #[arg(long, value_enum)]
    order: SweepOrder,
    /// Attention-output scale applied to swept layers
    #[arg(long, default_value_t = 0.0)]
    eps: f64,
    /// Output CSV
    #[arg(long)]
    out: PathBuf,
    /// Euler step count override
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Config file; embedded defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SweepOrder {
    /// Single-stream layers, first to last
    #[value(name = "single_forward")]
    SingleForward,
    /// Single-stream layers, last to first
    #[value(name = "single_reverse")]
    SingleReverse,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Directory of predicted textures: ID.png or ID/texture.png
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth dataset directory from `gen`
    #[arg(long)]
    gt: PathBuf,
    /// Output CSV
    #[arg(long)]
    out: PathBuf,
    /// Landmark detector checkpoint
    #[arg(long)]
    detector: PathBuf,
}

/// Parses and dispatches; returns the process exit code.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // Help and version requests leave through the error path too.
            let code = if e.exit_code() == 0 { 0 } else { 1 };
            let _ = e.print();
            return code;
        }
    };
    if cli.threads == 0 {
        log("error: invalid threads: must be >= 1");
        return 1;
    }
    let mut run = Run::new(argv, cli.threads, cli.deterministic);
    match dispatch(&cli.cmd, &mut run) {
        Ok(()) => 0,
        Err(e) => {
            log(&format!("error: {e}"));
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

pub fn run_from_env() -> i32 {
    let argv: Vec<String> = std::env::args().collect();
    run(&argv)
}

fn dispatch(cmd: &Cmd, run: &mut Run) -> Result<()> {
    match cmd {
        Cmd::Gen(a) => cmd_gen(run, a),
        Cmd::Train(TrainCmd::Landmarks(a)) => cmd_train_landmarks(run, a),
        Cmd::Train(TrainCmd::Model(a)) => cmd_train_model(run, a),
        Cmd::Sample(a) => cmd_sample(run, a),
        Cmd::Transfer(a) => cmd_transfer(run, a),
        Cmd::Edit(a) => cmd_edit(run, a),
        Cmd::Analyze(AnalyzeCmd::Snr(a)) => cmd_snr(run, a),
        Cmd::Analyze(AnalyzeCmd::Ablation(a)) => cmd_ablation(run, a),
        Cmd::Eval(a) => cmd_eval(run, a),
    }
}

/// Rolling record of one run, flushed to the manifest at the end.
struct Run {
    argv: Vec<String>,
    threads: usize,
    deterministic: bool,
    start: Instant,
    seeds: BTreeMap<String, u64>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    input_paths: BTreeSet<PathBuf>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a [String],
    config_digest: &'a str,
    seeds: &'a BTreeMap<String, u64>,
    inputs: &'a BTreeMap<String, String>,
    outputs: &'a BTreeMap<String, String>,
    wall_clock_secs: f64,
    versions: BTreeMap<&'static str, String>,
    threads: usize,
    deterministic: bool,
}

impl Run {
    fn new(argv: &[String], threads: usize, deterministic: bool) -> Run {
        Run {
            argv: argv.to_vec(),
            threads,
            deterministic,
            start: Instant::now(),
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            input_paths: BTreeSet::new(),
        }
    }

    fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    /// Hashes one input file. A missing path is a caller mistake, not a crash.
    fn input_file(&mut self, path: &Path) -> Result<()> {
        if !path.is_file() {
            return Err(UvError::validation(
                "input",
                format!("{} is not a file", path.display()),
            ));
        }
        let digest = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        self.input_paths.insert(abs(path));
        Ok(())
    }

    /// A dataset directory is pinned by its own content manifest.
    fn input_dataset(&mut self, dir: &Path) -> Result<()> {
        for name in ["manifest.tsv", "dataset.json"] {
            let p = dir.join(name);
            if p.is_file() {
                return self.input_file(&p);
            }
        }
        Err(UvError::validation(
            "dataset",
            format!("{} has no manifest.tsv or dataset.json", dir.display()),
        ))
    }

    /// Call before writing: refuses to clobber anything read this run.
    fn claim_output(&self, path: &Path) -> Result<()> {
        if self.input_paths.contains(&abs(path)) {
            return Err(UvError::validation(
                "output path",
                format!("{} is an input of this run", path.display()),
            ));
        }
        Ok(())
    }

    fn record_output(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.outputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    /// Records an output whose digest the producer already computed.
    fn record_output_digest(&mut self, path: &Path, digest: String) {
        self.outputs.insert(path.display().to_string(), digest);
    }

    fn finish(&self, manifest_path: &Path, config_digest: &str) -> Result<()> {
        let manifest = RunManifest {
            command: &self.argv,
            config_digest,
            seeds: &self.seeds,
            inputs: &self.inputs,
            outputs: &self.outputs,
            wall_clock_secs: self.start.elapsed().as_secs_f64(),
            versions: versions(),
            threads: self.threads,
            deterministic: self.deterministic,
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| UvError::Runtime(format!("encode run manifest: {e}")))?;
        write_atomic(manifest_path, json.as_bytes())?;
        log(&format!("run manifest: {}", manifest_path.display()));
        Ok(())
    }
}

fn versions() -> BTreeMap<&'static str, String> {
    BTreeMap::from([
        ("uvflow", env!("CARGO_PKG_VERSION").to_string()),
        ("checkpoint_format", crate::ckpt::FORMAT_VERSION.to_string()),
        ("texture_layout", toyfaces::layout::VERSION.to_string()),
    ])
}

fn log(msg: &str) {
    let now = humantime::format_rfc3339_seconds(std::time::SystemTime::now());
    eprintln!("[{now}] {msg}");
}

fn abs(path: &Path) -> PathBuf {
    std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf())
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| UvError::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn digest_json<T: Serialize>(v: &T) -> Result<String> {
    let s = serde_json::to_string(v)
        .map_err(|e| UvError::Runtime(format!("encode config: {e}")))?;
    Ok(format!("{:x}", Sha256::digest(s.as_bytes())))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| UvError::io(dir, e))?;
        }
    }
    Ok(())
}

/// Temp file in the target directory, then rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    let mut tmp = path.as_os_str().to_os_string();
    tmp.push(".tmp-write");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| UvError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| UvError::io(path, e))?;
    Ok(())
}

fn write_output(run: &mut Run, path: &Path, bytes: &[u8]) -> Result<()> {
    run.claim_output(path)?;
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| UvError::io(path, e))?;
    run.record_output(path)
}

fn write_png_output(run: &mut Run, path: &Path, img: &Image) -> Result<()> {
    run.claim_output(path)?;
    ensure_parent(path)?;
    save_png(img, path)?;
    run.record_output(path)
}

/// `X.manifest.json` beside the primary output `X`.
fn manifest_path(primary_output: &Path) -> PathBuf {
    let mut os = primary_output.as_os_str().to_os_string();
    os.push(".manifest.json");
    PathBuf::from(os)
}

/// `X.png` -> `X.<tag>.csv`.
fn sibling_csv(out: &Path, tag: &str) -> PathBuf {
    out.with_extension(format!("{tag}.csv"))
}

/// A bare PNG conditions like an unshifted, unoccluded portrait.
fn load_portrait(path: &Path) -> Result<Portrait> {
    Ok(Portrait { pixels: load_png(path)?, pose_shift: (0, 0), occluders: Vec::new() })
}

/// "start:end:count" -> count evenly spaced times, all strictly inside
/// (0, 1), rounded to 1e-9 so grid labels stay readable in CSV headers.
fn parse_tgrid(s: &str) -> Result<Vec<f64>> {
    let bad = |why: String| UvError::validation("tgrid", why);
    let parts: Vec<&str> = s.split(':').collect();
    let [start, end, count] = parts.as_slice() else {
        return Err(bad(format!("want start:end:count, got {s}")));
    };
    let start: f64 = start.parse().map_err(|e| bad(format!("start: {e}")))?;
    let end: f64 = end.parse().map_err(|e| bad(format!("end: {e}")))?;
    let count: usize = count.parse().map_err(|e| bad(format!("count: {e}")))?;
    if count == 0 {
        return Err(bad("count must be >= 1".into()));
    }
    if !(start > 0.0 && end < 1.0 && start <= end) {
        return Err(bad(format!("need 0 < start <= end < 1, got {start}..{end}")));
    }
    let q = |v: f64| (v * 1e9).round() / 1e9;
    if count == 1 {
        return Ok(vec![q(start)]);
    }
    let step = (end - start) / (count - 1) as f64;
    Ok((0..count).map(|i| q(start + step * i as f64)).collect())
}

fn cmd_gen(run: &mut Run, a: &GenArgs) -> Result<()> {
    let cfg = DatasetConfig {
        occlusion_rate: a.occlusion_rate,
        pose_max: a.pose_max,
        ..DatasetConfig::new(a.n, a.seed)
    };
    run.seed("dataset", a.seed);
    log(&format!("rendering {} samples into {}", cfg.n, a.out.display()));
    let manifest = dataset_gen(&cfg, &a.out)?;
    for e in &manifest.entries {
        run.record_output_digest(&a.out.join(&e.path), e.sha256.clone());
    }
    run.record_output(&a.out.join("manifest.tsv"))?;
    run.finish(&a.out.join("run_manifest.json"), &digest_json(&cfg)?)
}

fn cmd_train_landmarks(run: &mut Run, a: &TrainLandmarksArgs) -> Result<()> {
    let cfg = CliConfig::load(a.config.as_deref())?;
    if let Some(p) = &a.config {
        run.input_file(p)?;
    }
    run.input_dataset(&a.data)?;
    let data = load_dataset(&a.data)?;
    let samples: Vec<_> = data
        .iter()
        .map(|s| (image_to_array::<f32>(&s.texture), s.landmarks.clone()))
        .collect();
    let mut dcfg = cfg.detector_train.clone();
    if let Some(b) = a.batch {
        dcfg.batch = b;
    }
    let steps_per_epoch = samples.len().div_ceil(dcfg.batch.max(1)) as u64;
    dcfg.steps = a.epochs * steps_per_epoch;
    dcfg.seed = a.seed;
    run.seed("train", a.seed);
    let det_cfg = DetectorConfig { init_seed: a.seed, ..cfg.detector.clone() };
    let mut det = Detector::<f32>::new(det_cfg.clone());
    log(&format!(
        "training detector: {} samples, {} epochs = {} steps, batch {}",
        samples.len(),
        a.epochs,
        dcfg.steps,
        dcfg.batch
    ));
    let losses = landmarks::train_detector(&mut det, &samples, &dcfg)?;
    log(&format!(
        "detector loss: first {:.4}, last {:.4}",
        losses.first().unwrap_or(&f64::NAN),
        losses.last().unwrap_or(&f64::NAN)
    ));
    run.claim_output(&a.out)?;
    det.save(&a.out)?;
    run.record_output(&a.out)?;
    let effective = serde_json::json!({ "detector": det_cfg, "detector_train": dcfg });
    run.finish(&manifest_path(&a.out), &digest_json(&effective)?)
}

fn cmd_train_model(run: &mut Run, a: &TrainModelArgs) -> Result<()> {
    let cfg = CliConfig::load(a.config.as_deref())?;
    if let Some(p) = &a.config {
        run.input_file(p)?;
    }
    run.input_dataset(&a.data)?;
    let data = load_dataset(&a.data)?;
    let mut tcfg = cfg.train.clone();
    if let Some(v) = a.steps {
        tcfg.steps = v;
    }
    if let Some(v) = a.seed {
        tcfg.seed = v;
    }
    run.seed("train", tcfg.seed);
    let dis = a.disentangle.then_some(DisentangleConfig { p: a.p });
    let samples: Vec<TrainSample<f32>> = data
        .iter()
        .map(|s| TrainSample {
            x0: image_to_array(&s.texture),
            cond: image_to_array(&s.portrait),
            t_skin: a.disentangle.then(|| image_to_array(&s.t_skin)),
            t_skin_mouth: a.disentangle.then(|| image_to_array(&s.t_skin_mouth)),
        })
        .collect();
    let mut model = match &a.init {
        Some(p) => {
            run.input_file(p)?;
            let m = FlowModel::<f32>::load_checkpoint(p)?;
            if *m.cfg() != cfg.model {
                return Err(UvError::validation(
                    "init checkpoint",
                    "checkpoint model config differs from the configured one",
                ));
            }
            m
        }
        None => FlowModel::new(cfg.model.clone(), tcfg.seed)?,
    };
    log(&format!(
        "training model: {} params, {} samples, {} steps, batch {}{}",
        model.ps.n_scalars(),
        samples.len(),
        tcfg.steps,
        tcfg.batch,
        if a.disentangle { ", truncation supervision on" } else { "" },
    ));
    let t0 = Instant::now();
    let total = tcfg.steps;
    flowdit::train(&mut model, &samples, &tcfg, dis.as_ref(), |step, loss| {
        if step == 0 || (step + 1) % 25 == 0 || step + 1 == total {
            log(&format!(
                "step {}/{total}: loss {loss:.4} ({:.1}s)",
                step + 1,
                t0.elapsed().as_secs_f64()
            ));
        }
    })?;
    run.claim_output(&a.out)?;
    model.save_checkpoint(&a.out, None)?;
    run.record_output(&a.out)?;
    let effective = serde_json::json!({ "model": cfg.model, "train": tcfg, "disentangle": dis });
    run.finish(&manifest_path(&a.out), &digest_json(&effective)?)
}

fn cmd_sample(run: &mut Run, a: &SampleArgs) -> Result<()> {
    let cfg = CliConfig::load(a.config.as_deref())?;
    if let Some(p) = &a.config {
        run.input_file(p)?;
    }
    run.input_file(&a.model)?;
    run.input_file(&a.detector)?;
    run.input_file(&a.input)?;
    let model = FlowModel::<f32>::load_checkpoint(&a.model)?;
    let det = Detector::<f32>::load(&a.detector)?;
    let portrait = load_portrait(&a.input)?;
    let mut gcfg = cfg.sampler.clone();
    if let Some(v) = a.eta {
        gcfg.eta = v;
    }
    if let Some(v) = a.steps {
        gcfg.steps = v;
    }
    run.seed("sample", a.seed);
    let (tex, trace) = sampler::guided_sample(&portrait, &model, &det, &gcfg, a.seed)?;
    log(&format!(
        "landmark offset from canonical layout: {:.2} px",
        landmarks::landmark_l2(&tex.landmarks, &canonical_landmarks())
    ));
    write_png_output(run, &a.out, &tex.pixels)?;
    if let Some(tp) = &a.trace {
        write_output(run, tp, trace.to_csv().as_bytes())?;
    }
    let effective = serde_json::json!({ "sampler": gcfg });
    run.finish(&manifest_path(&a.out), &digest_json(&effective)?)
}

fn cmd_transfer(run: &mut Run, a: &TransferArgs) -> Result<()> {
    let cfg = CliConfig::load(a.config.as_deref())?;
    if let Some(p) = &a.config {
        run.input_file(p)?;
    }
    run.input_file(&a.model)?;
    run.input_file(&a.detector)?;
    run.input_file(&a.identity)?;
    run.input_file(&a.style)?;
    let model = FlowModel::<f32>::load_checkpoint(&a.model)?;
    let det = Detector::<f32>::load(&a.detector)?;
    let identity = load_portrait(&a.identity)?;
    let style = load_portrait(&a.style)?;
    let mut gcfg = cfg.sampler.clone();
    if let Some(v) = a.eta {
        gcfg.eta = v;
    }
    if let Some(v) = a.steps {
        gcfg.steps = v;
    }
    run.seed("sample", a.seed);
    let tex = editkit::style_transfer(&identity, &style, &model, &det, &gcfg, a.seed)?;
    write_png_output(run, &a.out, &tex.pixels)?;
    let csv = format!(
        "metric,value\nlandmark_l2_canonical,{}\npalette_distance_identity,{}\npalette_distance_style,{}\n",
        landmarks::landmark_l2(&tex.landmarks, &canonical_landmarks()),
        metrics::palette_hist_distance(&tex.pixels, &identity.pixels)?,
        metrics::palette_hist_distance(&tex.pixels, &style.pixels)?,
    );
    let metrics_out = a.metrics.clone().unwrap_or_else(|| sibling_csv(&a.out, "metrics"));
    write_output(run, &metrics_out, csv.as_bytes())?;
    let effective = serde_json::json!({ "sampler": gcfg });
    run.finish(&manifest_path(&a.out), &digest_json(&effective)?)
}

fn cmd_edit(run: &mut Run, a: &EditArgs) -> Result<()> {
    let cfg = CliConfig::load(a.config.as_deref())?;
    if let Some(p) = &a.config {
        run.input_file(p)?;
    }
    run.input_file(&a.model)?;
    run.input_file(&a.detector)?;
    run.input_file(&a.source)?;
    run.input_file(&a.reference)?;
    let model = FlowModel::<f32>::load_checkpoint(&a.model)?;
    let det = Detector::<f32>::load(&a.detector)?;
    let regions: BTreeSet<Region> = a
        .regions
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(Region::parse)
        .collect::<Result<_>>()?;
    let req = EditRequest {
        source: load_portrait(&a.source)?,
        reference: load_portrait(&a.reference)?,
        regions,
    };
    let mut gcfg = cfg.sampler.clone();
    if let Some(v) = a.eta {
        gcfg.eta = v;
    }
    if let Some(v) = a.steps {
        gcfg.steps = v;
    }
    run.seed("sample", a.seed);
    let tex = editkit::regional_edit(&req, &model, &det, &gcfg, a.seed)?;
    write_png_output(run, &a.out, &tex.pixels)?;
    // Locality readout: reconstruct both endpoints, then measure the edit
    // inside and outside the requested regions.
    let (src_tex, _) = sampler::guided_sample(&req.source, &model, &det, &gcfg, a.seed)?;
    let (ref_tex, _) = sampler::guided_sample(&req.reference, &model, &det, &gcfg, a.seed)?;
    let rm = region_masks();
    let mut inside = Array2::from_elem((CANVAS, CANVAS), false);
    for r in &req.regions {
        let m = match r {
            Region::Mouth => &rm.mouth,
            Region::Brow => &rm.brow,
        };
        inside.zip_mut_with(m, |acc, &b| *acc = *acc || b);
    }
    let outside = inside.mapv(|v| !v);
    let csv = format!(
        "metric,value\noff_region_l2_to_source,{}\nin_region_l2_to_reference,{}\nin_region_source_to_reference,{}\n",
        metrics::masked_l2(&tex.pixels, &src_tex.pixels, &outside)?,
        metrics::masked_l2(&tex.pixels, &ref_tex.pixels, &inside)?,
        metrics::masked_l2(&src_tex.pixels, &ref_tex.pixels, &inside)?,
    );
    let metrics_out = a.metrics.clone().unwrap_or_else(|| sibling_csv(&a.out, "metrics"));
    write_output(run, &metrics_out, csv.as_bytes())?;
    let effective = serde_json::json!({ "sampler": gcfg, "regions": a.regions });
    run.finish(&manifest_path(&a.out), &digest_json(&effective)?)
}

fn cmd_snr(run: &mut Run, a: &SnrArgs) -> Result<()> {
    run.input_dataset(&a.data)?;
    let data = load_dataset(&a.data)?;
    let t_grid = parse_tgrid(&a.tgrid)?;
    let window = if a.hann { Window::Hann } else { Window::None };
    // Signal statistics live in the sampler's coordinates: luminance mapped
    // to [-1, 1], against unit noise seen through the same projection.
    let mut mean: Option<RadialSpectrum> = None;
    for s in &data {
        let lum = spectra::luminance(&s.texture).mapv(|v| 2.0 * v - 1.0);
        let sp = spectra::power_spectrum(&lum, window)?;
        match &mut mean {
            None => mean = Some(sp),
            Some(m) => {
                for (acc, b) in m.bins.iter_mut().zip(&sp.bins) {
                    acc.1 += b.1;
                }
            }
        }
    }
    let mut signal = mean.ok_or_else(|| UvError::validation("dataset", "no samples"))?;
    for b in &mut signal.bins {
        b.1 /= data.len() as f64;
    }
    let noise = luma_noise_spectrum(CANVAS);
    let table = spectra::snr_curve(&signal, &noise, &t_grid)?;
    write_output(run, &a.out, spectra::snr_report_csv(&signal, &table).as_bytes())?;
    let ts = spectra::crossing_time(&table);
    log(&format!(
        "noise crossing: lowest bin t* {:.3}, highest bin t* {:.3}",
        ts.first().unwrap_or(&f64::NAN),
        ts.last().unwrap_or(&f64::NAN)
    ));
    if let Ok((alpha, r2)) = spectra::fit_alpha(&signal) {
        log(&format!("fitted spectral decay: alpha {alpha:.2} (r2 {r2:.3})"));
    }
    let effective = serde_json::json!({ "tgrid": t_grid, "window": window });
    run.finish(&manifest_path(&a.out), &digest_json(&effective)?)
}

/// Unit per-channel noise seen through the Rec.601 luminance projection:
/// independent channels add as squared coefficients.
fn luma_noise_spectrum(size: usize) -> RadialSpectrum {
    let w = 0.299f64 * 0.299 + 0.587 * 0.587 + 0.114 * 0.114;
    let mut sp = spectra::unit_noise_spectrum(size);
    for b in &mut sp.bins {
        b.1 *= w;
    }
    sp
}

fn cmd_ablation(run: &mut Run, a: &AblationArgs) -> Result<()> {
    let cfg = CliConfig::load(a.config.as_deref())?;
    if let Some(p) = &a.config {
        run.input_file(p)?;
    }
    run.input_file(&a.model)?;
    run.input_file(&a.input)?;
    let model = FlowModel::<f32>::load_checkpoint(&a.model)?;
    let portrait = load_portrait(&a.input)?;
    let mut order = model.cfg().single_layers();
    if matches!(a.order, SweepOrder::SingleReverse) {
        order.reverse();
    }
    let mut gcfg = cfg.sampler.clone();
    if let Some(v) = a.steps {
        gcfg.steps = v;
    }
    run.seed("sample", a.seed);
    let report = editkit::ablation_sweep(&portrait, &model, &gcfg, &order, a.eps, a.seed)?;
    write_output(run, &a.out, report.to_csv().as_bytes())?;
    let onset: Vec<String> =
        report.onset_order().iter().map(|(n, k)| format!("{n} at k={k}")).collect();
    log(&format!("degradation onset order: {}", onset.join(", ")));
    let effective = serde_json::json!({ "sampler": gcfg, "order": order, "eps": a.eps });
    run.finish(&manifest_path(&a.out), &digest_json(&effective)?)
}

fn cmd_eval(run: &mut Run, a: &EvalArgs) -> Result<()> {
    run.input_file(&a.detector)?;
    run.input_dataset(&a.gt)?;
    let det = Detector::<f32>::load(&a.detector)?;
    let gt = load_dataset(&a.gt)?;
    let rm = region_masks();
    let mut rows = Vec::with_capacity(gt.len());
    for s in &gt {
        let id = format!("sample_{:05}", s.index);
        let pred_path = find_pred(&a.pred, &id)?;
        run.input_file(&pred_path)?;
        let pred = load_png(&pred_path)?;
        rows.push(MetricRow {
            sample_id: id,
            psnr: metrics::psnr(&pred, &s.texture)?,
            ssim: metrics::ssim(&pred, &s.texture)?,
            landmark_l2: metrics::landmark_l2(&pred, &det, &s.landmarks.0)?,
            mouth_l2: metrics::masked_l2(&pred, &s.texture, &rm.mouth)?,
            brow_l2: metrics::masked_l2(&pred, &s.texture, &rm.brow)?,
        });
    }
    let digest = digest_json(&serde_json::json!({}))?;
    let report = MetricReport::from_rows(rows, digest.clone())?;
    write_output(run, &a.out, report.to_csv().as_bytes())?;
    log(&format!(
        "means: psnr {:.2} dB, ssim {:.3}, landmark_l2 {:.2} px",
        report.mean_psnr, report.mean_ssim, report.mean_landmark_l2
    ));
    run.finish(&manifest_path(&a.out), &digest)
}

fn find_pred(dir: &Path, id: &str) -> Result<PathBuf> {
    let flat = dir.join(format!("{id}.png"));
    if flat.is_file() {
        return Ok(flat);
    }
    let nested = dir.join(id).join("texture.png");
    if nested.is_file() {
        return Ok(nested);
    }
    Err(UvError::validation(
        "pred",
        format!("no {id}.png or {id}/texture.png under {}", dir.display()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedded_default_config_matches_library_defaults() {
        let cfg = CliConfig::embedded_default();
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.train.steps, TrainConfig::default().steps);
        assert_eq!(cfg.detector, DetectorConfig::default());
        assert_eq!(cfg.detector_train, DetectorTrainConfig::default());
        assert_eq!(cfg.sampler, GuidanceConfig::default());
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let extra_table = format!("{DEFAULT_CONFIG_TOML}\n[mystery]\nx = 1\n");
        assert!(toml::from_str::<CliConfig>(&extra_table).is_err());
        let extra_key = DEFAULT_CONFIG_TOML.replace("eta = 0.5", "eta = 0.5\nmystery_knob = 1.0");
        assert!(toml::from_str::<CliConfig>(&extra_key).is_err());
        let missing_key = DEFAULT_CONFIG_TOML.replace("token_dim = 128\n", "");
        assert!(toml::from_str::<CliConfig>(&missing_key).is_err());
    }

    #[test]
    fn tgrid_parses_and_validates() {
        let g = parse_tgrid("0.05:0.95:19").unwrap();
        assert_eq!(g.len(), 19);
        assert_eq!(g[0], 0.05);
        assert_eq!(g[2], 0.15);
        assert_eq!(g[18], 0.95);
        assert_eq!(parse_tgrid("0.3:0.3:1").unwrap(), vec![0.3]);
        for bad in ["0:0.9:5", "0.1:1.0:5", "0.5:0.4:3", "0.5", "a:b:c", "0.1:0.9:0"] {
            assert!(parse_tgrid(bad).is_err(), "{bad} should be rejected");
        }
    }

    #[test]
    fn parse_errors_keep_help_at_zero_and_flags_at_one() {
        let help = Cli::try_parse_from(["uvflow", "--help"]).unwrap_err();
        assert_eq!(help.exit_code(), 0);
        for bad in [
            vec!["uvflow"],
            vec!["uvflow", "frobnicate"],
            vec!["uvflow", "gen", "--bogus"],
            vec!["uvflow", "gen"],
            vec!["uvflow", "train", "model", "--p", "0.5"],
        ] {
            let e = Cli::try_parse_from(&bad).unwrap_err();
            assert_ne!(e.exit_code(), 0, "{bad:?} should fail parsing");
        }
    }

    #[test]
    fn missing_inputs_exit_one_without_side_effects() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("report.csv");
        let argv: Vec<String> = [
            "uvflow",
            "analyze",
            "snr",
            "--data",
            "/no/such/dataset",
            "--out",
            out.to_str().unwrap(),
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        assert_eq!(run(&argv), 1);
        assert!(!out.exists());
    }

    #[test]
    fn corrupt_checkpoints_exit_two() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("model.ckpt");
        std::fs::write(&ckpt, b"not a checkpoint").unwrap();
        let png = dir.path().join("portrait.png");
        save_png(&toyfaces::blank([0.5; 3]), &png).unwrap();
        let out = dir.path().join("out.png");
        let argv: Vec<String> = [
            "uvflow",
            "sample",
            "--model",
            ckpt.to_str().unwrap(),
            "--detector",
            ckpt.to_str().unwrap(),
            "--input",
            png.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        assert_eq!(run(&argv), 2);
    }

    #[test]
    fn outputs_may_not_overwrite_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        std::fs::write(&p, b"payload").unwrap();
        let mut r = Run::new(&["uvflow".to_string()], 1, false);
        r.input_file(&p).unwrap();
        let e = r.claim_output(&p).unwrap_err();
        assert!(e.is_validation());
        assert!(r.claim_output(&dir.path().join("y.bin")).is_ok());
    }

    #[test]
    fn manifest_writes_atomically_with_all_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("in.txt");
        std::fs::write(&p, b"abc").unwrap();
        let mut r = Run::new(&["uvflow".into(), "gen".into()], 2, true);
        r.seed("dataset", 7);
        r.input_file(&p).unwrap();
        let mpath = dir.path().join("run_manifest.json");
        r.finish(&mpath, "cafe").unwrap();
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&mpath).unwrap()).unwrap();
        assert_eq!(v["command"][1], "gen");
        assert_eq!(v["config_digest"], "cafe");
        assert_eq!(v["seeds"]["dataset"], 7);
        assert_eq!(
            v["inputs"][p.display().to_string()],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert!(v["wall_clock_secs"].as_f64().unwrap() >= 0.0);
        assert_eq!(v["versions"]["uvflow"], env!("CARGO_PKG_VERSION"));
        assert_eq!(v["threads"], 2);
        assert_eq!(v["deterministic"], true);
        assert!(!dir.path().join("run_manifest.json.tmp-write").exists());
    }

    #[test]
    fn helper_paths_compose() {
        assert_eq!(
            manifest_path(Path::new("out/tex.png")),
            PathBuf::from("out/tex.png.manifest.json")
        );
        assert_eq!(sibling_csv(Path::new("out/tex.png"), "metrics"), PathBuf::from("out/tex.metrics.csv"));
    }
}
