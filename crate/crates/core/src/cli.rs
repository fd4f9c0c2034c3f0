//! `warpbench` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or I/O error. Every
//! subcommand records its arguments, resolved seed and toolkit version in a
//! `meta.json` from which `replay` reruns it.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, perturb_backward_map, render_overlay, EvalOptions, EvalReport, OcrConfig};
use crate::losses::{finite_diff_check, loss_3d, loss_combined, random_prediction, Block, BlockLoss, GradCheckReport, LossWeights, PredictionSet};
use crate::raster::{write_file, BinaryMask, FloatMap2D, Image};
use crate::synth::{generate_sample, GenConfig, SampleBundle};
use crate::warpfield::{apply_backward_map, identity_backward_map, invert_forward_map, BackwardMap, ForwardMap};

pub const SEED_ENV: &str = "WARPBENCH_SEED";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Parser)]
#[command(name = "warpbench", version, about = "Document warp generation, losses and rectification evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate sample bundles.
    Gen(GenArgs),
    /// Apply a backward map to an image.
    Rectify(RectifyArgs),
    /// Invert a forward map into a backward map.
    Invert(InvertArgs),
    /// Score a prediction directory against a sample.
    Loss(LossArgs),
    /// Check analytic loss gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Evaluate predicted backward maps on samples.
    Eval(EvalArgs),
    /// Render one FMAP channel as a false-color image.
    Inspect(InspectArgs),
    /// Rerun the command recorded in a meta.json.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct SeedArg {
    /// Base seed; falls back to WARPBENCH_SEED, then 0.
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
}

impl SeedArg {
    fn resolve(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub resolution: Option<usize>,
    /// JSON generator config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct RectifyArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    #[arg(long)]
    pub forward: PathBuf,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Output FMAP; the validity mask goes next to it as `<stem>_mask.fmap`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
}

#[derive(Debug, Args)]
pub struct LossArgs {
    /// Directory with coord3d.fmap, curvature.fmap and optional phi.fmap,
    /// backward.fmap.
    #[arg(long)]
    pub pred: PathBuf,
    /// Sample bundle directory.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub combined: bool,
    /// JSON per-term weights.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Also write loss.json and meta.json here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[value(name = "3d")]
    #[serde(rename = "3d")]
    ThreeD,
    Combined,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = LossKind::ThreeD)]
    pub loss: LossKind,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, default_value_t = 2)]
    pub folds: usize,
    /// Probe step; defaults to 1e-5, or 1e-7 for the backward map.
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long, default_value_t = 256)]
    pub probes: usize,
    /// Exit 2 when the worst relative error exceeds this.
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// The sample's own backward map.
    Gt,
    /// No rectification.
    Identity,
    /// Ground truth plus Gaussian noise of `--noise-sigma`.
    Noise,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Sample directory, or a directory of sample directories; repeatable.
    #[arg(long, required = true)]
    pub sample: Vec<PathBuf>,
    /// Predicted backward map FMAP per sample, with an optional sibling
    /// `<stem>_mask.fmap`.
    #[arg(long, conflicts_with = "baseline")]
    pub pred: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    #[arg(long, default_value_t = 0.0)]
    pub noise_sigma: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub char_error_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    pub drop_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    pub jitter: f64,
    #[arg(long, default_value_t = 5)]
    pub levels: usize,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
    /// Validity mask; invalid pixels are drawn black.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub min: Option<f64>,
    #[arg(long)]
    pub max: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub meta: PathBuf,
    /// Output location; defaults to where the meta file sits.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Recorded with every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub command: String,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    pub version: String,
    pub config: serde_json::Value,
}

/// Parses `argv` (program name first) and runs it, returning the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli.command, &args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn run(cmd: Command, argv: &[String]) -> Result<()> {
    match cmd {
        Command::Gen(a) => cmd_gen(a, argv),
        Command::Rectify(a) => cmd_rectify(a, argv),
        Command::Invert(a) => cmd_invert(a, argv),
        Command::Loss(a) => cmd_loss(a, argv),
        Command::Gradcheck(a) => cmd_gradcheck(a, argv),
        Command::Eval(a) => cmd_eval(a, argv),
        Command::Inspect(a) => cmd_inspect(a, argv),
        Command::Replay(a) => cmd_replay(a),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

/// The output location and thread count are left out of the recorded
/// arguments so runs that differ only in those produce identical trees;
/// replay derives the output from where the meta file lives.
fn write_meta(path: &Path, argv: &[String], seed: Option<u64>, config: serde_json::Value) -> Result<()> {
    let mut kept = Vec::with_capacity(argv.len());
    let mut skip = false;
    for a in argv {
        if std::mem::take(&mut skip) {
            continue;
        }
        if a == "--out" || a == "--threads" {
            skip = true;
        } else if !a.starts_with("--out=") && !a.starts_with("--threads=") {
            kept.push(a.clone());
        }
    }
    let meta = RunMeta { command: kept.first().cloned().unwrap_or_default(), argv: kept, seed, version: crate::VERSION.into(), config };
    write_json(path, &meta)
}

/// Inverse of [`sidecar_meta`] and of `<dir>/meta.json`.
fn recorded_out(meta_path: &Path) -> Option<PathBuf> {
    let name = meta_path.file_name()?.to_string_lossy().into_owned();
    if name == META_FILE {
        return meta_path.parent().map(Path::to_path_buf);
    }
    name.strip_suffix(".meta.json").map(|stem| meta_path.with_file_name(stem))
}

/// Meta file for a single-file output: `<out>.meta.json`.
fn sidecar_meta(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    if threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn sample_name(i: usize) -> String {
    format!("sample_{i:04}")
}

fn cmd_gen(a: GenArgs, argv: &[String]) -> Result<()> {
    let mut base = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<GenConfig>(&text)?
        }
        None => GenConfig::default(),
    };
    if let Some(k) = a.folds {
        base.folds = k;
    }
    if let Some(r) = a.resolution {
        base.resolution = r;
    }
    let seed = a.seed.resolve();
    base.seed = seed;
    base.validate()?;
    create_dir(&a.out)?;
    let pool = thread_pool(a.threads)?;
    let results: Vec<Result<()>> = pool.install(|| {
        (0..a.count)
            .into_par_iter()
            .map(|i| {
                let cfg = GenConfig { seed: seed.wrapping_add(i as u64), ..base.clone() };
                generate_sample(&cfg)?.save(a.out.join(sample_name(i)))
            })
            .collect()
    });
    results.into_iter().collect::<Result<Vec<_>>>()?;
    write_meta(&a.out.join(META_FILE), argv, Some(seed), serde_json::json!({ "gen": base, "count": a.count }))?;
    eprintln!("wrote {} samples to {}", a.count, a.out.display());
    Ok(())
}

fn read_map(path: &Path, mask: Option<&Path>) -> Result<BackwardMap> {
    let sibling = mask_sibling(path);
    let mask = mask.map(Path::to_path_buf).or_else(|| sibling.exists().then_some(sibling));
    BackwardMap::read(path, mask.as_deref())
}

/// `dir/name.fmap` → `dir/name_mask.fmap`.
fn mask_sibling(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}_mask.fmap"))
}

fn cmd_rectify(a: RectifyArgs, argv: &[String]) -> Result<()> {
    let img = Image::read_pnm(&a.image)?;
    let map = read_map(&a.map, a.mask.as_deref())?;
    let fill = vec![0u8; img.channels()];
    apply_backward_map(&img, &map, &fill)?.write_pnm(&a.out)?;
    write_meta(&sidecar_meta(&a.out), argv, None, serde_json::json!({ "fill": fill }))
}

fn cmd_invert(a: InvertArgs, argv: &[String]) -> Result<()> {
    let fwd = ForwardMap::read(&a.forward, a.mask.as_deref())?;
    let h = a.height.unwrap_or(fwd.height());
    let w = a.width.unwrap_or(fwd.width());
    let b = invert_forward_map(&fwd, h, w)?;
    b.write(&a.out, mask_sibling(&a.out))?;
    write_meta(&sidecar_meta(&a.out), argv, None, serde_json::json!({ "height": h, "width": w }))
}

fn cmd_loss(a: LossArgs, argv: &[String]) -> Result<()> {
    let weights = match &a.weights {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)?
        }
        None => LossWeights::default(),
    };
    let pred = PredictionSet::load(&a.pred)?;
    let gt = SampleBundle::load(&a.gt)?;
    let breakdown = if a.combined { loss_combined(&pred, &gt, &weights)? } else { loss_3d(&pred, &gt, &weights)? };
    println!("{}", serde_json::to_string(&breakdown)?);
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_json(&out.join("loss.json"), &breakdown)?;
        write_meta(&out.join(META_FILE), argv, None, serde_json::json!({ "weights": weights, "combined": a.combined }))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckOutput {
    pub loss: LossKind,
    pub max_rel_error: f64,
    pub blocks: Vec<(Block, GradCheckReport)>,
}

fn cmd_gradcheck(a: GradcheckArgs, argv: &[String]) -> Result<()> {
    let seed = a.seed.resolve();
    let cfg = GenConfig { resolution: a.resolution, folds: a.folds, seed, ..GenConfig::default() };
    let gt = generate_sample(&cfg)?;
    let pred = random_prediction(&gt, seed)?;
    let blocks: &[Block] = match a.loss {
        LossKind::ThreeD => &[Block::Coord, Block::Phi, Block::Curvature],
        LossKind::Combined => &[Block::Coord, Block::Phi, Block::Curvature, Block::Backward],
    };
    let mut out = GradcheckOutput { loss: a.loss, max_rel_error: 0.0, blocks: Vec::new() };
    for &block in blocks {
        let (loss, x) = BlockLoss::new(&pred, &gt, LossWeights::default(), block)?;
        let r = finite_diff_check(&loss, &x, a.eps.unwrap_or(block.default_eps()), a.probes, seed)?;
        out.max_rel_error = out.max_rel_error.max(r.max_rel_error);
        out.blocks.push((block, r));
    }
    println!("{}", serde_json::to_string(&out)?);
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_json(&dir.join("gradcheck.json"), &out)?;
        write_meta(&dir.join(META_FILE), argv, Some(seed), serde_json::json!({ "gen": cfg, "eps": a.eps, "probes": a.probes }))?;
    }
    if out.max_rel_error >= a.tolerance {
        return Err(Error::InvalidValue(format!("max relative gradient error {} exceeds {}", out.max_rel_error, a.tolerance)));
    }
    Ok(())
}

fn expand_samples(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.join(crate::synth::files::META).exists() && p.join(crate::synth::files::BACKWARD).exists() {
            out.push(p.clone());
            continue;
        }
        let entries = std::fs::read_dir(p).map_err(|e| Error::io(p, e))?;
        let mut found: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|d| d.join(crate::synth::files::BACKWARD).exists())
            .collect();
        if found.is_empty() {
            return Err(Error::Format(format!("{} is not a sample directory", p.display())));
        }
        found.sort();
        out.extend(found);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEval {
    pub name: String,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean_ed: Option<f64>,
    pub mean_epe: f64,
    pub mean_ms_ssim: f64,
    pub samples: Vec<SampleEval>,
}

fn cmd_eval(a: EvalArgs, argv: &[String]) -> Result<()> {
    let samples = expand_samples(&a.sample)?;
    if a.baseline.is_none() && a.pred.len() != samples.len() {
        return Err(Error::Config(format!("{} samples but {} --pred maps", samples.len(), a.pred.len())));
    }
    let seed = a.seed.resolve();
    let opts = EvalOptions {
        ocr: OcrConfig { char_error_rate: a.char_error_rate, drop_rate: a.drop_rate, jitter: a.jitter, ..OcrConfig::default() },
        levels: a.levels,
        seed,
    };
    opts.ocr.validate()?;
    create_dir(&a.out)?;
    let pool = thread_pool(a.threads)?;
    let results: Vec<Result<SampleEval>> = pool.install(|| {
        samples
            .par_iter()
            .enumerate()
            .map(|(i, dir)| {
                let sample = SampleBundle::load(dir)?;
                let pred = match a.baseline {
                    Some(Baseline::Gt) => sample.backward.clone(),
                    Some(Baseline::Identity) => identity_backward_map(sample.backward.height(), sample.backward.width())?,
                    Some(Baseline::Noise) => perturb_backward_map(&sample.backward, a.noise_sigma, seed.wrapping_add(i as u64))?,
                    None => read_map(&a.pred[i], None)?,
                };
                let e = evaluate(&sample, &pred, &opts)?;
                let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| sample_name(i));
                let sub = a.out.join(&name);
                create_dir(&sub)?;
                render_overlay(&sample.warped, &e.matching)?.write_pnm(sub.join("overlay.ppm"))?;
                e.gt_rectified.write_pnm(sub.join("gt_rectified.ppm"))?;
                e.pred_rectified.write_pnm(sub.join("pred_rectified.ppm"))?;
                write_json(&sub.join("report.json"), &e.report)?;
                Ok(SampleEval { name, report: e.report })
            })
            .collect()
    });
    let samples: Vec<SampleEval> = results.into_iter().collect::<Result<_>>()?;
    let n = samples.len() as f64;
    let eds: Vec<f64> = samples.iter().filter_map(|s| s.report.ed).collect();
    let summary = EvalSummary {
        mean_ed: (!eds.is_empty()).then(|| eds.iter().sum::<f64>() / eds.len() as f64),
        mean_epe: samples.iter().map(|s| s.report.epe).sum::<f64>() / n,
        mean_ms_ssim: samples.iter().map(|s| s.report.ms_ssim).sum::<f64>() / n,
        samples,
    };
    write_json(&a.out.join("summary.json"), &summary)?;
    write_meta(
        &a.out.join(META_FILE),
        argv,
        Some(seed),
        serde_json::json!({ "eval": opts, "baseline": a.baseline, "noise_sigma": a.noise_sigma }),
    )?;
    println!("{}", serde_json::to_string(&serde_json::json!({ "mean_ed": summary.mean_ed, "mean_epe": summary.mean_epe, "mean_ms_ssim": summary.mean_ms_ssim }))?);
    Ok(())
}

/// Blue → cyan → green → yellow → red.
fn false_color(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [[0.0, 0.0, 255.0], [0.0, 255.0, 255.0], [0.0, 255.0, 0.0], [255.0, 255.0, 0.0], [255.0, 0.0, 0.0]];
    let t = t.clamp(0.0, 1.0) * 4.0;
    let k = (t.floor() as usize).min(3);
    let f = t - k as f64;
    let (a, b) = (STOPS[k], STOPS[k + 1]);
    [0, 1, 2].map(|c| (a[c] + f * (b[c] - a[c])).round() as u8)
}

fn cmd_inspect(a: InspectArgs, argv: &[String]) -> Result<()> {
    let map = FloatMap2D::read_fmap(&a.input)?;
    let ch = map.channel(a.channel)?;
    let mask = a.mask.as_ref().map(BinaryMask::read_fmap).transpose()?;
    if let Some(m) = &mask {
        if m.shape().height != map.height() || m.shape().width != map.width() {
            return Err(Error::shape(crate::Shape::new(map.height(), map.width(), 1), m.shape()));
        }
    }
    let shown = |k: usize| mask.as_ref().is_none_or(|m| m.bits()[k]) && ch.data()[k].is_finite();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (k, &v) in ch.data().iter().enumerate() {
        if shown(k) {
            lo = lo.min(v as f64);
            hi = hi.max(v as f64);
        }
    }
    let lo = a.min.unwrap_or(if lo.is_finite() { lo } else { 0.0 });
    let hi = a.max.unwrap_or(if hi.is_finite() { hi } else { 1.0 });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data: Vec<u8> = ch.data().iter().enumerate().flat_map(|(k, &v)| if shown(k) { false_color((v as f64 - lo) / span) } else { [0, 0, 0] }).collect();
    Image::new(map.height(), map.width(), 3, data)?.write_pnm(&a.out)?;
    write_meta(&sidecar_meta(&a.out), argv, None, serde_json::json!({ "channel": a.channel, "min": lo, "max": hi }))
}

fn cmd_replay(a: ReplayArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.meta).map_err(|e| Error::io(&a.meta, e))?;
    let meta: RunMeta = serde_json::from_str(&text)?;
    let mut argv = meta.argv.clone();
    let out = a.out.clone().or_else(|| recorded_out(&a.meta)).ok_or_else(|| Error::Config("cannot tell where to write; pass --out".into()))?;
    let optional_out = matches!(meta.command.as_str(), "loss" | "gradcheck");
    if a.out.is_some() || !optional_out {
        argv.push("--out".into());
        argv.push(out.to_string_lossy().into_owned());
    }
    // the recorded seed wins over the environment
    if let Some(seed) = meta.seed {
        if !argv.iter().any(|s| s == "--seed" || s.starts_with("--seed=")) {
            argv.push("--seed".into());
            argv.push(seed.to_string());
        }
    }
    let cli = Cli::try_parse_from(std::iter::once("warpbench".to_string()).chain(argv.iter().cloned()))
        .map_err(|e| Error::Config(format!("recorded arguments no longer parse: {e}")))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(Error::Config("refusing to replay a replay".into()));
    }
    run(cli.command, &argv)
}
