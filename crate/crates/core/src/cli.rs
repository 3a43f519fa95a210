//! Command-line driver. Every command writes one JSON document to stdout (or `--out`);
//! failures print a JSON object to stderr and exit with 1 (invalid input) or 2 (runtime).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::attention::{self, Region};
use crate::backbone;
use crate::config::{FocusMode, ModelConfig};
use crate::engine::{self, flops, BatchOptions, RegionSelector};
use crate::error::{Error, Result};
use crate::image;
use crate::selftest;
use crate::tensor::Tensor;
use crate::weights::{self, WeightStore};

pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "lfvit", version, about = "Localize-then-focus ViT inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Classify PPM images and report stage, prediction, region and FLOPs.
    Infer(InferArgs),
    /// Print the analytical FLOPs breakdown for a configuration.
    Flops(FlopsArgs),
    /// Run a batch and report throughput.
    Bench(BenchArgs),
    /// Export class-attention heatmaps and the selected region.
    Heatmap(HeatmapArgs),
    /// Write a seeded random LFW1 weight file.
    GenWeights(GenWeightsArgs),
    /// Run the built-in invariant checks.
    Selftest(SelftestArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// DeiT-S: 12 blocks, dim 384, 6 heads, 1000 classes.
    DeitS,
    /// 4 blocks, dim 32, 4 heads, 10 classes; same token grids as DeiT-S.
    Tiny,
}

impl Preset {
    fn config(self) -> ModelConfig {
        match self {
            Preset::DeitS => ModelConfig::deit_small(),
            Preset::Tiny => ModelConfig::tiny(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FocusModeArg {
    FullSequence,
    CompactSequence,
}

impl From<FocusModeArg> for FocusMode {
    fn from(m: FocusModeArg) -> Self {
        match m {
            FocusModeArg::FullSequence => FocusMode::FullSequence,
            FocusModeArg::CompactSequence => FocusMode::CompactSequence,
        }
    }
}

/// Policy knobs that can be changed without touching the weights.
#[derive(Debug, Clone, Default, Args)]
pub struct PolicyArgs {
    /// Early-exit confidence threshold in [0, 1].
    #[arg(long)]
    pub eta: Option<f32>,
    /// Region side m on the localization grid.
    #[arg(long = "region-size")]
    pub region_size: Option<usize>,
    /// Fraction of region tokens recomputed, in (0, 1].
    #[arg(long)]
    pub alpha: Option<f32>,
    /// Class-attention averaging momentum in [0, 1).
    #[arg(long)]
    pub beta: Option<f32>,
    #[arg(long = "focus-mode", value_enum)]
    pub focus_mode: Option<FocusModeArg>,
}

impl PolicyArgs {
    pub fn apply(&self, mut cfg: ModelConfig) -> Result<ModelConfig> {
        if let Some(v) = self.eta {
            cfg.eta = v;
        }
        if let Some(v) = self.region_size {
            cfg.region = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.focus_mode {
            cfg.focus_mode = v.into();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct ArchArgs {
    #[arg(long, value_enum, default_value = "deit-s")]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long = "image-side")]
    pub image_side: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
}

impl ArchArgs {
    fn config(&self) -> ModelConfig {
        let mut cfg = self.preset.unwrap_or(Preset::DeitS).config();
        let set = |slot: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut cfg.depth, self.depth);
        set(&mut cfg.dim, self.dim);
        set(&mut cfg.heads, self.heads);
        set(&mut cfg.patch, self.patch);
        set(&mut cfg.image_side, self.image_side);
        set(&mut cfg.classes, self.classes);
        cfg
    }
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    /// LFW1 weight file.
    #[arg(long)]
    pub model: PathBuf,
    /// P6 images of side `image_side`.
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Include class-attention traces and maps in the report.
    #[arg(long = "emit-attention")]
    pub emit_attention: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct FlopsArgs {
    /// Take the architecture from a weight file instead of the preset flags.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// P6 images; when empty, `--random` images are synthesized.
    pub images: Vec<PathBuf>,
    /// Number of synthetic uniform-noise images.
    #[arg(long, default_value_t = 64)]
    pub random: usize,
    /// Seed for synthetic images.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated ground-truth labels, one per image.
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<usize>>,
    #[arg(long, env = "LFVIT_WORKERS", default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub model: PathBuf,
    pub image: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub policy: PolicyArgs,
}

#[derive(Debug, Clone, Args)]
pub struct GenWeightsArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SelftestArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// What a command produced: the JSON document and the exit status.
#[derive(Debug)]
pub struct Outcome {
    pub report: Value,
    pub success: bool,
}

fn load_model(path: &Path, policy: &PolicyArgs) -> Result<WeightStore> {
    let w = WeightStore::load(path)?;
    let cfg = policy.apply(w.config.clone())?;
    w.with_policy(&cfg)
}

/// JSON value that keeps `f32` fields in their shortest decimal form.
fn jv<T: Serialize + ?Sized>(x: &T) -> Value {
    serde_json::to_string(x)
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok())
        .unwrap_or(Value::Null)
}

pub fn cmd_infer(args: &InferArgs) -> Result<Value> {
    let w = load_model(&args.model, &args.policy)?;
    let cfg = &w.config;
    let mut reports = Vec::with_capacity(args.images.len());
    for path in &args.images {
        let img = image::load_image(path, cfg.image_side)?;
        let d = engine::infer_with(&img, &w, RegionSelector::Ngca, &mut |_, _| {})?;
        let r = &d.result;
        let mut entry = json!({
            "image": path.display().to_string(),
            "stage": r.stage,
            "pred": r.pred,
            "conf": jv(&r.conf),
            "probs": jv(&r.probs),
            "region": jv(&r.region),
            "flops": r.flops,
            "localization": { "pred": d.localization.pred, "conf": jv(&d.localization.conf) },
        });
        if let Some(f) = &d.focus {
            entry["focus_plan"] = jv(&f.plan);
        }
        if args.emit_attention {
            let side = cfg.coarse_side();
            // The averaged map is reported even for images that exited early.
            let gca = attention::accumulate_gca(&d.localization_trace, cfg.beta, side, side)?;
            let ngca = attention::ngca_scan(&gca, cfg.region)?;
            entry["attention"] = json!({
                "class_attention": jv(&d.localization_trace.per_layer),
                "gca": jv(&gca),
                "ngca": { "shape": ngca.shape(), "values": jv(ngca.data()) },
            });
        }
        reports.push(entry);
    }
    Ok(json!({
        "command": "infer",
        "flops_convention": flops::CONVENTION,
        "config": jv(&cfg),
        "images": reports,
    }))
}

fn flops_config(args: &FlopsArgs) -> Result<ModelConfig> {
    let base = match &args.model {
        Some(p) => WeightStore::load(p)?.config,
        None => args.arch.config(),
    };
    args.policy.apply(base)
}

pub fn cmd_flops(args: &FlopsArgs) -> Result<Value> {
    let cfg = flops_config(args)?;
    let backbone = flops::backbone_flops(&cfg);
    let exit = flops::exit_report(&cfg);
    let both = flops::two_stage_report(&cfg);
    Ok(json!({
        "command": "flops",
        "flops_convention": flops::CONVENTION,
        "config": jv(&cfg),
        "backbone": {
            "seq_len": cfg.fine_tokens() + 1,
            "total": backbone,
        },
        "stages": {
            "localization": { "seq_len": cfg.coarse_tokens() + 1, "flops": exit.localization },
            "align": { "positions": cfg.fine_tokens(), "flops": both.align },
            "focus": {
                "seq_len": cfg.focus_sequence_len(),
                "embedded_patches": cfg.fresh_count(),
                "flops": both.focus,
            },
        },
        "exited_early": exit,
        "two_stage": both,
        "localization_to_backbone": exit.total as f64 / backbone as f64,
    }))
}

/// Uniform-noise images from a seeded stream.
pub fn synthetic_images(count: usize, side: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| Tensor::from_fn(&[3, side, side], |_| rng.gen_range(0.0..1.0)))
        .collect()
}

pub fn cmd_bench(args: &BenchArgs) -> Result<Value> {
    let w = load_model(&args.model, &args.policy)?;
    let side = w.config.image_side;
    let images = if args.images.is_empty() {
        if args.random == 0 {
            return Err(Error::config("bench needs image paths or --random N > 0"));
        }
        synthetic_images(args.random, side, args.seed)
    } else {
        args.images
            .iter()
            .map(|p| image::load_image(p, side))
            .collect::<Result<_>>()?
    };
    let opts = BatchOptions {
        workers: args.workers.max(1),
        warmup: args.warmup,
    };
    let report = engine::run_batch(&images, args.labels.as_deref(), &w, opts)?;
    let mut v = jv(&report);
    v["command"] = json!("bench");
    v["workers"] = json!(opts.workers);
    Ok(v)
}

/// Draws the region outline (in full-resolution pixels) onto a copy of the image.
fn overlay(img: &Tensor, region: &Region, cell: usize) -> Tensor {
    let mut out = img.clone();
    let side = img.shape()[1];
    let plane = side * side;
    let (y0, x0) = (region.top_row * cell, region.top_col * cell);
    let (y1, x1) = (
        (y0 + region.size * cell).min(side) - 1,
        (x0 + region.size * cell).min(side) - 1,
    );
    let mut paint = |y: usize, x: usize| {
        let px = y * side + x;
        out.data_mut()[px] = 1.0;
        out.data_mut()[plane + px] = 0.0;
        out.data_mut()[2 * plane + px] = 0.0;
    };
    for x in x0..=x1 {
        paint(y0, x);
        paint(y1, x);
    }
    for y in y0..=y1 {
        paint(y, x0);
        paint(y, x1);
    }
    out
}

pub fn cmd_heatmap(args: &HeatmapArgs) -> Result<Value> {
    let w = load_model(&args.model, &args.policy)?;
    let cfg = &w.config;
    let img = image::load_image(&args.image, cfg.image_side)?;
    let coarse = backbone::embed(&backbone::downsample_half(&img)?, &w)?;
    let (_, trace) = backbone::encode(&coarse, &w)?;
    let side = cfg.coarse_side();
    let gca = attention::accumulate_gca(&trace, cfg.beta, side, side)?;
    let ngca = attention::ngca_scan(&gca, cfg.region)?;
    let region = attention::select_region(&ngca, cfg.region)?;
    let (nr, nc) = (ngca.shape()[0], ngca.shape()[1]);

    fs::create_dir_all(&args.out)?;
    let gca_path = args.out.join("gca.pgm");
    let ngca_path = args.out.join("ngca.pgm");
    let json_path = args.out.join("attention.json");
    let overlay_path = args.out.join("overlay.ppm");
    fs::write(&gca_path, image::encode_pgm_heatmap(&gca.values, side, side)?)?;
    fs::write(&ngca_path, image::encode_pgm_heatmap(ngca.data(), nr, nc)?)?;
    let maps = json!({
        "gca": jv(&gca),
        "ngca": { "rows": nr, "cols": nc, "values": jv(ngca.data()) },
        "region": jv(&region),
    });
    fs::write(&json_path, serde_json::to_vec_pretty(&maps)?)?;
    fs::write(&overlay_path, image::encode_ppm(&overlay(&img, &region, 2 * cfg.patch))?)?;
    Ok(json!({
        "command": "heatmap",
        "region": jv(&region),
        "gca_shape": [side, side],
        "ngca_shape": [nr, nc],
        "files": {
            "gca": gca_path.display().to_string(),
            "ngca": ngca_path.display().to_string(),
            "json": json_path.display().to_string(),
            "overlay": overlay_path.display().to_string(),
        },
    }))
}

pub fn cmd_gen_weights(args: &GenWeightsArgs) -> Result<Value> {
    let cfg = args.policy.apply(args.arch.config())?;
    let store = weights::gen_weights(&cfg, args.seed, &args.out)?;
    let bytes = fs::metadata(&args.out)?.len();
    Ok(json!({
        "command": "gen-weights",
        "path": args.out.display().to_string(),
        "seed": args.seed,
        "tensors": store.named_tensors().len(),
        "bytes": bytes,
        "config": jv(&cfg),
    }))
}

pub fn cmd_selftest() -> Outcome {
    let report = selftest::run();
    Outcome {
        success: report.passed,
        report: jv(&report),
    }
}

fn out_path(cmd: &Command) -> Option<&Path> {
    match cmd {
        Command::Infer(a) => a.out.as_deref(),
        Command::Flops(a) => a.out.as_deref(),
        Command::Bench(a) => a.out.as_deref(),
        Command::Selftest(a) => a.out.as_deref(),
        // heatmap and gen-weights use --out for their artifacts
        Command::Heatmap(_) | Command::GenWeights(_) => None,
    }
}

/// Runs a parsed command and returns its report.
pub fn execute(cli: &Cli) -> Result<Outcome> {
    let ok = |report| Outcome {
        report,
        success: true,
    };
    Ok(match &cli.command {
        Command::Infer(a) => ok(cmd_infer(a)?),
        Command::Flops(a) => ok(cmd_flops(a)?),
        Command::Bench(a) => ok(cmd_bench(a)?),
        Command::Heatmap(a) => ok(cmd_heatmap(a)?),
        Command::GenWeights(a) => ok(cmd_gen_weights(a)?),
        Command::Selftest(_) => cmd_selftest(),
    })
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    error: &'a str,
    message: String,
}

fn diagnostic(stderr: &mut dyn Write, kind: &str, message: String) {
    let d = Diagnostic {
        error: kind,
        message,
    };
    let _ = writeln!(
        stderr,
        "{}",
        serde_json::to_string(&d).unwrap_or_else(|_| "{}".into())
    );
}

/// Full CLI entry point; returns the process exit code.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            diagnostic(stderr, "usage", e.to_string().trim().to_string());
            return EXIT_VALIDATION;
        }
    };
    let outcome = match execute(&cli) {
        Ok(o) => o,
        Err(e) => {
            diagnostic(stderr, e.kind(), e.to_string());
            return if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            };
        }
    };
    let mut text = match serde_json::to_string_pretty(&outcome.report) {
        Ok(t) => t,
        Err(e) => {
            diagnostic(stderr, "json", e.to_string());
            return EXIT_RUNTIME;
        }
    };
    text.push('\n');
    let written = match out_path(&cli.command) {
        Some(p) => fs::write(p, &text),
        None => stdout.write_all(text.as_bytes()),
    };
    if let Err(e) = written {
        diagnostic(stderr, "io", e.to_string());
        return EXIT_RUNTIME;
    }
    if outcome.success {
        0
    } else {
        diagnostic(stderr, "selftest", "one or more invariant checks failed".into());
        EXIT_RUNTIME
    }
}
