//! `sdfit`: fit a signed-distance field to a scene, evaluate checkpoints,
//! and run ablation grids. Everything beyond the flags below lives in the
//! `key = value` config file (see `TrainConfig::to_text` for the schema);
//! every artifact is a plain file and is bit-reproducible under a fixed
//! seed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use sdfit_core::field::checkpoint::{load_checkpoint, restore_field, save_checkpoint};
use sdfit_core::geom::{parse_scene, SceneDescription};
use sdfit_core::metrics::{evaluate_meshes, MetricReport};
use sdfit_core::render::{marching_cubes, render_view, write_obj, write_pfm, write_ppm, RenderParams};
use sdfit_core::trainer::{build_real_pool, build_training_scene, train, Variant};
use sdfit_core::{Error, Rng, SdfField, StencilConfig, TrainConfig, ViewAngle};

/// Resolution of exported normal maps (fit and eval).
const EXPORT_MAP_RES: usize = 128;
/// Marching-cubes resolution for the ground-truth mesh during evaluation.
const GT_MESH_RES: usize = 96;
/// Surface samples per direction for chamfer / point-to-surface metrics.
const EVAL_SAMPLES: usize = 10_000;
/// Seed for the metric sampler; fixed so repeated evals emit identical CSVs.
const EVAL_SEED: u64 = 0;
/// Reference-pool construction: body-like variants for the critic. These are
/// inputs to the method, not part of the experiment seed, so they are fixed.
const POOL_SHAPES: usize = 6;
const POOL_MESH_RES: usize = 24;
const POOL_SEED: u64 = 0x5EED;

#[derive(Parser)]
#[command(name = "sdfit", version, about = "Reconstruct signed-distance fields from front/back normal supervision")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a field on a scene and export its artifacts.
    Fit(FitArgs),
    /// Extract a mesh from a checkpoint and measure it against the scene's target.
    Eval(EvalArgs),
    /// Train several config variants over shared seeds and tabulate metrics.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Scene description file (target + prior primitives).
    #[arg(long)]
    scene: PathBuf,
    /// Training config file; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Marching-cubes resolution for the exported mesh.
    #[arg(long, default_value_t = 64)]
    res: usize,
    /// Comma list of views to export as normal maps.
    #[arg(long, default_value = "front,right,back,left")]
    views: String,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `fit`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene the checkpoint was trained on.
    #[arg(long)]
    scene: PathBuf,
    /// The config used for training (render sizes must match the checkpoint).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Marching-cubes resolution for the reconstructed mesh.
    #[arg(long, default_value_t = 64)]
    res: usize,
    /// Comma list of views to export as normal maps.
    #[arg(long, default_value = "front,right,back,left")]
    views: String,
}

#[derive(Args)]
struct AblateArgs {
    /// Scene description file shared by all runs.
    #[arg(long)]
    scene: PathBuf,
    /// Base config; each variant flips one switch on top of it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Comma list of seeds shared by every variant.
    #[arg(long, default_value = "0,1,2,3,4")]
    seed: String,
    /// Comma list of variants (at least two).
    #[arg(long, default_value = "full,w/o_dis,w/o_m2o,fixed_eps,four_views,bce_loss")]
    variants: String,
    /// Marching-cubes resolution for reconstructed meshes.
    #[arg(long, default_value_t = 64)]
    res: usize,
}

/// Exit code 2 for bad invocations and malformed inputs, 1 for failures at
/// run time.
enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

/// Library errors that mean "your input was wrong" exit 2; the rest exit 1.
impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Parse { .. } | Error::InvalidConfig(_) | Error::Format(_) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Runtime(anyhow::Error::new(other)),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Fit(args) => cmd_fit(&args),
        Cmd::Eval(args) => cmd_eval(&args),
        Cmd::Ablate(args) => cmd_ablate(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn read_input(path: &Path, what: &str) -> CliResult<String> {
    fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {what} {}: {e}", path.display())))
}

/// Parse a scene file and normalise it so the target fills the unit domain;
/// fit and eval apply the same transform, so they always agree.
fn load_scene(path: &Path) -> CliResult<SceneDescription> {
    let text = read_input(path, "scene file")?;
    let scene = parse_scene(&text)
        .map_err(|e| usage(format!("in scene file {}: {e}", path.display())))?;
    Ok(scene.normalized(0.1))
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<TrainConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = read_input(p, "config file")?;
            TrainConfig::from_text(&text)
                .map_err(|e| usage(format!("in config file {}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_views(spec: &str) -> CliResult<Vec<(&'static str, ViewAngle)>> {
    spec.split(',')
        .map(|t| match t.trim() {
            "front" => Ok(("front", ViewAngle::FRONT)),
            "right" => Ok(("right", ViewAngle::RIGHT)),
            "back" => Ok(("back", ViewAngle::BACK)),
            "left" => Ok(("left", ViewAngle::LEFT)),
            other => Err(usage(format!(
                "unknown view {other:?}; expected a comma list of front, right, back, left"
            ))),
        })
        .collect()
}

fn ensure_out_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path)
        .with_context(|| format!("creating output directory {}", path.display()))?;
    Ok(())
}

fn write_text_file(path: &Path, content: &str) -> CliResult<()> {
    fs::write(path, content).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Train one run of `cfg` on `scene`, building the critic's reference pool
/// only when the config actually uses it.
fn run_training(
    scene: &SceneDescription,
    cfg: &TrainConfig,
) -> Result<(SdfField, sdfit_core::adversary::Discriminator, sdfit_core::TrainReport), Error> {
    let pool = if cfg.enable_dis && cfg.w_d > 0.0 {
        build_real_pool(
            POOL_SHAPES,
            cfg.render_w,
            cfg.render_h,
            cfg.adv_mode.real_views,
            POOL_MESH_RES,
            POOL_SEED,
        )?
    } else {
        Vec::new()
    };
    let mut rng = Rng::new(cfg.seed);
    let (target, prior) = build_training_scene(scene, cfg, &mut rng)?;
    train(&target, prior, cfg, &pool)
}

/// Render the field from each requested view and write a PFM (exact floats)
/// plus a PPM (preview) per view.
fn export_normal_maps(
    out: &Path,
    field: &SdfField,
    views: &[(&'static str, ViewAngle)],
) -> CliResult<()> {
    let params = RenderParams::new(EXPORT_MAP_RES, EXPORT_MAP_RES, StencilConfig::analytic());
    for &(name, view) in views {
        let map = render_view(field, view, &params).map;
        write_pfm(&out.join(format!("normals_{name}.pfm")), &map)
            .with_context(|| format!("writing normals_{name}.pfm"))?;
        write_ppm(&out.join(format!("normals_{name}.ppm")), &map)
            .with_context(|| format!("writing normals_{name}.ppm"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

fn cmd_fit(args: &FitArgs) -> CliResult<()> {
    let scene = load_scene(&args.scene)?;
    let cfg = load_config(args.config.as_deref(), args.seed)?;
    let views = parse_views(&args.views)?;
    ensure_out_dir(&args.out)?;

    let (field, dis, report) = run_training(&scene, &cfg)?;

    write_text_file(&args.out.join("config.txt"), &cfg.to_text())?;
    // The CSV deliberately omits wall times: artifacts are bit-reproducible
    // under a fixed seed, and timings are not.
    write_text_file(&args.out.join("train_report.csv"), &report.csv())?;
    save_checkpoint(&args.out.join("checkpoint.bin"), &field, Some(dis.scorer()))
        .context("writing checkpoint.bin")?;

    match marching_cubes(&field, args.res, 0.0) {
        Ok(mesh) => {
            write_obj(&args.out.join("mesh.obj"), &mesh).context("writing mesh.obj")?;
        }
        Err(Error::EmptySurface) => {
            eprintln!("warning: field has no zero level set; skipping mesh.obj");
        }
        Err(e) => return Err(e.into()),
    }
    export_normal_maps(&args.out, &field, &views)?;

    let wall: f64 = report.wall_seconds.iter().sum();
    match report.records.last() {
        Some(last) => println!(
            "fit: {} epochs in {wall:.1}s; final l_a={:.4e} l_d={:.4e} total={:.4e}",
            report.records.len(),
            last.l_a,
            last.l_d,
            last.total
        ),
        None => println!("fit: initialization only (0 epochs) in {wall:.1}s"),
    }
    println!("fit: artifacts in {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Rebuild the trained field from a checkpoint plus the scene inputs it was
/// trained against (prior shape, front/back target renders).
fn load_field(checkpoint: &Path, scene: &SceneDescription, cfg: &TrainConfig) -> CliResult<SdfField> {
    if !checkpoint.exists() {
        return Err(usage(format!("checkpoint file not found: {}", checkpoint.display())));
    }
    let ckpt = load_checkpoint(checkpoint)?;
    let params = RenderParams::new(cfg.fb_res, cfg.fb_res, StencilConfig::analytic());
    let front = render_view(&scene.target, ViewAngle::FRONT, &params).map;
    let back = render_view(&scene.target, ViewAngle::BACK, &params).map;
    Ok(restore_field(ckpt, scene.prior.clone(), front, back)?)
}

/// One measured reconstruction: mesh the field, mesh the target, compare.
/// `Ok(None)` means the field had no surface to extract.
fn measure(
    field: &SdfField,
    target_mesh: &sdfit_core::TriangleMesh,
    res: usize,
) -> Result<Option<MetricReport>, Error> {
    let recon = match marching_cubes(field, res, 0.0) {
        Ok(mesh) => mesh,
        Err(Error::EmptySurface) => return Ok(None),
        Err(e) => return Err(e),
    };
    let rng = Rng::new(EVAL_SEED);
    let report =
        evaluate_meshes(&recon, target_mesh, EVAL_SAMPLES, EXPORT_MAP_RES, EXPORT_MAP_RES, &rng)?;
    Ok(Some(report))
}

fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let scene = load_scene(&args.scene)?;
    let cfg = load_config(args.config.as_deref(), None)?;
    let views = parse_views(&args.views)?;
    ensure_out_dir(&args.out)?;

    let field = load_field(&args.checkpoint, &scene, &cfg)?;
    let target_mesh = marching_cubes(&scene.target, GT_MESH_RES, 0.0)?;

    let mut csv = format!("# config={:016x} seed={}\n", cfg.digest(), cfg.seed);
    let mut text = String::new();
    match measure(&field, &target_mesh, args.res)? {
        Some(report) => {
            writeln!(csv, "status,{}", MetricReport::csv_header()).unwrap();
            writeln!(csv, "ok,{}", report.csv_row()).unwrap();
            text.push_str(&report.text());
            println!(
                "eval: chamfer={:.6} p2s={:.6} side_normal_error={:.6}",
                report.chamfer, report.p2s, report.side_normal_error
            );
        }
        None => {
            // A field without a zero level set is a distinguished outcome,
            // not a crash: record it and leave the metric columns empty.
            writeln!(csv, "status,{}", MetricReport::csv_header()).unwrap();
            let blanks = ",".repeat(MetricReport::csv_header().split(',').count());
            writeln!(csv, "empty_surface{blanks}").unwrap();
            text.push_str("no zero level set inside the domain; nothing to measure\n");
            println!("eval: empty surface (recorded in metrics.csv)");
        }
    }
    write_text_file(&args.out.join("metrics.csv"), &csv)?;
    write_text_file(&args.out.join("metrics.txt"), &text)?;

    if let Ok(recon) = marching_cubes(&field, args.res, 0.0) {
        write_obj(&args.out.join("mesh.obj"), &recon).context("writing mesh.obj")?;
    }
    export_normal_maps(&args.out, &field, &views)?;
    println!("eval: artifacts in {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct RunOutcome {
    variant: Variant,
    seed: u64,
    report: Result<Option<MetricReport>, Error>,
}

fn parse_seeds(spec: &str) -> CliResult<Vec<u64>> {
    let seeds: Result<Vec<u64>, _> = spec.split(',').map(|t| t.trim().parse::<u64>()).collect();
    let seeds = seeds.map_err(|e| usage(format!("bad seed list {spec:?}: {e}")))?;
    if seeds.is_empty() {
        return Err(usage("seed list is empty"));
    }
    Ok(seeds)
}

fn parse_variants(spec: &str) -> CliResult<Vec<Variant>> {
    let variants: Result<Vec<Variant>, Error> =
        spec.split(',').map(|t| t.trim().parse::<Variant>()).collect();
    let variants = variants.map_err(|e| usage(e.to_string()))?;
    if variants.len() < 2 {
        return Err(usage("ablation needs at least two variants to compare"));
    }
    Ok(variants)
}

fn cmd_ablate(args: &AblateArgs) -> CliResult<()> {
    let scene = load_scene(&args.scene)?;
    let base = load_config(args.config.as_deref(), None)?;
    let seeds = parse_seeds(&args.seed)?;
    let variants = parse_variants(&args.variants)?;
    ensure_out_dir(&args.out)?;
    write_text_file(&args.out.join("config.txt"), &base.to_text())?;

    let target_mesh = marching_cubes(&scene.target, GT_MESH_RES, 0.0)?;

    // Failures are recorded per run and the sweep keeps going; a broken
    // variant should not cost the rest of the table.
    let mut outcomes = Vec::new();
    for &variant in &variants {
        for &seed in &seeds {
            let mut cfg = variant.apply(&base);
            cfg.seed = seed;
            let report = run_training(&scene, &cfg)
                .and_then(|(field, _, _)| measure(&field, &target_mesh, args.res));
            match &report {
                Ok(Some(m)) => println!("ablate: {variant} seed {seed}: chamfer={:.6}", m.chamfer),
                Ok(None) => println!("ablate: {variant} seed {seed}: empty surface"),
                Err(e) => println!("ablate: {variant} seed {seed}: FAILED ({e})"),
            }
            outcomes.push(RunOutcome { variant, seed, report });
        }
    }

    let seed_list: Vec<String> = seeds.iter().map(|s| s.to_string()).collect();
    let header = format!("# config={:016x} seeds={}\n", base.digest(), seed_list.join(","));

    // Per-run table: every (variant, seed) with its own status.
    let mut runs_csv = header.clone();
    runs_csv.push_str("variant,seed,status,chamfer,p2s,normal_error,side_normal_error\n");
    for o in &outcomes {
        match &o.report {
            Ok(Some(m)) => writeln!(
                runs_csv,
                "{},{},ok,{:.6e},{:.6e},{:.6e},{:.6e}",
                o.variant, o.seed, m.chamfer, m.p2s, m.normal_error, m.side_normal_error
            )
            .unwrap(),
            Ok(None) => writeln!(runs_csv, "{},{},empty_surface,,,,", o.variant, o.seed).unwrap(),
            Err(_) => writeln!(runs_csv, "{},{},failed,,,,", o.variant, o.seed).unwrap(),
        }
    }
    write_text_file(&args.out.join("ablation_runs.csv"), &runs_csv)?;

    // Summary table: one row per variant, metrics averaged over its
    // successful seeds.
    let mut csv = header;
    csv.push_str("variant,seeds_ok,seeds_failed,chamfer,p2s,normal_error,side_normal_error\n");
    for &variant in &variants {
        let done: Vec<&MetricReport> = outcomes
            .iter()
            .filter(|o| o.variant == variant)
            .filter_map(|o| o.report.as_ref().ok().and_then(|m| m.as_ref()))
            .collect();
        let failed = seeds.len() - done.len();
        if done.is_empty() {
            writeln!(csv, "{variant},0,{failed},,,,").unwrap();
            continue;
        }
        let mean = |f: fn(&MetricReport) -> f64| {
            done.iter().map(|m| f(m)).sum::<f64>() / done.len() as f64
        };
        writeln!(
            csv,
            "{variant},{},{failed},{:.6e},{:.6e},{:.6e},{:.6e}",
            done.len(),
            mean(|m| m.chamfer),
            mean(|m| m.p2s),
            mean(|m| m.normal_error),
            mean(|m| m.side_normal_error),
        )
        .unwrap();
    }
    write_text_file(&args.out.join("ablation.csv"), &csv)?;
    println!("ablate: tables in {}", args.out.display());
    Ok(())
}
