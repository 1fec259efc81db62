//! `voxfield` command-line front end.
//!
//! Exit codes: 0 on success, 1 on validation, format or usage errors, 2 on
//! numerical failures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use voxfield::autodiff::suite::run_suite;
use voxfield::checkpoint::Checkpoint;
use voxfield::error::{Error, Result};
use voxfield::fit::{fit_with, history_csv, FitConfig};
use voxfield::harness::{evaluate_occupancy, evaluate_render, street_canyon, synth_scene, toy_box, DepthGt, SynthConfig};
use voxfield::objectives::{depth_metrics, psnr, ssim, text_query, MetricsReport};
use voxfield::renderer::RenderOutput;
use voxfield::tensor_io::{export_ppm, load_manifest, read_tensor, write_tensor, CameraSpec, SceneManifest, Tensor};

const GRADCHECK_TOL: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "voxfield", version, about = "Sparse voxel neural fields: synthesize, fit, render and evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scene (targets, manifest, occupancy ground truth).
    Synth(SynthArgs),
    /// Fit a field to a manifest and write a checkpoint plus the loss history.
    Fit(FitArgs),
    /// Render cameras of a manifest from a checkpoint.
    Render(RenderArgs),
    /// Score renders against targets and print a JSON report.
    Eval(EvalArgs),
    /// Extract the occupancy grid of a checkpoint and score it.
    Occupancy(OccupancyArgs),
    /// Heat map of similarity between rendered features and an embedding.
    Query(QueryArgs),
    /// Finite-difference check of every registered differentiable op.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Scene description (JSON); overrides `--preset`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in scene: `street` (three cameras plus a held-out one) or `toy`.
    #[arg(long, default_value = "street")]
    preset: String,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Loss history CSV; defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Base configuration (JSON); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    no_nerf_distill: bool,
    #[arg(long)]
    no_virtual: bool,
    #[arg(long)]
    feature_distill: bool,
    #[arg(long)]
    w_rgb: Option<f64>,
    #[arg(long)]
    w_ssim: Option<f64>,
    #[arg(long)]
    w_depth: Option<f64>,
    #[arg(long)]
    w_density: Option<f64>,
    #[arg(long)]
    w_nerf: Option<f64>,
    #[arg(long)]
    w_found: Option<f64>,
    /// Print the losses every this many steps (0 = silent).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Camera name; repeat for several. All cameras when omitted.
    #[arg(long)]
    camera: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Manifest whose targets the renders are scored against.
    #[arg(long, requires = "renders")]
    manifest: Option<PathBuf>,
    /// Directory written by `render`.
    #[arg(long)]
    renders: Option<PathBuf>,
    #[arg(long)]
    camera: Vec<String>,
    /// Depth ground truth: sparse (LiDAR-like) or dense.
    #[arg(long, default_value = "sparse")]
    depth_gt: String,
    /// Predicted RGB image, scored against --gt.
    #[arg(long, requires = "gt")]
    pred: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long, requires = "gt_depth")]
    pred_depth: Option<PathBuf>,
    #[arg(long)]
    gt_depth: Option<PathBuf>,
    /// Depth cap for the depth metrics.
    #[arg(long, default_value_t = 80.0)]
    max_depth: f64,
}

#[derive(Args)]
struct OccupancyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for the grid.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the manifest's density threshold.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    camera: String,
    /// Comma-separated values, or a .vxt file holding the embedding.
    #[arg(long)]
    embedding: String,
    /// Heat map path (.vxt); a grayscale .ppm is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Fixture seeds, one run of every op per seed.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    seeds: Vec<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Fit(a) => fit(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
        Command::Occupancy(a) => occupancy(a),
        Command::Query(a) => query(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable report"));
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => match a.preset.as_str() {
            "street" => street_canyon(),
            "toy" => toy_box(),
            other => return Err(Error::validation("preset", format!("unknown preset {other:?}, expected street or toy"))),
        },
    };
    let m = synth_scene(&cfg, &a.out)?;
    println!("wrote {} cameras to {}", m.cameras.len(), a.out.join("manifest.json").display());
    Ok(())
}

fn fit_config(a: &FitArgs) -> Result<FitConfig> {
    let mut cfg = match &a.config {
        Some(p) => read_json(p)?,
        None => FitConfig {
            enable_nerf_distill: true,
            enable_virtual: true,
            ..FitConfig::default()
        },
    };
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(lr) = a.lr {
        cfg.adam.lr = lr;
    }
    if a.no_nerf_distill {
        cfg.enable_nerf_distill = false;
    }
    if a.no_virtual {
        cfg.enable_virtual = false;
    }
    if a.feature_distill {
        cfg.enable_feature_distill = true;
    }
    let w = &mut cfg.weights;
    for (slot, v) in [
        (&mut w.w_rgb, a.w_rgb),
        (&mut w.w_ssim, a.w_ssim),
        (&mut w.w_depth, a.w_depth),
        (&mut w.w_density, a.w_density),
        (&mut w.w_nerf, a.w_nerf),
        (&mut w.w_found, a.w_found),
    ] {
        if let Some(v) = v {
            *slot = v;
        }
    }
    Ok(cfg)
}

fn fit(a: FitArgs) -> Result<()> {
    let cfg = fit_config(&a)?;
    let m = load_manifest(&a.manifest)?;
    let every = a.log_every;
    let result = fit_with(&m, &cfg, |k, r| {
        if every > 0 && (k % every == 0 || k + 1 == cfg.steps) {
            eprintln!(
                "step {k:5}  rgb {:.5}  depth {:.5}  density {:.5}  nerf {:.5}  found {:.5}  total {:.5}",
                r.l_rgb, r.l_depth, r.l_density, r.l_nerf, r.l_found, r.total
            );
        }
    })?;
    let history = a.history.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    write_text(&history, &history_csv(&result.history))?;
    Checkpoint::from(result).save(&a.out)?;
    println!("wrote {} and {}", a.out.display(), history.display());
    Ok(())
}

fn select<'a>(m: &'a SceneManifest, names: &[String]) -> Result<Vec<&'a CameraSpec>> {
    if names.is_empty() {
        return Ok(m.cameras.iter().collect());
    }
    names
        .iter()
        .map(|n| {
            m.cameras
                .iter()
                .find(|c| &c.name == n)
                .ok_or_else(|| Error::validation("camera", format!("no camera named {n}")))
        })
        .collect()
}

fn render(a: RenderArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let m = load_manifest(&a.manifest)?;
    create_dir(&a.out)?;
    for spec in select(&m, &a.camera)? {
        let out = ck.field.render(&spec.camera()?)?;
        let n = &spec.name;
        write_tensor(a.out.join(format!("{n}_rgb.vxt")), &out.rgb_image)?;
        export_ppm(&out.rgb_image, a.out.join(format!("{n}_rgb.ppm")))?;
        write_tensor(a.out.join(format!("{n}_depth.vxt")), &out.depth_image)?;
        write_tensor(a.out.join(format!("{n}_opacity.vxt")), &out.opacity_image)?;
        write_tensor(a.out.join(format!("{n}_feature.vxt")), &out.feature_image)?;
        if let Some(f) = ck.field.predict_features(&out.feature_image)? {
            write_tensor(a.out.join(format!("{n}_feature_pred.vxt")), &f)?;
        }
        println!("rendered {n}");
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let depth_gt: DepthGt = a.depth_gt.parse()?;
    if let (Some(mp), Some(dir)) = (&a.manifest, &a.renders) {
        let m = load_manifest(mp)?;
        let mut reports = Vec::new();
        for spec in select(&m, &a.camera)? {
            let n = &spec.name;
            let out = RenderOutput {
                rgb_image: read_tensor(dir.join(format!("{n}_rgb.vxt")))?,
                depth_image: read_tensor(dir.join(format!("{n}_depth.vxt")))?,
                opacity_image: read_tensor(dir.join(format!("{n}_opacity.vxt")))?,
                feature_image: read_tensor(dir.join(format!("{n}_feature.vxt")))?,
            };
            let metrics = evaluate_render(&out, &m, spec, depth_gt)?;
            reports.push(json!({ "camera": n, "role": spec.role, "metrics": metrics }));
        }
        print_json(&reports);
        return Ok(());
    }
    let mut r = MetricsReport::default();
    if let (Some(p), Some(g)) = (&a.pred, &a.gt) {
        let (p, g) = (read_tensor(p)?, read_tensor(g)?);
        r.psnr = Some(psnr(&p, &g, 1.0)?);
        r.ssim = Some(ssim(&p, &g)?);
    }
    if let (Some(p), Some(g)) = (&a.pred_depth, &a.gt_depth) {
        r.depth = Some(depth_metrics(&read_tensor(p)?, &read_tensor(g)?, None, a.max_depth)?);
    }
    if r == MetricsReport::default() {
        return Err(Error::validation("eval", "give --manifest with --renders, or --pred/--gt and/or --pred-depth/--gt-depth"));
    }
    print_json(&r);
    Ok(())
}

fn occupancy(a: OccupancyArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut m = load_manifest(&a.manifest)?;
    if let (Some(t), Some(o)) = (a.threshold, m.occupancy.as_mut()) {
        o.threshold = t;
    }
    let (grid, report) = evaluate_occupancy(&ck.field, &m)?;
    create_dir(&a.out)?;
    let path = a.out.join("occupancy.vxt");
    write_tensor(&path, &grid.to_tensor()?)?;
    print_json(&json!({
        "grid": path,
        "dims": grid.dims,
        "occupied": grid.occupied_count(),
        "iou": report,
    }));
    Ok(())
}

fn parse_embedding(s: &str) -> Result<Vec<f64>> {
    if s.ends_with(".vxt") {
        return Ok(read_tensor(s)?.to_f64_vec());
    }
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::validation("embedding", format!("not a number: {v}")))
        })
        .collect()
}

fn query(a: QueryArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let m = load_manifest(&a.manifest)?;
    let spec = select(&m, std::slice::from_ref(&a.camera))?[0];
    let embedding = parse_embedding(&a.embedding)?;
    let out = ck.field.render(&spec.camera()?)?;
    let features = ck.field.predict_features(&out.feature_image)?.unwrap_or(out.feature_image);
    let heat = text_query(&features, &embedding)?;
    write_tensor(&a.out, &heat)?;
    let gray: Vec<f64> = heat.to_f64_vec().iter().flat_map(|&v| [v, v, v]).collect();
    let shape = heat.shape();
    export_ppm(&Tensor::from_f64(vec![shape[0], shape[1], 3], gray)?, a.out.with_extension("ppm"))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let reports = run_suite(&a.seeds)?;
    let mut worst: f64 = 0.0;
    for r in &reports {
        let ok = r.report.max_rel < GRADCHECK_TOL;
        println!(
            "{:<24} seed {:<3} max_rel {:.3e}  checked {:<5} {}",
            r.name,
            r.seed,
            r.report.max_rel,
            r.report.checked,
            if ok { "ok" } else { "FAIL" }
        );
        worst = worst.max(r.report.max_rel);
    }
    if worst >= GRADCHECK_TOL {
        return Err(Error::Numerical {
            op: "gradcheck".into(),
            detail: format!("worst relative error {worst:.3e} exceeds {GRADCHECK_TOL}"),
        });
    }
    println!("all {} checks below {GRADCHECK_TOL}", reports.len());
    Ok(())
}
