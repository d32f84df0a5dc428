use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use nvs_core::camgeom::{select_nearest_views, Camera};
use nvs_core::imgtsdf::TsdfParams;
use nvs_core::metrics::{frame_metrics, sequence_metrics};
use nvs_core::pipeline::dataset::{export_synthetic, ingest_dataset, DepthFormat};
use nvs_core::pipeline::io::{read_png, write_pfm};
use nvs_core::pipeline::{run_sequence, BlendStrategy, PipelineConfig, TargetSpec};
use nvs_core::scenegen::{voxel_tsdf_oracle, NoiseSpec, SceneSpec};

/// Streaming novel-view synthesis from multi-view RGB-D video.
#[derive(Parser)]
#[command(name = "nvs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a novel-view sequence from a dataset.
    Render(RenderArgs),
    /// Export a synthetic scene as a dataset.
    Synth(SynthArgs),
    /// Compare two directories of PNG frames.
    Eval(EvalArgs),
    /// Depth of one frame from the dense voxel TSDF.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct RenderArgs {
    /// TOML pipeline config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Held-out camera id to render (and evaluate against).
    #[arg(long)]
    target_camera: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_parser = parse_strategy)]
    blend_strategy: Option<BlendStrategy>,
    #[arg(long)]
    no_temporal_filter: bool,
    #[arg(long)]
    no_temporal_tsdf: bool,
    #[arg(long)]
    start: Option<usize>,
    #[arg(long)]
    end: Option<usize>,
    /// Read 16-bit PNG depth with this many millimeters per unit.
    #[arg(long)]
    depth_png_mm: Option<f64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Depth noise std in meters.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    rendered: PathBuf,
    #[arg(long)]
    gt: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    target_camera: String,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Voxel size in meters.
    #[arg(long, default_value_t = 0.005)]
    voxel: f64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_strategy(s: &str) -> Result<BlendStrategy, String> {
    match s {
        "uniform" => Ok(BlendStrategy::Uniform),
        "distance" => Ok(BlendStrategy::Distance),
        "heuristic" => Ok(BlendStrategy::Heuristic),
        _ => Err(format!("unknown blend strategy {s:?} (uniform, distance, heuristic)")),
    }
}

fn render(args: RenderArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(d) = args.dataset {
        cfg.dataset = d;
    }
    if let Some(m) = args.manifest {
        cfg.manifest = Some(m);
    }
    if let Some(o) = args.output {
        cfg.output = o;
    }
    if let Some(id) = args.target_camera {
        cfg.target = TargetSpec {
            camera: Some(id),
            trajectory: vec![],
        };
    }
    if let Some(k) = args.k {
        cfg.k = k;
    }
    if let Some(s) = args.blend_strategy {
        cfg.blend_strategy = s;
    }
    if args.no_temporal_filter {
        cfg.temporal_filter = false;
    }
    if args.no_temporal_tsdf {
        cfg.temporal_tsdf = false;
    }
    if let Some(s) = args.start {
        cfg.frames.start = s;
    }
    if args.end.is_some() {
        cfg.frames.end = args.end;
    }
    if let Some(mm) = args.depth_png_mm {
        cfg.depth_format = DepthFormat::Png16 { mm_per_unit: mm };
    }
    let report = run_sequence(&cfg)?;
    let s = &report.summary;
    println!("rendered {} frames into {}", s.frames, cfg.output.display());
    for (stage, t) in &s.timings_ms {
        println!("  {stage:<10} mean {:>9.2} ms  p95 {:>9.2} ms", t.mean, t.p95);
    }
    if let Some(m) = &s.metrics {
        println!(
            "  psnr {:.3} dB  ssim {:.4}  l1 {:.3}  sdt {:.4}  tcc {}",
            m.mean_psnr,
            m.mean_ssim,
            m.mean_l1,
            m.sdt,
            m.tcc.map_or("-".to_string(), |v| format!("{v:.4}"))
        );
    }
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let spec = SceneSpec::load(&args.scene)?;
    let noise = NoiseSpec {
        sigma: args.sigma,
        dropout: args.dropout,
        seed: args.seed,
    };
    let ds = export_synthetic(&spec, &noise, &args.out)?;
    println!(
        "wrote {} frames x {} cameras to {}",
        ds.frame_count(),
        ds.cameras.len(),
        args.out.display()
    );
    Ok(())
}

fn pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "png")
                && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("depth_"))
        })
        .collect();
    out.sort();
    Ok(out)
}

fn eval(args: EvalArgs) -> Result<()> {
    let (r, g) = (pngs(&args.rendered)?, pngs(&args.gt)?);
    if r.len() != g.len() || r.is_empty() {
        bail!("{} rendered frames vs {} ground-truth frames", r.len(), g.len());
    }
    let rendered = r.iter().map(|p| read_png(p)).collect::<nvs_core::Result<Vec<_>>>()?;
    let gt = g.iter().map(|p| read_png(p)).collect::<nvs_core::Result<Vec<_>>>()?;
    let mut out = std::io::stdout().lock();
    for (t, (a, b)) in rendered.iter().zip(&gt).enumerate() {
        let m = frame_metrics(t, a, b)?;
        writeln!(out, "{}", serde_json::json!({"kind": "frame", "metrics": m}))?;
    }
    let s = sequence_metrics(&rendered, &gt)?;
    writeln!(out, "{}", serde_json::json!({"kind": "summary", "metrics": s}))?;
    Ok(())
}

fn oracle(args: OracleArgs) -> Result<()> {
    let manifest = args.manifest.unwrap_or_else(|| args.dataset.join("cameras.toml"));
    let ds = ingest_dataset(&args.dataset, &manifest, DepthFormat::Pfm)?;
    let target_idx = ds
        .manifest
        .index_of(&args.target_camera)
        .with_context(|| format!("camera {:?} not in manifest", args.target_camera))?;
    let target = ds.cameras[target_idx].clone();
    let candidates: Vec<usize> = (0..ds.cameras.len()).filter(|&i| i != target_idx).collect();
    let cams: Vec<Camera> = candidates.iter().map(|&i| ds.cameras[i].clone()).collect();
    let picked = select_nearest_views(&cams, &target, args.k, Default::default(), false)?;
    let inputs = picked
        .iter()
        .map(|&j| ds.view(args.frame, candidates[j]).map(|v| (v.camera, v.depth)))
        .collect::<nvs_core::Result<Vec<_>>>()?;
    let depth = voxel_tsdf_oracle(&inputs, &target, args.voxel, &TsdfParams::default())?;
    write_pfm(&args.out, &depth)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn main() -> Result<()> {
    let run = match Cli::parse().command {
        Command::Render(a) => render(a),
        Command::Synth(a) => synth(a),
        Command::Eval(a) => eval(a),
        Command::Oracle(a) => oracle(a),
    };
    match run {
        // Output piped into something like `head` that stopped reading.
        Err(e)
            if e.downcast_ref::<std::io::Error>()
                .is_some_and(|e| e.kind() == ErrorKind::BrokenPipe) =>
        {
            Ok(())
        }
        r => r,
    }
}
