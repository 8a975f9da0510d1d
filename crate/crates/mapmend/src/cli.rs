//! Command-line pipeline: `synth | train | repair | eval | sweep`.
//!
//! Every command is reproducible: the same config and seed give byte
//! identical file outputs. Exit codes: 0 success, 1 runtime failure,
//! 2 usage or configuration error.

use crate::config::{ConfigError, RunConfig};
use crate::geojson;
use crate::ingest::{self, GeoTransform};
use crate::overlay::render_overlay;
use crate::png;
use clap::{Parser, Subcommand};
use mapmend_core::eval::{
    displacement_sweep, emit_plot, emit_sweep_csv, evaluate, EvalMode, EvalReport, Provenance,
    SweepParams, SweepRow,
};
use mapmend_core::infer::{plan_tiles, repair_image, RepairResult};
use mapmend_core::model::{load_checkpoint, Model};
use mapmend_core::noise::{corrupt, derive_seed};
use mapmend_core::raster::{BinaryMask, IntensityImage, Polygon};
use mapmend_core::shapes::generate_shapes_dataset;
use mapmend_core::train::fit;
use serde::Serialize;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(name = "mapmend", version, about = "Align, filter and complete building-footprint masks against imagery")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration file (TOML). Defaults apply when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for sample/tile parallelism (0 = automatic).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a corrupted dataset: PNG quintuples plus corruption records.
    Synth {
        /// Number of samples (defaults to data.train_count).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the generator on the configured dataset.
    Train,
    /// Repair one scene: align instances, drop obsolete ones, add missing.
    Repair {
        #[arg(long)]
        image: PathBuf,
        /// Input annotations as a mask PNG.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Input annotations as GeoJSON (rasterized via the configured
        /// geotransform).
        #[arg(long)]
        geojson: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score a prediction against ground truth.
    Eval {
        /// Final (merged) prediction mask.
        #[arg(long)]
        pred: PathBuf,
        /// Aligned-only mask; defaults to the final mask.
        #[arg(long)]
        aligned: Option<PathBuf>,
        /// The input annotations the prediction started from.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// "alignment" or "align_and_detect" (defaults to eval.mode).
        #[arg(long)]
        mode: Option<String>,
    },
    /// Displacement sweep: corrupt, repair and score per displacement bound.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Average this many corruption trials per row (defaults to
        /// eval.trials).
        #[arg(long)]
        trials: Option<usize>,
    },
}

pub enum AppError {
    Config(String),
    Runtime(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            AppError::Config(m) => m,
            AppError::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        AppError::Config(e.to_string())
    }
}

macro_rules! runtime_from {
    ($($ty:path),* $(,)?) => {
        $(impl From<$ty> for AppError {
            fn from(e: $ty) -> Self {
                AppError::Runtime(e.to_string())
            }
        })*
    };
}

runtime_from!(
    crate::png::RasterIoError,
    crate::geojson::GeoJsonError,
    crate::ingest::IngestError,
    crate::osm::OsmError,
    mapmend_core::raster::RasterError,
    mapmend_core::geometry::GeometryError,
    mapmend_core::noise::NoiseError,
    mapmend_core::model::ModelError,
    mapmend_core::infer::InferError,
    mapmend_core::eval::EvalError,
    mapmend_core::shapes::ShapesError,
    std::io::Error,
);

impl From<mapmend_core::train::TrainError> for AppError {
    fn from(e: mapmend_core::train::TrainError) -> Self {
        match e {
            mapmend_core::train::TrainError::BadConfig { .. } => AppError::Config(e.to_string()),
            other => AppError::Runtime(other.to_string()),
        }
    }
}

/// Parse arguments, run the selected command, and return the exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), AppError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    if let Some(workers) = cli.workers {
        if workers > 0 {
            // Ignore "already initialized": only the first builder wins.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
        }
    }
    match &cli.command {
        Command::Synth { count } => cmd_synth(&config, *count, &cli.out),
        Command::Train => cmd_train(&config),
        Command::Repair { image, mask, geojson, checkpoint } => {
            cmd_repair(&config, image, mask.as_deref(), geojson.as_deref(), checkpoint, &cli.out)
        }
        Command::Eval { pred, aligned, input, gt, mode } => {
            cmd_eval(&config, pred, aligned.as_deref(), input, gt, mode.as_deref(), &cli.out)
        }
        Command::Sweep { checkpoint, trials } => {
            cmd_sweep(&config, checkpoint, *trials, &cli.out)
        }
    }
}

/// Load the configured dataset as (train, val) image/mask pairs.
fn load_dataset(
    config: &RunConfig,
) -> Result<(Vec<(IntensityImage, BinaryMask)>, Vec<(IntensityImage, BinaryMask)>), AppError> {
    match config.data.kind.as_str() {
        "shapes" => {
            let total = config.data.train_count + config.data.val_count;
            let mut all = generate_shapes_dataset(total, config.data.size, config.seed)?;
            let val = all.split_off(config.data.train_count);
            Ok((all, val))
        }
        _ => {
            let root = config.data.root.as_ref().expect("validated");
            let spec = ingest::SplitSpec {
                train: config.data.train_tiles.clone(),
                val: config.data.val_tiles.clone(),
                test: config.data.test_tiles.clone(),
            };
            let load = |split| -> Result<Vec<(IntensityImage, BinaryMask)>, AppError> {
                let index = ingest::load_inria_index(root, &spec, split)?;
                index
                    .entries
                    .iter()
                    .map(|e| {
                        Ok((png::read_image(&e.image_path)?, png::read_mask_png(&e.gt_path)?))
                    })
                    .collect()
            };
            Ok((load(ingest::Split::Train)?, load(ingest::Split::Val)?))
        }
    }
}

fn cmd_synth(config: &RunConfig, count: Option<usize>, out: &Path) -> Result<(), AppError> {
    let n = count.unwrap_or(config.data.train_count);
    if n == 0 {
        return Err(AppError::Config("synth count must be >= 1".into()));
    }
    let pairs = match config.data.kind.as_str() {
        "shapes" => generate_shapes_dataset(n, config.data.size, config.seed)?,
        _ => {
            let (train, _) = load_dataset(config)?;
            train.into_iter().take(n).collect()
        }
    };
    std::fs::create_dir_all(out)?;
    for (i, (image, gt)) in pairs.iter().enumerate() {
        let spec = config.corruption.to_spec(derive_seed(config.seed, 100, i as u64));
        let sample = corrupt(image, gt, &spec)?;
        let dir = out.join(format!("sample_{i:04}"));
        png::write_image_png(&sample.image, &dir.join("image.png"))?;
        png::write_mask_png(&sample.noisy_mask, &dir.join("noisy.png"))?;
        png::write_mask_png(&sample.gt_mask, &dir.join("gt.png"))?;
        png::write_mask_png(&sample.missing_gt, &dir.join("missing_gt.png"))?;
        png::write_mask_png(&sample.obsolete_gt, &dir.join("obsolete_gt.png"))?;
        let record =
            serde_json::to_string_pretty(&sample.record).expect("record serializes");
        std::fs::write(dir.join("record.json"), record)?;
    }
    println!("wrote {n} corrupted samples to {}", out.display());
    Ok(())
}

fn cmd_train(config: &RunConfig) -> Result<(), AppError> {
    let (train_set, val_set) = load_dataset(config)?;
    let train_config = config.to_train_config();
    let report = fit(&train_set, &val_set, &train_config)?;
    let last = report.epochs.last().expect("at least one epoch");
    println!("epochs run         {}", report.epochs.len());
    println!("val iou corrupted  {:.4}", last.val_iou_corrupted);
    println!("val iou corrected  {:.4}", last.val_iou_corrected);
    println!("best val iou       {:.4}", report.best_val_iou);
    println!("checkpoint         {}", report.checkpoint_path.display());
    println!("metrics            {}", report.metrics_path.display());
    Ok(())
}

#[derive(Serialize)]
struct RepairReportFile {
    removed_labels: BTreeSet<u32>,
    per_instance_transforms:
        std::collections::BTreeMap<u32, mapmend_core::geometry::SimilarityTransform>,
    missing_polygon_count: usize,
    missing_polygons: Vec<Polygon>,
    warnings: Vec<String>,
    input_polygon_count: Option<usize>,
    clipped_input_polygons: Option<usize>,
}

fn cmd_repair(
    config: &RunConfig,
    image_path: &Path,
    mask_path: Option<&Path>,
    geojson_path: Option<&Path>,
    checkpoint: &Path,
    out: &Path,
) -> Result<(), AppError> {
    if !checkpoint.exists() {
        return Err(AppError::Config(format!(
            "checkpoint {} does not exist",
            checkpoint.display()
        )));
    }
    let image = png::read_image(image_path)?;
    let transform = config
        .data
        .geotransform
        .map(GeoTransform)
        .unwrap_or_else(GeoTransform::identity);
    let (mask, input_polygons, clipped) = match (mask_path, geojson_path) {
        (Some(p), None) => (png::read_mask_png(p)?, None, None),
        (None, Some(p)) => {
            let geo = geojson::read_geojson(p)?;
            let (pixel_polys, stats) =
                ingest::geo_to_pixel(&geo, &transform, image.width(), image.height())?;
            let rasterized = mapmend_core::raster::rasterize_polygons(
                &pixel_polys,
                image.width(),
                image.height(),
            );
            (rasterized.mask, Some(geo.len()), Some(stats.clipped))
        }
        _ => {
            return Err(AppError::Config(
                "exactly one of --mask or --geojson is required".into(),
            ))
        }
    };
    let model = load_checkpoint(checkpoint)?;
    let thresholds = config.inference.to_thresholds();
    let patch = config.inference.patch_size.min(image.height()).min(image.width());
    let border =
        if patch > 2 * config.inference.border { config.inference.border } else { patch / 4 };
    let plan = plan_tiles(image.height(), image.width(), patch, border)?;
    let result = repair_image(&model, &image, &mask, &plan, &thresholds)?;

    std::fs::create_dir_all(out)?;
    png::write_mask_png(&result.final_map, &out.join("final.png"))?;
    png::write_mask_png(&result.aligned_map, &out.join("aligned.png"))?;
    let overlay = render_overlay(&image, &mask, &result);
    overlay
        .save(out.join("overlay.png"))
        .map_err(|e| AppError::Runtime(format!("overlay: {e}")))?;

    // Corrected footprints as GeoJSON, mapped back through the geotransform.
    let pixel_footprints = mapmend_core::raster::vectorize_mask(&result.final_map);
    let geo_footprints: Vec<geojson::GeoPolygon> = pixel_footprints
        .iter()
        .map(|poly| geojson::GeoPolygon {
            exterior: poly.ring.iter().map(|p| transform.pixel_to_geo(p.x, p.y)).collect(),
        })
        .collect();
    geojson::write_geojson(&geo_footprints, &out.join("footprints.geojson"))?;

    let report = RepairReportFile {
        removed_labels: result.removed_labels.clone(),
        per_instance_transforms: result.per_instance_transforms.clone(),
        missing_polygon_count: result.missing_polygons.len(),
        missing_polygons: result.missing_polygons.clone(),
        warnings: result.warnings.clone(),
        input_polygon_count: input_polygons,
        clipped_input_polygons: clipped,
    };
    std::fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;

    println!("instances          {}", result.per_instance_transforms.len() + result.removed_labels.len());
    println!("removed            {}", result.removed_labels.len());
    println!("added              {}", result.missing_polygons.len());
    if let Some(n) = input_polygons {
        println!("input polygons     {n}");
    }
    println!("outputs            {}", out.display());
    Ok(())
}

fn parse_mode(s: &str) -> Result<EvalMode, AppError> {
    match s {
        "alignment" => Ok(EvalMode::Alignment),
        "align_and_detect" => Ok(EvalMode::AlignAndDetect),
        other => Err(AppError::Config(format!(
            "mode must be \"alignment\" or \"align_and_detect\", got {other:?}"
        ))),
    }
}

/// The fixed-width summary table printed by `eval`.
pub fn format_eval_table(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<18} {}\n", "metric", "value"));
    out.push_str(&format!("{:<18} {}\n", "mode", report.mode));
    out.push_str(&format!("{:<18} {:.4}\n", "iou", report.iou));
    out.push_str(&format!("{:<18} {:.4}\n", "accuracy", report.accuracy));
    out.push_str(&format!("{:<18} {}\n", "instances", report.instance_count));
    out.push_str(&format!("{:<18} {}\n", "removed", report.removed_count));
    out.push_str(&format!("{:<18} {}\n", "added", report.added_count));
    out
}

fn cmd_eval(
    config: &RunConfig,
    pred: &Path,
    aligned: Option<&Path>,
    input: &Path,
    gt: &Path,
    mode: Option<&str>,
    out: &Path,
) -> Result<(), AppError> {
    let mode = parse_mode(mode.unwrap_or(&config.eval.mode))?;
    let final_map = png::read_mask_png(pred)?;
    let aligned_map = match aligned {
        Some(p) => png::read_mask_png(p)?,
        None => final_map.clone(),
    };
    let input_mask = png::read_mask_png(input)?;
    let gt_mask = png::read_mask_png(gt)?;
    let result = RepairResult {
        aligned_map,
        final_map,
        removed_labels: BTreeSet::new(),
        per_instance_transforms: Default::default(),
        missing_polygons: Vec::new(),
        warnings: Vec::new(),
    };
    let provenance = Provenance {
        checkpoint_id: String::new(),
        dataset_id: pred.display().to_string(),
        seed: config.seed,
    };
    let report = evaluate(&result, &gt_mask, &input_mask, mode, provenance)?;
    print!("{}", format_eval_table(&report));
    std::fs::create_dir_all(out)?;
    std::fs::write(
        out.join("eval.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    Ok(())
}

/// The fixed-width sweep table printed by `sweep`.
pub fn format_sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:>8}  {:>13}  {:>13}\n", "max_disp", "iou_corrupted", "iou_corrected"));
    for row in rows {
        out.push_str(&format!(
            "{:>8}  {:>13.4}  {:>13.4}\n",
            row.max_disp, row.iou_corrupted, row.iou_corrected
        ));
    }
    out
}

fn cmd_sweep(
    config: &RunConfig,
    checkpoint: &Path,
    trials: Option<usize>,
    out: &Path,
) -> Result<(), AppError> {
    if !checkpoint.exists() {
        return Err(AppError::Config(format!(
            "checkpoint {} does not exist",
            checkpoint.display()
        )));
    }
    let model: Model = load_checkpoint(checkpoint)?;
    let (_, val_set) = load_dataset(config)?;
    if val_set.is_empty() {
        return Err(AppError::Config("sweep needs a non-empty validation split".into()));
    }
    let params = SweepParams {
        displacements: config.eval.displacements.clone(),
        trials: trials.unwrap_or(config.eval.trials),
        corruption: config.corruption.to_spec(config.seed),
        patch_size: config.inference.patch_size,
        border: config.inference.border,
        thresholds: config.inference.to_thresholds(),
        seed: config.seed,
    };
    let rows = displacement_sweep(&model, &val_set, &params)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("sweep.csv"), emit_sweep_csv(&rows))?;
    std::fs::write(out.join("sweep.svg"), emit_plot(&rows)?)?;
    print!("{}", format_sweep_table(&rows));
    println!("outputs            {}", out.display());
    Ok(())
}
