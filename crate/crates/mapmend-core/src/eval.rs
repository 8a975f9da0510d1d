//! Scoring protocols, the displacement sweep, and CSV/SVG emission.
//!
//! Two protocols: `Alignment` scores the aligned map against the ground
//! truth restricted to components that overlap the input annotations — the
//! detection branches (additions and removals) stay out of the score — while
//! `AlignAndDetect` scores the merged final map against the full ground
//! truth.

use crate::infer::{repair_scene, InferError, RepairResult, Thresholds};
use crate::model::Model;
use crate::noise::{corrupt, derive_seed, CorruptionSpec, NoiseError};
use crate::raster::{
    iou, label_instances, pixel_accuracy, BinaryMask, IntensityImage, RasterError,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("no sweep rows to plot")]
    EmptyRows,
    #[error("sweep csv parse error at line {line}: {msg}")]
    ParseCsv { line: usize, msg: String },
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Alignment,
    AlignAndDetect,
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalMode::Alignment => write!(f, "alignment"),
            EvalMode::AlignAndDetect => write!(f, "align_and_detect"),
        }
    }
}

/// Where a report came from: free-form ids plus the seed that produced it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint_id: String,
    pub dataset_id: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub iou: f64,
    pub accuracy: f64,
    pub instance_count: usize,
    pub removed_count: usize,
    pub added_count: usize,
    pub provenance: Provenance,
}

/// Score one repair result against ground truth.
pub fn evaluate(
    pred: &RepairResult,
    gt_mask: &BinaryMask,
    input_mask: &BinaryMask,
    mode: EvalMode,
    provenance: Provenance,
) -> Result<EvalReport, EvalError> {
    let (h, w) = (gt_mask.height(), gt_mask.width());
    for m in [&pred.aligned_map, &pred.final_map, input_mask] {
        if m.height() != h || m.width() != w {
            return Err(EvalError::DimensionMismatch(h, w, m.height(), m.width()));
        }
    }
    let (iou_v, acc_v) = match mode {
        EvalMode::AlignAndDetect => {
            (iou(&pred.final_map, gt_mask)?, pixel_accuracy(&pred.final_map, gt_mask)?)
        }
        EvalMode::Alignment => {
            // Restrict ground truth to components that overlap the input
            // annotations; missing buildings are invisible to this protocol.
            let imap = label_instances(gt_mask);
            let mut restricted = BinaryMask::zeros(h, w);
            for region in imap.regions() {
                let overlaps = region.pixels.iter().any(|&(r, c)| input_mask.get(r, c) == 1);
                if overlaps {
                    for &(r, c) in &region.pixels {
                        restricted.set(r, c, 1);
                    }
                }
            }
            (
                iou(&pred.aligned_map, &restricted)?,
                pixel_accuracy(&pred.aligned_map, &restricted)?,
            )
        }
    };
    Ok(EvalReport {
        mode,
        iou: iou_v,
        accuracy: acc_v,
        instance_count: label_instances(input_mask).instance_count(),
        removed_count: pred.removed_labels.len(),
        added_count: pred.missing_polygons.len(),
        provenance,
    })
}

/// One sweep measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub max_disp: f64,
    pub iou_corrupted: f64,
    pub iou_corrected: f64,
    pub seed: u64,
}

/// Sweep configuration. The corruption template supplies rotation, scale and
/// removal/injection settings; each row overrides `max_disp`. Per-sample
/// seeds depend only on the base seed, trial and sample index — not on the
/// displacement — so a sweep varies noise magnitude, not direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepParams {
    pub displacements: Vec<f64>,
    pub trials: usize,
    pub corruption: CorruptionSpec,
    pub patch_size: usize,
    pub border: usize,
    pub thresholds: Thresholds,
    pub seed: u64,
}

impl Default for SweepParams {
    fn default() -> Self {
        SweepParams {
            displacements: vec![8.0, 16.0, 24.0, 32.0, 40.0, 48.0, 56.0, 64.0],
            trials: 1,
            corruption: CorruptionSpec::default(),
            patch_size: 448,
            border: 64,
            thresholds: Thresholds::default(),
            seed: 0,
        }
    }
}

/// Corrupt the dataset at each displacement bound, repair it, and record the
/// mean baseline and corrected IoU.
pub fn displacement_sweep(
    model: &Model,
    dataset: &[(IntensityImage, BinaryMask)],
    params: &SweepParams,
) -> Result<Vec<SweepRow>, EvalError> {
    let mut rows = Vec::with_capacity(params.displacements.len());
    for &max_disp in &params.displacements {
        let mut sum_corrupted = 0.0;
        let mut sum_corrected = 0.0;
        let mut n = 0usize;
        for trial in 0..params.trials.max(1) {
            for (i, (image, gt)) in dataset.iter().enumerate() {
                let spec = CorruptionSpec {
                    max_disp,
                    seed: derive_seed(params.seed, trial as u64, i as u64),
                    ..params.corruption
                };
                let sample = corrupt(image, gt, &spec)?;
                sum_corrupted += iou(&sample.noisy_mask, gt)?;
                let patch = params.patch_size.min(image.height()).min(image.width());
                let border = if patch > 2 * params.border { params.border } else { patch / 4 };
                let repaired = repair_scene(
                    model,
                    image,
                    &sample.noisy_mask,
                    patch,
                    border,
                    &params.thresholds,
                )?;
                sum_corrected += iou(&repaired.final_map, gt)?;
                n += 1;
            }
        }
        rows.push(SweepRow {
            max_disp,
            iou_corrupted: sum_corrupted / n as f64,
            iou_corrected: sum_corrected / n as f64,
            seed: params.seed,
        });
    }
    Ok(rows)
}

/// RFC 4180 CSV with a fixed header. Floats use the shortest round-trip
/// representation, so parsing the output recovers the rows exactly.
pub fn emit_sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("max_disp,iou_corrupted,iou_corrected,seed\r\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{}\r\n",
            row.max_disp, row.iou_corrupted, row.iou_corrected, row.seed
        ));
    }
    out
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>, EvalError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if i == 0 {
            if line != "max_disp,iou_corrupted,iou_corrected,seed" {
                return Err(EvalError::ParseCsv { line: 1, msg: format!("bad header {line:?}") });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(EvalError::ParseCsv {
                line: i + 1,
                msg: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let parse_f = |s: &str, what: &str| {
            s.parse::<f64>()
                .map_err(|e| EvalError::ParseCsv { line: i + 1, msg: format!("{what}: {e}") })
        };
        rows.push(SweepRow {
            max_disp: parse_f(fields[0], "max_disp")?,
            iou_corrupted: parse_f(fields[1], "iou_corrupted")?,
            iou_corrected: parse_f(fields[2], "iou_corrected")?,
            seed: fields[3]
                .parse()
                .map_err(|e| EvalError::ParseCsv { line: i + 1, msg: format!("seed: {e}") })?,
        });
    }
    Ok(rows)
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 420.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 16.0;
const MARGIN_B: f64 = 56.0;

/// Deterministic SVG line plot of a sweep: x = maximum displacement,
/// y = IoU, red baseline series and blue corrected series.
pub fn emit_plot(rows: &[SweepRow]) -> Result<String, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::EmptyRows);
    }
    let x_max = rows.iter().map(|r| r.max_disp).fold(f64::NEG_INFINITY, f64::max);
    let x_min = rows.iter().map(|r| r.max_disp).fold(f64::INFINITY, f64::min);
    let span = if (x_max - x_min).abs() < 1e-12 { x_max.abs().max(1.0) } else { x_max - x_min };
    let plot_w = SVG_W - MARGIN_L - MARGIN_R;
    let plot_h = SVG_H - MARGIN_T - MARGIN_B;
    let x_of = |d: f64| MARGIN_L + (d - x_min) / span * plot_w;
    let y_of = |v: f64| MARGIN_T + (1.0 - v.clamp(0.0, 1.0)) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {SVG_W} {SVG_H}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{plot_w}\" height=\"{plot_h}\" \
         fill=\"none\" stroke=\"black\"/>\n"
    ));
    for i in 0..=5 {
        let v = i as f64 * 0.2;
        let y = y_of(v);
        svg.push_str(&format!(
            "<line class=\"ygrid\" x1=\"{MARGIN_L}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" \
             stroke=\"#cccccc\" stroke-dasharray=\"4 3\"/>\n",
            MARGIN_L + plot_w
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{v:.1}</text>\n",
            MARGIN_L - 8.0,
            y + 4.0
        ));
    }
    for row in rows {
        let x = x_of(row.max_disp);
        svg.push_str(&format!(
            "<line class=\"xtick\" x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" \
             stroke=\"black\"/>\n",
            MARGIN_T + plot_h,
            MARGIN_T + plot_h + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
            MARGIN_T + plot_h + 18.0,
            row.max_disp
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">maximum absolute displacement \
         [px]</text>\n",
        MARGIN_L + plot_w / 2.0,
        SVG_H - 16.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">\
         IoU</text>\n",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0
    ));

    for (series, color, pick) in
        [("corrupted", "#d62728", 0usize), ("corrected", "#1f77b4", 1usize)]
    {
        let points: Vec<String> = rows
            .iter()
            .map(|r| {
                let v = if pick == 0 { r.iou_corrupted } else { r.iou_corrected };
                format!("{:.2},{:.2}", x_of(r.max_disp), y_of(v))
            })
            .collect();
        svg.push_str(&format!(
            "<polyline class=\"{series}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" \
             points=\"{}\"/>\n",
            points.join(" ")
        ));
        for r in rows {
            let v = if pick == 0 { r.iou_corrupted } else { r.iou_corrected };
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                x_of(r.max_disp),
                y_of(v)
            ));
        }
    }
    let lx = MARGIN_L + 12.0;
    let ly = MARGIN_T + plot_h - 34.0;
    for (i, (label, color)) in
        [("corrupted baseline", "#d62728"), ("corrected", "#1f77b4")].iter().enumerate()
    {
        let y = ly + i as f64 * 16.0;
        svg.push_str(&format!(
            "<line x1=\"{lx}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"{color}\" \
             stroke-width=\"2\"/>\n",
            lx + 22.0
        ));
        svg.push_str(&format!("<text x=\"{:.2}\" y=\"{:.2}\">{label}</text>\n", lx + 28.0, y + 4.0));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infer::repair_patch;
    use crate::model::StubModel;
    use crate::shapes::generate_shapes_dataset;
    use std::collections::{BTreeMap, BTreeSet};

    fn result_from_mask(mask: &BinaryMask) -> RepairResult {
        RepairResult {
            aligned_map: mask.clone(),
            final_map: mask.clone(),
            removed_labels: BTreeSet::new(),
            per_instance_transforms: BTreeMap::new(),
            missing_polygons: Vec::new(),
            warnings: Vec::new(),
        }
    }

    fn square_mask(h: usize, w: usize, r0: usize, c0: usize, side: usize) -> BinaryMask {
        let mut m = BinaryMask::zeros(h, w);
        for r in r0..r0 + side {
            for c in c0..c0 + side {
                m.set(r, c, 1);
            }
        }
        m
    }

    #[test]
    fn perfect_prediction_scores_one_in_both_modes() {
        let gt = square_mask(32, 32, 5, 5, 10);
        let pred = result_from_mask(&gt);
        for mode in [EvalMode::Alignment, EvalMode::AlignAndDetect] {
            let report = evaluate(&pred, &gt, &gt, mode, Provenance::default()).unwrap();
            assert_eq!(report.iou, 1.0);
            assert_eq!(report.accuracy, 1.0);
        }
    }

    #[test]
    fn align_and_detect_on_identity_pipeline_equals_plain_iou() {
        let data = generate_shapes_dataset(1, 64, 9).unwrap();
        let (image, gt) = &data[0];
        // Shift annotations to fabricate a mismatched input mask.
        let mut input = BinaryMask::zeros(64, 64);
        for r in 0..64 {
            for c in 3..64 {
                if gt.get(r, c - 3) == 1 {
                    input.set(r, c, 1);
                }
            }
        }
        let model = Model::Stub(StubModel::identity());
        let result = repair_patch(&model, image, &input, &Thresholds::default()).unwrap();
        let report =
            evaluate(&result, gt, &input, EvalMode::AlignAndDetect, Provenance::default())
                .unwrap();
        assert_eq!(report.iou, iou(&input, gt).unwrap());
    }

    #[test]
    fn alignment_mode_ignores_buildings_absent_from_input() {
        // Ground truth has two squares; the input only knows about one.
        let mut gt = square_mask(32, 32, 4, 4, 8);
        for r in 20..28 {
            for c in 20..28 {
                gt.set(r, c, 1);
            }
        }
        let input = square_mask(32, 32, 4, 4, 8);
        let pred = result_from_mask(&input);
        let report =
            evaluate(&pred, &gt, &input, EvalMode::Alignment, Provenance::default()).unwrap();
        assert_eq!(report.iou, 1.0);
        // The same prediction scores below 1 when detection counts.
        let full =
            evaluate(&pred, &gt, &input, EvalMode::AlignAndDetect, Provenance::default()).unwrap();
        assert!(full.iou < 1.0);
    }

    #[test]
    fn evaluate_rejects_dimension_mismatch() {
        let gt = square_mask(32, 32, 4, 4, 8);
        let pred = result_from_mask(&square_mask(16, 16, 2, 2, 4));
        assert!(evaluate(&pred, &gt, &gt, EvalMode::Alignment, Provenance::default()).is_err());
    }

    #[test]
    fn zero_noise_sweep_row_has_perfect_baseline() {
        let data = generate_shapes_dataset(2, 64, 4).unwrap();
        let model = Model::Stub(StubModel::identity());
        let params = SweepParams {
            displacements: vec![0.0],
            corruption: CorruptionSpec {
                max_rot: 0.0,
                scale_range: (1.0, 1.0),
                p_remove: 0.0,
                p_inject: 0.0,
                global_max_disp: 0.0,
                global_max_rot: 0.0,
                ..CorruptionSpec::default()
            },
            ..SweepParams::default()
        };
        let rows = displacement_sweep(&model, &data, &params).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].iou_corrupted, 1.0);
        assert_eq!(rows[0].iou_corrected, 1.0);
    }

    #[test]
    fn sweep_csv_round_trips_exactly() {
        let rows = vec![
            SweepRow { max_disp: 8.0, iou_corrupted: 0.7741, iou_corrected: 0.8379, seed: 3 },
            SweepRow { max_disp: 16.0, iou_corrupted: 0.602877, iou_corrected: 0.82768, seed: 3 },
            SweepRow { max_disp: 24.0, iou_corrupted: 1.0 / 3.0, iou_corrected: 2.0 / 7.0, seed: 3 },
        ];
        let csv = emit_sweep_csv(&rows);
        assert!(csv.starts_with("max_disp,iou_corrupted,iou_corrected,seed\r\n"));
        let parsed = parse_sweep_csv(&csv).unwrap();
        assert_eq!(parsed, rows);
    }

    #[test]
    fn sweep_csv_parse_errors_name_the_line() {
        let err =
            parse_sweep_csv("max_disp,iou_corrupted,iou_corrected,seed\r\n1,2,3\r\n").unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn plot_structure_and_determinism() {
        let rows: Vec<SweepRow> = (0..8)
            .map(|i| SweepRow {
                max_disp: 8.0 * (i + 1) as f64,
                iou_corrupted: 0.8 - 0.08 * i as f64,
                iou_corrected: 0.85 - 0.02 * i as f64,
                seed: 1,
            })
            .collect();
        let svg = emit_plot(&rows).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("class=\"xtick\"").count(), 8);
        assert!(svg.contains("maximum absolute displacement"));
        assert!(svg.contains("IoU"));
        assert_eq!(svg, emit_plot(&rows).unwrap());
    }

    #[test]
    fn plot_handles_single_row_and_rejects_empty() {
        let row = SweepRow { max_disp: 8.0, iou_corrupted: 0.5, iou_corrected: 0.7, seed: 1 };
        let svg = emit_plot(&[row]).unwrap();
        assert!(svg.contains("<circle"));
        assert!(matches!(emit_plot(&[]), Err(EvalError::EmptyRows)));
    }
}
