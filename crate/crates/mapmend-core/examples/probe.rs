// Scratch diagnostic for the repair path with a fresh generator.
use mapmend_core::infer::{repair_scene, Thresholds};
use mapmend_core::model::{GeneratorConfig, Model};
use mapmend_core::noise::{corrupt, CorruptionSpec};
use mapmend_core::raster::iou;
use mapmend_core::shapes::generate_shapes_dataset;

fn main() {
    let data = generate_shapes_dataset(1, 128, 42).unwrap();
    let (image, gt) = &data[0];
    let spec = CorruptionSpec {
        max_disp: 8.0,
        max_rot: 0.0,
        scale_range: (1.0, 1.0),
        p_remove: 0.0,
        p_inject: 0.0,
        global_max_disp: 0.0,
        global_max_rot: 0.0,
        seed: 1,
    };
    let sample = corrupt(image, gt, &spec).unwrap();
    println!("iou(noisy, gt) = {:.4}", iou(&sample.noisy_mask, gt).unwrap());

    let model = Model::new_generator(GeneratorConfig::default()).unwrap();
    let out = model.forward(image, &sample.noisy_mask).unwrap();
    let f = out.field.data();
    println!(
        "field raw: min {:.4} max {:.4} mean|.| {:.5}",
        f.iter().cloned().fold(f64::INFINITY, f64::min),
        f.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        f.iter().map(|v| v.abs()).sum::<f64>() / f.len() as f64
    );
    println!(
        "missing: mean {:.4}  obsolete: mean {:.4}",
        out.missing.data().mean().unwrap(),
        out.obsolete.data().mean().unwrap()
    );

    let result =
        repair_scene(&model, image, &sample.noisy_mask, 128, 32, &Thresholds::default()).unwrap();
    println!(
        "aligned iou {:.4}  final iou {:.4}  removed {}  missing_polys {}  warn {}",
        iou(&result.aligned_map, gt).unwrap(),
        iou(&result.final_map, gt).unwrap(),
        result.removed_labels.len(),
        result.missing_polygons.len(),
        result.warnings.len()
    );
    for (l, t) in &result.per_instance_transforms {
        println!(
            "  label {l}: tx {:.2} ty {:.2} theta {:.3} scale {:.3}",
            t.tx, t.ty, t.theta, t.scale
        );
    }
}
