// Scratch training pilot: small run to gauge learning speed and epoch cost.
use mapmend_core::noise::CorruptionSpec;
use mapmend_core::shapes::generate_shapes_dataset;
use mapmend_core::train::{fit, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_train: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(6);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let n_val: usize = std::env::var("PILOT_NVAL").ok().and_then(|v| v.parse().ok()).unwrap_or(20);
    let data = generate_shapes_dataset(n_train + n_val, 128, 42).unwrap();
    let (train, val) = data.split_at(n_train);
    let config = TrainConfig {
        epochs,
        batch_size: std::env::var("PILOT_BATCH").ok().and_then(|v| v.parse().ok()).unwrap_or(8),
        learning_rate: lr,
        patch_size: 128,
        corruption: CorruptionSpec {
            max_disp: std::env::var("PILOT_DISP").ok().and_then(|v| v.parse().ok()).unwrap_or(16.0),
            max_rot: std::env::var("PILOT_ROT").ok().and_then(|v| v.parse().ok()).unwrap_or(std::f64::consts::FRAC_PI_6),
            scale_range: (0.9, 1.1),
            p_remove: std::env::var("PILOT_PREM").ok().and_then(|v| v.parse().ok()).unwrap_or(0.1),
            p_inject: std::env::var("PILOT_PINJ").ok().and_then(|v| v.parse().ok()).unwrap_or(0.1),
            global_max_disp: std::env::var("PILOT_GDISP").ok().and_then(|v| v.parse().ok()).unwrap_or(16.0),
            global_max_rot: std::env::var("PILOT_GROT").ok().and_then(|v| v.parse().ok()).unwrap_or(std::f64::consts::PI / 36.0),
            seed: 0,
            ..CorruptionSpec::default()
        },
        seed: 7,
        checkpoint_dir: std::path::PathBuf::from("/tmp/pilot"),
        stop_at_val_iou: std::env::var("PILOT_STOP").ok().and_then(|v| v.parse().ok()),
        max_seconds: std::env::var("PILOT_MAXSEC").ok().and_then(|v| v.parse().ok()),
        ..TrainConfig::default()
    };

    let started = std::time::Instant::now();
    let report = fit(train, val, &config).unwrap();
    for m in &report.epochs {
        println!(
            "epoch {:2}  total {:.4}  mse {:.4} mae {:.4} miss {:.4} obs {:.4}  val corrupted {:.4} corrected {:.4}  [{:.0}s]",
            m.epoch, m.loss_total, m.loss_mse, m.loss_mae, m.loss_missing, m.loss_obsolete,
            m.val_iou_corrupted, m.val_iou_corrected, started.elapsed().as_secs_f64()
        );
    }
}
