// Scratch timing breakdown for one training sample at 128x128.
use mapmend_core::geometry::{FieldCalibration, TransformField};
use mapmend_core::model::{Generator, GeneratorConfig, Model};
use mapmend_core::noise::{corrupt, CorruptionSpec};
use mapmend_core::shapes::generate_shapes_dataset;
use mapmend_core::train::AlignmentChain;
use ndarray::{Array2, Array3};
use std::time::Instant;

fn main() {
    let data = generate_shapes_dataset(1, 128, 42).unwrap();
    let (image, gt) = &data[0];
    let gen = Generator::new(GeneratorConfig::default()).unwrap();
    let spec = CorruptionSpec { max_disp: 16.0, seed: 3, ..CorruptionSpec::default() };

    let reps = 20;
    let t0 = Instant::now();
    let mut sample = None;
    for _ in 0..reps {
        sample = Some(corrupt(image, gt, &spec).unwrap());
    }
    println!("corrupt:     {:6.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
    let sample = sample.unwrap();

    let input = Model::assemble_input(&sample.image, &sample.noisy_mask).unwrap();
    let t0 = Instant::now();
    let mut fwd = None;
    for _ in 0..reps {
        fwd = Some(gen.forward_train(&input).unwrap());
    }
    println!("net fwd:     {:6.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
    let fwd = fwd.unwrap();

    let mut grads = gen.zeros_like();
    let d_field = Array3::<f32>::from_elem(fwd.field_raw.dim(), 1e-6);
    let dz = Array2::<f32>::from_elem(fwd.missing.dim(), 1e-6);
    let t0 = Instant::now();
    for _ in 0..reps {
        gen.backward(&fwd, &d_field, &dz, &dz, &mut grads);
    }
    println!("net bwd:     {:6.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = gen.zeros_like();
        for s in g.params_mut() {
            s.fill(0.0);
        }
    }
    println!("zeros_like:  {:6.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let field = TransformField::new(fwd.field_raw.mapv(|v| (v as f64).clamp(-1.0, 1.0))).unwrap();
    let t0 = Instant::now();
    for _ in 0..reps {
        let chain = AlignmentChain::build(&sample, &FieldCalibration::default()).unwrap();
        let state = chain.forward(&field).unwrap();
        let _ = chain.backward(&state, &Default::default());
    }
    println!("chain f+b:   {:6.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    // Inference-style forward via Model (used in validation).
    let model = Model::Generator(Box::new(gen.clone()));
    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = model.forward(&sample.image, &sample.noisy_mask).unwrap();
    }
    println!("model fwd:   {:6.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}
