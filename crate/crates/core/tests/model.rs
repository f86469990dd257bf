use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use refsr_core::data::{synthetic_pairs, synthetic_texture, Image, ImagePair};
use refsr_core::model::{count_parameters, CropMode, Model, ModelConfig};
use refsr_core::numerics::{spectral_normalize, top_singular_value, Binder, Scalar, Tape, Tensor};

fn pair(seed: u64) -> ImagePair {
    synthetic_pairs(1, ModelConfig::desk().lr_input_size, seed).unwrap().remove(0)
}

/// Desk model with a random head, so the network body reaches the output.
fn model(mode: &str, seed: u64) -> Model<f32> {
    let cfg = ModelConfig {
        ablation: mode.into(),
        ..ModelConfig::desk()
    };
    let mut m = Model::new(cfg, seed).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let id = m.head.weight;
    let shape = m.store.get(id).value.shape().to_vec();
    m.store.get_mut(id).value = Tensor::from_fn(shape, |_| f32::lit(r.gen_range(-0.2..0.2)));
    m
}

fn max_abs_diff(a: &Image, b: &Image) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn output_is_four_times_the_input() {
    let m = model("full", 1);
    let p = pair(1);
    let out = m.predict(&p.lr, &p.reference).unwrap();
    assert_eq!((out.width, out.height, out.channels), (64, 64, 3));
    assert!(out.data.iter().all(|v| v.is_finite()));
}

#[test]
fn zero_head_reproduces_the_bicubic_skip() {
    let m = Model::<f32>::new(ModelConfig::desk(), 2).unwrap();
    let p = pair(2);
    let out = m.predict(&p.lr, &p.reference).unwrap();
    let bic = refsr_core::data::bicubic_resize(&p.lr, 64, 64).unwrap();
    assert!(max_abs_diff(&out, &bic) < 1e-6);
}

#[test]
fn same_seed_same_prediction() {
    let p = pair(3);
    let a = model("full", 4).predict(&p.lr, &p.reference).unwrap();
    let b = model("full", 4).predict(&p.lr, &p.reference).unwrap();
    assert_eq!(a, b);
    let c = model("full", 5).predict(&p.lr, &p.reference).unwrap();
    assert_ne!(a, c);
}

#[test]
fn spectral_weights_have_unit_top_singular_value() {
    let m = Model::<f64>::new(ModelConfig::desk(), 6).unwrap();
    let mut checked = 0;
    for p in m.store.iter().filter(|p| p.spectral.is_some()) {
        let mut p = p.clone();
        let w = spectral_normalize(&mut p, 5).unwrap().weight;
        let (rows, cols) = p.matrix_dims();
        let sigma = top_singular_value(&w.reshape([rows, cols]).unwrap(), 1000);
        assert!(sigma <= 1.0 + 1e-3, "{}: sigma {sigma}", p.name);
        assert!(sigma > 0.9, "{}: sigma {sigma}", p.name);
        checked += 1;
    }
    assert!(checked > 0);
}

#[test]
fn reference_reaches_the_output_in_every_mode() {
    let p = pair(7);
    let other = synthetic_texture(64, 64, 999);
    for mode in ["full", "frozen-gate", "self-only", "cross-only"] {
        let m = model(mode, 8);
        let a = m.predict(&p.lr, &p.reference).unwrap();
        let b = m.predict(&p.lr, &other).unwrap();
        assert!(max_abs_diff(&a, &b) > 1e-6, "{mode}: reference has no effect");
    }
}

#[test]
fn reference_embeddings_receive_gradients() {
    let m = model("full", 9);
    let p = pair(9);
    let crops: Vec<Image> = m
        .reference_crops(&p.reference, CropMode::Centre)
        .unwrap()
        .into_iter()
        .map(|c| c.0)
        .collect();
    let mut tape = Tape::new();
    let mut b = Binder::new(&m.store);
    let out = m.forward(&mut tape, &mut b, &p.lr, &crops, None).unwrap();
    let target = tape.constant(p.hr.to_tokens::<f32>());
    let loss = tape.l1_mean(out, target).unwrap();
    let grads = tape.backward(loss);
    for s in 0..3 {
        let id = m.store.id(&format!("stage{s}.embed.weight")).unwrap();
        let g = grads.params().find(|(i, _)| *i == id).map(|(_, g)| g.max_abs().as_f64());
        assert!(g.unwrap_or(0.0) > 0.0, "stage {s} embedding gets no gradient");
    }
}

#[test]
fn output_depends_on_distant_input_pixels() {
    let m = model("full", 10);
    let p = pair(10);
    let mut lr = p.lr.clone();
    for c in 0..3 {
        lr.set(0, 0, c, 1.0 - lr.at(0, 0, c));
    }
    let a = m.predict(&p.lr, &p.reference).unwrap();
    let b = m.predict(&lr, &p.reference).unwrap();
    let (x, y) = (40, 40);
    let moved = (0..3).any(|c| (a.at(x, y, c) - b.at(x, y, c)).abs() > 1e-7);
    assert!(moved, "output pixel ({x}, {y}) ignores LR pixel (0, 0)");
}

#[test]
fn parameter_report_is_additive() {
    for cfg in [ModelConfig::desk(), ModelConfig::paper()] {
        let report = count_parameters(&cfg).unwrap();
        let sum: usize = report.groups.iter().map(|(_, n)| n).sum();
        assert_eq!(sum, report.total);
    }
    let m = Model::<f32>::new(ModelConfig::desk(), 0).unwrap();
    let trainable: usize = m.store.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum();
    assert_eq!(m.parameter_report().total, trainable);
}

#[test]
fn f64_model_matches_f32_model() {
    let m32 = model("full", 11);
    let m64: Model<f64> = m32.cast().unwrap();
    let p = pair(11);
    let a = m32.predict(&p.lr, &p.reference).unwrap();
    let b = m64.predict(&p.lr, &p.reference).unwrap();
    assert!(max_abs_diff(&a, &b) < 1e-3);
}
