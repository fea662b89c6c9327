use std::collections::BTreeMap;

use hyperinvert_autograd::gradcheck::{central_difference, relative_error};
use hyperinvert_autograd::Graph;
use hyperinvert_core::generator::*;
use hyperinvert_core::genspec::{toy_spec, LayerKind};
use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use proptest::prelude::*;

fn toy(seed: u64) -> GeneratorWeights {
    GeneratorWeights::random(&toy_spec(16, 8).unwrap(), seed).unwrap()
}

fn mapping_oracle(g: &GeneratorWeights, z: &[f32]) -> Vec<f64> {
    let mut x: Array1<f64> = z.iter().map(|&v| v as f64).collect();
    let ms = x.mapv(|v| v * v).mean().unwrap();
    x /= (ms + 1e-8).sqrt();
    for i in 0..MAPPING_LAYERS {
        let w = g.store().by_name(&format!("mapping.fc{i}.weight")).unwrap();
        let b = g.store().by_name(&format!("mapping.fc{i}.bias")).unwrap();
        let w: Array2<f64> = w.mapv(|v| v as f64).into_dimensionality().unwrap();
        let y = x.dot(&w) + b.mapv(|v| v as f64).into_dimensionality::<ndarray::Ix1>().unwrap();
        x = y.mapv(|v| if v > 0.0 { v } else { 0.2 * v } * 2f64.sqrt());
    }
    x.to_vec()
}

#[test]
fn mapping_matches_row_oracle() {
    let g = toy(1);
    let z = sample_latents(5, 8, 2).unwrap();
    let w = g.map_latent(&z).unwrap();
    assert_eq!(w.space, LatentSpace::W);
    for i in 0..5 {
        let row: Vec<f32> = z.values.row(i).to_vec();
        let expect = mapping_oracle(&g, &row);
        for (a, b) in w.values.row(i).iter().zip(&expect) {
            assert!((*a as f64 - b).abs() < 1e-4 * (1.0 + b.abs()), "{a} vs {b}");
        }
        let single = g.map_latent(&z.row(i)).unwrap();
        for (a, b) in single.values.row(0).iter().zip(w.values.row(i)) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn synthesis_is_deterministic_and_bounded() {
    let a = toy(4);
    let b = toy(4);
    let w = a.map_latent(&sample_latents(3, 8, 9).unwrap()).unwrap();
    let ya = a.synthesize(&w).unwrap();
    assert_eq!(ya, b.synthesize(&w).unwrap());
    assert_eq!(ya.shape(), &[3, 16, 16, 3]);
    assert!(ya.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    assert_ne!(ya, toy(5).synthesize(&w).unwrap());
}

#[test]
fn batch_rows_are_independent() {
    let g = toy(2);
    let w = g.map_latent(&sample_latents(3, 8, 1).unwrap()).unwrap();
    let all = g.synthesize(&w).unwrap();
    for i in 0..3 {
        let one = g.synthesize(&w.row(i)).unwrap();
        let diff = (&one.index_axis(Axis(0), 0) - &all.index_axis(Axis(0), i)).mapv(f32::abs);
        assert!(diff.iter().all(|&d| d < 1e-5));
    }
}

#[test]
fn every_layer_influences_the_output() {
    let g = toy(7);
    let w = g.map_latent(&sample_latents(2, 8, 3).unwrap()).unwrap();
    let base = g.synthesize(&w).unwrap();
    for l in &g.spec().layers {
        let zero = ArrayD::zeros(IxDyn(&l.weight_shape()));
        let out = g.synthesize_with(&w, &BTreeMap::from([(l.index, zero)])).unwrap();
        let diff = (&out - &base).mapv(f32::abs).fold(0.0f32, |a, &b| a.max(b));
        assert!(diff > 1e-4, "layer {} ({:?}) has no effect", l.index, l.kind);
    }
}

#[test]
fn kernel_gradient_matches_finite_difference() {
    let g32 = GeneratorWeights::random(&toy_spec(8, 4).unwrap(), 11).unwrap();
    let g: GeneratorWeights<f64> = g32.cast();
    let w = g32.map_latent(&sample_latents(2, 4, 6).unwrap()).unwrap().to_array::<f64>();
    let weights = ArrayD::from_shape_fn(IxDyn(&[2, 8, 8, 3]), |d| ((d[1] * 7 + d[2] * 3 + d[3]) % 5) as f64 - 2.0);
    for l in g.spec().layers.iter().filter(|l| l.kind == LayerKind::Conv) {
        let theta = g.layer_weight(l.index).unwrap().clone();
        let f = |k: &ArrayD<f64>| {
            let graph = Graph::new();
            let p = g.store().bind_frozen(&graph);
            let y = g.synthesize_graph(&p, graph.constant(w.clone()), &BTreeMap::from([(l.index, graph.constant(k.clone()))]));
            y.mul(graph.constant(weights.clone())).sum().item()
        };
        let graph = Graph::new();
        let p = g.store().bind_frozen(&graph);
        let k = graph.leaf(theta.clone());
        let y = g.synthesize_graph(&p, graph.constant(w.clone()), &BTreeMap::from([(l.index, k)]));
        let grads = graph.backward(y.mul(graph.constant(weights.clone())).sum());
        let analytic = grads.get(k).unwrap().clone();
        let numeric = central_difference(f, &theta, 1e-5);
        let err = relative_error(&analytic, &numeric, 1e-3);
        assert!(err < 1e-4, "layer {}: relative error {err}", l.index);
    }
}

#[test]
fn latents_are_standard_normal() {
    let z = sample_latents(4000, 8, 42).unwrap();
    assert_eq!(z.space, LatentSpace::Z);
    let n = z.values.len() as f64;
    let mean = z.values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = z.values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 0.1, "{mean}");
    assert!((var - 1.0).abs() < 0.1, "{var}");
    assert_eq!(z.values, sample_latents(4000, 8, 42).unwrap().values);
}

#[test]
fn non_finite_latent_is_rejected() {
    let v = Array2::from_elem((1, 4), f32::NAN);
    assert!(LatentCode::new(v, LatentSpace::W).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let g = toy(3);
    let dir = tempfile::tempdir().unwrap();
    g.save(dir.path()).unwrap();
    let back = GeneratorWeights::load(dir.path()).unwrap();
    assert_eq!(back.spec(), g.spec());
    assert!(back.store().identical(g.store()));
    let w = g.map_latent(&sample_latents(2, 8, 0).unwrap()).unwrap();
    assert_eq!(back.synthesize(&w).unwrap(), g.synthesize(&w).unwrap());
}

#[test]
fn set_layer_weight_checks_shape() {
    let mut g = toy(0);
    assert!(g.set_layer_weight(1, ArrayD::zeros(IxDyn(&[3, 3, 8, 7]))).is_err());
    assert!(g.set_layer_weight(99, ArrayD::zeros(IxDyn(&[1]))).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn same_inputs_same_image(seed in 0u64..1000, zseed in 0u64..1000) {
        let g = GeneratorWeights::random(&toy_spec(8, 4).unwrap(), seed).unwrap();
        let w = g.map_latent(&sample_latents(2, 4, zseed).unwrap()).unwrap();
        let a = g.synthesize(&w).unwrap();
        prop_assert_eq!(&a, &g.synthesize(&w).unwrap());
        prop_assert!(a.iter().all(|v| v.abs() <= 1.0));
    }
}
