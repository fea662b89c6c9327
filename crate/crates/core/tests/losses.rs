use std::collections::BTreeMap;

use hyperinvert_autograd::gradcheck::{central_difference, relative_error};
use hyperinvert_autograd::Graph;
use hyperinvert_core::generator::{sample_latents, GeneratorWeights};
use hyperinvert_core::genspec::toy_spec;
use hyperinvert_core::losses::*;
use hyperinvert_core::modulation::{modulate_kernel, modulate_var};
use ndarray::{ArrayD, IxDyn};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(n: usize, r: usize, seed: u64) -> ArrayD<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(&[n, r, r, 3]), |_| rng.random_range(-1.0..1.0))
}

fn l2_oracle(x: &ArrayD<f32>, y: &ArrayD<f32>) -> (f64, Vec<f64>) {
    let s = x.shape();
    let mut per = vec![0.0; s[0]];
    for n in 0..s[0] {
        for i in 0..s[1] {
            for j in 0..s[2] {
                for c in 0..s[3] {
                    let d = x[[n, i, j, c]] as f64 - y[[n, i, j, c]] as f64;
                    per[n] += d * d;
                }
            }
        }
    }
    let each = (s[1] * s[2] * s[3]) as f64;
    let total = per.iter().sum::<f64>() / (each * s[0] as f64);
    (total, per.into_iter().map(|v| v / each).collect())
}

#[test]
fn pixel_l2_matches_loop_oracle() {
    let losses = Losses::<f32>::new(&LossConfig::default()).unwrap();
    for seed in 0..20 {
        let x = image(3, 8, seed);
        let y = image(3, 8, seed + 100);
        let (total, per) = l2_oracle(&x, &y);
        assert!((losses.l2_loss(&x, &y).unwrap() - total).abs() < 1e-9);
        for (a, b) in per_image_l2(&x, &y).unwrap().iter().zip(&per) {
            assert!((a - b).abs() < 1e-9);
        }
        let graph = Graph::new();
        let on_tape = losses.l2_graph(graph.constant(x.clone()), graph.constant(y.clone())).item() as f64;
        assert!((on_tape - total).abs() < 1e-5 * total.max(1.0));
    }
}

#[test]
fn one_pixel_difference_is_seen_by_every_term() {
    let losses = Losses::<f32>::new(&LossConfig::default()).unwrap();
    let x = image(1, 16, 3);
    let mut y = x.clone();
    y[[0, 5, 7, 1]] += 0.5;
    let r = losses.total_loss(&x, &y).unwrap();
    assert!(r.l2 > 0.0 && r.perceptual > 0.0 && r.similarity > 0.0 && r.total > 0.0, "{r:?}");
    let same = losses.total_loss(&x, &x).unwrap();
    assert_eq!(same, LossReport::default());
}

#[test]
fn total_is_the_weighted_sum() {
    let cfg = LossConfig {
        lambda_lpips: 0.3,
        lambda_sim: 0.7,
        ..LossConfig::default()
    };
    let losses = Losses::<f32>::new(&cfg).unwrap();
    let (x, y) = (image(2, 16, 1), image(2, 16, 2));
    let r = losses.total_loss(&x, &y).unwrap();
    let expect = r.l2 + 0.3 * r.perceptual + 0.7 * r.similarity;
    assert!((r.total - expect).abs() < 1e-5 * expect);
}

#[test]
fn zero_weights_reduce_to_pixel_l2() {
    let cfg = LossConfig {
        lambda_lpips: 0.0,
        lambda_sim: 0.0,
        ..LossConfig::default()
    };
    let losses = Losses::<f32>::new(&cfg).unwrap();
    let (x, y) = (image(2, 8, 4), image(2, 8, 5));
    let r = losses.total_loss(&x, &y).unwrap();
    assert!((r.total - l2_oracle(&x, &y).0).abs() < 1e-5);
    let off = Losses::<f32>::new(&LossConfig {
        sim_mode: SimMode::Off,
        ..LossConfig::default()
    })
    .unwrap();
    assert_eq!(off.similarity_loss(&x, &y).unwrap(), 0.0);
}

#[test]
fn presets_and_validation() {
    assert_eq!((LossConfig::facial().lambda_lpips, LossConfig::facial().lambda_sim), (0.8, 0.1));
    assert_eq!(LossConfig::non_facial().lambda_sim, 0.5);
    let bad = LossConfig {
        lambda_sim: -1.0,
        ..LossConfig::default()
    };
    assert!(bad.validate().is_err());
    assert!(Losses::<f32>::new(&bad).is_err());
}

#[test]
fn config_round_trips_through_json() {
    let cfg = LossConfig {
        lambda_lpips: 0.25,
        sim_mode: SimMode::Off,
        step_reduction: StepReduction::Sum,
        ..LossConfig::default()
    };
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<LossConfig>(&text).unwrap(), cfg);
    let partial: LossConfig = serde_json::from_str(r#"{"lambda_sim": 0.5}"#).unwrap();
    assert_eq!(partial, LossConfig::non_facial());
}

#[test]
fn mismatched_shapes_are_rejected() {
    let losses = Losses::<f32>::new(&LossConfig::default()).unwrap();
    assert!(losses.total_loss(&image(1, 8, 0), &image(1, 16, 0)).is_err());
    assert!(per_image_l2(&image(2, 8, 0), &image(1, 8, 0)).is_err());
}

#[test]
fn gradient_through_modulation_matches_finite_difference() {
    let spec = toy_spec(8, 4).unwrap();
    let g: GeneratorWeights<f64> = GeneratorWeights::<f32>::random(&spec, 2).unwrap().cast();
    let losses = Losses::<f64>::new(&LossConfig::default()).unwrap();
    let w = g.cast::<f32>().map_latent(&sample_latents(2, 4, 1).unwrap()).unwrap().to_array::<f64>();
    let x = image(2, 8, 9).mapv(|v| v as f64 * 0.5);
    let layer = 3;
    let theta = g.layer_weight(layer).unwrap().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let delta = ArrayD::from_shape_fn(IxDyn(&[1, 1, 4, 2]), |_| rng.random_range(-0.2..0.2));
    let f = |d: &ArrayD<f64>| {
        let k = modulate_kernel(&theta, d);
        let graph = Graph::new();
        let p = g.store().bind_frozen(&graph);
        let pl = losses.bind(&graph);
        let y = g.synthesize_graph(&p, graph.constant(w.clone()), &BTreeMap::from([(layer, graph.constant(k))]));
        losses.total_graph(&pl, graph.constant(x.clone()), y).total.item()
    };
    let graph = Graph::new();
    let p = g.store().bind_frozen(&graph);
    let pl = losses.bind(&graph);
    let dv = graph.leaf(delta.clone());
    let k = modulate_var(graph.constant(theta.clone()), dv);
    let y = g.synthesize_graph(&p, graph.constant(w.clone()), &BTreeMap::from([(layer, k)]));
    let total = losses.total_graph(&pl, graph.constant(x.clone()), y).total;
    let grads = graph.backward(total);
    let analytic = grads.get(dv).unwrap().clone();
    let numeric = central_difference(f, &delta, 1e-5);
    let err = relative_error(&analytic, &numeric, 1e-6);
    assert!(err < 1e-3, "relative error {err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn losses_are_symmetric_and_bounded(a in 0u64..1000, b in 0u64..1000) {
        let losses = Losses::<f32>::new(&LossConfig::default()).unwrap();
        let (x, y) = (image(2, 8, a), image(2, 8, b + 1000));
        let xy = losses.total_loss(&x, &y).unwrap();
        let yx = losses.total_loss(&y, &x).unwrap();
        prop_assert!((xy.total - yx.total).abs() < 1e-5 * xy.total.max(1.0));
        prop_assert!(xy.l2 >= 0.0 && xy.perceptual >= 0.0);
        prop_assert!((0.0..=2.0).contains(&xy.similarity));
        prop_assert!(xy.total >= 0.0);
    }

    #[test]
    fn identical_images_cost_nothing(a in 0u64..1000) {
        let losses = Losses::<f32>::new(&LossConfig::non_facial()).unwrap();
        let x = image(1, 8, a);
        prop_assert_eq!(losses.total_loss(&x, &x).unwrap().total, 0.0);
    }
}
