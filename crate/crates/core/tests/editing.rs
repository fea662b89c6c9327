use hyperinvert_core::editing::*;
use hyperinvert_core::encoder::{Encoder, EncoderConfig};
use hyperinvert_core::generator::{sample_latents, GeneratorWeights};
use hyperinvert_core::genspec::{toy_spec, HyperNetConfig};
use hyperinvert_core::hypernet::HyperNetwork;
use hyperinvert_core::inversion::{invert, InversionResult};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn inverted(seed: u64) -> (GeneratorWeights, InversionResult) {
    let spec = toy_spec(16, 8).unwrap();
    let g = GeneratorWeights::random(&spec, 0).unwrap();
    let e = Encoder::new(&EncoderConfig::toy(8, 16, 2), &g, 100, 1).unwrap();
    let mut h = HyperNetwork::new(&spec, &HyperNetConfig::toy(&spec, 16, 4), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = h.store().iter().map(|(n, _)| n.to_string()).filter(|n| n.contains(".fc.") || n.starts_with("shared.fc2")).collect();
    for n in names {
        let id = h.store().id_of(&n).unwrap();
        h.store_mut().get_mut(id).mapv_inplace(|_| rng.random_range(-0.05..0.05));
    }
    let x = g.synthesize(&g.map_latent(&sample_latents(2, 8, seed).unwrap()).unwrap()).unwrap();
    let r = invert(&x, &g, &e, &h, 2).unwrap();
    (g, r)
}

fn direction(seed: u64) -> EditDirection {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EditDirection::new("random", (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn zero_strength_is_the_reconstruction() {
    let (g, r) = inverted(1);
    assert_eq!(apply_edit(&r, &direction(0), 0.0, &g).unwrap(), r.reconstruction);
}

#[test]
fn opposite_strengths_differ() {
    let (g, r) = inverted(2);
    let d = direction(1);
    let plus = apply_edit(&r, &d, 2.0, &g).unwrap();
    let minus = apply_edit(&r, &d, -2.0, &g).unwrap();
    assert_ne!(plus, minus);
    assert_ne!(plus, r.reconstruction);
}

#[test]
fn zero_offsets_edit_like_the_plain_generator() {
    let (g, mut r) = inverted(3);
    r.offsets = hyperinvert_core::modulation::AccumulatedOffsets::zeros_like(r.offsets.sums());
    let d = direction(4);
    let edited = apply_edit(&r, &d, 1.5, &g).unwrap();
    let plain = g.synthesize(&edited_latent(&r.w_init, &d, 1.5).unwrap()).unwrap();
    assert_eq!(edited, plain);
}

#[test]
fn edited_latent_is_a_straight_step() {
    let (_, r) = inverted(5);
    let d = direction(6);
    let w = edited_latent(&r.w_init, &d, 0.75).unwrap();
    for i in 0..2 {
        for j in 0..8 {
            let expect = r.w_init.values[[i, j]] + 0.75 * d.vector[j];
            assert!((w.values[[i, j]] - expect).abs() < 1e-6);
        }
    }
}

#[test]
fn dimension_mismatch_is_an_error() {
    let (g, r) = inverted(6);
    let bad = EditDirection::new("bad", vec![1.0; 5]).unwrap();
    assert!(apply_edit(&r, &bad, 1.0, &g).is_err());
    assert!(EditDirection::new("zero", vec![0.0; 8]).is_err());
}

#[test]
fn directions_round_trip_through_json() {
    let dirs = vec![direction(1), direction(2)];
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("dirs.json");
    EditDirection::save_all(&dirs, &path).unwrap();
    let back = EditDirection::load_all(&path).unwrap();
    for (a, b) in back.iter().zip(&dirs) {
        assert_eq!(a.name, b.name);
        for (x, y) in a.vector.iter().zip(&b.vector) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn pca_matches_covariance_eigendecomposition() {
    let g = GeneratorWeights::random(&toy_spec(16, 8).unwrap(), 7).unwrap();
    let (n, k) = (400, 4);
    let pca = discover_directions_pca(&g, n, k, 11).unwrap();
    let w = g.map_latent(&sample_latents(n, 8, 11).unwrap()).unwrap();
    let data = DMatrix::from_fn(n, 8, |i, j| w.values[[i, j]] as f64);
    let mean = data.row_mean();
    let mut centred = data.clone();
    for mut row in centred.row_iter_mut() {
        row -= &mean;
    }
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..8).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    for (c, &idx) in order.iter().take(k).enumerate() {
        let value = eig.eigenvalues[idx];
        assert!((pca.explained_variance[c] - value).abs() < 1e-6 * value.max(1.0), "{c}");
        let v = eig.eigenvectors.column(idx);
        let dot: f64 = pca.directions[c].vector.iter().zip(v.iter()).map(|(&a, &b)| a as f64 * b).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-4, "component {c}: |cos| = {}", dot.abs());
    }
}

#[test]
fn pca_rejects_bad_sizes() {
    let g = GeneratorWeights::random(&toy_spec(8, 4).unwrap(), 0).unwrap();
    assert!(discover_directions_pca(&g, 100, 0, 0).is_err());
    assert!(discover_directions_pca(&g, 100, 5, 0).is_err());
    assert!(discover_directions_pca(&g, 1, 1, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn pca_directions_are_orthonormal_and_sorted(seed in 0u64..1000, k in 1usize..5) {
        let g = GeneratorWeights::random(&toy_spec(8, 4).unwrap(), seed).unwrap();
        let pca = discover_directions_pca(&g, 64, k, seed).unwrap();
        prop_assert_eq!(pca.directions.len(), k);
        for a in 0..k {
            for b in 0..k {
                let dot: f64 = pca.directions[a].vector.iter().zip(&pca.directions[b].vector).map(|(&x, &y)| x as f64 * y as f64).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                prop_assert!((dot - expect).abs() < 1e-5, "{a}.{b} = {dot}");
            }
        }
        for pair in pca.explained_variance.windows(2) {
            prop_assert!(pair[0] >= pair[1]);
        }
    }

    #[test]
    fn edit_directions_are_unit_norm(v in proptest::collection::vec(-10.0f32..10.0, 1..32)) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
        let d = EditDirection::new("p", v).unwrap();
        let norm: f64 = d.vector.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-6);
    }
}
