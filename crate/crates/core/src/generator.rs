//! Toy style-based generator: mapping MLP plus a modulated-convolution
//! synthesis network laid out by a [`GeneratorSpec`].

use std::collections::BTreeMap;
use std::path::Path;

use hyperinvert_autograd::nn::Linear;
use hyperinvert_autograd::params::{full, normal, zeros};
use hyperinvert_autograd::{Bound, Graph, ParamId, ParamStore, Real, Var};
use ndarray::{Array2, ArrayD, Axis, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genspec::{GeneratorSpec, LayerKind};

/// Depth of the mapping network.
pub const MAPPING_LAYERS: usize = 4;

const LRELU_SLOPE: f64 = 0.2;
const DEMOD_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentSpace {
    Z,
    W,
}

/// A batch of latent codes, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub values: Array2<f32>,
    pub space: LatentSpace,
}

impl LatentCode {
    pub fn new(values: Array2<f32>, space: LatentSpace) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("latent code has non-finite entries".into()));
        }
        Ok(Self { values, space })
    }

    pub fn batch(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Row `i` as a batch of one.
    pub fn row(&self, i: usize) -> LatentCode {
        LatentCode {
            values: self.values.slice(ndarray::s![i..i + 1, ..]).to_owned(),
            space: self.space,
        }
    }

    pub fn to_array<F: Real>(&self) -> ArrayD<F> {
        self.values.mapv(|v| F::from_f64(v as f64)).into_dyn()
    }

    pub fn from_array<F: Real>(values: &ArrayD<F>, space: LatentSpace) -> Result<Self> {
        let values = values
            .mapv(|v| Real::to_f64(v) as f32)
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::Shape(format!("latent must be [N, D], got {:?}", values.shape())))?;
        Self::new(values, space)
    }
}

/// `n` standard-normal latents in Z, reproducible per seed.
pub fn sample_latents(n: usize, dim: usize, seed: u64) -> Result<LatentCode> {
    if n == 0 || dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {n} latents of dimension {dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = Array2::from_shape_fn((n, dim), |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z as f32
    });
    LatentCode::new(values, LatentSpace::Z)
}

/// Images are `[N, H, W, 3]` in `[-1, 1]`.
pub type ImageBatch<F = f32> = ArrayD<F>;

#[derive(Clone, Debug)]
struct LayerParams {
    weight: ParamId,
    bias: ParamId,
    style: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    mapping: Vec<Linear>,
    constant: ParamId,
    layers: BTreeMap<usize, LayerParams>,
}

/// Parameters of a generator conforming to a spec. Conv and toRGB kernels
/// are `[k, k, C_in, C_out]`.
#[derive(Clone, Debug)]
pub struct GeneratorWeights<F: Real = f32> {
    spec: GeneratorSpec,
    store: ParamStore<F>,
    layout: Layout,
}

fn build_layout<F: Real>(
    spec: &GeneratorSpec,
    store: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
) -> Result<Layout> {
    let blocks = spec.synthesis_blocks()?;
    let d = spec.latent_dim;
    let mapping = (0..MAPPING_LAYERS)
        .map(|i| Linear::new(store, &format!("mapping.fc{i}"), d, d, true, 2f64.sqrt(), rng))
        .collect();
    let c0 = spec.layer(blocks[0].convs[0]).expect("validated").c_in;
    let constant = store.add("synthesis.const", normal(&[1, 4, 4, c0], 1.0, rng));
    let mut layers = BTreeMap::new();
    for l in &spec.layers {
        let std = match l.kind {
            LayerKind::Conv => 1.0,
            LayerKind::ToRgb => 1.0 / (l.c_in as f64).sqrt(),
        };
        let weight = store.add(format!("layer{}.weight", l.index), normal(&l.weight_shape(), std, rng));
        let bias = store.add(format!("layer{}.bias", l.index), zeros(&[l.c_out]));
        let style = Linear::new(store, &format!("layer{}.style", l.index), d, l.c_in, true, 1.0, rng);
        store
            .set(&format!("layer{}.style.bias", l.index), full(&[l.c_in], 1.0))
            .expect("shape matches");
        layers.insert(l.index, LayerParams { weight, bias, style });
    }
    Ok(Layout {
        mapping,
        constant,
        layers,
    })
}

impl GeneratorWeights<f32> {
    /// Fixed random initialisation; stands in for a pretrained generator.
    pub fn random(spec: &GeneratorSpec, seed: u64) -> Result<Self> {
        Self::init(spec, seed)
    }

    /// Reads a checkpoint written by [`GeneratorWeights::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let spec = GeneratorSpec::load(&dir.join("spec.json"))?;
        let mut g = Self::init(&spec, 0)?;
        hyperinvert_autograd::io::load_into_store(dir, &mut g.store)?;
        g.check_finite()?;
        Ok(g)
    }
}

impl<F: Real> GeneratorWeights<F> {
    pub fn init(spec: &GeneratorSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layout = build_layout(spec, &mut store, &mut rng)?;
        Ok(Self {
            spec: spec.clone(),
            store,
            layout,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn cast<G: Real>(&self) -> GeneratorWeights<G> {
        GeneratorWeights {
            spec: self.spec.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn layer_weight_id(&self, index: usize) -> Result<ParamId> {
        self.layout
            .layers
            .get(&index)
            .map(|l| l.weight)
            .ok_or_else(|| Error::Spec(format!("generator has no layer {index}")))
    }

    pub fn layer_weight(&self, index: usize) -> Result<&ArrayD<F>> {
        Ok(self.store.get(self.layer_weight_id(index)?))
    }

    pub fn set_layer_weight(&mut self, index: usize, value: ArrayD<F>) -> Result<()> {
        let id = self.layer_weight_id(index)?;
        if self.store.get(id).shape() != value.shape() {
            return Err(Error::Shape(format!(
                "layer {index}: expected {:?}, got {:?}",
                self.store.get(id).shape(),
                value.shape()
            )));
        }
        *self.store.get_mut(id) = value;
        Ok(())
    }

    /// Ids of every synthesis parameter (everything but the mapping network).
    pub fn synthesis_param_ids(&self) -> Vec<ParamId> {
        let mapping: Vec<ParamId> = self
            .layout
            .mapping
            .iter()
            .flat_map(|l| [Some(l.weight), l.bias])
            .flatten()
            .collect();
        self.store.ids().filter(|id| !mapping.contains(id)).collect()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in self.store.iter() {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument(format!("parameter {name} is not finite")));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        hyperinvert_autograd::io::save_store(dir, &self.store)?;
        self.spec.save(&dir.join("spec.json"))
    }

    /// Mapping network on the tape: `z [N, D] -> w [N, D]`.
    pub fn map_graph<'g>(&self, p: &Bound<'g, F>, z: Var<'g, F>) -> Var<'g, F> {
        let gain = F::from_f64(2f64.sqrt());
        let mut x = pixel_norm(z);
        for fc in &self.layout.mapping {
            x = fc.forward(p, x).leaky_relu(F::from_f64(LRELU_SLOPE)).scale(gain);
        }
        x
    }

    /// Synthesis on the tape. `kernels` optionally replaces layer kernels,
    /// either shared `[k, k, C_in, C_out]` or per-sample `[N, k, k, C_in, C_out]`.
    pub fn synthesize_graph<'g>(
        &self,
        p: &Bound<'g, F>,
        w: Var<'g, F>,
        kernels: &BTreeMap<usize, Var<'g, F>>,
    ) -> Var<'g, F> {
        let blocks = self.spec.synthesis_blocks().expect("spec validated at construction");
        let kernel = |idx: usize| kernels.get(&idx).copied().unwrap_or_else(|| p.var(self.layout.layers[&idx].weight));
        let gain = F::from_f64(2f64.sqrt());
        let mut x = p.var(self.layout.constant);
        let mut rgb: Option<Var<'g, F>> = None;
        for (b, block) in blocks.iter().enumerate() {
            for (j, &idx) in block.convs.iter().enumerate() {
                let lp = &self.layout.layers[&idx];
                let s = lp.style.forward(p, w);
                let up = b > 0 && j == 0;
                x = modulated_conv(x, kernel(idx), s, true, up)
                    .add(p.var(lp.bias))
                    .leaky_relu(F::from_f64(LRELU_SLOPE))
                    .scale(gain);
            }
            let lp = &self.layout.layers[&block.to_rgb];
            let s = lp.style.forward(p, w);
            let y = modulated_conv(x, kernel(block.to_rgb), s, false, false).add(p.var(lp.bias));
            rgb = Some(match rgb {
                Some(prev) => prev.upsample2x().add(y),
                None => y,
            });
        }
        rgb.expect("at least one block").tanh()
    }

    fn validate_latent(&self, code: &LatentCode, space: LatentSpace) -> Result<()> {
        if code.space != space {
            return Err(Error::InvalidArgument(format!(
                "expected a latent in {space:?}, got {:?}",
                code.space
            )));
        }
        if code.dim() != self.spec.latent_dim {
            return Err(Error::Shape(format!(
                "latent dimension {} does not match the spec's {}",
                code.dim(),
                self.spec.latent_dim
            )));
        }
        Ok(())
    }

    /// `z -> w`, row by row.
    pub fn map_latent(&self, z: &LatentCode) -> Result<LatentCode> {
        self.validate_latent(z, LatentSpace::Z)?;
        let graph = Graph::new();
        let p = self.store.bind_frozen(&graph);
        let w = self.map_graph(&p, graph.constant(z.to_array()));
        LatentCode::from_array(&w.value(), LatentSpace::W)
    }

    pub fn synthesize(&self, w: &LatentCode) -> Result<ImageBatch<F>> {
        self.synthesize_with(w, &BTreeMap::new())
    }

    /// Synthesis with some layer kernels replaced (see [`Self::synthesize_graph`]).
    pub fn synthesize_with(&self, w: &LatentCode, kernels: &BTreeMap<usize, ArrayD<F>>) -> Result<ImageBatch<F>> {
        self.validate_latent(w, LatentSpace::W)?;
        for (&idx, k) in kernels {
            let base = self.layer_weight(idx)?;
            let ok = k.shape() == base.shape() || (k.ndim() == 5 && k.shape()[0] == w.batch() && &k.shape()[1..] == base.shape());
            if !ok {
                return Err(Error::Shape(format!(
                    "kernel for layer {idx} has shape {:?}, expected {:?} optionally batched by {}",
                    k.shape(),
                    base.shape(),
                    w.batch()
                )));
            }
        }
        let graph = Graph::new();
        let p = self.store.bind_frozen(&graph);
        let vars = kernels.iter().map(|(&i, k)| (i, graph.constant(k.clone()))).collect();
        let img = self.synthesize_graph(&p, graph.constant(w.to_array()), &vars);
        Ok((*img.value()).clone())
    }

    /// Mean of `n` mapped latents, `[D]`.
    pub fn mean_latent(&self, n: usize, seed: u64) -> Result<ArrayD<F>> {
        let w = self.map_latent(&sample_latents(n, self.spec.latent_dim, seed)?)?;
        let n = F::from_f64(w.batch() as f64);
        Ok(w.to_array::<F>().sum_axis(Axis(0)).mapv(|v| v / n))
    }
}

/// `x / sqrt(mean(x^2) + eps)` over the last axis.
fn pixel_norm<'g, F: Real>(x: Var<'g, F>) -> Var<'g, F> {
    let last = x.shape().len() - 1;
    x.mul(x.square().mean_axes(&[last]).add_scalar(F::from_f64(DEMOD_EPS)).rsqrt())
}

/// Style-modulated convolution with optional demodulation. `kernel` may
/// be shared or per-sample; `s` is the per-sample input-channel style `[N, C_in]`.
fn modulated_conv<'g, F: Real>(
    x: Var<'g, F>,
    kernel: Var<'g, F>,
    s: Var<'g, F>,
    demodulate: bool,
    upsample: bool,
) -> Var<'g, F> {
    let ks = kernel.shape();
    let (n, c_in) = (s.shape()[0], s.shape()[1]);
    let (k, c_out) = (ks[ks.len() - 4], ks[ks.len() - 1]);
    let mut h = x.mul(s.reshape(&[n, 1, 1, c_in]));
    if upsample {
        h = h.upsample2x();
    }
    let y = h.conv2d(kernel, 1, k / 2);
    if !demodulate {
        return y;
    }
    let s2 = s.square();
    let energy = if ks.len() == 4 {
        let k2 = kernel.square().sum_axes(&[0, 1]).reshape(&[c_in, c_out]);
        s2.matmul(k2)
    } else {
        let k2 = kernel.square().sum_axes(&[1, 2]).reshape(&[n, c_in, c_out]);
        s2.reshape(&[n, 1, c_in]).matmul(k2).reshape(&[n, c_out])
    };
    let d = energy.add_scalar(F::from_f64(DEMOD_EPS)).rsqrt();
    y.mul(d.reshape(&[n, 1, 1, c_out]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genspec::toy_spec;

    fn toy() -> GeneratorWeights {
        GeneratorWeights::random(&toy_spec(8, 4).unwrap(), 3).unwrap()
    }

    #[test]
    fn output_shape_and_range() {
        let g = toy();
        let w = g.map_latent(&sample_latents(3, 4, 1).unwrap()).unwrap();
        let img = g.synthesize(&w).unwrap();
        assert_eq!(img.shape(), &[3, 8, 8, 3]);
        assert!(img.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn wrong_space_is_rejected() {
        let g = toy();
        let z = sample_latents(1, 4, 1).unwrap();
        assert!(g.synthesize(&z).is_err());
        let w = g.map_latent(&z).unwrap();
        assert_eq!(w.space, LatentSpace::W);
        assert!(g.map_latent(&w).is_err());
    }

    #[test]
    fn shared_and_per_sample_kernels_agree() {
        let g = toy();
        let w = g.map_latent(&sample_latents(2, 4, 5).unwrap()).unwrap();
        let base = g.synthesize(&w).unwrap();
        let k = g.layer_weight(3).unwrap().clone();
        let batched = ndarray::stack(Axis(0), &[k.view(), k.view()]).unwrap();
        let out = g.synthesize_with(&w, &BTreeMap::from([(3, batched)])).unwrap();
        let diff = base.iter().zip(out.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn bad_kernel_shape_is_rejected() {
        let g = toy();
        let w = g.map_latent(&sample_latents(2, 4, 5).unwrap()).unwrap();
        let bad = ArrayD::zeros(ndarray::IxDyn(&[3, 3, 1, 1]));
        assert!(matches!(g.synthesize_with(&w, &BTreeMap::from([(3, bad)])), Err(Error::Shape(_))));
    }

    #[test]
    fn sample_latents_rejects_zero() {
        assert!(sample_latents(0, 4, 0).is_err());
    }
}
