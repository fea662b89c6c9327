//! The hypernetwork: a residual backbone over the (target, reconstruction)
//! pair and one refinement head per refined generator layer.

use std::collections::BTreeMap;
use std::path::Path;

use hyperinvert_autograd::nn::{ChannelAffine, Conv2d, Linear};
use hyperinvert_autograd::{concat, Bound, Graph, ParamId, ParamStore, Real, Var};
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::genspec::{
    head_layout, select_refined_layers, shared_pair_layout, BackboneConfig, BackboneLayout, GeneratorSpec,
    HeadOutput, HeadVariant, HyperNetConfig,
};
use crate::modulation::{OffsetSet, OffsetShape};

const LRELU_SLOPE: f64 = 0.2;

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    aff1: ChannelAffine,
    conv2: Conv2d,
    aff2: ChannelAffine,
    shortcut: Option<(Conv2d, ChannelAffine)>,
}

/// ResNet-style backbone (basic blocks, per-channel affine in place of
/// batch norm, no pooling or classifier).
#[derive(Clone, Debug)]
pub struct Backbone {
    stem: Conv2d,
    stem_aff: ChannelAffine,
    blocks: Vec<ResBlock>,
    config: BackboneConfig,
}

impl Backbone {
    pub fn new<F: Real>(store: &mut ParamStore<F>, prefix: &str, config: &BackboneConfig, rng: &mut ChaCha8Rng) -> Self {
        let layout = BackboneLayout::new(config);
        let conv = |store: &mut ParamStore<F>, name: &str, d: &crate::genspec::ConvDesc, rng: &mut ChaCha8Rng| {
            Conv2d::new(store, name, d.k, d.c_in, d.c_out, d.stride, d.bias, rng)
        };
        let stem = conv(store, &format!("{prefix}.stem"), &layout.stem, rng);
        let stem_aff = ChannelAffine::new(store, &format!("{prefix}.stem.affine"), layout.stem.c_out);
        let blocks = layout
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let name = format!("{prefix}.block{i}");
                ResBlock {
                    conv1: conv(store, &format!("{name}.conv1"), &b.conv1, rng),
                    aff1: ChannelAffine::new(store, &format!("{name}.affine1"), b.conv1.c_out),
                    conv2: conv(store, &format!("{name}.conv2"), &b.conv2, rng),
                    aff2: ChannelAffine::new(store, &format!("{name}.affine2"), b.conv2.c_out),
                    shortcut: b.shortcut.as_ref().map(|s| {
                        (
                            conv(store, &format!("{name}.shortcut"), s, rng),
                            ChannelAffine::new(store, &format!("{name}.shortcut.affine"), s.c_out),
                        )
                    }),
                }
            })
            .collect();
        Self {
            stem,
            stem_aff,
            blocks,
            config: config.clone(),
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// `[N, H, W, C_in] -> [N, h, w, F]`.
    pub fn forward<'g, F: Real>(&self, p: &Bound<'g, F>, x: Var<'g, F>) -> Var<'g, F> {
        let mut h = self.stem_aff.forward(p, self.stem.forward(p, x)).relu();
        for b in &self.blocks {
            let r = b.aff1.forward(p, b.conv1.forward(p, h)).relu();
            let r = b.aff2.forward(p, b.conv2.forward(p, r));
            let skip = match &b.shortcut {
                Some((c, a)) => a.forward(p, c.forward(p, h)),
                None => h,
            };
            h = r.add(skip).relu();
        }
        h
    }
}

#[derive(Clone, Debug)]
struct Head {
    convs: Vec<Conv2d>,
    fc: Linear,
    output: HeadOutput,
    k: usize,
    c_in: usize,
    c_out: usize,
}

#[derive(Clone, Debug)]
struct SharedPair {
    fc1: Linear,
    fc2: Linear,
    channels: usize,
    dim: usize,
}

/// Hypernetwork parameters and structure for one (spec, config) pair.
#[derive(Clone, Debug)]
pub struct HyperNetwork<F: Real = f32> {
    spec: GeneratorSpec,
    config: HyperNetConfig,
    store: ParamStore<F>,
    backbone: Backbone,
    heads: BTreeMap<usize, Head>,
    shared: Option<SharedPair>,
}

impl HyperNetwork<f32> {
    pub fn load(dir: &Path) -> Result<Self> {
        let spec = GeneratorSpec::load(&dir.join("spec.json"))?;
        let path = dir.join("config.json");
        let text = std::fs::read_to_string(&path).map_err(Error::io(&path))?;
        let config: HyperNetConfig = serde_json::from_str(&text).map_err(Error::json(&path))?;
        let mut h = Self::new(&spec, &config, 0)?;
        hyperinvert_autograd::io::load_into_store(dir, &mut h.store)?;
        Ok(h)
    }
}

impl<F: Real> HyperNetwork<F> {
    /// Random backbone and head convolutions; every head's final layer is
    /// initialised so that all offsets start at zero.
    pub fn new(spec: &GeneratorSpec, config: &HyperNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let resolution = spec.resolution()?;
        let fs = config.backbone.feature_size(resolution);
        let (fh, fw, fc) = config.backbone_feature_shape;
        if (fh, fw) != (fs, fs) {
            return Err(Error::Config(format!(
                "backbone_feature_shape {:?} but the backbone maps {resolution}x{resolution} inputs to {fs}x{fs}x{fc}",
                config.backbone_feature_shape
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, "backbone", &config.backbone, &mut rng);
        let mut heads = BTreeMap::new();
        for idx in select_refined_layers(spec, config.layer_policy) {
            let layer = spec.layer(idx).expect("selected from spec");
            let lay = head_layout(spec, layer, config);
            let name = format!("head{idx}");
            let convs = lay
                .convs
                .iter()
                .enumerate()
                .map(|(i, d)| Conv2d::new(&mut store, &format!("{name}.conv{i}"), d.k, d.c_in, d.c_out, d.stride, d.bias, &mut rng))
                .collect();
            let fc = match lay.output {
                HeadOutput::SharedCode => Linear::new(&mut store, &format!("{name}.fc"), lay.fc_in, lay.fc_out, true, 1.0, &mut rng),
                HeadOutput::Separable => {
                    let fc = Linear::zeroed(&mut store, &format!("{name}.fc"), lay.fc_in, lay.fc_out);
                    let k2 = layer.kernel * layer.kernel;
                    let mut bias = vec![0.0; lay.fc_out];
                    bias[k2 * layer.c_in..].iter_mut().for_each(|b| *b = 1.0);
                    let bias = ArrayD::from_shape_vec(ndarray::IxDyn(&[lay.fc_out]), bias.into_iter().map(F::from_f64).collect())
                        .expect("length matches");
                    store.set(&format!("{name}.fc.bias"), bias).expect("shape matches");
                    fc
                }
                _ => Linear::zeroed(&mut store, &format!("{name}.fc"), lay.fc_in, lay.fc_out),
            };
            heads.insert(
                idx,
                Head {
                    convs,
                    fc,
                    output: lay.output,
                    k: layer.kernel,
                    c_in: layer.c_in,
                    c_out: layer.c_out,
                },
            );
        }
        let shared = shared_pair_layout(spec, config).map(|sp| SharedPair {
            fc1: Linear::new(&mut store, "shared.fc1", sp.dim, sp.channels * sp.dim, true, 1.0, &mut rng),
            fc2: Linear::zeroed(&mut store, "shared.fc2", sp.dim, sp.channels),
            channels: sp.channels,
            dim: sp.dim,
        });
        Ok(Self {
            spec: spec.clone(),
            config: config.clone(),
            store,
            backbone,
            heads,
            shared,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn config(&self) -> &HyperNetConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_elements()
    }

    pub fn refined_layers(&self) -> Vec<usize> {
        self.heads.keys().copied().collect()
    }

    pub fn offset_shape(&self) -> OffsetShape {
        match self.config.head_variant {
            HeadVariant::PerChannelStandard | HeadVariant::PerChannelSharedMix => OffsetShape::PerChannel,
            HeadVariant::Separable | HeadVariant::PerParameterNaive => OffsetShape::PerParameter,
        }
    }

    /// Parameters of the last fully-connected layer feeding each head's
    /// offsets (the shared second layer for shared-mix heads).
    pub fn final_fc_params(&self) -> BTreeMap<usize, Vec<ParamId>> {
        self.heads
            .iter()
            .map(|(&idx, h)| {
                let fc = match (h.output, &self.shared) {
                    (HeadOutput::SharedCode, Some(s)) => &s.fc2,
                    _ => &h.fc,
                };
                (idx, [Some(fc.weight), fc.bias].into_iter().flatten().collect())
            })
            .collect()
    }

    /// Parameters of the shared pair, if any head uses it.
    pub fn shared_params(&self) -> Vec<ParamId> {
        self.shared
            .iter()
            .flat_map(|s| [Some(s.fc1.weight), s.fc1.bias, Some(s.fc2.weight), s.fc2.bias])
            .flatten()
            .collect()
    }

    pub fn cast<G: Real>(&self) -> HyperNetwork<G> {
        HyperNetwork {
            spec: self.spec.clone(),
            config: self.config.clone(),
            store: self.store.cast(),
            backbone: self.backbone.clone(),
            heads: self.heads.clone(),
            shared: self.shared.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        hyperinvert_autograd::io::save_store(dir, &self.store)?;
        self.spec.save(&dir.join("spec.json"))?;
        let path = dir.join("config.json");
        let text = serde_json::to_string_pretty(&self.config).map_err(Error::json(&path))?;
        std::fs::write(&path, text).map_err(Error::io(&path))
    }

    /// Backbone over the channel concatenation `(target, reconstruction)`.
    pub fn features_graph<'g>(&self, p: &Bound<'g, F>, target: Var<'g, F>, current: Var<'g, F>) -> Var<'g, F> {
        self.backbone.forward(p, concat(&[target, current], 3))
    }

    /// Batched offsets `[N, kh, kw, C_in, C_out]` per refined layer.
    pub fn offsets_graph<'g>(&self, p: &Bound<'g, F>, features: Var<'g, F>) -> BTreeMap<usize, Var<'g, F>> {
        let n = features.shape()[0];
        let slope = F::from_f64(LRELU_SLOPE);
        self.heads
            .iter()
            .map(|(&idx, h)| {
                let mut x = features;
                for c in &h.convs {
                    x = c.forward(p, x).leaky_relu(slope);
                }
                let c = x.shape()[3];
                let pooled = x.mean_axes(&[1, 2]).reshape(&[n, c]);
                let out = h.fc.forward(p, pooled);
                let (k, ci, co) = (h.k, h.c_in, h.c_out);
                let delta = match h.output {
                    HeadOutput::PerChannel => out.reshape(&[n, 1, 1, ci, co]),
                    HeadOutput::PerParameter => out.reshape(&[n, k, k, ci, co]),
                    HeadOutput::Separable => {
                        let split = k * k * ci;
                        let a = out.slice_axis(1, 0, split).reshape(&[n, k, k, ci, 1]);
                        let b = out.slice_axis(1, split, split + k * k * co).reshape(&[n, k, k, 1, co]);
                        a.mul(b)
                    }
                    HeadOutput::SharedCode => {
                        let s = self.shared.as_ref().expect("shared pair exists for shared heads");
                        let rows = s.fc1.forward(p, out).reshape(&[n * s.channels, s.dim]);
                        s.fc2.forward(p, rows).reshape(&[n, 1, 1, s.channels, s.channels])
                    }
                };
                (idx, delta)
            })
            .collect()
    }

    fn check_pair(&self, target: &ArrayD<F>, current: &ArrayD<F>) -> Result<()> {
        let r = self.spec.resolution()?;
        if target.shape() != current.shape() {
            return Err(Error::Shape(format!(
                "target {:?} and reconstruction {:?} differ in shape",
                target.shape(),
                current.shape()
            )));
        }
        let s = target.shape();
        if s.len() != 4 || s[1] != r || s[2] != r || s[3] != 3 {
            return Err(Error::Shape(format!("expected [N, {r}, {r}, 3] images, got {s:?}")));
        }
        Ok(())
    }

    pub fn extract_features(&self, target: &ArrayD<F>, current: &ArrayD<F>) -> Result<ArrayD<F>> {
        self.check_pair(target, current)?;
        let graph = Graph::new();
        let p = self.store.bind_frozen(&graph);
        let f = self.features_graph(&p, graph.constant(target.clone()), graph.constant(current.clone()));
        Ok((*f.value()).clone())
    }

    pub fn predict_offsets(&self, features: &ArrayD<F>) -> Result<OffsetSet<F>> {
        let (h, w, c) = self.config.backbone_feature_shape;
        let s = features.shape();
        if s.len() != 4 || s[1..] != [h, w, c] {
            return Err(Error::Shape(format!("expected [N, {h}, {w}, {c}] features, got {s:?}")));
        }
        let graph = Graph::new();
        let p = self.store.bind_frozen(&graph);
        let offsets = self
            .offsets_graph(&p, graph.constant(features.clone()))
            .into_iter()
            .map(|(i, v)| (i, (*v.value()).clone()))
            .collect();
        OffsetSet::new(&self.spec, offsets)
    }
}

/// Parameters of a [`Backbone`] realised in a fresh store.
pub fn backbone_param_count(config: &BackboneConfig) -> usize {
    let mut store = ParamStore::<f32>::new();
    Backbone::new(&mut store, "b", config, &mut ChaCha8Rng::seed_from_u64(0));
    store.num_elements()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genspec::{count_hypernet_params, toy_spec, LayerPolicy};

    fn toy_config(variant: HeadVariant) -> (GeneratorSpec, HyperNetConfig) {
        let spec = toy_spec(16, 8).unwrap();
        let cfg = HyperNetConfig::toy(&spec, 16, 4).with_variant(variant);
        (spec, cfg)
    }

    #[test]
    fn realised_count_matches_analytical_count() {
        for variant in [
            HeadVariant::PerChannelStandard,
            HeadVariant::PerChannelSharedMix,
            HeadVariant::Separable,
            HeadVariant::PerParameterNaive,
        ] {
            for policy in [LayerPolicy::MediumFineConv, LayerPolicy::AllIncludingTorgb, LayerPolicy::None] {
                let (spec, cfg) = toy_config(variant);
                let cfg = cfg.with_policy(policy);
                let h = HyperNetwork::<f32>::new(&spec, &cfg, 0).unwrap();
                let report = count_hypernet_params(&spec, &cfg).unwrap();
                assert_eq!(h.num_params() as u64, report.total, "{variant} {policy}");
            }
        }
    }

    #[test]
    fn zero_initial_offsets() {
        for variant in [HeadVariant::PerChannelSharedMix, HeadVariant::Separable, HeadVariant::PerParameterNaive] {
            let (spec, cfg) = toy_config(variant);
            let h = HyperNetwork::<f32>::new(&spec, &cfg, 1).unwrap();
            let x = ArrayD::from_shape_fn(ndarray::IxDyn(&[2, 16, 16, 3]), |i| (i[1] as f32 * 0.1).sin());
            let f = h.extract_features(&x, &x).unwrap();
            let offs = h.predict_offsets(&f).unwrap();
            assert_eq!(offs.layers(), h.refined_layers());
            assert!(offs.iter().all(|(_, t)| t.iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn feature_shape_mismatch_is_a_config_error() {
        let (spec, mut cfg) = toy_config(HeadVariant::PerChannelStandard);
        cfg.backbone_feature_shape.0 += 1;
        assert!(matches!(HyperNetwork::<f32>::new(&spec, &cfg, 0), Err(Error::Config(_))));
    }
}
