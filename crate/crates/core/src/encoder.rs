//! Image-to-latent encoder used as the frozen initialiser.

use std::path::Path;

use hyperinvert_autograd::io::{load_into_store, save_store};
use hyperinvert_autograd::nn::Linear;
use hyperinvert_autograd::{Bound, Graph, ParamId, ParamStore, Real, Var};
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{GeneratorWeights, LatentCode, LatentSpace};
use crate::genspec::BackboneConfig;
use crate::hypernet::Backbone;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub backbone: BackboneConfig,
    pub latent_dim: usize,
    pub resolution: usize,
}

impl EncoderConfig {
    pub fn toy(latent_dim: usize, resolution: usize, base_width: usize) -> Self {
        Self {
            backbone: BackboneConfig::toy(3, base_width),
            latent_dim,
            resolution,
        }
    }
}

/// Backbone, global average pool and a linear layer, added to the mean
/// latent of the generator. The linear layer starts at zero, so a fresh
/// encoder outputs the mean latent.
#[derive(Clone, Debug)]
pub struct Encoder<F: Real = f32> {
    config: EncoderConfig,
    store: ParamStore<F>,
    backbone: Backbone,
    fc: Linear,
    latent_avg: ParamId,
}

impl Encoder<f32> {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("encoder.json");
        let text = std::fs::read_to_string(&path).map_err(Error::io(&path))?;
        let config: EncoderConfig = serde_json::from_str(&text).map_err(Error::json(&path))?;
        let mut e = Self::with_config(&config, 0)?;
        load_into_store(dir, &mut e.store)?;
        Ok(e)
    }
}

impl<F: Real> Encoder<F> {
    pub fn with_config(config: &EncoderConfig, seed: u64) -> Result<Self> {
        if config.backbone.in_channels != 3 {
            return Err(Error::Config("the encoder takes 3-channel images".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, "backbone", &config.backbone, &mut rng);
        let fc = Linear::zeroed(&mut store, "fc", config.backbone.feature_channels(), config.latent_dim);
        let latent_avg = store.add("latent_avg", ArrayD::zeros(ndarray::IxDyn(&[config.latent_dim])));
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            fc,
            latent_avg,
        })
    }

    /// Fresh encoder for `generator`, with the mean latent estimated from
    /// `n_avg` mapped samples.
    pub fn new(config: &EncoderConfig, generator: &GeneratorWeights<F>, n_avg: usize, seed: u64) -> Result<Self> {
        if config.latent_dim != generator.spec().latent_dim {
            return Err(Error::Spec(format!(
                "encoder latent_dim {} but generator latent_dim {}",
                config.latent_dim,
                generator.spec().latent_dim
            )));
        }
        let mut e = Self::with_config(config, seed)?;
        *e.store.get_mut(e.latent_avg) = generator.mean_latent(n_avg, seed ^ 0xa5a5)?;
        Ok(e)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn latent_avg(&self) -> &ArrayD<F> {
        self.store.get(self.latent_avg)
    }

    /// Binds for training: the mean latent stays a constant.
    pub fn bind_trainable<'g>(&self, graph: &'g Graph<F>) -> Bound<'g, F> {
        let mut p = self.store.bind(graph);
        p.replace(self.latent_avg, graph.constant(self.latent_avg().clone()));
        p
    }

    /// `[N, R, R, 3] -> [N, latent_dim]` in W.
    pub fn forward<'g>(&self, p: &Bound<'g, F>, x: Var<'g, F>) -> Var<'g, F> {
        let h = self.backbone.forward(p, x);
        let s = h.shape();
        let pooled = h.mean_axes(&[1, 2]).reshape(&[s[0], s[3]]);
        self.fc.forward(p, pooled).add(p.var(self.latent_avg))
    }

    pub fn encode(&self, x: &ArrayD<F>) -> Result<LatentCode> {
        let r = self.config.resolution;
        let s = x.shape();
        if s.len() != 4 || s[1] != r || s[2] != r || s[3] != 3 {
            return Err(Error::Shape(format!("expected [N, {r}, {r}, 3] images, got {s:?}")));
        }
        let graph = Graph::new();
        let p = self.store.bind_frozen(&graph);
        let w = self.forward(&p, graph.constant(x.clone()));
        LatentCode::from_array(&w.value(), LatentSpace::W)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_store(dir, &self.store)?;
        let path = dir.join("encoder.json");
        let text = serde_json::to_string_pretty(&self.config).map_err(Error::json(&path))?;
        std::fs::write(&path, text).map_err(Error::io(&path))
    }
}
