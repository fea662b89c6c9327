//! Reconstruction objective: pixel L2, a perceptual term and an embedding
//! similarity term. The perceptual and similarity networks are fixed,
//! seeded random convolution stacks.

use hyperinvert_autograd::nn::Conv2d;
use hyperinvert_autograd::{Bound, Graph, ParamStore, Real, Var};
use ndarray::{ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PYRAMID_WIDTHS: [usize; 3] = [8, 16, 32];
const EMBED_WIDTHS: [usize; 3] = [8, 16, 32];
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    EmbeddingCosine,
    Off,
}

/// How per-refinement-step losses are combined into the training loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepReduction {
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_lpips: f64,
    pub lambda_sim: f64,
    pub sim_mode: SimMode,
    /// Seed of the frozen perceptual and embedding networks.
    pub proxy_seed: u64,
    pub step_reduction: StepReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_lpips: 0.8,
            lambda_sim: 0.1,
            sim_mode: SimMode::EmbeddingCosine,
            proxy_seed: 0x5eed,
            step_reduction: StepReduction::Mean,
        }
    }
}

impl LossConfig {
    /// Weights for face-like domains (the default).
    pub fn facial() -> Self {
        Self::default()
    }

    /// Stronger similarity weight for other domains.
    pub fn non_facial() -> Self {
        Self {
            lambda_sim: 0.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_lpips >= 0.0 && self.lambda_sim >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got lambda_lpips={} lambda_sim={}",
                self.lambda_lpips, self.lambda_sim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l2: f64,
    pub perceptual: f64,
    pub similarity: f64,
    pub total: f64,
}

/// Loss terms on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars<'g, F: Real> {
    pub l2: Var<'g, F>,
    pub perceptual: Var<'g, F>,
    pub similarity: Option<Var<'g, F>>,
    pub total: Var<'g, F>,
}

impl<F: Real> LossVars<'_, F> {
    pub fn report(&self) -> LossReport {
        LossReport {
            l2: Real::to_f64(self.l2.item()),
            perceptual: Real::to_f64(self.perceptual.item()),
            similarity: self.similarity.map_or(0.0, |s| Real::to_f64(s.item())),
            total: Real::to_f64(self.total.item()),
        }
    }
}

/// The loss configuration together with its frozen proxy networks.
#[derive(Clone, Debug)]
pub struct Losses<F: Real = f32> {
    config: LossConfig,
    store: ParamStore<F>,
    pyramid: Vec<Conv2d>,
    embed: Vec<Conv2d>,
}

fn conv_stack<F: Real>(store: &mut ParamStore<F>, prefix: &str, widths: &[usize], rng: &mut ChaCha8Rng) -> Vec<Conv2d> {
    let mut c_in = 3;
    widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let c = Conv2d::new(store, &format!("{prefix}.conv{i}"), 3, c_in, w, 1, false, rng);
            c_in = w;
            c
        })
        .collect()
}

fn check_pair<F: Real>(x: &ArrayD<F>, y: &ArrayD<F>) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "loss inputs differ in shape: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    if x.ndim() != 4 || x.shape()[3] != 3 {
        return Err(Error::Shape(format!("expected [N, H, W, 3] images, got {:?}", x.shape())));
    }
    Ok(())
}

impl<F: Real> Losses<F> {
    pub fn new(config: &LossConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.proxy_seed);
        let mut store = ParamStore::new();
        let pyramid = conv_stack(&mut store, "perceptual", &PYRAMID_WIDTHS, &mut rng);
        let embed = conv_stack(&mut store, "embedding", &EMBED_WIDTHS, &mut rng);
        Ok(Self {
            config: config.clone(),
            store,
            pyramid,
            embed,
        })
    }

    pub fn config(&self) -> &LossConfig {
        &self.config
    }

    /// Frozen proxy parameters, to be bound once per graph.
    pub fn bind<'g>(&self, graph: &'g Graph<F>) -> Bound<'g, F> {
        self.store.bind_frozen(graph)
    }

    /// Feature maps at successive scales, halving resolution between them
    /// while it stays even.
    fn features<'g>(&self, p: &Bound<'g, F>, stack: &[Conv2d], x: Var<'g, F>) -> Vec<Var<'g, F>> {
        let slope = F::from_f64(0.2);
        let mut out = Vec::new();
        let mut h = x;
        for (i, c) in stack.iter().enumerate() {
            if i > 0 {
                let s = h.shape();
                if s[1] < 2 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
                    break;
                }
                h = h.avg_pool2x();
            }
            h = c.forward(p, h).leaky_relu(slope);
            out.push(h);
        }
        out
    }

    pub fn l2_graph<'g>(&self, x: Var<'g, F>, y: Var<'g, F>) -> Var<'g, F> {
        x.sub(y).square().mean()
    }

    pub fn perceptual_graph<'g>(&self, p: &Bound<'g, F>, x: Var<'g, F>, y: Var<'g, F>) -> Var<'g, F> {
        let fx = self.features(p, &self.pyramid, x);
        let fy = self.features(p, &self.pyramid, y);
        let levels = fx.len();
        let mut total: Option<Var<'g, F>> = None;
        for (a, b) in fx.into_iter().zip(fy) {
            let d = a.sub(b).square().mean();
            total = Some(match total {
                Some(t) => t.add(d),
                None => d,
            });
        }
        total.expect("at least one level").scale(F::one() / F::from_f64(levels as f64))
    }

    fn embedding<'g>(&self, p: &Bound<'g, F>, x: Var<'g, F>) -> Var<'g, F> {
        let last = *self.features(p, &self.embed, x).last().expect("at least one level");
        let s = last.shape();
        let e = last.mean_axes(&[1, 2]).reshape(&[s[0], s[3]]);
        e.mul(e.square().sum_axes(&[1]).add_scalar(F::from_f64(NORM_EPS)).rsqrt())
    }

    /// Batch mean of `|a - b|^2 / 2` over normalised embeddings, i.e.
    /// one minus their cosine similarity.
    pub fn similarity_graph<'g>(&self, p: &Bound<'g, F>, x: Var<'g, F>, y: Var<'g, F>) -> Option<Var<'g, F>> {
        if self.config.sim_mode == SimMode::Off {
            return None;
        }
        let n = x.shape()[0] as f64;
        let d = self.embedding(p, x).sub(self.embedding(p, y));
        Some(d.square().sum().scale(F::from_f64(0.5 / n)))
    }

    pub fn total_graph<'g>(&self, p: &Bound<'g, F>, x: Var<'g, F>, y: Var<'g, F>) -> LossVars<'g, F> {
        let l2 = self.l2_graph(x, y);
        let perceptual = self.perceptual_graph(p, x, y);
        let similarity = self.similarity_graph(p, x, y);
        let mut total = l2.add(perceptual.scale(F::from_f64(self.config.lambda_lpips)));
        if let Some(s) = similarity {
            total = total.add(s.scale(F::from_f64(self.config.lambda_sim)));
        }
        LossVars {
            l2,
            perceptual,
            similarity,
            total,
        }
    }

    pub fn l2_loss(&self, x: &ArrayD<F>, y: &ArrayD<F>) -> Result<f64> {
        check_pair(x, y)?;
        Ok(l2(x, y))
    }

    pub fn perceptual_loss(&self, x: &ArrayD<F>, y: &ArrayD<F>) -> Result<f64> {
        check_pair(x, y)?;
        let g = Graph::new();
        let p = self.bind(&g);
        Ok(Real::to_f64(self.perceptual_graph(&p, g.constant(x.clone()), g.constant(y.clone())).item()))
    }

    pub fn similarity_loss(&self, x: &ArrayD<F>, y: &ArrayD<F>) -> Result<f64> {
        check_pair(x, y)?;
        let g = Graph::new();
        let p = self.bind(&g);
        Ok(self
            .similarity_graph(&p, g.constant(x.clone()), g.constant(y.clone()))
            .map_or(0.0, |v| Real::to_f64(v.item())))
    }

    pub fn total_loss(&self, x: &ArrayD<F>, y: &ArrayD<F>) -> Result<LossReport> {
        check_pair(x, y)?;
        let g = Graph::new();
        let p = self.bind(&g);
        Ok(self.total_graph(&p, g.constant(x.clone()), g.constant(y.clone())).report())
    }
}

/// Mean squared error over all elements.
pub fn l2<F: Real>(x: &ArrayD<F>, y: &ArrayD<F>) -> f64 {
    let n = x.len() as f64;
    x.iter()
        .zip(y.iter())
        .map(|(&a, &b)| {
            let d = Real::to_f64(a) - Real::to_f64(b);
            d * d
        })
        .sum::<f64>()
        / n
}

/// Mean squared error of each image in a batch.
pub fn per_image_l2<F: Real>(x: &ArrayD<F>, y: &ArrayD<F>) -> Result<Vec<f64>> {
    check_pair(x, y)?;
    Ok(x.axis_iter(Axis(0))
        .zip(y.axis_iter(Axis(0)))
        .map(|(a, b)| l2(&a.to_owned(), &b.to_owned()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn img(seed: u64) -> ArrayD<f32> {
        let mut s = seed.wrapping_add(1);
        ArrayD::from_shape_fn(IxDyn(&[2, 8, 8, 3]), |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
        })
    }

    #[test]
    fn constant_offset_l2() {
        let l = Losses::<f32>::new(&LossConfig::default()).unwrap();
        let a = ArrayD::from_elem(IxDyn(&[1, 4, 4, 3]), 0.25f32);
        let b = ArrayD::from_elem(IxDyn(&[1, 4, 4, 3]), -0.25f32);
        assert!((l.l2_loss(&a, &b).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn identical_images_have_zero_loss() {
        let l = Losses::<f32>::new(&LossConfig::default()).unwrap();
        let x = img(3);
        let r = l.total_loss(&x, &x).unwrap();
        assert_eq!(r, LossReport::default());
    }

    #[test]
    fn non_facial_preset() {
        assert_eq!(LossConfig::non_facial().lambda_sim, 0.5);
        assert_eq!(LossConfig::facial().lambda_lpips, 0.8);
        assert!(LossConfig {
            lambda_sim: -1.0,
            ..LossConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn shape_mismatch() {
        let l = Losses::<f32>::new(&LossConfig::default()).unwrap();
        let a = img(1);
        let b = ArrayD::zeros(IxDyn(&[2, 4, 4, 3]));
        assert!(matches!(l.total_loss(&a, &b), Err(Error::Shape(_))));
    }
}
