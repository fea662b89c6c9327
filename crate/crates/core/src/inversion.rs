//! Inversion by hypernetwork refinement, plus the latent-optimisation and
//! generator fine-tuning baselines.

use std::collections::BTreeMap;

use hyperinvert_autograd::optim::{Adam, AdamConfig, Optimizer};
use hyperinvert_autograd::Graph;
use ndarray::ArrayD;

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::generator::{GeneratorWeights, ImageBatch, LatentCode, LatentSpace};
use crate::hypernet::HyperNetwork;
use crate::losses::{per_image_l2, Losses};
use crate::modulation::{modulated_kernels, AccumulatedOffsets, OffsetSet};

#[derive(Clone, Debug)]
pub struct InversionResult {
    pub w_init: LatentCode,
    pub offsets: AccumulatedOffsets,
    pub reconstruction: ImageBatch,
    /// Batch-mean L2 after each step; entry 0 uses no offsets.
    pub per_step_distortion: Vec<f64>,
    /// `[step][image]` L2.
    pub per_image_distortion: Vec<Vec<f64>>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Synthesis with the accumulated offsets applied per sample.
pub fn synthesize_modulated(
    generator: &GeneratorWeights,
    w: &LatentCode,
    offsets: &AccumulatedOffsets,
) -> Result<ImageBatch> {
    generator.synthesize_with(w, &modulated_kernels(generator, offsets.sums())?)
}

/// Encodes `x`, then runs `t` refinement steps without gradients.
pub fn invert(
    x: &ArrayD<f32>,
    generator: &GeneratorWeights,
    encoder: &Encoder,
    hypernet: &HyperNetwork,
    t: usize,
) -> Result<InversionResult> {
    if t == 0 {
        return Err(Error::InvalidArgument("refinement steps must be >= 1".into()));
    }
    if hypernet.spec() != generator.spec() {
        return Err(Error::Spec(format!(
            "hypernetwork built for spec {} but generator uses {}",
            hypernet.spec().name,
            generator.spec().name
        )));
    }
    let w = encoder.encode(x)?;
    let n = w.batch();
    let mut offsets = AccumulatedOffsets::zeros(
        generator.spec(),
        &hypernet.refined_layers(),
        hypernet.offset_shape(),
        Some(n),
    )?;
    let mut y = synthesize_modulated(generator, &w, &offsets)?;
    let first = per_image_l2(x, &y)?;
    let mut per_step_distortion = vec![mean(&first)];
    let mut per_image_distortion = vec![first];
    for _ in 0..t {
        let features = hypernet.extract_features(x, &y)?;
        let delta: OffsetSet = hypernet.predict_offsets(&features)?;
        offsets = offsets.accumulate(&delta)?;
        y = synthesize_modulated(generator, &w, &offsets)?;
        let d = per_image_l2(x, &y)?;
        per_step_distortion.push(mean(&d));
        per_image_distortion.push(d);
    }
    Ok(InversionResult {
        w_init: w,
        offsets,
        reconstruction: y,
        per_step_distortion,
        per_image_distortion,
    })
}

/// Trace of a baseline optimisation.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimTrace {
    /// Batch-mean L2 before each update, then after the last one.
    pub distortion: Vec<f64>,
    pub best_step: usize,
}

impl OptimTrace {
    pub fn best(&self) -> f64 {
        self.distortion[self.best_step]
    }
}

fn adam(lr: f64) -> Adam<f32> {
    Adam::new(AdamConfig {
        lr,
        ..AdamConfig::default()
    })
}

/// Adam on `w` for the reconstruction objective. Starts from `init`, or the
/// generator's mean latent. Returns the iterate with the lowest L2.
pub fn optimize_latent(
    x: &ArrayD<f32>,
    generator: &GeneratorWeights,
    losses: &Losses,
    steps: usize,
    lr: f64,
    init: Option<&LatentCode>,
) -> Result<(LatentCode, OptimTrace)> {
    if steps == 0 {
        return Err(Error::InvalidArgument("optimize_latent needs at least one step".into()));
    }
    let n = x.shape()[0];
    let d = generator.spec().latent_dim;
    let start = match init {
        Some(w) => {
            if w.space != LatentSpace::W || w.batch() != n || w.dim() != d {
                return Err(Error::Shape(format!(
                    "initial latent must be [{n}, {d}] in W, got [{}, {}] in {:?}",
                    w.batch(),
                    w.dim(),
                    w.space
                )));
            }
            w.to_array::<f32>()
        }
        None => {
            let avg = generator.mean_latent(1000, 0)?;
            avg.broadcast(ndarray::IxDyn(&[n, d])).expect("[D] to [N, D]").to_owned()
        }
    };
    let mut store = hyperinvert_autograd::ParamStore::<f32>::new();
    let wid = store.add("w", start);
    let mut opt = adam(lr);
    let mut trace = Vec::with_capacity(steps + 1);
    let mut best: Option<(f64, ArrayD<f32>, usize)> = None;
    for step in 0..=steps {
        let graph = Graph::new();
        let pg = generator.store().bind_frozen(&graph);
        let pl = losses.bind(&graph);
        let pw = store.bind(&graph);
        let target = graph.constant(x.clone());
        let y = generator.synthesize_graph(&pg, pw.var(wid), &BTreeMap::new());
        let l = losses.total_graph(&pl, target, y);
        let dist = l.l2.item() as f64;
        trace.push(dist);
        if best.as_ref().is_none_or(|b| dist < b.0) {
            best = Some((dist, store.get(wid).clone(), step));
        }
        if step == steps {
            break;
        }
        let grads = graph.backward(l.total);
        opt.step(&mut store, &pw.gradients(&grads));
    }
    let (_, w, best_step) = best.expect("at least one evaluation");
    Ok((
        LatentCode::from_array(&w, LatentSpace::W)?,
        OptimTrace {
            distortion: trace,
            best_step,
        },
    ))
}

/// Adam on the synthesis weights with `w_init` fixed. Returns the weights
/// with the lowest L2; zero steps return an unchanged copy.
pub fn finetune_generator(
    x: &ArrayD<f32>,
    generator: &GeneratorWeights,
    w_init: &LatentCode,
    losses: &Losses,
    steps: usize,
    lr: f64,
) -> Result<(GeneratorWeights, OptimTrace)> {
    let mut current = generator.clone();
    let mut opt = adam(lr);
    let mut trace = Vec::with_capacity(steps + 1);
    let mut best: Option<(f64, GeneratorWeights, usize)> = None;
    let w_val = w_init.to_array::<f32>();
    for step in 0..=steps {
        let graph = Graph::new();
        let pg = current.store().bind(&graph);
        let pl = losses.bind(&graph);
        let target = graph.constant(x.clone());
        let y = current.synthesize_graph(&pg, graph.constant(w_val.clone()), &BTreeMap::new());
        let l = losses.total_graph(&pl, target, y);
        let dist = l.l2.item() as f64;
        trace.push(dist);
        if best.as_ref().is_none_or(|b| dist < b.0) {
            best = Some((dist, current.clone(), step));
        }
        if step == steps {
            break;
        }
        let grads = graph.backward(l.total);
        let g = pg.gradients(&grads);
        opt.step(current.store_mut(), &g);
    }
    let (_, weights, best_step) = best.expect("at least one evaluation");
    Ok((
        weights,
        OptimTrace {
            distortion: trace,
            best_step,
        },
    ))
}
