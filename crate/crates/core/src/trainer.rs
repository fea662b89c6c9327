//! Encoder pretraining and the hypernetwork training loop.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hyperinvert_autograd::optim::{ranger, Adam, AdamConfig, Optimizer};
use hyperinvert_autograd::{Graph, Var};
use ndarray::{ArrayD, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::generator::{sample_latents, GeneratorWeights, LatentCode};
use crate::hypernet::HyperNetwork;
use crate::losses::{LossConfig, LossReport, Losses, StepReduction};
use crate::modulation::modulate_var;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Ranger,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    #[serde(alias = "refinement_steps_T")]
    pub refinement_steps: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub loss: LossConfig,
    /// Cut gradients between refinement steps instead of back-propagating
    /// through the whole unroll.
    pub truncate_unroll: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 8,
            steps: 1000,
            refinement_steps: 5,
            optimizer: OptimizerKind::Ranger,
            seed: 0,
            loss: LossConfig::default(),
            truncate_unroll: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.refinement_steps == 0 {
            return Err(Error::Config("refinement_steps must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        self.loss.validate()
    }

    fn optimizer(&self) -> Box<dyn Optimizer<f32>> {
        match self.optimizer {
            OptimizerKind::Ranger => Box::new(ranger(self.learning_rate)),
            OptimizerKind::Adam => Box::new(Adam::new(AdamConfig {
                lr: self.learning_rate,
                ..AdamConfig::default()
            })),
        }
    }
}

/// One optimisation step. `losses` has one entry per refinement step
/// (a single entry for encoder pretraining).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStep {
    pub step: usize,
    pub losses: Vec<LossReport>,
    pub objective: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<TrainStep>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainLog {
    /// Mean objective over a window of steps.
    pub fn mean_objective(&self, range: std::ops::Range<usize>) -> f64 {
        let s = &self.steps[range];
        s.iter().map(|t| t.objective).sum::<f64>() / s.len() as f64
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(Error::io(path))?;
        for s in &self.steps {
            let line = serde_json::to_string(s).map_err(Error::json(path))?;
            writeln!(f, "{line}").map_err(Error::io(path))?;
        }
        Ok(())
    }
}

/// Images with the latents that produced them, when known.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: ArrayD<f32>,
    pub latents: Option<LatentCode>,
}

impl Dataset {
    /// `n` images `G(map(z))` for standard-normal `z`.
    pub fn from_generator(generator: &GeneratorWeights, n: usize, seed: u64) -> Result<Self> {
        let z = sample_latents(n, generator.spec().latent_dim, seed)?;
        let w = generator.map_latent(&z)?;
        let mut chunks = Vec::new();
        for start in (0..n).step_by(64) {
            let end = (start + 64).min(n);
            let part = LatentCode {
                values: w.values.slice(ndarray::s![start..end, ..]).to_owned(),
                space: w.space,
            };
            chunks.push(generator.synthesize(&part)?);
        }
        let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
        let images = ndarray::concatenate(Axis(0), &views).expect("same image shape");
        Ok(Self {
            images,
            latents: Some(w),
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> ArrayD<f32> {
        self.images.select(Axis(0), indices)
    }

    /// First `n` images as a new dataset.
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        Dataset {
            images: self.select(&idx),
            latents: self.latents.as_ref().map(|l| LatentCode {
                values: l.values.select(Axis(0), &idx),
                space: l.space,
            }),
        }
    }
}

struct Batcher {
    rng: ChaCha8Rng,
    n: usize,
    batch: usize,
}

impl Batcher {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            n,
            batch: batch.min(n),
        }
    }

    fn next(&mut self) -> Vec<usize> {
        sample(&mut self.rng, self.n, self.batch).into_vec()
    }
}

fn check_dataset(dataset: &Dataset, generator: &GeneratorWeights) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let r = generator.spec().resolution()?;
    let s = dataset.images.shape();
    if s[1..] != [r, r, 3] {
        return Err(Error::Shape(format!("dataset images {s:?} do not match generator resolution {r}")));
    }
    Ok(())
}

/// Trains `encoder` to minimise `total_loss(x, G(E(x)))` with the generator
/// held fixed.
pub fn pretrain_encoder(
    dataset: &Dataset,
    generator: &GeneratorWeights,
    encoder: &mut Encoder,
    config: &TrainConfig,
    mut on_step: impl FnMut(&TrainStep),
) -> Result<TrainLog> {
    config.validate()?;
    check_dataset(dataset, generator)?;
    let losses = Losses::<f32>::new(&config.loss)?;
    let mut opt = config.optimizer();
    let mut batcher = Batcher::new(dataset.len(), config.batch_size, config.seed);
    let mut log = TrainLog::default();
    let start = Instant::now();
    for step in 0..config.steps {
        let x_val = dataset.select(&batcher.next());
        let graph = Graph::new();
        let pg = generator.store().bind_frozen(&graph);
        let pe = encoder.bind_trainable(&graph);
        let pl = losses.bind(&graph);
        let x = graph.constant(x_val);
        let w = encoder.forward(&pe, x);
        let y = generator.synthesize_graph(&pg, w, &BTreeMap::new());
        let l = losses.total_graph(&pl, x, y);
        let grads = graph.backward(l.total);
        opt.step(encoder.store_mut(), &pe.gradients(&grads));
        let rec = TrainStep {
            step,
            losses: vec![l.report()],
            objective: l.total.item() as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_step(&rec);
        log.steps.push(rec);
    }
    Ok(log)
}

fn check_components(generator: &GeneratorWeights, encoder: &Encoder, hypernet: &HyperNetwork) -> Result<()> {
    if hypernet.spec() != generator.spec() {
        return Err(Error::Spec(format!(
            "hypernetwork built for spec {} but generator uses {}",
            hypernet.spec().name,
            generator.spec().name
        )));
    }
    if encoder.config().latent_dim != generator.spec().latent_dim {
        return Err(Error::Spec("encoder and generator latent dimensions differ".into()));
    }
    Ok(())
}

/// Runs the `T`-step refinement loop on the tape. Returns the per-step loss
/// terms and the combined objective.
#[allow(clippy::too_many_arguments)]
pub(crate) fn unrolled_objective<'g>(
    graph: &'g Graph<f32>,
    generator: &GeneratorWeights,
    hypernet: &HyperNetwork,
    hp: &hyperinvert_autograd::Bound<'g, f32>,
    losses: &Losses,
    x_val: ArrayD<f32>,
    w_val: ArrayD<f32>,
    steps: usize,
    truncate: bool,
) -> (Vec<LossReport>, Var<'g, f32>) {
    let pg = generator.store().bind_frozen(graph);
    let pl = losses.bind(graph);
    let x = graph.constant(x_val);
    let w = graph.constant(w_val);
    let mut y = generator.synthesize_graph(&pg, w, &BTreeMap::new());
    let mut acc: BTreeMap<usize, Var<'g, f32>> = BTreeMap::new();
    let mut reports = Vec::with_capacity(steps);
    let mut objective: Option<Var<'g, f32>> = None;
    for _ in 0..steps {
        let features = hypernet.features_graph(hp, x, y);
        let deltas = hypernet.offsets_graph(hp, features);
        for (idx, d) in deltas {
            let sum = match acc.get(&idx) {
                Some(prev) if truncate => prev.detach().add(d),
                Some(prev) => prev.add(d),
                None => d,
            };
            acc.insert(idx, sum);
        }
        let kernels = acc
            .iter()
            .map(|(&idx, &delta)| {
                let theta = pg.var(generator.layer_weight_id(idx).expect("refined layer exists"));
                (idx, modulate_var(theta, delta))
            })
            .collect();
        let y_t = generator.synthesize_graph(&pg, w, &kernels);
        let l = losses.total_graph(&pl, x, y_t);
        reports.push(l.report());
        objective = Some(match objective {
            Some(o) => o.add(l.total),
            None => l.total,
        });
        y = if truncate { y_t.detach() } else { y_t };
    }
    let mut objective = objective.expect("steps >= 1");
    if losses.config().step_reduction == StepReduction::Mean {
        objective = objective.scale(1.0 / steps as f32);
    }
    (reports, objective)
}

/// Trains only the hypernetwork; generator and encoder stay fixed.
pub fn train_hypernetwork(
    dataset: &Dataset,
    generator: &GeneratorWeights,
    encoder: &Encoder,
    hypernet: &mut HyperNetwork,
    config: &TrainConfig,
    mut on_step: impl FnMut(&TrainStep),
) -> Result<TrainLog> {
    config.validate()?;
    check_dataset(dataset, generator)?;
    check_components(generator, encoder, hypernet)?;
    let losses = Losses::<f32>::new(&config.loss)?;
    let mut opt = config.optimizer();
    let mut batcher = Batcher::new(dataset.len(), config.batch_size, config.seed);
    let mut log = TrainLog::default();
    let start = Instant::now();
    for step in 0..config.steps {
        let x_val = dataset.select(&batcher.next());
        let w_val = encoder.encode(&x_val)?.to_array::<f32>();
        let graph = Graph::new();
        let hp = hypernet.store().bind(&graph);
        let (reports, objective) = unrolled_objective(
            &graph,
            generator,
            hypernet,
            &hp,
            &losses,
            x_val,
            w_val,
            config.refinement_steps,
            config.truncate_unroll,
        );
        let grads = graph.backward(objective);
        opt.step(hypernet.store_mut(), &hp.gradients(&grads));
        let rec = TrainStep {
            step,
            losses: reports,
            objective: objective.item() as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_step(&rec);
        log.steps.push(rec);
    }
    Ok(log)
}
