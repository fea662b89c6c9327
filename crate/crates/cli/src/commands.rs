//! Subcommand implementations. Each returns what it wrote or printed so the
//! binary stays a thin dispatcher.

use std::path::{Path, PathBuf};
use std::time::Instant;

use hyperinvert_core::editing::{apply_edit, discover_directions_pca, EditDirection};
use hyperinvert_core::encoder::Encoder;
use hyperinvert_core::generator::{GeneratorWeights, LatentCode, LatentSpace};
use hyperinvert_core::genspec::{
    count_hypernet_params, BackboneConfig, GeneratorSpec, HeadVariant, HyperNetConfig, LayerPolicy, ParamReport,
};
use hyperinvert_core::hypernet::HyperNetwork;
use hyperinvert_core::inversion::{finetune_generator, invert, optimize_latent, InversionResult};
use hyperinvert_core::losses::{per_image_l2, Losses};
use hyperinvert_core::modulation::{transfer_offsets, AccumulatedOffsets};
use hyperinvert_core::trainer::{pretrain_encoder, train_hypernetwork, Dataset, TrainStep};
use ndarray::{concatenate, Array2, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::config::{resolve_spec, ExperimentConfig};
use crate::error::CliError;
use crate::imageio;
use crate::stats::{paired_t_test, PairedTest};

pub const DEVICE_ENV: &str = "HYPERINVERT_DEVICE";

/// Only the CPU backend exists.
pub fn check_device() -> Result<(), CliError> {
    match std::env::var(DEVICE_ENV) {
        Ok(d) if !d.is_empty() && !d.eq_ignore_ascii_case("cpu") => Err(CliError::Config(format!(
            "{DEVICE_ENV}={d} is not available; only `cpu` is supported"
        ))),
        _ => Ok(()),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Other(format!("cannot create {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Other(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Other(format!("malformed {}: {e}", path.display())))
}

// count-params

#[derive(Clone, Debug)]
pub struct CountParamsArgs {
    pub spec: String,
    pub heads: HeadVariant,
    pub layers: LayerPolicy,
    /// Toy backbone width; ResNet34 when absent.
    pub backbone_width: Option<usize>,
    pub shared_fc_dim: Option<usize>,
    pub json: bool,
}

pub fn count_config(spec: &GeneratorSpec, args: &CountParamsArgs) -> Result<HyperNetConfig, CliError> {
    let resolution = spec.resolution()?;
    let backbone = match args.backbone_width {
        Some(w) => BackboneConfig::toy(6, w),
        None => BackboneConfig::resnet34(6),
    };
    let s = backbone.feature_size(resolution);
    Ok(HyperNetConfig {
        head_variant: args.heads,
        layer_policy: args.layers,
        refinement_steps: 5,
        backbone_feature_shape: (s, s, backbone.feature_channels()),
        shared_fc_dim: args.shared_fc_dim.unwrap_or_else(|| spec.max_conv_channels()),
        backbone,
    })
}

pub fn cmd_count_params(args: &CountParamsArgs) -> Result<(ParamReport, String), CliError> {
    let spec = resolve_spec(&args.spec)?;
    let config = count_config(&spec, args)?;
    let report = count_hypernet_params(&spec, &config)?;
    let text = if args.json {
        serde_json::to_string_pretty(&report).expect("report serialises")
    } else {
        report.to_table(&spec, &config)
    };
    Ok((report, text))
}

// checkpoints

/// `generator/`, `encoder/`, `hypernet/` and `config.json` under one root.
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub generator: GeneratorWeights,
    pub encoder: Encoder,
    pub hypernet: HyperNetwork,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        create_dir(dir)?;
        self.generator.save(&dir.join("generator"))?;
        self.encoder.save(&dir.join("encoder"))?;
        self.hypernet.save(&dir.join("hypernet"))?;
        self.config.save(&dir.join("config.json"))
    }

    pub fn load(dir: &Path) -> Result<Self, CliError> {
        if !dir.join("config.json").exists() {
            return Err(CliError::Config(format!("{} is not a checkpoint directory (no config.json)", dir.display())));
        }
        let config = ExperimentConfig::load(&dir.join("config.json"))?;
        let generator = GeneratorWeights::load(&dir.join("generator"))?;
        let encoder = Encoder::load(&dir.join("encoder"))?;
        let hypernet = HyperNetwork::load(&dir.join("hypernet"))?;
        if hypernet.spec() != generator.spec() {
            return Err(CliError::Mismatch("hypernetwork and generator specs differ".into()));
        }
        Ok(Self {
            config,
            generator,
            encoder,
            hypernet,
        })
    }
}

/// Loads a generator from a generator dir or a checkpoint root.
pub fn load_generator(path: &Path) -> Result<GeneratorWeights, CliError> {
    let dir = if path.join("generator").join("spec.json").exists() {
        path.join("generator")
    } else {
        path.to_path_buf()
    };
    if !dir.join("spec.json").exists() {
        return Err(CliError::Config(format!("no generator found at {}", path.display())));
    }
    Ok(GeneratorWeights::load(&dir)?)
}

// train

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub steps: Option<usize>,
    pub dry_run: bool,
}

/// Realised sizes are only built below this many analytical parameters.
const REALISE_LIMIT: u64 = 50_000_000;

pub fn build_generator(config: &ExperimentConfig, spec: &GeneratorSpec) -> Result<GeneratorWeights, CliError> {
    match &config.generator.checkpoint {
        Some(path) => {
            let g = load_generator(path)?;
            if g.spec() != spec {
                return Err(CliError::Mismatch(format!(
                    "generator checkpoint has spec {} but config names {}",
                    g.spec().name,
                    config.generator.spec
                )));
            }
            Ok(g)
        }
        None => Ok(GeneratorWeights::random(spec, config.generator.seed)?),
    }
}

fn dry_run(config: &ExperimentConfig) -> Result<String, CliError> {
    let spec = config.spec()?;
    let hcfg = config.hypernet_config(&spec)?;
    let report = count_hypernet_params(&spec, &hcfg)?;
    let mut out = report.to_table(&spec, &hcfg);
    if report.total <= REALISE_LIMIT {
        let h: HyperNetwork = HyperNetwork::new(&spec, &hcfg, config.seed)?;
        let g = GeneratorWeights::random(&spec, config.generator.seed)?;
        let e: Encoder = Encoder::with_config(&config.encoder_config(&spec)?, config.seed)?;
        out.push_str(&format!(
            "realised: hypernetwork {} params, generator {} params, encoder {} params\n",
            h.num_params(),
            g.store().num_elements(),
            e.store().num_elements()
        ));
    } else {
        out.push_str("realised: skipped (model too large to instantiate for a dry run)\n");
    }
    out.push_str("config ok\n");
    Ok(out)
}

fn log_progress(kind: &str, total: usize) -> impl FnMut(&TrainStep) + '_ {
    let every = (total / 20).max(1);
    move |s: &TrainStep| {
        if s.step.is_multiple_of(every) || s.step + 1 == total {
            log::info!("{kind} step {}/{total}: objective {:.5}", s.step + 1, s.objective);
        }
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<String, CliError> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    if let Some(steps) = args.steps {
        config.train.steps = steps;
    }
    config.validate()?;
    if args.dry_run {
        return dry_run(&config);
    }
    let spec = config.spec()?;
    let out = config.output_dir.clone();
    create_dir(&out.join("logs"))?;
    let generator = build_generator(&config, &spec)?;
    let dataset = Dataset::from_generator(&generator, config.train.dataset_size, config.seed.wrapping_add(3))?;
    let encoder = match &config.encoder.checkpoint {
        Some(path) => Encoder::load(path)?,
        None => {
            let mut e = Encoder::new(&config.encoder_config(&spec)?, &generator, config.encoder.n_avg, config.seed)?;
            let ecfg = config.encoder_train_config();
            let log = pretrain_encoder(&dataset, &generator, &mut e, &ecfg, log_progress("encoder", ecfg.steps))?;
            log.write_jsonl(&out.join("logs").join("encoder.jsonl"))?;
            e
        }
    };
    let mut hypernet = HyperNetwork::new(&spec, &config.hypernet_config(&spec)?, config.seed.wrapping_add(2))?;
    let tcfg = config.train_config();
    let log = train_hypernetwork(&dataset, &generator, &encoder, &mut hypernet, &tcfg, log_progress("hypernet", tcfg.steps))?;
    log.write_jsonl(&out.join("logs").join("hypernet.jsonl"))?;
    let summary = format!(
        "trained {} hypernetwork steps; final objective {:.5}; checkpoint at {}\n",
        log.steps.len(),
        log.steps.last().map_or(f64::NAN, |s| s.objective),
        out.display()
    );
    Checkpoint {
        config,
        generator,
        encoder,
        hypernet,
    }
    .save(&out)?;
    Ok(summary)
}

// inputs shared by invert and edit

#[derive(Clone, Debug)]
pub enum ImageSource {
    Dir(PathBuf),
    /// `n` generator samples drawn with `seed`.
    Sample { n: usize, seed: u64 },
}

pub fn load_images(source: &ImageSource, generator: &GeneratorWeights) -> Result<ArrayD<f32>, CliError> {
    match source {
        ImageSource::Dir(dir) => imageio::load_dir(dir, generator.spec().resolution()?),
        ImageSource::Sample { n, seed } => {
            if *n == 0 {
                return Err(CliError::Config("--sample must be >= 1".into()));
            }
            Ok(Dataset::from_generator(generator, *n, *seed)?.images)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentFile {
    pub space: LatentSpace,
    pub values: Vec<Vec<f32>>,
}

impl LatentFile {
    pub fn from_code(w: &LatentCode) -> Self {
        Self {
            space: w.space,
            values: w.values.rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }

    pub fn to_code(&self) -> Result<LatentCode, CliError> {
        let n = self.values.len();
        let d = self.values.first().map_or(0, Vec::len);
        if n == 0 || self.values.iter().any(|r| r.len() != d) {
            return Err(CliError::Mismatch("latent file rows are empty or ragged".into()));
        }
        let flat: Vec<f32> = self.values.iter().flatten().copied().collect();
        let values = Array2::from_shape_vec((n, d), flat).expect("shape checked");
        Ok(LatentCode::new(values, self.space)?)
    }
}

// invert

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_step_l2: Vec<f64>,
    pub final_l2: f64,
    pub wall_seconds: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub method: String,
    pub seconds_per_image: f64,
    pub mean_l2: f64,
}

#[derive(Clone, Debug)]
pub struct BaselineOptions {
    pub latent_steps: usize,
    pub latent_lr: f64,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        Self {
            latent_steps: 500,
            latent_lr: 0.02,
            finetune_steps: 200,
            finetune_lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InvertArgs {
    pub checkpoint: PathBuf,
    pub source: ImageSource,
    pub steps: Option<usize>,
    pub out: PathBuf,
    pub compare_baselines: Option<BaselineOptions>,
}

pub struct InvertOutput {
    pub metrics: Metrics,
    pub paired: Option<PairedTest>,
    pub baselines: Vec<BaselineRow>,
    pub report: String,
}

pub fn save_inversion(result: &InversionResult, dir: &Path) -> Result<(), CliError> {
    result.offsets.save(&dir.join("offsets"))?;
    write_json(&LatentFile::from_code(&result.w_init), &dir.join("w_init.json"))
}

fn baseline_table(rows: &[BaselineRow]) -> String {
    let mut out = format!("{:<28} {:>14} {:>12}\n", "method", "seconds/image", "mean L2");
    for r in rows {
        out.push_str(&format!("{:<28} {:>14.4} {:>12.6}\n", r.method, r.seconds_per_image, r.mean_l2));
    }
    out
}

pub fn cmd_invert(args: &InvertArgs) -> Result<InvertOutput, CliError> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let t = args.steps.unwrap_or(ckpt.config.train.refinement_steps);
    let x = load_images(&args.source, &ckpt.generator)?;
    let n = x.shape()[0];
    create_dir(&args.out)?;
    let start = Instant::now();
    let result = invert(&x, &ckpt.generator, &ckpt.encoder, &ckpt.hypernet, t)?;
    let wall_seconds = start.elapsed().as_secs_f64();
    save_inversion(&result, &args.out)?;
    imageio::save_batch(&result.reconstruction, &args.out.join("reconstructions"), "")?;
    let metrics = Metrics {
        final_l2: *result.per_step_distortion.last().expect("t >= 1"),
        per_step_l2: result.per_step_distortion.clone(),
        wall_seconds,
        config_hash: ckpt.config.hash(),
    };
    write_json(&metrics, &args.out.join("metrics.json"))?;
    let paired = paired_t_test(&result.per_image_distortion[0], result.per_image_distortion.last().expect("t >= 1"));
    let mut report = format!(
        "inverted {n} images with T = {t} in {wall_seconds:.3} s; L2 per step: {}\n",
        metrics.per_step_l2.iter().map(|v| format!("{v:.5}")).collect::<Vec<_>>().join(" ")
    );
    match &paired {
        Some(p) => report.push_str(&format!("{p}\n")),
        None => report.push_str("paired t-test needs at least 2 images\n"),
    }
    let encoder_only = ckpt.generator.synthesize(&result.w_init)?;
    let mut rows = vec![x.clone(), encoder_only, result.reconstruction.clone()];
    let mut baselines = Vec::new();
    if let Some(opts) = &args.compare_baselines {
        let losses = Losses::new(&ckpt.config.loss)?;
        let per_image = |s: f64| s / n as f64;
        let start = Instant::now();
        ckpt.generator.synthesize(&ckpt.encoder.encode(&x)?)?;
        let secs = start.elapsed().as_secs_f64();
        baselines.push(BaselineRow {
            method: "encoder".into(),
            seconds_per_image: per_image(secs),
            mean_l2: result.per_step_distortion[0],
        });
        baselines.push(BaselineRow {
            method: format!("hypernetwork (T={t})"),
            seconds_per_image: per_image(wall_seconds),
            mean_l2: metrics.final_l2,
        });
        let start = Instant::now();
        let (w_opt, _) = optimize_latent(&x, &ckpt.generator, &losses, opts.latent_steps, opts.latent_lr, Some(&result.w_init))?;
        let secs = start.elapsed().as_secs_f64();
        let y_opt = ckpt.generator.synthesize(&w_opt)?;
        baselines.push(BaselineRow {
            method: format!("latent optimisation ({})", opts.latent_steps),
            seconds_per_image: per_image(secs),
            mean_l2: mean(&per_image_l2(&x, &y_opt)?),
        });
        let start = Instant::now();
        let (g_ft, _) = finetune_generator(&x, &ckpt.generator, &result.w_init, &losses, opts.finetune_steps, opts.finetune_lr)?;
        let secs = start.elapsed().as_secs_f64();
        let y_ft = g_ft.synthesize(&result.w_init)?;
        baselines.push(BaselineRow {
            method: format!("generator finetune ({})", opts.finetune_steps),
            seconds_per_image: per_image(secs),
            mean_l2: mean(&per_image_l2(&x, &y_ft)?),
        });
        write_json(&baselines, &args.out.join("baselines.json"))?;
        report.push_str(&baseline_table(&baselines));
        rows.push(y_opt);
        rows.push(y_ft);
    }
    imageio::save_grid(&rows, &args.out.join("grid.png"))?;
    Ok(InvertOutput {
        metrics,
        paired,
        baselines,
        report,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// edit

#[derive(Clone, Debug)]
pub enum DirectionSource {
    File(PathBuf),
    Pca { components: usize, samples: usize },
}

#[derive(Clone, Debug)]
pub struct EditArgs {
    pub checkpoint: PathBuf,
    pub source: ImageSource,
    pub directions: DirectionSource,
    pub strengths: Vec<f32>,
    pub steps: Option<usize>,
    pub out: PathBuf,
    pub seed: u64,
}

/// Returns the written grid paths, one per image.
pub fn cmd_edit(args: &EditArgs) -> Result<Vec<PathBuf>, CliError> {
    if args.strengths.is_empty() {
        return Err(CliError::Config("at least one strength is required".into()));
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let directions = match &args.directions {
        DirectionSource::File(path) => EditDirection::load_all(path)?,
        DirectionSource::Pca { components, samples } => {
            discover_directions_pca(&ckpt.generator, *samples, *components, args.seed)?.directions
        }
    };
    if directions.is_empty() {
        return Err(CliError::Config("no edit directions".into()));
    }
    let t = args.steps.unwrap_or(ckpt.config.train.refinement_steps);
    let x = load_images(&args.source, &ckpt.generator)?;
    let result = invert(&x, &ckpt.generator, &ckpt.encoder, &ckpt.hypernet, t)?;
    create_dir(&args.out)?;
    EditDirection::save_all(&directions, &args.out.join("directions.json"))?;
    // edits[d][s] is a batch over images
    let mut edits = Vec::with_capacity(directions.len());
    for d in &directions {
        let row = args
            .strengths
            .iter()
            .map(|&s| apply_edit(&result, d, s, &ckpt.generator))
            .collect::<Result<Vec<_>, _>>()?;
        edits.push(row);
    }
    let mut paths = Vec::new();
    for i in 0..x.shape()[0] {
        let rows: Vec<ArrayD<f32>> = edits
            .iter()
            .map(|per_strength| {
                let views: Vec<_> = per_strength.iter().map(|b| b.index_axis(Axis(0), i).insert_axis(Axis(0))).collect();
                concatenate(Axis(0), &views).expect("equal image shapes")
            })
            .collect();
        let path = args.out.join(format!("edit_{i:04}.png"));
        imageio::save_grid(&rows, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

// adapt

#[derive(Clone, Debug)]
pub struct AdaptArgs {
    /// An invert output dir holding `offsets/` and `w_init.json`.
    pub offsets: PathBuf,
    pub target: PathBuf,
    pub out: PathBuf,
}

pub fn cmd_adapt(args: &AdaptArgs) -> Result<ArrayD<f32>, CliError> {
    let offsets = AccumulatedOffsets::load(&args.offsets.join("offsets"))?;
    let w: LatentFile = read_json(&args.offsets.join("w_init.json"))?;
    let w = w.to_code()?;
    let target = load_generator(&args.target)?;
    if offsets.sums().spec() != target.spec() {
        return Err(CliError::Mismatch(format!(
            "offsets were predicted for spec {} but the target generator uses {}",
            offsets.sums().spec().name,
            target.spec().name
        )));
    }
    let n = w.batch();
    if offsets.sums().batch().is_some_and(|b| b != n) {
        return Err(CliError::Mismatch(format!(
            "{n} latent codes but offsets for {:?} samples",
            offsets.sums().batch()
        )));
    }
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let per_sample = match offsets.sums().batch() {
            Some(_) => offsets.sample(i)?,
            None => offsets.clone(),
        };
        let adapted = transfer_offsets(&per_sample, &target)?;
        images.push(adapted.synthesize(&w.row(i))?);
    }
    let views: Vec<_> = images.iter().map(|a| a.view()).collect();
    let batch = concatenate(Axis(0), &views).expect("equal image shapes");
    create_dir(&args.out)?;
    imageio::save_batch(&batch, &args.out.join("adapted"), "")?;
    let rows = [batch];
    imageio::save_grid(&rows, &args.out.join("grid.png"))?;
    let [batch] = rows;
    Ok(batch)
}
