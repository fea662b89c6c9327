//! Latent-direction edits on inverted images and PCA direction discovery.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{sample_latents, GeneratorWeights, ImageBatch, LatentCode};
use crate::inversion::{synthesize_modulated, InversionResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditDirection {
    pub name: String,
    pub vector: Vec<f32>,
}

impl EditDirection {
    /// Normalises `vector` to unit length.
    pub fn new(name: impl Into<String>, vector: Vec<f32>) -> Result<Self> {
        let norm = vector.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::InvalidArgument("edit direction must be finite and nonzero".into()));
        }
        Ok(Self {
            name: name.into(),
            vector: vector.iter().map(|&v| (v as f64 / norm) as f32).collect(),
        })
    }

    pub fn load_all(path: &Path) -> Result<Vec<Self>> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let raw: Vec<EditDirection> = serde_json::from_str(&text).map_err(Error::json(path))?;
        raw.into_iter().map(|d| Self::new(d.name, d.vector)).collect()
    }

    pub fn save_all(dirs: &[Self], path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(dirs).map_err(Error::json(path))?;
        std::fs::write(path, text).map_err(Error::io(path))
    }
}

/// The latent actually synthesised by [`apply_edit`].
pub fn edited_latent(w: &LatentCode, direction: &EditDirection, strength: f32) -> Result<LatentCode> {
    if direction.vector.len() != w.dim() {
        return Err(Error::Shape(format!(
            "direction {} has dimension {} but latents have {}",
            direction.name,
            direction.vector.len(),
            w.dim()
        )));
    }
    let mut out = w.clone();
    for mut row in out.values.rows_mut() {
        for (v, &d) in row.iter_mut().zip(&direction.vector) {
            *v += strength * d;
        }
    }
    Ok(out)
}

/// `G(w_init + strength * d; theta_hat)` with the offsets of the unedited
/// inversion held fixed.
pub fn apply_edit(
    result: &InversionResult,
    direction: &EditDirection,
    strength: f32,
    generator: &GeneratorWeights,
) -> Result<ImageBatch> {
    let w = edited_latent(&result.w_init, direction, strength)?;
    synthesize_modulated(generator, &w, &result.offsets)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaDirections {
    pub directions: Vec<EditDirection>,
    /// Variance along each direction, non-increasing.
    pub explained_variance: Vec<f64>,
}

/// Principal components of `n_samples` mapped latents. Signs are fixed so
/// the largest-magnitude entry of each direction is positive.
pub fn discover_directions_pca(
    generator: &GeneratorWeights,
    n_samples: usize,
    n_components: usize,
    seed: u64,
) -> Result<PcaDirections> {
    let d = generator.spec().latent_dim;
    if n_components == 0 || n_components > d {
        return Err(Error::InvalidArgument(format!(
            "n_components must be in 1..={d}, got {n_components}"
        )));
    }
    if n_samples < n_components || n_samples < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least {} samples for {n_components} components, got {n_samples}",
            n_components.max(2)
        )));
    }
    let w = generator.map_latent(&sample_latents(n_samples, d, seed)?)?;
    let mut m = DMatrix::from_fn(n_samples, d, |i, j| w.values[[i, j]] as f64);
    let mean = m.row_mean();
    for mut row in m.row_iter_mut() {
        row -= &mean;
    }
    let svd = m.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let denom = (n_samples - 1) as f64;
    let mut directions = Vec::with_capacity(n_components);
    let mut explained_variance = Vec::with_capacity(n_components);
    for (c, &k) in order.iter().take(n_components).enumerate() {
        let mut v: Vec<f64> = v_t.row(k).iter().copied().collect();
        let pivot = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        directions.push(EditDirection::new(format!("pc{c}"), v.iter().map(|&x| x as f32).collect())?);
        explained_variance.push(svd.singular_values[k].powi(2) / denom);
    }
    Ok(PcaDirections {
        directions,
        explained_variance,
    })
}
