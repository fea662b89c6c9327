//! Multiplicative weight offsets: `theta_hat = theta * (1 + delta)`, their
//! accumulation across refinement steps, and transfer to another generator.

use std::collections::BTreeMap;
use std::path::Path;

use hyperinvert_autograd::io::{read_tensor, tensor_path, write_tensor};
use hyperinvert_autograd::{Real, Var};
use ndarray::{ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::GeneratorWeights;
use crate::genspec::{GeneratorSpec, LayerSpec};

/// Spatial extent of an offset tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetShape {
    /// `[1, 1, C_in, C_out]`, broadcast over the kernel window.
    PerChannel,
    /// `[k, k, C_in, C_out]`.
    PerParameter,
}

/// Per-layer offsets for one generator spec. Tensors are either
/// unbatched (`[kh, kw, C_in, C_out]`) or all carry a leading batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetSet<F: Real = f32> {
    spec: GeneratorSpec,
    offsets: BTreeMap<usize, ArrayD<F>>,
}

fn check_offset_shape(layer: &LayerSpec, shape: &[usize]) -> Result<Option<usize>> {
    let (batch, inner) = match shape.len() {
        4 => (None, shape),
        5 => (Some(shape[0]), &shape[1..]),
        _ => {
            return Err(Error::Shape(format!(
                "offset for layer {} must be 4-D or 5-D, got {shape:?}",
                layer.index
            )))
        }
    };
    let k = layer.kernel;
    let spatial_ok = (inner[0] == 1 && inner[1] == 1) || (inner[0] == k && inner[1] == k);
    if !spatial_ok || inner[2] != layer.c_in || inner[3] != layer.c_out {
        return Err(Error::Shape(format!(
            "offset for layer {} has shape {shape:?}, expected [1|{k}, 1|{k}, {}, {}]",
            layer.index, layer.c_in, layer.c_out
        )));
    }
    Ok(batch)
}

impl<F: Real> OffsetSet<F> {
    pub fn new(spec: &GeneratorSpec, offsets: BTreeMap<usize, ArrayD<F>>) -> Result<Self> {
        let mut batch: Option<Option<usize>> = None;
        for (&idx, t) in &offsets {
            let layer = spec
                .layer(idx)
                .ok_or_else(|| Error::Spec(format!("offset for layer {idx}, which the spec lacks")))?;
            let b = check_offset_shape(layer, t.shape())?;
            match batch {
                Some(prev) if prev != b => {
                    return Err(Error::Shape("offsets mix batched and unbatched tensors".into()))
                }
                _ => batch = Some(b),
            }
        }
        Ok(Self {
            spec: spec.clone(),
            offsets,
        })
    }

    /// All-zero offsets for `layers`, optionally batched.
    pub fn zeros(spec: &GeneratorSpec, layers: &[usize], shape: OffsetShape, batch: Option<usize>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for &idx in layers {
            let l = spec
                .layer(idx)
                .ok_or_else(|| Error::Spec(format!("spec has no layer {idx}")))?;
            let k = match shape {
                OffsetShape::PerChannel => 1,
                OffsetShape::PerParameter => l.kernel,
            };
            let mut dims = vec![k, k, l.c_in, l.c_out];
            if let Some(n) = batch {
                dims.insert(0, n);
            }
            map.insert(idx, ArrayD::zeros(IxDyn(&dims)));
        }
        Self::new(spec, map)
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn layers(&self) -> Vec<usize> {
        self.offsets.keys().copied().collect()
    }

    pub fn get(&self, layer: usize) -> Option<&ArrayD<F>> {
        self.offsets.get(&layer)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &ArrayD<F>)> {
        self.offsets.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Batch size when the tensors are batched.
    pub fn batch(&self) -> Option<usize> {
        self.offsets
            .values()
            .next()
            .and_then(|t| (t.ndim() == 5).then(|| t.shape()[0]))
    }

    /// Sample `i` of a batched set, unbatched.
    pub fn sample(&self, i: usize) -> Result<Self> {
        let n = self
            .batch()
            .ok_or_else(|| Error::InvalidArgument("offset set is not batched".into()))?;
        if i >= n {
            return Err(Error::InvalidArgument(format!("sample {i} out of range for batch {n}")));
        }
        Ok(Self {
            spec: self.spec.clone(),
            offsets: self
                .offsets
                .iter()
                .map(|(&k, t)| (k, t.index_axis(Axis(0), i).to_owned()))
                .collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.offsets.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn cast<G: Real>(&self) -> OffsetSet<G> {
        OffsetSet {
            spec: self.spec.clone(),
            offsets: self
                .offsets
                .iter()
                .map(|(&k, t)| (k, t.mapv(|v| G::from_f64(Real::to_f64(v)))))
                .collect(),
        }
    }

    fn same_keys(&self, other: &Self) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::Spec(format!(
                "offsets belong to specs {} and {}",
                self.spec.name, other.spec.name
            )));
        }
        if self.layers() != other.layers() {
            return Err(Error::Shape(format!(
                "offset layer sets differ: {:?} vs {:?}",
                self.layers(),
                other.layers()
            )));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.save_with_step(dir, None)
    }

    fn save_with_step(&self, dir: &Path, step: Option<usize>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        for (idx, t) in self.iter() {
            write_tensor(&tensor_path(dir, &format!("layer{idx}")), t)?;
        }
        let manifest = Manifest {
            spec: self.spec.clone(),
            layers: self.layers(),
            step,
        };
        let path = dir.join("layers.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(Error::json(&path))?;
        std::fs::write(&path, text).map_err(Error::io(&path))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self::load_with_step(dir)?.0)
    }

    fn load_with_step(dir: &Path) -> Result<(Self, Option<usize>)> {
        let path = dir.join("layers.json");
        let text = std::fs::read_to_string(&path).map_err(Error::io(&path))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(Error::json(&path))?;
        manifest.spec.validate()?;
        let mut map = BTreeMap::new();
        for idx in manifest.layers {
            map.insert(idx, read_tensor(&tensor_path(dir, &format!("layer{idx}")))?);
        }
        Ok((Self::new(&manifest.spec, map)?, manifest.step))
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: GeneratorSpec,
    layers: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    step: Option<usize>,
}

/// `theta * (1 + delta)` with numpy broadcasting; a batched delta yields a
/// batched kernel.
pub fn modulate_kernel<F: Real>(theta: &ArrayD<F>, delta: &ArrayD<F>) -> ArrayD<F> {
    let scale = delta.mapv(|d| F::one() + d);
    theta * &scale
}

/// Tape version of [`modulate_kernel`].
pub fn modulate_var<'g, F: Real>(theta: Var<'g, F>, delta: Var<'g, F>) -> Var<'g, F> {
    theta.mul(delta.add_scalar(F::one()))
}

fn check_spec<F: Real>(theta: &GeneratorWeights<F>, spec: &GeneratorSpec) -> Result<()> {
    if theta.spec() != spec {
        return Err(Error::Spec(format!(
            "offsets were produced for spec {} but the generator uses {}",
            spec.name,
            theta.spec().name
        )));
    }
    Ok(())
}

/// Modulated copy of `theta`; unrefined layers are copied unchanged.
/// Offsets must be unbatched.
pub fn modulate<F: Real>(theta: &GeneratorWeights<F>, offsets: &OffsetSet<F>) -> Result<GeneratorWeights<F>> {
    check_spec(theta, offsets.spec())?;
    if offsets.batch().is_some() {
        return Err(Error::Shape(
            "modulate takes unbatched offsets; use modulated_kernels for a batch".into(),
        ));
    }
    let mut out = theta.clone();
    for (idx, delta) in offsets.iter() {
        let w = theta.layer_weight(idx)?;
        out.set_layer_weight(idx, modulate_kernel(w, delta))?;
    }
    Ok(out)
}

/// Modulated kernels for the offset layers only, batched if the offsets are.
pub fn modulated_kernels<F: Real>(
    theta: &GeneratorWeights<F>,
    offsets: &OffsetSet<F>,
) -> Result<BTreeMap<usize, ArrayD<F>>> {
    check_spec(theta, offsets.spec())?;
    offsets
        .iter()
        .map(|(idx, delta)| Ok((idx, modulate_kernel(theta.layer_weight(idx)?, delta))))
        .collect()
}

/// Running sum of offsets over refinement steps.
#[derive(Clone, Debug, PartialEq)]
pub struct AccumulatedOffsets<F: Real = f32> {
    sums: OffsetSet<F>,
    step: usize,
}

impl<F: Real> AccumulatedOffsets<F> {
    /// Step 0: zeros with the layers and shapes of `template`.
    pub fn zeros_like(template: &OffsetSet<F>) -> Self {
        Self {
            sums: OffsetSet {
                spec: template.spec.clone(),
                offsets: template
                    .offsets
                    .iter()
                    .map(|(&k, t)| (k, ArrayD::zeros(t.raw_dim())))
                    .collect(),
            },
            step: 0,
        }
    }

    pub fn zeros(spec: &GeneratorSpec, layers: &[usize], shape: OffsetShape, batch: Option<usize>) -> Result<Self> {
        Ok(Self {
            sums: OffsetSet::zeros(spec, layers, shape, batch)?,
            step: 0,
        })
    }

    /// Adds `new` to the running sums. Per-channel offsets may be added to
    /// per-parameter sums; the result takes the broadcast shape.
    pub fn accumulate(&self, new: &OffsetSet<F>) -> Result<Self> {
        self.sums.same_keys(new)?;
        let mut offsets = BTreeMap::new();
        for (idx, sum) in self.sums.iter() {
            let d = new.get(idx).expect("same keys");
            if sum.ndim() != d.ndim() || (sum.ndim() == 5 && sum.shape()[0] != d.shape()[0]) {
                return Err(Error::Shape(format!(
                    "layer {idx}: cannot add offsets {:?} to running sum {:?}",
                    d.shape(),
                    sum.shape()
                )));
            }
            offsets.insert(idx, sum + d);
        }
        Ok(Self {
            sums: OffsetSet::new(&self.sums.spec, offsets)?,
            step: self.step + 1,
        })
    }

    pub fn sums(&self) -> &OffsetSet<F> {
        &self.sums
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn sample(&self, i: usize) -> Result<Self> {
        Ok(Self {
            sums: self.sums.sample(i)?,
            step: self.step,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.sums.save_with_step(dir, Some(self.step))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (sums, step) = OffsetSet::load_with_step(dir)?;
        Ok(Self {
            sums,
            step: step.unwrap_or(0),
        })
    }
}

/// Applies offsets predicted against one generator to another generator
/// with exactly the same spec.
pub fn transfer_offsets<F: Real>(
    offsets: &AccumulatedOffsets<F>,
    theta_target: &GeneratorWeights<F>,
) -> Result<GeneratorWeights<F>> {
    modulate(theta_target, offsets.sums())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genspec::toy_spec;

    #[test]
    fn zero_offsets_have_expected_shapes() {
        let spec = toy_spec(8, 4).unwrap();
        let pc = OffsetSet::<f32>::zeros(&spec, &[3, 4], OffsetShape::PerChannel, None).unwrap();
        assert_eq!(pc.get(3).unwrap().shape(), &[1, 1, 4, 2]);
        let pp = OffsetSet::<f32>::zeros(&spec, &[4], OffsetShape::PerParameter, Some(2)).unwrap();
        assert_eq!(pp.get(4).unwrap().shape(), &[2, 3, 3, 2, 2]);
        assert_eq!(pp.batch(), Some(2));
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let spec = toy_spec(8, 4).unwrap();
        let bad = BTreeMap::from([(3, ArrayD::<f32>::zeros(IxDyn(&[1, 1, 3, 2])))]);
        assert!(matches!(OffsetSet::new(&spec, bad), Err(Error::Shape(_))));
        let missing = BTreeMap::from([(99, ArrayD::<f32>::zeros(IxDyn(&[1, 1, 4, 4])))]);
        assert!(matches!(OffsetSet::new(&spec, missing), Err(Error::Spec(_))));
    }

    #[test]
    fn accumulate_rejects_key_mismatch() {
        let spec = toy_spec(8, 4).unwrap();
        let acc = AccumulatedOffsets::<f32>::zeros(&spec, &[3, 4], OffsetShape::PerChannel, None).unwrap();
        let other = OffsetSet::zeros(&spec, &[3], OffsetShape::PerChannel, None).unwrap();
        assert!(acc.accumulate(&other).is_err());
    }

    #[test]
    fn modulate_rejects_foreign_spec() {
        let theta = GeneratorWeights::random(&toy_spec(8, 4).unwrap(), 0).unwrap();
        let other = toy_spec(8, 8).unwrap();
        let offs = OffsetSet::<f32>::zeros(&other, &[3], OffsetShape::PerChannel, None).unwrap();
        assert!(matches!(modulate(&theta, &offs), Err(Error::Spec(_))));
    }
}
