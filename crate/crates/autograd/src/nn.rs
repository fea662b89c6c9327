//! Layer building blocks over [`ParamStore`].

use rand::Rng;

use crate::graph::Var;
use crate::params::{normal, zeros, Bound, ParamId, ParamStore};
use crate::real::Real;

/// Fully-connected layer, weight `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// He-style init with std `gain / sqrt(in)`.
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let std = gain / (in_features as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            normal(&[in_features, out_features], std, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), zeros(&[out_features])));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    /// Zero weight and bias, so the layer initially outputs zeros.
    pub fn zeroed<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), zeros(&[in_features, out_features]));
        let bias = Some(store.add(format!("{name}.bias"), zeros(&[out_features])));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn num_params(&self) -> usize {
        self.in_features * self.out_features + self.bias.map_or(0, |_| self.out_features)
    }

    /// `x: [N, in] -> [N, out]`
    pub fn forward<'g, F: Real>(&self, p: &Bound<'g, F>, x: Var<'g, F>) -> Var<'g, F> {
        let y = x.matmul(p.var(self.weight));
        match self.bias {
            Some(b) => y.add(p.var(b)),
            None => y,
        }
    }
}

/// 2-D convolution layer, kernel `[k, k, C_in, C_out]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        k: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (k * k * c_in) as f64).sqrt();
        let kernel = store.add(format!("{name}.kernel"), normal(&[k, k, c_in, c_out], std, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), zeros(&[c_out])));
        Self {
            kernel,
            bias,
            k,
            c_in,
            c_out,
            stride,
            padding: k / 2,
        }
    }

    pub fn num_params(&self) -> usize {
        self.k * self.k * self.c_in * self.c_out + self.bias.map_or(0, |_| self.c_out)
    }

    pub fn forward<'g, F: Real>(&self, p: &Bound<'g, F>, x: Var<'g, F>) -> Var<'g, F> {
        let y = x.conv2d(p.var(self.kernel), self.stride, self.padding);
        match self.bias {
            Some(b) => y.add(p.var(b)),
            None => y,
        }
    }
}

/// Per-channel scale and shift: batch normalisation in its inference form.
#[derive(Clone, Debug)]
pub struct ChannelAffine {
    pub scale: ParamId,
    pub shift: ParamId,
    pub channels: usize,
}

impl ChannelAffine {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        let scale = store.add(format!("{name}.scale"), crate::params::full(&[channels], 1.0));
        let shift = store.add(format!("{name}.shift"), zeros(&[channels]));
        Self {
            scale,
            shift,
            channels,
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }

    /// Broadcasts over the trailing channel axis.
    pub fn forward<'g, F: Real>(&self, p: &Bound<'g, F>, x: Var<'g, F>) -> Var<'g, F> {
        x.mul(p.var(self.scale)).add(p.var(self.shift))
    }
}
