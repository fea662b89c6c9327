//! First-order optimizers: Adam, RAdam and the Lookahead wrapper (RAdam +
//! Lookahead is commonly called "Ranger").

use ndarray::{ArrayD, Zip};

use crate::params::ParamStore;
use crate::real::Real;

pub trait Optimizer<F: Real> {
    /// Apply one update. `grads` is in store order.
    fn step(&mut self, params: &mut ParamStore<F>, grads: &[ArrayD<F>]);

    fn steps_taken(&self) -> u64;
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments<F: Real> {
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Real> Moments<F> {
    fn new(params: &ParamStore<F>) -> Self {
        let z = |p: (&str, &ArrayD<F>)| ArrayD::zeros(p.1.raw_dim());
        Self {
            m: params.iter().map(z).collect(),
            v: params.iter().map(z).collect(),
        }
    }

    fn update(&mut self, grads: &[ArrayD<F>], beta1: f64, beta2: f64) {
        let (b1, b2) = (F::from_f64(beta1), F::from_f64(beta2));
        for ((m, v), g) in self.m.iter_mut().zip(self.v.iter_mut()).zip(grads) {
            Zip::from(m).and(v).and(g).for_each(|m, v, &g| {
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
            });
        }
    }
}

pub struct Adam<F: Real> {
    config: AdamConfig,
    moments: Option<Moments<F>>,
    t: u64,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            moments: None,
            t: 0,
        }
    }
}

impl<F: Real> Optimizer<F> for Adam<F> {
    fn step(&mut self, params: &mut ParamStore<F>, grads: &[ArrayD<F>]) {
        let c = self.config;
        let moments = self.moments.get_or_insert_with(|| Moments::new(params));
        self.t += 1;
        moments.update(grads, c.beta1, c.beta2);
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let step = F::from_f64(c.lr / bc1);
        let bc2_sqrt = F::from_f64(bc2.sqrt());
        let eps = F::from_f64(c.eps);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            Zip::from(params.get_mut(id))
                .and(&moments.m[i])
                .and(&moments.v[i])
                .for_each(|p, &m, &v| *p -= step * m / (v.sqrt() / bc2_sqrt + eps));
        }
    }

    fn steps_taken(&self) -> u64 {
        self.t
    }
}

/// Rectified Adam. Falls back to bias-corrected momentum SGD while the
/// variance estimate is unreliable (`rho_t <= threshold`).
pub struct RAdam<F: Real> {
    config: AdamConfig,
    threshold: f64,
    moments: Option<Moments<F>>,
    t: u64,
}

impl<F: Real> RAdam<F> {
    pub fn new(config: AdamConfig, threshold: f64) -> Self {
        Self {
            config,
            threshold,
            moments: None,
            t: 0,
        }
    }
}

impl<F: Real> Optimizer<F> for RAdam<F> {
    fn step(&mut self, params: &mut ParamStore<F>, grads: &[ArrayD<F>]) {
        let c = self.config;
        let moments = self.moments.get_or_insert_with(|| Moments::new(params));
        self.t += 1;
        moments.update(grads, c.beta1, c.beta2);
        let t = self.t as i32;
        let beta2_t = c.beta2.powi(t);
        let rho_inf = 2.0 / (1.0 - c.beta2) - 1.0;
        let rho_t = rho_inf - 2.0 * self.t as f64 * beta2_t / (1.0 - beta2_t);
        let bc1 = 1.0 - c.beta1.powi(t);
        let ids: Vec<_> = params.ids().collect();
        if rho_t > self.threshold {
            let rect = ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf
                / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                .sqrt();
            let step = F::from_f64(c.lr * rect * (1.0 - beta2_t).sqrt() / bc1);
            let eps = F::from_f64(c.eps);
            for (i, id) in ids.into_iter().enumerate() {
                Zip::from(params.get_mut(id))
                    .and(&moments.m[i])
                    .and(&moments.v[i])
                    .for_each(|p, &m, &v| *p -= step * m / (v.sqrt() + eps));
            }
        } else {
            let step = F::from_f64(c.lr / bc1);
            for (i, id) in ids.into_iter().enumerate() {
                Zip::from(params.get_mut(id))
                    .and(&moments.m[i])
                    .for_each(|p, &m| *p -= step * m);
            }
        }
    }

    fn steps_taken(&self) -> u64 {
        self.t
    }
}

/// Lookahead: every `k` inner steps the slow weights move a fraction
/// `alpha` toward the fast weights, and the fast weights reset to them.
pub struct Lookahead<F: Real, O: Optimizer<F>> {
    inner: O,
    k: u64,
    alpha: f64,
    slow: Option<Vec<ArrayD<F>>>,
}

impl<F: Real, O: Optimizer<F>> Lookahead<F, O> {
    pub fn new(inner: O, k: u64, alpha: f64) -> Self {
        assert!(k >= 1, "lookahead period must be >= 1");
        Self {
            inner,
            k,
            alpha,
            slow: None,
        }
    }
}

impl<F: Real, O: Optimizer<F>> Optimizer<F> for Lookahead<F, O> {
    fn step(&mut self, params: &mut ParamStore<F>, grads: &[ArrayD<F>]) {
        let slow = self
            .slow
            .get_or_insert_with(|| params.iter().map(|(_, v)| v.clone()).collect());
        self.inner.step(params, grads);
        if self.inner.steps_taken() % self.k == 0 {
            let alpha = F::from_f64(self.alpha);
            for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
                Zip::from(&mut slow[i])
                    .and(params.get_mut(id))
                    .for_each(|s, f| {
                        *s += alpha * (*f - *s);
                        *f = *s;
                    });
            }
        }
    }

    fn steps_taken(&self) -> u64 {
        self.inner.steps_taken()
    }
}

/// RAdam + Lookahead with the customary defaults (betas 0.95/0.999,
/// eps 1e-5, rectification threshold 5, k = 6, alpha = 0.5).
pub fn ranger<F: Real>(lr: f64) -> Lookahead<F, RAdam<F>> {
    let config = AdamConfig {
        lr,
        beta1: 0.95,
        beta2: 0.999,
        eps: 1e-5,
    };
    Lookahead::new(RAdam::new(config, 5.0), 6, 0.5)
}
