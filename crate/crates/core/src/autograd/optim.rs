use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ParamBundle;

/// Named gradient buffers aligned with a [`ParamBundle`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grads {
    inner: BTreeMap<String, Vec<f64>>,
}

impl Grads {
    pub fn insert(&mut self, name: String, g: Vec<f64>) {
        self.inner.insert(name, g);
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.inner.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.inner.iter()
    }

    /// Adds `other` entry-wise; missing entries are copied.
    pub fn accumulate(&mut self, other: &Grads) {
        for (k, v) in &other.inner {
            match self.inner.get_mut(k) {
                Some(dst) => dst.iter_mut().zip(v).for_each(|(a, b)| *a += b),
                None => {
                    self.inner.insert(k.clone(), v.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.inner.values_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn global_norm(&self) -> f64 {
        self.inner.values().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.global_norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
        n
    }

    pub fn is_finite(&self) -> bool {
        self.inner.values().flatten().all(|v| v.is_finite())
    }
}

/// Step-decayed learning rate: `base * factor^(number of boundaries <= step)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub boundaries: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        LrSchedule { base, boundaries: Vec::new(), factor: 0.1 }
    }

    /// Drops by 10x at one third and two thirds of `total` steps.
    pub fn thirds(base: f64, total: usize) -> Self {
        LrSchedule { base, boundaries: vec![total / 3, 2 * total / 3], factor: 0.1 }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let drops = self.boundaries.iter().filter(|&&b| step >= b).count();
        self.base * self.factor.powi(drops as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn moment_len(&self, name: &str) -> Option<usize> {
        self.m.get(name).map(Vec::len)
    }

    /// One Adam update with the rate `schedule.lr_at(self.step)`; returns that rate.
    /// Parameters without a gradient entry are left alone.
    pub fn step(&mut self, params: &mut ParamBundle, grads: &Grads, schedule: &LrSchedule) -> f64 {
        let lr = schedule.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        lr
    }
}
