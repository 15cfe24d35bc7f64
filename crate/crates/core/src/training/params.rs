//! Named f64 parameter sets and the AdamW optimizer.

use std::collections::HashMap;
use std::ops::{Index, IndexMut};

use super::ops::Mat;
use crate::numerics::TensorF32;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    mats: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn from_named<'a>(named: impl IntoIterator<Item = (String, &'a TensorF32)>) -> Self {
        let mut p = Self {
            names: Vec::new(),
            shapes: Vec::new(),
            mats: Vec::new(),
            index: HashMap::new(),
        };
        for (name, t) in named {
            p.index.insert(name.clone(), p.names.len());
            p.names.push(name);
            p.shapes.push(t.shape().to_vec());
            p.mats.push(Mat::from_tensor(t));
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            mats: self.mats.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect(),
            ..self.clone()
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.index.get(name).map(|&i| &self.mats[i])
    }

    pub fn mats(&self) -> &[Mat] {
        &self.mats
    }

    pub fn mats_mut(&mut self) -> &mut [Mat] {
        &mut self.mats
    }

    /// Write the values back into f32 tensors of the same names.
    pub fn store<'a>(&self, targets: impl IntoIterator<Item = (String, &'a mut TensorF32)>) {
        for (name, t) in targets {
            if let Some(&i) = self.index.get(&name) {
                *t = self.mats[i].to_tensor(&self.shapes[i]);
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.mats.iter().map(Mat::sum_sq).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for m in &mut self.mats {
            for v in &mut m.data {
                *v *= s;
            }
        }
    }

    pub fn add_assign(&mut self, o: &ParamSet) {
        for (a, b) in self.mats.iter_mut().zip(&o.mats) {
            a.add_assign(b);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.mats.iter().all(|m| m.data.iter().all(|v| v.is_finite()))
    }
}

impl Index<&str> for ParamSet {
    type Output = Mat;
    fn index(&self, name: &str) -> &Mat {
        &self.mats[*self.index.get(name).unwrap_or_else(|| panic!("no parameter {name}"))]
    }
}

impl IndexMut<&str> for ParamSet {
    fn index_mut(&mut self, name: &str) -> &mut Mat {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("no parameter {name}"));
        &mut self.mats[i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: ParamSet,
    v: ParamSet,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet, lr: f64, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// One update at learning rate `lr`. Entries with `frozen[i]` are skipped.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64, frozen: &[bool]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.mats.iter_mut().enumerate() {
            if frozen.get(i).copied().unwrap_or(false) {
                continue;
            }
            let g = &grads.mats[i].data;
            let m = &mut self.m.mats[i].data;
            let v = &mut self.v.mats[i].data;
            for j in 0..p.data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                p.data[j] -= lr * (update + self.weight_decay * p.data[j]);
            }
        }
    }
}

/// Cosine decay from `base` to `base * min_ratio` over `total` steps, after
/// `warmup` linear warm-up steps.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize, min_ratio: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    base * (min_ratio + (1.0 - min_ratio) * cos)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 100, 0, 0.0), 1.0);
        assert!((cosine_lr(1.0, 50, 100, 0, 0.0) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(1.0, 100, 100, 0, 0.1) - 0.1 < 1e-12);
        assert!((cosine_lr(2.0, 0, 100, 4, 0.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn adamw_zero_gradient_without_decay_is_noop() {
        let t = TensorF32::vector(vec![1.0, -2.0]);
        let mut p = ParamSet::from_named([("w".to_string(), &t)]);
        let before = p.clone();
        let g = p.zeros_like();
        let mut opt = AdamW::new(&p, 0.1, (0.9, 0.999), 1e-8, 0.0);
        opt.step(&mut p, &g, 0.1, &[]);
        assert_eq!(p, before);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let t = TensorF32::vector(vec![1.0]);
        let mut p = ParamSet::from_named([("w".to_string(), &t)]);
        let mut g = p.zeros_like();
        g["w"].data[0] = 3.0;
        let mut opt = AdamW::new(&p, 0.1, (0.9, 0.999), 1e-8, 0.0);
        opt.step(&mut p, &g, 0.1, &[]);
        assert!((p["w"].data[0] - 0.9).abs() < 1e-6);
    }
}
