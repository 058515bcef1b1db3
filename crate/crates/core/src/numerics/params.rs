use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Parameter name → gradient.
pub type GradMap = BTreeMap<String, Matrix>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub value: Matrix,
    first_moment: Matrix,
    second_moment: Matrix,
}

/// Named trainable matrices plus Adam state.
///
/// Names are kept in a `BTreeMap` so iteration (and serialization) order is
/// stable across runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    slots: BTreeMap<String, ParamSlot>,
    step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        let (r, c) = value.shape();
        self.slots.insert(
            name.into(),
            ParamSlot {
                value,
                first_moment: Matrix::zeros(r, c),
                second_moment: Matrix::zeros(r, c),
            },
        );
    }

    /// Glorot-uniform initialisation.
    pub fn insert_glorot(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) {
        let limit = (6.0 / (rows + cols).max(1) as f64).sqrt();
        let values = (0..rows * cols)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        self.insert(name, Matrix::from_vec(rows, cols, values).expect("sized"));
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn require(&self, name: &str) -> Result<&Matrix> {
        self.get(name)
            .ok_or_else(|| Error::Runtime(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&Matrix, &Matrix)> {
        self.slots
            .get(name)
            .map(|s| (&s.first_moment, &s.second_moment))
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    /// One Adam update with bias correction. Parameters missing from
    /// `grads` are left untouched; the step counter always advances.
    pub fn adam_step(&mut self, grads: &GradMap, lr: f64, cfg: AdamConfig) -> Result<()> {
        for (name, g) in grads {
            let slot = self.slots.get(name).ok_or_else(|| {
                Error::shape(
                    "adam_step",
                    format!("gradient for unknown parameter {name}"),
                )
            })?;
            if slot.value.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "{name}: gradient {:?} vs parameter {:?}",
                        g.shape(),
                        slot.value.shape()
                    ),
                ));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for (name, g) in grads {
            let slot = self.slots.get_mut(name).expect("checked above");
            let m = slot.first_moment.values_mut();
            let v = slot.second_moment.values_mut();
            let p = slot.value.values_mut();
            for i in 0..p.len() {
                let gi = g.values()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
