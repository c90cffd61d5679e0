//! Adam with per-parameter moments.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moments of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub step: u32,
    pub first: Tensor,
    pub second: Tensor,
}

/// Moment state keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            moments: BTreeMap::new(),
        }
    }

    /// Updates every unfrozen parameter that has a gradient. `lr` gives the
    /// step size for a parameter; frozen parameters and their moments are
    /// left untouched.
    pub fn step<'p>(
        &mut self,
        params: impl IntoIterator<Item = &'p mut Param>,
        grads: &Gradients,
        lr: impl Fn(&Param) -> f32,
    ) -> Result<()> {
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.config;
        for p in params {
            if p.frozen {
                continue;
            }
            let Some(g) = grads.get(p.key()) else {
                continue;
            };
            if g.shape() != p.value.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("gradient {:?} for {} {:?}", g.shape(), p.name(), p.value.shape()),
                ));
            }
            let rate = lr(p);
            let m = self
                .moments
                .entry(p.name().to_string())
                .or_insert_with(|| Moments {
                    step: 0,
                    first: Tensor::zeros(g.shape()),
                    second: Tensor::zeros(g.shape()),
                });
            m.step += 1;
            let c1 = 1.0 - beta1.powi(m.step as i32);
            let c2 = 1.0 - beta2.powi(m.step as i32);
            let value = p.value.data_mut();
            let (first, second) = (m.first.data_mut(), m.second.data_mut());
            for i in 0..value.len() {
                let gi = g.data()[i];
                first[i] = beta1 * first[i] + (1.0 - beta1) * gi;
                second[i] = beta2 * second[i] + (1.0 - beta2) * gi * gi;
                let mh = first[i] / c1;
                let vh = second[i] / c2;
                value[i] -= rate * mh / (vh.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Flattens moments into named tensors under `prefix`.
pub fn export_moments(adam: &Adam, prefix: &str) -> Vec<(String, Tensor)> {
    let mut out = Vec::with_capacity(adam.moments.len() * 3);
    for (name, m) in &adam.moments {
        out.push((format!("{prefix}.step.{name}"), Tensor::scalar(f32::from_bits(m.step))));
        out.push((format!("{prefix}.m.{name}"), m.first.clone()));
        out.push((format!("{prefix}.v.{name}"), m.second.clone()));
    }
    out
}

/// Inverse of [`export_moments`]; consumes the matching entries.
pub fn import_moments(
    tensors: &mut Vec<(String, Tensor)>,
    prefix: &str,
) -> Result<BTreeMap<String, Moments>> {
    let step_prefix = format!("{prefix}.step.");
    let names: Vec<String> = tensors
        .iter()
        .filter_map(|(n, _)| n.strip_prefix(&step_prefix).map(str::to_string))
        .collect();
    let mut take = |key: String| -> Result<Tensor> {
        let i = tensors
            .iter()
            .position(|(n, _)| *n == key)
            .ok_or_else(|| Error::Format(format!("missing tensor {key}")))?;
        Ok(tensors.remove(i).1)
    };
    let mut out = BTreeMap::new();
    for name in names {
        let step = take(format!("{step_prefix}{name}"))?.item()?.to_bits();
        let first = take(format!("{prefix}.m.{name}"))?;
        let second = take(format!("{prefix}.v.{name}"))?;
        if first.shape() != second.shape() {
            return Err(Error::Format(format!("moment shapes differ for {name}")));
        }
        out.insert(
            name,
            Moments {
                step,
                first,
                second,
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Param::new("x", Tensor::vector(vec![1.0, -2.0]));
        let grads = {
            let mut tape = Tape::new();
            let v = tape.param(&p);
            let s = tape.mul(v, v).unwrap();
            let s = tape.sum(s).unwrap();
            tape.backward(s).unwrap()
        };
        let mut adam = Adam::default();
        adam.config = AdamConfig::default();
        adam.step([&mut p], &grads, |_| 0.1).unwrap();
        assert!((p.value.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.value.data()[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn frozen_params_are_untouched() {
        let mut p = Param::new("x", Tensor::vector(vec![1.0]));
        let mut q = Param::new("y", Tensor::vector(vec![1.0]));
        q.frozen = true;
        let grads = {
            let mut tape = Tape::new();
            let a = tape.param(&p);
            let b = tape.param(&q);
            let s = tape.mul(a, b).unwrap();
            let s = tape.sum(s).unwrap();
            tape.backward(s).unwrap()
        };
        let mut adam = Adam::default();
        adam.step([&mut p, &mut q], &grads, |_| 0.1).unwrap();
        assert_eq!(q.value.data()[0], 1.0);
        assert!(adam.moments.contains_key("x"));
        assert!(!adam.moments.contains_key("y"));
    }
}
