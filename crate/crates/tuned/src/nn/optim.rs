//! SGD with momentum over flat parameter slices.

use crate::error::{Error, Result};

/// Momentum SGD. Velocity buffers are allocated on the first step and must
/// keep matching the parameter layout afterwards.
#[derive(Debug, Clone)]
pub struct SgdState {
    learning_rate: f64,
    momentum: f64,
    velocities: Option<Vec<Vec<f64>>>,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocities: None,
        })
    }

    /// One update: `v <- momentum*v - lr*g; p <- p + v`, slice by slice.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract(
                "sgd_step",
                format!(
                    "{} parameter slices but {} gradient slices",
                    params.len(),
                    grads.len()
                ),
            ));
        }
        if self.velocities.is_none() {
            self.velocities = Some(params.iter().map(|p| vec![0.0; p.len()]).collect());
        }
        let velocities = self.velocities.as_mut().expect("initialized above");
        if velocities.len() != params.len() {
            return Err(Error::contract(
                "sgd_step",
                "parameter layout changed between steps".to_string(),
            ));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(velocities.iter_mut()) {
            if p.len() != g.len() || p.len() != v.len() {
                return Err(Error::contract(
                    "sgd_step",
                    format!(
                        "slice length mismatch: param {}, grad {}, velocity {}",
                        p.len(),
                        g.len(),
                        v.len()
                    ),
                ));
            }
            for i in 0..p.len() {
                v[i] = self.momentum * v[i] - self.learning_rate * g[i];
                p[i] += v[i];
            }
        }
        Ok(())
    }
}
