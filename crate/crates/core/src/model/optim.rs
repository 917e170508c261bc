//! SGD with momentum, weight decay and a polynomial learning-rate schedule.

use crate::error::{Error, Result};
use crate::model::backbone::{BackboneParams, Gradients};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub max_iter: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            base_lr: 2.5e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            power: 0.9,
            max_iter: 1,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.base_lr) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.base_lr)));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::Config(format!("momentum {} must be in [0, 1)", self.momentum)));
        }
        if !finite_nonneg(self.weight_decay) {
            return Err(Error::Config(format!("weight decay {} must be >= 0", self.weight_decay)));
        }
        if !finite_nonneg(self.power) {
            return Err(Error::Config(format!("decay power {} must be >= 0", self.power)));
        }
        Ok(())
    }
}

/// `base_lr * (1 - iter / max_iter)^power`.
pub fn poly_lr(iter: u64, max_iter: u64, base_lr: f64, power: f64) -> Result<f64> {
    if iter > max_iter {
        return Err(Error::Config(format!(
            "iteration {iter} is past the schedule end {max_iter}"
        )));
    }
    if iter == max_iter {
        return Ok(0.0);
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// Momentum buffers plus schedule position.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: SgdConfig,
    pub velocity: Gradients,
    pub iter: u64,
}

impl OptimizerState {
    pub fn new(config: SgdConfig, params: &BackboneParams) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: params.zero_grads(),
            iter: 0,
        })
    }

    pub fn current_lr(&self) -> Result<f64> {
        poly_lr(
            self.iter,
            self.config.max_iter,
            self.config.base_lr,
            self.config.power,
        )
    }

    pub fn is_finished(&self) -> bool {
        self.iter >= self.config.max_iter
    }
}

fn same_shape(a: &Gradients, params: &BackboneParams) -> bool {
    a.layers.len() == params.layers().len()
        && a.layers.iter().zip(params.layers()).all(|(g, p)| {
            g.weights.len() == p.weights.len() && g.bias.len() == p.bias.len()
        })
}

/// One update: `v <- mu v - lr (g + wd theta)`, `theta <- theta + v`.
pub fn sgd_step(params: &mut BackboneParams, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    if !same_shape(grads, params) || !same_shape(&state.velocity, params) {
        return Err(Error::Shape("gradient or velocity shape differs from parameters".into()));
    }
    if state.is_finished() {
        return Err(Error::Config(format!(
            "optimizer already ran its {} scheduled iterations",
            state.config.max_iter
        )));
    }
    let lr = state.current_lr()?;
    let SgdConfig {
        momentum: mu,
        weight_decay: wd,
        ..
    } = state.config;
    for ((p, g), v) in params
        .layers_mut()
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.velocity.layers)
    {
        let pairs = p
            .weights
            .iter_mut()
            .zip(&g.weights)
            .zip(&mut v.weights)
            .chain(p.bias.iter_mut().zip(&g.bias).zip(&mut v.bias));
        for ((theta, grad), vel) in pairs {
            *vel = mu * *vel - lr * (grad + wd * *theta);
            *theta += *vel;
        }
    }
    state.iter += 1;
    if !params.is_finite() {
        return Err(Error::Numeric(format!(
            "parameters became non-finite at iteration {}",
            state.iter
        )));
    }
    Ok(())
}
