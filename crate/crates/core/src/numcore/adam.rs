use super::graph::{Gradients, ParamId};
use super::matrix::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Bias-corrected Adam moments for an ordered list of parameter matrices.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Matrix]) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &Matrix {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &Matrix {
        &self.v[i]
    }

    /// One update. `grads[i] == None` is treated as an all-zero gradient.
    pub fn step(&mut self, params: &mut [Matrix], grads: &[Option<&Matrix>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam tracks {} parameters, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            self.m[i].expect_shape(p.shape())?;
            if let Some(g) = grads[i] {
                g.expect_shape(p.shape())?;
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = p.data_mut();
            match grads[i] {
                Some(g) => {
                    for (((pj, mj), vj), &gj) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
                        *mj = beta1 * *mj + (1.0 - beta1) * gj;
                        *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
                        *pj -= lr * (*mj / bc1) / ((*vj / bc2).sqrt() + eps);
                    }
                }
                None => {
                    for ((pj, mj), vj) in p.iter_mut().zip(m).zip(v) {
                        *mj *= beta1;
                        *vj *= beta2;
                        *pj -= lr * (*mj / bc1) / ((*vj / bc2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Convenience for parameters numbered `ParamId(offset + i)`.
    pub fn step_with(&mut self, params: &mut [Matrix], grads: &Gradients, offset: usize) -> Result<()> {
        let gs: Vec<Option<&Matrix>> = (0..params.len())
            .map(|i| grads.param(ParamId(offset + i)))
            .collect();
        self.step(params, &gs)
    }
}
