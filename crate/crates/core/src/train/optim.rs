use std::collections::HashMap;

use ndarray::{Array1, ArrayView1, ArrayViewMut1};
use serde::{Deserialize, Serialize};

use super::GradientSet;
use crate::corpus::UserId;
use crate::error::{Error, Result};
use crate::model::{FloatWidth, Parameters, UserEmbeddings};

/// Bias-corrected Adam over every parameter tensor and the user table.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    user_first: Vec<f64>,
    user_second: Vec<f64>,
}

impl AdamState {
    pub fn new(params: &Parameters, users: &UserEmbeddings) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|(_, _, t)| t.len()).collect();
        let n_users = users.table.len();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            user_first: vec![0.0; n_users],
            user_second: vec![0.0; n_users],
        }
    }

    /// Applies one update. Non-finite gradients reject the step and leave
    /// every tensor untouched.
    pub fn step(
        &mut self,
        params: &mut Parameters,
        users: &mut UserEmbeddings,
        grads: &GradientSet,
        lr: f64,
    ) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Numeric(
                "non-finite gradient, update rejected".into(),
            ));
        }
        let grad_tensors = grads.params.tensors();
        if grad_tensors.len() != self.first.len() {
            return Err(Error::Dimension(
                "gradient set does not match optimizer state".into(),
            ));
        }
        let m = users.dim();
        if users.table.len() != self.user_first.len() {
            // the table grew since the optimizer was created
            self.user_first.resize(users.table.len(), 0.0);
            self.user_second.resize(users.table.len(), 0.0);
        }
        let mut dense_user_grad = vec![0.0; users.table.len()];
        for (user, g) in &grads.users {
            if !users.contains(*user) || g.len() != m {
                return Err(Error::UnknownUser(*user));
            }
            let row = user.row();
            dense_user_grad[row * m..(row + 1) * m]
                .copy_from_slice(g.as_slice().expect("contiguous"));
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let width = params.config.float_width;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let update = |theta: &mut [f64], g: &[f64], m1: &mut [f64], m2: &mut [f64]| {
            for k in 0..theta.len() {
                m1[k] = b1 * m1[k] + (1.0 - b1) * g[k];
                m2[k] = b2 * m2[k] + (1.0 - b2) * g[k] * g[k];
                let mhat = m1[k] / c1;
                let vhat = m2[k] / c2;
                theta[k] = width.round(theta[k] - lr * mhat / (vhat.sqrt() + eps));
            }
        };
        for (((_, theta), (_, _, g)), (m1, m2)) in params
            .tensors_mut()
            .into_iter()
            .zip(&grad_tensors)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            update(theta, g, m1, m2);
        }
        update(
            users.table.as_slice_mut().expect("standard layout"),
            &dense_user_grad,
            &mut self.user_first,
            &mut self.user_second,
        );
        if !params.is_finite() || users.table.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("adam produced non-finite parameters".into()));
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(
    adam: &mut AdamState,
    params: &mut Parameters,
    users: &mut UserEmbeddings,
    grads: &GradientSet,
    lr: f64,
) -> Result<()> {
    adam.step(params, users, grads, lr)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdadeltaConfig {
    pub rho: f64,
    pub epsilon: f64,
    pub lr: f64,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        Self {
            rho: 0.95,
            epsilon: 1e-6,
            lr: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct AdadeltaRow {
    sq_grad: Array1<f64>,
    sq_update: Array1<f64>,
}

/// Per-user Adadelta accumulators for online embedding updates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdadeltaState {
    pub config: AdadeltaConfig,
    rows: HashMap<UserId, AdadeltaRow>,
}

impl AdadeltaState {
    pub fn new(config: AdadeltaConfig) -> Self {
        Self {
            config,
            rows: HashMap::new(),
        }
    }

    /// Fresh zero accumulators for `user`.
    pub fn reset(&mut self, user: UserId, dim: usize) {
        self.rows.insert(
            user,
            AdadeltaRow {
                sq_grad: Array1::zeros(dim),
                sq_update: Array1::zeros(dim),
            },
        );
    }

    pub fn accumulators(&self, user: UserId) -> Option<(ArrayView1<'_, f64>, ArrayView1<'_, f64>)> {
        self.rows
            .get(&user)
            .map(|r| (r.sq_grad.view(), r.sq_update.view()))
    }

    /// `x += lr · Δ` with `Δ = −√(E[Δ²] + ε) / √(E[g²] + ε) · g`.
    pub fn step(
        &mut self,
        user: UserId,
        mut row: ArrayViewMut1<f64>,
        grad: ArrayView1<f64>,
        width: FloatWidth,
    ) -> Result<()> {
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "non-finite gradient, update rejected".into(),
            ));
        }
        let AdadeltaConfig { rho, epsilon, lr } = self.config;
        let acc = self.rows.entry(user).or_insert_with(|| AdadeltaRow {
            sq_grad: Array1::zeros(grad.len()),
            sq_update: Array1::zeros(grad.len()),
        });
        let mut next = row.to_owned();
        for k in 0..grad.len() {
            let g = grad[k];
            acc.sq_grad[k] = rho * acc.sq_grad[k] + (1.0 - rho) * g * g;
            let delta =
                -((acc.sq_update[k] + epsilon).sqrt() / (acc.sq_grad[k] + epsilon).sqrt()) * g;
            acc.sq_update[k] = rho * acc.sq_update[k] + (1.0 - rho) * delta * delta;
            next[k] = width.round(next[k] + lr * delta);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "adadelta produced a non-finite embedding".into(),
            ));
        }
        row.assign(&next);
        Ok(())
    }
}
