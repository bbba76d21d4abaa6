//! Adam optimizer with bias correction.

use super::array::Array;
use super::{AutodiffError, Result};

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Array>,
    v: Vec<Array>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over the full parameter list. Moment estimates are created
    /// lazily on the first call and must keep matching shapes afterwards.
    pub fn step(&mut self, params: &mut [Array], grads: &[Array]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(AutodiffError::BadArray(format!(
                "adam: {} params but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Array::zeros(p.shape())).collect();
            self.v = params.iter().map(|p| Array::zeros(p.shape())).collect();
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adam",
                    a: p.shape().to_vec(),
                    b: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(AutodiffError::NonFinite("adam gradient"));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for ((pv, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Optimizer state as named arrays, for exact training resume.
    pub fn state_arrays(&self) -> Vec<(String, Array)> {
        let mut out = vec![(
            "adam.t".to_string(),
            Array::scalar(self.t as f64),
        )];
        for (i, m) in self.m.iter().enumerate() {
            out.push((format!("adam.m.{i}"), m.clone()));
        }
        for (i, v) in self.v.iter().enumerate() {
            out.push((format!("adam.v.{i}"), v.clone()));
        }
        out
    }

    pub fn restore_state(&mut self, t: u64, m: Vec<Array>, v: Vec<Array>) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}
