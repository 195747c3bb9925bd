//! Adadelta with a multiplicative step scale.
//!
//! ```text
//! E[g^2]  <- rho * E[g^2] + (1 - rho) * g^2
//! dx      <- -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
//! E[dx^2] <- rho * E[dx^2] + (1 - rho) * dx^2
//! x       <- x + lr_scale * dx
//! ```
//!
//! The accumulators track the unscaled step, so `lr_scale` only shrinks what
//! is applied to the parameters.

use super::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_RHO: f64 = 0.95;
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct AdadeltaState {
    pub rho: f64,
    pub epsilon: f64,
    pub lr_scale: f64,
    accum_grad: Vec<Vec<f64>>,
    accum_update: Vec<Vec<f64>>,
}

impl AdadeltaState {
    pub fn new(rho: f64, epsilon: f64, lr_scale: f64) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::Invalid(format!("adadelta rho must be in (0, 1), got {rho}")));
        }
        if epsilon.is_nan() || epsilon <= 0.0 {
            return Err(Error::Invalid(format!(
                "adadelta epsilon must be positive, got {epsilon}"
            )));
        }
        if !lr_scale.is_finite() || lr_scale < 0.0 {
            return Err(Error::Invalid(format!("invalid learning-rate scale {lr_scale}")));
        }
        Ok(Self {
            rho,
            epsilon,
            lr_scale,
            accum_grad: Vec::new(),
            accum_update: Vec::new(),
        })
    }

    pub fn with_lr(lr_scale: f64) -> Result<Self> {
        Self::new(DEFAULT_RHO, DEFAULT_EPSILON, lr_scale)
    }

    pub fn accumulators(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.accum_grad, &self.accum_update)
    }

    /// Applies one update. Accumulators are created on the first call and
    /// the parameter list must keep the same shapes afterwards.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.accum_grad.is_empty() {
            self.accum_grad = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.accum_update = self.accum_grad.clone();
        }
        if self.accum_grad.len() != params.len() {
            return Err(Error::Shape("parameter list changed between steps".into()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.accum_grad[i].len() != p.len() {
                return Err(Error::Shape(format!(
                    "parameter {i}: shape {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }

        let (rho, eps, lr) = (self.rho, self.epsilon, self.lr_scale);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let eg = &mut self.accum_grad[i];
            let ex = &mut self.accum_update[i];
            for (((x, &gv), a), u) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(eg.iter_mut())
                .zip(ex.iter_mut())
            {
                if gv == 0.0 {
                    // same result as the general update with dx = 0
                    *a *= rho;
                    *u *= rho;
                    continue;
                }
                *a = rho * *a + (1.0 - rho) * gv * gv;
                let dx = -((*u + eps).sqrt() / (*a + eps).sqrt()) * gv;
                *u = rho * *u + (1.0 - rho) * dx * dx;
                *x += lr * dx;
            }
        }
        Ok(())
    }
}

/// Adadelta for a matrix whose gradient is non-zero on a few rows per step.
///
/// A row left out of a step only has its accumulators multiplied by `rho`;
/// that decay is deferred and applied as `rho^skipped` the next time the row
/// is updated, so the result matches [`AdadeltaState`] up to rounding.
#[derive(Debug, Clone)]
pub struct RowAdadelta {
    pub rho: f64,
    pub epsilon: f64,
    pub lr_scale: f64,
    cols: usize,
    accum_grad: Vec<f64>,
    accum_update: Vec<f64>,
    last: Vec<u64>,
    steps: u64,
    seen: Vec<bool>,
}

impl RowAdadelta {
    pub fn new(rho: f64, epsilon: f64, lr_scale: f64, rows: usize, cols: usize) -> Result<Self> {
        let base = AdadeltaState::new(rho, epsilon, lr_scale)?;
        Ok(Self {
            rho: base.rho,
            epsilon: base.epsilon,
            lr_scale: base.lr_scale,
            cols,
            accum_grad: vec![0.0; rows * cols],
            accum_update: vec![0.0; rows * cols],
            last: vec![0; rows],
            steps: 0,
            seen: vec![false; rows],
        })
    }

    /// One update where only `rows` of `grad` may be non-zero. Repeated row
    /// indices are updated once.
    pub fn step(&mut self, param: &mut Tensor, grad: &Tensor, rows: &[usize]) -> Result<()> {
        let n = self.last.len();
        if param.shape() != [n, self.cols] || grad.shape() != [n, self.cols] {
            return Err(Error::Shape(format!(
                "row optimizer holds {n}x{}, got parameter {:?} and gradient {:?}",
                self.cols,
                param.shape(),
                grad.shape()
            )));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Shape(format!("row {r} out of range ({n} rows)")));
        }
        self.steps += 1;
        let (rho, eps, lr, c) = (self.rho, self.epsilon, self.lr_scale, self.cols);
        for &r in rows {
            if self.seen[r] {
                continue;
            }
            self.seen[r] = true;
            let decay = rho.powi((self.steps - self.last[r] - 1) as i32);
            self.last[r] = self.steps;
            let span = r * c..(r + 1) * c;
            let xs = &mut param.data_mut()[span.clone()];
            let gs = &grad.data()[span.clone()];
            let eg = &mut self.accum_grad[span.clone()];
            let ex = &mut self.accum_update[span];
            for (((x, &gv), a), u) in xs.iter_mut().zip(gs).zip(eg.iter_mut()).zip(ex.iter_mut()) {
                *a = rho * (*a * decay) + (1.0 - rho) * gv * gv;
                let dx = -((*u * decay + eps).sqrt() / (*a + eps).sqrt()) * gv;
                *u = rho * (*u * decay) + (1.0 - rho) * dx * dx;
                *x += lr * dx;
            }
        }
        for &r in rows {
            self.seen[r] = false;
        }
        Ok(())
    }

    /// Accumulators with all deferred decay applied.
    pub fn accumulators(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.cols;
        let mut g = self.accum_grad.clone();
        let mut u = self.accum_update.clone();
        for (r, &last) in self.last.iter().enumerate() {
            let decay = self.rho.powi((self.steps - last) as i32);
            g[r * c..(r + 1) * c].iter_mut().for_each(|v| *v *= decay);
            u[r * c..(r + 1) * c].iter_mut().for_each(|v| *v *= decay);
        }
        (g, u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // E[g^2] = 0.05, dx = -sqrt(1e-6) / sqrt(0.05 + 1e-6)
        let mut state = AdadeltaState::new(0.95, 1e-6, 1.0).unwrap();
        let mut x = scalar(0.0);
        state.step(&mut [&mut x], &[&scalar(1.0)]).unwrap();
        let expected = -(1e-6f64).sqrt() / (0.05f64 + 1e-6).sqrt();
        assert!((x.data()[0] - expected).abs() < 1e-15);
        assert!((x.data()[0] + 0.0044721).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_only_decays_accumulators() {
        let mut state = AdadeltaState::new(0.95, 1e-6, 1.0).unwrap();
        let mut x = scalar(2.0);
        state.step(&mut [&mut x], &[&scalar(1.0)]).unwrap();
        let before = x.data()[0];
        let (g0, u0) = (state.accumulators().0[0][0], state.accumulators().1[0][0]);
        state.step(&mut [&mut x], &[&scalar(0.0)]).unwrap();
        assert_eq!(x.data()[0], before);
        assert!((state.accumulators().0[0][0] - 0.95 * g0).abs() < 1e-18);
        assert!((state.accumulators().1[0][0] - 0.95 * u0).abs() < 1e-18);
    }

    #[test]
    fn lr_scale_is_linear() {
        let run = |lr: f64| {
            let mut state = AdadeltaState::new(0.95, 1e-6, lr).unwrap();
            let mut x = scalar(0.0);
            state.step(&mut [&mut x], &[&scalar(0.7)]).unwrap();
            x.data()[0]
        };
        let ratio = run(0.1) / run(0.001);
        assert!((ratio - 100.0).abs() < 1e-9);
    }

    #[test]
    fn quadratic_loss_decreases_monotonically() {
        // loss = (x - 3)^2
        let mut state = AdadeltaState::new(0.95, 1e-6, 1.0).unwrap();
        let mut x = scalar(0.0);
        let mut prev = f64::INFINITY;
        for _ in 0..500 {
            let v = x.data()[0];
            let loss = (v - 3.0).powi(2);
            assert!(loss <= prev);
            prev = loss;
            let g = scalar(2.0 * (v - 3.0));
            state.step(&mut [&mut x], &[&g]).unwrap();
        }
        assert!(prev < 9.0);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(AdadeltaState::new(1.0, 1e-6, 1.0).is_err());
        assert!(AdadeltaState::new(0.9, 0.0, 1.0).is_err());
        let mut s = AdadeltaState::with_lr(1.0).unwrap();
        let mut x = scalar(0.0);
        let g = Tensor::zeros(&[2]);
        assert!(s.step(&mut [&mut x], &[&g]).is_err());
    }

    #[test]
    fn row_variant_matches_dense_updates() {
        use rand::{Rng as _, SeedableRng};
        let mut rng = crate::rng::Rng::seed_from_u64(5);
        let (rows, cols) = (7, 3);
        let init: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut dense_x = Tensor::from_vec(&[rows, cols], init.clone()).unwrap();
        let mut row_x = dense_x.clone();
        let mut dense = AdadeltaState::new(0.9, 1e-6, 0.5).unwrap();
        let mut sparse = RowAdadelta::new(0.9, 1e-6, 0.5, rows, cols).unwrap();
        for _ in 0..60 {
            let touched: Vec<usize> = (0..3).map(|_| rng.random_range(0..rows)).collect();
            let mut g = Tensor::zeros(&[rows, cols]);
            for &r in &touched {
                for v in g.row_mut(r) {
                    *v = rng.random_range(-2.0..2.0);
                }
            }
            dense.step(&mut [&mut dense_x], &[&g]).unwrap();
            sparse.step(&mut row_x, &g, &touched).unwrap();
        }
        for (a, b) in dense_x.data().iter().zip(row_x.data()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
        }
        let (g, u) = sparse.accumulators();
        for (a, b) in dense.accumulators().0[0].iter().zip(&g) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
        for (a, b) in dense.accumulators().1[0].iter().zip(&u) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}
