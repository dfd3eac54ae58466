use super::Param;
use crate::error::{CirkdError, Result};

/// One SGD-with-momentum update on raw slices:
/// `buffer = momentum * buffer + grad; param -= lr * buffer`.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    buffer: &mut [f64],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != buffer.len() {
        return Err(CirkdError::shape(
            "sgd_momentum_step",
            format!(
                "params {}, grads {}, buffer {}",
                params.len(),
                grads.len(),
                buffer.len()
            ),
        ));
    }
    for ((p, g), b) in params.iter_mut().zip(grads).zip(buffer.iter_mut()) {
        *b = momentum * *b + g;
        *p -= lr * *b;
    }
    Ok(())
}

/// Momentum SGD over an ordered list of parameters. Buffers are created on
/// the first step and matched to parameters by position afterwards.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    buffers: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            buffers: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Param>, lr: f64) -> Result<()> {
        if self.buffers.is_empty() {
            self.buffers = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.buffers.len() != params.len() {
            return Err(CirkdError::shape(
                "Sgd::step",
                format!("{} parameters for {} buffers", params.len(), self.buffers.len()),
            ));
        }
        for (p, buf) in params.into_iter().zip(self.buffers.iter_mut()) {
            sgd_momentum_step(&mut p.value, &p.grad, buf, lr, self.momentum)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_is_noop() {
        let mut p = vec![1.0, -2.0];
        let mut buf = vec![0.0; 2];
        sgd_momentum_step(&mut p, &[3.0, 4.0], &mut buf, 0.0, 0.9).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn zero_momentum_is_plain_descent() {
        let mut p = vec![1.0, -2.0];
        let mut buf = vec![5.0, 5.0];
        sgd_momentum_step(&mut p, &[0.5, 1.0], &mut buf, 0.1, 0.0).unwrap();
        assert_eq!(p, vec![1.0 - 0.05, -2.0 - 0.1]);
    }

    #[test]
    fn two_constant_steps_move_2_9_g() {
        let g = [0.25, -1.5];
        let mut p = vec![0.0, 0.0];
        let mut buf = vec![0.0; 2];
        for _ in 0..2 {
            sgd_momentum_step(&mut p, &g, &mut buf, 1.0, 0.9).unwrap();
        }
        for (pi, gi) in p.iter().zip(g) {
            assert!((pi + 2.9 * gi).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![0.0; 2];
        assert!(sgd_momentum_step(&mut p, &[1.0], &mut [0.0, 0.0], 0.1, 0.9).is_err());
        let mut opt = Sgd::new(0.9);
        let mut a = Param::zeros(vec![2]);
        opt.step(vec![&mut a], 0.1).unwrap();
        let mut b = Param::zeros(vec![2]);
        assert!(opt.step(vec![&mut a, &mut b], 0.1).is_err());
    }
}
