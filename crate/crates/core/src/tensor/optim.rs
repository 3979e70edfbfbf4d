use super::Tensor;
use crate::error::{Error, Result};

/// How [`clip_gradients`] interprets its bound.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ClipMode {
    /// Clamp every gradient scalar into `[-bound, bound]`.
    #[default]
    Elementwise,
    /// Rescale all gradients together so their global L2 norm is at most `bound`.
    GlobalNorm,
}

/// Clips `grads` in place and returns how many scalars were changed.
pub fn clip_gradients(grads: &mut [Tensor], bound: f64, mode: ClipMode) -> Result<usize> {
    if !(bound > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "clip bound must be positive, got {bound}"
        )));
    }
    match mode {
        ClipMode::Elementwise => {
            let mut clipped = 0;
            for g in grads.iter_mut() {
                for v in g.data_mut() {
                    if v.abs() > bound {
                        *v = v.clamp(-bound, bound);
                        clipped += 1;
                    }
                }
            }
            Ok(clipped)
        }
        ClipMode::GlobalNorm => {
            let norm = grads
                .iter()
                .flat_map(|g| g.data())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm <= bound {
                return Ok(0);
            }
            let scale = bound / norm;
            let mut changed = 0;
            for g in grads.iter_mut() {
                for v in g.data_mut() {
                    if *v != 0.0 {
                        changed += 1;
                    }
                    *v *= scale;
                }
            }
            Ok(changed)
        }
    }
}

/// Classical momentum SGD with the L2 penalty folded into the gradient:
///
/// ```text
/// v ← momentum · v − lr · (g + weight_decay · θ)
/// θ ← θ + v
/// ```
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdMomentum {
    /// Applies one update. Nothing is modified if any gradient is non-finite.
    pub fn step(&self, params: &mut [Tensor], grads: &[Tensor], velocity: &mut [Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != velocity.len() {
            return Err(Error::shape(
                "sgd_momentum_step",
                format!(
                    "{} params, {} grads, {} velocity buffers",
                    params.len(),
                    grads.len(),
                    velocity.len()
                ),
            ));
        }
        for (i, ((p, g), v)) in params.iter().zip(grads).zip(velocity.iter()).enumerate() {
            p.expect_same_shape(g, "sgd_momentum_step")?;
            p.expect_same_shape(v, "sgd_momentum_step")?;
            if let Some(pos) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {i} at flat index {pos} is {}",
                    g.data()[pos]
                )));
            }
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
            for ((theta, &grad), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vel = self.momentum * *vel - self.lr * (grad + self.weight_decay * *theta);
                *theta += *vel;
            }
        }
        Ok(())
    }
}
