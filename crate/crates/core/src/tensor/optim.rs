use super::Tensor;
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v = momentum·v + grad + weight_decay·param; param -= lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Applies one update. Parameters must arrive in the same order on every
    /// call; velocity buffers are matched by position.
    pub fn step<'a>(
        &mut self,
        updates: impl IntoIterator<Item = (&'a mut Tensor, &'a Tensor)>,
    ) -> Result<()> {
        // negated so that NaN is rejected too
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        for (slot, (param, grad)) in updates.into_iter().enumerate() {
            if param.shape() != grad.shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("param {:?} vs grad {:?}", param.shape(), grad.shape()),
                ));
            }
            if slot == self.velocity.len() {
                self.velocity.push(vec![0.0; param.numel()]);
            }
            let v = &mut self.velocity[slot];
            if v.len() != param.numel() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("velocity {} vs param {}", v.len(), param.numel()),
                ));
            }
            for ((p, &g), vi) in param.data_mut().iter_mut().zip(grad.data()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + g + self.weight_decay * *p;
                *p -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Multiply by `factor` at each milestone epoch (0-based, inclusive).
    StepDecay { milestones: Vec<usize>, factor: f32 },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f32, epoch: usize) -> f32 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::StepDecay { milestones, factor } => {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                base * factor.powi(passed as i32)
            }
        }
    }
}
