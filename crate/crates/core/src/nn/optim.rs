use serde::{Deserialize, Serialize};

use super::Param;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: i32,
    moments: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-5,
            weight_decay: 0.01,
            step: 0,
            moments: Vec::new(),
        }
    }
}

impl AdamW {
    /// Applies one update. `params` must be passed in the same order every call.
    pub fn step(&mut self, params: &mut [&mut Param], lr: f32) {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (vec![0.0; p.value.len()], vec![0.0; p.value.len()]))
                .collect();
        }
        assert_eq!(self.moments.len(), params.len(), "parameter list changed");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2) = (self.beta1, self.beta2);
        for (p, (m, v)) in params.iter_mut().zip(&mut self.moments) {
            let decay = 1.0 - lr * self.weight_decay;
            for (((w, &g), m), v) in p
                .value
                .iter_mut()
                .zip(&p.grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *w = *w * decay - lr * update;
            }
        }
    }
}

/// One-cycle schedule: cosine warm-up from `max_lr / div` to `max_lr` over
/// the first `pct_start` of steps, then cosine annealing to `max_lr / div_final`.
/// The first-moment coefficient moves inversely between `moms.0` and `moms.1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub max_lr: f32,
    pub total_steps: usize,
    pub pct_start: f32,
    pub div: f32,
    pub div_final: f32,
    pub moms: (f32, f32),
}

impl OneCycle {
    pub fn new(max_lr: f32, total_steps: usize) -> Self {
        Self {
            max_lr,
            total_steps: total_steps.max(1),
            pct_start: 0.25,
            div: 25.0,
            div_final: 1e5,
            moms: (0.95, 0.85),
        }
    }

    fn phase(&self, step: usize) -> (bool, f32) {
        let warm = ((self.total_steps as f32 * self.pct_start).round() as usize).max(1);
        if step < warm {
            (true, step as f32 / warm as f32)
        } else {
            let rest = (self.total_steps - warm).max(1);
            (false, ((step - warm) as f32 / rest as f32).min(1.0))
        }
    }

    fn cos_interp(start: f32, end: f32, t: f32) -> f32 {
        end + (start - end) * 0.5 * (1.0 + (std::f32::consts::PI * t).cos())
    }

    pub fn lr(&self, step: usize) -> f32 {
        let (warming, t) = self.phase(step);
        if warming {
            Self::cos_interp(self.max_lr / self.div, self.max_lr, t)
        } else {
            Self::cos_interp(self.max_lr, self.max_lr / self.div_final, t)
        }
    }

    pub fn beta1(&self, step: usize) -> f32 {
        let (warming, t) = self.phase(step);
        if warming {
            Self::cos_interp(self.moms.0, self.moms.1, t)
        } else {
            Self::cos_interp(self.moms.1, self.moms.0, t)
        }
    }
}
