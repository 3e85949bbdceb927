use serde::{Deserialize, Serialize};

/// Piecewise-linear learning rate over `[0, warmup + plateau + anneal]`
/// epochs: `initial -> peak` during warm-up, constant `peak`, then
/// `peak -> final_lr` during annealing. Fractional epochs are allowed so the
/// rate can change every step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub peak: f64,
    pub final_lr: f64,
    pub warmup: usize,
    pub plateau: usize,
    pub anneal: usize,
}

impl LrSchedule {
    pub fn constant(lr: f64, epochs: usize) -> Self {
        LrSchedule {
            initial: lr,
            peak: lr,
            final_lr: lr,
            warmup: 0,
            plateau: epochs,
            anneal: 0,
        }
    }

    pub fn total(&self) -> usize {
        self.warmup + self.plateau + self.anneal
    }

    pub fn at(&self, epoch: f64) -> f64 {
        let (w, p, a) = (self.warmup as f64, self.plateau as f64, self.anneal as f64);
        if epoch < w {
            self.initial + (self.peak - self.initial) * epoch / w
        } else if epoch <= w + p || a == 0.0 {
            self.peak
        } else if epoch < w + p + a {
            self.peak + (self.final_lr - self.peak) * (epoch - w - p) / a
        } else {
            self.final_lr
        }
    }
}

/// KL weight: 0 before `start`, `final_beta` from `end` on, linear between.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub start: usize,
    pub end: usize,
    pub final_beta: f64,
}

impl BetaSchedule {
    pub fn at(&self, epoch: f64) -> f64 {
        let (s, e) = (self.start as f64, self.end as f64);
        if epoch < s {
            0.0
        } else if epoch >= e {
            self.final_beta
        } else {
            self.final_beta * (epoch - s) / (e - s)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_breakpoints() {
        let s = LrSchedule {
            initial: 0.1,
            peak: 1.0,
            final_lr: 0.5,
            warmup: 2,
            plateau: 1,
            anneal: 2,
        };
        let got: Vec<f64> = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 9.0].iter().map(|&e| s.at(e)).collect();
        let want = [0.1, 0.55, 1.0, 1.0, 0.75, 0.5, 0.5];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{got:?}");
        }
    }

    #[test]
    fn beta_step_when_degenerate() {
        let b = BetaSchedule {
            start: 3,
            end: 3,
            final_beta: 2.0,
        };
        assert_eq!(b.at(2.0), 0.0);
        assert_eq!(b.at(3.0), 2.0);
    }
}
