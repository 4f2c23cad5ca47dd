use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig { factor: 0.5, patience: 3, min_delta: 1e-4, min_lr: 1e-7 }
    }
}

/// Reduce-on-plateau schedule monitoring a loss (lower is better).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub lr: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl Plateau {
    pub fn new(lr: f64) -> Self {
        Plateau { lr, best: None, bad_epochs: 0 }
    }

    /// Feeds one epoch's monitored value and returns the learning rate for
    /// the next epoch. A value counts as an improvement only when it beats
    /// the best so far by more than `min_delta`; after `patience`
    /// consecutive non-improving epochs the rate is multiplied by `factor`.
    pub fn step(&mut self, value: f64, cfg: &PlateauConfig) -> f64 {
        match self.best {
            Some(best) if value >= best - cfg.min_delta => {
                self.bad_epochs += 1;
                if self.bad_epochs >= cfg.patience {
                    self.lr = (self.lr * cfg.factor).max(cfg.min_lr);
                    self.bad_epochs = 0;
                }
            }
            _ => {
                self.best = Some(value);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(history: &[f64]) -> Vec<f64> {
        let cfg = PlateauConfig::default();
        let mut p = Plateau::new(1.0);
        history.iter().map(|&v| p.step(v, &cfg)).collect()
    }

    #[test]
    fn improving_history_keeps_rate() {
        assert!(run(&[1.0, 0.9, 0.8, 0.7, 0.6, 0.5]).iter().all(|&lr| lr == 1.0));
    }

    #[test]
    fn four_equal_losses_halve_once() {
        assert_eq!(run(&[0.5; 4]), vec![1.0, 1.0, 1.0, 0.5]);
    }

    /// Steps the rule by hand: improvements smaller than min_delta do not
    /// reset the counter.
    #[test]
    fn sub_threshold_wiggle_is_a_plateau() {
        let hist = [1.0, 0.99995, 1.00003, 0.99992, 1.00001, 0.99991, 1.0, 0.99993];
        assert_eq!(run(&hist), vec![1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.25, 0.25]);
    }

    #[test]
    fn real_improvement_resets_and_floor_holds() {
        assert_eq!(run(&[1.0, 1.0, 1.0, 0.5, 0.5, 0.5]), vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let cfg = PlateauConfig { min_lr: 0.3, ..Default::default() };
        let mut p = Plateau::new(1.0);
        for _ in 0..20 {
            p.step(1.0, &cfg);
        }
        assert_eq!(p.lr, 0.3);
    }
}
