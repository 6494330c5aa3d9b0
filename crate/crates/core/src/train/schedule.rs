//! Reduce-on-plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Monitor {
    /// Validation mIoU, maximized.
    Miou,
    /// Training loss, minimized.
    Loss,
}

impl std::str::FromStr for Monitor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "miou" => Ok(Monitor::Miou),
            "loss" => Ok(Monitor::Loss),
            other => Err(Error::Config(format!("unknown monitor `{other}` (expected miou or loss)"))),
        }
    }
}

impl std::fmt::Display for Monitor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Monitor::Miou => "miou",
            Monitor::Loss => "loss",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub monitor: Monitor,
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    /// Relative improvement a value must beat to count as better.
    pub threshold: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            monitor: Monitor::Miou,
            patience: 5,
            factor: 0.5,
            min_lr: 1e-6,
            threshold: 1e-4,
        }
    }
}

impl PlateauConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::Config("scheduler patience must be >= 1".into()));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::Config(format!(
                "scheduler factor must lie in (0, 1), got {}",
                self.factor
            )));
        }
        if !(self.min_lr >= 0.0) || !(self.threshold >= 0.0) {
            return Err(Error::Config("scheduler min_lr and threshold must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Plateau {
    cfg: PlateauConfig,
    lr: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

impl Plateau {
    pub fn new(cfg: PlateauConfig, lr: f64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            lr,
            best: None,
            bad_epochs: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    fn improves(&self, value: f64, best: f64) -> bool {
        match self.cfg.monitor {
            Monitor::Miou => value > best + best.abs() * self.cfg.threshold,
            Monitor::Loss => value < best - best.abs() * self.cfg.threshold,
        }
    }

    /// Feeds one epoch's monitored value and returns the learning rate for
    /// the next epoch. The rate drops once more than `patience` consecutive
    /// epochs fail to improve, then the counter restarts.
    pub fn observe(&mut self, value: f64) -> f64 {
        match self.best {
            Some(b) if !self.improves(value, b) => self.bad_epochs += 1,
            _ => {
                self.best = Some(value);
                self.bad_epochs = 0;
            }
        }
        if self.bad_epochs > self.cfg.patience {
            // Never raises a rate that already sits below min_lr.
            self.lr = self.lr.min((self.lr * self.cfg.factor).max(self.cfg.min_lr));
            self.bad_epochs = 0;
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halves_after_patience_stagnant_epochs() {
        let mut s = Plateau::new(PlateauConfig::default(), 1e-3).unwrap();
        assert_eq!(s.observe(0.5), 1e-3);
        for _ in 0..5 {
            assert_eq!(s.observe(0.5), 1e-3);
        }
        assert_eq!(s.observe(0.5), 5e-4);
        // Counter restarts after a reduction.
        for _ in 0..5 {
            assert_eq!(s.observe(0.4), 5e-4);
        }
        assert_eq!(s.observe(0.4), 2.5e-4);
    }

    #[test]
    fn improvement_resets_and_threshold_is_relative() {
        let mut s = Plateau::new(PlateauConfig::default(), 1e-3).unwrap();
        s.observe(0.5);
        for _ in 0..5 {
            s.observe(0.5 * (1.0 + 0.5e-4));
        }
        assert_eq!(s.observe(0.6), 1e-3);
        for _ in 0..5 {
            s.observe(0.6);
        }
        assert_eq!(s.lr(), 1e-3);
    }

    #[test]
    fn floors_at_min_lr_and_supports_loss_mode() {
        let cfg = PlateauConfig {
            monitor: Monitor::Loss,
            patience: 1,
            min_lr: 3e-4,
            ..Default::default()
        };
        let mut s = Plateau::new(cfg, 1e-3).unwrap();
        s.observe(1.0);
        s.observe(1.0);
        assert_eq!(s.observe(1.0), 5e-4);
        s.observe(1.0);
        assert_eq!(s.observe(1.0), 3e-4);
        assert_eq!(s.observe(0.5), 3e-4);
    }

    #[test]
    fn rate_below_min_lr_is_left_alone() {
        let cfg = PlateauConfig {
            patience: 1,
            ..Default::default()
        };
        let mut s = Plateau::new(cfg, 1e-9).unwrap();
        for _ in 0..6 {
            assert_eq!(s.observe(0.1), 1e-9);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            PlateauConfig { patience: 0, ..Default::default() },
            PlateauConfig { factor: 1.0, ..Default::default() },
            PlateauConfig { factor: 0.0, ..Default::default() },
        ] {
            assert!(matches!(Plateau::new(cfg, 1e-3), Err(Error::Config(_))));
        }
    }
}
