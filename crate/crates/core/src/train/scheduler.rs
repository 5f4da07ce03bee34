//! Warmup, plateau decay, progressive unfreezing and early stopping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Group;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub patience: u32,
    pub factor: f64,
    pub warmup_epochs: u32,
    pub early_stop: u32,
    pub max_epoch: u32,
    pub groups: Group,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            lr: 1e-5,
            min_lr: 1e-8,
            patience: 5,
            factor: 0.1,
            warmup_epochs: 5,
            early_stop: 20,
            max_epoch: 100,
            groups: 3,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.min_lr > 0.0 && self.min_lr <= self.lr && self.lr.is_finite()) {
            return bad(format!("need 0 < min_lr <= lr, got {} and {}", self.min_lr, self.lr));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return bad(format!("factor must be in (0, 1), got {}", self.factor));
        }
        if self.max_epoch == 0 || self.early_stop == 0 || self.groups == 0 {
            return bad("max_epoch, early_stop and groups must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Plateau,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Plateau => "plateau",
        }
    }
}

/// What one epoch-end tick did.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TickOutcome {
    pub improved: bool,
    pub decayed: bool,
    pub unfrozen: Option<Group>,
    pub stop: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scheduler {
    pub config: SchedulerConfig,
    /// Epochs completed.
    pub epoch: u32,
    pub warmup_remaining: u32,
    /// Plateau learning rate; warmup epochs ramp toward it.
    pub lr: f64,
    /// Groups `1..=current_group` are trainable.
    pub current_group: Group,
    pub best: f64,
    pub best_epoch: Option<u32>,
    pub counter: u32,
    pub early_stop_counter: u32,
    pub exhausted: bool,
    pub stopped: bool,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Scheduler {
            config,
            epoch: 0,
            warmup_remaining: config.warmup_epochs,
            lr: config.lr,
            current_group: 1,
            best: f64::NEG_INFINITY,
            best_epoch: None,
            counter: 0,
            early_stop_counter: 0,
            exhausted: false,
            stopped: false,
        })
    }

    /// Phase of the epoch about to run.
    pub fn phase(&self) -> Phase {
        if self.warmup_remaining > 0 {
            Phase::Warmup
        } else {
            Phase::Plateau
        }
    }

    fn at_floor(&self) -> bool {
        self.lr <= self.config.min_lr * (1.0 + 1e-6)
    }

    /// Learning rate for batch `b` of `n` in the coming epoch: a linear ramp
    /// from `min_lr` during warmup, constant otherwise.
    pub fn batch_lr(&self, b: usize, n: usize) -> f64 {
        match self.phase() {
            Phase::Warmup => {
                let mlr = self.config.min_lr;
                mlr + (self.lr - mlr) * (b + 1) as f64 / n.max(1) as f64
            }
            Phase::Plateau => self.lr,
        }
    }

    /// Feeds one epoch's validation score.
    pub fn tick(&mut self, val: f64) -> Result<TickOutcome> {
        if self.stopped {
            return Err(Error::SchedulerStopped);
        }
        let mut out = TickOutcome::default();
        if val > self.best {
            self.best = val;
            self.best_epoch = Some(self.epoch);
            self.counter = 0;
            self.early_stop_counter = 0;
            out.improved = true;
        }
        if self.warmup_remaining > 0 {
            self.warmup_remaining -= 1;
        } else {
            let c = self.config;
            if !out.improved {
                self.counter += 1;
            }
            if self.exhausted {
                if !out.improved {
                    self.early_stop_counter += 1;
                }
            } else if self.at_floor() && self.counter >= c.patience {
                if self.current_group < c.groups {
                    self.current_group += 1;
                    self.lr = c.lr;
                    self.counter = 0;
                    self.warmup_remaining = 1;
                    out.unfrozen = Some(self.current_group);
                } else {
                    self.exhausted = true;
                }
            } else if self.counter > c.patience {
                let next = self.lr * c.factor;
                self.lr = if next <= c.min_lr * (1.0 + 1e-6) {
                    c.min_lr
                } else {
                    next
                };
                self.counter = 0;
                out.decayed = true;
            }
        }
        self.epoch += 1;
        if self.early_stop_counter >= self.config.early_stop || self.epoch >= self.config.max_epoch {
            self.stopped = true;
        }
        out.stop = self.stopped;
        Ok(out)
    }
}
