//! Training regimes, the Adam optimizer and plateau-driven learning-rate decay.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::Param;

pub const NUM_STAGES: usize = 4;

/// Which encoder stage carries the auxiliary loss over the course of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regime {
    Normal,
    SingleAux(usize),
    SwitchedAux {
        from_stage: usize,
        to_stage: usize,
        switch_fraction: f64,
    },
}

impl Regime {
    /// Stage-2 supervision handed over to stage 1 halfway through.
    pub fn switched_default() -> Self {
        Regime::SwitchedAux {
            from_stage: 2,
            to_stage: 1,
            switch_fraction: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stage_ok = |s: usize| (1..=NUM_STAGES).contains(&s);
        match *self {
            Regime::Normal => Ok(()),
            Regime::SingleAux(s) if stage_ok(s) => Ok(()),
            Regime::SwitchedAux {
                from_stage,
                to_stage,
                switch_fraction,
            } if stage_ok(from_stage)
                && stage_ok(to_stage)
                && switch_fraction > 0.0
                && switch_fraction < 1.0 =>
            {
                Ok(())
            }
            other => invalid(format!("invalid regime {other}")),
        }
    }

    /// Short label used in logs and reports.
    pub fn name(&self) -> &'static str {
        match self {
            Regime::Normal => "normal",
            Regime::SingleAux(_) => "single",
            Regime::SwitchedAux { .. } => "switched",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::Normal => write!(f, "normal"),
            Regime::SingleAux(s) => write!(f, "single:{s}"),
            Regime::SwitchedAux {
                from_stage,
                to_stage,
                switch_fraction,
            } => write!(f, "switched:{from_stage}:{to_stage}:{switch_fraction}"),
        }
    }
}

impl FromStr for Regime {
    type Err = Error;

    /// Accepts `normal`, `single[:stage]`, and
    /// `switched[:from[:to[:fraction]]]`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize, default: usize| -> Result<usize> {
            parts.get(i).map_or(Ok(default), |p| {
                p.parse()
                    .map_err(|_| Error::Invalid(format!("bad stage `{p}` in regime `{s}`")))
            })
        };
        let regime = match parts[0].to_ascii_lowercase().as_str() {
            "normal" if parts.len() == 1 => Regime::Normal,
            "single" if parts.len() <= 2 => Regime::SingleAux(num(1, 2)?),
            "switched" if parts.len() <= 4 => Regime::SwitchedAux {
                from_stage: num(1, 2)?,
                to_stage: num(2, 1)?,
                switch_fraction: parts.get(3).map_or(Ok(0.5), |p| {
                    p.parse()
                        .map_err(|_| Error::Invalid(format!("bad fraction `{p}` in regime `{s}`")))
                })?,
            },
            _ => return invalid(format!("unknown regime `{s}`")),
        };
        regime.validate()?;
        Ok(regime)
    }
}

impl Serialize for Regime {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Regime {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Stage receiving the auxiliary loss at `epoch` (0-based), or `None`.
pub fn aux_stage_for_epoch(regime: Regime, epoch: usize, total_epochs: usize) -> Result<Option<usize>> {
    if epoch >= total_epochs {
        return invalid(format!("epoch {epoch} outside 0..{total_epochs}"));
    }
    Ok(match regime {
        Regime::Normal => None,
        Regime::SingleAux(s) => Some(s),
        Regime::SwitchedAux {
            from_stage,
            to_stage,
            switch_fraction,
        } => {
            let switch_epoch = (switch_fraction * total_epochs as f64).floor() as usize;
            Some(if epoch < switch_epoch { from_stage } else { to_stage })
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the global gradient to at most this L2 norm. Off when `None`.
    pub clip_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_grad_norm: None,
        }
    }
}

/// ReduceLROnPlateau in "max" mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 5,
            min_delta: 1e-4,
            min_lr: 1e-7,
        }
    }
}

/// Optimizer moments plus learning-rate scheduling state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub adam: AdamConfig,
    pub plateau: PlateauConfig,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
    pub lr: f64,
    pub stale_epochs: usize,
    pub best_metric: f64,
}

impl OptState {
    pub fn new(params: &[Param], lr: f64, adam: AdamConfig, plateau: PlateauConfig) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return invalid(format!("learning rate must be positive, got {lr}"));
        }
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Ok(Self {
            adam,
            plateau,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            lr,
            stale_epochs: 0,
            best_metric: f64::NEG_INFINITY,
        })
    }

    /// One bias-corrected Adam update from the gradients stored on `params`.
    ///
    /// Parameters without a gradient are skipped. Nothing is modified if any
    /// gradient is non-finite.
    pub fn adam_step(&mut self, params: &mut [Param]) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return invalid(format!(
                "optimizer tracks {} parameters, got {}",
                self.first_moment.len(),
                params.len()
            ));
        }
        let mut sq_norm = 0.0;
        for p in params.iter() {
            if let Some(g) = &p.value.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        param: p.name.clone(),
                    });
                }
                sq_norm += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let clip = match self.adam.clip_grad_norm {
            Some(max) if sq_norm.sqrt() > max => max / sq_norm.sqrt(),
            _ => 1.0,
        };

        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.adam;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in params
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            // not reached by the loss this step: moments and value stay put
            let Some(grad) = p.value.grad.take() else {
                continue;
            };
            for (((w, mi), vi), g) in p
                .value
                .values_mut()
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut())
                .zip(&grad)
            {
                let g = g * clip;
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                *w -= self.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
            }
            p.value.grad = Some(grad);
        }
        Ok(())
    }

    /// Epoch-end update from a validation metric where larger is better.
    /// Returns `true` when the learning rate was reduced.
    pub fn plateau_step(&mut self, val_metric: f64) -> bool {
        if val_metric > self.best_metric + self.plateau.min_delta {
            self.best_metric = val_metric;
            self.stale_epochs = 0;
            return false;
        }
        self.stale_epochs += 1;
        if self.stale_epochs > self.plateau.patience {
            self.stale_epochs = 0;
            let next = (self.lr * self.plateau.factor).max(self.plateau.min_lr);
            let reduced = next < self.lr;
            self.lr = next.min(self.lr);
            return reduced;
        }
        false
    }
}
