use serde::{Deserialize, Serialize};

use crate::error::{AsrError, Result};

/// Training regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// MMSE only, all scales fully open.
    Base,
    /// MMSE plus the appearance regularizer from the first epoch.
    #[serde(alias = "reg")]
    Regularized,
    /// Gated scales opened gradually; regularizer from a later epoch.
    #[serde(alias = "incr")]
    Incremental,
    /// Conventional autoencoder.
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::Regularized, Variant::Incremental, Variant::Baseline];

    pub fn default_max_epochs(self) -> usize {
        match self {
            Variant::Incremental => 55,
            _ => 50,
        }
    }

    /// Short name used on the command line and in file names.
    pub fn short_name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Regularized => "reg",
            Variant::Incremental => "incr",
            Variant::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.short_name() == s || format!("{v:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| AsrError::Config(format!("unknown variant `{s}` (expected base, reg, incr or baseline)")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short_name())
    }
}

/// Gate and regularizer schedule of the incremental regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub gate_init: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Last epoch run at the initial gate; increments are applied after it.
    pub gate_start_epoch: Vec<usize>,
    pub reg_start_epoch: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            gate_init: vec![1.0, 0.01, 0.01],
            gamma: vec![0.0, 0.1, 0.1],
            gate_start_epoch: vec![0, 8, 20],
            reg_start_epoch: 35,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self, scales: usize) -> Result<()> {
        if self.gate_init.len() != scales || self.gamma.len() != scales || self.gate_start_epoch.len() != scales {
            return Err(AsrError::Config(format!("schedule must list one entry per scale ({scales})")));
        }
        if self.gate_init.iter().any(|g| !(0.0..=1.0).contains(g)) || self.gamma.iter().any(|g| *g < 0.0) {
            return Err(AsrError::Config("gate_init must lie in [0, 1] and gamma be non-negative".into()));
        }
        Ok(())
    }
}

/// Gates and regularizer flag in force during one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochPlan {
    pub gates: Vec<f64>,
    pub reg_active: bool,
}

/// Incremental schedule for 1-based `epoch`: each gate stays at its
/// initial value through its start epoch, then grows by `gamma` per epoch,
/// clamped at 1.
pub fn schedule_step(epoch: usize, cfg: &ScheduleConfig) -> EpochPlan {
    let gates = cfg
        .gate_init
        .iter()
        .zip(&cfg.gamma)
        .zip(&cfg.gate_start_epoch)
        .map(|((&init, &gamma), &start)| {
            let steps = epoch.saturating_sub(start.max(1)) as f64;
            (init + gamma * steps).min(1.0)
        })
        .collect();
    EpochPlan {
        gates,
        reg_active: epoch >= cfg.reg_start_epoch,
    }
}

/// Plan for any regime.
pub fn plan_epoch(variant: Variant, epoch: usize, cfg: &ScheduleConfig) -> EpochPlan {
    let open = || vec![1.0; cfg.gate_init.len()];
    match variant {
        Variant::Incremental => schedule_step(epoch, cfg),
        Variant::Regularized => EpochPlan {
            gates: open(),
            reg_active: true,
        },
        Variant::Base | Variant::Baseline => EpochPlan {
            gates: open(),
            reg_active: false,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn start_epoch_convention() {
        let cfg = ScheduleConfig::default();
        let p1 = schedule_step(1, &cfg);
        assert_eq!(p1.gates, vec![1.0, 0.01, 0.01]);
        assert!(!p1.reg_active);
        assert_eq!(schedule_step(8, &cfg).gates[1], 0.01);
        assert!((schedule_step(9, &cfg).gates[1] - 0.11).abs() < 1e-12);
        assert_eq!(schedule_step(20, &cfg).gates[2], 0.01);
        assert!((schedule_step(21, &cfg).gates[2] - 0.11).abs() < 1e-12);
    }

    #[test]
    fn gates_clamp_and_never_decrease() {
        let cfg = ScheduleConfig::default();
        let mut prev = schedule_step(1, &cfg).gates;
        for e in 2..=60 {
            let g = schedule_step(e, &cfg).gates;
            assert!(g.iter().zip(&prev).all(|(a, b)| a >= b && *a <= 1.0));
            assert_eq!(g[0], 1.0);
            prev = g;
        }
        assert_eq!(schedule_step(18, &cfg).gates[1], 1.0);
        assert!(schedule_step(17, &cfg).gates[1] < 1.0);
        assert_eq!(schedule_step(60, &cfg).gates[2], 1.0);
    }

    #[test]
    fn regularizer_starts_at_35() {
        let cfg = ScheduleConfig::default();
        assert!(!schedule_step(34, &cfg).reg_active);
        assert!(schedule_step(35, &cfg).reg_active);
        assert!(plan_epoch(Variant::Regularized, 1, &cfg).reg_active);
        assert!(!plan_epoch(Variant::Base, 40, &cfg).reg_active);
        assert_eq!(plan_epoch(Variant::Base, 1, &cfg).gates, vec![1.0; 3]);
    }

    #[test]
    fn variant_names() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.short_name()).unwrap(), v);
        }
        assert_eq!(Variant::parse("Incremental").unwrap(), Variant::Incremental);
        assert!(Variant::parse("fast").is_err());
        assert_eq!(Variant::Incremental.default_max_epochs(), 55);
    }
}
