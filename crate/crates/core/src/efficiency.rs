//! Analytic cost of one online iteration relative to full regeneration.
//!
//! A fully online iteration splits into generation, reward scoring and
//! training. Generation and scoring only run for the regenerated fraction
//! `ρ` of prompts, while training always covers every pair.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Time fractions of one full-regeneration iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub f_gen: f64,
    pub f_reward: f64,
    pub f_train: f64,
}

impl Default for CostModel {
    /// Measured split for 7B-scale online DPO: 71.8% generation, 0.1%
    /// rewarding, 28.1% training.
    fn default() -> Self {
        Self {
            f_gen: 0.718,
            f_reward: 0.001,
            f_train: 0.281,
        }
    }
}

impl CostModel {
    pub fn new(f_gen: f64, f_reward: f64, f_train: f64) -> Result<Self> {
        let model = Self {
            f_gen,
            f_reward,
            f_train,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.f_gen, self.f_reward, self.f_train];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(domain("cost fractions must lie in [0, 1]"));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(domain(format!("cost fractions sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Cost of an iteration regenerating fraction `rho`, in units of one
    /// full-regeneration iteration.
    pub fn iteration_cost(&self, rho: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(domain(format!("rho must lie in [0, 1], got {rho}")));
        }
        Ok(self.f_gen * rho + self.f_reward * rho + self.f_train)
    }

    pub fn speedup(&self, rho: f64) -> Result<f64> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(domain(format!("rho must lie in (0, 1], got {rho}")));
        }
        let cost = self.iteration_cost(rho)?;
        if cost <= 0.0 {
            return Err(domain("iteration cost is zero"));
        }
        Ok(1.0 / cost)
    }

    /// Fraction of generation time saved relative to full regeneration.
    pub fn generation_savings(&self, rho: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(domain(format!("rho must lie in [0, 1], got {rho}")));
        }
        if self.f_gen == 0.0 {
            return Err(domain("model has no generation cost"));
        }
        let full = self.f_gen;
        let partial = self.f_gen * rho;
        Ok((full - partial) / full)
    }
}
