//! Privacy accounting for the two private stages of the pipeline.
//!
//! The main accountant discretizes the privacy loss random variable of a
//! (possibly Poisson-subsampled) Gaussian mechanism on a uniform grid and
//! composes steps by convolution. Discretization always rounds privacy
//! losses up and clipped tail mass is tracked separately, so every reported
//! epsilon is an upper bound on the true epsilon. A Renyi-DP accountant is
//! included as an independent, looser cross-check, and a closed-form
//! adaptive composition rule combines the two stage budgets.

mod calibrate;
mod pld;
mod rdp;

pub use calibrate::{calibrate_noise, calibrate_noise_joint, joint_epsilon, SIGMA_BRACKET};
pub use pld::{
    compose_pld, convolve_pld, epsilon_at_delta, pld_for_gaussian, pld_for_subsampled_gaussian,
    prv_epsilon, prv_epsilon_stages, spacing_for_steps, PrivacyLossDistribution, DEFAULT_GRID_RANGE,
    DEFAULT_GRID_SPACING,
};
pub use rdp::{rdp_epsilon, rdp_epsilon_stages, rdp_order_grid};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AccountingError {
    #[error("invalid privacy budget: epsilon={epsilon}, delta={delta}")]
    InvalidBudget { epsilon: f64, delta: f64 },
    #[error("invalid mechanism: {0}")]
    InvalidMechanism(String),
    #[error("delta slack must be positive and finite, got {0}")]
    InvalidDeltaSlack(f64),
    #[error("grid spacing {spacing} yields fewer than 3 points over range {range}")]
    GridTooCoarse { spacing: f64, range: f64 },
    #[error("grids are incompatible: {0}")]
    IncompatibleGrids(String),
    #[error("delta must lie in (0, 1), got {0}")]
    InvalidDelta(f64),
    #[error("truncated mass {truncation_mass:.3e} exceeds the queried delta {delta:.3e}")]
    TruncationExceedsDelta { truncation_mass: f64, delta: f64 },
    #[error("no representable epsilon achieves delta {0:.3e}")]
    EpsilonUnachievable(f64),
    #[error("target budget not achievable within sigma bracket [{lo}, {hi}]")]
    CalibrationOutOfBracket { lo: f64, hi: f64 },
}

/// An (epsilon, delta) differential privacy guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    epsilon: f64,
    delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self, AccountingError> {
        if !epsilon.is_finite() || epsilon < 0.0 || !delta.is_finite() || !(0.0..1.0).contains(&delta)
        {
            return Err(AccountingError::InvalidBudget { epsilon, delta });
        }
        Ok(Self { epsilon, delta })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

/// One subsampled Gaussian mechanism, self-composed over a number of steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismSpec {
    pub noise_multiplier: f64,
    pub sampling_rate: f64,
    pub steps: u32,
}

impl MechanismSpec {
    pub fn new(noise_multiplier: f64, sampling_rate: f64, steps: u32) -> Result<Self, AccountingError> {
        if !noise_multiplier.is_finite() || noise_multiplier <= 0.0 {
            return Err(AccountingError::InvalidMechanism(format!(
                "noise multiplier must be positive, got {noise_multiplier}"
            )));
        }
        if !sampling_rate.is_finite() || sampling_rate <= 0.0 || sampling_rate > 1.0 {
            return Err(AccountingError::InvalidMechanism(format!(
                "sampling rate must lie in (0, 1], got {sampling_rate}"
            )));
        }
        if steps == 0 {
            return Err(AccountingError::InvalidMechanism(
                "steps must be at least 1".into(),
            ));
        }
        Ok(Self {
            noise_multiplier,
            sampling_rate,
            steps,
        })
    }

    /// Steps for a given number of epochs at this sampling rate, rounded up.
    pub fn steps_for_epochs(epochs: u32, sampling_rate: f64) -> u32 {
        (f64::from(epochs) / sampling_rate).ceil() as u32
    }
}

/// The two stage budgets plus the slack delta' of the composition rule.
#[derive(Debug, Clone, Copy)]
pub struct CompositionInput {
    pub stage1: PrivacyBudget,
    pub stage2: PrivacyBudget,
    pub delta_slack: f64,
}

/// Which branch of the composition bound was the tighter one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionRule {
    Basic,
    Advanced,
}

/// Adaptive composition of two (epsilon, delta) stages.
///
/// The total epsilon is the smaller of the basic sum and the advanced bound
/// `(e1^2 + e2^2)/2 + sqrt(2 ln(1/d') (e1^2 + e2^2))`; the total delta is
/// `d1 + d2 + d'`.
pub fn advanced_compose(
    input: &CompositionInput,
) -> Result<(PrivacyBudget, CompositionRule), AccountingError> {
    if !input.delta_slack.is_finite() || input.delta_slack <= 0.0 {
        return Err(AccountingError::InvalidDeltaSlack(input.delta_slack));
    }
    let e1 = input.stage1.epsilon();
    let e2 = input.stage2.epsilon();
    let basic = e1 + e2;
    let sq = e1 * e1 + e2 * e2;
    let advanced = 0.5 * sq + (2.0 * (1.0 / input.delta_slack).ln() * sq).sqrt();
    let (epsilon, rule) = if basic <= advanced {
        (basic, CompositionRule::Basic)
    } else {
        (advanced, CompositionRule::Advanced)
    };
    let delta = input.stage1.delta() + input.stage2.delta() + input.delta_slack;
    Ok((PrivacyBudget::new(epsilon, delta)?, rule))
}
