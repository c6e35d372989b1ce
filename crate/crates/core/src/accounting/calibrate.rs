//! Noise-multiplier calibration against a target budget.

use super::pld::{
    compose_pld, convolve_pld, epsilon_at_delta, pld_for_subsampled_gaussian, spacing_for_steps,
};
use super::rdp::rdp_epsilon_stages;
use super::{AccountingError, PrivacyBudget};

/// Search bracket for the noise multiplier.
pub const SIGMA_BRACKET: (f64, f64) = (0.3, 100.0);

const SIGMA_REL_TOL: f64 = 1e-3;

fn epsilon_for_sigma(
    sigma: f64,
    stages: &[(f64, u32)],
    delta: f64,
) -> Result<f64, AccountingError> {
    let total_steps: u32 = stages.iter().map(|s| s.1).sum();
    let spacing = spacing_for_steps(total_steps);
    let mut composed = None;
    for &(q, steps) in stages {
        let stage = compose_pld(&pld_for_subsampled_gaussian(sigma, q, spacing)?, steps)?;
        composed = Some(match composed {
            None => stage,
            Some(acc) => convolve_pld(&acc, &stage)?,
        });
    }
    epsilon_at_delta(&composed.expect("at least one stage"), delta)
}

fn calibrate(target: &PrivacyBudget, stages: &[(f64, u32)]) -> Result<f64, AccountingError> {
    let (bracket_lo, bracket_hi) = SIGMA_BRACKET;
    let eps_target = target.epsilon();
    let pld_meets = |sigma: f64| -> Result<bool, AccountingError> {
        match epsilon_for_sigma(sigma, stages, target.delta()) {
            Ok(e) => Ok(e <= eps_target),
            // a vacuous answer at this sigma means the target is not met there
            Err(AccountingError::EpsilonUnachievable(_))
            | Err(AccountingError::TruncationExceedsDelta { .. }) => Ok(false),
            Err(e) => Err(e),
        }
    };
    // The Renyi accountant is a cheap upper bound on epsilon, so any sigma it
    // accepts is also accepted by the loss-distribution accountant. Use it to
    // seed the expensive search.
    let rdp_meets = |sigma: f64| {
        rdp_epsilon_stages(sigma, stages, target.delta())
            .map(|e| e <= eps_target)
            .unwrap_or(false)
    };
    let mut hi = if rdp_meets(bracket_hi) {
        let (mut lo, mut hi) = (bracket_lo, bracket_hi);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if rdp_meets(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    } else if pld_meets(bracket_hi)? {
        bracket_hi
    } else {
        return Err(AccountingError::CalibrationOutOfBracket {
            lo: bracket_lo,
            hi: bracket_hi,
        });
    };
    // walk down until the target is no longer met
    let mut lo = (hi / 1.3).max(bracket_lo);
    loop {
        if !pld_meets(lo)? {
            break;
        }
        hi = lo;
        if lo <= bracket_lo {
            // already met at the bracket edge: the true answer sits below it
            return Err(AccountingError::CalibrationOutOfBracket {
                lo: bracket_lo,
                hi: bracket_hi,
            });
        }
        lo = (lo / 1.3).max(bracket_lo);
    }
    while (hi - lo) / hi > SIGMA_REL_TOL {
        let mid = 0.5 * (lo + hi);
        if pld_meets(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Smallest noise multiplier (to relative tolerance 1e-3) for which the
/// composed loss distribution of one subsampled Gaussian mechanism meets
/// the target budget.
pub fn calibrate_noise(
    target: &PrivacyBudget,
    sampling_rate: f64,
    steps: u32,
) -> Result<f64, AccountingError> {
    calibrate(target, &[(sampling_rate, steps)])
}

/// Calibrate one shared noise multiplier for two adaptively composed
/// stages, jointly accounted by convolving their loss distributions.
pub fn calibrate_noise_joint(
    target: &PrivacyBudget,
    stage1: (f64, u32),
    stage2: (f64, u32),
) -> Result<f64, AccountingError> {
    calibrate(target, &[stage1, stage2])
}

/// Epsilon of a jointly composed pair of stages sharing a noise multiplier.
pub fn joint_epsilon(
    sigma: f64,
    stage1: (f64, u32),
    stage2: (f64, u32),
    delta: f64,
) -> Result<f64, AccountingError> {
    epsilon_for_sigma(sigma, &[stage1, stage2], delta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn more_steps_need_more_noise() {
        let target = PrivacyBudget::new(4.0, 1e-6).unwrap();
        let s1 = calibrate_noise(&target, 0.05, 200).unwrap();
        let s2 = calibrate_noise(&target, 0.05, 400).unwrap();
        assert!(s2 > s1, "{s2} <= {s1}");
    }

    #[test]
    fn unachievable_target_is_rejected() {
        // epsilon far below what sigma = 100 can deliver over many steps
        let target = PrivacyBudget::new(1e-4, 1e-9).unwrap();
        let err = calibrate_noise(&target, 1.0, 10_000).unwrap_err();
        assert!(matches!(err, AccountingError::CalibrationOutOfBracket { .. }));
    }

    #[test]
    fn lower_bracket_edge_is_ambiguous() {
        // loose target already met at sigma = 0.3 for a single tiny step
        let target = PrivacyBudget::new(50.0, 1e-2).unwrap();
        let err = calibrate_noise(&target, 0.001, 1).unwrap_err();
        assert!(matches!(err, AccountingError::CalibrationOutOfBracket { .. }));
    }

    #[test]
    fn calibrated_sigma_meets_the_target() {
        let target = PrivacyBudget::new(2.0, 1e-6).unwrap();
        let sigma = calibrate_noise(&target, 0.02, 300).unwrap();
        let eps = epsilon_for_sigma(sigma, &[(0.02, 300)], 1e-6).unwrap();
        assert!(eps <= 2.0, "eps = {eps}");
        // and not by a wide margin: sigma is near-minimal
        let eps_below = epsilon_for_sigma(sigma * 0.99, &[(0.02, 300)], 1e-6).unwrap();
        assert!(eps_below > 2.0, "eps at 0.99 sigma = {eps_below}");
    }
}
