//! Renyi-DP accountant for the subsampled Gaussian mechanism.
//!
//! Used as an independent cross-check of the loss-distribution accountant.
//! The subsampled bound follows the binomial-expansion computation of the
//! sampled Gaussian mechanism; pure Gaussian steps use alpha / (2 sigma^2).

use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use super::{AccountingError, MechanismSpec};

/// Fixed grid of Renyi orders: 1.25 to 64 in steps of 0.25, then integers
/// up to 256.
pub fn rdp_order_grid() -> Vec<f64> {
    let mut orders: Vec<f64> = (5..=256).map(|i| f64::from(i) * 0.25).collect();
    orders.extend((65..=256).map(f64::from));
    orders
}

fn log_add(a: f64, b: f64) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

fn log_sub(a: f64, b: f64) -> f64 {
    // requires a >= b
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a == b {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

fn log_erfc(x: f64) -> f64 {
    if x < 20.0 {
        erfc(x).ln()
    } else {
        // asymptotic expansion, erfc underflows around x = 26.5
        let x2 = x * x;
        -x2 - (x * std::f64::consts::PI.sqrt()).ln()
            + (1.0 - 1.0 / (2.0 * x2) + 3.0 / (4.0 * x2 * x2)).ln()
    }
}

fn log_binom(alpha: f64, i: u64) -> f64 {
    // ln |C(alpha, i)| for real alpha; sign handled by the caller
    let mut acc = 0.0;
    for k in 0..i {
        acc += (alpha - k as f64).abs().ln() - (k as f64 + 1.0).ln();
    }
    acc
}

/// ln E[(P/Q)^alpha] for one subsampled Gaussian step, integer alpha.
fn log_a_int(q: f64, sigma: f64, alpha: u64) -> f64 {
    let mut log_a = f64::NEG_INFINITY;
    let lga = ln_gamma(alpha as f64 + 1.0);
    for i in 0..=alpha {
        let log_coef = lga - ln_gamma(i as f64 + 1.0) - ln_gamma((alpha - i) as f64 + 1.0)
            + i as f64 * q.ln()
            + (alpha - i) as f64 * (-q).ln_1p();
        let s = log_coef + (i * i - i) as f64 / (2.0 * sigma * sigma);
        log_a = log_add(log_a, s);
    }
    log_a
}

/// ln E[(P/Q)^alpha] for fractional alpha, via the two-sided series split
/// at the crossover point of the mixture densities.
fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> f64 {
    let mut log_a0 = f64::NEG_INFINITY;
    let mut log_a1 = f64::NEG_INFINITY;
    let z0 = sigma * sigma * (1.0 / q - 1.0).ln() + 0.5;
    let sqrt2s = std::f64::consts::SQRT_2 * sigma;
    let mut i: u64 = 0;
    loop {
        let fi = i as f64;
        let j = alpha - fi;
        let log_coef = log_binom(alpha, i);
        // sign of C(alpha, i): negative once an odd number of factors flip
        let mut negative = false;
        for k in 0..i {
            if alpha - k as f64 > 0.0 {
                continue;
            }
            negative = !negative;
        }
        let log_t0 = log_coef + fi * q.ln() + j * (1.0 - q).ln();
        let log_t1 = log_coef + j * q.ln() + fi * (1.0 - q).ln();
        let log_e0 = 0.5f64.ln() + log_erfc((fi - z0) / sqrt2s);
        let log_e1 = 0.5f64.ln() + log_erfc((z0 - j) / sqrt2s);
        let log_s0 = log_t0 + (fi * fi - fi) / (2.0 * sigma * sigma) + log_e0;
        let log_s1 = log_t1 + (j * j - j) / (2.0 * sigma * sigma) + log_e1;
        if negative {
            log_a0 = log_sub(log_a0, log_s0);
            log_a1 = log_sub(log_a1, log_s1);
        } else {
            log_a0 = log_add(log_a0, log_s0);
            log_a1 = log_add(log_a1, log_s1);
        }
        i += 1;
        if log_s0.max(log_s1) < -40.0 && fi > alpha {
            break;
        }
        if i > 1000 {
            break;
        }
    }
    log_add(log_a0, log_a1)
}

/// Per-step Renyi divergence at order alpha.
fn rdp_one_step(q: f64, sigma: f64, alpha: f64) -> f64 {
    if q == 1.0 {
        return alpha / (2.0 * sigma * sigma);
    }
    let log_a = if alpha.fract() == 0.0 {
        log_a_int(q, sigma, alpha as u64)
    } else {
        log_a_frac(q, sigma, alpha)
    };
    (log_a / (alpha - 1.0)).max(0.0)
}

/// Epsilon at the given delta from the Renyi accountant, optimized over the
/// fixed order grid.
pub fn rdp_epsilon(spec: &MechanismSpec, delta: f64) -> Result<f64, AccountingError> {
    rdp_epsilon_stages(
        spec.noise_multiplier,
        &[(spec.sampling_rate, spec.steps)],
        delta,
    )
}

/// Renyi epsilon for several stages sharing one noise multiplier; Renyi
/// divergences add across adaptive compositions order by order.
pub fn rdp_epsilon_stages(
    noise_multiplier: f64,
    stages: &[(f64, u32)],
    delta: f64,
) -> Result<f64, AccountingError> {
    if !delta.is_finite() || delta <= 0.0 || delta >= 1.0 {
        return Err(AccountingError::InvalidDelta(delta));
    }
    let mut best = f64::INFINITY;
    for alpha in rdp_order_grid() {
        let rdp: f64 = stages
            .iter()
            .map(|&(q, steps)| f64::from(steps) * rdp_one_step(q, noise_multiplier, alpha))
            .sum();
        // RDP -> (eps, delta) conversion with the log-alpha refinement
        let eps = rdp + ((alpha - 1.0) / alpha).ln() - (delta.ln() + alpha.ln()) / (alpha - 1.0);
        if eps.is_finite() && eps < best {
            best = eps;
        }
    }
    if !best.is_finite() {
        return Err(AccountingError::EpsilonUnachievable(delta));
    }
    Ok(best.max(0.0))
}
