//! Discretized privacy-loss distributions and their numerical composition.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use statrs::distribution::{ContinuousCDF, Normal};

use super::{AccountingError, MechanismSpec};

/// Default width of one grid cell on the privacy-loss axis.
pub const DEFAULT_GRID_SPACING: f64 = 1e-3;
/// Privacy losses are tracked on [-DEFAULT_GRID_RANGE, DEFAULT_GRID_RANGE];
/// mass outside is clipped into `truncation_mass`.
pub const DEFAULT_GRID_RANGE: f64 = 25.0;

/// Discretized distribution of the privacy loss random variable of one
/// mechanism (or a composition of mechanisms).
///
/// `masses[j]` is the probability that the loss falls in the grid cell whose
/// upper end is `origin + j * grid_spacing`; losses are rounded up to the
/// cell end so that epsilon read off this object never underestimates.
/// `truncation_mass` is the probability clipped beyond the upper grid
/// boundary, counted in full toward every delta.
///
/// For subsampled mechanisms the add and remove adjacency directions have
/// different loss distributions. The primary fields hold the remove
/// direction; `dual` holds the add direction, and queries take the worse of
/// the two. For symmetric mechanisms (pure Gaussian, sampling rate 1) the
/// directions coincide and `dual` is empty.
#[derive(Debug, Clone)]
pub struct PrivacyLossDistribution {
    pub grid_spacing: f64,
    pub origin: f64,
    pub masses: Vec<f64>,
    pub truncation_mass: f64,
    dual: Option<Box<DirectionalPld>>,
}

#[derive(Debug, Clone)]
struct DirectionalPld {
    grid_spacing: f64,
    origin: f64,
    masses: Vec<f64>,
    truncation_mass: f64,
}

// Cells whose cumulative mass from either end is below these thresholds are
// clipped at construction time; the upper clip is pessimistic (it joins the
// truncation mass) and the lower clip rounds losses up onto the new origin.
const LOWER_SUPPORT_MASS: f64 = 1e-30;
const UPPER_SUPPORT_MASS: f64 = 1e-18;

impl DirectionalPld {
    /// Discretize a loss distribution given its CDF, rounding losses up.
    /// The support is trimmed to where the CDF carries non-negligible mass.
    fn from_cdf(grid_spacing: f64, range: f64, cdf: impl Fn(f64) -> f64) -> Self {
        let n = (2.0 * range / grid_spacing).floor() as usize + 1;
        let at = |j: usize| cdf(-range + j as f64 * grid_spacing);
        // the CDF is monotone: bisect the support edges instead of scanning
        // the whole grid
        let first = {
            let (mut lo, mut hi) = (0usize, n - 1); // cdf(lo) <= eps < cdf(hi) once split
            if at(0) > LOWER_SUPPORT_MASS {
                0
            } else {
                while hi - lo > 1 {
                    let mid = lo + (hi - lo) / 2;
                    if at(mid) > LOWER_SUPPORT_MASS {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                lo
            }
        };
        let last = {
            let (mut lo, mut hi) = (first, n - 1);
            if at(n - 1) < 1.0 - UPPER_SUPPORT_MASS {
                n - 1
            } else {
                while hi - lo > 1 {
                    let mid = lo + (hi - lo) / 2;
                    if at(mid) < 1.0 - UPPER_SUPPORT_MASS {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                hi
            }
        };
        let full: Vec<f64> = (first..=last).map(at).collect();
        let origin = -range + first as f64 * grid_spacing;
        let mut masses = vec![0.0; last - first + 1];
        masses[0] = full[0]; // everything below rounds up to the origin
        for (k, m) in masses.iter_mut().enumerate().skip(1) {
            *m = (full[k] - full[k - 1]).max(0.0);
        }
        let truncation_mass = (1.0 - full[last - first]).max(0.0);
        Self {
            grid_spacing,
            origin,
            masses,
            truncation_mass,
        }
    }

    fn grid_value(&self, j: usize) -> f64 {
        self.origin + j as f64 * self.grid_spacing
    }

    /// Hockey-stick divergence delta(epsilon) of the discretized loss.
    fn delta_at_epsilon(&self, epsilon: f64) -> f64 {
        let mut delta = self.truncation_mass;
        // only cells with loss > epsilon contribute
        let start = ((epsilon - self.origin) / self.grid_spacing).floor().max(-1.0) as i64 + 1;
        let start = start.max(0) as usize;
        for j in (start..self.masses.len()).rev() {
            let loss = self.grid_value(j);
            if loss <= epsilon {
                break;
            }
            delta += self.masses[j] * (1.0 - (epsilon - loss).exp());
        }
        delta.clamp(0.0, 1.0)
    }

    fn convolve(&self, other: &Self) -> Result<Self, AccountingError> {
        if (self.grid_spacing - other.grid_spacing).abs() > 1e-15 * self.grid_spacing {
            return Err(AccountingError::IncompatibleGrids(format!(
                "grid spacings differ: {} vs {}",
                self.grid_spacing, other.grid_spacing
            )));
        }
        let raw = fft_convolve(&self.masses, &other.masses);
        // missing mass from either operand stays missing, pessimistically
        let truncation_mass =
            1.0 - (1.0 - self.truncation_mass) * (1.0 - other.truncation_mass);
        let out = Self {
            grid_spacing: self.grid_spacing,
            origin: self.origin + other.origin,
            masses: raw,
            truncation_mass,
        };
        Ok(out.clamped_to(-DEFAULT_GRID_RANGE, DEFAULT_GRID_RANGE))
    }

    /// Re-clip the support to [lo, hi]: mass below rounds up onto lo, mass
    /// above joins the truncation mass.
    fn clamped_to(&self, lo: f64, hi: f64) -> Self {
        let first = ((lo - self.origin) / self.grid_spacing).ceil() as i64;
        let last = ((hi - self.origin) / self.grid_spacing).floor() as i64;
        let first = first.clamp(0, self.masses.len() as i64 - 1) as usize;
        let last = last.clamp(first as i64, self.masses.len() as i64 - 1) as usize;
        let mut masses = self.masses[first..=last].to_vec();
        masses[0] += self.masses[..first].iter().sum::<f64>();
        let clipped_above: f64 = self.masses[last + 1..].iter().sum();
        Self {
            grid_spacing: self.grid_spacing,
            origin: self.grid_value(first),
            masses,
            truncation_mass: self.truncation_mass + clipped_above,
        }
    }

    /// `steps`-fold self-convolution in one FFT: raise the spectrum to the
    /// `steps`-th power pointwise instead of convolving repeatedly.
    ///
    /// The distribution is centered on its mean (rounded to the grid) so the
    /// composed bulk stays inside the cyclic window; mass that could wrap
    /// around is bounded by a Chernoff tail and charged to the truncation
    /// mass, keeping every query an upper bound.
    fn self_compose(&self, steps: u32) -> Self {
        debug_assert!(steps >= 1);
        if steps == 1 {
            return self.clone();
        }
        let h = self.grid_spacing;
        let t = f64::from(steps);
        let kept: f64 = self.masses.iter().sum();
        let range_cells = (2.0 * DEFAULT_GRID_RANGE / h).ceil() as usize + 2;
        if kept <= 0.0 {
            return Self {
                grid_spacing: h,
                origin: -DEFAULT_GRID_RANGE,
                masses: vec![0.0],
                truncation_mass: 1.0,
            };
        }
        let mean_idx = self
            .masses
            .iter()
            .enumerate()
            .map(|(k, m)| m * k as f64)
            .sum::<f64>()
            / kept;
        let center = mean_idx.round() as i64;

        let fft_len = (range_cells + self.masses.len() + 2).next_power_of_two();
        let half = (fft_len / 2) as i64;
        let mut buf = vec![Complex::new(0.0, 0.0); fft_len];
        for (k, &m) in self.masses.iter().enumerate() {
            let idx = (k as i64 - center).rem_euclid(fft_len as i64) as usize;
            buf[idx].re += m;
        }
        let mut planner = FftPlanner::new();
        planner.plan_fft_forward(fft_len).process(&mut buf);
        for z in buf.iter_mut() {
            // z^steps in polar form; |z| <= 1 up to roundoff
            let r = z.norm().min(1.0);
            let theta = z.arg();
            let rt = if r <= 0.0 { 0.0 } else { (t * r.ln()).exp() };
            *z = Complex::from_polar(rt, t * theta);
        }
        planner.plan_fft_inverse(fft_len).process(&mut buf);
        let scale = 1.0 / fft_len as f64;

        // wrap-around (aliasing) bound: Chernoff tails of the centered sum
        // beyond +-half cells
        let window = (half - 1) as f64 * h;
        let mut wrap_bound: f64 = 0.0;
        for tail_sign in [1.0, -1.0] {
            let mut best = f64::INFINITY;
            for lambda in [0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0] {
                let mgf: f64 = self
                    .masses
                    .iter()
                    .enumerate()
                    .map(|(k, m)| m * (tail_sign * lambda * h * (k as f64 - center as f64)).exp())
                    .sum();
                if mgf > 0.0 {
                    best = best.min((t * mgf.ln() - lambda * window).exp());
                }
            }
            wrap_bound += best.min(1.0);
        }

        // read out the signed window, clamping to [-range, range] in value
        let base_value = t * (self.origin + center as f64 * h);
        let lo_cell = ((-DEFAULT_GRID_RANGE - base_value) / h).ceil() as i64;
        let hi_cell = ((DEFAULT_GRID_RANGE - base_value) / h).floor() as i64;
        let lo_cell = lo_cell.clamp(-half, half - 1);
        let hi_cell = hi_cell.clamp(lo_cell, half - 1);
        let mut masses = vec![0.0; (hi_cell - lo_cell + 1) as usize];
        let mut clipped_above = 0.0;
        for m in -half..half {
            let v = buf[m.rem_euclid(fft_len as i64) as usize].re * scale;
            if v <= 0.0 {
                continue;
            }
            if m < lo_cell {
                masses[0] += v; // rounds up onto the window edge
            } else if m > hi_cell {
                clipped_above += v;
            } else {
                masses[(m - lo_cell) as usize] += v;
            }
        }
        let step_trunc = 1.0 - (1.0 - self.truncation_mass).powf(t);
        Self {
            grid_spacing: h,
            origin: base_value + lo_cell as f64 * h,
            masses,
            truncation_mass: (step_trunc + clipped_above + wrap_bound).min(1.0),
        }
    }

    fn total_mass(&self) -> f64 {
        self.masses.iter().sum::<f64>() + self.truncation_mass
    }
}

fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let out_len = a.len() + b.len() - 1;
    let fft_len = out_len.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(fft_len);
    let ifft = planner.plan_fft_inverse(fft_len);

    let mut fa: Vec<Complex<f64>> = a
        .iter()
        .map(|&x| Complex::new(x, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(fft_len)
        .collect();
    let mut fb: Vec<Complex<f64>> = b
        .iter()
        .map(|&x| Complex::new(x, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(fft_len)
        .collect();
    fft.process(&mut fa);
    fft.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(fb.iter()) {
        *x *= *y;
    }
    ifft.process(&mut fa);
    let scale = 1.0 / fft_len as f64;
    fa.iter()
        .take(out_len)
        .map(|c| (c.re * scale).max(0.0))
        .collect()
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

fn check_grid(grid_spacing: f64) -> Result<(), AccountingError> {
    if !grid_spacing.is_finite() || grid_spacing <= 0.0 {
        return Err(AccountingError::GridTooCoarse {
            spacing: grid_spacing,
            range: DEFAULT_GRID_RANGE,
        });
    }
    let n = (2.0 * DEFAULT_GRID_RANGE / grid_spacing).floor() as usize + 1;
    if n < 3 {
        return Err(AccountingError::GridTooCoarse {
            spacing: grid_spacing,
            range: DEFAULT_GRID_RANGE,
        });
    }
    Ok(())
}

/// Privacy-loss distribution of the Gaussian mechanism with sensitivity 1
/// and noise standard deviation `noise_multiplier`.
pub fn pld_for_gaussian(
    noise_multiplier: f64,
    grid_spacing: f64,
) -> Result<PrivacyLossDistribution, AccountingError> {
    if !noise_multiplier.is_finite() || noise_multiplier <= 0.0 {
        return Err(AccountingError::InvalidMechanism(format!(
            "noise multiplier must be positive, got {noise_multiplier}"
        )));
    }
    check_grid(grid_spacing)?;
    let sigma = noise_multiplier;
    let phi = standard_normal();
    // L = (2x - 1) / (2 sigma^2) with x ~ N(1, sigma^2), i.e. L ~ N(1/(2s^2), 1/s^2)
    let cdf = move |t: f64| phi.cdf(sigma * t - 1.0 / (2.0 * sigma));
    let remove = DirectionalPld::from_cdf(grid_spacing, DEFAULT_GRID_RANGE, cdf);
    Ok(PrivacyLossDistribution::symmetric(remove))
}

/// Privacy-loss distribution of one Poisson-subsampled Gaussian step under
/// add/remove adjacency. Both adjacency directions are tracked; queries use
/// the worse one.
pub fn pld_for_subsampled_gaussian(
    noise_multiplier: f64,
    sampling_rate: f64,
    grid_spacing: f64,
) -> Result<PrivacyLossDistribution, AccountingError> {
    if !sampling_rate.is_finite() || sampling_rate <= 0.0 || sampling_rate > 1.0 {
        return Err(AccountingError::InvalidMechanism(format!(
            "sampling rate must lie in (0, 1], got {sampling_rate}"
        )));
    }
    if sampling_rate == 1.0 {
        return pld_for_gaussian(noise_multiplier, grid_spacing);
    }
    if !noise_multiplier.is_finite() || noise_multiplier <= 0.0 {
        return Err(AccountingError::InvalidMechanism(format!(
            "noise multiplier must be positive, got {noise_multiplier}"
        )));
    }
    check_grid(grid_spacing)?;

    let sigma = noise_multiplier;
    let q = sampling_rate;
    let phi = standard_normal();

    // Remove direction: x ~ (1-q) N(0, s^2) + q N(1, s^2),
    // L(x) = ln(1 - q + q exp((2x - 1)/(2 s^2))), increasing in x.
    let phi_r = phi;
    let remove_cdf = move |t: f64| {
        let floor = (1.0 - q).ln();
        if t <= floor {
            return 0.0;
        }
        let inner = (t.exp() - (1.0 - q)) / q;
        let x = sigma * sigma * inner.ln() + 0.5;
        (1.0 - q) * phi_r.cdf(x / sigma) + q * phi_r.cdf((x - 1.0) / sigma)
    };
    let remove = DirectionalPld::from_cdf(grid_spacing, DEFAULT_GRID_RANGE, remove_cdf);

    // Add direction: x ~ N(0, s^2), L(x) = -ln(1 - q + q exp((2x - 1)/(2 s^2))),
    // decreasing in x and bounded above by -ln(1 - q).
    let phi_a = standard_normal();
    let add_cdf = move |t: f64| {
        let ceiling = -(1.0 - q).ln();
        if t >= ceiling {
            return 1.0;
        }
        let inner = ((-t).exp() - (1.0 - q)) / q;
        let x = sigma * sigma * inner.ln() + 0.5;
        1.0 - phi_a.cdf(x / sigma)
    };
    let add = DirectionalPld::from_cdf(grid_spacing, DEFAULT_GRID_RANGE, add_cdf);

    Ok(PrivacyLossDistribution::asymmetric(remove, add))
}

impl PrivacyLossDistribution {
    fn symmetric(remove: DirectionalPld) -> Self {
        Self {
            grid_spacing: remove.grid_spacing,
            origin: remove.origin,
            truncation_mass: remove.truncation_mass,
            masses: remove.masses,
            dual: None,
        }
    }

    fn asymmetric(remove: DirectionalPld, add: DirectionalPld) -> Self {
        Self {
            grid_spacing: remove.grid_spacing,
            origin: remove.origin,
            truncation_mass: remove.truncation_mass,
            masses: remove.masses,
            dual: Some(Box::new(add)),
        }
    }

    fn primary(&self) -> DirectionalPld {
        DirectionalPld {
            grid_spacing: self.grid_spacing,
            origin: self.origin,
            masses: self.masses.clone(),
            truncation_mass: self.truncation_mass,
        }
    }

    /// delta(epsilon) of the discretization, maximized over both adjacency
    /// directions. Includes the truncated mass in full.
    pub fn delta_at_epsilon(&self, epsilon: f64) -> f64 {
        let d = self.primary().delta_at_epsilon(epsilon);
        match &self.dual {
            None => d,
            Some(add) => d.max(add.delta_at_epsilon(epsilon)),
        }
    }

    /// Total probability accounted for (finite grid plus truncation).
    pub fn total_mass(&self) -> f64 {
        self.primary().total_mass()
    }

    pub fn grid_len(&self) -> usize {
        self.masses.len()
    }
}

/// Convolve two privacy-loss distributions (one step of each mechanism run
/// adaptively). Grids must share their spacing.
pub fn convolve_pld(
    a: &PrivacyLossDistribution,
    b: &PrivacyLossDistribution,
) -> Result<PrivacyLossDistribution, AccountingError> {
    let remove = a.primary().convolve(&b.primary())?;
    let dual = match (&a.dual, &b.dual) {
        (None, None) => None,
        (da, db) => {
            let da = da.as_deref().cloned().unwrap_or_else(|| a.primary());
            let db = db.as_deref().cloned().unwrap_or_else(|| b.primary());
            Some(Box::new(da.convolve(&db)?))
        }
    };
    Ok(PrivacyLossDistribution {
        grid_spacing: remove.grid_spacing,
        origin: remove.origin,
        truncation_mass: remove.truncation_mass,
        masses: remove.masses,
        dual,
    })
}

/// Self-composition over `steps` adaptive steps, by repeated squaring.
pub fn compose_pld(
    pld: &PrivacyLossDistribution,
    steps: u32,
) -> Result<PrivacyLossDistribution, AccountingError> {
    if steps == 0 {
        return Err(AccountingError::InvalidMechanism(
            "steps must be at least 1".into(),
        ));
    }
    if steps == 1 {
        return Ok(pld.clone());
    }
    let remove = pld.primary().self_compose(steps);
    let dual = pld
        .dual
        .as_ref()
        .map(|d| Box::new(d.self_compose(steps)));
    Ok(PrivacyLossDistribution {
        grid_spacing: remove.grid_spacing,
        origin: remove.origin,
        truncation_mass: remove.truncation_mass,
        masses: remove.masses,
        dual,
    })
}

/// Grid spacing for an accurate `steps`-fold composition. Round-up bias
/// accumulates like steps * spacing, so the spacing shrinks with the step
/// count, bounded below to keep grids tractable.
pub fn spacing_for_steps(steps: u32) -> f64 {
    (0.1 / f64::from(steps)).clamp(2e-5, DEFAULT_GRID_SPACING)
}

/// Spacing refined by mechanism strength: for weak mechanisms the absolute
/// bias budget of `spacing_for_steps` would dwarf the true epsilon, so the
/// spacing also targets ~1% of a cheap Renyi upper estimate. Weak mechanisms
/// have narrow loss support, keeping the finer grids small.
fn adaptive_spacing(specs: &[MechanismSpec], delta: f64) -> f64 {
    let total_steps: u32 = specs.iter().map(|s| s.steps).sum();
    let base = spacing_for_steps(total_steps);
    let estimate: Result<f64, AccountingError> =
        specs.iter().map(|s| crate::accounting::rdp_epsilon(s, delta)).sum();
    match estimate {
        Ok(eps) => (0.01 * eps / f64::from(total_steps)).clamp(2e-5, base),
        Err(_) => base,
    }
}

/// Epsilon of one subsampled Gaussian mechanism composed over its steps,
/// discretized at a composition-aware spacing.
pub fn prv_epsilon(spec: &MechanismSpec, delta: f64) -> Result<f64, AccountingError> {
    let spacing = adaptive_spacing(std::slice::from_ref(spec), delta);
    let step = pld_for_subsampled_gaussian(spec.noise_multiplier, spec.sampling_rate, spacing)?;
    epsilon_at_delta(&compose_pld(&step, spec.steps)?, delta)
}

/// Epsilon of several adaptively composed mechanisms with their own noise
/// multipliers, convolved on a shared composition-aware grid.
pub fn prv_epsilon_stages(specs: &[MechanismSpec], delta: f64) -> Result<f64, AccountingError> {
    if specs.is_empty() {
        return Err(AccountingError::InvalidMechanism(
            "at least one stage required".into(),
        ));
    }
    let spacing = adaptive_spacing(specs, delta);
    let mut composed: Option<PrivacyLossDistribution> = None;
    for spec in specs {
        let step = pld_for_subsampled_gaussian(spec.noise_multiplier, spec.sampling_rate, spacing)?;
        let stage = compose_pld(&step, spec.steps)?;
        composed = Some(match composed {
            None => stage,
            Some(acc) => convolve_pld(&acc, &stage)?,
        });
    }
    epsilon_at_delta(&composed.unwrap(), delta)
}

/// Smallest grid-representable epsilon whose delta(epsilon) is at most
/// `delta`, clamped below at 0. Never underestimates.
pub fn epsilon_at_delta(
    pld: &PrivacyLossDistribution,
    delta: f64,
) -> Result<f64, AccountingError> {
    if !delta.is_finite() || delta <= 0.0 || delta >= 1.0 {
        return Err(AccountingError::InvalidDelta(delta));
    }
    if pld.truncation_mass >= delta {
        return Err(AccountingError::TruncationExceedsDelta {
            truncation_mass: pld.truncation_mass,
            delta,
        });
    }
    let n = pld.grid_len();
    let value = |j: usize| pld.origin + j as f64 * pld.grid_spacing;
    if pld.delta_at_epsilon(value(n - 1)) > delta {
        return Err(AccountingError::EpsilonUnachievable(delta));
    }
    if pld.delta_at_epsilon(value(0)) <= delta {
        return Ok(value(0).max(0.0));
    }
    // delta(eps) is nonincreasing in eps: binary search the crossing cell
    let (mut lo, mut hi) = (0usize, n - 1); // delta(lo) > target >= delta(hi)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if pld.delta_at_epsilon(value(mid)) <= delta {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(value(hi).max(0.0))
}
