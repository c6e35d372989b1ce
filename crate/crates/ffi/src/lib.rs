//! C ABI for the privacy accountant: opaque accountant handles, status
//! codes, and a generated `selectpt.h` header (see build script).
//!
//! Conventions: every function returns a status code; outputs go through
//! out-pointers; handles are created and destroyed by this library only.
//! All functions are panic-safe (panics become `SPT_STATUS_INTERNAL`).

use std::panic::{catch_unwind, AssertUnwindSafe};

use selectpt_core::accounting::{
    advanced_compose, calibrate_noise, prv_epsilon_stages, rdp_epsilon, CompositionInput,
    MechanismSpec, PrivacyBudget,
};

/// Status codes returned by every accountant function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SptStatus {
    /// Success.
    SptStatusOk = 0,
    /// A pointer argument was null.
    SptStatusNullPointer = 1,
    /// A numeric argument was out of range.
    SptStatusInvalidArgument = 2,
    /// The accountant has no stages yet.
    SptStatusNoStages = 3,
    /// The accountant rejected the query (delta unreachable, truncation
    /// exceeded, calibration bracket exhausted, ...).
    SptStatusAccounting = 4,
    /// Unexpected internal failure.
    SptStatusInternal = 5,
}

/// Opaque accountant: an ordered list of subsampled Gaussian stages.
pub struct SptAccountant {
    stages: Vec<MechanismSpec>,
}

fn guard<F: FnOnce() -> SptStatus>(f: F) -> SptStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or(SptStatus::SptStatusInternal)
}

/// Create an empty accountant. Returns null only on allocation failure.
/// Must be released with `spt_accountant_free`.
#[no_mangle]
pub extern "C" fn spt_accountant_new() -> *mut SptAccountant {
    Box::into_raw(Box::new(SptAccountant { stages: Vec::new() }))
}

/// Release an accountant. Null is a no-op.
///
/// # Safety
/// `accountant` must be a pointer returned by `spt_accountant_new` that has
/// not been freed already.
#[no_mangle]
pub unsafe extern "C" fn spt_accountant_free(accountant: *mut SptAccountant) {
    if !accountant.is_null() {
        drop(unsafe { Box::from_raw(accountant) });
    }
}

/// Append one subsampled Gaussian stage
/// (noise multiplier, Poisson sampling rate, step count).
///
/// # Safety
/// `accountant` must be a live handle from `spt_accountant_new`.
#[no_mangle]
pub unsafe extern "C" fn spt_accountant_add_stage(
    accountant: *mut SptAccountant,
    noise_multiplier: f64,
    sampling_rate: f64,
    steps: u32,
) -> SptStatus {
    let Some(accountant) = (unsafe { accountant.as_mut() }) else {
        return SptStatus::SptStatusNullPointer;
    };
    guard(|| match MechanismSpec::new(noise_multiplier, sampling_rate, steps) {
        Ok(spec) => {
            accountant.stages.push(spec);
            SptStatus::SptStatusOk
        }
        Err(_) => SptStatus::SptStatusInvalidArgument,
    })
}

/// Number of stages currently recorded.
///
/// # Safety
/// `accountant` must be a live handle; `out_count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spt_accountant_stage_count(
    accountant: *const SptAccountant,
    out_count: *mut u32,
) -> SptStatus {
    let Some(accountant) = (unsafe { accountant.as_ref() }) else {
        return SptStatus::SptStatusNullPointer;
    };
    if out_count.is_null() {
        return SptStatus::SptStatusNullPointer;
    }
    unsafe { *out_count = accountant.stages.len() as u32 };
    SptStatus::SptStatusOk
}

/// Epsilon of the adaptive composition of all stages at the given delta,
/// from the numerical loss-distribution accountant.
///
/// # Safety
/// `accountant` must be a live handle; `out_epsilon` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spt_accountant_epsilon(
    accountant: *const SptAccountant,
    delta: f64,
    out_epsilon: *mut f64,
) -> SptStatus {
    let Some(accountant) = (unsafe { accountant.as_ref() }) else {
        return SptStatus::SptStatusNullPointer;
    };
    if out_epsilon.is_null() {
        return SptStatus::SptStatusNullPointer;
    }
    if accountant.stages.is_empty() {
        return SptStatus::SptStatusNoStages;
    }
    guard(|| match prv_epsilon_stages(&accountant.stages, delta) {
        Ok(eps) => {
            unsafe { *out_epsilon = eps };
            SptStatus::SptStatusOk
        }
        Err(_) => SptStatus::SptStatusAccounting,
    })
}

/// Renyi-accountant epsilon for a single mechanism; an independent, looser
/// cross-check of `spt_accountant_epsilon`.
///
/// # Safety
/// `out_epsilon` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spt_rdp_epsilon(
    noise_multiplier: f64,
    sampling_rate: f64,
    steps: u32,
    delta: f64,
    out_epsilon: *mut f64,
) -> SptStatus {
    if out_epsilon.is_null() {
        return SptStatus::SptStatusNullPointer;
    }
    guard(|| {
        let spec = match MechanismSpec::new(noise_multiplier, sampling_rate, steps) {
            Ok(s) => s,
            Err(_) => return SptStatus::SptStatusInvalidArgument,
        };
        match rdp_epsilon(&spec, delta) {
            Ok(eps) => {
                unsafe { *out_epsilon = eps };
                SptStatus::SptStatusOk
            }
            Err(_) => SptStatus::SptStatusAccounting,
        }
    })
}

/// Smallest noise multiplier meeting the (epsilon, delta) target for one
/// subsampled Gaussian mechanism.
///
/// # Safety
/// `out_noise_multiplier` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spt_calibrate_noise(
    epsilon: f64,
    delta: f64,
    sampling_rate: f64,
    steps: u32,
    out_noise_multiplier: *mut f64,
) -> SptStatus {
    if out_noise_multiplier.is_null() {
        return SptStatus::SptStatusNullPointer;
    }
    guard(|| {
        let target = match PrivacyBudget::new(epsilon, delta) {
            Ok(b) => b,
            Err(_) => return SptStatus::SptStatusInvalidArgument,
        };
        match calibrate_noise(&target, sampling_rate, steps) {
            Ok(sigma) => {
                unsafe { *out_noise_multiplier = sigma };
                SptStatus::SptStatusOk
            }
            Err(_) => SptStatus::SptStatusAccounting,
        }
    })
}

/// Closed-form adaptive composition of two stage budgets with slack
/// `delta_slack`; writes the composed epsilon and delta.
///
/// # Safety
/// `out_epsilon` and `out_delta` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spt_advanced_compose(
    epsilon1: f64,
    delta1: f64,
    epsilon2: f64,
    delta2: f64,
    delta_slack: f64,
    out_epsilon: *mut f64,
    out_delta: *mut f64,
) -> SptStatus {
    if out_epsilon.is_null() || out_delta.is_null() {
        return SptStatus::SptStatusNullPointer;
    }
    guard(|| {
        let (stage1, stage2) = match (
            PrivacyBudget::new(epsilon1, delta1),
            PrivacyBudget::new(epsilon2, delta2),
        ) {
            (Ok(a), Ok(b)) => (a, b),
            _ => return SptStatus::SptStatusInvalidArgument,
        };
        match advanced_compose(&CompositionInput {
            stage1,
            stage2,
            delta_slack,
        }) {
            Ok((total, _)) => {
                unsafe {
                    *out_epsilon = total.epsilon();
                    *out_delta = total.delta();
                }
                SptStatus::SptStatusOk
            }
            Err(_) => SptStatus::SptStatusInvalidArgument,
        }
    })
}

/// Static description of a status code; never null.
#[no_mangle]
pub extern "C" fn spt_status_message(status: SptStatus) -> *const std::os::raw::c_char {
    let msg: &'static [u8] = match status {
        SptStatus::SptStatusOk => b"ok\0",
        SptStatus::SptStatusNullPointer => b"null pointer argument\0",
        SptStatus::SptStatusInvalidArgument => b"invalid argument\0",
        SptStatus::SptStatusNoStages => b"accountant has no stages\0",
        SptStatus::SptStatusAccounting => b"accounting query failed\0",
        SptStatus::SptStatusInternal => b"internal error\0",
    };
    msg.as_ptr().cast()
}
