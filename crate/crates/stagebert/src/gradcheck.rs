//! Finite-difference verification of analytic gradients.
//!
//! The checker perturbs randomly chosen parameter coordinates, compares
//! central-difference quotients against the gradients produced by the
//! backward pass, and reports the worst relative error. It is meant to run
//! on `f64` models; the acceptance threshold there is 1e-5.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::Parameterized;
use crate::rng::{stream, stream_rng};

pub const DEFAULT_EPS: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

/// Worst probe of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (slot name, flat element index) of the worst probe.
    pub worst_coordinate: Option<(String, usize)>,
    pub probes: usize,
}

/// Fraction of the largest gradient magnitude below which a coordinate is
/// treated as signal-free for probing purposes.
///
/// A coordinate whose gradient is orders of magnitude below the model's
/// largest carries no information about the backward formulas: its central
/// difference measures truncation and f64 roundoff, not the gradient. (At
/// eps 1e-4 the difference of two ~O(1) loss values has absolute noise
/// around 1e-13, which already exceeds 1e-5 relative to a 1e-8 gradient.)
/// Probes are therefore drawn from coordinates with at least this fraction
/// of the peak magnitude; per-slot coverage probes below still catch a
/// backward rule that silently leaves a whole slot at zero.
const SIGNAL_FRACTION: f64 = 0.02;

/// Absolute analytic/numeric disagreement below which a per-slot coverage
/// probe is discarded as noise rather than entering the reported maximum.
const COVERAGE_ABS: f64 = 1e-6;

/// Checks analytic gradients of `loss_and_grad` with central differences.
///
/// `loss_and_grad` must run a full forward/backward: return the loss and
/// leave gradients accumulated in the slots (from zero). It must be a
/// deterministic pure function of the parameter values; this is verified by
/// evaluating it twice up front and comparing losses bit for bit.
///
/// `probe_count` coordinates are sampled randomly (with replacement) from
/// the signal-bearing coordinates across all slots; each slot additionally
/// gets one coverage probe at its largest-magnitude coordinate. Relative
/// error per probe is `|analytic - numeric| / max(|analytic|, |numeric|,
/// 1e-8)` and the maximum over probes is returned.
pub fn grad_check<T, S, F>(
    state: &mut S,
    mut loss_and_grad: F,
    probe_count: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    T: crate::scalar::Scalar,
    S: Parameterized<T>,
    F: FnMut(&mut S) -> Result<f64>,
{
    state.zero_grads();
    let loss_a = loss_and_grad(state)?;
    let analytic: Vec<Vec<f64>> = state
        .slots()
        .iter()
        .map(|s| s.grad.data().iter().map(|g| g.as_f64()).collect())
        .collect();
    let names: Vec<String> = state.slots().iter().map(|s| s.name.clone()).collect();
    state.zero_grads();
    let loss_b = loss_and_grad(state)?;
    if loss_a != loss_b {
        return Err(Error::NonFinite(format!(
            "loss function is not deterministic ({loss_a} vs {loss_b}); \
             disable dropout and fix the RNG before gradient checking"
        )));
    }
    if !loss_a.is_finite() {
        return Err(Error::NonFinite(format!("loss = {loss_a}")));
    }

    let total: usize = state.slots().iter().map(|s| s.value.len()).sum();
    if total == 0 {
        return Err(Error::Config("gradient check on empty parameter set".into()));
    }

    let peak = analytic
        .iter()
        .flat_map(|v| v.iter())
        .fold(0.0f64, |m, &g| m.max(g.abs()));
    let floor = (peak * SIGNAL_FRACTION).max(1e-12);
    let eligible: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(si, v)| {
            v.iter()
                .enumerate()
                .filter(|(_, g)| g.abs() >= floor)
                .map(move |(ei, _)| (si, ei))
        })
        .collect();

    let mut rng = stream_rng(seed, stream::GRADCHECK);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coordinate: None,
        probes: 0,
    };

    if !eligible.is_empty() {
        for _ in 0..probe_count {
            let (slot_idx, elem_idx) = eligible[rng.gen_range(0..eligible.len())];
            let (rel, _) = probe(state, &mut loss_and_grad, &analytic, slot_idx, elem_idx, eps)?;
            report.probes += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_coordinate = Some((names[slot_idx].clone(), elem_idx));
            }
        }
    }

    // Coverage: probe every slot's largest-magnitude coordinate. A backward
    // rule that never accumulates into some slot claims zero everywhere in
    // it, so the slot has no eligible coordinates and the random probes
    // cannot see the bug; here the numeric side exposes it. Disagreements at
    // roundoff scale are discarded (they carry no formula signal).
    for slot_idx in 0..analytic.len() {
        let Some(elem_idx) = argmax_abs(&analytic[slot_idx]) else {
            continue;
        };
        let (rel, abs_diff) = probe(state, &mut loss_and_grad, &analytic, slot_idx, elem_idx, eps)?;
        report.probes += 1;
        if abs_diff > COVERAGE_ABS && rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coordinate = Some((names[slot_idx].clone(), elem_idx));
        }
    }
    state.zero_grads();
    Ok(report)
}

/// One central-difference probe; returns (relative error, absolute
/// analytic/numeric difference). Restores the parameter exactly.
fn probe<T, S, F>(
    state: &mut S,
    loss_and_grad: &mut F,
    analytic: &[Vec<f64>],
    slot_idx: usize,
    elem_idx: usize,
    eps: f64,
) -> Result<(f64, f64)>
where
    T: crate::scalar::Scalar,
    S: Parameterized<T>,
    F: FnMut(&mut S) -> Result<f64>,
{
    let eps_t = T::of_f64(eps);
    let original = {
        let mut slots = state.slots_mut();
        let v = slots[slot_idx].value.data()[elem_idx];
        slots[slot_idx].value.data_mut()[elem_idx] = v + eps_t;
        v
    };
    state.zero_grads();
    let f_plus = loss_and_grad(state)?;
    {
        let mut slots = state.slots_mut();
        slots[slot_idx].value.data_mut()[elem_idx] = original - eps_t;
    }
    state.zero_grads();
    let f_minus = loss_and_grad(state)?;
    {
        let mut slots = state.slots_mut();
        slots[slot_idx].value.data_mut()[elem_idx] = original;
    }
    let numeric = (f_plus - f_minus) / (2.0 * eps);
    let a = analytic[slot_idx][elem_idx];
    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
    Ok((rel, (a - numeric).abs()))
}

fn argmax_abs(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if best.is_none() || v.abs() > values[best.unwrap()].abs() {
            best = Some(i);
        }
    }
    best
}
