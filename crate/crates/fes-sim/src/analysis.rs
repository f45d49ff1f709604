//! Gait-cycle statistics: 0-100% cycle normalization, mean +- SD curves,
//! pointwise two-sample permutation tests, minimum toe clearance,
//! within-cycle variability and cumulative electrical charge.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::seeds::derive_seed;

/// Samples per normalized gait cycle (0-100% inclusive).
pub const CYCLE_POINTS: usize = 101;

/// Default mid-swing sub-window for the minimum-toe-clearance metric, as
/// fractions of the swing phase.
pub const MTC_WINDOW: (f64, f64) = (0.2, 0.8);

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("cycle has {0} samples, need at least 4")]
    TooFewSamples(usize),
    #[error("need at least 2 cycles, got {0}")]
    TooFewCycles(usize),
    #[error("window contains no cycle points")]
    EmptyWindow,
    #[error("bad window: {0}")]
    BadWindow(String),
    #[error("stimulation log not sorted at row {0}")]
    UnsortedLog(usize),
    #[error("mismatched scenario: {0}")]
    MismatchedScenario(String),
}

/// A signal resampled onto the normalized gait cycle: exactly 101 values at
/// 0, 1, ..., 100% of the cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleSeries {
    values: Vec<f64>,
    pub cycle_id: usize,
}

impl CycleSeries {
    pub fn from_values(values: Vec<f64>, cycle_id: usize) -> Self {
        assert_eq!(values.len(), CYCLE_POINTS, "cycle series must have 101 samples");
        assert!(values.iter().all(|v| v.is_finite()), "cycle series must be finite");
        Self { values, cycle_id }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Linearly interpolate one cycle's samples onto the 101-point grid.
pub fn resample_cycle(samples: &[f64], cycle_id: usize) -> Result<CycleSeries, AnalysisError> {
    if samples.len() < 4 {
        return Err(AnalysisError::TooFewSamples(samples.len()));
    }
    let n = samples.len();
    let values = (0..CYCLE_POINTS)
        .map(|k| {
            let x = k as f64 / (CYCLE_POINTS - 1) as f64 * (n - 1) as f64;
            let i = (x.floor() as usize).min(n - 2);
            let frac = x - i as f64;
            samples[i] + (samples[i + 1] - samples[i]) * frac
        })
        .collect();
    Ok(CycleSeries::from_values(values, cycle_id))
}

/// Pointwise sample mean and sample SD (n-1 denominator) across cycles.
pub fn mean_sd(cycles: &[CycleSeries]) -> Result<(Vec<f64>, Vec<f64>), AnalysisError> {
    if cycles.len() < 2 {
        return Err(AnalysisError::TooFewCycles(cycles.len()));
    }
    let n = cycles.len() as f64;
    let mut mean = vec![0.0; CYCLE_POINTS];
    for c in cycles {
        for (m, v) in mean.iter_mut().zip(c.values()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut sd = vec![0.0; CYCLE_POINTS];
    for c in cycles {
        for ((s, v), m) in sd.iter_mut().zip(c.values()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in sd.iter_mut() {
        *s = (*s / (n - 1.0)).sqrt();
    }
    Ok((mean, sd))
}

/// Result of a pointwise permutation test.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PermutationResult {
    pub p_values: Vec<f64>,
    pub significant_mask: Vec<bool>,
    pub alpha: f64,
}

impl PermutationResult {
    pub fn any_significant(&self) -> bool {
        self.significant_mask.iter().any(|&s| s)
    }
}

/// Pointwise two-sided permutation test of the group mean difference.
///
/// The pooled cycles are put in a canonical (content-sorted) order and each
/// permutation selects `min(n_a, n_b)` rows for the smaller group, so the
/// test is exactly invariant to swapping the group arguments. The
/// permutation for index `i` is seeded independently from the master seed,
/// which makes the result independent of the parallel worker count.
pub fn permutation_test(
    group_a: &[CycleSeries],
    group_b: &[CycleSeries],
    n_perm: usize,
    alpha: f64,
    seed: u64,
) -> Result<PermutationResult, AnalysisError> {
    if group_a.len() < 2 {
        return Err(AnalysisError::TooFewCycles(group_a.len()));
    }
    if group_b.len() < 2 {
        return Err(AnalysisError::TooFewCycles(group_b.len()));
    }
    let (n_a, n_b) = (group_a.len(), group_b.len());
    let n = n_a + n_b;
    let k = n_a.min(n_b);

    let observed: Vec<f64> = {
        let (mean_a, _) = column_means(group_a);
        let (mean_b, _) = column_means(group_b);
        mean_a
            .iter()
            .zip(&mean_b)
            .map(|(a, b)| (a - b).abs())
            .collect()
    };

    // Canonical pool: content-sorted rows, so the permutation stream does
    // not depend on which group came first.
    let mut pool: Vec<&[f64]> = group_a
        .iter()
        .chain(group_b.iter())
        .map(|c| c.values())
        .collect();
    pool.sort_by(|x, y| {
        for (a, b) in x.iter().zip(y.iter()) {
            match a.total_cmp(b) {
                std::cmp::Ordering::Equal => continue,
                other => return other,
            }
        }
        std::cmp::Ordering::Equal
    });
    let totals: Vec<f64> = (0..CYCLE_POINTS)
        .map(|j| pool.iter().map(|row| row[j]).sum())
        .collect();

    let counts = (0..n_perm)
        .into_par_iter()
        .fold(
            || vec![0u32; CYCLE_POINTS],
            |mut counts, i| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("perm/{i}")));
                let mut indices: Vec<usize> = (0..n).collect();
                // Partial Fisher-Yates: only the first k entries are used.
                for s in 0..k {
                    let j = (rng.next_u64() % (n - s) as u64) as usize + s;
                    indices.swap(s, j);
                }
                for (j, count) in counts.iter_mut().enumerate() {
                    let sum_small: f64 = indices[..k].iter().map(|&r| pool[r][j]).sum();
                    let stat =
                        (sum_small / k as f64 - (totals[j] - sum_small) / (n - k) as f64).abs();
                    // Tolerance so exact ties (the identity partition) count
                    // as >= despite summation-order rounding.
                    if stat >= observed[j] - 1e-9 * (1.0 + observed[j].abs()) {
                        *count += 1;
                    }
                }
                counts
            },
        )
        .reduce(
            || vec![0u32; CYCLE_POINTS],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
                a
            },
        );

    let p_values: Vec<f64> = counts
        .iter()
        .map(|&c| (1 + c as usize) as f64 / (n_perm + 1) as f64)
        .collect();
    let significant_mask = p_values.iter().map(|&p| p < alpha).collect();
    Ok(PermutationResult {
        p_values,
        significant_mask,
        alpha,
    })
}

use rand::RngCore;

fn column_means(cycles: &[CycleSeries]) -> (Vec<f64>, usize) {
    let mut mean = vec![0.0; CYCLE_POINTS];
    for c in cycles {
        for (m, v) in mean.iter_mut().zip(c.values()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= cycles.len() as f64;
    }
    (mean, cycles.len())
}

fn window_indices(lo_frac: f64, hi_frac: f64) -> Result<(usize, usize), AnalysisError> {
    if !(0.0..=1.0).contains(&lo_frac) || !(0.0..=1.0).contains(&hi_frac) || lo_frac >= hi_frac {
        return Err(AnalysisError::BadWindow(format!(
            "fractions ({lo_frac}, {hi_frac})"
        )));
    }
    let grid = (CYCLE_POINTS - 1) as f64;
    let start = (lo_frac * grid - 1e-9).ceil() as usize;
    let end = ((hi_frac * grid + 1e-9).floor() as usize).min(CYCLE_POINTS - 1);
    if start > end {
        return Err(AnalysisError::EmptyWindow);
    }
    Ok((start, end))
}

/// Minimum clearance over the mid-swing sub-window (by default the central
/// 20-80% of the swing phase).
pub fn min_toe_clearance(
    cycle: &CycleSeries,
    swing_window: (f64, f64),
    mtc_window: (f64, f64),
) -> Result<f64, AnalysisError> {
    let (to, hs) = swing_window;
    if !(0.0 < to && to < hs && hs <= 1.0) {
        return Err(AnalysisError::BadWindow(format!("swing window ({to}, {hs})")));
    }
    let span = hs - to;
    let lo = to + mtc_window.0 * span;
    let hi = to + mtc_window.1 * span;
    let (start, end) = window_indices(lo, hi)?;
    Ok(cycle.values()[start..=end]
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min))
}

/// Within-cycle variability over swing: the pointwise SD across cycles,
/// summarized as (mean of the SDs, SD of the SDs) over swing points.
pub fn within_cycle_variability(
    cycles: &[CycleSeries],
    swing_window: (f64, f64),
) -> Result<(f64, f64), AnalysisError> {
    if cycles.len() < 2 {
        return Err(AnalysisError::TooFewCycles(cycles.len()));
    }
    let (start, end) = window_indices(swing_window.0, swing_window.1)?;
    let (_, sd) = mean_sd(cycles)?;
    let sds = &sd[start..=end];
    let n = sds.len() as f64;
    let mean = sds.iter().sum::<f64>() / n;
    let var = if sds.len() > 1 {
        sds.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok((mean, var.sqrt()))
}

/// One stimulation log row relevant to charge accounting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StimSample {
    pub t_s: f64,
    pub pulse_width_us: f64,
}

/// Cumulative charge over a stimulation log.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChargeSummary {
    pub total_mc: f64,
    pub per_cycle_mc: Vec<f64>,
    /// Pulses with a nonzero width, in the accounted domain.
    pub delivered_pulses: usize,
}

/// Sum `amplitude x pulse_width` over delivered pulses: one pulse per
/// `1/frequency` interval, at the pulse width commanded at that instant
/// (zero-order hold over the log). When cycle bounds are given, accounting
/// is restricted to complete cycles and `total` equals the per-cycle sum.
pub fn cumulative_charge(
    log: &[StimSample],
    amplitude_ma: f64,
    frequency_hz: f64,
    cycle_bounds_s: &[(f64, f64)],
) -> Result<ChargeSummary, AnalysisError> {
    assert!(amplitude_ma > 0.0 && frequency_hz > 0.0);
    for (i, w) in log.windows(2).enumerate() {
        if w[1].t_s < w[0].t_s {
            return Err(AnalysisError::UnsortedLog(i + 1));
        }
    }
    if log.is_empty() {
        return Ok(ChargeSummary {
            total_mc: 0.0,
            per_cycle_mc: vec![0.0; cycle_bounds_s.len()],
            delivered_pulses: 0,
        });
    }

    let t0 = log[0].t_s;
    let t1 = log[log.len() - 1].t_s;
    let k0 = (t0 * frequency_hz - 1e-9).ceil() as i64;
    let k1 = (t1 * frequency_hz + 1e-9).floor() as i64;

    // mA * us = 1e-6 mC.
    let pulse_charge_mc = |pw_us: f64| amplitude_ma * pw_us * 1e-6;

    let mut per_cycle = vec![0.0; cycle_bounds_s.len()];
    let mut total = 0.0;
    let mut delivered = 0usize;
    let mut row = 0usize;
    for k in k0..=k1 {
        let t_pulse = k as f64 / frequency_hz;
        while row + 1 < log.len() && log[row + 1].t_s <= t_pulse + 1e-12 {
            row += 1;
        }
        let pw = log[row].pulse_width_us;
        let in_domain = if cycle_bounds_s.is_empty() {
            total += pulse_charge_mc(pw);
            true
        } else {
            match cycle_bounds_s
                .iter()
                .position(|&(s, e)| t_pulse >= s && t_pulse < e)
            {
                Some(c) => {
                    per_cycle[c] += pulse_charge_mc(pw);
                    total += pulse_charge_mc(pw);
                    true
                }
                None => false,
            }
        };
        if in_domain && pw > 0.0 {
            delivered += 1;
        }
    }
    Ok(ChargeSummary {
        total_mc: total,
        per_cycle_mc: per_cycle,
        delivered_pulses: delivered,
    })
}

/// Stimulation-reduction summary of closed loop vs open loop, with the
/// structural bound implied by the `u_thr` floor on swing stimulation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReductionReport {
    pub reduction: f64,
    pub floor_bound: f64,
    pub cl_total_mc: f64,
    pub ol_total_mc: f64,
    pub floor_charge_mc: f64,
}

pub fn reduction_report(
    cl: &ChargeSummary,
    ol: &ChargeSummary,
    u_thr_us: f64,
    amplitude_ma: f64,
) -> Result<ReductionReport, AnalysisError> {
    if ol.total_mc <= 0.0 {
        return Err(AnalysisError::MismatchedScenario(
            "open-loop reference delivered no charge".into(),
        ));
    }
    let floor_charge_mc = cl.delivered_pulses as f64 * amplitude_ma * u_thr_us * 1e-6;
    let reduction = 1.0 - cl.total_mc / ol.total_mc;
    let floor_bound = 1.0 - floor_charge_mc / ol.total_mc;
    if reduction > floor_bound + 1e-9 {
        return Err(AnalysisError::MismatchedScenario(format!(
            "reduction {reduction} exceeds the floor bound {floor_bound}"
        )));
    }
    Ok(ReductionReport {
        reduction,
        floor_bound,
        cl_total_mc: cl.total_mc,
        ol_total_mc: ol.total_mc,
        floor_charge_mc,
    })
}
