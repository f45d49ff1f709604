//! Stimulation controllers: open-loop trapezoids for foot-drop induction and
//! correction, and the closed-loop toe-clearance controller with saturation
//! to the calibrated `[u_thr, u_max]` band and a 50 us/step rate limit.
//!
//! The closed-loop law is piecewise in the measured clearance `c`:
//! below `c_min` a full PID acts on `e_min = c_min - c`; between `c_min`
//! and `c_thr` only a derivative term reacts to falling clearance; above
//! `c_thr` the raw command is zero. Saturation then maps every in-swing
//! command into `[u_thr, u_max]`, which makes `u_thr` a floor on swing
//! stimulation. Outside swing the channel is off.

use thiserror::Error;

use crate::gait_state::GaitPhase;

/// Stimulation amplitude, fixed for every run.
pub const STIM_AMPLITUDE_MA: f64 = 25.0;
/// Stimulation frequency, fixed for every run.
pub const STIM_FREQUENCY_HZ: f64 = 25.0;
/// Hard ceiling of the stimulator's pulse width.
pub const MAX_PULSE_WIDTH_US: f64 = 1000.0;
/// Default per-step pulse-width slew limit.
pub const DEFAULT_RATE_LIMIT_US: f64 = 50.0;
/// Pulse-width increment of the identification protocol.
pub const IDENTIFICATION_STEP_US: f64 = 50.0;

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error("invalid calibration: {0}")]
    InvalidCalib(String),
    #[error("dt must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("no pulse width up to {0} us produced a measurable force")]
    NoThresholdFound(f64),
    #[error("foot-drop profile force {force_n:.1} N outside [10, 15] N at peak {peak_us} us")]
    GsForceOutOfRange { force_n: f64, peak_us: f64 },
    #[error("invalid trapezoid: {0}")]
    InvalidTrapezoid(String),
}

/// One stimulation command. Amplitude and frequency are constant per run;
/// only the pulse width is modulated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StimCommand {
    pub pulse_width_us: f64,
    pub amplitude_ma: f64,
    pub frequency_hz: f64,
}

impl StimCommand {
    pub fn new(pulse_width_us: f64) -> Self {
        debug_assert!((0.0..=MAX_PULSE_WIDTH_US).contains(&pulse_width_us));
        Self {
            pulse_width_us,
            amplitude_ma: STIM_AMPLITUDE_MA,
            frequency_hz: STIM_FREQUENCY_HZ,
        }
    }

    pub fn off() -> Self {
        Self::new(0.0)
    }

    pub fn is_off(&self) -> bool {
        self.pulse_width_us == 0.0
    }
}

/// Per-muscle calibration from the identification protocol. Both pulse
/// widths are multiples of the 50 us identification step.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MuscleCalib {
    pub u_thr_us: f64,
    pub u_max_us: f64,
}

impl MuscleCalib {
    pub fn new(u_thr_us: f64, u_max_us: f64) -> Result<Self, ControlError> {
        if !(u_thr_us > 0.0 && u_thr_us < u_max_us && u_max_us <= MAX_PULSE_WIDTH_US) {
            return Err(ControlError::InvalidCalib(format!(
                "need 0 < u_thr < u_max <= {MAX_PULSE_WIDTH_US}, got ({u_thr_us}, {u_max_us})"
            )));
        }
        for u in [u_thr_us, u_max_us] {
            if (u / IDENTIFICATION_STEP_US - (u / IDENTIFICATION_STEP_US).round()).abs() > 1e-9 {
                return Err(ControlError::InvalidCalib(format!(
                    "{u} us is not a multiple of the {IDENTIFICATION_STEP_US} us step"
                )));
            }
        }
        Ok(Self { u_thr_us, u_max_us })
    }
}

/// Closed-loop controller gains, `[k_p, k_d, k_i] = [25, 0.7, 1]` by default.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ControllerGains {
    /// us per mm of clearance error.
    pub k_p: f64,
    /// us·s per mm.
    pub k_d: f64,
    /// us per mm·s.
    pub k_i: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self {
            k_p: 25.0,
            k_d: 0.7,
            k_i: 1.0,
        }
    }
}

/// Clearance thresholds: the safety floor `c_min` and the controller
/// engagement threshold `c_thr`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClearanceThresholds {
    pub c_min_mm: f64,
    pub c_thr_mm: f64,
}

impl Default for ClearanceThresholds {
    fn default() -> Self {
        Self {
            c_min_mm: 10.0,
            c_thr_mm: 25.0,
        }
    }
}

impl ClearanceThresholds {
    pub fn validate(&self) -> Result<(), ControlError> {
        if self.c_min_mm > 0.0 && self.c_min_mm < self.c_thr_mm {
            Ok(())
        } else {
            Err(ControlError::InvalidCalib(format!(
                "need 0 < c_min < c_thr, got ({}, {})",
                self.c_min_mm, self.c_thr_mm
            )))
        }
    }
}

/// Number of backward differences averaged for the clearance velocity.
const VELOCITY_FILTER_LEN: usize = 3;

/// Mutable state of the closed-loop controller for one leg.
#[derive(Debug, Clone)]
pub struct ClosedLoopState {
    /// Accumulated integral of `e_min` (mm·s); reset at every swing onset.
    pub integral_mm_s: f64,
    pub prev_clearance_mm: f64,
    pub prev_output_us: f64,
    pub in_swing: bool,
    /// Smoothed clearance velocity (mm/s).
    pub filtered_velocity_mm_s: f64,
    diffs: [f64; VELOCITY_FILTER_LEN],
    diffs_len: usize,
    diffs_next: usize,
}

impl ClosedLoopState {
    pub fn new() -> Self {
        Self {
            integral_mm_s: 0.0,
            prev_clearance_mm: 0.0,
            prev_output_us: 0.0,
            in_swing: false,
            filtered_velocity_mm_s: 0.0,
            diffs: [0.0; VELOCITY_FILTER_LEN],
            diffs_len: 0,
            diffs_next: 0,
        }
    }

    /// Reset the per-swing terms at swing onset: zero the integral and seed
    /// the velocity filter so the first derivative is zero.
    pub fn enter_swing(&mut self, clearance_mm: f64) {
        self.integral_mm_s = 0.0;
        self.prev_clearance_mm = clearance_mm;
        self.filtered_velocity_mm_s = 0.0;
        self.diffs = [0.0; VELOCITY_FILTER_LEN];
        self.diffs_len = 0;
        self.diffs_next = 0;
        self.in_swing = true;
    }

    /// Seed state for direct tests: velocity filter primed to `c_dot` and a
    /// preset integral.
    pub fn seeded(clearance_mm: f64, c_dot_mm_s: f64, integral_mm_s: f64) -> Self {
        let mut s = Self::new();
        s.enter_swing(clearance_mm);
        s.filtered_velocity_mm_s = c_dot_mm_s;
        s.diffs = [c_dot_mm_s; VELOCITY_FILTER_LEN];
        s.diffs_len = VELOCITY_FILTER_LEN;
        s.integral_mm_s = integral_mm_s;
        s
    }

    fn push_velocity(&mut self, clearance_mm: f64, dt_s: f64) {
        let diff = (clearance_mm - self.prev_clearance_mm) / dt_s;
        self.diffs[self.diffs_next] = diff;
        self.diffs_next = (self.diffs_next + 1) % VELOCITY_FILTER_LEN;
        self.diffs_len = (self.diffs_len + 1).min(VELOCITY_FILTER_LEN);
        self.filtered_velocity_mm_s =
            self.diffs[..self.diffs_len].iter().sum::<f64>() / self.diffs_len as f64;
        self.prev_clearance_mm = clearance_mm;
    }
}

impl Default for ClosedLoopState {
    fn default() -> Self {
        Self::new()
    }
}

/// The piecewise closed-loop law as a pure function of clearance, clearance
/// velocity and the integral of `e_min`. Returns the unclamped command.
///
/// Boundaries belong to the upper region: `c = c_min` uses the middle
/// branch, `c = c_thr` the zero branch.
pub fn control_law(
    c_mm: f64,
    c_dot_mm_s: f64,
    integral_mm_s: f64,
    gains: &ControllerGains,
    thr: &ClearanceThresholds,
) -> f64 {
    if c_mm < thr.c_min_mm {
        let e_min = thr.c_min_mm - c_mm;
        let e_dot = -c_dot_mm_s;
        gains.k_p * e_min + gains.k_d * e_dot + gains.k_i * integral_mm_s
    } else if c_mm < thr.c_thr_mm {
        gains.k_d * (-c_dot_mm_s).max(0.0)
    } else {
        0.0
    }
}

/// One closed-loop evaluation against streaming state: updates the filtered
/// velocity, evaluates the law with the integral as accumulated so far, then
/// advances the integral by `e_min·dt` while below `c_min`.
pub fn closed_loop_raw(
    c_mm: f64,
    state: &mut ClosedLoopState,
    gains: &ControllerGains,
    thr: &ClearanceThresholds,
    dt_s: f64,
) -> Result<f64, ControlError> {
    if dt_s <= 0.0 {
        return Err(ControlError::NonPositiveDt(dt_s));
    }
    state.push_velocity(c_mm, dt_s);
    let u = control_law(
        c_mm,
        state.filtered_velocity_mm_s,
        state.integral_mm_s,
        gains,
        thr,
    );
    if c_mm < thr.c_min_mm {
        state.integral_mm_s += (thr.c_min_mm - c_mm) * dt_s;
    }
    Ok(u)
}

/// Saturate a raw command into the calibrated band: anything below `u_thr`
/// is lifted to the floor, anything above `u_max` is capped.
pub fn clamp_output(u_raw_us: f64, calib: &MuscleCalib) -> f64 {
    if u_raw_us < calib.u_thr_us {
        calib.u_thr_us
    } else if u_raw_us > calib.u_max_us {
        calib.u_max_us
    } else {
        u_raw_us
    }
}

/// Limit the change from the previous command to `±max_step_us`.
pub fn rate_limit(prev_us: f64, cmd_us: f64, max_step_us: f64) -> f64 {
    debug_assert!(max_step_us > 0.0);
    prev_us + (cmd_us - prev_us).clamp(-max_step_us, max_step_us)
}

/// Full closed-loop channel configuration for one leg.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopConfig {
    pub gains: ControllerGains,
    pub thresholds: ClearanceThresholds,
    pub calib: MuscleCalib,
    pub rate_limit_us: f64,
}

/// One control step: gate on gait phase, evaluate the law, saturate, rate
/// limit. In stance the command is zero and the rate limit is not applied
/// across the swing/stance transitions (pulse trains gate discretely).
pub fn controller_step(
    clearance_mm: f64,
    phase: &GaitPhase,
    state: &mut ClosedLoopState,
    cfg: &ClosedLoopConfig,
    dt_s: f64,
) -> Result<StimCommand, ControlError> {
    match phase {
        GaitPhase::Stance { .. } => {
            state.in_swing = false;
            state.prev_output_us = 0.0;
            Ok(StimCommand::off())
        }
        GaitPhase::Swing { .. } => {
            let entering = !state.in_swing;
            if entering {
                state.enter_swing(clearance_mm);
            }
            let raw = closed_loop_raw(clearance_mm, state, &cfg.gains, &cfg.thresholds, dt_s)?;
            let clamped = clamp_output(raw, &cfg.calib);
            let cmd = if entering {
                clamped
            } else {
                rate_limit(state.prev_output_us, clamped, cfg.rate_limit_us)
            };
            state.prev_output_us = cmd;
            Ok(StimCommand::new(cmd))
        }
    }
}

/// Trapezoidal open-loop stimulation envelope over an active window.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrapezoidProfile {
    pub peak_us: f64,
    pub ramp_up_frac: f64,
    pub plateau_frac: f64,
    pub ramp_down_frac: f64,
}

impl TrapezoidProfile {
    pub fn new(
        peak_us: f64,
        ramp_up_frac: f64,
        plateau_frac: f64,
        ramp_down_frac: f64,
    ) -> Result<Self, ControlError> {
        let sum = ramp_up_frac + plateau_frac + ramp_down_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ControlError::InvalidTrapezoid(format!(
                "fractions sum to {sum}, expected 1"
            )));
        }
        if ramp_up_frac < 0.0 || plateau_frac < 0.0 || ramp_down_frac < 0.0 {
            return Err(ControlError::InvalidTrapezoid("negative fraction".into()));
        }
        if !(0.0..=MAX_PULSE_WIDTH_US).contains(&peak_us) {
            return Err(ControlError::InvalidTrapezoid(format!(
                "peak {peak_us} us out of range"
            )));
        }
        Ok(Self {
            peak_us,
            ramp_up_frac,
            plateau_frac,
            ramp_down_frac,
        })
    }

    pub fn symmetric(peak_us: f64) -> Result<Self, ControlError> {
        Self::new(peak_us, 0.2, 0.6, 0.2)
    }
}

/// Evaluate the trapezoid at a window progress in `[0, 1]` (clamped).
pub fn open_loop_output(profile: &TrapezoidProfile, window_progress: f64) -> f64 {
    let p = window_progress.clamp(0.0, 1.0);
    let up = profile.ramp_up_frac;
    let down = profile.ramp_down_frac;
    if p < up {
        profile.peak_us * p / up
    } else if p <= up + profile.plateau_frac {
        profile.peak_us
    } else if down > 0.0 {
        profile.peak_us * (1.0 - p) / down
    } else {
        0.0
    }
}

/// Streaming open-loop channel: emits the trapezoid inside its active
/// window with the same per-step rate limit as the closed-loop channel.
#[derive(Debug, Clone)]
pub struct OpenLoopChannel {
    pub profile: TrapezoidProfile,
    pub rate_limit_us: f64,
    prev_output_us: Option<f64>,
}

impl OpenLoopChannel {
    pub fn new(profile: TrapezoidProfile, rate_limit_us: f64) -> Self {
        Self {
            profile,
            rate_limit_us,
            prev_output_us: None,
        }
    }

    /// `window_progress` is `Some` while the channel's window is active.
    pub fn step(&mut self, window_progress: Option<f64>) -> StimCommand {
        match window_progress {
            None => {
                self.prev_output_us = None;
                StimCommand::off()
            }
            Some(p) => {
                let target = open_loop_output(&self.profile, p);
                let cmd = match self.prev_output_us {
                    None => target,
                    Some(prev) => rate_limit(prev, target, self.rate_limit_us),
                };
                self.prev_output_us = Some(cmd);
                StimCommand::new(cmd)
            }
        }
    }
}

/// Peak of the open-loop dorsiflexor trapezoid: threshold plus half the
/// calibrated range.
pub fn ta_peak_from_calib(calib: &MuscleCalib) -> f64 {
    calib.u_thr_us + (calib.u_max_us - calib.u_thr_us) / 2.0
}

/// Identification protocol settings.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IdentificationConfig {
    pub step_us: f64,
    /// Force that counts as a measurable contraction.
    pub force_threshold_n: f64,
    /// Force gain per step below which the muscle is saturated.
    pub saturation_tolerance_n: f64,
    /// Stand-in for the participant's point of discomfort.
    pub discomfort_cap_us: f64,
}

impl Default for IdentificationConfig {
    fn default() -> Self {
        Self {
            step_us: IDENTIFICATION_STEP_US,
            force_threshold_n: 1.0,
            saturation_tolerance_n: 0.5,
            discomfort_cap_us: 800.0,
        }
    }
}

/// Run the incremental identification protocol against a steady-force probe
/// (1 s of stimulation per level). `u_thr` is the first step with a
/// measurable force; `u_max` is the last step that still added force above
/// the saturation tolerance, capped at the discomfort limit.
pub fn identify_calibration(
    probe: &mut dyn FnMut(f64) -> f64,
    cfg: &IdentificationConfig,
) -> Result<MuscleCalib, ControlError> {
    let cap = cfg.discomfort_cap_us.min(MAX_PULSE_WIDTH_US);
    let steps = (cap / cfg.step_us).floor() as usize;

    let mut u_thr = None;
    let mut force_at_thr = 0.0;
    for k in 1..=steps {
        let u = k as f64 * cfg.step_us;
        let f = probe(u);
        if f >= cfg.force_threshold_n {
            u_thr = Some(u);
            force_at_thr = f;
            break;
        }
    }
    let u_thr = u_thr.ok_or(ControlError::NoThresholdFound(cap))?;

    let mut u_max = cap;
    let mut prev_force = force_at_thr;
    let mut u = u_thr + cfg.step_us;
    while u <= cap {
        let f = probe(u);
        if f - prev_force < cfg.saturation_tolerance_n {
            u_max = u - cfg.step_us;
            break;
        }
        prev_force = f;
        u += cfg.step_us;
    }
    let u_max = u_max.max(u_thr + cfg.step_us).min(cap);
    MuscleCalib::new(u_thr, u_max)
}

/// Build the plantarflexor foot-drop trapezoid: start just above threshold
/// and escalate in identification steps until the steady force reaches the
/// 10-15 N induction band.
pub fn gs_foot_drop_profile(
    calib: &MuscleCalib,
    probe: &mut dyn FnMut(f64) -> f64,
    step_us: f64,
) -> Result<TrapezoidProfile, ControlError> {
    let mut peak = calib.u_thr_us + step_us;
    let mut force = probe(peak);
    while force < 10.0 && peak + step_us <= MAX_PULSE_WIDTH_US {
        peak += step_us;
        force = probe(peak);
    }
    if !(10.0..=15.0).contains(&force) {
        return Err(ControlError::GsForceOutOfRange {
            force_n: force,
            peak_us: peak,
        });
    }
    TrapezoidProfile::symmetric(peak)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn default_calib() -> MuscleCalib {
        MuscleCalib::new(100.0, 300.0).unwrap()
    }

    #[test]
    fn ta_peak_is_threshold_plus_half_range() {
        assert_eq!(
            ta_peak_from_calib(&MuscleCalib::new(100.0, 300.0).unwrap()),
            200.0
        );
        assert_eq!(
            ta_peak_from_calib(&MuscleCalib::new(150.0, 600.0).unwrap()),
            375.0
        );
    }

    #[test]
    fn ta_peak_strictly_inside_band() {
        for (thr, max) in [(50.0, 100.0), (100.0, 950.0), (400.0, 450.0)] {
            let calib = MuscleCalib::new(thr, max).unwrap();
            let peak = ta_peak_from_calib(&calib);
            assert!(peak > calib.u_thr_us && peak < calib.u_max_us);
        }
    }

    #[test]
    fn calib_rejects_degenerate_values() {
        assert!(MuscleCalib::new(0.0, 300.0).is_err());
        assert!(MuscleCalib::new(200.0, 200.0).is_err());
        assert!(MuscleCalib::new(300.0, 200.0).is_err());
        assert!(MuscleCalib::new(100.0, 1050.0).is_err());
        assert!(MuscleCalib::new(125.0, 300.0).is_err());
    }

    #[test]
    fn trapezoid_examples() {
        let p = TrapezoidProfile::new(200.0, 0.2, 0.6, 0.2).unwrap();
        assert_eq!(open_loop_output(&p, 0.5), 200.0); // plateau midpoint
        assert_eq!(open_loop_output(&p, 0.0), 0.0);
        assert_eq!(open_loop_output(&p, 1.0), 0.0);
        assert_abs_diff_eq!(open_loop_output(&p, 0.1), 100.0, epsilon = 1e-12);
        // Out-of-range progress clamps.
        assert_eq!(open_loop_output(&p, -0.3), 0.0);
        assert_eq!(open_loop_output(&p, 1.7), 0.0);
    }

    #[test]
    fn trapezoid_rejects_bad_fractions() {
        assert!(TrapezoidProfile::new(100.0, 0.3, 0.3, 0.3).is_err());
        assert!(TrapezoidProfile::new(100.0, -0.1, 0.9, 0.2).is_err());
        assert!(TrapezoidProfile::new(1500.0, 0.2, 0.6, 0.2).is_err());
    }

    #[test]
    fn control_law_branch_examples() {
        let gains = ControllerGains::default();
        let thr = ClearanceThresholds::default();
        // Above c_thr: off.
        assert_eq!(control_law(30.0, 0.0, 0.0, &gains, &thr), 0.0);
        // Below c_min, pure proportional: k_p * (10 - 5) = 125.
        assert_eq!(control_law(5.0, 0.0, 0.0, &gains, &thr), 125.0);
        // Middle band, falling clearance: k_d * 20 = 14.
        assert_abs_diff_eq!(control_law(15.0, -20.0, 0.0, &gains, &thr), 14.0, epsilon = 1e-12);
        // Middle band, rising clearance: derivative term gated to zero.
        assert_eq!(control_law(15.0, 20.0, 0.0, &gains, &thr), 0.0);
        // Boundaries belong to the upper region.
        assert_eq!(control_law(10.0, 20.0, 5.0, &gains, &thr), 0.0);
        assert_eq!(control_law(25.0, -20.0, 0.0, &gains, &thr), 0.0);
    }

    #[test]
    fn closed_loop_raw_uses_integral_then_advances_it() {
        let gains = ControllerGains::default();
        let thr = ClearanceThresholds::default();
        let mut state = ClosedLoopState::seeded(5.0, 0.0, 0.0);
        let u = closed_loop_raw(5.0, &mut state, &gains, &thr, 0.01).unwrap();
        assert_eq!(u, 125.0);
        assert_abs_diff_eq!(state.integral_mm_s, 0.05, epsilon = 1e-15);
        // Integral does not accumulate in the middle band.
        let mut state = ClosedLoopState::seeded(15.0, 0.0, 1.0);
        closed_loop_raw(15.0, &mut state, &gains, &thr, 0.01).unwrap();
        assert_eq!(state.integral_mm_s, 1.0);
    }

    #[test]
    fn closed_loop_raw_rejects_bad_dt() {
        let gains = ControllerGains::default();
        let thr = ClearanceThresholds::default();
        let mut state = ClosedLoopState::new();
        assert_eq!(
            closed_loop_raw(5.0, &mut state, &gains, &thr, 0.0),
            Err(ControlError::NonPositiveDt(0.0))
        );
    }

    #[test]
    fn velocity_filter_averages_last_three_differences() {
        let gains = ControllerGains::default();
        let thr = ClearanceThresholds::default();
        let mut state = ClosedLoopState::new();
        state.enter_swing(20.0);
        // Clearances 20 -> 19 -> 17 -> 14: diffs -100, -200, -300 mm/s.
        for c in [19.0, 17.0, 14.0] {
            closed_loop_raw(c, &mut state, &gains, &thr, 0.01).unwrap();
        }
        assert_abs_diff_eq!(state.filtered_velocity_mm_s, -200.0, epsilon = 1e-9);
    }

    #[test]
    fn clamp_examples() {
        let calib = default_calib();
        assert_eq!(clamp_output(0.0, &calib), 100.0);
        assert_eq!(clamp_output(200.0, &calib), 200.0);
        assert_eq!(clamp_output(900.0, &calib), 300.0);
    }

    #[test]
    fn rate_limit_examples() {
        assert_eq!(rate_limit(100.0, 400.0, 50.0), 150.0);
        assert_eq!(rate_limit(300.0, 0.0, 50.0), 250.0);
        assert_eq!(rate_limit(200.0, 220.0, 50.0), 220.0);
    }

    fn cl_config() -> ClosedLoopConfig {
        ClosedLoopConfig {
            gains: ControllerGains::default(),
            thresholds: ClearanceThresholds::default(),
            calib: default_calib(),
            rate_limit_us: DEFAULT_RATE_LIMIT_US,
        }
    }

    #[test]
    fn high_clearance_swing_sits_at_floor() {
        let cfg = cl_config();
        let mut state = ClosedLoopState::new();
        let swing = GaitPhase::Swing { progress: 0.5 };
        for _ in 0..40 {
            let cmd = controller_step(50.0, &swing, &mut state, &cfg, 0.01).unwrap();
            assert_eq!(cmd.pulse_width_us, cfg.calib.u_thr_us);
        }
    }

    #[test]
    fn stance_is_always_off() {
        let cfg = cl_config();
        let mut state = ClosedLoopState::new();
        let stance = GaitPhase::Stance {
            mid_stance_reached: true,
        };
        for c in [-20.0, 0.0, 5.0, 80.0] {
            let cmd = controller_step(c, &stance, &mut state, &cfg, 0.01).unwrap();
            assert!(cmd.is_off());
        }
    }

    #[test]
    fn integral_resets_at_swing_onset() {
        let cfg = cl_config();
        let mut state = ClosedLoopState::new();
        let swing = GaitPhase::Swing { progress: 0.2 };
        let stance = GaitPhase::Stance {
            mid_stance_reached: false,
        };
        for _ in 0..10 {
            controller_step(2.0, &swing, &mut state, &cfg, 0.01).unwrap();
        }
        assert!(state.integral_mm_s > 0.0);
        controller_step(2.0, &stance, &mut state, &cfg, 0.01).unwrap();
        controller_step(2.0, &swing, &mut state, &cfg, 0.01).unwrap();
        // One fresh step's worth of integral only.
        assert_abs_diff_eq!(state.integral_mm_s, 8.0 * 0.01, epsilon = 1e-12);
    }

    #[test]
    fn in_swing_commands_stay_in_band_and_slew_limited() {
        let cfg = cl_config();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let mut state = ClosedLoopState::new();
            let mut prev: Option<f64> = None;
            for k in 0..120 {
                let in_swing = (k / 40) % 2 == 0;
                let phase = if in_swing {
                    GaitPhase::Swing { progress: 0.5 }
                } else {
                    GaitPhase::Stance {
                        mid_stance_reached: false,
                    }
                };
                let c = rng.gen_range(-30.0..70.0);
                let cmd = controller_step(c, &phase, &mut state, &cfg, 0.01).unwrap();
                if in_swing {
                    assert!(cmd.pulse_width_us >= cfg.calib.u_thr_us);
                    assert!(cmd.pulse_width_us <= cfg.calib.u_max_us);
                    if let Some(p) = prev {
                        assert!((cmd.pulse_width_us - p).abs() <= cfg.rate_limit_us + 1e-12);
                    }
                    prev = Some(cmd.pulse_width_us);
                } else {
                    assert!(cmd.is_off());
                    prev = None;
                }
            }
        }
    }

    #[test]
    fn raw_output_monotone_in_clearance_at_rest() {
        let gains = ControllerGains::default();
        let thr = ClearanceThresholds::default();
        let mut prev = f64::INFINITY;
        let mut c = 0.0;
        while c < thr.c_min_mm {
            let u = control_law(c, 0.0, 0.0, &gains, &thr);
            assert!(u < prev, "not strictly decreasing at c={c}");
            prev = u;
            c += 0.25;
        }
        while c < thr.c_thr_mm {
            assert_eq!(control_law(c, 0.0, 0.0, &gains, &thr), 0.0);
            c += 0.25;
        }
        assert_eq!(control_law(60.0, 0.0, 0.0, &gains, &thr), 0.0);
    }

    /// Linear-ramp recruitment probe with true threshold and saturation.
    fn ramp_probe(thr: f64, sat: f64, max_force: f64) -> impl FnMut(f64) -> f64 {
        move |u: f64| ((u - thr) / (sat - thr)).clamp(0.0, 1.0) * max_force
    }

    #[test]
    fn identification_finds_threshold_one_step_up() {
        let mut probe = ramp_probe(180.0, 600.0, 40.0);
        let calib = identify_calibration(&mut probe, &IdentificationConfig::default()).unwrap();
        assert_eq!(calib.u_thr_us, 200.0);
    }

    #[test]
    fn identification_finds_saturation_within_one_step() {
        let mut probe = ramp_probe(180.0, 600.0, 40.0);
        let calib = identify_calibration(&mut probe, &IdentificationConfig::default()).unwrap();
        assert!((calib.u_max_us - 600.0).abs() <= 50.0, "{}", calib.u_max_us);
    }

    #[test]
    fn identification_fails_on_inert_muscle() {
        let mut probe = |_: f64| 0.0;
        assert!(matches!(
            identify_calibration(&mut probe, &IdentificationConfig::default()),
            Err(ControlError::NoThresholdFound(_))
        ));
    }

    #[test]
    fn identification_respects_discomfort_cap() {
        // Never saturates: the cap stands in for the point of discomfort.
        let mut probe = |u: f64| u * 0.1;
        let calib = identify_calibration(&mut probe, &IdentificationConfig::default()).unwrap();
        assert_eq!(calib.u_max_us, 800.0);
    }

    #[test]
    fn identification_brackets_random_monotone_curves() {
        let cfg = IdentificationConfig {
            force_threshold_n: 0.5,
            ..IdentificationConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let thr = rng.gen_range(100.0..400.0);
            let sat = thr + rng.gen_range(200.0..350.0);
            let max_force = rng.gen_range(30.0..50.0);
            let mut probe = ramp_probe(thr, sat, max_force);
            let calib = identify_calibration(&mut probe, &cfg).unwrap();
            // Ground truth for u_thr: first pulse width with measurable force.
            let slope = max_force / (sat - thr);
            let true_thr = thr + cfg.force_threshold_n / slope;
            assert!(
                calib.u_thr_us >= true_thr && calib.u_thr_us - true_thr < cfg.step_us,
                "u_thr {} vs true {true_thr}",
                calib.u_thr_us
            );
            assert!(
                (calib.u_max_us - sat).abs() <= cfg.step_us,
                "u_max {} vs sat {sat}",
                calib.u_max_us
            );
        }
    }

    #[test]
    fn gs_profile_starts_one_step_above_threshold() {
        let calib = MuscleCalib::new(200.0, 600.0).unwrap();
        // 12 N right at the first guess.
        let mut probe = |_: f64| 12.0;
        let profile = gs_foot_drop_profile(&calib, &mut probe, 50.0).unwrap();
        assert_eq!(profile.peak_us, 250.0);
        assert_eq!(
            (profile.ramp_up_frac, profile.plateau_frac, profile.ramp_down_frac),
            (0.2, 0.6, 0.2)
        );
    }

    #[test]
    fn gs_profile_escalates_when_force_low() {
        let calib = MuscleCalib::new(200.0, 600.0).unwrap();
        // 9 N at 250 us, 3 N more per step after.
        let mut probe = |u: f64| 9.0 + ((u - 250.0) / 50.0).max(0.0) * 3.0;
        let profile = gs_foot_drop_profile(&calib, &mut probe, 50.0).unwrap();
        assert_eq!(profile.peak_us, 300.0);
    }

    #[test]
    fn gs_profile_rejects_out_of_band_force() {
        let calib = MuscleCalib::new(200.0, 600.0).unwrap();
        let mut too_strong = |_: f64| 20.0;
        assert!(matches!(
            gs_foot_drop_profile(&calib, &mut too_strong, 50.0),
            Err(ControlError::GsForceOutOfRange { .. })
        ));
    }

    #[test]
    fn open_loop_channel_gates_and_slews() {
        let profile = TrapezoidProfile::symmetric(400.0).unwrap();
        let mut ch = OpenLoopChannel::new(profile, DEFAULT_RATE_LIMIT_US);
        assert!(ch.step(None).is_off());
        let mut prev = None;
        for k in 0..=50 {
            let cmd = ch.step(Some(k as f64 / 50.0));
            if let Some(p) = prev {
                assert!((cmd.pulse_width_us - p as f64).abs() <= DEFAULT_RATE_LIMIT_US + 1e-12);
            }
            prev = Some(cmd.pulse_width_us);
        }
        assert!(ch.step(None).is_off());
    }
}
