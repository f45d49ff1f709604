//! Synthetic walker plant: generates marker trajectories and toe-clearance
//! dynamics for a configurable speed/incline scenario, responds to TA/GS
//! stimulation through a recruitment curve and first-order activation
//! dynamics, and publishes ground truth (events, clearance, forces) for
//! verification.
//!
//! None of this stands in for real physiology; it is sized so that the
//! induced foot drop pushes the minimum toe clearance well below the 10 mm
//! safety floor, dorsiflexor stimulation can rescue it, and the within-cycle
//! variability of the clearance signal matches the reference targets.

use nalgebra::{Point3, Rotation3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::controllers::StimCommand;
use crate::geometry::{FootSide, GroundPlane, LabeledPoint, RigidTransform, SoleCloud};
use crate::mocap::MarkerFrame;
use crate::seeds::derive_seed;

/// Fixed control/marker rate of the simulator.
pub const CONTROL_DT_S: f64 = 0.01;

#[derive(Debug, Error, PartialEq)]
pub enum PlantError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

/// Stand-in muscle: recruitment thresholds, force scale, activation time
/// constants and the clearance gain of full activation during swing.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MuscleModel {
    pub true_threshold_us: f64,
    pub true_saturation_us: f64,
    pub max_force_n: f64,
    pub act_tau_s: f64,
    pub deact_tau_s: f64,
    /// mm of swing clearance per unit activation (applied +TA / -GS).
    pub clearance_gain_mm: f64,
}

impl MuscleModel {
    pub fn default_ta() -> Self {
        Self {
            true_threshold_us: 120.0,
            true_saturation_us: 370.0,
            max_force_n: 30.0,
            act_tau_s: 0.040,
            deact_tau_s: 0.060,
            clearance_gain_mm: 55.0,
        }
    }

    pub fn default_gs() -> Self {
        Self {
            true_threshold_us: 150.0,
            true_saturation_us: 550.0,
            max_force_n: 50.0,
            act_tau_s: 0.040,
            deact_tau_s: 0.060,
            clearance_gain_mm: 140.0,
        }
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        if !(self.true_threshold_us > 0.0
            && self.true_threshold_us < self.true_saturation_us
            && self.max_force_n > 0.0
            && self.act_tau_s > 0.0
            && self.deact_tau_s > 0.0)
        {
            return Err(PlantError::InvalidScenario(format!(
                "invalid muscle model {self:?}"
            )));
        }
        Ok(())
    }

    /// Steady-force probe for the identification protocol: 1 s of constant
    /// stimulation (the on-phase of the 1 s on / 5 s off pattern) from rest.
    pub fn steady_force_probe(&self) -> impl FnMut(f64) -> f64 + '_ {
        move |u: f64| {
            let drive = recruitment(u, self);
            let mut a = 0.0;
            for _ in 0..100 {
                a = activation_step(a, drive, self, CONTROL_DT_S);
            }
            self.max_force_n * a
        }
    }
}

/// Normalized drive of a pulse width: zero at or below the true threshold,
/// one at or above saturation, linear in between.
pub fn recruitment(u_us: f64, m: &MuscleModel) -> f64 {
    ((u_us - m.true_threshold_us) / (m.true_saturation_us - m.true_threshold_us)).clamp(0.0, 1.0)
}

/// First-order activation lag toward `drive`, with separate activation and
/// deactivation time constants. Exact exponential update, so the result is
/// independent of sub-stepping for a constant drive.
pub fn activation_step(a: f64, drive: f64, m: &MuscleModel, dt_s: f64) -> f64 {
    debug_assert!(dt_s > 0.0);
    let tau = if drive > a { m.act_tau_s } else { m.deact_tau_s };
    let next = drive + (a - drive) * (-dt_s / tau).exp();
    next.clamp(0.0, 1.0)
}

/// Experimental condition of a recording. `FesOl` and `FesCl` both denote
/// the combined corrective recording (open loop on the left leg, closed loop
/// on the right); as per-leg tags they name which controller drove that leg.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
pub enum Condition {
    #[serde(rename = "FES_OFF")]
    FesOff,
    #[serde(rename = "FES_FD")]
    FesFd,
    #[serde(rename = "FES_OL")]
    FesOl,
    #[serde(rename = "FES_CL")]
    FesCl,
}

impl Condition {
    pub fn label(&self) -> &'static str {
        match self {
            Condition::FesOff => "FES_OFF",
            Condition::FesFd => "FES_FD",
            Condition::FesOl => "FES_OL",
            Condition::FesCl => "FES_CL",
        }
    }

    pub const ALL: [Condition; 4] = [
        Condition::FesOff,
        Condition::FesFd,
        Condition::FesOl,
        Condition::FesCl,
    ];
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.label())
    }
}

impl std::str::FromStr for Condition {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "FES_OFF" => Ok(Condition::FesOff),
            "FES_FD" => Ok(Condition::FesFd),
            "FES_OL" => Ok(Condition::FesOl),
            "FES_CL" => Ok(Condition::FesCl),
            other => Err(format!("unknown condition {other:?}")),
        }
    }
}

/// One cell of the experimental grid.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Scenario {
    pub speed_m_s: f64,
    pub incline_deg: f64,
    pub condition: Condition,
    pub stim_probability: f64,
    pub seed: u64,
}

/// Build a scenario, validating the argument domains. Speeds and inclines
/// outside the reference grid are allowed for exploration.
pub fn make_scenario(
    speed_m_s: f64,
    incline_deg: f64,
    condition: Condition,
    stim_probability: f64,
    seed: u64,
) -> Result<Scenario, PlantError> {
    if !(speed_m_s.is_finite() && speed_m_s > 0.0 && speed_m_s <= 3.0) {
        return Err(PlantError::InvalidScenario(format!(
            "speed {speed_m_s} m/s out of range"
        )));
    }
    if !(incline_deg.is_finite() && incline_deg.abs() <= 30.0) {
        return Err(PlantError::InvalidScenario(format!(
            "incline {incline_deg} deg out of range"
        )));
    }
    if !(0.0..=1.0).contains(&stim_probability) {
        return Err(PlantError::InvalidScenario(format!(
            "stimulation probability {stim_probability} not in [0, 1]"
        )));
    }
    Ok(Scenario {
        speed_m_s,
        incline_deg,
        condition,
        stim_probability,
        seed,
    })
}

impl Scenario {
    /// Which analysis condition a leg's data belongs to: in the corrective
    /// recording the left leg runs the open-loop controller and the right
    /// leg the closed-loop controller.
    pub fn leg_condition(&self, side: FootSide) -> Condition {
        match self.condition {
            Condition::FesOff => Condition::FesOff,
            Condition::FesFd => Condition::FesFd,
            Condition::FesOl | Condition::FesCl => match side {
                FootSide::Left => Condition::FesOl,
                FootSide::Right => Condition::FesCl,
            },
        }
    }

    /// Does this condition stimulate at all?
    pub fn is_stimulated(&self) -> bool {
        self.condition != Condition::FesOff
    }

    /// Per-cycle Bernoulli gates deciding whether the targeted stimulation
    /// fires that cycle. Both legs consume the same sequence (indexed by
    /// their own cycle count), so the open- and closed-loop channels fire
    /// on the same number of cycles and their charge totals stay
    /// comparable.
    pub fn gate_stream(&self, _side: FootSide) -> GateStream {
        GateStream {
            rng: ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "gate")),
            probability: self.stim_probability,
        }
    }

    pub fn cell_name(&self) -> String {
        format!("{}_{}_{}", self.speed_m_s, self.incline_deg, self.condition)
    }
}

/// Seeded per-cycle stimulation gate.
#[derive(Debug, Clone)]
pub struct GateStream {
    rng: ChaCha8Rng,
    probability: f64,
}

impl GateStream {
    pub fn next_gate(&mut self) -> bool {
        self.rng.gen_range(0.0..1.0) < self.probability
    }
}

/// Within-cycle variability targets (mean pointwise SD of swing clearance,
/// mm) per speed, incline and condition cell. Off-grid scenarios use the
/// nearest cell.
pub fn noise_model(speed_m_s: f64, incline_deg: f64, condition: Condition) -> f64 {
    let fast = (speed_m_s - 1.2).abs() < (speed_m_s - 0.7).abs();
    let incline_idx = [-5.0_f64, 0.0, 5.0]
        .iter()
        .enumerate()
        .min_by(|a, b| {
            (a.1 - incline_deg)
                .abs()
                .partial_cmp(&(b.1 - incline_deg).abs())
                .unwrap()
        })
        .map(|(i, _)| i)
        .unwrap();
    let slow_table = match condition {
        Condition::FesOff => [11.8, 11.5, 9.2],
        Condition::FesFd => [11.0, 9.3, 10.1],
        Condition::FesOl => [12.5, 12.2, 12.0],
        Condition::FesCl => [11.8, 11.6, 11.6],
    };
    let fast_table = match condition {
        Condition::FesOff => [15.6, 15.2, 11.8],
        Condition::FesFd => [16.1, 14.4, 13.3],
        Condition::FesOl => [16.8, 15.8, 15.0],
        Condition::FesCl => [16.7, 15.6, 15.0],
    };
    if fast {
        fast_table[incline_idx]
    } else {
        slow_table[incline_idx]
    }
}

/// Ornstein-Uhlenbeck clearance noise: stationary SD `sigma`, correlation
/// time 0.1 s, exact discretization.
#[derive(Debug, Clone)]
struct OuNoise {
    value: f64,
    sigma: f64,
    alpha: f64,
    rng: ChaCha8Rng,
}

const NOISE_CORRELATION_S: f64 = 0.1;

impl OuNoise {
    fn new(sigma: f64, dt_s: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let value = sigma * standard_normal(&mut rng);
        Self {
            value,
            sigma,
            alpha: (-dt_s / NOISE_CORRELATION_S).exp(),
            rng,
        }
    }

    fn step(&mut self) {
        let innovation = (1.0 - self.alpha * self.alpha).sqrt() * standard_normal(&mut self.rng);
        self.value = self.alpha * self.value + self.sigma * innovation;
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Baseline gait curves for one speed/incline cell: clearance over the
/// cycle, the PP2 anterior-posterior trajectory, the pelvis reference and
/// the swing window. Amplitudes are synthetic.
#[derive(Debug, Clone)]
pub struct GaitTemplate {
    pub speed_m_s: f64,
    pub incline_deg: f64,
    pub cycle_duration_s: f64,
    pub toe_off_frac: f64,
    stride_mm: f64,
    clearance_scale: f64,
    /// PP2 forward velocity at toe-off, as a fraction of belt speed.
    launch_frac: f64,
    /// Final fraction of stance over which PP2 velocity ramps up (push-off).
    push_off_frac: f64,
}

impl GaitTemplate {
    pub fn new(speed_m_s: f64, incline_deg: f64) -> Self {
        let stride_m = 0.9 + 0.6 * (speed_m_s - 0.7);
        let cycle_duration_s = stride_m / speed_m_s;
        Self {
            speed_m_s,
            incline_deg,
            cycle_duration_s,
            toe_off_frac: 0.62,
            stride_mm: stride_m * 1000.0,
            // +-10% clearance amplitude per 5 degrees of incline.
            clearance_scale: 1.0 + 0.02 * incline_deg,
            launch_frac: 0.35,
            push_off_frac: 0.10,
        }
    }

    pub fn swing_window(&self) -> (f64, f64) {
        (self.toe_off_frac, 1.0)
    }

    /// Fraction of the cycle at which PP2 passes under the pelvis
    /// (mid-stance onset); stance is symmetric about the pelvis.
    pub fn mid_stance_frac(&self) -> f64 {
        self.toe_off_frac / 2.0
    }

    fn swing_s(&self, phase: f64) -> Option<f64> {
        if phase >= self.toe_off_frac {
            Some((phase - self.toe_off_frac) / (1.0 - self.toe_off_frac))
        } else {
            None
        }
    }

    /// Baseline toe clearance (mm) without stimulation or noise.
    pub fn clearance_mm(&self, phase: f64) -> f64 {
        let value = match self.swing_s(phase) {
            Some(s) => cosine_track(&[(0.0, 0.0), (0.32, 58.0), (0.58, 22.0), (0.85, 45.0), (1.0, 20.0)], s),
            None => {
                let s = phase / self.toe_off_frac;
                cosine_track(&[(0.0, 20.0), (0.25, -3.0), (0.8, -1.0), (1.0, 0.0)], s)
            }
        };
        value * self.clearance_scale
    }

    /// Smooth 0..1 mask over the swing window; stimulation shifts clearance
    /// only while the foot is airborne.
    pub fn swing_mask(&self, phase: f64) -> f64 {
        match self.swing_s(phase) {
            Some(s) => {
                let edge = 0.15;
                let rise = smoothstep((s / edge).clamp(0.0, 1.0));
                let fall = smoothstep(((1.0 - s) / edge).clamp(0.0, 1.0));
                rise.min(fall)
            }
            None => 0.0,
        }
    }

    /// PP2 anterior-posterior position (mm, pelvis at zero). In stance the
    /// marker is carried backward at belt speed, with a push-off ramp over
    /// the last `push_off_frac` of stance; swing returns it forward with a
    /// velocity profile that starts at `launch_frac * belt` and decays to
    /// zero at heel strike.
    pub fn pp2_ap_mm(&self, phase: f64) -> f64 {
        let belt_mm_s = self.speed_m_s * 1000.0;
        let x_hs = self.stride_mm * self.toe_off_frac / 2.0;
        let t_stance = self.toe_off_frac * self.cycle_duration_s;
        let ramp_t = self.push_off_frac * t_stance;
        let v0 = self.launch_frac * belt_mm_s;
        match self.swing_s(phase) {
            None => {
                let t = phase * self.cycle_duration_s;
                let t_ramp_start = t_stance - ramp_t;
                if t <= t_ramp_start {
                    x_hs - belt_mm_s * t
                } else {
                    let u = t - t_ramp_start;
                    // Velocity ramps linearly from -belt to +v0 over ramp_t.
                    let slope = (v0 + belt_mm_s) / ramp_t;
                    x_hs - belt_mm_s * t_ramp_start - belt_mm_s * u + slope * u * u / 2.0
                }
            }
            Some(s) => {
                let x_to = self.pp2_stance_end_mm();
                let t_swing = (1.0 - self.toe_off_frac) * self.cycle_duration_s;
                let delta = x_hs - x_to;
                // v(s) = v0 (1 + cos pi s)/2 + a sin(pi s), zero at heel strike.
                let a = (delta - v0 * t_swing / 2.0) * std::f64::consts::PI / (2.0 * t_swing);
                x_to
                    + v0 * t_swing * (s + (std::f64::consts::PI * s).sin() / std::f64::consts::PI)
                        / 2.0
                    + a * t_swing * (1.0 - (std::f64::consts::PI * s).cos()) / std::f64::consts::PI
            }
        }
    }

    fn pp2_stance_end_mm(&self) -> f64 {
        let belt_mm_s = self.speed_m_s * 1000.0;
        let x_hs = self.stride_mm * self.toe_off_frac / 2.0;
        let t_stance = self.toe_off_frac * self.cycle_duration_s;
        let ramp_t = self.push_off_frac * t_stance;
        let v0 = self.launch_frac * belt_mm_s;
        let slope = (v0 + belt_mm_s) / ramp_t;
        x_hs - belt_mm_s * (t_stance - ramp_t) - belt_mm_s * ramp_t + slope * ramp_t * ramp_t / 2.0
    }

    /// Pelvis (ASIS midpoint) anterior-posterior position: stationary on a
    /// treadmill.
    pub fn asis_ap_mm(&self, _phase: f64) -> f64 {
        0.0
    }

    /// Toe-up foot pitch (deg) before stimulation coupling.
    pub fn foot_pitch_deg(&self, phase: f64) -> f64 {
        match self.swing_s(phase) {
            Some(s) => 12.0 * (std::f64::consts::PI * s).sin(),
            None => 0.0,
        }
    }
}

fn smoothstep(u: f64) -> f64 {
    u * u * (3.0 - 2.0 * u)
}

/// Piecewise-cosine interpolation through (position, value) knots; flat
/// tangents at every knot, so interior extrema sit exactly on knots.
fn cosine_track(knots: &[(f64, f64)], s: f64) -> f64 {
    let s = s.clamp(knots[0].0, knots[knots.len() - 1].0);
    for w in knots.windows(2) {
        let ((s0, v0), (s1, v1)) = (w[0], w[1]);
        if s <= s1 {
            let u = (s - s0) / (s1 - s0);
            return v0 + (v1 - v0) * (1.0 - (std::f64::consts::PI * u).cos()) / 2.0;
        }
    }
    knots[knots.len() - 1].1
}

/// Plant configuration: muscle models plus noise overrides.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PlantConfig {
    pub ta: MuscleModel,
    pub gs: MuscleModel,
    /// Replace the per-cell variability target with a fixed SD.
    pub noise_sd_override_mm: Option<f64>,
    pub noise_disabled: bool,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            ta: MuscleModel::default_ta(),
            gs: MuscleModel::default_gs(),
            noise_sd_override_mm: None,
            noise_disabled: false,
        }
    }
}

impl PlantConfig {
    pub fn validate(&self) -> Result<(), PlantError> {
        self.ta.validate()?;
        self.gs.validate()
    }

    fn noise_sd(&self, scenario: &Scenario, side: FootSide) -> f64 {
        if self.noise_disabled {
            return 0.0;
        }
        self.noise_sd_override_mm.unwrap_or_else(|| {
            noise_model(
                scenario.speed_m_s,
                scenario.incline_deg,
                scenario.leg_condition(side),
            )
        })
    }
}

/// Ground-truth gait events of one leg.
#[derive(Debug, Clone, Default)]
pub struct EventLog {
    pub heel_strikes_s: Vec<f64>,
    pub toe_offs_s: Vec<f64>,
    pub cycle_count: usize,
}

/// Everything the plant knows about one leg at one instant.
#[derive(Debug, Clone, Copy)]
pub struct LegSample {
    pub side: FootSide,
    pub cycle_phase: f64,
    pub clearance_mm: f64,
    pub a_ta: f64,
    pub a_gs: f64,
    pub gs_force_n: f64,
}

/// One simulator tick: ground truth per leg plus the emitted marker frame.
#[derive(Debug, Clone)]
pub struct WalkerSample {
    pub t_s: f64,
    pub frame: MarkerFrame,
    pub legs: [LegSample; 2],
}

struct LegPlant {
    side: FootSide,
    cloud: SoleCloud,
    cycle_phase: f64,
    a_ta: f64,
    a_gs: f64,
    noise: OuNoise,
    events: EventLog,
    lateral_mm: f64,
}

/// Two-legged synthetic walker stepping at the control rate. Single-owner;
/// scenario sweeps run one walker per cell.
pub struct Walker {
    pub scenario: Scenario,
    pub template: GaitTemplate,
    config: PlantConfig,
    plane: GroundPlane,
    legs: [LegPlant; 2],
    t_s: f64,
}

/// Stimulation applied to one leg during a step.
#[derive(Debug, Clone, Copy)]
pub struct LegStim {
    pub ta: StimCommand,
    pub gs: StimCommand,
}

impl LegStim {
    pub fn off() -> Self {
        Self {
            ta: StimCommand::off(),
            gs: StimCommand::off(),
        }
    }
}

impl Walker {
    pub fn new(scenario: Scenario, config: PlantConfig) -> Result<Self, PlantError> {
        config.validate()?;
        let template = GaitTemplate::new(scenario.speed_m_s, scenario.incline_deg);
        let plane = GroundPlane::new(scenario.incline_deg, 0.0)
            .map_err(|e| PlantError::InvalidScenario(e.to_string()))?;
        let make_leg = |side: FootSide, phase: f64, lateral: f64| LegPlant {
            side,
            cloud: SoleCloud::synthetic(side),
            cycle_phase: phase,
            a_ta: 0.0,
            a_gs: 0.0,
            noise: OuNoise::new(
                config.noise_sd(&scenario, side),
                CONTROL_DT_S,
                derive_seed(scenario.seed, &format!("noise/{}", side.prefix())),
            ),
            events: EventLog::default(),
            lateral_mm: lateral,
        };
        Ok(Self {
            legs: [
                make_leg(FootSide::Left, 0.5, 90.0),
                make_leg(FootSide::Right, 0.0, -90.0),
            ],
            scenario,
            template,
            config,
            plane,
            t_s: 0.0,
        })
    }

    pub fn t_s(&self) -> f64 {
        self.t_s
    }

    pub fn plane(&self) -> &GroundPlane {
        &self.plane
    }

    pub fn cloud(&self, side: FootSide) -> &SoleCloud {
        &self.legs[Self::leg_index(side)].cloud
    }

    pub fn events(&self, side: FootSide) -> &EventLog {
        &self.legs[Self::leg_index(side)].events
    }

    fn leg_index(side: FootSide) -> usize {
        match side {
            FootSide::Left => 0,
            FootSide::Right => 1,
        }
    }

    fn leg_clearance_mm(&self, leg: &LegPlant) -> f64 {
        let phase = leg.cycle_phase;
        let stim_shift = (self.config.ta.clearance_gain_mm * leg.a_ta
            - self.config.gs.clearance_gain_mm * leg.a_gs)
            * self.template.swing_mask(phase);
        self.template.clearance_mm(phase) + stim_shift + leg.noise.value
    }

    fn leg_pose(&self, leg: &LegPlant, clearance_mm: f64) -> RigidTransform {
        let phase = leg.cycle_phase;
        // Toe-down coupling under plantarflexor activation.
        let pitch_up_deg = self.template.foot_pitch_deg(phase)
            - 20.0 * leg.a_gs * self.template.swing_mask(phase);
        let total_deg = self.scenario.incline_deg + pitch_up_deg;
        let rotation = Rotation3::from_axis_angle(&Vector3::y_axis(), -total_deg.to_radians());
        let pp2_ref = leg
            .cloud
            .marker_refs()
            .iter()
            .find(|m| m.label == "PP2")
            .expect("cloud has PP2")
            .position;
        let rotated_pp2 = rotation * pp2_ref;
        let t0 = Vector3::new(
            self.template.pp2_ap_mm(phase) - rotated_pp2.x,
            leg.lateral_mm - rotated_pp2.y,
            0.0,
        );
        let pose0 = RigidTransform::new(rotation.into_inner(), t0);
        let normal = self.plane.normal();
        let mut min_d = f64::INFINITY;
        for p in leg.cloud.anterior_points() {
            min_d = min_d.min(self.plane.signed_distance(&pose0.apply(p)));
        }
        // Vertical shift so the anterior minimum equals the target
        // clearance; vertical (not normal) so the AP channel stays exact.
        let dz = (clearance_mm - min_d) / normal.z;
        pose0.translated(Vector3::new(0.0, 0.0, dz))
    }

    /// State at the current instant: ground truth per leg plus the marker
    /// frame a motion-capture system would deliver.
    pub fn sample(&self) -> WalkerSample {
        let mut frame = MarkerFrame::new(self.t_s);
        let mut legs = Vec::with_capacity(2);
        for leg in &self.legs {
            let clearance = self.leg_clearance_mm(leg);
            let pose = self.leg_pose(leg, clearance);
            for m in leg.cloud.marker_refs() {
                frame.insert(
                    format!("{}{}", leg.side.prefix(), m.label),
                    pose.apply(&m.position),
                );
            }
            legs.push(LegSample {
                side: leg.side,
                cycle_phase: leg.cycle_phase,
                clearance_mm: clearance,
                a_ta: leg.a_ta,
                a_gs: leg.a_gs,
                gs_force_n: self.config.gs.max_force_n * leg.a_gs,
            });
        }
        let pelvis_ap = self.template.asis_ap_mm(self.legs[1].cycle_phase);
        frame.insert("LASI".into(), Point3::new(pelvis_ap, 120.0, 950.0));
        frame.insert("RASI".into(), Point3::new(pelvis_ap, -120.0, 950.0));
        WalkerSample {
            t_s: self.t_s,
            frame,
            legs: [legs[0], legs[1]],
        }
    }

    /// Integrate one control period under the given stimulation.
    pub fn advance(&mut self, stim: [LegStim; 2], dt_s: f64) {
        debug_assert!(dt_s > 0.0);
        let toe_off = self.template.toe_off_frac;
        let duration = self.template.cycle_duration_s;
        for (leg, stim) in self.legs.iter_mut().zip(stim.iter()) {
            let drive_ta = recruitment(stim.ta.pulse_width_us, &self.config.ta);
            let drive_gs = recruitment(stim.gs.pulse_width_us, &self.config.gs);
            leg.a_ta = activation_step(leg.a_ta, drive_ta, &self.config.ta, dt_s);
            leg.a_gs = activation_step(leg.a_gs, drive_gs, &self.config.gs, dt_s);

            let old_phase = leg.cycle_phase;
            let mut new_phase = old_phase + dt_s / duration;
            if old_phase < toe_off && new_phase >= toe_off {
                let frac = (toe_off - old_phase) / (new_phase - old_phase);
                leg.events.toe_offs_s.push(self.t_s + frac * dt_s);
            }
            if new_phase >= 1.0 {
                let frac = (1.0 - old_phase) / (new_phase - old_phase);
                leg.events.heel_strikes_s.push(self.t_s + frac * dt_s);
                leg.events.cycle_count += 1;
                new_phase -= 1.0;
            }
            leg.cycle_phase = new_phase;
            leg.noise.step();
        }
        self.t_s += dt_s;
    }
}

/// Static calibration capture: the unloaded shoe resting on the belt at the
/// given incline, sampled at 100 Hz. Markers carry no leg prefix.
pub fn static_pose_frames(cloud: &SoleCloud, incline_deg: f64, duration_s: f64) -> Vec<MarkerFrame> {
    let plane = GroundPlane::new(incline_deg, 0.0).expect("valid incline");
    let rotation = Rotation3::from_axis_angle(&Vector3::y_axis(), -incline_deg.to_radians());
    let pose0 = RigidTransform::new(rotation.into_inner(), Vector3::zeros());
    let mut min_d = f64::INFINITY;
    for p in cloud.anterior_points() {
        min_d = min_d.min(plane.signed_distance(&pose0.apply(p)));
    }
    let normal = plane.normal();
    let pose = pose0.translated(Vector3::new(0.0, 0.0, -min_d / normal.z));
    let n = (duration_s / CONTROL_DT_S).round() as usize;
    (0..n)
        .map(|k| {
            let mut frame = MarkerFrame::new(k as f64 * CONTROL_DT_S);
            for LabeledPoint { label, position } in cloud.marker_refs() {
                frame.insert(label.clone(), pose.apply(position));
            }
            frame
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use crate::geometry;

    fn scenario(condition: Condition, seed: u64) -> Scenario {
        make_scenario(0.7, 0.0, condition, 0.25, seed).unwrap()
    }

    fn quiet_config() -> PlantConfig {
        PlantConfig {
            noise_disabled: true,
            ..PlantConfig::default()
        }
    }

    #[test]
    fn recruitment_boundaries() {
        let m = MuscleModel::default_ta();
        assert_eq!(recruitment(m.true_threshold_us, &m), 0.0);
        assert_eq!(
            recruitment((m.true_threshold_us + m.true_saturation_us) / 2.0, &m),
            0.5
        );
        assert_eq!(recruitment(2.0 * m.true_saturation_us, &m), 1.0);
        assert_eq!(recruitment(0.0, &m), 0.0);
    }

    #[test]
    fn activation_fixed_point_and_step_response() {
        let m = MuscleModel::default_ta();
        assert_eq!(activation_step(0.0, 0.0, &m, 0.01), 0.0);
        let a = activation_step(0.0, 1.0, &m, m.act_tau_s);
        assert_abs_diff_eq!(a, 1.0 - (-1.0_f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn activation_matches_substepped_integration() {
        let m = MuscleModel::default_ta();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut coarse = 0.3;
        let mut fine = 0.3;
        for _ in 0..500 {
            let drive: f64 = rng.gen_range(0.0..1.0);
            coarse = activation_step(coarse, drive, &m, 0.01);
            for _ in 0..100 {
                fine = activation_step(fine, drive, &m, 0.0001);
            }
            assert!((coarse - fine).abs() < 1e-3);
        }
    }

    #[test]
    fn activation_stays_bounded_under_fuzz() {
        let m = MuscleModel::default_gs();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut a = 0.0;
        for _ in 0..20_000 {
            let drive = rng.gen_range(0.0..1.0);
            let dt = rng.gen_range(1e-4..0.05);
            a = activation_step(a, drive, &m, dt);
            assert!((0.0..=1.0).contains(&a) && a.is_finite());
        }
    }

    #[test]
    fn identification_probe_reflects_recruitment() {
        let m = MuscleModel::default_gs();
        let mut probe = m.steady_force_probe();
        assert!(probe(100.0) < 1e-6);
        assert_abs_diff_eq!(probe(350.0), 25.0, epsilon = 1e-3);
        assert_abs_diff_eq!(probe(800.0), 50.0, epsilon = 1e-3);
    }

    #[test]
    fn template_clearance_shape() {
        for speed in [0.7, 1.2] {
            for incline in [-5.0, 0.0, 5.0] {
                let t = GaitTemplate::new(speed, incline);
                // Exactly one interior local minimum in swing.
                let n = 2000;
                let (to, _) = t.swing_window();
                let mut minima = Vec::new();
                let swing_vals: Vec<f64> = (0..=n)
                    .map(|k| t.clearance_mm(to + (1.0 - to) * k as f64 / n as f64))
                    .collect();
                for i in 1..n {
                    if swing_vals[i] < swing_vals[i - 1] && swing_vals[i] <= swing_vals[i + 1] {
                        minima.push(i);
                    }
                }
                assert_eq!(minima.len(), 1, "speed {speed} incline {incline}");
                let peak = swing_vals.iter().cloned().fold(f64::MIN, f64::max);
                assert!(peak > 40.0);
                // Stance dips negative (flexible outsole).
                let stance_min = (0..=n)
                    .map(|k| t.clearance_mm(to * k as f64 / n as f64))
                    .fold(f64::MAX, f64::min);
                assert!(stance_min < 0.0);
            }
        }
    }

    #[test]
    fn cycle_duration_follows_stride_model() {
        assert_abs_diff_eq!(GaitTemplate::new(0.7, 0.0).cycle_duration_s, 0.9 / 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(GaitTemplate::new(1.2, 0.0).cycle_duration_s, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pp2_trajectory_is_continuous_and_belt_carried() {
        for speed in [0.7, 1.2] {
            let t = GaitTemplate::new(speed, 0.0);
            // Continuity across toe-off and heel strike.
            let eps = 1e-6;
            assert_abs_diff_eq!(
                t.pp2_ap_mm(t.toe_off_frac - eps),
                t.pp2_ap_mm(t.toe_off_frac + eps),
                epsilon = 1.0
            );
            assert_abs_diff_eq!(t.pp2_ap_mm(1.0 - 1e-9), t.pp2_ap_mm(0.0), epsilon = 1.0);
            // Early/mid stance: carried backward at belt speed.
            let dp = 1e-6;
            let v = (t.pp2_ap_mm(0.3 + dp) - t.pp2_ap_mm(0.3 - dp)) / (2.0 * dp * t.cycle_duration_s);
            assert_abs_diff_eq!(v, -speed * 1000.0, epsilon = 1.0);
            // Mid-stance crossing at half the stance phase.
            assert_abs_diff_eq!(t.pp2_ap_mm(t.mid_stance_frac()), 0.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn scenario_validation() {
        assert!(make_scenario(0.7, 0.0, Condition::FesCl, 0.25, 1).is_ok());
        assert!(make_scenario(-0.7, 0.0, Condition::FesCl, 0.25, 1).is_err());
        assert!(make_scenario(0.7, 45.0, Condition::FesCl, 0.25, 1).is_err());
        assert!(make_scenario(0.7, 0.0, Condition::FesCl, 1.25, 1).is_err());
    }

    #[test]
    fn gate_stream_is_deterministic_and_calibrated() {
        let s = scenario(Condition::FesCl, 77);
        let gates_a: Vec<bool> = {
            let mut g = s.gate_stream(FootSide::Right);
            (0..400).map(|_| g.next_gate()).collect()
        };
        let gates_b: Vec<bool> = {
            let mut g = s.gate_stream(FootSide::Right);
            (0..400).map(|_| g.next_gate()).collect()
        };
        assert_eq!(gates_a, gates_b);
        let firing = gates_a.iter().filter(|&&g| g).count() as f64 / 400.0;
        assert!((0.20..=0.30).contains(&firing), "firing fraction {firing}");

        let zero = make_scenario(0.7, 0.0, Condition::FesFd, 0.0, 77).unwrap();
        let mut g = zero.gate_stream(FootSide::Left);
        assert!((0..200).all(|_| !g.next_gate()));
    }

    #[test]
    fn noise_model_matches_reference_cells() {
        assert_eq!(noise_model(0.7, 0.0, Condition::FesOff), 11.5);
        assert_eq!(noise_model(1.2, -5.0, Condition::FesOl), 16.8);
        assert_eq!(noise_model(1.2, 0.0, Condition::FesOff), 15.2);
        assert_eq!(noise_model(0.7, 5.0, Condition::FesFd), 10.1);
        // Off-grid values snap to the nearest cell.
        assert_eq!(noise_model(0.8, 1.0, Condition::FesOff), 11.5);
    }

    #[test]
    fn unstimulated_quiet_walker_tracks_template() {
        let mut walker = Walker::new(scenario(Condition::FesOff, 5), quiet_config()).unwrap();
        for _ in 0..300 {
            let s = walker.sample();
            for leg in &s.legs {
                let expected = walker.template.clearance_mm(leg.cycle_phase);
                assert_abs_diff_eq!(leg.clearance_mm, expected, epsilon = 1e-12);
                assert_eq!(leg.a_ta, 0.0);
                assert_eq!(leg.a_gs, 0.0);
            }
            walker.advance([LegStim::off(), LegStim::off()], CONTROL_DT_S);
        }
    }

    /// Run `cycles` full gait cycles with a fixed stimulation policy and
    /// return the per-cycle minimum swing clearance of the right leg.
    fn swing_minima(
        condition: Condition,
        seed: u64,
        config: PlantConfig,
        cycles: usize,
        ta_us: f64,
        gs_us: f64,
    ) -> Vec<f64> {
        let mut walker = Walker::new(scenario(condition, seed), config).unwrap();
        let toe_off = walker.template.toe_off_frac;
        let mut minima = Vec::new();
        let mut current = f64::MAX;
        let mut prev_phase = 0.0;
        let steps = (cycles as f64 * walker.template.cycle_duration_s / CONTROL_DT_S) as usize;
        for _ in 0..steps {
            let s = walker.sample();
            let leg = s.legs[1];
            if leg.cycle_phase < prev_phase {
                if current < f64::MAX {
                    minima.push(current);
                }
                current = f64::MAX;
            }
            prev_phase = leg.cycle_phase;
            // Mid-swing window only.
            let sw = (leg.cycle_phase - toe_off) / (1.0 - toe_off);
            if (0.2..=0.8).contains(&sw) {
                current = current.min(leg.clearance_mm);
            }
            let stim = LegStim {
                ta: StimCommand::new(ta_us),
                gs: StimCommand::new(gs_us),
            };
            walker.advance([stim, stim], CONTROL_DT_S);
        }
        minima
    }

    #[test]
    fn gs_stimulation_depresses_mtc_and_ta_rescues_it() {
        let baseline = swing_minima(Condition::FesOff, 3, quiet_config(), 10, 0.0, 0.0);
        let fd = swing_minima(Condition::FesFd, 3, quiet_config(), 10, 0.0, 250.0);
        let rescued = swing_minima(Condition::FesCl, 3, quiet_config(), 10, 550.0, 250.0);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&fd) < mean(&baseline) - 20.0, "fd {} base {}", mean(&fd), mean(&baseline));
        assert!(mean(&fd) < 10.0, "foot drop must breach the safety floor");
        assert!(mean(&rescued) > mean(&fd) + 10.0);
        // TA alone never lowers clearance.
        let ta_only = swing_minima(Condition::FesOff, 3, quiet_config(), 10, 550.0, 0.0);
        assert!(mean(&ta_only) >= mean(&baseline) - 1e-9);
    }

    #[test]
    fn stimulation_effect_is_monotone_in_pulse_width() {
        for (lo, hi) in [(0.0, 200.0), (200.0, 350.0), (350.0, 1000.0)] {
            let a = swing_minima(Condition::FesOff, 8, quiet_config(), 6, lo, 0.0);
            let b = swing_minima(Condition::FesOff, 8, quiet_config(), 6, hi, 0.0);
            for (x, y) in a.iter().zip(&b) {
                assert!(y >= x, "ta {hi} lowered clearance vs {lo}");
            }
            let c = swing_minima(Condition::FesOff, 8, quiet_config(), 6, 0.0, lo);
            let d = swing_minima(Condition::FesOff, 8, quiet_config(), 6, 0.0, hi);
            for (x, y) in c.iter().zip(&d) {
                assert!(y <= x, "gs {hi} raised clearance vs {lo}");
            }
        }
    }

    #[test]
    fn walker_is_bit_deterministic() {
        let run = || {
            let mut walker = Walker::new(scenario(Condition::FesCl, 21), PlantConfig::default()).unwrap();
            let mut out = Vec::new();
            for k in 0..500 {
                let s = walker.sample();
                out.push((s.legs[0].clearance_mm, s.legs[1].clearance_mm));
                let ta = if k % 3 == 0 { 300.0 } else { 0.0 };
                let stim = LegStim {
                    ta: StimCommand::new(ta),
                    gs: StimCommand::off(),
                };
                walker.advance([stim, LegStim::off()], CONTROL_DT_S);
            }
            out
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn emitted_markers_reproduce_ground_truth_clearance() {
        let mut walker = Walker::new(scenario(Condition::FesFd, 13), PlantConfig::default()).unwrap();
        let plane = GroundPlane::new(walker.scenario.incline_deg, 0.0).unwrap();
        let mut max_err: f64 = 0.0;
        for k in 0..600 {
            let s = walker.sample();
            for (i, side) in [FootSide::Left, FootSide::Right].iter().enumerate() {
                let cloud = walker.cloud(*side);
                let observed: Vec<LabeledPoint> = cloud
                    .marker_refs()
                    .iter()
                    .map(|m| LabeledPoint {
                        label: m.label.clone(),
                        position: s
                            .frame
                            .position(&format!("{}{}", side.prefix(), m.label))
                            .unwrap(),
                    })
                    .collect();
                let fit = geometry::fit_rigid_transform(cloud.marker_refs(), &observed).unwrap();
                let c = geometry::toe_clearance(cloud, &fit.transform, &plane).unwrap();
                max_err = max_err.max((c.mm() - s.legs[i].clearance_mm).abs());
            }
            let gs = if k % 2 == 0 { 250.0 } else { 0.0 };
            let stim = LegStim {
                ta: StimCommand::off(),
                gs: StimCommand::new(gs),
            };
            walker.advance([stim, stim], CONTROL_DT_S);
        }
        assert!(max_err < 0.5, "marker/geometry mismatch {max_err} mm");
        assert!(max_err < 1e-6, "registration should be near-exact, got {max_err}");
    }

    #[test]
    fn event_log_counts_cycles() {
        let mut walker = Walker::new(scenario(Condition::FesOff, 2), quiet_config()).unwrap();
        let duration = 60.0;
        let steps = (duration / CONTROL_DT_S) as usize;
        for _ in 0..steps {
            walker.advance([LegStim::off(), LegStim::off()], CONTROL_DT_S);
        }
        let expected = (duration / walker.template.cycle_duration_s) as usize;
        for side in [FootSide::Left, FootSide::Right] {
            let log = walker.events(side);
            assert!(
                (log.cycle_count as i64 - expected as i64).abs() <= 1,
                "cycles {} vs {expected}",
                log.cycle_count
            );
            assert_eq!(log.cycle_count, log.heel_strikes_s.len());
            // Toe-off alternates with heel strike.
            for (to, hs) in log.toe_offs_s.iter().zip(&log.heel_strikes_s) {
                assert!(to < hs);
            }
        }
    }

    #[test]
    fn static_pose_frames_rest_on_plane() {
        let cloud = SoleCloud::synthetic(FootSide::Right);
        for incline in [0.0, 10.0] {
            let frames = static_pose_frames(&cloud, incline, 0.6);
            assert_eq!(frames.len(), 60);
            let plane = geometry::ground_plane_from_calibration(&frames, &cloud, incline).unwrap();
            assert_abs_diff_eq!(plane.height_offset_mm, 0.0, epsilon = 1e-9);
        }
    }
}
