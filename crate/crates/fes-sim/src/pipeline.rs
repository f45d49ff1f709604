//! End-to-end orchestration: muscle calibration, scenario-grid simulation
//! and the statistics pass, all reproducible from one config plus a master
//! seed. Grid cells simulate in parallel; every RNG stream is derived from
//! the master seed and a stable tag, so outputs do not depend on the worker
//! count.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::analysis::{
    self, cumulative_charge, mean_sd, min_toe_clearance, permutation_test, reduction_report,
    resample_cycle, within_cycle_variability, ChargeSummary, CycleSeries, PermutationResult,
    ReductionReport, StimSample, CYCLE_POINTS,
};
use crate::controllers::{
    controller_step, gs_foot_drop_profile, identify_calibration, ta_peak_from_calib,
    ClearanceThresholds, ClosedLoopConfig, ClosedLoopState, ControlError, ControllerGains,
    IdentificationConfig, MuscleCalib, OpenLoopChannel, StimCommand, TrapezoidProfile,
    DEFAULT_RATE_LIMIT_US, STIM_AMPLITUDE_MA, STIM_FREQUENCY_HZ,
};
use crate::gait_state::{
    mid_stance_from_frame, segment_cycles, CycleRow, GaitPhase, PhaseDetector, ProgressEstimator,
};
use crate::geometry::{
    fit_rigid_transform, ground_plane_from_calibration, toe_clearance, FootSide, GeometryError,
    GroundPlane, LabeledPoint,
};
use crate::plant::{
    make_scenario, noise_model, static_pose_frames, Condition, GateStream, LegStim, PlantConfig,
    PlantError, Scenario, Walker, CONTROL_DT_S,
};
use crate::seeds::derive_seed;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("missing calibration file {0} (run `calibrate` first)")]
    MissingCalibration(PathBuf),
    #[error("missing traces for cell {0} (run `run` first)")]
    MissingTraces(String),
    #[error("calibration of {muscle} failed: {source}")]
    Calibration {
        muscle: String,
        source: ControlError,
    },
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("analysis failed: {0}")]
    Analysis(String),
}

impl From<GeometryError> for PipelineError {
    fn from(e: GeometryError) -> Self {
        PipelineError::Geometry(e.to_string())
    }
}

impl PipelineError {
    /// 2 for config/IO problems, 1 for analysis/domain failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_)
            | PipelineError::Io(_)
            | PipelineError::Csv(_)
            | PipelineError::Json(_)
            | PipelineError::MissingCalibration(_)
            | PipelineError::MissingTraces(_)
            | PipelineError::Plant(_) => 2,
            _ => 1,
        }
    }
}

/// Open-loop trapezoid shape (fractions of the active window).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrapezoidShape {
    pub ramp_up_frac: f64,
    pub plateau_frac: f64,
    pub ramp_down_frac: f64,
}

impl Default for TrapezoidShape {
    fn default() -> Self {
        Self {
            ramp_up_frac: 0.2,
            plateau_frac: 0.6,
            ramp_down_frac: 0.2,
        }
    }
}

impl TrapezoidShape {
    fn with_peak(&self, peak_us: f64) -> Result<TrapezoidProfile, ControlError> {
        TrapezoidProfile::new(peak_us, self.ramp_up_frac, self.plateau_frac, self.ramp_down_frac)
    }
}

/// Controller block of the run configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ControllerSettings {
    pub gains: ControllerGains,
    pub thresholds: ClearanceThresholds,
    pub rate_limit_us: f64,
    pub trapezoid: TrapezoidShape,
    pub identification: IdentificationConfig,
    /// Skip the identification protocol for specific muscles.
    pub calibration_overrides: Option<CalibrationData>,
}

impl Default for ControllerSettings {
    fn default() -> Self {
        Self {
            gains: ControllerGains::default(),
            thresholds: ClearanceThresholds::default(),
            rate_limit_us: DEFAULT_RATE_LIMIT_US,
            trapezoid: TrapezoidShape::default(),
            identification: IdentificationConfig::default(),
            calibration_overrides: None,
        }
    }
}

/// Statistics settings.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AnalysisSettings {
    pub n_permutations: usize,
    pub alpha: f64,
    /// Mid-swing sub-window for the MTC metric, as fractions of swing.
    pub mtc_window: (f64, f64),
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        Self {
            n_permutations: 10_000,
            alpha: 0.05,
            mtc_window: analysis::MTC_WINDOW,
        }
    }
}

/// Full run configuration. Every field has a default, so an empty JSON
/// object is a valid config.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub speeds_m_s: Vec<f64>,
    pub inclines_deg: Vec<f64>,
    pub conditions: Vec<Condition>,
    /// Override the per-condition defaults (60 s for FES_OFF, 180 s else).
    pub duration_s: Option<f64>,
    pub stim_probability: f64,
    /// Restrict run/analyze to cells whose name contains one of these.
    pub cells_filter: Option<Vec<String>>,
    pub controller: ControllerSettings,
    pub plant: PlantConfig,
    pub analysis: AnalysisSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out_dir: PathBuf::from("out"),
            speeds_m_s: vec![0.7, 1.2],
            inclines_deg: vec![-5.0, 0.0, 5.0],
            conditions: vec![Condition::FesOff, Condition::FesFd, Condition::FesCl],
            duration_s: None,
            stim_probability: 0.25,
            cells_filter: None,
            controller: ControllerSettings::default(),
            plant: PlantConfig::default(),
            analysis: AnalysisSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("cannot parse {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.speeds_m_s.is_empty() || self.inclines_deg.is_empty() || self.conditions.is_empty()
        {
            return Err(PipelineError::Config("scenario grid is empty".into()));
        }
        if let Some(d) = self.duration_s {
            if d <= 0.0 {
                return Err(PipelineError::Config(format!("duration {d} s not positive")));
            }
        }
        self.controller
            .thresholds
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.plant.validate()?;
        Ok(())
    }

    pub fn duration_for(&self, condition: Condition) -> f64 {
        self.duration_s.unwrap_or(match condition {
            Condition::FesOff => 60.0,
            _ => 180.0,
        })
    }

    /// All grid cells, in deterministic order, after the name filter.
    pub fn cells(&self) -> Vec<CellId> {
        let mut out = Vec::new();
        for &speed in &self.speeds_m_s {
            for &incline in &self.inclines_deg {
                for &condition in &self.conditions {
                    let cell = CellId {
                        speed_m_s: speed,
                        incline_deg: incline,
                        condition,
                    };
                    let keep = match &self.cells_filter {
                        Some(filters) => filters.iter().any(|f| cell.name().contains(f.as_str())),
                        None => true,
                    };
                    if keep {
                        out.push(cell);
                    }
                }
            }
        }
        out
    }

    pub fn calibration_path(&self) -> PathBuf {
        self.out_dir.join("calibration.json")
    }

    pub fn cell_dir(&self, cell: &CellId) -> PathBuf {
        self.out_dir.join("cells").join(cell.name())
    }
}

/// One recording cell of the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellId {
    pub speed_m_s: f64,
    pub incline_deg: f64,
    pub condition: Condition,
}

impl CellId {
    pub fn name(&self) -> String {
        format!("{}_{}_{}", self.speed_m_s, self.incline_deg, self.condition)
    }

    fn scenario(&self, config: &RunConfig) -> Result<Scenario, PlantError> {
        make_scenario(
            self.speed_m_s,
            self.incline_deg,
            self.condition,
            config.stim_probability,
            derive_seed(config.seed, &format!("cell/{}", self.name())),
        )
    }
}

/// Calibration of one leg: identified pulse-width bands plus the derived
/// open-loop peaks.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LegCalibration {
    pub ta: MuscleCalib,
    pub gs: MuscleCalib,
    pub gs_fd_peak_us: f64,
    pub ta_ol_peak_us: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CalibrationData {
    pub left: LegCalibration,
    pub right: LegCalibration,
}

impl CalibrationData {
    pub fn leg(&self, side: FootSide) -> &LegCalibration {
        match side {
            FootSide::Left => &self.left,
            FootSide::Right => &self.right,
        }
    }
}

/// Run the identification protocol for TA and GS of both legs against the
/// configured plant and write `calibration.json`.
pub fn cmd_calibrate(config: &RunConfig) -> Result<CalibrationData, PipelineError> {
    config.validate()?;
    if let Some(overrides) = &config.controller.calibration_overrides {
        fs::create_dir_all(&config.out_dir)?;
        write_json(&config.calibration_path(), overrides)?;
        return Ok(*overrides);
    }
    let ident = &config.controller.identification;
    let calibrate_leg = |side: FootSide| -> Result<LegCalibration, PipelineError> {
        let mut ta_probe = config.plant.ta.steady_force_probe();
        let ta = identify_calibration(&mut ta_probe, ident).map_err(|e| {
            PipelineError::Calibration {
                muscle: format!("{side} TA"),
                source: e,
            }
        })?;
        let mut gs_probe = config.plant.gs.steady_force_probe();
        let gs = identify_calibration(&mut gs_probe, ident).map_err(|e| {
            PipelineError::Calibration {
                muscle: format!("{side} GS"),
                source: e,
            }
        })?;
        let mut gs_probe = config.plant.gs.steady_force_probe();
        let fd_profile =
            gs_foot_drop_profile(&gs, &mut gs_probe, ident.step_us).map_err(|e| {
                PipelineError::Calibration {
                    muscle: format!("{side} GS"),
                    source: e,
                }
            })?;
        Ok(LegCalibration {
            ta,
            gs,
            gs_fd_peak_us: fd_profile.peak_us,
            ta_ol_peak_us: ta_peak_from_calib(&ta),
        })
    };
    let data = CalibrationData {
        left: calibrate_leg(FootSide::Left)?,
        right: calibrate_leg(FootSide::Right)?,
    };
    fs::create_dir_all(&config.out_dir)?;
    write_json(&config.calibration_path(), &data)?;
    Ok(data)
}

pub fn load_calibration(config: &RunConfig) -> Result<CalibrationData, PipelineError> {
    let path = config.calibration_path();
    if !path.exists() {
        return Err(PipelineError::MissingCalibration(path));
    }
    let text = fs::read_to_string(&path)?;
    Ok(serde_json::from_str(&text)?)
}

/// One row of `trace.csv`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TraceRow {
    pub t_s: f64,
    pub leg: String,
    pub phase: f64,
    pub clearance_mm: f64,
    pub a_ta: f64,
    pub a_gs: f64,
    pub stim_ta_us: f64,
    pub stim_gs_us: f64,
    pub gs_force_n: f64,
}

/// One row of `stim.csv`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StimRow {
    pub t_s: f64,
    pub leg: String,
    pub muscle: String,
    pub pulse_width_us: f64,
    pub amplitude_ma: f64,
    pub frequency_hz: f64,
}

/// Per-leg streaming state of the cell runner.
struct LegRunner {
    side: FootSide,
    detector: PhaseDetector,
    plane: GroundPlane,
    last_clearance: Option<f64>,
    phase: Option<GaitPhase>,
    phases: Vec<GaitPhase>,
    gates: GateStream,
    gate_on: bool,
    gs_window: ProgressEstimator,
    gs_channel: Option<OpenLoopChannel>,
    ta_open_loop: Option<OpenLoopChannel>,
    ta_closed_loop: Option<(ClosedLoopConfig, ClosedLoopState)>,
}

/// Everything produced by one simulated cell.
pub struct CellData {
    pub cell: CellId,
    pub trace: Vec<TraceRow>,
    pub stim: Vec<StimRow>,
    pub cycles: Vec<CycleRow>,
}

/// Simulate one grid cell: the walker, per-leg gait-state estimation from
/// the emitted markers, and the condition's stimulation channels.
pub fn simulate_cell(
    config: &RunConfig,
    calibration: Option<&CalibrationData>,
    cell: &CellId,
) -> Result<CellData, PipelineError> {
    let scenario = cell.scenario(config)?;
    let stimulated = scenario.is_stimulated();
    let calibration = match (stimulated, calibration) {
        (true, None) => return Err(PipelineError::MissingCalibration(config.calibration_path())),
        (_, c) => c,
    };
    let mut walker = Walker::new(scenario, config.plant.clone())?;
    let duration = config.duration_for(cell.condition);
    let steps = (duration / CONTROL_DT_S).round() as usize;
    let template_cycle_s = walker.template.cycle_duration_s;

    let mut legs: Vec<LegRunner> = [FootSide::Left, FootSide::Right]
        .into_iter()
        .map(|side| -> Result<LegRunner, PipelineError> {
            // Ground-plane offset from a static capture of the unloaded
            // shoe; the normal then follows the scenario incline.
            let static_frames = static_pose_frames(walker.cloud(side), 0.0, 0.6);
            let plane = ground_plane_from_calibration(&static_frames, walker.cloud(side), 0.0)?
                .with_incline(scenario.incline_deg)?;

            let leg_calib = calibration.map(|c| c.leg(side));
            let gs_channel = match (cell.condition, leg_calib) {
                (Condition::FesOff, _) | (_, None) => None,
                (_, Some(lc)) => Some(OpenLoopChannel::new(
                    config.controller.trapezoid.with_peak(lc.gs_fd_peak_us)
                        .map_err(|e| PipelineError::Config(e.to_string()))?,
                    config.controller.rate_limit_us,
                )),
            };
            let corrective = matches!(cell.condition, Condition::FesOl | Condition::FesCl);
            let ta_open_loop = match (corrective, side, leg_calib) {
                (true, FootSide::Left, Some(lc)) => Some(OpenLoopChannel::new(
                    config.controller.trapezoid.with_peak(lc.ta_ol_peak_us)
                        .map_err(|e| PipelineError::Config(e.to_string()))?,
                    config.controller.rate_limit_us,
                )),
                _ => None,
            };
            let ta_closed_loop = match (corrective, side, leg_calib) {
                (true, FootSide::Right, Some(lc)) => Some((
                    ClosedLoopConfig {
                        gains: config.controller.gains,
                        thresholds: config.controller.thresholds,
                        calib: lc.ta,
                        rate_limit_us: config.controller.rate_limit_us,
                    },
                    ClosedLoopState::new(),
                )),
                _ => None,
            };
            Ok(LegRunner {
                side,
                detector: PhaseDetector::new(scenario.speed_m_s),
                plane,
                last_clearance: None,
                phase: None,
                phases: Vec::with_capacity(steps),
                gates: scenario.gate_stream(side),
                gate_on: false,
                gs_window: ProgressEstimator::new(0.69 * template_cycle_s),
                gs_channel,
                ta_open_loop,
                ta_closed_loop,
            })
        })
        .collect::<Result<_, _>>()?;

    let mut trace = Vec::with_capacity(steps * 2);
    let mut stim_rows = Vec::with_capacity(steps * 4);

    for _ in 0..steps {
        let sample = walker.sample();
        let mut stim = [LegStim::off(), LegStim::off()];
        for (i, leg) in legs.iter_mut().enumerate() {
            let side = leg.side;
            let cloud = walker.cloud(side);

            // Clearance from the emitted markers through the registration
            // pipeline; a frame with missing shoe markers holds the last
            // estimate.
            let observed: Option<Vec<LabeledPoint>> = cloud
                .marker_refs()
                .iter()
                .map(|m| {
                    sample
                        .frame
                        .position(&format!("{}{}", side.prefix(), m.label))
                        .map(|p| LabeledPoint {
                            label: m.label.clone(),
                            position: p,
                        })
                })
                .collect();
            let clearance = match observed {
                Some(markers) => {
                    let fit = fit_rigid_transform(cloud.marker_refs(), &markers)?;
                    let c = toe_clearance(cloud, &fit.transform, &leg.plane)?.mm();
                    leg.last_clearance = Some(c);
                    Some(c)
                }
                None => leg.last_clearance,
            };

            let pp2 = sample.frame.position(&format!("{}PP2", side.prefix()));
            let mid_stance = mid_stance_from_frame(&sample.frame, side).unwrap_or(false);
            let phase = match pp2 {
                Some(p) => leg
                    .detector
                    .update(sample.t_s, p.x, mid_stance)
                    .ok(),
                None => leg.phase, // marker dropout: hold
            };

            // Cycle bookkeeping on detected transitions.
            if let (Some(prev), Some(now)) = (leg.phase, phase) {
                if prev.is_swing() && !now.is_swing() {
                    // Heel strike: close the plantarflexor window and draw
                    // the next cycle's stimulation gate.
                    leg.gs_window.finish(sample.t_s);
                    leg.gate_on = leg.gates.next_gate();
                }
                let was_mid = matches!(prev, GaitPhase::Stance { mid_stance_reached: true });
                let is_mid = matches!(now, GaitPhase::Stance { mid_stance_reached: true });
                if is_mid && !was_mid && !leg.gs_window.is_active() {
                    leg.gs_window.start(sample.t_s);
                }
            }
            leg.phase = phase;
            leg.phases.push(phase.unwrap_or(GaitPhase::Stance {
                mid_stance_reached: false,
            }));

            let fire = leg.gate_on && stimulated;
            let gs_cmd = match &mut leg.gs_channel {
                Some(channel) => {
                    let progress = (fire && leg.gs_window.is_active())
                        .then(|| leg.gs_window.progress(sample.t_s));
                    channel.step(progress)
                }
                None => StimCommand::off(),
            };
            let ta_cmd = if let Some(channel) = &mut leg.ta_open_loop {
                let progress = match (fire, phase) {
                    (true, Some(GaitPhase::Swing { progress })) => Some(progress),
                    _ => None,
                };
                channel.step(progress)
            } else if let Some((cfg, state)) = &mut leg.ta_closed_loop {
                let effective_phase = match (fire, phase, clearance) {
                    (true, Some(p), Some(_)) => p,
                    // Gate off, warming up, or no clearance estimate yet:
                    // the channel idles as in stance.
                    _ => GaitPhase::Stance {
                        mid_stance_reached: false,
                    },
                };
                controller_step(
                    clearance.unwrap_or(0.0),
                    &effective_phase,
                    state,
                    cfg,
                    CONTROL_DT_S,
                )
                .map_err(|e| PipelineError::Analysis(e.to_string()))?
            } else {
                StimCommand::off()
            };
            stim[i] = LegStim {
                ta: ta_cmd,
                gs: gs_cmd,
            };

            let leg_truth = sample.legs[i];
            trace.push(TraceRow {
                t_s: sample.t_s,
                leg: side.to_string(),
                phase: leg_truth.cycle_phase,
                clearance_mm: leg_truth.clearance_mm,
                a_ta: leg_truth.a_ta,
                a_gs: leg_truth.a_gs,
                stim_ta_us: ta_cmd.pulse_width_us,
                stim_gs_us: gs_cmd.pulse_width_us,
                gs_force_n: leg_truth.gs_force_n,
            });
            for (muscle, cmd) in [("TA", ta_cmd), ("GS", gs_cmd)] {
                stim_rows.push(StimRow {
                    t_s: sample.t_s,
                    leg: side.to_string(),
                    muscle: muscle.to_string(),
                    pulse_width_us: cmd.pulse_width_us,
                    amplitude_ma: cmd.amplitude_ma,
                    frequency_hz: cmd.frequency_hz,
                });
            }
        }
        walker.advance(stim, CONTROL_DT_S);
    }

    let mut cycles = Vec::new();
    for leg in &legs {
        if let Ok(idx) = segment_cycles(&leg.phases, CONTROL_DT_S) {
            for (k, c) in idx.iter().enumerate() {
                cycles.push(CycleRow::from_index(k, leg.side, c, 0.0, CONTROL_DT_S));
            }
        }
    }

    Ok(CellData {
        cell: *cell,
        trace,
        stim: stim_rows,
        cycles,
    })
}

fn write_cell(config: &RunConfig, data: &CellData) -> Result<(), PipelineError> {
    let dir = config.cell_dir(&data.cell);
    fs::create_dir_all(&dir)?;
    let mut w = csv::Writer::from_path(dir.join("trace.csv"))?;
    for row in &data.trace {
        w.serialize(row)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("stim.csv"))?;
    for row in &data.stim {
        w.serialize(row)?;
    }
    w.flush()?;
    crate::gait_state::write_cycles_csv(&dir.join("cycles.csv"), &data.cycles)?;
    Ok(())
}

/// Simulate every cell of the grid and write per-cell CSVs.
pub fn cmd_run(config: &RunConfig) -> Result<Vec<CellId>, PipelineError> {
    config.validate()?;
    let cells = config.cells();
    let needs_calibration = cells.iter().any(|c| c.condition != Condition::FesOff);
    let calibration = if needs_calibration {
        Some(load_calibration(config)?)
    } else {
        None
    };
    cells
        .par_iter()
        .map(|cell| {
            let data = simulate_cell(config, calibration.as_ref(), cell)?;
            write_cell(config, &data)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(cells)
}

/// Per-condition statistics within one speed/incline group.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ConditionSummary {
    pub condition: Condition,
    pub n_cycles: usize,
    pub mean_mm: Vec<f64>,
    pub sd_mm: Vec<f64>,
    pub mtc_mm: Vec<f64>,
    pub mtc_mean_mm: f64,
    /// Fraction of swing samples below the safety floor c_min.
    pub unsafe_swing_fraction: f64,
    pub variability_mean_sd_mm: f64,
    pub variability_sd_of_sd_mm: f64,
    pub variability_target_mm: f64,
    pub mean_toe_off_frac: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PairwiseSummary {
    pub condition_a: Condition,
    pub condition_b: Condition,
    #[serde(flatten)]
    pub result: PermutationResult,
    pub any_significant: bool,
}

/// Stimulation statistics of one corrective TA channel.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ChannelStimSummary {
    pub profile_mean_us: Vec<f64>,
    pub profile_sd_us: Vec<f64>,
    /// Mean profile normalized by the calibrated maximum.
    pub profile_mean_norm: Vec<f64>,
    pub stimulated_cycles: usize,
    pub charge: ChargeSummary,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StimulationSummary {
    pub open_loop: ChannelStimSummary,
    pub closed_loop: ChannelStimSummary,
    pub reduction: ReductionReport,
}

/// Statistics of one speed/incline group.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GroupSummary {
    pub speed_m_s: f64,
    pub incline_deg: f64,
    pub error: Option<String>,
    pub conditions: Vec<ConditionSummary>,
    pub pairwise: Vec<PairwiseSummary>,
    pub stimulation: Option<StimulationSummary>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub alpha: f64,
    pub n_permutations: usize,
    pub c_min_mm: f64,
    pub groups: Vec<GroupSummary>,
}

/// Clearance and stimulation cycles of one (cell, leg) source.
struct LegCycles {
    clearance: Vec<CycleSeries>,
    ta_stim: Vec<CycleSeries>,
    toe_off_fracs: Vec<f64>,
    stimulated: Vec<bool>,
    cycle_bounds_s: Vec<(f64, f64)>,
    ta_log: Vec<StimSample>,
    unsafe_swing_fraction: f64,
}

fn read_cell_leg(
    config: &RunConfig,
    cell: &CellId,
    side: FootSide,
    c_min_mm: f64,
) -> Result<LegCycles, PipelineError> {
    let dir = config.cell_dir(cell);
    if !dir.join("trace.csv").exists() {
        return Err(PipelineError::MissingTraces(cell.name()));
    }
    let leg_name = side.to_string();
    let mut clearance_samples = Vec::new();
    let mut ta_samples = Vec::new();
    let mut gs_samples = Vec::new();
    let mut times = Vec::new();
    let mut reader = csv::Reader::from_path(dir.join("trace.csv"))?;
    for row in reader.deserialize() {
        let row: TraceRow = row?;
        if row.leg == leg_name {
            times.push(row.t_s);
            clearance_samples.push(row.clearance_mm);
            ta_samples.push(row.stim_ta_us);
            gs_samples.push(row.stim_gs_us);
        }
    }
    let cycles_rows: Vec<CycleRow> = crate::gait_state::read_cycles_csv(&dir.join("cycles.csv"))?
        .into_iter()
        .filter(|r| r.leg == leg_name)
        .collect();

    let t0 = *times.first().unwrap_or(&0.0);
    let to_index = |t: f64| ((t - t0) / CONTROL_DT_S).round() as usize;

    let mut out = LegCycles {
        clearance: Vec::new(),
        ta_stim: Vec::new(),
        toe_off_fracs: Vec::new(),
        stimulated: Vec::new(),
        cycle_bounds_s: Vec::new(),
        ta_log: times
            .iter()
            .zip(&ta_samples)
            .map(|(&t_s, &pulse_width_us)| StimSample {
                t_s,
                pulse_width_us,
            })
            .collect(),
        unsafe_swing_fraction: 0.0,
    };

    let mut swing_samples = 0usize;
    let mut unsafe_samples = 0usize;
    for row in &cycles_rows {
        let (start, toe_off, end) = (to_index(row.start_s), to_index(row.toe_off_s), to_index(row.end_s));
        if end >= clearance_samples.len() || start >= toe_off || toe_off >= end {
            continue;
        }
        let id = out.clearance.len();
        match resample_cycle(&clearance_samples[start..=end], id) {
            Ok(series) => out.clearance.push(series),
            Err(_) => continue,
        }
        if let Ok(series) = resample_cycle(&ta_samples[start..=end], id) {
            out.ta_stim.push(series);
        }
        out.toe_off_fracs.push(row.toe_off_fraction());
        out.cycle_bounds_s.push((row.start_s, row.end_s));
        out.stimulated.push(
            ta_samples[start..=end].iter().any(|&u| u > 0.0)
                || gs_samples[start..=end].iter().any(|&u| u > 0.0),
        );
        for &c in &clearance_samples[toe_off..end] {
            swing_samples += 1;
            if c < c_min_mm {
                unsafe_samples += 1;
            }
        }
    }
    if swing_samples > 0 {
        out.unsafe_swing_fraction = unsafe_samples as f64 / swing_samples as f64;
    }
    Ok(out)
}

/// Which (cell, legs) provide each analysis condition: OFF and FD pool both
/// legs; the corrective recording contributes its left leg as FES_OL and
/// its right leg as FES_CL.
fn condition_sources(condition: Condition, grid: &[CellId], speed: f64, incline: f64) -> Vec<(CellId, FootSide)> {
    let find = |c: Condition| -> Option<CellId> {
        grid.iter()
            .find(|cell| {
                cell.speed_m_s == speed && cell.incline_deg == incline && cell.condition == c
            })
            .copied()
    };
    let corrective = find(Condition::FesCl).or_else(|| find(Condition::FesOl));
    match condition {
        Condition::FesOff => find(Condition::FesOff)
            .map(|c| vec![(c, FootSide::Left), (c, FootSide::Right)])
            .unwrap_or_default(),
        Condition::FesFd => find(Condition::FesFd)
            .map(|c| vec![(c, FootSide::Left), (c, FootSide::Right)])
            .unwrap_or_default(),
        Condition::FesOl => corrective.map(|c| vec![(c, FootSide::Left)]).unwrap_or_default(),
        Condition::FesCl => corrective.map(|c| vec![(c, FootSide::Right)]).unwrap_or_default(),
    }
}

fn analyze_group(
    config: &RunConfig,
    calibration: Option<&CalibrationData>,
    grid: &[CellId],
    speed: f64,
    incline: f64,
) -> GroupSummary {
    match analyze_group_inner(config, calibration, grid, speed, incline) {
        Ok(group) => group,
        Err(e) => GroupSummary {
            speed_m_s: speed,
            incline_deg: incline,
            error: Some(e.to_string()),
            conditions: Vec::new(),
            pairwise: Vec::new(),
            stimulation: None,
        },
    }
}

fn analyze_group_inner(
    config: &RunConfig,
    calibration: Option<&CalibrationData>,
    grid: &[CellId],
    speed: f64,
    incline: f64,
) -> Result<GroupSummary, PipelineError> {
    let c_min = config.controller.thresholds.c_min_mm;
    let mut per_condition: BTreeMap<Condition, Vec<LegCycles>> = BTreeMap::new();
    for condition in Condition::ALL {
        let sources = condition_sources(condition, grid, speed, incline);
        let mut legs = Vec::new();
        for (cell, side) in sources {
            legs.push(read_cell_leg(config, &cell, side, c_min)?);
        }
        if !legs.is_empty() {
            per_condition.insert(condition, legs);
        }
    }
    if per_condition.is_empty() {
        return Err(PipelineError::MissingTraces(format!(
            "no cells for {speed} m/s at {incline} deg"
        )));
    }

    let mut conditions = Vec::new();
    let mut curves: BTreeMap<Condition, Vec<CycleSeries>> = BTreeMap::new();
    for (&condition, legs) in &per_condition {
        let mut pooled: Vec<CycleSeries> = Vec::new();
        let mut toe_offs = Vec::new();
        let mut unstimulated: Vec<CycleSeries> = Vec::new();
        let mut swing_weighted_unsafe = 0.0;
        let mut total_legs = 0.0;
        for leg in legs {
            for (k, series) in leg.clearance.iter().enumerate() {
                let id = pooled.len();
                pooled.push(CycleSeries::from_values(series.values().to_vec(), id));
                if !leg.stimulated[k] {
                    unstimulated.push(series.clone());
                }
            }
            toe_offs.extend_from_slice(&leg.toe_off_fracs);
            swing_weighted_unsafe += leg.unsafe_swing_fraction;
            total_legs += 1.0;
        }
        if pooled.len() < 2 {
            return Err(PipelineError::Analysis(format!(
                "{}: {}",
                condition,
                analysis::AnalysisError::TooFewCycles(pooled.len())
            )));
        }
        let (mean, sd) = mean_sd(&pooled).map_err(|e| PipelineError::Analysis(e.to_string()))?;
        let mean_toe_off = toe_offs.iter().sum::<f64>() / toe_offs.len() as f64;
        let swing_window = (mean_toe_off, 1.0);
        let mtc: Vec<f64> = pooled
            .iter()
            .map(|c| min_toe_clearance(c, swing_window, config.analysis.mtc_window))
            .collect::<Result<_, _>>()
            .map_err(|e| PipelineError::Analysis(e.to_string()))?;
        let mtc_mean = mtc.iter().sum::<f64>() / mtc.len() as f64;
        // Variability targets describe the noise floor, so they are
        // measured on cycles where no stimulation fired.
        let (var_mean, var_sd) = if unstimulated.len() >= 2 {
            within_cycle_variability(&unstimulated, swing_window)
                .map_err(|e| PipelineError::Analysis(e.to_string()))?
        } else {
            (f64::NAN, f64::NAN)
        };
        conditions.push(ConditionSummary {
            condition,
            n_cycles: pooled.len(),
            mean_mm: mean,
            sd_mm: sd,
            mtc_mean_mm: mtc_mean,
            mtc_mm: mtc,
            unsafe_swing_fraction: swing_weighted_unsafe / total_legs,
            variability_mean_sd_mm: var_mean,
            variability_sd_of_sd_mm: var_sd,
            variability_target_mm: noise_model(speed, incline, condition),
            mean_toe_off_frac: mean_toe_off,
        });
        curves.insert(condition, pooled);
    }

    let mut pairwise = Vec::new();
    let present: Vec<Condition> = curves.keys().copied().collect();
    for (i, &a) in present.iter().enumerate() {
        for &b in &present[i + 1..] {
            let seed = derive_seed(
                config.seed,
                &format!("permtest/{speed}/{incline}/{a}/{b}"),
            );
            let result = permutation_test(
                &curves[&a],
                &curves[&b],
                config.analysis.n_permutations,
                config.analysis.alpha,
                seed,
            )
            .map_err(|e| PipelineError::Analysis(e.to_string()))?;
            pairwise.push(PairwiseSummary {
                condition_a: a,
                condition_b: b,
                any_significant: result.any_significant(),
                result,
            });
        }
    }

    // Stimulation accounting for the corrective recording.
    let stimulation = match (
        per_condition.get(&Condition::FesOl),
        per_condition.get(&Condition::FesCl),
        calibration,
    ) {
        (Some(ol_legs), Some(cl_legs), Some(calib)) if ol_legs.len() == 1 && cl_legs.len() == 1 => {
            let channel = |leg: &LegCycles, u_max: f64| -> Result<ChannelStimSummary, PipelineError> {
                let fired: Vec<CycleSeries> = leg
                    .ta_stim
                    .iter()
                    .zip(&leg.stimulated)
                    .filter(|(series, _)| series.values().iter().any(|&u| u > 0.0))
                    .map(|(series, _)| series.clone())
                    .collect();
                let (profile_mean, profile_sd) = if fired.len() >= 2 {
                    mean_sd(&fired).map_err(|e| PipelineError::Analysis(e.to_string()))?
                } else {
                    (vec![0.0; CYCLE_POINTS], vec![0.0; CYCLE_POINTS])
                };
                let charge = cumulative_charge(
                    &leg.ta_log,
                    STIM_AMPLITUDE_MA,
                    STIM_FREQUENCY_HZ,
                    &leg.cycle_bounds_s,
                )
                .map_err(|e| PipelineError::Analysis(e.to_string()))?;
                Ok(ChannelStimSummary {
                    profile_mean_norm: profile_mean.iter().map(|&u| u / u_max).collect(),
                    profile_mean_us: profile_mean,
                    profile_sd_us: profile_sd,
                    stimulated_cycles: fired.len(),
                    charge,
                })
            };
            let ol = channel(&ol_legs[0], calib.left.ta.u_max_us)?;
            let cl = channel(&cl_legs[0], calib.right.ta.u_max_us)?;
            let reduction = reduction_report(
                &cl.charge,
                &ol.charge,
                calib.right.ta.u_thr_us,
                STIM_AMPLITUDE_MA,
            )
            .map_err(|e| PipelineError::Analysis(e.to_string()))?;
            Some(StimulationSummary {
                open_loop: ol,
                closed_loop: cl,
                reduction,
            })
        }
        _ => None,
    };

    Ok(GroupSummary {
        speed_m_s: speed,
        incline_deg: incline,
        error: None,
        conditions,
        pairwise,
        stimulation,
    })
}

/// Run the statistics pass over existing traces and write `summary.json`
/// plus per-figure CSVs. Groups that fail (for example with too few cycles)
/// are reported in their `error` field; the rest of the run continues.
pub fn cmd_analyze(config: &RunConfig) -> Result<Summary, PipelineError> {
    config.validate()?;
    let grid = config.cells();
    if grid.is_empty() {
        return Err(PipelineError::Config("no cells selected".into()));
    }
    let calibration = load_calibration(config).ok();

    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for &speed in &config.speeds_m_s {
        for &incline in &config.inclines_deg {
            if grid
                .iter()
                .any(|c| c.speed_m_s == speed && c.incline_deg == incline)
            {
                pairs.push((speed, incline));
            }
        }
    }
    let groups: Vec<GroupSummary> = pairs
        .par_iter()
        .map(|&(speed, incline)| {
            analyze_group(config, calibration.as_ref(), &grid, speed, incline)
        })
        .collect();

    let summary = Summary {
        seed: config.seed,
        alpha: config.analysis.alpha,
        n_permutations: config.analysis.n_permutations,
        c_min_mm: config.controller.thresholds.c_min_mm,
        groups,
    };
    fs::create_dir_all(&config.out_dir)?;
    write_json(&config.out_dir.join("summary.json"), &summary)?;
    write_figure_csvs(config, &summary)?;
    Ok(summary)
}

/// Full pipeline: calibrate, run the grid, analyze.
pub fn run_all(config: &RunConfig) -> Result<Summary, PipelineError> {
    cmd_calibrate(config)?;
    cmd_run(config)?;
    cmd_analyze(config)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_figure_csvs(config: &RunConfig, summary: &Summary) -> Result<(), PipelineError> {
    let dir = &config.out_dir;

    let mut w = csv::Writer::from_path(dir.join("fig_clearance_curves.csv"))?;
    w.write_record(["speed_m_s", "incline_deg", "condition", "percent", "mean_mm", "sd_mm"])?;
    for g in &summary.groups {
        for c in &g.conditions {
            for k in 0..CYCLE_POINTS {
                w.write_record(&[
                    g.speed_m_s.to_string(),
                    g.incline_deg.to_string(),
                    c.condition.to_string(),
                    k.to_string(),
                    c.mean_mm[k].to_string(),
                    c.sd_mm[k].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("fig_significance.csv"))?;
    w.write_record([
        "speed_m_s",
        "incline_deg",
        "condition_a",
        "condition_b",
        "percent",
        "p_value",
        "significant",
    ])?;
    for g in &summary.groups {
        for p in &g.pairwise {
            for k in 0..CYCLE_POINTS {
                w.write_record(&[
                    g.speed_m_s.to_string(),
                    g.incline_deg.to_string(),
                    p.condition_a.to_string(),
                    p.condition_b.to_string(),
                    k.to_string(),
                    p.result.p_values[k].to_string(),
                    (p.result.significant_mask[k] as u8).to_string(),
                ])?;
            }
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("fig_mtc.csv"))?;
    w.write_record(["speed_m_s", "incline_deg", "condition", "cycle", "mtc_mm"])?;
    for g in &summary.groups {
        for c in &g.conditions {
            for (k, mtc) in c.mtc_mm.iter().enumerate() {
                w.write_record(&[
                    g.speed_m_s.to_string(),
                    g.incline_deg.to_string(),
                    c.condition.to_string(),
                    k.to_string(),
                    mtc.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("fig_stim_profiles.csv"))?;
    w.write_record([
        "speed_m_s",
        "incline_deg",
        "controller",
        "percent",
        "mean_us",
        "sd_us",
        "mean_norm",
    ])?;
    for g in &summary.groups {
        if let Some(stim) = &g.stimulation {
            for (name, ch) in [("FES_OL", &stim.open_loop), ("FES_CL", &stim.closed_loop)] {
                for k in 0..CYCLE_POINTS {
                    w.write_record(&[
                        g.speed_m_s.to_string(),
                        g.incline_deg.to_string(),
                        name.to_string(),
                        k.to_string(),
                        ch.profile_mean_us[k].to_string(),
                        ch.profile_sd_us[k].to_string(),
                        ch.profile_mean_norm[k].to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("fig_charge.csv"))?;
    w.write_record([
        "speed_m_s",
        "incline_deg",
        "controller",
        "total_charge_mc",
        "reduction",
        "floor_bound",
    ])?;
    for g in &summary.groups {
        if let Some(stim) = &g.stimulation {
            for (name, ch) in [("FES_OL", &stim.open_loop), ("FES_CL", &stim.closed_loop)] {
                w.write_record(&[
                    g.speed_m_s.to_string(),
                    g.incline_deg.to_string(),
                    name.to_string(),
                    ch.charge.total_mc.to_string(),
                    stim.reduction.reduction.to_string(),
                    stim.reduction.floor_bound.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_config(dir: &Path) -> RunConfig {
        RunConfig {
            out_dir: dir.to_path_buf(),
            speeds_m_s: vec![0.7],
            inclines_deg: vec![0.0],
            conditions: vec![Condition::FesOff, Condition::FesFd, Condition::FesCl],
            duration_s: Some(30.0),
            ..RunConfig::default()
        }
    }

    #[test]
    fn default_grid_has_18_cells() {
        let config = RunConfig::default();
        assert_eq!(config.cells().len(), 18);
        let filtered = RunConfig {
            cells_filter: Some(vec!["0.7_-5_FES_CL".into()]),
            ..RunConfig::default()
        };
        assert_eq!(filtered.cells().len(), 1);
    }

    #[test]
    fn calibration_matches_plant_truth_within_one_step() {
        let dir = tempdir().unwrap();
        let config = tiny_config(dir.path());
        let calib = cmd_calibrate(&config).unwrap();
        for leg in [&calib.left, &calib.right] {
            for (calibrated, model) in [(&leg.ta, &config.plant.ta), (&leg.gs, &config.plant.gs)] {
                assert_eq!(calibrated.u_thr_us % 50.0, 0.0);
                assert_eq!(calibrated.u_max_us % 50.0, 0.0);
                assert!(calibrated.u_thr_us > model.true_threshold_us);
                assert!(calibrated.u_thr_us <= model.true_threshold_us + 100.0);
                assert!((calibrated.u_max_us - model.true_saturation_us).abs() <= 50.0);
            }
            // Induction peak hits the 10-15 N band on the plant.
            let mut probe = config.plant.gs.steady_force_probe();
            let force = probe(leg.gs_fd_peak_us);
            assert!((10.0..=15.0).contains(&force), "force {force}");
        }
        assert!(config.calibration_path().exists());
    }

    #[test]
    fn run_requires_calibration_for_stimulated_cells() {
        let dir = tempdir().unwrap();
        let config = tiny_config(dir.path());
        match cmd_run(&config) {
            Err(PipelineError::MissingCalibration(_)) => {}
            other => panic!("expected MissingCalibration, got {other:?}"),
        }
        // FES_OFF-only grids run without calibration.
        let off_only = RunConfig {
            conditions: vec![Condition::FesOff],
            duration_s: Some(15.0),
            ..tiny_config(dir.path())
        };
        cmd_run(&off_only).unwrap();
    }

    #[test]
    fn off_only_analysis_marks_stimulation_not_applicable() {
        let dir = tempdir().unwrap();
        let config = RunConfig {
            conditions: vec![Condition::FesOff],
            duration_s: Some(30.0),
            ..tiny_config(dir.path())
        };
        cmd_run(&config).unwrap();
        let summary = cmd_analyze(&config).unwrap();
        assert_eq!(summary.groups.len(), 1);
        let group = &summary.groups[0];
        assert!(group.error.is_none());
        assert!(group.stimulation.is_none());
        assert_eq!(group.conditions.len(), 1);
        assert!(group.conditions[0].n_cycles > 10);
        let text = std::fs::read_to_string(dir.path().join("summary.json")).unwrap();
        assert!(text.contains("\"stimulation\": null"));
    }

    #[test]
    fn short_traces_surface_too_few_cycles_but_analysis_continues() {
        let dir = tempdir().unwrap();
        let config = RunConfig {
            conditions: vec![Condition::FesOff],
            speeds_m_s: vec![0.7, 1.2],
            duration_s: Some(2.0),
            ..tiny_config(dir.path())
        };
        cmd_run(&config).unwrap();
        let summary = cmd_analyze(&config).unwrap();
        assert_eq!(summary.groups.len(), 2);
        for group in &summary.groups {
            let err = group.error.as_ref().expect("too few cycles");
            assert!(err.contains("cycles"), "{err}");
        }
    }

    #[test]
    fn full_tiny_pipeline_produces_consistent_outputs() {
        let dir = tempdir().unwrap();
        let config = tiny_config(dir.path());
        let summary = run_all(&config).unwrap();
        assert_eq!(summary.groups.len(), 1);
        let group = &summary.groups[0];
        assert!(group.error.is_none(), "{:?}", group.error);
        assert_eq!(group.conditions.len(), 4);
        let stim = group.stimulation.as_ref().expect("corrective recording");
        assert!(stim.reduction.reduction > 0.0);
        assert!(stim.reduction.reduction <= stim.reduction.floor_bound + 1e-12);
        for name in [
            "summary.json",
            "fig_clearance_curves.csv",
            "fig_significance.csv",
            "fig_mtc.csv",
            "fig_stim_profiles.csv",
            "fig_charge.csv",
        ] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
        for cell in config.cells() {
            for file in ["trace.csv", "stim.csv", "cycles.csv"] {
                assert!(config.cell_dir(&cell).join(file).exists());
            }
        }
    }

    #[test]
    fn config_round_trips_and_rejects_garbage() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, "{}").unwrap();
        let config = RunConfig::load(&path).unwrap();
        assert_eq!(config, RunConfig::default());

        std::fs::write(&path, "{\"speeds_m_s\": []}").unwrap();
        assert!(matches!(
            RunConfig::load(&path),
            Err(PipelineError::Config(_))
        ));
        std::fs::write(&path, "not json").unwrap();
        assert!(matches!(
            RunConfig::load(&path),
            Err(PipelineError::Config(_))
        ));
    }
}
