//! Gait-phase estimation from marker trajectories.
//!
//! Stance and swing are told apart by the anterior-posterior velocity of the
//! PP2 marker: on a treadmill the planted foot is carried backward at belt
//! speed, while the swinging foot travels forward. Thresholds scale with
//! belt speed so the same detector works at 0.7 and 1.2 m/s. Mid-stance
//! onset is the instant PP2 passes posterior to the ASIS midpoint.

use nalgebra::Point3;
use thiserror::Error;

use crate::geometry::FootSide;
use crate::mocap::MarkerFrame;

#[derive(Debug, Error, PartialEq)]
pub enum GaitError {
    #[error("history spans less than {0:.3} s")]
    InsufficientHistory(f64),
    #[error("marker {0} missing")]
    MissingMarker(String),
    #[error("stream contains no complete gait cycle")]
    NoCompleteCycle,
}

/// Current gait phase of one leg.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GaitPhase {
    Stance { mid_stance_reached: bool },
    Swing { progress: f64 },
}

impl GaitPhase {
    pub fn is_swing(&self) -> bool {
        matches!(self, GaitPhase::Swing { .. })
    }

    pub fn swing_progress(&self) -> Option<f64> {
        match self {
            GaitPhase::Swing { progress } => Some(*progress),
            GaitPhase::Stance { .. } => None,
        }
    }
}

/// One gait cycle as sample indices into the source stream:
/// stance onset .. toe-off .. next stance onset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CycleIndex {
    pub start_sample: usize,
    pub toe_off_sample: usize,
    pub end_sample: usize,
}

/// Fraction of the velocity band (relative to belt speed) used for the
/// swing/stance hysteresis thresholds.
const VELOCITY_THRESHOLD_FRAC: f64 = 0.2;
/// Number of backward-difference samples averaged for the velocity estimate.
const VELOCITY_WINDOW: usize = 5;
/// Minimum history span before the detector reports a phase.
const MIN_HISTORY_S: f64 = 0.05;
/// Minimum accepted phase duration; shorter runs are debounce blips.
pub const MIN_PHASE_S: f64 = 0.1;
/// Longest plausible swing.
pub const MAX_SWING_S: f64 = 2.0;
/// Swing-duration estimate before any swing has completed.
const INITIAL_SWING_S: f64 = 0.4;

/// Trailing mean over the last few completed window durations; drives the
/// causal progress estimate for open-loop profiles.
#[derive(Debug, Clone)]
pub struct ProgressEstimator {
    durations: [f64; 3],
    filled: usize,
    next: usize,
    started_at: Option<f64>,
    initial_s: f64,
}

impl ProgressEstimator {
    pub fn new(initial_s: f64) -> Self {
        Self {
            durations: [0.0; 3],
            filled: 0,
            next: 0,
            started_at: None,
            initial_s,
        }
    }

    pub fn start(&mut self, t_s: f64) {
        self.started_at = Some(t_s);
    }

    pub fn finish(&mut self, t_s: f64) {
        if let Some(start) = self.started_at.take() {
            self.durations[self.next] = t_s - start;
            self.next = (self.next + 1) % self.durations.len();
            self.filled = (self.filled + 1).min(self.durations.len());
        }
    }

    pub fn expected_duration_s(&self) -> f64 {
        if self.filled == 0 {
            self.initial_s
        } else {
            self.durations[..self.filled].iter().sum::<f64>() / self.filled as f64
        }
    }

    pub fn progress(&self, t_s: f64) -> f64 {
        match self.started_at {
            Some(start) => ((t_s - start) / self.expected_duration_s()).clamp(0.0, 1.0),
            None => 0.0,
        }
    }

    pub fn is_active(&self) -> bool {
        self.started_at.is_some()
    }
}

/// Streaming stance/swing detector for one leg. Single-owner: one instance
/// per leg, fed every frame in time order.
#[derive(Debug, Clone)]
pub struct PhaseDetector {
    belt_speed_m_s: f64,
    history: Vec<(f64, f64)>,
    in_swing: bool,
    mid_stance_reached: bool,
    swing: ProgressEstimator,
}

impl PhaseDetector {
    pub fn new(belt_speed_m_s: f64) -> Self {
        assert!(belt_speed_m_s > 0.0, "belt speed must be positive");
        Self {
            belt_speed_m_s,
            history: Vec::new(),
            in_swing: false,
            mid_stance_reached: false,
            swing: ProgressEstimator::new(INITIAL_SWING_S),
        }
    }

    /// Smoothed AP velocity in m/s (moving average of backward differences).
    fn smoothed_velocity(&self) -> Option<f64> {
        let n = self.history.len();
        if n < VELOCITY_WINDOW + 1 {
            return None;
        }
        let (t0, x0) = self.history[n - 1 - VELOCITY_WINDOW];
        let (t1, x1) = self.history[n - 1];
        let dt = t1 - t0;
        if dt <= 0.0 {
            return None;
        }
        // mm/s -> m/s
        Some((x1 - x0) / dt / 1000.0)
    }

    /// Feed one sample of the PP2 anterior-posterior coordinate (mm).
    /// `pp2_posterior_to_pelvis` is the mid-stance predicate for this frame
    /// (ignored during swing); pass `false` when pelvis markers are missing.
    pub fn update(
        &mut self,
        t_s: f64,
        pp2_ap_mm: f64,
        pp2_posterior_to_pelvis: bool,
    ) -> Result<GaitPhase, GaitError> {
        self.history.push((t_s, pp2_ap_mm));
        let keep = VELOCITY_WINDOW + 1;
        if self.history.len() > keep {
            self.history.drain(..self.history.len() - keep);
        }
        let span = self.history.last().unwrap().0 - self.history.first().unwrap().0;
        let velocity = match self.smoothed_velocity() {
            Some(v) if span >= MIN_HISTORY_S - 1e-9 => v,
            _ => return Err(GaitError::InsufficientHistory(span)),
        };

        let v_on = VELOCITY_THRESHOLD_FRAC * self.belt_speed_m_s;
        let v_off = -VELOCITY_THRESHOLD_FRAC * self.belt_speed_m_s;
        if !self.in_swing && velocity > v_on {
            self.in_swing = true;
            self.swing.start(t_s);
        } else if self.in_swing && velocity < v_off {
            self.in_swing = false;
            self.swing.finish(t_s);
            self.mid_stance_reached = false;
        }

        if self.in_swing {
            Ok(GaitPhase::Swing {
                progress: self.swing.progress(t_s),
            })
        } else {
            if pp2_posterior_to_pelvis {
                self.mid_stance_reached = true;
            }
            Ok(GaitPhase::Stance {
                mid_stance_reached: self.mid_stance_reached,
            })
        }
    }
}

/// True when PP2 lies posterior to the midpoint of the two ASIS markers.
pub fn detect_mid_stance(
    pp2: &Point3<f64>,
    asis_left: &Point3<f64>,
    asis_right: &Point3<f64>,
) -> bool {
    pp2.x < (asis_left.x + asis_right.x) / 2.0
}

/// Frame-level wrapper over [`detect_mid_stance`] for one leg's PP2 marker.
pub fn mid_stance_from_frame(frame: &MarkerFrame, side: FootSide) -> Result<bool, GaitError> {
    let label = format!("{}PP2", side.prefix());
    let pp2 = frame
        .position(&label)
        .ok_or(GaitError::MissingMarker(label))?;
    let lasi = frame
        .position("LASI")
        .ok_or_else(|| GaitError::MissingMarker("LASI".into()))?;
    let rasi = frame
        .position("RASI")
        .ok_or_else(|| GaitError::MissingMarker("RASI".into()))?;
    Ok(detect_mid_stance(&pp2, &lasi, &rasi))
}

/// Segment a debounced phase stream into stance-onset-to-stance-onset cycles.
/// Leading and trailing partial cycles are discarded; cycles whose swing
/// falls outside the sanity bounds are dropped.
pub fn segment_cycles(phases: &[GaitPhase], dt_s: f64) -> Result<Vec<CycleIndex>, GaitError> {
    assert!(dt_s > 0.0);
    let min_run = (MIN_PHASE_S / dt_s).round() as usize;
    let runs = debounced_runs(phases, min_run.max(1));

    // Stance onsets: swing -> stance boundaries in the debounced runs.
    let mut onsets = Vec::new();
    for w in runs.windows(2) {
        if w[0].in_swing && !w[1].in_swing {
            onsets.push(w[1].start);
        }
    }
    if onsets.len() < 2 {
        return Err(GaitError::NoCompleteCycle);
    }

    let mut cycles = Vec::new();
    for w in onsets.windows(2) {
        let (start, end) = (w[0], w[1]);
        let toe_off = runs
            .iter()
            .find(|r| r.in_swing && r.start > start && r.start < end)
            .map(|r| r.start);
        if let Some(toe_off) = toe_off {
            let swing_s = (end - toe_off) as f64 * dt_s;
            if (MIN_PHASE_S..=MAX_SWING_S).contains(&swing_s) {
                cycles.push(CycleIndex {
                    start_sample: start,
                    toe_off_sample: toe_off,
                    end_sample: end,
                });
            }
        }
    }
    if cycles.is_empty() {
        return Err(GaitError::NoCompleteCycle);
    }
    Ok(cycles)
}

#[derive(Debug, Clone, Copy)]
struct Run {
    in_swing: bool,
    start: usize,
    len: usize,
}

/// Run-length encode the stream, then absorb runs shorter than `min_run`
/// into their left neighbour until the encoding is stable.
fn debounced_runs(phases: &[GaitPhase], min_run: usize) -> Vec<Run> {
    let mut runs: Vec<Run> = Vec::new();
    for (i, p) in phases.iter().enumerate() {
        match runs.last_mut() {
            Some(r) if r.in_swing == p.is_swing() => r.len += 1,
            _ => runs.push(Run {
                in_swing: p.is_swing(),
                start: i,
                len: 1,
            }),
        }
    }
    loop {
        // Shortest interior run first so isolated blips vanish before they
        // can split a genuine phase.
        let victim = runs
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, r)| r.len < min_run)
            .min_by_key(|(_, r)| r.len)
            .map(|(i, _)| i);
        let Some(i) = victim else { break };
        let absorbed = runs.remove(i);
        runs[i - 1].len += absorbed.len;
        // Merge with the following run if it now matches.
        if i < runs.len() && runs[i].in_swing == runs[i - 1].in_swing {
            let next = runs.remove(i);
            runs[i - 1].len += next.len;
        }
    }
    runs
}

/// Cycle boundaries in seconds, as written to `cycles.csv`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CycleRow {
    pub cycle: usize,
    pub leg: String,
    pub start_s: f64,
    pub toe_off_s: f64,
    pub end_s: f64,
}

impl CycleRow {
    pub fn from_index(cycle: usize, side: FootSide, idx: &CycleIndex, t0: f64, dt: f64) -> Self {
        Self {
            cycle,
            leg: side.to_string(),
            start_s: t0 + idx.start_sample as f64 * dt,
            toe_off_s: t0 + idx.toe_off_sample as f64 * dt,
            end_s: t0 + idx.end_sample as f64 * dt,
        }
    }

    /// Toe-off as a fraction of the cycle (start of the swing window).
    pub fn toe_off_fraction(&self) -> f64 {
        (self.toe_off_s - self.start_s) / (self.end_s - self.start_s)
    }
}

pub fn write_cycles_csv(path: &std::path::Path, rows: &[CycleRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_cycles_csv(path: &std::path::Path) -> Result<Vec<CycleRow>, csv::Error> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().collect()
}
