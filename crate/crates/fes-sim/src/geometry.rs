//! Toe-clearance geometry: shoe-scan point clouds, rigid registration against
//! reflective markers, and signed point-to-plane distances to a treadmill
//! ground plane.
//!
//! All distances are in millimetres. The lab frame is x = anterior
//! (walking direction), y = left, z = up. The treadmill tilts about the
//! pitch (y) axis, so an incline of `theta` degrees gives the plane normal
//! `(-sin theta, 0, cos theta)`.

use nalgebra::{Matrix3, Point3, Vector3};
use thiserror::Error;

use crate::mocap::MarkerFrame;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("rigid fit needs at least 3 markers, got {0}")]
    FewerThanThreeMarkers(usize),
    #[error("marker set is collinear (max triangle area {0:.3} mm^2)")]
    CollinearMarkers(f64),
    #[error("fewer than 3 labels common to both marker sets")]
    LabelMismatch,
    #[error("anterior mask selects no points")]
    EmptyAnteriorSet,
    #[error("marker {label} moves during static calibration (rms {rms_mm:.3} mm)")]
    MarkersNotStationary { label: String, rms_mm: f64 },
    #[error("static calibration spans {0:.3} s, need at least 0.5 s")]
    StaticSpanTooShort(f64),
    #[error("static pose registration failed: {0}")]
    RegistrationFailed(String),
    #[error("incline {0} deg out of range (|incline| <= 30)")]
    InclineOutOfRange(f64),
    #[error("point cloud contains non-finite coordinates")]
    NonFiniteCoordinates,
    #[error("anterior mask length {mask} does not match point count {points}")]
    MaskLengthMismatch { mask: usize, points: usize },
}

/// A labelled 3D position (mm).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPoint {
    pub label: String,
    pub position: Point3<f64>,
}

impl LabeledPoint {
    pub fn new(label: impl Into<String>, x: f64, y: f64, z: f64) -> Self {
        Self {
            label: label.into(),
            position: Point3::new(x, y, z),
        }
    }
}

/// Scanned shoe sole: base points in the shoe frame, an anterior-half mask,
/// and the scanned reflective-marker centres used for registration.
#[derive(Debug, Clone)]
pub struct SoleCloud {
    points: Vec<Point3<f64>>,
    anterior_mask: Vec<bool>,
    marker_refs: Vec<LabeledPoint>,
}

const MIN_MARKER_TRIANGLE_AREA_MM2: f64 = 1.0;

impl SoleCloud {
    pub fn new(
        points: Vec<Point3<f64>>,
        anterior_mask: Vec<bool>,
        marker_refs: Vec<LabeledPoint>,
    ) -> Result<Self, GeometryError> {
        if anterior_mask.len() != points.len() {
            return Err(GeometryError::MaskLengthMismatch {
                mask: anterior_mask.len(),
                points: points.len(),
            });
        }
        if !anterior_mask.iter().any(|&a| a) {
            return Err(GeometryError::EmptyAnteriorSet);
        }
        let finite = points
            .iter()
            .chain(marker_refs.iter().map(|m| &m.position))
            .all(|p| p.coords.iter().all(|c| c.is_finite()));
        if !finite {
            return Err(GeometryError::NonFiniteCoordinates);
        }
        if marker_refs.len() < 3 {
            return Err(GeometryError::FewerThanThreeMarkers(marker_refs.len()));
        }
        let area = max_triangle_area(&marker_refs.iter().map(|m| m.position).collect::<Vec<_>>());
        if area <= MIN_MARKER_TRIANGLE_AREA_MM2 {
            return Err(GeometryError::CollinearMarkers(area));
        }
        Ok(Self {
            points,
            anterior_mask,
            marker_refs,
        })
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn anterior_mask(&self) -> &[bool] {
        &self.anterior_mask
    }

    pub fn marker_refs(&self) -> &[LabeledPoint] {
        &self.marker_refs
    }

    pub fn anterior_points(&self) -> impl Iterator<Item = &Point3<f64>> {
        self.points
            .iter()
            .zip(&self.anterior_mask)
            .filter(|(_, &a)| a)
            .map(|(p, _)| p)
    }

    /// Synthetic shoe sole used by the simulator: a flat base outline sampled
    /// on a regular grid, anterior half split at the bounding-box midpoint.
    ///
    /// The default geometry yields ~500 base points with >= 200 anterior,
    /// dense enough that the discrete minimum tracks the continuous sole
    /// within 0.5 mm.
    pub fn synthetic(side: FootSide) -> Self {
        let length = 280.0;
        let half_width = 47.5;
        let nx = 43;
        let ny = 17;
        let mut points = Vec::new();
        for ix in 0..nx {
            let x = length * ix as f64 / (nx - 1) as f64;
            // Sole outline: narrow heel, widest at the metatarsal heads.
            let w = half_width * (0.55 + 0.45 * (std::f64::consts::PI * x / length).sin().max(0.0));
            for iy in 0..ny {
                let y = -half_width + 2.0 * half_width * iy as f64 / (ny - 1) as f64;
                if y.abs() <= w {
                    points.push(Point3::new(x, y, 0.0));
                }
            }
        }
        // Toe tip and heel tip so the extreme points are always present.
        points.push(Point3::new(length, 0.0, 0.0));
        points.push(Point3::new(0.0, 0.0, 0.0));
        let mid_x = length / 2.0;
        let anterior_mask: Vec<bool> = points.iter().map(|p| p.x > mid_x).collect();
        let mirror = match side {
            FootSide::Right => -1.0,
            FootSide::Left => 1.0,
        };
        let marker_refs = vec![
            LabeledPoint::new("PP2", 235.0, 0.0, 45.0),
            LabeledPoint::new("MTP1", 195.0, 38.0 * mirror, 42.0),
            LabeledPoint::new("MTP5", 195.0, -38.0 * mirror, 40.0),
            LabeledPoint::new("HEEL", 15.0, 0.0, 55.0),
        ];
        Self::new(points, anterior_mask, marker_refs).expect("synthetic cloud is valid")
    }
}

/// Which foot a cloud or marker stream belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum FootSide {
    Left,
    Right,
}

impl FootSide {
    pub fn prefix(self) -> &'static str {
        match self {
            FootSide::Left => "L",
            FootSide::Right => "R",
        }
    }
}

impl std::fmt::Display for FootSide {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FootSide::Left => write!(f, "left"),
            FootSide::Right => write!(f, "right"),
        }
    }
}

/// Proper rigid motion `p -> R p + t` between the shoe frame and the lab frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// Composition with a further translation in the target frame.
    pub fn translated(&self, d: Vector3<f64>) -> Self {
        Self {
            rotation: self.rotation,
            translation: self.translation + d,
        }
    }

    /// Orthonormality / properness defect, for validity checks.
    pub fn rotation_defect(&self) -> f64 {
        let rtr = self.rotation.transpose() * self.rotation;
        let ortho = (rtr - Matrix3::identity()).abs().max();
        let det = (self.rotation.determinant() - 1.0).abs();
        ortho.max(det)
    }
}

/// Fit result: the least-squares rigid motion mapping scan markers onto
/// observed markers, with the residual RMS in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationFit {
    pub transform: RigidTransform,
    pub rms_mm: f64,
}

/// Least-squares rigid registration (closed-form SVD solution) between two
/// label-matched marker sets. Points are paired by label; ordering does not
/// matter.
pub fn fit_rigid_transform(
    scan_markers: &[LabeledPoint],
    observed_markers: &[LabeledPoint],
) -> Result<RegistrationFit, GeometryError> {
    if scan_markers.len() < 3 || observed_markers.len() < 3 {
        return Err(GeometryError::FewerThanThreeMarkers(
            scan_markers.len().min(observed_markers.len()),
        ));
    }
    let mut pairs: Vec<(Point3<f64>, Point3<f64>)> = Vec::new();
    for s in scan_markers {
        if let Some(o) = observed_markers.iter().find(|o| o.label == s.label) {
            pairs.push((s.position, o.position));
        }
    }
    if pairs.len() < 3 {
        return Err(GeometryError::LabelMismatch);
    }
    let scan_pts: Vec<Point3<f64>> = pairs.iter().map(|(s, _)| *s).collect();
    let area = max_triangle_area(&scan_pts);
    if area <= MIN_MARKER_TRIANGLE_AREA_MM2 {
        return Err(GeometryError::CollinearMarkers(area));
    }

    let n = pairs.len() as f64;
    let c_scan: Vector3<f64> = pairs.iter().map(|(s, _)| s.coords).sum::<Vector3<f64>>() / n;
    let c_obs: Vector3<f64> = pairs.iter().map(|(_, o)| o.coords).sum::<Vector3<f64>>() / n;

    let mut h = Matrix3::zeros();
    for (s, o) in &pairs {
        h += (s.coords - c_scan) * (o.coords - c_obs).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd with u");
    let v_t = svd.v_t.expect("svd with v_t");
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum()));
    let rotation = v * correction * u.transpose();
    let translation = c_obs - rotation * c_scan;
    let transform = RigidTransform::new(rotation, translation);

    let ss: f64 = pairs
        .iter()
        .map(|(s, o)| (transform.apply(&Point3::from(s.coords)) - o).norm_squared())
        .sum();
    let rms_mm = (ss / n).sqrt();
    Ok(RegistrationFit { transform, rms_mm })
}

fn max_triangle_area(points: &[Point3<f64>]) -> f64 {
    let mut best: f64 = 0.0;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            for k in (j + 1)..points.len() {
                let a = points[j] - points[i];
                let b = points[k] - points[i];
                best = best.max(a.cross(&b).norm() / 2.0);
            }
        }
    }
    best
}

/// Treadmill ground plane: a single-axis tilt plus a scalar offset along the
/// plane normal. The offset is calibrated once from a static pose and reused
/// across inclines; the normal follows the scenario's incline analytically.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GroundPlane {
    pub incline_deg: f64,
    pub height_offset_mm: f64,
}

impl GroundPlane {
    pub fn new(incline_deg: f64, height_offset_mm: f64) -> Result<Self, GeometryError> {
        if !(incline_deg.is_finite() && incline_deg.abs() <= 30.0) {
            return Err(GeometryError::InclineOutOfRange(incline_deg));
        }
        Ok(Self {
            incline_deg,
            height_offset_mm,
        })
    }

    /// Unit normal of the belt surface (tilt about the pitch axis).
    pub fn normal(&self) -> Vector3<f64> {
        let theta = self.incline_deg.to_radians();
        Vector3::new(-theta.sin(), 0.0, theta.cos())
    }

    /// Signed distance of a lab-frame point to the plane. Negative means
    /// below the belt surface.
    pub fn signed_distance(&self, p: &Point3<f64>) -> f64 {
        self.normal().dot(&p.coords) - self.height_offset_mm
    }

    /// Same plane with a different incline (offset is incline-independent
    /// for a rigid treadmill frame).
    pub fn with_incline(&self, incline_deg: f64) -> Result<Self, GeometryError> {
        Self::new(incline_deg, self.height_offset_mm)
    }
}

/// Signed toe clearance in mm. Negative values are preserved: a flexible
/// outsole puts the anterior base below the calibrated plane during stance.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ToeClearance(pub f64);

impl ToeClearance {
    pub fn mm(self) -> f64 {
        self.0
    }
}

/// Minimum signed point-to-plane distance over the posed anterior sole.
pub fn toe_clearance(
    cloud: &SoleCloud,
    pose: &RigidTransform,
    plane: &GroundPlane,
) -> Result<ToeClearance, GeometryError> {
    let mut min_d = f64::INFINITY;
    for p in cloud.anterior_points() {
        let d = plane.signed_distance(&pose.apply(p));
        if d < min_d {
            min_d = d;
        }
    }
    if min_d.is_finite() {
        Ok(ToeClearance(min_d))
    } else {
        Err(GeometryError::EmptyAnteriorSet)
    }
}

const MIN_STATIC_SPAN_S: f64 = 0.5;
const MAX_STATIC_MARKER_RMS_MM: f64 = 1.0;

/// Calibrate the plane offset from a static pose of the unloaded shoe:
/// the offset is chosen so the minimum anterior clearance of the posed
/// cloud is exactly zero.
pub fn ground_plane_from_calibration(
    static_marker_frames: &[MarkerFrame],
    cloud: &SoleCloud,
    incline_deg: f64,
) -> Result<GroundPlane, GeometryError> {
    let span = match (static_marker_frames.first(), static_marker_frames.last()) {
        (Some(first), Some(last)) => last.t_s - first.t_s,
        _ => 0.0,
    };
    if span < MIN_STATIC_SPAN_S {
        return Err(GeometryError::StaticSpanTooShort(span));
    }

    // Mean marker positions; every cloud marker must be present and still.
    let mut mean_markers = Vec::new();
    for m in cloud.marker_refs() {
        let positions: Vec<Point3<f64>> = static_marker_frames
            .iter()
            .filter_map(|f| f.position(&m.label))
            .collect();
        if positions.len() < static_marker_frames.len() {
            return Err(GeometryError::RegistrationFailed(format!(
                "marker {} missing from static frames",
                m.label
            )));
        }
        let n = positions.len() as f64;
        let mean: Vector3<f64> = positions.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n;
        let rms = (positions
            .iter()
            .map(|p| (p.coords - mean).norm_squared())
            .sum::<f64>()
            / n)
            .sqrt();
        if rms >= MAX_STATIC_MARKER_RMS_MM {
            return Err(GeometryError::MarkersNotStationary {
                label: m.label.clone(),
                rms_mm: rms,
            });
        }
        mean_markers.push(LabeledPoint {
            label: m.label.clone(),
            position: Point3::from(mean),
        });
    }

    let fit = fit_rigid_transform(cloud.marker_refs(), &mean_markers)
        .map_err(|e| GeometryError::RegistrationFailed(e.to_string()))?;

    let plane0 = GroundPlane::new(incline_deg, 0.0)?;
    let min_d = toe_clearance(cloud, &fit.transform, &plane0)?;
    GroundPlane::new(incline_deg, min_d.mm())
}
