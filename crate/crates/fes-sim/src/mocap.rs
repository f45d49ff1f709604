//! Marker-frame streams: labelled 3D marker positions sampled at 100 Hz,
//! with CSV serialization (`t_s,<label>_x_mm,<label>_y_mm,<label>_z_mm,...`).
//! A missing marker is an empty cell triple and reads back as invalid.

use std::io;
use std::path::Path;

use nalgebra::Point3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MocapError {
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad marker header column {0:?}")]
    BadHeader(String),
    #[error("frame timestamps not strictly increasing at row {0}")]
    NonMonotonicTime(usize),
    #[error("bad float {value:?} in column {column}")]
    BadFloat { value: String, column: String },
}

/// One motion-capture sample: a timestamp plus labelled marker positions.
/// Insertion order is preserved so CSV round-trips keep their column layout.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerFrame {
    pub t_s: f64,
    markers: Vec<(String, Option<Point3<f64>>)>,
}

impl MarkerFrame {
    pub fn new(t_s: f64) -> Self {
        Self {
            t_s,
            markers: Vec::new(),
        }
    }

    pub fn insert(&mut self, label: String, position: Point3<f64>) {
        self.set(label, Some(position));
    }

    pub fn set(&mut self, label: String, position: Option<Point3<f64>>) {
        if let Some(slot) = self.markers.iter_mut().find(|(l, _)| *l == label) {
            slot.1 = position;
        } else {
            self.markers.push((label, position));
        }
    }

    /// Position of a marker, `None` if absent or dropped out this frame.
    pub fn position(&self, label: &str) -> Option<Point3<f64>> {
        self.markers
            .iter()
            .find(|(l, _)| l == label)
            .and_then(|(_, p)| *p)
    }

    pub fn is_valid(&self, label: &str) -> bool {
        self.position(label).is_some()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.markers.iter().map(|(l, _)| l.as_str())
    }
}

/// Write frames in the wide CSV layout. Labels are taken from the first
/// frame; later frames may omit markers (empty cells) but not add new ones.
pub fn write_marker_frames(path: &Path, frames: &[MarkerFrame]) -> Result<(), MocapError> {
    let mut w = csv::Writer::from_path(path)?;
    let labels: Vec<String> = match frames.first() {
        Some(f) => f.labels().map(str::to_string).collect(),
        None => Vec::new(),
    };
    let mut header = vec!["t_s".to_string()];
    for l in &labels {
        header.push(format!("{l}_x_mm"));
        header.push(format!("{l}_y_mm"));
        header.push(format!("{l}_z_mm"));
    }
    w.write_record(&header)?;
    for f in frames {
        let mut rec = vec![f.t_s.to_string()];
        for l in &labels {
            match f.position(l) {
                Some(p) => {
                    rec.push(p.x.to_string());
                    rec.push(p.y.to_string());
                    rec.push(p.z.to_string());
                }
                None => {
                    rec.push(String::new());
                    rec.push(String::new());
                    rec.push(String::new());
                }
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_marker_frames(path: &Path) -> Result<Vec<MarkerFrame>, MocapError> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.len() < 1 || (headers.len() - 1) % 3 != 0 {
        return Err(MocapError::BadHeader(format!(
            "{} columns (want 1 + 3k)",
            headers.len()
        )));
    }
    let mut labels: Vec<String> = Vec::new();
    for (i, col) in headers.iter().enumerate() {
        if i == 0 {
            if col != "t_s" {
                return Err(MocapError::BadHeader(col.to_string()));
            }
            continue;
        }
        match (i - 1) % 3 {
            0 => match col.strip_suffix("_x_mm") {
                Some(label) => labels.push(label.to_string()),
                None => return Err(MocapError::BadHeader(col.to_string())),
            },
            1 if col.ends_with("_y_mm") => {}
            2 if col.ends_with("_z_mm") => {}
            _ => return Err(MocapError::BadHeader(col.to_string())),
        }
    }

    let parse = |value: &str, column: &str| -> Result<f64, MocapError> {
        value.parse::<f64>().map_err(|_| MocapError::BadFloat {
            value: value.to_string(),
            column: column.to_string(),
        })
    };

    let mut frames = Vec::new();
    let mut prev_t = f64::NEG_INFINITY;
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(MocapError::BadHeader(format!(
                "row {row} has {} fields, header has {}",
                rec.len(),
                headers.len()
            )));
        }
        let t = parse(&rec[0], "t_s")?;
        if t <= prev_t {
            return Err(MocapError::NonMonotonicTime(row));
        }
        prev_t = t;
        let mut frame = MarkerFrame::new(t);
        for (k, label) in labels.iter().enumerate() {
            let base = 1 + 3 * k;
            let cells = [&rec[base], &rec[base + 1], &rec[base + 2]];
            if cells.iter().all(|c| c.is_empty()) {
                frame.set(label.clone(), None);
            } else {
                let x = parse(cells[0], label)?;
                let y = parse(cells[1], label)?;
                let z = parse(cells[2], label)?;
                frame.insert(label.clone(), Point3::new(x, y, z));
            }
        }
        frames.push(frame);
    }
    Ok(frames)
}
