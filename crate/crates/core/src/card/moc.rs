//! Match-on-card fingerprint comparison.
//!
//! A deliberately small, deterministic minutiae matcher: the point is a
//! reproducible decision procedure the card can run, not biometric
//! fidelity. Pairing is greedy nearest-first over integer distances, so
//! the same probe and template always produce the same score on any
//! platform.

use crate::encoding::{RecordBuilder, RecordView};
use crate::error::Error;
use crate::Result;

pub const GRID_SIZE: u16 = 500;
pub const MAX_MINUTIAE: usize = 128;
pub const POSITION_TOLERANCE: i32 = 8;
pub const ANGLE_TOLERANCE: i32 = 20;
pub const DEFAULT_THRESHOLD: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Minutia {
    pub x: u16,
    pub y: u16,
    pub angle: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintTemplate {
    pub minutiae: Vec<Minutia>,
    pub quality: u8,
}

impl FingerprintTemplate {
    pub fn new(minutiae: Vec<Minutia>, quality: u8) -> Result<Self> {
        if minutiae.len() > MAX_MINUTIAE {
            return Err(Error::RequestMalformed(format!(
                "template holds {} minutiae, limit is {MAX_MINUTIAE}",
                minutiae.len()
            )));
        }
        if quality > 100 {
            return Err(Error::RequestMalformed(format!("quality {quality} exceeds 100")));
        }
        for (idx, m) in minutiae.iter().enumerate() {
            if m.x >= GRID_SIZE || m.y >= GRID_SIZE || m.angle >= 360 {
                return Err(Error::RequestMalformed(format!(
                    "minutia {idx} out of range: ({}, {}, {})",
                    m.x, m.y, m.angle
                )));
            }
        }
        Ok(Self { minutiae, quality })
    }

    pub fn empty() -> Self {
        Self { minutiae: Vec::new(), quality: 0 }
    }

    pub fn encode(&self) -> Vec<u8> {
        let items: Vec<Vec<u8>> = self
            .minutiae
            .iter()
            .map(|m| {
                RecordBuilder::new()
                    .u64("angle", u64::from(m.angle))
                    .u64("x", u64::from(m.x))
                    .u64("y", u64::from(m.y))
                    .finish()
            })
            .collect();
        RecordBuilder::new()
            .list("minutiae", &items)
            .u64("quality", u64::from(self.quality))
            .finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let view = RecordView::parse(bytes)?;
        let mut minutiae = Vec::new();
        for item in view.list("minutiae")? {
            let m = RecordView::parse(&item)?;
            let field = |name: &str, max: u64| -> Result<u16> {
                let value = m.u64(name)?;
                if value >= max {
                    return Err(Error::MalformedEncoding(format!("{name} {value} out of range")));
                }
                Ok(value as u16)
            };
            minutiae.push(Minutia {
                x: field("x", u64::from(GRID_SIZE))?,
                y: field("y", u64::from(GRID_SIZE))?,
                angle: field("angle", 360)?,
            });
        }
        let quality = view.u64("quality")?;
        if quality > 100 {
            return Err(Error::MalformedEncoding(format!("quality {quality} exceeds 100")));
        }
        Self::new(minutiae, quality as u8)
    }
}

/// Smallest rotation between two angles in degrees, always 0..=180.
fn angle_difference(a: u16, b: u16) -> i32 {
    let raw = (i32::from(a) - i32::from(b)).rem_euclid(360);
    raw.min(360 - raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Candidate {
    distance_sq: i32,
    angle_diff: i32,
    probe_idx: usize,
    enrolled_idx: usize,
}

/// Score in [0, 1]: matched pairs over the larger template size. Pairing
/// is greedy over candidates sorted by squared distance, then angle
/// difference, then index order, which makes ties deterministic.
pub fn match_score(probe: &FingerprintTemplate, enrolled: &FingerprintTemplate) -> f64 {
    let mut candidates = Vec::new();
    for (pi, p) in probe.minutiae.iter().enumerate() {
        for (ei, e) in enrolled.minutiae.iter().enumerate() {
            let dx = i32::from(p.x) - i32::from(e.x);
            let dy = i32::from(p.y) - i32::from(e.y);
            if dx.abs() > POSITION_TOLERANCE || dy.abs() > POSITION_TOLERANCE {
                continue;
            }
            let angle_diff = angle_difference(p.angle, e.angle);
            if angle_diff > ANGLE_TOLERANCE {
                continue;
            }
            candidates.push(Candidate {
                distance_sq: dx * dx + dy * dy,
                angle_diff,
                probe_idx: pi,
                enrolled_idx: ei,
            });
        }
    }
    candidates.sort_by_key(|c| (c.distance_sq, c.angle_diff, c.probe_idx, c.enrolled_idx));
    let mut probe_used = vec![false; probe.minutiae.len()];
    let mut enrolled_used = vec![false; enrolled.minutiae.len()];
    let mut matched = 0usize;
    for c in candidates {
        if !probe_used[c.probe_idx] && !enrolled_used[c.enrolled_idx] {
            probe_used[c.probe_idx] = true;
            enrolled_used[c.enrolled_idx] = true;
            matched += 1;
        }
    }
    let denom = probe.minutiae.len().max(enrolled.minutiae.len()).max(1);
    matched as f64 / denom as f64
}

/// The card-resident matcher state.
#[derive(Debug, Clone, PartialEq)]
pub struct MocApplet {
    pub template: FingerprintTemplate,
    pub threshold: f64,
}

impl MocApplet {
    pub fn new(template: FingerprintTemplate, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(Error::RequestMalformed(format!(
                "match threshold must lie in (0, 1], got {threshold}"
            )));
        }
        Ok(Self { template, threshold })
    }

    pub fn matches(&self, probe: &FingerprintTemplate) -> (bool, f64) {
        let score = match_score(probe, &self.template);
        (score >= self.threshold, score)
    }
}
