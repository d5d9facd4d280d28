//! Trajectory containers, sparsification, interval unification and JSONL files.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{haversine, Bounds, LatLng};
use crate::roadnet::{EdgeId, MatchedPoint};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpsPoint {
    pub lat: f64,
    pub lng: f64,
    /// Epoch seconds.
    pub t: i64,
}

impl GpsPoint {
    pub fn new(lat: f64, lng: f64, t: i64) -> Self {
        Self { lat, lng, t }
    }

    pub fn pos(&self) -> LatLng {
        LatLng::new(self.lat, self.lng)
    }
}

/// Timestamped GPS sequence with strictly increasing timestamps and at least two points.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: String,
    points: Vec<GpsPoint>,
    /// Constant sampling interval in seconds, `None` when irregular.
    pub declared_interval: Option<i64>,
}

impl Trajectory {
    pub fn new(id: impl Into<String>, points: Vec<GpsPoint>) -> Result<Self> {
        let id = id.into();
        if points.len() < 2 {
            return Err(Error::Integrity(format!("trajectory {id} has fewer than 2 points")));
        }
        if let Some(w) = points.windows(2).find(|w| w[1].t <= w[0].t) {
            return Err(Error::Integrity(format!("trajectory {id}: timestamps not increasing at t={}", w[1].t)));
        }
        let first_gap = points[1].t - points[0].t;
        let declared_interval = points.windows(2).all(|w| w[1].t - w[0].t == first_gap).then_some(first_gap);
        Ok(Self { id, points, declared_interval })
    }

    pub fn points(&self) -> &[GpsPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn start_time(&self) -> i64 {
        self.points[0].t
    }

    pub fn end_time(&self) -> i64 {
        self.points[self.points.len() - 1].t
    }

    pub fn duration(&self) -> i64 {
        self.end_time() - self.start_time()
    }
}

/// On-road trajectory at a constant interval.
#[derive(Debug, Clone, PartialEq)]
pub struct MapMatchedTrajectory {
    pub points: Vec<MatchedPoint>,
    pub interval: i64,
}

impl MapMatchedTrajectory {
    pub fn new(points: Vec<MatchedPoint>, interval: i64) -> Result<Self> {
        if points.windows(2).any(|w| w[1].t - w[0].t != interval) {
            return Err(Error::Integrity(format!("matched trajectory is not spaced at {interval}s")));
        }
        if let Some(p) = points.iter().find(|p| !(0.0..=1.0).contains(&p.ratio)) {
            return Err(Error::Integrity(format!("moving ratio {} outside [0, 1]", p.ratio)));
        }
        Ok(Self { points, interval })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Slot {
    Observed { lat: f64, lng: f64, t: i64 },
    Missing { t: i64 },
}

impl Slot {
    pub fn t(&self) -> i64 {
        match *self {
            Slot::Observed { t, .. } | Slot::Missing { t } => t,
        }
    }

    pub fn is_observed(&self) -> bool {
        matches!(self, Slot::Observed { .. })
    }
}

/// A sparse trajectory laid onto the target-interval timeline, with explicit
/// placeholders for the unobserved slots.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedTrajectory {
    pub slots: Vec<Slot>,
    pub target_interval: i64,
    pub source_interval: i64,
}

impl UnifiedTrajectory {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn observed_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_observed()).count()
    }
}

/// Keeps point 0, every `(interval / epsilon)`-th point, and the final point.
pub fn sparsify(dense: &Trajectory, interval: i64, epsilon: i64) -> Result<Trajectory> {
    if epsilon <= 0 || interval <= 0 || interval % epsilon != 0 {
        return Err(Error::Config(format!("sampling interval {interval}s is not a positive multiple of {epsilon}s")));
    }
    if dense.declared_interval != Some(epsilon) {
        return Err(Error::Config(format!("trajectory {} is not sampled every {epsilon}s", dense.id)));
    }
    if dense.duration() < interval {
        return Err(Error::Contract(format!("trajectory {} spans less than {interval}s", dense.id)));
    }
    let step = (interval / epsilon) as usize;
    let last = dense.len() - 1;
    let mut points: Vec<GpsPoint> = dense.points.iter().step_by(step).copied().collect();
    if !last.is_multiple_of(step) {
        points.push(dense.points[last]);
    }
    let mut out = Trajectory::new(dense.id.clone(), points)?;
    out.declared_interval = Some(interval);
    Ok(out)
}

/// Re-grids a sparse trajectory onto an `epsilon` timeline. Timestamps are
/// snapped to the nearest grid line; a point exactly halfway between grid
/// lines, or two points sharing a slot, is an alignment error.
pub fn unify_intervals(sparse: &Trajectory, epsilon: i64) -> Result<UnifiedTrajectory> {
    if epsilon <= 0 {
        return Err(Error::Config(format!("target interval must be positive, got {epsilon}")));
    }
    let t0 = sparse.start_time();
    let mut slot_of = Vec::with_capacity(sparse.len());
    for (index, p) in sparse.points.iter().enumerate() {
        let offset = p.t - t0;
        let k = (offset + epsilon / 2).div_euclid(epsilon);
        let residual = (offset - k * epsilon).abs();
        if 2 * residual >= epsilon && residual != 0 {
            return Err(Error::Alignment { index, t: p.t, interval: epsilon });
        }
        if slot_of.last().is_some_and(|&prev| prev >= k) {
            return Err(Error::Alignment { index, t: p.t, interval: epsilon });
        }
        slot_of.push(k);
    }
    let count = (*slot_of.last().expect("at least two points") + 1) as usize;
    let mut slots: Vec<Slot> = (0..count).map(|k| Slot::Missing { t: t0 + k as i64 * epsilon }).collect();
    for (p, &k) in sparse.points.iter().zip(&slot_of) {
        slots[k as usize] = Slot::Observed { lat: p.lat, lng: p.lng, t: t0 + k * epsilon };
    }
    let source_interval = sparse.declared_interval.unwrap_or_else(|| sparse.points[1].t - t0);
    Ok(UnifiedTrajectory { slots, target_interval: epsilon, source_interval })
}

/// Duration in seconds and travelled distance in kilometers.
pub fn movement_stats(traj: &Trajectory) -> (i64, f64) {
    let meters: f64 = traj.points.windows(2).map(|w| haversine(w[0].pos(), w[1].pos())).sum();
    (traj.duration(), meters / 1000.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub min_duration: i64,
    pub max_duration: i64,
    pub bounds: Option<Bounds>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { min_duration: 300, max_duration: 3600, bounds: None }
    }
}

/// Keeps trajectories lasting between 5 minutes and 1 hour (inclusive) that
/// lie entirely inside the configured bounds.
pub fn filter_trajectories(trajs: Vec<Trajectory>, cfg: &FilterConfig) -> Vec<Trajectory> {
    trajs
        .into_iter()
        .filter(|t| (cfg.min_duration..=cfg.max_duration).contains(&t.duration()))
        .filter(|t| cfg.bounds.is_none_or(|b| t.points.iter().all(|p| b.contains(p.pos()))))
        .collect()
}

/// One line of a trajectory JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub id: String,
    pub points: Vec<(f64, f64, i64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched: Option<Vec<(u64, f64, i64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval: Option<i64>,
}

impl TrajectoryRecord {
    pub fn from_trajectory(traj: &Trajectory) -> Self {
        Self {
            id: traj.id.clone(),
            points: traj.points.iter().map(|p| (p.lat, p.lng, p.t)).collect(),
            matched: None,
            interval: traj.declared_interval,
        }
    }

    pub fn with_matched(mut self, matched: &MapMatchedTrajectory) -> Self {
        self.matched = Some(matched.points.iter().map(|m| (m.edge.0, m.ratio, m.t)).collect());
        self
    }

    pub fn trajectory(&self) -> Result<Trajectory> {
        let points = self.points.iter().map(|&(lat, lng, t)| GpsPoint::new(lat, lng, t)).collect();
        let mut traj = Trajectory::new(self.id.clone(), points)?;
        if self.interval.is_some() {
            traj.declared_interval = self.interval;
        }
        Ok(traj)
    }

    pub fn matched_trajectory(&self) -> Result<Option<MapMatchedTrajectory>> {
        let Some(m) = &self.matched else { return Ok(None) };
        let points: Vec<MatchedPoint> = m.iter().map(|&(e, r, t)| MatchedPoint::new(EdgeId(e), r, t)).collect();
        let interval = if points.len() >= 2 { points[1].t - points[0].t } else { 0 };
        MapMatchedTrajectory::new(points, interval).map(Some)
    }
}

pub fn read_jsonl(reader: impl BufRead) -> Result<Vec<TrajectoryRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: i as u64 + 1, message: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<'a>(mut out: impl Write, records: impl IntoIterator<Item = &'a TrajectoryRecord>) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
