//! Synthetic Manhattan-grid city with random-walk vehicles, for tests and demos.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{LatLng, LocalFrame};
use crate::roadnet::{EdgeId, EdgeSpec, MatchedPoint, NodeId, RoadNetwork};
use crate::trajectory::{GpsPoint, MapMatchedTrajectory, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Intersections per column.
    pub rows: usize,
    /// Intersections per row.
    pub cols: usize,
    /// Block length in meters.
    pub spacing: f64,
    pub origin_lat: f64,
    pub origin_lng: f64,
    pub trajectories: usize,
    /// GPS noise standard deviation per axis, meters.
    pub noise: f64,
    /// Set from the run configuration, not read from config files.
    #[serde(skip)]
    pub epsilon: i64,
    pub min_duration: i64,
    pub max_duration: i64,
    /// Cruise speed range, m/s.
    pub min_speed: f64,
    pub max_speed: f64,
    /// Start times fall in the week following this epoch second.
    pub start_epoch: i64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            rows: 10,
            cols: 10,
            spacing: 200.0,
            origin_lat: 30.65,
            origin_lng: 104.05,
            trajectories: 100,
            noise: 0.0,
            epsilon: 15,
            min_duration: 300,
            max_duration: 600,
            min_speed: 6.0,
            max_speed: 14.0,
            start_epoch: 1_478_304_000,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows < 2 || self.cols < 2 {
            return Err(Error::Config(format!("synthetic grid must be at least 2x2, got {}x{}", self.rows, self.cols)));
        }
        if !(self.spacing > 0.0 && self.noise >= 0.0 && self.min_speed > 0.0 && self.max_speed >= self.min_speed) {
            return Err(Error::Config("synthetic spacing and speeds must be positive, noise non-negative".into()));
        }
        if self.epsilon <= 0 || self.min_duration < self.epsilon || self.max_duration < self.min_duration {
            return Err(Error::Config("synthetic durations must satisfy epsilon <= min <= max".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTrajectory {
    /// Observed (noisy) trace at the target interval.
    pub dense: Trajectory,
    /// Position the vehicle actually had at each timestamp.
    pub truth: MapMatchedTrajectory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub nodes: Vec<(NodeId, LatLng)>,
    pub edges: Vec<EdgeSpec>,
    pub trajectories: Vec<SynthTrajectory>,
}

impl SynthData {
    pub fn network(&self) -> Result<RoadNetwork> {
        RoadNetwork::new(self.nodes.clone(), self.edges.clone())
    }
}

/// Grid nodes `1..=rows·cols` (row-major from the south-west corner) and a
/// directed edge each way along every block.
pub fn grid_network(cfg: &SynthConfig) -> (Vec<(NodeId, LatLng)>, Vec<EdgeSpec>) {
    let frame = LocalFrame::new(LatLng::new(cfg.origin_lat, cfg.origin_lng));
    let node = |r: usize, c: usize| NodeId((r * cfg.cols + c + 1) as u64);
    let mut nodes = Vec::with_capacity(cfg.rows * cfg.cols);
    for r in 0..cfg.rows {
        for c in 0..cfg.cols {
            nodes.push((node(r, c), frame.from_xy(c as f64 * cfg.spacing, r as f64 * cfg.spacing)));
        }
    }
    let mut edges = Vec::new();
    let mut link = |a: NodeId, b: NodeId| {
        for (s, e) in [(a, b), (b, a)] {
            edges.push(EdgeSpec { id: EdgeId(edges.len() as u64 + 1), start: s, end: e, polyline: vec![] });
        }
    };
    for r in 0..cfg.rows {
        for c in 0..cfg.cols {
            if c + 1 < cfg.cols {
                link(node(r, c), node(r, c + 1));
            }
            if r + 1 < cfg.rows {
                link(node(r, c), node(r + 1, c));
            }
        }
    }
    (nodes, edges)
}

/// Network plus `cfg.trajectories` random walks; fully determined by `cfg.seed`.
pub fn synthesize(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let (nodes, edges) = grid_network(cfg);
    let net = RoadNetwork::new(nodes.clone(), edges.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = (cfg.noise > 0.0).then(|| Normal::new(0.0, cfg.noise).expect("finite noise"));
    let width = cfg.trajectories.max(1).to_string().len();
    let trajectories = (0..cfg.trajectories)
        .map(|k| {
            let id = format!("syn-{k:0width$}");
            random_walk(&net, cfg, &id, &mut rng, noise.as_ref())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthData { nodes, edges, trajectories })
}

fn random_walk(
    net: &RoadNetwork,
    cfg: &SynthConfig,
    id: &str,
    rng: &mut ChaCha8Rng,
    noise: Option<&Normal<f64>>,
) -> Result<SynthTrajectory> {
    let steps = rng.random_range(cfg.min_duration / cfg.epsilon..=cfg.max_duration / cfg.epsilon) as usize;
    let start = cfg.start_epoch + rng.random_range(0..7 * 86_400 / cfg.epsilon) * cfg.epsilon;
    let cruise = rng.random_range(cfg.min_speed..=cfg.max_speed);
    let mut edge = rng.random_range(0..net.edge_count());
    let mut ratio = rng.random_range(0.05..0.95);
    let mut points = Vec::with_capacity(steps + 1);
    let mut truth = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = start + k as i64 * cfg.epsilon;
        let mut p = net.point_at(edge, ratio);
        if let Some(n) = noise {
            let frame = LocalFrame::new(p);
            p = frame.from_xy(n.sample(rng), n.sample(rng));
        }
        points.push(GpsPoint::new(p.lat, p.lng, t));
        truth.push(MatchedPoint::new(net.edge(edge).id, ratio, t));
        let mut left = cruise * rng.random_range(0.8..1.2) * cfg.epsilon as f64;
        loop {
            let len = net.edge(edge).length;
            let room = (1.0 - ratio) * len;
            if left < room {
                ratio += left / len;
                break;
            }
            left -= room;
            edge = next_edge(net, edge, rng);
            ratio = 0.0;
        }
    }
    let mut dense = Trajectory::new(id, points)?;
    dense.declared_interval = Some(cfg.epsilon);
    Ok(SynthTrajectory { dense, truth: MapMatchedTrajectory::new(truth, cfg.epsilon)? })
}

/// Random outgoing edge at the end of `edge`, avoiding an immediate U-turn
/// unless the node is a dead end.
fn next_edge(net: &RoadNetwork, edge: usize, rng: &mut ChaCha8Rng) -> usize {
    let e = net.edge(edge);
    let out = net.outgoing(e.end);
    let forward: Vec<usize> = out.iter().copied().filter(|&o| net.edge(o).end != e.start).collect();
    let pool = if forward.is_empty() { out } else { &forward[..] };
    *pool.choose(rng).expect("grid nodes always have an outgoing edge")
}
