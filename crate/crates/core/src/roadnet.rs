//! Road network storage, geometric projection and network distances.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{haversine, point_segment_distance, Bounds, LatLng, LocalFrame};

/// Endpoint coordinates must agree with their node to this many degrees.
const ENDPOINT_TOLERANCE_DEG: f64 = 1e-6;
/// Distances closer than this are considered ties.
const TIE_EPS_M: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// A position on the road network at a point in time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPoint {
    pub edge: EdgeId,
    pub ratio: f64,
    pub t: i64,
}

impl MatchedPoint {
    pub fn new(edge: EdgeId, ratio: f64, t: i64) -> Self {
        Self { edge, ratio, t }
    }
}

/// Whether shortest paths may traverse edges against their direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouteMode {
    #[default]
    Undirected,
    Directed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSpec {
    pub id: EdgeId,
    pub start: NodeId,
    pub end: NodeId,
    /// Empty means a straight line between the two nodes.
    pub polyline: Vec<LatLng>,
}

#[derive(Debug, Clone)]
pub struct Edge {
    pub id: EdgeId,
    /// Dense node index.
    pub start: usize,
    /// Dense node index.
    pub end: usize,
    pub polyline: Vec<LatLng>,
    /// Meters, summed haversine over the polyline.
    pub length: f64,
    cumulative: Vec<f64>,
}

/// Nearest point of one edge to a query location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Dense edge index (edges are indexed in ascending id order).
    pub edge: usize,
    pub ratio: f64,
    pub distance: f64,
}

/// Position on the network by dense edge index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgePosition {
    pub edge: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone)]
struct SpatialIndex {
    frame: LocalFrame,
    cell: f64,
    x0: f64,
    y0: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<usize>>,
}

impl SpatialIndex {
    fn build(edges: &[Edge], cell: f64) -> Self {
        let all = edges.iter().flat_map(|e| e.polyline.iter().copied());
        let origin = Bounds::from_points(all).map(|b| b.south_west()).unwrap_or(LatLng::new(0.0, 0.0));
        let frame = LocalFrame::new(origin);
        let xy: Vec<Vec<(f64, f64)>> =
            edges.iter().map(|e| e.polyline.iter().map(|p| frame.to_xy(*p)).collect()).collect();
        let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(x, y) in xy.iter().flatten() {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, y0, x1, y1) = (0.0, 0.0, 0.0, 0.0);
        }
        let cols = ((x1 - x0) / cell).floor() as usize + 1;
        let rows = ((y1 - y0) / cell).floor() as usize + 1;
        let mut index = SpatialIndex { frame, cell, x0, y0, cols, rows, buckets: vec![Vec::new(); cols * rows] };
        for (e, pts) in xy.iter().enumerate() {
            for w in pts.windows(2) {
                let (c0, r0) = index.cell_of(w[0].0.min(w[1].0), w[0].1.min(w[1].1));
                let (c1, r1) = index.cell_of(w[0].0.max(w[1].0), w[0].1.max(w[1].1));
                for r in r0..=r1 {
                    for c in c0..=c1 {
                        let bucket = &mut index.buckets[r * cols + c];
                        if bucket.last() != Some(&e) {
                            bucket.push(e);
                        }
                    }
                }
            }
        }
        index
    }

    fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let c = ((x - self.x0) / self.cell).floor().clamp(0.0, (self.cols - 1) as f64) as usize;
        let r = ((y - self.y0) / self.cell).floor().clamp(0.0, (self.rows - 1) as f64) as usize;
        (c, r)
    }

    /// Edges possibly within `radius` of `p`, ascending and deduplicated.
    fn candidates(&self, p: LatLng, radius: f64) -> Vec<usize> {
        // Frame distortion away from the origin stays far below this margin.
        let r = radius * 1.01 + 1.0;
        let (x, y) = self.frame.to_xy(p);
        let (xmax, ymax) = (self.x0 + self.cols as f64 * self.cell, self.y0 + self.rows as f64 * self.cell);
        if x + r < self.x0 || y + r < self.y0 || x - r > xmax || y - r > ymax {
            return Vec::new();
        }
        let (c0, r0) = self.cell_of(x - r, y - r);
        let (c1, r1) = self.cell_of(x + r, y + r);
        let mut out = Vec::new();
        for row in r0..=r1 {
            for col in c0..=c1 {
                out.extend_from_slice(&self.buckets[row * self.cols + col]);
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    fn extent(&self) -> f64 {
        (self.cols as f64).hypot(self.rows as f64) * self.cell
    }
}

/// Directed road graph with geometry, an edge bucket index and shortest-path queries.
///
/// Immutable after construction.
#[derive(Debug, Clone)]
pub struct RoadNetwork {
    nodes: Vec<(NodeId, LatLng)>,
    node_index: HashMap<NodeId, usize>,
    edges: Vec<Edge>,
    edge_index: HashMap<EdgeId, usize>,
    outgoing: Vec<Vec<usize>>,
    incident: Vec<Vec<usize>>,
    index: SpatialIndex,
    bounds: Bounds,
}

pub const DEFAULT_CELL_SIZE_M: f64 = 50.0;

impl RoadNetwork {
    pub fn new(nodes: Vec<(NodeId, LatLng)>, edges: Vec<EdgeSpec>) -> Result<Self> {
        Self::with_cell_size(nodes, edges, DEFAULT_CELL_SIZE_M)
    }

    pub fn with_cell_size(mut nodes: Vec<(NodeId, LatLng)>, mut specs: Vec<EdgeSpec>, cell: f64) -> Result<Self> {
        if cell.is_nan() || cell <= 0.0 {
            return Err(Error::Config(format!("index cell size must be positive, got {cell}")));
        }
        nodes.sort_by_key(|n| n.0);
        let mut node_index = HashMap::with_capacity(nodes.len());
        for (i, (id, _)) in nodes.iter().enumerate() {
            if node_index.insert(*id, i).is_some() {
                return Err(Error::Integrity(format!("duplicate node id {id}")));
            }
        }
        specs.sort_by_key(|e| e.id);
        let mut edges = Vec::with_capacity(specs.len());
        let mut edge_index = HashMap::with_capacity(specs.len());
        for spec in specs {
            let start = *node_index
                .get(&spec.start)
                .ok_or_else(|| Error::Integrity(format!("edge {} references missing node {}", spec.id, spec.start)))?;
            let end = *node_index
                .get(&spec.end)
                .ok_or_else(|| Error::Integrity(format!("edge {} references missing node {}", spec.id, spec.end)))?;
            let (a, b) = (nodes[start].1, nodes[end].1);
            let polyline = if spec.polyline.is_empty() { vec![a, b] } else { spec.polyline };
            if polyline.len() < 2 {
                return Err(Error::Integrity(format!("edge {} polyline has fewer than 2 points", spec.id)));
            }
            let close = |p: LatLng, q: LatLng| {
                (p.lat - q.lat).abs() <= ENDPOINT_TOLERANCE_DEG && (p.lng - q.lng).abs() <= ENDPOINT_TOLERANCE_DEG
            };
            if !close(polyline[0], a) || !close(polyline[polyline.len() - 1], b) {
                return Err(Error::Integrity(format!("edge {} polyline endpoints do not match its nodes", spec.id)));
            }
            let mut cumulative = Vec::with_capacity(polyline.len());
            let mut acc = 0.0;
            cumulative.push(0.0);
            for w in polyline.windows(2) {
                acc += haversine(w[0], w[1]);
                cumulative.push(acc);
            }
            if acc.is_nan() || acc <= 0.0 {
                return Err(Error::Integrity(format!("edge {} has zero length", spec.id)));
            }
            if edge_index.insert(spec.id, edges.len()).is_some() {
                return Err(Error::Integrity(format!("duplicate edge id {}", spec.id)));
            }
            edges.push(Edge { id: spec.id, start, end, polyline, length: acc, cumulative });
        }
        let mut outgoing = vec![Vec::new(); nodes.len()];
        let mut incident = vec![Vec::new(); nodes.len()];
        for (i, e) in edges.iter().enumerate() {
            outgoing[e.start].push(i);
            incident[e.start].push(i);
            if e.end != e.start {
                incident[e.end].push(i);
            }
        }
        let bounds = Bounds::from_points(
            nodes.iter().map(|n| n.1).chain(edges.iter().flat_map(|e| e.polyline.iter().copied())),
        )
        .unwrap_or(Bounds { lat_min: 0.0, lat_max: 0.0, lng_min: 0.0, lng_max: 0.0 });
        let index = SpatialIndex::build(&edges, cell);
        Ok(Self { nodes, node_index, edges, edge_index, outgoing, incident, index, bounds })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, idx: usize) -> &Edge {
        &self.edges[idx]
    }

    pub fn nodes(&self) -> &[(NodeId, LatLng)] {
        &self.nodes
    }

    pub fn node_position(&self, idx: usize) -> LatLng {
        self.nodes[idx].1
    }

    pub fn node_idx(&self, id: NodeId) -> Option<usize> {
        self.node_index.get(&id).copied()
    }

    pub fn edge_idx(&self, id: EdgeId) -> Result<usize> {
        self.edge_index.get(&id).copied().ok_or(Error::Lookup { kind: "edge", id: id.0 })
    }

    pub fn outgoing(&self, node: usize) -> &[usize] {
        &self.outgoing[node]
    }

    pub fn bounds(&self) -> Bounds {
        self.bounds
    }

    /// Coordinate at arc-length fraction `ratio` along an edge.
    pub fn point_on_segment(&self, edge: EdgeId, ratio: f64) -> Result<LatLng> {
        let idx = self.edge_idx(edge)?;
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::Contract(format!("ratio {ratio} outside [0, 1]")));
        }
        Ok(self.point_at(idx, ratio))
    }

    /// Same as [`point_on_segment`](Self::point_on_segment) by dense index; `ratio` is clamped.
    pub fn point_at(&self, idx: usize, ratio: f64) -> LatLng {
        let e = &self.edges[idx];
        let target = ratio.clamp(0.0, 1.0) * e.length;
        let piece = match e.cumulative.binary_search_by(|c| c.total_cmp(&target)) {
            Ok(i) => i.min(e.polyline.len() - 2),
            Err(i) => i.saturating_sub(1).min(e.polyline.len() - 2),
        };
        let piece_len = e.cumulative[piece + 1] - e.cumulative[piece];
        let frac = if piece_len > 0.0 { ((target - e.cumulative[piece]) / piece_len).clamp(0.0, 1.0) } else { 0.0 };
        e.polyline[piece].lerp(e.polyline[piece + 1], frac)
    }

    /// Distance from `p` to edge `idx` and the arc-length ratio of the foot point.
    pub fn edge_projection(&self, idx: usize, p: LatLng) -> Projection {
        let e = &self.edges[idx];
        let mut best = (f64::INFINITY, 0.0);
        for (k, w) in e.polyline.windows(2).enumerate() {
            let (d, t) = point_segment_distance(p, w[0], w[1]);
            if d < best.0 {
                let along = e.cumulative[k] + t * (e.cumulative[k + 1] - e.cumulative[k]);
                best = (d, along / e.length);
            }
        }
        Projection { edge: idx, ratio: best.1.clamp(0.0, 1.0), distance: best.0 }
    }

    /// All edges strictly closer than `radius`, nearest first (ties by id).
    pub fn nearby(&self, p: LatLng, radius: f64) -> Vec<Projection> {
        let mut out: Vec<Projection> = self
            .index
            .candidates(p, radius)
            .into_iter()
            .map(|e| self.edge_projection(e, p))
            .filter(|pr| pr.distance < radius)
            .collect();
        out.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.edge.cmp(&b.edge)));
        out
    }

    pub fn nearby_segments(&self, lat: f64, lng: f64, radius: f64) -> Vec<(EdgeId, f64)> {
        self.nearby(LatLng::new(lat, lng), radius).into_iter().map(|p| (self.edges[p.edge].id, p.distance)).collect()
    }

    /// Nearest edge to `p`. Distances within 1e-9 m of the minimum tie and
    /// resolve to the smallest edge id. `None` only for an empty network.
    pub fn project(&self, p: LatLng) -> Option<Projection> {
        if self.edges.is_empty() {
            return None;
        }
        let mut radius = self.index.cell;
        let limit = self.index.extent() + haversine(p, self.bounds.south_west()) + 1.0;
        loop {
            let found = self.nearby(p, radius + TIE_EPS_M);
            if !found.is_empty() {
                return Some(pick_nearest(&found));
            }
            if radius > limit {
                let all: Vec<Projection> = (0..self.edges.len()).map(|e| self.edge_projection(e, p)).collect();
                return Some(pick_nearest(&all));
            }
            radius *= 2.0;
        }
    }

    pub fn project_point(&self, lat: f64, lng: f64) -> Option<(EdgeId, f64, f64)> {
        self.project(LatLng::new(lat, lng)).map(|p| (self.edges[p.edge].id, p.ratio, p.distance))
    }

    /// Shortest network distance between two on-road positions, ignoring edge
    /// direction. `Ok(None)` means unreachable.
    pub fn rn_dist(&self, a: &MatchedPoint, b: &MatchedPoint) -> Result<Option<f64>> {
        self.rn_dist_with(a, b, RouteMode::Undirected)
    }

    pub fn rn_dist_with(&self, a: &MatchedPoint, b: &MatchedPoint, mode: RouteMode) -> Result<Option<f64>> {
        let pa = EdgePosition { edge: self.edge_idx(a.edge)?, ratio: a.ratio };
        let pb = EdgePosition { edge: self.edge_idx(b.edge)?, ratio: b.ratio };
        Ok(match mode {
            RouteMode::Undirected => self.undirected_distance(pa, pb),
            RouteMode::Directed => self.directed_distances(pa, &[pb], f64::INFINITY)[0],
        })
    }

    pub fn undirected_distance(&self, a: EdgePosition, b: EdgePosition) -> Option<f64> {
        let (ea, eb) = (&self.edges[a.edge], &self.edges[b.edge]);
        let direct = (a.edge == b.edge).then(|| (a.ratio - b.ratio).abs() * ea.length);
        if direct == Some(0.0) {
            return direct;
        }
        let sources = [(ea.start, a.ratio * ea.length), (ea.end, (1.0 - a.ratio) * ea.length)];
        let targets = [eb.start, eb.end];
        let bound = direct.unwrap_or(f64::INFINITY);
        let d = self.dijkstra(&sources, RouteMode::Undirected, &targets, bound);
        let via = [d[0].map(|x| x + b.ratio * eb.length), d[1].map(|x| x + (1.0 - b.ratio) * eb.length)];
        direct.into_iter().chain(via.into_iter().flatten()).min_by(f64::total_cmp)
    }

    /// Driving distances from `from` to each target, following edge
    /// directions. Routes longer than `limit` are reported unreachable.
    pub fn directed_distances(&self, from: EdgePosition, to: &[EdgePosition], limit: f64) -> Vec<Option<f64>> {
        let ea = &self.edges[from.edge];
        let rest = (1.0 - from.ratio) * ea.length;
        let targets: Vec<usize> = to.iter().map(|p| self.edges[p.edge].start).collect();
        let node_dist = self.dijkstra(&[(ea.end, rest)], RouteMode::Directed, &targets, limit);
        to.iter()
            .zip(node_dist)
            .map(|(p, nd)| {
                let eb = &self.edges[p.edge];
                let d = if p.edge == from.edge && p.ratio >= from.ratio {
                    Some((p.ratio - from.ratio) * ea.length)
                } else {
                    nd.map(|x| x + p.ratio * eb.length)
                };
                d.filter(|d| *d <= limit)
            })
            .collect()
    }

    /// Multi-source Dijkstra over nodes. Stops once every target is settled or
    /// the frontier exceeds `limit`.
    fn dijkstra(&self, sources: &[(usize, f64)], mode: RouteMode, targets: &[usize], limit: f64) -> Vec<Option<f64>> {
        let mut dist: HashMap<usize, f64> = HashMap::new();
        let mut heap = BinaryHeap::new();
        for &(n, d) in sources {
            if dist.get(&n).is_none_or(|&old| d < old) {
                dist.insert(n, d);
                heap.push(Reverse(HeapEntry(d, n)));
            }
        }
        let mut remaining: Vec<usize> = targets.to_vec();
        remaining.sort_unstable();
        remaining.dedup();
        let mut settled: HashMap<usize, f64> = HashMap::new();
        while let Some(Reverse(HeapEntry(d, u))) = heap.pop() {
            if settled.contains_key(&u) || d > dist[&u] {
                continue;
            }
            if d > limit {
                break;
            }
            settled.insert(u, d);
            if let Ok(pos) = remaining.binary_search(&u) {
                remaining.remove(pos);
                if remaining.is_empty() {
                    break;
                }
            }
            let adj: &[usize] = match mode {
                RouteMode::Directed => &self.outgoing[u],
                RouteMode::Undirected => &self.incident[u],
            };
            for &e in adj {
                let edge = &self.edges[e];
                let v = if edge.start == u { edge.end } else { edge.start };
                let nd = d + edge.length;
                if dist.get(&v).is_none_or(|&old| nd < old) {
                    dist.insert(v, nd);
                    heap.push(Reverse(HeapEntry(nd, v)));
                }
            }
        }
        targets.iter().map(|t| settled.get(t).copied()).collect()
    }
}

fn pick_nearest(found: &[Projection]) -> Projection {
    let min = found.iter().map(|p| p.distance).fold(f64::INFINITY, f64::min);
    *found
        .iter()
        .filter(|p| p.distance <= min + TIE_EPS_M)
        .min_by_key(|p| p.edge)
        .expect("non-empty candidate list")
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapEntry(f64, usize);

impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

#[derive(Debug, Deserialize)]
struct NodeRow {
    node_id: u64,
    lat: f64,
    lng: f64,
}

#[derive(Debug, Deserialize)]
struct EdgeRow {
    edge_id: u64,
    start_node: u64,
    end_node: u64,
    polyline: String,
}

fn csv_error(err: csv::Error) -> Error {
    let line = err.position().map(|p| p.line()).unwrap_or(0);
    Error::Parse { line, message: err.to_string() }
}

fn check_header(reader: &mut csv::Reader<impl Read>, expected: &[&str]) -> Result<()> {
    let header = reader.headers().map_err(csv_error)?;
    if header.iter().map(str::trim).ne(expected.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{}`, found `{}`", expected.join(","), header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    Ok(())
}

fn parse_polyline(text: &str, line: u64) -> Result<Vec<LatLng>> {
    let text = text.trim();
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(';')
        .map(|pair| {
            let mut it = pair.split_whitespace().map(str::parse::<f64>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(lat)), Some(Ok(lng)), None) => Ok(LatLng::new(lat, lng)),
                _ => Err(Error::Parse { line, message: format!("bad polyline point `{pair}`") }),
            }
        })
        .collect()
}

/// Reads the nodes and edges CSV files. Edge lengths are recomputed from polylines.
pub fn load_road_network(nodes_source: impl Read, edges_source: impl Read) -> Result<RoadNetwork> {
    let mut nodes_reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(nodes_source);
    check_header(&mut nodes_reader, &["node_id", "lat", "lng"])?;
    let mut nodes = Vec::new();
    for row in nodes_reader.deserialize::<NodeRow>() {
        let row = row.map_err(csv_error)?;
        nodes.push((NodeId(row.node_id), LatLng::new(row.lat, row.lng)));
    }
    let mut edges_reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(edges_source);
    check_header(&mut edges_reader, &["edge_id", "start_node", "end_node", "polyline"])?;
    let mut edges = Vec::new();
    let mut record = csv::StringRecord::new();
    let headers = edges_reader.headers().map_err(csv_error)?.clone();
    while edges_reader.read_record(&mut record).map_err(csv_error)? {
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row: EdgeRow = record.deserialize(Some(&headers)).map_err(csv_error)?;
        edges.push(EdgeSpec {
            id: EdgeId(row.edge_id),
            start: NodeId(row.start_node),
            end: NodeId(row.end_node),
            polyline: parse_polyline(&row.polyline, line)?,
        });
    }
    RoadNetwork::new(nodes, edges)
}

pub fn write_nodes_csv(net: &RoadNetwork, mut out: impl Write) -> Result<()> {
    writeln!(out, "node_id,lat,lng")?;
    for (id, p) in &net.nodes {
        writeln!(out, "{},{},{}", id, p.lat, p.lng)?;
    }
    Ok(())
}

pub fn write_edges_csv(net: &RoadNetwork, mut out: impl Write) -> Result<()> {
    writeln!(out, "edge_id,start_node,end_node,polyline")?;
    for e in &net.edges {
        let poly: Vec<String> = e.polyline.iter().map(|p| format!("{} {}", p.lat, p.lng)).collect();
        writeln!(out, "{},{},{},{}", e.id, net.nodes[e.start].0, net.nodes[e.end].0, poly.join(";"))?;
    }
    Ok(())
}
