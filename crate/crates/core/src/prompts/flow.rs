//! Regional traffic-flow grid and its convolutional road-condition encoder.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{RowMix, Tape, Unary, Var};
use crate::error::{Error, Result};
use crate::geo::{Bounds, LatLng};
use crate::params::{gaussian, Mat, ParamGroup, ParamId, ParamStore};
use crate::trajectory::Trajectory;

/// Grid geometry: `rows` latitude bands × `cols` longitude bands × `slices` time-of-day buckets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub bounds: Bounds,
    pub rows: usize,
    pub cols: usize,
    pub slices: usize,
}

impl GridMeta {
    pub fn new(bounds: Bounds, rows: usize, cols: usize, slices: usize) -> Result<Self> {
        if bounds.is_degenerate() || rows == 0 || cols == 0 || slices == 0 {
            return Err(Error::Config(format!("invalid flow grid {rows}x{cols}x{slices} over {bounds:?}")));
        }
        Ok(Self { bounds, rows, cols, slices })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols * self.slices
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.cols + j) * self.slices + k
    }

    pub fn unflat(&self, idx: usize) -> (usize, usize, usize) {
        (idx / (self.cols * self.slices), (idx / self.slices) % self.cols, idx % self.slices)
    }

    /// Time-of-day bucket; with 24 slices this is the hour of day.
    pub fn time_slice(&self, t: i64) -> usize {
        let secs = t.rem_euclid(86_400) as usize;
        (secs * self.slices / 86_400).min(self.slices - 1)
    }

    /// Cell of a point; the flag reports whether the point had to be clamped.
    pub fn locate(&self, p: LatLng, t: i64) -> (usize, bool) {
        let b = &self.bounds;
        let fi = (p.lat - b.lat_min) / (b.lat_max - b.lat_min) * self.rows as f64;
        let fj = (p.lng - b.lng_min) / (b.lng_max - b.lng_min) * self.cols as f64;
        let inside = b.contains(p);
        let i = (fi.floor().max(0.0) as usize).min(self.rows - 1);
        let j = (fj.floor().max(0.0) as usize).min(self.cols - 1);
        (self.flat(i, j, self.time_slice(t)), !inside)
    }
}

/// Point counts per (lat band, lng band, time slice).
#[derive(Debug, Clone, PartialEq)]
pub struct RegionalFlowGrid {
    pub meta: GridMeta,
    pub counts: Vec<f64>,
    /// Points outside the bounds, counted in their nearest border cell.
    pub clamped: u64,
}

impl RegionalFlowGrid {
    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn count(&self, i: usize, j: usize, k: usize) -> f64 {
        self.counts[self.meta.flat(i, j, k)]
    }

    /// Encoder input: `ln(1 + count)` per cell.
    pub fn log_counts(&self) -> Vec<f64> {
        self.counts.iter().map(|c| c.ln_1p()).collect()
    }

    fn checksum(bytes: &[u8]) -> String {
        hex::encode(Sha256::digest(bytes))
    }

    /// Writes little-endian `f64` counts to `bin` and geometry plus checksum to `sidecar`.
    pub fn save(&self, bin: &Path, sidecar: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.counts.iter().flat_map(|c| c.to_le_bytes()).collect();
        let meta = GridSidecar { meta: self.meta, clamped: self.clamped, checksum: Self::checksum(&bytes) };
        fs::write(bin, &bytes)?;
        fs::write(sidecar, serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(())
    }

    pub fn load(bin: &Path, sidecar: &Path) -> Result<Self> {
        let meta: GridSidecar = serde_json::from_str(&fs::read_to_string(sidecar)?)?;
        let bytes = fs::read(bin)?;
        if Self::checksum(&bytes) != meta.checksum {
            return Err(Error::Integrity(format!("flow grid {} does not match its checksum", bin.display())));
        }
        if bytes.len() != meta.meta.len() * 8 {
            return Err(Error::Integrity(format!("flow grid {} has the wrong size", bin.display())));
        }
        let counts = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Self { meta: meta.meta, counts, clamped: meta.clamped })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GridSidecar {
    #[serde(flatten)]
    meta: GridMeta,
    clamped: u64,
    checksum: String,
}

/// Bins every trajectory point into the grid.
pub fn compute_flow_grid(trajs: &[Trajectory], meta: GridMeta) -> RegionalFlowGrid {
    let (counts, clamped) = trajs
        .par_iter()
        .fold(
            || (vec![0u64; meta.len()], 0u64),
            |(mut counts, mut clamped), traj| {
                for p in traj.points() {
                    let (cell, was_clamped) = meta.locate(p.pos(), p.t);
                    counts[cell] += 1;
                    clamped += u64::from(was_clamped);
                }
                (counts, clamped)
            },
        )
        .reduce(
            || (vec![0u64; meta.len()], 0u64),
            |(mut a, ca), (b, cb)| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                (a, ca + cb)
            },
        );
    RegionalFlowGrid { meta, counts: counts.into_iter().map(|c| c as f64).collect(), clamped }
}

/// Encoded road conditions, one `F`-vector per grid cell (flat cell order).
#[derive(Debug, Clone, PartialEq)]
pub struct RoadConditionField {
    pub meta: GridMeta,
    pub features: Mat,
}

impl RoadConditionField {
    pub fn at(&self, i: usize, j: usize, k: usize) -> ndarray::ArrayView1<'_, f64> {
        self.features.row(self.meta.flat(i, j, k))
    }
}

/// 3×3 spatial convolution (1 → F channels) per time slice, then a width-3
/// temporal convolution (F → F) per cell, both zero-padded to the same size,
/// each followed by ReLU unless `activation` is off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowEncoder {
    pub spatial_kernel: ParamId,
    pub spatial_bias: ParamId,
    pub temporal_kernel: ParamId,
    pub temporal_bias: ParamId,
    pub features: usize,
    pub activation: bool,
}

impl FlowEncoder {
    pub fn register(store: &mut ParamStore, features: usize, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::FlowEncoder;
        Self {
            spatial_kernel: store.add("flow.spatial.kernel", g, gaussian(9, features, 1.0 / 3.0, rng), true),
            spatial_bias: store.add("flow.spatial.bias", g, Mat::zeros((1, features)), true),
            temporal_kernel: store.add(
                "flow.temporal.kernel",
                g,
                gaussian(3 * features, features, (1.0 / (3.0 * features as f64)).sqrt(), rng),
                true,
            ),
            temporal_bias: store.add("flow.temporal.bias", g, Mat::zeros((1, features)), true),
            features,
            activation: true,
        }
    }

    fn act(&self, tape: &mut Tape, x: Var) -> Var {
        if self.activation {
            tape.unary(x, Unary::Relu)
        } else {
            x
        }
    }

    /// Field rows for the requested flat cells only, in request order.
    pub fn cells(&self, tape: &mut Tape, meta: &GridMeta, input: &[f64], cells: &[usize]) -> Var {
        assert_eq!(input.len(), meta.len(), "grid input size");
        // Spatial outputs needed: each requested cell at t-1, t, t+1.
        let mut needed: Vec<usize> = Vec::with_capacity(cells.len() * 3);
        for &c in cells {
            let (i, j, k) = meta.unflat(c);
            for dk in -1isize..=1 {
                let kk = k as isize + dk;
                if (0..meta.slices as isize).contains(&kk) {
                    needed.push(meta.flat(i, j, kk as usize));
                }
            }
        }
        needed.sort_unstable();
        needed.dedup();
        let mut patches = Mat::zeros((needed.len(), 9));
        for (row, &c) in needed.iter().enumerate() {
            let (i, j, k) = meta.unflat(c);
            for di in 0..3 {
                for dj in 0..3 {
                    let (ii, jj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                    if (0..meta.rows as isize).contains(&ii) && (0..meta.cols as isize).contains(&jj) {
                        patches[[row, di * 3 + dj]] = input[meta.flat(ii as usize, jj as usize, k)];
                    }
                }
            }
        }
        let patches = tape.constant(patches);
        let spatial = tape.linear(patches, self.spatial_kernel, Some(self.spatial_bias));
        let spatial = self.act(tape, spatial);
        let shifted: Vec<Var> = (-1isize..=1)
            .map(|dk| {
                let rows = cells
                    .iter()
                    .map(|&c| {
                        let (i, j, k) = meta.unflat(c);
                        let kk = k as isize + dk;
                        if (0..meta.slices as isize).contains(&kk) {
                            let pos = needed.binary_search(&meta.flat(i, j, kk as usize)).expect("needed cell");
                            vec![(pos, 1.0)]
                        } else {
                            Vec::new()
                        }
                    })
                    .collect();
                tape.mix(spatial, Arc::new(RowMix { rows }))
            })
            .collect();
        let stacked = tape.concat_cols(&shifted);
        let temporal = tape.linear(stacked, self.temporal_kernel, Some(self.temporal_bias));
        self.act(tape, temporal)
    }

    /// Full field over every cell.
    pub fn encode(&self, store: &ParamStore, meta: &GridMeta, input: &[f64]) -> RoadConditionField {
        let mut tape = Tape::new(store);
        let all: Vec<usize> = (0..meta.len()).collect();
        let v = self.cells(&mut tape, meta, input, &all);
        RoadConditionField { meta: *meta, features: tape.value(v).clone() }
    }
}
