//! Interval-aware trajectory embedding.
//!
//! Observed slots are encoded from their coordinates (learnable Fourier
//! features) and the nearby road segments; missing slots from a learnable
//! placeholder, their time gaps to the surrounding observations and the road
//! conditions blended from those observations. A local convolution and an
//! attention read-out over reference tokens then map the slot features into
//! the encoder's token space, after the prompt rows.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, RowMix, Tape, Unary, Var};
use crate::error::{Error, Result};
use crate::geo::{Bounds, LatLng};
use crate::params::{gaussian, Mat, ParamGroup, ParamId, ParamStore};
use crate::prompts::{GridMeta, RoadConditionField};
use crate::roadnet::RoadNetwork;

/// Coordinates are min-max scaled to `[0, COORD_SCALE]` before the Fourier features.
pub const COORD_SCALE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub features: usize,
    pub reference_tokens: usize,
    pub heads: usize,
    /// Decay length of the road-proximity weight, meters.
    pub kappa: f64,
    /// Cut-off distance of the road-proximity weight, meters.
    pub phi_dist: f64,
    /// One Fourier-feature parameter set for both coordinates.
    pub shared_lff: bool,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self { features: 512, reference_tokens: 512, heads: 8, kappa: 15.0, phi_dist: 50.0, shared_lff: true }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        let f = self.features;
        if f == 0 || !f.is_multiple_of(2) {
            return Err(Error::Config(format!("feature width {f} must be even and positive")));
        }
        if self.heads == 0 || !f.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("feature width {f} is not divisible by {} heads", self.heads)));
        }
        if self.reference_tokens == 0 {
            return Err(Error::Config("at least one reference token is required".into()));
        }
        if !(self.kappa > 0.0 && self.phi_dist > 0.0) {
            return Err(Error::Config("kappa and phi_dist must be positive".into()));
        }
        Ok(())
    }
}

/// Fourier-feature map `Φ(x) = [cos(x·W_r) ‖ sin(x·W_r)] · W_phi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LffParams {
    /// `[1 × F/2]` frequencies.
    pub w_r: ParamId,
    /// `[F × F]` mixing matrix.
    pub w_phi: ParamId,
}

impl LffParams {
    pub fn register(store: &mut ParamStore, prefix: &str, features: usize, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::Embedder;
        let w_r = store.add(format!("{prefix}.w_r"), g, gaussian(1, features / 2, 1.0, rng), true);
        let w_phi = Mat::eye(features) + gaussian(features, features, 0.01, rng);
        let w_phi = store.add(format!("{prefix}.w_phi"), g, w_phi, true);
        Self { w_r, w_phi }
    }

    /// Rows of `x` (`[n × 1]`) mapped to `[n × F]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let wr = tape.param(self.w_r);
        let phase = tape.matmul(x, wr);
        let c = tape.unary(phase, Unary::Cos);
        let s = tape.unary(phase, Unary::Sin);
        let feats = tape.concat_cols(&[c, s]);
        let wphi = tape.param(self.w_phi);
        tape.matmul(feats, wphi)
    }
}

/// `Φ(x)` for one scalar.
pub fn lff_encode(store: &ParamStore, lff: &LffParams, x: f64) -> Array1<f64> {
    let mut tape = Tape::new(store);
    let x = tape.constant(Mat::from_elem((1, 1), x));
    let y = lff.forward(&mut tape, x);
    tape.value(y).row(0).to_owned()
}

/// `exp(−(d/κ)²)` inside the cut-off, exactly zero from `phi_dist` on.
pub fn road_weight(d: f64, kappa: f64, phi_dist: f64) -> f64 {
    if d < phi_dist {
        (-(d / kappa).powi(2)).exp()
    } else {
        0.0
    }
}

/// Normalized proximity weights of the segments around `p`, keyed by dense
/// edge index. Empty when no segment lies within `phi_dist`.
pub fn road_mix(net: &RoadNetwork, p: LatLng, kappa: f64, phi_dist: f64) -> Vec<(usize, f64)> {
    let mut weights: Vec<(usize, f64)> = net
        .nearby(p, phi_dist)
        .into_iter()
        .map(|pr| (pr.edge, road_weight(pr.distance, kappa, phi_dist)))
        .filter(|(_, w)| *w > 0.0)
        .collect();
    weights.sort_by_key(|(e, _)| *e);
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    weights.iter_mut().for_each(|(_, w)| *w /= total);
    weights
}

/// Forward/backward weights `(e^{−Δt_f}, e^{−Δt_b})` normalized to sum to one.
/// Written as a logistic in the gap difference so long gaps cannot underflow.
pub fn blend_weights(dt_f: f64, dt_b: f64) -> (f64, f64) {
    let wf = sigmoid(dt_b - dt_f);
    (wf, 1.0 - wf)
}

/// Where a missing slot draws its road conditions from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassingContext {
    /// Gap to the previous observation, in target intervals.
    pub dt_f: f64,
    /// Gap to the next observation, in target intervals.
    pub dt_b: f64,
    pub cell_f: usize,
    pub cell_b: usize,
    pub w_f: f64,
    pub w_b: f64,
}

/// Locates the grid cells of the neighbouring observations of a missing slot
/// at time `t` and the blend between them.
pub fn passing_context(
    t: i64,
    prev: (LatLng, i64),
    next: (LatLng, i64),
    epsilon: i64,
    meta: &GridMeta,
) -> Result<PassingContext> {
    if !(prev.1 < t && t < next.1) {
        return Err(Error::Contract(format!("missing slot at t={t} is not inside ({}, {})", prev.1, next.1)));
    }
    let unit = epsilon as f64;
    let (dt_f, dt_b) = ((t - prev.1) as f64 / unit, (next.1 - t) as f64 / unit);
    let (w_f, w_b) = blend_weights(dt_f, dt_b);
    Ok(PassingContext {
        dt_f,
        dt_b,
        cell_f: meta.locate(prev.0, prev.1).0,
        cell_b: meta.locate(next.0, next.1).0,
        w_f,
        w_b,
    })
}

/// Blended road condition `h_rc` of a missing slot plus its two gaps.
pub fn road_condition_passing(
    t: i64,
    prev: (LatLng, i64),
    next: (LatLng, i64),
    epsilon: i64,
    field: &RoadConditionField,
) -> Result<(Array1<f64>, f64, f64)> {
    let ctx = passing_context(t, prev, next, epsilon, &field.meta)?;
    let h = &field.features.row(ctx.cell_f) * ctx.w_f + &field.features.row(ctx.cell_b) * ctx.w_b;
    Ok((h, ctx.dt_f, ctx.dt_b))
}

/// Sinusoidal position table `[n × F]`.
pub fn sinusoidal_pe(n: usize, features: usize) -> Mat {
    Array2::from_shape_fn((n, features), |(pos, i)| {
        let freq = 10_000f64.powf(-((i / 2 * 2) as f64) / features as f64);
        let a = pos as f64 * freq;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

/// Embedder parameters. Matrices follow the row-vector convention (`[in × out]`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbedderParams {
    pub config: EmbedderConfig,
    pub lff_lat: LffParams,
    pub lff_lng: LffParams,
    /// `[|E| × F]` road segment embeddings.
    pub segments: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    /// `[1 × F]` placeholder for missing locations.
    pub missing: ParamId,
    pub time_w1: ParamId,
    pub time_b1: ParamId,
    pub time_w2: ParamId,
    pub time_b2: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    /// Width-3 convolution over slots, `[3F × F]`.
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    /// `[K × F]` reference tokens.
    pub reference: ParamId,
}

fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    gaussian(rows, cols, (1.0 / rows as f64).sqrt(), rng)
}

impl EmbedderParams {
    pub fn register(
        store: &mut ParamStore,
        config: EmbedderConfig,
        segment_count: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let f = config.features;
        let g = ParamGroup::Embedder;
        let lff_lat = LffParams::register(store, "embed.lff", f, rng);
        let lff_lng = if config.shared_lff { lff_lat } else { LffParams::register(store, "embed.lff_lng", f, rng) };
        let zeros = || Mat::zeros((1, f));
        Ok(Self {
            config,
            lff_lat,
            lff_lng,
            segments: store.add("embed.segments", g, gaussian(segment_count, f, 1.0, rng), true),
            w1: store.add("embed.w1", g, xavier(2 * f, f, rng), true),
            b1: store.add("embed.b1", g, zeros(), true),
            missing: store.add("embed.missing", g, gaussian(1, f, 1.0, rng), true),
            time_w1: store.add("embed.time.w1", g, xavier(2, f, rng), true),
            time_b1: store.add("embed.time.b1", g, zeros(), true),
            time_w2: store.add("embed.time.w2", g, xavier(f, f, rng), true),
            time_b2: store.add("embed.time.b2", g, zeros(), true),
            w2: store.add("embed.w2", g, xavier(3 * f, f, rng), true),
            b2: store.add("embed.b2", g, zeros(), true),
            conv_w: store.add("embed.conv.w", g, xavier(3 * f, f, rng), true),
            conv_b: store.add("embed.conv.b", g, zeros(), true),
            reference: store.add("embed.reference", g, gaussian(config.reference_tokens, f, 1.0, rng), true),
        })
    }

    /// Observed-slot features from scaled coordinates and road mixing rows.
    pub fn observed_rows(&self, tape: &mut Tape, coords: &[(f64, f64)], mixes: &[Vec<(usize, f64)>]) -> Var {
        let n = coords.len();
        let lat = tape.constant(Array2::from_shape_fn((n, 1), |(i, _)| coords[i].0));
        let lng = tape.constant(Array2::from_shape_fn((n, 1), |(i, _)| coords[i].1));
        let a = self.lff_lat.forward(tape, lat);
        let b = self.lff_lng.forward(tape, lng);
        let pos = tape.add(a, b);
        let m = tape.param(self.segments);
        let road = tape.mix(m, Arc::new(RowMix { rows: mixes.to_vec() }));
        let x = tape.concat_cols(&[pos, road]);
        tape.linear(x, self.w1, Some(self.b1))
    }

    /// Missing-slot features from `(Δt_f, Δt_b)` pairs and blended road conditions (`[n × F]`).
    pub fn missing_rows(&self, tape: &mut Tape, gaps: &[(f64, f64)], h_rc: Var) -> Var {
        let n = gaps.len();
        let m = tape.param(self.missing);
        let m = tape.mix(m, Arc::new(RowMix::gather(&vec![0; n])));
        let dt = tape.constant(Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { gaps[i].0 } else { gaps[i].1 }));
        let h = tape.linear(dt, self.time_w1, Some(self.time_b1));
        let h = tape.relu(h);
        let time = tape.linear(h, self.time_w2, Some(self.time_b2));
        let x = tape.concat_cols(&[m, time, h_rc]);
        tape.linear(x, self.w2, Some(self.b2))
    }

    /// Local convolution over slots followed by attention read-out against the
    /// reference tokens.
    pub fn transform_slots(&self, tape: &mut Tape, h: Var) -> Var {
        let n = tape.shape(h).0;
        let prev = tape.mix(h, Arc::new(RowMix::shift(n, -1)));
        let next = tape.mix(h, Arc::new(RowMix::shift(n, 1)));
        let stacked = tape.concat_cols(&[prev, h, next]);
        let local = tape.linear(stacked, self.conv_w, Some(self.conv_b));
        let reference = tape.param(self.reference);
        reference_attention(tape, local, reference, self.config.heads)
    }

    /// Prompt rows followed by transformed slot rows, plus positions when `pe`.
    pub fn feature_transform(&self, tape: &mut Tape, h: Var, prompt: Var, pe: bool) -> Var {
        let slots = self.transform_slots(tape, h);
        let z = tape.concat_rows(&[prompt, slots]);
        if !pe {
            return z;
        }
        let (n, f) = tape.shape(z);
        let table = tape.constant(sinusoidal_pe(n, f));
        tape.add(z, table)
    }
}

/// Multi-head scaled dot-product attention with `keys` serving as both keys and values.
pub fn reference_attention(tape: &mut Tape, queries: Var, keys: Var, heads: usize) -> Var {
    let f = tape.shape(queries).1;
    let d = f / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let outs: Vec<Var> = (0..heads)
        .map(|h| {
            let q = tape.slice_cols(queries, h * d, d);
            let k = tape.slice_cols(keys, h * d, d);
            let scores = tape.matmul_t(q, k);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            tape.matmul(attn, k)
        })
        .collect();
    tape.concat_cols(&outs)
}

/// Scales a coordinate into `[0, COORD_SCALE]` over `bounds`.
pub fn scale_coords(p: LatLng, bounds: &Bounds) -> (f64, f64) {
    (
        COORD_SCALE * (p.lat - bounds.lat_min) / (bounds.lat_max - bounds.lat_min),
        COORD_SCALE * (p.lng - bounds.lng_min) / (bounds.lng_max - bounds.lng_min),
    )
}

/// Embedding of a single observed slot.
pub fn observed_embed(
    store: &ParamStore,
    params: &EmbedderParams,
    net: &RoadNetwork,
    bounds: &Bounds,
    p: LatLng,
) -> Array1<f64> {
    let mix = road_mix(net, p, params.config.kappa, params.config.phi_dist);
    let mut tape = Tape::new(store);
    let v = params.observed_rows(&mut tape, &[scale_coords(p, bounds)], &[mix]);
    tape.value(v).row(0).to_owned()
}

/// Embedding of a single missing slot from its passing context.
pub fn missing_embed(store: &ParamStore, params: &EmbedderParams, dt_f: f64, dt_b: f64, h_rc: &Array1<f64>) -> Array1<f64> {
    let mut tape = Tape::new(store);
    let rc = tape.constant(h_rc.clone().insert_axis(ndarray::Axis(0)));
    let v = params.missing_rows(&mut tape, &[(dt_f, dt_b)], rc);
    tape.value(v).row(0).to_owned()
}
