//! Hidden Markov Model map matching (Gaussian emissions on projection
//! distance, exponential transitions on route/great-circle discrepancy).

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::haversine;
use crate::roadnet::{EdgePosition, MatchedPoint, Projection, RoadNetwork};
use crate::trajectory::{MapMatchedTrajectory, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmmParams {
    /// Emission noise scale, meters.
    pub sigma_z: f64,
    /// Transition discrepancy scale, meters.
    pub beta: f64,
    pub candidate_radius: f64,
    /// Routes longer than this multiple of `max(great-circle, candidate_radius)` are pruned.
    pub max_route_factor: f64,
}

impl Default for HmmParams {
    fn default() -> Self {
        Self { sigma_z: 4.07, beta: 20.0, candidate_radius: 50.0, max_route_factor: 4.0 }
    }
}

impl HmmParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma_z > 0.0 && self.beta > 0.0 && self.candidate_radius > 0.0 && self.max_route_factor > 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid HMM parameters {self:?}")))
        }
    }

    fn emission(&self, distance: f64) -> f64 {
        let z = distance / self.sigma_z;
        -0.5 * z * z - ((2.0 * std::f64::consts::PI).sqrt() * self.sigma_z).ln()
    }

    fn transition(&self, route: f64, great_circle: f64) -> f64 {
        -(route - great_circle).abs() / self.beta - self.beta.ln()
    }
}

/// Every transition between step `step` and `step + 1` is impossible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViterbiBreak {
    pub step: usize,
}

/// Max-log-probability index path. Among equally probable paths the
/// lexicographically smallest one is returned.
///
/// `transitions[t][i][j]` scores candidate `i` at step `t` followed by
/// candidate `j` at step `t + 1`.
pub fn viterbi(emissions: &[Vec<f64>], transitions: &[Vec<Vec<f64>>]) -> std::result::Result<Vec<usize>, ViterbiBreak> {
    let steps = emissions.len();
    assert!(steps >= 1, "viterbi needs at least one step");
    assert_eq!(transitions.len(), steps - 1, "one transition table per consecutive pair");

    // Forward reachability detects breaks at the first impossible step.
    let mut alpha = emissions[0].clone();
    for t in 0..steps - 1 {
        let next: Vec<f64> = (0..emissions[t + 1].len())
            .map(|j| {
                let best = alpha.iter().enumerate().map(|(i, a)| a + transitions[t][i][j]).fold(f64::NEG_INFINITY, f64::max);
                best + emissions[t + 1][j]
            })
            .collect();
        if next.iter().all(|v| *v == f64::NEG_INFINITY) {
            return Err(ViterbiBreak { step: t });
        }
        alpha = next;
    }

    // Best score of any completion starting at each candidate.
    let mut suffix: Vec<Vec<f64>> = vec![Vec::new(); steps];
    suffix[steps - 1] = emissions[steps - 1].clone();
    for t in (0..steps - 1).rev() {
        suffix[t] = (0..emissions[t].len())
            .map(|i| {
                let best = suffix[t + 1]
                    .iter()
                    .enumerate()
                    .map(|(j, s)| transitions[t][i][j] + s)
                    .fold(f64::NEG_INFINITY, f64::max);
                emissions[t][i] + best
            })
            .collect();
    }
    let mut path = Vec::with_capacity(steps);
    path.push(first_argmax(suffix[0].iter().copied()));
    for t in 0..steps - 1 {
        let i = path[t];
        path.push(first_argmax(suffix[t + 1].iter().enumerate().map(|(j, s)| transitions[t][i][j] + s)));
    }
    Ok(path)
}

fn first_argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    pub trajectory: MapMatchedTrajectory,
    /// Index of the first input point covered by `trajectory`.
    pub first_index: usize,
    /// Number of independently matchable pieces the input broke into.
    pub pieces: usize,
}

/// Matches a GPS trajectory onto the network. When transitions break the
/// chain, only the longest matchable piece is returned.
pub fn map_match(net: &RoadNetwork, traj: &Trajectory, params: &HmmParams) -> Result<MatchOutcome> {
    params.validate()?;
    let points = traj.points();
    let candidates: Vec<Vec<Projection>> = points
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let c = net.nearby(p.pos(), params.candidate_radius);
            if c.is_empty() {
                Err(Error::Gap { index, radius: params.candidate_radius })
            } else {
                Ok(c)
            }
        })
        .collect::<Result<_>>()?;
    let emissions: Vec<Vec<f64>> =
        candidates.iter().map(|cs| cs.iter().map(|c| params.emission(c.distance)).collect()).collect();
    let transitions: Vec<Vec<Vec<f64>>> = (0..points.len() - 1)
        .map(|t| {
            let gc = haversine(points[t].pos(), points[t + 1].pos());
            let limit = params.max_route_factor * gc.max(params.candidate_radius);
            let targets: Vec<EdgePosition> =
                candidates[t + 1].iter().map(|c| EdgePosition { edge: c.edge, ratio: c.ratio }).collect();
            candidates[t]
                .iter()
                .map(|c| {
                    net.directed_distances(EdgePosition { edge: c.edge, ratio: c.ratio }, &targets, limit)
                        .into_iter()
                        .map(|d| d.map_or(f64::NEG_INFINITY, |d| params.transition(d, gc)))
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut pieces: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut start = 0;
    while start < points.len() {
        let mut end = points.len();
        let path = loop {
            match viterbi(&emissions[start..end], &transitions[start..end - 1]) {
                Ok(path) => break path,
                Err(ViterbiBreak { step }) => end = start + step + 1,
            }
        };
        pieces.push((start, path));
        start = end;
    }
    if pieces.len() > 1 {
        warn!("trajectory {} broke into {} unmatchable pieces; keeping the longest", traj.id, pieces.len());
    }
    let n_pieces = pieces.len();
    let (first, path) = pieces
        .into_iter()
        .reduce(|best, p| if p.1.len() > best.1.len() { p } else { best })
        .expect("at least one piece");
    let matched = path
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            let cand = candidates[first + k][c];
            MatchedPoint::new(net.edge(cand.edge).id, cand.ratio, points[first + k].t)
        })
        .collect();
    Ok(MatchOutcome {
        trajectory: MapMatchedTrajectory { points: matched, interval: traj.declared_interval.unwrap_or(0) },
        first_index: first,
        pieces: n_pieces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn path_score(e: &[Vec<f64>], tr: &[Vec<Vec<f64>>], path: &[usize]) -> f64 {
        let mut s = e[0][path[0]];
        for t in 1..path.len() {
            s += tr[t - 1][path[t - 1]][path[t]];
            s += e[t][path[t]];
        }
        s
    }

    fn enumerate_best(e: &[Vec<f64>], tr: &[Vec<Vec<f64>>]) -> (f64, Vec<usize>) {
        let mut best = (f64::NEG_INFINITY, Vec::new());
        let mut path = vec![0; e.len()];
        loop {
            let s = path_score(e, tr, &path);
            // Paths are visited in lexicographic order; strict `>` keeps the smallest.
            if s > best.0 {
                best = (s, path.clone());
            }
            let mut k = e.len();
            loop {
                if k == 0 {
                    return best;
                }
                k -= 1;
                path[k] += 1;
                if path[k] < e[k].len() {
                    break;
                }
                path[k] = 0;
            }
        }
    }

    #[test]
    fn single_step_is_argmax() {
        assert_eq!(viterbi(&[vec![-3.0, -1.0, -2.0]], &[]).unwrap(), vec![1]);
    }

    #[test]
    fn two_step_table() {
        let e = vec![vec![-1.0, -2.0], vec![-1.5, -0.5]];
        let tr = vec![vec![vec![-0.1, -5.0], vec![-3.0, -0.2]]];
        let (score, best) = enumerate_best(&e, &tr);
        let path = viterbi(&e, &tr).unwrap();
        assert_eq!(path, best);
        assert_eq!(path_score(&e, &tr, &path), score);
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let e = vec![vec![-1.0, -1.0], vec![-1.0, -1.0], vec![-1.0, -1.0]];
        let tr = vec![vec![vec![-1.0, -1.0], vec![-1.0, -1.0]]; 2];
        assert_eq!(viterbi(&e, &tr).unwrap(), vec![0, 0, 0]);
        // Step 0 ties; candidate 1 at step 1 is better.
        let e = vec![vec![-1.0, -1.0], vec![-2.0, -1.0]];
        let tr = vec![vec![vec![-1.0, -1.0], vec![-1.0, -1.0]]];
        assert_eq!(viterbi(&e, &tr).unwrap(), vec![0, 1]);
    }

    #[test]
    fn impossible_transition_signals_break() {
        let ninf = f64::NEG_INFINITY;
        let e = vec![vec![-1.0], vec![-1.0, -2.0], vec![-1.0]];
        let tr = vec![vec![vec![-1.0, -1.0]], vec![vec![ninf], vec![ninf]]];
        assert_eq!(viterbi(&e, &tr), Err(ViterbiBreak { step: 1 }));
    }

    proptest! {
        #[test]
        fn matches_exhaustive_enumeration(
            dims in prop::collection::vec(1usize..=4, 1..=4),
            seed in prop::collection::vec(-20.0f64..0.0, 4 * 4 * 4 + 16),
            prune in prop::collection::vec(any::<bool>(), 64),
        ) {
            let mut vals = seed.iter().copied().cycle();
            let e: Vec<Vec<f64>> = dims.iter().map(|&n| (0..n).map(|_| vals.next().unwrap()).collect()).collect();
            let mut flags = prune.iter().copied().cycle();
            let tr: Vec<Vec<Vec<f64>>> = dims
                .windows(2)
                .map(|w| {
                    (0..w[0])
                        .map(|_| (0..w[1]).map(|_| {
                            let v = vals.next().unwrap();
                            if flags.next().unwrap() && v < -15.0 { f64::NEG_INFINITY } else { v }
                        }).collect())
                        .collect()
                })
                .collect();
            let (score, best) = enumerate_best(&e, &tr);
            match viterbi(&e, &tr) {
                Ok(path) => {
                    prop_assert!(score > f64::NEG_INFINITY);
                    prop_assert_eq!(path_score(&e, &tr, &path), score);
                    prop_assert_eq!(path, best);
                }
                Err(_) => prop_assert_eq!(score, f64::NEG_INFINITY),
            }
        }

        #[test]
        fn integer_scores_tie_break_exactly(
            dims in prop::collection::vec(1usize..=4, 1..=4),
            seed in prop::collection::vec(-3i32..0, 80),
        ) {
            let mut vals = seed.iter().map(|&v| v as f64).cycle();
            let e: Vec<Vec<f64>> = dims.iter().map(|&n| (0..n).map(|_| vals.next().unwrap()).collect()).collect();
            let tr: Vec<Vec<Vec<f64>>> = dims
                .windows(2)
                .map(|w| (0..w[0]).map(|_| (0..w[1]).map(|_| vals.next().unwrap()).collect()).collect())
                .collect();
            let (_, best) = enumerate_best(&e, &tr);
            prop_assert_eq!(viterbi(&e, &tr).unwrap(), best);
        }
    }
}
