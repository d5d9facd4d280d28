//! Recovery quality: segment accuracy/recall/precision and network-distance errors.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roadnet::{EdgeId, MatchedPoint, RoadNetwork};

/// `(acc, recall, prec)` in percent. Recall and precision compare the sets of
/// distinct segments, so repeated segments count once.
pub fn segment_metrics(truth: &[EdgeId], pred: &[EdgeId]) -> Result<(f64, f64, f64)> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::Contract(format!(
            "segment sequences must be equal and non-empty, got {} and {}",
            truth.len(),
            pred.len()
        )));
    }
    let hits = truth.iter().zip(pred).filter(|(a, b)| a == b).count();
    let acc = 100.0 * hits as f64 / truth.len() as f64;
    let t: BTreeSet<EdgeId> = truth.iter().copied().collect();
    let p: BTreeSet<EdgeId> = pred.iter().copied().collect();
    let common = t.intersection(&p).count() as f64;
    Ok((acc, 100.0 * common / t.len() as f64, 100.0 * common / p.len() as f64))
}

/// Network-distance errors of one trajectory, before averaging.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DistanceErrors {
    pub sum_abs: f64,
    pub sum_sq: f64,
    /// Pairs with a finite network distance.
    pub n: usize,
    pub unreachable: usize,
}

impl DistanceErrors {
    pub fn merge(&mut self, other: &DistanceErrors) {
        self.sum_abs += other.sum_abs;
        self.sum_sq += other.sum_sq;
        self.n += other.n;
        self.unreachable += other.unreachable;
    }

    /// `(mae, rmse)`; zero when nothing was reachable.
    pub fn mae_rmse(&self) -> (f64, f64) {
        if self.n == 0 {
            return (0.0, 0.0);
        }
        let n = self.n as f64;
        let (mae, rmse) = (self.sum_abs / n, (self.sum_sq / n).sqrt());
        // Guard the rmse ≥ mae relation against last-bit rounding.
        (mae, rmse.max(mae))
    }
}

/// Per-slot undirected network distance between truth and prediction.
pub fn distance_errors(net: &RoadNetwork, truth: &[MatchedPoint], pred: &[MatchedPoint]) -> Result<DistanceErrors> {
    if truth.len() != pred.len() {
        return Err(Error::Contract(format!("{} truth points but {} predictions", truth.len(), pred.len())));
    }
    let mut out = DistanceErrors::default();
    for (a, b) in truth.iter().zip(pred) {
        match net.rn_dist(a, b)? {
            Some(d) => {
                out.sum_abs += d.abs();
                out.sum_sq += d * d;
                out.n += 1;
            }
            None => out.unreachable += 1,
        }
    }
    Ok(out)
}

/// `(mae, rmse)` of one trajectory.
pub fn distance_metrics(net: &RoadNetwork, truth: &[MatchedPoint], pred: &[MatchedPoint]) -> Result<(f64, f64)> {
    Ok(distance_errors(net, truth, pred)?.mae_rmse())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc: f64,
    pub recall: f64,
    pub prec: f64,
    pub mae: f64,
    pub rmse: f64,
    pub n_points: usize,
    pub n_unreachable: usize,
    pub n_trajectories: usize,
}

impl EvalReport {
    /// Segment scores are averaged per trajectory; distance errors are pooled
    /// over all reachable points.
    pub fn evaluate<'a>(
        net: &RoadNetwork,
        pairs: impl IntoIterator<Item = (&'a [MatchedPoint], &'a [MatchedPoint])>,
    ) -> Result<EvalReport> {
        let (mut acc, mut recall, mut prec) = (0.0, 0.0, 0.0);
        let mut dist = DistanceErrors::default();
        let (mut n_points, mut count) = (0, 0);
        for (truth, pred) in pairs {
            let ids = |xs: &[MatchedPoint]| xs.iter().map(|m| m.edge).collect::<Vec<_>>();
            let (a, r, p) = segment_metrics(&ids(truth), &ids(pred))?;
            acc += a;
            recall += r;
            prec += p;
            dist.merge(&distance_errors(net, truth, pred)?);
            n_points += truth.len();
            count += 1;
        }
        if count == 0 {
            return Err(Error::Contract("nothing to evaluate".into()));
        }
        let k = count as f64;
        let (mae, rmse) = dist.mae_rmse();
        let report = EvalReport {
            acc: acc / k,
            recall: recall / k,
            prec: prec / k,
            mae,
            rmse,
            n_points,
            n_unreachable: dist.unreachable,
            n_trajectories: count,
        };
        debug_assert!(report.rmse >= report.mae);
        Ok(report)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

impl fmt::Display for EvalReport {
    /// Aligned plain-text table.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>8} {:>8} {:>8} {:>10} {:>10} {:>8} {:>11}", "Acc", "Recall", "Prec", "MAE", "RMSE", "Points", "Unreachable")?;
        writeln!(
            f,
            "{:>8.2} {:>8.2} {:>8.2} {:>10.2} {:>10.2} {:>8} {:>11}",
            self.acc, self.recall, self.prec, self.mae, self.rmse, self.n_points, self.n_unreachable
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{grid_network, SynthConfig};
    use proptest::prelude::*;

    fn e(ids: &[u64]) -> Vec<EdgeId> {
        ids.iter().map(|&i| EdgeId(i)).collect()
    }

    #[test]
    fn hand_cases() {
        assert_eq!(segment_metrics(&e(&[1, 2, 3]), &e(&[1, 2, 3])).unwrap(), (100.0, 100.0, 100.0));
        assert_eq!(segment_metrics(&e(&[1, 2, 3, 4]), &e(&[1, 2, 3, 9])).unwrap(), (75.0, 75.0, 75.0));
        // Positions 0 and 2 agree.
        let (acc, r, p) = segment_metrics(&e(&[1, 1, 2]), &e(&[1, 2, 2])).unwrap();
        assert!((acc - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!((r, p), (100.0, 100.0));
        assert!(segment_metrics(&e(&[1]), &e(&[1, 2])).is_err());
    }

    #[test]
    fn distance_cases() {
        let cfg = SynthConfig { rows: 3, cols: 3, ..Default::default() };
        let (nodes, edges) = grid_network(&cfg);
        let net = RoadNetwork::new(nodes, edges).unwrap();
        let truth: Vec<MatchedPoint> = (0..4).map(|i| MatchedPoint::new(EdgeId(1), 0.1 * i as f64, i)).collect();
        assert_eq!(distance_metrics(&net, &truth, &truth).unwrap(), (0.0, 0.0));
        // Shifts of 30 m and 40 m along a 200 m edge.
        let pred = vec![MatchedPoint::new(EdgeId(1), 0.15, 0), MatchedPoint::new(EdgeId(1), 0.5, 1)];
        let tr = vec![MatchedPoint::new(EdgeId(1), 0.0, 0), MatchedPoint::new(EdgeId(1), 0.3, 1)];
        let (mae, rmse) = distance_metrics(&net, &tr, &pred).unwrap();
        assert!((mae - 35.0).abs() < 1e-6);
        assert!((rmse - 1250f64.sqrt()).abs() < 1e-6);
        let report = EvalReport::evaluate(&net, [(&truth[..], &truth[..])]).unwrap();
        assert_eq!((report.acc, report.mae, report.n_points), (100.0, 0.0, 4));
        assert!(report.to_string().lines().count() == 2);
    }

    fn brute(truth: &[u64], pred: &[u64]) -> (f64, f64, f64) {
        let m = truth.len() as f64;
        let mut hits = 0.0;
        for i in 0..truth.len() {
            if truth[i] == pred[i] {
                hits += 1.0;
            }
        }
        let mut tset: Vec<u64> = truth.to_vec();
        tset.sort();
        tset.dedup();
        let mut pset: Vec<u64> = pred.to_vec();
        pset.sort();
        pset.dedup();
        let common = tset.iter().filter(|x| pset.contains(x)).count() as f64;
        (hits / m * 100.0, common / tset.len() as f64 * 100.0, common / pset.len() as f64 * 100.0)
    }

    proptest! {
        #[test]
        fn matches_brute_force(pairs in prop::collection::vec((0u64..10, 0u64..10), 1..50)) {
            let (t, p): (Vec<u64>, Vec<u64>) = pairs.into_iter().unzip();
            let got = segment_metrics(&e(&t), &e(&p)).unwrap();
            let want = brute(&t, &p);
            prop_assert!((got.0 - want.0).abs() < 1e-9 && (got.1 - want.1).abs() < 1e-9 && (got.2 - want.2).abs() < 1e-9);
        }

        #[test]
        fn permutation_invariant(pairs in prop::collection::vec((0u64..6, 0u64..6), 2..30), seed in 0u64..1000) {
            let (t, p): (Vec<u64>, Vec<u64>) = pairs.into_iter().unzip();
            let mut idx: Vec<usize> = (0..t.len()).collect();
            idx.sort_by_key(|&i| (i as u64 * 2654435761 + seed) % 1009);
            let tp: Vec<u64> = idx.iter().map(|&i| t[i]).collect();
            let pp: Vec<u64> = idx.iter().map(|&i| p[i]).collect();
            prop_assert_eq!(segment_metrics(&e(&t), &e(&p)).unwrap(), segment_metrics(&e(&tp), &e(&pp)).unwrap());
        }

        #[test]
        fn rmse_never_below_mae(errs in prop::collection::vec(0.0f64..500.0, 1..40)) {
            let d = DistanceErrors {
                sum_abs: errs.iter().sum(),
                sum_sq: errs.iter().map(|x| x * x).sum(),
                n: errs.len(),
                unreachable: 0,
            };
            let (mae, rmse) = d.mae_rmse();
            prop_assert!(rmse >= mae);
        }
    }
}
