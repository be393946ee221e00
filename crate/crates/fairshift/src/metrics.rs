//! Group-aware evaluation metrics and an empirical Lipschitz probe.
//!
//! The rates mirror the usual fairness-benchmark quantities: balanced (by
//! class) accuracy, per-group true-negative rate with equal group weights,
//! and worst-per-group accuracy averaged over classes. The Lipschitz probe
//! estimates the smallest constant `L` with
//! `|f(x) - f(x')| <= L d(x, x')` over sampled pairs; pairs at distance
//! zero (as happens under a fair metric that collapses the protected
//! direction) are reported separately as exact-consistency checks.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel_graph::MetricSpec;
use crate::seeding::rng_from_seed;
use crate::solver::Predictor;
use rand::Rng;
use serde::Serialize;
use std::collections::BTreeMap;

/// A named metric value with optional per-group breakdown.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_values: Option<BTreeMap<String, f64>>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::validation(format!("length mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// Mean of the per-class accuracies for binary labels.
pub fn balanced_accuracy(predictions: &[bool], labels: &[bool]) -> Result<MetricReport> {
    check_lengths(predictions.len(), labels.len())?;
    let mut counts = [[0usize; 2]; 2]; // [class][correct]
    for (&p, &y) in predictions.iter().zip(labels) {
        counts[usize::from(y)][usize::from(p == y)] += 1;
    }
    let class_total = |c: usize| counts[c][0] + counts[c][1];
    if class_total(0) == 0 || class_total(1) == 0 {
        return Err(Error::validation(
            "balanced accuracy needs both classes present in the labels",
        ));
    }
    let acc = |c: usize| counts[c][1] as f64 / class_total(c) as f64;
    let mut groups = BTreeMap::new();
    groups.insert("negative".to_string(), acc(0));
    groups.insert("positive".to_string(), acc(1));
    Ok(MetricReport {
        name: "balanced_accuracy".into(),
        value: 0.5 * (acc(0) + acc(1)),
        group_values: Some(groups),
    })
}

/// Per-group true-negative rate and its unweighted mean over groups.
pub fn group_tnr(
    predictions: &[bool],
    labels: &[bool],
    groups: &[i64],
) -> Result<MetricReport> {
    check_lengths(predictions.len(), labels.len())?;
    check_lengths(predictions.len(), groups.len())?;
    let mut per_group: BTreeMap<i64, (usize, usize)> = BTreeMap::new(); // (true negatives, negatives)
    for i in 0..labels.len() {
        let e = per_group.entry(groups[i]).or_default();
        if !labels[i] {
            e.1 += 1;
            if !predictions[i] {
                e.0 += 1;
            }
        } else {
            per_group.entry(groups[i]).or_default();
        }
    }
    let mut out = BTreeMap::new();
    let mut sum = 0.0;
    for (g, (tn, neg)) in &per_group {
        if *neg == 0 {
            return Err(Error::validation(format!(
                "group {g} has no negative labels; TNR undefined"
            )));
        }
        let rate = *tn as f64 / *neg as f64;
        out.insert(g.to_string(), rate);
        sum += rate;
    }
    Ok(MetricReport {
        name: "group_tnr".into(),
        value: sum / per_group.len() as f64,
        group_values: Some(out),
    })
}

/// For each class, the worst accuracy over groups; reported as the mean of
/// those minima plus the per-class map.
pub fn worst_per_group_accuracy(
    predictions: &[bool],
    labels: &[bool],
    class: &[i64],
    group: &[i64],
) -> Result<MetricReport> {
    check_lengths(predictions.len(), labels.len())?;
    check_lengths(predictions.len(), class.len())?;
    check_lengths(predictions.len(), group.len())?;
    let mut cells: BTreeMap<(i64, i64), (usize, usize)> = BTreeMap::new(); // (correct, total)
    let mut classes: std::collections::BTreeSet<i64> = Default::default();
    let mut groups_seen: std::collections::BTreeSet<i64> = Default::default();
    for i in 0..labels.len() {
        let e = cells.entry((class[i], group[i])).or_default();
        e.1 += 1;
        if predictions[i] == labels[i] {
            e.0 += 1;
        }
        classes.insert(class[i]);
        groups_seen.insert(group[i]);
    }
    let mut per_class = BTreeMap::new();
    let mut sum = 0.0;
    for &c in &classes {
        let mut worst = f64::INFINITY;
        for &g in &groups_seen {
            match cells.get(&(c, g)) {
                Some((correct, total)) => {
                    worst = worst.min(*correct as f64 / *total as f64);
                }
                None => {
                    return Err(Error::validation(format!(
                        "cell (class {c}, group {g}) is empty"
                    )))
                }
            }
        }
        per_class.insert(c.to_string(), worst);
        sum += worst;
    }
    Ok(MetricReport {
        name: "worst_per_group_accuracy".into(),
        value: sum / classes.len() as f64,
        group_values: Some(per_class),
    })
}

/// Result of the pairwise Lipschitz probe.
#[derive(Debug, Clone, Serialize)]
pub struct IfLipschitzReport {
    /// Largest `|f(x) - f(x')| / d(x, x')` over sampled positive-distance
    /// pairs.
    pub max_ratio: f64,
    /// Pairs with `d = 0` under the metric (checked exactly instead of by
    /// ratio).
    pub zero_distance_pairs: usize,
    /// Largest output gap observed on those zero-distance pairs.
    pub zero_distance_max_delta: f64,
}

/// Samples `pairs` index pairs uniformly (plus protected-flip pairs when a
/// flip direction is supplied and the dataset carries `z`) and probes the
/// Lipschitz constant of the model under the metric.
pub fn empirical_if_lipschitz(
    model: &dyn Predictor,
    dataset: &Dataset,
    metric: &MetricSpec,
    pairs: usize,
    seed: u64,
    flip_direction: Option<&[f64]>,
) -> Result<IfLipschitzReport> {
    if pairs == 0 {
        return Err(Error::validation("pairs must be >= 1"));
    }
    if dataset.len() < 2 {
        return Err(Error::validation("need at least two samples"));
    }
    metric.validate(dataset.dim())?;
    let mut rng = rng_from_seed(seed);
    let n = dataset.len();
    let mut max_ratio = 0.0f64;
    let mut zero_pairs = 0usize;
    let mut zero_delta = 0.0f64;
    let mut probe = |x: &[f64], y: &[f64]| {
        let d = metric.distance(x, y);
        let df = (model.predict(x) - model.predict(y)).abs();
        if d == 0.0 {
            zero_pairs += 1;
            zero_delta = zero_delta.max(df);
        } else {
            max_ratio = max_ratio.max(df / d);
        }
    };
    for _ in 0..pairs {
        let i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let xi: Vec<f64> = dataset.features().row(i).iter().copied().collect();
        let xj: Vec<f64> = dataset.features().row(j).iter().copied().collect();
        probe(&xi, &xj);
    }
    if let (Some(b), Some(z)) = (flip_direction, dataset.protected()) {
        if b.len() != dataset.dim() {
            return Err(Error::validation("flip direction has wrong dimension"));
        }
        for _ in 0..pairs {
            let i = rng.gen_range(0..n);
            let xi: Vec<f64> = dataset.features().row(i).iter().copied().collect();
            let sgn = 1.0 - 2.0 * f64::from(z[i]);
            let flipped: Vec<f64> = xi.iter().zip(b).map(|(v, bv)| v + sgn * bv).collect();
            probe(&xi, &flipped);
        }
    }
    Ok(IfLipschitzReport {
        max_ratio,
        zero_distance_pairs: zero_pairs,
        zero_distance_max_delta: zero_delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{AlignmentMap, ComposedPredictor};
    use crate::data::{Domain, FactorModelSpec, GaussianLaw};
    use crate::solver::{Model, ModelSpec};
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn balanced_accuracy_basics() {
        let perfect = balanced_accuracy(&[true, false, true], &[true, false, true]).unwrap();
        assert_abs_diff_eq!(perfect.value, 1.0);
        // all-positive predictions on balanced labels: one class fully
        // right, one fully wrong
        let allpos =
            balanced_accuracy(&[true, true, true, true], &[true, true, false, false]).unwrap();
        assert_abs_diff_eq!(allpos.value, 0.5);
        // (1,0,1,0) vs (1,1,0,0): per-class accuracy (1/2 + 1/2) / 2
        let mixed =
            balanced_accuracy(&[true, false, true, false], &[true, true, false, false]).unwrap();
        assert_abs_diff_eq!(mixed.value, 0.5);
        assert!(balanced_accuracy(&[true, false], &[true, true]).is_err());
    }

    #[test]
    fn group_tnr_hand_counts() {
        // group 0: two negatives, both predicted negative (TNR 1.0)
        // group 1: two negatives, both predicted positive (TNR 0.0)
        let predictions = [false, false, true, true];
        let labels = [false, false, false, false];
        let groups = [0, 0, 1, 1];
        let rep = group_tnr(&predictions, &labels, &groups).unwrap();
        assert_abs_diff_eq!(rep.value, 0.5);
        let gv = rep.group_values.unwrap();
        assert_abs_diff_eq!(gv["0"], 1.0);
        assert_abs_diff_eq!(gv["1"], 0.0);

        // duplicating group 0 rows leaves the equally weighted mean alone
        let predictions = [false, false, false, false, true, true];
        let labels = [false; 6];
        let groups = [0, 0, 0, 0, 1, 1];
        let rep = group_tnr(&predictions, &labels, &groups).unwrap();
        assert_abs_diff_eq!(rep.value, 0.5);

        let err = group_tnr(&[true], &[true], &[7]).unwrap_err();
        assert!(err.to_string().contains('7'), "{err}");
    }

    #[test]
    fn worst_per_group_accuracy_hand_values() {
        // class 0: group accuracies 1.0 and 0.5 -> 0.5
        // class 1: group accuracies 0.8 and 0.8 -> 0.8  (here 4/5 each)
        let mut predictions = vec![true, true, true, false];
        let mut labels = vec![true, true, true, true];
        let mut class = vec![0, 0, 0, 0];
        let mut group = vec![0, 0, 1, 1];
        for g in [0i64, 1] {
            for i in 0..5 {
                predictions.push(i != 0);
                labels.push(true);
                class.push(1);
                group.push(g);
            }
        }
        let rep = worst_per_group_accuracy(&predictions, &labels, &class, &group).unwrap();
        assert_abs_diff_eq!(rep.value, (0.5 + 0.8) / 2.0);
        // swapping group ids leaves the min alone
        let swapped: Vec<i64> = group.iter().map(|g| 1 - g).collect();
        let rep2 = worst_per_group_accuracy(&predictions, &labels, &class, &swapped).unwrap();
        assert_abs_diff_eq!(rep.value, rep2.value);
        // empty cell errors
        let err =
            worst_per_group_accuracy(&[true, true], &[true, true], &[0, 1], &[0, 1]).unwrap_err();
        assert!(err.to_string().contains("empty"), "{err}");
    }

    fn toy_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = rng_from_seed(seed);
        let feats = DMatrix::from_fn(n, 2, |_, _| rng.gen_range(-1.0..1.0));
        let z: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        Dataset::new(feats, None, Domain::Source, Some(z)).unwrap()
    }

    #[test]
    fn constant_model_has_zero_ratio() {
        let ds = toy_dataset(30, 1);
        let m = Model {
            spec: ModelSpec::linear(0.0),
            weights: vec![0.0, 0.0, 4.2],
            anchors: None,
        };
        let rep =
            empirical_if_lipschitz(&m, &ds, &MetricSpec::Euclidean, 200, 3, None).unwrap();
        assert_eq!(rep.max_ratio, 0.0);
    }

    #[test]
    fn linear_model_ratio_bounded_by_weight_norm() {
        let ds = toy_dataset(40, 2);
        let m = Model {
            spec: ModelSpec::linear(0.0),
            weights: vec![1.5, -2.0, 0.3],
            anchors: None,
        };
        let rep =
            empirical_if_lipschitz(&m, &ds, &MetricSpec::Euclidean, 500, 4, None).unwrap();
        let wnorm = (1.5f64 * 1.5 + 4.0).sqrt();
        assert!(rep.max_ratio <= wnorm + 1e-9, "{} vs {wnorm}", rep.max_ratio);
    }

    #[test]
    fn fair_metric_flip_pairs_are_exact_consistency_checks() {
        // Factor data with b = e2; a model on Phi with Phi b = 0 composed
        // with a metric that annihilates b: flip pairs get d = 0 and the
        // output gap is exactly 0.
        let spec = FactorModelSpec {
            loading: vec![vec![1.0], vec![0.0]],
            protected_direction: vec![0.0, 1.0],
            noise_sd: 0.05,
            u_law: GaussianLaw::isotropic(vec![0.0], 1.0),
            seed: 30,
        };
        let ds = crate::data::generate_factor_model(&spec, 60, 0.5).unwrap();
        let map = AlignmentMap {
            matrix: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        };
        let inner = Model {
            spec: ModelSpec::linear(0.0),
            weights: vec![0.8, 0.1],
            anchors: None,
        };
        let model = ComposedPredictor {
            map: &map,
            inner: &inner,
        };
        let metric = MetricSpec::FairProjection {
            projection: vec![vec![1.0, 0.0], vec![0.0, 0.0]],
        };
        let rep =
            empirical_if_lipschitz(&model, &ds, &metric, 150, 5, Some(&[0.0, 1.0])).unwrap();
        assert!(rep.zero_distance_pairs >= 150);
        assert_abs_diff_eq!(rep.zero_distance_max_delta, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn rates_are_permutation_invariant() {
        let predictions = [true, false, true, false, true];
        let labels = [true, true, false, false, true];
        let a = balanced_accuracy(&predictions, &labels).unwrap().value;
        let perm = [4usize, 2, 0, 3, 1];
        let pp: Vec<bool> = perm.iter().map(|&i| predictions[i]).collect();
        let lp: Vec<bool> = perm.iter().map(|&i| labels[i]).collect();
        let b = balanced_accuracy(&pp, &lp).unwrap().value;
        assert_abs_diff_eq!(a, b);
        assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn metric_report_serializes() {
        let rep = MetricReport {
            name: "x".into(),
            value: 0.5,
            group_values: None,
        };
        let js = rep.to_json().unwrap();
        assert!(js.contains("\"value\": 0.5"));
        let v = DVector::from_vec(vec![1.0]);
        assert_eq!(v.len(), 1);
    }
}
