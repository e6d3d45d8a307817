//! Score fusion and NIST-style metrics: EER and minC_primary with optional
//! breakdowns by trial partition key.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::plda::TrialLabel;

/// One scored trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialScore {
    pub enroll_id: String,
    pub test_id: String,
    pub score: f64,
    pub label: TrialLabel,
    pub partition: String,
}

/// A set of scored trials with unique (enroll, test) keys.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    trials: Vec<TrialScore>,
}

impl ScoreSet {
    pub fn new(trials: Vec<TrialScore>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for t in &trials {
            if !t.score.is_finite() {
                return Err(Error::InvalidData(format!(
                    "non-finite score for trial ({}, {})",
                    t.enroll_id, t.test_id
                )));
            }
            if !seen.insert((t.enroll_id.clone(), t.test_id.clone())) {
                return Err(Error::InvalidData(format!(
                    "duplicate trial ({}, {})",
                    t.enroll_id, t.test_id
                )));
            }
        }
        Ok(Self { trials })
    }

    pub fn trials(&self) -> &[TrialScore] {
        &self.trials
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }
}

/// Overall and per-partition metrics.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub eer: f64,
    pub min_c_primary: f64,
    pub partitions: BTreeMap<String, PartitionMetrics>,
    /// Unweighted mean of the per-partition metrics (two or more partitions).
    pub equalized: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct PartitionMetrics {
    pub eer: f64,
    pub min_c_primary: f64,
    pub targets: usize,
    pub nontargets: usize,
}

/// Target and nontarget scores split out of a set, errors when either side
/// is missing.
fn split_scores(scores: &ScoreSet) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for t in scores.trials() {
        match t.label {
            TrialLabel::Target => targets.push(t.score),
            TrialLabel::NonTarget => nontargets.push(t.score),
            TrialLabel::Unknown => {}
        }
    }
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::InvalidData(format!(
            "metrics need labeled trials on both sides: {} targets, {} nontargets",
            targets.len(),
            nontargets.len()
        )));
    }
    targets.sort_by(|a, b| a.partial_cmp(b).unwrap());
    nontargets.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok((targets, nontargets))
}

/// ROC operating points (P_miss, P_fa) for thresholds swept from accept-all
/// to reject-all, with the decision rule "accept iff score >= threshold".
fn operating_points(targets: &[f64], nontargets: &[f64]) -> Vec<(f64, f64)> {
    let nt = targets.len() as f64;
    let nn = nontargets.len() as f64;
    let mut thresholds: Vec<f64> = targets.iter().chain(nontargets).cloned().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();

    let mut points = Vec::with_capacity(thresholds.len() + 2);
    points.push((0.0, 1.0)); // accept everything
    for &theta in &thresholds {
        let missed = targets.partition_point(|&s| s < theta) as f64;
        let accepted_nt = nn - nontargets.partition_point(|&s| s < theta) as f64;
        points.push((missed / nt, accepted_nt / nn));
    }
    points.push((1.0, 0.0)); // reject everything
    points
}

fn eer_from_points(points: &[(f64, f64)]) -> f64 {
    for i in 0..points.len() {
        let d = points[i].0 - points[i].1;
        if d >= 0.0 {
            if d == 0.0 || i == 0 {
                return points[i].0;
            }
            let (pm0, pf0) = points[i - 1];
            let (pm1, _) = points[i];
            let d0 = pm0 - pf0;
            let t = -d0 / (d - d0);
            return pm0 + t * (pm1 - pm0);
        }
    }
    // P_miss stays below P_fa everywhere except the final reject-all point,
    // which the loop always reaches (d = 1 there).
    1.0
}

/// Equal error rate via threshold sweep with linear interpolation between
/// adjacent operating points.
pub fn compute_eer(scores: &ScoreSet) -> Result<f64> {
    let (targets, nontargets) = split_scores(scores)?;
    Ok(eer_from_points(&operating_points(&targets, &nontargets)))
}

fn min_cost_from_points(points: &[(f64, f64)], p_target: f64) -> f64 {
    let beta = (1.0 - p_target) / p_target;
    points
        .iter()
        .map(|&(pm, pf)| pm + beta * pf)
        .fold(f64::INFINITY, f64::min)
}

/// minC_primary: mean of the minimum normalized detection costs at target
/// priors 0.01 and 0.005 with unit miss/false-alarm costs.
pub fn compute_min_cprimary(scores: &ScoreSet) -> Result<f64> {
    let (targets, nontargets) = split_scores(scores)?;
    let points = operating_points(&targets, &nontargets);
    Ok(0.5 * (min_cost_from_points(&points, 0.01) + min_cost_from_points(&points, 0.005)))
}

/// Mean of scores across systems; trial keys must match exactly.
pub fn fuse_scores(sets: &[ScoreSet]) -> Result<ScoreSet> {
    if sets.is_empty() {
        return Err(Error::InvalidData("no score sets to fuse".into()));
    }
    let first = &sets[0];
    let mut sums: Vec<f64> = first.trials().iter().map(|t| t.score).collect();
    for (k, set) in sets.iter().enumerate().skip(1) {
        if set.len() != first.len() {
            return Err(Error::InvalidData(format!(
                "score set {k} has {} trials, expected {}",
                set.len(),
                first.len()
            )));
        }
        let mut index: BTreeMap<(&str, &str), f64> = BTreeMap::new();
        for t in set.trials() {
            index.insert((t.enroll_id.as_str(), t.test_id.as_str()), t.score);
        }
        let mut missing = Vec::new();
        for (i, t) in first.trials().iter().enumerate() {
            match index.get(&(t.enroll_id.as_str(), t.test_id.as_str())) {
                Some(&s) => sums[i] += s,
                None => missing.push(format!("({}, {})", t.enroll_id, t.test_id)),
            }
        }
        if !missing.is_empty() {
            let shown = missing.iter().take(5).cloned().collect::<Vec<_>>().join(", ");
            return Err(Error::InvalidData(format!(
                "score set {k} is missing {} trials from set 0: {shown}{}",
                missing.len(),
                if missing.len() > 5 { ", ..." } else { "" }
            )));
        }
    }
    let n = sets.len() as f64;
    let trials = first
        .trials()
        .iter()
        .zip(sums)
        .map(|(t, s)| TrialScore {
            score: s / n,
            ..t.clone()
        })
        .collect();
    ScoreSet::new(trials)
}

/// Overall metrics plus one row per distinct partition key; an empty key is
/// reported under "all".
pub fn report(scores: &ScoreSet) -> Result<MetricReport> {
    let eer = compute_eer(scores)?;
    let min_c = compute_min_cprimary(scores)?;

    let mut groups: BTreeMap<String, Vec<TrialScore>> = BTreeMap::new();
    for t in scores.trials() {
        let key = if t.partition.is_empty() { "all".to_string() } else { t.partition.clone() };
        groups.entry(key).or_default().push(t.clone());
    }

    let mut partitions = BTreeMap::new();
    for (key, trials) in groups {
        let subset = ScoreSet::new(trials)?;
        match (compute_eer(&subset), compute_min_cprimary(&subset)) {
            (Ok(p_eer), Ok(p_minc)) => {
                let targets = subset
                    .trials()
                    .iter()
                    .filter(|t| t.label == TrialLabel::Target)
                    .count();
                let nontargets = subset
                    .trials()
                    .iter()
                    .filter(|t| t.label == TrialLabel::NonTarget)
                    .count();
                partitions.insert(
                    key,
                    PartitionMetrics { eer: p_eer, min_c_primary: p_minc, targets, nontargets },
                );
            }
            _ => {
                log::warn!("partition '{key}' lacks labeled trials on both sides; skipped");
            }
        }
    }

    let equalized = if partitions.len() >= 2 {
        let n = partitions.len() as f64;
        let eer_mean = partitions.values().map(|p| p.eer).sum::<f64>() / n;
        let minc_mean = partitions.values().map(|p| p.min_c_primary).sum::<f64>() / n;
        Some((eer_mean, minc_mean))
    } else {
        None
    };

    Ok(MetricReport { eer, min_c_primary: min_c, partitions, equalized })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn set_from(targets: &[f64], nontargets: &[f64]) -> ScoreSet {
        let mut trials = Vec::new();
        for (i, &s) in targets.iter().enumerate() {
            trials.push(TrialScore {
                enroll_id: format!("e{i}"),
                test_id: format!("tt{i}"),
                score: s,
                label: TrialLabel::Target,
                partition: String::new(),
            });
        }
        for (i, &s) in nontargets.iter().enumerate() {
            trials.push(TrialScore {
                enroll_id: format!("e{i}"),
                test_id: format!("nt{i}"),
                score: s,
                label: TrialLabel::NonTarget,
                partition: String::new(),
            });
        }
        ScoreSet::new(trials).unwrap()
    }

    /// O(n^2) reference: enumerate every candidate threshold by direct
    /// counting, then apply the same crossing rule.
    fn eer_bruteforce(targets: &[f64], nontargets: &[f64]) -> f64 {
        let mut thresholds: Vec<f64> = targets.iter().chain(nontargets).cloned().collect();
        thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        thresholds.dedup();
        let mut points = vec![(0.0, 1.0)];
        for &theta in &thresholds {
            let pm = targets.iter().filter(|&&s| s < theta).count() as f64
                / targets.len() as f64;
            let pf = nontargets.iter().filter(|&&s| s >= theta).count() as f64
                / nontargets.len() as f64;
            points.push((pm, pf));
        }
        points.push((1.0, 0.0));
        for i in 0..points.len() {
            let d = points[i].0 - points[i].1;
            if d >= 0.0 {
                if d == 0.0 || i == 0 {
                    return points[i].0;
                }
                let (pm0, pf0) = points[i - 1];
                let d0 = pm0 - pf0;
                let t = -d0 / (d - d0);
                return pm0 + t * (points[i].0 - pm0);
            }
        }
        1.0
    }

    fn minc_bruteforce(targets: &[f64], nontargets: &[f64]) -> f64 {
        let mut thresholds: Vec<f64> = targets.iter().chain(nontargets).cloned().collect();
        thresholds.push(f64::NEG_INFINITY);
        thresholds.push(f64::INFINITY);
        let mut best = [f64::INFINITY; 2];
        for (bi, p_t) in [0.01, 0.005].into_iter().enumerate() {
            let beta = (1.0 - p_t) / p_t;
            for &theta in &thresholds {
                let pm = targets.iter().filter(|&&s| s < theta).count() as f64
                    / targets.len() as f64;
                let pf = nontargets.iter().filter(|&&s| s >= theta).count() as f64
                    / nontargets.len() as f64;
                best[bi] = best[bi].min(pm + beta * pf);
            }
        }
        0.5 * (best[0] + best[1])
    }

    #[test]
    fn eer_perfect_separation_is_zero() {
        let s = set_from(&[2.0, 3.0], &[0.0, 1.0]);
        assert_eq!(compute_eer(&s).unwrap(), 0.0);
    }

    #[test]
    fn eer_interleaved_is_half() {
        let s = set_from(&[0.0, 2.0], &[1.0, 3.0]);
        assert_abs_diff_eq!(compute_eer(&s).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn eer_anti_separation_is_one() {
        // Swapped labels of a perfectly separated set.
        let s = set_from(&[0.0, 1.0], &[2.0, 3.0]);
        let eer = compute_eer(&s).unwrap();
        assert_abs_diff_eq!(eer, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            eer,
            eer_bruteforce(&[0.0, 1.0], &[2.0, 3.0]),
            epsilon = 1e-15
        );
    }

    #[test]
    fn eer_matches_bruteforce_on_random_sets() {
        let mut rng = ChaCha20Rng::seed_from_u64(2024);
        for round in 0..30 {
            let nt = 3 + (round % 40);
            let nn = 3 + (round * 7 % 60);
            let targets: Vec<f64> = (0..nt).map(|_| rng.random::<f64>() * 4.0 - 1.0).collect();
            let nontargets: Vec<f64> = (0..nn).map(|_| rng.random::<f64>() * 4.0 - 2.5).collect();
            let s = set_from(&targets, &nontargets);
            let fast = compute_eer(&s).unwrap();
            let slow = eer_bruteforce(&targets, &nontargets);
            assert_abs_diff_eq!(fast, slow, epsilon = 1e-12);
        }
    }

    #[test]
    fn minc_perfect_separation_is_zero() {
        let s = set_from(&[2.0, 3.0], &[0.0, 1.0]);
        assert_eq!(compute_min_cprimary(&s).unwrap(), 0.0);
    }

    #[test]
    fn minc_identical_scores_is_one() {
        // Reject-all is optimal when scores carry no information.
        let s = set_from(&[1.0, 1.0, 1.0], &[1.0, 1.0]);
        assert_abs_diff_eq!(compute_min_cprimary(&s).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn minc_matches_bruteforce_and_is_bounded() {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        for round in 0..30 {
            let nt = 2 + (round % 25);
            let nn = 2 + (round * 5 % 50);
            let targets: Vec<f64> = (0..nt).map(|_| rng.random::<f64>() * 3.0).collect();
            let nontargets: Vec<f64> = (0..nn).map(|_| rng.random::<f64>() * 3.0 - 1.0).collect();
            let s = set_from(&targets, &nontargets);
            let fast = compute_min_cprimary(&s).unwrap();
            let slow = minc_bruteforce(&targets, &nontargets);
            assert_abs_diff_eq!(fast, slow, epsilon = 1e-12);
            assert!(fast <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn metrics_invariant_under_monotone_transforms() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let targets: Vec<f64> = (0..25).map(|_| rng.random::<f64>() * 2.0).collect();
        let nontargets: Vec<f64> = (0..40).map(|_| rng.random::<f64>() * 2.0 - 0.7).collect();
        let base = set_from(&targets, &nontargets);
        let eer0 = compute_eer(&base).unwrap();
        let minc0 = compute_min_cprimary(&base).unwrap();

        let affine = |v: f64| 2.0 * v + 3.0;
        let cubic = |v: f64| v * v * v;
        for f in [affine as fn(f64) -> f64, cubic] {
            let mapped = set_from(
                &targets.iter().map(|&v| f(v)).collect::<Vec<_>>(),
                &nontargets.iter().map(|&v| f(v)).collect::<Vec<_>>(),
            );
            assert_abs_diff_eq!(compute_eer(&mapped).unwrap(), eer0, epsilon = 1e-12);
            assert_abs_diff_eq!(
                compute_min_cprimary(&mapped).unwrap(),
                minc0,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn metrics_require_both_label_kinds() {
        let s = set_from(&[1.0], &[]);
        // set_from with empty nontargets builds fine; metric must error.
        assert!(compute_eer(&s).is_err());
        assert!(compute_min_cprimary(&s).is_err());
    }

    #[test]
    fn fuse_identical_sets_is_identity() {
        let s = set_from(&[1.0, 2.0], &[0.0]);
        let fused = fuse_scores(&[s.clone(), s.clone(), s.clone()]).unwrap();
        for (a, b) in fused.trials().iter().zip(s.trials()) {
            assert_abs_diff_eq!(a.score, b.score, epsilon = 1e-15);
            assert_eq!(a.label, b.label);
        }
    }

    #[test]
    fn fuse_averages_scores() {
        let a = set_from(&[0.2], &[0.0]);
        let b = set_from(&[0.4], &[1.0]);
        let fused = fuse_scores(&[a, b]).unwrap();
        assert_abs_diff_eq!(fused.trials()[0].score, 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(fused.trials()[1].score, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn fuse_rejects_key_mismatch() {
        let a = set_from(&[0.2], &[0.0]);
        let mut trials: Vec<TrialScore> = a.trials().to_vec();
        trials[1].test_id = "other".into();
        let b = ScoreSet::new(trials).unwrap();
        let err = fuse_scores(&[a, b]).unwrap_err();
        assert!(err.to_string().contains("missing"));
    }

    #[test]
    fn duplicate_trials_rejected() {
        let t = TrialScore {
            enroll_id: "e".into(),
            test_id: "t".into(),
            score: 0.0,
            label: TrialLabel::Target,
            partition: String::new(),
        };
        assert!(ScoreSet::new(vec![t.clone(), t]).is_err());
    }

    fn partitioned_set() -> ScoreSet {
        let mut trials = Vec::new();
        for (i, (score, label, part)) in [
            (2.0, TrialLabel::Target, "m"),
            (1.5, TrialLabel::Target, "m"),
            (0.0, TrialLabel::NonTarget, "m"),
            (0.5, TrialLabel::NonTarget, "m"),
            (3.0, TrialLabel::Target, "f"),
            (0.2, TrialLabel::NonTarget, "f"),
            (2.8, TrialLabel::Target, "f"),
            (1.9, TrialLabel::NonTarget, "f"),
        ]
        .into_iter()
        .enumerate()
        {
            trials.push(TrialScore {
                enroll_id: format!("e{i}"),
                test_id: format!("t{i}"),
                score,
                label,
                partition: part.to_string(),
            });
        }
        ScoreSet::new(trials).unwrap()
    }

    #[test]
    fn report_single_partition_matches_overall() {
        let s = set_from(&[1.0, 2.0], &[0.0, 0.5]);
        let rep = report(&s).unwrap();
        assert_eq!(rep.partitions.len(), 1);
        let row = &rep.partitions["all"];
        assert_eq!(row.eer, rep.eer);
        assert_eq!(row.min_c_primary, rep.min_c_primary);
        assert!(rep.equalized.is_none());
    }

    #[test]
    fn report_partitions_match_filtered_recomputation() {
        let s = partitioned_set();
        let rep = report(&s).unwrap();
        assert_eq!(rep.partitions.len(), 2);
        for key in ["m", "f"] {
            let filtered = ScoreSet::new(
                s.trials()
                    .iter()
                    .filter(|t| t.partition == key)
                    .cloned()
                    .collect(),
            )
            .unwrap();
            let row = &rep.partitions[key];
            assert_eq!(row.eer, compute_eer(&filtered).unwrap());
            assert_eq!(row.min_c_primary, compute_min_cprimary(&filtered).unwrap());
        }
        let (eq_eer, eq_minc) = rep.equalized.unwrap();
        let mean_eer =
            (rep.partitions["m"].eer + rep.partitions["f"].eer) / 2.0;
        let mean_minc = (rep.partitions["m"].min_c_primary
            + rep.partitions["f"].min_c_primary)
            / 2.0;
        assert_abs_diff_eq!(eq_eer, mean_eer, epsilon = 1e-15);
        assert_abs_diff_eq!(eq_minc, mean_minc, epsilon = 1e-15);
    }
}
