//! Ranking evaluation: average precision / mAP, MRR, and permutation
//! feature importance.
//!
//! mAP sorts each group's items by score (ties broken by ascending
//! original index, so evaluation is deterministic), then averages
//! precision@k over the ranks that hold purchased items. Groups without a
//! purchase are excluded from the mean and counted separately.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::features::FeatureValue;
use crate::model::Model;
use crate::rng::Rng;
use crate::train::RankingGroup;

/// One query's scored items.
#[derive(Debug, Clone)]
pub struct ScoredGroup {
    pub query_id: u64,
    /// (score, purchased) per item, original presentation order.
    pub items: Vec<(f64, bool)>,
}

impl ScoredGroup {
    pub fn positives(&self) -> usize {
        self.items.iter().filter(|(_, p)| *p).count()
    }
}

/// Average precision of one group. Requires at least one positive.
pub fn average_precision(group: &ScoredGroup) -> Result<f64> {
    let n_pos = group.positives();
    if n_pos == 0 {
        return Err(Error::contract(format!(
            "group {} has no positive items",
            group.query_id
        )));
    }
    let mut order: Vec<usize> = (0..group.items.len()).collect();
    order.sort_by(|&a, &b| {
        group.items[b]
            .0
            .total_cmp(&group.items[a].0)
            .then(a.cmp(&b))
    });
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (k, &idx) in order.iter().enumerate() {
        if group.items[idx].1 {
            hits += 1;
            ap += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(ap / n_pos as f64)
}

/// Reciprocal rank of the single positive (only defined for groups with
/// exactly one purchase).
fn reciprocal_rank(group: &ScoredGroup) -> Option<f64> {
    if group.positives() != 1 {
        return None;
    }
    average_precision(group).ok() // AP == MRR for one positive
}

/// mAP over eligible groups (those with >= 1 positive).
pub fn mean_ap(groups: &[ScoredGroup]) -> Result<f64> {
    let mut sum = 0.0;
    let mut q = 0usize;
    for g in groups {
        if g.positives() > 0 {
            sum += average_precision(g)?;
            q += 1;
        }
    }
    if q == 0 {
        return Err(Error::UndefinedMetric("no groups with positives".into()));
    }
    Ok(sum / q as f64)
}

/// Full evaluation summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub map: f64,
    /// MRR over single-positive groups (the mAP approximation the metric
    /// section leans on); None when no such group exists.
    pub mrr_single_positive: Option<f64>,
    pub eligible_groups: usize,
    pub excluded_groups: usize,
}

pub fn evaluate_scored(groups: &[ScoredGroup]) -> Result<EvalSummary> {
    let map = mean_ap(groups)?;
    let mut mrr_sum = 0.0;
    let mut mrr_n = 0usize;
    let mut eligible = 0usize;
    for g in groups {
        if g.positives() > 0 {
            eligible += 1;
        }
        if let Some(rr) = reciprocal_rank(g) {
            mrr_sum += rr;
            mrr_n += 1;
        }
    }
    Ok(EvalSummary {
        map,
        mrr_single_positive: (mrr_n > 0).then(|| mrr_sum / mrr_n as f64),
        eligible_groups: eligible,
        excluded_groups: groups.len() - eligible,
    })
}

/// Score every group with the model's primary task and evaluate.
pub fn evaluate_model(model: &Model, groups: &[RankingGroup]) -> Result<EvalSummary> {
    let scored = score_groups(model, groups)?;
    evaluate_scored(&scored)
}

pub fn score_groups(model: &Model, groups: &[RankingGroup]) -> Result<Vec<ScoredGroup>> {
    groups
        .iter()
        .map(|g| {
            let scores = model.primary_scores(&g.records)?;
            let purchases = g.primary_labels()?;
            Ok(ScoredGroup {
                query_id: g.query_id,
                items: scores
                    .into_iter()
                    .zip(purchases.iter().map(|&y| y != 0))
                    .collect(),
            })
        })
        .collect()
}

/// Expected mAP of a uniformly random scorer on these groups: for a group
/// with one positive among n items this is H(n)/n.
pub fn expected_random_map(groups: &[ScoredGroup]) -> Result<f64> {
    let mut sum = 0.0;
    let mut q = 0usize;
    for g in groups {
        let n = g.items.len();
        match g.positives() {
            0 => continue,
            1 => {
                let h: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
                sum += h / n as f64;
            }
            _ => {
                // Monte Carlo for multi-positive groups; exact form is not
                // needed at desk scale.
                let mut rng = Rng::stream(g.query_id, "random-map");
                let mut acc = 0.0;
                let trials = 200;
                for _ in 0..trials {
                    let scored = ScoredGroup {
                        query_id: g.query_id,
                        items: g.items.iter().map(|&(_, p)| (rng.next_f64(), p)).collect(),
                    };
                    acc += average_precision(&scored)?;
                }
                sum += acc / trials as f64;
            }
        }
        q += 1;
    }
    if q == 0 {
        return Err(Error::UndefinedMetric("no eligible groups".into()));
    }
    Ok(sum / q as f64)
}

/// Result of a permutation-importance measurement.
#[derive(Debug, Clone)]
pub struct ImportanceResult {
    pub baseline_map: f64,
    /// mAP drop (baseline - shuffled) per repeat.
    pub drops: Vec<f64>,
}

impl ImportanceResult {
    pub fn mean_drop(&self) -> f64 {
        self.drops.iter().sum::<f64>() / self.drops.len() as f64
    }

    /// Sample standard error of the mean drop.
    pub fn std_error(&self) -> f64 {
        let n = self.drops.len() as f64;
        if n < 2.0 {
            return f64::NAN;
        }
        let mean = self.mean_drop();
        let var = self.drops.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    }
}

/// Shuffle the named feature's raw values across all items of the
/// evaluation set (a feature pair shuffles both, with independent
/// permutations), re-score, and report the mAP drop per repeat.
///
/// The identity permutation can be forced with `n_repeats = 0` semantics
/// via [`perm_importance_with`]; the public entry always draws seeded
/// permutations.
pub fn perm_importance(
    model: &Model,
    groups: &[RankingGroup],
    features: &[&str],
    n_repeats: usize,
    seed: u64,
) -> Result<ImportanceResult> {
    if n_repeats == 0 {
        return Err(Error::contract("perm_importance needs n_repeats >= 1"));
    }
    perm_importance_with(model, groups, features, n_repeats, seed, false)
}

/// As [`perm_importance`], with an escape hatch that forces every
/// permutation to be the identity (a self-test of the pipeline).
pub fn perm_importance_with(
    model: &Model,
    groups: &[RankingGroup],
    features: &[&str],
    n_repeats: usize,
    seed: u64,
    force_identity: bool,
) -> Result<ImportanceResult> {
    if features.is_empty() || features.len() > 2 {
        return Err(Error::contract("perm_importance takes one feature or a pair"));
    }
    let mut feat_idx = Vec::new();
    for f in features {
        feat_idx.push(model.schema.index_of(f)?);
    }
    let baseline = evaluate_model(model, groups)?.map;

    let total_items: usize = groups.iter().map(|g| g.records.len()).sum();
    let mut drops = Vec::with_capacity(n_repeats);
    for rep in 0..n_repeats {
        let mut shuffled: Vec<RankingGroup> = groups.to_vec();
        for (fi, &col) in feat_idx.iter().enumerate() {
            let perm = if force_identity {
                (0..total_items).collect::<Vec<usize>>()
            } else {
                let mut rng = Rng::stream(seed, &format!("perm/{rep}/{fi}"));
                rng.permutation(total_items)
            };
            // flatten, permute, scatter back
            let pool: Vec<FeatureValue> = groups
                .iter()
                .flat_map(|g| g.records.iter().map(move |r| r.values[col].clone()))
                .collect();
            let mut cursor = 0usize;
            for g in shuffled.iter_mut() {
                for r in g.records.iter_mut() {
                    r.values[col] = pool[perm[cursor]].clone();
                    cursor += 1;
                }
            }
        }
        let map = evaluate_model(model, &shuffled)?.map;
        drops.push(baseline - map);
    }
    Ok(ImportanceResult { baseline_map: baseline, drops })
}

/// Normalize per-category drops into percentages summing to 100.
/// Negative drops clamp to zero. An all-zero total is reported as the
/// uniform split with `degenerate = true`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImportance {
    pub shares: Vec<(String, f64)>,
    pub degenerate: bool,
}

pub fn normalize_importance(drops: &[(String, f64)]) -> Result<NormalizedImportance> {
    if drops.is_empty() {
        return Err(Error::contract("normalize_importance over zero categories"));
    }
    let clamped: Vec<f64> = drops.iter().map(|(_, d)| d.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    if total == 0.0 {
        let share = 100.0 / drops.len() as f64;
        return Ok(NormalizedImportance {
            shares: drops.iter().map(|(n, _)| (n.clone(), share)).collect(),
            degenerate: true,
        });
    }
    Ok(NormalizedImportance {
        shares: drops
            .iter()
            .zip(&clamped)
            .map(|((n, _), c)| (n.clone(), 100.0 * c / total))
            .collect(),
        degenerate: false,
    })
}

/// Map of metric rows used by the report CSV.
pub fn summary_rows(s: &EvalSummary) -> BTreeMap<String, f64> {
    let mut rows = BTreeMap::new();
    rows.insert("map".into(), s.map);
    if let Some(mrr) = s.mrr_single_positive {
        rows.insert("mrr_single_positive".into(), mrr);
    }
    rows.insert("eligible_groups".into(), s.eligible_groups as f64);
    rows.insert("excluded_groups".into(), s.excluded_groups as f64);
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sg(items: Vec<(f64, bool)>) -> ScoredGroup {
        ScoredGroup { query_id: 1, items }
    }

    #[test]
    fn ap_single_positive_first_of_three() {
        let g = sg(vec![(0.9, true), (0.5, false), (0.1, false)]);
        assert_eq!(average_precision(&g).unwrap(), 1.0);
    }

    #[test]
    fn ap_single_positive_second_of_two() {
        let g = sg(vec![(0.9, false), (0.5, true)]);
        assert_eq!(average_precision(&g).unwrap(), 0.5);
    }

    // Positives at ranks 1 and 3 of 4: (1/1 + 2/3) / 2 = 5/6.
    #[test]
    fn ap_two_positives_ranks_one_and_three() {
        let g = sg(vec![(0.9, true), (0.7, false), (0.5, true), (0.1, false)]);
        let ap = average_precision(&g).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn ap_ties_break_by_original_index() {
        // equal scores: item order decides; positive at index 0 ranks first
        let g = sg(vec![(0.5, true), (0.5, false)]);
        assert_eq!(average_precision(&g).unwrap(), 1.0);
        let g2 = sg(vec![(0.5, false), (0.5, true)]);
        assert_eq!(average_precision(&g2).unwrap(), 0.5);
    }

    #[test]
    fn ap_rejects_zero_positives() {
        let g = sg(vec![(0.5, false)]);
        assert!(average_precision(&g).is_err());
    }

    #[test]
    fn ap_invariant_under_monotone_score_transform() {
        let mut rng = Rng::new(3);
        for _ in 0..200 {
            let n = 2 + rng.next_below(8) as usize;
            let mut items: Vec<(f64, bool)> =
                (0..n).map(|_| (rng.next_range(-3.0, 3.0), rng.next_f64() < 0.4)).collect();
            if !items.iter().any(|(_, p)| *p) {
                items[0].1 = true;
            }
            let g = sg(items.clone());
            // strictly monotone map: 2x + exp(x)
            let g2 = sg(items.iter().map(|&(s, p)| (2.0 * s + s.exp(), p)).collect());
            assert_eq!(
                average_precision(&g).unwrap(),
                average_precision(&g2).unwrap()
            );
        }
    }

    #[test]
    fn mean_ap_cases() {
        let groups = vec![
            sg(vec![(0.9, true), (0.1, false)]),          // AP 1.0
            sg(vec![(0.9, false), (0.5, true)]),          // AP 0.5
        ];
        assert_eq!(mean_ap(&groups).unwrap(), 0.75);
        assert_eq!(mean_ap(&groups[..1]).unwrap(), 1.0);
        let empty: Vec<ScoredGroup> = vec![sg(vec![(0.1, false)])];
        assert!(matches!(mean_ap(&empty), Err(Error::UndefinedMetric(_))));
    }

    /// Independent brute-force mAP: for each group, for each positive,
    /// count items ranked above it (score higher, or equal with lower
    /// index).
    fn brute_force_map(groups: &[ScoredGroup]) -> f64 {
        let mut aps = Vec::new();
        for g in groups {
            let pos: Vec<usize> = (0..g.items.len()).filter(|&i| g.items[i].1).collect();
            if pos.is_empty() {
                continue;
            }
            // rank of item i = 1 + #{j : beats i}
            let rank = |i: usize| -> usize {
                1 + (0..g.items.len())
                    .filter(|&j| {
                        j != i
                            && (g.items[j].0 > g.items[i].0
                                || (g.items[j].0 == g.items[i].0 && j < i))
                    })
                    .count()
            };
            let mut ranks: Vec<usize> = pos.iter().map(|&i| rank(i)).collect();
            ranks.sort_unstable();
            let ap: f64 = ranks
                .iter()
                .enumerate()
                .map(|(h, &r)| (h + 1) as f64 / r as f64)
                .sum::<f64>()
                / pos.len() as f64;
            aps.push(ap);
        }
        aps.iter().sum::<f64>() / aps.len() as f64
    }

    #[test]
    fn mean_ap_matches_brute_force_including_ties() {
        let mut rng = Rng::new(100);
        let mut groups = Vec::new();
        for q in 0..1000 {
            let n = 1 + rng.next_below(12) as usize;
            let mut items: Vec<(f64, bool)> = (0..n)
                .map(|_| {
                    // coarse scores so ties actually happen
                    let s = (rng.next_below(5) as f64) / 2.0;
                    (s, rng.next_f64() < 0.3)
                })
                .collect();
            if !items.iter().any(|(_, p)| *p) {
                let k = rng.next_below(n as u64) as usize;
                items[k].1 = true;
            }
            groups.push(ScoredGroup { query_id: q, items });
        }
        let a = mean_ap(&groups).unwrap();
        let b = brute_force_map(&groups);
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    // Expected AP under random scores with 1 positive among n is H(n)/n;
    // empirical check within 3 sigma at n = 5 over 10,000 trials.
    #[test]
    fn random_scorer_expected_ap_harmonic_identity() {
        let n = 5;
        let expect: f64 = (1..=n).map(|k| 1.0 / k as f64).sum::<f64>() / n as f64;
        let trials = 10_000;
        let mut rng = Rng::new(555);
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..trials {
            let pos = rng.next_below(n as u64) as usize;
            let items: Vec<(f64, bool)> =
                (0..n).map(|i| (rng.next_f64(), i == pos)).collect();
            let ap = average_precision(&sg(items)).unwrap();
            sum += ap;
            sum2 += ap * ap;
        }
        let mean = sum / trials as f64;
        let var = sum2 / trials as f64 - mean * mean;
        let sigma_mean = (var / trials as f64).sqrt();
        assert!(
            (mean - expect).abs() < 3.0 * sigma_mean,
            "mean {mean}, expect {expect}, 3sigma {}",
            3.0 * sigma_mean
        );
    }

    #[test]
    fn expected_random_map_single_positive() {
        let g = sg(vec![(0.0, true), (0.0, false), (0.0, false), (0.0, false), (0.0, false)]);
        let want: f64 = (1..=5).map(|k| 1.0 / k as f64).sum::<f64>() / 5.0;
        assert!((expected_random_map(&[g]).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn normalize_importance_cases() {
        let one = normalize_importance(&[("a".into(), 0.4)]).unwrap();
        assert_eq!(one.shares[0].1, 100.0);
        assert!(!one.degenerate);

        let two = normalize_importance(&[("a".into(), 1.0), ("b".into(), 3.0)]).unwrap();
        assert_eq!(two.shares[0].1, 25.0);
        assert_eq!(two.shares[1].1, 75.0);

        let zero = normalize_importance(&[("a".into(), 0.0), ("b".into(), -0.2)]).unwrap();
        assert!(zero.degenerate);
        assert_eq!(zero.shares[0].1, 50.0);
    }

    #[test]
    fn mrr_equals_ap_for_single_positive() {
        let g = sg(vec![(0.1, false), (0.9, true), (0.5, false)]);
        let s = evaluate_scored(&[g]).unwrap();
        assert_eq!(s.mrr_single_positive, Some(s.map));
    }
}
