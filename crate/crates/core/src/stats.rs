//! Rank-sum statistics: Mann-Whitney U with midrank tie handling, exact
//! enumeration for small samples, and the per-feature test battery over
//! memorization labels.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::prompt::ContextFeatures;

/// Largest pooled sample enumerated exactly.
pub const EXACT_LIMIT: usize = 20;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("both groups must be non-empty")]
    EmptyGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// Group a is stochastically smaller than group b.
    Less,
    Greater,
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    NormalTieCorrected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatTestResult {
    pub variable: String,
    pub group_a: u8,
    pub group_b: u8,
    pub n_a: usize,
    pub n_b: usize,
    /// U statistic of group a.
    pub u: f64,
    pub p_value: f64,
    pub alternative: Alternative,
    pub method: Method,
}

impl StatTestResult {
    pub fn name(&self) -> String {
        format!("mwu_{}{}", self.group_a, self.group_b)
    }
}

/// Midranks of the pooled sample: tied values share the average rank.
fn midranks(pooled: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].partial_cmp(&pooled[j]).expect("no NaN"));
    let mut ranks = vec![0.0; pooled.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && pooled[order[j]] == pooled[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = avg;
        }
        i = j;
    }
    ranks
}

fn u_from_rank_sum(rank_sum: f64, n_a: usize) -> f64 {
    rank_sum - (n_a * (n_a + 1)) as f64 / 2.0
}

/// Exact p by enumerating every assignment of pooled ranks to group a.
fn exact_p(ranks: &[f64], n_a: usize, u_obs: f64, alternative: Alternative) -> f64 {
    let n = ranks.len();
    let mut le = 0u64;
    let mut ge = 0u64;
    let mut total = 0u64;
    let eps = 1e-9;
    // Iterative combination enumeration.
    let mut idx: Vec<usize> = (0..n_a).collect();
    loop {
        let rank_sum: f64 = idx.iter().map(|&i| ranks[i]).sum();
        let u = u_from_rank_sum(rank_sum, n_a);
        total += 1;
        if u <= u_obs + eps {
            le += 1;
        }
        if u >= u_obs - eps {
            ge += 1;
        }
        // Advance to the next combination.
        let mut k = n_a;
        loop {
            if k == 0 {
                // Done.
                let p_less = le as f64 / total as f64;
                let p_greater = ge as f64 / total as f64;
                return match alternative {
                    Alternative::Less => p_less,
                    Alternative::Greater => p_greater,
                    Alternative::TwoSided => (2.0 * p_less.min(p_greater)).min(1.0),
                };
            }
            k -= 1;
            if idx[k] != k + n - n_a {
                idx[k] += 1;
                for j in k + 1..n_a {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

fn normal_p(
    ranks: &[f64],
    pooled: &[f64],
    n_a: usize,
    n_b: usize,
    u_obs: f64,
    alternative: Alternative,
) -> f64 {
    let n = (n_a + n_b) as f64;
    let mu = (n_a * n_b) as f64 / 2.0;
    // Tie correction: sum over tie groups of (t^3 - t).
    let mut sorted: Vec<f64> = pooled.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let var = (n_a * n_b) as f64 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        // Everything tied; no evidence either way.
        return 1.0;
    }
    let sd = var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let p_less = normal.cdf((u_obs + 0.5 - mu) / sd);
    let p_greater = 1.0 - normal.cdf((u_obs - 0.5 - mu) / sd);
    let _ = ranks;
    match alternative {
        Alternative::Less => p_less,
        Alternative::Greater => p_greater,
        Alternative::TwoSided => (2.0 * p_less.min(p_greater)).min(1.0),
    }
}

/// Mann-Whitney U test with midrank tie handling. Exact enumeration when
/// the pooled sample has at most [`EXACT_LIMIT`] observations, otherwise a
/// normal approximation with tie-corrected variance and continuity
/// correction.
pub fn mann_whitney_u(
    a: &[f64],
    b: &[f64],
    alternative: Alternative,
) -> Result<StatTestResult, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::EmptyGroup);
    }
    let (n_a, n_b) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    let ranks = midranks(&pooled);
    let rank_sum_a: f64 = ranks[..n_a].iter().sum();
    let u = u_from_rank_sum(rank_sum_a, n_a);
    let (p_value, method) = if n_a + n_b <= EXACT_LIMIT {
        (exact_p(&ranks, n_a, u, alternative), Method::Exact)
    } else {
        (
            normal_p(&ranks, &pooled, n_a, n_b, u, alternative),
            Method::NormalTieCorrected,
        )
    };
    Ok(StatTestResult {
        variable: String::new(),
        group_a: 0,
        group_b: 0,
        n_a,
        n_b,
        u,
        p_value,
        alternative,
        method,
    })
}

/// The six context features tested against memorization labels.
pub const FEATURE_NAMES: [&str; 6] = [
    "line_num",
    "token_num",
    "line_num_above",
    "token_num_above",
    "line_num_below",
    "token_num_below",
];

fn feature_value(f: &ContextFeatures, name: &str) -> f64 {
    match name {
        "line_num" => f.line_num as f64,
        "token_num" => f.token_num as f64,
        "line_num_above" => f.line_num_above as f64,
        "token_num_above" => f.token_num_above as f64,
        "line_num_below" => f.line_num_below as f64,
        "token_num_below" => f.token_num_below as f64,
        _ => unreachable!("unknown feature {name}"),
    }
}

/// One feature x label-pair test; `result` is None when a group was empty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureTestRun {
    pub feature: String,
    pub group_a: u8,
    pub group_b: u8,
    pub result: Option<StatTestResult>,
    pub skip_reason: Option<String>,
}

impl FeatureTestRun {
    pub fn name(&self) -> String {
        format!("mwu_{}{}", self.group_a, self.group_b)
    }
}

/// Runs mwu_XY (alternative: X stochastically smaller) for every feature
/// and every ordered label pair (1,2), (1,3), (2,3). Cases carry the label
/// of their best candidate: 1 not / 2 weakly / 3 strongly memorized.
pub fn feature_tests(cases: &[(ContextFeatures, u8)]) -> Vec<FeatureTestRun> {
    let pairs = [(1u8, 2u8), (1, 3), (2, 3)];
    let mut out = Vec::with_capacity(FEATURE_NAMES.len() * pairs.len());
    for feature in FEATURE_NAMES {
        for (x, y) in pairs {
            let group_x: Vec<f64> = cases
                .iter()
                .filter(|(_, l)| *l == x)
                .map(|(f, _)| feature_value(f, feature))
                .collect();
            let group_y: Vec<f64> = cases
                .iter()
                .filter(|(_, l)| *l == y)
                .map(|(f, _)| feature_value(f, feature))
                .collect();
            match mann_whitney_u(&group_x, &group_y, Alternative::Less) {
                Ok(mut r) => {
                    r.variable = feature.to_string();
                    r.group_a = x;
                    r.group_b = y;
                    out.push(FeatureTestRun {
                        feature: feature.to_string(),
                        group_a: x,
                        group_b: y,
                        result: Some(r),
                        skip_reason: None,
                    });
                }
                Err(StatsError::EmptyGroup) => out.push(FeatureTestRun {
                    feature: feature.to_string(),
                    group_a: x,
                    group_b: y,
                    result: None,
                    skip_reason: Some(format!(
                        "empty group: n_{x}={}, n_{y}={}",
                        group_x.len(),
                        group_y.len()
                    )),
                }),
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_small_case() {
        let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0], Alternative::Less).unwrap();
        assert_eq!(r.u, 0.0);
        assert!((r.p_value - 1.0 / 6.0).abs() < 1e-12);
        assert_eq!(r.method, Method::Exact);
    }

    #[test]
    fn full_ties_two_sided_is_one() {
        let a = [2.0, 2.0, 2.0];
        let r = mann_whitney_u(&a, &a, Alternative::TwoSided).unwrap();
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn empty_group_rejected() {
        assert!(matches!(
            mann_whitney_u(&[], &[1.0], Alternative::Less),
            Err(StatsError::EmptyGroup)
        ));
    }

    #[test]
    fn monotone_transform_invariance() {
        let a = [1.0f64, 3.0, 3.0, 7.0];
        let b = [2.0f64, 5.0, 11.0];
        let ta: Vec<f64> = a.iter().map(|x| x.exp()).collect();
        let tb: Vec<f64> = b.iter().map(|x| x.exp()).collect();
        for alt in [Alternative::Less, Alternative::Greater, Alternative::TwoSided] {
            let p1 = mann_whitney_u(&a, &b, alt).unwrap().p_value;
            let p2 = mann_whitney_u(&ta, &tb, alt).unwrap().p_value;
            assert!((p1 - p2).abs() < 1e-12);
        }
    }

    #[test]
    fn normal_method_above_limit() {
        let a: Vec<f64> = (0..15).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..15).map(|i| i as f64 + 3.0).collect();
        let r = mann_whitney_u(&a, &b, Alternative::Less).unwrap();
        assert_eq!(r.method, Method::NormalTieCorrected);
        assert!(r.p_value < 0.5);
        assert!(r.p_value > 0.0);
    }

    #[test]
    fn feature_battery_shape() {
        let mk = |l: usize| ContextFeatures {
            line_num: l,
            token_num: l * 5,
            line_num_above: l / 2,
            token_num_above: l * 2,
            line_num_below: l - l / 2,
            token_num_below: l * 3,
            tokenizer_id: "t".into(),
        };
        let cases: Vec<(ContextFeatures, u8)> = (1..=9)
            .map(|i| (mk(i), (i % 3 + 1) as u8))
            .collect();
        let runs = feature_tests(&cases);
        assert_eq!(runs.len(), 18);
        assert!(runs.iter().all(|r| r.result.is_some()));
        assert_eq!(runs[0].name(), "mwu_12");
    }

    #[test]
    fn all_same_label_skips_every_pair() {
        let f = ContextFeatures {
            line_num: 1,
            token_num: 1,
            line_num_above: 1,
            token_num_above: 1,
            line_num_below: 0,
            token_num_below: 0,
            tokenizer_id: "t".into(),
        };
        let cases = vec![(f.clone(), 1u8), (f, 1u8)];
        let runs = feature_tests(&cases);
        assert_eq!(runs.len(), 18);
        assert!(runs.iter().all(|r| r.result.is_none()));
    }
}
