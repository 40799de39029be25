//! Scoring: optimal assignment, perception rate / estimation error, and
//! multi-label accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};

/// Objects count as discovered when their matched MSE is strictly below this.
pub const PERCEPTION_THRESHOLD: f64 = 0.002;

/// MSE of a coordinate pair: mean over the two axes of the squared error.
/// Switch the divisor to 1.0 for the summed convention.
pub const MSE_AXIS_DIVISOR: f64 = 2.0;

pub fn pair_mse(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)) / MSE_AXIS_DIVISOR
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `pairs[i]` is the column matched to row i, if any.
    pub pairs: Vec<Option<usize>>,
    /// Sum of matched costs, accumulated in row order.
    pub cost: f64,
}

/// Minimum-cost injective assignment of min(n, m) pairs for an n×m cost
/// matrix (O(k³) shortest augmenting paths with potentials). Rectangular
/// inputs are padded to square with max finite cost + 1.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = cost.len();
    if n == 0 || cost[0].is_empty() {
        return Err(param("cost", "matrix must be at least 1×1"));
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) {
        return Err(param("cost", "rows have different lengths"));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric { context: "assignment cost matrix".into() });
    }
    let k = n.max(m);
    let pad = cost.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) + 1.0;
    let at = |i: usize, j: usize| if i < n && j < m { cost[i][j] } else { pad };

    // 1-based arrays; column 0 is the virtual source.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; k + 1];
    let mut v = vec![0.0; k + 1];
    let mut row_of = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for i in 1..=k {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=k {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=k {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs = vec![None; n];
    for j in 1..=k {
        let i = row_of[j];
        if i >= 1 && i <= n && j <= m {
            pairs[i - 1] = Some(j - 1);
        }
    }
    let cost_sum = pairs.iter().enumerate().filter_map(|(i, p)| p.map(|j| cost[i][j])).sum();
    Ok(Assignment { pairs, cost: cost_sum })
}

/// Exhaustive minimum over all injective assignments; a reference for tests.
pub fn brute_force_match(cost: &[Vec<f64>]) -> Assignment {
    let n = cost.len();
    let m = cost[0].len();
    let mut best = Assignment { pairs: vec![None; n], cost: f64::INFINITY };
    let mut cur = vec![None; n];
    let mut used = vec![false; m];
    fn rec(i: usize, cost: &[Vec<f64>], cur: &mut Vec<Option<usize>>, used: &mut Vec<bool>, best: &mut Assignment) {
        let (n, m) = (cost.len(), cost[0].len());
        if i == n {
            if cur.iter().filter(|p| p.is_some()).count() == n.min(m) {
                let c: f64 = cur.iter().enumerate().filter_map(|(i, p)| p.map(|j| cost[i][j])).sum();
                if c < best.cost {
                    *best = Assignment { pairs: cur.clone(), cost: c };
                }
            }
            return;
        }
        for j in 0..m {
            if !used[j] {
                used[j] = true;
                cur[i] = Some(j);
                rec(i + 1, cost, cur, used, best);
                used[j] = false;
            }
        }
        // leave row i unmatched when there are more rows than columns
        if n > m {
            cur[i] = None;
            rec(i + 1, cost, cur, used, best);
        }
    }
    rec(0, cost, &mut cur, &mut used, &mut best);
    best
}

/// What an unmatched ground-truth object contributes to the estimation error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissPenalty {
    /// MSE between the object and the image corner (0, 0).
    CornerSentinel,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub objects: usize,
    pub matched: usize,
    pub discovered: usize,
    /// Per ground-truth object: matched MSE or the miss penalty.
    pub mse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub perception_rate: f64,
    pub estimation_error: f64,
    pub scenes: Vec<SceneMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub multi_label_accuracy: Option<f64>,
}

pub fn scene_metrics(pred: &[(f64, f64)], truth: &[(f64, f64)], penalty: MissPenalty) -> Result<SceneMetrics> {
    let mut mse: Vec<Option<f64>> = vec![None; truth.len()];
    if !pred.is_empty() && !truth.is_empty() {
        let cost: Vec<Vec<f64>> = truth.iter().map(|&t| pred.iter().map(|&p| pair_mse(t, p)).collect()).collect();
        let a = hungarian_match(&cost)?;
        for (i, p) in a.pairs.iter().enumerate() {
            mse[i] = p.map(|j| cost[i][j]);
        }
    }
    let matched = mse.iter().filter(|m| m.is_some()).count();
    let discovered = mse.iter().filter(|m| m.is_some_and(|v| v < PERCEPTION_THRESHOLD)).count();
    let mse = mse
        .iter()
        .zip(truth)
        .map(|(m, &t)| {
            m.unwrap_or(match penalty {
                MissPenalty::CornerSentinel => pair_mse(t, (0.0, 0.0)),
                MissPenalty::Fixed(v) => v,
            })
        })
        .collect();
    Ok(SceneMetrics { objects: truth.len(), matched, discovered, mse })
}

/// Perception rate (discovered / total objects) and estimation error (mean
/// per-object MSE) over a set of scenes.
pub fn perception_metrics(pred: &[Vec<(f64, f64)>], truth: &[Vec<(f64, f64)>], penalty: MissPenalty) -> Result<MetricsReport> {
    if truth.is_empty() {
        return Err(param("scenes", "need at least one scene"));
    }
    if pred.len() != truth.len() {
        return Err(param("scenes", format!("{} predictions for {} scenes", pred.len(), truth.len())));
    }
    for p in pred.iter().chain(truth).flatten() {
        if !(0.0..=1.0).contains(&p.0) || !(0.0..=1.0).contains(&p.1) {
            return Err(param("coordinates", format!("({}, {}) outside the unit square", p.0, p.1)));
        }
    }
    let scenes: Vec<SceneMetrics> =
        pred.iter().zip(truth).map(|(p, t)| scene_metrics(p, t, penalty)).collect::<Result<_>>()?;
    let total: usize = scenes.iter().map(|s| s.objects).sum();
    let found: usize = scenes.iter().map(|s| s.discovered).sum();
    let err_sum: f64 = scenes.iter().flat_map(|s| s.mse.iter()).sum();
    let (rate, err) = if total == 0 { (1.0, 0.0) } else { (found as f64 / total as f64, err_sum / total as f64) };
    Ok(MetricsReport { perception_rate: rate, estimation_error: err, scenes, multi_label_accuracy: None })
}

/// Fraction of scenes whose whole bit vector is right.
pub fn multi_label_accuracy(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(param("labels", format!("{} predictions for {} scenes", pred.len(), truth.len())));
    }
    if truth.is_empty() {
        return Err(param("labels", "need at least one scene"));
    }
    if pred.iter().zip(truth).any(|(p, t)| p.len() != t.len()) {
        return Err(param("labels", "attribute counts differ"));
    }
    let ok = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(ok as f64 / truth.len() as f64)
}
