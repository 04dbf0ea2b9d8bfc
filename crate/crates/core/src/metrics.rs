//! Detection metrics: EER, minimum normalized detection cost, and DET
//! staircase points.
//!
//! All metrics sweep the same operating points: one per distinct score,
//! with the convention "accept when score >= threshold", so
//! `p_miss = #(targets < t) / n_target` and `p_fa = #(nontargets >= t) /
//! n_nontarget`, plus a virtual reject-all endpoint. EER interpolates
//! linearly between the two staircase points bracketing `p_miss = p_fa`.
//! Everything is a rank statistic: strictly increasing score transforms
//! change nothing.

use serde::{Deserialize, Serialize};

use crate::data::{Key, ScoreSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

/// Detection cost parameters; the reported min cost averages over the
/// operating points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostParams {
    pub operating_points: Vec<OperatingPoint>,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            operating_points: vec![
                OperatingPoint { p_target: 0.01, c_miss: 1.0, c_fa: 1.0 },
                OperatingPoint { p_target: 0.005, c_miss: 1.0, c_fa: 1.0 },
            ],
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        if self.operating_points.is_empty() {
            return Err(Error::config("cost parameters need >= 1 operating point"));
        }
        for p in &self.operating_points {
            if !(p.p_target > 0.0 && p.p_target < 1.0) {
                return Err(Error::config(format!(
                    "p_target must be in (0, 1), got {}",
                    p.p_target
                )));
            }
            if p.c_miss <= 0.0 || p.c_fa <= 0.0 {
                return Err(Error::config("detection costs must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PointReport {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
    pub min_c: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub eer: f64,
    pub min_c: f64,
    pub threshold_at_eer: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
    pub per_operating_point: Vec<PointReport>,
}

/// Labeled scores split and sorted; unknown keys are dropped with a counted
/// warning.
struct LabeledScores {
    targets: Vec<f64>,
    nontargets: Vec<f64>,
}

fn split_scores(scores: &ScoreSet) -> Result<LabeledScores> {
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    let mut unknown = 0usize;
    for e in &scores.entries {
        match e.key {
            Key::Target => targets.push(e.score),
            Key::Nontarget => nontargets.push(e.score),
            Key::Unknown => unknown += 1,
        }
    }
    if unknown > 0 {
        log::warn!("metrics: excluded {unknown} trial(s) with unknown key");
    }
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::data(format!(
            "metrics need >= 1 target and >= 1 nontarget trial (got {} / {})",
            targets.len(),
            nontargets.len()
        )));
    }
    targets.sort_by(f64::total_cmp);
    nontargets.sort_by(f64::total_cmp);
    Ok(LabeledScores { targets, nontargets })
}

/// One point per distinct score, ascending threshold. `p_miss` is
/// non-decreasing and `p_fa` non-increasing along the list.
fn staircase(ls: &LabeledScores) -> Vec<DetPoint> {
    let nt = ls.targets.len() as f64;
    let nn = ls.nontargets.len() as f64;
    let mut thresholds: Vec<f64> = Vec::with_capacity(ls.targets.len() + ls.nontargets.len());
    thresholds.extend_from_slice(&ls.targets);
    thresholds.extend_from_slice(&ls.nontargets);
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let mut points = Vec::with_capacity(thresholds.len());
    let mut ti = 0usize; // targets strictly below the threshold
    let mut ni = 0usize; // nontargets strictly below the threshold
    for &t in &thresholds {
        while ti < ls.targets.len() && ls.targets[ti] < t {
            ti += 1;
        }
        while ni < ls.nontargets.len() && ls.nontargets[ni] < t {
            ni += 1;
        }
        points.push(DetPoint {
            threshold: t,
            p_miss: ti as f64 / nt,
            p_fa: (ls.nontargets.len() - ni) as f64 / nn,
        });
    }
    points
}

/// Virtual reject-all endpoint appended for the sweeps.
const REJECT_ALL: DetPoint = DetPoint {
    threshold: f64::INFINITY,
    p_miss: 1.0,
    p_fa: 0.0,
};

fn eer_from_points(points: &[DetPoint]) -> (f64, f64) {
    let mut prev: Option<&DetPoint> = None;
    for p in points.iter().chain(std::iter::once(&REJECT_ALL)) {
        let diff = p.p_miss - p.p_fa;
        if diff >= 0.0 {
            match prev {
                None => return (p.p_miss.max(p.p_fa), p.threshold),
                Some(q) => {
                    let diff_prev = q.p_miss - q.p_fa;
                    if diff == 0.0 {
                        return (p.p_miss, p.threshold);
                    }
                    // linear interpolation between the bracketing points
                    let alpha = -diff_prev / (diff - diff_prev);
                    let eer = q.p_miss + alpha * (p.p_miss - q.p_miss);
                    let thr = if p.threshold.is_finite() {
                        q.threshold + alpha * (p.threshold - q.threshold)
                    } else {
                        q.threshold
                    };
                    return (eer, thr);
                }
            }
        }
        prev = Some(p);
    }
    // p_miss - p_fa reaches +1 at the virtual endpoint, so a crossing
    // always exists
    unreachable!("threshold sweep must cross p_miss = p_fa");
}

/// Equal error rate with linear interpolation, plus the threshold at which
/// it occurs.
pub fn compute_eer(scores: &ScoreSet) -> Result<(f64, f64)> {
    let ls = split_scores(scores)?;
    let points = staircase(&ls);
    Ok(eer_from_points(&points))
}

fn min_cost_at(points: &[DetPoint], op: &OperatingPoint) -> f64 {
    let miss_w = op.c_miss * op.p_target;
    let fa_w = op.c_fa * (1.0 - op.p_target);
    let norm = miss_w.min(fa_w);
    let mut best = f64::INFINITY;
    for p in points.iter().chain(std::iter::once(&REJECT_ALL)) {
        let cost = (miss_w * p.p_miss + fa_w * p.p_fa) / norm;
        if cost < best {
            best = cost;
        }
    }
    best
}

/// Minimum normalized detection cost, averaged over operating points.
pub fn compute_min_cost(scores: &ScoreSet, params: &CostParams) -> Result<f64> {
    Ok(evaluate(scores, params)?.min_c)
}

/// DET staircase, one point per distinct score.
pub fn det_points(scores: &ScoreSet) -> Result<Vec<DetPoint>> {
    let ls = split_scores(scores)?;
    Ok(staircase(&ls))
}

/// Full metric report: EER, per-operating-point min cost, and their mean.
pub fn evaluate(scores: &ScoreSet, params: &CostParams) -> Result<MetricReport> {
    params.validate()?;
    let ls = split_scores(scores)?;
    let points = staircase(&ls);
    let (eer, threshold_at_eer) = eer_from_points(&points);
    let per_operating_point: Vec<PointReport> = params
        .operating_points
        .iter()
        .map(|op| PointReport {
            p_target: op.p_target,
            c_miss: op.c_miss,
            c_fa: op.c_fa,
            min_c: min_cost_at(&points, op),
        })
        .collect();
    let min_c = per_operating_point.iter().map(|p| p.min_c).sum::<f64>()
        / per_operating_point.len() as f64;
    Ok(MetricReport {
        eer,
        min_c,
        threshold_at_eer,
        n_target: ls.targets.len(),
        n_nontarget: ls.nontargets.len(),
        per_operating_point,
    })
}
