//! Correlation statistics, test-point and candidate selection, and the
//! Taylor-gap comparison of predicted against retrained parameter changes.
//!
//! Percentiles use the nearest-rank convention: the `q`-th percentile of `m`
//! sorted values is the one at 1-based position `ceil(q * m)`.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{InfluenceError, Result};
use crate::groundtruth::GroundTruthSet;
use crate::influence::{InfluenceReport, Influencer};
use crate::linalg;
use crate::nn::{self, ModelSpec};
use crate::oracle::ErmProblem;

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(InfluenceError::DimensionMismatch {
            what: "correlation inputs",
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(InfluenceError::UndefinedCorrelation(format!(
            "need at least 2 pairs, got {}",
            xs.len()
        )));
    }
    if !linalg::all_finite(xs) || !linalg::all_finite(ys) {
        return Err(InfluenceError::UndefinedCorrelation("non-finite input".into()));
    }
    Ok(())
}

/// Sample Pearson correlation. Constant inputs are an error.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(InfluenceError::UndefinedCorrelation("constant input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the positions they occupy.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Kendall's tau-b.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    let (mut concordant, mut discordant, mut ties_x, mut ties_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            let dx = xs[i].total_cmp(&xs[j]);
            let dy = ys[i].total_cmp(&ys[j]);
            match (dx.is_eq(), dy.is_eq()) {
                (true, true) => {}
                (true, false) => ties_x += 1,
                (false, true) => ties_y += 1,
                (false, false) if dx == dy => concordant += 1,
                (false, false) => discordant += 1,
            }
        }
    }
    let nx = (concordant + discordant + ties_x) as f64;
    let ny = (concordant + discordant + ties_y) as f64;
    if nx == 0.0 || ny == 0.0 {
        return Err(InfluenceError::UndefinedCorrelation("constant input".into()));
    }
    Ok((concordant - discordant) as f64 / (nx * ny).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub pearson: f64,
    pub spearman: f64,
    pub n_pairs: usize,
    /// Candidates without a usable ground-truth value.
    pub excluded: usize,
}

/// 1-based nearest-rank position of quantile `q` among `m` sorted values.
pub fn nearest_rank(q: f64, m: usize) -> usize {
    // the epsilon keeps e.g. 0.3 * 10 from rounding up to 4
    ((q * m as f64 - 1e-9).ceil() as usize).clamp(1, m.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectionRule {
    MaxLoss,
    LossPercentile { q: f64 },
    TopK { k: usize },
    TopFraction { f: f64 },
    PercentileBand { center: f64, width: usize },
}

impl SelectionRule {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(InfluenceError::InvalidInput(msg));
        match *self {
            SelectionRule::LossPercentile { q } if !(q > 0.0 && q <= 1.0) => {
                bad(format!("loss_percentile q must be in (0, 1], got {q}"))
            }
            SelectionRule::TopFraction { f } if !(f > 0.0 && f <= 1.0) => {
                bad(format!("top_fraction f must be in (0, 1], got {f}"))
            }
            SelectionRule::TopK { k: 0 } => bad("top_k k must be at least 1".into()),
            SelectionRule::PercentileBand { center, width } if !(center > 0.0 && center <= 1.0) || width == 0 => {
                bad(format!(
                    "percentile_band needs center in (0, 1] and width >= 1, got ({center}, {width})"
                ))
            }
            _ => Ok(()),
        }
    }

    pub fn is_test_rule(&self) -> bool {
        matches!(self, SelectionRule::MaxLoss | SelectionRule::LossPercentile { .. })
    }

    /// Short label used in report tables.
    pub fn label(&self) -> String {
        match *self {
            SelectionRule::MaxLoss => "max_loss".into(),
            SelectionRule::LossPercentile { q } => format!("loss_percentile({q})"),
            SelectionRule::TopK { k } => format!("top_k({k})"),
            SelectionRule::TopFraction { f } => format!("top_fraction({f})"),
            SelectionRule::PercentileBand { center, width } => format!("percentile_band({center};{width})"),
        }
    }
}

/// Chooses an index from per-example losses: the arg-max (lowest index on
/// ties) or the nearest-rank percentile in ascending loss order.
pub fn select_by_loss(losses: &[f64], rule: &SelectionRule) -> Result<usize> {
    rule.validate()?;
    if losses.is_empty() {
        return Err(InfluenceError::InvalidInput("test set is empty".into()));
    }
    match *rule {
        SelectionRule::MaxLoss => {
            let mut best = 0;
            for (i, l) in losses.iter().enumerate() {
                if *l > losses[best] {
                    best = i;
                }
            }
            Ok(best)
        }
        SelectionRule::LossPercentile { q } => {
            let mut order: Vec<usize> = (0..losses.len()).collect();
            order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
            Ok(order[nearest_rank(q, losses.len()) - 1])
        }
        other => Err(InfluenceError::InvalidInput(format!(
            "{} selects candidates, not test points",
            other.label()
        ))),
    }
}

pub fn select_test_point(
    spec: &ModelSpec,
    theta: &[f64],
    test: &Dataset,
    rule: &SelectionRule,
) -> Result<usize> {
    select_by_loss(&nn::example_losses(spec, theta, test.examples())?, rule)
}

/// Training indices chosen from an influence report.
pub fn select_candidates(report: &InfluenceReport, rule: &SelectionRule) -> Result<Vec<usize>> {
    rule.validate()?;
    let n = report.ranking.len();
    let too_many = |what: &str, k: usize| {
        Err(InfluenceError::InvalidInput(format!(
            "{what} {k} exceeds the {n} training points"
        )))
    };
    match *rule {
        SelectionRule::TopK { k } => {
            if k > n {
                return too_many("top_k", k);
            }
            Ok(report.ranking[..k].to_vec())
        }
        SelectionRule::TopFraction { f } => {
            let k = nearest_rank(f, n);
            Ok(report.ranking[..k].to_vec())
        }
        SelectionRule::PercentileBand { center, width } => {
            if width > n {
                return too_many("percentile_band width", width);
            }
            let scores: Vec<f64> = report.scores.iter().map(|s| s.pair_influence).collect();
            let mut ascending: Vec<usize> = (0..n).collect();
            ascending.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
            let c = nearest_rank(center, n);
            let start = c.saturating_sub((width - 1) / 2).clamp(1, n - width + 1);
            Ok(ascending[start - 1..start - 1 + width].to_vec())
        }
        other => Err(InfluenceError::InvalidInput(format!(
            "{} selects test points, not candidates",
            other.label()
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorGapRow {
    pub train_index: usize,
    pub predicted_norm: f64,
    pub retrained_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorGapReport {
    pub rows: Vec<TaylorGapRow>,
    pub spearman: f64,
}

/// Predicted `||delta theta||` from the influence step against the retrained
/// one, per candidate, with the Spearman correlation of the two sequences.
pub fn taylor_gap_report<P: ErmProblem>(
    influencer: &Influencer<'_, P>,
    candidates: &[usize],
    ground_truth: &GroundTruthSet,
) -> Result<TaylorGapReport> {
    let theta = influencer.problem().params();
    let mut rows = Vec::with_capacity(candidates.len());
    for &i in candidates {
        let record = ground_truth
            .record_for(i)
            .ok_or(InfluenceError::MissingGroundTruth(i))?;
        let predicted = influencer.predict_removed_params(i)?;
        rows.push(TaylorGapRow {
            train_index: i,
            predicted_norm: linalg::distance(&predicted, theta),
            retrained_norm: record.delta_param_norm,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.predicted_norm).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.retrained_norm).collect();
    Ok(TaylorGapReport {
        spearman: spearman(&xs, &ys)?,
        rows,
    })
}

/// Paired (predicted, actual) loss changes for one test point's candidates.
/// Returns the pairs and the number of candidates without ground truth.
pub fn paired_deltas(report: &InfluenceReport, gt: &GroundTruthSet) -> (Vec<(f64, f64)>, usize) {
    let mut pairs = Vec::new();
    for r in &gt.records {
        if let [i] = r.removed[..] {
            if let Some(s) = report.score(i) {
                pairs.push((s.predicted_delta_loss, r.delta_loss_at_test));
            }
        }
    }
    (pairs, gt.failures.len())
}

/// Correlates predicted with realized loss changes. With several test
/// points, the (train, test) pairs are concatenated before correlating.
pub fn correlate_influence(reports: &[&InfluenceReport], gts: &[&GroundTruthSet]) -> Result<CorrelationResult> {
    if reports.len() != gts.len() {
        return Err(InfluenceError::DimensionMismatch {
            what: "ground-truth sets",
            expected: reports.len(),
            got: gts.len(),
        });
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut excluded = 0;
    for (report, gt) in reports.iter().zip(gts) {
        let (pairs, missing) = paired_deltas(report, gt);
        excluded += missing;
        for (x, y) in pairs {
            xs.push(x);
            ys.push(y);
        }
    }
    Ok(CorrelationResult {
        pearson: pearson(&xs, &ys)?,
        spearman: spearman(&xs, &ys)?,
        n_pairs: xs.len(),
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub experiment_id: String,
    pub test_rule: String,
    pub candidate_rule: String,
    pub solver: String,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub n_pairs: usize,
    pub excluded: usize,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.12}")).unwrap_or_default()
}

pub fn correlation_csv(rows: &[CorrelationRow]) -> String {
    let mut out =
        String::from("experiment_id,test_rule,candidate_rule,solver,pearson,spearman,n_pairs,excluded\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.experiment_id,
            r.test_rule,
            r.candidate_rule,
            r.solver,
            cell(r.pearson),
            cell(r.spearman),
            r.n_pairs,
            r.excluded
        ));
    }
    out
}
