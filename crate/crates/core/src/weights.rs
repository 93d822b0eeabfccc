//! Survey-weight construction and inverse-probability reweighting of
//! retrospectively observed roads back to the target road population.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::analysis::{interval_summary, IntervalSummary};
use crate::num::{real, Real};

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("stage probability {0} outside (0, 1]")]
    BadStageProbability(f64),
    #[error("membership probability {0} outside (0, 1]")]
    BadMembership(f64),
    #[error("negative report weight {0}")]
    NegativeWeight(f64),
    #[error("road {0} has no fitted rate draw")]
    MissingRate(usize),
    #[error("rate draws are empty")]
    NoDraws,
}

/// One prospective report with its resolved target weight.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedReport<R> {
    pub report_id: String,
    /// 1-based dense subtype indices identifying the road type.
    pub subtype: Vec<u32>,
    /// Whether the report involved a fatality.
    pub fatal: bool,
    /// Target weight w^t.
    pub weight: R,
}

/// Nationally representative weight from the three-stage sampling design:
/// w^n = 1 / (P(PSU) · P(PJ|PSU) · P(PAR|PJ)).
pub fn national_weight<R: Real>(p_psu: f64, p_pj: f64, p_par: f64) -> Result<R, WeightError> {
    for p in [p_psu, p_pj, p_par] {
        if !(p > 0.0 && p <= 1.0) {
            return Err(WeightError::BadStageProbability(p));
        }
    }
    Ok(real(1.0 / (p_psu * p_pj * p_par)))
}

/// Target-population weight: the national weight times the probability a
/// sampled report falls in the target population.
pub fn target_weight<R: Real>(national: f64, membership: f64) -> Result<R, WeightError> {
    if !(membership > 0.0 && membership <= 1.0) {
        return Err(WeightError::BadMembership(membership));
    }
    Ok(real(national * membership))
}

/// Which algebraic form the smoothed fatality probability takes. The two
/// agree as weights grow; the ratio form is bounded in (0, 1] and is the
/// default, the per-report sum is kept for sensitivity analysis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SmoothingForm {
    /// (Σ w·1(fatal) + 1) / (Σ w + 1)
    #[default]
    RatioOfSums,
    /// Σ (w·1(fatal) + 1) / (w + 1), clamped into (0, 1].
    PerReportSum,
}

/// Additively smoothed probability that a road of one type sees a fatality,
/// from the weighted prospective reports of that type. An empty report set
/// yields 1 (no reweighting for unseen types).
pub fn fatality_probability<R: Real>(
    reports: &[(R, bool)],
    form: SmoothingForm,
) -> Result<R, WeightError> {
    let one = R::one();
    for &(w, _) in reports {
        if w < R::zero() {
            return Err(WeightError::NegativeWeight(w.to_f64().unwrap_or(f64::NAN)));
        }
    }
    if reports.is_empty() {
        return Ok(one);
    }
    let p = match form {
        SmoothingForm::RatioOfSums => {
            let fatal_sum: R = reports.iter().filter(|&&(_, f)| f).map(|&(w, _)| w).sum();
            let total: R = reports.iter().map(|&(w, _)| w).sum();
            (fatal_sum + one) / (total + one)
        }
        SmoothingForm::PerReportSum => reports
            .iter()
            .map(|&(w, f)| (w * if f { one } else { R::zero() } + one) / (w + one))
            .sum(),
    };
    // Clamp into (0, 1]; with the ratio form this only ever trims
    // floating-point spill past 1.
    Ok(p.min(one).max(R::min_positive_value()))
}

/// Smoothed fatality probabilities per road type.
#[derive(Clone, Debug, Default)]
pub struct FatalityProbabilityTable<R> {
    entries: BTreeMap<Vec<u32>, TableEntry<R>>,
}

#[derive(Clone, Debug)]
pub struct TableEntry<R> {
    pub probability: R,
    pub reports: u64,
}

impl<R: Real> FatalityProbabilityTable<R> {
    /// Groups reports by road type and smooths each group.
    pub fn build(reports: &[WeightedReport<R>], form: SmoothingForm) -> Result<Self, WeightError> {
        let mut grouped: BTreeMap<&[u32], Vec<(R, bool)>> = BTreeMap::new();
        for r in reports {
            grouped.entry(&r.subtype).or_default().push((r.weight, r.fatal));
        }
        let mut entries = BTreeMap::new();
        for (subtype, rows) in grouped {
            entries.insert(
                subtype.to_vec(),
                TableEntry {
                    probability: fatality_probability(&rows, form)?,
                    reports: rows.len() as u64,
                },
            );
        }
        Ok(Self { entries })
    }

    /// Directly injects known probabilities (simulator oracles).
    pub fn from_probabilities(entries: impl IntoIterator<Item = (Vec<u32>, R)>) -> Self {
        Self {
            entries: entries
                .into_iter()
                .map(|(k, p)| (k, TableEntry { probability: p, reports: 0 }))
                .collect(),
        }
    }

    /// P̂ for a road type; unseen types default to 1 so no expected
    /// fatalities are manufactured without prospective evidence.
    pub fn probability(&self, subtype: &[u32]) -> R {
        self.entries
            .get(subtype)
            .map(|e| e.probability)
            .unwrap_or_else(R::one)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&Vec<u32>, &TableEntry<R>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Posterior distribution of the reweighted total expected fatalities.
#[derive(Clone, Debug)]
pub struct ReweightedPosterior<R> {
    /// One total per posterior draw: Σ_i μ̂_i(s) / P̂(X_i > 0).
    pub totals: Vec<R>,
    pub summary: IntervalSummary<R>,
}

/// Reweights per-road posterior rates by the inverse fatality probability
/// of each road's type, so the retrospective sum estimates the expected
/// total over all roads, observed or not.
///
/// `rate_draws[s]` holds the per-road rates of draw `s`; every row must
/// cover all `road_types`.
pub fn reweighted_expectation<R: Real>(
    rate_draws: &[Vec<R>],
    road_types: &[Vec<u32>],
    table: &FatalityProbabilityTable<R>,
) -> Result<ReweightedPosterior<R>, WeightError> {
    if rate_draws.is_empty() {
        return Err(WeightError::NoDraws);
    }
    let inv_p: Vec<R> = road_types
        .iter()
        .map(|t| R::one() / table.probability(t))
        .collect();
    let mut totals = Vec::with_capacity(rate_draws.len());
    for draw in rate_draws {
        if draw.len() != road_types.len() {
            return Err(WeightError::MissingRate(draw.len().min(road_types.len())));
        }
        let total = draw
            .iter()
            .zip(&inv_p)
            .map(|(&mu, &w)| mu * w)
            .sum::<R>();
        totals.push(total);
    }
    let summary = interval_summary(&totals);
    Ok(ReweightedPosterior { totals, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn national_weight_examples() {
        assert_eq!(national_weight::<f64>(1.0, 1.0, 1.0).unwrap(), 1.0);
        assert!((national_weight::<f64>(0.2, 0.5, 0.1).unwrap() - 100.0).abs() < 1e-9);
        assert!(national_weight::<f64>(0.5, 0.5, 0.0).is_err());
        assert!(national_weight::<f64>(0.5, 1.5, 0.5).is_err());
    }

    #[test]
    fn target_weight_examples() {
        assert!((target_weight::<f64>(100.0, 0.1).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(target_weight::<f64>(50.0, 1.0).unwrap(), 50.0);
        assert!(target_weight::<f64>(50.0, 0.0).is_err());
    }

    #[test]
    fn fatality_probability_boundary_cases() {
        // One fatal report of weight 9 → (9+1)/(9+1) = 1.
        let p = fatality_probability(&[(9.0f64, true)], SmoothingForm::RatioOfSums).unwrap();
        assert_eq!(p, 1.0);
        // Fatal + nonfatal of weight 9 each → 10/19.
        let p = fatality_probability(
            &[(9.0f64, true), (9.0, false)],
            SmoothingForm::RatioOfSums,
        )
        .unwrap();
        assert!((p - 10.0 / 19.0).abs() < 1e-12);
        // Empty → smoothing floor of 1.
        let p = fatality_probability::<f64>(&[], SmoothingForm::RatioOfSums).unwrap();
        assert_eq!(p, 1.0);
        assert!(fatality_probability(&[(-1.0f64, true)], SmoothingForm::RatioOfSums).is_err());
    }

    #[test]
    fn smoothing_vanishes_at_large_weight_scale() {
        // Multiplying all weights by c pushes P̂ to the unsmoothed ratio.
        let base = [(2.0f64, true), (6.0, false)];
        let unsmoothed = 2.0 / 8.0;
        for c in [1.0, 10.0, 1e4, 1e8] {
            let scaled: Vec<_> = base.iter().map(|&(w, f)| (w * c, f)).collect();
            let p = fatality_probability(&scaled, SmoothingForm::RatioOfSums).unwrap();
            if c >= 1e8 {
                assert!((p - unsmoothed).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn per_report_sum_form_is_clamped() {
        let reports = [(1.0f64, true), (1.0, true)];
        // Literal sum would be 2; the clamp keeps it in (0, 1].
        let p = fatality_probability(&reports, SmoothingForm::PerReportSum).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn reweighting_arithmetic() {
        let table = FatalityProbabilityTable::from_probabilities(vec![
            (vec![1u32], 0.5f64),
            (vec![2u32], 1.0f64),
        ]);
        let draws = vec![vec![1.0f64, 2.0]; 3];
        let types = vec![vec![1u32], vec![2u32]];
        let out = reweighted_expectation(&draws, &types, &table).unwrap();
        for t in &out.totals {
            assert!((t - 4.0).abs() < 1e-12);
        }
        // All P̂ = 1 → plain sum.
        let table1 = FatalityProbabilityTable::from_probabilities(vec![]);
        let out = reweighted_expectation(&draws, &types, &table1).unwrap();
        assert!((out.totals[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn table_groups_by_type() {
        let reports = vec![
            WeightedReport { report_id: "a".into(), subtype: vec![1, 1], fatal: true, weight: 9.0f64 },
            WeightedReport { report_id: "b".into(), subtype: vec![1, 1], fatal: false, weight: 9.0 },
            WeightedReport { report_id: "c".into(), subtype: vec![2, 1], fatal: false, weight: 4.0 },
        ];
        let table = FatalityProbabilityTable::build(&reports, SmoothingForm::RatioOfSums).unwrap();
        assert_eq!(table.len(), 2);
        assert!((table.probability(&[1, 1]) - 10.0 / 19.0).abs() < 1e-12);
        assert!((table.probability(&[2, 1]) - 1.0 / 5.0).abs() < 1e-12);
        assert_eq!(table.probability(&[3, 3]), 1.0);
    }
}
