//! Nonparametric empirical-Bayes adjustment from the count histogram of all
//! roads: rate estimates of the form (x+1)·N_{x+1}/N_x and the expected
//! fatalities they imply for a selected subset.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::num::{real_of, Real};

#[derive(Debug, Error)]
pub enum EbError {
    #[error("rate estimate undefined at x = {0}: no roads observed with that count")]
    UndefinedAt(u32),
    #[error("selected histogram exceeds the full histogram at x = {0}")]
    SelectedExceedsFull(u32),
    #[error("years must be at least 1")]
    BadYears,
}

/// Histogram of before-period counts over all roads, selected or not.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CountHistogram {
    counts: BTreeMap<u32, u64>,
}

impl CountHistogram {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds the histogram from per-road counts.
    pub fn from_counts(counts: impl IntoIterator<Item = u32>) -> Self {
        let mut hist = Self::new();
        for c in counts {
            hist.add(c, 1);
        }
        hist
    }

    /// Builds from explicit (count, number-of-roads) pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u32, u64)>) -> Self {
        let mut hist = Self::new();
        for (x, n) in pairs {
            hist.add(x, n);
        }
        hist
    }

    pub fn add(&mut self, count: u32, roads: u64) {
        if roads > 0 {
            *self.counts.entry(count).or_insert(0) += roads;
        }
    }

    /// N_x: number of roads with exactly `x` fatalities.
    pub fn roads_with(&self, x: u32) -> u64 {
        self.counts.get(&x).copied().unwrap_or(0)
    }

    pub fn total_roads(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn total_fatalities(&self) -> u64 {
        self.counts.iter().map(|(&x, &n)| u64::from(x) * n).sum()
    }

    /// Largest observed count, if any road was seen.
    pub fn max_count(&self) -> Option<u32> {
        self.counts.keys().next_back().copied()
    }

    /// Observed counts in ascending order.
    pub fn observed_counts(&self) -> impl Iterator<Item = (u32, u64)> + '_ {
        self.counts.iter().map(|(&x, &n)| (x, n))
    }

    /// Pointwise `self ≤ other`.
    pub fn is_sub_histogram_of(&self, other: &CountHistogram) -> bool {
        self.counts.iter().all(|(&x, &n)| n <= other.roads_with(x))
    }
}

/// Robbins rate estimate Ê(μ | X = x) with tail bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobbinsEstimate<R> {
    pub rate: R,
    /// True when N_{x+1} was missing, so the rate is a truncated-tail zero
    /// rather than a real estimate.
    pub tail_truncated: bool,
}

/// Ê(μ | X = x) = (x + 1) · N_{x+1} / N_x.
///
/// A missing N_{x+1} yields rate 0 with the tail-truncation flag set;
/// N_x = 0 is an error naming the undefined point.
pub fn robbins_estimate<R: Real>(
    hist: &CountHistogram,
    x: u32,
) -> Result<RobbinsEstimate<R>, EbError> {
    let n_x = hist.roads_with(x);
    if n_x == 0 {
        return Err(EbError::UndefinedAt(x));
    }
    let n_next = hist.roads_with(x + 1);
    if n_next == 0 {
        log::warn!("Robbins rate at x = {x} truncated: no roads observed with {} fatalities", x + 1);
        return Ok(RobbinsEstimate { rate: R::zero(), tail_truncated: true });
    }
    let rate = real_of::<R>(u64::from(x) + 1) * real_of::<R>(n_next) / real_of::<R>(n_x);
    Ok(RobbinsEstimate { rate, tail_truncated: false })
}

/// One row of the Robbins table, indexed by the observed count x.
#[derive(Clone, Debug, PartialEq)]
pub struct RobbinsRow<R> {
    pub x: u32,
    /// N_x over all roads.
    pub roads: u64,
    /// Ê(μ | X = x).
    pub rate: R,
    pub tail_truncated: bool,
    /// Selected roads with count x.
    pub selected: u64,
    /// rate × selected.
    pub expected: R,
}

/// The Robbins table: per-count rates, selected-road counts, expected
/// fatalities, and the per-year average over the before-period length.
#[derive(Clone, Debug, PartialEq)]
pub struct RobbinsTable<R> {
    pub rows: Vec<RobbinsRow<R>>,
    pub years: u32,
    pub expected_total: R,
    pub expected_per_year: R,
}

/// Expected fatalities on the selected roads, had they not been selected,
/// over the period the histogram covers.
pub fn expected_fatalities_selected<R: Real>(
    hist: &CountHistogram,
    selected: &CountHistogram,
    years: u32,
) -> Result<RobbinsTable<R>, EbError> {
    if years < 1 {
        return Err(EbError::BadYears);
    }
    if let Some((x, _)) = selected
        .observed_counts()
        .find(|&(x, n)| n > hist.roads_with(x))
    {
        return Err(EbError::SelectedExceedsFull(x));
    }
    let mut rows = Vec::new();
    let mut total = R::zero();
    for (x, roads) in hist.observed_counts() {
        let est = robbins_estimate::<R>(hist, x)?;
        let sel = selected.roads_with(x);
        let expected = est.rate * real_of::<R>(sel);
        total = total + expected;
        rows.push(RobbinsRow {
            x,
            roads,
            rate: est.rate,
            tail_truncated: est.tail_truncated,
            selected: sel,
            expected,
        });
    }
    let per_year = total / real_of::<R>(u64::from(years));
    Ok(RobbinsTable { rows, years, expected_total: total, expected_per_year: per_year })
}

/// Optional isotonic post-processing of the rate column: pool adjacent
/// violators weighted by N_x, enforcing rates nondecreasing in x. Off by
/// default; the raw formula is reported untouched elsewhere.
pub fn apply_isotonic<R: Real>(table: &mut RobbinsTable<R>) {
    let rows = &mut table.rows;
    if rows.len() < 2 {
        return;
    }
    // Exclude truncated-tail zeros from pooling; they are "unavailable",
    // not observations of a small rate.
    let mut blocks: Vec<(R, R, Vec<usize>)> = Vec::new(); // (weighted sum, weight, members)
    for (i, row) in rows.iter().enumerate() {
        if row.tail_truncated {
            continue;
        }
        let w = real_of::<R>(row.roads);
        blocks.push((row.rate * w, w, vec![i]));
        while blocks.len() >= 2 {
            let last = blocks.len() - 1;
            let mean_last = blocks[last].0 / blocks[last].1;
            let mean_prev = blocks[last - 1].0 / blocks[last - 1].1;
            if mean_prev <= mean_last {
                break;
            }
            let (s, w, members) = blocks.pop().unwrap();
            blocks[last - 1].0 = blocks[last - 1].0 + s;
            blocks[last - 1].1 = blocks[last - 1].1 + w;
            let prev_members = &mut blocks[last - 1].2;
            prev_members.extend(members);
        }
    }
    for (s, w, members) in blocks {
        let pooled = s / w;
        for i in members {
            rows[i].rate = pooled;
            rows[i].expected = pooled * real_of::<R>(rows[i].selected);
        }
    }
    let total: R = rows.iter().map(|r| r.expected).sum();
    table.expected_total = total;
    table.expected_per_year = total / real_of::<R>(u64::from(table.years));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table1_hist() -> CountHistogram {
        CountHistogram::from_pairs([(0, 138_142), (1, 632), (2, 40), (3, 1), (4, 1)])
    }

    fn table1_selected() -> CountHistogram {
        CountHistogram::from_pairs([(0, 43_806), (1, 405), (2, 29), (3, 1)])
    }

    #[test]
    fn robbins_rates_match_published_table() {
        let hist = table1_hist();
        let r0 = robbins_estimate::<f64>(&hist, 0).unwrap();
        assert!((r0.rate - 632.0 / 138_142.0).abs() < 1e-12);
        assert!((r0.rate - 0.004575).abs() / 0.004575 < 1e-3);
        let r1 = robbins_estimate::<f64>(&hist, 1).unwrap();
        assert!((r1.rate - 2.0 * 40.0 / 632.0).abs() < 1e-12);
        let r2 = robbins_estimate::<f64>(&hist, 2).unwrap();
        assert_eq!(r2.rate, 0.075);
        let r3 = robbins_estimate::<f64>(&hist, 3).unwrap();
        assert_eq!(r3.rate, 4.0);
        // The dip at x = 2 is real and must not be smoothed away.
        assert!(r2.rate < r1.rate);
    }

    #[test]
    fn truncated_tail_yields_zero_with_flag() {
        let hist = CountHistogram::from_pairs([(0, 100)]);
        let r = robbins_estimate::<f64>(&hist, 0).unwrap();
        assert_eq!(r.rate, 0.0);
        assert!(r.tail_truncated);
        assert!(matches!(robbins_estimate::<f64>(&hist, 5), Err(EbError::UndefinedAt(5))));
    }

    #[test]
    fn expected_fatalities_reproduce_table_row() {
        let table =
            expected_fatalities_selected::<f64>(&table1_hist(), &table1_selected(), 5).unwrap();
        let by_x: std::collections::BTreeMap<u32, &RobbinsRow<f64>> =
            table.rows.iter().map(|r| (r.x, r)).collect();
        assert!((by_x[&0].expected - 200.0).abs() <= 1.0);
        assert!((by_x[&1].expected - 51.0).abs() <= 1.0);
        assert!((by_x[&2].expected - 2.0).abs() <= 1.0);
        assert!((by_x[&3].expected - 4.0).abs() <= 1.0);
        assert!((table.expected_per_year - 52.0).abs() <= 1.0);
    }

    #[test]
    fn all_zero_selection_gives_zero_table() {
        let table = expected_fatalities_selected::<f64>(
            &table1_hist(),
            &CountHistogram::new(),
            5,
        )
        .unwrap();
        assert_eq!(table.expected_total, 0.0);
        assert!(table.rows.iter().all(|r| r.expected == 0.0));
    }

    #[test]
    fn selected_bigger_than_full_is_rejected() {
        let sel = CountHistogram::from_pairs([(1, 700)]);
        assert!(matches!(
            expected_fatalities_selected::<f64>(&table1_hist(), &sel, 5),
            Err(EbError::SelectedExceedsFull(1))
        ));
    }

    #[test]
    fn shift_identity_recovers_total_fatalities() {
        // Σ_x (x+1)·N_{x+1} over the whole histogram equals total fatalities,
        // so applying rates at shifted counts with the full histogram as the
        // selection reproduces the observed total.
        let hist = table1_hist();
        let shifted: f64 = hist
            .observed_counts()
            .map(|(x, _)| {
                let est = robbins_estimate::<f64>(&hist, x).unwrap();
                est.rate * hist.roads_with(x) as f64
            })
            .sum();
        assert!((shifted - hist.total_fatalities() as f64).abs() < 1e-9);
    }

    #[test]
    fn isotonic_flag_pools_the_dip() {
        let mut table =
            expected_fatalities_selected::<f64>(&table1_hist(), &table1_selected(), 5).unwrap();
        apply_isotonic(&mut table);
        let rates: Vec<f64> = table
            .rows
            .iter()
            .filter(|r| !r.tail_truncated)
            .map(|r| r.rate)
            .collect();
        for w in rates.windows(2) {
            assert!(w[0] <= w[1] + 1e-12);
        }
    }
}
