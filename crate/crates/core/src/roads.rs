//! Observed road records and their aggregation into road-type cells.

use std::collections::BTreeMap;

use crate::num::Real;
use crate::schema::{interaction_index, CovariateSchema, SchemaError};

/// One observed road (or road-period) with its subtype codes, exposure and
/// fatality count.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadRecord<R> {
    /// Opaque identifier, echoed in error messages.
    pub road_id: String,
    /// 1-based category index per covariate group.
    pub subtype: Vec<u32>,
    /// Pedestrian-count-scale exposure; must be positive because it enters
    /// the model as log(exposure).
    pub exposure: R,
    /// Fatality count for the period.
    pub fatalities: u32,
    /// Whether the road was selected for the policy, when known.
    pub selected: Option<bool>,
    /// Period label (before/after/year), when known.
    pub period: Option<String>,
}

impl<R: Real> RoadRecord<R> {
    pub fn validate(&self, schema: &CovariateSchema) -> Result<(), SchemaError> {
        schema.validate_subtype(&self.road_id, &self.subtype)?;
        if !(self.exposure > R::zero()) || !self.exposure.is_finite() {
            return Err(SchemaError::NonPositiveExposure {
                record: self.road_id.clone(),
            });
        }
        Ok(())
    }
}

/// Aggregate of all roads sharing one complete subtype combination.
#[derive(Clone, Debug, PartialEq)]
pub struct TypeCell<R> {
    /// Dense index in the lexicographically ordered cell list.
    pub cell_id: usize,
    /// 1-based category index per covariate group.
    pub subtype: Vec<u32>,
    /// 1-based flattened level per schema interaction pair.
    pub interaction_levels: Vec<u32>,
    /// Total fatalities Y over the member roads.
    pub fatalities: u64,
    /// Summed exposure of the member roads.
    pub exposure_total: R,
    /// Number of member records.
    pub roads: usize,
}

/// Partitions records into cells keyed by the full subtype vector.
///
/// Cells come back ordered lexicographically by subtype indices, so the
/// output is deterministic and insensitive to the input record order.
pub fn aggregate_cells<R: Real>(
    records: &[RoadRecord<R>],
    schema: &CovariateSchema,
) -> Result<Vec<TypeCell<R>>, SchemaError> {
    let mut groups: BTreeMap<&[u32], (u64, R, usize)> = BTreeMap::new();
    for record in records {
        record.validate(schema)?;
        let entry = groups
            .entry(record.subtype.as_slice())
            .or_insert((0, R::zero(), 0));
        entry.0 += u64::from(record.fatalities);
        entry.1 = entry.1 + record.exposure;
        entry.2 += 1;
    }
    let mut cells = Vec::with_capacity(groups.len());
    for (cell_id, (subtype, (fatalities, exposure_total, roads))) in groups.into_iter().enumerate()
    {
        cells.push(TypeCell {
            cell_id,
            subtype: subtype.to_vec(),
            interaction_levels: interaction_levels(subtype, schema)?,
            fatalities,
            exposure_total,
            roads,
        });
    }
    Ok(cells)
}

/// Flattened 1-based interaction levels for one subtype vector, one entry
/// per schema pair.
pub fn interaction_levels(
    subtype: &[u32],
    schema: &CovariateSchema,
) -> Result<Vec<u32>, SchemaError> {
    schema
        .interactions()
        .iter()
        .map(|&(a, b)| {
            interaction_index(
                subtype[a],
                subtype[b],
                schema.cardinality(a),
                schema.cardinality(b),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{CovariateGroup, InteractionPolicy};
    use proptest::prelude::*;

    fn schema2() -> CovariateSchema {
        CovariateSchema::new(
            vec![
                CovariateGroup { code: "AAAA".into(), cardinality: 3 },
                CovariateGroup { code: "BBBB".into(), cardinality: 4 },
            ],
            &InteractionPolicy::AllPairs,
            "EXPR",
        )
        .unwrap()
    }

    fn rec(id: &str, subtype: &[u32], exposure: f64, fatalities: u32) -> RoadRecord<f64> {
        RoadRecord {
            road_id: id.into(),
            subtype: subtype.to_vec(),
            exposure,
            fatalities,
            selected: None,
            period: None,
        }
    }

    #[test]
    fn identical_subtypes_merge_into_one_cell() {
        let schema = schema2();
        let records = vec![rec("a", &[1, 2], 10.0, 1), rec("b", &[1, 2], 20.0, 2)];
        let cells = aggregate_cells(&records, &schema).unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].fatalities, 3);
        assert_eq!(cells[0].exposure_total, 30.0);
        assert_eq!(cells[0].roads, 2);
        // (1−1)·4 + 2 = 2
        assert_eq!(cells[0].interaction_levels, vec![2]);
    }

    #[test]
    fn differing_in_one_group_yields_two_cells() {
        let schema = schema2();
        let records = vec![rec("a", &[1, 2], 10.0, 1), rec("b", &[2, 2], 20.0, 2)];
        let cells = aggregate_cells(&records, &schema).unwrap();
        assert_eq!(cells.len(), 2);
    }

    #[test]
    fn table2_style_rows_stay_distinct() {
        // Six rows sharing five groups but differing in at least one of the
        // remaining three stay six distinct cells.
        let groups = ["COND", "CITY", "YEAR", "SLIM", "SIGN", "LGHT", "BLTE", "TFFC"]
            .iter()
            .map(|c| CovariateGroup { code: (*c).into(), cardinality: 40 })
            .collect();
        let schema = CovariateSchema::new(groups, &InteractionPolicy::None, "EXPR").unwrap();
        let rows: [(&str, [u32; 8], f64); 6] = [
            ("r1", [2, 1, 1, 6, 1, 10, 4, 1], 256.52),
            ("r2", [2, 1, 1, 6, 1, 29, 4, 1], 382.92),
            ("r3", [2, 1, 1, 6, 13, 29, 6, 1], 859.79),
            ("r4", [2, 1, 1, 6, 3, 8, 6, 1], 3117.68),
            ("r5", [2, 1, 1, 6, 1, 8, 9, 1], 3286.61),
            ("r6", [2, 1, 1, 6, 1, 14, 18, 1], 193.75),
        ];
        let records: Vec<_> = rows
            .iter()
            .map(|(id, st, e)| rec(id, st, *e, 1))
            .collect();
        let cells = aggregate_cells(&records, &schema).unwrap();
        assert_eq!(cells.len(), 6);
    }

    #[test]
    fn out_of_range_subtype_names_record_and_group() {
        let schema = schema2();
        let records = vec![rec("bad-road", &[1, 5], 10.0, 1)];
        let err = aggregate_cells(&records, &schema).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad-road") && msg.contains("BBBB"), "{msg}");
    }

    #[test]
    fn zero_exposure_is_a_hard_error() {
        let schema = schema2();
        let records = vec![rec("a", &[1, 1], 0.0, 1)];
        assert!(matches!(
            aggregate_cells(&records, &schema),
            Err(SchemaError::NonPositiveExposure { .. })
        ));
    }

    #[test]
    fn aggregation_idempotent_on_single_road_per_type() {
        let schema = schema2();
        let records = vec![rec("a", &[1, 1], 5.0, 2), rec("b", &[2, 3], 7.0, 1)];
        let once = aggregate_cells(&records, &schema).unwrap();
        let again: Vec<RoadRecord<f64>> = once
            .iter()
            .map(|c| rec(&format!("cell{}", c.cell_id), &c.subtype, c.exposure_total, c.fatalities as u32))
            .collect();
        let twice = aggregate_cells(&again, &schema).unwrap();
        assert_eq!(once, twice);
    }

    proptest! {
        #[test]
        fn permuting_records_yields_identical_cells(
            raw in proptest::collection::vec((1u32..=3, 1u32..=4, 1u32..=5, 0u32..=3), 1..40),
            seed in 0u64..1000,
        ) {
            let schema = schema2();
            let records: Vec<_> = raw
                .iter()
                .enumerate()
                .map(|(i, &(a, b, e, f))| rec(&format!("r{i}"), &[a, b], e as f64, f))
                .collect();
            let mut shuffled = records.clone();
            // Cheap deterministic shuffle.
            let n = shuffled.len();
            let mut state = seed.wrapping_add(0x9E3779B97F4A7C15);
            for i in (1..n).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let j = (state >> 33) as usize % (i + 1);
                shuffled.swap(i, j);
            }
            let a = aggregate_cells(&records, &schema).unwrap();
            let b = aggregate_cells(&shuffled, &schema).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn totals_preserved_and_unit_expansion_round_trips(
            raw in proptest::collection::vec((1u32..=3, 1u32..=4, 1u32..=5, 1u32..=3), 1..30),
        ) {
            let schema = schema2();
            let records: Vec<_> = raw
                .iter()
                .enumerate()
                .map(|(i, &(a, b, e, f))| rec(&format!("r{i}"), &[a, b], e as f64, f))
                .collect();
            let cells = aggregate_cells(&records, &schema).unwrap();
            let cell_total: u64 = cells.iter().map(|c| c.fatalities).sum();
            let record_total: u64 = records.iter().map(|r| u64::from(r.fatalities)).sum();
            prop_assert_eq!(cell_total, record_total);

            // Expand each cell into Y unit-fatality pseudo-records carrying a
            // pro-rata share of the exposure; re-aggregating reproduces the
            // cell list (cells here all have Y ≥ 1 by construction).
            let mut pseudo = Vec::new();
            for c in &cells {
                let share = c.exposure_total / c.fatalities as f64;
                for u in 0..c.fatalities {
                    pseudo.push(rec(&format!("c{}u{u}", c.cell_id), &c.subtype, share, 1));
                }
            }
            let re = aggregate_cells(&pseudo, &schema).unwrap();
            prop_assert_eq!(re.len(), cells.len());
            for (x, y) in re.iter().zip(&cells) {
                prop_assert_eq!(&x.subtype, &y.subtype);
                prop_assert_eq!(x.fatalities, y.fatalities);
                prop_assert!((x.exposure_total - y.exposure_total).abs() < 1e-9 * y.exposure_total.max(1.0));
            }
        }
    }
}
