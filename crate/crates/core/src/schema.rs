//! Covariate schemas: the batched categorical groups and interaction pairs
//! that define road types.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One categorical covariate group, e.g. speed limit or lighting.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateGroup {
    /// Short label, conventionally four letters (`SLIM`, `CITY`, ...).
    pub code: String,
    /// Number of subtype levels J_k; at least 2.
    pub cardinality: usize,
}

/// How interaction pairs are derived from the group list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InteractionPolicy {
    /// No interactions.
    None,
    /// Every unordered pair of distinct groups, K·(K−1)/2 in total.
    AllPairs,
    /// An explicit list of group-code pairs.
    Pairs(Vec<(String, String)>),
}

/// The covariate groups and interaction pairs shared by every module.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateSchema {
    groups: Vec<CovariateGroup>,
    /// Interactions as ordered pairs of group indices, a < b.
    interactions: Vec<(usize, usize)>,
    offset_name: String,
}

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("schema needs at least one covariate group")]
    NoGroups,
    #[error("duplicate group code {0:?}")]
    DuplicateGroup(String),
    #[error("group {code:?} has cardinality {cardinality}, need at least 2")]
    CardinalityTooSmall { code: String, cardinality: usize },
    #[error("interaction references unknown group {0:?}")]
    UnknownGroup(String),
    #[error("interaction pairs a group {0:?} with itself")]
    SelfInteraction(String),
    #[error("duplicate interaction pair ({0:?}, {1:?})")]
    DuplicateInteraction(String, String),
    #[error(
        "record {record:?}: subtype {index} for group {group:?} outside [1, {cardinality}]"
    )]
    SubtypeOutOfRange {
        record: String,
        group: String,
        index: u32,
        cardinality: usize,
    },
    #[error("record {record:?}: expected {expected} subtype indices, got {got}")]
    SubtypeLength {
        record: String,
        expected: usize,
        got: usize,
    },
    #[error("record {record:?}: exposure must be positive and finite")]
    NonPositiveExposure { record: String },
}

impl CovariateSchema {
    /// Builds a schema, resolving the interaction policy into index pairs.
    pub fn new(
        groups: Vec<CovariateGroup>,
        policy: &InteractionPolicy,
        offset_name: impl Into<String>,
    ) -> Result<Self, SchemaError> {
        if groups.is_empty() {
            return Err(SchemaError::NoGroups);
        }
        for (i, g) in groups.iter().enumerate() {
            if g.cardinality < 2 {
                return Err(SchemaError::CardinalityTooSmall {
                    code: g.code.clone(),
                    cardinality: g.cardinality,
                });
            }
            if groups[..i].iter().any(|h| h.code == g.code) {
                return Err(SchemaError::DuplicateGroup(g.code.clone()));
            }
        }
        let interactions = match policy {
            InteractionPolicy::None => Vec::new(),
            InteractionPolicy::AllPairs => {
                let k = groups.len();
                let mut pairs = Vec::with_capacity(k * (k.saturating_sub(1)) / 2);
                for a in 0..k {
                    for b in (a + 1)..k {
                        pairs.push((a, b));
                    }
                }
                pairs
            }
            InteractionPolicy::Pairs(list) => {
                let mut pairs = Vec::with_capacity(list.len());
                for (ca, cb) in list {
                    let a = groups
                        .iter()
                        .position(|g| &g.code == ca)
                        .ok_or_else(|| SchemaError::UnknownGroup(ca.clone()))?;
                    let b = groups
                        .iter()
                        .position(|g| &g.code == cb)
                        .ok_or_else(|| SchemaError::UnknownGroup(cb.clone()))?;
                    if a == b {
                        return Err(SchemaError::SelfInteraction(ca.clone()));
                    }
                    let pair = (a.min(b), a.max(b));
                    if pairs.contains(&pair) {
                        return Err(SchemaError::DuplicateInteraction(ca.clone(), cb.clone()));
                    }
                    pairs.push(pair);
                }
                pairs
            }
        };
        Ok(Self {
            groups,
            interactions,
            offset_name: offset_name.into(),
        })
    }

    pub fn groups(&self) -> &[CovariateGroup] {
        &self.groups
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn group_index(&self, code: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.code == code)
    }

    pub fn cardinality(&self, group: usize) -> usize {
        self.groups[group].cardinality
    }

    /// Interaction pairs as (group index, group index), lower index first.
    pub fn interactions(&self) -> &[(usize, usize)] {
        &self.interactions
    }

    /// Number of flattened levels of interaction `l`: J_a · J_b.
    pub fn interaction_cardinality(&self, l: usize) -> usize {
        let (a, b) = self.interactions[l];
        self.groups[a].cardinality * self.groups[b].cardinality
    }

    /// Display label for interaction `l`, e.g. `SLIM*CITY`.
    pub fn interaction_label(&self, l: usize) -> String {
        let (a, b) = self.interactions[l];
        format!("{}*{}", self.groups[a].code, self.groups[b].code)
    }

    pub fn offset_name(&self) -> &str {
        &self.offset_name
    }

    /// Checks a 1-based subtype vector against the group cardinalities.
    pub fn validate_subtype(&self, record: &str, subtype: &[u32]) -> Result<(), SchemaError> {
        if subtype.len() != self.groups.len() {
            return Err(SchemaError::SubtypeLength {
                record: record.to_string(),
                expected: self.groups.len(),
                got: subtype.len(),
            });
        }
        for (k, (&ix, g)) in subtype.iter().zip(&self.groups).enumerate() {
            let _ = k;
            if ix < 1 || ix as usize > g.cardinality {
                return Err(SchemaError::SubtypeOutOfRange {
                    record: record.to_string(),
                    group: g.code.clone(),
                    index: ix,
                    cardinality: g.cardinality,
                });
            }
        }
        Ok(())
    }
}

/// Flattens a pair of 1-based category indices into a single 1-based level
/// in [1, J_a·J_b], row-major: (a−1)·J_b + b.
pub fn interaction_index(
    subtype_a: u32,
    subtype_b: u32,
    card_a: usize,
    card_b: usize,
) -> Result<u32, SchemaError> {
    let check = |ix: u32, card: usize, which: &str| {
        if ix < 1 || ix as usize > card {
            Err(SchemaError::SubtypeOutOfRange {
                record: "<interaction>".to_string(),
                group: which.to_string(),
                index: ix,
                cardinality: card,
            })
        } else {
            Ok(())
        }
    };
    check(subtype_a, card_a, "a")?;
    check(subtype_b, card_b, "b")?;
    Ok((subtype_a - 1) * card_b as u32 + subtype_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn abc_schema(policy: &InteractionPolicy) -> CovariateSchema {
        CovariateSchema::new(
            vec![
                CovariateGroup { code: "AAAA".into(), cardinality: 3 },
                CovariateGroup { code: "BBBB".into(), cardinality: 4 },
                CovariateGroup { code: "CCCC".into(), cardinality: 2 },
            ],
            policy,
            "EXPR",
        )
        .unwrap()
    }

    #[test]
    fn all_pairs_count_is_k_choose_2() {
        let s = abc_schema(&InteractionPolicy::AllPairs);
        assert_eq!(s.interactions().len(), 3);
        // The paper-scale case: K = 8 gives 28 pairs.
        let groups = (0..8)
            .map(|i| CovariateGroup { code: format!("G{i:03}"), cardinality: 2 })
            .collect();
        let s8 = CovariateSchema::new(groups, &InteractionPolicy::AllPairs, "EXPR").unwrap();
        assert_eq!(s8.interactions().len(), 28);
    }

    #[test]
    fn rejects_duplicate_codes_and_self_pairs() {
        let dup = CovariateSchema::new(
            vec![
                CovariateGroup { code: "AAAA".into(), cardinality: 2 },
                CovariateGroup { code: "AAAA".into(), cardinality: 2 },
            ],
            &InteractionPolicy::None,
            "EXPR",
        );
        assert!(matches!(dup, Err(SchemaError::DuplicateGroup(_))));

        let selfpair = CovariateSchema::new(
            vec![
                CovariateGroup { code: "AAAA".into(), cardinality: 2 },
                CovariateGroup { code: "BBBB".into(), cardinality: 2 },
            ],
            &InteractionPolicy::Pairs(vec![("AAAA".into(), "AAAA".into())]),
            "EXPR",
        );
        assert!(matches!(selfpair, Err(SchemaError::SelfInteraction(_))));
    }

    #[test]
    fn interaction_index_corners() {
        assert_eq!(interaction_index(1, 1, 3, 4).unwrap(), 1);
        assert_eq!(interaction_index(3, 4, 3, 4).unwrap(), 12);
        assert_eq!(interaction_index(2, 3, 3, 4).unwrap(), 7);
        assert!(interaction_index(4, 1, 3, 4).is_err());
        assert!(interaction_index(0, 1, 3, 4).is_err());
    }

    proptest! {
        #[test]
        fn interaction_index_is_bijective(card_a in 1usize..8, card_b in 1usize..8) {
            let mut seen = std::collections::HashSet::new();
            for a in 1..=card_a as u32 {
                for b in 1..=card_b as u32 {
                    let ix = interaction_index(a, b, card_a, card_b).unwrap();
                    prop_assert!(ix >= 1 && ix as usize <= card_a * card_b);
                    prop_assert!(seen.insert(ix));
                }
            }
            prop_assert_eq!(seen.len(), card_a * card_b);
        }
    }
}
