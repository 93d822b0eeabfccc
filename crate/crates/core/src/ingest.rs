//! File formats: road-record CSV, prospective-report CSV, and the
//! line-based schema / model configuration format.
//!
//! Category codes arrive as arbitrary integers (federal-style sparse codes)
//! and are remapped to dense 1..J_k indices in sorted-code order; the
//! mapping is kept so reports can show the original codes.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Real;
use crate::roads::RoadRecord;
use crate::schema::{CovariateGroup, CovariateSchema, InteractionPolicy, SchemaError};
use crate::weights::WeightedReport;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing required column {0:?}")]
    MissingColumn(String),
    #[error("row {row}: bad value {value:?} in column {column:?}: {reason}")]
    BadValue {
        row: usize,
        column: String,
        value: String,
        reason: String,
    },
    #[error("group {group:?}: observed {observed} distinct codes, schema allows {allowed}")]
    TooManyCodes {
        group: String,
        observed: usize,
        allowed: usize,
    },
    #[error("group {group:?}: only {observed} distinct codes observed, need at least 2 to infer")]
    TooFewCodes { group: String, observed: usize },
    #[error("schema config line {line}: {reason}")]
    Config { line: usize, reason: String },
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

/// Declared cardinality of a group in a schema file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cardinality {
    Fixed(usize),
    Infer,
}

/// Parsed schema file: groups with declared or inferred cardinalities plus
/// the interaction policy.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaConfig {
    pub groups: Vec<(String, Cardinality)>,
    pub interactions: InteractionPolicy,
    pub offset_name: String,
}

impl SchemaConfig {
    /// Parses the line-based key-value format:
    ///
    /// ```text
    /// offset EXPR
    /// interactions all-pairs        # or: none | pairs SLIM*CITY ...
    /// group SLIM 8
    /// group CITY infer
    /// ```
    pub fn parse(text: &str) -> Result<Self, IngestError> {
        let mut offset_name = "EXPR".to_string();
        let mut interactions = InteractionPolicy::AllPairs;
        let mut groups = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap();
            let err = |reason: &str| IngestError::Config {
                line: ln + 1,
                reason: reason.to_string(),
            };
            match key {
                "offset" => {
                    offset_name = parts.next().ok_or_else(|| err("missing offset name"))?.to_string();
                }
                "interactions" => {
                    let mode = parts.next().ok_or_else(|| err("missing interaction policy"))?;
                    interactions = match mode {
                        "all-pairs" => InteractionPolicy::AllPairs,
                        "none" => InteractionPolicy::None,
                        "pairs" => {
                            let mut pairs = Vec::new();
                            for spec in parts.by_ref() {
                                let (a, b) = spec
                                    .split_once('*')
                                    .ok_or_else(|| err("pair must look like CODE*CODE"))?;
                                pairs.push((a.to_string(), b.to_string()));
                            }
                            if pairs.is_empty() {
                                return Err(err("explicit pair list is empty"));
                            }
                            InteractionPolicy::Pairs(pairs)
                        }
                        other => return Err(err(&format!("unknown interaction policy {other:?}"))),
                    };
                }
                "group" => {
                    let code = parts.next().ok_or_else(|| err("missing group code"))?.to_string();
                    let card = parts.next().ok_or_else(|| err("missing cardinality"))?;
                    let card = if card == "infer" {
                        Cardinality::Infer
                    } else {
                        Cardinality::Fixed(card.parse().map_err(|_| err("cardinality must be an integer or 'infer'"))?)
                    };
                    groups.push((code, card));
                }
                other => return Err(err(&format!("unknown key {other:?}"))),
            }
        }
        if groups.is_empty() {
            return Err(IngestError::Config {
                line: 0,
                reason: "schema file declares no groups".to_string(),
            });
        }
        Ok(Self {
            groups,
            interactions,
            offset_name,
        })
    }

    /// Renders the config back in the same format.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("offset {}\n", self.offset_name));
        match &self.interactions {
            InteractionPolicy::AllPairs => out.push_str("interactions all-pairs\n"),
            InteractionPolicy::None => out.push_str("interactions none\n"),
            InteractionPolicy::Pairs(pairs) => {
                out.push_str("interactions pairs");
                for (a, b) in pairs {
                    out.push_str(&format!(" {a}*{b}"));
                }
                out.push('\n');
            }
        }
        for (code, card) in &self.groups {
            match card {
                Cardinality::Fixed(j) => out.push_str(&format!("group {code} {j}\n")),
                Cardinality::Infer => out.push_str(&format!("group {code} infer\n")),
            }
        }
        out
    }

    pub fn from_path(path: &Path) -> Result<Self, IngestError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }
}

/// Per-group mapping from original integer codes to dense 1-based indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeMaps {
    pub per_group: Vec<BTreeMap<i64, u32>>,
}

impl CodeMaps {
    pub fn dense(&self, group: usize, code: i64) -> Option<u32> {
        self.per_group.get(group).and_then(|m| m.get(&code).copied())
    }

    /// Original code for a dense index, when one exists.
    pub fn original(&self, group: usize, dense: u32) -> Option<i64> {
        self.per_group
            .get(group)
            .and_then(|m| m.iter().find(|(_, &v)| v == dense).map(|(&k, _)| k))
    }

    /// Identity maps for data whose codes are already dense 1..J_k.
    pub fn identity(schema: &CovariateSchema) -> Self {
        CodeMaps {
            per_group: schema
                .groups()
                .iter()
                .map(|g| (1..=g.cardinality as i64).map(|c| (c, c as u32)).collect())
                .collect(),
        }
    }
}

/// A fully ingested dataset: resolved schema, dense records, and the code
/// mapping used to densify them.
#[derive(Clone, Debug)]
pub struct Dataset<R> {
    pub schema: CovariateSchema,
    pub records: Vec<RoadRecord<R>>,
    pub code_maps: CodeMaps,
}

const COL_COUNT: &str = "COUNT";
const COL_SELECTED: &str = "SELECTED";
const COL_PERIOD: &str = "PERIOD";
const COL_ROAD_ID: &str = "ROAD_ID";

/// Reads the road-record CSV (group columns + offset + `COUNT`, optional
/// `SELECTED`, `PERIOD`, `ROAD_ID`), remapping sparse codes densely.
pub fn read_records_csv<R: Real, Rd: Read>(
    reader: Rd,
    config: &SchemaConfig,
) -> Result<Dataset<R>, IngestError> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = csv.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| IngestError::MissingColumn(name.to_string()));

    let group_cols: Vec<usize> = config
        .groups
        .iter()
        .map(|(code, _)| need(code))
        .collect::<Result<_, _>>()?;
    let expr_col = need(&config.offset_name)?;
    let count_col = need(COL_COUNT)?;
    let selected_col = col(COL_SELECTED);
    let period_col = col(COL_PERIOD);
    let id_col = col(COL_ROAD_ID);

    struct RawRow {
        id: String,
        codes: Vec<i64>,
        exposure: f64,
        count: u32,
        selected: Option<bool>,
        period: Option<String>,
    }

    let mut raw_rows = Vec::new();
    let mut seen_codes: Vec<BTreeSet<i64>> = vec![BTreeSet::new(); config.groups.len()];
    for (ix, row) in csv.records().enumerate() {
        let row = row?;
        let rownum = ix + 2; // 1-based, after the header
        let bad = |column: &str, value: &str, reason: &str| IngestError::BadValue {
            row: rownum,
            column: column.to_string(),
            value: value.to_string(),
            reason: reason.to_string(),
        };
        let mut codes = Vec::with_capacity(group_cols.len());
        for (gi, &ci) in group_cols.iter().enumerate() {
            let v = &row[ci];
            let code: i64 = v
                .parse()
                .map_err(|_| bad(&config.groups[gi].0, v, "expected an integer category code"))?;
            seen_codes[gi].insert(code);
            codes.push(code);
        }
        let exposure: f64 = row[expr_col]
            .parse()
            .map_err(|_| bad(&config.offset_name, &row[expr_col], "expected a decimal exposure"))?;
        let count: u32 = row[count_col]
            .parse()
            .map_err(|_| bad(COL_COUNT, &row[count_col], "expected a nonnegative integer"))?;
        let selected = match selected_col {
            None => None,
            Some(ci) => match &row[ci] {
                "" => None,
                "1" | "true" | "TRUE" => Some(true),
                "0" | "false" | "FALSE" => Some(false),
                other => return Err(bad(COL_SELECTED, other, "expected 0/1 or true/false")),
            },
        };
        let period = period_col.and_then(|ci| {
            let v = row[ci].to_string();
            if v.is_empty() { None } else { Some(v) }
        });
        let id = id_col
            .map(|ci| row[ci].to_string())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| format!("row{rownum}"));
        raw_rows.push(RawRow { id, codes, exposure, count, selected, period });
    }

    // Densify in sorted-code order so the mapping does not depend on the
    // row order of the input.
    let mut per_group = Vec::with_capacity(config.groups.len());
    let mut resolved_groups = Vec::with_capacity(config.groups.len());
    for (gi, (code, card)) in config.groups.iter().enumerate() {
        let observed = seen_codes[gi].len();
        let cardinality = match card {
            Cardinality::Infer => {
                if observed < 2 {
                    return Err(IngestError::TooFewCodes { group: code.clone(), observed });
                }
                observed
            }
            Cardinality::Fixed(j) => {
                if observed > *j {
                    return Err(IngestError::TooManyCodes {
                        group: code.clone(),
                        observed,
                        allowed: *j,
                    });
                }
                *j
            }
        };
        let map: BTreeMap<i64, u32> = seen_codes[gi]
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, (i + 1) as u32))
            .collect();
        per_group.push(map);
        resolved_groups.push(CovariateGroup { code: code.clone(), cardinality });
    }
    let schema = CovariateSchema::new(resolved_groups, &config.interactions, config.offset_name.clone())?;
    let code_maps = CodeMaps { per_group };

    let records = raw_rows
        .into_iter()
        .map(|r| RoadRecord {
            road_id: r.id,
            subtype: r
                .codes
                .iter()
                .enumerate()
                .map(|(gi, c)| code_maps.per_group[gi][c])
                .collect(),
            exposure: crate::num::real(r.exposure),
            fatalities: r.count,
            selected: r.selected,
            period: r.period,
        })
        .collect();

    Ok(Dataset { schema, records, code_maps })
}

/// Writes records in the same CSV layout, translating dense indices back to
/// original codes through `code_maps`.
pub fn write_records_csv<R: Real, W: Write>(
    writer: W,
    schema: &CovariateSchema,
    code_maps: &CodeMaps,
    records: &[RoadRecord<R>],
) -> Result<(), IngestError> {
    let mut csv = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = vec![COL_ROAD_ID.to_string()];
    header.extend(schema.groups().iter().map(|g| g.code.clone()));
    header.push(schema.offset_name().to_string());
    header.push(COL_COUNT.to_string());
    header.push(COL_SELECTED.to_string());
    header.push(COL_PERIOD.to_string());
    csv.write_record(&header)?;
    for r in records {
        let mut row: Vec<String> = vec![r.road_id.clone()];
        for (gi, &ix) in r.subtype.iter().enumerate() {
            let code = code_maps.original(gi, ix).unwrap_or(i64::from(ix));
            row.push(code.to_string());
        }
        row.push(format!("{}", r.exposure));
        row.push(r.fatalities.to_string());
        row.push(match r.selected {
            Some(true) => "1".to_string(),
            Some(false) => "0".to_string(),
            None => String::new(),
        });
        row.push(r.period.clone().unwrap_or_default());
        csv.write_record(&row)?;
    }
    csv.flush()?;
    Ok(())
}

const COL_FATAL: &str = "FATAL";
const COL_WT: &str = "W_T";
const COL_P_PSU: &str = "P_PSU";
const COL_P_PJ: &str = "P_PJ";
const COL_P_PAR: &str = "P_PAR";
const COL_MEMBERSHIP: &str = "MEMBERSHIP_P";
const COL_REPORT_ID: &str = "REPORT_ID";

/// Outcome of reading a prospective-report CSV.
pub struct ReportsRead<R> {
    pub reports: Vec<WeightedReport<R>>,
    /// Rows whose category codes never appeared in the fitted data; their
    /// road types cannot match any observed road, so they are dropped.
    pub skipped_unknown_codes: usize,
}

/// Reads prospective reports: group columns + `FATAL` + either `W_T` or the
/// three stage-probability columns (`P_PSU`, `P_PJ`, `P_PAR`) with an
/// optional `MEMBERSHIP_P`. Codes are densified through the same maps as
/// the fitted data.
pub fn read_reports_csv<R: Real, Rd: Read>(
    reader: Rd,
    schema: &CovariateSchema,
    code_maps: &CodeMaps,
) -> Result<ReportsRead<R>, IngestError> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = csv.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| IngestError::MissingColumn(name.to_string()));

    let group_cols: Vec<usize> = schema
        .groups()
        .iter()
        .map(|g| need(&g.code))
        .collect::<Result<_, _>>()?;
    let fatal_col = need(COL_FATAL)?;
    let wt_col = col(COL_WT);
    let stage_cols = match (col(COL_P_PSU), col(COL_P_PJ), col(COL_P_PAR)) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };
    if wt_col.is_none() && stage_cols.is_none() {
        return Err(IngestError::MissingColumn(format!(
            "{COL_WT} or {COL_P_PSU}/{COL_P_PJ}/{COL_P_PAR}"
        )));
    }
    let membership_col = col(COL_MEMBERSHIP);
    let id_col = col(COL_REPORT_ID);

    let mut reports = Vec::new();
    let mut skipped = 0usize;
    'rows: for (ix, row) in csv.records().enumerate() {
        let row = row?;
        let rownum = ix + 2;
        let bad = |column: &str, value: &str, reason: &str| IngestError::BadValue {
            row: rownum,
            column: column.to_string(),
            value: value.to_string(),
            reason: reason.to_string(),
        };
        let parse_f = |ci: usize, name: &str| -> Result<f64, IngestError> {
            row[ci].parse().map_err(|_| bad(name, &row[ci], "expected a decimal value"))
        };
        let mut subtype = Vec::with_capacity(group_cols.len());
        for (gi, &ci) in group_cols.iter().enumerate() {
            let code: i64 = row[ci]
                .parse()
                .map_err(|_| bad(&schema.groups()[gi].code, &row[ci], "expected an integer code"))?;
            match code_maps.dense(gi, code) {
                Some(d) => subtype.push(d),
                None => {
                    skipped += 1;
                    continue 'rows;
                }
            }
        }
        let fatal = match &row[fatal_col] {
            "1" | "true" | "TRUE" => true,
            "0" | "false" | "FALSE" => false,
            other => return Err(bad(COL_FATAL, other, "expected 0/1 or true/false")),
        };
        let national = match (wt_col, stage_cols) {
            (Some(ci), _) if !row[ci].is_empty() => parse_f(ci, COL_WT)?,
            (_, Some((a, b, c))) => {
                let w = crate::weights::national_weight::<f64>(
                    parse_f(a, COL_P_PSU)?,
                    parse_f(b, COL_P_PJ)?,
                    parse_f(c, COL_P_PAR)?,
                )
                .map_err(|e| bad(COL_P_PSU, "", &e.to_string()))?;
                w
            }
            _ => return Err(bad(COL_WT, "", "row has neither W_T nor stage probabilities")),
        };
        let weight = match membership_col {
            Some(ci) if !row[ci].is_empty() => {
                crate::weights::target_weight::<f64>(national, parse_f(ci, COL_MEMBERSHIP)?)
                    .map_err(|e| bad(COL_MEMBERSHIP, &row[ci], &e.to_string()))?
            }
            _ => national,
        };
        let report_id = id_col
            .map(|ci| row[ci].to_string())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| format!("report{rownum}"));
        reports.push(WeightedReport {
            report_id,
            subtype,
            fatal,
            weight: crate::num::real(weight),
        });
    }
    if skipped > 0 {
        log::warn!("dropped {skipped} report rows with codes never seen in the fitted data");
    }
    Ok(ReportsRead { reports, skipped_unknown_codes: skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCHEMA_TXT: &str = "\
# toy schema
offset EXPR
interactions all-pairs
group AAAA infer
group BBBB 4
";

    #[test]
    fn schema_config_round_trips() {
        let cfg = SchemaConfig::parse(SCHEMA_TXT).unwrap();
        assert_eq!(cfg.offset_name, "EXPR");
        assert_eq!(cfg.groups.len(), 2);
        assert_eq!(cfg.groups[0], ("AAAA".to_string(), Cardinality::Infer));
        let rendered = cfg.render();
        assert_eq!(SchemaConfig::parse(&rendered).unwrap(), cfg);
    }

    #[test]
    fn schema_config_rejects_unknown_keys() {
        assert!(SchemaConfig::parse("grooop AAAA 3\n").is_err());
    }

    #[test]
    fn reads_and_densifies_sparse_codes() {
        let cfg = SchemaConfig::parse(SCHEMA_TXT).unwrap();
        let csv = "\
AAAA,BBBB,EXPR,COUNT,SELECTED,PERIOD
10,7,256.52,1,1,before
30,7,382.92,2,0,before
10,9,100.0,0,,after
";
        let ds: Dataset<f64> = read_records_csv(csv.as_bytes(), &cfg).unwrap();
        assert_eq!(ds.schema.cardinality(0), 2); // inferred from {10, 30}
        assert_eq!(ds.schema.cardinality(1), 4); // fixed
        assert_eq!(ds.records[0].subtype, vec![1, 1]);
        assert_eq!(ds.records[1].subtype, vec![2, 1]);
        assert_eq!(ds.records[2].subtype, vec![1, 2]);
        assert_eq!(ds.records[0].selected, Some(true));
        assert_eq!(ds.records[2].period.as_deref(), Some("after"));
        assert_eq!(ds.code_maps.original(0, 2), Some(30));
    }

    #[test]
    fn too_many_codes_for_fixed_cardinality_errors() {
        let cfg = SchemaConfig::parse("offset EXPR\ninteractions none\ngroup AAAA 2\ngroup BBBB 2\n").unwrap();
        let csv = "\
AAAA,BBBB,EXPR,COUNT
1,1,1.0,0
2,1,1.0,0
3,1,1.0,0
";
        let err = read_records_csv::<f64, _>(csv.as_bytes(), &cfg).unwrap_err();
        assert!(matches!(err, IngestError::TooManyCodes { .. }), "{err}");
    }

    #[test]
    fn record_csv_round_trips_through_writer() {
        let cfg = SchemaConfig::parse(SCHEMA_TXT).unwrap();
        let csv = "\
AAAA,BBBB,EXPR,COUNT,SELECTED,PERIOD
10,7,256.52,1,1,before
30,9,382.92,2,0,before
";
        let ds: Dataset<f64> = read_records_csv(csv.as_bytes(), &cfg).unwrap();
        let mut out = Vec::new();
        write_records_csv(&mut out, &ds.schema, &ds.code_maps, &ds.records).unwrap();
        let again: Dataset<f64> = read_records_csv(out.as_slice(), &cfg).unwrap();
        assert_eq!(again.records, ds.records);
        assert_eq!(again.code_maps, ds.code_maps);
    }

    #[test]
    fn reads_reports_with_stage_probabilities() {
        let cfg = SchemaConfig::parse(SCHEMA_TXT).unwrap();
        let data = "\
AAAA,BBBB,EXPR,COUNT
10,7,1.0,1
30,9,1.0,1
";
        let ds: Dataset<f64> = read_records_csv(data.as_bytes(), &cfg).unwrap();
        let reports = "\
AAAA,BBBB,FATAL,P_PSU,P_PJ,P_PAR,MEMBERSHIP_P
10,7,1,0.2,0.5,0.1,0.1
30,9,0,1,1,1,
99,7,1,1,1,1,
";
        let got: ReportsRead<f64> =
            read_reports_csv(reports.as_bytes(), &ds.schema, &ds.code_maps).unwrap();
        assert_eq!(got.reports.len(), 2);
        assert_eq!(got.skipped_unknown_codes, 1);
        // 1/(0.2·0.5·0.1) = 100, times membership 0.1 → 10.
        assert!((got.reports[0].weight - 10.0).abs() < 1e-12);
        assert!((got.reports[1].weight - 1.0).abs() < 1e-12);
    }
}
