//! Order-level CSV ingestion.
//!
//! The caller maps CSV columns to roles with a [`ColumnMapping`]. Feature
//! columns where every retained cell parses as a finite number are treated
//! as numeric and min-max normalized; all other feature columns are one-hot
//! encoded. Normalization statistics and category sets come from the train
//! split only; val/test values are clamped and unseen categories encode as
//! an all-zero block. The action vocabulary is built from every retained
//! row so no split can hold an out-of-range action id.
//!
//! Rows are dropped (and counted) when they are ragged, have an empty
//! feature or action cell, or have an outcome cell that does not parse:
//! risk and status must be 0/1, delivery time and profit numeric. The
//! delivery-time column is binned into `time_classes` classes by train
//! min-max; a class-valued column (integers 0..C−1) maps to itself. The
//! stored on-time flag is the CSV flag AND `class ≤ on_time_threshold`,
//! keeping the flag consistent with the threshold.
//!
//! Each order is one decision: `next_state` equals `state`.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{split, DatasetSchema, OfflineDataset, Outcomes, Splits, Transition, MIN_ROWS};
use crate::error::{Error, Result};

fn default_time_classes() -> usize {
    5
}

/// Column roles for [`ingest_csv`], read from a JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMapping {
    pub features: Vec<String>,
    pub action_column: String,
    pub risk_column: String,
    pub time_column: String,
    pub status_column: String,
    pub profit_column: String,
    /// Delivery-time class count C.
    #[serde(default = "default_time_classes")]
    pub time_classes: usize,
    /// Highest on-time class; defaults to C−1.
    #[serde(default)]
    pub on_time_threshold_class: Option<usize>,
}

impl ColumnMapping {
    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::InvalidConfig("no feature columns mapped".into()));
        }
        let unique: BTreeSet<&String> = self.features.iter().collect();
        if unique.len() != self.features.len() {
            return Err(Error::InvalidConfig("duplicate feature columns".into()));
        }
        if self.time_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "time_classes = {} < 2",
                self.time_classes
            )));
        }
        if let Some(t) = self.on_time_threshold_class {
            if t >= self.time_classes {
                return Err(Error::InvalidConfig(format!(
                    "on_time_threshold_class = {t} ≥ C = {}",
                    self.time_classes
                )));
            }
        }
        Ok(())
    }

    pub fn threshold(&self) -> usize {
        self.on_time_threshold_class.unwrap_or(self.time_classes - 1)
    }
}

/// Reads a mapping document from a JSON file.
pub fn load_mapping(path: &Path) -> Result<ColumnMapping> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    let mapping: ColumnMapping = serde_json::from_str(&text).map_err(|e| Error::BadArtifact {
        file: path.display().to_string(),
        reason: e.to_string(),
    })?;
    mapping.validate()?;
    Ok(mapping)
}

/// Row accounting from one ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: usize,
    pub rows_dropped: usize,
}

/// A parsed row before encoding.
struct RawRow {
    features: Vec<String>,
    action: String,
    risk: u8,
    time: f64,
    status: u8,
    profit: f64,
}

fn parse_binary(cell: &str) -> Option<u8> {
    match cell.trim().parse::<f64>() {
        Ok(v) if v == 0.0 => Some(0),
        Ok(v) if v == 1.0 => Some(1),
        _ => None,
    }
}

fn parse_finite(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Train-split min-max; `None` means the column has zero range.
fn min_max(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (hi > lo).then_some((lo, hi))
}

fn normalize(v: f64, stats: Option<(f64, f64)>) -> f64 {
    match stats {
        Some((lo, hi)) => ((v - lo) / (hi - lo)).clamp(0.0, 1.0),
        None => 0.0,
    }
}

/// Ingests an order-level CSV. The seed drives the internal 8:1:1 split the
/// normalization statistics are conditioned on; datasets smaller than
/// [`MIN_ROWS`] fall back to a single all-train split.
pub fn ingest_csv(
    path: &Path,
    mapping: &ColumnMapping,
    seed: u64,
) -> Result<(OfflineDataset, IngestReport)> {
    mapping.validate()?;
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    if text.trim().is_empty() {
        return Err(Error::EmptyInput("csv file"));
    }
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());

    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                column: name.to_string(),
                file: path.display().to_string(),
            })
    };
    let feature_cols: Vec<usize> = mapping
        .features
        .iter()
        .map(|f| col(f))
        .collect::<Result<_>>()?;
    let action_col = col(&mapping.action_column)?;
    let risk_col = col(&mapping.risk_column)?;
    let time_col = col(&mapping.time_column)?;
    let status_col = col(&mapping.status_column)?;
    let profit_col = col(&mapping.profit_column)?;

    let mut rows_read = 0usize;
    let mut rows_dropped = 0usize;
    let mut raw = Vec::new();
    for record in reader.records() {
        rows_read += 1;
        let Ok(record) = record else {
            rows_dropped += 1;
            continue;
        };
        let parsed = (|| -> Option<RawRow> {
            let features: Vec<String> = feature_cols
                .iter()
                .map(|&i| {
                    let cell = record.get(i)?.trim();
                    (!cell.is_empty()).then(|| cell.to_string())
                })
                .collect::<Option<_>>()?;
            let action = record.get(action_col)?.trim();
            if action.is_empty() {
                return None;
            }
            Some(RawRow {
                features,
                action: action.to_string(),
                risk: parse_binary(record.get(risk_col)?)?,
                time: parse_finite(record.get(time_col)?)?,
                status: parse_binary(record.get(status_col)?)?,
                profit: parse_finite(record.get(profit_col)?)?,
            })
        })();
        match parsed {
            Some(row) => raw.push(row),
            None => rows_dropped += 1,
        }
    }
    if raw.is_empty() {
        return Err(Error::EmptyInput("csv data rows"));
    }

    let splits = if raw.len() >= MIN_ROWS {
        split(raw.len(), seed)?
    } else {
        Splits {
            train: (0..raw.len()).collect(),
            ..Default::default()
        }
    };
    let train = &splits.train;

    // Columns are numeric only when every retained cell parses.
    let numeric: Vec<bool> = (0..feature_cols.len())
        .map(|j| raw.iter().all(|r| parse_finite(&r.features[j]).is_some()))
        .collect();
    let feature_stats: Vec<Option<(f64, f64)>> = (0..feature_cols.len())
        .map(|j| {
            numeric[j]
                .then(|| min_max(train.iter().map(|&i| parse_finite(&raw[i].features[j]).unwrap())))
                .flatten()
        })
        .collect();
    let categories: Vec<Vec<String>> = (0..feature_cols.len())
        .map(|j| {
            if numeric[j] {
                Vec::new()
            } else {
                let set: BTreeSet<String> =
                    train.iter().map(|&i| raw[i].features[j].clone()).collect();
                set.into_iter().collect()
            }
        })
        .collect();
    let time_stats = min_max(train.iter().map(|&i| raw[i].time));
    let profit_stats = min_max(train.iter().map(|&i| raw[i].profit));

    let actions: Vec<String> = {
        let set: BTreeSet<String> = raw.iter().map(|r| r.action.clone()).collect();
        set.into_iter().collect()
    };
    if !(2..=16).contains(&actions.len()) {
        return Err(Error::InvalidConfig(format!(
            "{} distinct actions in {:?}, need 2..=16",
            actions.len(),
            mapping.action_column
        )));
    }

    let mut feature_names = Vec::new();
    for (j, name) in mapping.features.iter().enumerate() {
        if numeric[j] {
            feature_names.push(name.clone());
        } else {
            for cat in &categories[j] {
                feature_names.push(format!("{name}={cat}"));
            }
        }
    }
    let c = mapping.time_classes;
    let threshold = mapping.threshold();
    let schema = DatasetSchema {
        d: feature_names.len(),
        feature_names,
        k: actions.len(),
        c,
        on_time_threshold: threshold,
    };

    let rows: Vec<Transition> = raw
        .iter()
        .map(|r| {
            let mut state = Vec::with_capacity(schema.d);
            for j in 0..feature_cols.len() {
                if numeric[j] {
                    state.push(normalize(parse_finite(&r.features[j]).unwrap(), feature_stats[j]));
                } else {
                    for cat in &categories[j] {
                        state.push(f64::from(*cat == r.features[j]));
                    }
                }
            }
            let action = actions.binary_search(&r.action).unwrap();
            let time_norm = normalize(r.time, time_stats);
            let delivery_time = ((c as f64 * time_norm) as usize).min(c - 1);
            let on_time_status = r.status & u8::from(delivery_time <= threshold);
            let profit = normalize(r.profit, profit_stats);
            Transition {
                next_state: state.clone(),
                state,
                action,
                outcomes: Outcomes {
                    delay_risk: r.risk,
                    delivery_time,
                    on_time_status,
                    profit,
                },
                reward: profit + f64::from(on_time_status),
            }
        })
        .collect();

    let ds = OfflineDataset {
        schema,
        rows,
        splits,
        ground_truth: None,
    };
    ds.validate()?;
    Ok((
        ds,
        IngestReport {
            rows_read,
            rows_dropped,
        },
    ))
}
