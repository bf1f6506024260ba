//! Columnar text format for dataset checkpoints.
//!
//! Layout:
//! ```text
//! # robsim-dataset v1
//! # schema <json>
//! # ground_truth <json>        (synthetic datasets only)
//! f0,…,f{d−1},action,n0,…,n{d−1},delay_risk,delivery_time,on_time_status,profit,reward,split
//! <one comma-separated row per transition; split ∈ {train, val, test}>
//! ```
//! Floats are written in shortest round-trip form, so save → load is exact.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::{DatasetSchema, GroundTruth, OfflineDataset, Outcomes, Splits, Transition};
use crate::error::{Error, Result};

const MAGIC: &str = "# robsim-dataset v1";

/// Renders the dataset into the columnar text format.
pub fn dataset_to_text(ds: &OfflineDataset) -> Result<String> {
    ds.validate()?;
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    out.push_str("# schema ");
    out.push_str(&serde_json::to_string(&ds.schema)?);
    out.push('\n');
    if let Some(truth) = &ds.ground_truth {
        out.push_str("# ground_truth ");
        out.push_str(&serde_json::to_string(truth)?);
        out.push('\n');
    }

    let d = ds.schema.d;
    for i in 0..d {
        out.push_str(&format!("f{i},"));
    }
    out.push_str("action,");
    for i in 0..d {
        out.push_str(&format!("n{i},"));
    }
    out.push_str("delay_risk,delivery_time,on_time_status,profit,reward,split\n");

    let mut split_of = vec!["train"; ds.rows.len()];
    for &i in &ds.splits.val {
        split_of[i] = "val";
    }
    for &i in &ds.splits.test {
        split_of[i] = "test";
    }
    for (row, split) in ds.rows.iter().zip(&split_of) {
        for v in &row.state {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{},", row.action));
        for v in &row.next_state {
            out.push_str(&format!("{v},"));
        }
        let o = &row.outcomes;
        out.push_str(&format!(
            "{},{},{},{},{},{split}\n",
            o.delay_risk, o.delivery_time, o.on_time_status, o.profit, row.reward
        ));
    }
    Ok(out)
}

/// Parses the columnar text format.
pub fn dataset_from_text(text: &str, origin: &str) -> Result<OfflineDataset> {
    let bad = |reason: String| Error::BadArtifact {
        file: origin.to_string(),
        reason,
    };
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad(format!("missing header {MAGIC:?}")));
    }
    let schema_line = lines
        .next()
        .and_then(|l| l.strip_prefix("# schema "))
        .ok_or_else(|| bad("missing schema line".into()))?;
    let schema: DatasetSchema = serde_json::from_str(schema_line)?;

    let mut ground_truth: Option<GroundTruth> = None;
    let mut header = lines.next().ok_or_else(|| bad("missing column header".into()))?;
    if let Some(gt) = header.strip_prefix("# ground_truth ") {
        ground_truth = Some(serde_json::from_str(gt)?);
        header = lines.next().ok_or_else(|| bad("missing column header".into()))?;
    }
    let d = schema.d;
    let expected_cols = 2 * d + 7;
    if header.split(',').count() != expected_cols {
        return Err(bad(format!(
            "column header has {} fields, schema implies {expected_cols}",
            header.split(',').count()
        )));
    }

    let mut rows = Vec::new();
    let mut splits = Splits::default();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected_cols {
            return Err(bad(format!("row {lineno}: {} fields", fields.len())));
        }
        let f64_at = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| bad(format!("row {lineno}: bad float {:?}", fields[i])))
        };
        let usize_at = |i: usize| -> Result<usize> {
            fields[i]
                .parse::<usize>()
                .map_err(|_| bad(format!("row {lineno}: bad integer {:?}", fields[i])))
        };
        let mut state = Vec::with_capacity(d);
        for i in 0..d {
            state.push(f64_at(i)?);
        }
        let action = usize_at(d)?;
        let mut next_state = Vec::with_capacity(d);
        for i in 0..d {
            next_state.push(f64_at(d + 1 + i)?);
        }
        let base = 2 * d + 1;
        let outcomes = Outcomes {
            delay_risk: usize_at(base)? as u8,
            delivery_time: usize_at(base + 1)?,
            on_time_status: usize_at(base + 2)? as u8,
            profit: f64_at(base + 3)?,
        };
        let reward = f64_at(base + 4)?;
        let idx = rows.len();
        match fields[base + 5] {
            "train" => splits.train.push(idx),
            "val" => splits.val.push(idx),
            "test" => splits.test.push(idx),
            other => return Err(bad(format!("row {lineno}: bad split {other:?}"))),
        }
        rows.push(Transition {
            state,
            action,
            next_state,
            outcomes,
            reward,
        });
    }

    let ds = OfflineDataset {
        schema,
        rows,
        splits,
        ground_truth,
    };
    ds.validate().map_err(|e| bad(e.to_string()))?;
    Ok(ds)
}

pub fn save_dataset(path: &Path, ds: &OfflineDataset) -> Result<()> {
    fs::write(path, dataset_to_text(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<OfflineDataset> {
    let text = fs::read_to_string(path)
        .map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    dataset_from_text(&text, &path.display().to_string())
}

/// SHA-256 of the serialized dataset, hex-encoded.
pub fn dataset_hash(ds: &OfflineDataset) -> Result<String> {
    let text = dataset_to_text(ds)?;
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    Ok(format!("{:x}", hasher.finalize()))
}
