//! Offline dataset schema, synthetic generation, CSV ingestion, splits.

pub mod csv_ingest;
pub mod store;
pub mod synthetic;

pub use csv_ingest::{ingest_csv, ColumnMapping, IngestReport};
pub use store::{load_dataset, save_dataset};
pub use synthetic::{generate_synthetic, GroundTruth, SyntheticEnvConfig};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

/// Fewest rows that still give non-empty 8:1:1 splits.
pub const MIN_ROWS: usize = 20;

/// Per-order outcome labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcomes {
    /// Delay risk flag in {0, 1}.
    pub delay_risk: u8,
    /// Delivery time class in {0, …, C−1}.
    pub delivery_time: usize,
    /// On-time flag in {0, 1}; 1 implies delivery_time ≤ threshold.
    pub on_time_status: u8,
    /// Profit in [0, 1].
    pub profit: f64,
}

/// One offline transition: state, chosen action, observed next state and
/// outcomes. Reward is profit + on_time_status, in [0, 2].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub next_state: Vec<f64>,
    pub outcomes: Outcomes,
    pub reward: f64,
}

/// Dataset-wide dimensions and naming.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub feature_names: Vec<String>,
    /// State dimensionality; equals `feature_names.len()`.
    pub d: usize,
    /// Action count, 2 ≤ K ≤ 16.
    pub k: usize,
    /// Delivery-time class count.
    pub c: usize,
    /// Highest class still counted as on time.
    pub on_time_threshold: usize,
}

impl DatasetSchema {
    pub fn validate(&self) -> Result<()> {
        if self.feature_names.len() != self.d {
            return Err(Error::InvalidConfig(format!(
                "{} feature names for d = {}",
                self.feature_names.len(),
                self.d
            )));
        }
        if self.d == 0 {
            return Err(Error::InvalidConfig("d = 0".into()));
        }
        if !(2..=16).contains(&self.k) {
            return Err(Error::InvalidConfig(format!("K = {} outside 2..=16", self.k)));
        }
        if self.c < 2 {
            return Err(Error::InvalidConfig(format!("C = {} < 2", self.c)));
        }
        if self.on_time_threshold >= self.c {
            return Err(Error::InvalidConfig(format!(
                "on-time threshold {} ≥ C = {}",
                self.on_time_threshold, self.c
            )));
        }
        Ok(())
    }
}

/// Disjoint row-index sets in ratio 8:1:1.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Immutable offline dataset plus split assignment. The synthetic
/// generator attaches its ground truth for evaluation oracles; training
/// code must never read it.
#[derive(Debug, Clone)]
pub struct OfflineDataset {
    pub schema: DatasetSchema,
    pub rows: Vec<Transition>,
    pub splits: Splits,
    pub ground_truth: Option<GroundTruth>,
}

impl OfflineDataset {
    /// Checks every schema and row invariant.
    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        for (i, row) in self.rows.iter().enumerate() {
            let bad = |reason: String| {
                Err(Error::InvalidConfig(format!("row {i}: {reason}")))
            };
            if row.state.len() != self.schema.d || row.next_state.len() != self.schema.d {
                return bad("state length != d".into());
            }
            for v in row.state.iter().chain(&row.next_state) {
                if !(0.0..=1.0).contains(v) {
                    return bad(format!("state entry {v} outside [0, 1]"));
                }
            }
            if row.action >= self.schema.k {
                return bad(format!("action {} ≥ K", row.action));
            }
            let o = &row.outcomes;
            if o.delay_risk > 1 || o.on_time_status > 1 {
                return bad("binary outcome outside {0, 1}".into());
            }
            if o.delivery_time >= self.schema.c {
                return bad(format!("time class {} ≥ C", o.delivery_time));
            }
            if o.on_time_status == 1 && o.delivery_time > self.schema.on_time_threshold {
                return bad("on-time flag set past the threshold class".into());
            }
            if !(0.0..=1.0).contains(&o.profit) {
                return bad(format!("profit {} outside [0, 1]", o.profit));
            }
            let expect = o.profit + f64::from(o.on_time_status);
            if (row.reward - expect).abs() > 1e-12 || !(0.0..=2.0).contains(&row.reward) {
                return bad(format!("reward {} != profit + status", row.reward));
            }
        }
        let n = self.rows.len();
        let mut seen = vec![false; n];
        for idx in self
            .splits
            .train
            .iter()
            .chain(&self.splits.val)
            .chain(&self.splits.test)
        {
            if *idx >= n || seen[*idx] {
                return Err(Error::InvalidConfig(format!(
                    "split index {idx} out of range or duplicated"
                )));
            }
            seen[*idx] = true;
        }
        Ok(())
    }

    pub fn split_rows(&self, split: Split) -> impl Iterator<Item = &Transition> {
        self.split_indices(split).iter().map(|&i| &self.rows[i])
    }

    pub fn split_indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// 8:1:1 split sizes: val and test each get ⌊n/10⌋, train keeps the rest.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = n / 10;
    let test = n / 10;
    (n - val - test, val, test)
}

/// Shuffles row indices by seed and partitions them 8:1:1. Each index set
/// is returned sorted, so membership alone carries the randomness and a
/// dataset round-tripped through disk yields identical iteration order.
pub fn split(n_rows: usize, seed: u64) -> Result<Splits> {
    if n_rows < MIN_ROWS {
        return Err(Error::InvalidConfig(format!(
            "{n_rows} rows < minimum {MIN_ROWS} for an 8:1:1 split"
        )));
    }
    let mut idx: Vec<usize> = (0..n_rows).collect();
    idx.shuffle(&mut seeds::rng(seed, "split"));
    let (n_train, n_val, _) = split_sizes(n_rows);
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..n_train + n_val].to_vec();
    let mut test = idx[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Splits { train, val, test })
}
