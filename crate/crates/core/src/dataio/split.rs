use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RetainMode {
    /// Leading part of the sequence in time order.
    #[default]
    Prefix,
    /// Evenly spaced subsample across the whole sequence.
    Stride,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    /// Fraction of each sequence's windows to keep, in `(0, 1]`.
    pub fraction: f64,
    pub mode: RetainMode,
}

impl Default for SplitSpec {
    /// Harbour split: train h02,h04,h06; validate h03,h05; test h01,h07.
    fn default() -> Self {
        let ids = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        Self {
            train: ids(&["h02", "h04", "h06"]),
            val: ids(&["h03", "h05"]),
            test: ids(&["h01", "h07"]),
            fraction: 1.0,
            mode: RetainMode::Prefix,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Partitions `available` ids according to `spec`. Every id named by the
/// spec must be available; ids may not appear in two subsets.
pub fn split_dataset(available: &[String], spec: &SplitSpec) -> Result<Partition> {
    if !(spec.fraction > 0.0 && spec.fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {} outside (0, 1]", spec.fraction)));
    }
    let mut seen = std::collections::BTreeSet::new();
    for id in spec.train.iter().chain(&spec.val).chain(&spec.test) {
        if !available.contains(id) {
            return Err(Error::UnknownSequence(id.clone()));
        }
        if !seen.insert(id) {
            return Err(Error::InvalidArgument(format!("sequence `{id}` assigned to more than one subset")));
        }
    }
    Ok(Partition {
        train: spec.train.clone(),
        val: spec.val.clone(),
        test: spec.test.clone(),
    })
}

/// Keeps `floor(fraction * n)` items, either the leading ones or an evenly
/// spaced subsample.
pub fn retain_fraction<T: Clone>(items: &[T], fraction: f64, mode: RetainMode) -> Vec<T> {
    let n = items.len();
    let keep = ((fraction.clamp(0.0, 1.0) * n as f64) + 1e-9).floor() as usize;
    match mode {
        RetainMode::Prefix => items[..keep].to_vec(),
        RetainMode::Stride => {
            if keep == 0 {
                return Vec::new();
            }
            (0..keep).map(|i| items[i * n / keep].clone()).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn harbour() -> Vec<String> {
        (1..=7).map(|i| format!("h0{i}")).collect()
    }

    #[test]
    fn default_is_harbour_split() {
        let p = split_dataset(&harbour(), &SplitSpec::default()).unwrap();
        assert_eq!(p.train, ["h02", "h04", "h06"]);
        assert_eq!(p.val, ["h03", "h05"]);
        assert_eq!(p.test, ["h01", "h07"]);
    }

    #[test]
    fn unknown_id_rejected() {
        let spec = SplitSpec {
            test: vec!["h09".into()],
            ..SplitSpec::default()
        };
        assert!(matches!(split_dataset(&harbour(), &spec), Err(Error::UnknownSequence(id)) if id == "h09"));
    }

    #[test]
    fn duplicate_assignment_rejected() {
        let spec = SplitSpec {
            test: vec!["h02".into()],
            ..SplitSpec::default()
        };
        assert!(split_dataset(&harbour(), &spec).is_err());
    }

    #[test]
    fn fractions() {
        let items: Vec<usize> = (0..300).collect();
        assert_eq!(retain_fraction(&items, 1.0, RetainMode::Prefix), items);
        let third = retain_fraction(&items, 1.0 / 3.0, RetainMode::Prefix);
        assert_eq!(third, (0..100).collect::<Vec<_>>());
        let strided = retain_fraction(&items, 1.0 / 3.0, RetainMode::Stride);
        assert_eq!(strided.len(), 100);
        assert_eq!(strided[1], 3);
    }
}
