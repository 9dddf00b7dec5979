// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-item difficulty: how deep and how late a prediction settles.

use serde::{Deserialize, Serialize};

use crate::anomaly::{item_trajectory, DemoMode, McTask};
use crate::error::{Error, Result};
use crate::lens::{LogitLens, TunedLens};
use crate::model::TransformerModel;
use crate::numerics::stats::spearman_rho;
use crate::numerics::Scalar;

/// Start of the longest constant suffix.
fn stable_suffix_start(labels: &[usize]) -> Result<usize> {
    let last = *labels.last().ok_or(Error::Empty("label sequence"))?;
    Ok(labels.iter().rposition(|&x| x != last).map_or(0, |i| i + 1))
}

/// Smallest layer `j` such that the top-1 labels at layers `j..=L` agree.
pub fn prediction_depth(top1_by_layer: &[usize]) -> Result<usize> {
    stable_suffix_start(top1_by_layer)
}

/// Smallest checkpoint `c` from which the top-1 label equals the final one.
pub fn iteration_learned(top1_by_checkpoint: &[usize]) -> Result<usize> {
    stable_suffix_start(top1_by_checkpoint)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DifficultyRecord {
    pub item_id: usize,
    pub depth_tuned: usize,
    pub depth_logit: usize,
    pub iteration_learned: usize,
    /// Final checkpoint's output picks the gold option.
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyReport {
    /// `None` when a rank column is constant.
    pub rho_tuned: Option<f64>,
    pub rho_logit: Option<f64>,
    pub records: Vec<DifficultyRecord>,
}

impl DifficultyReport {
    /// Spearman correlations of both depths against iteration learned.
    pub fn from_records(records: Vec<DifficultyRecord>) -> Result<Self> {
        let col = |f: fn(&DifficultyRecord) -> usize| -> Vec<f64> { records.iter().map(|r| f(r) as f64).collect() };
        let iteration = col(|r| r.iteration_learned);
        let rho = |depth: Vec<f64>| match spearman_rho(&depth, &iteration) {
            Ok(r) => Ok(Some(r)),
            Err(Error::Undefined(_)) => Ok(None),
            Err(e) => Err(e),
        };
        let rho_tuned = rho(col(|r| r.depth_tuned))?;
        let rho_logit = rho(col(|r| r.depth_logit))?;
        Ok(Self {
            rho_tuned,
            rho_logit,
            records,
        })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["item_id", "depth_tuned", "depth_logit", "iteration_learned", "correct"])?;
        for r in &self.records {
            w.write_record([
                r.item_id.to_string(),
                r.depth_tuned.to_string(),
                r.depth_logit.to_string(),
                r.iteration_learned.to_string(),
                u8::from(r.correct).to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Depth under the tuned and the logit lens on the last checkpoint, and
/// iteration learned from each checkpoint's output, for every item.
pub fn difficulty_correlation<T: Scalar>(
    task: &McTask,
    checkpoints: &[TransformerModel<T>],
    lens: &TunedLens<T>,
    demos: DemoMode,
) -> Result<DifficultyReport> {
    if checkpoints.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least two checkpoints, got {}",
            checkpoints.len()
        )));
    }
    if task.is_empty() {
        return Err(Error::Empty("task"));
    }
    let last = checkpoints.last().expect("nonempty");
    let logit = LogitLens::<T>::Plain;
    let mut records = Vec::with_capacity(task.len());
    for (item_id, item) in task.items.iter().enumerate() {
        let tuned = item_trajectory(last, lens, item, demos)?.top1();
        let plain = item_trajectory(last, &logit, item, demos)?.top1();
        let by_checkpoint = checkpoints
            .iter()
            .map(|m| Ok(*item_trajectory(m, &logit, item, demos)?.top1().last().expect("L + 1 layers")))
            .collect::<Result<Vec<usize>>>()?;
        records.push(DifficultyRecord {
            item_id,
            depth_tuned: prediction_depth(&tuned)?,
            depth_logit: prediction_depth(&plain)?,
            iteration_learned: iteration_learned(&by_checkpoint)?,
            correct: by_checkpoint.last() == Some(&item.gold),
        });
    }
    DifficultyReport::from_records(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Literal definition: the first index whose whole suffix is constant.
    fn oracle(xs: &[usize]) -> usize {
        (0..xs.len()).find(|&j| xs[j..].iter().all(|&x| x == xs[j])).unwrap()
    }

    #[test]
    fn exhaustive_binary_sequences() {
        let mut count = 0;
        for len in 1..=5 {
            for bits in 0..(1u32 << len) {
                let xs: Vec<usize> = (0..len).map(|i| ((bits >> i) & 1) as usize).collect();
                assert_eq!(prediction_depth(&xs).unwrap(), oracle(&xs), "{xs:?}");
                assert_eq!(iteration_learned(&xs).unwrap(), oracle(&xs), "{xs:?}");
                count += 1;
            }
        }
        assert_eq!(count, 62);
        assert!(prediction_depth(&[]).is_err());
        assert!(iteration_learned(&[]).is_err());
    }

    #[test]
    fn worked_examples() {
        assert_eq!(prediction_depth(&[0, 0, 1, 1, 1]).unwrap(), 2);
        assert_eq!(iteration_learned(&[0, 1, 0, 0]).unwrap(), 2);
        assert_eq!(prediction_depth(&[3, 3, 3, 3]).unwrap(), 0);
        assert_eq!(prediction_depth(&[1, 1, 1, 2]).unwrap(), 3);
    }

    #[test]
    fn matching_orders_give_unit_rho() {
        let records: Vec<DifficultyRecord> = (0..6)
            .map(|i| DifficultyRecord {
                item_id: i,
                depth_tuned: i,
                depth_logit: 5 - i,
                iteration_learned: 2 * i,
                correct: true,
            })
            .collect();
        let r = DifficultyReport::from_records(records.clone()).unwrap();
        assert_eq!(r.rho_tuned, Some(1.0));
        assert_eq!(r.rho_logit, Some(-1.0));
        let csv = r.to_csv().unwrap();
        assert!(csv.starts_with("item_id,depth_tuned,depth_logit,iteration_learned,correct\n0,0,5,0,1\n"));

        let flat: Vec<DifficultyRecord> = records
            .into_iter()
            .map(|r| DifficultyRecord { depth_tuned: 1, ..r })
            .collect();
        let r = DifficultyReport::from_records(flat).unwrap();
        assert_eq!((r.rho_tuned, r.rho_logit), (None, Some(-1.0)));
        assert!(DifficultyReport::from_records(Vec::new()).is_err());
    }

    proptest! {
        #[test]
        fn relabeling_and_range(xs in prop::collection::vec(0usize..4, 1..12), perm in Just([2usize, 0, 3, 1]).prop_shuffle()) {
            let d = prediction_depth(&xs).unwrap();
            prop_assert!(d < xs.len());
            let relabeled: Vec<usize> = xs.iter().map(|&x| perm[x]).collect();
            prop_assert_eq!(prediction_depth(&relabeled).unwrap(), d);
            prop_assert_eq!(iteration_learned(&xs).unwrap(), d);
        }

        #[test]
        fn constant_lists_are_zero(x in 0usize..10, n in 1usize..10) {
            prop_assert_eq!(prediction_depth(&vec![x; n]).unwrap(), 0);
            prop_assert_eq!(iteration_learned(&vec![x; n]).unwrap(), 0);
        }
    }
}
