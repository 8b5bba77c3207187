//! Preference accuracy, noise-filter quality, and per-pair exports.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crm::EpochRecord;
use crate::error::{Error, Result};
use crate::objectives::ObjectiveSpec;
use crate::prefdata::{Dataset, PreferencePair, Split, SplitCounts};
use crate::rewardnet::RewardModel;

pub const LOSS_CSV_HEADER: &str = "id,loss,flipped";
pub const REWARD_CSV_HEADER: &str = "id,chosen_reward,rejected_reward,flipped";

/// Fraction of pairs with `r(chosen) > r(rejected)`; a zero margin counts as wrong.
pub fn preference_accuracy<M: RewardModel + ?Sized>(model: &M, pairs: &[PreferencePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("accuracy of an empty split is undefined"));
    }
    let mut correct = 0usize;
    for p in pairs {
        if model.margin(p)? > 0.0 {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

/// Noise-exclusion quality of one epoch's selections for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterMetrics {
    pub epoch: usize,
    pub model: usize,
    pub excluded: usize,
    pub flipped: usize,
    pub excluded_flipped: usize,
    /// `None` when nothing was excluded.
    pub precision: Option<f64>,
    /// `None` when there are no flipped pairs.
    pub recall: Option<f64>,
}

impl FilterMetrics {
    pub fn is_applicable(&self) -> bool {
        self.precision.is_some()
    }
}

/// Precision / recall of the pairs *not* used to update `model` during
/// `epoch` (1-based; `None` = last logged epoch).
pub fn filter_metrics(
    history: &[EpochRecord],
    dataset: &Dataset,
    epoch: Option<usize>,
    model: usize,
) -> Result<FilterMetrics> {
    let record = match epoch {
        None => history.last(),
        Some(e) => history.iter().find(|r| r.epoch == e),
    }
    .ok_or_else(|| Error::invalid("selection log has no matching epoch"))?;

    let mut selected = BTreeSet::new();
    for batch in &record.selections {
        let ids = batch
            .received
            .get(model)
            .ok_or_else(|| Error::invalid(format!("selection log has no model {model}")))?;
        selected.extend(ids.iter().copied());
    }
    let mut excluded = 0;
    let mut flipped = 0;
    let mut excluded_flipped = 0;
    for p in dataset.split(Split::Train) {
        let out = !selected.contains(&p.id);
        excluded += out as usize;
        flipped += p.flipped as usize;
        excluded_flipped += (out && p.flipped) as usize;
    }
    Ok(FilterMetrics {
        epoch: record.epoch,
        model,
        excluded,
        flipped,
        excluded_flipped,
        precision: (excluded > 0).then(|| excluded_flipped as f64 / excluded as f64),
        recall: (flipped > 0).then(|| excluded_flipped as f64 / flipped as f64),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub id: u64,
    pub loss: f64,
    pub flipped: bool,
}

/// Per-train-pair loss under `objective` (for the implicit objective `model`
/// must already report implicit rewards).
pub fn loss_histogram<M: RewardModel + ?Sized>(
    model: &M,
    dataset: &Dataset,
    objective: &ObjectiveSpec,
) -> Result<Vec<LossRow>> {
    dataset
        .split_vec(Split::Train)
        .iter()
        .map(|p| {
            Ok(LossRow {
                id: p.id,
                loss: objective.loss(model.margin(p)?)?,
                flipped: p.flipped,
            })
        })
        .collect()
}

/// Mean and population standard deviation of one group; `None` when empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl GroupStats {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return GroupStats { mean: None, std: None };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        GroupStats {
            mean: Some(mean),
            std: Some(var.sqrt()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossGroups {
    pub clean: GroupStats,
    pub noisy: GroupStats,
}

impl LossGroups {
    pub fn of(rows: &[LossRow]) -> Self {
        let clean: Vec<f64> = rows.iter().filter(|r| !r.flipped).map(|r| r.loss).collect();
        let noisy: Vec<f64> = rows.iter().filter(|r| r.flipped).map(|r| r.loss).collect();
        LossGroups {
            clean: GroupStats::of(&clean),
            noisy: GroupStats::of(&noisy),
        }
    }

    /// Mean noisy loss minus mean clean loss.
    pub fn gap(&self) -> Option<f64> {
        Some(self.noisy.mean? - self.clean.mean?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardRow {
    pub id: u64,
    pub chosen_reward: f64,
    pub rejected_reward: f64,
    pub flipped: bool,
}

pub fn reward_scatter<M: RewardModel + ?Sized>(model: &M, pairs: &[PreferencePair]) -> Result<Vec<RewardRow>> {
    pairs
        .iter()
        .map(|p| {
            Ok(RewardRow {
                id: p.id,
                chosen_reward: model.reward(&p.chosen_features)?,
                rejected_reward: model.reward(&p.rejected_features)?,
                flipped: p.flipped,
            })
        })
        .collect()
}

fn write_lines(path: &Path, header: &str, lines: impl Iterator<Item = String>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    for line in lines {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Floats use Rust's shortest round-trip formatting.
pub fn write_loss_csv(rows: &[LossRow], path: &Path) -> Result<()> {
    write_lines(
        path,
        LOSS_CSV_HEADER,
        rows.iter().map(|r| format!("{},{},{}", r.id, r.loss, r.flipped)),
    )
}

pub fn write_reward_csv(rows: &[RewardRow], path: &Path) -> Result<()> {
    write_lines(
        path,
        REWARD_CSV_HEADER,
        rows.iter()
            .map(|r| format!("{},{},{},{}", r.id, r.chosen_reward, r.rejected_reward, r.flipped)),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub id_accuracy: f64,
    pub ood_accuracy: f64,
    pub counts: SplitCounts,
    pub filter: FilterSummary,
    pub loss_groups: LossGroups,
}

pub fn evaluate<M: RewardModel + ?Sized>(
    model: &M,
    dataset: &Dataset,
    objective: &ObjectiveSpec,
    filter: Option<&FilterMetrics>,
) -> Result<EvalReport> {
    let rows = loss_histogram(model, dataset, objective)?;
    Ok(EvalReport {
        id_accuracy: preference_accuracy(model, &dataset.split_vec(Split::IdTest))?,
        ood_accuracy: preference_accuracy(model, &dataset.split_vec(Split::OodTest))?,
        counts: dataset.manifest.counts,
        filter: FilterSummary {
            precision: filter.and_then(|f| f.precision),
            recall: filter.and_then(|f| f.recall),
        },
        loss_groups: LossGroups::of(&rows),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crm::BatchSelection;
    use crate::prefdata::{generate_synthetic, GoldSpec};
    use crate::rewardnet::{ModelKind, RewardParams};

    fn clean(seed: u64) -> (Dataset, RewardParams) {
        let gold = GoldSpec::random_unit(5, seed, 0.0).unwrap();
        let counts = SplitCounts {
            train: 200,
            id_test: 100,
            ood_test: 100,
        };
        let ds = generate_synthetic(5, counts, &gold, Some(&[1.0; 5]), seed).unwrap();
        (ds, RewardParams::linear(gold.weights.clone(), gold.bias))
    }

    fn all_flipped(ds: &Dataset) -> Vec<PreferencePair> {
        ds.split_vec(Split::IdTest)
            .into_iter()
            .map(|mut p| {
                p.flip();
                p
            })
            .collect()
    }

    #[test]
    fn gold_model_accuracy() {
        let (ds, gold) = clean(1);
        let id = ds.split_vec(Split::IdTest);
        assert_eq!(preference_accuracy(&gold, &id).unwrap(), 1.0);
        assert_eq!(preference_accuracy(&gold, &all_flipped(&ds)).unwrap(), 0.0);
        let zero = RewardParams::zeros(ModelKind::Linear, 5);
        assert_eq!(preference_accuracy(&zero, &id).unwrap(), 0.0);
        assert!(preference_accuracy(&gold, &[]).is_err());
    }

    #[test]
    fn accuracy_complement_bound() {
        let (ds, _) = clean(2);
        let id = ds.split_vec(Split::IdTest);
        let flipped = all_flipped(&ds);
        let other = RewardParams::linear(vec![0.3, -1.0, 0.2, 0.0, 0.5], 0.0);
        let a = preference_accuracy(&other, &id).unwrap();
        let b = preference_accuracy(&other, &flipped).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
        let zero = RewardParams::zeros(ModelKind::Linear, 5);
        assert!(preference_accuracy(&zero, &id).unwrap() + preference_accuracy(&zero, &flipped).unwrap() <= 1.0);
    }

    fn record(selected: Vec<u64>) -> EpochRecord {
        EpochRecord {
            epoch: 1,
            mean_selected_loss: vec![0.0],
            id_accuracy: vec![None],
            order: vec![],
            selections: vec![BatchSelection {
                batch: 0,
                received: vec![selected],
            }],
        }
    }

    #[test]
    fn filter_metrics_exact_exclusion() {
        let (mut ds, _) = clean(3);
        ds.flip_ids(&[1, 5, 9]);
        let kept: Vec<u64> = (0..200).filter(|i| ![1, 5, 9].contains(i)).collect();
        let m = filter_metrics(&[record(kept)], &ds, None, 0).unwrap();
        assert_eq!(m.precision, Some(1.0));
        assert_eq!(m.recall, Some(1.0));

        let everything: Vec<u64> = (0..200).collect();
        let m = filter_metrics(&[record(everything)], &ds, None, 0).unwrap();
        assert!(!m.is_applicable());
        assert_eq!(m.recall, Some(0.0));
        assert!(filter_metrics(&[], &ds, None, 0).is_err());
        assert!(filter_metrics(&[record(vec![])], &ds, Some(4), 0).is_err());
    }

    #[test]
    fn zero_model_losses_are_ln2() {
        let (ds, gold) = clean(4);
        let zero = RewardParams::zeros(ModelKind::Linear, 5);
        let rows = loss_histogram(&zero, &ds, &ObjectiveSpec::Bt).unwrap();
        assert_eq!(rows.len(), 200);
        assert!(rows.iter().all(|r| (r.loss - std::f64::consts::LN_2).abs() < 1e-15));
        let scatter = reward_scatter(&gold, &ds.split_vec(Split::Train)).unwrap();
        assert_eq!(scatter.len(), 200);
        assert!(scatter.iter().all(|r| r.chosen_reward > r.rejected_reward));
    }

    #[test]
    fn group_stats_population_std() {
        let g = GroupStats::of(&[0.2, 0.4]);
        assert!((g.mean.unwrap() - 0.3).abs() < 1e-15);
        assert!((g.std.unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(GroupStats::of(&[]).mean, None);
    }
}
