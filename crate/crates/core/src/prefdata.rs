//! Synthetic preference datasets with known ground truth.
//!
//! Each response is represented by a single feature vector (the prompt is
//! folded into it), so a preference pair is just two vectors plus the
//! evaluation-only `flipped` flag. A gold linear reward plays the annotator;
//! label-flip noise is injected afterwards on the train split only.
//!
//! Random streams (ChaCha8 seeded with `seed_from_u64(seed)`):
//! - stream [`GENERATION_STREAM`]: per pair, `d` standard normals for the
//!   first candidate, `d` for the second, then one uniform when the label
//!   temperature is positive. Splits are drawn in the order train, id_test,
//!   ood_test and ids are assigned consecutively from 0.
//! - stream [`NOISE_STREAM`]: one uniform in `[0, 1)` per train pair in
//!   ascending id order; the pair is flipped when the draw is `< eta`.
//! - stream [`GOLD_STREAM`]: gold direction for [`GoldSpec::random_unit`].

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::sigmoid;

pub const GENERATION_STREAM: u64 = 0;
pub const NOISE_STREAM: u64 = 1;
pub const GOLD_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    IdTest,
    OodTest,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::IdTest, Split::OodTest];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::IdTest => "id_test",
            Split::OodTest => "ood_test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One annotated comparison. `flipped` is ground truth for evaluation and
/// must never influence training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub id: u64,
    #[serde(rename = "chosen")]
    pub chosen_features: Vec<f64>,
    #[serde(rename = "rejected")]
    pub rejected_features: Vec<f64>,
    pub flipped: bool,
    pub split: Split,
}

impl PreferencePair {
    pub fn dim(&self) -> usize {
        self.chosen_features.len()
    }

    /// Swap chosen and rejected and toggle the ground-truth flag.
    pub fn flip(&mut self) {
        std::mem::swap(&mut self.chosen_features, &mut self.rejected_features);
        self.flipped = !self.flipped;
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.chosen_features.is_empty() {
            return Err("feature vectors must be non-empty".into());
        }
        if self.chosen_features.len() != self.rejected_features.len() {
            return Err(format!(
                "chosen has length {} but rejected has length {}",
                self.chosen_features.len(),
                self.rejected_features.len()
            ));
        }
        if !self
            .chosen_features
            .iter()
            .chain(&self.rejected_features)
            .all(|v| v.is_finite())
        {
            return Err("feature vectors must be finite".into());
        }
        Ok(())
    }
}

/// Simulated annotator: a linear gold reward plus a labeling temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldSpec {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// 0 labels by argmax; otherwise chosen is sampled Bradley–Terry style.
    pub label_temperature: f64,
}

impl GoldSpec {
    /// Unit-norm gold direction drawn from `seed`, zero bias.
    pub fn random_unit(d: usize, seed: u64, label_temperature: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("gold dimension must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(GOLD_STREAM);
        let mut weights: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        for w in &mut weights {
            *w /= norm;
        }
        let gold = GoldSpec {
            weights,
            bias: 0.0,
            label_temperature,
        };
        gold.validate()?;
        Ok(gold)
    }

    pub fn reward(&self, features: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(features)
            .map(|(w, x)| w * x)
            .sum::<f64>()
            + self.bias
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.iter().all(|w| *w == 0.0) {
            return Err(Error::invalid("gold weights need at least one nonzero entry"));
        }
        if !self.weights.iter().all(|w| w.is_finite()) || !self.bias.is_finite() {
            return Err(Error::invalid("gold weights must be finite"));
        }
        if !(self.label_temperature >= 0.0 && self.label_temperature.is_finite()) {
            return Err(Error::invalid("label temperature must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub id_test: usize,
    pub ood_test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::IdTest => self.id_test,
            Split::OodTest => self.ood_test,
        }
    }

    fn tally(pairs: &[PreferencePair]) -> Self {
        let mut counts = SplitCounts {
            train: 0,
            id_test: 0,
            ood_test: 0,
        };
        for p in pairs {
            match p.split {
                Split::Train => counts.train += 1,
                Split::IdTest => counts.id_test += 1,
                Split::OodTest => counts.ood_test += 1,
            }
        }
        counts
    }
}

/// Sibling metadata of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub d: usize,
    pub counts: SplitCounts,
    /// Probability that a train pair is flipped relative to the gold labels.
    pub eta: f64,
    pub seed: u64,
    pub ood_shift: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<PreferencePair>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    /// Build a dataset from externally produced pairs (e.g. precomputed
    /// embeddings), validating shapes and deriving the manifest.
    pub fn from_pairs(pairs: Vec<PreferencePair>) -> Result<Self> {
        let d = check_records(&pairs)?;
        let manifest = DatasetManifest {
            d,
            counts: SplitCounts::tally(&pairs),
            eta: 0.0,
            seed: 0,
            ood_shift: None,
        };
        Ok(Dataset { pairs, manifest })
    }

    pub fn dim(&self) -> usize {
        self.manifest.d
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &PreferencePair> + '_ {
        self.pairs.iter().filter(move |p| p.split == split)
    }

    /// Pairs of one split in ascending id order.
    pub fn split_vec(&self, split: Split) -> Vec<PreferencePair> {
        let mut out: Vec<PreferencePair> = self.split(split).cloned().collect();
        out.sort_by_key(|p| p.id);
        out
    }

    pub fn flipped_count(&self, split: Split) -> usize {
        self.split(split).filter(|p| p.flipped).count()
    }

    /// Flip every train pair whose id is in `ids`. Flipping the same id set
    /// twice restores the original dataset.
    pub fn flip_ids(&mut self, ids: &[u64]) {
        let mut wanted: Vec<u64> = ids.to_vec();
        wanted.sort_unstable();
        for p in self.pairs.iter_mut().filter(|p| p.split == Split::Train) {
            if wanted.binary_search(&p.id).is_ok() {
                p.flip();
            }
        }
    }
}

/// Labeling rule shared by generation and its tests: returns `true` when the
/// candidate with gold reward `g_first` is chosen over the one with `g_second`.
pub fn label_first<R: Rng + ?Sized>(g_first: f64, g_second: f64, temperature: f64, rng: &mut R) -> bool {
    if temperature == 0.0 {
        g_first >= g_second
    } else {
        let u: f64 = rng.random();
        u < sigmoid((g_first - g_second) / temperature)
    }
}

pub fn generate_synthetic(
    d: usize,
    counts: SplitCounts,
    gold: &GoldSpec,
    ood_shift: Option<&[f64]>,
    seed: u64,
) -> Result<Dataset> {
    if d == 0 {
        return Err(Error::invalid("dimension d must be positive"));
    }
    if counts.train == 0 || counts.id_test == 0 || counts.ood_test == 0 {
        return Err(Error::invalid("every split count must be positive"));
    }
    gold.validate()?;
    if gold.weights.len() != d {
        return Err(Error::invalid(format!(
            "gold weights have length {} but d = {d}",
            gold.weights.len()
        )));
    }
    if let Some(shift) = ood_shift {
        if shift.len() != d || !shift.iter().all(|s| s.is_finite()) {
            return Err(Error::invalid("ood shift must be a finite vector of length d"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(GENERATION_STREAM);
    let total = counts.train + counts.id_test + counts.ood_test;
    let mut pairs = Vec::with_capacity(total);
    let mut next_id = 0u64;
    for split in Split::ALL {
        let shift = match split {
            Split::OodTest => ood_shift,
            _ => None,
        };
        for _ in 0..counts.get(split) {
            let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                (0..d)
                    .map(|j| {
                        let z: f64 = rng.sample(StandardNormal);
                        z + shift.map_or(0.0, |s| s[j])
                    })
                    .collect()
            };
            let first = draw(&mut rng);
            let second = draw(&mut rng);
            let first_wins = label_first(
                gold.reward(&first),
                gold.reward(&second),
                gold.label_temperature,
                &mut rng,
            );
            let (chosen, rejected) = if first_wins {
                (first, second)
            } else {
                (second, first)
            };
            pairs.push(PreferencePair {
                id: next_id,
                chosen_features: chosen,
                rejected_features: rejected,
                flipped: false,
                split,
            });
            next_id += 1;
        }
    }

    Ok(Dataset {
        pairs,
        manifest: DatasetManifest {
            d,
            counts,
            eta: 0.0,
            seed,
            ood_shift: ood_shift.map(<[f64]>::to_vec),
        },
    })
}

/// Flip each train pair independently with probability `eta`.
pub fn inject_noise(dataset: &Dataset, eta: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::invalid(format!("noise rate {eta} outside [0, 1)")));
    }
    let mut out = dataset.clone();
    let mut train_idx: Vec<usize> = out
        .pairs
        .iter()
        .enumerate()
        .filter(|(_, p)| p.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    train_idx.sort_by_key(|&i| out.pairs[i].id);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(NOISE_STREAM);
    for i in train_idx {
        let u: f64 = rng.random();
        if u < eta {
            out.pairs[i].flip();
        }
    }
    // composition of two independent flip processes
    let prior = out.manifest.eta;
    out.manifest.eta = prior * (1.0 - eta) + eta * (1.0 - prior);
    Ok(out)
}

/// `pairs.jsonl` -> `pairs.manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

pub fn save_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    for pair in &dataset.pairs {
        serde_json::to_writer(&mut writer, pair)?;
        writer.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;

    let mpath = manifest_path(path);
    let mut text = serde_json::to_string_pretty(&dataset.manifest)?;
    text.push('\n');
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

/// Load a dataset. The sibling manifest is optional; without it one is
/// derived from the records (eta = 0, seed = 0).
pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut pairs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: PreferencePair = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        pairs.push(pair);
    }
    let mut dataset = Dataset::from_pairs(pairs)?;

    let mpath = manifest_path(path);
    if mpath.exists() {
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.d != dataset.manifest.d || manifest.counts != dataset.manifest.counts {
            return Err(Error::Schema {
                record: 0,
                message: format!(
                    "manifest (d = {}, counts = {:?}) disagrees with records (d = {}, counts = {:?})",
                    manifest.d, manifest.counts, dataset.manifest.d, dataset.manifest.counts
                ),
            });
        }
        dataset.manifest = manifest;
    }
    Ok(dataset)
}

/// Validates record shapes; returns the common dimension. Record numbers in
/// errors are 1-based.
fn check_records(pairs: &[PreferencePair]) -> Result<usize> {
    let mut d = None;
    let mut seen = BTreeMap::new();
    for (i, pair) in pairs.iter().enumerate() {
        pair.validate().map_err(|message| Error::Schema {
            record: i + 1,
            message,
        })?;
        match d {
            None => d = Some(pair.dim()),
            Some(d0) if d0 != pair.dim() => {
                return Err(Error::Schema {
                    record: i + 1,
                    message: format!("dimension {} differs from {d0} of earlier records", pair.dim()),
                })
            }
            _ => {}
        }
        if let Some(prev) = seen.insert(pair.id, i + 1) {
            return Err(Error::Schema {
                record: i + 1,
                message: format!("duplicate id {} (first seen at record {prev})", pair.id),
            });
        }
    }
    d.ok_or_else(|| Error::invalid("dataset has no records"))
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "id_test" => Ok(Split::IdTest),
            "ood_test" => Ok(Split::OodTest),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gold(d: usize, temperature: f64) -> GoldSpec {
        GoldSpec::random_unit(d, 11, temperature).unwrap()
    }

    fn small(seed: u64) -> Dataset {
        let counts = SplitCounts {
            train: 50,
            id_test: 10,
            ood_test: 10,
        };
        generate_synthetic(4, counts, &gold(4, 0.0), Some(&[1.0; 4]), seed).unwrap()
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = small(5);
        let b = small(5);
        assert_eq!(a, b);
        let c = small(6);
        assert_ne!(a, c);
    }

    #[test]
    fn argmax_labels_follow_gold() {
        let g = gold(4, 0.0);
        let counts = SplitCounts {
            train: 300,
            id_test: 50,
            ood_test: 50,
        };
        let ds = generate_synthetic(4, counts, &g, Some(&[1.0; 4]), 9).unwrap();
        for p in &ds.pairs {
            assert!(g.reward(&p.chosen_features) > g.reward(&p.rejected_features));
            assert!(!p.flipped);
        }
        assert_eq!(ds.manifest.counts, counts);
    }

    #[test]
    fn temperature_one_chosen_rate_matches_sigmoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let hits = (0..n).filter(|_| label_first(1.0, 0.0, 1.0, &mut rng)).count();
        let rate = hits as f64 / n as f64;
        // sigmoid(1) to 16 digits
        let expected = 0.7310585786300049;
        assert!((rate - expected).abs() <= 0.01, "rate {rate}");
    }

    #[test]
    fn ood_split_is_shifted() {
        let counts = SplitCounts {
            train: 10,
            id_test: 10,
            ood_test: 2000,
        };
        let ds = generate_synthetic(3, counts, &gold(3, 0.0), Some(&[2.0, 2.0, 2.0]), 1).unwrap();
        let ood: Vec<f64> = ds
            .split(Split::OodTest)
            .flat_map(|p| p.chosen_features.iter().chain(&p.rejected_features).copied())
            .collect();
        let mean = ood.iter().sum::<f64>() / ood.len() as f64;
        assert!((mean - 2.0).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn invalid_generation_arguments() {
        let counts = SplitCounts {
            train: 1,
            id_test: 1,
            ood_test: 1,
        };
        assert!(matches!(
            generate_synthetic(0, counts, &gold(1, 0.0), None, 0),
            Err(Error::InvalidArgument(_))
        ));
        let zero = SplitCounts { train: 0, ..counts };
        assert!(matches!(
            generate_synthetic(1, zero, &gold(1, 0.0), None, 0),
            Err(Error::InvalidArgument(_))
        ));
        let bad_gold = GoldSpec {
            weights: vec![0.0, 0.0],
            bias: 0.0,
            label_temperature: 0.0,
        };
        assert!(generate_synthetic(2, counts, &bad_gold, None, 0).is_err());
    }

    #[test]
    fn zero_noise_is_identity() {
        let ds = small(3);
        let noisy = inject_noise(&ds, 0.0, 99).unwrap();
        assert_eq!(noisy.pairs, ds.pairs);
        assert_eq!(noisy.manifest.eta, 0.0);
    }

    #[test]
    fn near_certain_noise_flips_everything() {
        let ds = small(3);
        let noisy = inject_noise(&ds, 0.999999, 1).unwrap();
        assert_eq!(noisy.flipped_count(Split::Train), ds.manifest.counts.train);
        assert_eq!(noisy.flipped_count(Split::IdTest), 0);
        assert!(inject_noise(&ds, 1.0 - 1e-17, 1).is_err());
        assert!(inject_noise(&ds, 1.0, 1).is_err());
        assert!(inject_noise(&ds, -0.1, 1).is_err());
        assert!(inject_noise(&ds, f64::NAN, 1).is_err());
    }

    #[test]
    fn noise_touches_only_train_and_preserves_vectors() {
        let ds = small(4);
        let noisy = inject_noise(&ds, 0.5, 8).unwrap();
        for (a, b) in ds.pairs.iter().zip(&noisy.pairs) {
            assert_eq!(a.id, b.id);
            if a.split != Split::Train {
                assert_eq!(a, b);
            } else if b.flipped {
                assert_eq!(a.chosen_features, b.rejected_features);
                assert_eq!(a.rejected_features, b.chosen_features);
            } else {
                assert_eq!(a, b);
            }
        }
        assert!((noisy.manifest.eta - 0.5).abs() < 1e-15);
    }

    #[test]
    fn flipping_same_ids_twice_is_identity() {
        let ds = small(4);
        let mut twice = ds.clone();
        let ids = [0, 3, 7, 20, 49];
        twice.flip_ids(&ids);
        assert_ne!(twice, ds);
        twice.flip_ids(&ids);
        assert_eq!(twice, ds);
    }
}
