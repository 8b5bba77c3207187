//! Collaborative reward modeling: two reward models trained side by side,
//! each updated only on the pairs its peer scores most confidently.
//!
//! One epoch of [`co_train`]:
//! 1. order the train split, by descending combined peer-review score
//!    (curriculum on) or by a seeded shuffle (curriculum off); the `batches`
//!    curriculum shuffles, then visits whole batches by descending mean score;
//! 2. cut the order into consecutive batches of `batch_size`;
//! 3. score every pair of the batch under both models *before* any update and
//!    select the top `max(1, ⌊λ·|batch|⌋)` pairs per reviewer;
//! 4. with peer review, the pairs selected by ψ update φ and vice versa; with
//!    self review each model updates on its own selection; with no review
//!    both models see the whole batch. Each model takes one optimizer step on
//!    the mean loss gradient of the pairs it received, accumulated in
//!    ascending pair-id order.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::preference_accuracy;
use crate::objectives::{accumulate_implicit, sigmoid, ImplicitReward, ObjectiveSpec};
use crate::prefdata::{Dataset, PreferencePair, Split};
use crate::rewardnet::{
    accumulate_loss_gradient, init, Checkpoint, ModelSpec, OptimizerKind, OptimizerState, RewardModel, RewardParams,
};

/// Per-batch mean losses above this magnitude abort the run.
pub const DIVERGENCE_LIMIT: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewMode {
    Peer,
    #[serde(rename = "self")]
    SelfReview,
    None,
}

impl FromStr for ReviewMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "peer" => Ok(ReviewMode::Peer),
            "self" => Ok(ReviewMode::SelfReview),
            "none" => Ok(ReviewMode::None),
            other => Err(Error::invalid(format!("unknown review mode {other:?}"))),
        }
    }
}

impl fmt::Display for ReviewMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReviewMode::Peer => "peer",
            ReviewMode::SelfReview => "self",
            ReviewMode::None => "none",
        })
    }
}

/// Epoch ordering of the train split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Curriculum {
    /// Seeded shuffle.
    #[default]
    Off,
    /// Every pair sorted by descending combined score, then cut into batches.
    On,
    /// Shuffled batches, visited in descending order of their mean combined score.
    Batches,
}

impl FromStr for Curriculum {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Curriculum::Off),
            "on" => Ok(Curriculum::On),
            "batches" => Ok(Curriculum::Batches),
            other => Err(Error::invalid(format!("unknown curriculum mode {other:?}"))),
        }
    }
}

impl fmt::Display for Curriculum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Curriculum::Off => "off",
            Curriculum::On => "on",
            Curriculum::Batches => "batches",
        })
    }
}

/// How the two models' peer-review scores merge into one curriculum key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineRule {
    #[default]
    Mean,
    Min,
    ModelPhi,
}

impl CombineRule {
    fn combine(self, phi: f64, psi: f64) -> f64 {
        match self {
            CombineRule::Mean => 0.5 * (phi + psi),
            CombineRule::Min => phi.min(psi),
            CombineRule::ModelPhi => phi,
        }
    }
}

impl FromStr for CombineRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(CombineRule::Mean),
            "min" => Ok(CombineRule::Min),
            "model_phi" => Ok(CombineRule::ModelPhi),
            other => Err(Error::invalid(format!("unknown curriculum combine rule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Selection ratio λ_t.
    pub lambda: f64,
    pub review: ReviewMode,
    pub curriculum: Curriculum,
    pub combine: CombineRule,
    pub objective: ObjectiveSpec,
    /// Shuffle seed; epoch `e` uses ChaCha8 stream `e`.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::Adam,
            lambda: 1.0,
            review: ReviewMode::None,
            curriculum: Curriculum::Off,
            combine: CombineRule::Mean,
            objective: ObjectiveSpec::Bt,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and >= 0"));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::invalid(format!("selection ratio {} outside (0, 1]", self.lambda)));
        }
        if floor_count(self.lambda, self.batch_size) < 1 {
            return Err(Error::invalid(format!(
                "selection ratio {} keeps no pair of a batch of {}",
                self.lambda, self.batch_size
            )));
        }
        if self.review == ReviewMode::None && self.lambda != 1.0 {
            return Err(Error::invalid("review mode none requires lambda = 1"));
        }
        self.objective.validate()
    }
}

fn floor_count(lambda: f64, n: usize) -> usize {
    // the epsilon absorbs products like 0.6 * 5 = 2.9999999999999996
    (lambda * n as f64 + 1e-9).floor() as usize
}

/// Number of pairs kept from a batch of `n`.
pub fn selection_size(lambda: f64, n: usize) -> usize {
    floor_count(lambda, n).clamp(1, n.max(1))
}

/// `σ(margin)` of the reviewing model on the pair.
pub fn peer_review_score<M: RewardModel + ?Sized>(model: &M, pair: &PreferencePair) -> Result<f64> {
    Ok(sigmoid(model.margin(pair)?))
}

/// Top-`k` pair ids by score, `k = max(1, ⌊λ·n⌋)`; ties go to the smaller
/// pair id. Maximizing the score sum over subsets of size `k` is exactly
/// this top-`k`. Selected ids are returned in input order.
pub fn select_batch(scores: &[(u64, f64)], lambda: f64) -> Result<Vec<u64>> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot select from an empty batch"));
    }
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::invalid(format!("selection ratio {lambda} outside (0, 1]")));
    }
    let k = selection_size(lambda, scores.len());
    if k == scores.len() {
        return Ok(scores.iter().map(|(id, _)| *id).collect());
    }
    let mut ranked: Vec<usize> = (0..scores.len()).collect();
    ranked.sort_by(|&a, &b| {
        scores[b]
            .1
            .total_cmp(&scores[a].1)
            .then(scores[a].0.cmp(&scores[b].0))
    });
    let mut keep = vec![false; scores.len()];
    for &i in &ranked[..k] {
        keep[i] = true;
    }
    Ok(scores
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|((id, _), _)| *id)
        .collect())
}

/// Positions of `pairs` ordered by descending combined peer-review score.
/// The sort is stable, so equal keys keep their input order.
pub fn curriculum_sort<A, B>(pairs: &[PreferencePair], phi: &A, psi: &B, combine: CombineRule) -> Result<Vec<usize>>
where
    A: RewardModel + ?Sized,
    B: RewardModel + ?Sized,
{
    let keys = combined_keys(pairs, phi, psi, combine)?;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]));
    Ok(order)
}

fn combined_keys<A, B>(pairs: &[PreferencePair], phi: &A, psi: &B, combine: CombineRule) -> Result<Vec<f64>>
where
    A: RewardModel + ?Sized,
    B: RewardModel + ?Sized,
{
    pairs
        .iter()
        .map(|p| {
            let s_phi = peer_review_score(phi, p)?;
            let s_psi = match combine {
                CombineRule::ModelPhi => s_phi,
                _ => peer_review_score(psi, p)?,
            };
            Ok(combine.combine(s_phi, s_psi))
        })
        .collect()
}

/// Cuts `order` into batches of `batch_size` and reorders whole batches by
/// descending mean combined score (stable). Batch composition is unchanged.
pub fn curriculum_batches<A, B>(
    pairs: &[PreferencePair],
    order: &[usize],
    batch_size: usize,
    phi: &A,
    psi: &B,
    combine: CombineRule,
) -> Result<Vec<usize>>
where
    A: RewardModel + ?Sized,
    B: RewardModel + ?Sized,
{
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    let keys = combined_keys(pairs, phi, psi, combine)?;
    let mut batches: Vec<(f64, &[usize])> = order
        .chunks(batch_size)
        .map(|c| (c.iter().map(|&i| keys[i]).sum::<f64>() / c.len() as f64, c))
        .collect();
    batches.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(batches.into_iter().flat_map(|(_, c)| c.iter().copied()).collect())
}

/// A reward model under training: params, optimizer state, and (for the
/// implicit objective) the frozen reference scorer.
#[derive(Debug, Clone)]
pub struct Learner {
    pub spec: ModelSpec,
    pub params: RewardParams,
    pub reference: Option<RewardParams>,
    objective: ObjectiveSpec,
    optimizer: OptimizerState,
}

impl Learner {
    pub fn new(spec: &ModelSpec, config: &TrainConfig) -> Result<Self> {
        let params = init(spec)?;
        let reference = config.objective.is_implicit().then(|| params.clone());
        let optimizer = OptimizerState::new(config.optimizer, config.learning_rate, &params)?;
        Ok(Learner {
            spec: *spec,
            params,
            reference,
            objective: config.objective,
            optimizer,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.spec, &self.params)
    }

    /// Mean loss and mean gradient over `pairs`, accumulated in ascending id order.
    pub fn batch_gradient(&self, pairs: &[&PreferencePair]) -> Result<(f64, RewardParams)> {
        let mut sorted: Vec<&PreferencePair> = pairs.to_vec();
        sorted.sort_by_key(|p| p.id);
        let mut grad = self.params.zeros_like();
        if sorted.is_empty() {
            return Ok((0.0, grad));
        }
        let weight = 1.0 / sorted.len() as f64;
        let mut total = 0.0;
        for pair in sorted {
            total += match (&self.objective, &self.reference) {
                (ObjectiveSpec::DpoImplicit { beta }, Some(reference)) => {
                    accumulate_implicit(&self.params, reference, pair, *beta, weight, &mut grad)?
                }
                (objective, _) => accumulate_loss_gradient(&self.params, pair, objective, weight, &mut grad)?,
            };
        }
        Ok((total * weight, grad))
    }

    pub fn apply(&mut self, grad: &RewardParams) -> Result<()> {
        self.optimizer.step(&mut self.params, grad)
    }

    pub fn loss(&self, pair: &PreferencePair) -> Result<f64> {
        self.objective.loss(self.margin(pair)?)
    }
}

impl RewardModel for Learner {
    fn reward(&self, features: &[f64]) -> Result<f64> {
        match (&self.objective, &self.reference) {
            (ObjectiveSpec::DpoImplicit { beta }, Some(reference)) => ImplicitReward {
                policy: &self.params,
                reference,
                beta: *beta,
            }
            .reward(features),
            _ => self.params.score(features),
        }
    }
}

/// Pairs received by each model in one batch, ids ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSelection {
    pub batch: usize,
    pub received: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss over the pairs each model was updated on.
    pub mean_selected_loss: Vec<f64>,
    /// Held-out (id_test) accuracy per model at epoch end, when that split exists.
    pub id_accuracy: Vec<Option<f64>>,
    /// Train pair ids in the order they were visited.
    pub order: Vec<u64>,
    pub selections: Vec<BatchSelection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoTrainResult {
    pub config: TrainConfig,
    pub phi: Checkpoint,
    pub psi: Checkpoint,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardResult {
    pub config: TrainConfig,
    pub model: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Epoch-end hook: `(epoch, models)`.
pub type EpochObserver<'a> = dyn FnMut(usize, &[Learner]) -> Result<()> + 'a;

fn epoch_order(
    train: &[PreferencePair],
    learners: &[Learner],
    config: &TrainConfig,
    epoch: usize,
) -> Result<Vec<usize>> {
    let psi = learners.get(1).unwrap_or(&learners[0]);
    match config.curriculum {
        Curriculum::On => curriculum_sort(train, &learners[0], psi, config.combine),
        Curriculum::Batches => {
            let shuffled = shuffled_order(train.len(), config.seed, epoch);
            curriculum_batches(train, &shuffled, config.batch_size, &learners[0], psi, config.combine)
        }
        Curriculum::Off => Ok(shuffled_order(train.len(), config.seed, epoch)),
    }
}

fn shuffled_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// Selections for one batch. Entry `i` lists the pairs model `i` is updated on.
fn review_batch(batch: &[&PreferencePair], learners: &[Learner], config: &TrainConfig) -> Result<Vec<Vec<u64>>> {
    let all: Vec<u64> = batch.iter().map(|p| p.id).collect();
    if config.review == ReviewMode::None {
        return Ok(vec![all; learners.len()]);
    }
    // every reviewer scores with pre-update parameters
    let picks = learners
        .iter()
        .map(|m| {
            let scores = batch
                .iter()
                .map(|p| Ok((p.id, peer_review_score(m, p)?)))
                .collect::<Result<Vec<_>>>()?;
            select_batch(&scores, config.lambda)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = learners.len();
    Ok((0..n)
        .map(|i| {
            let reviewer = match config.review {
                ReviewMode::Peer => (i + 1) % n,
                _ => i,
            };
            picks[reviewer].clone()
        })
        .collect())
}

fn find_in<'a>(batch: &[&'a PreferencePair], id: u64) -> &'a PreferencePair {
    batch
        .iter()
        .find(|p| p.id == id)
        .copied()
        .expect("selected id comes from the batch")
}

/// The shared training loop for one or two models.
pub fn train_loop(
    dataset: &Dataset,
    learners: &mut [Learner],
    config: &TrainConfig,
    observer: &mut EpochObserver<'_>,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    let train = dataset.split_vec(Split::Train);
    if train.is_empty() {
        return Err(Error::invalid("train split is empty"));
    }
    let id_test = dataset.split_vec(Split::IdTest);

    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = epoch_order(&train, learners, config, epoch)?;
        let mut loss_sum = vec![0.0; learners.len()];
        let mut loss_count = vec![0usize; learners.len()];
        let mut selections = Vec::new();

        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&PreferencePair> = chunk.iter().map(|&i| &train[i]).collect();
            let received = review_batch(&batch, learners, config)?;

            let mut updates = Vec::with_capacity(learners.len());
            for (learner, ids) in learners.iter().zip(&received) {
                let subset: Vec<&PreferencePair> = ids.iter().map(|&id| find_in(&batch, id)).collect();
                let (mean_loss, grad) = learner.batch_gradient(&subset).map_err(|e| match e {
                    Error::Numeric(msg) => Error::numeric(format!("epoch {} batch {b}: {msg}", epoch + 1)),
                    other => other,
                })?;
                if !mean_loss.is_finite() || mean_loss.abs() > DIVERGENCE_LIMIT {
                    return Err(Error::numeric(format!(
                        "epoch {} batch {b}: mean loss {mean_loss} diverged",
                        epoch + 1
                    )));
                }
                updates.push((mean_loss, grad, ids.len()));
            }
            for (i, (learner, (mean_loss, grad, count))) in learners.iter_mut().zip(updates).enumerate() {
                learner.apply(&grad).map_err(|e| match e {
                    Error::Numeric(msg) => Error::numeric(format!("epoch {} batch {b}: {msg}", epoch + 1)),
                    other => other,
                })?;
                loss_sum[i] += mean_loss * count as f64;
                loss_count[i] += count;
            }
            selections.push(BatchSelection {
                batch: b,
                received: received
                    .into_iter()
                    .map(|mut ids| {
                        ids.sort_unstable();
                        ids
                    })
                    .collect(),
            });
        }

        let id_accuracy = learners
            .iter()
            .map(|l| {
                if id_test.is_empty() {
                    Ok(None)
                } else {
                    preference_accuracy(l, &id_test).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        observer(epoch, learners)?;
        history.push(EpochRecord {
            epoch: epoch + 1,
            mean_selected_loss: loss_sum
                .iter()
                .zip(&loss_count)
                .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
                .collect(),
            id_accuracy,
            order: order.iter().map(|&i| train[i].id).collect(),
            selections,
        });
    }
    Ok(history)
}

/// Co-train `r_φ` and `r_ψ` with the configured review mode and curriculum.
pub fn co_train(
    dataset: &Dataset,
    spec_phi: &ModelSpec,
    spec_psi: &ModelSpec,
    config: &TrainConfig,
) -> Result<CoTrainResult> {
    co_train_observed(dataset, spec_phi, spec_psi, config, &mut |_, _| Ok(()))
}

pub fn co_train_observed(
    dataset: &Dataset,
    spec_phi: &ModelSpec,
    spec_psi: &ModelSpec,
    config: &TrainConfig,
    observer: &mut EpochObserver<'_>,
) -> Result<CoTrainResult> {
    config.validate()?;
    check_dims(dataset, spec_phi)?;
    check_dims(dataset, spec_psi)?;
    let mut learners = vec![Learner::new(spec_phi, config)?, Learner::new(spec_psi, config)?];
    let history = train_loop(dataset, &mut learners, config, observer)?;
    Ok(CoTrainResult {
        config: config.clone(),
        phi: learners[0].checkpoint(),
        psi: learners[1].checkpoint(),
        history,
    })
}

/// Single-model baseline: shuffled epochs, every pair of every batch used.
pub fn standard_train(dataset: &Dataset, spec: &ModelSpec, config: &TrainConfig) -> Result<StandardResult> {
    standard_train_observed(dataset, spec, config, &mut |_, _| Ok(()))
}

pub fn standard_train_observed(
    dataset: &Dataset,
    spec: &ModelSpec,
    config: &TrainConfig,
    observer: &mut EpochObserver<'_>,
) -> Result<StandardResult> {
    if config.review != ReviewMode::None {
        return Err(Error::invalid("standard training requires review mode none"));
    }
    if config.curriculum != Curriculum::Off {
        return Err(Error::invalid("standard training uses shuffled epochs (curriculum off)"));
    }
    config.validate()?;
    check_dims(dataset, spec)?;
    let mut learners = vec![Learner::new(spec, config)?];
    let history = train_loop(dataset, &mut learners, config, observer)?;
    Ok(StandardResult {
        config: config.clone(),
        model: learners[0].checkpoint(),
        history,
    })
}

fn check_dims(dataset: &Dataset, spec: &ModelSpec) -> Result<()> {
    if dataset.dim() != spec.input_dim {
        return Err(Error::invalid(format!(
            "model input dimension {} does not match data dimension {}",
            spec.input_dim,
            dataset.dim()
        )));
    }
    Ok(())
}

/// Rebuild the evaluation model of a trained checkpoint. For the implicit
/// objective the reference is the checkpoint's own initialization.
pub fn trained_model(checkpoint: &Checkpoint, objective: &ObjectiveSpec) -> Result<TrainedModel> {
    let params = checkpoint.to_params()?;
    let reference = match objective {
        ObjectiveSpec::DpoImplicit { .. } => Some(init(&checkpoint.spec)?),
        _ => None,
    };
    Ok(TrainedModel {
        params,
        reference,
        objective: *objective,
    })
}

/// Frozen model for evaluation; rewards are implicit under the DPO objective.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: RewardParams,
    pub reference: Option<RewardParams>,
    pub objective: ObjectiveSpec,
}

impl RewardModel for TrainedModel {
    fn reward(&self, features: &[f64]) -> Result<f64> {
        match (&self.objective, &self.reference) {
            (ObjectiveSpec::DpoImplicit { beta }, Some(reference)) => ImplicitReward {
                policy: &self.params,
                reference,
                beta: *beta,
            }
            .reward(features),
            _ => self.params.score(features),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prefdata::{generate_synthetic, inject_noise, GoldSpec, SplitCounts};
    use crate::rewardnet::ModelKind;

    fn pair(id: u64, chosen: Vec<f64>, rejected: Vec<f64>) -> PreferencePair {
        PreferencePair {
            id,
            chosen_features: chosen,
            rejected_features: rejected,
            flipped: false,
            split: Split::Train,
        }
    }

    fn dataset(train: usize, eta: f64, seed: u64) -> Dataset {
        let gold = GoldSpec::random_unit(4, seed, 0.0).unwrap();
        let counts = SplitCounts {
            train,
            id_test: 50,
            ood_test: 50,
        };
        let ds = generate_synthetic(4, counts, &gold, Some(&[1.0; 4]), seed).unwrap();
        inject_noise(&ds, eta, seed).unwrap()
    }

    fn linear(seed: u64) -> ModelSpec {
        ModelSpec {
            kind: ModelKind::Linear,
            input_dim: 4,
            init_scale: 0.1,
            init_seed: seed,
        }
    }

    #[test]
    fn review_score_values() {
        let zero = RewardParams::zeros(ModelKind::Linear, 1);
        assert_eq!(peer_review_score(&zero, &pair(0, vec![1.0], vec![2.0])).unwrap(), 0.5);
        let w = RewardParams::linear(vec![1.0], 0.0);
        let s = peer_review_score(&w, &pair(0, vec![2.0], vec![0.0])).unwrap();
        assert!((s - 0.880_797_077_977_882_4).abs() < 1e-15);
        let big = peer_review_score(&w, &pair(0, vec![30.0], vec![0.0])).unwrap();
        assert!(big < 1.0 && big > 0.999_999_999_999);
    }

    #[test]
    fn select_examples() {
        let scores = [(0, 0.9), (1, 0.2), (2, 0.7), (3, 0.5)];
        assert_eq!(select_batch(&scores, 1.0).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(select_batch(&scores, 0.5).unwrap(), vec![0, 2]);
        let ties = [(0, 0.5), (1, 0.5), (2, 0.5), (3, 0.5)];
        assert_eq!(select_batch(&ties, 0.5).unwrap(), vec![0, 1]);
        // tie rule uses pair ids, not positions
        let ties = [(9, 0.5), (4, 0.5), (7, 0.5)];
        assert_eq!(select_batch(&ties, 0.34).unwrap(), vec![4]);
        assert!(select_batch(&[], 0.5).is_err());
        assert!(select_batch(&scores, 0.0).is_err());
        assert!(select_batch(&scores, 1.5).is_err());
        // k never drops below one
        assert_eq!(select_batch(&scores, 0.1).unwrap(), vec![0]);
    }

    #[test]
    fn selection_size_floors() {
        assert_eq!(selection_size(0.6, 64), 38);
        assert_eq!(selection_size(0.6, 5), 3);
        assert_eq!(selection_size(0.7, 10), 7);
        assert_eq!(selection_size(0.1, 3), 1);
        assert_eq!(selection_size(1.0, 17), 17);
    }

    struct Fixed(Vec<f64>);

    impl RewardModel for Fixed {
        fn reward(&self, _: &[f64]) -> Result<f64> {
            unreachable!()
        }
        fn margin(&self, pair: &PreferencePair) -> Result<f64> {
            Ok(self.0[pair.id as usize])
        }
    }

    #[test]
    fn curriculum_batches_keep_composition() {
        let pairs: Vec<PreferencePair> = [0.1, 3.0, -2.0, 0.5, 2.0]
            .iter()
            .enumerate()
            .map(|(i, &x)| pair(i as u64, vec![x], vec![0.0]))
            .collect();
        let m = RewardParams::linear(vec![1.0], 0.0);
        // batch means: [4, 2] 0.5, [0, 1] 0.739, [3] 0.622
        let order = curriculum_batches(&pairs, &[4, 2, 0, 1, 3], 2, &m, &m, CombineRule::Mean).unwrap();
        assert_eq!(order, vec![0, 1, 3, 4, 2]);
        assert!(curriculum_batches(&pairs, &[0, 1], 0, &m, &m, CombineRule::Mean).is_err());
    }

    #[test]
    fn curriculum_examples() {
        let pairs: Vec<PreferencePair> = (0..3).map(|i| pair(i, vec![0.0], vec![0.0])).collect();
        // σ⁻¹ of 0.1, 0.8, 0.5
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let m = Fixed(vec![logit(0.1), logit(0.8), logit(0.5)]);
        let order = curriculum_sort(&pairs, &m, &m, CombineRule::Mean).unwrap();
        assert_eq!(order, vec![1, 2, 0]);

        let same: Vec<PreferencePair> = (0..6).map(|i| pair(i, vec![1.0, 2.0], vec![1.0, 2.0])).collect();
        let p = init(&ModelSpec {
            kind: ModelKind::Mlp { hidden: 3 },
            input_dim: 2,
            init_scale: 1.0,
            init_seed: 1,
        })
        .unwrap();
        let order = curriculum_sort(&same, &p, &p, CombineRule::Mean).unwrap();
        assert_eq!(order, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn combine_rules() {
        let pairs: Vec<PreferencePair> = (0..2).map(|i| pair(i, vec![0.0], vec![0.0])).collect();
        let phi = Fixed(vec![3.0, 1.0]);
        let psi = Fixed(vec![-1.0, 1.0]);
        assert_eq!(curriculum_sort(&pairs, &phi, &psi, CombineRule::ModelPhi).unwrap(), vec![0, 1]);
        assert_eq!(curriculum_sort(&pairs, &phi, &psi, CombineRule::Min).unwrap(), vec![1, 0]);
        assert_eq!(curriculum_sort(&pairs, &phi, &psi, CombineRule::Mean).unwrap(), vec![1, 0]);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        assert!(TrainConfig { epochs: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { lambda: 0.5, ..ok.clone() }.validate().is_err());
        let peer = TrainConfig {
            review: ReviewMode::Peer,
            lambda: 0.5,
            ..ok.clone()
        };
        peer.validate().unwrap();
        assert!(TrainConfig {
            batch_size: 1,
            ..peer.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig { lambda: 0.0, ..peer }.validate().is_err());
    }

    #[test]
    fn one_pair_sgd_step_matches_hand_gradient() {
        let p = pair(0, vec![1.0, -0.5, 2.0, 0.0], vec![0.0, 0.5, -1.0, 1.0]);
        let ds = Dataset::from_pairs(vec![p.clone()]).unwrap();
        let spec = linear(5);
        let lr = 0.05;
        let config = TrainConfig {
            epochs: 1,
            batch_size: 1,
            learning_rate: lr,
            optimizer: OptimizerKind::Sgd,
            ..TrainConfig::default()
        };
        let w0 = init(&spec).unwrap();
        let m0 = w0.margin(&p).unwrap();
        let out = standard_train(&ds, &spec, &config).unwrap();
        let w1 = out.model.to_params().unwrap();
        for k in 0..4 {
            let diff = p.chosen_features[k] - p.rejected_features[k];
            let expected = w0.values()[k] + lr * sigmoid(-m0) * diff;
            assert!((w1.values()[k] - expected).abs() < 1e-15);
        }
        // bias gradient cancels
        assert_eq!(w1.bias(), 0.0);
    }

    #[test]
    fn full_batch_peer_review_with_twin_models_keeps_them_identical() {
        let ds = dataset(120, 0.3, 2);
        let config = TrainConfig {
            epochs: 3,
            batch_size: 16,
            review: ReviewMode::Peer,
            lambda: 1.0,
            ..TrainConfig::default()
        };
        let out = co_train(&ds, &linear(7), &linear(7), &config).unwrap();
        assert_eq!(out.phi, out.psi);
        for rec in &out.history {
            assert_eq!(rec.mean_selected_loss[0], rec.mean_selected_loss[1]);
        }
    }

    #[test]
    fn selected_sets_have_expected_size() {
        let ds = dataset(150, 0.4, 3);
        let config = TrainConfig {
            epochs: 2,
            batch_size: 32,
            review: ReviewMode::Peer,
            lambda: 0.6,
            curriculum: Curriculum::On,
            ..TrainConfig::default()
        };
        let out = co_train(&ds, &linear(1), &linear(2), &config).unwrap();
        for rec in &out.history {
            let sizes: Vec<usize> = rec.selections.iter().map(|s| s.received[0].len()).collect();
            assert_eq!(sizes, vec![19, 19, 19, 19, 13]);
            let mut ids = rec.order.clone();
            ids.sort_unstable();
            assert_eq!(ids, (0..150).collect::<Vec<_>>());
        }
    }

    #[test]
    fn zero_learning_rate_freezes_params() {
        let ds = dataset(60, 0.2, 4);
        let config = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            ..TrainConfig::default()
        };
        let out = standard_train(&ds, &linear(3), &config).unwrap();
        assert_eq!(out.model.to_params().unwrap(), init(&linear(3)).unwrap());
        assert!(standard_train(&ds, &linear(3), &TrainConfig { epochs: 0, ..config.clone() }).is_err());
        let peer = TrainConfig {
            review: ReviewMode::Peer,
            lambda: 0.5,
            ..config
        };
        assert!(standard_train(&ds, &linear(3), &peer).is_err());
    }

    #[test]
    fn divergence_is_reported_with_location() {
        // two opposite orientations of one huge-feature pair: mean loss ≈ |m|/2
        let big = vec![1e7, 1e7, 1e7, 1e7];
        let zero = vec![0.0; 4];
        let ds = Dataset::from_pairs(vec![pair(0, big.clone(), zero.clone()), pair(1, zero, big)]).unwrap();
        let config = TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::default()
        };
        match standard_train(&ds, &linear(1), &config) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("epoch 1 batch 0"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
