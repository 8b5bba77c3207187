use crmlab::crm::{co_train, standard_train, Curriculum, ReviewMode, TrainConfig};
use crmlab::objectives::ObjectiveSpec;
use crmlab::prefdata::{generate_synthetic, inject_noise, Dataset, GoldSpec, Split, SplitCounts};
use crmlab::rewardnet::{ModelKind, ModelSpec, OptimizerKind};

fn noisy(seed: u64) -> Dataset {
    let gold = GoldSpec::random_unit(4, seed, 0.0).unwrap();
    let counts = SplitCounts {
        train: 48,
        id_test: 20,
        ood_test: 20,
    };
    let clean = generate_synthetic(4, counts, &gold, Some(&[1.0; 4]), seed).unwrap();
    inject_noise(&clean, 0.3, seed).unwrap()
}

fn spec(kind: ModelKind, init_seed: u64) -> ModelSpec {
    ModelSpec {
        kind,
        input_dim: 4,
        init_scale: 0.3,
        init_seed,
    }
}

fn one_batch_peer() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 48,
        learning_rate: 0.05,
        optimizer: OptimizerKind::Sgd,
        lambda: 0.5,
        review: ReviewMode::Peer,
        curriculum: Curriculum::Off,
        ..TrainConfig::default()
    }
}

/// Shift both responses of `id` by the same vector: a linear reviewer's
/// margin, hence its selection, is unchanged, while an mlp's loss changes.
fn shift_pair(ds: &Dataset, id: u64) -> Dataset {
    let mut out = ds.clone();
    let p = out.pairs.iter_mut().find(|p| p.id == id).unwrap();
    for (c, r) in p.chosen_features.iter_mut().zip(p.rejected_features.iter_mut()) {
        *c += 0.75;
        *r += 0.75;
    }
    out
}

#[test]
fn peer_update_ignores_pairs_the_peer_dropped() {
    let ds = noisy(4);
    // φ is an mlp, ψ (the reviewer of φ) is linear
    let phi = spec(ModelKind::Mlp { hidden: 5 }, 1);
    let psi = spec(ModelKind::Linear, 2);
    let config = one_batch_peer();
    let base = co_train(&ds, &phi, &psi, &config).unwrap();
    let received = &base.history[0].selections[0].received[0];
    let dropped = ds
        .split(Split::Train)
        .map(|p| p.id)
        .find(|id| !received.contains(id))
        .unwrap();
    let kept = received[0];

    let perturbed = co_train(&shift_pair(&ds, dropped), &phi, &psi, &config).unwrap();
    assert_eq!(&perturbed.history[0].selections[0].received[0], received);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&perturbed.phi.params), bits(&base.phi.params));

    // control: the same perturbation on a received pair does move φ
    let control = co_train(&shift_pair(&ds, kept), &phi, &psi, &config).unwrap();
    assert_ne!(bits(&control.phi.params), bits(&base.phi.params));
}

#[test]
fn training_is_deterministic() {
    let ds = noisy(9);
    for curriculum in [Curriculum::Off, Curriculum::On, Curriculum::Batches] {
        let config = TrainConfig {
            epochs: 3,
            batch_size: 10,
            lambda: 0.7,
            review: ReviewMode::Peer,
            curriculum,
            objective: ObjectiveSpec::Cdpo { epsilon: 0.2 },
            seed: 5,
            ..TrainConfig::default()
        };
        let run = || {
            serde_json::to_string(&co_train(&ds, &spec(ModelKind::Mlp { hidden: 3 }, 1), &spec(ModelKind::Linear, 2), &config).unwrap())
                .unwrap()
        };
        assert_eq!(run(), run());
    }
    let config = TrainConfig {
        epochs: 2,
        batch_size: 7,
        seed: 1,
        ..TrainConfig::default()
    };
    let a = standard_train(&ds, &spec(ModelKind::Linear, 3), &config).unwrap();
    let b = standard_train(&ds, &spec(ModelKind::Linear, 3), &config).unwrap();
    assert_eq!(a, b);
}

#[test]
fn every_curriculum_visits_each_pair_once_per_epoch() {
    let ds = noisy(2);
    for curriculum in [Curriculum::Off, Curriculum::On, Curriculum::Batches] {
        let config = TrainConfig {
            epochs: 2,
            batch_size: 10,
            lambda: 0.6,
            review: ReviewMode::SelfReview,
            curriculum,
            ..TrainConfig::default()
        };
        let r = co_train(&ds, &spec(ModelKind::Linear, 1), &spec(ModelKind::Linear, 2), &config).unwrap();
        for record in &r.history {
            let mut order = record.order.clone();
            order.sort_unstable();
            let ids: Vec<u64> = ds.split_vec(Split::Train).iter().map(|p| p.id).collect();
            assert_eq!(order, ids);
            let sizes: Vec<usize> = record.selections.iter().map(|s| s.received[0].len()).collect();
            assert_eq!(sizes, vec![6, 6, 6, 6, 4]);
        }
    }
}

#[test]
fn implicit_objective_trains_against_a_frozen_reference() {
    let ds = noisy(6);
    let config = TrainConfig {
        epochs: 2,
        batch_size: 16,
        learning_rate: 0.05,
        lambda: 0.75,
        review: ReviewMode::Peer,
        objective: ObjectiveSpec::DpoImplicit { beta: 0.1 },
        ..TrainConfig::default()
    };
    let r = co_train(&ds, &spec(ModelKind::Linear, 1), &spec(ModelKind::Linear, 2), &config).unwrap();
    assert!(r.history.iter().all(|h| h.mean_selected_loss.iter().all(|l| l.is_finite())));
    let init = crmlab::rewardnet::init(&spec(ModelKind::Linear, 1)).unwrap();
    assert_ne!(r.phi.params, init.values());
}
