//! Training-dynamics probe: per-instance loss trajectories of a standard
//! reward model and the robust / non-robust / ambiguous categorization.
//!
//! Losses are measured at the end of every epoch on the whole train split
//! with frozen parameters, so every instance is scored by the same model.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::crm::{standard_train_observed, TrainConfig};
use crate::error::{Error, Result};
use crate::objectives::bt_loss;
use crate::prefdata::{Dataset, Split};
use crate::rewardnet::{ModelSpec, RewardModel};

pub const SCATTER_CSV_HEADER: &str = "id,mu,sigma,acc,category,flipped";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceDynamics {
    pub id: u64,
    /// BT loss at the end of each epoch.
    pub losses: Vec<f64>,
    pub positive_margin: Vec<bool>,
    pub mu: f64,
    /// Population standard deviation of `losses`.
    pub sigma: f64,
    pub acc: f64,
}

/// Welford accumulator for one instance.
#[derive(Debug, Clone, Default)]
struct Running {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Running {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn population_std(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.m2 / self.n as f64).max(0.0).sqrt()
        }
    }
}

impl InstanceDynamics {
    /// Statistics of a recorded trajectory.
    pub fn from_trajectory(id: u64, losses: Vec<f64>, positive_margin: Vec<bool>) -> Self {
        let mut run = Running::default();
        for &l in &losses {
            run.push(l);
        }
        let hits = positive_margin.iter().filter(|p| **p).count();
        let acc = if positive_margin.is_empty() {
            0.0
        } else {
            hits as f64 / positive_margin.len() as f64
        };
        InstanceDynamics {
            id,
            mu: run.mean,
            sigma: run.population_std(),
            acc,
            losses,
            positive_margin,
        }
    }
}

/// Train a standard model for `config.epochs` and record every train pair's
/// BT loss and margin sign at each epoch end.
pub fn probe(dataset: &Dataset, spec: &ModelSpec, config: &TrainConfig) -> Result<BTreeMap<u64, InstanceDynamics>> {
    if config.epochs < 2 {
        return Err(Error::invalid("probing needs at least 2 epochs"));
    }
    let train = dataset.split_vec(Split::Train);
    let mut losses: Vec<Vec<f64>> = vec![Vec::with_capacity(config.epochs); train.len()];
    let mut signs: Vec<Vec<bool>> = vec![Vec::with_capacity(config.epochs); train.len()];
    standard_train_observed(dataset, spec, config, &mut |_, models| {
        let model = &models[0];
        for (i, pair) in train.iter().enumerate() {
            let m = model.margin(pair)?;
            losses[i].push(bt_loss(m)?);
            signs[i].push(m > 0.0);
        }
        Ok(())
    })?;
    Ok(train
        .iter()
        .zip(losses.into_iter().zip(signs))
        .map(|(p, (l, s))| (p.id, InstanceDynamics::from_trajectory(p.id, l, s)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    Robust,
    NonRobust,
    Ambiguous,
    Unassigned,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Robust,
        Category::NonRobust,
        Category::Ambiguous,
        Category::Unassigned,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Robust => "Robust",
            Category::NonRobust => "NonRobust",
            Category::Ambiguous => "Ambiguous",
            Category::Unassigned => "Unassigned",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown category {s:?}")))
    }
}

/// Quantile levels for the category regions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub q_sigma: f64,
    pub q_mu: f64,
    pub q_robust: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            q_sigma: 0.75,
            q_mu: 0.75,
            q_robust: 0.5,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, q) in [("q_sigma", self.q_sigma), ("q_mu", self.q_mu), ("q_robust", self.q_robust)] {
            if !(q > 0.0 && q < 1.0) {
                return Err(Error::invalid(format!("{name} = {q} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Linear-interpolation quantile of unsorted values.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Categorization {
    pub labels: BTreeMap<u64, Category>,
    pub sigma_cut: f64,
    pub mu_cut: f64,
    pub mu_median: f64,
    pub sigma_median: f64,
    /// All μ equal and all σ equal: no quantile separates any pair.
    pub degenerate: bool,
}

impl Categorization {
    pub fn count(&self, category: Category) -> usize {
        self.labels.values().filter(|c| **c == category).count()
    }
}

/// Ambiguous: σ above its `q_sigma` quantile. NonRobust (of the rest): μ
/// above its `q_mu` quantile and acc < 0.5. Robust: μ and σ below their
/// `q_robust` quantiles, where a value tied with the minimum also counts as
/// below. Everything else is Unassigned.
pub fn categorize(stats: &BTreeMap<u64, InstanceDynamics>, thresholds: &Thresholds) -> Result<Categorization> {
    thresholds.validate()?;
    let mus: Vec<f64> = stats.values().map(|s| s.mu).collect();
    let sigmas: Vec<f64> = stats.values().map(|s| s.sigma).collect();
    let sigma_cut = quantile(&sigmas, thresholds.q_sigma);
    let mu_cut = quantile(&mus, thresholds.q_mu);
    let mu_median = quantile(&mus, thresholds.q_robust);
    let sigma_median = quantile(&sigmas, thresholds.q_robust);
    let mu_min = mus.iter().copied().fold(f64::INFINITY, f64::min);
    let sigma_min = sigmas.iter().copied().fold(f64::INFINITY, f64::min);
    let degenerate = !stats.is_empty() && mus.iter().all(|m| *m == mus[0]) && sigmas.iter().all(|s| *s == sigmas[0]);

    let labels = stats
        .iter()
        .map(|(&id, s)| {
            let label = if s.sigma > sigma_cut {
                Category::Ambiguous
            } else if s.mu > mu_cut && s.acc < 0.5 {
                Category::NonRobust
            } else if (s.mu < mu_median || s.mu <= mu_min) && (s.sigma < sigma_median || s.sigma <= sigma_min) {
                Category::Robust
            } else {
                Category::Unassigned
            };
            (id, label)
        })
        .collect();
    Ok(Categorization {
        labels,
        sigma_cut,
        mu_cut,
        mu_median,
        sigma_median,
        degenerate,
    })
}

/// One row per instance: `id,mu,sigma,acc,category,flipped`.
pub fn export_scatter(
    stats: &BTreeMap<u64, InstanceDynamics>,
    categories: &Categorization,
    dataset: &Dataset,
    path: &Path,
) -> Result<()> {
    let flipped: BTreeMap<u64, bool> = dataset.pairs.iter().map(|p| (p.id, p.flipped)).collect();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{SCATTER_CSV_HEADER}").map_err(io)?;
    for (id, s) in stats {
        let category = categories
            .labels
            .get(id)
            .ok_or_else(|| Error::invalid(format!("pair {id} has no category")))?;
        let f = flipped
            .get(id)
            .ok_or_else(|| Error::invalid(format!("pair {id} is not in the dataset")))?;
        writeln!(w, "{},{},{},{},{},{}", id, s.mu, s.sigma, s.acc, category, f).map_err(io)?;
    }
    w.flush().map_err(io)
}
