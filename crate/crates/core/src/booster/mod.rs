//! Boosting driver: configuration, the learned model, prediction and model
//! files. Training itself lives in [`train`](self::train()).

mod model_file;
mod train;

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use crate::collective::{TransportKind, DEFAULT_TIMEOUT_SECS};
use crate::dataset::{PartitionStrategy, SparseDataset};
use crate::error::{GbunError, Result};
use crate::forward::{assignments, Forwarder, NormStats, UntrainedNet};
use crate::hashwgen::{build_generator, WeightGenerator, WeightMode};
use crate::matrix::Matrix;
use crate::objective::{objective_by_name, Objective};

pub use model_file::{load_model, read_model, save_model, write_model, MODEL_FORMAT, MODEL_VERSION};
pub use train::{
    run_worker, train, train_single, Monitor, RoundEvent, RoundReport, TrainOutcome, WorkerResult,
};

/// Above this many features the automatic mode picks hashed weights.
pub const AUTO_HASHED_MIN_FEATURES: usize = 10_000;
/// Below this density the automatic mode picks hashed weights.
pub const AUTO_HASHED_MAX_DENSITY: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModeChoice {
    #[default]
    Auto,
    Dense,
    Hashed,
}

impl ModeChoice {
    pub fn resolve(self, ds: &SparseDataset, seed: u64, sparsify_fraction: f64) -> WeightMode {
        let hashed = match self {
            ModeChoice::Dense => false,
            ModeChoice::Hashed => true,
            ModeChoice::Auto => {
                ds.num_features() > AUTO_HASHED_MIN_FEATURES
                    || ds.density() < AUTO_HASHED_MAX_DENSITY
            }
        };
        if hashed {
            WeightMode::hashed()
        } else {
            WeightMode::dense(seed, sparsify_fraction)
        }
    }
}

impl FromStr for ModeChoice {
    type Err = GbunError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "dense" => Ok(Self::Dense),
            "hashed" => Ok(Self::Hashed),
            other => Err(GbunError::config(format!(
                "unknown weight mode `{other}` (auto, dense, hashed)"
            ))),
        }
    }
}

impl fmt::Display for ModeChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Auto => "auto",
            Self::Dense => "dense",
            Self::Hashed => "hashed",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: String,
    /// Output neurons per round.
    pub k: usize,
    pub rounds: u32,
    pub eta: f64,
    pub lambda: f64,
    /// Class count for `multi:softmax`; inferred from the labels when unset.
    pub num_classes: Option<usize>,
    pub mode: ModeChoice,
    /// Base seed of dense weights; round `t` uses `seed + t`.
    pub seed: u64,
    pub sparsify_fraction: f64,
    pub partitions: usize,
    pub transport: TransportKind,
    pub partition_strategy: PartitionStrategy,
    /// Forward batches per pass.
    pub batches: usize,
    /// Validation metric every this many rounds (and after the last); 0 never.
    pub eval_every: u32,
    /// Validation metric; the objective's default when unset.
    pub metric: Option<String>,
    pub timeout: Duration,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: "binary:logistic".to_string(),
            k: 64,
            rounds: 300,
            eta: 0.1,
            lambda: 1.0,
            num_classes: None,
            mode: ModeChoice::Auto,
            seed: 0,
            sparsify_fraction: 0.9,
            partitions: 1,
            transport: TransportKind::InProcess,
            partition_strategy: PartitionStrategy::Contiguous,
            batches: 1,
            eval_every: 1,
            metric: None,
            timeout: Duration::from_secs(DEFAULT_TIMEOUT_SECS),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(GbunError::config(format!("k must be at least 2, got {}", self.k)));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(GbunError::config(format!("eta must lie in (0, 1], got {}", self.eta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(GbunError::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.partitions == 0 {
            return Err(GbunError::config("partitions must be at least 1"));
        }
        if self.batches == 0 {
            return Err(GbunError::config("batches must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.sparsify_fraction) {
            return Err(GbunError::config(format!(
                "sparsify fraction must lie in [0, 1), got {}",
                self.sparsify_fraction
            )));
        }
        objective_by_name(&self.objective)?;
        Ok(())
    }

    /// The untrained model these settings produce on `train`: objective,
    /// output width, feature count and resolved weight mode, no rounds yet.
    pub fn initial_model(&self, train: &SparseDataset) -> Result<BoosterModel> {
        self.validate()?;
        if train.num_samples() < 2 {
            return Err(GbunError::data("training needs at least 2 samples"));
        }
        let objective = objective_by_name(&self.objective)?;
        let classes = match self.num_classes {
            Some(c) => c,
            None if objective.name() == "multi:softmax" => {
                let max = train.labels().iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if !(max >= 0.0) || max.fract() != 0.0 {
                    return Err(GbunError::data(format!("invalid class label {max}")));
                }
                max as usize + 1
            }
            None => 1,
        };
        let num_outputs = objective.num_outputs(classes);
        objective.check_labels(train.labels(), num_outputs)?;
        Ok(BoosterModel {
            objective: objective.name().to_string(),
            k: self.k,
            eta: self.eta,
            lambda: self.lambda,
            num_classes: num_outputs,
            num_features: train.num_features(),
            mode: self.mode.resolve(train, self.seed, self.sparsify_fraction),
            rounds: Vec::new(),
        })
    }

    pub fn metric_name(&self) -> Result<String> {
        match &self.metric {
            Some(m) => Ok(m.clone()),
            None => Ok(objective_by_name(&self.objective)?.default_metric().to_string()),
        }
    }
}

/// One round's learned state.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundModel {
    /// 0-based; also the round's seed offset.
    pub round_index: u32,
    pub norm_stats: NormStats,
    /// `C x K` output scores.
    pub weights: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoosterModel {
    pub objective: String,
    pub k: usize,
    pub eta: f64,
    pub lambda: f64,
    /// Score columns `C`: 1 for binary and regression.
    pub num_classes: usize,
    pub num_features: usize,
    pub mode: WeightMode,
    pub rounds: Vec<RoundModel>,
}

impl BoosterModel {
    pub fn num_rounds(&self) -> usize {
        self.rounds.len()
    }

    pub fn objective_impl(&self) -> Result<Box<dyn Objective>> {
        objective_by_name(&self.objective)
    }

    pub fn generator(&self) -> Result<Box<dyn WeightGenerator>> {
        build_generator(&self.mode, self.num_features)
    }
}

/// `scores[i][c] += eta * <P_i, W_c>`.
pub(crate) fn add_round_scores(scores: &mut Matrix, p: &Matrix, weights: &Matrix, eta: f64) {
    debug_assert_eq!(scores.rows(), p.rows());
    for i in 0..p.rows() {
        let pi = p.row(i);
        let si = scores.row_mut(i);
        for (c, s) in si.iter_mut().enumerate() {
            let dot: f64 = pi.iter().zip(weights.row(c)).map(|(a, b)| a * b).sum();
            *s += eta * dot;
        }
    }
}

/// Scores of one dataset, built up round by round.
pub struct Scorer<'d> {
    forwarder: Forwarder<'d>,
    scores: Matrix,
}

impl<'d> Scorer<'d> {
    pub fn new(ds: &'d SparseDataset, num_classes: usize, batches: usize) -> Self {
        Self {
            forwarder: Forwarder::new(ds, batches),
            scores: Matrix::zeros(ds.num_samples(), num_classes),
        }
    }

    pub fn add_round(
        &mut self,
        generator: &dyn WeightGenerator,
        k: usize,
        eta: f64,
        round: &RoundModel,
    ) -> Result<()> {
        let z = self.forwarder.forward(UntrainedNet {
            round: round.round_index,
            k,
            generator,
        })?;
        let p = assignments(z, &round.norm_stats)?;
        add_round_scores(&mut self.scores, &p, &round.weights, eta);
        Ok(())
    }

    pub fn dataset(&self) -> &SparseDataset {
        self.forwarder.dataset()
    }

    pub fn scores(&self) -> &Matrix {
        &self.scores
    }

    pub fn into_scores(self) -> Matrix {
        self.scores
    }
}

/// Raw scores, `n x C`, using each round's stored training statistics.
pub fn predict(model: &BoosterModel, ds: &SparseDataset) -> Result<Matrix> {
    predict_batched(model, ds, 1)
}

pub fn predict_batched(model: &BoosterModel, ds: &SparseDataset, batches: usize) -> Result<Matrix> {
    let generator = model.generator()?;
    let mut scorer = Scorer::new(ds, model.num_classes, batches);
    for round in &model.rounds {
        scorer.add_round(generator.as_ref(), model.k, model.eta, round)?;
    }
    Ok(scorer.into_scores())
}

/// Scores mapped through the objective: sigmoid for binary, softmax across
/// classes for multi-class, identity for regression.
pub fn to_probabilities(model: &BoosterModel, scores: &Matrix) -> Result<Matrix> {
    let objective = model.objective_impl()?;
    let mut out = scores.clone();
    for i in 0..out.rows() {
        objective.transform(out.row_mut(i));
    }
    Ok(out)
}

pub fn predict_probabilities(model: &BoosterModel, ds: &SparseDataset) -> Result<Matrix> {
    to_probabilities(model, &predict(model, ds)?)
}
