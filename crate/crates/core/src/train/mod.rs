//! Mini-batch training with validation-based early stopping.

mod dropout;
mod early_stop;
mod grad;
mod optim;
mod report;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{DataError, FeatureSpace, SparseInstance};
use crate::eval::{EvalError, MetricReport};
use crate::graph::{self, FeatureGraph, GraphError, NormalizedAdjacency};
use crate::model::{self, Activation, ModelError, ModelParams};
use crate::seed;

pub use dropout::{apply_dropout, DropoutMask};
pub use early_stop::{EarlyStopping, Observation};
pub use grad::{
    backward, forward_backward, loss, objective, BatchStep, DecayScope, DropoutDraw, GradientSet,
    Regularization, SparseRows,
};
pub use optim::{optimizer_step, Accumulator, OptimizerKind, OptimizerState};
pub use report::{EpochRecord, ReportError, RunReport};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StopMetric {
    #[default]
    Rmse,
    Mae,
}

impl fmt::Display for StopMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopMetric::Rmse => "rmse",
            StopMetric::Mae => "mae",
        })
    }
}

impl FromStr for StopMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rmse" => Ok(StopMetric::Rmse),
            "mae" => Ok(StopMetric::Mae),
            other => Err(format!("unknown stopping metric `{other}`")),
        }
    }
}

/// Model shape and every training knob.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    /// Graph-convolution layers; 0 trains a plain FM.
    pub layers: usize,
    pub activation: Activation,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub regularize_bias: bool,
    pub decay_scope: DecayScope,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub sampling_ratio: f64,
    pub stop_metric: StopMetric,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 256,
            layers: 0,
            activation: Activation::Identity,
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.001,
            l2_lambda: 1e-5,
            regularize_bias: true,
            decay_scope: DecayScope::Touched,
            dropout: 0.0,
            batch_size: 4096,
            max_epochs: 100,
            patience: 5,
            sampling_ratio: 1.0,
            stop_metric: StopMetric::Rmse,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: &str| Err(TrainError::Config(msg.to_string()));
        if self.dim == 0 {
            return fail("dim must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return fail("l2_lambda must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.sampling_ratio) {
            return fail("sampling_ratio must be in [0, 1]");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.patience == 0 {
            return fail("patience must be at least 1");
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be at least 1");
        }
        Ok(())
    }

    pub fn regularization(&self) -> Regularization {
        Regularization {
            lambda: self.l2_lambda,
            include_bias: self.regularize_bias,
            scope: self.decay_scope,
        }
    }

    /// Every setting as `(key, value)` pairs, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("dim", self.dim.to_string()),
            ("layers", self.layers.to_string()),
            ("activation", self.activation.to_string()),
            ("optimizer", self.optimizer.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("l2_lambda", self.l2_lambda.to_string()),
            ("regularize_bias", self.regularize_bias.to_string()),
            (
                "decay_scope",
                match self.decay_scope {
                    DecayScope::Touched => "touched",
                    DecayScope::Full => "full",
                }
                .to_string(),
            ),
            ("dropout", self.dropout.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("sampling_ratio", self.sampling_ratio.to_string()),
            ("stop_metric", self.stop_metric.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

/// Validation-set metrics with dropout off and the full graph.
pub fn evaluate(
    instances: &[SparseInstance],
    params: &ModelParams,
    norm: Option<&NormalizedAdjacency>,
) -> Result<MetricReport, TrainError> {
    let predictions = model::predict_batch(instances, norm, params)?;
    let labels: Vec<f64> = instances.iter().map(|x| x.label).collect();
    Ok(MetricReport::compute(
        &predictions,
        &labels,
        params.param_count(),
    )?)
}

/// Trains from scratch and returns the parameters of the best validation
/// epoch.
///
/// Each epoch shuffles the training set, redraws the neighbor sample (GEM
/// with `sampling_ratio < 1`), runs mini-batch updates and then scores the
/// validation set on the full graph. Training stops after `patience` epochs
/// without a strict improvement, or at `max_epochs`.
pub fn train(
    train_set: &[SparseInstance],
    val_set: &[SparseInstance],
    space: &FeatureSpace,
    graph: Option<&FeatureGraph>,
    config: &TrainConfig,
) -> Result<(ModelParams, RunReport), TrainError> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::Config(
            "training and validation sets must be non-empty".into(),
        ));
    }
    if train_set.iter().any(SparseInstance::is_empty) {
        return Err(TrainError::Config(
            "training instances need at least one feature".into(),
        ));
    }
    space.validate(train_set)?;
    space.validate(val_set)?;
    let m = space.num_features();
    match (config.layers, graph) {
        (0, Some(_)) => {
            return Err(TrainError::Config(
                "a graph was given but layers is 0".into(),
            ))
        }
        (l, None) if l > 0 => {
            return Err(TrainError::Config(format!(
                "{l} graph layer(s) requested without a graph"
            )))
        }
        (_, Some(g)) if g.num_nodes() != m => {
            return Err(TrainError::Config(format!(
                "graph has {} nodes but the feature space has {m}",
                g.num_nodes()
            )))
        }
        _ => {}
    }

    let mut params = ModelParams::init(
        m,
        config.dim,
        config.layers,
        config.activation,
        seed::sub_seed(config.seed, seed::INIT),
    );
    let full_norm = graph.map(FeatureGraph::normalize);
    let mut state = OptimizerState::new(config.optimizer, &params);
    let reg = config.regularization();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed::sub_seed(config.seed, seed::SHUFFLE));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed::sub_seed(config.seed, seed::DROPOUT));

    let mut report = RunReport::new(config);
    report.push_meta("loss_reduction", "sum");
    report.push_meta("eval_graph", "full");
    report.push_meta("eval_dropout", "off");
    report.push_meta("sampling_redraw", "per_epoch");
    report.push_meta("train_instances", train_set.len());
    report.push_meta("validation_instances", val_set.len());
    report.push_meta("num_features", m);
    if let Some(g) = graph {
        report.push_meta("graph_edges", g.num_edges());
    }

    let mut best = params.clone();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let sampled;
        let epoch_norm = match (graph, &full_norm) {
            (Some(g), Some(_)) if config.sampling_ratio < 1.0 => {
                let seed = seed::indexed_seed(config.seed, seed::SAMPLING, epoch as u64);
                sampled = graph::sample_neighbors(g, config.sampling_ratio, seed)?.normalize();
                Some(&sampled)
            }
            (_, full) => full.as_ref(),
        };

        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&SparseInstance> = chunk.iter().map(|&k| &train_set[k]).collect();
            let dropout = (config.dropout > 0.0).then(|| DropoutDraw {
                ratio: config.dropout,
                seed: dropout_rng.next_u64(),
            });
            let step = forward_backward(&batch, &params, epoch_norm, &reg, dropout)?;
            if !step.loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    loss: step.loss,
                });
            }
            epoch_loss += step.loss;
            optimizer_step(&mut params, &mut state, &step.grads, config.learning_rate);
        }

        let val = evaluate(val_set, &params, full_norm.as_ref())?;
        let monitored = match config.stop_metric {
            StopMetric::Rmse => val.rmse,
            StopMetric::Mae => val.mae,
        };
        let observation = stopper.observe(monitored);
        if observation.improved() {
            best = params.clone();
        }
        report.epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss,
            val_rmse: val.rmse,
            val_mae: val.mae,
            seconds: started.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {epoch}: train_loss={epoch_loss:.6} val_rmse={:.6} val_mae={:.6}",
            val.rmse,
            val.mae
        );
        if observation == Observation::Stop {
            report.stopped_early = true;
            break;
        }
    }
    report.best_epoch = stopper.best_epoch();
    report.set_final("train", evaluate(train_set, &best, full_norm.as_ref())?);
    report.set_final("validation", evaluate(val_set, &best, full_norm.as_ref())?);
    Ok((best, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(label: f64, entries: &[(usize, f64)]) -> SparseInstance {
        SparseInstance::new(label, entries.to_vec()).unwrap()
    }

    /// Two users × three items; the label depends on the user-item pair.
    fn toy() -> (Vec<SparseInstance>, FeatureSpace) {
        let space =
            FeatureSpace::from_ranges(vec![("user".into(), 0..2), ("item".into(), 2..5)]).unwrap();
        let mut data = Vec::new();
        for rep in 0..8 {
            for u in 0..2 {
                for i in 2..5 {
                    let y = if (u + i) % 2 == 0 { 1.0 } else { 0.0 };
                    let noise = 0.01 * ((rep * 7 + u * 3 + i) % 5) as f64;
                    data.push(inst(y + noise, &[(u, 1.0), (i, 1.0)]));
                }
            }
        }
        (data, space)
    }

    fn quick(layers: usize) -> TrainConfig {
        TrainConfig {
            dim: 4,
            layers,
            learning_rate: 0.01,
            l2_lambda: 0.0,
            batch_size: 8,
            max_epochs: 10,
            patience: 3,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                patience: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                dropout: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                sampling_ratio: 1.1,
                ..TrainConfig::default()
            },
            TrainConfig {
                dim: 0,
                ..TrainConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn adam_loss_decreases_on_linear_toy() {
        // y = 1 + 0.5 x0 − 0.3 x1 over a grid of feature values
        let space = FeatureSpace::single_field("x", 2).unwrap();
        let mut data = Vec::new();
        for a in 0..6 {
            for b in 0..6 {
                let (x0, x1) = (0.2 * a as f64, 0.2 * b as f64 + 0.1);
                data.push(inst(
                    1.0 + 0.5 * x0 - 0.3 * x1,
                    &[(0, x0.max(1e-3)), (1, x1)],
                ));
            }
        }
        let config = TrainConfig {
            dim: 2,
            learning_rate: 0.01,
            batch_size: 36,
            max_epochs: 10,
            patience: 10,
            l2_lambda: 0.0,
            seed: 1,
            ..TrainConfig::default()
        };
        let (_, report) = train(&data, &data, &space, None, &config).unwrap();
        let losses: Vec<f64> = report.epochs.iter().map(|e| e.train_loss).collect();
        assert_eq!(losses.len(), 10);
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "{losses:?}");
        }
    }

    #[test]
    fn graph_requirements_are_checked() {
        let (data, space) = toy();
        let g = FeatureGraph::empty(5);
        assert!(matches!(
            train(&data, &data, &space, None, &quick(1)),
            Err(TrainError::Config(_))
        ));
        assert!(matches!(
            train(&data, &data, &space, Some(&g), &quick(0)),
            Err(TrainError::Config(_))
        ));
        let wrong = FeatureGraph::empty(6);
        assert!(train(&data, &data, &space, Some(&wrong), &quick(1)).is_err());
        assert!(train(&[], &data, &space, None, &quick(0)).is_err());
        assert!(train(&data, &[], &space, None, &quick(0)).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let (data, space) = toy();
        let mut big: Vec<SparseInstance> = data.clone();
        big[0] = inst(f64::MAX, &[(0, 1.0), (2, 1.0)]);
        let err = train(&big, &data, &space, None, &quick(0)).unwrap_err();
        assert!(
            matches!(err, TrainError::Diverged { epoch: 1, .. }),
            "{err}"
        );
    }

    #[test]
    fn returned_params_are_from_best_epoch() {
        let (data, space) = toy();
        let config = TrainConfig {
            learning_rate: 0.3,
            max_epochs: 15,
            patience: 15,
            ..quick(0)
        };
        let (params, report) = train(&data, &data[..6], &space, None, &config).unwrap();
        let best = report.best_epoch.unwrap();
        let min = report
            .epochs
            .iter()
            .map(|e| e.val_rmse)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(report.epochs[best - 1].val_rmse, min);
        let again = evaluate(&data[..6], &params, None).unwrap();
        assert_eq!(again.rmse, min);
        assert_eq!(report.final_metric("validation").unwrap().rmse, min);
    }
}
