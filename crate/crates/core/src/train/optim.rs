//! Adagrad and Adam over sparse gradient sets.
//!
//! Only the rows present in a [`GradientSet`] are touched; Adam uses the
//! global step count for bias correction (lazy Adam).

use std::fmt;
use std::str::FromStr;

use crate::matrix::Matrix;
use crate::model::ModelParams;

use super::grad::GradientSet;

pub const EPSILON: f64 = 1e-8;
pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    Adagrad,
    #[default]
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adagrad => "adagrad",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "adagrad" => Ok(OptimizerKind::Adagrad),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!("unknown optimizer `{other}`")),
        }
    }
}

/// Buffers shaped exactly like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Accumulator {
    pub bias: f64,
    pub linear: Vec<f64>,
    pub weights: Vec<Matrix>,
}

impl Accumulator {
    fn zeros_like(params: &ModelParams) -> Self {
        Accumulator {
            bias: 0.0,
            linear: vec![0.0; params.linear.len()],
            weights: params
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    /// Running sum of squared gradients.
    Adagrad { sum_sq: Accumulator },
    /// First and second moment estimates plus the step count.
    Adam {
        first: Accumulator,
        second: Accumulator,
        step: u64,
    },
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ModelParams) -> Self {
        match kind {
            OptimizerKind::Adagrad => OptimizerState::Adagrad {
                sum_sq: Accumulator::zeros_like(params),
            },
            OptimizerKind::Adam => OptimizerState::Adam {
                first: Accumulator::zeros_like(params),
                second: Accumulator::zeros_like(params),
                step: 0,
            },
        }
    }
}

enum Rule {
    Adagrad { lr: f64 },
    Adam { lr: f64, c1: f64, c2: f64 },
}

impl Rule {
    #[inline]
    fn update(&self, theta: &mut f64, g: f64, m: &mut f64, v: &mut f64) {
        match *self {
            Rule::Adagrad { lr } => {
                *v += g * g;
                *theta -= lr * g / (*v + EPSILON).sqrt();
            }
            Rule::Adam { lr, c1, c2 } => {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *theta -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
    }
}

/// Applies one update. Rows missing from `grads` keep their values and
/// optimizer state.
pub fn optimizer_step(
    params: &mut ModelParams,
    state: &mut OptimizerState,
    grads: &GradientSet,
    learning_rate: f64,
) {
    assert_eq!(
        grads.deep.len(),
        params.weights.len() - 1,
        "gradient shape mismatch"
    );
    let dim = params.dim();
    let mut unused = Accumulator {
        bias: 0.0,
        linear: Vec::new(),
        weights: Vec::new(),
    };
    let (rule, first, second) = match state {
        OptimizerState::Adagrad { sum_sq } => {
            (Rule::Adagrad { lr: learning_rate }, &mut unused, sum_sq)
        }
        OptimizerState::Adam {
            first,
            second,
            step,
        } => {
            *step += 1;
            let t = *step as i32;
            (
                Rule::Adam {
                    lr: learning_rate,
                    c1: 1.0 - BETA1.powi(t),
                    c2: 1.0 - BETA2.powi(t),
                },
                first,
                second,
            )
        }
    };
    let adam = matches!(rule, Rule::Adam { .. });
    let mut scratch = 0.0;
    macro_rules! first {
        ($e:expr) => {
            if adam {
                &mut $e
            } else {
                &mut scratch
            }
        };
    }

    rule.update(
        &mut params.bias,
        grads.bias,
        first!(first.bias),
        &mut second.bias,
    );
    for &(i, g) in &grads.linear {
        rule.update(
            &mut params.linear[i],
            g,
            first!(first.linear[i]),
            &mut second.linear[i],
        );
    }
    for (k, &i) in grads.table.indices.iter().enumerate() {
        let g_row = grads.table.values.row(k);
        for (f, &g) in g_row.iter().enumerate() {
            let idx = i * dim + f;
            rule.update(
                &mut params.weights[0].as_mut_slice()[idx],
                g,
                first!(first.weights[0].as_mut_slice()[idx]),
                &mut second.weights[0].as_mut_slice()[idx],
            );
        }
    }
    for (l, g) in grads.deep.iter().enumerate() {
        for (idx, &gv) in g.as_slice().iter().enumerate() {
            rule.update(
                &mut params.weights[l + 1].as_mut_slice()[idx],
                gv,
                first!(first.weights[l + 1].as_mut_slice()[idx]),
                &mut second.weights[l + 1].as_mut_slice()[idx],
            );
        }
    }
}
