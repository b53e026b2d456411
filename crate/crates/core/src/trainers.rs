//! ERM, Unsup DRO, Group DRO (oracle and partial) and Worst-off DRO.
//!
//! Every algorithm runs the same loop per mini-batch:
//!
//! 1. per-sample losses at `w_t`;
//! 2. a group assignment of the batch (hard labels, or the worst-off solve);
//! 3. per-sample weights from the assignment and `q_t`;
//! 4. one SGD step to `w_{t+1}`;
//! 5. soft group losses at `w_{t+1}` and an exponentiated ascent step on `q`.
//!
//! ERM and Unsup DRO skip the assignment and the `q` update. Because the
//! hard-label and solver paths share steps 3 to 5, Worst-off DRO with every
//! row pinned reproduces Group DRO bit for bit.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{
    solve_relaxed, AssignmentMatrix, ConstraintSpec, SolveProblem, SolverError,
};
use crate::data::{estimate_marginals, DataError, GroupedDataset};
use crate::evaluation::{evaluate, EvalError, RunRecord};
use crate::group_weights::{exp_ascent, soft_group_losses, GroupWeights, WeightsError, EMPTY_GROUP_MASS};
use crate::predictor::{forward_loss, loss_and_weighted_grad, sgd_step, ModelKind, ModelParams, PredictorError};
use crate::seed::rng_for;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("no labeled training samples for the partial variant")]
    EmptyTrainSet,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Erm,
    UnsupDro,
    GroupDroOracle,
    GroupDroPartial,
    WorstoffDro,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Erm,
        Algorithm::UnsupDro,
        Algorithm::GroupDroOracle,
        Algorithm::GroupDroPartial,
        Algorithm::WorstoffDro,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Erm => "erm",
            Algorithm::UnsupDro => "unsup_dro",
            Algorithm::GroupDroOracle => "group_dro_oracle",
            Algorithm::GroupDroPartial => "group_dro_partial",
            Algorithm::WorstoffDro => "worstoff_dro",
        }
    }

    /// Whether the algorithm maintains group weights `q`.
    pub fn uses_q(self) -> bool {
        matches!(
            self,
            Algorithm::GroupDroOracle | Algorithm::GroupDroPartial | Algorithm::WorstoffDro
        )
    }
}

fn default_eta_w() -> f64 {
    0.1
}
fn default_eta_q() -> f64 {
    0.01
}
fn default_epsilon() -> f64 {
    0.01
}
fn default_eta_udro() -> f64 {
    0.5
}
fn default_epochs() -> usize {
    100
}

/// Hyper-parameters of one training run. `batch_size: null` means full batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    #[serde(default = "default_eta_w")]
    pub eta_w: f64,
    #[serde(default = "default_eta_q")]
    pub eta_q: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_eta_udro")]
    pub eta_udro: f64,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelKind,
}

impl TrainConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            eta_w: default_eta_w(),
            eta_q: default_eta_q(),
            weight_decay: 0.0,
            epsilon: default_epsilon(),
            eta_udro: default_eta_udro(),
            batch_size: None,
            epochs: default_epochs(),
            seed: 0,
            model: ModelKind::Linear,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let rates = [
            ("eta_w", self.eta_w),
            ("eta_q", self.eta_q),
            ("weight_decay", self.weight_decay),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in rates {
            if !(v.is_finite() && v >= 0.0) {
                return Err(TrainError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.algorithm == Algorithm::UnsupDro && !(self.eta_udro > 0.0 && self.eta_udro < 1.0) {
            return Err(TrainError::Config(format!(
                "eta_udro must lie in (0, 1), got {}",
                self.eta_udro
            )));
        }
        if self.batch_size == Some(0) {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Output of a training run: one train-split record per epoch, numbered
/// from 1 by completed epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedRun {
    pub params: ModelParams,
    pub records: Vec<RunRecord>,
    pub q: Option<GroupWeights>,
    pub warnings: Vec<String>,
    /// Worst-off batches whose ground truth was feasible but scored above
    /// the solver optimum. Always zero for a correct solver.
    pub bound_violations: usize,
}

/// Per-sample weights `s_i = sum_j q_j g_ij / sum_i' g_i'j`, skipping empty columns.
pub fn sample_weights(assign: &AssignmentMatrix, q: &GroupWeights) -> Vec<f64> {
    let col = assign.column_sums();
    (0..assign.rows())
        .map(|i| {
            let mut s = 0.0;
            for (j, g) in assign.row(i).iter().enumerate() {
                if col[j] >= EMPTY_GROUP_MASS {
                    s += q.get(j) * g / col[j];
                }
            }
            s
        })
        .collect()
}

/// Weights selecting the batch samples at or above the `eta` loss quantile:
/// with losses sorted ascending, the threshold is the `floor(eta n)`-th value.
pub fn unsup_dro_weights(losses: &[f64], eta: f64) -> Vec<f64> {
    let n = losses.len();
    let mut sorted = losses.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = ((eta * n as f64).floor() as usize).min(n.saturating_sub(1));
    let threshold = sorted[k];
    let kept = losses.iter().filter(|l| **l >= threshold).count();
    let w = 1.0 / kept as f64;
    losses
        .iter()
        .map(|l| if *l >= threshold { w } else { 0.0 })
        .collect()
}

enum Assigner {
    Uniform,
    Quantile(f64),
    Hard,
    Worstoff { p_bar: Vec<f64>, epsilon: f64 },
}

pub fn train_erm(ds: &GroupedDataset, cfg: &TrainConfig) -> Result<TrainedRun, TrainError> {
    run_loop(ds, cfg, Assigner::Uniform, None)
}

pub fn train_unsup_dro(ds: &GroupedDataset, cfg: &TrainConfig) -> Result<TrainedRun, TrainError> {
    cfg.validate()?;
    if !(cfg.eta_udro > 0.0 && cfg.eta_udro < 1.0) {
        return Err(TrainError::Config(format!("eta_udro must lie in (0, 1), got {}", cfg.eta_udro)));
    }
    run_loop(ds, cfg, Assigner::Quantile(cfg.eta_udro), None)
}

/// Group DRO with hard labels: all true labels (`oracle`) or only the
/// observed ones, discarding unlabeled rows.
pub fn train_group_dro(ds: &GroupedDataset, cfg: &TrainConfig, oracle: bool) -> Result<TrainedRun, TrainError> {
    if oracle {
        return run_loop(&ds.fully_labeled(), cfg, Assigner::Hard, None);
    }
    let labeled: Vec<usize> = (0..ds.len()).filter(|&i| ds.groups[i].is_some()).collect();
    if labeled.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    run_loop(&ds.subset(&labeled), cfg, Assigner::Hard, Some(ds))
}

pub fn train_worstoff_dro(ds: &GroupedDataset, cfg: &TrainConfig) -> Result<TrainedRun, TrainError> {
    let p_bar = estimate_marginals(ds)?.p_bar;
    run_loop(
        ds,
        cfg,
        Assigner::Worstoff {
            p_bar,
            epsilon: cfg.epsilon,
        },
        None,
    )
}

/// Dispatch on `cfg.algorithm`.
pub fn train(ds: &GroupedDataset, cfg: &TrainConfig) -> Result<TrainedRun, TrainError> {
    match cfg.algorithm {
        Algorithm::Erm => train_erm(ds, cfg),
        Algorithm::UnsupDro => train_unsup_dro(ds, cfg),
        Algorithm::GroupDroOracle => train_group_dro(ds, cfg, true),
        Algorithm::GroupDroPartial => train_group_dro(ds, cfg, false),
        Algorithm::WorstoffDro => train_worstoff_dro(ds, cfg),
    }
}

/// `train_on` holds the rows optimized over; `report_on` (default: the same
/// rows) is evaluated at the end of each epoch.
fn run_loop(
    train_on: &GroupedDataset,
    cfg: &TrainConfig,
    assigner: Assigner,
    report_on: Option<&GroupedDataset>,
) -> Result<TrainedRun, TrainError> {
    cfg.validate()?;
    let report_on = report_on.unwrap_or(train_on);
    let n = train_on.len();
    if n == 0 {
        return Err(TrainError::EmptyTrainSet);
    }
    let m = train_on.num_groups;
    let mut init_rng = rng_for(cfg.seed, "train/init");
    let mut params = ModelParams::init(cfg.model.clone(), train_on.dim(), &mut init_rng)?;
    let mut shuffle_rng = rng_for(cfg.seed, "train/shuffle");
    let tracks_q = matches!(assigner, Assigner::Hard | Assigner::Worstoff { .. });
    let mut q = GroupWeights::uniform(m);
    let batch = cfg.batch_size.unwrap_or(n).min(n);

    let mut order: Vec<usize> = (0..n).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut warnings = Vec::new();
    let mut bound_violations = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut relaxations = 0;
        for chunk in order.chunks(batch) {
            let b = train_on.subset(chunk);
            let losses = forward_loss(&params, &b.features, &b.labels)?.per_sample;

            let assignment = match &assigner {
                Assigner::Uniform | Assigner::Quantile(_) => None,
                Assigner::Hard => {
                    let g: Vec<usize> = b.groups.iter().map(|g| g.expect("hard labels present")).collect();
                    Some(AssignmentMatrix::one_hot(&g, m))
                }
                Assigner::Worstoff { p_bar, epsilon } => {
                    let pins = (0..b.len()).filter_map(|i| b.groups[i].map(|g| (i, g))).collect();
                    let problem = SolveProblem::new(
                        losses.clone(),
                        q.clone(),
                        ConstraintSpec::new(p_bar.clone(), *epsilon, pins),
                    );
                    let solved = solve_relaxed(&problem)?;
                    let spec = match solved.relaxed_epsilon {
                        Some(eps) => {
                            relaxations += 1;
                            problem.constraints.with_epsilon(eps)
                        }
                        None => problem.constraints.clone(),
                    };
                    // The ground truth, when it is admissible, can never beat the optimum.
                    let truth = AssignmentMatrix::one_hot(&b.true_groups, m);
                    if truth.check(&spec, 1e-9).is_ok() {
                        let t = truth.objective(&losses, &problem.theta());
                        let s = solved.solution.objective;
                        if t > s + 1e-9 * s.abs().max(1.0) {
                            bound_violations += 1;
                        }
                    }
                    Some(solved.solution.assignment)
                }
            };

            let weights = match (&assigner, &assignment) {
                (Assigner::Quantile(eta), _) => unsup_dro_weights(&losses, *eta),
                (_, Some(a)) => sample_weights(a, &q),
                _ => vec![1.0 / b.len() as f64; b.len()],
            };
            let (_, grad) = loss_and_weighted_grad(&params, &b.features, &b.labels, &weights, cfg.weight_decay)?;
            params = sgd_step(&params, &grad, cfg.eta_w);

            if let Some(a) = &assignment {
                let next = forward_loss(&params, &b.features, &b.labels)?.per_sample;
                q = exp_ascent(&q, &soft_group_losses(a, &next), cfg.eta_q)?;
            }
        }
        if relaxations > 0 {
            warnings.push(format!(
                "epoch {epoch}: epsilon relaxed on {relaxations} batch(es) to fit pinned rows"
            ));
        }
        let q_out = if tracks_q { q.as_slice().to_vec() } else { Vec::new() };
        records.push(RunRecord::from_metrics(
            epoch + 1,
            report_on.split,
            &evaluate(&params, report_on)?,
            q_out,
            relaxations,
        ));
    }

    Ok(TrainedRun {
        params,
        records,
        q: tracks_q.then_some(q),
        warnings,
        bound_violations,
    })
}
