//! Per-group metrics, NVP model selection and seed-averaged ablations.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataConfig, Split, Splits};
use crate::predictor::{forward_loss, predict, ModelParams, PredictorError};
use crate::trainers::{train, TrainConfig, TrainError, TrainedRun};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot evaluate on an empty split")]
    EmptySplit,
    #[error(transparent)]
    Predictor(#[from] PredictorError),
}

/// Accuracy summary of a model on one split, grouped by true group.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub acc_overall: f64,
    /// Accuracy per true group; 1.0 for a group with no samples.
    pub acc_group: Vec<f64>,
    pub absent: Vec<bool>,
    pub counts: Vec<usize>,
}

pub fn evaluate(params: &ModelParams, ds: &crate::data::GroupedDataset) -> Result<EvalMetrics, EvalError> {
    if ds.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let pred = predict(params, &ds.features)?;
    let loss = forward_loss(params, &ds.features, &ds.labels)?.mean;
    let m = ds.num_groups;
    let mut correct = vec![0usize; m];
    let mut counts = vec![0usize; m];
    for ((p, y), g) in pred.iter().zip(&ds.labels).zip(&ds.true_groups) {
        counts[*g] += 1;
        correct[*g] += usize::from(p == y);
    }
    let total_correct: usize = correct.iter().sum();
    Ok(EvalMetrics {
        loss,
        acc_overall: total_correct as f64 / ds.len() as f64,
        acc_group: correct
            .iter()
            .zip(&counts)
            .map(|(c, n)| if *n == 0 { 1.0 } else { *c as f64 / *n as f64 })
            .collect(),
        absent: counts.iter().map(|n| *n == 0).collect(),
        counts,
    })
}

/// One line of a metrics JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub acc_overall: f64,
    pub acc_group: Vec<f64>,
    /// Groups with no samples in the split (their accuracy reads 1).
    pub absent: Vec<bool>,
    /// Group weights after the epoch; empty for algorithms without them.
    pub q: Vec<f64>,
    pub eps_relaxations: usize,
}

impl RunRecord {
    pub fn from_metrics(epoch: usize, split: Split, m: &EvalMetrics, q: Vec<f64>, eps_relaxations: usize) -> Self {
        Self {
            epoch,
            split,
            loss: m.loss,
            acc_overall: m.acc_overall,
            acc_group: m.acc_group.clone(),
            absent: m.absent.clone(),
            q,
            eps_relaxations,
        }
    }
}

/// `q` per epoch, in record order.
pub fn q_trajectory(run: &TrainedRun) -> Vec<Vec<f64>> {
    run.records.iter().map(|r| r.q.clone()).collect()
}

/// A finished run with final validation and test records.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub run: TrainedRun,
    pub val: RunRecord,
    pub test: RunRecord,
    /// Smallest true group of the training split.
    pub minority_group: usize,
}

impl ExperimentOutcome {
    pub fn test_minority_acc(&self) -> f64 {
        self.test.acc_group[self.minority_group]
    }
}

pub fn run_on_splits(splits: &Splits, cfg: &TrainConfig) -> Result<ExperimentOutcome, TrainError> {
    let run = train(&splits.train, cfg)?;
    let q = run.q.as_ref().map(|q| q.as_slice().to_vec()).unwrap_or_default();
    let val = RunRecord::from_metrics(cfg.epochs, Split::Val, &evaluate(&run.params, &splits.val)?, q.clone(), 0);
    let test = RunRecord::from_metrics(cfg.epochs, Split::Test, &evaluate(&run.params, &splits.test)?, q, 0);
    Ok(ExperimentOutcome {
        run,
        val,
        test,
        minority_group: splits.train.minority_group(),
    })
}

/// Generate data from `data` and train with `cfg`.
pub fn run_experiment(data: &DataConfig, cfg: &TrainConfig) -> Result<ExperimentOutcome, TrainError> {
    run_on_splits(&data.generate()?, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub config: TrainConfig,
    pub val: Option<RunRecord>,
    pub test: Option<RunRecord>,
    pub error: Option<String>,
}

/// Results of a grid, in config order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub minority_group: usize,
    pub entries: Vec<SweepEntry>,
}

/// Run every config on the same splits in parallel. Failed runs are kept
/// with their error message.
pub fn run_sweep(splits: &Splits, configs: &[TrainConfig]) -> SweepResult {
    let entries = configs
        .par_iter()
        .map(|cfg| match run_on_splits(splits, cfg) {
            Ok(o) => SweepEntry {
                config: cfg.clone(),
                val: Some(o.val),
                test: Some(o.test),
                error: None,
            },
            Err(e) => SweepEntry {
                config: cfg.clone(),
                val: None,
                test: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    SweepResult {
        minority_group: splits.train.minority_group(),
        entries,
    }
}

/// NVP selection: keep the `top_k` successful entries by validation overall
/// accuracy, then return the index of the one with the best validation
/// minority accuracy. Ties go to the earlier config.
pub fn nvp_select(sweep: &SweepResult, top_k: usize) -> Option<usize> {
    let mut ranked: Vec<(usize, &RunRecord)> = sweep
        .entries
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.val.as_ref().map(|v| (i, v)))
        .collect();
    ranked.sort_by(|a, b| b.1.acc_overall.total_cmp(&a.1.acc_overall).then(a.0.cmp(&b.0)));
    ranked.truncate(top_k.max(1));
    let mg = sweep.minority_group;
    ranked
        .into_iter()
        .min_by(|a, b| b.1.acc_group[mg].total_cmp(&a.1.acc_group[mg]).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
}

/// One cell of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub config_id: String,
    pub value: f64,
    pub seeds: usize,
    pub min_acc_mean: f64,
    pub min_acc_sd: f64,
    pub avg_acc_mean: f64,
    pub avg_acc_sd: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn ablate<F>(values: &[f64], seeds: &[u64], id: &str, make: F) -> Result<Vec<AblationRow>, TrainError>
where
    F: Fn(f64, u64) -> (DataConfig, TrainConfig) + Sync,
{
    if seeds.is_empty() {
        return Err(TrainError::Config("ablation needs at least one seed".into()));
    }
    let cells: Vec<(usize, u64)> = (0..values.len())
        .flat_map(|v| seeds.iter().map(move |s| (v, *s)))
        .collect();
    let results: Vec<(f64, f64)> = cells
        .par_iter()
        .map(|&(v, s)| {
            let (data, cfg) = make(values[v], s);
            run_experiment(&data, &cfg).map(|o| (o.test_minority_acc(), o.test.acc_overall))
        })
        .collect::<Result<_, _>>()?;
    Ok(values
        .iter()
        .zip(results.chunks(seeds.len()))
        .map(|(v, chunk)| {
            let mins: Vec<f64> = chunk.iter().map(|r| r.0).collect();
            let avgs: Vec<f64> = chunk.iter().map(|r| r.1).collect();
            let (min_acc_mean, min_acc_sd) = mean_sd(&mins);
            let (avg_acc_mean, avg_acc_sd) = mean_sd(&avgs);
            AblationRow {
                config_id: id.to_string(),
                value: *v,
                seeds: seeds.len(),
                min_acc_mean,
                min_acc_sd,
                avg_acc_mean,
                avg_acc_sd,
            }
        })
        .collect())
}

/// Each seed drives both the data and the training seed of its run.
pub fn ablate_labeled_fraction(
    data: &DataConfig,
    cfg: &TrainConfig,
    fractions: &[f64],
    seeds: &[u64],
) -> Result<Vec<AblationRow>, TrainError> {
    ablate(fractions, seeds, cfg.algorithm.as_str(), |f, s| {
        (
            DataConfig { labeled_fraction: f, seed: s, ..data.clone() },
            TrainConfig { seed: s, ..cfg.clone() },
        )
    })
}

pub fn ablate_epsilon(
    data: &DataConfig,
    cfg: &TrainConfig,
    eps_values: &[f64],
    seeds: &[u64],
) -> Result<Vec<AblationRow>, TrainError> {
    ablate(eps_values, seeds, cfg.algorithm.as_str(), |e, s| {
        (
            DataConfig { seed: s, ..data.clone() },
            TrainConfig { epsilon: e, seed: s, ..cfg.clone() },
        )
    })
}

/// CSV with columns `config_id, <value_name>, seeds, min_acc_mean,
/// min_acc_sd, avg_acc_mean, avg_acc_sd`.
pub fn write_ablation_csv(rows: &[AblationRow], value_name: &str, path: &Path) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "config_id",
        value_name,
        "seeds",
        "min_acc_mean",
        "min_acc_sd",
        "avg_acc_mean",
        "avg_acc_sd",
    ])?;
    for r in rows {
        w.write_record([
            r.config_id.clone(),
            r.value.to_string(),
            r.seeds.to_string(),
            r.min_acc_mean.to_string(),
            r.min_acc_sd.to_string(),
            r.avg_acc_mean.to_string(),
            r.avg_acc_sd.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GroupedDataset;
    use crate::matrix::Matrix;
    use crate::predictor::ModelKind;
    use crate::trainers::Algorithm;
    use proptest::prelude::*;

    fn dataset(labels: Vec<u8>, groups: Vec<usize>, m: usize) -> GroupedDataset {
        let n = labels.len();
        let features = Matrix::from_vec(n, 1, labels.iter().map(|y| if *y == 1 { 1.0 } else { -1.0 }).collect()).unwrap();
        GroupedDataset {
            split: Split::Test,
            features,
            groups: groups.iter().map(|g| Some(*g)).collect(),
            true_groups: groups,
            labels,
            num_groups: m,
        }
    }

    fn params(w: f64, b: f64) -> ModelParams {
        ModelParams { kind: ModelKind::Linear, input_dim: 1, weights: vec![w, b] }
    }

    #[test]
    fn perfect_and_constant_classifiers() {
        let ds = dataset(vec![1, 0, 1, 1, 0, 0, 1, 0], vec![0, 0, 0, 0, 1, 1, 1, 1], 3);
        let m = evaluate(&params(5.0, 0.0), &ds).unwrap();
        assert_eq!(m.acc_overall, 1.0);
        assert_eq!(m.acc_group, vec![1.0, 1.0, 1.0]);
        assert_eq!(m.absent, vec![false, false, true]);
        // Always predicting 1 scores the per-group positive rate.
        let c = evaluate(&params(0.0, 1.0), &ds).unwrap();
        assert_eq!(c.acc_group[..2], [0.75, 0.25]);
        assert_eq!(c.acc_overall, 0.5);
    }

    #[test]
    fn empty_split_is_an_error() {
        let ds = dataset(vec![], vec![], 2);
        assert!(matches!(evaluate(&params(1.0, 0.0), &ds), Err(EvalError::EmptySplit)));
    }

    proptest! {
        #[test]
        fn overall_is_count_weighted_mean(
            rows in prop::collection::vec((0u8..2, 0usize..3), 1..60),
            w in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            let (labels, groups): (Vec<u8>, Vec<usize>) = rows.into_iter().unzip();
            let n = labels.len();
            let ds = dataset(labels, groups, 3);
            let m = evaluate(&params(w, b), &ds).unwrap();
            let recomputed: f64 = m.acc_group.iter().zip(&m.counts).map(|(a, c)| a * *c as f64).sum::<f64>() / n as f64;
            prop_assert!((recomputed - m.acc_overall).abs() <= 1e-12);
            for a in &m.acc_group { prop_assert!((0.0..=1.0).contains(a)); }
        }
    }

    fn record(overall: f64, minority: f64) -> RunRecord {
        RunRecord {
            epoch: 1,
            split: Split::Val,
            loss: 0.0,
            acc_overall: overall,
            acc_group: vec![0.9, minority],
            absent: vec![false, false],
            q: vec![],
            eps_relaxations: 0,
        }
    }

    fn sweep(rows: &[(f64, f64)]) -> SweepResult {
        SweepResult {
            minority_group: 1,
            entries: rows
                .iter()
                .enumerate()
                .map(|(i, (o, m))| SweepEntry {
                    config: TrainConfig { seed: i as u64, ..TrainConfig::new(Algorithm::Erm) },
                    val: Some(record(*o, *m)),
                    test: Some(record(*o, *m)),
                    error: None,
                })
                .collect(),
        }
    }

    #[test]
    fn nvp_rules() {
        assert_eq!(nvp_select(&sweep(&[(0.8, 0.3)]), 5), Some(0));
        assert_eq!(nvp_select(&sweep(&[(0.8, 0.4), (0.8, 0.6)]), 5), Some(1));
        // Hand ranking by overall: 2 (0.95), 4 (0.93), 0 (0.90), 6 (0.90), 1 (0.88) | 3, 5 dropped.
        // Best minority among those five: index 6 (0.62); index 5 has 0.9 but is cut.
        let table = [
            (0.90, 0.55),
            (0.88, 0.60),
            (0.95, 0.40),
            (0.70, 0.95),
            (0.93, 0.50),
            (0.85, 0.90),
            (0.90, 0.62),
        ];
        let s = sweep(&table);
        assert_eq!(nvp_select(&s, 5), Some(6));
        assert_eq!(nvp_select(&s, 5), nvp_select(&s, 5));
        assert_eq!(nvp_select(&s, 1), Some(2));
        assert_eq!(nvp_select(&s, 7), Some(3));
        // Equal minority accuracy resolves to the earlier config.
        assert_eq!(nvp_select(&sweep(&[(0.8, 0.5), (0.9, 0.5)]), 5), Some(0));
    }

    #[test]
    fn nvp_skips_failed_runs() {
        let mut s = sweep(&[(0.8, 0.9), (0.7, 0.5)]);
        s.entries[0].val = None;
        s.entries[0].error = Some("boom".into());
        assert_eq!(nvp_select(&s, 5), Some(1));
        s.entries[1].val = None;
        assert_eq!(nvp_select(&s, 5), None);
    }

    #[test]
    fn mean_sd_sample_convention() {
        let (m, sd) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((sd - 1.0).abs() < 1e-15);
        assert_eq!(mean_sd(&[0.4]), (0.4, 0.0));
    }

    #[test]
    fn ablation_table_shape() {
        let data = DataConfig { n_train: 300, n_val: 100, n_test: 100, ..DataConfig::default() };
        let cfg = TrainConfig { epochs: 3, ..TrainConfig::new(Algorithm::WorstoffDro) };
        let rows = ablate_epsilon(&data, &cfg, &[0.0, 0.1], &[0, 1, 2]).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.seeds == 3 && r.min_acc_sd >= 0.0));
        assert_eq!(rows[1].value, 0.1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eps.csv");
        write_ablation_csv(&rows, "epsilon", &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("config_id,epsilon,seeds,min_acc_mean,min_acc_sd,avg_acc_mean,avg_acc_sd\n"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn full_labels_make_worstoff_and_oracle_agree() {
        let data = DataConfig { n_train: 400, n_val: 100, n_test: 200, labeled_fraction: 1.0, ..DataConfig::default() };
        let cfg = TrainConfig { epochs: 5, epsilon: 0.0, eta_q: 0.3, ..TrainConfig::new(Algorithm::WorstoffDro) };
        let w = ablate_labeled_fraction(&data, &cfg, &[1.0], &[3, 4]).unwrap();
        let o = ablate_labeled_fraction(&data, &TrainConfig { algorithm: Algorithm::GroupDroOracle, ..cfg }, &[1.0], &[3, 4]).unwrap();
        assert_eq!(w[0].min_acc_mean, o[0].min_acc_mean);
        assert_eq!(w[0].avg_acc_mean, o[0].avg_acc_mean);
    }
}
