//! Synthetic grouped datasets with a controllable spurious attribute, MCAR
//! group-label masking, marginal estimation and the CSV file format.
//!
//! File format: header `f0,...,f{d-1},y,g`, one row per sample, `g = -1`
//! for a missing group label. A sibling file with the extra suffix `.truth`
//! (header `g`) carries the true group of every row.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::seed::{derive_seed, rng_for};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data config: {0}")]
    InvalidConfig(String),
    #[error("group {group} has no labeled samples; its marginal cannot be estimated")]
    UnobservedGroup { group: usize },
    #[error("malformed dataset file {path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Features, binary labels, observed (possibly missing) and true groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset {
    pub split: Split,
    pub features: Matrix,
    pub labels: Vec<u8>,
    /// Observed group labels; `None` marks a missing label.
    pub groups: Vec<Option<usize>>,
    /// Ground truth, used for evaluation only.
    pub true_groups: Vec<usize>,
    pub num_groups: usize,
}

impl GroupedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labeled_count(&self) -> usize {
        self.groups.iter().filter(|g| g.is_some()).count()
    }

    /// Sample count per true group.
    pub fn group_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_groups];
        for &g in &self.true_groups {
            c[g] += 1;
        }
        c
    }

    /// True group with the fewest samples (first on ties).
    pub fn minority_group(&self) -> usize {
        let counts = self.group_counts();
        (0..self.num_groups)
            .min_by_key(|&j| (counts[j], j))
            .unwrap_or(0)
    }

    /// True group with the most samples (first on ties).
    pub fn majority_group(&self) -> usize {
        let counts = self.group_counts();
        (0..self.num_groups)
            .max_by_key(|&j| (counts[j], std::cmp::Reverse(j)))
            .unwrap_or(0)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            split: self.split,
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            groups: idx.iter().map(|&i| self.groups[i]).collect(),
            true_groups: idx.iter().map(|&i| self.true_groups[i]).collect(),
            num_groups: self.num_groups,
        }
    }

    /// Copy with every group label revealed.
    pub fn fully_labeled(&self) -> Self {
        Self {
            groups: self.true_groups.iter().map(|g| Some(*g)).collect(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.len();
        let bad = |reason: String| DataError::Malformed {
            path: format!("<{} split>", self.split.as_str()),
            reason,
        };
        if self.features.rows() != n || self.groups.len() != n || self.true_groups.len() != n {
            return Err(bad("column lengths disagree".into()));
        }
        if self.labels.iter().any(|y| *y > 1) {
            return Err(bad("labels must be 0 or 1".into()));
        }
        if self.true_groups.iter().any(|g| *g >= self.num_groups) {
            return Err(bad("true group out of range".into()));
        }
        for (g, t) in self.groups.iter().zip(&self.true_groups) {
            match g {
                None if self.split != Split::Train => {
                    return Err(bad("missing group label outside the train split".into()))
                }
                Some(g) if g != t => return Err(bad("observed group disagrees with truth".into())),
                _ => {}
            }
        }
        Ok(())
    }
}

fn check_simplex(name: &str, v: &[f64]) -> Result<(), DataError> {
    if v.is_empty() || v.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(DataError::InvalidConfig(format!("{name} must be nonnegative: {v:?}")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidConfig(format!("{name} sums to {s}, expected 1")));
    }
    Ok(())
}

fn check_probs(name: &str, v: &[f64]) -> Result<(), DataError> {
    if v.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(DataError::InvalidConfig(format!("{name} must lie in [0, 1]: {v:?}")));
    }
    Ok(())
}

fn sample_groups<R: Rng>(rng: &mut R, fractions: &[f64], n: usize) -> Result<Vec<usize>, DataError> {
    let dist = WeightedIndex::new(fractions)
        .map_err(|e| DataError::InvalidConfig(format!("group fractions: {e}")))?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}

/// Colored-digit style data: the label drives a core coordinate, a spurious
/// "color" attribute `c = y XOR Bernoulli(flip_g)` drives a second one.
///
/// Features are `e_0 (2y - 1) core_snr + e_1 (2c - 1) spurious_snr + noise`
/// with unit Gaussian noise in all `dim` coordinates.
#[allow(clippy::too_many_arguments)]
pub fn gen_cmnist_like(
    n: usize,
    flip_probs: &[f64],
    group_fractions: &[f64],
    core_snr: f64,
    spurious_snr: f64,
    dim: usize,
    seed: u64,
    split: Split,
) -> Result<GroupedDataset, DataError> {
    check_simplex("group_fractions", group_fractions)?;
    check_probs("flip_probs", flip_probs)?;
    if flip_probs.len() != group_fractions.len() {
        return Err(DataError::InvalidConfig(
            "flip_probs and group_fractions differ in length".into(),
        ));
    }
    if dim < 2 {
        return Err(DataError::InvalidConfig("dim must be at least 2".into()));
    }
    let mut rng = rng_for(seed, "gen/cmnist_like");
    let groups = sample_groups(&mut rng, group_fractions, n)?;
    let mut features = Matrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    for (i, &g) in groups.iter().enumerate() {
        let y = rng.random_bool(0.5);
        let c = y ^ rng.random_bool(flip_probs[g]);
        let row = features.row_mut(i);
        for v in row.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        row[0] += if y { core_snr } else { -core_snr };
        row[1] += if c { spurious_snr } else { -spurious_snr };
        labels.push(u8::from(y));
    }
    Ok(GroupedDataset {
        split,
        features,
        labels,
        groups: groups.iter().map(|g| Some(*g)).collect(),
        true_groups: groups,
        num_groups: flip_probs.len(),
    })
}

/// Tabular style data with group-dependent label rates.
///
/// `y ~ Bernoulli(pos_rate_g)`; coordinate 0 carries `(2y - 1) * LABEL_SHIFT`,
/// coordinate `1 + g` carries `GROUP_SHIFT`, and every coordinate gets unit
/// Gaussian noise. Group membership is linearly decodable, so the group
/// acts as a spurious predictor of the label.
pub fn gen_adult_like(
    n: usize,
    pos_rate_per_group: &[f64],
    group_fractions: &[f64],
    dim: usize,
    seed: u64,
    split: Split,
) -> Result<GroupedDataset, DataError> {
    const LABEL_SHIFT: f64 = 1.0;
    const GROUP_SHIFT: f64 = 1.5;
    check_simplex("group_fractions", group_fractions)?;
    check_probs("pos_rates", pos_rate_per_group)?;
    let m = group_fractions.len();
    if pos_rate_per_group.len() != m {
        return Err(DataError::InvalidConfig(
            "pos_rates and group_fractions differ in length".into(),
        ));
    }
    if dim < m + 1 {
        return Err(DataError::InvalidConfig(format!(
            "dim must be at least groups + 1 = {}",
            m + 1
        )));
    }
    let mut rng = rng_for(seed, "gen/adult_like");
    let groups = sample_groups(&mut rng, group_fractions, n)?;
    let mut features = Matrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    for (i, &g) in groups.iter().enumerate() {
        let y = rng.random_bool(pos_rate_per_group[g]);
        let row = features.row_mut(i);
        for v in row.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        row[0] += if y { LABEL_SHIFT } else { -LABEL_SHIFT };
        row[1 + g] += GROUP_SHIFT;
        labels.push(u8::from(y));
    }
    Ok(GroupedDataset {
        split,
        features,
        labels,
        groups: groups.iter().map(|g| Some(*g)).collect(),
        true_groups: groups,
        num_groups: m,
    })
}

/// Hide each group label independently with probability `1 - labeled_fraction`.
pub fn mask_mcar(ds: &GroupedDataset, labeled_fraction: f64, seed: u64) -> Result<GroupedDataset, DataError> {
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(DataError::InvalidConfig(format!(
            "labeled_fraction must lie in (0, 1], got {labeled_fraction}"
        )));
    }
    if ds.split != Split::Train {
        return Err(DataError::InvalidConfig("only the train split may be masked".into()));
    }
    let mut rng = rng_for(seed, "mask/mcar");
    let groups = ds
        .true_groups
        .iter()
        .map(|&g| rng.random_bool(labeled_fraction).then_some(g))
        .collect();
    Ok(GroupedDataset {
        groups,
        ..ds.clone()
    })
}

/// Group frequencies among the labeled rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalEstimate {
    pub p_bar: Vec<f64>,
    pub labeled_count: usize,
}

pub fn estimate_marginals(ds: &GroupedDataset) -> Result<MarginalEstimate, DataError> {
    let mut counts = vec![0usize; ds.num_groups];
    for g in ds.groups.iter().flatten() {
        counts[*g] += 1;
    }
    if let Some(group) = counts.iter().position(|c| *c == 0) {
        return Err(DataError::UnobservedGroup { group });
    }
    let k: usize = counts.iter().sum();
    Ok(MarginalEstimate {
        p_bar: counts.iter().map(|c| *c as f64 / k as f64).collect(),
        labeled_count: k,
    })
}

fn default_n_train() -> usize {
    20_000
}
fn default_n_eval() -> usize {
    4_000
}
fn default_labeled_fraction() -> f64 {
    0.1
}
fn default_flip_probs() -> Vec<f64> {
    vec![0.2, 0.1, 0.9]
}
fn default_cmnist_fractions() -> Vec<f64> {
    vec![0.45, 0.45, 0.10]
}
fn default_core_snr() -> f64 {
    1.0
}
fn default_spurious_snr() -> f64 {
    3.0
}
fn default_cmnist_dim() -> usize {
    20
}
fn default_pos_rates() -> Vec<f64> {
    vec![0.06, 0.94, 0.94, 0.94]
}
fn default_adult_fractions() -> Vec<f64> {
    vec![0.08, 0.42, 0.25, 0.25]
}
fn default_adult_dim() -> usize {
    12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum GeneratorConfig {
    CmnistLike {
        #[serde(default = "default_flip_probs")]
        flip_probs: Vec<f64>,
        #[serde(default = "default_cmnist_fractions")]
        group_fractions: Vec<f64>,
        #[serde(default = "default_core_snr")]
        core_snr: f64,
        #[serde(default = "default_spurious_snr")]
        spurious_snr: f64,
        #[serde(default = "default_cmnist_dim")]
        dim: usize,
    },
    AdultLike {
        #[serde(default = "default_pos_rates")]
        pos_rates: Vec<f64>,
        #[serde(default = "default_adult_fractions")]
        group_fractions: Vec<f64>,
        #[serde(default = "default_adult_dim")]
        dim: usize,
    },
}

impl GeneratorConfig {
    pub fn cmnist_default() -> Self {
        GeneratorConfig::CmnistLike {
            flip_probs: default_flip_probs(),
            group_fractions: default_cmnist_fractions(),
            core_snr: default_core_snr(),
            spurious_snr: default_spurious_snr(),
            dim: default_cmnist_dim(),
        }
    }

    pub fn adult_default() -> Self {
        GeneratorConfig::AdultLike {
            pos_rates: default_pos_rates(),
            group_fractions: default_adult_fractions(),
            dim: default_adult_dim(),
        }
    }

    pub fn num_groups(&self) -> usize {
        match self {
            GeneratorConfig::CmnistLike { group_fractions, .. }
            | GeneratorConfig::AdultLike { group_fractions, .. } => group_fractions.len(),
        }
    }

    pub fn generate(&self, n: usize, seed: u64, split: Split) -> Result<GroupedDataset, DataError> {
        match self {
            GeneratorConfig::CmnistLike {
                flip_probs,
                group_fractions,
                core_snr,
                spurious_snr,
                dim,
            } => gen_cmnist_like(n, flip_probs, group_fractions, *core_snr, *spurious_snr, *dim, seed, split),
            GeneratorConfig::AdultLike {
                pos_rates,
                group_fractions,
                dim,
            } => gen_adult_like(n, pos_rates, group_fractions, *dim, seed, split),
        }
    }
}

/// Generator settings plus split sizes, labeled fraction and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(flatten)]
    pub generator: GeneratorConfig,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_eval")]
    pub n_val: usize,
    #[serde(default = "default_n_eval")]
    pub n_test: usize,
    #[serde(default = "default_labeled_fraction")]
    pub labeled_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::cmnist_default(),
            n_train: default_n_train(),
            n_val: default_n_eval(),
            n_test: default_n_eval(),
            labeled_fraction: default_labeled_fraction(),
            seed: 0,
        }
    }
}

/// Train (fully labeled, before masking), validation and test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: GroupedDataset,
    pub val: GroupedDataset,
    pub test: GroupedDataset,
}

impl DataConfig {
    /// Generate all three splits; the train split is left unmasked.
    pub fn generate_unmasked(&self) -> Result<Splits, DataError> {
        let g = &self.generator;
        Ok(Splits {
            train: g.generate(self.n_train, derive_seed(self.seed, "data/train"), Split::Train)?,
            val: g.generate(self.n_val, derive_seed(self.seed, "data/val"), Split::Val)?,
            test: g.generate(self.n_test, derive_seed(self.seed, "data/test"), Split::Test)?,
        })
    }

    /// Generate all splits and MCAR-mask the train split.
    pub fn generate(&self) -> Result<Splits, DataError> {
        let mut s = self.generate_unmasked()?;
        s.train = mask_mcar(&s.train, self.labeled_fraction, derive_seed(self.seed, "data/mask"))?;
        Ok(s)
    }
}

/// Path of the `.truth` sibling for a dataset file.
pub fn truth_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".truth");
    PathBuf::from(s)
}

pub fn write_dataset(ds: &GroupedDataset, path: &Path) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let d = ds.dim();
    let mut header: Vec<String> = (0..d).map(|k| format!("f{k}")).collect();
    header.push("y".into());
    header.push("g".into());
    w.write_record(&header)?;
    let mut rec: Vec<String> = Vec::with_capacity(d + 2);
    for i in 0..ds.len() {
        rec.clear();
        rec.extend(ds.features.row(i).iter().map(|v| v.to_string()));
        rec.push(ds.labels[i].to_string());
        rec.push(ds.groups[i].map_or("-1".to_string(), |g| g.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut t = BufWriter::new(File::create(truth_path(path))?);
    writeln!(t, "g")?;
    for g in &ds.true_groups {
        writeln!(t, "{g}")?;
    }
    t.flush()?;
    Ok(())
}

/// Read a dataset file and its `.truth` sibling. `num_groups` defaults to
/// one past the largest true group present.
pub fn read_dataset(path: &Path, split: Split, num_groups: Option<usize>) -> Result<GroupedDataset, DataError> {
    let name = path.display().to_string();
    let bad = |reason: String| DataError::Malformed {
        path: name.clone(),
        reason,
    };
    let mut r = csv::Reader::from_path(path)?;
    let cols = r.headers()?.len();
    if cols < 3 {
        return Err(bad("need at least one feature column plus y and g".into()));
    }
    let d = cols - 2;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        for k in 0..d {
            data.push(
                rec[k]
                    .parse::<f64>()
                    .map_err(|e| bad(format!("row {line} feature {k}: {e}")))?,
            );
        }
        let y: u8 = rec[d].parse().map_err(|e| bad(format!("row {line} label: {e}")))?;
        let g: i64 = rec[d + 1].parse().map_err(|e| bad(format!("row {line} group: {e}")))?;
        labels.push(y);
        groups.push(match g {
            -1 => None,
            g if g >= 0 => Some(g as usize),
            g => return Err(bad(format!("row {line} has group {g}"))),
        });
    }
    let mut t = csv::Reader::from_path(truth_path(path))?;
    let mut true_groups = Vec::with_capacity(labels.len());
    for (line, rec) in t.records().enumerate() {
        let rec = rec?;
        true_groups.push(
            rec[0]
                .parse::<usize>()
                .map_err(|e| bad(format!("truth row {line}: {e}")))?,
        );
    }
    if true_groups.len() != labels.len() {
        return Err(bad(format!(
            "{} truth rows for {} samples",
            true_groups.len(),
            labels.len()
        )));
    }
    let n = labels.len();
    let num_groups = num_groups.unwrap_or_else(|| true_groups.iter().max().map_or(0, |g| g + 1));
    let ds = GroupedDataset {
        split,
        features: Matrix::from_vec(n, d, data).ok_or_else(|| bad("ragged rows".into()))?,
        labels,
        groups,
        true_groups,
        num_groups,
    };
    ds.validate().map_err(|e| bad(e.to_string()))?;
    Ok(ds)
}

/// Counts summary with the columns of a dataset description table.
pub fn counts_table(name: &str, ds: &GroupedDataset) -> String {
    let counts = ds.group_counts();
    let labeled = ds.labeled_count();
    format!(
        "{:<12} {:>10} {:>12} {:>14} {:>9} {:>12} {:>12}\n{:<12} {:>10} {:>12} {:>14} {:>9} {:>12} {:>12}\n",
        "Dataset",
        "# Labeled",
        "# UnLabeled",
        "Total samples",
        "# Groups",
        "# Minority",
        "# Majority",
        name,
        labeled,
        ds.len() - labeled,
        ds.len(),
        ds.num_groups,
        counts.iter().min().copied().unwrap_or(0),
        counts.iter().max().copied().unwrap_or(0),
    )
}
