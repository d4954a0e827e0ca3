//! Dataset loading, normalization, synthesis, and the labeled/noisy split
//! protocol used by every experiment.
//!
//! Class labels are re-encoded to contiguous ids `0..c` in first-appearance
//! order; the original label tokens are kept in [`Dataset::class_names`].

use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A numeric feature matrix with ground-truth class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    true_labels: Vec<usize>,
    class_names: Vec<String>,
}

impl Dataset {
    /// Build a dataset from raw parts, validating the invariants: n >= 2,
    /// c >= 2, labels contiguous with every class present, features finite.
    pub fn new(features: Array2<f64>, true_labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let n = features.nrows();
        if n < 2 {
            return Err(Error::TooFewSamples(n));
        }
        if true_labels.len() != n {
            return Err(Error::InvalidSplit(format!(
                "{} labels for {} rows",
                true_labels.len(),
                n
            )));
        }
        let c = class_names.len();
        if c < 2 {
            return Err(Error::TooFewClasses(c));
        }
        let mut seen = vec![false; c];
        for &y in &true_labels {
            if y >= c {
                return Err(Error::InvalidSplit(format!("label id {y} out of range 0..{c}")));
            }
            seen[y] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::ClassWithoutParticle(missing));
        }
        for ((row, col), &v) in features.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFiniteFeature { row, col });
            }
        }
        Ok(Self { features, true_labels, class_names })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn m(&self) -> usize {
        self.features.ncols()
    }

    pub fn c(&self) -> usize {
        self.class_names.len()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn true_labels(&self) -> &[usize] {
        &self.true_labels
    }

    pub fn true_label(&self, i: usize) -> usize {
        self.true_labels[i]
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Squared Euclidean distance between rows `i` and `j`.
    pub fn sq_distance(&self, i: usize, j: usize) -> f64 {
        let a = self.features.row(i);
        let b = self.features.row(j);
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
    }

    /// Z-score normalization: every column is shifted to sample mean 0 and
    /// scaled to sample standard deviation 1 (n-1 denominator). Columns with
    /// zero variance become all-zero.
    pub fn zscore_normalize(&self) -> Result<Dataset> {
        let n = self.n();
        if n < 2 {
            return Err(Error::TooFewSamples(n));
        }
        let mut features = self.features.clone();
        for mut col in features.columns_mut() {
            let mean = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
            let std = var.sqrt();
            if std < 1e-12 {
                col.fill(0.0);
            } else {
                col.mapv_inplace(|v| (v - mean) / std);
            }
        }
        Ok(Dataset {
            features,
            true_labels: self.true_labels.clone(),
            class_names: self.class_names.clone(),
        })
    }
}

/// Selects which CSV column holds the class label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

impl std::str::FromStr for LabelColumn {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.parse::<usize>() {
            Ok(i) => LabelColumn::Index(i),
            Err(_) => LabelColumn::Name(s.to_string()),
        })
    }
}

/// Load a comma-separated file with one sample per row. The header row is
/// optional: selecting the label column by name requires one, while with an
/// index the first row is treated as a header iff any feature cell in it
/// fails to parse as a number.
pub fn load_csv(path: &Path, label: &LabelColumn) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let records: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>()?;
    if records.is_empty() {
        return Err(Error::TooFewSamples(0));
    }

    let width = records[0].len();
    let (label_idx, data_start) = match label {
        LabelColumn::Name(name) => {
            let idx = records[0]
                .iter()
                .position(|cell| cell == name)
                .ok_or_else(|| Error::LabelColumnNotFound(name.clone()))?;
            (idx, 1)
        }
        LabelColumn::Index(idx) => {
            if *idx >= width {
                return Err(Error::LabelColumnNotFound(idx.to_string()));
            }
            let first_is_header = records[0]
                .iter()
                .enumerate()
                .any(|(col, cell)| col != *idx && cell.parse::<f64>().is_err());
            (*idx, usize::from(first_is_header))
        }
    };

    let n = records.len() - data_start;
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let m = width - 1;
    let mut features = Array2::zeros((n, m));
    let mut true_labels = Vec::with_capacity(n);
    let mut class_names: Vec<String> = Vec::new();

    for (r, record) in records[data_start..].iter().enumerate() {
        let mut f = 0;
        for (col, cell) in record.iter().enumerate() {
            if col == label_idx {
                let id = match class_names.iter().position(|k| k == cell) {
                    Some(id) => id,
                    None => {
                        class_names.push(cell.to_string());
                        class_names.len() - 1
                    }
                };
                true_labels.push(id);
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::NonNumericCell {
                    row: r + data_start,
                    col,
                    value: cell.to_string(),
                })?;
                if !v.is_finite() {
                    return Err(Error::NonFiniteFeature { row: r + data_start, col });
                }
                features[(r, f)] = v;
                f += 1;
            }
        }
    }

    Dataset::new(features, true_labels, class_names)
}

/// Synthesize `c` isotropic unit-variance Gaussian classes whose means sit on
/// distinct corners of a hypercube with edge length `spacing`.
pub fn gen_gaussians(
    n_per_class: usize,
    c: usize,
    dims: usize,
    spacing: f64,
    rng: &mut impl Rng,
) -> Result<Dataset> {
    if c < 2 {
        return Err(Error::TooFewClasses(c));
    }
    if dims == 0 || (dims < usize::BITS as usize && c > (1usize << dims)) {
        return Err(Error::TooManyClassesForCorners { c, dims });
    }
    if n_per_class == 0 {
        return Err(Error::TooFewSamples(0));
    }
    let n = n_per_class * c;
    let mut features = Array2::zeros((n, dims));
    let mut true_labels = Vec::with_capacity(n);
    let normal = StandardNormal;
    for class in 0..c {
        for s in 0..n_per_class {
            let row = class * n_per_class + s;
            for d in 0..dims {
                let corner = ((class >> d) & 1) as f64 * spacing;
                features[(row, d)] = corner + <StandardNormal as Distribution<f64>>::sample(&normal, rng);
            }
            true_labels.push(class);
        }
    }
    let class_names = (0..c).map(|k| format!("class_{k}")).collect();
    Dataset::new(features, true_labels, class_names)
}

/// The labeled subset and its (possibly noise-corrupted) given labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelConfig {
    labeled: Vec<bool>,
    given: Vec<Option<usize>>,
    noisy: Vec<bool>,
}

impl LabelConfig {
    /// Assemble a config from raw masks. Checks structural invariants only
    /// (shapes, noisy within labeled, given present exactly on the mask);
    /// agreement with ground truth is validated by [`SplitFile::into_config`].
    pub fn from_parts(
        labeled: Vec<bool>,
        given: Vec<Option<usize>>,
        noisy: Vec<bool>,
    ) -> Result<LabelConfig> {
        let n = labeled.len();
        if given.len() != n || noisy.len() != n {
            return Err(Error::InvalidSplit("mask lengths differ".into()));
        }
        for i in 0..n {
            if given[i].is_some() != labeled[i] {
                return Err(Error::InvalidSplit(format!(
                    "node {i}: given label present but mask says {}",
                    labeled[i]
                )));
            }
            if noisy[i] && !labeled[i] {
                return Err(Error::InvalidSplit(format!("node {i}: noisy but unlabeled")));
            }
        }
        Ok(LabelConfig { labeled, given, noisy })
    }

    pub fn n(&self) -> usize {
        self.labeled.len()
    }

    /// Number of labeled samples (`l`).
    pub fn l(&self) -> usize {
        self.labeled.iter().filter(|&&b| b).count()
    }

    /// Number of noise-corrupted samples (`q`).
    pub fn q(&self) -> usize {
        self.noisy.iter().filter(|&&b| b).count()
    }

    pub fn is_labeled(&self, i: usize) -> bool {
        self.labeled[i]
    }

    pub fn is_noisy(&self, i: usize) -> bool {
        self.noisy[i]
    }

    /// The given label of node `i`, or `None` when unlabeled.
    pub fn given(&self, i: usize) -> Option<usize> {
        self.given[i]
    }

    /// Indices of labeled samples in ascending order.
    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.labeled[i]).collect()
    }

    /// Indices of noisy samples in ascending order.
    pub fn noisy_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.noisy[i]).collect()
    }
}

/// Draw `l` labeled samples uniformly without replacement, resampling until
/// every class has at least one labeled representative. Given labels start
/// equal to the true labels; no noise is applied here.
pub fn sample_labeled_subset(d: &Dataset, l: usize, rng: &mut impl Rng) -> Result<LabelConfig> {
    let (n, c) = (d.n(), d.c());
    if l < c || l > n {
        return Err(Error::LabeledCountRange { l, c, n });
    }
    const MAX_ATTEMPTS: usize = 1_000_000;
    for attempt in 0..MAX_ATTEMPTS {
        let picks = rand::seq::index::sample(rng, n, l);
        let mut covered = vec![false; c];
        for i in picks.iter() {
            covered[d.true_label(i)] = true;
        }
        if covered.iter().all(|&b| b) {
            let mut labeled = vec![false; n];
            let mut given = vec![None; n];
            for i in picks.iter() {
                labeled[i] = true;
                given[i] = Some(d.true_label(i));
            }
            return Ok(LabelConfig { labeled, given, noisy: vec![false; n] });
        }
        if attempt + 1 == MAX_ATTEMPTS {
            break;
        }
    }
    Err(Error::ClassCoverageUnreachable { l, attempts: MAX_ATTEMPTS })
}

/// Corrupt `q` labeled entries chosen uniformly without replacement: each gets
/// a given label drawn uniformly from the `c - 1` other classes and is marked
/// in the noisy mask. The input must not already carry noise.
pub fn inject_label_noise(
    cfg: &LabelConfig,
    q: usize,
    c: usize,
    rng: &mut impl Rng,
) -> Result<LabelConfig> {
    if cfg.q() != 0 {
        return Err(Error::NoiseAlreadyPresent);
    }
    let labeled = cfg.labeled_indices();
    let l = labeled.len();
    if q > l {
        return Err(Error::NoiseExceedsLabeled { q, l });
    }
    let mut out = cfg.clone();
    if q == 0 {
        return Ok(out);
    }
    let picks = rand::seq::index::sample(rng, l, q);
    for slot in picks.iter() {
        let i = labeled[slot];
        let current = out.given[i].expect("labeled entry has a given label");
        let draw = rng.random_range(0..c - 1);
        let corrupted = if draw >= current { draw + 1 } else { draw };
        out.given[i] = Some(corrupted);
        out.noisy[i] = true;
    }
    Ok(out)
}

/// Serializable form of a [`LabelConfig`], used to persist a split and replay
/// it later (or to feed externally defined labeled subsets).
///
/// `given` holds one class id per entry of `labeled` (same order); when
/// omitted, the true labels are used and `noisy` must be empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub n: usize,
    pub labeled: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub given: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub noisy: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl SplitFile {
    pub fn from_config(cfg: &LabelConfig, seed: Option<u64>) -> Self {
        let labeled = cfg.labeled_indices();
        let given = labeled.iter().map(|&i| cfg.given[i].unwrap()).collect();
        SplitFile { n: cfg.n(), labeled, given: Some(given), noisy: cfg.noisy_indices(), seed }
    }

    /// Reconstruct a [`LabelConfig`], validating every invariant against the
    /// dataset: indices in range and unique, noisy subset of labeled, given
    /// labels differing from the truth exactly on the noisy set.
    pub fn into_config(&self, d: &Dataset) -> Result<LabelConfig> {
        if self.n != d.n() {
            return Err(Error::InvalidSplit(format!(
                "split is for n = {}, dataset has n = {}",
                self.n,
                d.n()
            )));
        }
        let n = d.n();
        let mut labeled = vec![false; n];
        let mut given: Vec<Option<usize>> = vec![None; n];
        for (slot, &i) in self.labeled.iter().enumerate() {
            if i >= n {
                return Err(Error::InvalidSplit(format!("labeled index {i} out of range")));
            }
            if labeled[i] {
                return Err(Error::InvalidSplit(format!("labeled index {i} repeated")));
            }
            labeled[i] = true;
            let y = match &self.given {
                Some(g) => *g
                    .get(slot)
                    .ok_or_else(|| Error::InvalidSplit("given shorter than labeled".into()))?,
                None => d.true_label(i),
            };
            if y >= d.c() {
                return Err(Error::InvalidSplit(format!("given label {y} out of range")));
            }
            given[i] = Some(y);
        }
        if let Some(g) = &self.given {
            if g.len() != self.labeled.len() {
                return Err(Error::InvalidSplit("given and labeled lengths differ".into()));
            }
        }
        let mut noisy = vec![false; n];
        for &i in &self.noisy {
            if i >= n || !labeled[i] {
                return Err(Error::InvalidSplit(format!("noisy index {i} is not labeled")));
            }
            noisy[i] = true;
        }
        for i in 0..n {
            if labeled[i] {
                let matches_truth = given[i] == Some(d.true_label(i));
                if noisy[i] && matches_truth {
                    return Err(Error::InvalidSplit(format!(
                        "noisy index {i} still carries its true label"
                    )));
                }
                if !noisy[i] && !matches_truth {
                    return Err(Error::InvalidSplit(format!(
                        "labeled index {i} has a wrong label but is not marked noisy"
                    )));
                }
            }
        }
        Ok(LabelConfig { labeled, given, noisy })
    }
}
