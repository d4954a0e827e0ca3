//! Experiment runner: noise sweeps with repeated trials, per-trial parameter
//! tuning by deterministic grid search, and table emission.
//!
//! Seeds are derived hierarchically — master seed, then one stream per
//! (noise fraction, trial), then per purpose (split sampling, noise
//! injection, tuning run, evaluation run) — so no run ever consumes another
//! run's random stream and the whole table is reproducible bit for bit.

use std::cell::RefCell;
use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;
use std::rc::Rc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{lgc_from_sq, lp_from_sq, AffinityConfig};
use crate::dataset::{
    gen_gaussians, inject_label_noise, load_csv, sample_labeled_subset, Dataset, LabelColumn,
    LabelConfig, SplitFile,
};
use crate::engine::{Engine, LabelAssignment, Variant, VariantConfig};
use crate::error::{Error, Result};
use crate::graph::{build_graph_from_sq, Graph, GraphPolicy, SquaredDistances};

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a master seed and a path of indices.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mut state = splitmix64(master);
    for &step in path {
        state = splitmix64(state ^ splitmix64(step));
    }
    state
}

// Purpose tags for the per-trial seed tree.
const SEED_SPLIT: u64 = 1;
const SEED_NOISE: u64 = 2;
const SEED_TUNE: u64 = 3;
const SEED_EVAL: u64 = 4;
const SEED_SYNTH: u64 = 5;

/// A classifier the harness knows how to tune and evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Pcc1,
    Pcc2,
    Pcc3,
    Lnr,
    Lgc,
    Lp,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Lgc, Method::Lp, Method::Pcc1, Method::Pcc2, Method::Pcc3, Method::Lnr];

    pub fn id(self) -> &'static str {
        match self {
            Method::Pcc1 => "pcc1",
            Method::Pcc2 => "pcc2",
            Method::Pcc3 => "pcc3",
            Method::Lnr => "lnr",
            Method::Lgc => "lgc",
            Method::Lp => "lp",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "pcc1" => Ok(Method::Pcc1),
            "pcc2" => Ok(Method::Pcc2),
            "pcc3" => Ok(Method::Pcc3),
            "lnr" | "lnrpcc" => Ok(Method::Lnr),
            "lgc" => Ok(Method::Lgc),
            "lp" => Ok(Method::Lp),
            _ => Err(Error::UnknownMethod(s.to_string())),
        }
    }

    pub fn is_pcc(self) -> bool {
        self.variant().is_some()
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            Method::Pcc1 => Some(Variant::Pcc1),
            Method::Pcc2 => Some(Variant::Pcc2),
            Method::Pcc3 => Some(Variant::Pcc3),
            Method::Lnr => Some(Variant::Lnr),
            _ => None,
        }
    }

    fn graph_policy(self, k: usize) -> Option<GraphPolicy> {
        match self {
            Method::Pcc1 | Method::Pcc2 => Some(GraphPolicy::KnnOr { k }),
            Method::Pcc3 => Some(GraphPolicy::KnnPcc3 { k }),
            Method::Lnr => Some(GraphPolicy::KnnLnr { k }),
            _ => None,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Method> {
        Method::parse(s)
    }
}

/// Which nodes count toward the error rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricMode {
    /// Initially-unlabeled samples only (default: fair to clamping methods).
    #[default]
    Unlabeled,
    /// Every sample, including the labeled (possibly noisy) ones.
    All,
}

/// Engine parameters exposed through the experiment spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineParams {
    pub p_grd: f64,
    pub delta_v: f64,
    pub delta_rho: f64,
    pub alpha: f64,
    pub beta: u32,
    pub max_total_iterations: u64,
    pub monitor_stride: u64,
}

impl Default for EngineParams {
    fn default() -> Self {
        let base = VariantConfig::new(Variant::Lnr);
        EngineParams {
            p_grd: base.p_grd,
            delta_v: base.delta_v,
            delta_rho: base.delta_rho,
            alpha: base.alpha,
            beta: base.beta,
            max_total_iterations: base.max_total_iterations,
            monitor_stride: base.monitor_stride,
        }
    }
}

impl EngineParams {
    pub fn variant_config(&self, variant: Variant) -> VariantConfig {
        VariantConfig {
            variant,
            p_grd: self.p_grd,
            delta_v: self.delta_v,
            delta_rho: self.delta_rho,
            alpha: self.alpha,
            beta: self.beta,
            max_total_iterations: self.max_total_iterations,
            monitor_stride: self.monitor_stride,
        }
    }
}

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Csv { path: PathBuf, label_column: LabelColumn },
    Synthetic { classes: usize, per_class: usize, dims: usize, spacing: f64 },
}

/// Full description of one benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub source: DatasetSource,
    pub methods: Vec<Method>,
    /// Labeled subset size `l`.
    pub labeled: usize,
    /// Noise levels as fractions `q / l` in `[0, 1]`.
    pub noise_fractions: Vec<f64>,
    /// Independent (labeled subset, noise subset) draws per noise level.
    pub trials: usize,
    /// Stochastic evaluation runs per trial for the particle methods.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Stochastic runs averaged per grid candidate while tuning.
    #[serde(default = "default_tune_repeats")]
    pub tune_repeats: usize,
    #[serde(default = "default_k_grid")]
    pub k_grid: Vec<usize>,
    #[serde(default = "default_sigma_grid")]
    pub sigma_grid: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub metric: MetricMode,
    #[serde(default = "default_true")]
    pub normalize: bool,
    #[serde(default)]
    pub engine: EngineParams,
    /// Externally supplied labeled subsets (one JSON split file per trial);
    /// when non-empty, `trials` must equal the number of files.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub splits: Vec<PathBuf>,
    /// Write a movement trace of the first evaluation run of the first
    /// particle method (first fraction, first trial) to this path.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
}

fn default_repeats() -> usize {
    20
}

fn default_tune_repeats() -> usize {
    1
}

fn default_true() -> bool {
    true
}

/// k in {3, 5, ..., 25}.
pub fn default_k_grid() -> Vec<usize> {
    (3..=25).step_by(2).collect()
}

/// 13 sigma values log-spaced over [1e-2, 1e1].
pub fn default_sigma_grid() -> Vec<f64> {
    (0..13).map(|i| 10f64.powf(-2.0 + 0.25 * i as f64)).collect()
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::InvalidSpec("no methods listed".into()));
        }
        let mut seen = Vec::new();
        for m in &self.methods {
            if seen.contains(m) {
                return Err(Error::InvalidSpec(format!("method {} listed twice", m.id())));
            }
            seen.push(*m);
        }
        if self.noise_fractions.is_empty() {
            return Err(Error::InvalidSpec("no noise fractions".into()));
        }
        for &f in &self.noise_fractions {
            if !(0.0..=1.0).contains(&f) || !f.is_finite() {
                return Err(Error::InvalidSpec(format!("noise fraction {f} outside [0, 1]")));
            }
        }
        if self.trials == 0 {
            return Err(Error::InvalidSpec("trials must be >= 1".into()));
        }
        if !self.splits.is_empty() && self.splits.len() != self.trials {
            return Err(Error::InvalidSpec(format!(
                "{} split files for {} trials",
                self.splits.len(),
                self.trials
            )));
        }
        if self.repeats == 0 || self.tune_repeats == 0 {
            return Err(Error::InvalidSpec("repeats and tune_repeats must be >= 1".into()));
        }
        if self.methods.iter().any(|m| m.is_pcc()) && self.k_grid.is_empty() {
            return Err(Error::EmptyGrid("k"));
        }
        if self.methods.iter().any(|m| !m.is_pcc()) && self.sigma_grid.is_empty() {
            return Err(Error::EmptyGrid("sigma"));
        }
        Ok(())
    }

    /// Load (or synthesize) the dataset, applying z-score normalization
    /// unless disabled.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let d = match &self.source {
            DatasetSource::Csv { path, label_column } => load_csv(path, label_column)?,
            DatasetSource::Synthetic { classes, per_class, dims, spacing } => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[SEED_SYNTH]));
                gen_gaussians(*per_class, *classes, *dims, *spacing, &mut rng)?
            }
        };
        if self.normalize {
            d.zscore_normalize()
        } else {
            Ok(d)
        }
    }
}

/// Aggregated outcome for one (method, key) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    /// Either the noise fraction q/l or the swept beta value.
    pub key: f64,
    pub mean_error: f64,
    pub std_dev: f64,
    pub trials: usize,
    /// Scored runs behind the mean (trials x repeats for particle methods).
    pub executions: usize,
    /// Tuned parameter per trial (k or sigma).
    pub tuned_params: Vec<f64>,
    pub mean_iterations: f64,
    /// Wall-clock milliseconds per scored run; excluded from equality.
    pub mean_wall_ms: f64,
    /// Error over the noisy subset only (particle methods that relabel).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relabeling_error: Option<f64>,
}

impl PartialEq for ResultRow {
    fn eq(&self, other: &Self) -> bool {
        self.method == other.method
            && self.key == other.key
            && self.mean_error == other.mean_error
            && self.std_dev == other.std_dev
            && self.trials == other.trials
            && self.executions == other.executions
            && self.tuned_params == other.tuned_params
            && self.mean_iterations == other.mean_iterations
            && self.relabeling_error == other.relabeling_error
    }
}

/// Result matrix keyed by (method, noise fraction) or (method, beta).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    /// Name of the key column: `q_size` for noise sweeps, `beta` for sweeps.
    pub key_column: String,
    /// Method column order.
    pub methods: Vec<String>,
    /// Chance-level error for reference: (c - 1) / c.
    pub chance_error: f64,
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn row(&self, method: Method, key: f64) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.method == method.id() && r.key == key)
    }

    /// Wide CSV: key column first, then one mean-error column per method.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::EmptyTable);
        }
        write!(w, "{}", self.key_column)?;
        for m in &self.methods {
            write!(w, ",{m}")?;
        }
        writeln!(w)?;
        let mut keys: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !keys.contains(&r.key) {
                keys.push(r.key);
            }
        }
        for key in keys {
            write!(w, "{}", fmt_key(key))?;
            for m in &self.methods {
                match self.rows.iter().find(|r| &r.method == m && r.key == key) {
                    Some(r) => write!(w, ",{:.6}", r.mean_error)?,
                    None => write!(w, ",")?,
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn read_json(text: &str) -> Result<ResultTable> {
        Ok(serde_json::from_str(text)?)
    }
}

fn fmt_key(key: f64) -> String {
    if key.fract() == 0.0 && key.abs() < 1e9 {
        format!("{}", key as i64)
    } else {
        format!("{key:.2}")
    }
}

/// Per-trial working set shared by tuning and evaluation: the dataset, its
/// distance matrix, the noisy label config, and a graph cache keyed by
/// construction policy.
pub struct TrialContext<'a> {
    pub dataset: &'a Dataset,
    pub sq: &'a SquaredDistances,
    pub cfg: &'a LabelConfig,
    pub engine: &'a EngineParams,
    pub metric: MetricMode,
    graphs: RefCell<HashMap<(u8, usize), Rc<Graph>>>,
}

/// Outcome of a single scored run.
struct RunStats {
    error: f64,
    relabel_error: Option<f64>,
    iterations: u64,
    wall_ms: f64,
}

impl<'a> TrialContext<'a> {
    pub fn new(
        dataset: &'a Dataset,
        sq: &'a SquaredDistances,
        cfg: &'a LabelConfig,
        engine: &'a EngineParams,
        metric: MetricMode,
    ) -> Self {
        TrialContext { dataset, sq, cfg, engine, metric, graphs: RefCell::new(HashMap::new()) }
    }

    fn graph_for(&self, method: Method, k: usize) -> Result<Rc<Graph>> {
        let policy = method.graph_policy(k).expect("particle method");
        let cache_key = (
            match policy {
                GraphPolicy::KnnOr { .. } => 0u8,
                GraphPolicy::KnnPcc3 { .. } => 1,
                GraphPolicy::KnnLnr { .. } => 2,
                GraphPolicy::Epsilon { .. } => 3,
            },
            k,
        );
        if let Some(g) = self.graphs.borrow().get(&cache_key) {
            return Ok(Rc::clone(g));
        }
        let g = Rc::new(build_graph_from_sq(self.sq, self.cfg, &policy)?);
        self.graphs.borrow_mut().insert(cache_key, Rc::clone(&g));
        Ok(g)
    }

    fn score(&self, assignment: &LabelAssignment, method: Method) -> (f64, Option<f64>) {
        let truth = self.dataset.true_labels();
        let mut wrong = 0usize;
        let mut total = 0usize;
        for i in 0..self.dataset.n() {
            let counted = match self.metric {
                MetricMode::All => true,
                MetricMode::Unlabeled => !self.cfg.is_labeled(i),
            };
            if counted {
                total += 1;
                if assignment.labels[i] != truth[i] {
                    wrong += 1;
                }
            }
        }
        let error = wrong as f64 / total.max(1) as f64;

        let relabel = if matches!(method, Method::Pcc3 | Method::Lnr) && self.cfg.q() > 0 {
            let noisy = self.cfg.noisy_indices();
            let missed = noisy.iter().filter(|&&i| assignment.labels[i] != truth[i]).count();
            Some(missed as f64 / noisy.len() as f64)
        } else {
            None
        };
        (error, relabel)
    }

    /// Run one classifier once with the given tuned parameter and seed.
    fn run_once(
        &self,
        method: Method,
        param: f64,
        seed: u64,
        trace: Option<Box<dyn Write + Send>>,
    ) -> Result<RunStats> {
        let start = Instant::now();
        let assignment = match method {
            Method::Lgc => {
                lgc_from_sq(self.sq, self.dataset.c(), self.cfg, &AffinityConfig::with_sigma(param))?
            }
            Method::Lp => {
                lp_from_sq(self.sq, self.dataset.c(), self.cfg, &AffinityConfig::with_sigma(param))?
            }
            _ => {
                let k = param as usize;
                let graph = self.graph_for(method, k)?;
                let vc = self.engine.variant_config(method.variant().expect("pcc method"));
                let mut eng = Engine::new(&graph, self.cfg, self.dataset.c(), vc, seed)?
                    .with_dataset(self.dataset);
                if let Some(w) = trace {
                    eng = eng.with_trace(w);
                }
                eng.run_to_completion()
            }
        };
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let (error, relabel_error) = self.score(&assignment, method);
        Ok(RunStats { error, relabel_error, iterations: assignment.iterations, wall_ms })
    }
}

/// Evaluate every candidate parameter on the trial's split and return the
/// error-minimizing one with its tuning error; ties go to the smallest
/// candidate. Particle methods average `tune_repeats` stochastic runs per
/// candidate; the diffusion baselines are deterministic, one run each.
pub fn grid_search(
    method: Method,
    candidates: &[f64],
    ctx: &TrialContext,
    tune_repeats: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if candidates.is_empty() {
        return Err(Error::EmptyGrid(if method.is_pcc() { "k" } else { "sigma" }));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite grid"));
    sorted.dedup();

    let mut best: Option<(f64, f64)> = None;
    for (cand_idx, &cand) in sorted.iter().enumerate() {
        let runs = if method.is_pcc() { tune_repeats } else { 1 };
        let mut total = 0.0;
        for rep in 0..runs {
            let run_seed = derive_seed(seed, &[cand_idx as u64, rep as u64]);
            total += ctx.run_once(method, cand, run_seed, None)?.error;
        }
        let mean = total / runs as f64;
        if best.map_or(true, |(_, err)| mean < err) {
            best = Some((cand, mean));
        }
    }
    Ok(best.expect("non-empty grid"))
}

/// Per-(fraction, trial, method) aggregation input.
struct MethodOutcome {
    method: Method,
    tuned: f64,
    errors: Vec<f64>,
    relabel: Vec<f64>,
    iterations: Vec<u64>,
    wall_ms: Vec<f64>,
}

fn run_trial(
    dataset: &Dataset,
    sq: &SquaredDistances,
    spec: &ExperimentSpec,
    external: &[LabelConfig],
    fraction_idx: usize,
    trial: usize,
    beta_override: Option<u32>,
) -> Result<Vec<MethodOutcome>> {
    let fraction = spec.noise_fractions[fraction_idx];
    let base = derive_seed(spec.seed, &[fraction_idx as u64, trial as u64]);

    let clean = if external.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base, &[SEED_SPLIT]));
        sample_labeled_subset(dataset, spec.labeled, &mut rng)?
    } else {
        external[trial].clone()
    };
    let q = (fraction * clean.l() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base, &[SEED_NOISE]));
    let cfg = inject_label_noise(&clean, q, dataset.c(), &mut rng)?;

    let mut engine = spec.engine.clone();
    if let Some(beta) = beta_override {
        engine.beta = beta;
    }
    let ctx = TrialContext::new(dataset, sq, &cfg, &engine, spec.metric);

    let mut outcomes = Vec::with_capacity(spec.methods.len());
    for (m_idx, &method) in spec.methods.iter().enumerate() {
        let candidates: Vec<f64> = if method.is_pcc() {
            spec.k_grid.iter().map(|&k| k as f64).collect()
        } else {
            spec.sigma_grid.clone()
        };
        let tune_seed = derive_seed(base, &[SEED_TUNE, m_idx as u64]);
        let (tuned, _tuning_error) =
            grid_search(method, &candidates, &ctx, spec.tune_repeats, tune_seed)?;

        // Particle methods: the tuning scores are discarded and the tuned
        // parameter is re-evaluated on fresh seeded runs. The deterministic
        // baselines keep the tuned run itself.
        let repeats = if method.is_pcc() { spec.repeats } else { 1 };
        let mut outcome = MethodOutcome {
            method,
            tuned,
            errors: Vec::with_capacity(repeats),
            relabel: Vec::new(),
            iterations: Vec::with_capacity(repeats),
            wall_ms: Vec::with_capacity(repeats),
        };
        for rep in 0..repeats {
            let run_seed = derive_seed(base, &[SEED_EVAL, m_idx as u64, rep as u64]);
            let stats = ctx.run_once(method, tuned, run_seed, None)?;
            outcome.errors.push(stats.error);
            if let Some(r) = stats.relabel_error {
                outcome.relabel.push(r);
            }
            outcome.iterations.push(stats.iterations);
            outcome.wall_ms.push(stats.wall_ms);
        }
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

fn aggregate_rows(
    spec: &ExperimentSpec,
    keys: &[f64],
    cells: Vec<(usize, Vec<MethodOutcome>)>,
) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for (key_idx, &key) in keys.iter().enumerate() {
        for (m_idx, &method) in spec.methods.iter().enumerate() {
            let mut errors = Vec::new();
            let mut relabel = Vec::new();
            let mut iterations = Vec::new();
            let mut wall = Vec::new();
            let mut tuned = Vec::new();
            let mut trials = 0;
            for (cell_key, outcomes) in &cells {
                if *cell_key != key_idx {
                    continue;
                }
                let o = &outcomes[m_idx];
                debug_assert_eq!(o.method, method);
                errors.extend_from_slice(&o.errors);
                relabel.extend_from_slice(&o.relabel);
                iterations.extend(o.iterations.iter().map(|&v| v as f64));
                wall.extend_from_slice(&o.wall_ms);
                tuned.push(o.tuned);
                trials += 1;
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
            let mean_error = mean(&errors);
            let std_dev = if errors.len() > 1 {
                let m = mean_error;
                (errors.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / (errors.len() - 1) as f64)
                    .sqrt()
            } else {
                0.0
            };
            rows.push(ResultRow {
                method: method.id().to_string(),
                key,
                mean_error,
                std_dev,
                trials,
                executions: errors.len(),
                tuned_params: tuned,
                mean_iterations: mean(&iterations),
                mean_wall_ms: mean(&wall),
                relabeling_error: if relabel.is_empty() { None } else { Some(mean(&relabel)) },
            });
        }
    }
    rows
}

fn load_external_splits(spec: &ExperimentSpec, dataset: &Dataset) -> Result<Vec<LabelConfig>> {
    spec.splits
        .iter()
        .map(|path| {
            let text = std::fs::read_to_string(path)?;
            let split: SplitFile = serde_json::from_str(&text)?;
            split.into_config(dataset)
        })
        .collect()
}

/// Write a movement trace of the first evaluation run of the first particle
/// method. The traced run uses the same derived seed as the corresponding run
/// inside the experiment, so the trace matches the table.
fn write_first_run_trace(
    spec: &ExperimentSpec,
    dataset: &Dataset,
    sq: &SquaredDistances,
    external: &[LabelConfig],
    path: &std::path::Path,
) -> Result<()> {
    let Some((m_idx, &method)) = spec.methods.iter().enumerate().find(|(_, m)| m.is_pcc()) else {
        return Ok(());
    };
    let base = derive_seed(spec.seed, &[0, 0]);
    let clean = if external.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base, &[SEED_SPLIT]));
        sample_labeled_subset(dataset, spec.labeled, &mut rng)?
    } else {
        external[0].clone()
    };
    let q = (spec.noise_fractions[0] * clean.l() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base, &[SEED_NOISE]));
    let cfg = inject_label_noise(&clean, q, dataset.c(), &mut rng)?;
    let ctx = TrialContext::new(dataset, sq, &cfg, &spec.engine, spec.metric);

    let candidates: Vec<f64> = spec.k_grid.iter().map(|&k| k as f64).collect();
    let tune_seed = derive_seed(base, &[SEED_TUNE, m_idx as u64]);
    let (tuned, _) = grid_search(method, &candidates, &ctx, spec.tune_repeats, tune_seed)?;
    let run_seed = derive_seed(base, &[SEED_EVAL, m_idx as u64, 0]);
    let writer = std::io::BufWriter::new(std::fs::File::create(path)?);
    ctx.run_once(method, tuned, run_seed, Some(Box::new(writer)))?;
    Ok(())
}

/// Run the full protocol: for every noise fraction and trial, sample a
/// labeled subset, inject noise, tune each method by grid search, evaluate,
/// and aggregate into a table keyed by q/l. Trials run on the rayon pool;
/// aggregation folds them in deterministic order.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ResultTable> {
    spec.validate()?;
    let dataset = spec.load_dataset()?;
    let sq = SquaredDistances::compute(&dataset)?;
    let external = load_external_splits(spec, &dataset)?;

    if let Some(path) = &spec.trace {
        write_first_run_trace(spec, &dataset, &sq, &external, path)?;
    }

    let jobs: Vec<(usize, usize)> = (0..spec.noise_fractions.len())
        .flat_map(|f| (0..spec.trials).map(move |t| (f, t)))
        .collect();
    let cells: Vec<(usize, Vec<MethodOutcome>)> = jobs
        .par_iter()
        .map(|&(f_idx, trial)| {
            run_trial(&dataset, &sq, spec, &external, f_idx, trial, None)
                .map(|outcomes| (f_idx, outcomes))
        })
        .collect::<Result<_>>()?;

    Ok(ResultTable {
        key_column: "q_size".to_string(),
        methods: spec.methods.iter().map(|m| m.id().to_string()).collect(),
        chance_error: (dataset.c() - 1) as f64 / dataset.c() as f64,
        rows: aggregate_rows(spec, &spec.noise_fractions, cells),
    })
}

/// Sweep the reset count of the label-noise-robust variant at a fixed noise
/// fraction: one row per beta value.
pub fn beta_sweep(spec: &ExperimentSpec, betas: &[u32]) -> Result<ResultTable> {
    spec.validate()?;
    if spec.methods != [Method::Lnr] {
        return Err(Error::InvalidSpec("beta sweep requires methods = [lnr]".into()));
    }
    if spec.noise_fractions.len() != 1 {
        return Err(Error::InvalidSpec("beta sweep uses exactly one noise fraction".into()));
    }
    if betas.is_empty() {
        return Err(Error::EmptyGrid("beta"));
    }
    let dataset = spec.load_dataset()?;
    let sq = SquaredDistances::compute(&dataset)?;
    let external = load_external_splits(spec, &dataset)?;

    let jobs: Vec<(usize, usize)> = (0..betas.len())
        .flat_map(|b| (0..spec.trials).map(move |t| (b, t)))
        .collect();
    let cells: Vec<(usize, Vec<MethodOutcome>)> = jobs
        .par_iter()
        .map(|&(b_idx, trial)| {
            run_trial(&dataset, &sq, spec, &external, 0, trial, Some(betas[b_idx]))
                .map(|outcomes| (b_idx, outcomes))
        })
        .collect::<Result<_>>()?;

    let keys: Vec<f64> = betas.iter().map(|&b| b as f64).collect();
    Ok(ResultTable {
        key_column: "beta".to_string(),
        methods: vec![Method::Lnr.id().to_string()],
        chance_error: (dataset.c() - 1) as f64 / dataset.c() as f64,
        rows: aggregate_rows(spec, &keys, cells),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable_spec(methods: Vec<Method>) -> ExperimentSpec {
        ExperimentSpec {
            source: DatasetSource::Synthetic { classes: 2, per_class: 30, dims: 2, spacing: 12.0 },
            methods,
            labeled: 8,
            noise_fractions: vec![0.0],
            trials: 1,
            repeats: 2,
            tune_repeats: 1,
            k_grid: vec![3, 5],
            sigma_grid: vec![0.5, 1.0],
            seed: 4242,
            metric: MetricMode::Unlabeled,
            normalize: true,
            engine: EngineParams::default(),
            splits: vec![],
            trace: None,
        }
    }

    #[test]
    fn seed_derivation_is_stable_and_branchy() {
        let a = derive_seed(42, &[0, 1]);
        let b = derive_seed(42, &[0, 1]);
        let c = derive_seed(42, &[1, 0]);
        let d = derive_seed(43, &[0, 1]);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn method_parsing_and_ids() {
        assert_eq!(Method::parse("PCC-1").unwrap(), Method::Pcc1);
        assert_eq!(Method::parse("lnr-pcc").unwrap(), Method::Lnr);
        assert_eq!(Method::parse("lgc").unwrap(), Method::Lgc);
        assert!(Method::parse("svm").is_err());
        for m in Method::ALL {
            assert_eq!(Method::parse(m.id()).unwrap(), m);
        }
    }

    #[test]
    fn separable_toy_set_all_methods_zero_error() {
        let spec = separable_spec(vec![
            Method::Lgc,
            Method::Lp,
            Method::Pcc1,
            Method::Pcc2,
            Method::Pcc3,
            Method::Lnr,
        ]);
        let table = run_experiment(&spec).unwrap();
        for row in &table.rows {
            assert_eq!(row.mean_error, 0.0, "{} should separate the blobs", row.method);
            assert_eq!(row.trials, 1);
        }
    }

    #[test]
    fn experiment_is_bit_identical_across_runs() {
        let spec = separable_spec(vec![Method::Pcc1, Method::Lgc]);
        let a = run_experiment(&spec).unwrap();
        let b = run_experiment(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn executions_and_rows_match_protocol() {
        let mut spec = separable_spec(vec![Method::Lnr, Method::Lp]);
        spec.noise_fractions = vec![0.0, 0.25];
        spec.trials = 2;
        spec.repeats = 3;
        let table = run_experiment(&spec).unwrap();
        assert_eq!(table.rows.len(), 4);
        let lnr0 = table.row(Method::Lnr, 0.0).unwrap();
        assert_eq!(lnr0.executions, 6, "2 trials x 3 repeats");
        assert_eq!(lnr0.tuned_params.len(), 2);
        let lp0 = table.row(Method::Lp, 0.0).unwrap();
        assert_eq!(lp0.executions, 2, "deterministic method: one per trial");
        // Relabeling error is reported for the robust variant under noise.
        assert!(table.row(Method::Lnr, 0.25).unwrap().relabeling_error.is_some());
        assert!(table.row(Method::Lnr, 0.0).unwrap().relabeling_error.is_none());
        assert!(table.row(Method::Lp, 0.25).unwrap().relabeling_error.is_none());
    }

    #[test]
    fn grid_search_tie_takes_smallest_candidate() {
        let spec = separable_spec(vec![Method::Pcc1]);
        let dataset = spec.load_dataset().unwrap();
        let sq = SquaredDistances::compute(&dataset).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = sample_labeled_subset(&dataset, 8, &mut rng).unwrap();
        let ctx = TrialContext::new(&dataset, &sq, &cfg, &spec.engine, spec.metric);
        // Fully separated blobs: every moderate sigma classifies perfectly,
        // so the tie must resolve to the smallest candidate even when it is
        // listed last.
        let (tuned, err) = grid_search(Method::Lgc, &[1.0, 0.5, 0.7], &ctx, 1, 99).unwrap();
        assert_eq!(err, 0.0);
        assert_eq!(tuned, 0.5);
        // A single candidate comes back unchanged.
        let (tuned, _) = grid_search(Method::Pcc1, &[5.0], &ctx, 1, 99).unwrap();
        assert_eq!(tuned, 5.0);
    }

    #[test]
    fn grid_search_empty_grid_rejected() {
        let spec = separable_spec(vec![Method::Pcc1]);
        let dataset = spec.load_dataset().unwrap();
        let sq = SquaredDistances::compute(&dataset).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = sample_labeled_subset(&dataset, 8, &mut rng).unwrap();
        let ctx = TrialContext::new(&dataset, &sq, &cfg, &spec.engine, spec.metric);
        assert!(matches!(grid_search(Method::Pcc1, &[], &ctx, 1, 0), Err(Error::EmptyGrid("k"))));
    }

    #[test]
    fn spec_validation_errors() {
        let mut spec = separable_spec(vec![]);
        assert!(spec.validate().is_err());
        spec.methods = vec![Method::Lnr, Method::Lnr];
        assert!(spec.validate().is_err());
        spec.methods = vec![Method::Lnr];
        spec.noise_fractions = vec![1.5];
        assert!(spec.validate().is_err());
        spec.noise_fractions = vec![0.5];
        spec.k_grid = vec![];
        assert!(matches!(spec.validate(), Err(Error::EmptyGrid("k"))));
    }

    #[test]
    fn csv_emission_shape() {
        let mut spec = separable_spec(vec![Method::Pcc1, Method::Lnr]);
        spec.noise_fractions = vec![0.0, 0.5];
        spec.repeats = 1;
        let table = run_experiment(&spec).unwrap();
        let mut out = Vec::new();
        table.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "q_size,pcc1,lnr");
        assert_eq!(lines.len(), 3, "header plus one row per fraction");
        assert!(lines[1].starts_with("0,"));
        assert!(lines[2].starts_with("0.50,"));
    }

    #[test]
    fn empty_table_is_an_emission_error() {
        let table = ResultTable {
            key_column: "q_size".into(),
            methods: vec![],
            chance_error: 0.5,
            rows: vec![],
        };
        assert!(matches!(table.write_csv(std::io::sink()), Err(Error::EmptyTable)));
    }

    #[test]
    fn json_round_trip_is_identity() {
        let spec = separable_spec(vec![Method::Pcc3, Method::Lgc]);
        let table = run_experiment(&spec).unwrap();
        let mut buf = Vec::new();
        table.write_json(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let back = ResultTable::read_json(&text).unwrap();
        assert_eq!(back, table);
        // Byte-level round trip, wall times included.
        let mut buf2 = Vec::new();
        back.write_json(&mut buf2).unwrap();
        assert_eq!(text, String::from_utf8(buf2).unwrap());
    }

    #[test]
    fn beta_sweep_rows_and_counts() {
        let mut spec = separable_spec(vec![Method::Lnr]);
        spec.noise_fractions = vec![0.5];
        spec.trials = 2;
        spec.repeats = 2;
        spec.k_grid = vec![3];
        let table = beta_sweep(&spec, &[1, 3]).unwrap();
        assert_eq!(table.key_column, "beta");
        assert_eq!(table.rows.len(), 2);
        for row in &table.rows {
            assert_eq!(row.trials, 2);
            assert_eq!(row.executions, 4);
        }
        assert!(table.row(Method::Lnr, 1.0).is_some());
        // Guard rails.
        assert!(beta_sweep(&spec, &[]).is_err());
        spec.methods = vec![Method::Pcc1];
        assert!(beta_sweep(&spec, &[1]).is_err());
    }

    #[test]
    fn external_split_files_drive_trials() {
        let spec = separable_spec(vec![Method::Pcc1]);
        let dataset = spec.load_dataset().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = sample_labeled_subset(&dataset, 8, &mut rng).unwrap();
        let split = SplitFile::from_config(&cfg, None);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.json");
        std::fs::write(&path, serde_json::to_string(&split).unwrap()).unwrap();

        let mut spec = spec;
        spec.splits = vec![path];
        spec.trials = 1;
        let table = run_experiment(&spec).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.rows[0].mean_error, 0.0);
        // Mismatched counts are rejected.
        spec.trials = 2;
        assert!(run_experiment(&spec).is_err());
    }

    #[test]
    fn trace_file_written_for_first_pcc_run() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.tsv");
        let mut spec = separable_spec(vec![Method::Lgc, Method::Pcc1]);
        spec.trace = Some(path.clone());
        spec.repeats = 1;
        run_experiment(&spec).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let first = text.lines().next().expect("trace has events");
        assert_eq!(first.split('\t').count(), 5);
    }
}
