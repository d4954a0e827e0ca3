//! The particle competition and cooperation dynamical system.
//!
//! One engine covers the four behavior profiles: the original model with
//! frozen labeled nodes (`Pcc1`), the accumulated-domination model (`Pcc2`),
//! the combined-rule model with shared team distance tables (`Pcc3`), and the
//! label-noise-robust model with individual tables, periodic resets, and
//! overall domination accumulation (`Lnr`).
//!
//! Particles are created one per labeled node and walk the graph. Visiting a
//! node shifts its per-class domination vector toward the particle's class,
//! scales the particle's strength by the class domination found there,
//! tightens the particle's hop-distance table, and pushes the particle back
//! when its class does not strictly dominate the node it stepped on.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, LabelConfig};
use crate::error::{Error, Result};
use crate::graph::Graph;

/// Which member of the model family to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Pcc1,
    Pcc2,
    Pcc3,
    Lnr,
}

impl Variant {
    /// Labeled nodes keep their domination vectors fixed in the two original
    /// models; the later ones let enemy particles erode them, which is what
    /// makes relabeling of noisy nodes possible.
    fn freezes_labeled(self) -> bool {
        matches!(self, Variant::Pcc1 | Variant::Pcc2)
    }

    fn shares_tables(self) -> bool {
        matches!(self, Variant::Pcc3)
    }
}

/// Tunable parameters of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub variant: Variant,
    /// Probability of a greedy move (`Pcc1`/`Pcc2` only).
    pub p_grd: f64,
    /// Domination change rate per visit.
    pub delta_v: f64,
    /// Strength relaxation amplitude (`Pcc2` only).
    pub delta_rho: f64,
    /// Stop-criterion constant; the stall patience is `alpha * n / l`
    /// iterations (divided by `beta` for `Lnr`), rounded half-up.
    pub alpha: f64,
    /// Number of reset epochs (`Lnr` only).
    pub beta: u32,
    /// Safety cap on total iterations across all epochs.
    pub max_total_iterations: u64,
    /// Recompute the stall monitor every this many iterations.
    pub monitor_stride: u64,
}

impl VariantConfig {
    pub fn new(variant: Variant) -> Self {
        VariantConfig {
            variant,
            p_grd: 0.5,
            delta_v: 0.1,
            delta_rho: 0.4,
            alpha: 2000.0,
            beta: 10,
            max_total_iterations: 500_000,
            monitor_stride: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        let check = |ok: bool, name: &'static str, value: f64| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidParameter { name, value })
            }
        };
        check(self.p_grd >= 0.0 && self.p_grd <= 1.0, "p_grd", self.p_grd)?;
        check(self.delta_v > 0.0 && self.delta_v <= 1.0, "delta_v", self.delta_v)?;
        check(self.delta_rho > 0.0 && self.delta_rho <= 1.0, "delta_rho", self.delta_rho)?;
        check(self.alpha > 0.0, "alpha", self.alpha)?;
        check(self.beta >= 1, "beta", self.beta as f64)?;
        check(self.monitor_stride >= 1, "monitor_stride", self.monitor_stride as f64)?;
        Ok(())
    }
}

/// How a move target was drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoveKind {
    Random,
    Greedy,
    /// The 50/50 random-greedy blend used by `Pcc3` and `Lnr`.
    Mixed,
}

impl MoveKind {
    fn name(self) -> &'static str {
        match self {
            MoveKind::Random => "random",
            MoveKind::Greedy => "greedy",
            MoveKind::Mixed => "mixed",
        }
    }
}

/// A walking agent tied to one labeled node.
#[derive(Debug, Clone, Copy)]
pub struct Particle {
    pub home: u32,
    pub class: u16,
    pub strength: f64,
    pub current: u32,
    pub previous: u32,
}

/// Stall detection state: tracks the best mean (over nodes) of the maximum
/// domination entry seen in the current epoch.
#[derive(Debug, Clone)]
pub struct Monitor {
    pub best_avg_max_dom: f64,
    pub iterations_since_improvement: u64,
    pub tau: u64,
    pub resets_done: u32,
}

/// Final labeling plus run metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelAssignment {
    /// Predicted class id per node.
    pub labels: Vec<usize>,
    /// The per-node vector the labels were taken from (domination,
    /// accumulated domination, or overall domination depending on variant).
    pub decision: Vec<Vec<f64>>,
    /// Reset epochs performed (0 for non-`Lnr` variants).
    pub resets: u32,
    /// Total iterations executed.
    pub iterations: u64,
    /// Set when the iteration cap fired before the stop criterion.
    pub truncated: bool,
}

pub struct Engine<'a> {
    graph: &'a Graph,
    cfg: &'a LabelConfig,
    vc: VariantConfig,
    c: usize,
    omega: Vec<f64>,
    lambda: Vec<f64>,
    overall: Vec<f64>,
    given: Vec<Option<u16>>,
    particles: Vec<Particle>,
    tables: Vec<u32>,
    monitor: Monitor,
    iterations: u64,
    truncated: bool,
    stuck_moves: u64,
    rng: ChaCha8Rng,
    inv_sq: Vec<f64>,
    scratch: Vec<f64>,
    dataset: Option<&'a Dataset>,
    trace: Option<Box<dyn Write + Send>>,
}

impl<'a> Engine<'a> {
    /// Set up particles and node state for a run. Errors when some class in
    /// `0..c` has no labeled node to spawn its particle from.
    pub fn new(
        graph: &'a Graph,
        cfg: &'a LabelConfig,
        c: usize,
        vc: VariantConfig,
        seed: u64,
    ) -> Result<Engine<'a>> {
        vc.validate()?;
        let n = graph.n();
        if cfg.n() != n {
            return Err(Error::InvalidSpec(format!(
                "label config is for {} nodes, graph has {}",
                cfg.n(),
                n
            )));
        }
        let mut covered = vec![false; c];
        let mut particles = Vec::new();
        let mut given = vec![None; n];
        for i in 0..n {
            if let Some(y) = cfg.given(i) {
                if y >= c {
                    return Err(Error::InvalidSpec(format!("given label {y} out of range 0..{c}")));
                }
                covered[y] = true;
                given[i] = Some(y as u16);
                particles.push(Particle {
                    home: i as u32,
                    class: y as u16,
                    strength: 1.0,
                    current: i as u32,
                    previous: i as u32,
                });
            }
        }
        if let Some(missing) = covered.iter().position(|&b| !b) {
            return Err(Error::ClassWithoutParticle(missing));
        }
        let l = particles.len();

        let beta_for_tau = if vc.variant == Variant::Lnr { vc.beta as f64 } else { 1.0 };
        let tau = ((vc.alpha * n as f64 / (beta_for_tau * l as f64)).round() as u64).max(1);

        let table_rows = if vc.variant.shares_tables() { c } else { l };
        let mut engine = Engine {
            graph,
            cfg,
            c,
            omega: vec![0.0; n * c],
            lambda: if vc.variant == Variant::Pcc2 { vec![0.0; n * c] } else { Vec::new() },
            overall: if vc.variant == Variant::Lnr { vec![0.0; n * c] } else { Vec::new() },
            given,
            particles,
            tables: vec![0; table_rows * n],
            monitor: Monitor {
                best_avg_max_dom: f64::NEG_INFINITY,
                iterations_since_improvement: 0,
                tau,
                resets_done: 0,
            },
            iterations: 0,
            truncated: false,
            stuck_moves: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            inv_sq: (0..n).map(|d| 1.0 / (((1 + d) * (1 + d)) as f64)).collect(),
            scratch: Vec::new(),
            dataset: None,
            trace: None,
            vc,
        };
        engine.init_epoch();
        Ok(engine)
    }

    /// Attach the source dataset, enabling the nearest-labeled-node fallback
    /// for nodes whose decision vector ends up fully tied.
    pub fn with_dataset(mut self, d: &'a Dataset) -> Self {
        self.dataset = Some(d);
        self
    }

    /// Emit one line per movement event: iteration, particle, move kind,
    /// target node, and whether the particle was shocked back.
    pub fn with_trace(mut self, w: Box<dyn Write + Send>) -> Self {
        self.trace = Some(w);
        self
    }

    /// Reset node domination, particle positions/strengths, and distance
    /// tables to their initial values. Overall domination is untouched: it
    /// accumulates across epochs and is zeroed only at construction.
    fn init_epoch(&mut self) {
        let (n, c) = (self.graph.n(), self.c);
        for i in 0..n {
            let row = &mut self.omega[i * c..(i + 1) * c];
            match self.given[i] {
                Some(y) => {
                    row.fill(0.0);
                    row[y as usize] = 1.0;
                }
                None => row.fill(1.0 / c as f64),
            }
        }
        self.lambda.fill(0.0);
        for p in &mut self.particles {
            p.strength = 1.0;
            p.current = p.home;
            p.previous = p.home;
        }
        self.tables.fill(n as u32 - 1);
        for pi in 0..self.particles.len() {
            let p = self.particles[pi];
            let row = self.table_row_index(pi);
            self.tables[row * n + p.home as usize] = 0;
        }
        self.monitor.best_avg_max_dom = f64::NEG_INFINITY;
        self.monitor.iterations_since_improvement = 0;
    }

    fn table_row_index(&self, particle: usize) -> usize {
        if self.vc.variant.shares_tables() {
            self.particles[particle].class as usize
        } else {
            particle
        }
    }

    /// One iteration: every particle moves once, in ascending home order,
    /// with all updates applied immediately; then the stall monitor advances.
    pub fn step(&mut self) {
        let c = self.c;
        let n = self.graph.n();
        for j in 0..self.particles.len() {
            let p = self.particles[j];
            let cur = p.current as usize;
            let neighbors = self.graph.neighbors(cur);
            if neighbors.is_empty() {
                self.stuck_moves += 1;
                if let Some(w) = &mut self.trace {
                    let _ = writeln!(w, "{}\t{}\tstuck\t{}\t0", self.iterations, j, cur);
                }
                continue;
            }
            let f = p.class as usize;
            let (target, kind) = self.choose_target(j, neighbors);

            let pre_strength = p.strength;
            self.bump_domination(target, f, pre_strength);
            if self.vc.variant == Variant::Pcc2 && kind == MoveKind::Random {
                self.lambda[target * c + f] += pre_strength;
            }
            // The domination entry can sit a few ulps above 1 after repeated
            // redistribution; keep the strength bound exact.
            let dom = self.omega[target * c + f];
            self.particles[j].strength = if self.vc.variant == Variant::Pcc2 {
                pre_strength + self.vc.delta_rho * (dom - pre_strength)
            } else {
                dom
            }
            .clamp(0.0, 1.0);

            let row = self.table_row_index(j);
            let through = self.tables[row * n + cur] + 1;
            let slot = &mut self.tables[row * n + target];
            if through < *slot {
                *slot = through;
            }

            let omega_row = &self.omega[target * c..(target + 1) * c];
            let stays = (0..c).all(|q| q == f || omega_row[f] > omega_row[q]);
            if stays {
                self.particles[j].previous = cur as u32;
                self.particles[j].current = target as u32;
            }
            if let Some(w) = &mut self.trace {
                let _ = writeln!(
                    w,
                    "{}\t{}\t{}\t{}\t{}",
                    self.iterations,
                    j,
                    kind.name(),
                    target,
                    u8::from(!stays)
                );
            }
        }
        self.iterations += 1;
        if self.iterations % self.vc.monitor_stride == 0 {
            self.update_monitor();
        }
    }

    fn choose_target(&mut self, j: usize, neighbors: &[u32]) -> (usize, MoveKind) {
        match self.vc.variant {
            Variant::Pcc1 | Variant::Pcc2 => {
                if self.rng.random::<f64>() < self.vc.p_grd {
                    (self.sample_greedy(j, neighbors), MoveKind::Greedy)
                } else {
                    let pick = self.rng.random_range(0..neighbors.len());
                    (neighbors[pick] as usize, MoveKind::Random)
                }
            }
            Variant::Pcc3 | Variant::Lnr => (self.sample_mixed(j, neighbors), MoveKind::Mixed),
        }
    }

    /// Greedy weight of a neighbor: its domination for the particle's class
    /// scaled by the inverse square of (1 + table distance).
    fn fill_greedy_weights(&mut self, j: usize, neighbors: &[u32]) -> f64 {
        let c = self.c;
        let n = self.graph.n();
        let f = self.particles[j].class as usize;
        let row = self.table_row_index(j);
        let table = &self.tables[row * n..(row + 1) * n];
        self.scratch.clear();
        let mut total = 0.0;
        for &nb in neighbors {
            let nb = nb as usize;
            let w = self.omega[nb * c + f] * self.inv_sq[table[nb] as usize];
            self.scratch.push(w);
            total += w;
        }
        total
    }

    fn sample_greedy(&mut self, j: usize, neighbors: &[u32]) -> usize {
        let total = self.fill_greedy_weights(j, neighbors);
        if total <= 0.0 {
            // No neighbor carries any domination for this class: degenerate
            // greedy distribution falls back to uniform.
            let pick = self.rng.random_range(0..neighbors.len());
            return neighbors[pick] as usize;
        }
        let u = self.rng.random::<f64>() * total;
        let mut cum = 0.0;
        for (idx, &w) in self.scratch.iter().enumerate() {
            cum += w;
            if u < cum {
                return neighbors[idx] as usize;
            }
        }
        neighbors[neighbors.len() - 1] as usize
    }

    fn sample_mixed(&mut self, j: usize, neighbors: &[u32]) -> usize {
        let total = self.fill_greedy_weights(j, neighbors);
        let deg = neighbors.len();
        if total <= 0.0 {
            let pick = self.rng.random_range(0..deg);
            return neighbors[pick] as usize;
        }
        let uniform = 0.5 / deg as f64;
        let u = self.rng.random::<f64>();
        let mut cum = 0.0;
        for (idx, &w) in self.scratch.iter().enumerate() {
            cum += uniform + 0.5 * w / total;
            if u < cum {
                return neighbors[idx] as usize;
            }
        }
        neighbors[deg - 1] as usize
    }

    /// The probability vector `select_target` would use over the current
    /// node's neighbors for the given move kind.
    pub fn target_distribution(&mut self, j: usize, kind: MoveKind) -> Vec<f64> {
        let neighbors = self.graph.neighbors(self.particles[j].current as usize);
        let deg = neighbors.len();
        let uniform = vec![1.0 / deg as f64; deg];
        match kind {
            MoveKind::Random => uniform,
            MoveKind::Greedy => {
                let neighbors = neighbors.to_vec();
                let total = self.fill_greedy_weights(j, &neighbors);
                if total <= 0.0 {
                    uniform
                } else {
                    self.scratch.iter().map(|w| w / total).collect()
                }
            }
            MoveKind::Mixed => {
                let neighbors = neighbors.to_vec();
                let total = self.fill_greedy_weights(j, &neighbors);
                if total <= 0.0 {
                    uniform
                } else {
                    self.scratch
                        .iter()
                        .map(|w| 0.5 / deg as f64 + 0.5 * w / total)
                        .collect()
                }
            }
        }
    }

    /// Shift the visited node's domination toward class `f`: every other
    /// class loses `delta_v * strength / (c - 1)` (floored at zero) and `f`
    /// gains exactly what was removed, so the vector keeps summing to one.
    fn bump_domination(&mut self, node: usize, f: usize, strength: f64) {
        if self.given[node].is_some() && self.vc.variant.freezes_labeled() {
            return;
        }
        let c = self.c;
        if c < 2 {
            return;
        }
        let cap = self.vc.delta_v * strength / (c as f64 - 1.0);
        let row = &mut self.omega[node * c..(node + 1) * c];
        let mut gained = 0.0;
        for (q, slot) in row.iter_mut().enumerate() {
            if q != f {
                let d = slot.min(cap);
                *slot -= d;
                gained += d;
            }
        }
        row[f] += gained;
    }

    fn update_monitor(&mut self) {
        let c = self.c;
        let mut sum = 0.0;
        for row in self.omega.chunks_exact(c) {
            let mut best = row[0];
            for &v in &row[1..] {
                if v > best {
                    best = v;
                }
            }
            sum += best;
        }
        let avg = sum / (self.omega.len() / c) as f64;
        if avg > self.monitor.best_avg_max_dom {
            self.monitor.best_avg_max_dom = avg;
            self.monitor.iterations_since_improvement = 0;
        } else {
            self.monitor.iterations_since_improvement += self.vc.monitor_stride;
        }
    }

    fn bank_overall(&mut self) {
        for (acc, &w) in self.overall.iter_mut().zip(self.omega.iter()) {
            *acc += w;
        }
    }

    /// Drive the dynamics to the stop criterion and label every node.
    ///
    /// Non-`Lnr` variants stop at the first stall; `Lnr` banks the domination
    /// snapshot into the overall levels on each stall and re-initializes,
    /// stopping after the `beta`-th bank. If the iteration cap fires, the
    /// best-so-far state is labeled and the truncation flag is set.
    pub fn run_to_completion(&mut self) -> LabelAssignment {
        loop {
            self.step();
            if self.monitor.iterations_since_improvement >= self.monitor.tau {
                if self.vc.variant == Variant::Lnr {
                    self.bank_overall();
                    self.monitor.resets_done += 1;
                    if self.monitor.resets_done >= self.vc.beta {
                        break;
                    }
                    self.init_epoch();
                } else {
                    break;
                }
            } else if self.iterations >= self.vc.max_total_iterations {
                self.truncated = true;
                if self.vc.variant == Variant::Lnr {
                    // Bank the partial epoch so the work is not discarded.
                    self.bank_overall();
                    self.monitor.resets_done += 1;
                }
                break;
            }
        }
        self.label()
    }

    /// Label every node from the variant's decision vector: domination for
    /// `Pcc1`/`Pcc3`, accumulated domination for `Pcc2`, overall domination
    /// for `Lnr`. `Pcc1` keeps given labels on labeled nodes. Ties go to the
    /// lowest class index; fully tied vectors (untouched components) fall
    /// back to the given label of the nearest labeled node in feature space.
    pub fn label(&self) -> LabelAssignment {
        let c = self.c;
        let n = self.graph.n();
        let source: &[f64] = match self.vc.variant {
            Variant::Pcc1 | Variant::Pcc3 => &self.omega,
            Variant::Pcc2 => &self.lambda,
            Variant::Lnr => &self.overall,
        };
        let mut labels = Vec::with_capacity(n);
        let mut decision = Vec::with_capacity(n);
        for i in 0..n {
            let row = &source[i * c..(i + 1) * c];
            decision.push(row.to_vec());
            if self.vc.variant == Variant::Pcc1 {
                if let Some(y) = self.given[i] {
                    labels.push(y as usize);
                    continue;
                }
            }
            if row.iter().all(|&v| v == row[0]) {
                labels.push(self.fallback_label(i));
                continue;
            }
            let mut best = 0;
            for q in 1..c {
                if row[q] > row[best] {
                    best = q;
                }
            }
            labels.push(best);
        }
        LabelAssignment {
            labels,
            decision,
            resets: self.monitor.resets_done,
            iterations: self.iterations,
            truncated: self.truncated,
        }
    }

    fn fallback_label(&self, i: usize) -> usize {
        match self.dataset {
            Some(d) => {
                let mut best: Option<(f64, usize)> = None;
                for j in 0..self.cfg.n() {
                    if let Some(y) = self.cfg.given(j) {
                        let dist = d.sq_distance(i, j);
                        if best.map_or(true, |(bd, _)| dist < bd) {
                            best = Some((dist, y));
                        }
                    }
                }
                best.map(|(_, y)| y).unwrap_or(0)
            }
            None => 0,
        }
    }

    pub fn monitor(&self) -> &Monitor {
        &self.monitor
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    pub fn stuck_moves(&self) -> u64 {
        self.stuck_moves
    }

    pub fn class_count(&self) -> usize {
        self.c
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn omega_row(&self, node: usize) -> &[f64] {
        &self.omega[node * self.c..(node + 1) * self.c]
    }

    pub fn lambda_row(&self, node: usize) -> &[f64] {
        &self.lambda[node * self.c..(node + 1) * self.c]
    }

    pub fn overall_row(&self, node: usize) -> &[f64] {
        &self.overall[node * self.c..(node + 1) * self.c]
    }

    /// The hop-distance table seen by a particle (the team table for the
    /// shared-table variant).
    pub fn distance_table(&self, particle: usize) -> &[u32] {
        let n = self.graph.n();
        let row = self.table_row_index(particle);
        &self.tables[row * n..(row + 1) * n]
    }

    /// Overwrite a node's domination vector (test and experimentation hook).
    pub fn set_domination(&mut self, node: usize, values: &[f64]) {
        assert_eq!(values.len(), self.c);
        self.omega[node * self.c..(node + 1) * self.c].copy_from_slice(values);
    }

    /// Overwrite one particle's distance-table entry (test hook).
    pub fn set_distance(&mut self, particle: usize, node: usize, distance: u32) {
        let n = self.graph.n();
        let row = self.table_row_index(particle);
        self.tables[row * n + node] = distance;
    }
}

/// Build an engine with the feature-space fallback attached and run it.
pub fn run(
    graph: &Graph,
    dataset: &Dataset,
    cfg: &LabelConfig,
    vc: &VariantConfig,
    seed: u64,
) -> Result<LabelAssignment> {
    let mut engine = Engine::new(graph, cfg, dataset.c(), vc.clone(), seed)?.with_dataset(dataset);
    Ok(engine.run_to_completion())
}
