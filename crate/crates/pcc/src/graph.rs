//! Undirected unweighted graph construction from feature data.
//!
//! Four policies are supported: a distance threshold, the classic
//! "k-nearest in either direction" rule, that rule plus same-label cliques,
//! and the labeled-node-preferential rule that keeps labeled and unlabeled
//! degrees comparable. All distance ties break toward the lower node index so
//! construction is fully deterministic.

use std::io::Write;

use rayon::prelude::*;

use crate::dataset::{Dataset, LabelConfig};
use crate::error::{Error, Result};

/// Edge construction rule.
#[derive(Debug, Clone, PartialEq)]
pub enum GraphPolicy {
    /// Connect pairs whose Euclidean distance is strictly below `sigma`.
    Epsilon { sigma: f64 },
    /// Connect `i` and `j` if either is among the other's k nearest.
    KnnOr { k: usize },
    /// `KnnOr` edges plus a clique between labeled nodes sharing a given label.
    KnnPcc3 { k: usize },
    /// Labeled nodes prefer their k nearest same-class labeled nodes;
    /// unlabeled nodes pick their k nearest overall. Reciprocal closure.
    KnnLnr { k: usize },
}

/// Sparse undirected graph in compressed adjacency form. Neighbor lists are
/// sorted ascending, with no self-loops and no duplicates.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    offsets: Vec<usize>,
    targets: Vec<u32>,
}

impl Graph {
    /// Build from an edge list; duplicates and orientation are normalized.
    pub fn from_edges(n: usize, edges: &[(u32, u32)]) -> Graph {
        let mut adj: Vec<Vec<u32>> = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a == b {
                continue;
            }
            adj[a as usize].push(b);
            adj[b as usize].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        Self::from_adjacency(adj)
    }

    fn from_adjacency(adj: Vec<Vec<u32>>) -> Graph {
        let mut offsets = Vec::with_capacity(adj.len() + 1);
        offsets.push(0);
        let mut targets = Vec::new();
        for list in &adj {
            targets.extend_from_slice(list);
            offsets.push(targets.len());
        }
        Graph { offsets, targets }
    }

    pub fn n(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.targets[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn edge_count(&self) -> usize {
        self.targets.len() / 2
    }

    /// Connected-component id per node, dense from 0 in order of the lowest
    /// node index contained in each component.
    pub fn components(&self) -> Vec<usize> {
        let n = self.n();
        let mut comp = vec![usize::MAX; n];
        let mut next = 0;
        let mut queue = Vec::new();
        for start in 0..n {
            if comp[start] != usize::MAX {
                continue;
            }
            comp[start] = next;
            queue.push(start);
            while let Some(u) = queue.pop() {
                for &v in self.neighbors(u) {
                    if comp[v as usize] == usize::MAX {
                        comp[v as usize] = next;
                        queue.push(v as usize);
                    }
                }
            }
            next += 1;
        }
        comp
    }

    /// Write one `i j` pair per line with `i < j`, ascending.
    pub fn write_edge_list<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for i in 0..self.n() {
            for &j in self.neighbors(i) {
                if (i as u32) < j {
                    writeln!(w, "{i} {j}")?;
                }
            }
        }
        Ok(())
    }
}

/// Dense matrix of pairwise squared Euclidean distances.
pub struct SquaredDistances {
    n: usize,
    data: Vec<f64>,
}

impl SquaredDistances {
    pub fn compute(d: &Dataset) -> Result<SquaredDistances> {
        let n = d.n();
        let mut data = vec![0.0; n * n];
        data.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            for (j, slot) in row.iter_mut().enumerate() {
                *slot = d.sq_distance(i, j);
            }
        });
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteFeature { row: bad / n, col: bad % n });
        }
        Ok(SquaredDistances { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

/// Pick the `k` candidates with the smallest distance to `i`, ties broken by
/// lower node index. `allow` filters the candidate set; `i` itself is skipped.
fn k_nearest(
    row: &[f64],
    i: usize,
    k: usize,
    mut allow: impl FnMut(usize) -> bool,
    buf: &mut Vec<(f64, u32)>,
) -> Vec<u32> {
    buf.clear();
    for (j, &dist) in row.iter().enumerate() {
        if j != i && allow(j) {
            buf.push((dist, j as u32));
        }
    }
    let take = k.min(buf.len());
    if take == 0 {
        return Vec::new();
    }
    let cmp = |a: &(f64, u32), b: &(f64, u32)| {
        a.0.partial_cmp(&b.0).expect("finite distances").then(a.1.cmp(&b.1))
    };
    if take < buf.len() {
        buf.select_nth_unstable_by(take - 1, cmp);
    }
    buf[..take].iter().map(|&(_, j)| j).collect()
}

/// Build the graph for a dataset under the given policy. Disconnected results
/// are not an error; components without particles are handled at labeling.
pub fn build_graph(d: &Dataset, cfg: &LabelConfig, policy: &GraphPolicy) -> Result<Graph> {
    let sq = SquaredDistances::compute(d)?;
    build_graph_from_sq(&sq, cfg, policy)
}

/// Same as [`build_graph`], reusing a precomputed distance matrix.
pub fn build_graph_from_sq(
    sq: &SquaredDistances,
    cfg: &LabelConfig,
    policy: &GraphPolicy,
) -> Result<Graph> {
    let n = sq.n();
    let check_k = |k: usize| {
        if k == 0 || k >= n {
            Err(Error::InvalidK { k, n })
        } else {
            Ok(())
        }
    };

    let mut adj: Vec<Vec<u32>> = vec![Vec::new(); n];
    let push_edge = |adj: &mut Vec<Vec<u32>>, a: usize, b: u32| {
        adj[a].push(b);
        adj[b as usize].push(a as u32);
    };

    match policy {
        GraphPolicy::Epsilon { sigma } => {
            if !(*sigma > 0.0) {
                return Err(Error::InvalidSigma(*sigma));
            }
            let threshold = sigma * sigma;
            for i in 0..n {
                let row = sq.row(i);
                for j in i + 1..n {
                    if row[j] < threshold {
                        push_edge(&mut adj, i, j as u32);
                    }
                }
            }
        }
        GraphPolicy::KnnOr { k } | GraphPolicy::KnnPcc3 { k } => {
            check_k(*k)?;
            let mut buf = Vec::with_capacity(n);
            for i in 0..n {
                for j in k_nearest(sq.row(i), i, *k, |_| true, &mut buf) {
                    push_edge(&mut adj, i, j);
                }
            }
            if matches!(policy, GraphPolicy::KnnPcc3 { .. }) {
                let labeled = cfg.labeled_indices();
                for (a_pos, &a) in labeled.iter().enumerate() {
                    for &b in &labeled[a_pos + 1..] {
                        if cfg.given(a) == cfg.given(b) {
                            push_edge(&mut adj, a, b as u32);
                        }
                    }
                }
            }
        }
        GraphPolicy::KnnLnr { k } => {
            check_k(*k)?;
            let mut buf = Vec::with_capacity(n);
            for i in 0..n {
                let row = sq.row(i);
                match cfg.given(i) {
                    None => {
                        for j in k_nearest(row, i, *k, |_| true, &mut buf) {
                            push_edge(&mut adj, i, j);
                        }
                    }
                    Some(label) => {
                        let same_class =
                            |j: usize| cfg.is_labeled(j) && cfg.given(j) == Some(label);
                        let nominated = k_nearest(row, i, *k, same_class, &mut buf);
                        let z = nominated.len();
                        for j in nominated {
                            push_edge(&mut adj, i, j);
                        }
                        if z < *k {
                            for j in k_nearest(row, i, *k - z, |j| !same_class(j), &mut buf) {
                                push_edge(&mut adj, i, j);
                            }
                        }
                    }
                }
            }
        }
    }

    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    Ok(Graph::from_adjacency(adj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_gaussians, inject_label_noise, sample_labeled_subset, Dataset};
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn line_dataset(xs: &[f64]) -> Dataset {
        let n = xs.len();
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        Dataset::new(
            Array2::from_shape_vec((n, 1), xs.to_vec()).unwrap(),
            labels,
            vec!["a".into(), "b".into()],
        )
        .unwrap()
    }

    fn unlabeled_cfg(d: &Dataset) -> LabelConfig {
        // All-labeled config so policies that read labels have them.
        sample_labeled_subset(d, d.n(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn edge_set(g: &Graph) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for i in 0..g.n() {
            for &j in g.neighbors(i) {
                if (i as u32) < j {
                    out.push((i as u32, j));
                }
            }
        }
        out
    }

    #[test]
    fn collinear_knn_or() {
        let d = line_dataset(&[0.0, 1.0, 10.0]);
        let cfg = unlabeled_cfg(&d);
        let g = build_graph(&d, &cfg, &GraphPolicy::KnnOr { k: 1 }).unwrap();
        // Nominations: 0 -> 1, 1 -> 0, 2 -> 1; closure gives (0,1) and (1,2).
        assert_eq!(edge_set(&g), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn epsilon_policy_strict_threshold() {
        let d = line_dataset(&[0.0, 1.0, 2.4]);
        let cfg = unlabeled_cfg(&d);
        let g = build_graph(&d, &cfg, &GraphPolicy::Epsilon { sigma: 1.5 }).unwrap();
        assert_eq!(edge_set(&g), vec![(0, 1), (1, 2)]);
        // Exactly at the threshold: strictly-below means no edge.
        let g2 = build_graph(&d, &cfg, &GraphPolicy::Epsilon { sigma: 1.0 }).unwrap();
        assert_eq!(edge_set(&g2), vec![]);
    }

    #[test]
    fn knn_tie_breaks_to_lower_index() {
        // Node 1 is equidistant from 0 and 2.
        let d = line_dataset(&[0.0, 1.0, 2.0, 10.0]);
        let cfg = unlabeled_cfg(&d);
        let g = build_graph(&d, &cfg, &GraphPolicy::KnnOr { k: 1 }).unwrap();
        // 1 nominates 0 (tie with 2 broken low); 2 nominates 1; 3 nominates 2.
        assert_eq!(edge_set(&g), vec![(0, 1), (1, 2), (2, 3)]);
    }

    #[test]
    fn pcc3_superset_of_knn_or() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = gen_gaussians(15, 3, 2, 3.0, &mut rng).unwrap();
        let cfg = sample_labeled_subset(&d, 12, &mut rng).unwrap();
        let cfg = inject_label_noise(&cfg, 4, d.c(), &mut rng).unwrap();
        let base = build_graph(&d, &cfg, &GraphPolicy::KnnOr { k: 3 }).unwrap();
        let clique = build_graph(&d, &cfg, &GraphPolicy::KnnPcc3 { k: 3 }).unwrap();
        let base_edges = edge_set(&base);
        let clique_edges = edge_set(&clique);
        for e in &base_edges {
            assert!(clique_edges.contains(e));
        }
        // Same-given-label labeled nodes must be directly connected.
        let labeled = cfg.labeled_indices();
        for &a in &labeled {
            for &b in &labeled {
                if a < b && cfg.given(a) == cfg.given(b) {
                    assert!(clique_edges.contains(&(a as u32, b as u32)));
                }
            }
        }
    }

    /// Brute-force re-derivation of the labeled-preferential nomination rule,
    /// kept independent of the implementation for use as an oracle.
    fn lnr_expected_edges(d: &Dataset, cfg: &LabelConfig, k: usize) -> Vec<(u32, u32)> {
        let n = d.n();
        let nominate = |i: usize, allow: &dyn Fn(usize) -> bool, count: usize| -> Vec<usize> {
            let mut cands: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i && allow(j))
                .map(|j| (d.sq_distance(i, j), j))
                .collect();
            cands.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            cands.truncate(count);
            cands.into_iter().map(|(_, j)| j).collect()
        };
        let mut edges = std::collections::BTreeSet::new();
        for i in 0..n {
            let mut noms = Vec::new();
            match cfg.given(i) {
                None => noms = nominate(i, &|_| true, k),
                Some(label) => {
                    let same = move |j: usize| cfg.is_labeled(j) && cfg.given(j) == Some(label);
                    noms.extend(nominate(i, &same, k));
                    let z = noms.len();
                    if z < k {
                        noms.extend(nominate(i, &move |j| !same(j), k - z));
                    }
                }
            }
            for j in noms {
                edges.insert((i.min(j) as u32, i.max(j) as u32));
            }
        }
        edges.into_iter().collect()
    }

    #[test]
    fn lnr_matches_bruteforce_oracle_on_constructed_instance() {
        // 30 nodes: 10 labeled class a, 5 labeled class b, 15 unlabeled.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let d = gen_gaussians(15, 2, 2, 4.0, &mut rng).unwrap();
        let mut labeled = vec![false; 30];
        let mut given = vec![None; 30];
        for i in 0..10 {
            labeled[i] = true;
            given[i] = Some(d.true_label(i));
            assert_eq!(d.true_label(i), 0);
        }
        for i in 15..20 {
            labeled[i] = true;
            given[i] = Some(d.true_label(i));
            assert_eq!(d.true_label(i), 1);
        }
        let split = crate::dataset::SplitFile {
            n: 30,
            labeled: (0..10).chain(15..20).collect(),
            given: None,
            noisy: vec![],
            seed: None,
        };
        let cfg = split.into_config(&d).unwrap();
        let k = 5;
        let g = build_graph(&d, &cfg, &GraphPolicy::KnnLnr { k }).unwrap();
        assert_eq!(edge_set(&g), lnr_expected_edges(&d, &cfg, k));

        // Every class-a labeled node has z = 9 >= k, so its own nominations
        // are all class-a labeled nodes; extra degree only via reciprocity.
        let expected = lnr_expected_edges(&d, &cfg, k);
        for i in 0..10u32 {
            let own: Vec<u32> = {
                let mut cands: Vec<(f64, u32)> = (0..10u32)
                    .filter(|&j| j != i)
                    .map(|j| (d.sq_distance(i as usize, j as usize), j))
                    .collect();
                cands.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                cands.truncate(k);
                cands.into_iter().map(|(_, j)| j).collect()
            };
            assert!(own.iter().all(|&j| j < 10));
            for &j in &own {
                let key = (i.min(j), i.max(j));
                assert!(expected.contains(&key));
            }
        }
    }

    #[test]
    fn lnr_keeps_labeled_degree_comparable() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let d = gen_gaussians(60, 3, 2, 4.0, &mut rng).unwrap();
        let cfg = sample_labeled_subset(&d, 30, &mut rng).unwrap();
        let k = 7;
        let g = build_graph(&d, &cfg, &GraphPolicy::KnnLnr { k }).unwrap();
        let max_labeled = (0..d.n())
            .filter(|&i| cfg.is_labeled(i))
            .map(|i| g.degree(i))
            .max()
            .unwrap();
        let max_unlabeled = (0..d.n())
            .filter(|&i| !cfg.is_labeled(i))
            .map(|i| g.degree(i))
            .max()
            .unwrap();
        assert!(
            max_labeled <= max_unlabeled + k,
            "labeled degree {max_labeled} vs unlabeled {max_unlabeled} + k {k}"
        );
    }

    #[test]
    fn k_out_of_range_rejected() {
        let d = line_dataset(&[0.0, 1.0, 2.0]);
        let cfg = unlabeled_cfg(&d);
        assert!(build_graph(&d, &cfg, &GraphPolicy::KnnOr { k: 3 }).is_err());
        assert!(build_graph(&d, &cfg, &GraphPolicy::KnnOr { k: 0 }).is_err());
    }

    #[test]
    fn components_edgeless_and_path() {
        let g = Graph::from_edges(4, &[]);
        assert_eq!(g.components(), vec![0, 1, 2, 3]);
        let path = Graph::from_edges(4, &[(0, 1), (1, 2), (2, 3)]);
        assert_eq!(path.components(), vec![0, 0, 0, 0]);
    }

    #[test]
    fn components_two_triangles() {
        let g = Graph::from_edges(6, &[(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3)]);
        let comp = g.components();
        assert_eq!(comp, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn edge_list_format() {
        let g = Graph::from_edges(3, &[(1, 0), (2, 1)]);
        let mut out = Vec::new();
        g.write_edge_list(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "0 1\n1 2\n");
    }

    #[test]
    fn graph_build_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = gen_gaussians(40, 2, 3, 3.0, &mut rng).unwrap();
        let cfg = sample_labeled_subset(&d, 10, &mut rng).unwrap();
        let a = build_graph(&d, &cfg, &GraphPolicy::KnnLnr { k: 4 }).unwrap();
        let b = build_graph(&d, &cfg, &GraphPolicy::KnnLnr { k: 4 }).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn adjacency_symmetric_no_self_loops(seed in 0u64..1000, k in 1usize..6, policy_id in 0u8..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = gen_gaussians(8, 3, 2, 3.0, &mut rng).unwrap();
            let cfg = sample_labeled_subset(&d, 6, &mut rng).unwrap();
            let policy = match policy_id {
                0 => GraphPolicy::Epsilon { sigma: 1.5 },
                1 => GraphPolicy::KnnOr { k },
                2 => GraphPolicy::KnnPcc3 { k },
                _ => GraphPolicy::KnnLnr { k },
            };
            let g = build_graph(&d, &cfg, &policy).unwrap();
            for i in 0..g.n() {
                let mut prev = None;
                for &j in g.neighbors(i) {
                    prop_assert_ne!(j as usize, i);
                    prop_assert!(Some(j) > prev, "sorted and deduped");
                    prev = Some(j);
                    prop_assert!(g.neighbors(j as usize).contains(&(i as u32)));
                }
            }
        }
    }
}
