//! Ground-truth anomaly injection.
//!
//! Structural anomalies: `q` disjoint groups of `p` nodes are sampled without
//! replacement and each group is fully connected into a clique. Attribute
//! anomalies: for each target node, `k` candidate nodes are sampled and the
//! target's feature row is replaced by the candidate row at maximum Euclidean
//! distance. All injected nodes are labeled `1`.

use serde::{Deserialize, Serialize};

use crate::graph::Graph;
use crate::rng::{sample_without_replacement, SeedTree};
use crate::tensor::sqdist;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct InjectionSpec {
    /// Clique size `p`.
    pub clique_size: usize,
    /// Number of cliques `q`.
    pub clique_count: usize,
    pub feature_anomaly_count: usize,
    /// Candidate pool size `k` for attribute anomalies.
    pub candidate_pool: usize,
    pub seed: u64,
}

/// Audit record written next to injected graphs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InjectionManifest {
    pub spec: InjectionSpec,
    pub structural_cliques: Vec<Vec<usize>>,
    pub feature_targets: Vec<usize>,
}

impl InjectionSpec {
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut problems = Vec::new();
        if self.clique_size == 0 {
            problems.push("clique size must be positive".to_string());
        }
        if self.clique_count == 0 {
            problems.push("clique count must be positive".to_string());
        }
        if self.clique_size * self.clique_count > n {
            problems.push(format!(
                "clique_size * clique_count = {} exceeds node count {n}",
                self.clique_size * self.clique_count
            ));
        }
        if self.candidate_pool == 0 {
            problems.push("candidate pool must be positive".to_string());
        }
        if self.candidate_pool > n.saturating_sub(1) {
            problems.push(format!(
                "candidate pool {} exceeds n-1 = {}",
                self.candidate_pool,
                n.saturating_sub(1)
            ));
        }
        if self.feature_anomaly_count > n {
            problems.push(format!(
                "feature anomaly count {} exceeds node count {n}",
                self.feature_anomaly_count
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

fn unlabeled_nodes(g: &Graph) -> Vec<usize> {
    match &g.labels {
        None => (0..g.node_count()).collect(),
        Some(l) => (0..g.node_count()).filter(|&i| l[i] == 0).collect(),
    }
}

/// Fully connect `q` seeded disjoint groups of `p` unlabeled nodes, labeling
/// every group member as anomalous. Existing edges are kept.
pub fn inject_structural(g: &Graph, spec: &InjectionSpec) -> Result<(Graph, Vec<Vec<usize>>)> {
    spec.validate(g.node_count())?;
    let need = spec.clique_size * spec.clique_count;
    let pool = unlabeled_nodes(g);
    if pool.len() < need {
        return Err(Error::Invalid(format!(
            "need {need} unlabeled nodes for structural injection, only {} available",
            pool.len()
        )));
    }

    let mut rng = SeedTree::new(spec.seed).stream("injection");
    let chosen = sample_without_replacement(&mut rng, pool, need);
    let cliques: Vec<Vec<usize>> = chosen
        .chunks(spec.clique_size)
        .map(|c| c.to_vec())
        .collect();

    let mut edges = g.undirected_edges();
    for clique in &cliques {
        for i in 0..clique.len() {
            for j in (i + 1)..clique.len() {
                edges.push((clique[i], clique[j]));
            }
        }
    }

    let mut labels = g.labels.clone().unwrap_or_else(|| vec![0; g.node_count()]);
    for clique in &cliques {
        for &node in clique {
            labels[node] = 1;
        }
    }

    let (out, _) = Graph::build(&g.name, &edges, g.features.clone(), Some(labels))?;
    Ok((out, cliques))
}

/// Replace each seeded target's feature row with the most distant of `k`
/// sampled candidate rows, labeling targets as anomalous. Targets are drawn
/// from unlabeled nodes, so running after [`inject_structural`] keeps the two
/// anomaly sets disjoint.
pub fn inject_feature(g: &Graph, spec: &InjectionSpec) -> Result<(Graph, Vec<usize>)> {
    spec.validate(g.node_count())?;
    let pool = unlabeled_nodes(g);
    if pool.len() < spec.feature_anomaly_count {
        return Err(Error::Invalid(format!(
            "need {} unlabeled nodes for feature injection, only {} available",
            spec.feature_anomaly_count,
            pool.len()
        )));
    }

    let tree = SeedTree::new(spec.seed);
    let mut rng = tree.stream_n("injection", 1);
    let targets = sample_without_replacement(&mut rng, pool, spec.feature_anomaly_count);

    let mut features = g.features.clone();
    let mut labels = g.labels.clone().unwrap_or_else(|| vec![0; g.node_count()]);
    for &target in &targets {
        let others: Vec<usize> = (0..g.node_count()).filter(|&i| i != target).collect();
        if others.is_empty() {
            return Err(Error::Invalid("candidate pool empty".into()));
        }
        let candidates = sample_without_replacement(&mut rng, others, spec.candidate_pool);
        // farthest candidate wins; ties break to the lowest node id
        let mut best = candidates[0];
        let mut best_dist = sqdist(features.row(target), features.row(best));
        for &c in &candidates[1..] {
            let d = sqdist(features.row(target), features.row(c));
            if d > best_dist || (d == best_dist && c < best) {
                best = c;
                best_dist = d;
            }
        }
        let donor: Vec<f64> = features.row(best).to_vec();
        features.row_mut(target).copy_from_slice(&donor);
        labels[target] = 1;
    }

    let (out, _) = Graph::build(&g.name, &g.undirected_edges(), features, Some(labels))?;
    Ok((out, targets))
}

/// Structural then attribute injection, as one auditable step.
pub fn inject_both(g: &Graph, spec: &InjectionSpec) -> Result<(Graph, InjectionManifest)> {
    let (with_structural, cliques) = inject_structural(g, spec)?;
    let (out, targets) = inject_feature(&with_structural, spec)?;
    Ok((
        out,
        InjectionManifest {
            spec: spec.clone(),
            structural_cliques: cliques,
            feature_targets: targets,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::uniform_symmetric;
    use crate::tensor::Tensor;

    fn random_graph(n: usize, seed: u64) -> Graph {
        let mut rng = SeedTree::new(seed).stream("test");
        let data: Vec<f64> = (0..n * 3).map(|_| uniform_symmetric(&mut rng, 1.0)).collect();
        let mut edges = Vec::new();
        for i in 0..n - 1 {
            edges.push((i, i + 1));
        }
        let (g, _) = Graph::build("t", &edges, Tensor::from_vec(n, 3, data), None).unwrap();
        g
    }

    fn spec(p: usize, q: usize, feats: usize, k: usize) -> InjectionSpec {
        InjectionSpec {
            clique_size: p,
            clique_count: q,
            feature_anomaly_count: feats,
            candidate_pool: k,
            seed: 17,
        }
    }

    #[test]
    fn paper_scale_structural_injection() {
        // p = 15 cliques on a 100-node graph, q = 2 -> exactly 30 labels
        let g = random_graph(100, 1);
        let (out, cliques) = inject_structural(&g, &spec(15, 2, 1, 10)).unwrap();
        let labeled: usize = out.labels.as_ref().unwrap().iter().map(|&l| l as usize).sum();
        assert_eq!(labeled, 30);
        assert_eq!(cliques.len(), 2);
        // each clique is fully connected
        for clique in &cliques {
            for i in 0..clique.len() {
                for j in (i + 1)..clique.len() {
                    assert!(out.has_edge(clique[i], clique[j]));
                }
            }
        }
        // original edges retained
        for (u, v) in g.undirected_edges() {
            assert!(out.has_edge(u, v));
        }
    }

    #[test]
    fn two_node_clique_adds_one_edge() {
        let g = random_graph(10, 2);
        let (out, cliques) = inject_structural(&g, &spec(2, 1, 1, 5)).unwrap();
        let (a, b) = (cliques[0][0], cliques[0][1]);
        assert!(out.has_edge(a, b));
        assert!(out.has_edge(b, a));
        let expected = if g.has_edge(a, b) { g.edge_count() } else { g.edge_count() + 1 };
        assert_eq!(out.edge_count(), expected);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let g = random_graph(60, 3);
        let s = spec(4, 3, 5, 8);
        let (a, ma) = inject_both(&g, &s).unwrap();
        let (b, mb) = inject_both(&g, &s).unwrap();
        assert_eq!(a.undirected_edges(), b.undirected_edges());
        assert_eq!(a.features.data(), b.features.data());
        assert_eq!(a.labels, b.labels);
        assert_eq!(ma.structural_cliques, mb.structural_cliques);
        assert_eq!(ma.feature_targets, mb.feature_targets);
    }

    #[test]
    fn feature_target_takes_a_sampled_candidate_row() {
        let g = random_graph(80, 4);
        let (out, targets) = inject_feature(&g, &spec(2, 1, 6, 50)).unwrap();
        for &t in &targets {
            let row = out.features.row(t);
            let found = (0..g.node_count())
                .filter(|&i| i != t)
                .any(|i| g.features.row(i) == row);
            assert!(found, "target {t} row must come from some other node");
        }
    }

    #[test]
    fn pool_of_one_takes_that_candidate() {
        let g = random_graph(5, 5);
        let (out, targets) = inject_feature(&g, &spec(2, 1, 1, 1)).unwrap();
        let t = targets[0];
        let row = out.features.row(t);
        let found = (0..5).filter(|&i| i != t).any(|i| g.features.row(i) == row);
        assert!(found);
    }

    #[test]
    fn identical_features_still_get_labeled() {
        let feats = Tensor::from_vec(6, 2, vec![[1.0, 2.0]; 6].concat());
        let (g, _) = Graph::build("flat", &[(0, 1), (2, 3)], feats, None).unwrap();
        let (out, targets) = inject_feature(&g, &spec(2, 1, 2, 3)).unwrap();
        for &t in &targets {
            assert_eq!(out.features.row(t), g.features.row(t));
            assert_eq!(out.labels.as_ref().unwrap()[t], 1);
        }
    }

    #[test]
    fn combined_injection_count_is_exact() {
        let g = random_graph(100, 6);
        let s = spec(5, 4, 20, 20);
        let (out, manifest) = inject_both(&g, &s).unwrap();
        let labeled: usize = out.labels.as_ref().unwrap().iter().map(|&l| l as usize).sum();
        assert_eq!(labeled, 5 * 4 + 20);
        // disjoint sets
        let clique_nodes: Vec<usize> = manifest.structural_cliques.concat();
        for t in &manifest.feature_targets {
            assert!(!clique_nodes.contains(t));
        }
    }

    #[test]
    fn insufficient_unlabeled_nodes_errors() {
        let g = random_graph(10, 7);
        assert!(inject_structural(&g, &spec(5, 3, 1, 5)).is_err());
    }
}
