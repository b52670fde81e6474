//! Seeded two-block stochastic block model with Gaussian cluster features.
//!
//! Used by the `gen-synthetic` subcommand to produce desk-scale train/test
//! corpora. All graphs drawn from one generator share the same block means so
//! their feature spaces align, which is what a detector transferring across
//! graph instances of a domain sees.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::graph::Graph;
use crate::rng::{SeedTree, Stream};
use crate::tensor::Tensor;
use crate::Result;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthSpec {
    pub nodes: usize,
    pub feature_dim: usize,
    /// Within-block edge probability.
    pub p_in: f64,
    /// Across-block edge probability.
    pub p_out: f64,
    /// Euclidean distance between the two block feature means.
    pub separation: f64,
    /// Per-coordinate feature noise std.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            nodes: 300,
            feature_dim: 32,
            p_in: 0.08,
            p_out: 0.01,
            separation: 3.0,
            noise: 1.0,
        }
    }
}

/// Draw the two shared block means: a random unit direction at +/- sep/2.
pub fn block_means(spec: &SynthSpec, rng: &mut Stream) -> (Vec<f64>, Vec<f64>) {
    let mut dir: Vec<f64> = (0..spec.feature_dim)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    for v in dir.iter_mut() {
        *v /= norm;
    }
    let half = spec.separation / 2.0;
    let mean0: Vec<f64> = dir.iter().map(|v| v * half).collect();
    let mean1: Vec<f64> = dir.iter().map(|v| -v * half).collect();
    (mean0, mean1)
}

/// One graph instance: nodes `0..n/2` form block 0, the rest block 1.
pub fn generate(
    name: &str,
    spec: &SynthSpec,
    means: &(Vec<f64>, Vec<f64>),
    rng: &mut Stream,
) -> Result<Graph> {
    let n = spec.nodes;
    let half = n / 2;
    let mut edges = Vec::new();

    // within block 0: pairs (i, j), i < j < half
    sample_pairs(rng, spec.p_in, half * half.saturating_sub(1) / 2, |idx| {
        decode_triangular(idx, half)
    })
    .into_iter()
    .for_each(|e| edges.push(e));

    // within block 1
    let size1 = n - half;
    sample_pairs(rng, spec.p_in, size1 * size1.saturating_sub(1) / 2, |idx| {
        let (i, j) = decode_triangular(idx, size1);
        (half + i, half + j)
    })
    .into_iter()
    .for_each(|e| edges.push(e));

    // across blocks
    sample_pairs(rng, spec.p_out, half * size1, |idx| {
        (idx / size1, half + idx % size1)
    })
    .into_iter()
    .for_each(|e| edges.push(e));

    let mut data = Vec::with_capacity(n * spec.feature_dim);
    for i in 0..n {
        let mean = if i < half { &means.0 } else { &means.1 };
        for k in 0..spec.feature_dim {
            let z: f64 = StandardNormal.sample(rng);
            data.push(mean[k] + spec.noise * z);
        }
    }

    let (graph, _) = Graph::build(name, &edges, Tensor::from_vec(n, spec.feature_dim, data), None)?;
    Ok(graph)
}

/// Bernoulli(p) over `total` linearly indexed pairs via geometric skipping,
/// O(expected edges) instead of O(total).
fn sample_pairs(
    rng: &mut Stream,
    p: f64,
    total: usize,
    decode: impl Fn(usize) -> (usize, usize),
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    if total == 0 || p <= 0.0 {
        return out;
    }
    if p >= 1.0 {
        for idx in 0..total {
            out.push(decode(idx));
        }
        return out;
    }
    let log1mp = (1.0 - p).ln();
    let mut pos = 0usize;
    loop {
        let u: f64 = rng.random::<f64>();
        let skip = ((1.0 - u).ln() / log1mp).floor() as usize;
        pos = match pos.checked_add(skip) {
            Some(p) => p,
            None => break,
        };
        if pos >= total {
            break;
        }
        out.push(decode(pos));
        pos += 1;
    }
    out
}

/// Map a linear index to the pair (i, j), i < j < m, in lexicographic order.
fn decode_triangular(idx: usize, m: usize) -> (usize, usize) {
    let mut i = 0usize;
    let mut remaining = idx;
    let mut row_len = m - 1;
    while remaining >= row_len {
        remaining -= row_len;
        i += 1;
        row_len -= 1;
    }
    (i, i + 1 + remaining)
}

/// Convenience used by the CLI: shared means plus per-graph streams.
pub fn generate_corpus(
    spec: &SynthSpec,
    train_graphs: usize,
    test_graphs: usize,
    seed: u64,
) -> Result<(Vec<Graph>, Vec<Graph>)> {
    let tree = SeedTree::new(seed);
    let mut mean_rng = tree.stream("synthetic");
    let means = block_means(spec, &mut mean_rng);
    let mut train = Vec::new();
    for i in 0..train_graphs {
        let mut rng = tree.stream_n("synthetic", 1 + i as u64);
        train.push(generate(&format!("train-{i}"), spec, &means, &mut rng)?);
    }
    let mut test = Vec::new();
    for i in 0..test_graphs {
        let mut rng = tree.stream_n("synthetic", 1001 + i as u64);
        test.push(generate(&format!("test-{i}"), spec, &means, &mut rng)?);
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangular_decode_is_lexicographic() {
        let m = 5;
        let mut expected = Vec::new();
        for i in 0..m {
            for j in (i + 1)..m {
                expected.push((i, j));
            }
        }
        let decoded: Vec<_> = (0..expected.len()).map(|k| decode_triangular(k, m)).collect();
        assert_eq!(decoded, expected);
    }

    #[test]
    fn edge_density_tracks_probabilities() {
        let spec = SynthSpec { nodes: 400, p_in: 0.1, p_out: 0.01, ..Default::default() };
        let (train, _) = generate_corpus(&spec, 1, 0, 5).unwrap();
        let g = &train[0];
        let within_expected = 2.0 * (200.0 * 199.0 / 2.0) * 0.1;
        let across_expected = 200.0 * 200.0 * 0.01;
        let total = g.edge_count() as f64;
        let expected = within_expected + across_expected;
        assert!((total - expected).abs() < 0.25 * expected, "edges {total} vs ~{expected}");
    }

    #[test]
    fn corpus_is_deterministic_and_blocks_separated() {
        let spec = SynthSpec::default();
        let (a, _) = generate_corpus(&spec, 2, 1, 9).unwrap();
        let (b, _) = generate_corpus(&spec, 2, 1, 9).unwrap();
        assert_eq!(a[0].features.data(), b[0].features.data());
        assert_eq!(a[1].undirected_edges(), b[1].undirected_edges());

        // block means are well separated relative to noise
        let g = &a[0];
        let half = g.node_count() / 2;
        let d = g.features.cols();
        let mut m0 = vec![0.0; d];
        let mut m1 = vec![0.0; d];
        for i in 0..half {
            for k in 0..d {
                m0[k] += g.features.at(i, k) / half as f64;
            }
        }
        for i in half..g.node_count() {
            for k in 0..d {
                m1[k] += g.features.at(i, k) / (g.node_count() - half) as f64;
            }
        }
        let dist: f64 = m0
            .iter()
            .zip(m1.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 2.0, "block mean distance {dist}");
    }
}
