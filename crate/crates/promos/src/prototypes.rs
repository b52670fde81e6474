//! Prototype codebooks and the losses built on them.
//!
//! Each branch owns a learnable `M x d` codebook. Soft assignments are
//! temperature softmaxes over negative squared Euclidean distances; the
//! distillation loss is the per-node KL from teacher-induced to
//! student-induced assignments (teacher side detached). Quantization snaps a
//! row to its nearest prototype (lowest index on ties). Reliability weights
//! compare a node's assignment against the relation-matrix row of its nearest
//! prototype and feed the commitment/refinement loss, whose two stop-gradient
//! terms route gradients to the adapter and the codebook respectively.

use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::tensor::{sqdist, Tensor, LOG_FLOOR};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct PrototypeCodebook {
    /// Prototype rows, `M x d`.
    pub protos: Tensor,
    pub temperature: f64,
}

impl PrototypeCodebook {
    pub fn new(protos: Tensor, temperature: f64) -> Result<Self> {
        if protos.rows() < 2 {
            return Err(Error::Invalid(format!(
                "codebook needs at least 2 prototypes, got {}",
                protos.rows()
            )));
        }
        if temperature <= 0.0 {
            return Err(Error::Invalid(format!("temperature must be positive, got {temperature}")));
        }
        protos.check_finite("codebook")?;
        Ok(PrototypeCodebook { protos, temperature })
    }

    pub fn size(&self) -> usize {
        self.protos.rows()
    }

    pub fn dim(&self) -> usize {
        self.protos.cols()
    }
}

/// Soft assignment rows: `softmax_m(-||z_i - p_m||^2 / tau)`, on the tape.
pub fn proto_distribution(tape: &mut Tape, z: Var, protos: Var, temperature: f64) -> Result<Var> {
    let d2 = tape.pairwise_sqdist(z, protos)?;
    let scaled = tape.scale(d2, -1.0 / temperature)?;
    tape.row_softmax(scaled)
}

/// Forward-only version of [`proto_distribution`].
pub fn proto_distribution_plain(z: &Tensor, book: &PrototypeCodebook) -> Tensor {
    z.pairwise_sqdist(&book.protos)
        .scale(-1.0 / book.temperature)
        .row_softmax()
}

/// Nearest prototype per row (lowest index on ties) and the quantized rows.
pub fn quantize(z: &Tensor, protos: &Tensor) -> (Vec<usize>, Tensor) {
    let n = z.rows();
    let mut indices = Vec::with_capacity(n);
    let mut rows = Tensor::zeros(n, protos.cols());
    for i in 0..n {
        let mut best = 0usize;
        let mut best_dist = sqdist(z.row(i), protos.row(0));
        for m in 1..protos.rows() {
            let d = sqdist(z.row(i), protos.row(m));
            if d < best_dist {
                best = m;
                best_dist = d;
            }
        }
        indices.push(best);
        rows.row_mut(i).copy_from_slice(protos.row(best));
    }
    (indices, rows)
}

/// Row-stochastic prototype-to-prototype relation matrix:
/// `Q[m, :] = softmax_{m'}(-||p_m - p_{m'}||^2 / tau)`.
pub fn relation_matrix(book: &PrototypeCodebook) -> Tensor {
    book.protos
        .pairwise_sqdist(&book.protos)
        .scale(-1.0 / book.temperature)
        .row_softmax()
}

/// Per-row KL divergence with the clamped-log convention. Zero entries of `p`
/// contribute exactly zero.
pub fn kl_rows(p: &Tensor, q: &Tensor) -> Vec<f64> {
    assert_eq!(p.shape(), q.shape());
    let mut out = Vec::with_capacity(p.rows());
    for i in 0..p.rows() {
        let mut s = 0.0;
        for (a, b) in p.row(i).iter().zip(q.row(i).iter()) {
            if *a > 0.0 {
                s += a * (a.max(LOG_FLOOR).ln() - b.max(LOG_FLOOR).ln());
            }
        }
        out.push(s);
    }
    out
}

#[derive(Debug, Clone)]
pub struct ReliabilityWeights {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

/// Sigmoid reweighting of nodes by how far their assignment distribution
/// strays from the relation-matrix row of their nearest prototype:
/// `w~_i = sigmoid(-beta (KL(q_i || Q[m*_i]) - mu))`, normalized over the
/// nodes of the current graph with an epsilon in the denominator.
pub fn reliability_weights(
    q: &Tensor,
    relation: &Tensor,
    nearest: &[usize],
    beta: f64,
    mu: f64,
    eps: f64,
) -> Result<ReliabilityWeights> {
    if beta < 0.0 {
        return Err(Error::Invalid(format!("beta must be >= 0, got {beta}")));
    }
    if q.rows() != nearest.len() {
        return Err(Error::Shape {
            op: "reliability_weights",
            detail: format!("{} assignment rows vs {} nearest indices", q.rows(), nearest.len()),
        });
    }
    let reference = relation.gather_rows(nearest);
    let kl = kl_rows(q, &reference);
    let raw: Vec<f64> = kl.iter().map(|&k| sigmoid(-beta * (k - mu))).collect();
    let total: f64 = raw.iter().sum();
    let denom = total + eps;
    let normalized = raw.iter().map(|&w| w / denom).collect();
    Ok(ReliabilityWeights { raw, normalized })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-node KL rows `KL(q_i || s_i)` on the tape, `n x 1`. `q` is expected to
/// be detached by the caller when it serves as a target.
pub fn kl_rows_on_tape(tape: &mut Tape, q: Var, s: Var) -> Result<Var> {
    let lq = tape.log_clamped(q)?;
    let ls = tape.log_clamped(s)?;
    let diff = tape.sub(lq, ls)?;
    let w = tape.mul(q, diff)?;
    tape.row_sum(w)
}

/// Distillation loss: mean over nodes of the summed per-branch KLs.
/// `pairs` holds `(teacher_assignment, student_assignment)` per branch; the
/// teacher side must already be detached.
pub fn psd_loss(tape: &mut Tape, pairs: &[(Var, Var)], n_nodes: usize) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Invalid("psd_loss needs at least one branch".into()));
    }
    let mut total: Option<Var> = None;
    for (q, s) in pairs {
        let rows = kl_rows_on_tape(tape, *q, *s)?;
        let branch = tape.sum(rows)?;
        total = Some(match total {
            None => branch,
            Some(t) => tape.add(t, branch)?,
        });
    }
    tape.scale(total.expect("non-empty"), 1.0 / n_nodes as f64)
}

/// One branch of the commitment/refinement loss:
/// `sum_i w_i (||z_i - sg[quant_i]||^2 + ||sg[z_i] - quant_i||^2)` where
/// `quant_i = protos[nearest_i]`. The first term can only move `z` (the
/// adapter upstream), the second only the codebook.
pub fn dcr_branch(
    tape: &mut Tape,
    z: Var,
    protos: Var,
    nearest: Rc<Vec<usize>>,
    weights: Var,
) -> Result<Var> {
    let quant = tape.gather_rows(protos, nearest)?;

    let quant_sg = tape.stop_grad(quant);
    let commit_diff = tape.sub(z, quant_sg)?;
    let commit_sq = tape.mul(commit_diff, commit_diff)?;
    let commit_rows = tape.row_sum(commit_sq)?;

    let z_sg = tape.stop_grad(z);
    let refine_diff = tape.sub(z_sg, quant)?;
    let refine_sq = tape.mul(refine_diff, refine_diff)?;
    let refine_rows = tape.row_sum(refine_sq)?;

    let rows = tape.add(commit_rows, refine_rows)?;
    let weighted = tape.mul_col(weights, rows)?;
    tape.sum(weighted)
}

/// Negative symmetric KL between the prototype distributions of the two
/// most-activated students' outputs; minimizing it pushes them apart.
pub fn div_loss(tape: &mut Tape, a_probs: Var, b_probs: Var, n_nodes: usize) -> Result<Var> {
    let kab = kl_rows_on_tape(tape, a_probs, b_probs)?;
    let kba = kl_rows_on_tape(tape, b_probs, a_probs)?;
    let sum_ab = tape.sum(kab)?;
    let sum_ba = tape.sum(kba)?;
    let both = tape.add(sum_ab, sum_ba)?;
    tape.scale(both, -0.5 / n_nodes as f64)
}
