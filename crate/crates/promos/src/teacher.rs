//! Frozen GCN teacher and its trainable adapter.
//!
//! The encoder is a two-layer GCN with symmetric-normalized propagation and
//! self-loops. It is pretrained with a two-view contrastive objective (seeded
//! edge dropping + feature masking, normalized-embedding InfoNCE) and then
//! frozen; a single affine adapter remains the only trainable piece on the
//! teacher side. Externally pretrained encoders can be imported through the
//! checkpoint container as long as the declared shapes match.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::graph::{Graph, SparseMatrix};
use crate::rng::{uniform_symmetric, SeedTree, Stream};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct TeacherModel {
    /// First GCN layer, `d_in x hidden`.
    pub w1: Tensor,
    /// Second GCN layer, `hidden x d_embed`.
    pub w2: Tensor,
    /// Adapter weight, `d_embed x d_out`.
    pub adapter_w: Tensor,
    /// Adapter bias, `1 x d_out`.
    pub adapter_b: Tensor,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SslConfig {
    pub edge_drop_rate: f64,
    pub feature_mask_rate: f64,
    pub temperature: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            edge_drop_rate: 0.2,
            feature_mask_rate: 0.2,
            temperature: 0.5,
            epochs: 20,
            lr: 1e-2,
            seed: 0,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(0.0..1.0).contains(&self.edge_drop_rate) {
            problems.push(format!("edge_drop_rate must be in [0, 1), got {}", self.edge_drop_rate));
        }
        if !(0.0..1.0).contains(&self.feature_mask_rate) {
            problems.push(format!(
                "feature_mask_rate must be in [0, 1), got {}",
                self.feature_mask_rate
            ));
        }
        if self.temperature <= 0.0 {
            problems.push(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.lr <= 0.0 {
            problems.push(format!("lr must be positive, got {}", self.lr));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

impl TeacherModel {
    pub fn init(d_in: usize, hidden: usize, d_embed: usize, d_out: usize, rng: &mut Stream) -> Self {
        let w1 = init_uniform(d_in, hidden, rng);
        let w2 = init_uniform(hidden, d_embed, rng);
        // identity adapter when square: Z_T starts as U_T
        let adapter_w = if d_embed == d_out {
            Tensor::eye(d_embed)
        } else {
            init_uniform(d_embed, d_out, rng)
        };
        TeacherModel {
            w1,
            w2,
            adapter_w,
            adapter_b: Tensor::zeros(1, d_out),
            frozen: false,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.adapter_w.cols()
    }

    /// Two propagation rounds with a ReLU between:
    /// `U = A_hat relu(A_hat X W1) W2`.
    pub fn gcn_forward(&self, adj: &SparseMatrix, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "gcn_forward",
                detail: format!(
                    "features have {} columns, encoder expects {}",
                    x.cols(),
                    self.input_dim()
                ),
            });
        }
        if adj.n() != x.rows() {
            return Err(Error::Shape {
                op: "gcn_forward",
                detail: format!("adjacency is {0}x{0}, features have {1} rows", adj.n(), x.rows()),
            });
        }
        let h1 = adj.matmul(&x.matmul(&self.w1)).relu();
        Ok(adj.matmul(&h1).matmul(&self.w2))
    }

    /// Adapter map `Z = U W_a + b_a`.
    pub fn adapt(&self, u: &Tensor) -> Result<Tensor> {
        if u.cols() != self.adapter_w.rows() {
            return Err(Error::Shape {
                op: "adapt",
                detail: format!(
                    "input has {} columns, adapter expects {}",
                    u.cols(),
                    self.adapter_w.rows()
                ),
            });
        }
        Ok(u.matmul(&self.adapter_w).add_row(&self.adapter_b))
    }
}

fn init_uniform(rows: usize, cols: usize, rng: &mut Stream) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| uniform_symmetric(rng, bound)).collect();
    Tensor::from_vec(rows, cols, data)
}

/// Encoder forward on a tape (used during pretraining, where the encoder
/// weights are still live).
pub fn gcn_forward_on_tape(
    tape: &mut Tape,
    adj: Rc<SparseMatrix>,
    x: Var,
    w1: Var,
    w2: Var,
) -> Result<Var> {
    let xw = tape.matmul(x, w1)?;
    let p1 = tape.spmm(adj.clone(), xw)?;
    let h1 = tape.relu(p1)?;
    let p2 = tape.spmm(adj, h1)?;
    tape.matmul(p2, w2)
}

/// Adapter forward on a tape; the caller decides whether `u` is a constant
/// (frozen encoder) or a live node.
pub fn adapt_on_tape(tape: &mut Tape, u: Var, adapter_w: Var, adapter_b: Var) -> Result<Var> {
    let uw = tape.matmul(u, adapter_w)?;
    tape.add_row(uw, adapter_b)
}

struct View {
    adj: Rc<SparseMatrix>,
    masked: Tensor,
}

fn make_view(g: &Graph, cfg: &SslConfig, rng: &mut Stream) -> View {
    let kept: Vec<(usize, usize)> = g
        .undirected_edges()
        .into_iter()
        .filter(|_| rng.random::<f64>() >= cfg.edge_drop_rate)
        .collect();
    let adj = Rc::new(SparseMatrix::normalized_from_pairs(g.node_count(), &kept));
    let mut masked = g.features.clone();
    for v in masked.data_mut().iter_mut() {
        if rng.random::<f64>() < cfg.feature_mask_rate {
            *v = 0.0;
        }
    }
    View { adj, masked }
}

/// Symmetric InfoNCE between row-normalized embeddings of two views.
fn infonce(tape: &mut Tape, u1: Var, u2: Var, temperature: f64) -> Result<Var> {
    let n = tape.value(u1).rows();
    let n1 = tape.row_normalize(u1)?;
    let n2 = tape.row_normalize(u2)?;
    let n2t = tape.transpose(n2)?;
    let sims = tape.matmul(n1, n2t)?;
    let logits = tape.scale(sims, 1.0 / temperature)?;

    let lsm12 = tape.row_log_softmax(logits)?;
    let d12 = tape.diag(lsm12)?;
    let s12 = tape.sum(d12)?;

    let logits_t = tape.transpose(logits)?;
    let lsm21 = tape.row_log_softmax(logits_t)?;
    let d21 = tape.diag(lsm21)?;
    let s21 = tape.sum(d21)?;

    let both = tape.add(s12, s21)?;
    tape.scale(both, -0.5 / n as f64)
}

/// Contrastive pretraining over the training graphs, iterating them
/// sequentially each epoch. Returns the frozen model plus the per-step loss
/// log. With `epochs = 0` the seeded random initialization is returned
/// frozen, which is the no-pretraining ablation entry point.
pub fn ssl_pretrain(
    graphs: &[&Graph],
    d_hidden: usize,
    d_embed: usize,
    d_out: usize,
    cfg: &SslConfig,
) -> Result<(TeacherModel, Vec<(usize, String, f64)>)> {
    cfg.validate()?;
    if graphs.is_empty() {
        return Err(Error::Invalid("pretraining needs at least one graph".into()));
    }
    let d_in = graphs[0].features.cols();
    for g in graphs {
        if g.features.cols() != d_in {
            return Err(Error::Shape {
                op: "ssl_pretrain",
                detail: format!(
                    "graph {} has {} feature columns, expected {d_in} (unify first)",
                    g.name,
                    g.features.cols()
                ),
            });
        }
    }

    let tree = SeedTree::new(cfg.seed);
    let mut init_rng = tree.stream("teacher");
    let mut model = TeacherModel::init(d_in, d_hidden, d_embed, d_out, &mut init_rng);

    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        for (gi, g) in graphs.iter().enumerate() {
            let mut aug = tree.stream_n("ssl-aug", (epoch * graphs.len() + gi) as u64);
            let v1 = make_view(g, cfg, &mut aug);
            let v2 = make_view(g, cfg, &mut aug);

            let mut tape = Tape::new();
            let w1 = tape.param("teacher.w1", &model.w1);
            let w2 = tape.param("teacher.w2", &model.w2);
            let x1 = tape.constant(v1.masked);
            let x2 = tape.constant(v2.masked);
            let loss = (|| -> Result<Var> {
                let u1 = gcn_forward_on_tape(&mut tape, v1.adj, x1, w1, w2)?;
                let u2 = gcn_forward_on_tape(&mut tape, v2.adj, x2, w1, w2)?;
                infonce(&mut tape, u1, u2, cfg.temperature)
            })()
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::Invalid(format!(
                    "non-finite pretraining loss at epoch {epoch} on graph {}",
                    g.name
                )),
                other => other,
            })?;

            let grads = tape.backward(loss)?;
            let lv = tape.value(loss).scalar_value();
            log.push((epoch, g.name.clone(), lv));

            for (name, tensor) in [("teacher.w1", &mut model.w1), ("teacher.w2", &mut model.w2)] {
                let grad = &grads[name];
                for (p, gv) in tensor.data_mut().iter_mut().zip(grad.data().iter()) {
                    *p -= cfg.lr * gv;
                }
            }
        }
    }

    model.frozen = true;
    Ok((model, log))
}

/// Forward-only contrastive loss of a model on one graph, using the same
/// augmentation stream layout as training step `(epoch, graph)`.
pub fn ssl_loss(
    model: &TeacherModel,
    g: &Graph,
    cfg: &SslConfig,
    epoch: usize,
    gi: usize,
    n_graphs: usize,
) -> Result<f64> {
    let tree = SeedTree::new(cfg.seed);
    let mut aug = tree.stream_n("ssl-aug", (epoch * n_graphs + gi) as u64);
    let v1 = make_view(g, cfg, &mut aug);
    let v2 = make_view(g, cfg, &mut aug);
    let mut tape = Tape::new();
    let w1 = tape.constant(model.w1.clone());
    let w2 = tape.constant(model.w2.clone());
    let x1 = tape.constant(v1.masked);
    let x2 = tape.constant(v2.masked);
    let u1 = gcn_forward_on_tape(&mut tape, v1.adj, x1, w1, w2)?;
    let u2 = gcn_forward_on_tape(&mut tape, v2.adj, x2, w1, w2)?;
    let loss = infonce(&mut tape, u1, u2, cfg.temperature)?;
    Ok(tape.value(loss).scalar_value())
}
