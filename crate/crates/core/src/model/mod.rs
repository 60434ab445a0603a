//! Pipeline stage 5: encoders, decoder, self-supervised objectives, SGD
//! training loop, and per-epoch checkpoints.
//!
//! Everything is 64-bit and single-threaded so checkpoints are
//! byte-identical across reruns of the same seed.

mod tape;

pub use tape::{softmax_rows, Matrix, Tape, Var};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batching::{Batch, NeighborEvent};
use crate::ingest::{EntityKind, NodeRef, OpType};
use crate::Real;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {what}")]
    Shape { what: String },
    #[error("bad model config: {what}")]
    BadConfig { what: String },
    #[error("training set is empty (no batches with loss-eligible items)")]
    EmptyTrainSet,
    #[error("non-finite gradient in parameter {param}; epoch aborted")]
    NonFiniteGradient { param: String },
    #[error("non-finite loss at epoch {epoch}; epoch aborted")]
    NonFiniteLoss { epoch: u64 },
    #[error("neighbor history or cached features missing for node {node}")]
    MissingNeighborData { node: String },
    #[error("encoder requires a neighbor-index context but none was provided")]
    MissingTgnContext,
    #[error("checkpoint io at {path}: {message}")]
    CheckpointIo { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    /// Identity: decoder sees raw features.
    None,
    Linear,
    Sage,
    /// Mean aggregation like sage, but neighborhoods come from the
    /// last-neighbor snapshots of prior batches instead of batch edges.
    Tgn,
}

impl EncoderKind {
    pub fn parse(s: &str) -> Result<EncoderKind, ModelError> {
        match s {
            "none" => Ok(EncoderKind::None),
            "linear" => Ok(EncoderKind::Linear),
            "sage" => Ok(EncoderKind::Sage),
            "tgn" => Ok(EncoderKind::Tgn),
            other => Err(ModelError::BadConfig { what: format!("unknown encoder {other:?}") }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn parse(s: &str) -> Result<Activation, ModelError> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(ModelError::BadConfig { what: format!("unknown activation {other:?}") }),
        }
    }

    fn apply(&self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(v),
            Activation::Tanh => tape.tanh(v),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    Mlp,
}

impl DecoderKind {
    pub fn parse(s: &str) -> Result<DecoderKind, ModelError> {
        match s {
            "mlp" => Ok(DecoderKind::Mlp),
            other => Err(ModelError::BadConfig { what: format!("unknown decoder {other:?}") }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    EdgeType,
    NodeType,
    FeatRecon,
}

impl Objective {
    pub fn parse(s: &str) -> Result<Objective, ModelError> {
        match s {
            "edge_type" => Ok(Objective::EdgeType),
            "node_type" => Ok(Objective::NodeType),
            "feat_recon" => Ok(Objective::FeatRecon),
            other => Err(ModelError::BadConfig { what: format!("unknown objective {other:?}") }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub sage_layers: usize,
    pub activation: Activation,
    pub decoder: DecoderKind,
    pub objective: Objective,
    pub node_hid_dim: usize,
    pub lr: Real,
    pub epochs: u64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.node_hid_dim < 4 {
            return Err(ModelError::BadConfig {
                what: format!("node_hid_dim must be >= 4, got {}", self.node_hid_dim),
            });
        }
        if !(1..=2).contains(&self.sage_layers) {
            return Err(ModelError::BadConfig {
                what: format!("sage_layers must be 1 or 2, got {}", self.sage_layers),
            });
        }
        if self.epochs < 1 {
            return Err(ModelError::BadConfig { what: "epochs must be >= 1".into() });
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(ModelError::BadConfig { what: format!("lr must be positive, got {}", self.lr) });
        }
        Ok(())
    }

    /// Encoder output width, which is also the decoder input width for
    /// node-level objectives.
    fn enc_out_dim(&self, in_dim: usize) -> usize {
        match self.encoder {
            EncoderKind::None => in_dim,
            _ => self.node_hid_dim,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub params: Vec<Parameter>,
}

impl ParamSet {
    pub fn named(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }
}

pub const N_OPS: usize = OpType::REAL.len();
pub const N_KINDS: usize = EntityKind::ALL.len();

/// Xavier-uniform weights, zero biases, drawn in a fixed architecture
/// order so the same seed always yields the same parameters.
pub fn init_params(cfg: &ModelConfig, in_dim: usize) -> Result<ParamSet, ModelError> {
    cfg.validate()?;
    if in_dim == 0 {
        return Err(ModelError::BadConfig { what: "feature dimension must be positive".into() });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut params = Vec::new();
    let push_pair = |rng: &mut ChaCha12Rng, params: &mut Vec<Parameter>, name: &str, rows: usize, cols: usize| {
        let bound = (6.0 / (rows + cols) as Real).sqrt();
        let w = Matrix {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
        };
        params.push(Parameter { name: format!("{name}.w"), grad: Matrix::zeros(rows, cols), value: w });
        params.push(Parameter {
            name: format!("{name}.b"),
            value: Matrix::zeros(1, cols),
            grad: Matrix::zeros(1, cols),
        });
    };

    let hid = cfg.node_hid_dim;
    match cfg.encoder {
        EncoderKind::None => {}
        EncoderKind::Linear => push_pair(&mut rng, &mut params, "enc", in_dim, hid),
        EncoderKind::Sage | EncoderKind::Tgn => {
            let mut d = in_dim;
            for layer in 1..=cfg.sage_layers {
                push_pair(&mut rng, &mut params, &format!("sage{layer}"), 2 * d, hid);
                d = hid;
            }
        }
    }
    let enc_out = cfg.enc_out_dim(in_dim);
    let dec_in = match cfg.objective {
        Objective::EdgeType => 2 * enc_out,
        Objective::NodeType | Objective::FeatRecon => enc_out,
    };
    let dec_out = match cfg.objective {
        Objective::EdgeType => N_OPS,
        Objective::NodeType => N_KINDS,
        Objective::FeatRecon => in_dim,
    };
    push_pair(&mut rng, &mut params, "dec1", dec_in, hid);
    push_pair(&mut rng, &mut params, "dec2", hid, dec_out);
    Ok(ParamSet { params })
}

/// Last-seen raw feature row per node, maintained across batches so
/// snapshot neighbors outside the current batch still have features.
pub type FeatureCache = BTreeMap<NodeRef, Vec<Real>>;

/// Precomputed encoder input for the snapshot-neighborhood encoder: batch
/// rows first, then one row per snapshot neighbor absent from the batch.
#[derive(Debug, Clone)]
pub struct TgnContext {
    pub features: Matrix,
    /// Augmented-row index lists; rows beyond the batch have no history.
    pub in_lists: Vec<Vec<usize>>,
    pub n_batch_rows: usize,
}

pub fn build_tgn_context(
    batch: &Batch,
    x: &Matrix,
    snapshot: &BTreeMap<NodeRef, Vec<NeighborEvent>>,
    cache: &FeatureCache,
) -> Result<TgnContext, ModelError> {
    if x.rows != batch.nodes.len() {
        return Err(ModelError::Shape {
            what: format!("feature rows {} != batch nodes {}", x.rows, batch.nodes.len()),
        });
    }
    let mut row_of: BTreeMap<&NodeRef, usize> = BTreeMap::new();
    for (r, row) in batch.nodes.iter().enumerate() {
        row_of.entry(&row.node).or_insert(r);
    }
    let mut features = x.clone();
    let mut extra_of: BTreeMap<NodeRef, usize> = BTreeMap::new();
    let mut in_lists: Vec<Vec<usize>> = vec![Vec::new(); batch.nodes.len()];

    for (r, row) in batch.nodes.iter().enumerate() {
        let history = snapshot
            .get(&row.node)
            .ok_or_else(|| ModelError::MissingNeighborData { node: row.node.to_string() })?;
        for ev in history {
            let idx = if let Some(&br) = row_of.get(&ev.neighbor) {
                br
            } else if let Some(&er) = extra_of.get(&ev.neighbor) {
                er
            } else {
                let feat = cache
                    .get(&ev.neighbor)
                    .ok_or_else(|| ModelError::MissingNeighborData { node: ev.neighbor.to_string() })?;
                if feat.len() != x.cols {
                    return Err(ModelError::Shape {
                        what: format!("cached feature width {} != {}", feat.len(), x.cols),
                    });
                }
                let idx = features.rows;
                features.data.extend_from_slice(feat);
                features.rows += 1;
                extra_of.insert(ev.neighbor.clone(), idx);
                idx
            };
            in_lists[r].push(idx);
        }
    }
    in_lists.resize(features.rows, Vec::new());
    Ok(TgnContext { features, in_lists, n_batch_rows: batch.nodes.len() })
}

/// Record the batch's rows as each node's latest-seen features.
pub fn update_feature_cache(cache: &mut FeatureCache, batch: &Batch, x: &Matrix) {
    for (r, row) in batch.nodes.iter().enumerate() {
        cache.insert(row.node.clone(), x.row(r).to_vec());
    }
}

/// What a per-item loss refers to, for node-level score attribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossItem {
    Edge { src_row: usize, dst_row: usize },
    Node { row: usize },
}

pub struct Forward {
    tape: Tape,
    root: Var,
    param_vars: Vec<Var>,
    /// Mean loss over items; 0.0 when the batch has no eligible items.
    pub loss: Real,
    pub per_item: Vec<Real>,
    pub items: Vec<LossItem>,
}

fn encode_on_tape(
    cfg: &ModelConfig,
    tape: &mut Tape,
    param_vars: &[Var],
    params: &ParamSet,
    batch: &Batch,
    x_var: Var,
    tgn: Option<&TgnContext>,
) -> Result<Var, ModelError> {
    let var_of = |name: &str| -> Var {
        let idx = params.params.iter().position(|p| p.name == name).expect("param present");
        param_vars[idx]
    };
    Ok(match cfg.encoder {
        EncoderKind::None => x_var,
        EncoderKind::Linear => {
            let h = tape.matmul(x_var, var_of("enc.w"));
            let h = tape.add_row(h, var_of("enc.b"));
            cfg.activation.apply(tape, h)
        }
        EncoderKind::Sage => {
            let mut in_lists: Vec<Vec<usize>> = vec![Vec::new(); batch.nodes.len()];
            for e in &batch.edges {
                in_lists[e.dst_row].push(e.src_row);
            }
            let mut h = x_var;
            for layer in 1..=cfg.sage_layers {
                let m = tape.mean_in_rows(h, in_lists.clone());
                let cat = tape.concat_cols(h, m);
                let z = tape.matmul(cat, var_of(&format!("sage{layer}.w")));
                let z = tape.add_row(z, var_of(&format!("sage{layer}.b")));
                h = cfg.activation.apply(tape, z);
            }
            h
        }
        EncoderKind::Tgn => {
            let ctx = tgn.ok_or(ModelError::MissingTgnContext)?;
            if ctx.n_batch_rows != batch.nodes.len() {
                return Err(ModelError::Shape {
                    what: format!(
                        "tgn context rows {} != batch nodes {}",
                        ctx.n_batch_rows,
                        batch.nodes.len()
                    ),
                });
            }
            let mut h = tape.leaf(ctx.features.clone());
            for layer in 1..=cfg.sage_layers {
                let m = tape.mean_in_rows(h, ctx.in_lists.clone());
                let cat = tape.concat_cols(h, m);
                let z = tape.matmul(cat, var_of(&format!("sage{layer}.w")));
                let z = tape.add_row(z, var_of(&format!("sage{layer}.b")));
                h = cfg.activation.apply(tape, z);
            }
            tape.gather_rows(h, (0..ctx.n_batch_rows).collect())
        }
    })
}

fn mlp_on_tape(
    cfg: &ModelConfig,
    tape: &mut Tape,
    param_vars: &[Var],
    params: &ParamSet,
    input: Var,
) -> Var {
    let var_of = |name: &str| -> Var {
        let idx = params.params.iter().position(|p| p.name == name).expect("param present");
        param_vars[idx]
    };
    let DecoderKind::Mlp = cfg.decoder;
    let h = tape.matmul(input, var_of("dec1.w"));
    let h = tape.add_row(h, var_of("dec1.b"));
    let h = cfg.activation.apply(tape, h);
    let out = tape.matmul(h, var_of("dec2.w"));
    tape.add_row(out, var_of("dec2.b"))
}

/// Full forward pass: encode, decode, per-item losses, mean loss. Pseudo
/// root edges carry no class and are excluded from the edge-type objective.
pub fn forward_loss(
    cfg: &ModelConfig,
    params: &ParamSet,
    batch: &Batch,
    x: &Matrix,
    tgn: Option<&TgnContext>,
) -> Result<Forward, ModelError> {
    cfg.validate()?;
    if x.rows != batch.nodes.len() {
        return Err(ModelError::Shape {
            what: format!("feature rows {} != batch nodes {}", x.rows, batch.nodes.len()),
        });
    }
    let mut tape = Tape::new();
    let param_vars: Vec<Var> = params.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
    let x_var = tape.leaf(x.clone());
    let h = encode_on_tape(cfg, &mut tape, &param_vars, params, batch, x_var, tgn)?;

    let (items, losses_var): (Vec<LossItem>, Option<Var>) = match cfg.objective {
        Objective::EdgeType => {
            let eligible: Vec<&crate::batching::BatchEdge> =
                batch.edges.iter().filter(|e| e.op != OpType::PseudoRoot).collect();
            if eligible.is_empty() {
                (Vec::new(), None)
            } else {
                let src: Vec<usize> = eligible.iter().map(|e| e.src_row).collect();
                let dst: Vec<usize> = eligible.iter().map(|e| e.dst_row).collect();
                let targets: Vec<usize> = eligible
                    .iter()
                    .map(|e| e.op.class_index().expect("real ops only"))
                    .collect();
                let hs = tape.gather_rows(h, src.clone());
                let hd = tape.gather_rows(h, dst.clone());
                let cat = tape.concat_cols(hs, hd);
                let logits = mlp_on_tape(cfg, &mut tape, &param_vars, params, cat);
                let losses = tape.softmax_xent(logits, targets);
                let items = eligible
                    .iter()
                    .map(|e| LossItem::Edge { src_row: e.src_row, dst_row: e.dst_row })
                    .collect();
                (items, Some(losses))
            }
        }
        Objective::NodeType => {
            if batch.nodes.is_empty() {
                (Vec::new(), None)
            } else {
                let targets: Vec<usize> =
                    batch.nodes.iter().map(|n| n.entity.kind.index()).collect();
                let logits = mlp_on_tape(cfg, &mut tape, &param_vars, params, h);
                let losses = tape.softmax_xent(logits, targets);
                let items = (0..batch.nodes.len()).map(|row| LossItem::Node { row }).collect();
                (items, Some(losses))
            }
        }
        Objective::FeatRecon => {
            if batch.nodes.is_empty() {
                (Vec::new(), None)
            } else {
                let pred = mlp_on_tape(cfg, &mut tape, &param_vars, params, h);
                let losses = tape.mse_rows(pred, x.clone());
                let items = (0..batch.nodes.len()).map(|row| LossItem::Node { row }).collect();
                (items, Some(losses))
            }
        }
    };

    let (root, per_item, loss) = match losses_var {
        Some(lv) => {
            let per_item = tape.value(lv).data.clone();
            let root = tape.mean_all(lv);
            let loss = tape.value(root).data[0];
            (root, per_item, loss)
        }
        None => {
            let root = tape.leaf(Matrix { rows: 1, cols: 1, data: vec![0.0] });
            (root, Vec::new(), 0.0)
        }
    };
    Ok(Forward { tape, root, param_vars, loss, per_item, items })
}

/// Encoder output only, for inspection and tests.
pub fn encode_values(
    cfg: &ModelConfig,
    params: &ParamSet,
    batch: &Batch,
    x: &Matrix,
    tgn: Option<&TgnContext>,
) -> Result<Matrix, ModelError> {
    let mut tape = Tape::new();
    let param_vars: Vec<Var> = params.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
    let x_var = tape.leaf(x.clone());
    let h = encode_on_tape(cfg, &mut tape, &param_vars, params, batch, x_var, tgn)?;
    Ok(tape.value(h).clone())
}

/// Reverse pass plus one plain gradient-descent step; grads are stored on
/// the parameters and the tape is consumed.
pub fn backward_and_step(
    fwd: Forward,
    params: &mut ParamSet,
    lr: Real,
) -> Result<(), ModelError> {
    let grads = fwd.tape.backward(fwd.root);
    for (p, var) in params.params.iter_mut().zip(&fwd.param_vars) {
        let g = &grads[var.index()];
        if !g.all_finite() {
            return Err(ModelError::NonFiniteGradient { param: p.name.clone() });
        }
        p.grad = g.clone();
        for (v, gv) in p.value.data.iter_mut().zip(&p.grad.data) {
            *v -= lr * gv;
        }
    }
    Ok(())
}

/// One training input: a batch, its node features, and (for the snapshot
/// encoder) the precomputed neighbor context.
pub struct TrainItem {
    pub batch: Batch,
    pub x: Matrix,
    pub tgn: Option<TgnContext>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    pub params: Vec<(String, Matrix)>,
    pub train_loss: Real,
    pub val_loss: Real,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    epoch: u64,
    train_loss: Real,
    val_loss: Real,
    params: Vec<ParamShape>,
}

#[derive(Serialize, Deserialize)]
struct ParamShape {
    name: String,
    rows: usize,
    cols: usize,
}

impl Checkpoint {
    pub fn param_set(&self) -> ParamSet {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|(name, value)| Parameter {
                    name: name.clone(),
                    grad: Matrix::zeros(value.rows, value.cols),
                    value: value.clone(),
                })
                .collect(),
        }
    }

    /// One JSON header line, then the matrices as little-endian f64 runs in
    /// header order.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let fail = |message: String| ModelError::CheckpointIo { path: path.to_path_buf(), message };
        let header = CheckpointHeader {
            epoch: self.epoch,
            train_loss: self.train_loss,
            val_loss: self.val_loss,
            params: self
                .params
                .iter()
                .map(|(name, m)| ParamShape { name: name.clone(), rows: m.rows, cols: m.cols })
                .collect(),
        };
        let mut w = BufWriter::new(File::create(path).map_err(|e| fail(e.to_string()))?);
        serde_json::to_writer(&mut w, &header).map_err(|e| fail(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| fail(e.to_string()))?;
        for (_, m) in &self.params {
            for v in &m.data {
                w.write_all(&v.to_le_bytes()).map_err(|e| fail(e.to_string()))?;
            }
        }
        w.flush().map_err(|e| fail(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Checkpoint, ModelError> {
        let fail = |message: String| ModelError::CheckpointIo { path: path.to_path_buf(), message };
        let mut r = BufReader::new(File::open(path).map_err(|e| fail(e.to_string()))?);
        let mut header_bytes = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            match r.read(&mut byte).map_err(|e| fail(e.to_string()))? {
                0 => return Err(fail("missing header line".into())),
                _ if byte[0] == b'\n' => break,
                _ => header_bytes.push(byte[0]),
            }
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&header_bytes).map_err(|e| fail(format!("bad header: {e}")))?;
        let mut data = Vec::new();
        r.read_to_end(&mut data).map_err(|e| fail(e.to_string()))?;
        let want: usize = header.params.iter().map(|p| p.rows * p.cols * 8).sum();
        if data.len() != want {
            return Err(fail(format!("expected {want} payload bytes, found {}", data.len())));
        }
        let mut params = Vec::with_capacity(header.params.len());
        let mut off = 0usize;
        for shape in header.params {
            let n = shape.rows * shape.cols;
            let values: Vec<Real> = data[off..off + n * 8]
                .chunks_exact(8)
                .map(|c| Real::from_le_bytes(c.try_into().expect("chunks_exact(8)")))
                .collect();
            off += n * 8;
            params.push((shape.name, Matrix { rows: shape.rows, cols: shape.cols, data: values }));
        }
        Ok(Checkpoint {
            epoch: header.epoch,
            params,
            train_loss: header.train_loss,
            val_loss: header.val_loss,
        })
    }
}

/// SGD over the train items in order, one checkpoint per epoch with the
/// epoch's mean train loss and a no-update validation loss.
pub fn train(
    cfg: &ModelConfig,
    train_items: &[TrainItem],
    val_items: &[TrainItem],
) -> Result<Vec<Checkpoint>, ModelError> {
    cfg.validate()?;
    if train_items.is_empty() {
        return Err(ModelError::EmptyTrainSet);
    }
    let in_dim = train_items[0].x.cols;
    let mut params = init_params(cfg, in_dim)?;
    let mut checkpoints = Vec::with_capacity(cfg.epochs as usize);

    for epoch in 1..=cfg.epochs {
        let mut batch_losses = Vec::new();
        for item in train_items {
            let fwd = forward_loss(cfg, &params, &item.batch, &item.x, item.tgn.as_ref())?;
            if fwd.items.is_empty() {
                continue;
            }
            if !fwd.loss.is_finite() {
                return Err(ModelError::NonFiniteLoss { epoch });
            }
            batch_losses.push(fwd.loss);
            backward_and_step(fwd, &mut params, cfg.lr)?;
        }
        if batch_losses.is_empty() {
            return Err(ModelError::EmptyTrainSet);
        }
        let train_loss = batch_losses.iter().sum::<Real>() / batch_losses.len() as Real;

        let mut val_losses = Vec::new();
        for item in val_items {
            let fwd = forward_loss(cfg, &params, &item.batch, &item.x, item.tgn.as_ref())?;
            if !fwd.items.is_empty() {
                val_losses.push(fwd.loss);
            }
        }
        let val_loss = if val_losses.is_empty() {
            0.0
        } else {
            val_losses.iter().sum::<Real>() / val_losses.len() as Real
        };

        checkpoints.push(Checkpoint {
            epoch,
            params: params.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            train_loss,
            val_loss,
        });
    }
    Ok(checkpoints)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batching::{from_window, BatchOrigin};
    use crate::ingest::{Attrs, Edge, Entity, EntityId, ProvGraph};
    use rand::Rng;

    fn test_batch(n_nodes: usize, edges: &[(usize, usize, OpType)]) -> Batch {
        let mut g = ProvGraph::empty(0, 1_000_000);
        for i in 0..n_nodes {
            let id = EntityId(i as u128 + 1);
            let kind = EntityKind::ALL[i % EntityKind::ALL.len()];
            g.nodes.insert(NodeRef::base(id), Entity { id, kind, attrs: Attrs::default() });
        }
        for (i, (s, d, op)) in edges.iter().enumerate() {
            g.edges.push(Edge {
                src: NodeRef::base(EntityId(*s as u128 + 1)),
                dst: NodeRef::base(EntityId(*d as u128 + 1)),
                op: *op,
                ts: i as i64 * 100,
                event_id: i as u64 + 1,
                synthetic: *op == OpType::PseudoRoot,
            });
        }
        g.sort_edges();
        from_window(&g, 0, BatchOrigin::Intra)
    }

    fn random_x(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Matrix {
        Matrix { rows, cols, data: (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect() }
    }

    fn cfg_with(encoder: EncoderKind, objective: Objective, layers: usize) -> ModelConfig {
        ModelConfig {
            encoder,
            sage_layers: layers,
            activation: Activation::Tanh,
            decoder: DecoderKind::Mlp,
            objective,
            node_hid_dim: 6,
            lr: 0.01,
            epochs: 2,
            seed: 7,
        }
    }

    fn small_tgn_context(batch: &Batch, x: &Matrix) -> TgnContext {
        // Two outside neighbors plus some in-batch history.
        let outside_a = NodeRef::base(EntityId(900));
        let outside_b = NodeRef::base(EntityId(901));
        let mut cache: FeatureCache = FeatureCache::new();
        cache.insert(outside_a.clone(), vec![0.25; x.cols]);
        cache.insert(outside_b.clone(), vec![-0.5; x.cols]);
        let mut snapshot = BTreeMap::new();
        for (r, row) in batch.nodes.iter().enumerate() {
            let mut hist = Vec::new();
            if r % 2 == 0 {
                hist.push(NeighborEvent { neighbor: outside_a.clone(), ts: -100, op: OpType::Read });
            }
            if r % 3 == 0 {
                hist.push(NeighborEvent { neighbor: outside_b.clone(), ts: -200, op: OpType::Write });
            }
            if r > 0 {
                hist.push(NeighborEvent {
                    neighbor: batch.nodes[r - 1].node.clone(),
                    ts: -50,
                    op: OpType::Send,
                });
            }
            snapshot.insert(row.node.clone(), hist);
        }
        build_tgn_context(batch, x, &snapshot, &cache).unwrap()
    }

    #[test]
    fn init_shapes_and_determinism() {
        let cfg = cfg_with(EncoderKind::Linear, Objective::EdgeType, 1);
        let a = init_params(&cfg, 5).unwrap();
        let b = init_params(&cfg, 5).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        for (pa, pb) in a.params.iter().zip(&b.params) {
            assert_eq!(pa.value, pb.value);
        }
        let w = a.named("enc.w").unwrap();
        assert_eq!((w.value.rows, w.value.cols), (5, 6));
        assert!(a.named("enc.b").unwrap().value.data.iter().all(|&v| v == 0.0));
        // Edge-type decoder takes concatenated endpoint embeddings.
        assert_eq!(a.named("dec1.w").unwrap().value.rows, 12);
        assert_eq!(a.named("dec2.w").unwrap().value.cols, N_OPS);

        let two = cfg_with(EncoderKind::Sage, Objective::NodeType, 2);
        let p = init_params(&two, 5).unwrap();
        assert!(p.named("sage1.w").is_some() && p.named("sage2.w").is_some());
        assert_eq!(p.named("sage1.w").unwrap().value.rows, 10);
        assert_eq!(p.named("sage2.w").unwrap().value.rows, 12);
        assert_eq!(p.named("dec2.w").unwrap().value.cols, N_KINDS);
    }

    #[test]
    fn sage_without_edges_equals_linear_on_concat_with_zeros() {
        let batch = test_batch(4, &[]);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let x = random_x(&mut rng, 4, 5);
        let cfg = cfg_with(EncoderKind::Sage, Objective::NodeType, 1);
        let params = init_params(&cfg, 5).unwrap();
        let h = encode_values(&cfg, &params, &batch, &x, None).unwrap();

        // Oracle: tanh([x ‖ 0] · W + b) by hand.
        let w = &params.named("sage1.w").unwrap().value;
        for r in 0..4 {
            for c in 0..cfg.node_hid_dim {
                let mut z = 0.0;
                for k in 0..5 {
                    z += x.get(r, k) * w.get(k, c);
                }
                // Zero-mean block contributes nothing.
                assert!((h.get(r, c) - z.tanh()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sage_matches_bruteforce_aggregation_on_random_graph() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let edges: Vec<(usize, usize, OpType)> = (0..40)
            .map(|_| (rng.gen_range(0..20), rng.gen_range(0..20), OpType::Read))
            .collect();
        let batch = test_batch(20, &edges);
        let x = random_x(&mut rng, 20, 4);
        let cfg = cfg_with(EncoderKind::Sage, Objective::NodeType, 1);
        let params = init_params(&cfg, 4).unwrap();
        let h = encode_values(&cfg, &params, &batch, &x, None).unwrap();

        let w = &params.named("sage1.w").unwrap().value;
        for v in 0..20 {
            // In-neighbors by brute-force scan over the edge list.
            let neigh: Vec<usize> =
                batch.edges.iter().filter(|e| e.dst_row == v).map(|e| e.src_row).collect();
            let mut mean = vec![0.0; 4];
            for &u in &neigh {
                for c in 0..4 {
                    mean[c] += x.get(u, c) / neigh.len() as Real;
                }
            }
            for c in 0..cfg.node_hid_dim {
                let mut z = 0.0;
                for k in 0..4 {
                    z += x.get(v, k) * w.get(k, c) + mean[k] * w.get(4 + k, c);
                }
                assert!((h.get(v, c) - z.tanh()).abs() < 1e-10, "node {v} col {c}");
            }
        }
    }

    #[test]
    fn uniform_logits_give_ln_n_ops_per_edge() {
        let batch = test_batch(3, &[(0, 1, OpType::Read), (1, 2, OpType::Write)]);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let x = random_x(&mut rng, 3, 4);
        let cfg = cfg_with(EncoderKind::Linear, Objective::EdgeType, 1);
        let mut params = init_params(&cfg, 4).unwrap();
        // Zero the decoder: logits collapse to the (zero) output bias.
        for p in &mut params.params {
            if p.name.starts_with("dec") {
                p.value.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let fwd = forward_loss(&cfg, &params, &batch, &x, None).unwrap();
        assert_eq!(fwd.per_item.len(), 2);
        for l in &fwd.per_item {
            assert!((l - (N_OPS as Real).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn pseudo_root_edges_are_excluded_from_edge_type() {
        let batch = test_batch(
            3,
            &[(0, 1, OpType::PseudoRoot), (0, 1, OpType::Read), (1, 2, OpType::PseudoRoot)],
        );
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let x = random_x(&mut rng, 3, 4);
        let cfg = cfg_with(EncoderKind::Linear, Objective::EdgeType, 1);
        let params = init_params(&cfg, 4).unwrap();
        let fwd = forward_loss(&cfg, &params, &batch, &x, None).unwrap();
        assert_eq!(fwd.per_item.len(), 1, "only the real edge is scored");
        assert_eq!(fwd.items, vec![LossItem::Edge { src_row: 0, dst_row: 1 }]);

        let only_pseudo = test_batch(2, &[(0, 1, OpType::PseudoRoot)]);
        let x2 = random_x(&mut rng, 2, 4);
        let fwd = forward_loss(&cfg, &params, &only_pseudo, &x2, None).unwrap();
        assert!(fwd.per_item.is_empty());
        assert_eq!(fwd.loss, 0.0);
    }

    #[test]
    fn perfect_reconstruction_gives_zero_loss() {
        // encoder none + a decoder hand-built to the identity: loss must be 0.
        let batch = test_batch(3, &[]);
        let x = Matrix::from_rows(vec![vec![0.5, -0.25], vec![0.1, 0.9], vec![-0.7, 0.3]]);
        let mut cfg = cfg_with(EncoderKind::None, Objective::FeatRecon, 1);
        cfg.activation = Activation::Relu;
        cfg.node_hid_dim = 4;
        let mut params = init_params(&cfg, 2).unwrap();
        // dec1 = [I; -I] into relu splits positive and negative parts;
        // dec2 = [I; -I] reassembles the signed value exactly.
        let dec1 = Matrix::from_rows(vec![
            vec![1.0, 0.0, -1.0, 0.0],
            vec![0.0, 1.0, 0.0, -1.0],
        ]);
        let dec2 = Matrix::from_rows(vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![-1.0, 0.0],
            vec![0.0, -1.0],
        ]);
        for p in &mut params.params {
            match p.name.as_str() {
                "dec1.w" => p.value = dec1.clone(),
                "dec2.w" => p.value = dec2.clone(),
                _ => p.value.data.iter_mut().for_each(|v| *v = 0.0),
            }
        }
        let fwd = forward_loss(&cfg, &params, &batch, &x, None).unwrap();
        assert!(fwd.loss.abs() < 1e-24);
        assert!(fwd.per_item.iter().all(|&l| l.abs() < 1e-24));
    }

    #[test]
    fn gradients_match_finite_differences_for_every_combination() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let edges = [
            (0, 1, OpType::Read),
            (1, 2, OpType::Write),
            (2, 3, OpType::Execute),
            (3, 0, OpType::Connect),
            (4, 2, OpType::Mmap),
            (0, 4, OpType::PseudoRoot),
        ];
        let batch = test_batch(5, &edges);
        let x = random_x(&mut rng, 5, 4);

        let encoders = [
            (EncoderKind::None, 1),
            (EncoderKind::Linear, 1),
            (EncoderKind::Sage, 1),
            (EncoderKind::Sage, 2),
            (EncoderKind::Tgn, 1),
        ];
        let objectives = [Objective::EdgeType, Objective::NodeType, Objective::FeatRecon];

        for (enc, layers) in encoders {
            for obj in objectives {
                for act in [Activation::Tanh, Activation::Relu] {
                    let mut cfg = cfg_with(enc, obj, layers);
                    cfg.activation = act;
                    let params = init_params(&cfg, 4).unwrap();
                    let tgn = if enc == EncoderKind::Tgn {
                        Some(small_tgn_context(&batch, &x))
                    } else {
                        None
                    };
                    let fwd = forward_loss(&cfg, &params, &batch, &x, tgn.as_ref()).unwrap();
                    let grads = fwd.tape.backward(fwd.root);

                    let eps = 1e-5;
                    for (pi, p) in params.params.iter().enumerate() {
                        for j in 0..p.value.data.len() {
                            let probe = |delta: Real| {
                                let mut pp = params.clone();
                                pp.params[pi].value.data[j] += delta;
                                forward_loss(&cfg, &pp, &batch, &x, tgn.as_ref()).unwrap().loss
                            };
                            let numeric = (probe(eps) - probe(-eps)) / (2.0 * eps);
                            let analytic = grads[fwd.param_vars[pi].index()].data[j];
                            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                            assert!(
                                (analytic - numeric).abs() / denom < 1e-4,
                                "{enc:?}/{obj:?}/{act:?} {} [{j}]: {analytic} vs {numeric}",
                                p.name
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let batch = test_batch(4, &[(0, 1, OpType::Read), (2, 3, OpType::Write)]);
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let x = random_x(&mut rng, 4, 4);
        let cfg = cfg_with(EncoderKind::Linear, Objective::EdgeType, 1);
        let mut params = init_params(&cfg, 4).unwrap();
        let before: Vec<Matrix> = params.params.iter().map(|p| p.value.clone()).collect();
        let fwd = forward_loss(&cfg, &params, &batch, &x, None).unwrap();
        backward_and_step(fwd, &mut params, 0.0).unwrap();
        for (p, b) in params.params.iter().zip(&before) {
            assert_eq!(&p.value, b);
        }
    }

    #[test]
    fn one_step_reduces_loss() {
        let batch = test_batch(4, &[(0, 1, OpType::Read), (1, 2, OpType::Write), (2, 3, OpType::Recv)]);
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let x = random_x(&mut rng, 4, 4);
        let cfg = cfg_with(EncoderKind::Linear, Objective::EdgeType, 1);
        let mut params = init_params(&cfg, 4).unwrap();
        let before = forward_loss(&cfg, &params, &batch, &x, None).unwrap();
        let l0 = before.loss;
        backward_and_step(before, &mut params, 0.05).unwrap();
        let l1 = forward_loss(&cfg, &params, &batch, &x, None).unwrap().loss;
        assert!(l1 < l0, "{l1} !< {l0}");
    }

    #[test]
    fn training_yields_one_checkpoint_per_epoch_and_is_deterministic() {
        let batch = test_batch(5, &[(0, 1, OpType::Read), (1, 2, OpType::Write), (3, 4, OpType::Send)]);
        let mut rng = ChaCha12Rng::seed_from_u64(16);
        let x = random_x(&mut rng, 5, 4);
        let mut cfg = cfg_with(EncoderKind::Linear, Objective::EdgeType, 1);
        cfg.epochs = 3;
        let items = vec![TrainItem { batch: batch.clone(), x: x.clone(), tgn: None }];
        let val = vec![TrainItem { batch, x, tgn: None }];

        let a = train(&cfg, &items, &val).unwrap();
        let b = train(&cfg, &items, &val).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a.iter().map(|c| c.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(a, b, "same seed, same checkpoints");
        assert!(a.iter().all(|c| c.val_loss.is_finite() && c.train_loss.is_finite()));

        cfg.seed = 99;
        let c = train(&cfg, &items, &val).unwrap();
        assert_ne!(a[0].params, c[0].params);

        assert!(matches!(train(&cfg, &[], &val), Err(ModelError::EmptyTrainSet)));
    }

    #[test]
    fn training_on_generated_events_reduces_loss() {
        use crate::featurize::{feature_hash, tokenize, FeatureSpec};
        use crate::ingest::{build_windows, generate_synthetic, parse_events_file, SynthParams};

        let dir = tempfile::tempdir().unwrap();
        let params = SynthParams {
            seed: 5,
            n_benign_events: 1_000,
            n_attack_chains: 0,
            span_hours: 1,
        };
        let report = generate_synthetic(&params, dir.path()).unwrap();
        let (events, _) = parse_events_file(&report.events_path).unwrap();
        let windows = build_windows(events, 15).unwrap();
        let spec = FeatureSpec::reference();

        let items: Vec<TrainItem> = windows
            .iter()
            .enumerate()
            .filter(|(_, w)| !w.edges.is_empty())
            .map(|(i, w)| {
                let batch = from_window(w, i, BatchOrigin::Intra);
                let rows: Vec<Vec<Real>> = batch
                    .nodes
                    .iter()
                    .map(|n| {
                        let toks = tokenize(&n.entity, &spec);
                        let mut v = feature_hash(&toks, 8).unwrap();
                        let mut kind = vec![0.0; N_KINDS];
                        kind[n.entity.kind.index()] = 1.0;
                        v.extend(kind);
                        v
                    })
                    .collect();
                TrainItem { batch, x: Matrix::from_rows(rows), tgn: None }
            })
            .collect();

        let mut cfg = cfg_with(EncoderKind::Linear, Objective::EdgeType, 1);
        cfg.node_hid_dim = 16;
        cfg.lr = 0.05;
        cfg.epochs = 4;
        let checkpoints = train(&cfg, &items, &[]).unwrap();
        let first = checkpoints.first().unwrap().train_loss;
        let last = checkpoints.last().unwrap().train_loss;
        assert!(last < first, "loss should fall: {first} -> {last}");
    }

    #[test]
    fn checkpoint_round_trips_and_rejects_corruption() {
        let cfg = cfg_with(EncoderKind::Sage, Objective::FeatRecon, 2);
        let params = init_params(&cfg, 4).unwrap();
        let cp = Checkpoint {
            epoch: 3,
            params: params.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            train_loss: 0.125,
            val_loss: 0.5,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("epoch_3.ckpt");
        cp.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(cp, back);
        assert_eq!(back.param_set().named("sage2.w").unwrap().value.rows, 12);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(ModelError::CheckpointIo { .. })));
    }

    #[test]
    fn tgn_context_requires_history_and_features() {
        let batch = test_batch(2, &[(0, 1, OpType::Read)]);
        let x = Matrix::zeros(2, 4);
        let empty_snapshot = BTreeMap::new();
        let cache = FeatureCache::new();
        assert!(matches!(
            build_tgn_context(&batch, &x, &empty_snapshot, &cache),
            Err(ModelError::MissingNeighborData { .. })
        ));

        // Snapshot names a neighbor whose features were never cached.
        let stranger = NodeRef::base(EntityId(77));
        let mut snapshot = BTreeMap::new();
        for row in &batch.nodes {
            snapshot.insert(
                row.node.clone(),
                vec![NeighborEvent { neighbor: stranger.clone(), ts: -1, op: OpType::Read }],
            );
        }
        assert!(matches!(
            build_tgn_context(&batch, &x, &snapshot, &cache),
            Err(ModelError::MissingNeighborData { .. })
        ));

        let cfg = cfg_with(EncoderKind::Tgn, Objective::NodeType, 1);
        let params = init_params(&cfg, 4).unwrap();
        assert!(matches!(
            forward_loss(&cfg, &params, &batch, &x, None),
            Err(ModelError::MissingTgnContext)
        ));
    }

    #[test]
    fn method_parsers_accept_known_names_only() {
        assert!(EncoderKind::parse("sage").is_ok());
        assert!(EncoderKind::parse("transformer").is_err());
        assert!(Objective::parse("feat_recon").is_ok());
        assert!(Objective::parse("contrastive").is_err());
        assert!(Activation::parse("relu").is_ok());
        assert!(Activation::parse("gelu").is_err());
        assert!(DecoderKind::parse("mlp").is_ok());
        assert!(DecoderKind::parse("vae").is_err());
    }

    #[test]
    fn config_validation_bounds() {
        let ok = cfg_with(EncoderKind::Sage, Objective::EdgeType, 1);
        assert!(ok.validate().is_ok());
        assert!(ModelConfig { node_hid_dim: 3, ..ok.clone() }.validate().is_err());
        assert!(ModelConfig { sage_layers: 0, ..ok.clone() }.validate().is_err());
        assert!(ModelConfig { sage_layers: 3, ..ok.clone() }.validate().is_err());
        assert!(ModelConfig { epochs: 0, ..ok.clone() }.validate().is_err());
        assert!(ModelConfig { lr: 0.0, ..ok.clone() }.validate().is_err());
        assert!(ModelConfig { lr: Real::NAN, ..ok }.validate().is_err());
    }
}
