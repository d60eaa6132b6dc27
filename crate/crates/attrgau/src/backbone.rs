//! Session backbone: session-graph construction, a gated graph neural
//! network over the unique items of a session, additive attention readout,
//! dual-channel encoding (raw and attribute-enriched views through the same
//! weights), and inner-product score prediction.
//!
//! The GNN and readout stages are behind the [`GnnEncoder`] and
//! [`SessionReadout`] traits so alternative backbones can plug in: an
//! encoder maps (session graph, k x d node states) to k x d, a readout maps
//! n x d position-ordered encodings to a d-vector.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{checkpoint, Tape, Tensor, TensorId};

/// Directed session graph over the distinct items of one session.
/// `alias` maps each of the n session positions back to its unique node.
/// Adjacency rows are normalized by out-degree (respectively in-degree);
/// repeated transitions count once.
#[derive(Debug, Clone)]
pub struct SessionGraph {
    pub unique_nodes: Vec<u32>,
    pub alias: Vec<usize>,
    /// k x k row-normalized incoming adjacency, row-major.
    pub adj_in: Vec<f64>,
    /// k x k row-normalized outgoing adjacency, row-major.
    pub adj_out: Vec<f64>,
}

impl SessionGraph {
    pub fn node_count(&self) -> usize {
        self.unique_nodes.len()
    }
}

pub fn build_session_graph(session: &[u32]) -> Result<SessionGraph> {
    if session.is_empty() {
        return Err(Error::Input("cannot build a graph for an empty session".into()));
    }
    let mut unique_nodes: Vec<u32> = Vec::new();
    let mut alias = Vec::with_capacity(session.len());
    for &item in session {
        let idx = match unique_nodes.iter().position(|&u| u == item) {
            Some(i) => i,
            None => {
                unique_nodes.push(item);
                unique_nodes.len() - 1
            }
        };
        alias.push(idx);
    }
    let k = unique_nodes.len();
    let mut out_edges = vec![0.0; k * k];
    for t in 0..alias.len().saturating_sub(1) {
        out_edges[alias[t] * k + alias[t + 1]] = 1.0;
    }
    let adj_out = row_normalize(&out_edges, k);
    let mut in_edges = vec![0.0; k * k];
    for u in 0..k {
        for v in 0..k {
            in_edges[v * k + u] = out_edges[u * k + v];
        }
    }
    let adj_in = row_normalize(&in_edges, k);
    Ok(SessionGraph {
        unique_nodes,
        alias,
        adj_in,
        adj_out,
    })
}

fn row_normalize(m: &[f64], k: usize) -> Vec<f64> {
    let mut out = m.to_vec();
    for r in 0..k {
        let sum: f64 = out[r * k..(r + 1) * k].iter().sum();
        if sum > 0.0 {
            for v in &mut out[r * k..(r + 1) * k] {
                *v /= sum;
            }
        }
    }
    out
}

/// All trainable parameters, shared by every channel. GRU-style gate
/// weights right-multiply (states are rows); the attention weights follow
/// the usual column-vector convention and are applied transposed.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub hidden_dim: usize,
    pub item_embeddings: Tensor,
    pub parent_embeddings: Tensor,
    pub leaf_embeddings: Tensor,
    pub msg_in_weight: Tensor,
    pub msg_in_bias: Tensor,
    pub msg_out_weight: Tensor,
    pub msg_out_bias: Tensor,
    pub gate_update_w: Tensor,
    pub gate_update_u: Tensor,
    pub gate_reset_w: Tensor,
    pub gate_reset_u: Tensor,
    pub gate_cand_w: Tensor,
    pub gate_cand_u: Tensor,
    pub attn_last: Tensor,
    pub attn_each: Tensor,
    pub attn_bias: Tensor,
    pub attn_score: Tensor,
    pub attn_mix: Tensor,
}

impl BackboneParams {
    /// Initialize every table and matrix uniformly in [-1/sqrt(d), 1/sqrt(d)).
    pub fn init(
        num_items: usize,
        num_parents: usize,
        num_leaves: usize,
        hidden_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let d = hidden_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let mut mk = |rows: usize, cols: usize| Tensor::uniform(rows, cols, bound, rng).with_grad();
        Self {
            hidden_dim: d,
            item_embeddings: mk(num_items, d),
            parent_embeddings: mk(num_parents, d),
            leaf_embeddings: mk(num_leaves, d),
            msg_in_weight: mk(d, d),
            msg_in_bias: mk(1, d),
            msg_out_weight: mk(d, d),
            msg_out_bias: mk(1, d),
            gate_update_w: mk(2 * d, d),
            gate_update_u: mk(d, d),
            gate_reset_w: mk(2 * d, d),
            gate_reset_u: mk(d, d),
            gate_cand_w: mk(2 * d, d),
            gate_cand_u: mk(d, d),
            attn_last: mk(d, d),
            attn_each: mk(d, d),
            attn_bias: mk(1, d),
            attn_score: mk(1, d),
            attn_mix: mk(d, 2 * d),
        }
    }

    pub fn num_items(&self) -> usize {
        self.item_embeddings.shape()[0]
    }

    pub fn num_parents(&self) -> usize {
        self.parent_embeddings.shape()[0]
    }

    pub fn num_leaves(&self) -> usize {
        self.leaf_embeddings.shape()[0]
    }

    /// Stable name/tensor pairing; the order fixes initialization,
    /// optimizer-state pairing, and the checkpoint layout.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("item_embeddings", &self.item_embeddings),
            ("parent_embeddings", &self.parent_embeddings),
            ("leaf_embeddings", &self.leaf_embeddings),
            ("msg_in_weight", &self.msg_in_weight),
            ("msg_in_bias", &self.msg_in_bias),
            ("msg_out_weight", &self.msg_out_weight),
            ("msg_out_bias", &self.msg_out_bias),
            ("gate_update_w", &self.gate_update_w),
            ("gate_update_u", &self.gate_update_u),
            ("gate_reset_w", &self.gate_reset_w),
            ("gate_reset_u", &self.gate_reset_u),
            ("gate_cand_w", &self.gate_cand_w),
            ("gate_cand_u", &self.gate_cand_u),
            ("attn_last", &self.attn_last),
            ("attn_each", &self.attn_each),
            ("attn_bias", &self.attn_bias),
            ("attn_score", &self.attn_score),
            ("attn_mix", &self.attn_mix),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("item_embeddings", &mut self.item_embeddings),
            ("parent_embeddings", &mut self.parent_embeddings),
            ("leaf_embeddings", &mut self.leaf_embeddings),
            ("msg_in_weight", &mut self.msg_in_weight),
            ("msg_in_bias", &mut self.msg_in_bias),
            ("msg_out_weight", &mut self.msg_out_weight),
            ("msg_out_bias", &mut self.msg_out_bias),
            ("gate_update_w", &mut self.gate_update_w),
            ("gate_update_u", &mut self.gate_update_u),
            ("gate_reset_w", &mut self.gate_reset_w),
            ("gate_reset_u", &mut self.gate_reset_u),
            ("gate_cand_w", &mut self.gate_cand_w),
            ("gate_cand_u", &mut self.gate_cand_u),
            ("attn_last", &mut self.attn_last),
            ("attn_each", &mut self.attn_each),
            ("attn_bias", &mut self.attn_bias),
            ("attn_score", &mut self.attn_score),
            ("attn_mix", &mut self.attn_mix),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Register every parameter as a tape leaf, in `named` order.
    pub fn register(&self, tape: &mut Tape) -> Result<ParamIds> {
        Ok(ParamIds {
            item_embeddings: tape.leaf(&self.item_embeddings)?,
            parent_embeddings: tape.leaf(&self.parent_embeddings)?,
            leaf_embeddings: tape.leaf(&self.leaf_embeddings)?,
            msg_in_weight: tape.leaf(&self.msg_in_weight)?,
            msg_in_bias: tape.leaf(&self.msg_in_bias)?,
            msg_out_weight: tape.leaf(&self.msg_out_weight)?,
            msg_out_bias: tape.leaf(&self.msg_out_bias)?,
            gate_update_w: tape.leaf(&self.gate_update_w)?,
            gate_update_u: tape.leaf(&self.gate_update_u)?,
            gate_reset_w: tape.leaf(&self.gate_reset_w)?,
            gate_reset_u: tape.leaf(&self.gate_reset_u)?,
            gate_cand_w: tape.leaf(&self.gate_cand_w)?,
            gate_cand_u: tape.leaf(&self.gate_cand_u)?,
            attn_last: tape.leaf(&self.attn_last)?,
            attn_each: tape.leaf(&self.attn_each)?,
            attn_bias: tape.leaf(&self.attn_bias)?,
            attn_score: tape.leaf(&self.attn_score)?,
            attn_mix: tape.leaf(&self.attn_mix)?,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::to_bytes(&self.named())
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        checkpoint::save(path, &self.named())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let entries = checkpoint::load(path)?;
        Self::from_entries(entries)
    }

    fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let find = |name: &str| -> Result<Tensor> {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone().with_grad())
                .ok_or_else(|| Error::Format(format!("checkpoint is missing parameter '{name}'")))
        };
        let item_embeddings = find("item_embeddings")?;
        let hidden_dim = *item_embeddings
            .shape()
            .get(1)
            .ok_or_else(|| Error::Format("item embedding table is not a matrix".into()))?;
        Ok(Self {
            hidden_dim,
            item_embeddings,
            parent_embeddings: find("parent_embeddings")?,
            leaf_embeddings: find("leaf_embeddings")?,
            msg_in_weight: find("msg_in_weight")?,
            msg_in_bias: find("msg_in_bias")?,
            msg_out_weight: find("msg_out_weight")?,
            msg_out_bias: find("msg_out_bias")?,
            gate_update_w: find("gate_update_w")?,
            gate_update_u: find("gate_update_u")?,
            gate_reset_w: find("gate_reset_w")?,
            gate_reset_u: find("gate_reset_u")?,
            gate_cand_w: find("gate_cand_w")?,
            gate_cand_u: find("gate_cand_u")?,
            attn_last: find("attn_last")?,
            attn_each: find("attn_each")?,
            attn_bias: find("attn_bias")?,
            attn_score: find("attn_score")?,
            attn_mix: find("attn_mix")?,
        })
    }
}

/// Tape handles for one registration of [`BackboneParams`].
#[derive(Debug, Clone, Copy)]
pub struct ParamIds {
    pub item_embeddings: TensorId,
    pub parent_embeddings: TensorId,
    pub leaf_embeddings: TensorId,
    pub msg_in_weight: TensorId,
    pub msg_in_bias: TensorId,
    pub msg_out_weight: TensorId,
    pub msg_out_bias: TensorId,
    pub gate_update_w: TensorId,
    pub gate_update_u: TensorId,
    pub gate_reset_w: TensorId,
    pub gate_reset_u: TensorId,
    pub gate_cand_w: TensorId,
    pub gate_cand_u: TensorId,
    pub attn_last: TensorId,
    pub attn_each: TensorId,
    pub attn_bias: TensorId,
    pub attn_score: TensorId,
    pub attn_mix: TensorId,
}

impl ParamIds {
    pub fn all(&self) -> [TensorId; 18] {
        [
            self.item_embeddings,
            self.parent_embeddings,
            self.leaf_embeddings,
            self.msg_in_weight,
            self.msg_in_bias,
            self.msg_out_weight,
            self.msg_out_bias,
            self.gate_update_w,
            self.gate_update_u,
            self.gate_reset_w,
            self.gate_reset_u,
            self.gate_cand_w,
            self.gate_cand_u,
            self.attn_last,
            self.attn_each,
            self.attn_bias,
            self.attn_score,
            self.attn_mix,
        ]
    }
}

/// Plug-in contract for the neighborhood aggregation stage.
pub trait GnnEncoder {
    fn encode(&self, tape: &mut Tape, graph: &SessionGraph, node_embs: TensorId)
        -> Result<TensorId>;
}

/// Plug-in contract for the readout stage: n x d position-ordered
/// encodings to a 1 x d session representation.
pub trait SessionReadout {
    fn readout(&self, tape: &mut Tape, encoded: TensorId) -> Result<TensorId>;
}

/// Gated GNN: per step, incoming and outgoing messages are linear
/// transforms of the node states mixed through the adjacency, then a GRU
/// cell updates each node.
pub struct GatedGraphEncoder<'a> {
    pub params: &'a ParamIds,
    pub steps: usize,
}

impl GnnEncoder for GatedGraphEncoder<'_> {
    fn encode(
        &self,
        tape: &mut Tape,
        graph: &SessionGraph,
        node_embs: TensorId,
    ) -> Result<TensorId> {
        ggnn_forward(tape, graph, node_embs, self.params, self.steps)
    }
}

/// Additive attention over the session positions, scored against the last
/// item, followed by a linear mix of [last; weighted sum].
pub struct AdditiveAttention<'a> {
    pub params: &'a ParamIds,
}

impl SessionReadout for AdditiveAttention<'_> {
    fn readout(&self, tape: &mut Tape, encoded: TensorId) -> Result<TensorId> {
        attention_readout(tape, encoded, self.params)
    }
}

pub fn ggnn_forward(
    tape: &mut Tape,
    graph: &SessionGraph,
    node_embs: TensorId,
    params: &ParamIds,
    steps: usize,
) -> Result<TensorId> {
    if steps == 0 {
        return Err(Error::Config("ggnn needs at least one step".into()));
    }
    let k = graph.node_count();
    let (rows, _d) = tape.dims(node_embs);
    if rows != k {
        return Err(Error::Shape(format!(
            "node embeddings have {rows} rows, session graph has {k} nodes"
        )));
    }
    let adj_in = tape.constant(k, k, graph.adj_in.clone());
    let adj_out = tape.constant(k, k, graph.adj_out.clone());

    let mut h = node_embs;
    for _ in 0..steps {
        let lin_in = tape.matmul(h, params.msg_in_weight)?;
        let lin_in = tape.add_bias_row(lin_in, params.msg_in_bias)?;
        let msg_in = tape.matmul(adj_in, lin_in)?;

        let lin_out = tape.matmul(h, params.msg_out_weight)?;
        let lin_out = tape.add_bias_row(lin_out, params.msg_out_bias)?;
        let msg_out = tape.matmul(adj_out, lin_out)?;

        let msg = tape.concat_cols(msg_in, msg_out)?;

        let zw = tape.matmul(msg, params.gate_update_w)?;
        let zu = tape.matmul(h, params.gate_update_u)?;
        let pre_z = tape.add(zw, zu)?;
        let update = tape.sigmoid(pre_z);

        let rw = tape.matmul(msg, params.gate_reset_w)?;
        let ru = tape.matmul(h, params.gate_reset_u)?;
        let pre_r = tape.add(rw, ru)?;
        let reset = tape.sigmoid(pre_r);

        let gated_h = tape.mul(reset, h)?;
        let cw = tape.matmul(msg, params.gate_cand_w)?;
        let cu = tape.matmul(gated_h, params.gate_cand_u)?;
        let pre_c = tape.add(cw, cu)?;
        let candidate = tape.tanh(pre_c);

        // h <- (1 - z) . h + z . candidate
        let zh = tape.mul(update, h)?;
        let keep = tape.sub(h, zh)?;
        let zc = tape.mul(update, candidate)?;
        h = tape.add(keep, zc)?;
    }
    Ok(h)
}

pub fn attention_readout(
    tape: &mut Tape,
    encoded: TensorId,
    params: &ParamIds,
) -> Result<TensorId> {
    let (n, _d) = tape.dims(encoded);
    if n == 0 {
        return Err(Error::Input("attention over zero positions".into()));
    }
    let last = tape.gather_rows(encoded, vec![n - 1])?;
    let proj_last = tape.matmul_bt(last, params.attn_last)?;
    let proj_each = tape.matmul_bt(encoded, params.attn_each)?;
    let pre = tape.add_bias_row(proj_each, proj_last)?;
    let pre = tape.add_bias_row(pre, params.attn_bias)?;
    let act = tape.sigmoid(pre);
    let weights = tape.matmul_bt(act, params.attn_score)?;
    let pooled = tape.matmul_at(weights, encoded)?;
    let cat = tape.concat_cols(last, pooled)?;
    tape.matmul_bt(cat, params.attn_mix)
}

/// Encoding configuration for one forward pass.
#[derive(Debug, Clone)]
pub struct EncodeConfig {
    pub ggnn_steps: usize,
    pub dropout_rate: f64,
    pub training: bool,
    pub max_session_len: usize,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        Self {
            ggnn_steps: 1,
            dropout_rate: 0.2,
            training: false,
            max_session_len: 50,
        }
    }
}

/// Per-channel encodings of one session: n x d item states and the 1 x d
/// session representations for the attribute (holistic), collaborative
/// (raw), and fused channels.
#[derive(Debug, Clone, Copy)]
pub struct ChannelOutputs {
    pub items_holistic: TensorId,
    pub items_raw: TensorId,
    pub items_fused: TensorId,
    pub session_holistic: TensorId,
    pub session_raw: TensorId,
    pub session_fused: TensorId,
}

/// Dual-channel encoding with explicit plug-in stages. Both channels run
/// through the same encoder and readout (parameter sharing); the fused
/// channel sums an independent dropout of each channel's item states.
#[allow(clippy::too_many_arguments)]
pub fn encode_session_with(
    tape: &mut Tape,
    session: &[u32],
    raw_items: TensorId,
    holistic_items: TensorId,
    gnn: &impl GnnEncoder,
    readout: &impl SessionReadout,
    config: &EncodeConfig,
    rng: &mut Rng,
) -> Result<ChannelOutputs> {
    let start = session.len().saturating_sub(config.max_session_len);
    let session = &session[start..];
    let graph = build_session_graph(session)?;

    let (num_items, _) = tape.dims(raw_items);
    let indices: Vec<usize> = graph
        .unique_nodes
        .iter()
        .map(|&item| {
            let idx = item as usize;
            if idx >= num_items {
                Err(Error::Input(format!(
                    "session references unknown item id {item}"
                )))
            } else {
                Ok(idx)
            }
        })
        .collect::<Result<_>>()?;

    let node_raw = tape.gather_rows(raw_items, indices.clone())?;
    let node_hol = tape.gather_rows(holistic_items, indices)?;

    let enc_raw = gnn.encode(tape, &graph, node_raw)?;
    let enc_hol = gnn.encode(tape, &graph, node_hol)?;

    let seq_raw = tape.gather_rows(enc_raw, graph.alias.clone())?;
    let seq_hol = tape.gather_rows(enc_hol, graph.alias.clone())?;

    // Independent masks per channel.
    let dropped_hol = tape.dropout(seq_hol, config.dropout_rate, config.training, rng)?;
    let dropped_raw = tape.dropout(seq_raw, config.dropout_rate, config.training, rng)?;
    let fused = tape.add(dropped_hol, dropped_raw)?;

    let session_holistic = readout.readout(tape, seq_hol)?;
    let session_raw = readout.readout(tape, seq_raw)?;
    let session_fused = readout.readout(tape, fused)?;

    Ok(ChannelOutputs {
        items_holistic: seq_hol,
        items_raw: seq_raw,
        items_fused: fused,
        session_holistic,
        session_raw,
        session_fused,
    })
}

/// Dual-channel encoding with the gated-GNN encoder and additive attention.
pub fn encode_session(
    tape: &mut Tape,
    session: &[u32],
    raw_items: TensorId,
    holistic_items: TensorId,
    params: &ParamIds,
    config: &EncodeConfig,
    rng: &mut Rng,
) -> Result<ChannelOutputs> {
    let gnn = GatedGraphEncoder {
        params,
        steps: config.ggnn_steps,
    };
    let att = AdditiveAttention { params };
    encode_session_with(
        tape,
        session,
        raw_items,
        holistic_items,
        &gnn,
        &att,
        config,
        rng,
    )
}

/// Single-channel encoding over the raw embeddings only: the plain
/// backbone without attribute enrichment. Used by the vanilla baseline.
pub fn encode_raw_only(
    tape: &mut Tape,
    session: &[u32],
    raw_items: TensorId,
    params: &ParamIds,
    config: &EncodeConfig,
) -> Result<TensorId> {
    let start = session.len().saturating_sub(config.max_session_len);
    let session = &session[start..];
    let graph = build_session_graph(session)?;
    let (num_items, _) = tape.dims(raw_items);
    let indices: Vec<usize> = graph
        .unique_nodes
        .iter()
        .map(|&item| {
            let idx = item as usize;
            if idx >= num_items {
                Err(Error::Input(format!(
                    "session references unknown item id {item}"
                )))
            } else {
                Ok(idx)
            }
        })
        .collect::<Result<_>>()?;
    let nodes = tape.gather_rows(raw_items, indices)?;
    let gnn = GatedGraphEncoder {
        params,
        steps: config.ggnn_steps,
    };
    let enc = gnn.encode(tape, &graph, nodes)?;
    let seq = tape.gather_rows(enc, graph.alias.clone())?;
    let att = AdditiveAttention { params };
    att.readout(tape, seq)
}

/// Inner-product scores of the session representation against every item's
/// raw embedding, softmax-normalized into next-item probabilities. The
/// candidate side always uses the raw table.
pub fn predict_scores(
    tape: &mut Tape,
    session_repr: TensorId,
    raw_items: TensorId,
) -> Result<TensorId> {
    let logits = tape.matmul_bt(session_repr, raw_items)?;
    Ok(tape.row_softmax(logits))
}

/// Raw inner-product logits without the softmax; ranking metrics only need
/// score order, which the softmax preserves.
pub fn predict_logits(
    tape: &mut Tape,
    session_repr: TensorId,
    raw_items: TensorId,
) -> Result<TensorId> {
    tape.matmul_bt(session_repr, raw_items)
}
