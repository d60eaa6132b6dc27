//! Bipartite attributed graph over items, parent attributes, and leaf
//! attributes. Items and leaves are nodes; parents label the edges between
//! them. The module builds incidence counts from raw triples, assembles the
//! block adjacency, corrects the double-counted degrees, applies the two
//! normalization masks, and propagates embeddings through the resulting
//! constant matrix to produce holistic representations.
//!
//! Node index order is items, then parents, then leaves; the graph cache
//! file records this order in its header.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::binio;
use crate::error::{Error, Result};
use crate::tensor::{SparseMatrix, Tape, TensorId};

/// One (item, parent, leaf) attribute assignment. The same triple may occur
/// multiple times; multiplicity is meaningful and counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttributeTriple {
    pub item: u32,
    pub parent: u32,
    pub leaf: u32,
}

/// Raw attribute assignments plus the catalog sizes they index into.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeRecords {
    pub triples: Vec<AttributeTriple>,
    pub num_items: usize,
    pub num_parents: usize,
    pub num_leaves: usize,
}

impl AttributeRecords {
    pub fn new(
        triples: Vec<AttributeTriple>,
        num_items: usize,
        num_parents: usize,
        num_leaves: usize,
    ) -> Result<Self> {
        for (i, t) in triples.iter().enumerate() {
            if t.item as usize >= num_items
                || t.parent as usize >= num_parents
                || t.leaf as usize >= num_leaves
            {
                return Err(Error::Ingestion(format!(
                    "triple {i} ({}, {}, {}) outside catalog sizes ({num_items}, {num_parents}, {num_leaves})",
                    t.item, t.parent, t.leaf
                )));
            }
        }
        Ok(Self {
            triples,
            num_items,
            num_parents,
            num_leaves,
        })
    }

    pub fn node_count(&self) -> usize {
        self.num_items + self.num_parents + self.num_leaves
    }

    /// Number of (leaf, parent) pairs attached to each item, counting
    /// multiplicity.
    pub fn item_pair_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_items];
        for t in &self.triples {
            counts[t.item as usize] += 1;
        }
        counts
    }

    /// Number of (item, parent) pairs attached to each leaf, counting
    /// multiplicity.
    pub fn leaf_pair_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_leaves];
        for t in &self.triples {
            counts[t.leaf as usize] += 1;
        }
        counts
    }
}

/// Incidence counts between the three id spaces, plus their 0/1 patterns.
#[derive(Debug, Clone)]
pub struct IncidenceMatrices {
    /// Item-parent counts (V x P).
    pub item_parent: SparseMatrix,
    /// Item-leaf counts (V x Q).
    pub item_leaf: SparseMatrix,
    /// Parent-leaf co-occurrence counts (P x Q).
    pub parent_leaf: SparseMatrix,
    /// Binarized patterns of the three count matrices.
    pub item_parent_bin: SparseMatrix,
    pub item_leaf_bin: SparseMatrix,
    pub parent_leaf_bin: SparseMatrix,
    num_triples: usize,
}

impl IncidenceMatrices {
    pub fn num_triples(&self) -> usize {
        self.num_triples
    }
}

fn binarize(m: &SparseMatrix) -> SparseMatrix {
    SparseMatrix::from_triplets(
        m.rows(),
        m.cols(),
        m.iter_entries().map(|(r, c, _)| (r, c, 1.0)),
    )
    .expect("binarize preserves dimensions")
}

/// Count attribute triples into the item-parent, item-leaf, and parent-leaf
/// incidence matrices. Duplicate triples accumulate.
pub fn build_incidence(records: &AttributeRecords) -> Result<IncidenceMatrices> {
    let r = SparseMatrix::from_triplets(
        records.num_items,
        records.num_parents,
        records
            .triples
            .iter()
            .map(|t| (t.item as usize, t.parent as usize, 1.0)),
    )?;
    let h = SparseMatrix::from_triplets(
        records.num_items,
        records.num_leaves,
        records
            .triples
            .iter()
            .map(|t| (t.item as usize, t.leaf as usize, 1.0)),
    )?;
    let b = SparseMatrix::from_triplets(
        records.num_parents,
        records.num_leaves,
        records
            .triples
            .iter()
            .map(|t| (t.parent as usize, t.leaf as usize, 1.0)),
    )?;
    Ok(IncidenceMatrices {
        item_parent_bin: binarize(&r),
        item_leaf_bin: binarize(&h),
        parent_leaf_bin: binarize(&b),
        item_parent: r,
        item_leaf: h,
        parent_leaf: b,
        num_triples: records.triples.len(),
    })
}

/// Assemble the N x N block adjacency:
///
/// ```text
///     [ 0    R  H ]
/// A = [ 0    I  0 ]
///     [ H^T B^T 0 ]
/// ```
///
/// with rows/columns ordered items, parents, leaves.
pub fn build_adjacency(inc: &IncidenceMatrices) -> Result<SparseMatrix> {
    let v = inc.item_parent.rows();
    let p = inc.item_parent.cols();
    let q = inc.item_leaf.cols();
    let n = v + p + q;

    let mut triplets = Vec::with_capacity(inc.item_parent.nnz() + 2 * inc.item_leaf.nnz() + p);
    for (i, c, val) in inc.item_parent.iter_entries() {
        triplets.push((i, v + c, val));
    }
    for (i, a, val) in inc.item_leaf.iter_entries() {
        triplets.push((i, v + p + a, val));
        triplets.push((v + p + a, i, val));
    }
    for c in 0..p {
        triplets.push((v + c, v + c, 1.0));
    }
    for (c, a, val) in inc.parent_leaf.iter_entries() {
        triplets.push((v + p + a, v + c, val));
    }
    SparseMatrix::from_triplets(n, n, triplets)
}

/// Raw row sums of A double-count each (parent, leaf) pair on item rows and
/// each (item, parent) pair on leaf rows, so those rows are halved; parent
/// rows (the identity block) are kept. Isolated items and leaves get a
/// degree of 1 so later scaling never divides by zero; their propagation
/// rows stay empty regardless.
pub fn corrected_degrees(
    adjacency: &SparseMatrix,
    num_items: usize,
    num_parents: usize,
) -> Vec<f64> {
    let sums = adjacency.row_sums();
    sums.iter()
        .enumerate()
        .map(|(k, &s)| {
            let is_parent = k >= num_items && k < num_items + num_parents;
            let d = if is_parent { s } else { 0.5 * s };
            if d == 0.0 {
                1.0
            } else {
                d
            }
        })
        .collect()
}

/// The two normalization masks:
///
/// ```text
///      [ 0   0  H~ ]        [ 0  R~   0 ]
/// M1 = [ 0   0  0  ]   M2 = [ 0  I    0 ]
///      [ H~T 0  0  ]        [ 0  B~T  0 ]
/// ```
///
/// M1 marks the node-node entries that take symmetric normalization; M2
/// marks the edge (parent) entries that take row normalization.
pub fn build_masks(inc: &IncidenceMatrices) -> Result<(SparseMatrix, SparseMatrix)> {
    let v = inc.item_parent.rows();
    let p = inc.item_parent.cols();
    let q = inc.item_leaf.cols();
    let n = v + p + q;

    let mut m1 = Vec::with_capacity(2 * inc.item_leaf_bin.nnz());
    for (i, a, _) in inc.item_leaf_bin.iter_entries() {
        m1.push((i, v + p + a, 1.0));
        m1.push((v + p + a, i, 1.0));
    }

    let mut m2 = Vec::with_capacity(inc.item_parent_bin.nnz() + p + inc.parent_leaf_bin.nnz());
    for (i, c, _) in inc.item_parent_bin.iter_entries() {
        m2.push((i, v + c, 1.0));
    }
    for c in 0..p {
        m2.push((v + c, v + c, 1.0));
    }
    for (c, a, _) in inc.parent_leaf_bin.iter_entries() {
        m2.push((v + p + a, v + c, 1.0));
    }

    Ok((
        SparseMatrix::from_triplets(n, n, m1)?,
        SparseMatrix::from_triplets(n, n, m2)?,
    ))
}

/// Normalized adjacency
/// `A~ = D~^{-1/2} (A D~^{-1/2} .* M1  +  D~^{-1/2} A .* M2)`.
///
/// Node-node entries come out symmetric-normalized
/// (`A_ij / sqrt(d_i d_j)`), edge entries row-normalized (`A_ij / d_i`),
/// and parent rows are exact identity rows.
pub fn normalize_adjacency(
    adjacency: &SparseMatrix,
    degrees: &[f64],
    mask_node: &SparseMatrix,
    mask_edge: &SparseMatrix,
) -> Result<SparseMatrix> {
    if degrees.len() != adjacency.rows() {
        return Err(Error::Shape(
            "degree vector does not match adjacency".into(),
        ));
    }
    for (r, c, _) in mask_node.iter_entries().chain(mask_edge.iter_entries()) {
        if degrees[r] <= 0.0 || degrees[c] <= 0.0 {
            return Err(Error::Graph(format!(
                "nonpositive corrected degree under masked entry ({r}, {c})"
            )));
        }
    }
    let dinv_sqrt: Vec<f64> = degrees.iter().map(|&d| 1.0 / d.sqrt()).collect();
    let term_node = adjacency.scale_cols(&dinv_sqrt)?.hadamard_mask(mask_node)?;
    let term_edge = adjacency.scale_rows(&dinv_sqrt)?.hadamard_mask(mask_edge)?;
    term_node.add(&term_edge)?.scale_rows(&dinv_sqrt)
}

/// The fully constructed graph: adjacency, corrected degrees, masks, the
/// normalized propagation matrix, and the layer-combination weights.
#[derive(Debug, Clone)]
pub struct AttributedGraph {
    pub num_items: usize,
    pub num_parents: usize,
    pub num_leaves: usize,
    pub adjacency: SparseMatrix,
    pub corrected_degrees: Vec<f64>,
    pub mask_node: SparseMatrix,
    pub mask_edge: SparseMatrix,
    pub norm_adjacency: Arc<SparseMatrix>,
    pub num_layers: usize,
    pub layer_weights: Vec<f64>,
}

impl AttributedGraph {
    /// Build from attribute records with uniform layer weights 1/(L+1).
    pub fn build(records: &AttributeRecords, num_layers: usize) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::Config("graph needs at least one layer".into()));
        }
        let inc = build_incidence(records)?;
        let adjacency = build_adjacency(&inc)?;
        let degrees = corrected_degrees(&adjacency, records.num_items, records.num_parents);
        let (mask_node, mask_edge) = build_masks(&inc)?;
        let norm = normalize_adjacency(&adjacency, &degrees, &mask_node, &mask_edge)?;
        let layer_weights = vec![1.0 / (num_layers as f64 + 1.0); num_layers + 1];
        Ok(Self {
            num_items: records.num_items,
            num_parents: records.num_parents,
            num_leaves: records.num_leaves,
            adjacency,
            corrected_degrees: degrees,
            mask_node,
            mask_edge,
            norm_adjacency: Arc::new(norm),
            num_layers,
            layer_weights,
        })
    }

    /// Replace the layer weights; they must be positive and sum to one.
    pub fn with_layer_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.num_layers + 1 {
            return Err(Error::Config(format!(
                "expected {} layer weights, got {}",
                self.num_layers + 1,
                weights.len()
            )));
        }
        if weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::Config("layer weights must be positive".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("layer weights sum to {sum}, not 1")));
        }
        self.layer_weights = weights;
        Ok(self)
    }

    pub fn node_count(&self) -> usize {
        self.num_items + self.num_parents + self.num_leaves
    }

    /// Row range of item nodes.
    pub fn item_range(&self) -> std::ops::Range<usize> {
        0..self.num_items
    }

    /// Row range of leaf nodes.
    pub fn leaf_range(&self) -> std::ops::Range<usize> {
        self.num_items + self.num_parents..self.node_count()
    }
}

/// Tape handles produced by propagation: the raw embedding matrix, the
/// holistic combination, and optionally every intermediate layer.
pub struct HolisticEmbeddings {
    pub e0: TensorId,
    pub holistic: TensorId,
    pub per_layer: Option<Vec<TensorId>>,
}

/// Propagate `E^(l+1) = A~ E^(l)` for L layers and combine
/// `E^h = sum_l alpha_l E^(l)` on the tape, differentiably with respect to
/// the raw embeddings.
pub fn propagate(
    tape: &mut Tape,
    graph: &AttributedGraph,
    e0: TensorId,
    keep_layers: bool,
) -> Result<HolisticEmbeddings> {
    let (rows, _) = tape.dims(e0);
    if rows != graph.node_count() {
        return Err(Error::Shape(format!(
            "embedding matrix has {rows} rows, graph has {} nodes",
            graph.node_count()
        )));
    }
    let mut layers = Vec::with_capacity(graph.num_layers + 1);
    layers.push(e0);
    let mut current = e0;
    for _ in 0..graph.num_layers {
        current = tape.spmm(&graph.norm_adjacency, current)?;
        layers.push(current);
    }
    let mut holistic = tape.scale(layers[0], graph.layer_weights[0]);
    for (l, &layer) in layers.iter().enumerate().skip(1) {
        let scaled = tape.scale(layer, graph.layer_weights[l]);
        holistic = tape.add(holistic, scaled)?;
    }
    Ok(HolisticEmbeddings {
        e0,
        holistic,
        per_layer: keep_layers.then_some(layers),
    })
}

/// A node of the bipartite graph (parents are edges, not nodes).
#[derive(Debug, Clone, Copy)]
pub enum GraphNode {
    Item(usize),
    Leaf(usize),
}

/// Direct per-node form of one propagation step: sum the symmetric-
/// normalized neighbor embedding plus the row-normalized edge (parent)
/// embedding over the node's (neighbor, parent) pair multiset. This is the
/// brute-force reference the matrix path is checked against; it never
/// touches the sparse machinery.
pub fn node_update_reference(
    records: &AttributeRecords,
    node: GraphNode,
    item_embs: &[Vec<f64>],
    parent_embs: &[Vec<f64>],
    leaf_embs: &[Vec<f64>],
) -> Vec<f64> {
    let dim = parent_embs.first().map_or(0, Vec::len);
    let item_counts = records.item_pair_counts();
    let leaf_counts = records.leaf_pair_counts();
    let mut out = vec![0.0; dim];
    match node {
        GraphNode::Item(i) => {
            let ni = item_counts[i];
            if ni == 0 {
                return out;
            }
            for t in &records.triples {
                if t.item as usize != i {
                    continue;
                }
                let na = leaf_counts[t.leaf as usize];
                let sym = 1.0 / ((ni as f64).sqrt() * (na as f64).sqrt());
                let edge = 1.0 / ni as f64;
                for d in 0..dim {
                    out[d] += sym * leaf_embs[t.leaf as usize][d]
                        + edge * parent_embs[t.parent as usize][d];
                }
            }
        }
        GraphNode::Leaf(a) => {
            let na = leaf_counts[a];
            if na == 0 {
                return out;
            }
            for t in &records.triples {
                if t.leaf as usize != a {
                    continue;
                }
                let ni = item_counts[t.item as usize];
                let sym = 1.0 / ((na as f64).sqrt() * (ni as f64).sqrt());
                let edge = 1.0 / na as f64;
                for d in 0..dim {
                    out[d] += sym * item_embs[t.item as usize][d]
                        + edge * parent_embs[t.parent as usize][d];
                }
            }
        }
    }
    out
}

// ── Attribute input file ────────────────────────────────────────────────
//
// Text format: a header `#items=<n> parents=<n> leaves=<n>`, then one
// triple per line as `item<TAB>parent<TAB>leaf` with 0-based ids. Other
// `#` lines are comments.

pub fn parse_attribute_records<R: Read>(reader: R) -> Result<AttributeRecords> {
    let mut content = String::new();
    let mut r = reader;
    r.read_to_string(&mut content)?;

    let mut sizes: Option<(usize, usize, usize)> = None;
    let mut triples = Vec::new();
    for (lineno, raw) in content.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(parsed) = parse_size_header(rest) {
                sizes = Some(parsed);
            }
            continue;
        }
        let mut fields = line.split('\t');
        let parse_field = |f: Option<&str>, what: &str| -> Result<u32> {
            f.ok_or_else(|| Error::Parse {
                line: lineno + 1,
                message: format!("missing {what}"),
            })?
            .trim()
            .parse()
            .map_err(|e| Error::Parse {
                line: lineno + 1,
                message: format!("bad {what}: {e}"),
            })
        };
        let item = parse_field(fields.next(), "item id")?;
        let parent = parse_field(fields.next(), "parent id")?;
        let leaf = parse_field(fields.next(), "leaf id")?;
        triples.push(AttributeTriple { item, parent, leaf });
    }
    let (num_items, num_parents, num_leaves) = sizes.ok_or_else(|| {
        Error::Format("attribute file is missing the '#items= parents= leaves=' header".into())
    })?;
    AttributeRecords::new(triples, num_items, num_parents, num_leaves)
}

fn parse_size_header(rest: &str) -> Option<(usize, usize, usize)> {
    let mut items = None;
    let mut parents = None;
    let mut leaves = None;
    for part in rest.split_whitespace() {
        let (key, value) = part.split_once('=')?;
        let value: usize = value.parse().ok()?;
        match key {
            "items" => items = Some(value),
            "parents" => parents = Some(value),
            "leaves" => leaves = Some(value),
            _ => return None,
        }
    }
    Some((items?, parents?, leaves?))
}

pub fn load_attribute_records<P: AsRef<Path>>(path: P) -> Result<AttributeRecords> {
    parse_attribute_records(BufReader::new(File::open(path)?))
}

pub fn write_attribute_records<W: Write>(w: &mut W, records: &AttributeRecords) -> Result<()> {
    writeln!(
        w,
        "#items={} parents={} leaves={}",
        records.num_items, records.num_parents, records.num_leaves
    )?;
    for t in &records.triples {
        writeln!(w, "{}\t{}\t{}", t.item, t.parent, t.leaf)?;
    }
    Ok(())
}

pub fn save_attribute_records<P: AsRef<Path>>(path: P, records: &AttributeRecords) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_attribute_records(&mut w, records)?;
    w.flush()?;
    Ok(())
}

// ── Graph cache file ────────────────────────────────────────────────────

const CACHE_MAGIC: &[u8; 8] = b"AGAUGRP\0";
const CACHE_VERSION: u32 = 1;
const NODE_ORDER: &str = "items,parents,leaves";

fn write_sparse<W: Write>(w: &mut W, m: &SparseMatrix) -> Result<()> {
    binio::write_u64(w, m.rows() as u64)?;
    binio::write_u64(w, m.cols() as u64)?;
    let (row_ptr, col_idx, values) = m.raw_parts();
    binio::write_u64(w, col_idx.len() as u64)?;
    for &p in row_ptr {
        binio::write_u64(w, p as u64)?;
    }
    for &c in col_idx {
        binio::write_u64(w, c as u64)?;
    }
    binio::write_f64_slice(w, values)
}

fn read_sparse<R: Read>(r: &mut R) -> Result<SparseMatrix> {
    let rows = binio::read_u64(r)? as usize;
    let cols = binio::read_u64(r)? as usize;
    let nnz = binio::read_u64(r)? as usize;
    let row_ptr: Vec<usize> = binio::read_u64_vec(r, rows + 1)?
        .into_iter()
        .map(|v| v as usize)
        .collect();
    let col_idx: Vec<usize> = binio::read_u64_vec(r, nnz)?
        .into_iter()
        .map(|v| v as usize)
        .collect();
    let values = binio::read_f64_vec(r, nnz)?;
    SparseMatrix::from_raw_parts(rows, cols, row_ptr, col_idx, values)
}

impl AttributedGraph {
    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_header(w, CACHE_MAGIC, CACHE_VERSION)?;
        binio::write_str(w, NODE_ORDER)?;
        binio::write_u64(w, self.num_items as u64)?;
        binio::write_u64(w, self.num_parents as u64)?;
        binio::write_u64(w, self.num_leaves as u64)?;
        binio::write_u64(w, self.num_layers as u64)?;
        binio::write_u32(w, self.layer_weights.len() as u32)?;
        binio::write_f64_slice(w, &self.layer_weights)?;
        binio::write_f64_slice(w, &self.corrected_degrees)?;
        write_sparse(w, &self.norm_adjacency)?;
        write_sparse(w, &self.adjacency)?;
        write_sparse(w, &self.mask_node)?;
        write_sparse(w, &self.mask_edge)?;
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        binio::expect_header(r, CACHE_MAGIC, CACHE_VERSION)?;
        let order = binio::read_str(r)?;
        if order != NODE_ORDER {
            return Err(Error::Format(format!(
                "unexpected node order '{order}' in graph cache"
            )));
        }
        let num_items = binio::read_u64(r)? as usize;
        let num_parents = binio::read_u64(r)? as usize;
        let num_leaves = binio::read_u64(r)? as usize;
        let num_layers = binio::read_u64(r)? as usize;
        let n_weights = binio::read_u32(r)? as usize;
        let layer_weights = binio::read_f64_vec(r, n_weights)?;
        let n = num_items + num_parents + num_leaves;
        let corrected_degrees = binio::read_f64_vec(r, n)?;
        let norm_adjacency = Arc::new(read_sparse(r)?);
        let adjacency = read_sparse(r)?;
        let mask_node = read_sparse(r)?;
        let mask_edge = read_sparse(r)?;
        Ok(Self {
            num_items,
            num_parents,
            num_leaves,
            adjacency,
            corrected_degrees,
            mask_node,
            mask_edge,
            norm_adjacency,
            num_layers,
            layer_weights,
        })
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}
