//! Acceptance suite: one test per criterion, each printing a PASS line
//! (run with `--nocapture` to see them). The heavy training criteria share
//! deterministic fixtures, so repeated runs are bit-identical.

use std::sync::OnceLock;
use std::time::Instant;

use attrgau::backbone::{attention_readout, ggnn_forward, build_session_graph, BackboneParams};
use attrgau::data::{
    preprocess, subsample_train, synth_generate, DatasetBundle, PreprocessOptions, SessionExample,
    Split, SynthConfig,
};
use attrgau::eval::{attribute_proximity_mrr, AttributeLevel, ScoringModel};
use attrgau::gradcheck::{central_difference, max_rel_error, rel_error};
use attrgau::graph::{
    node_update_reference, AttributeRecords, AttributeTriple, AttributedGraph, GraphNode,
};
use attrgau::objectives::{
    alignment_loss, combined_constraint, cross_layer_contrast_loss, recommendation_loss,
    total_loss, uniformity_loss, ContrastConfig, ContrastNegatives,
};
use attrgau::trainer::{
    ablation_switches, batch_loss_and_gradients, batch_loss_value, fit, ModelVariant, TrainConfig,
    TrainReport,
};
use attrgau::{Rng, SparseMatrix, Tape, Tensor};

// ── Shared experiment protocol ──────────────────────────────────────────

const DATA_SEED: u64 = 11;
const TRAIN_SEEDS: [u64; 3] = [1, 2, 3];

/// Training protocol for the synthetic-efficacy experiments. Optimizer
/// scale follows the catalog size: the published step-decay schedule is
/// calibrated to datasets three orders of magnitude larger, so the
/// learning rate stays constant within these short runs, and the
/// constraint weight uses the low end of its tuning grid.
fn protocol_config(seed: u64, variant: ModelVariant) -> TrainConfig {
    let mut config = TrainConfig {
        hidden_dim: 32,
        batch_size: 50,
        learning_rate: 0.005,
        lr_decay: 0.1,
        lr_decay_every: 100,
        max_epochs: 15,
        early_stop_patience: 10,
        num_layers: 2,
        seed,
        variant,
        ..TrainConfig::default()
    };
    config.weights.constraint_weight = 0.1;
    config
}

/// Synthetic world with catalog drift: the most recent 30% of sessions
/// revolve around items that were tail items earlier, so test-time
/// intent concentrates on items with thin collaborative evidence whose
/// cohorts are only visible through the attribute graph.
fn drift_world() -> &'static (DatasetBundle, AttributedGraph) {
    static WORLD: OnceLock<(DatasetBundle, AttributedGraph)> = OnceLock::new();
    WORLD.get_or_init(|| {
        let synth = SynthConfig {
            min_session_len: 2,
            max_session_len: 3,
            popularity_exponent: 1.0,
            popularity_shift_at: Some(0.7),
            ..SynthConfig::new(200, 4, 10, 5000, 0.9)
        };
        let (events, records) = synth_generate(&synth, DATA_SEED).unwrap();
        let bundle = preprocess(
            &events,
            &records,
            &PreprocessOptions {
                test_fraction: 0.3,
                ..PreprocessOptions::default()
            },
        )
        .unwrap();
        let graph = AttributedGraph::build(&bundle.records, 2).unwrap();
        (bundle, graph)
    })
}

/// Stationary synthetic world used for the sparsity trend, where training
/// fractions shrink the evidence uniformly without distribution shift.
fn stationary_world() -> &'static (DatasetBundle, AttributedGraph) {
    static WORLD: OnceLock<(DatasetBundle, AttributedGraph)> = OnceLock::new();
    WORLD.get_or_init(|| {
        let synth = SynthConfig {
            min_session_len: 2,
            max_session_len: 4,
            popularity_exponent: 1.0,
            ..SynthConfig::new(200, 4, 10, 5000, 0.9)
        };
        let (events, records) = synth_generate(&synth, DATA_SEED).unwrap();
        let bundle = preprocess(
            &events,
            &records,
            &PreprocessOptions {
                test_fraction: 0.2,
                ..PreprocessOptions::default()
            },
        )
        .unwrap();
        let graph = AttributedGraph::build(&bundle.records, 2).unwrap();
        (bundle, graph)
    })
}

struct TrainedRun {
    report: TrainReport,
    params: BackboneParams,
}

impl TrainedRun {
    fn params_bytes(&self) -> Vec<u8> {
        self.params.to_bytes().unwrap()
    }
}

fn run_variant(
    bundle: &DatasetBundle,
    graph: Option<&AttributedGraph>,
    config: &TrainConfig,
) -> TrainedRun {
    let (params, report) = fit(bundle, graph, config).unwrap();
    TrainedRun { report, params }
}

fn hr5_at_best(report: &TrainReport) -> f64 {
    let best = report.best_epoch.expect("run produced at least one epoch");
    report.epochs[best - 1].metrics.hr5
}

/// Criterion-5 runs: the enhanced and vanilla arms over the train seeds on
/// the drift world. Shared with the determinism criterion.
fn efficacy_runs() -> &'static Vec<(u64, TrainedRun, TrainedRun)> {
    static RUNS: OnceLock<Vec<(u64, TrainedRun, TrainedRun)>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let (bundle, graph) = drift_world();
        TRAIN_SEEDS
            .iter()
            .map(|&seed| {
                let enhanced = run_variant(
                    bundle,
                    Some(graph),
                    &protocol_config(seed, ModelVariant::Enhanced),
                );
                let vanilla =
                    run_variant(bundle, None, &protocol_config(seed, ModelVariant::Vanilla));
                (seed, enhanced, vanilla)
            })
            .collect()
    })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

// ── Criterion 1: graph-oracle equivalence ───────────────────────────────

fn random_records(rng: &mut Rng) -> AttributeRecords {
    let num_items = 1 + rng.below(10);
    let num_parents = 1 + rng.below(4);
    let num_leaves = 1 + rng.below(8);
    let num_triples = rng.below(25);
    let triples = (0..num_triples)
        .map(|_| AttributeTriple {
            item: rng.below(num_items) as u32,
            parent: rng.below(num_parents) as u32,
            leaf: rng.below(num_leaves) as u32,
        })
        .collect();
    AttributeRecords::new(triples, num_items, num_parents, num_leaves).unwrap()
}

fn split_rows(flat: &[f64], records: &AttributeRecords, dim: usize) -> Vec<Vec<f64>> {
    flat.chunks(dim).map(<[f64]>::to_vec).collect()
}

#[test]
fn criterion_01_graph_oracle_equivalence() {
    let start = Instant::now();
    let dim = 4;
    let layers = 3;
    let mut rng = Rng::named(7, "acceptance-graphs");
    let mut max_err: f64 = 0.0;
    for _ in 0..100 {
        let records = random_records(&mut rng);
        let graph = AttributedGraph::build(&records, layers).unwrap();
        let n = records.node_count();
        let v = records.num_items;
        let p = records.num_parents;
        let mut current: Vec<f64> = (0..n * dim).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        for _layer in 0..layers {
            let next = graph.norm_adjacency.mul_dense(&current, dim).unwrap();
            let rows = split_rows(&current, &records, dim);
            let (items, rest) = rows.split_at(v);
            let (parents, leaves) = rest.split_at(p);
            for i in 0..records.num_items {
                let want = node_update_reference(
                    &records,
                    GraphNode::Item(i),
                    items,
                    parents,
                    leaves,
                );
                for d in 0..dim {
                    max_err = max_err.max((next[i * dim + d] - want[d]).abs());
                }
            }
            for a in 0..records.num_leaves {
                let row = v + p + a;
                let want = node_update_reference(
                    &records,
                    GraphNode::Leaf(a),
                    items,
                    parents,
                    leaves,
                );
                for d in 0..dim {
                    max_err = max_err.max((next[row * dim + d] - want[d]).abs());
                }
            }
            current = next;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(max_err < 1e-10, "max abs error {max_err:e}");
    assert!(elapsed < 10.0, "took {elapsed:.2}s");
    println!(
        "criterion 01 graph-oracle equivalence: PASS (100 graphs, {layers} layers, max abs err {max_err:.2e}, {elapsed:.2}s)"
    );
}

// ── Criterion 2: degree-correction identity ─────────────────────────────

#[test]
fn criterion_02_degree_correction_identity() {
    let mut rng = Rng::named(7, "acceptance-graphs");
    for _ in 0..100 {
        let records = random_records(&mut rng);
        let graph = AttributedGraph::build(&records, 1).unwrap();
        let item_counts = records.item_pair_counts();
        let leaf_counts = records.leaf_pair_counts();
        let v = records.num_items;
        let p = records.num_parents;
        for (i, &count) in item_counts.iter().enumerate() {
            let expected = if count == 0 { 1.0 } else { count as f64 };
            assert_eq!(graph.corrected_degrees[i], expected, "item {i}");
        }
        for (a, &count) in leaf_counts.iter().enumerate() {
            let expected = if count == 0 { 1.0 } else { count as f64 };
            assert_eq!(graph.corrected_degrees[v + p + a], expected, "leaf {a}");
        }
        // Parent rows of the normalized adjacency are exact identity rows.
        for c in 0..p {
            let (cols, vals) = graph.norm_adjacency.row(v + c);
            assert_eq!(cols, &[v + c]);
            assert_eq!(vals, &[1.0]);
        }
    }
    println!(
        "criterion 02 degree-correction identity: PASS (pair counts and parent identity rows exact on 100 graphs)"
    );
}

// ── Criterion 3: gradient suite ─────────────────────────────────────────

/// Finite-difference check of a tape-built scalar against every tracked
/// input.
fn fd_check<F>(inputs: &[Tensor], tol: f64, build: F) -> f64
where
    F: Fn(&mut Tape, &[attrgau::TensorId]) -> attrgau::Result<attrgau::TensorId>,
{
    let mut tape = Tape::new();
    let ids: Vec<_> = inputs.iter().map(|t| tape.leaf(t).unwrap()).collect();
    let root = build(&mut tape, &ids).unwrap();
    tape.backward(root).unwrap();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).expect("tracked leaf").to_vec())
        .collect();
    let numeric = central_difference(
        |ts| {
            let mut t = Tape::new();
            let ids: Vec<_> = ts.iter().map(|x| t.leaf(x).unwrap()).collect();
            let root = build(&mut t, &ids)?;
            Ok(t.scalar_value(root))
        },
        inputs,
        1e-5,
    )
    .unwrap();
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        worst = worst.max(max_rel_error(a, n));
    }
    assert!(worst < tol, "max rel error {worst:e} >= {tol:e}");
    worst
}

fn toy_records() -> AttributeRecords {
    AttributeRecords::new(
        vec![
            AttributeTriple { item: 0, parent: 0, leaf: 0 },
            AttributeTriple { item: 1, parent: 0, leaf: 1 },
            AttributeTriple { item: 2, parent: 0, leaf: 0 },
        ],
        3,
        1,
        2,
    )
    .unwrap()
}

#[test]
fn criterion_03_gradient_suite() {
    let start = Instant::now();
    let tol = 1e-4;
    let mut rng = Rng::named(3, "acceptance-grad");
    let mut worst: f64 = 0.0;

    // Tensor operations.
    let a = Tensor::uniform(3, 4, 1.0, &mut rng).with_grad();
    let b = Tensor::uniform(4, 2, 1.0, &mut rng).with_grad();
    worst = worst.max(fd_check(&[a.clone(), b], tol, |t, ids| {
        let y = t.matmul(ids[0], ids[1])?;
        Ok(t.sum_all(y))
    }));
    let bt = Tensor::uniform(5, 4, 1.0, &mut rng).with_grad();
    worst = worst.max(fd_check(&[a.clone(), bt], tol, |t, ids| {
        let y = t.matmul_bt(ids[0], ids[1])?;
        let sq = t.mul(y, y)?;
        Ok(t.sum_all(sq))
    }));
    let at = Tensor::uniform(3, 5, 1.0, &mut rng).with_grad();
    worst = worst.max(fd_check(&[a.clone(), at], tol, |t, ids| {
        let y = t.matmul_at(ids[0], ids[1])?;
        let sq = t.mul(y, y)?;
        Ok(t.sum_all(sq))
    }));

    let sparse = std::sync::Arc::new(
        SparseMatrix::from_triplets(3, 3, vec![(0, 1, 2.0), (1, 0, -1.0), (2, 2, 0.5)]).unwrap(),
    );
    let dense = Tensor::uniform(3, 3, 1.0, &mut rng).with_grad();
    worst = worst.max(fd_check(&[dense], tol, move |t, ids| {
        let y = t.spmm(&sparse, ids[0])?;
        let sq = t.mul(y, y)?;
        Ok(t.sum_all(sq))
    }));

    let x = Tensor::uniform(3, 5, 1.0, &mut rng).with_grad();
    let w = Tensor::uniform(3, 5, 1.0, &mut rng);
    let wv = w.values().to_vec();
    worst = worst.max(fd_check(&[x.clone()], tol, move |t, ids| {
        // sigmoid, tanh, exp, clamp, affine, mul against random weights.
        let s = t.sigmoid(ids[0]);
        let th = t.tanh(s);
        let e = t.exp(th);
        let c = t.clamp(e, 0.2, 2.5);
        let af = t.affine(c, 1.3, -0.1);
        let wc = t.constant(3, 5, wv.clone());
        let m = t.mul(af, wc)?;
        Ok(t.sum_all(m))
    }));
    worst = worst.max(fd_check(&[x.clone()], tol, |t, ids| {
        let sq = t.mul(ids[0], ids[0])?;
        let pos = t.affine(sq, 1.0, 0.3);
        let l = t.ln(pos)?;
        Ok(t.sum_all(l))
    }));
    let wv2 = w.values().to_vec();
    worst = worst.max(fd_check(&[x.clone()], tol, move |t, ids| {
        let sm = t.row_softmax(ids[0]);
        let wc = t.constant(3, 5, wv2.clone());
        let m = t.mul(sm, wc)?;
        Ok(t.sum_all(m))
    }));
    worst = worst.max(fd_check(&[x.clone()], tol, |t, ids| {
        let l = t.lse_rows(ids[0]);
        let sq = t.mul(l, l)?;
        Ok(t.sum_all(sq))
    }));
    let y2 = Tensor::uniform(3, 5, 1.0, &mut rng).with_grad();
    worst = worst.max(fd_check(&[x.clone(), y2.clone()], tol, |t, ids| {
        let d = t.rowwise_dot(ids[0], ids[1])?;
        let sq = t.mul(d, d)?;
        Ok(t.sum_all(sq))
    }));
    let wv3 = w.values().to_vec();
    worst = worst.max(fd_check(&[x.clone()], tol, move |t, ids| {
        let n = t.l2_normalize_rows(ids[0])?;
        let wc = t.constant(3, 5, wv3.clone());
        let m = t.mul(n, wc)?;
        Ok(t.sum_all(m))
    }));
    let bias = Tensor::uniform(1, 5, 1.0, &mut rng).with_grad();
    worst = worst.max(fd_check(&[x.clone(), bias], tol, |t, ids| {
        let y = t.add_bias_row(ids[0], ids[1])?;
        let sq = t.mul(y, y)?;
        Ok(t.sum_all(sq))
    }));
    worst = worst.max(fd_check(&[x.clone(), y2], tol, |t, ids| {
        let s = t.sub(ids[0], ids[1])?;
        let g = t.gather_rows(s, vec![0, 2, 2])?;
        let cat = t.concat_cols(g, g)?;
        let r = t.reshape(cat, 6, 5)?;
        let cat2 = t.concat_rows(&[r, ids[0]])?;
        let sq = t.mul(cat2, cat2)?;
        Ok(t.sum_all(sq))
    }));
    // Dropout with a re-seeded stream is a deterministic function.
    worst = worst.max(fd_check(&[x], tol, |t, ids| {
        let mut drop_rng = Rng::named(5, "drop");
        let d = t.dropout(ids[0], 0.4, true, &mut drop_rng)?;
        let sq = t.mul(d, d)?;
        Ok(t.sum_all(sq))
    }));

    // Backbone stages.
    let session_graph = build_session_graph(&[0, 1, 2, 1]).unwrap();
    let mut init = Rng::named(9, "init");
    let params = BackboneParams::init(3, 1, 2, 4, &mut init);
    let node_embs = Tensor::uniform(3, 4, 1.0, &mut rng).with_grad();
    // Every GGNN and attention weight participates; the embedding tables
    // are not part of these stages.
    let weight_tensors: Vec<Tensor> = params.named()[3..]
        .iter()
        .map(|(_, t)| (*t).clone())
        .collect();
    let mut inputs = vec![node_embs];
    inputs.extend(weight_tensors);
    let graph_clone = session_graph.clone();
    worst = worst.max(fd_check(&inputs, tol, move |t, ids| {
        let dummy = t.constant(1, 4, vec![0.0; 4]);
        let mut stage_ids = vec![dummy, dummy, dummy];
        stage_ids.extend_from_slice(&ids[1..]);
        let param_ids = rebuild_param_ids(t, &stage_ids);
        let out = ggnn_forward(t, &graph_clone, ids[0], &param_ids, 1)?;
        let readout = attention_readout(t, out, &param_ids)?;
        let sq = t.mul(readout, readout)?;
        Ok(t.sum_all(sq))
    }));

    // The five losses.
    let logits = Tensor::uniform(1, 4, 1.0, &mut rng).with_grad();
    worst = worst.max(fd_check(&[logits], tol, |t, ids| {
        let probs = t.row_softmax(ids[0]);
        recommendation_loss(t, probs, 2)
    }));
    let hol = Tensor::uniform(3, 4, 1.0, &mut rng).with_grad();
    let raw = Tensor::uniform(3, 4, 1.0, &mut rng).with_grad();
    worst = worst.max(fd_check(&[hol.clone(), raw.clone()], tol, |t, ids| {
        let mut r = Rng::new(1);
        cross_layer_contrast_loss(t, ids[0], ids[1], &ContrastConfig::default(), &mut r)
    }));
    worst = worst.max(fd_check(&[hol.clone(), raw.clone()], tol, |t, ids| {
        let mut r = Rng::new(2);
        let cfg = ContrastConfig {
            negatives: ContrastNegatives::Sampled(1),
            ..ContrastConfig::default()
        };
        cross_layer_contrast_loss(t, ids[0], ids[1], &cfg, &mut r)
    }));
    worst = worst.max(fd_check(&[hol.clone(), raw.clone()], tol, |t, ids| {
        alignment_loss(t, ids[0], ids[1])
    }));
    worst = worst.max(fd_check(&[hol.clone(), raw.clone()], tol, |t, ids| {
        uniformity_loss(t, ids[0], ids[1])
    }));
    worst = worst.max(fd_check(&[hol, raw], tol, |t, ids| {
        let align = alignment_loss(t, ids[0], ids[1])?;
        let uniform = uniformity_loss(t, ids[0], ids[1])?;
        let au = combined_constraint(t, align, uniform, 0.25, 1.0)?;
        let rec = t.constant_scalar(0.0);
        let ccr = t.constant_scalar(0.0);
        total_loss(t, rec, ccr, au, &[ids[0]], 0.0005, 1.0, 1e-5)
    }));

    // Composed training objective on the toy model: d = 8, three items,
    // one parent, two leaves, batch of two, dropout active.
    let records = toy_records();
    let graph = AttributedGraph::build(&records, 2).unwrap();
    let batch = vec![
        SessionExample {
            prefix: vec![0, 1],
            target: 2,
            origin_session: 0,
            split: Split::Train,
        },
        SessionExample {
            prefix: vec![2, 0, 1],
            target: 0,
            origin_session: 1,
            split: Split::Train,
        },
    ];
    let config = TrainConfig {
        hidden_dim: 8,
        ..protocol_config(5, ModelVariant::Enhanced)
    };
    let mut init = Rng::named(5, "init");
    let toy_params = BackboneParams::init(3, 1, 2, 8, &mut init);
    let mut d_rng = Rng::named(7, "dropout");
    let mut c_rng = Rng::named(7, "contrast");
    let (_, grads) =
        batch_loss_and_gradients(&batch, &toy_params, Some(&graph), &config, &mut d_rng, &mut c_rng)
            .unwrap();

    let mut composed_worst: f64 = 0.0;
    for (name, base) in toy_params.named() {
        let analytic = &grads.iter().find(|(n, _)| *n == name).unwrap().1;
        for ci in 0..base.numel() {
            let h = 1e-5;
            let eval = |delta: f64| -> f64 {
                let mut perturbed = toy_params.clone();
                perturbed
                    .named_mut()
                    .into_iter()
                    .find(|(n, _)| *n == name)
                    .unwrap()
                    .1
                    .values_mut()[ci] += delta;
                let mut d = Rng::named(7, "dropout");
                let mut c = Rng::named(7, "contrast");
                batch_loss_value(&batch, &perturbed, Some(&graph), &config, &mut d, &mut c)
                    .unwrap()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            composed_worst = composed_worst.max(rel_error(analytic[ci], numeric));
        }
    }
    assert!(
        composed_worst < tol,
        "composed loss max rel error {composed_worst:e}"
    );
    worst = worst.max(composed_worst);

    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "took {elapsed:.2}s");
    println!(
        "criterion 03 gradient suite: PASS (all ops + backbone + losses + composed loss, max rel err {worst:.2e}, {elapsed:.2}s)"
    );
}

/// Rebuild a ParamIds struct from leaf ids laid out in `named` order.
fn rebuild_param_ids(
    _tape: &mut Tape,
    ids: &[attrgau::TensorId],
) -> attrgau::backbone::ParamIds {
    attrgau::backbone::ParamIds {
        item_embeddings: ids[0],
        parent_embeddings: ids[1],
        leaf_embeddings: ids[2],
        msg_in_weight: ids[3],
        msg_in_bias: ids[4],
        msg_out_weight: ids[5],
        msg_out_bias: ids[6],
        gate_update_w: ids[7],
        gate_update_u: ids[8],
        gate_reset_w: ids[9],
        gate_reset_u: ids[10],
        gate_cand_w: ids[11],
        gate_cand_u: ids[12],
        attn_last: ids[13],
        attn_each: ids[14],
        attn_bias: ids[15],
        attn_score: ids[16],
        attn_mix: ids[17],
    }
}

// ── Criterion 4: closed-form loss values ────────────────────────────────

#[test]
fn criterion_04_closed_form_loss_values() {
    let mut tape = Tape::new();

    let uniform2 = tape.constant(1, 2, vec![0.5, 0.5]);
    let rec = recommendation_loss(&mut tape, uniform2, 0).unwrap();
    let rec_v = tape.scalar_value(rec);
    assert!((rec_v - 1.386_294).abs() < 1e-6, "rec loss {rec_v}");

    // Two orthonormal anchors aligned with their positives: each anchor
    // term is the one-orthogonal-negative InfoNCE value ln(1 + e^{-5}).
    let rows = vec![1.0, 0.0, 0.0, 1.0];
    let h = tape.constant(2, 2, rows.clone());
    let z = tape.constant(2, 2, rows);
    let mut rng = Rng::new(1);
    let ccr = cross_layer_contrast_loss(
        &mut tape,
        h,
        z,
        &ContrastConfig {
            temperature: 0.2,
            ..ContrastConfig::default()
        },
        &mut rng,
    )
    .unwrap();
    let per_anchor = tape.scalar_value(ccr) / 2.0;
    assert!(
        (per_anchor - 0.006_715).abs() < 1e-6,
        "per-anchor InfoNCE {per_anchor}"
    );

    let pair = tape.constant(2, 2, vec![1.0, 0.0, -1.0, 0.0]);
    let uni = uniformity_loss(&mut tape, pair, pair).unwrap();
    let uni_v = tape.scalar_value(uni);
    assert!((uni_v - (-8.0)).abs() < 1e-9, "uniformity {uni_v}");

    let u = tape.constant(1, 2, vec![1.0, 0.0]);
    let w = tape.constant(1, 2, vec![0.0, 1.0]);
    let align = alignment_loss(&mut tape, u, w).unwrap();
    let align_v = tape.scalar_value(align);
    assert!((align_v - 2.0).abs() < 1e-9, "alignment {align_v}");

    println!(
        "criterion 04 closed-form loss values: PASS (rec {rec_v:.6}, InfoNCE {per_anchor:.6}, uniformity {uni_v:.3}, alignment {align_v:.3})"
    );
}

// ── Criterion 5: synthetic efficacy ─────────────────────────────────────

#[test]
fn criterion_05_synthetic_efficacy() {
    let start = Instant::now();
    let runs = efficacy_runs();
    let enhanced: Vec<f64> = runs.iter().map(|(_, e, _)| hr5_at_best(&e.report)).collect();
    let vanilla: Vec<f64> = runs.iter().map(|(_, _, v)| hr5_at_best(&v.report)).collect();
    let mean_enhanced = mean(&enhanced);
    let mean_vanilla = mean(&vanilla);
    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        mean_enhanced > mean_vanilla,
        "enhanced mean HR@5 {mean_enhanced:.3} not above vanilla {mean_vanilla:.3} \
         (enhanced {enhanced:?}, vanilla {vanilla:?})"
    );
    assert!(elapsed < 900.0, "took {elapsed:.1}s");
    println!(
        "criterion 05 synthetic efficacy: PASS (HR@5 enhanced {mean_enhanced:.2} > vanilla {mean_vanilla:.2} over seeds {TRAIN_SEEDS:?}, {elapsed:.1}s)"
    );
}

// ── Criterion 6: sparsity trend ─────────────────────────────────────────

#[test]
fn criterion_06_sparsity_trend() {
    let (bundle, graph) = stationary_world();
    let mut gains = Vec::new();
    for &fraction in &[0.25, 0.5, 1.0] {
        let mut enhanced = Vec::new();
        let mut vanilla = Vec::new();
        for &seed in &TRAIN_SEEDS {
            let sub = subsample_train(bundle, fraction, seed).unwrap();
            let e = run_variant(&sub, Some(graph), &protocol_config(seed, ModelVariant::Enhanced));
            let v = run_variant(&sub, None, &protocol_config(seed, ModelVariant::Vanilla));
            enhanced.push(hr5_at_best(&e.report));
            vanilla.push(hr5_at_best(&v.report));
        }
        let mean_e = mean(&enhanced);
        let mean_v = mean(&vanilla);
        let relative_gain = 100.0 * (mean_e - mean_v) / mean_v;
        gains.push((fraction, relative_gain, mean_e, mean_v));
    }
    let gain_quarter = gains[0].1;
    let gain_full = gains[2].1;
    assert!(
        gain_quarter >= gain_full,
        "relative gain at 0.25 ({gain_quarter:.2}%) below gain at 1.0 ({gain_full:.2}%); all: {gains:?}"
    );
    println!(
        "criterion 06 sparsity trend: PASS (relative HR@5 gain {:.2}% at fraction 0.25 >= {:.2}% at 1.0; mid point {:.2}% at 0.5)",
        gain_quarter, gain_full, gains[1].1
    );
}

// ── Criterion 7: over-smoothing mitigation ──────────────────────────────

/// Mean pairwise cosine similarity among the item rows of the holistic
/// embedding table under the given trained parameters.
fn mean_pairwise_item_cosine(params: &BackboneParams, graph: &AttributedGraph) -> f64 {
    let scoring = ScoringModel {
        params,
        graph: Some(graph),
        encode: Default::default(),
    };
    let table = scoring.holistic_item_table().unwrap().unwrap();
    let (rows, cols) = (table.shape()[0], table.shape()[1]);
    let values = table.values();
    let mut normalized = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &values[r * cols..(r + 1) * cols];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for c in 0..cols {
            normalized[r * cols + c] = row[c] / norm;
        }
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..rows {
        for j in (i + 1)..rows {
            let dot: f64 = (0..cols)
                .map(|c| normalized[i * cols + c] * normalized[j * cols + c])
                .sum();
            total += dot;
            pairs += 1;
        }
    }
    total / pairs as f64
}

#[test]
fn criterion_07_over_smoothing_mitigation() {
    let (bundle, _) = stationary_world();
    let deep_graph = AttributedGraph::build(&bundle.records, 4).unwrap();
    let mut with_contrast = Vec::new();
    let mut without_contrast = Vec::new();
    for &seed in &TRAIN_SEEDS {
        let mut config = protocol_config(seed, ModelVariant::Enhanced);
        config.num_layers = 4;
        config.max_epochs = 8;
        config.weights.contrast_weight = 0.0005;
        let run = run_variant(bundle, Some(&deep_graph), &config);
        with_contrast.push(mean_pairwise_item_cosine(&run.params, &deep_graph));

        config.weights.contrast_weight = 0.0;
        let run = run_variant(bundle, Some(&deep_graph), &config);
        without_contrast.push(mean_pairwise_item_cosine(&run.params, &deep_graph));
    }
    let mean_with = mean(&with_contrast);
    let mean_without = mean(&without_contrast);
    assert!(
        mean_with < mean_without,
        "mean pairwise cosine with contrast {mean_with:.4} not below {mean_without:.4} \
         (with {with_contrast:?}, without {without_contrast:?})"
    );
    println!(
        "criterion 07 over-smoothing mitigation: PASS (L=4 mean pairwise item cosine {mean_with:.4} with contrast < {mean_without:.4} without)"
    );
}

// ── Criterion 8: attribute-proximity analogue ───────────────────────────

#[test]
fn criterion_08_attribute_proximity_analogue() {
    // Fully coherent walks: the latest prefix item always shares the leaf.
    let synth = SynthConfig {
        min_session_len: 2,
        max_session_len: 4,
        ..SynthConfig::new(120, 3, 8, 1500, 1.0)
    };
    let (events, records) = synth_generate(&synth, 13).unwrap();
    let bundle = preprocess(&events, &records, &PreprocessOptions::default()).unwrap();
    let leaf_mrr = attribute_proximity_mrr(&bundle.test, &bundle.records, AttributeLevel::Leaf);
    assert_eq!(leaf_mrr, 100.0, "coherent leaf proximity {leaf_mrr}");

    // Zero coherence: matches an independent recomputation exactly and
    // sits far below saturation.
    let synth = SynthConfig {
        min_session_len: 2,
        max_session_len: 4,
        ..SynthConfig::new(120, 3, 8, 1500, 0.0)
    };
    let (events, records) = synth_generate(&synth, 17).unwrap();
    let bundle = preprocess(&events, &records, &PreprocessOptions::default()).unwrap();
    let leaf_mrr = attribute_proximity_mrr(&bundle.test, &bundle.records, AttributeLevel::Leaf);

    // Brute-force recomputation from scratch.
    let mut leaf_of = vec![Vec::new(); bundle.records.num_items];
    for t in &bundle.records.triples {
        leaf_of[t.item as usize].push(t.leaf);
    }
    let mut total = 0.0;
    for example in &bundle.test {
        for (back, &item) in example.prefix.iter().rev().enumerate() {
            let shares = leaf_of[item as usize]
                .iter()
                .any(|l| leaf_of[example.target as usize].contains(l));
            if shares {
                total += 1.0 / (back + 1) as f64;
                break;
            }
        }
    }
    let expected = 100.0 * total / bundle.test.len() as f64;
    assert_eq!(leaf_mrr, expected, "brute-force recomputation disagrees");
    assert!(leaf_mrr < 50.0, "incoherent leaf proximity {leaf_mrr}");
    println!(
        "criterion 08 attribute proximity: PASS (coherence 1.0 -> 100.0 exactly; coherence 0.0 -> {leaf_mrr:.2} matches brute force)"
    );
}

// ── Criterion 9: ablation machinery ─────────────────────────────────────

#[test]
fn criterion_09_ablation_machinery() {
    let (bundle, graph) = drift_world();
    let full_mean = mean(
        &efficacy_runs()
            .iter()
            .map(|(_, e, _)| hr5_at_best(&e.report))
            .collect::<Vec<f64>>(),
    );
    let mut ablation_means = Vec::new();
    for variant in ["w/o L_ccr", "w/o L_align", "w/o L_uniform"] {
        let mut values = Vec::new();
        for &seed in &TRAIN_SEEDS {
            let config =
                ablation_switches(protocol_config(seed, ModelVariant::Enhanced), variant).unwrap();
            let run = run_variant(bundle, Some(graph), &config);
            assert!(run.report.config_echo.contains(&format!("ablation={variant}")));
            values.push(hr5_at_best(&run.report));
        }
        ablation_means.push((variant, mean(&values)));
    }
    let worst = ablation_means
        .iter()
        .map(|(_, m)| *m)
        .fold(f64::INFINITY, f64::min);
    assert!(
        full_mean >= worst,
        "full variant HR@5 {full_mean:.3} below worst ablation {worst:.3} ({ablation_means:?})"
    );
    println!(
        "criterion 09 ablation machinery: PASS (full {full_mean:.2} >= worst ablation {worst:.2}; {ablation_means:?})"
    );
}

// ── Criterion 10: determinism ───────────────────────────────────────────

#[test]
fn criterion_10_determinism() {
    let (bundle, graph) = drift_world();
    let reference = efficacy_runs();
    for (seed, enhanced_ref, vanilla_ref) in reference.iter() {
        let enhanced = run_variant(
            bundle,
            Some(graph),
            &protocol_config(*seed, ModelVariant::Enhanced),
        );
        let vanilla = run_variant(bundle, None, &protocol_config(*seed, ModelVariant::Vanilla));
        assert_eq!(
            enhanced.report.canonical_lines(),
            enhanced_ref.report.canonical_lines(),
            "enhanced report differs for seed {seed}"
        );
        assert_eq!(
            vanilla.report.canonical_lines(),
            vanilla_ref.report.canonical_lines(),
            "vanilla report differs for seed {seed}"
        );
        assert_eq!(
            enhanced.params_bytes(),
            enhanced_ref.params_bytes(),
            "enhanced parameters differ for seed {seed}"
        );
        assert_eq!(
            vanilla.params_bytes(),
            vanilla_ref.params_bytes(),
            "vanilla parameters differ for seed {seed}"
        );
    }
    println!(
        "criterion 10 determinism: PASS (repeated runs bit-identical for seeds {TRAIN_SEEDS:?})"
    );
}
