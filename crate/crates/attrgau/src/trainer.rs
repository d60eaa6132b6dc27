//! Training loop: per-batch graph propagation, dual-channel session
//! encoding, the combined objective, Adam updates with a step learning-rate
//! schedule, per-epoch evaluation, and early stopping on MRR@5.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;
use std::time::Instant;

use crate::backbone::{
    encode_raw_only, encode_session, predict_scores, BackboneParams, EncodeConfig,
};
use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::eval::{MetricsReport, ScoringModel};
use crate::graph::{propagate, AttributedGraph};
use crate::objectives::{
    alignment_loss, combined_constraint, cross_layer_contrast_loss,
    cross_layer_contrast_loss_anchored, recommendation_loss_with, total_loss, uniformity_loss,
    ContrastConfig, ContrastNegatives, LossWeights, RecLossKind,
};
use crate::rng::Rng;
use crate::tensor::{adam_step, AdamState, Tape};

/// Whether the attribute channel participates. The vanilla variant is the
/// plain backbone: raw embeddings only, no propagation, no auxiliary
/// losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelVariant {
    Enhanced,
    Vanilla,
}

/// Which rows of the entity tables anchor the cross-layer contrast sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContrastAnchors {
    /// Every table row, each step.
    FullTable,
    /// Only the items of the current batch (leaf anchors stay full; the
    /// leaf table is small).
    Batch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate every `lr_decay_every`
    /// epochs: lr(e) = base * decay^floor(e / every), e zero-based.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub max_epochs: usize,
    /// Stop after this many consecutive epochs without an MRR@5
    /// improvement on the test split.
    pub early_stop_patience: usize,
    /// Attribute-graph propagation depth L.
    pub num_layers: usize,
    pub ggnn_steps: usize,
    pub dropout_rate: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub max_session_len: usize,
    /// Contrast negatives per anchor; None spans the full table.
    pub negative_sampling: Option<usize>,
    /// Anchor scope of the cross-layer contrast.
    pub contrast_anchors: ContrastAnchors,
    /// Next-item objective form.
    pub rec_loss: RecLossKind,
    pub variant: ModelVariant,
    /// Ablation label recorded in the report.
    pub ablation: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 100,
            batch_size: 100,
            learning_rate: 0.001,
            lr_decay: 0.1,
            lr_decay_every: 3,
            max_epochs: 30,
            early_stop_patience: 10,
            num_layers: 2,
            ggnn_steps: 1,
            dropout_rate: 0.2,
            weights: LossWeights::default(),
            seed: 0,
            max_session_len: 50,
            negative_sampling: None,
            contrast_anchors: ContrastAnchors::FullTable,
            rec_loss: RecLossKind::FullBinary,
            variant: ModelVariant::Enhanced,
            ablation: "full".to_string(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0
            || self.batch_size == 0
            || self.num_layers == 0
            || self.ggnn_steps == 0
            || self.max_session_len == 0
            || self.lr_decay_every == 0
        {
            return Err(Error::Config("size parameters must be positive".into()));
        }
        if self.learning_rate <= 0.0 || self.lr_decay <= 0.0 {
            return Err(Error::Config("learning rate and decay must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        self.weights.validate()
    }

    pub fn learning_rate_at(&self, epoch_index: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch_index / self.lr_decay_every) as i32)
    }

    fn encode_config(&self, training: bool) -> EncodeConfig {
        EncodeConfig {
            ggnn_steps: self.ggnn_steps,
            dropout_rate: self.dropout_rate,
            training,
            max_session_len: self.max_session_len,
        }
    }

    fn contrast_config(&self) -> ContrastConfig {
        ContrastConfig {
            temperature: self.weights.temperature,
            negatives: match self.negative_sampling {
                Some(count) => ContrastNegatives::Sampled(count),
                None => ContrastNegatives::Full,
            },
            mean_reduction: false,
        }
    }

    /// Deterministic one-line echo of every field, for reports.
    pub fn canonical_string(&self) -> String {
        let variant = match self.variant {
            ModelVariant::Enhanced => "enhanced",
            ModelVariant::Vanilla => "vanilla",
        };
        let negatives = match self.negative_sampling {
            Some(n) => n.to_string(),
            None => "off".to_string(),
        };
        let anchors = match self.contrast_anchors {
            ContrastAnchors::FullTable => "full",
            ContrastAnchors::Batch => "batch",
        };
        let rec_loss = match self.rec_loss {
            RecLossKind::FullBinary => "full",
            RecLossKind::TargetOnly => "target-nll",
        };
        format!(
            "hidden_dim={} batch_size={} learning_rate={} lr_decay={} lr_decay_every={} \
             max_epochs={} early_stop_patience={} num_layers={} ggnn_steps={} dropout_rate={} \
             align_weight={} uniform_weight={} contrast_weight={} constraint_weight={} \
             l2_weight={} temperature={} seed={} max_session_len={} negative_sampling={} \
             contrast_anchors={} rec_loss={} variant={} ablation={}",
            self.hidden_dim,
            self.batch_size,
            self.learning_rate,
            self.lr_decay,
            self.lr_decay_every,
            self.max_epochs,
            self.early_stop_patience,
            self.num_layers,
            self.ggnn_steps,
            self.dropout_rate,
            self.weights.align_weight,
            self.weights.uniform_weight,
            self.weights.contrast_weight,
            self.weights.constraint_weight,
            self.weights.l2_weight,
            self.weights.temperature,
            self.seed,
            self.max_session_len,
            negatives,
            anchors,
            rec_loss,
            variant,
            self.ablation,
        )
    }

    /// Set one field from a key/value pair (config file or CLI override).
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: String| Error::Config(format!("bad value for {key}: {e}"));
        match key {
            "hidden_dim" => self.hidden_dim = value.parse().map_err(|e| bad(format!("{e}")))?,
            "batch_size" => self.batch_size = value.parse().map_err(|e| bad(format!("{e}")))?,
            "learning_rate" => {
                self.learning_rate = value.parse().map_err(|e| bad(format!("{e}")))?;
            }
            "lr_decay" => self.lr_decay = value.parse().map_err(|e| bad(format!("{e}")))?,
            "lr_decay_every" => {
                self.lr_decay_every = value.parse().map_err(|e| bad(format!("{e}")))?;
            }
            "max_epochs" => self.max_epochs = value.parse().map_err(|e| bad(format!("{e}")))?,
            "early_stop_patience" => {
                self.early_stop_patience = value.parse().map_err(|e| bad(format!("{e}")))?;
            }
            "num_layers" => self.num_layers = value.parse().map_err(|e| bad(format!("{e}")))?,
            "ggnn_steps" => self.ggnn_steps = value.parse().map_err(|e| bad(format!("{e}")))?,
            "dropout_rate" => {
                self.dropout_rate = value.parse().map_err(|e| bad(format!("{e}")))?;
            }
            "align_weight" => {
                self.weights.align_weight = value.parse().map_err(|e| bad(format!("{e}")))?;
            }
            "uniform_weight" => {
                self.weights.uniform_weight = value.parse().map_err(|e| bad(format!("{e}")))?;
            }
            "contrast_weight" => {
                self.weights.contrast_weight = value.parse().map_err(|e| bad(format!("{e}")))?;
            }
            "constraint_weight" => {
                self.weights.constraint_weight = value.parse().map_err(|e| bad(format!("{e}")))?;
            }
            "l2_weight" => {
                self.weights.l2_weight = value.parse().map_err(|e| bad(format!("{e}")))?;
            }
            "temperature" => {
                self.weights.temperature = value.parse().map_err(|e| bad(format!("{e}")))?;
            }
            "seed" => self.seed = value.parse().map_err(|e| bad(format!("{e}")))?,
            "max_session_len" => {
                self.max_session_len = value.parse().map_err(|e| bad(format!("{e}")))?;
            }
            "negative_sampling" => {
                self.negative_sampling = if value == "off" {
                    None
                } else {
                    Some(value.parse().map_err(|e| bad(format!("{e}")))?)
                };
            }
            "contrast_anchors" => {
                self.contrast_anchors = match value {
                    "full" => ContrastAnchors::FullTable,
                    "batch" => ContrastAnchors::Batch,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown contrast anchor scope '{other}'"
                        )))
                    }
                };
            }
            "rec_loss" => {
                self.rec_loss = match value {
                    "full" => RecLossKind::FullBinary,
                    "target-nll" => RecLossKind::TargetOnly,
                    other => {
                        return Err(Error::Config(format!("unknown rec loss form '{other}'")))
                    }
                };
            }
            "variant" => {
                self.variant = match value {
                    "enhanced" => ModelVariant::Enhanced,
                    "vanilla" => ModelVariant::Vanilla,
                    other => return Err(Error::Config(format!("unknown variant '{other}'"))),
                };
            }
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parse a flat `key = value` config file; `#` lines are comments.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut content = String::new();
        let mut r = reader;
        r.read_to_string(&mut content)?;
        let mut config = Self::default();
        for (lineno, raw) in content.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::Parse {
                line: lineno + 1,
                message: "expected 'key = value'".into(),
            })?;
            config.apply_kv(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn from_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::from_reader(BufReader::new(File::open(path)?))
    }
}

/// Named ablation switches. "full" leaves the config untouched; the
/// "w/o" variants zero out one objective weight each.
pub fn ablation_switches(mut config: TrainConfig, variant: &str) -> Result<TrainConfig> {
    match variant {
        "full" => {}
        "w/o L_ccr" => config.weights.contrast_weight = 0.0,
        "w/o L_align" => config.weights.align_weight = 0.0,
        "w/o L_uniform" => config.weights.uniform_weight = 0.0,
        other => {
            return Err(Error::Config(format!(
                "unknown ablation variant '{other}' (expected full, w/o L_ccr, w/o L_align, w/o L_uniform)"
            )))
        }
    }
    config.ablation = variant.to_string();
    Ok(config)
}

/// Scalar values of every loss term for one step or one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub rec: f64,
    pub contrast: f64,
    pub align: f64,
    pub uniform: f64,
    pub constraint: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub learning_rate: f64,
    pub losses: LossBreakdown,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_mrr5: f64,
    pub wall_clock_seconds: f64,
    pub config_echo: String,
}

impl TrainReport {
    /// Line-delimited structured text: one record per epoch plus a final
    /// summary record. Deterministic (no timestamps); float formatting is
    /// the shortest round-trip representation.
    pub fn canonical_lines(&self) -> Vec<String> {
        let mut lines = Vec::with_capacity(self.epochs.len() + 2);
        lines.push(format!("config {}", self.config_echo));
        for e in &self.epochs {
            lines.push(format!(
                "epoch={} lr={} loss_total={} loss_rec={} loss_ccr={} loss_align={} \
                 loss_uniform={} hr5={} hr10={} mrr5={} mrr10={}",
                e.epoch,
                e.learning_rate,
                e.losses.total,
                e.losses.rec,
                e.losses.contrast,
                e.losses.align,
                e.losses.uniform,
                e.metrics.hr5,
                e.metrics.hr10,
                e.metrics.mrr5,
                e.metrics.mrr10,
            ));
        }
        let best = match self.best_epoch {
            Some(e) => e.to_string(),
            None => "none".to_string(),
        };
        lines.push(format!(
            "summary epochs_run={} best_epoch={} best_mrr5={}",
            self.epochs.len(),
            best,
            self.best_mrr5,
        ));
        lines
    }

    /// Canonical lines plus a trailing wall-clock comment (the one
    /// non-deterministic line, excluded from idempotency comparisons).
    pub fn write_text<W: Write>(&self, w: &mut W) -> Result<()> {
        for line in self.canonical_lines() {
            writeln!(w, "{line}")?;
        }
        writeln!(w, "# wall_clock_s={:.3}", self.wall_clock_seconds)?;
        Ok(())
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = std::io::BufWriter::new(File::create(path)?);
        self.write_text(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

struct ComposedLoss {
    tape: Tape,
    param_ids: crate::backbone::ParamIds,
    total: crate::tensor::TensorId,
    breakdown: LossBreakdown,
}

/// Build the full batch objective on a fresh tape. Holistic embeddings are
/// recomputed from the current tables so every gradient path stays
/// consistent.
fn compose_batch_loss(
    batch: &[crate::data::SessionExample],
    params: &BackboneParams,
    graph: Option<&AttributedGraph>,
    config: &TrainConfig,
    dropout_rng: &mut Rng,
    contrast_rng: &mut Rng,
) -> Result<ComposedLoss> {
    if batch.is_empty() {
        return Err(Error::Input("empty training batch".into()));
    }
    let mut tape = Tape::new();
    let ids = params.register(&mut tape)?;
    let encode_cfg = config.encode_config(true);

    let mut rec_terms = Vec::with_capacity(batch.len());
    let mut holistic_sessions = Vec::with_capacity(batch.len());
    let mut raw_sessions = Vec::with_capacity(batch.len());

    let (contrast, align, uniform, constraint) = match (config.variant, graph) {
        (ModelVariant::Enhanced, Some(graph)) => {
            let e0 = tape.concat_rows(&[
                ids.item_embeddings,
                ids.parent_embeddings,
                ids.leaf_embeddings,
            ])?;
            let hol = propagate(&mut tape, graph, e0, false)?;
            let hol_items = tape.gather_rows(hol.holistic, graph.item_range().collect())?;
            let hol_leaves = tape.gather_rows(hol.holistic, graph.leaf_range().collect())?;

            for example in batch {
                let channels = encode_session(
                    &mut tape,
                    &example.prefix,
                    ids.item_embeddings,
                    hol_items,
                    &ids,
                    &encode_cfg,
                    dropout_rng,
                )?;
                let probs = predict_scores(&mut tape, channels.session_fused, ids.item_embeddings)?;
                rec_terms.push(recommendation_loss_with(
                    &mut tape,
                    probs,
                    example.target as usize,
                    config.rec_loss,
                )?);
                holistic_sessions.push(channels.session_holistic);
                raw_sessions.push(channels.session_raw);
            }

            let ccr_cfg = config.contrast_config();
            let ccr_items = match config.contrast_anchors {
                ContrastAnchors::FullTable => cross_layer_contrast_loss(
                    &mut tape,
                    hol_items,
                    ids.item_embeddings,
                    &ccr_cfg,
                    contrast_rng,
                )?,
                ContrastAnchors::Batch => {
                    let mut batch_items: Vec<usize> = batch
                        .iter()
                        .flat_map(|e| {
                            e.prefix
                                .iter()
                                .copied()
                                .chain(std::iter::once(e.target))
                        })
                        .map(|item| item as usize)
                        .collect();
                    batch_items.sort_unstable();
                    batch_items.dedup();
                    cross_layer_contrast_loss_anchored(
                        &mut tape,
                        hol_items,
                        ids.item_embeddings,
                        &batch_items,
                        &ccr_cfg,
                        contrast_rng,
                    )?
                }
            };
            let ccr_leaves = cross_layer_contrast_loss(
                &mut tape,
                hol_leaves,
                ids.leaf_embeddings,
                &ccr_cfg,
                contrast_rng,
            )?;
            let contrast = tape.add(ccr_items, ccr_leaves)?;

            let s_h = tape.concat_rows(&holistic_sessions)?;
            let s_o = tape.concat_rows(&raw_sessions)?;
            let align = alignment_loss(&mut tape, s_h, s_o)?;
            let uniform = uniformity_loss(&mut tape, s_h, s_o)?;
            let constraint = combined_constraint(
                &mut tape,
                align,
                uniform,
                config.weights.align_weight,
                config.weights.uniform_weight,
            )?;
            (contrast, align, uniform, constraint)
        }
        (ModelVariant::Enhanced, None) => {
            return Err(Error::Dataset(
                "enhanced training requires an attributed graph".into(),
            ))
        }
        (ModelVariant::Vanilla, _) => {
            for example in batch {
                let repr = encode_raw_only(
                    &mut tape,
                    &example.prefix,
                    ids.item_embeddings,
                    &ids,
                    &encode_cfg,
                )?;
                let probs = predict_scores(&mut tape, repr, ids.item_embeddings)?;
                rec_terms.push(recommendation_loss_with(
                    &mut tape,
                    probs,
                    example.target as usize,
                    config.rec_loss,
                )?);
            }
            let zero_a = tape.constant_scalar(0.0);
            let zero_b = tape.constant_scalar(0.0);
            let zero_c = tape.constant_scalar(0.0);
            let zero_d = tape.constant_scalar(0.0);
            (zero_a, zero_b, zero_c, zero_d)
        }
    };

    let rec_stack = tape.concat_rows(&rec_terms)?;
    let rec_sum = tape.sum_all(rec_stack);
    let rec = tape.affine(rec_sum, 1.0 / batch.len() as f64, 0.0);

    let all_params = ids.all();
    let total = total_loss(
        &mut tape,
        rec,
        contrast,
        constraint,
        &all_params,
        config.weights.contrast_weight,
        config.weights.constraint_weight,
        config.weights.l2_weight,
    )?;

    let breakdown = LossBreakdown {
        rec: tape.scalar_value(rec),
        contrast: tape.scalar_value(contrast),
        align: tape.scalar_value(align),
        uniform: tape.scalar_value(uniform),
        constraint: tape.scalar_value(constraint),
        total: tape.scalar_value(total),
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss diverged: rec={} ccr={} align={} uniform={} total={}",
            breakdown.rec, breakdown.contrast, breakdown.align, breakdown.uniform, breakdown.total
        )));
    }
    Ok(ComposedLoss {
        tape,
        param_ids: ids,
        total,
        breakdown,
    })
}

/// Forward-only batch objective value; the finite-difference oracles probe
/// this with re-seeded rng streams.
pub fn batch_loss_value(
    batch: &[crate::data::SessionExample],
    params: &BackboneParams,
    graph: Option<&AttributedGraph>,
    config: &TrainConfig,
    dropout_rng: &mut Rng,
    contrast_rng: &mut Rng,
) -> Result<f64> {
    let composed = compose_batch_loss(batch, params, graph, config, dropout_rng, contrast_rng)?;
    Ok(composed.breakdown.total)
}

/// Batch objective with the analytic gradient of every named parameter.
pub fn batch_loss_and_gradients(
    batch: &[crate::data::SessionExample],
    params: &BackboneParams,
    graph: Option<&AttributedGraph>,
    config: &TrainConfig,
    dropout_rng: &mut Rng,
    contrast_rng: &mut Rng,
) -> Result<(LossBreakdown, Vec<(&'static str, Vec<f64>)>)> {
    let mut composed = compose_batch_loss(batch, params, graph, config, dropout_rng, contrast_rng)?;
    composed.tape.backward(composed.total)?;
    let names: Vec<&'static str> = params.named().iter().map(|(n, _)| *n).collect();
    let grads = names
        .into_iter()
        .zip(composed.param_ids.all())
        .map(|(name, id)| {
            let grad = match composed.tape.grad(id) {
                Some(g) => g.to_vec(),
                None => vec![0.0; composed.tape.values(id).len()],
            };
            (name, grad)
        })
        .collect();
    Ok((composed.breakdown, grads))
}

/// One optimization step over a batch: compose the objective, run the
/// backward pass, and apply a bias-corrected Adam update to every
/// parameter. Returns the loss values that were optimized.
pub fn train_step(
    batch: &[crate::data::SessionExample],
    params: &mut BackboneParams,
    graph: Option<&AttributedGraph>,
    config: &TrainConfig,
    dropout_rng: &mut Rng,
    contrast_rng: &mut Rng,
    optimizer: &mut HashMap<&'static str, AdamState>,
) -> Result<LossBreakdown> {
    let (breakdown, grads) =
        batch_loss_and_gradients(batch, params, graph, config, dropout_rng, contrast_rng)?;
    for (name, grad) in grads {
        let state = optimizer
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing optimizer state for {name}")))?;
        let (_, tensor) = params
            .named_mut()
            .into_iter()
            .find(|(n, _)| *n == name)
            .expect("named parameter exists");
        adam_step(tensor, &grad, state)?;
        if !tensor.is_finite() {
            return Err(Error::NonFinite(format!(
                "parameter {name} became non-finite after the update"
            )));
        }
    }
    Ok(breakdown)
}

/// Full training run. Returns the parameters of the best epoch by test
/// MRR@5 (the initial parameters when no epoch ran) and the report.
pub fn fit(
    bundle: &DatasetBundle,
    graph: Option<&AttributedGraph>,
    config: &TrainConfig,
) -> Result<(BackboneParams, TrainReport)> {
    config.validate()?;
    if bundle.train.is_empty() {
        return Err(Error::Dataset("bundle has no training examples".into()));
    }
    if config.variant == ModelVariant::Enhanced {
        let graph = graph.ok_or_else(|| {
            Error::Dataset("enhanced training requires an attributed graph".into())
        })?;
        if graph.num_items != bundle.num_items()
            || graph.num_parents != bundle.records.num_parents
            || graph.num_leaves != bundle.records.num_leaves
        {
            return Err(Error::Dataset(format!(
                "graph sizes ({}, {}, {}) do not match bundle sizes ({}, {}, {})",
                graph.num_items,
                graph.num_parents,
                graph.num_leaves,
                bundle.num_items(),
                bundle.records.num_parents,
                bundle.records.num_leaves
            )));
        }
    }

    let start = Instant::now();
    let mut init_rng = Rng::named(config.seed, "init");
    let mut params = BackboneParams::init(
        bundle.num_items(),
        bundle.records.num_parents.max(1),
        bundle.records.num_leaves.max(1),
        config.hidden_dim,
        &mut init_rng,
    );
    let mut optimizer: HashMap<&'static str, AdamState> = params
        .named()
        .iter()
        .map(|(name, tensor)| (*name, AdamState::new(tensor.numel(), config.learning_rate)))
        .collect();

    let mut shuffle_rng = Rng::named(config.seed, "shuffle");
    let mut dropout_rng = Rng::named(config.seed, "dropout");
    let mut contrast_rng = Rng::named(config.seed, "contrast");

    let mut epochs = Vec::new();
    let mut best_epoch = None;
    let mut best_mrr5 = f64::NEG_INFINITY;
    let mut best_params = params.clone();
    let mut stale_epochs = 0usize;

    for epoch_index in 0..config.max_epochs {
        let lr = config.learning_rate_at(epoch_index);
        for state in optimizer.values_mut() {
            state.learning_rate = lr;
        }

        let mut order: Vec<usize> = (0..bundle.train.len()).collect();
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = LossBreakdown::default();
        let mut examples_seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<crate::data::SessionExample> =
                chunk.iter().map(|&i| bundle.train[i].clone()).collect();
            let breakdown = train_step(
                &batch,
                &mut params,
                graph,
                config,
                &mut dropout_rng,
                &mut contrast_rng,
                &mut optimizer,
            )?;
            let w = batch.len() as f64;
            loss_sum.rec += breakdown.rec * w;
            loss_sum.contrast += breakdown.contrast * w;
            loss_sum.align += breakdown.align * w;
            loss_sum.uniform += breakdown.uniform * w;
            loss_sum.constraint += breakdown.constraint * w;
            loss_sum.total += breakdown.total * w;
            examples_seen += batch.len();
        }
        let n = examples_seen as f64;
        let losses = LossBreakdown {
            rec: loss_sum.rec / n,
            contrast: loss_sum.contrast / n,
            align: loss_sum.align / n,
            uniform: loss_sum.uniform / n,
            constraint: loss_sum.constraint / n,
            total: loss_sum.total / n,
        };

        let scoring = ScoringModel {
            params: &params,
            graph: match config.variant {
                ModelVariant::Enhanced => graph,
                ModelVariant::Vanilla => None,
            },
            encode: config.encode_config(false),
        };
        let metrics = scoring.evaluate(&bundle.test)?;

        epochs.push(EpochRecord {
            epoch: epoch_index + 1,
            learning_rate: lr,
            losses,
            metrics: metrics.clone(),
        });

        if metrics.mrr5 > best_mrr5 {
            best_mrr5 = metrics.mrr5;
            best_epoch = Some(epoch_index + 1);
            best_params = params.clone();
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= config.early_stop_patience {
                break;
            }
        }
    }

    let report = TrainReport {
        epochs,
        best_epoch,
        best_mrr5: if best_mrr5.is_finite() { best_mrr5 } else { 0.0 },
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        config_echo: config.canonical_string(),
    };
    Ok((best_params, report))
}
