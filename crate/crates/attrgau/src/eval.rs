//! Evaluation: top-N ranking metrics (hit rate and mean reciprocal rank),
//! scoring of test examples through a trained model, the attribute
//! proximity analysis, noise-injection robustness, and popularity-grouped
//! breakdowns. Ranking ties break by ascending item id.

use std::collections::BTreeSet;

use crate::backbone::{
    encode_raw_only, encode_session, predict_logits, BackboneParams, EncodeConfig,
};
use crate::data::SessionExample;
use crate::error::{Error, Result};
use crate::graph::{propagate, AttributeRecords, AttributedGraph};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

/// Headline ranking metrics, as percentages in [0, 100].
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub hr5: f64,
    pub hr10: f64,
    pub mrr5: f64,
    pub mrr10: f64,
    pub example_count: usize,
    pub per_group: Option<Vec<GroupMetrics>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMetrics {
    pub group: usize,
    pub example_count: usize,
    pub hr5: f64,
    pub mrr5: f64,
    pub hr10: f64,
    pub mrr10: f64,
}

/// 1-based rank of the target among the scores, higher score first; equal
/// scores rank by ascending item id.
fn rank_of(scores: &[f64], target: usize) -> usize {
    let target_score = scores[target];
    let mut rank = 1;
    for (j, &s) in scores.iter().enumerate() {
        if s > target_score || (s == target_score && j < target) {
            rank += 1;
        }
    }
    rank
}

/// Hit rate and MRR at cutoff `n`, as percentages.
pub fn rank_metrics_at(scores: &[Vec<f64>], targets: &[u32], n: usize) -> Result<(f64, f64)> {
    if scores.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} score vectors for {} targets",
            scores.len(),
            targets.len()
        )));
    }
    if scores.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut hits = 0usize;
    let mut reciprocal_sum = 0.0;
    for (score, &target) in scores.iter().zip(targets.iter()) {
        let rank = rank_of(score, target as usize);
        if rank <= n {
            hits += 1;
            reciprocal_sum += 1.0 / rank as f64;
        }
    }
    let count = scores.len() as f64;
    Ok((100.0 * hits as f64 / count, 100.0 * reciprocal_sum / count))
}

/// Full report at the standard cutoffs 5 and 10.
pub fn metrics_report(scores: &[Vec<f64>], targets: &[u32]) -> Result<MetricsReport> {
    let (hr5, mrr5) = rank_metrics_at(scores, targets, 5)?;
    let (hr10, mrr10) = rank_metrics_at(scores, targets, 10)?;
    Ok(MetricsReport {
        hr5,
        hr10,
        mrr5,
        mrr10,
        example_count: scores.len(),
        per_group: None,
    })
}

/// A trained model ready for scoring: vanilla models carry no graph and
/// score through the raw channel alone.
pub struct ScoringModel<'a> {
    pub params: &'a BackboneParams,
    pub graph: Option<&'a AttributedGraph>,
    pub encode: EncodeConfig,
}

impl ScoringModel<'_> {
    /// Item-strip holistic embeddings under the current parameters, or
    /// None for a vanilla model.
    pub fn holistic_item_table(&self) -> Result<Option<Tensor>> {
        let Some(graph) = self.graph else {
            return Ok(None);
        };
        let mut tape = Tape::new();
        let mut untracked = |t: &Tensor| -> Result<crate::tensor::TensorId> {
            let mut c = t.clone();
            c.set_requires_grad(false);
            tape.leaf(&c)
        };
        let items = untracked(&self.params.item_embeddings)?;
        let parents = untracked(&self.params.parent_embeddings)?;
        let leaves = untracked(&self.params.leaf_embeddings)?;
        let e0 = tape.concat_rows(&[items, parents, leaves])?;
        let hol = propagate(&mut tape, graph, e0, false)?;
        let item_strip = tape.gather_rows(hol.holistic, graph.item_range().collect())?;
        Ok(Some(tape.to_tensor(item_strip)))
    }

    /// Score every example: one logit vector over the catalog per example.
    pub fn score_examples(&self, examples: &[SessionExample]) -> Result<Vec<Vec<f64>>> {
        let mut raw_table = self.params.item_embeddings.clone();
        raw_table.set_requires_grad(false);
        let holistic_table = self.holistic_item_table()?;
        // Dropout is identity in evaluation; the stream is never consumed.
        let mut rng = Rng::new(0);
        let config = EncodeConfig {
            training: false,
            ..self.encode.clone()
        };

        let mut out = Vec::with_capacity(examples.len());
        for example in examples {
            let mut tape = Tape::new();
            let ids = self.params.register(&mut tape)?;
            let raw = tape.leaf(&raw_table)?;
            let repr = match &holistic_table {
                Some(hol_table) => {
                    let hol = tape.leaf(hol_table)?;
                    let channels = encode_session(
                        &mut tape,
                        &example.prefix,
                        raw,
                        hol,
                        &ids,
                        &config,
                        &mut rng,
                    )?;
                    channels.session_fused
                }
                None => encode_raw_only(&mut tape, &example.prefix, raw, &ids, &config)?,
            };
            let logits = predict_logits(&mut tape, repr, raw)?;
            out.push(tape.values(logits).to_vec());
        }
        Ok(out)
    }

    /// Metrics over a set of examples.
    pub fn evaluate(&self, examples: &[SessionExample]) -> Result<MetricsReport> {
        let scores = self.score_examples(examples)?;
        let targets: Vec<u32> = examples.iter().map(|e| e.target).collect();
        metrics_report(&scores, &targets)
    }
}

/// Which attribute level counts as "the same attribute".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttributeLevel {
    Parent,
    Leaf,
}

/// Scan each example's prefix from the latest interaction backwards and
/// score 1/rank for the first item sharing an attribute of the given level
/// with the target (0 when none does); reported as the mean percentage.
pub fn attribute_proximity_mrr(
    examples: &[SessionExample],
    records: &AttributeRecords,
    level: AttributeLevel,
) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let mut attr_sets: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); records.num_items];
    for t in &records.triples {
        let attr = match level {
            AttributeLevel::Parent => t.parent,
            AttributeLevel::Leaf => t.leaf,
        };
        attr_sets[t.item as usize].insert(attr);
    }
    let shares = |a: u32, b: u32| -> bool {
        let (sa, sb) = (&attr_sets[a as usize], &attr_sets[b as usize]);
        sa.iter().any(|attr| sb.contains(attr))
    };

    let mut total = 0.0;
    for example in examples {
        for (back, &item) in example.prefix.iter().rev().enumerate() {
            if shares(item, example.target) {
                total += 1.0 / (back + 1) as f64;
                break;
            }
        }
    }
    100.0 * total / examples.len() as f64
}

/// Insert `ceil(ratio * len)` uniformly drawn catalog items (never the
/// session's own items or its target) at uniformly random positions in
/// each prefix. Targets are unchanged.
pub fn inject_noise(
    examples: &[SessionExample],
    ratio: f64,
    seed: u64,
    catalog_size: usize,
) -> Result<Vec<SessionExample>> {
    if !(0.0..=1.0).contains(&ratio) || ratio == 0.0 {
        return Err(Error::Config(format!("noise ratio {ratio} outside (0, 1]")));
    }
    let mut rng = Rng::named(seed, "noise");
    let mut out = Vec::with_capacity(examples.len());
    for example in examples {
        let exclude: BTreeSet<u32> = example
            .prefix
            .iter()
            .copied()
            .chain(std::iter::once(example.target))
            .collect();
        let candidates: Vec<u32> = (0..catalog_size as u32)
            .filter(|i| !exclude.contains(i))
            .collect();
        if candidates.is_empty() {
            return Err(Error::Dataset(
                "catalog too small to sample noise items from".into(),
            ));
        }
        let insertions = (ratio * example.prefix.len() as f64).ceil() as usize;
        let mut prefix = example.prefix.clone();
        for _ in 0..insertions {
            let item = candidates[rng.below(candidates.len())];
            let pos = rng.below(prefix.len() + 1);
            prefix.insert(pos, item);
        }
        out.push(SessionExample {
            prefix,
            ..example.clone()
        });
    }
    Ok(out)
}

/// Split example indices into `num_groups` contiguous groups by ascending
/// target-item training popularity (ties by target id). Sizes differ by at
/// most one, with the remainder going to the earliest groups; the last
/// group holds the most popular targets.
pub fn popularity_groups(
    examples: &[SessionExample],
    train_counts: &[usize],
    num_groups: usize,
) -> Result<Vec<Vec<usize>>> {
    if num_groups == 0 {
        return Err(Error::Config("need at least one group".into()));
    }
    if examples.len() < num_groups {
        return Err(Error::Dataset(format!(
            "{} examples cannot fill {num_groups} groups",
            examples.len()
        )));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by_key(|&i| {
        let target = examples[i].target;
        (
            train_counts.get(target as usize).copied().unwrap_or(0),
            target,
        )
    });

    let base = examples.len() / num_groups;
    let remainder = examples.len() % num_groups;
    let mut groups = Vec::with_capacity(num_groups);
    let mut offset = 0;
    for g in 0..num_groups {
        let size = base + usize::from(g < remainder);
        groups.push(order[offset..offset + size].to_vec());
        offset += size;
    }
    Ok(groups)
}

/// Per-group metrics report over a shared score set.
pub fn grouped_metrics(
    scores: &[Vec<f64>],
    examples: &[SessionExample],
    train_counts: &[usize],
    num_groups: usize,
) -> Result<MetricsReport> {
    let targets: Vec<u32> = examples.iter().map(|e| e.target).collect();
    let mut report = metrics_report(scores, &targets)?;
    let groups = popularity_groups(examples, train_counts, num_groups)?;
    let mut per_group = Vec::with_capacity(groups.len());
    for (g, indices) in groups.iter().enumerate() {
        let group_scores: Vec<Vec<f64>> = indices.iter().map(|&i| scores[i].clone()).collect();
        let group_targets: Vec<u32> = indices.iter().map(|&i| targets[i]).collect();
        let (hr5, mrr5) = rank_metrics_at(&group_scores, &group_targets, 5)?;
        let (hr10, mrr10) = rank_metrics_at(&group_scores, &group_targets, 10)?;
        per_group.push(GroupMetrics {
            group: g + 1,
            example_count: indices.len(),
            hr5,
            mrr5,
            hr10,
            mrr10,
        });
    }
    report.per_group = Some(per_group);
    Ok(report)
}

/// Plot-data emission: one `x<TAB>y` row per point under a `# x y` header.
pub fn write_plot_data<W: std::io::Write>(
    w: &mut W,
    x_label: &str,
    y_label: &str,
    points: &[(f64, f64)],
) -> Result<()> {
    writeln!(w, "# {x_label}\t{y_label}")?;
    for (x, y) in points {
        writeln!(w, "{x}\t{y}")?;
    }
    Ok(())
}
