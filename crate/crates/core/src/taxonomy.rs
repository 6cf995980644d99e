// SPDX-License-Identifier: MIT OR Apache-2.0

//! Head taxonomy (subject / relation / mixed), OV probing, and the additive
//! motif detector.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{center, dla, dla_by_source_group, freeze_ln, ComponentId};
use crate::dataset::{FactEntry, TokenGroup};
use crate::error::{Error, Result};
use crate::model::{ModelBundle, TokenId};
use crate::numerics::{add_assign, argmax, cosine_similarity, softmax, vec_mat};
use crate::trace::{traced_forward_with, SourceRecording, Trace};

/// Ratio boundary between a pure and a mixed head.
pub const RATIO_BOUNDARY: f64 = 10.0;

/// Default cosine similarity below which two components count as
/// qualitatively different.
pub const DEFAULT_SIMILARITY_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Subject,
    Relation,
    Mixed,
}

/// Signed ratio rule. Opposite signs, or both zero, give `Mixed`.
pub fn label_from(subject: f64, relation: f64) -> Label {
    if subject * relation < 0.0 || (subject == 0.0 && relation == 0.0) {
        return Label::Mixed;
    }
    let (s, r) = (subject.abs(), relation.abs());
    if s > RATIO_BOUNDARY * r {
        Label::Subject
    } else if r > RATIO_BOUNDARY * s {
        Label::Relation
    } else {
        Label::Mixed
    }
}

/// What each source group's DLA is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatioMetric {
    /// Raw DLA on the correct attribute's first token.
    #[default]
    CorrectAttribute,
    /// L1 norm of the group's whole DLA vector.
    TotalAbs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifyOptions {
    pub top_k: usize,
    pub metric: RatioMetric,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        Self {
            top_k: 10,
            metric: RatioMetric::CorrectAttribute,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadLabel {
    pub head: ComponentId,
    pub label: Label,
    pub subject_dla: f64,
    pub relation_dla: f64,
    /// `subject_dla / relation_dla`; absent when the denominator is zero.
    pub ratio: Option<f64>,
    /// Mean |total DLA on a| used for ranking.
    pub mean_abs_dla: f64,
    pub attn_subject: f64,
    pub attn_relation: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct HeadAcc {
    subject: f64,
    relation: f64,
    abs_total: f64,
    attn_subject: f64,
    attn_relation: f64,
}

fn per_entry(model: &ModelBundle, entry: &FactEntry, metric: RatioMetric) -> Result<Vec<HeadAcc>> {
    let trace = traced_forward_with(model, &entry.prompt_tokens, None, SourceRecording::Lean)?;
    let end = entry.end_pos();
    let a = entry.a_first_token;
    let measure = |v: &[f64]| match metric {
        RatioMetric::CorrectAttribute => v[a],
        RatioMetric::TotalAbs => v.iter().map(|x| x.abs()).sum(),
    };
    let mut out = Vec::with_capacity(model.n_layers() * model.n_heads());
    for l in 0..model.n_layers() {
        for h in 0..model.n_heads() {
            let c = ComponentId::head(l, h);
            let total = dla(model, &trace, c, end)?;
            let split = dla_by_source_group(model, &trace, c, end, &entry.spans)?;
            let probs = trace.attn_prob[l][h].row(end);
            out.push(HeadAcc {
                subject: measure(&split.groups[&TokenGroup::Subject].values),
                relation: measure(&split.groups[&TokenGroup::Relation].values),
                abs_total: total.values[a].abs(),
                attn_subject: entry.spans.subject.clone().map(|p| probs[p]).sum(),
                attn_relation: entry.spans.relation.clone().map(|p| probs[p]).sum(),
            });
        }
    }
    Ok(out)
}

/// Labels the `top_k` heads (by mean |DLA on a| at END) of a
/// single-relation dataset. Attention masses are reported, not used.
pub fn classify_heads(model: &ModelBundle, entries: &[FactEntry], opts: &ClassifyOptions) -> Result<Vec<HeadLabel>> {
    let first = entries
        .first()
        .ok_or_else(|| Error::Invalid("cannot classify heads on an empty dataset".into()))?;
    if let Some(other) = entries.iter().find(|e| e.relation_id != first.relation_id) {
        return Err(Error::Invalid(format!(
            "dataset mixes relations `{}` and `{}`; filter to one relation first",
            first.relation_id, other.relation_id
        )));
    }
    let per: Vec<Vec<HeadAcc>> = entries
        .par_iter()
        .map(|e| per_entry(model, e, opts.metric))
        .collect::<Result<_>>()?;
    let n = entries.len() as f64;
    let h = model.n_heads();
    let mut labels: Vec<HeadLabel> = (0..model.n_layers() * h)
        .map(|i| {
            let mut acc = HeadAcc::default();
            for p in &per {
                acc.subject += p[i].subject;
                acc.relation += p[i].relation;
                acc.abs_total += p[i].abs_total;
                acc.attn_subject += p[i].attn_subject;
                acc.attn_relation += p[i].attn_relation;
            }
            let (s, r) = (acc.subject / n, acc.relation / n);
            HeadLabel {
                head: ComponentId::head(i / h, i % h),
                label: label_from(s, r),
                subject_dla: s,
                relation_dla: r,
                ratio: (r != 0.0).then(|| s / r),
                mean_abs_dla: acc.abs_total / n,
                attn_subject: acc.attn_subject / n,
                attn_relation: acc.attn_relation / n,
            }
        })
        .collect();
    labels.sort_by(|x, y| y.mean_abs_dla.total_cmp(&x.mean_abs_dla).then(x.head.cmp(&y.head)));
    labels.truncate(opts.top_k);
    Ok(labels)
}

pub fn write_labels_json<W: Write>(out: W, relation: &str, labels: &[HeadLabel]) -> Result<()> {
    let doc = serde_json::json!({ "relation": relation, "ratio_boundary": RATIO_BOUNDARY, "heads": labels });
    serde_json::to_writer_pretty(out, &doc)?;
    Ok(())
}

/// Treats a head's OV circuit as a linear probe on the residual stream at
/// `probe_pos`, read out through the final LayerNorm frozen at END.
/// Returns tokens above `threshold`, most probable first.
pub fn ov_probe(
    model: &ModelBundle,
    trace: &Trace,
    head: ComponentId,
    probe_pos: usize,
    threshold: f64,
) -> Result<Vec<(TokenId, f64)>> {
    let ComponentId::Head { layer, head: h } = head else {
        return Err(Error::InvalidComponent(format!("{head} is not an attention head")));
    };
    head.check(model)?;
    if probe_pos >= trace.len() {
        return Err(Error::Invalid(format!(
            "probe position {probe_pos} outside a trace of length {}",
            trace.len()
        )));
    }
    let lay = &model.layers[layer];
    let (normed, _) = lay
        .ln_attn
        .apply(trace.resid[layer].row(probe_pos), model.config.ln_eps)?;
    let w = &lay.heads[h];
    let out = vec_mat(&vec_mat(&normed, &w.w_v), &w.w_o);
    let logits = vec_mat(
        &freeze_ln(model, trace, trace.end_pos(), &out, Default::default()),
        &model.unembed,
    );
    let probs = softmax(&logits, None)?;
    let mut hits: Vec<(TokenId, f64)> = probs.into_iter().enumerate().filter(|&(_, p)| p > threshold).collect();
    hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(hits)
}

/// `(probe token, head, hits)`.
pub type ProbeRow = (String, ComponentId, Vec<(TokenId, f64)>);

pub fn write_probe_csv<W: Write>(out: W, rows: &[ProbeRow], model: &ModelBundle) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["probe_token", "head", "rank", "token", "probability"])
        .map_err(crate::trace::csv_err)?;
    for (probe_token, head, hits) in rows {
        for (rank, (tok, p)) in hits.iter().enumerate() {
            w.write_record([
                probe_token.clone(),
                head.to_string(),
                rank.to_string(),
                model.vocab.token(*tok).unwrap_or("?").to_string(),
                p.to_string(),
            ])
            .map_err(crate::trace::csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io("probe csv", e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentAdditivity {
    pub component: ComponentId,
    /// Mean-centered DLA on `a`.
    pub centered_dla_a: f64,
    pub positive_centered_dla_on_a: bool,
    /// Three largest centered values, as a compact fingerprint.
    pub top_tokens: Vec<(TokenId, f64)>,
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Constructive {
    pub argmax_of_sum_is_a: bool,
    pub components_where_a_not_argmax: Vec<ComponentId>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdditivityReport {
    pub target: TokenId,
    pub components: Vec<ComponentAdditivity>,
    /// Components added to every sum and single-component argmax check.
    pub context: Vec<ComponentId>,
    /// Cosine similarity of centered DLA vectors, in `components` order.
    pub pairwise_similarity: Vec<Vec<f64>>,
    pub similarity_threshold: f64,
    pub all_positive: bool,
    pub some_pair_dissimilar: bool,
    pub constructive: Constructive,
    pub verdict: bool,
}

/// Evaluates the three additivity conditions on mean-centered DLA at END:
/// every component favours `a`, at least two are dissimilar, and only
/// their sum makes `a` the argmax. `context` components (for example a
/// constant bias) are added to the sum and to each single-component
/// argmax check but are not themselves tested.
pub fn detect_additivity(
    model: &ModelBundle,
    trace: &Trace,
    entry: &FactEntry,
    components: &[ComponentId],
    similarity_threshold: f64,
    context: &[ComponentId],
) -> Result<AdditivityReport> {
    if components.len() < 2 {
        return Err(Error::Invalid(format!(
            "additivity needs at least two components, got {}",
            components.len()
        )));
    }
    let a = entry.a_first_token;
    let end = entry.end_pos();
    let v = model.vocab_size();
    if a >= v {
        return Err(Error::Vocab(format!("attribute token {a} outside the vocab")));
    }
    let centered: Vec<Vec<f64>> = components
        .iter()
        .map(|&c| Ok(center(&dla(model, trace, c, end)?.values)))
        .collect::<Result<_>>()?;
    let mut ctx = vec![0.0; v];
    let mut sorted_ctx = context.to_vec();
    sorted_ctx.sort();
    for &c in &sorted_ctx {
        add_assign(&mut ctx, &center(&dla(model, trace, c, end)?.values));
    }

    let reports: Vec<ComponentAdditivity> = components
        .iter()
        .zip(&centered)
        .map(|(&component, vals)| {
            let mut top: Vec<(TokenId, f64)> = vals.iter().copied().enumerate().collect();
            top.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
            top.truncate(3);
            ComponentAdditivity {
                component,
                centered_dla_a: vals[a],
                positive_centered_dla_on_a: vals[a] > 0.0,
                top_tokens: top,
                norm: vals.iter().map(|x| x * x).sum::<f64>().sqrt(),
            }
        })
        .collect();
    let all_positive = reports.iter().all(|r| r.positive_centered_dla_on_a);

    let n = components.len();
    let mut sim = vec![vec![0.0; n]; n];
    let mut some_pair_dissimilar = false;
    for i in 0..n {
        for j in 0..n {
            sim[i][j] = cosine_similarity(&centered[i], &centered[j]);
            if i < j && sim[i][j] < similarity_threshold {
                some_pair_dissimilar = true;
            }
        }
    }

    // Sum in a canonical order so the verdict cannot depend on input order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| components[i]);
    let mut sum = ctx.clone();
    for &i in &order {
        add_assign(&mut sum, &centered[i]);
    }
    let argmax_of_sum_is_a = argmax(&sum) == Some(a);
    let mut not_argmax = Vec::new();
    for (i, &c) in components.iter().enumerate() {
        let mut single = ctx.clone();
        add_assign(&mut single, &centered[i]);
        if argmax(&single) != Some(a) {
            not_argmax.push(c);
        }
    }
    let verdict = all_positive && some_pair_dissimilar && argmax_of_sum_is_a;
    Ok(AdditivityReport {
        target: a,
        components: reports,
        context: context.to_vec(),
        pairwise_similarity: sim,
        similarity_threshold,
        all_positive,
        some_pair_dissimilar,
        constructive: Constructive {
            argmax_of_sum_is_a,
            components_where_a_not_argmax: not_argmax,
        },
        verdict,
    })
}

/// Labels keyed by head, for lookups.
pub fn labels_by_head(labels: &[HeadLabel]) -> BTreeMap<ComponentId, Label> {
    labels.iter().map(|l| (l.head, l.label)).collect()
}
