// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logit lens and direct logit attribution (DLA).
//!
//! With the final LayerNorm statistics frozen at their traced values, the
//! map from a residual-stream vector to logits is affine. Each component's
//! output `c` at position `t` is pushed through its linear part
//!
//! ```text
//! DLA(c) = ((c − mean(c)) · inv_std_t ⊙ γ_final) W_U
//! ```
//!
//! and the affine remainder (`β_final W_U + b_U`, together with the
//! linearized attention output biases) is pooled into the `bias`
//! pseudo-component. Summing DLA over embed, every head, every MLP and bias
//! reproduces the logits.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::{FactEntry, TokenGroup, TokenGroupSpans};
use crate::error::{Error, Result};
use crate::model::{ModelBundle, TokenId};
use crate::numerics::{add_assign, mean, vec_mat};
use crate::trace::Trace;

/// A model component that writes to the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ComponentId {
    Embed,
    Head { layer: usize, head: usize },
    Mlp { layer: usize },
    Bias,
}

impl ComponentId {
    pub fn head(layer: usize, head: usize) -> Self {
        ComponentId::Head { layer, head }
    }

    pub fn mlp(layer: usize) -> Self {
        ComponentId::Mlp { layer }
    }

    pub fn is_head(&self) -> bool {
        matches!(self, ComponentId::Head { .. })
    }

    pub fn layer(&self) -> Option<usize> {
        match *self {
            ComponentId::Head { layer, .. } | ComponentId::Mlp { layer } => Some(layer),
            _ => None,
        }
    }

    /// Errors unless the indices fit the model.
    pub fn check(&self, model: &ModelBundle) -> Result<()> {
        let ok = match *self {
            ComponentId::Head { layer, head } => layer < model.n_layers() && head < model.n_heads(),
            ComponentId::Mlp { layer } => layer < model.n_layers(),
            ComponentId::Embed | ComponentId::Bias => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidComponent(format!(
                "{self} outside a model with {} layers and {} heads",
                model.n_layers(),
                model.n_heads()
            )))
        }
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ComponentId::Embed => f.write_str("embed"),
            ComponentId::Head { layer, head } => write!(f, "L{layer}H{head}"),
            ComponentId::Mlp { layer } => write!(f, "MLP{layer}"),
            ComponentId::Bias => f.write_str("bias"),
        }
    }
}

impl FromStr for ComponentId {
    type Err = Error;

    /// Accepts `embed`, `bias`, `L<l>H<h>` and `MLP<l>` (case-insensitive).
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidComponent(format!("cannot parse `{s}` (expected embed, bias, L<l>H<h> or MLP<l>)"));
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "embed" => return Ok(ComponentId::Embed),
            "bias" => return Ok(ComponentId::Bias),
            _ => {}
        }
        if let Some(rest) = lower.strip_prefix("mlp") {
            return rest.parse().map(ComponentId::mlp).map_err(|_| bad());
        }
        let rest = lower.strip_prefix('l').ok_or_else(bad)?;
        let (l, h) = rest.split_once('h').ok_or_else(bad)?;
        Ok(ComponentId::head(
            l.parse().map_err(|_| bad())?,
            h.parse().map_err(|_| bad())?,
        ))
    }
}

impl Serialize for ComponentId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ComponentId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Embed, every head, every MLP and bias, in that order.
pub fn all_components(model: &ModelBundle) -> Vec<ComponentId> {
    let mut out = vec![ComponentId::Embed];
    for l in 0..model.n_layers() {
        for h in 0..model.n_heads() {
            out.push(ComponentId::head(l, h));
        }
    }
    out.extend((0..model.n_layers()).map(ComponentId::mlp));
    out.push(ComponentId::Bias);
    out
}

/// How a component vector passes through the frozen final LayerNorm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LnFreeze {
    /// Subtract the component's own mean, then scale.
    #[default]
    CenterScale,
    /// Scale only; the residual mean's share lands in `bias`.
    ScaleOnly,
}

impl FromStr for LnFreeze {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "center-scale" | "center" => Ok(LnFreeze::CenterScale),
            "scale-only" | "scale" => Ok(LnFreeze::ScaleOnly),
            _ => Err(Error::Invalid(format!(
                "unknown ln style `{s}` (expected center-scale or scale-only)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DlaVector {
    pub component: ComponentId,
    pub dest_pos: usize,
    pub values: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_group: Option<TokenGroup>,
}

impl DlaVector {
    pub fn get(&self, token: TokenId) -> f64 {
        self.values[token]
    }
}

fn check_pos(trace: &Trace, pos: usize) -> Result<()> {
    if pos >= trace.len() {
        return Err(Error::Invalid(format!(
            "position {pos} outside a trace of length {}",
            trace.len()
        )));
    }
    Ok(())
}

/// Linear part of the frozen final LayerNorm at `pos`.
pub fn freeze_ln(model: &ModelBundle, trace: &Trace, pos: usize, v: &[f64], style: LnFreeze) -> Vec<f64> {
    let inv_std = trace.final_ln_stats[pos].inv_std;
    let m = match style {
        LnFreeze::CenterScale => mean(v),
        LnFreeze::ScaleOnly => 0.0,
    };
    v.iter()
        .zip(&model.final_ln.gamma)
        .map(|(x, g)| (x - m) * inv_std * g)
        .collect()
}

/// A residual-space vector pushed through the frozen final LN and `W_U`.
pub fn linearize(model: &ModelBundle, trace: &Trace, pos: usize, v: &[f64], style: LnFreeze) -> Vec<f64> {
    vec_mat(&freeze_ln(model, trace, pos, v, style), &model.unembed)
}

/// Final LN and unembedding applied to `resid[layer][pos]`. At
/// `layer = L` this is the same computation that produced the logits.
pub fn logit_lens(model: &ModelBundle, trace: &Trace, layer: usize, pos: usize) -> Result<Vec<f64>> {
    check_pos(trace, pos)?;
    let row = trace
        .resid
        .get(layer)
        .ok_or_else(|| Error::Invalid(format!("lens layer {layer} outside 0..={}", trace.n_layers())))?
        .row(pos);
    Ok(model.final_logits(row)?.0)
}

/// Residual-space output of a component at `pos` (for `bias`, the summed
/// attention output biases).
pub fn component_output(trace: &Trace, component: ComponentId, pos: usize) -> Vec<f64> {
    match component {
        ComponentId::Embed => trace.resid[0].row(pos).to_vec(),
        ComponentId::Head { layer, head } => trace.head_out[layer][head].row(pos).to_vec(),
        ComponentId::Mlp { layer } => trace.mlp_out[layer].row(pos).to_vec(),
        ComponentId::Bias => {
            let mut sum = vec![0.0; trace.resid[0].cols()];
            for b in &trace.attn_bias {
                add_assign(&mut sum, b);
            }
            sum
        }
    }
}

pub fn dla(model: &ModelBundle, trace: &Trace, component: ComponentId, dest_pos: usize) -> Result<DlaVector> {
    dla_with(model, trace, component, dest_pos, LnFreeze::CenterScale)
}

pub fn dla_with(
    model: &ModelBundle,
    trace: &Trace,
    component: ComponentId,
    dest_pos: usize,
    style: LnFreeze,
) -> Result<DlaVector> {
    component.check(model)?;
    check_pos(trace, dest_pos)?;
    let out = component_output(trace, component, dest_pos);
    let mut values = linearize(model, trace, dest_pos, &out, style);
    if component == ComponentId::Bias {
        let mut affine = model.final_ln.beta.clone();
        if style == LnFreeze::ScaleOnly {
            let st = trace.final_ln_stats[dest_pos];
            for (a, g) in affine.iter_mut().zip(&model.final_ln.gamma) {
                *a -= st.mean * st.inv_std * g;
            }
        }
        add_assign(&mut values, &vec_mat(&affine, &model.unembed));
        if let Some(b) = &model.unembed_bias {
            add_assign(&mut values, b);
        }
    }
    Ok(DlaVector {
        component,
        dest_pos,
        values,
        source_group: None,
    })
}

/// DLA of every component at `dest_pos`, in [`all_components`] order.
pub fn dla_all(model: &ModelBundle, trace: &Trace, dest_pos: usize, style: LnFreeze) -> Result<Vec<DlaVector>> {
    all_components(model)
        .into_iter()
        .map(|c| dla_with(model, trace, c, dest_pos, style))
        .collect()
}

/// A head's DLA split by the token group of each source position.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SourceSplit {
    pub groups: BTreeMap<TokenGroup, DlaVector>,
    /// Output not produced by attending (intervention replacements).
    pub extra: Vec<f64>,
}

impl SourceSplit {
    pub fn total(&self) -> Vec<f64> {
        let mut sum = self.extra.clone();
        for v in self.groups.values() {
            add_assign(&mut sum, &v.values);
        }
        sum
    }
}

pub fn dla_by_source_group(
    model: &ModelBundle,
    trace: &Trace,
    head: ComponentId,
    dest_pos: usize,
    spans: &TokenGroupSpans,
) -> Result<SourceSplit> {
    dla_by_source_group_with(model, trace, head, dest_pos, spans, LnFreeze::CenterScale)
}

pub fn dla_by_source_group_with(
    model: &ModelBundle,
    trace: &Trace,
    head: ComponentId,
    dest_pos: usize,
    spans: &TokenGroupSpans,
    style: LnFreeze,
) -> Result<SourceSplit> {
    let ComponentId::Head { layer, head: h } = head else {
        return Err(Error::InvalidComponent(format!("{head} is not an attention head")));
    };
    head.check(model)?;
    check_pos(trace, dest_pos)?;
    spans.validate(trace.len())?;
    let src = trace.head_src_out(layer, h, dest_pos).ok_or_else(|| {
        Error::Invalid(format!(
            "per-source outputs of {head} at position {dest_pos} were not recorded"
        ))
    })?;
    let d = src.cols();
    let mut groups = BTreeMap::new();
    for g in TokenGroup::ALL {
        let mut sum = vec![0.0; d];
        for s in spans.positions(g).filter(|&s| s <= dest_pos) {
            add_assign(&mut sum, src.row(s));
        }
        groups.insert(
            g,
            DlaVector {
                component: head,
                dest_pos,
                values: linearize(model, trace, dest_pos, &sum, style),
                source_group: Some(g),
            },
        );
    }
    let extra = linearize(model, trace, dest_pos, trace.head_extra[layer][h].row(dest_pos), style);
    Ok(SourceSplit { groups, extra })
}

/// Subtracts the mean over the vocabulary.
pub fn mean_center(v: &DlaVector) -> DlaVector {
    DlaVector {
        values: center(&v.values),
        ..v.clone()
    }
}

pub fn center(values: &[f64]) -> Vec<f64> {
    let m = mean(values);
    values.iter().map(|x| x - m).collect()
}

/// Σ over layers of MLP DLA at `dest_pos`.
pub fn mlp_total_dla(model: &ModelBundle, trace: &Trace, dest_pos: usize) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; model.vocab_size()];
    for l in 0..model.n_layers() {
        add_assign(&mut sum, &dla(model, trace, ComponentId::mlp(l), dest_pos)?.values);
    }
    Ok(sum)
}

/// Mean of the `k` entries of largest magnitude (signed values), or `None`
/// for an empty set.
pub fn mean_top_k_by_magnitude(values: impl IntoIterator<Item = f64>, k: usize) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() || k == 0 {
        return None;
    }
    v.sort_by(|a, b| b.abs().total_cmp(&a.abs()));
    v.truncate(k);
    Some(v.iter().sum::<f64>() / v.len() as f64)
}

fn mean_of(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Attribute statistics of one value vector (centered over the vocab).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttrSummary {
    /// Raw DLA on `a`.
    pub dla_a_raw: f64,
    /// Mean-centered DLA on `a`.
    pub dla_a: f64,
    /// Mean of the 5 largest-magnitude centered values over `R ∖ {a}`.
    pub mean_top5_r_minus_a: Option<f64>,
    /// Mean centered value over `S ∖ {a}`.
    pub mean_s_minus_a: Option<f64>,
}

fn summarize(values: &[f64], a: TokenId, r: &[TokenId], s: &[TokenId]) -> AttrSummary {
    let c = center(values);
    AttrSummary {
        dla_a_raw: values[a],
        dla_a: c[a],
        mean_top5_r_minus_a: mean_top_k_by_magnitude(r.iter().map(|&t| c[t]), 5),
        mean_s_minus_a: mean_of(s.iter().map(|&t| c[t])),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributeStats {
    pub component: ComponentId,
    #[serde(flatten)]
    pub summary: AttrSummary,
    /// Per source group (heads only, when requested).
    pub per_group: BTreeMap<TokenGroup, AttrSummary>,
    /// Attention mass from END onto SUBJECT / RELATION (heads only).
    pub attn_subject: Option<f64>,
    pub attn_relation: Option<f64>,
}

/// Statistics over the first tokens of `a`, `R ∖ {a}` and `S ∖ {a}` at END.
pub fn attribute_stats(
    model: &ModelBundle,
    trace: &Trace,
    entry: &FactEntry,
    component: ComponentId,
    split_by_source: bool,
) -> Result<AttributeStats> {
    let a = entry.a_first_token;
    if a >= model.vocab_size() {
        return Err(Error::Vocab(format!("attribute token {a} outside the vocab")));
    }
    let r = entry.r_first_tokens(&model.vocab)?;
    let s = entry.s_first_tokens(&model.vocab)?;
    let end = entry.end_pos();
    let total = dla(model, trace, component, end)?;
    let mut per_group = BTreeMap::new();
    let (mut attn_subject, mut attn_relation) = (None, None);
    if let ComponentId::Head { layer, head } = component {
        let probs = trace.attn_prob[layer][head].row(end);
        attn_subject = Some(entry.spans.subject.clone().map(|p| probs[p]).sum());
        attn_relation = Some(entry.spans.relation.clone().map(|p| probs[p]).sum());
        if split_by_source {
            let split = dla_by_source_group(model, trace, component, end, &entry.spans)?;
            for (g, v) in &split.groups {
                per_group.insert(*g, summarize(&v.values, a, &r, &s));
            }
        }
    }
    Ok(AttributeStats {
        component,
        summary: summarize(&total.values, a, &r, &s),
        per_group,
        attn_subject,
        attn_relation,
    })
}

/// One CSV row per (prompt, component, group); `group` is `ALL` for the
/// component total.
pub fn write_stats_csv<W: Write>(out: W, rows: &[(usize, AttributeStats)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "prompt",
        "layer",
        "head_or_mlp",
        "group",
        "dla_a",
        "dla_a_raw",
        "mean_R",
        "mean_S",
        "attn_to_subject",
        "attn_to_relation",
    ])
    .map_err(crate::trace::csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (prompt, st) in rows {
        let (layer, which) = match st.component {
            ComponentId::Head { layer, head } => (layer.to_string(), format!("H{head}")),
            ComponentId::Mlp { layer } => (layer.to_string(), "MLP".to_string()),
            other => (String::new(), other.to_string()),
        };
        let groups = std::iter::once(("ALL".to_string(), &st.summary))
            .chain(st.per_group.iter().map(|(g, s)| (g.to_string(), s)));
        for (group, s) in groups {
            w.write_record([
                prompt.to_string(),
                layer.clone(),
                which.clone(),
                group,
                s.dla_a.to_string(),
                s.dla_a_raw.to_string(),
                opt(s.mean_top5_r_minus_a),
                opt(s.mean_s_minus_a),
                opt(st.attn_subject),
                opt(st.attn_relation),
            ])
            .map_err(crate::trace::csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io("stats csv", e))
}
