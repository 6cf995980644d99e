// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal interventions: attention knockout, activation patching, zero and
//! mean ablation, and direct-path (edge) ablation, plus the loss / rank /
//! logit-diff metrics used to score them.
//!
//! Everything except direct-path removal runs inside the forward pass via an
//! [`InterventionSet`]; direct-path removal subtracts frozen-LN DLA from the
//! logits afterwards, so indirect effects are untouched.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{component_output, dla, ComponentId};
use crate::dataset::{FactEntry, TokenGroup, TokenGroupSpans};
use crate::error::{Error, Result};
use crate::model::{ModelBundle, TokenId};
use crate::numerics::{add_assign, log_softmax, rank_of, Matrix};
use crate::trace::{traced_forward, traced_forward_with, SourceRecording, Trace};

/// How blocked attention cells are removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KnockoutMode {
    /// Score set to −∞ before the softmax; the rest renormalizes.
    #[default]
    PreSoftmax,
    /// Probability zeroed after the softmax, no renormalization.
    PostSoftmaxZero,
}

/// Blocks attention from every `dest` to every `src` position.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttnBlock {
    pub dest: Vec<usize>,
    pub src: Vec<usize>,
    /// `None` means every layer.
    pub layers: Option<Range<usize>>,
    pub mode: KnockoutMode,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Directive {
    ZeroHead {
        layer: usize,
        head: usize,
    },
    MeanHead {
        layer: usize,
        head: usize,
        mean: Vec<f64>,
    },
    /// Replace a component's output at the listed positions.
    Patch {
        component: ComponentId,
        replacements: Vec<(usize, Vec<f64>)>,
    },
    AttnBlock(AttnBlock),
    /// Post-hoc: handled by [`direct_path_ablation`], ignored in-pass.
    DirectPathRemove(Vec<ComponentId>),
}

/// Ordered list of directives; later directives win where they overlap.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InterventionSet {
    directives: Vec<Directive>,
}

impl InterventionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(mut self, d: Directive) -> Self {
        self.directives.push(d);
        self
    }

    pub fn zero_head(self, layer: usize, head: usize) -> Self {
        self.push(Directive::ZeroHead { layer, head })
    }

    pub fn mean_head(self, layer: usize, head: usize, mean: Vec<f64>) -> Self {
        self.push(Directive::MeanHead { layer, head, mean })
    }

    pub fn patch(self, component: ComponentId, replacements: Vec<(usize, Vec<f64>)>) -> Self {
        self.push(Directive::Patch {
            component,
            replacements,
        })
    }

    pub fn block(self, block: AttnBlock) -> Self {
        self.push(Directive::AttnBlock(block))
    }

    pub fn directives(&self) -> &[Directive] {
        &self.directives
    }

    pub fn is_empty(&self) -> bool {
        self.directives.is_empty()
    }
}

/// Options for [`attention_knockout`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KnockoutOptions {
    pub layers: Option<Range<usize>>,
    pub mode: KnockoutMode,
}

fn group_positions(spans: &TokenGroupSpans, groups: &[TokenGroup]) -> Vec<usize> {
    let set: BTreeSet<usize> = groups.iter().flat_map(|&g| spans.positions(g)).collect();
    set.into_iter().collect()
}

/// Traced run with attention from `dest_groups` to `src_groups` blocked.
pub fn attention_knockout(
    model: &ModelBundle,
    tokens: &[TokenId],
    spans: &TokenGroupSpans,
    dest_groups: &[TokenGroup],
    src_groups: &[TokenGroup],
    opts: &KnockoutOptions,
) -> Result<Trace> {
    spans.validate(tokens.len())?;
    let hooks = InterventionSet::new().block(AttnBlock {
        dest: group_positions(spans, dest_groups),
        src: group_positions(spans, src_groups),
        layers: opts.layers.clone(),
        mode: opts.mode,
    });
    traced_forward(model, tokens, Some(&hooks))
}

/// Runs `source`, caches the listed components' outputs at `positions`, and
/// reruns `target` with those outputs substituted.
pub fn activation_patch(
    model: &ModelBundle,
    target: &[TokenId],
    source: &[TokenId],
    components: &[ComponentId],
    positions: &[usize],
) -> Result<Trace> {
    if target.len() != source.len() {
        return Err(Error::Invalid(format!(
            "patch prompts differ in length: target {} vs source {}",
            target.len(),
            source.len()
        )));
    }
    for c in components {
        c.check(model)?;
        if *c == ComponentId::Bias {
            return Err(Error::InvalidComponent(
                "the bias pseudo-component cannot be patched".into(),
            ));
        }
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= target.len()) {
        return Err(Error::InvalidHook(format!("patch position {p} outside the prompt")));
    }
    let src_trace = traced_forward_with(model, source, None, SourceRecording::None)?;
    let mut hooks = InterventionSet::new();
    for &c in components {
        let replacements = positions
            .iter()
            .map(|&p| (p, component_output(&src_trace, c, p)))
            .collect();
        hooks = hooks.patch(c, replacements);
    }
    traced_forward(model, target, Some(&hooks))
}

/// [`activation_patch`] between two dataset entries, which must share the
/// same span layout.
pub fn activation_patch_entries(
    model: &ModelBundle,
    target: &FactEntry,
    source: &FactEntry,
    components: &[ComponentId],
    positions: &[usize],
) -> Result<Trace> {
    if target.spans != source.spans {
        return Err(Error::Spans(format!(
            "patch prompts have different layouts: {:?} vs {:?}",
            target.spans, source.spans
        )));
    }
    activation_patch(
        model,
        &target.prompt_tokens,
        &source.prompt_tokens,
        components,
        positions,
    )
}

/// Logits with the direct paths of `components` removed at `positions`
/// (END when `None`); other rows are unchanged.
pub fn direct_path_ablation(
    model: &ModelBundle,
    trace: &Trace,
    components: &[ComponentId],
    positions: Option<&[usize]>,
) -> Result<Matrix> {
    let mut seen = BTreeSet::new();
    for c in components {
        if !seen.insert(*c) {
            return Err(Error::DuplicateComponent(c.to_string()));
        }
        c.check(model)?;
    }
    let end = [trace.end_pos()];
    let positions = positions.unwrap_or(&end);
    let mut logits = trace.logits.clone();
    for &p in positions {
        let mut removed = vec![0.0; model.vocab_size()];
        for &c in components {
            add_assign(&mut removed, &dla(model, trace, c, p)?.values);
        }
        for (l, r) in logits.row_mut(p).iter_mut().zip(&removed) {
            *l -= r;
        }
    }
    Ok(logits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Cross-entropy of `a` at END.
    pub loss: f64,
    pub logprob: f64,
    pub logit_diff: Option<f64>,
    pub rank: usize,
    /// `100 · (loss − baseline) / baseline`.
    pub percent_change: Option<f64>,
}

/// Metrics of `token` in one logit row. `logit_diff` is `row[x] − row[y]`
/// for the given pair.
pub fn eval_row(
    row: &[f64],
    token: TokenId,
    logit_diff: Option<(TokenId, TokenId)>,
    baseline: Option<&MetricReport>,
) -> Result<MetricReport> {
    let rank = rank_of(row, token)?;
    let logprob = log_softmax(row)[token];
    let loss = -logprob;
    let logit_diff = match logit_diff {
        Some((x, y)) => {
            if x >= row.len() || y >= row.len() {
                return Err(Error::TokenOutOfRange {
                    token: x.max(y),
                    vocab_size: row.len(),
                });
            }
            Some(row[x] - row[y])
        }
        None => None,
    };
    let percent_change = baseline
        .filter(|b| b.loss != 0.0)
        .map(|b| 100.0 * (loss - b.loss) / b.loss);
    Ok(MetricReport {
        loss,
        logprob,
        logit_diff,
        rank,
        percent_change,
    })
}

/// Metrics of the entry's attribute at its END position.
pub fn eval_metrics(
    logits: &Matrix,
    entry: &FactEntry,
    logit_diff: Option<(TokenId, TokenId)>,
    baseline: Option<&MetricReport>,
) -> Result<MetricReport> {
    let end = entry.end_pos();
    if end >= logits.rows() {
        return Err(Error::Invalid(format!(
            "END position {end} outside logits with {} rows",
            logits.rows()
        )));
    }
    eval_row(logits.row(end), entry.a_first_token, logit_diff, baseline)
}

/// Per-head output means over every position of every entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMeans {
    /// `[layer][head]` → `d_model` vector.
    pub means: Vec<Vec<Vec<f64>>>,
    pub n_positions: usize,
}

impl HeadMeans {
    pub fn compute(model: &ModelBundle, entries: &[FactEntry]) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Invalid("head means need at least one entry".into()));
        }
        let (l, h, d) = (model.n_layers(), model.n_heads(), model.d_model());
        let partial = entries
            .par_iter()
            .map(|e| {
                let tr = traced_forward_with(model, &e.prompt_tokens, None, SourceRecording::None)?;
                let mut sums = vec![vec![vec![0.0; d]; h]; l];
                for (li, layer) in sums.iter_mut().enumerate() {
                    for (hi, s) in layer.iter_mut().enumerate() {
                        for t in 0..tr.len() {
                            add_assign(s, tr.head_out[li][hi].row(t));
                        }
                    }
                }
                Ok((sums, tr.len()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut means = vec![vec![vec![0.0; d]; h]; l];
        let mut n = 0;
        for (sums, count) in partial {
            n += count;
            for (ml, sl) in means.iter_mut().zip(&sums) {
                for (mh, sh) in ml.iter_mut().zip(sl) {
                    add_assign(mh, sh);
                }
            }
        }
        for v in means.iter_mut().flatten().flatten() {
            *v /= n as f64;
        }
        Ok(HeadMeans { means, n_positions: n })
    }

    pub fn get(&self, layer: usize, head: usize) -> Option<&[f64]> {
        self.means.get(layer)?.get(head).map(Vec::as_slice)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One row of a loss-change table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossChangeRow {
    pub relation: String,
    pub baseline_loss: f64,
    pub loss_after: f64,
    pub percent_change: Option<f64>,
}

pub fn write_loss_change_csv<W: Write>(out: W, rows: &[LossChangeRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["relation", "baseline_loss", "loss_after", "percent_change"])
        .map_err(crate::trace::csv_err)?;
    for r in rows {
        w.write_record([
            r.relation.clone(),
            r.baseline_loss.to_string(),
            r.loss_after.to_string(),
            r.percent_change.map(|p| p.to_string()).unwrap_or_default(),
        ])
        .map_err(crate::trace::csv_err)?;
    }
    w.flush().map_err(|e| Error::io("loss csv", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::all_components;
    use crate::fixtures::{random_bundle, RandomDims};
    use crate::model::forward;

    fn model() -> ModelBundle {
        random_bundle(
            11,
            &RandomDims {
                n_layers: 2,
                n_heads: 2,
                d_model: 8,
                d_head: 4,
                d_mlp: 8,
                vocab_size: 12,
                max_seq: 8,
            },
        )
    }

    #[test]
    fn empty_block_is_clean_run() {
        let m = model();
        let toks = [1, 2, 3, 4, 5];
        let spans = TokenGroupSpans::from_lengths(1, 2, 1);
        let clean = traced_forward(&m, &toks, None).unwrap();
        let ko = attention_knockout(&m, &toks, &spans, &[TokenGroup::End], &[], &Default::default()).unwrap();
        assert_eq!(ko, clean);
    }

    #[test]
    fn knockout_zeroes_cells_and_renormalizes() {
        let m = model();
        let toks = [1, 2, 3, 4, 5];
        let spans = TokenGroupSpans::from_lengths(1, 2, 1);
        let ko = attention_knockout(
            &m,
            &toks,
            &spans,
            &[TokenGroup::Relation, TokenGroup::End],
            &[TokenGroup::Subject],
            &Default::default(),
        )
        .unwrap();
        for l in 0..2 {
            for h in 0..2 {
                let p = &ko.attn_prob[l][h];
                for dest in 3..5 {
                    assert_eq!(p.get(dest, 1), 0.0);
                    assert_eq!(p.get(dest, 2), 0.0);
                    assert!((p.row(dest).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn post_softmax_variant_does_not_renormalize() {
        let m = model();
        let toks = [1, 2, 3];
        let spans = TokenGroupSpans::from_lengths(1, 1, 0);
        let opts = KnockoutOptions {
            layers: Some(0..1),
            mode: KnockoutMode::PostSoftmaxZero,
        };
        let ko = attention_knockout(&m, &toks, &spans, &[TokenGroup::End], &[TokenGroup::Prefix], &opts).unwrap();
        let clean = traced_forward(&m, &toks, None).unwrap();
        let row = ko.attn_prob[0][0].row(2);
        assert_eq!(row[0], 0.0);
        assert_eq!(row[1], clean.attn_prob[0][0].get(2, 1));
        assert!(row.iter().sum::<f64>() < 1.0);
        assert!(ko.attn_prob[1][0].get(2, 0) > 0.0);
    }

    #[test]
    fn blocking_every_source_is_an_error() {
        let m = model();
        let spans = TokenGroupSpans::from_lengths(1, 1, 0);
        let err = attention_knockout(
            &m,
            &[1, 2, 3],
            &spans,
            &[TokenGroup::Prefix],
            &[TokenGroup::Prefix],
            &Default::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("empty support"), "{err}");
    }

    #[test]
    fn patch_from_same_prompt_is_noop() {
        let m = model();
        let toks = [3, 1, 4, 1, 5];
        let clean = traced_forward(&m, &toks, None).unwrap();
        let comps: Vec<_> = all_components(&m)
            .into_iter()
            .filter(|c| *c != ComponentId::Bias)
            .collect();
        let patched = activation_patch(&m, &toks, &toks, &comps, &[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(patched, clean);
    }

    #[test]
    fn full_patch_reproduces_source_logits() {
        let m = model();
        let target = [3, 1, 4, 1, 5];
        let source = [2, 7, 1, 8, 2];
        let comps: Vec<_> = all_components(&m)
            .into_iter()
            .filter(|c| *c != ComponentId::Bias)
            .collect();
        let patched = activation_patch(&m, &target, &source, &comps, &[0, 1, 2, 3, 4]).unwrap();
        let src = forward(&m, &source).unwrap();
        for (a, b) in patched.logits.row(4).iter().zip(src.row(4)) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!(activation_patch(&m, &target, &source[..4], &comps, &[0]).is_err());
    }

    #[test]
    fn direct_path_ablation_examples() {
        let m = model();
        let tr = traced_forward(&m, &[1, 2, 3], None).unwrap();
        assert_eq!(direct_path_ablation(&m, &tr, &[], None).unwrap(), tr.logits);
        let all = all_components(&m);
        let zeroed = direct_path_ablation(&m, &tr, &all, None).unwrap();
        assert!(zeroed.row(2).iter().all(|v| v.abs() <= 1e-9));
        assert_eq!(zeroed.row(0), tr.logits.row(0));
        let dup = [ComponentId::head(0, 1), ComponentId::head(0, 1)];
        assert!(matches!(
            direct_path_ablation(&m, &tr, &dup, None),
            Err(Error::DuplicateComponent(_))
        ));
    }

    #[test]
    fn metric_examples() {
        let r = eval_row(&[0.0; 8], 3, None, None).unwrap();
        assert!((r.loss - 8f64.ln()).abs() < 1e-12);
        assert_eq!(r.rank, 3);
        let better = eval_row(&[0.0, 5.0, 1.0], 1, Some((1, 2)), Some(&r)).unwrap();
        assert_eq!(better.rank, 0);
        assert_eq!(better.logit_diff, Some(4.0));
        let pc = better.percent_change.unwrap();
        assert!((pc - 100.0 * (better.loss - r.loss) / r.loss).abs() < 1e-12);
        assert!(better.loss >= 0.0);
    }

    #[test]
    fn head_means_round_trip_and_ablate() {
        let m = model();
        let vocab = &m.vocab;
        let e = FactEntry {
            subject: String::new(),
            relation_id: "R".into(),
            relation_text: String::new(),
            attribute: vocab.token(3).unwrap().trim_start().to_string(),
            prompt: String::new(),
            prompt_tokens: vec![1, 2, 3],
            spans: TokenGroupSpans::from_lengths(1, 1, 0),
            s_minus_a: vec![],
            r_minus_a: vec![],
            a_first_token: 3,
        };
        let means = HeadMeans::compute(&m, &[e.clone(), e]).unwrap();
        assert_eq!(means.n_positions, 6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("means.json");
        means.save(&path).unwrap();
        assert_eq!(HeadMeans::load(&path).unwrap(), means);
        let hooks = InterventionSet::new().mean_head(1, 0, means.get(1, 0).unwrap().to_vec());
        let tr = traced_forward(&m, &[1, 2, 3], Some(&hooks)).unwrap();
        assert_eq!(tr.head_out[1][0].row(2), means.get(1, 0).unwrap());
    }
}
