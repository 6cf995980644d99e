// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward pass with full activation capture.
//!
//! A [`Trace`] holds every quantity attribution needs: residual checkpoints
//! `z^0..z^L`, attention probabilities, each head's output split by source
//! position, MLP outputs and the LayerNorm statistics of every sublayer.
//!
//! Attention output is a weighted sum over source positions, so for head
//! `(l, h)` and destination `t`
//!
//! ```text
//! head_out[l][h][t] = Σ_{s ≤ t} attn_prob[l][h][t, s] · LN(z_s^l) W_V W_O  (+ extra)
//! ```
//!
//! where `extra` is non-zero only when an intervention replaced the head's
//! output. The layer's attention bias `b_O` is kept separately in
//! [`Trace::attn_bias`] and never attributed to a token position.
//!
//! Memory: the per-source record is `O(L·H·T²·d_model)`. At L=6, H=8, T=32,
//! d_model=128 that is about 50 MB in `f64`. [`SourceRecording::Lean`] keeps
//! only the final destination position.

use std::io::Write;
use std::path::Path;

use crate::attribution::ComponentId;
use crate::error::{Error, Result};
use crate::interventions::{Directive, InterventionSet, KnockoutMode};
use crate::model::{ModelBundle, ResidualStyle, TokenId};
use crate::numerics::{add_assign, dot, gelu_scalar, softmax, vec_mat, LnStats, Matrix};
use crate::tensor_file::TensorFile;

/// Which per-source head outputs to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SourceRecording {
    #[default]
    Full,
    /// Only the last position as destination.
    Lean,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub tokens: Vec<TokenId>,
    /// `L + 1` checkpoints, each `T × d_model`.
    pub resid: Vec<Matrix>,
    /// `[layer][head]`, each `T × T` (destination rows).
    pub attn_prob: Vec<Vec<Matrix>>,
    /// `[layer][head]`, each `T × d_model`.
    pub head_out: Vec<Vec<Matrix>>,
    /// `[layer][head]`: the part of `head_out` not produced by attending
    /// (replacement vectors written by interventions). Zero in clean runs.
    pub head_extra: Vec<Vec<Matrix>>,
    /// `[layer]`: attention output bias (zeros when the model has none).
    pub attn_bias: Vec<Vec<f64>>,
    /// `[layer]`, each `T × d_model`.
    pub mlp_out: Vec<Matrix>,
    /// `[layer][pos]` statistics of the attention-input LayerNorm.
    pub ln_attn_stats: Vec<Vec<LnStats>>,
    /// `[layer][pos]` statistics of the MLP-input LayerNorm.
    pub ln_mlp_stats: Vec<Vec<LnStats>>,
    /// `[pos]` statistics of the final LayerNorm.
    pub final_ln_stats: Vec<LnStats>,
    /// `T × V`.
    pub logits: Matrix,
    pub recording: SourceRecording,
    /// `[layer][head][dest]` → `(dest + 1) × d_model` rows indexed by source.
    head_src: Vec<Vec<Vec<Option<Matrix>>>>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.attn_prob.len()
    }

    pub fn n_heads(&self) -> usize {
        self.attn_prob.first().map_or(0, Vec::len)
    }

    pub fn end_pos(&self) -> usize {
        self.tokens.len() - 1
    }

    /// Per-source outputs of head `(layer, head)` at `dest`: row `s` is the
    /// contribution of source position `s ≤ dest`. `None` when the position
    /// was not recorded.
    pub fn head_src_out(&self, layer: usize, head: usize, dest: usize) -> Option<&Matrix> {
        self.head_src.get(layer)?.get(head)?.get(dest)?.as_ref()
    }

    /// Test hook: overwrite an MLP output row without re-running the model.
    pub fn corrupt_mlp_out(&mut self, layer: usize, pos: usize, dim: usize, delta: f64) {
        let v = self.mlp_out[layer].get(pos, dim);
        self.mlp_out[layer].set(pos, dim, v + delta);
    }

    /// Tensor container dump; see [`crate::tensor_file`].
    pub fn to_tensor_file(&self) -> TensorFile {
        let t = self.len();
        let d = self.resid[0].cols();
        let mut tf = TensorFile::new();
        tf.meta.insert("tokens".into(), serde_json::json!(self.tokens));
        tf.meta.insert(
            "recording".into(),
            serde_json::json!(format!("{:?}", self.recording).to_lowercase()),
        );
        let mat = |tf: &mut TensorFile, name: String, m: &Matrix| {
            tf.insert(name, vec![m.rows(), m.cols()], m.data().to_vec());
        };
        for (l, r) in self.resid.iter().enumerate() {
            mat(&mut tf, format!("resid.{l}"), r);
        }
        for l in 0..self.n_layers() {
            for h in 0..self.n_heads() {
                mat(&mut tf, format!("attn_prob.{l}.{h}"), &self.attn_prob[l][h]);
                mat(&mut tf, format!("head_out.{l}.{h}"), &self.head_out[l][h]);
                if self.recording != SourceRecording::None {
                    let mut full = vec![0.0; t * t * d];
                    for dest in 0..t {
                        if let Some(m) = self.head_src_out(l, h, dest) {
                            for s in 0..=dest {
                                let at = (dest * t + s) * d;
                                full[at..at + d].copy_from_slice(m.row(s));
                            }
                        }
                    }
                    tf.insert(format!("head_src_out.{l}.{h}"), vec![t, t, d], full);
                }
            }
            tf.insert(format!("attn_bias.{l}"), vec![d], self.attn_bias[l].clone());
            mat(&mut tf, format!("mlp_out.{l}"), &self.mlp_out[l]);
        }
        let stats: Vec<f64> = self.final_ln_stats.iter().flat_map(|s| [s.mean, s.inv_std]).collect();
        tf.insert("final_ln_stats", vec![t, 2], stats);
        mat(&mut tf, "logits".into(), &self.logits);
        tf
    }

    pub fn dump(&self, manifest_path: &Path) -> Result<()> {
        let stem = manifest_path.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
        self.to_tensor_file().write(manifest_path, &format!("{stem}.bin"))
    }

    /// Attention pattern as CSV: `layer,head,dest,src,prob`.
    pub fn write_attention_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "head", "dest", "src", "prob"])
            .map_err(csv_err)?;
        for (l, heads) in self.attn_prob.iter().enumerate() {
            for (h, p) in heads.iter().enumerate() {
                for dest in 0..p.rows() {
                    for src in 0..=dest {
                        w.write_record([
                            l.to_string(),
                            h.to_string(),
                            dest.to_string(),
                            src.to_string(),
                            p.get(dest, src).to_string(),
                        ])
                        .map_err(csv_err)?;
                    }
                }
            }
        }
        w.flush().map_err(|e| Error::io("attention csv", e))?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Invalid(format!("csv: {e}"))
}

/// Max over layers, positions and dims of
/// `|resid[l+1] − (resid[l] + Σ_h head_out + attn_bias + mlp_out)|`.
pub fn reconstruction_error(trace: &Trace) -> f64 {
    let mut worst: f64 = 0.0;
    for l in 0..trace.n_layers() {
        for t in 0..trace.len() {
            let mut sum = trace.resid[l].row(t).to_vec();
            for h in 0..trace.n_heads() {
                add_assign(&mut sum, trace.head_out[l][h].row(t));
            }
            add_assign(&mut sum, &trace.attn_bias[l]);
            add_assign(&mut sum, trace.mlp_out[l].row(t));
            for (a, b) in sum.iter().zip(trace.resid[l + 1].row(t)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

/// Full trace with optional in-pass interventions.
pub fn traced_forward(model: &ModelBundle, tokens: &[TokenId], hooks: Option<&InterventionSet>) -> Result<Trace> {
    traced_forward_with(model, tokens, hooks, SourceRecording::Full)
}

pub fn traced_forward_with(
    model: &ModelBundle,
    tokens: &[TokenId],
    hooks: Option<&InterventionSet>,
    recording: SourceRecording,
) -> Result<Trace> {
    model.check_tokens(tokens)?;
    let plan = HookPlan::compile(model, tokens.len(), hooks)?;
    run(model, tokens, &plan, recording)
}

pub(crate) fn run_forward(model: &ModelBundle, tokens: &[TokenId]) -> Result<Matrix> {
    model.check_tokens(tokens)?;
    let plan = HookPlan::compile(model, tokens.len(), None)?;
    Ok(run(model, tokens, &plan, SourceRecording::None)?.logits)
}

/// Interventions resolved into per-layer lookups.
struct HookPlan {
    /// `[layer][head][dest]` replacement output.
    head_override: Vec<Vec<Vec<Option<Vec<f64>>>>>,
    mlp_override: Vec<Vec<Option<Vec<f64>>>>,
    embed_override: Vec<Option<Vec<f64>>>,
    /// `[layer]` → `T × T` flags (dest, src).
    pre_block: Vec<Vec<bool>>,
    post_block: Vec<Vec<bool>>,
}

impl HookPlan {
    fn compile(model: &ModelBundle, t: usize, hooks: Option<&InterventionSet>) -> Result<Self> {
        let c = &model.config;
        let mut plan = HookPlan {
            head_override: vec![vec![vec![None; t]; c.n_heads]; c.n_layers],
            mlp_override: vec![vec![None; t]; c.n_layers],
            embed_override: vec![None; t],
            pre_block: vec![vec![false; t * t]; c.n_layers],
            post_block: vec![vec![false; t * t]; c.n_layers],
        };
        let Some(hooks) = hooks else {
            return Ok(plan);
        };
        let check_head = |layer: usize, head: usize| -> Result<()> {
            if layer >= c.n_layers || head >= c.n_heads {
                return Err(Error::InvalidHook(format!(
                    "head L{layer}H{head} outside a {}x{} model",
                    c.n_layers, c.n_heads
                )));
            }
            Ok(())
        };
        let check_vec = |v: &[f64]| -> Result<()> {
            if v.len() != c.d_model {
                return Err(Error::InvalidHook(format!(
                    "replacement vector has length {}, expected d_model {}",
                    v.len(),
                    c.d_model
                )));
            }
            Ok(())
        };
        let check_pos = |p: usize| -> Result<()> {
            if p >= t {
                return Err(Error::InvalidHook(format!(
                    "position {p} outside a sequence of length {t}"
                )));
            }
            Ok(())
        };
        for directive in hooks.directives() {
            match directive {
                Directive::ZeroHead { layer, head } => {
                    check_head(*layer, *head)?;
                    for slot in &mut plan.head_override[*layer][*head] {
                        *slot = Some(vec![0.0; c.d_model]);
                    }
                }
                Directive::MeanHead { layer, head, mean } => {
                    check_head(*layer, *head)?;
                    check_vec(mean)?;
                    for slot in &mut plan.head_override[*layer][*head] {
                        *slot = Some(mean.clone());
                    }
                }
                Directive::Patch {
                    component,
                    replacements,
                } => {
                    for (pos, v) in replacements {
                        check_pos(*pos)?;
                        check_vec(v)?;
                        let slot = match *component {
                            ComponentId::Head { layer, head } => {
                                check_head(layer, head)?;
                                &mut plan.head_override[layer][head][*pos]
                            }
                            ComponentId::Mlp { layer } => {
                                if layer >= c.n_layers {
                                    return Err(Error::InvalidHook(format!(
                                        "MLP{layer} outside a {}-layer model",
                                        c.n_layers
                                    )));
                                }
                                &mut plan.mlp_override[layer][*pos]
                            }
                            ComponentId::Embed => &mut plan.embed_override[*pos],
                            ComponentId::Bias => {
                                return Err(Error::InvalidHook("the bias pseudo-component cannot be patched".into()))
                            }
                        };
                        *slot = Some(v.clone());
                    }
                }
                Directive::AttnBlock(block) => {
                    let layers = block.layers.clone().unwrap_or(0..c.n_layers);
                    if layers.end > c.n_layers {
                        return Err(Error::InvalidHook(format!(
                            "knockout layer range {layers:?} outside a {}-layer model",
                            c.n_layers
                        )));
                    }
                    for &p in block.dest.iter().chain(&block.src) {
                        check_pos(p)?;
                    }
                    for l in layers {
                        let grid = match block.mode {
                            KnockoutMode::PreSoftmax => &mut plan.pre_block[l],
                            KnockoutMode::PostSoftmaxZero => &mut plan.post_block[l],
                        };
                        for &d in &block.dest {
                            for &s in &block.src {
                                grid[d * t + s] = true;
                            }
                        }
                    }
                }
                // Applied to logits after the pass.
                Directive::DirectPathRemove(_) => {}
            }
        }
        Ok(plan)
    }
}

fn ln_rows(
    x: &Matrix,
    ln: &crate::model::LnParams,
    eps: f64,
    precision: crate::numerics::Precision,
) -> Result<(Matrix, Vec<LnStats>)> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut stats = Vec::with_capacity(x.rows());
    for t in 0..x.rows() {
        let (mut row, st) = ln.apply(x.row(t), eps)?;
        precision.round_slice(&mut row);
        out.row_mut(t).copy_from_slice(&row);
        stats.push(st);
    }
    Ok((out, stats))
}

#[allow(clippy::needless_range_loop)]
fn run(model: &ModelBundle, tokens: &[TokenId], plan: &HookPlan, recording: SourceRecording) -> Result<Trace> {
    let c = &model.config;
    let p = c.precision;
    let t_len = tokens.len();
    let d = c.d_model;
    let scale = 1.0 / (c.d_head as f64).sqrt();

    let mut z0 = Matrix::zeros(t_len, d);
    for (t, &tok) in tokens.iter().enumerate() {
        let row = z0.row_mut(t);
        match &plan.embed_override[t] {
            Some(v) => row.copy_from_slice(v),
            None => {
                for ((o, e), q) in row
                    .iter_mut()
                    .zip(model.token_embed.row(tok))
                    .zip(model.pos_embed.row(t))
                {
                    *o = e + q;
                }
            }
        }
        p.round_slice(row);
    }

    let mut resid = vec![z0];
    let mut attn_prob = Vec::with_capacity(c.n_layers);
    let mut head_out = Vec::with_capacity(c.n_layers);
    let mut head_extra = Vec::with_capacity(c.n_layers);
    let mut head_src = Vec::with_capacity(c.n_layers);
    let mut attn_bias = Vec::with_capacity(c.n_layers);
    let mut mlp_out = Vec::with_capacity(c.n_layers);
    let mut ln_attn_stats = Vec::with_capacity(c.n_layers);
    let mut ln_mlp_stats = Vec::with_capacity(c.n_layers);

    for (l, layer) in model.layers.iter().enumerate() {
        let x = resid[l].clone();
        let (ln1, st1) = ln_rows(&x, &layer.ln_attn, c.ln_eps, p)?;
        ln_attn_stats.push(st1);

        let mut layer_probs = Vec::with_capacity(c.n_heads);
        let mut layer_out = Vec::with_capacity(c.n_heads);
        let mut layer_extra = Vec::with_capacity(c.n_heads);
        let mut layer_src = Vec::with_capacity(c.n_heads);
        for (h, head) in layer.heads.iter().enumerate() {
            let mut q = ln1.matmul(&head.w_q)?;
            let mut k = ln1.matmul(&head.w_k)?;
            let mut v = ln1.matmul(&head.w_v)?;
            p.round_slice(q.data_mut());
            p.round_slice(k.data_mut());
            p.round_slice(v.data_mut());
            let mut vo = v.matmul(&head.w_o)?;
            p.round_slice(vo.data_mut());

            let mut probs = Matrix::zeros(t_len, t_len);
            let mut out = Matrix::zeros(t_len, d);
            let mut extra = Matrix::zeros(t_len, d);
            let mut src_rec: Vec<Option<Matrix>> = vec![None; t_len];
            for dest in 0..t_len {
                let scores: Vec<f64> = (0..=dest)
                    .map(|s| p.round(dot(q.row(dest), k.row(s)) * scale))
                    .collect();
                let mask: Vec<bool> = (0..=dest).map(|s| plan.pre_block[l][dest * t_len + s]).collect();
                let mut row = softmax(&scores, Some(&mask)).map_err(|e| match e {
                    Error::EmptySupport => Error::InvalidHook(format!(
                        "empty support: knockout blocks every source of position {dest} \
                         (layer {l}, head {h})"
                    )),
                    other => other,
                })?;
                for (s, pr) in row.iter_mut().enumerate() {
                    if plan.post_block[l][dest * t_len + s] {
                        *pr = 0.0;
                    }
                }
                p.round_slice(&mut row);
                probs.row_mut(dest)[..=dest].copy_from_slice(&row);

                let record = match recording {
                    SourceRecording::Full => true,
                    SourceRecording::Lean => dest + 1 == t_len,
                    SourceRecording::None => false,
                };
                let mut rec = record.then(|| Matrix::zeros(dest + 1, d));

                let out_row = out.row_mut(dest);
                for (s, &pr) in row.iter().enumerate() {
                    if pr == 0.0 {
                        continue;
                    }
                    let vo_row = vo.row(s);
                    match rec.as_mut() {
                        Some(m) => {
                            let contrib = m.row_mut(s);
                            for ((c_, o), &x) in contrib.iter_mut().zip(out_row.iter_mut()).zip(vo_row) {
                                *c_ = p.round(pr * x);
                                *o += *c_;
                            }
                        }
                        None => {
                            for (o, &x) in out_row.iter_mut().zip(vo_row) {
                                *o += p.round(pr * x);
                            }
                        }
                    }
                }
                p.round_slice(out_row);
                // A replacement identical to the computed output is no
                // intervention at all; otherwise it displaces every source.
                if let Some(replacement) = &plan.head_override[l][h][dest] {
                    if replacement.as_slice() != &*out_row {
                        out_row.copy_from_slice(replacement);
                        extra.row_mut(dest).copy_from_slice(replacement);
                        if let Some(m) = rec.as_mut() {
                            m.data_mut().fill(0.0);
                        }
                    }
                }
                src_rec[dest] = rec;
            }
            layer_probs.push(probs);
            layer_out.push(out);
            layer_extra.push(extra);
            layer_src.push(src_rec);
        }

        let bias = layer.attn_bias.clone().unwrap_or_else(|| vec![0.0; d]);
        let mut attn_total = Matrix::zeros(t_len, d);
        for t in 0..t_len {
            let row = attn_total.row_mut(t);
            for out in &layer_out {
                add_assign(row, out.row(t));
            }
            add_assign(row, &bias);
            p.round_slice(row);
        }

        let mlp_in = match c.residual_style {
            ResidualStyle::Parallel => x.clone(),
            ResidualStyle::Sequential => {
                let mut m = x.clone();
                for t in 0..t_len {
                    add_assign(m.row_mut(t), attn_total.row(t));
                    p.round_slice(m.row_mut(t));
                }
                m
            }
        };
        let (ln2, st2) = ln_rows(&mlp_in, &layer.ln_mlp, c.ln_eps, p)?;
        ln_mlp_stats.push(st2);
        let mut mlp = Matrix::zeros(t_len, d);
        for t in 0..t_len {
            let row = match &plan.mlp_override[l][t] {
                Some(v) => v.clone(),
                None => {
                    let mut hidden = vec_mat(ln2.row(t), &layer.mlp.w_in);
                    add_assign(&mut hidden, &layer.mlp.b_in);
                    for hv in hidden.iter_mut() {
                        *hv = p.round(gelu_scalar(*hv));
                    }
                    let mut o = vec_mat(&hidden, &layer.mlp.w_out);
                    add_assign(&mut o, &layer.mlp.b_out);
                    p.round_slice(&mut o);
                    o
                }
            };
            mlp.row_mut(t).copy_from_slice(&row);
        }

        let mut next = Matrix::zeros(t_len, d);
        for t in 0..t_len {
            let row = next.row_mut(t);
            for (j, o) in row.iter_mut().enumerate() {
                *o = p.round(x.get(t, j) + attn_total.get(t, j) + mlp.get(t, j));
            }
        }
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("residual stream after layer {l}")));
        }
        resid.push(next);
        attn_prob.push(layer_probs);
        head_out.push(layer_out);
        head_extra.push(layer_extra);
        head_src.push(layer_src);
        attn_bias.push(bias);
        mlp_out.push(mlp);
    }

    let last = resid.last().expect("at least z^0");
    let mut logits = Matrix::zeros(t_len, c.vocab_size);
    let mut final_ln_stats = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let (row, st) = model.final_logits(last.row(t))?;
        logits.row_mut(t).copy_from_slice(&row);
        final_ln_stats.push(st);
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("logits".into()));
    }

    Ok(Trace {
        tokens: tokens.to_vec(),
        resid,
        attn_prob,
        head_out,
        head_extra,
        attn_bias,
        mlp_out,
        ln_attn_stats,
        ln_mlp_stats,
        final_ln_stats,
        logits,
        recording,
        head_src,
    })
}
