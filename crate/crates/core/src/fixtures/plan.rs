// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fixture models described in a logical residual basis, turned into weight
//! matrices, and evaluated in closed form.
//!
//! Conventions that make the closed form exact:
//!
//! * Every reader column (`W_Q`, `W_K`, `W_V`, `W_in`, `W_U`) sums to zero,
//!   balanced on a `sink` dimension that nothing writes. LayerNorm's mean
//!   subtraction then never changes what a reader sees.
//! * LN gains are 1 and biases 0, so a reader at position `p` sees
//!   `inv_std(p) · x_p`.
//! * Embeddings have zero mean and a common norm (balance + ballast dims),
//!   so the layer-0 LN scale is the same for every token.
//!
//! The oracle recomputes planted outputs from the plan alone, using only the
//! attention probabilities and LN statistics recorded in a trace.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attribution::ComponentId;
use crate::dataset::{TokenGroup, TokenGroupSpans};
use crate::error::{Error, Result};
use crate::model::{Head, Layer, LnParams, Mlp, ModelBundle, ModelConfig, TokenId, Vocab};
use crate::numerics::{Matrix, Precision};
use crate::trace::Trace;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Named logical residual dimensions.
#[derive(Debug, Clone, Default)]
pub(crate) struct Layout {
    names: Vec<String>,
}

impl Layout {
    pub fn alloc(&mut self, name: impl Into<String>) -> usize {
        self.names.push(name.into());
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    /// Errors when the model is too narrow for the planted structure.
    pub fn check_fits(&self, d_model: usize) -> Result<()> {
        if self.names.len() > d_model {
            return Err(Error::DimsTooSmall(format!(
                "needs d_model ≥ {} for its planted directions, got {d_model}",
                self.names.len()
            )));
        }
        Ok(())
    }
}

/// Layer-0 LN scale for an embedding of squared norm `norm2` and zero mean.
pub(crate) fn ln_scale(norm2: f64, d_model: usize) -> f64 {
    1.0 / (norm2 / d_model as f64 + LN_EPS).sqrt()
}

/// Zero-mean embedding with squared norm `norm2`: features, a balance dim
/// cancelling their sum, and a ballast pair absorbing the remaining norm.
pub(crate) fn embedding(
    d: usize,
    features: &[(usize, f64)],
    balance: usize,
    ballast: (usize, usize),
    norm2: f64,
) -> Result<Vec<f64>> {
    let mut v = vec![0.0; d];
    for &(i, x) in features {
        v[i] += x;
    }
    v[balance] = -features.iter().map(|f| f.1).sum::<f64>();
    let used: f64 = v.iter().map(|x| x * x).sum();
    if used > norm2 {
        return Err(Error::Invalid(format!(
            "embedding features need squared norm {used}, budget is {norm2}"
        )));
    }
    let b = ((norm2 - used) / 2.0).sqrt();
    v[ballast.0] = b;
    v[ballast.1] = -b;
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct HeadPlan {
    pub layer: usize,
    pub head: usize,
    /// Query slot 0 reads these dims (weights include the gain).
    pub query: Vec<(usize, f64)>,
    pub key: Vec<(usize, f64)>,
    /// `(read dim, write dim, weight)`.
    pub ov: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct NeuronPlan {
    pub w_in: Vec<(usize, f64)>,
    pub b_in: f64,
    pub w_out: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct MlpPlan {
    pub layer: usize,
    pub neurons: Vec<NeuronPlan>,
}

#[derive(Debug, Clone)]
pub(crate) struct Plan {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub max_seq: usize,
    pub vocab: Vocab,
    pub sink: usize,
    /// Logical `V × d_model` embedding rows.
    pub embed: Vec<Vec<f64>>,
    pub heads: Vec<HeadPlan>,
    pub mlps: Vec<MlpPlan>,
    /// `(dim, token, weight)`; the sink entry is added on materialization.
    pub unembed: Vec<(usize, TokenId, f64)>,
    pub unembed_bias: Option<Vec<f64>>,
    /// Dims that non-planted heads may write.
    pub scratch: Vec<usize>,
}

impl Plan {
    fn planted(&self, layer: usize, head: usize) -> Option<&HeadPlan> {
        self.heads.iter().find(|h| h.layer == layer && h.head == head)
    }

    /// Weight matrices in a seed-shuffled physical basis. Non-planted heads
    /// get random Q/K/V and write only to scratch dims.
    pub fn materialize(&self, seed: u64) -> Result<ModelBundle> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_7465);
        let d = self.d_model;
        let mut perm: Vec<usize> = (0..d).collect();
        perm.shuffle(&mut rng);
        let v = self.vocab.len();

        let config = ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: d,
            d_head: self.d_head,
            d_mlp: self.d_mlp,
            vocab_size: v,
            max_seq: self.max_seq,
            ln_eps: LN_EPS,
            residual_style: Default::default(),
            precision: Precision::F64,
        };
        let mut token_embed = Matrix::zeros(v, d);
        for (t, row) in self.embed.iter().enumerate() {
            for (i, &x) in row.iter().enumerate() {
                token_embed.set(t, perm[i], x);
            }
        }

        let read_col = |m: &mut Matrix, col: usize, reads: &[(usize, f64)]| {
            let mut sum = 0.0;
            for &(i, w) in reads {
                m.set(perm[i], col, m.get(perm[i], col) + w);
                sum += w;
            }
            m.set(perm[self.sink], col, m.get(perm[self.sink], col) - sum);
        };

        let mut layers = Vec::with_capacity(self.n_layers);
        for l in 0..self.n_layers {
            let mut heads = Vec::with_capacity(self.n_heads);
            for h in 0..self.n_heads {
                let mut head = Head::zeros(d, self.d_head);
                match self.planted(l, h) {
                    Some(p) => {
                        read_col(&mut head.w_q, 0, &p.query);
                        read_col(&mut head.w_k, 0, &p.key);
                        let mut slots: Vec<usize> = Vec::new();
                        for &(src, dst, w) in &p.ov {
                            let slot = match slots.iter().position(|&s| s == src) {
                                Some(s) => s,
                                None => {
                                    slots.push(src);
                                    if slots.len() > self.d_head {
                                        return Err(Error::DimsTooSmall(format!(
                                            "head L{l}H{h} needs d_head ≥ {} value slots, got {}",
                                            slots.len(),
                                            self.d_head
                                        )));
                                    }
                                    read_col(&mut head.w_v, slots.len() - 1, &[(src, 1.0)]);
                                    slots.len() - 1
                                }
                            };
                            let at = perm[dst];
                            head.w_o.set(slot, at, head.w_o.get(slot, at) + w);
                        }
                    }
                    None => {
                        let qk = rng.gen_range(0.2..0.6);
                        let vo = rng.gen_range(0.2..1.0);
                        for r in 0..d {
                            for c in 0..self.d_head {
                                head.w_q.set(r, c, rng.gen_range(-qk..qk));
                                head.w_k.set(r, c, rng.gen_range(-qk..qk));
                                head.w_v.set(r, c, rng.gen_range(-vo..vo));
                            }
                        }
                        for r in 0..self.d_head {
                            for &s in &self.scratch {
                                head.w_o.set(r, perm[s], rng.gen_range(-vo..vo) / self.d_head as f64);
                            }
                        }
                    }
                }
                heads.push(head);
            }
            let mut mlp = Mlp::zeros(d, self.d_mlp);
            for plan in self.mlps.iter().filter(|m| m.layer == l) {
                if plan.neurons.len() > self.d_mlp {
                    return Err(Error::DimsTooSmall(format!(
                        "MLP{l} needs d_mlp ≥ {}, got {}",
                        plan.neurons.len(),
                        self.d_mlp
                    )));
                }
                for (n, neuron) in plan.neurons.iter().enumerate() {
                    read_col(&mut mlp.w_in, n, &neuron.w_in);
                    mlp.b_in[n] = neuron.b_in;
                    for &(dst, w) in &neuron.w_out {
                        mlp.w_out.set(n, perm[dst], w);
                    }
                }
            }
            layers.push(Layer {
                ln_attn: LnParams::identity(d),
                ln_mlp: LnParams::identity(d),
                heads,
                attn_bias: None,
                mlp,
            });
        }

        let mut unembed = Matrix::zeros(d, v);
        let mut by_token: BTreeMap<TokenId, Vec<(usize, f64)>> = BTreeMap::new();
        for &(dim, t, w) in &self.unembed {
            by_token.entry(t).or_default().push((dim, w));
        }
        for (t, reads) in &by_token {
            read_col(&mut unembed, *t, reads);
        }

        let bundle = ModelBundle {
            config,
            vocab: self.vocab.clone(),
            token_embed,
            pos_embed: Matrix::zeros(self.max_seq, d),
            layers,
            final_ln: LnParams::identity(d),
            unembed,
            unembed_bias: self.unembed_bias.clone(),
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Logical unembedding weights of `token`.
    fn unembed_of(&self, token: TokenId) -> Vec<(usize, f64)> {
        self.unembed
            .iter()
            .filter(|u| u.1 == token)
            .map(|u| (u.0, u.2))
            .collect()
    }
}

/// Independent scalar GELU (tanh form) for the oracle.
fn oracle_gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044_715 * x * x * x)).tanh())
}

/// Planted outputs at END, in the logical basis, reconstructed from the
/// plan and the trace's attention probabilities and LN statistics.
pub(crate) struct OracleRun {
    pub embed: Vec<f64>,
    /// Per planted head: per-source contribution vectors at END.
    pub head_src: BTreeMap<ComponentId, Vec<Vec<f64>>>,
    pub mlp: BTreeMap<ComponentId, Vec<f64>>,
}

#[allow(clippy::needless_range_loop)]
pub(crate) fn oracle(plan: &Plan, trace: &Trace) -> OracleRun {
    let t_len = trace.len();
    let d = plan.d_model;
    let end = t_len - 1;
    let mut resid: Vec<Vec<f64>> = trace.tokens.iter().map(|&t| plan.embed[t].clone()).collect();
    let embed_end = resid[end].clone();
    let mut head_src = BTreeMap::new();
    let mut mlp_out = BTreeMap::new();
    for l in 0..plan.n_layers {
        let mut next = resid.clone();
        for hp in plan.heads.iter().filter(|h| h.layer == l) {
            let probs = &trace.attn_prob[l][hp.head];
            let mut end_src = vec![vec![0.0; d]; t_len];
            for dest in 0..t_len {
                for src in 0..=dest {
                    let scale = probs.get(dest, src) * trace.ln_attn_stats[l][src].inv_std;
                    let mut contrib = vec![0.0; d];
                    for &(r, w_dim, w) in &hp.ov {
                        contrib[w_dim] += scale * resid[src][r] * w;
                    }
                    for (n, c) in next[dest].iter_mut().zip(&contrib) {
                        *n += c;
                    }
                    if dest == end {
                        end_src[src] = contrib;
                    }
                }
            }
            head_src.insert(ComponentId::head(l, hp.head), end_src);
        }
        for mp in plan.mlps.iter().filter(|m| m.layer == l) {
            let mut at_end = vec![0.0; d];
            for pos in 0..t_len {
                let s = trace.ln_mlp_stats[l][pos].inv_std;
                for n in &mp.neurons {
                    let pre = s * n.w_in.iter().map(|&(i, w)| resid[pos][i] * w).sum::<f64>() + n.b_in;
                    let act = oracle_gelu(pre);
                    for &(o, w) in &n.w_out {
                        next[pos][o] += act * w;
                        if pos == end {
                            at_end[o] += act * w;
                        }
                    }
                }
            }
            mlp_out.insert(ComponentId::mlp(l), at_end);
        }
        resid = next;
    }
    OracleRun {
        embed: embed_end,
        head_src,
        mlp: mlp_out,
    }
}

/// One closed-form DLA value.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExpectedDla {
    pub entry: usize,
    pub component: ComponentId,
    /// Source group for per-group head values.
    pub group: Option<TokenGroup>,
    pub token: TokenId,
    pub value: f64,
}

/// Closed-form DLA of every planted component (per source group for heads),
/// plus embed and bias, on each of `tokens`.
pub(crate) fn expected_rows(
    plan: &Plan,
    trace: &Trace,
    entry: usize,
    spans: &TokenGroupSpans,
    tokens: &[TokenId],
) -> Vec<ExpectedDla> {
    let run = oracle(plan, trace);
    let s_f = trace.final_ln_stats[trace.end_pos()].inv_std;
    let read = |v: &[f64], t: TokenId| s_f * plan.unembed_of(t).iter().map(|&(i, w)| v[i] * w).sum::<f64>();
    let mut rows = Vec::new();
    let mut push = |component, group, token, value| {
        rows.push(ExpectedDla {
            entry,
            component,
            group,
            token,
            value,
        })
    };
    for &t in tokens {
        push(ComponentId::Embed, None, t, read(&run.embed, t));
        let bias = plan.unembed_bias.as_ref().map_or(0.0, |b| b[t]);
        push(ComponentId::Bias, None, t, bias);
        for (&c, per_src) in &run.head_src {
            let mut total = vec![0.0; plan.d_model];
            for v in per_src {
                for (a, b) in total.iter_mut().zip(v) {
                    *a += b;
                }
            }
            push(c, None, t, read(&total, t));
            for g in TokenGroup::ALL {
                let mut sum = vec![0.0; plan.d_model];
                for src in spans.positions(g) {
                    for (a, b) in sum.iter_mut().zip(&per_src[src]) {
                        *a += b;
                    }
                }
                push(c, Some(g), t, read(&sum, t));
            }
        }
        for (&c, v) in &run.mlp {
            push(c, None, t, read(v, t));
        }
    }
    rows
}
