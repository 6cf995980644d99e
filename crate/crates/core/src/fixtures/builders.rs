// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::plan::{embedding, expected_rows, ln_scale, HeadPlan, Layout, MlpPlan, NeuronPlan, Plan};
use super::world::{self, Relation, RELATIONS};
use super::{Fixture, FixtureKind, FixtureSpec, Planted, Role, Truth};
use crate::attribution::{dla, ComponentId};
use crate::dataset::{FactEntry, TokenGroupSpans};
use crate::error::{Error, Result};
use crate::model::{ModelBundle, TokenId, Vocab};
use crate::numerics::{add_assign, rank_of};
use crate::trace::{traced_forward_with, SourceRecording, Trace};

/// Pre-softmax score of a planted query/key pair.
const TARGET_SCORE: f64 = 40.0;
const MIN_ATTENTION: f64 = 0.99;
const WORLD_NORM2: f64 = 16.0;
const WORLD_D_MODEL: usize = 96;
const WORLD_D_HEAD: usize = 32;
const DIV6_NORM2: f64 = 25.0;
const DIV6_D_MODEL: usize = 16;

pub(super) fn min_d_model(kind: FixtureKind) -> usize {
    match kind {
        FixtureKind::Div6 => Div6Dims::new().layout.len(),
        _ => WorldDims::new().layout.len(),
    }
}

pub(super) fn build(spec: &FixtureSpec) -> Result<Fixture> {
    match spec.kind {
        FixtureKind::Div6 => build_div6(spec),
        _ => build_world(spec),
    }
}

// ---------------------------------------------------------------------------
// Fact world

struct WorldDims {
    layout: Layout,
    sink: usize,
    balance: usize,
    ballast: (usize, usize),
    subj: usize,
    relkey: usize,
    end: usize,
    /// Per subject, in world order.
    id: Vec<usize>,
    relid: Vec<usize>,
    /// Attribute token string → dim.
    attr: BTreeMap<String, usize>,
    /// Answer string → carrier dim.
    carrier: BTreeMap<String, usize>,
    relcarrier: Vec<usize>,
    scratch: Vec<usize>,
}

impl WorldDims {
    fn new() -> Self {
        let mut l = Layout::default();
        let sink = l.alloc("sink");
        let balance = l.alloc("balance");
        let ballast = (l.alloc("ballast0"), l.alloc("ballast1"));
        let subj = l.alloc("flag:subject");
        let relkey = l.alloc("flag:relation");
        let end = l.alloc("flag:end");
        let id = subjects().map(|(_, s)| l.alloc(format!("id:{}", s.name))).collect();
        let relid = RELATIONS.iter().map(|r| l.alloc(format!("relid:{}", r.id))).collect();
        let mut attr = BTreeMap::new();
        for t in attribute_tokens() {
            let d = l.alloc(format!("attr:{t}"));
            attr.insert(t, d);
        }
        let mut carrier = BTreeMap::new();
        for (_, s) in subjects() {
            if !carrier.contains_key(s.attribute) {
                let d = l.alloc(format!("carrier:{}", s.attribute));
                carrier.insert(s.attribute.to_string(), d);
            }
        }
        let relcarrier = RELATIONS
            .iter()
            .map(|r| l.alloc(format!("relcarrier:{}", r.id)))
            .collect();
        let scratch = (0..4).map(|i| l.alloc(format!("scratch{i}"))).collect();
        WorldDims {
            layout: l,
            sink,
            balance,
            ballast,
            subj,
            relkey,
            end,
            id,
            relid,
            attr,
            carrier,
            relcarrier,
            scratch,
        }
    }

    fn attr_of(&self, a: &str) -> usize {
        self.attr[&world::attr_token(a)]
    }
}

/// `(relation index, subject)` in world order.
fn subjects() -> impl Iterator<Item = (usize, &'static world::Subject)> {
    RELATIONS
        .iter()
        .enumerate()
        .flat_map(|(r, rel)| rel.subjects.iter().map(move |s| (r, s)))
}

fn attribute_tokens() -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for rel in &RELATIONS {
        let all = rel
            .r
            .iter()
            .chain([&rel.generic])
            .chain(rel.subjects.iter().flat_map(|s| s.s_minus_a.iter()));
        for a in all {
            let t = world::attr_token(a);
            if !out.contains(&t) {
                out.push(t);
            }
        }
    }
    out
}

/// Layer-1 LN scales measured on a provisional build.
#[derive(Debug, Clone, Copy)]
struct Calibration {
    end: f64,
    relkey: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum At {
    End,
    RelKey,
    SubjFinal,
}

impl At {
    fn pos(self, spans: &TokenGroupSpans) -> usize {
        match self {
            At::End => spans.end,
            At::RelKey => spans.relation.end - 1,
            At::SubjFinal => spans.subject.end - 1,
        }
    }
}

struct AttnCheck {
    layer: usize,
    head: usize,
    dest: At,
    src: Vec<At>,
}

fn check(layer: usize, head: usize, dest: At, src: &[At]) -> AttnCheck {
    AttnCheck {
        layer,
        head,
        dest,
        src: src.to_vec(),
    }
}

/// `(read dim, write dim, weight)`.
type Ov = (usize, usize, f64);

fn world_plan(
    kind: FixtureKind,
    dims: &WorldDims,
    d_model: usize,
    vocab: &Vocab,
    cal: Calibration,
) -> Result<(Plan, Vec<AttnCheck>, Vec<Planted>)> {
    dims.layout.check_fits(d_model)?;
    let d_head = WORLD_D_HEAD;
    let s0 = ln_scale(WORLD_NORM2, d_model);
    // q·k = g²·s_q·s_k, divided by √d_head in the score.
    let gain = |s_q: f64, s_k: f64| (TARGET_SCORE * (d_head as f64).sqrt() / (s_q * s_k)).sqrt();
    let g0 = gain(s0, s0);
    let w0 = 1.0 / s0;

    let mut final_of: BTreeMap<TokenId, usize> = BTreeMap::new();
    for (j, (_, s)) in subjects().enumerate() {
        final_of.insert(world::subject_final_token(vocab, s.name), j);
    }
    let key_of = |t: &str| RELATIONS.iter().position(|r| r.key_token == t);
    let mut embed = Vec::with_capacity(vocab.len());
    for (t, text) in vocab.tokens().iter().enumerate() {
        let mut f = Vec::new();
        if let Some(&j) = final_of.get(&t) {
            f.extend([(dims.subj, 1.0), (dims.id[j], 1.0)]);
        } else if let Some(r) = key_of(text) {
            f.extend([(dims.relkey, 1.0), (dims.relid[r], 1.0)]);
        } else if text == world::END_TOKEN {
            f.push((dims.end, 1.0));
        }
        embed.push(embedding(d_model, &f, dims.balance, dims.ballast, WORLD_NORM2)?);
    }

    let mut unembed = Vec::new();
    for (t, &d) in &dims.attr {
        let id = vocab
            .id(t)
            .ok_or_else(|| Error::Vocab(format!("attribute token `{t}` missing from the fixture vocab")))?;
        unembed.push((d, id, 1.0));
    }

    let per_subject = |f: &dyn Fn(usize, &Relation, &world::Subject) -> Vec<Ov>| {
        subjects()
            .enumerate()
            .flat_map(|(j, (r, s))| f(j, &RELATIONS[r], s))
            .collect::<Vec<_>>()
    };
    let per_relation = |f: &dyn Fn(usize, &Relation) -> Vec<Ov>| {
        RELATIONS
            .iter()
            .enumerate()
            .flat_map(|(r, rel)| f(r, rel))
            .collect::<Vec<_>>()
    };
    let reads = |q: usize, k: &[usize], g: f64| (vec![(q, g)], k.iter().map(|&d| (d, g)).collect::<Vec<_>>());

    let mut heads = Vec::new();
    let mut mlps = Vec::new();
    let mut checks = Vec::new();
    let mut planted = Vec::new();
    let (n_layers, n_heads) = match kind {
        FixtureKind::Composite => (2, 3),
        _ => (2, 2),
    };
    let mut plant = |h: HeadPlan, role: Role, c: AttnCheck, heads: &mut Vec<HeadPlan>| {
        planted.push(Planted {
            component: ComponentId::head(h.layer, h.head),
            role,
        });
        checks.push(c);
        heads.push(h);
    };
    match kind {
        FixtureKind::SubjectHead => {
            let (query, key) = reads(dims.end, &[dims.subj], g0);
            let ov = per_subject(&|j, _, s| vec![(dims.id[j], dims.attr_of(s.attribute), w0)]);
            plant(
                HeadPlan {
                    layer: 0,
                    head: 0,
                    query,
                    key,
                    ov,
                },
                Role::Subject,
                check(0, 0, At::End, &[At::SubjFinal]),
                &mut heads,
            );
        }
        FixtureKind::RelationHead => {
            let (query, key) = reads(dims.end, &[dims.relkey], g0);
            let ov = per_relation(&|r, rel| rel.r.iter().map(|a| (dims.relid[r], dims.attr_of(a), w0)).collect());
            plant(
                HeadPlan {
                    layer: 0,
                    head: 1,
                    query,
                    key,
                    ov,
                },
                Role::Relation,
                check(0, 1, At::End, &[At::RelKey]),
                &mut heads,
            );
        }
        FixtureKind::Propagation => {
            let (query, key) = reads(dims.relkey, &[dims.subj], g0);
            let ov = per_subject(&|j, _, s| vec![(dims.id[j], dims.carrier[s.attribute], w0)]);
            plant(
                HeadPlan {
                    layer: 0,
                    head: 0,
                    query,
                    key,
                    ov,
                },
                Role::Carry,
                check(0, 0, At::RelKey, &[At::SubjFinal]),
                &mut heads,
            );
            let g1 = gain(cal.end, cal.relkey);
            let w1 = 1.0 / cal.relkey;
            let (query, key) = reads(dims.end, &[dims.relkey], g1);
            let mut ov: Vec<_> = dims
                .carrier
                .iter()
                .map(|(a, &c)| (c, dims.attr_of(a), 4.0 * w1))
                .collect();
            ov.extend(per_relation(&|r, rel| {
                let mut v = vec![(dims.relid[r], dims.attr_of(rel.generic), w1)];
                v.extend(rel.r.iter().map(|a| (dims.relid[r], dims.attr_of(a), 0.5 * w1)));
                v
            }));
            plant(
                HeadPlan {
                    layer: 1,
                    head: 0,
                    query,
                    key,
                    ov,
                },
                Role::Propagate,
                check(1, 0, At::End, &[At::RelKey]),
                &mut heads,
            );
        }
        FixtureKind::Composite => {
            let (query, key) = reads(dims.end, &[dims.subj], g0);
            let ov = per_subject(&|j, _, s| {
                vec![
                    (dims.id[j], dims.attr_of(s.attribute), w0),
                    (dims.id[j], dims.attr_of(s.s_minus_a[0]), 1.3 * w0),
                ]
            });
            plant(
                HeadPlan {
                    layer: 0,
                    head: 0,
                    query,
                    key,
                    ov,
                },
                Role::Subject,
                check(0, 0, At::End, &[At::SubjFinal]),
                &mut heads,
            );

            let (query, key) = reads(dims.end, &[dims.relkey], g0);
            let ov = per_relation(&|r, rel| {
                let mut v: Vec<_> = rel.r.iter().map(|a| (dims.relid[r], dims.attr_of(a), w0)).collect();
                v.push((dims.relid[r], dims.attr_of(rel.generic), 1.2 * w0));
                v.push((dims.relid[r], dims.relcarrier[r], w0));
                v
            });
            plant(
                HeadPlan {
                    layer: 0,
                    head: 1,
                    query,
                    key,
                    ov,
                },
                Role::Relation,
                check(0, 1, At::End, &[At::RelKey]),
                &mut heads,
            );

            // Equal keys on the subject and the relation: attention splits
            // evenly between them.
            let (query, key) = reads(dims.end, &[dims.subj, dims.relkey], g0);
            let mut ov = per_subject(&|j, _, s| {
                vec![
                    (dims.id[j], dims.attr_of(s.attribute), 0.5 * w0),
                    (dims.id[j], dims.attr_of(s.s_minus_a[1]), w0),
                ]
            });
            ov.extend(per_relation(&|r, rel| {
                let mut v: Vec<_> = rel
                    .r
                    .iter()
                    .map(|a| (dims.relid[r], dims.attr_of(a), 0.4 * w0))
                    .collect();
                v.push((dims.relid[r], dims.attr_of(rel.generic), w0));
                v
            }));
            plant(
                HeadPlan {
                    layer: 0,
                    head: 2,
                    query,
                    key,
                    ov,
                },
                Role::Mixed,
                check(0, 2, At::End, &[At::SubjFinal, At::RelKey]),
                &mut heads,
            );

            // One neuron per relation, driven to ≈4 by the relation head's
            // carrier; the relation's popular non-answer gets the most.
            let neurons = RELATIONS
                .iter()
                .enumerate()
                .map(|(r, rel)| NeuronPlan {
                    w_in: vec![(dims.relcarrier[r], 4.0 / cal.end)],
                    b_in: 0.0,
                    w_out: rel
                        .r
                        .iter()
                        .enumerate()
                        .map(|(i, a)| (dims.attr_of(a), if i == 0 { 1.2 } else { 1.0 } / 4.0))
                        .collect(),
                })
                .collect();
            mlps.push(MlpPlan { layer: 1, neurons });
            planted.push(Planted {
                component: ComponentId::mlp(1),
                role: Role::Mlp,
            });
        }
        FixtureKind::Div6 => unreachable!("div6 is not a world fixture"),
    }

    let plan = Plan {
        n_layers,
        n_heads,
        d_model,
        d_head,
        d_mlp: RELATIONS.len(),
        max_seq: 16,
        vocab: vocab.clone(),
        sink: dims.sink,
        embed,
        heads,
        mlps,
        unembed,
        unembed_bias: None,
        scratch: dims.scratch.clone(),
    };
    Ok((plan, checks, planted))
}

fn trace_all(model: &ModelBundle, entries: &[FactEntry]) -> Result<Vec<Trace>> {
    entries
        .iter()
        .map(|e| traced_forward_with(model, &e.prompt_tokens, None, SourceRecording::Full))
        .collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

fn verify_attention(kind: FixtureKind, traces: &[Trace], entries: &[FactEntry], checks: &[AttnCheck]) -> Result<()> {
    for (trace, entry) in traces.iter().zip(entries) {
        for c in checks {
            let dest = c.dest.pos(&entry.spans);
            let p: f64 = c
                .src
                .iter()
                .map(|s| trace.attn_prob[c.layer][c.head].get(dest, s.pos(&entry.spans)))
                .sum();
            if p < MIN_ATTENTION {
                return Err(Error::Invalid(format!(
                    "{kind} fixture: head L{}H{} puts only {p:.4} attention on its target for `{}`",
                    c.layer, c.head, entry.prompt
                )));
            }
        }
    }
    Ok(())
}

/// Tokens whose DLA is tabulated for a world entry.
fn world_tokens(entry: &FactEntry, vocab: &Vocab) -> Result<Vec<TokenId>> {
    let rel = world::relation(&entry.relation_id)
        .ok_or_else(|| Error::Invalid(format!("unknown relation {}", entry.relation_id)))?;
    let mut toks = vec![entry.a_first_token];
    toks.extend(entry.r_first_tokens(vocab)?);
    toks.extend(entry.s_first_tokens(vocab)?);
    if let Some(g) = vocab.id(&world::attr_token(rel.generic)) {
        toks.push(g);
    }
    let mut seen = std::collections::BTreeSet::new();
    toks.retain(|t| seen.insert(*t));
    Ok(toks)
}

fn build_world(spec: &FixtureSpec) -> Result<Fixture> {
    let kind = spec.kind;
    let dims = WorldDims::new();
    let d_model = spec.d_model.unwrap_or(WORLD_D_MODEL);
    let vocab = world::vocab(spec.seed);
    let entries = world::entries(&vocab)?;
    let s0 = ln_scale(WORLD_NORM2, d_model);

    // Layer-1 readers need the layer-1 LN scale, which depends on the
    // layer-0 heads; measure it on a provisional build. Layer-1 weights do
    // not affect layer-1 statistics, so one pass suffices.
    let provisional = Calibration { end: s0, relkey: s0 };
    let (plan, _, _) = world_plan(kind, &dims, d_model, &vocab, provisional)?;
    let model = plan.materialize(spec.seed)?;
    let traces = trace_all(&model, &entries)?;
    let cal = Calibration {
        end: mean(
            traces
                .iter()
                .zip(&entries)
                .map(|(t, e)| t.ln_attn_stats[1][At::End.pos(&e.spans)].inv_std),
        ),
        relkey: mean(
            traces
                .iter()
                .zip(&entries)
                .map(|(t, e)| t.ln_attn_stats[1][At::RelKey.pos(&e.spans)].inv_std),
        ),
    };
    log::debug!("{kind} calibration: {cal:?}");

    let (plan, checks, planted) = world_plan(kind, &dims, d_model, &vocab, cal)?;
    let model = plan.materialize(spec.seed)?;
    let traces = trace_all(&model, &entries)?;
    verify_attention(kind, &traces, &entries, &checks)?;

    let mut expected = Vec::new();
    for (i, (trace, entry)) in traces.iter().zip(&entries).enumerate() {
        let toks = world_tokens(entry, &vocab)?;
        expected.extend(expected_rows(&plan, trace, i, &entry.spans, &toks));
    }

    let truth = Truth {
        kind,
        seed: spec.seed,
        planted,
        planted_facts: subjects()
            .map(|(_, s)| (s.name.to_string(), s.attribute.to_string()))
            .collect(),
        planted_r: RELATIONS
            .iter()
            .map(|r| (r.id.to_string(), r.r.iter().map(|a| a.to_string()).collect()))
            .collect(),
    };
    if kind == FixtureKind::Composite {
        check_composite(&model, &traces, &entries, &truth)?;
    }
    Ok(Fixture {
        kind,
        seed: spec.seed,
        model,
        entries,
        expected,
        truth,
    })
}

/// No single mechanism ranks `a` first; their sum and the model do.
fn check_composite(model: &ModelBundle, traces: &[Trace], entries: &[FactEntry], truth: &Truth) -> Result<()> {
    let fail = |entry: &FactEntry, what: String| {
        Err(Error::Invalid(format!(
            "composite fixture not additive on `{}`: {what}",
            entry.prompt
        )))
    };
    for (trace, entry) in traces.iter().zip(entries) {
        let a = entry.a_first_token;
        let end = entry.end_pos();
        let mut sum = vec![0.0; model.vocab_size()];
        for c in truth.components() {
            let v = dla(model, trace, c, end)?.values;
            let rank = rank_of(&v, a)?;
            if rank == 0 {
                return fail(entry, format!("{c} alone ranks the answer first"));
            }
            add_assign(&mut sum, &v);
        }
        if rank_of(&sum, a)? != 0 {
            return fail(entry, "the summed mechanisms miss the answer".into());
        }
        if rank_of(trace.logits.row(end), a)? != 0 {
            return fail(entry, "the model misses the answer".into());
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Divisible by six

struct Div6Dims {
    layout: Layout,
    sink: usize,
    balance: usize,
    ballast: (usize, usize),
    p2: usize,
    p3: usize,
    flag: usize,
    /// `(A, A′)` for the even circuit, `(B, B′)` for the triple circuit.
    even: (usize, usize),
    triple: (usize, usize),
    w: usize,
}

impl Div6Dims {
    fn new() -> Self {
        let mut l = Layout::default();
        Div6Dims {
            sink: l.alloc("sink"),
            balance: l.alloc("balance"),
            ballast: (l.alloc("ballast0"), l.alloc("ballast1")),
            p2: l.alloc("parity2"),
            p3: l.alloc("parity3"),
            flag: l.alloc("flag:number"),
            even: (l.alloc("even"), l.alloc("even'")),
            triple: (l.alloc("triple"), l.alloc("triple'")),
            w: l.alloc("true-base"),
            layout: l,
        }
    }
}

const DIV6_MAX: u32 = 36;

fn div6_vocab(seed: u64) -> Result<Vocab> {
    let mut toks: Vec<String> = (1..=DIV6_MAX).map(|n| n.to_string()).collect();
    toks.extend([" true", " false", " even", " triple"].map(String::from));
    toks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xd1_76));
    Vocab::new(toks)
}

fn build_div6(spec: &FixtureSpec) -> Result<Fixture> {
    let dims = Div6Dims::new();
    let d = spec.d_model.unwrap_or(DIV6_D_MODEL);
    dims.layout.check_fits(d)?;
    let vocab = div6_vocab(spec.seed)?;
    let tok = |s: &str| vocab.id(s).expect("div6 token");
    let (t_true, t_false, t_even, t_triple) = (tok(" true"), tok(" false"), tok(" even"), tok(" triple"));

    // Each number carries ±1 parity signs and a fixed (−½, +½) pair per
    // circuit. A circuit moves +1 from the primed to the unprimed dim when
    // its parity fires, so norm and mean (and the LN scale) never change.
    let s0 = ln_scale(DIV6_NORM2, d);
    let mut embed = Vec::with_capacity(vocab.len());
    for text in vocab.tokens() {
        let f = match text.parse::<u32>() {
            Ok(n) => {
                let sign = |m: u32| if n % m == 0 { 1.0 } else { -1.0 };
                vec![
                    (dims.p2, sign(2)),
                    (dims.p3, sign(3)),
                    (dims.flag, 1.0),
                    (dims.even.0, -0.5),
                    (dims.even.1, 0.5),
                    (dims.triple.0, -0.5),
                    (dims.triple.1, 0.5),
                    (dims.w, 1.0),
                ]
            }
            Err(_) => Vec::new(),
        };
        embed.push(embedding(d, &f, dims.balance, dims.ballast, DIV6_NORM2)?);
    }

    let half = 1.0 / (2.0 * s0);
    let circuit = |head: usize, parity: usize, (x, x_neg): (usize, usize)| HeadPlan {
        layer: 0,
        head,
        query: Vec::new(),
        key: Vec::new(),
        ov: vec![
            (parity, x, half),
            (dims.flag, x, half),
            (parity, x_neg, -half),
            (dims.flag, x_neg, -half),
        ],
    };
    let heads = vec![circuit(0, dims.p2, dims.even), circuit(1, dims.p3, dims.triple)];

    // The final LN scale equals the embedding's.
    let s_f = s0;
    let alpha = 1.0 / (2.0 * s_f);
    let mut unembed = Vec::new();
    for (pair, named) in [(dims.even, t_even), (dims.triple, t_triple)] {
        for t in [t_true, named] {
            unembed.push((pair.0, t, alpha));
            unembed.push((pair.1, t, -alpha));
        }
        unembed.push((dims.w, named, 1.0 / (2.0 * s_f)));
    }
    unembed.push((dims.w, t_true, 1.0 / s_f));
    let mut bias = vec![0.0; vocab.len()];
    bias[t_false] = 1.5;

    let plan = Plan {
        n_layers: 1,
        n_heads: 2,
        d_model: d,
        d_head: 4,
        d_mlp: 1,
        max_seq: 4,
        vocab: vocab.clone(),
        sink: dims.sink,
        embed,
        heads,
        mlps: Vec::new(),
        unembed,
        unembed_bias: Some(bias),
        scratch: Vec::new(),
    };
    let model = plan.materialize(spec.seed)?;

    let mut entries = Vec::new();
    let mut expected = Vec::new();
    let mut facts = BTreeMap::new();
    for n in 1..=DIV6_MAX {
        let (attribute, other) = if n % 6 == 0 {
            ("true", "false")
        } else {
            ("false", "true")
        };
        let entry = FactEntry {
            subject: n.to_string(),
            relation_id: "DIV6".into(),
            relation_text: String::new(),
            attribute: attribute.into(),
            prompt: n.to_string(),
            prompt_tokens: vec![tok(&n.to_string())],
            spans: TokenGroupSpans::from_lengths(0, 0, 0),
            s_minus_a: Vec::new(),
            r_minus_a: vec![other.into()],
            a_first_token: tok(&format!(" {attribute}")),
        };
        entry.validate(&vocab)?;
        let trace = traced_forward_with(&model, &entry.prompt_tokens, None, SourceRecording::Full)?;
        expected.extend(expected_rows(
            &plan,
            &trace,
            entries.len(),
            &entry.spans,
            &[t_true, t_false, t_even, t_triple],
        ));
        facts.insert(entry.subject.clone(), attribute.to_string());
        entries.push(entry);
    }
    let truth = Truth {
        kind: FixtureKind::Div6,
        seed: spec.seed,
        planted: vec![
            Planted {
                component: ComponentId::head(0, 0),
                role: Role::EvenCircuit,
            },
            Planted {
                component: ComponentId::head(0, 1),
                role: Role::TripleCircuit,
            },
        ],
        planted_facts: facts,
        planted_r: BTreeMap::from([("DIV6".to_string(), vec!["true".to_string(), "false".to_string()])]),
    };
    Ok(Fixture {
        kind: FixtureKind::Div6,
        seed: spec.seed,
        model,
        entries,
        expected,
        truth,
    })
}
