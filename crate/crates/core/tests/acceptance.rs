// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints a PASS/FAIL line; exits non-zero if any fails.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use additive_recall::attribution::{all_components, dla, dla_all, dla_by_source_group, logit_lens, ComponentId};
use additive_recall::dataset::{TokenGroup, TokenGroupSpans};
use additive_recall::fixtures::{build_fixture, random_bundle, Fixture, FixtureKind, FixtureSpec, RandomDims, Role};
use additive_recall::interventions::{
    activation_patch_entries, attention_knockout, direct_path_ablation, eval_metrics, AttnBlock, InterventionSet,
    KnockoutMode, KnockoutOptions,
};
use additive_recall::model::{forward, ModelBundle, TokenId};
use additive_recall::numerics::{add_assign, rank_of};
use additive_recall::taxonomy::{
    classify_heads, detect_additivity, labels_by_head, ClassifyOptions, Label, DEFAULT_SIMILARITY_THRESHOLD,
};
use additive_recall::trace::{traced_forward, traced_forward_with, SourceRecording, Trace};

const TOL: f64 = 1e-6;
const RANDOM_MODELS: u64 = 100;
const ADDITIVITY_THRESHOLD: f64 = DEFAULT_SIMILARITY_THRESHOLD;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

struct Sample {
    model: ModelBundle,
    tokens: Vec<TokenId>,
    spans: TokenGroupSpans,
}

/// Random model, prompt, and a random four-way split of the prompt.
fn random_sample(seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = RandomDims::sample(&mut rng, 4, 4, 64, 16);
    let model = random_bundle(seed, &dims);
    let t = rng.gen_range(1..=dims.max_seq);
    let tokens = (0..t).map(|_| rng.gen_range(0..dims.vocab_size)).collect();
    let body = t - 1;
    let p = rng.gen_range(0..=body);
    let s = rng.gen_range(0..=body - p);
    let spans = TokenGroupSpans::from_lengths(p, s, body - p - s);
    Sample { model, tokens, spans }
}

fn samples() -> Vec<Sample> {
    (0..RANDOM_MODELS).map(|s| random_sample(1000 + s)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn completeness(samples: &[Sample]) -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for s in samples {
        let trace = ok(traced_forward(&s.model, &s.tokens, None))?;
        for pos in 0..trace.len() {
            let mut sum = vec![0.0; s.model.vocab_size()];
            for v in ok(dla_all(&s.model, &trace, pos, Default::default()))? {
                add_assign(&mut sum, &v.values);
            }
            worst = worst.max(max_abs_diff(&sum, trace.logits.row(pos)));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst <= TOL, || format!("max |Σ DLA − logits| = {worst:e}"))?;
    ensure(secs < 30.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{RANDOM_MODELS} models, max error {worst:.2e}, {secs:.2}s"))
}

fn source_sum(samples: &[Sample]) -> Outcome {
    let mut worst: f64 = 0.0;
    for s in samples {
        let trace = ok(traced_forward(&s.model, &s.tokens, None))?;
        let end = trace.end_pos();
        for c in all_components(&s.model).into_iter().filter(ComponentId::is_head) {
            let head = ok(dla(&s.model, &trace, c, end))?;
            let split = ok(dla_by_source_group(&s.model, &trace, c, end, &s.spans))?;
            worst = worst.max(max_abs_diff(&split.total(), &head.values));
        }
    }
    ensure(worst <= TOL, || format!("max source-sum error {worst:e}"))?;
    Ok(format!("max error {worst:.2e}"))
}

fn lens_endpoint(samples: &[Sample]) -> Outcome {
    let mut worst: f64 = 0.0;
    for s in samples {
        let trace = ok(traced_forward(&s.model, &s.tokens, None))?;
        let logits = ok(forward(&s.model, &s.tokens))?;
        for pos in 0..trace.len() {
            let lens = ok(logit_lens(&s.model, &trace, s.model.n_layers(), pos))?;
            worst = worst.max(max_abs_diff(&lens, logits.row(pos)));
        }
    }
    ensure(worst <= 1e-12, || format!("lens differs from forward by {worst:e}"))?;
    Ok(format!("max difference {worst:.2e}"))
}

fn oracle_error(f: &Fixture) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for (i, e) in f.entries.iter().enumerate() {
        let trace = ok(traced_forward(&f.model, &e.prompt_tokens, None))?;
        let end = e.end_pos();
        let mut splits = BTreeMap::new();
        for row in f.expected.iter().filter(|r| r.entry == i) {
            let got = match row.group {
                None => ok(dla(&f.model, &trace, row.component, end))?.values[row.token],
                Some(g) => {
                    if let std::collections::btree_map::Entry::Vacant(slot) = splits.entry(row.component) {
                        slot.insert(ok(dla_by_source_group(&f.model, &trace, row.component, end, &e.spans))?);
                    }
                    splits[&row.component].groups[&g].values[row.token]
                }
            };
            worst = worst.max((got - row.value).abs());
        }
    }
    Ok(worst)
}

fn fixture_oracle() -> Outcome {
    let mut parts = Vec::new();
    for kind in FixtureKind::ALL {
        for seed in [0, 1] {
            let f = ok(build_fixture(&FixtureSpec::new(kind, seed)))?;
            let err = oracle_error(&f)?;
            ensure(err <= TOL, || format!("{kind} seed {seed}: error {err:e}"))?;
            if seed == 0 {
                parts.push(format!("{kind} {err:.1e} ({} rows)", f.expected.len()));
            }
        }
    }
    Ok(parts.join(", "))
}

fn by_relation(f: &Fixture) -> BTreeMap<String, Vec<additive_recall::dataset::FactEntry>> {
    let mut out: BTreeMap<String, Vec<_>> = BTreeMap::new();
    for e in &f.entries {
        out.entry(e.relation_id.clone()).or_default().push(e.clone());
    }
    out
}

fn classifier() -> Outcome {
    let cases = [
        (FixtureKind::SubjectHead, Role::Subject, Label::Subject),
        (FixtureKind::RelationHead, Role::Relation, Label::Relation),
        (FixtureKind::Composite, Role::Mixed, Label::Mixed),
    ];
    let mut checked = 0;
    for seed in 0..10 {
        for (kind, role, want) in cases {
            let f = ok(build_fixture(&FixtureSpec::new(kind, seed)))?;
            let head = f.truth.component(role).ok_or("planted head missing")?;
            for (rel, entries) in by_relation(&f) {
                let labels = ok(classify_heads(&f.model, &entries, &ClassifyOptions::default()))?;
                let got = labels_by_head(&labels).get(&head).copied();
                ensure(got == Some(want), || {
                    format!("{kind} seed {seed} {rel}: {head} labelled {got:?}, expected {want:?}")
                })?;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} (fixture, seed, relation) cases"))
}

fn additivity() -> Outcome {
    let f = ok(build_fixture(&FixtureSpec::new(FixtureKind::Div6, 0)))?;
    let even = f.truth.component(Role::EvenCircuit).ok_or("even circuit missing")?;
    let triple = f.truth.component(Role::TripleCircuit).ok_or("triple circuit missing")?;
    let context = [ComponentId::Embed, ComponentId::Bias];
    let mut multiples = 0;
    for e in f
        .entries
        .iter()
        .filter(|e| e.subject.parse::<u32>().is_ok_and(|n| n % 6 == 0))
    {
        let trace = ok(traced_forward(&f.model, &e.prompt_tokens, None))?;
        let r = ok(detect_additivity(
            &f.model,
            &trace,
            e,
            &[even, triple],
            ADDITIVITY_THRESHOLD,
            &context,
        ))?;
        ensure(r.verdict, || format!("div6 {}: verdict false", e.subject))?;
        ensure(r.constructive.components_where_a_not_argmax.len() == 2, || {
            format!("div6 {}: a single circuit already wins", e.subject)
        })?;
        let twice = ok(detect_additivity(
            &f.model,
            &trace,
            e,
            &[even, even],
            ADDITIVITY_THRESHOLD,
            &context,
        ))?;
        ensure(!twice.verdict, || {
            format!("div6 {}: same component twice passes", e.subject)
        })?;
        let hooks = InterventionSet::new().zero_head(0, 1);
        let zeroed = ok(traced_forward(&f.model, &e.prompt_tokens, Some(&hooks)))?;
        let r0 = ok(detect_additivity(
            &f.model,
            &zeroed,
            e,
            &[even, triple],
            ADDITIVITY_THRESHOLD,
            &context,
        ))?;
        ensure(!r0.verdict, || {
            format!("div6 {}: passes with a circuit zeroed", e.subject)
        })?;
        multiples += 1;
    }
    ensure(multiples == 6, || format!("expected 6 multiples of 6, saw {multiples}"))?;

    let c = ok(build_fixture(&FixtureSpec::new(FixtureKind::Composite, 0)))?;
    let mechanisms = c.truth.components();
    for e in &c.entries {
        let trace = ok(traced_forward(&c.model, &e.prompt_tokens, None))?;
        let a = e.a_first_token;
        let mut sum = vec![0.0; c.model.vocab_size()];
        for &m in &mechanisms {
            let v = ok(dla(&c.model, &trace, m, e.end_pos()))?.values;
            let rank = ok(rank_of(&v, a))?;
            ensure(rank > 0, || {
                format!("composite `{}`: {m} alone ranks a first", e.prompt)
            })?;
            add_assign(&mut sum, &v);
        }
        ensure(ok(rank_of(&sum, a))? == 0, || {
            format!("composite `{}`: sum misses a", e.prompt)
        })?;
    }
    Ok(format!(
        "div6 verdicts on {multiples} multiples; composite on {} entries × {} mechanisms",
        c.entries.len(),
        mechanisms.len()
    ))
}

/// Rank of `a` in the head DLA summed over RELATION sources at END.
fn relation_rank(f: &Fixture, trace: &Trace, e: &additive_recall::dataset::FactEntry) -> Result<usize, String> {
    let mut sum = vec![0.0; f.model.vocab_size()];
    for l in 0..f.model.n_layers() {
        for h in 0..f.model.n_heads() {
            let split = ok(dla_by_source_group(
                &f.model,
                trace,
                ComponentId::head(l, h),
                e.end_pos(),
                &e.spans,
            ))?;
            add_assign(&mut sum, &split.groups[&TokenGroup::Relation].values);
        }
    }
    ok(rank_of(&sum, e.a_first_token))
}

fn knockout() -> Outcome {
    let f = ok(build_fixture(&FixtureSpec::new(FixtureKind::Propagation, 0)))?;
    let mut deltas = Vec::new();
    for e in &f.entries {
        let clean = ok(traced_forward(&f.model, &e.prompt_tokens, None))?;
        let ko = ok(attention_knockout(
            &f.model,
            &e.prompt_tokens,
            &e.spans,
            &[TokenGroup::Relation],
            &[TokenGroup::Subject],
            &KnockoutOptions::default(),
        ))?;
        let (before, after) = (relation_rank(&f, &clean, e)?, relation_rank(&f, &ko, e)?);
        ensure(after > before, || format!("`{}`: rank {before} → {after}", e.prompt))?;
        deltas.push(after - before);
    }
    Ok(format!(
        "rank from RELATION rose on all {} entries (min +{}, max +{})",
        deltas.len(),
        deltas.iter().min().unwrap(),
        deltas.iter().max().unwrap()
    ))
}

fn patching() -> Outcome {
    let f = ok(build_fixture(&FixtureSpec::new(FixtureKind::RelationHead, 0)))?;
    let head = f.truth.component(Role::Relation).ok_or("planted head missing")?;
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    for (i, t) in f.entries.iter().enumerate() {
        for s in f.entries.iter().skip(i + 1) {
            if s.relation_id != t.relation_id || s.spans != t.spans {
                continue;
            }
            let clean = ok(forward(&f.model, &t.prompt_tokens))?;
            let patched = ok(activation_patch_entries(&f.model, t, s, &[head], &[t.end_pos()]))?;
            let before = ok(eval_metrics(&clean, t, None, None))?.logprob;
            let after = ok(eval_metrics(&patched.logits, t, None, None))?.logprob;
            worst = worst.max((after - before).abs());
            pairs += 1;
        }
    }
    ensure(pairs > 0, || "no patchable pairs".into())?;
    ensure(worst < TOL, || format!("logprob moved by {worst:e}"))?;
    Ok(format!("{pairs} subject pairs, max |Δ logprob(a)| {worst:.2e}"))
}

fn edge_ablation(samples: &[Sample]) -> Outcome {
    let mut worst: f64 = 0.0;
    for s in samples {
        let trace = ok(traced_forward(&s.model, &s.tokens, None))?;
        let positions: Vec<usize> = (0..trace.len()).collect();
        let out = ok(direct_path_ablation(
            &s.model,
            &trace,
            &all_components(&s.model),
            Some(&positions),
        ))?;
        worst = worst.max(out.data().iter().fold(0.0, |m, x| m.max(x.abs())));
    }
    ensure(worst <= TOL, || format!("residual logits {worst:e}"))?;

    let f = ok(build_fixture(&FixtureSpec::new(FixtureKind::SubjectHead, 0)))?;
    let head = f.truth.component(Role::Subject).ok_or("planted head missing")?;
    let mut min_increase = f64::INFINITY;
    for e in &f.entries {
        let trace = ok(traced_forward(&f.model, &e.prompt_tokens, None))?;
        let ablated = ok(direct_path_ablation(&f.model, &trace, &[head], None))?;
        let before = ok(eval_metrics(&trace.logits, e, None, None))?.loss;
        let after = ok(eval_metrics(&ablated, e, None, None))?.loss;
        ensure(after > before, || format!("`{}`: loss {before} → {after}", e.prompt))?;
        min_increase = min_increase.min(after - before);
    }
    Ok(format!(
        "all-removed max |logit| {worst:.2e}; planted head removal raises loss on every entry (min +{min_increase:.3})"
    ))
}

fn intervention_invariants(samples: &[Sample]) -> Outcome {
    let mut max_row_err: f64 = 0.0;
    let mut cells = 0usize;
    for (k, s) in samples.iter().enumerate() {
        let t = s.tokens.len();
        if t < 2 {
            continue;
        }
        let dest: Vec<usize> = (t / 2..t).collect();
        let src: Vec<usize> = (0..t / 2).collect();
        let block = AttnBlock {
            dest: dest.clone(),
            src: src.clone(),
            layers: None,
            mode: KnockoutMode::PreSoftmax,
        };
        let once = InterventionSet::new().block(block.clone());
        let twice = InterventionSet::new().block(block.clone()).block(block);
        let a = ok(traced_forward(&s.model, &s.tokens, Some(&once)))?;
        let b = ok(traced_forward(&s.model, &s.tokens, Some(&twice)))?;
        ensure(a.logits == b.logits && a.attn_prob == b.attn_prob, || {
            format!("model {k}: blocking twice differs from once")
        })?;
        for heads in &a.attn_prob {
            for p in heads {
                for &d in &dest {
                    for &sp in &src {
                        ensure(p.get(d, sp) == 0.0, || {
                            format!("model {k}: blocked cell ({d},{sp}) nonzero")
                        })?;
                        cells += 1;
                    }
                    let row: f64 = (0..=d).map(|j| p.get(d, j)).sum();
                    max_row_err = max_row_err.max((row - 1.0).abs());
                }
            }
        }

        // Patching every component with its own clean output is a no-op.
        let clean = ok(traced_forward_with(&s.model, &s.tokens, None, SourceRecording::None))?;
        let mut hooks = InterventionSet::new();
        for c in all_components(&s.model)
            .into_iter()
            .filter(|c| !matches!(c, ComponentId::Embed | ComponentId::Bias))
        {
            let reps = (0..t)
                .map(|p| (p, additive_recall::attribution::component_output(&clean, c, p)))
                .collect();
            hooks = hooks.patch(c, reps);
        }
        let patched = ok(traced_forward(&s.model, &s.tokens, Some(&hooks)))?;
        let same = patched
            .logits
            .data()
            .iter()
            .zip(clean.logits.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same, || format!("model {k}: no-op patch changed logits"))?;
    }
    ensure(max_row_err <= 1e-12, || format!("row sums off by {max_row_err:e}"))?;
    Ok(format!(
        "idempotent and bit-exact; {cells} blocked cells exactly 0; row sums within {max_row_err:.1e}"
    ))
}

fn main() {
    let start = Instant::now();
    let samples = samples();
    type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let criteria: Vec<(&str, Check)> = vec![
        ("decomposition completeness", Box::new(|| completeness(&samples))),
        ("source-sum identity", Box::new(|| source_sum(&samples))),
        ("logit-lens endpoint", Box::new(|| lens_endpoint(&samples))),
        ("fixture oracle", Box::new(fixture_oracle)),
        ("classifier correctness", Box::new(classifier)),
        ("additivity detector", Box::new(additivity)),
        ("knockout structure", Box::new(knockout)),
        ("patching neutrality", Box::new(patching)),
        ("edge ablation", Box::new(|| edge_ablation(&samples))),
        (
            "intervention invariants",
            Box::new(|| intervention_invariants(&samples)),
        ),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {:>2} {name}: PASS — {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL — {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {}/{} passed in {:.1}s",
        criteria.len() - failed,
        criteria.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
