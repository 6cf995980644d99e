// SPDX-License-Identifier: MIT OR Apache-2.0

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use additive_recall::attribution::{all_components, center, dla, linearize, ComponentId, LnFreeze};
use additive_recall::fixtures::{build_fixture, random_bundle, FixtureKind, FixtureSpec, RandomDims};
use additive_recall::interventions::{direct_path_ablation, AttnBlock, InterventionSet, KnockoutMode};
use additive_recall::model::{ModelBundle, TokenId};
use additive_recall::taxonomy::{detect_additivity, label_from, DEFAULT_SIMILARITY_THRESHOLD};
use additive_recall::trace::traced_forward;

fn sample(seed: u64) -> (ModelBundle, Vec<TokenId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = RandomDims::sample(&mut rng, 3, 3, 24, 8);
    let model = random_bundle(seed, &dims);
    let t = rng.gen_range(1..=dims.max_seq);
    let tokens = (0..t).map(|_| rng.gen_range(0..dims.vocab_size)).collect();
    (model, tokens)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter()
        .zip(b)
        .all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn label_is_scale_invariant(s in -50.0..50.0f64, r in -50.0..50.0f64, k in 0.01..100.0f64) {
        // Powers of two keep the ratio test exact.
        let k2 = 2f64.powi(k.log2().round() as i32);
        prop_assert_eq!(label_from(s, r), label_from(k2 * s, k2 * r));
    }

    #[test]
    fn mean_center_commutes_with_addition(v in prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64), 1..40)) {
        let (a, b): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let lhs = center(&sum);
        let rhs: Vec<f64> = center(&a).iter().zip(center(&b)).map(|(x, y)| x + y).collect();
        prop_assert!(close(&lhs, &rhs, 1e-12));
    }

    #[test]
    fn frozen_ln_is_linear(seed in 0u64..500, alpha in -3.0..3.0f64, scale_only in any::<bool>()) {
        let (model, tokens) = sample(seed);
        let trace = traced_forward(&model, &tokens, None).unwrap();
        let style = if scale_only { LnFreeze::ScaleOnly } else { LnFreeze::CenterScale };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let d = model.d_model();
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let combo: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + alpha * b).collect();
        let pos = trace.end_pos();
        let lhs = linearize(&model, &trace, pos, &combo, style);
        let lx = linearize(&model, &trace, pos, &x, style);
        let ly = linearize(&model, &trace, pos, &y, style);
        let rhs: Vec<f64> = lx.iter().zip(&ly).map(|(a, b)| a + alpha * b).collect();
        prop_assert!(close(&lhs, &rhs, 1e-10));
    }

    #[test]
    fn edge_ablation_is_linear(seed in 0u64..500, split in 0usize..64) {
        let (model, tokens) = sample(seed);
        let trace = traced_forward(&model, &tokens, None).unwrap();
        let comps = all_components(&model);
        let cut = split % (comps.len() + 1);
        let (a, b) = comps.split_at(cut);
        let both = direct_path_ablation(&model, &trace, &comps, None).unwrap();
        let only_a = direct_path_ablation(&model, &trace, a, None).unwrap();
        let only_b = direct_path_ablation(&model, &trace, b, None).unwrap();
        let end = trace.end_pos();
        let rhs: Vec<f64> = only_a.row(end).iter().zip(only_b.row(end)).zip(trace.logits.row(end))
            .map(|((x, y), z)| x + y - z).collect();
        prop_assert!(close(both.row(end), &rhs, 1e-10));
    }

    #[test]
    fn knockout_is_idempotent(seed in 0u64..500, cut in 0usize..16) {
        let (model, tokens) = sample(seed);
        let t = tokens.len();
        prop_assume!(t >= 2);
        let cut = 1 + cut % (t - 1);
        let block = AttnBlock {
            dest: (cut..t).collect(),
            src: (0..cut).collect(),
            layers: None,
            mode: KnockoutMode::PreSoftmax,
        };
        let once = traced_forward(&model, &tokens, Some(&InterventionSet::new().block(block.clone()))).unwrap();
        let twice = traced_forward(
            &model,
            &tokens,
            Some(&InterventionSet::new().block(block.clone()).block(block)),
        ).unwrap();
        prop_assert_eq!(once.logits, twice.logits);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn additivity_ignores_component_order(seed in 0u64..4, entry in 0usize..20, rot in 0usize..4) {
        let f = build_fixture(&FixtureSpec::new(FixtureKind::Composite, seed)).unwrap();
        let e = &f.entries[entry];
        let trace = traced_forward(&f.model, &e.prompt_tokens, None).unwrap();
        let comps = f.truth.components();
        let mut rotated = comps.clone();
        rotated.rotate_left(rot);
        let a = detect_additivity(&f.model, &trace, e, &comps, DEFAULT_SIMILARITY_THRESHOLD, &[]).unwrap();
        let b = detect_additivity(&f.model, &trace, e, &rotated, DEFAULT_SIMILARITY_THRESHOLD, &[]).unwrap();
        prop_assert_eq!(a.verdict, b.verdict);
        prop_assert_eq!(a.all_positive, b.all_positive);
        prop_assert_eq!(a.some_pair_dissimilar, b.some_pair_dissimilar);
        prop_assert_eq!(a.constructive.argmax_of_sum_is_a, b.constructive.argmax_of_sum_is_a);
    }
}

#[test]
fn div6_residues_enumerated() {
    // Every residue mod 6: only 0 gives a positive true − false gap.
    let f = build_fixture(&FixtureSpec::new(FixtureKind::Div6, 11)).unwrap();
    let v = &f.model.vocab;
    let (t, fa) = (v.id(" true").unwrap(), v.id(" false").unwrap());
    for n in 1..=36u32 {
        let tokens = v.tokenize(&n.to_string()).unwrap();
        let trace = traced_forward(&f.model, &tokens, None).unwrap();
        let diff = trace.logits.get(0, t) - trace.logits.get(0, fa);
        let want = match (n % 2 == 0, n % 3 == 0) {
            (true, true) => 0.5,
            (false, false) => -1.5,
            _ => -0.5,
        };
        assert!((diff - want).abs() < 1e-9, "{n}: {diff}");
        // Each circuit alone stays below the +1.5 bias.
        for h in 0..2 {
            let single = dla(&f.model, &trace, ComponentId::head(0, h), 0).unwrap();
            assert!(single.values[t] <= 1.0 + 1e-9);
        }
    }
}
