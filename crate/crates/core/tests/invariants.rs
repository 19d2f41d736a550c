//! Cross-module invariants: an end-to-end finite-difference check of the
//! full training loss, and property tests over the sampling, labeling and
//! scoring primitives.

use asmloc_core::data::{generate_synthetic, SyntheticConfig};
use asmloc_core::gradcheck::finite_difference_report;
use asmloc_core::model::{forward, init_params, ForwardOptions, ModelConfig};
use asmloc_core::optim::ParameterStore;
use asmloc_core::proposals::build_pseudo_labels;
use asmloc_core::segment::{build_sampling_plan, ActionProposal};
use asmloc_core::tape::Tape;
use asmloc_core::train::training_loss;

use proptest::prelude::*;

fn tiny_model() -> ModelConfig {
    let mut cfg = ModelConfig::new(3, 4);
    cfg.embed_dim = 4;
    cfg.heads = 2;
    cfg.gamma = 4.0;
    cfg
}

fn tiny_video() -> asmloc_core::data::VideoRecord {
    let cfg = SyntheticConfig {
        num_classes: 3,
        feature_dim: 4,
        num_videos: 1,
        snippets_range: (12, 12),
        segments_range: (2, 2),
        bucket_weights: [1.0, 1.0, 0.0, 0.0, 0.0],
        class_separation: 3.0,
        noise_scale: 0.8,
        seed: 17,
        ..SyntheticConfig::default()
    };
    generate_synthetic(&cfg).unwrap().0.remove(0)
}

/// Nudge every parameter away from its init so that zero-initialized
/// layers still carry gradient through the check.
fn jitter(store: &mut ParameterStore) {
    let mut i = 0u64;
    for (name, tensor) in store.export() {
        let mut t = tensor;
        for v in t.data_mut() {
            i = i.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v += 0.08 * (((i >> 33) as f64 / (1u64 << 31) as f64) - 0.5);
        }
        store.set_value(&name, t).unwrap();
    }
}

fn check_path(proposals: &[ActionProposal], opts: ForwardOptions, with_instance: bool) {
    let cfg = tiny_model();
    let video = tiny_video();
    let mut store = init_params(&cfg, 2).unwrap();
    jitter(&mut store);

    let mut tape = Tape::new();
    let (loss, params) = training_loss(
        &mut tape,
        &store,
        &cfg,
        &video,
        proposals,
        opts,
        with_instance,
    )
    .unwrap();
    tape.backward(loss).unwrap();
    store.accumulate_from(&tape, params.bindings()).unwrap();

    let mut loss_fn = |s: &ParameterStore| {
        let mut t = Tape::new();
        let (l, _) = training_loss(&mut t, s, &cfg, &video, proposals, opts, with_instance)?;
        t.value(l).item()
    };
    let report = finite_difference_report(&mut store, &mut loss_fn, 1e-5).unwrap();
    assert!(
        report.passes(1e-4),
        "max rel err {} in groups {:?}",
        report.max_rel_err,
        report
            .groups
            .iter()
            .filter(|g| g.max_rel_err >= 1e-4)
            .map(|g| (g.name.clone(), g.max_rel_err))
            .collect::<Vec<_>>()
    );
}

#[test]
fn base_path_gradients_match_finite_differences() {
    check_path(&[], ForwardOptions::base_only(), false);
}

#[test]
fn full_path_gradients_match_finite_differences() {
    let proposals = [
        ActionProposal { start: 1, end: 4, class: 1 },
        ActionProposal { start: 7, end: 10, class: 2 },
    ];
    let opts = ForwardOptions {
        use_dss: true,
        use_attention_modules: true,
    };
    check_path(&proposals, opts, true);
}

// ── property tests ──────────────────────────────────────────────────────

/// Random non-degenerate proposals inside a T-snippet timeline.
fn proposals_strategy(t: usize) -> impl Strategy<Value = Vec<ActionProposal>> {
    prop::collection::vec(
        (0..t - 1, 1usize..=6, 1usize..=3).prop_map(move |(s, len, class)| ActionProposal {
            start: s,
            end: (s + len).min(t),
            class,
        }),
        0..5,
    )
}

proptest! {
    #[test]
    fn sampling_positions_stay_in_bounds_and_monotone(
        props in proposals_strategy(24),
        gamma in 1.0f64..12.0,
    ) {
        let plan = build_sampling_plan(&props, 24, gamma).unwrap();
        prop_assert_eq!(plan.positions.len(), 24);
        for w in plan.positions.windows(2) {
            prop_assert!(w[0] <= w[1] + 1e-12);
        }
        for &p in &plan.positions {
            prop_assert!((0.0..=23.0).contains(&p));
        }
        // weights never drop below the uniform baseline
        for &w in &plan.weights {
            prop_assert!(w >= 1.0);
        }
        // remapped proposals stay valid
        for p in &plan.remapped {
            prop_assert!(p.start < p.end && p.end <= 24);
        }
    }

    #[test]
    fn pseudo_label_rows_always_normalize(props in proposals_strategy(20)) {
        let q = build_pseudo_labels(&props, 20, 3).unwrap();
        for ti in 0..20 {
            let s: f64 = q.row(ti).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_rows_are_distributions_for_random_features(
        seed in 0u64..500,
        t in 4usize..16,
    ) {
        let cfg = tiny_model();
        let store = init_params(&cfg, seed).unwrap();
        let data: Vec<f64> = (0..t * 4)
            .map(|i| ((i as f64 * 0.61 + seed as f64) % 7.0) - 3.5)
            .collect();
        let features = asmloc_core::Tensor::matrix(t, 4, data).unwrap();
        let mut tape = Tape::new();
        let (out, _) = forward(
            &mut tape,
            &store,
            &cfg,
            &features,
            &[],
            ForwardOptions::base_only(),
        )
        .unwrap();
        let a = tape.value(out.attention);
        for i in 0..t {
            let s: f64 = a.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
