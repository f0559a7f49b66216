//! Metric aggregation and parameter accounting.

use proptest::prelude::*;
use sefi_core::checkpoint::{BackendSnapshot, Checkpoint, LossSummary};
use sefi_core::evaluator::{aggregate, count_parameters, id_prompt_score, SampleScores};
use sefi_core::token_expander::{init_expander, parameter_layout, IdToken};
use sefi_core::trainer::TrainConfig;

fn checkpoint(d_text: usize, n_pairs: usize) -> Checkpoint {
    let snapshot = BackendSnapshot {
        name: "test".into(),
        d_text,
        d_cond: d_text,
        text_len: 77,
        total_steps: 1000,
    };
    let id = IdToken::new(vec![0.01; d_text], "person");
    Checkpoint::new(
        snapshot,
        TrainConfig::default(),
        init_expander(d_text, n_pairs, 0).unwrap(),
        id,
        0,
        LossSummary::default(),
    )
    .unwrap()
}

#[test]
fn trainable_counts() {
    assert_eq!(count_parameters(&checkpoint(768, 5)).trainable, 7680);
    assert_eq!(count_parameters(&checkpoint(16, 5)).trainable, 160);
}

#[test]
fn added_count_matches_shape_sum() {
    for (d, n) in [(16, 5), (16, 1), (32, 10), (768, 5)] {
        let oracle: usize = parameter_layout(d, n).iter().map(|(_, (r, c))| r * c).sum();
        assert_eq!(count_parameters(&checkpoint(d, n)).added, oracle);
    }
    // 2nd + 2 * (4d^2 + 4d) + (d*4d + 4d + 4d*d + d)
    assert_eq!(
        count_parameters(&checkpoint(16, 5)).added,
        160 + 2 * (1024 + 64) + 2048 + 80
    );
}

/// Ten images whose means are 0.2613 (prompt), 0.1345 (ID) and 0.0937
/// (ID gated by prompt >= 0.23): three fall below the threshold.
#[test]
fn gated_set_reproduces_reported_means() {
    let mut scores = Vec::new();
    for _ in 0..3 {
        scores.push(SampleScores {
            prompt: 0.20,
            id: 0.408 / 3.0,
            detected: true,
        });
    }
    for _ in 0..7 {
        scores.push(SampleScores {
            prompt: (2.613 - 0.60) / 7.0,
            id: 0.937 / 7.0,
            detected: true,
        });
    }
    let r = aggregate(&scores, 0.23).unwrap();
    assert!((r.prompt_mean - 0.2613).abs() < 1e-12);
    assert!((r.id_mean - 0.1345).abs() < 1e-12);
    assert!((r.id_prompt_mean - 0.0937).abs() < 1e-12);
    assert!(r.id_prompt_mean < r.id_mean);
}

fn scores_strategy() -> impl Strategy<Value = Vec<SampleScores>> {
    prop::collection::vec(
        (0.0..0.5f64, -1.0..1.0f64, any::<bool>()).prop_map(|(prompt, id, detected)| {
            SampleScores {
                prompt,
                id: if detected { id } else { 0.0 },
                detected,
            }
        }),
        1..20,
    )
}

proptest! {
    #[test]
    fn gating_is_monotone_in_threshold(scores in scores_strategy(), a in 0.0..0.5f64, b in 0.0..0.5f64) {
        let nonneg: Vec<SampleScores> = scores
            .iter()
            .map(|s| SampleScores { id: s.id.abs(), ..*s })
            .collect();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let r_lo = aggregate(&nonneg, lo).unwrap();
        let r_hi = aggregate(&nonneg, hi).unwrap();
        prop_assert!(r_hi.id_prompt_mean <= r_lo.id_prompt_mean);
    }

    #[test]
    fn report_invariants(scores in scores_strategy(), threshold in 0.0..0.5f64) {
        let r = aggregate(&scores, threshold).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.detect_rate));
        let max_id = scores.iter().map(|s| s.id).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(r.id_prompt_mean <= max_id.max(0.0) + 1e-12);
        prop_assert_eq!(r, aggregate(&scores, threshold).unwrap());
        let gated: f64 = scores.iter().map(|s| id_prompt_score(s.prompt, s.id, threshold)).sum();
        prop_assert!((r.id_prompt_mean - gated / scores.len() as f64).abs() < 1e-12);
    }
}
