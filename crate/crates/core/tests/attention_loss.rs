//! Attention loss against an independent index-by-index oracle.

use proptest::prelude::*;
use sefi_core::attention_probe::{attention_loss, AttentionMapStack, LossOption, MapSource};

const H: usize = 2;
const L: usize = 8;
const S: usize = 8;

fn oracle(a: &AttentionMapStack, b: &AttentionMapStack, l_range: std::ops::Range<usize>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for h in 0..H {
        for l in l_range.clone() {
            for y in 0..S {
                for x in 0..S {
                    let d = a.get(h, l, y, x) - b.get(h, l, y, x);
                    sum += d * d;
                    n += 1;
                }
            }
        }
    }
    sum / n as f64
}

fn stack(values: Vec<f64>) -> AttentionMapStack {
    AttentionMapStack::from_data(H, L, S, MapSource::Target, values).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn matches_scalar_loops(
        a in prop::collection::vec(0.0..1.0f64, H * L * S * S),
        b in prop::collection::vec(0.0..1.0f64, H * L * S * S),
        slot in 0..L,
        prompt_len in 1..=L,
    ) {
        let (a, b) = (stack(a), stack(b));
        let full = attention_loss(&a, &b, LossOption::Full, slot, prompt_len).unwrap();
        prop_assert!((full - oracle(&a, &b, 0..L)).abs() < 1e-10);
        let one = attention_loss(&a, &b, LossOption::SlotOnly, slot, prompt_len).unwrap();
        prop_assert!((one - oracle(&a, &b, slot..slot + 1)).abs() < 1e-10);
        let two = attention_loss(&a, &b, LossOption::PromptLength, slot, prompt_len).unwrap();
        prop_assert!((two - oracle(&a, &b, 0..prompt_len)).abs() < 1e-10);
        prop_assert_eq!(attention_loss(&a, &a, LossOption::Full, slot, prompt_len).unwrap(), 0.0);
        prop_assert!(full >= 0.0);
    }
}
