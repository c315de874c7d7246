use lomoe::data::accumulate_labels;
use lomoe::lora::LoraLinear;
use lomoe::train::{dice_score, seg_loss, DiceCounts};
use lomoe::{Rng, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn merged_dense_matches_the_stack(seed in 0u64..1000, experts in 1usize..4, d in 4usize..12) {
        let mut rng = Rng::new(seed);
        let mut lin = LoraLinear::random("p", d, d + 2, &mut rng).unwrap();
        for _ in 0..experts {
            lin.freeze_all();
            lin.add_adapter(2, &mut rng).unwrap();
            for v in lin.adapters_mut().last_mut().unwrap().b.value.data_mut() {
                *v = (rng.normal() * 0.2) as f32;
            }
        }
        let x = Tensor::randn([3, d + 2], &mut rng, 1.0).unwrap();
        let merged = lin.merged(experts).unwrap();
        prop_assert!(lin.apply(&x, experts).unwrap().max_abs_diff(&merged.apply(&x, 0).unwrap()) < 1e-5);
    }

    #[test]
    fn fresh_adapter_is_neutral(seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let mut lin = LoraLinear::random("p", 8, 8, &mut rng).unwrap();
        let x = Tensor::randn([4, 8], &mut rng, 1.0).unwrap();
        let before = lin.apply(&x, 0).unwrap();
        lin.add_adapter(2, &mut rng).unwrap();
        prop_assert!(before.bit_eq(&lin.apply(&x, 1).unwrap()));
    }

    #[test]
    fn dice_is_symmetric_and_bounded(a in prop::collection::vec(0u16..3, 1..64), seed in 0u64..100) {
        let mut rng = Rng::new(seed);
        let b: Vec<u16> = a.iter().map(|_| rng.below(3) as u16).collect();
        for c in 0..3 {
            let d = dice_score(&a, &b, c).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(d, dice_score(&b, &a, c).unwrap());
        }
        prop_assert_eq!(dice_score(&a, &a, 1).unwrap(), 1.0);
    }

    #[test]
    fn pooled_counts_merge_like_concatenation(a in prop::collection::vec(0u16..3, 2..40)) {
        let b: Vec<u16> = a.iter().rev().copied().collect();
        let half = a.len() / 2;
        let mut split = DiceCounts::default();
        split.add(&a[..half], &b[..half], &[0, 1, 2]);
        let mut rest = DiceCounts::default();
        rest.add(&a[half..], &b[half..], &[0, 1, 2]);
        split.merge(&rest);
        let mut whole = DiceCounts::default();
        whole.add(&a, &b, &[0, 1, 2]);
        for c in 0..3 {
            prop_assert_eq!(split.dice(c), whole.dice(c));
        }
    }

    #[test]
    fn loss_is_non_negative(seed in 0u64..500) {
        let mut rng = Rng::new(seed);
        let n = 12;
        let logits = Tensor::randn([n, 3], &mut rng, 2.0).unwrap();
        let probs = logits.softmax(1).unwrap();
        let mask: Vec<u16> = (0..n).map(|_| rng.below(3) as u16).collect();
        prop_assert!(seg_loss(&probs, &mask, &[0, 1, 2]).unwrap() >= 0.0);
    }

    #[test]
    fn label_sets_only_grow(a in prop::collection::btree_set(1u16..20, 0..6), b in prop::collection::btree_set(1u16..20, 0..6)) {
        let a: Vec<u16> = std::iter::once(0).chain(a).collect();
        let fresh: Vec<u16> = std::iter::once(0).chain(b.iter().copied().filter(|c| !a.contains(c))).collect();
        let ab = accumulate_labels(&a, &fresh).unwrap();
        prop_assert!(a.iter().chain(&fresh).all(|c| ab.contains(c)));
        prop_assert_eq!(&ab[..a.len()], &a[..]);
        prop_assert_eq!(ab.len(), a.len() + fresh.len() - 1);
        let shared = b.iter().any(|c| a.contains(c));
        prop_assert_eq!(accumulate_labels(&a, &b.iter().copied().collect::<Vec<_>>()).is_err(), shared);
    }
}
