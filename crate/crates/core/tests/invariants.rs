//! Property checks over arbitrary inputs for the invariants the rest of the
//! workspace leans on.

use gauntlet_core::detect::DetectorHandle;
use gauntlet_core::metrics::{compute_metrics, ConfusionCounts, EvasionCurve};
use gauntlet_core::ngram::{extract_features, fnv1a64};
use gauntlet_core::occlude::{occlusion_search, ByteSource, OcclusionConfig, TieBreak};
use gauntlet_core::pe::{compute_pe_checksum, parse_pe, serialize, Label, RawBinary};
use gauntlet_core::synth::{build_pe, SynthSpec};
use proptest::prelude::*;

proptest! {
    /// The checksum must not depend on what currently sits in its own field,
    /// or writing a computed checksum back would invalidate it.
    #[test]
    fn checksum_ignores_its_own_field(
        bytes in proptest::collection::vec(any::<u8>(), 8..512),
        field in any::<[u8; 4]>(),
        at in any::<prop::sample::Index>(),
    ) {
        let at = at.index(bytes.len() - 4);
        let base = compute_pe_checksum(&bytes, at).unwrap();
        let mut patched = bytes.clone();
        patched[at..at + 4].copy_from_slice(&field);
        prop_assert_eq!(compute_pe_checksum(&patched, at).unwrap(), base);
    }

    /// Whatever the detector says, the search may only ever return a
    /// beta-bounded window inside the file.
    #[test]
    fn search_window_stays_inside_the_file(
        seed in any::<u64>(),
        len_exp in 10usize..15,
        jitter in 0usize..511,
        beta_exp in 4usize..10,
    ) {
        let len = (1usize << len_exp) + jitter;
        let beta = 1usize << beta_exp;
        let det = DetectorHandle::new(
            "content-hash",
            Box::new(|b: &[u8]| (fnv1a64(b) % 1024) as f64 / 1023.0),
        );
        let bytes: Vec<u8> = (0..len).map(|i| (seed as usize ^ i.wrapping_mul(31)) as u8).collect();
        let cfg = OcclusionConfig {
            beta,
            tie_break: TieBreak::Left,
            source: ByteSource::RandomUniform { seed },
        };
        let out = occlusion_search(&bytes, &det, &cfg, 1.0).unwrap();
        prop_assert!(out.start < out.end);
        prop_assert!(out.end <= len);
        let window = out.end - out.start;
        prop_assert!(window <= beta, "window {window} exceeds beta {beta}");
        prop_assert!(window >= beta / 2, "window {window} collapsed below beta/2");
    }

    /// Every seed-sampled file must survive parse + serialize byte for byte.
    #[test]
    fn sampled_builds_roundtrip(seed in any::<u64>()) {
        let built = build_pe(&SynthSpec::sampled(seed));
        let pe = parse_pe(RawBinary::new(built.bytes, Label::Unknown, "prop").unwrap()).unwrap();
        let out = serialize(&pe).unwrap();
        prop_assert_eq!(out.as_slice(), pe.bytes());
    }

    #[test]
    fn features_are_sorted_deduplicated_bucket_ids(
        bytes in proptest::collection::vec(any::<u8>(), 0..256),
        n in 1u32..8,
        buckets_exp in 4u32..20,
    ) {
        let buckets = 1u64 << buckets_exp;
        let feats = extract_features(&bytes, n, buckets);
        prop_assert!(feats.iter().all(|&f| f < buckets));
        prop_assert!(feats.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(feats.len() <= bytes.len().saturating_sub(n as usize - 1));
        prop_assert_eq!(feats.is_empty(), bytes.len() < n as usize);
    }

    #[test]
    fn confusion_percentages_complement(
        tp in 0u64..5000,
        fn_ in 0u64..5000,
        tn in 0u64..5000,
        fp in 0u64..5000,
    ) {
        let n_mal = tp + fn_;
        let n_ben = tn + fp;
        prop_assume!(n_mal > 0 && n_ben > 0);
        let counts = ConfusionCounts {
            true_pos: tp,
            false_neg: fn_,
            true_neg: tn,
            false_pos: fp,
        };
        let m = compute_metrics(&counts, n_mal, n_ben).unwrap();
        prop_assert!((m.tp_pct + m.fn_pct - 100.0).abs() < 1e-9);
        prop_assert!((m.tn_pct + m.fp_pct - 100.0).abs() < 1e-9);
        let expect = 100.0 * (tp + tn) as f64 / (n_mal + n_ben) as f64;
        prop_assert!((m.accuracy_pct - expect).abs() < 1e-9);
    }

    /// Cumulative evasion counts may never decrease with a larger step
    /// budget, and the bookkeeping must balance.
    #[test]
    fn curves_stay_monotone_and_balanced(
        steps in proptest::collection::vec(proptest::option::of(1u32..=10), 0..200),
    ) {
        let mut curve = EvasionCurve::new("prop".into(), 10);
        let mut evaded = 0u64;
        for s in &steps {
            curve.record_chain(*s);
            if s.is_some() {
                evaded += 1;
            }
        }
        prop_assert!(curve.evaded_by.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*curve.evaded_by.last().unwrap(), evaded);
        prop_assert_eq!(curve.total(), steps.len() as u64);
        prop_assert_eq!(curve.survived, steps.len() as u64 - evaded);
    }
}
