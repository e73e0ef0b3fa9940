//! Property tests for the module invariants that hold over whole input
//! families rather than single examples.

use ndarray::Array2;
use proptest::prelude::*;
use somnia_core::align::{align, expand};
use somnia_core::edf::SignalSpec;
use somnia_core::epoch::segment_epochs;
use somnia_core::eval::{confusion, metrics};
use somnia_core::lm::extract_stage;
use somnia_core::stage::{EpochLabel, Stage};

fn arbitrary_signal_spec() -> impl Strategy<Value = SignalSpec> {
    (
        -32768i32..0,
        1i32..32767,
        -500.0f64..-1.0,
        1.0f64..500.0,
        1usize..200,
    )
        .prop_map(|(dmin, dmax, pmin, pmax, spr)| SignalSpec {
            label: "EEG test".into(),
            transducer: String::new(),
            physical_dimension: "uV".into(),
            physical_min: pmin,
            physical_max: pmax,
            digital_min: dmin,
            digital_max: dmax,
            prefiltering: String::new(),
            samples_per_record: spr,
        })
}

proptest! {
    /// Calibration is affine, hits both endpoints exactly, and preserves
    /// order when the physical range is increasing.
    #[test]
    fn calibration_is_affine_and_monotone(spec in arbitrary_signal_spec()) {
        prop_assert_eq!(spec.to_physical(spec.digital_min as i16), spec.physical_min);
        prop_assert_eq!(spec.to_physical(spec.digital_max as i16), spec.physical_max);
        let lo = spec.to_physical(spec.digital_min as i16);
        let mid = spec.to_physical(((spec.digital_min + spec.digital_max) / 2) as i16);
        let hi = spec.to_physical(spec.digital_max as i16);
        prop_assert!(lo <= mid && mid <= hi);
    }

    /// Digital -> physical -> digital is the identity over the code range.
    #[test]
    fn calibration_round_trips_codes(spec in arbitrary_signal_spec(), code in -32768i32..=32767) {
        let code = code.clamp(spec.digital_min, spec.digital_max) as i16;
        prop_assert_eq!(spec.to_digital(spec.to_physical(code)), code);
    }

    /// Concatenating the emitted epochs reproduces a prefix of the
    /// label-filtered signal exactly.
    #[test]
    fn segmentation_partitions_the_prefix(
        len in 0usize..20_000,
        labels in proptest::collection::vec(0u8..6, 0..8),
    ) {
        let signal: Vec<f64> = (0..len).map(|i| i as f64 * 0.5).collect();
        let labels: Vec<EpochLabel> = labels
            .into_iter()
            .map(|v| match Stage::from_index(v as usize) {
                Some(stage) => EpochLabel::Stage(stage),
                None => EpochLabel::Excluded,
            })
            .collect();
        let fs = 100.0;
        let window = 3000usize;
        let epochs = segment_epochs(&signal, fs, &labels, "prop");

        let full_windows = len / window;
        let expected: usize = labels
            .iter()
            .take(full_windows)
            .filter(|l| l.stage().is_some())
            .count();
        prop_assert_eq!(epochs.len(), expected);
        for epoch in &epochs {
            let offset = epoch.epoch_index * window;
            prop_assert_eq!(&epoch.samples[..], &signal[offset..offset + window]);
        }
    }

    /// Every output row of expand equals the input row, for random D and p.
    #[test]
    fn expand_rows_equal_the_input(p in 1usize..64, d in 1usize..64, fill in -100.0f64..100.0) {
        let row = Array2::from_shape_fn((1, d), |(_, k)| fill + k as f64);
        let out = expand(&row, p).unwrap();
        prop_assert_eq!(out.nrows(), p);
        for r in 0..p {
            prop_assert_eq!(out.row(r), row.row(0));
        }
    }

    /// align output is always [P, D].
    #[test]
    fn align_shape_contract(p in 1usize..32, d in 1usize..32) {
        let h_v = Array2::from_elem((p, d), 0.5);
        let h_f = Array2::from_elem((1, d), -0.25);
        let fused = align(&h_v, &h_f).unwrap();
        prop_assert_eq!(fused.dim(), (p, d));
    }

    /// The extracted stage is always literally present in the text, and
    /// extraction never picks a token that appears before a later one.
    #[test]
    fn extraction_is_sound(words in proptest::collection::vec(0usize..8, 1..30)) {
        let vocabulary = ["wake", "n1", "n2", "n3", "rem", "the", "epoch", "shows"];
        let text: String = words.iter().map(|&w| vocabulary[w]).collect::<Vec<_>>().join(" ");
        match extract_stage(&text) {
            Ok(prediction) => {
                let token = prediction.label.name().to_lowercase();
                prop_assert!(text.contains(&token));
                // Nothing after the extraction site parses as a stage.
                let tail = &text[prediction.extraction_site + token.len()..];
                for later in ["wake", "n1", "n2", "n3", "rem"] {
                    prop_assert!(
                        !tail.split_whitespace().any(|w| w == later),
                        "later mention {later:?} ignored in {text:?}"
                    );
                }
            }
            Err(_) => {
                for stage_token in ["wake", "n1", "n2", "n3", "rem"] {
                    prop_assert!(!text.contains(stage_token));
                }
            }
        }
    }

    /// Permuting class order consistently leaves the scalar metrics alone,
    /// and appending a correct prediction never lowers accuracy.
    #[test]
    fn metric_symmetries(
        pairs in proptest::collection::vec((0usize..5, 0usize..5), 10..120),
        permutation_seed in 0u64..1000,
    ) {
        let truths: Vec<Stage> = pairs.iter().map(|&(t, _)| Stage::from_index(t).unwrap()).collect();
        let preds: Vec<Stage> = pairs.iter().map(|&(_, p)| Stage::from_index(p).unwrap()).collect();
        let cm = confusion(&truths, &preds).unwrap();
        let base = match metrics(&cm) {
            Ok(m) => m,
            Err(_) => return Ok(()), // degenerate single-cell case
        };

        // Permute the class alphabet consistently on both axes.
        let mut order: Vec<usize> = (0..5).collect();
        let mut state = permutation_seed;
        for i in (1..5).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (state >> 33) as usize % (i + 1));
        }
        let permute = |s: Stage| Stage::from_index(order[s.index()]).unwrap();
        let truths_p: Vec<Stage> = truths.iter().map(|&s| permute(s)).collect();
        let preds_p: Vec<Stage> = preds.iter().map(|&s| permute(s)).collect();
        let permuted = metrics(&confusion(&truths_p, &preds_p).unwrap()).unwrap();
        prop_assert!((base.accuracy - permuted.accuracy).abs() < 1e-12);
        prop_assert!((base.macro_f1 - permuted.macro_f1).abs() < 1e-12);
        prop_assert!((base.kappa - permuted.kappa).abs() < 1e-12);

        // Appending one correct prediction never decreases accuracy.
        let mut truths_plus = truths.clone();
        let mut preds_plus = preds.clone();
        truths_plus.push(Stage::N2);
        preds_plus.push(Stage::N2);
        let grown = metrics(&confusion(&truths_plus, &preds_plus).unwrap()).unwrap();
        prop_assert!(grown.accuracy >= base.accuracy - 1e-12);
    }
}
