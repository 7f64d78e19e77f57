use proptest::prelude::*;

use rollout_eval::annotation::{
    adjudicate, cohens_kappa, graded_accuracy, strict_accuracy, AdjudicatedLabel, RaterRole,
    Rating, RatingValue,
};
use rollout_eval::bridge::majority_vote;
use rollout_eval::ingest::{segment, ControlSample, Session, SessionMetadata, SourceKind};
use rollout_eval::metrics::{exact_match, rouge_f1, NgramMode};
use rollout_eval::prompt::{assemble, mask_span, PromptParams};
use rollout_eval::sampler::{apportion, sample_frames, target_counts, FrameSamplingPolicy, MixConfig};

fn session(frames: usize) -> Session {
    Session {
        session_id: "s".into(),
        frame_root: "/".into(),
        frames: (0..frames).map(|i| format!("{i}.png").into()).collect(),
        controls: (0..frames as u64)
            .map(|t| ControlSample {
                timestep: t,
                stick_x: 0.0,
                stick_y: 1.0,
                buttons: Default::default(),
                elevation_delta: None,
            })
            .collect(),
        metadata: SessionMetadata {
            character_id: Some("char_01".into()),
            environment_id: "A".into(),
            source_kind: SourceKind::HumanGameplay,
            rollout_flags: None,
        },
        fps: 10,
    }
}

fn rating_value() -> impl Strategy<Value = RatingValue> {
    prop_oneof![
        Just(RatingValue::Correct),
        Just(RatingValue::Partial),
        Just(RatingValue::Incorrect),
        Just(RatingValue::Unclear),
    ]
}

fn rating(annotator: &str, value: RatingValue) -> Rating {
    Rating {
        packet_id: "p".into(),
        annotator_id: annotator.into(),
        value,
        comment: None,
        timestamp: 0,
        role: RaterRole::Primary,
    }
}

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "Jumping", "up", "  "]), 0..7)
        .prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn segmentation_partitions_prefix(frames in 1usize..200, length in 1usize..30) {
        let s = session(frames);
        match segment(&s, length) {
            Ok(clips) => {
                prop_assert_eq!(clips.len(), frames / length);
                for (k, c) in clips.iter().enumerate() {
                    prop_assert_eq!(c.start_index, k * length);
                    prop_assert_eq!(c.frames.len(), length);
                    prop_assert_eq!(c.controls[0].timestep, (k * length) as u64);
                }
            }
            Err(_) => prop_assert!(length > frames),
        }
    }

    #[test]
    fn uniform_spans_clip(length in 1usize..=64, n in 1usize..=64) {
        prop_assume!(n <= length);
        let idx = sample_frames(length, FrameSamplingPolicy::uniform(n)).unwrap();
        prop_assert_eq!(idx.len(), n);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(idx[0], 0);
        if n >= 2 {
            prop_assert_eq!(*idx.last().unwrap(), length - 1);
        }
    }

    #[test]
    fn first_n_is_prefix_chain(length in 1usize..=64, n in 1usize..=64) {
        prop_assume!(n < length);
        let a = sample_frames(length, FrameSamplingPolicy::first(n)).unwrap();
        let b = sample_frames(length, FrameSamplingPolicy::first(n + 1)).unwrap();
        prop_assert_eq!(&b[..n], &a[..]);
        prop_assert_eq!(a, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn apportion_sums_to_budget(
        alpha in 0.0f64..=1.0,
        b in 0.0f64..=1.0,
        m in 0.0f64..=1.0,
        budget in 0usize..5000,
    ) {
        let total = b + m + 1.0;
        let mix = MixConfig::new(alpha, b / total, m / total, 1.0 / total).unwrap();
        let counts = target_counts(&mix, budget);
        prop_assert_eq!(counts.iter().map(|c| c.count).sum::<usize>(), budget);
        for c in &counts {
            let quota = mix.weight(c.task, c.format) * budget as f64;
            prop_assert!((c.count as f64 - quota).abs() < 1.0 + 1e-6);
        }
    }

    #[test]
    fn apportion_raw_weights(ws in prop::collection::vec(0.0f64..1.0, 1..10), budget in 0usize..1000) {
        let sum: f64 = ws.iter().sum();
        prop_assume!(sum > 0.0);
        let norm: Vec<f64> = ws.iter().map(|w| w / sum).collect();
        prop_assert_eq!(apportion(budget, &norm).iter().sum::<usize>(), budget);
    }

    #[test]
    fn mask_matches_span(
        n in 1usize..12,
        p in 1usize..300,
        q in prop::collection::vec("[a-z]{1,6}", 1..12),
        a in prop::collection::vec("[a-z]{1,6}", 1..5),
        extra in 0usize..20,
    ) {
        let (q, a) = (q.join(" "), a.join(" "));
        let base = PromptParams { patches_per_frame: p, ..PromptParams::new(n, &q, Some(&a)) };
        let unpadded = assemble(&base).unwrap().len();
        let ps = assemble(&PromptParams { pad_to: Some(unpadded + extra), ..base }).unwrap();
        let (start, len) = mask_span(&ps).unwrap();
        prop_assert_eq!(ps.loss_mask.len(), ps.len());
        for (i, m) in ps.loss_mask.iter().enumerate() {
            prop_assert_eq!(*m, i >= start && i < start + len);
        }
        prop_assert_eq!(len, a.split_whitespace().count() + 1);
        prop_assert_eq!(ps.image_slot_count, n * p);
    }

    #[test]
    fn rouge_bounds_and_symmetry(x in text(), y in text(), n in 1usize..4) {
        for mode in [NgramMode::Set, NgramMode::Clipped] {
            let f = rouge_f1(&x, &y, n, mode).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert_eq!(f, rouge_f1(&y, &x, n, mode).unwrap());
            prop_assert!(f64::from(exact_match(&x, &y)) <= f);
        }
    }

    #[test]
    fn strict_never_exceeds_graded(values in prop::collection::vec(rating_value(), 1..60)) {
        let labels: Vec<AdjudicatedLabel> = values
            .iter()
            .map(|v| adjudicate(&rating("a", *v), &rating("b", *v), Some(&rating("c", *v))).unwrap())
            .collect();
        match (strict_accuracy(&labels), graded_accuracy(&labels)) {
            (Some(s), Some(g)) => prop_assert!(s <= g),
            (None, None) => prop_assert!(values.iter().all(|v| *v == RatingValue::Unclear)),
            other => prop_assert!(false, "mismatched availability {:?}", other),
        }
    }

    #[test]
    fn kappa_bounded(pairs in prop::collection::vec((rating_value(), rating_value()), 1..80)) {
        let (r1, r2): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let k = cohens_kappa(&r1, &r2).unwrap();
        prop_assert!((-1.0..=1.0).contains(&k), "kappa {}", k);
        prop_assert!((k - cohens_kappa(&r2, &r1).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn adjudication_symmetric(a in rating_value(), b in rating_value(), c in rating_value()) {
        let (r1, r2, r3) = (rating("a", a), rating("b", b), rating("c", c));
        let one = adjudicate(&r1, &r2, Some(&r3)).unwrap();
        let two = adjudicate(&r2, &r1, Some(&r3)).unwrap();
        prop_assert_eq!(one.final_value, two.final_value);
        prop_assert_eq!(one.path, two.path);
    }

    #[test]
    fn vote_ignores_order(
        texts in prop::collection::vec(prop::sample::select(vec!["yes", "no", "maybe"]), 1..9),
        seed in any::<u64>(),
        swap in any::<prop::sample::Index>(),
    ) {
        let texts: Vec<String> = texts.into_iter().map(String::from).collect();
        let mut permuted = texts.clone();
        permuted.reverse();
        let k = swap.index(permuted.len());
        permuted.swap(0, k);
        prop_assert_eq!(majority_vote(&texts, seed).unwrap(), majority_vote(&permuted, seed).unwrap());
    }
}
