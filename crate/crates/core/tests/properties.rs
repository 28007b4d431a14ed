use facerel_core::attribute::masked_attr_loss;
use facerel_core::data::{batch_iter, spatial_cues, FaceBox};
use facerel_core::kmeans::{kmeans, squared_distance};
use facerel_core::metrics::{balanced_accuracy, smooth_profile, ConfusionCounts, TraitProfile, TraitReport};
use facerel_core::Tensor;
use proptest::prelude::*;

fn counts() -> impl Strategy<Value = ConfusionCounts> {
    (1u64..5000, 1u64..5000)
        .prop_flat_map(|(p, n)| (Just(p), Just(n), 0..=p, 0..=n))
        .prop_map(|(p, n, tp, tn)| ConfusionCounts::new(p, n, tp, tn).unwrap())
}

proptest! {
    #[test]
    fn ba_is_invariant_to_count_scaling(c in counts(), k in 1u64..50) {
        let scaled = ConfusionCounts::new(c.positives * k, c.negatives * k, c.true_positives * k, c.true_negatives * k).unwrap();
        prop_assert_eq!(balanced_accuracy(&c), balanced_accuracy(&scaled));
    }

    #[test]
    fn ba_bounded_and_complement(c in counts()) {
        let ba = balanced_accuracy(&c).unwrap();
        prop_assert!((0.0..=1.0).contains(&ba));
        let flipped = ConfusionCounts::new(c.positives, c.negatives, c.positives - c.true_positives, c.negatives - c.true_negatives).unwrap();
        prop_assert!((balanced_accuracy(&flipped).unwrap() - (1.0 - ba)).abs() < 1e-12);
    }

    #[test]
    fn report_ignores_sample_order(
        rows in prop::collection::vec((prop::collection::vec(0.0f64..1.0, 3), prop::collection::vec(any::<bool>(), 3)), 1..80),
        seed in any::<u64>(),
    ) {
        let names = ["a", "b", "c"];
        let (p, l): (Vec<_>, Vec<_>) = rows.iter().cloned().unzip();
        let base = TraitReport::from_binary(&names, &p, &l, 0.5).unwrap();
        let mut shuffled = rows.clone();
        let n = shuffled.len();
        for i in 0..n {
            let j = (seed.rotate_left(i as u32) as usize ^ i) % n;
            shuffled.swap(i, j);
        }
        let (p2, l2): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
        prop_assert_eq!(base, TraitReport::from_binary(&names, &p2, &l2, 0.5).unwrap());
    }

    #[test]
    fn smoothing_preserves_length_and_window_bounds(
        probs in prop::collection::vec(0.0f64..=1.0, 1..60),
        half in 0usize..6,
    ) {
        let window = 2 * half + 1;
        let frames: Vec<u64> = (0..probs.len() as u64).map(|f| 3 * f + 1).collect();
        let profile = TraitProfile::new(frames.clone(), probs.clone()).unwrap();
        let s = smooth_profile(&profile, window).unwrap();
        prop_assert_eq!(&s.frames, &frames);
        prop_assert_eq!(s.probabilities.len(), probs.len());
        for (i, &v) in s.probabilities.iter().enumerate() {
            let win = &probs[i.saturating_sub(half)..=(i + half).min(probs.len() - 1)];
            let lo = win.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = win.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= v && v <= hi);
        }
        let constant = TraitProfile::new(frames, vec![probs[0]; probs.len()]).unwrap();
        prop_assert!(smooth_profile(&constant, window).unwrap().probabilities.iter().all(|&v| v == probs[0]));
    }

    #[test]
    fn batches_cover_every_index_once(len in 0usize..300, batch in 1usize..40, seed in any::<u64>(), epoch in 0u64..5) {
        let batches = batch_iter(len, batch, seed, epoch).unwrap();
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..len).collect::<Vec<_>>());
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= batch));
        prop_assert_eq!(batches, batch_iter(len, batch, seed, epoch).unwrap());
    }

    #[test]
    fn spatial_cues_of_a_box_with_itself(x in 0.0f64..100.0, y in 0.0f64..50.0, w in 0.05f64..0.5, h in 0.05f64..0.5) {
        let b = FaceBox { x, y, w, h };
        let cues = spatial_cues(&b, &b, (200, 100)).unwrap();
        prop_assert_eq!(&cues[0..4], &cues[4..8]);
        prop_assert_eq!(&cues[8..], &[0.0, 0.0, 1.0][..]);
        prop_assert_eq!(cues[0], x / 200.0);
        prop_assert_eq!(cues[1], y / 100.0);
    }

    #[test]
    fn spatial_offsets_scale_with_the_left_box(dx in -40.0f64..40.0, w in 0.05f64..0.5) {
        let left = FaceBox { x: 100.0, y: 20.0, w, h: 0.3 };
        let right = FaceBox { x: 100.0 + dx, y: 20.0, w: 0.2, h: 0.3 };
        let cues = spatial_cues(&left, &right, (400, 100)).unwrap();
        prop_assert!((cues[8] * w - (-dx / 400.0)).abs() < 1e-12);
        prop_assert!((cues[10] - w / 0.2).abs() < 1e-12);
    }

    #[test]
    fn kmeans_objective_monotone_and_assignments_nearest(
        pts in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 4..60),
        k in 1usize..5,
        seed in any::<u64>(),
    ) {
        let km = kmeans(&pts, k.min(pts.len()), seed, 50).unwrap();
        prop_assert!(km.objective.windows(2).all(|w| w[1] <= w[0]));
        if km.converged {
            for (p, &a) in pts.iter().zip(&km.assignments) {
                let own = squared_distance(p, &km.centroids[a]);
                prop_assert!(km.centroids.iter().all(|c| own <= squared_distance(p, c)));
            }
        }
    }

    #[test]
    fn missing_labels_get_zero_gradient(
        entries in prop::collection::vec((-8.0f64..8.0, prop::option::of(any::<bool>())), 1..20),
    ) {
        let (logits, labels): (Vec<f64>, Vec<Option<bool>>) = entries.into_iter().unzip();
        let (loss, grad) = masked_attr_loss(&logits, &labels).unwrap();
        let present: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
        for (i, l) in labels.iter().enumerate() {
            if l.is_none() {
                prop_assert_eq!(grad[i], 0.0);
            }
        }
        let kept_logits: Vec<f64> = present.iter().map(|&i| logits[i]).collect();
        let kept_labels: Vec<Option<bool>> = present.iter().map(|&i| labels[i]).collect();
        prop_assert_eq!(loss, masked_attr_loss(&kept_logits, &kept_labels).unwrap().0);
    }

    #[test]
    fn tensor_rejects_mismatched_length(dims in prop::collection::vec(1usize..5, 1..4), extra in 1usize..3) {
        let n: usize = dims.iter().product();
        prop_assert!(Tensor::new(dims.clone(), vec![0.0; n]).is_ok());
        prop_assert!(Tensor::new(dims, vec![0.0; n + extra]).is_err());
    }
}
