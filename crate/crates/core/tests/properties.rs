use proptest::prelude::*;
use ume::diar::{bce_cost_matrix, permute_columns};
use ume::encoder::softmax_weights;
use ume::metrics::{der, edit_counts, wer_optimal_perm, DerConfig};
use ume::perm::{best_assignment, permutations};
use ume_tensor::Tensor;

fn matrix(c: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, c), c)
}

fn binary_tracks(t: usize, c: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(any::<bool>(), t * c)
        .prop_map(move |b| Tensor::new(vec![t, c], b.into_iter().map(|v| v as u8 as f64).collect()).unwrap())
}

proptest! {
    #[test]
    fn best_assignment_is_the_minimum(cost in (1usize..=4).prop_flat_map(matrix)) {
        let (perm, best) = best_assignment(&cost).unwrap();
        let at = |p: &[usize]| p.iter().enumerate().map(|(c, &r)| cost[c][r]).sum::<f64>();
        prop_assert_eq!(at(&perm), best);
        for p in permutations(cost.len()) {
            prop_assert!(best <= at(&p));
        }
    }

    #[test]
    fn pit_bce_is_invariant_to_reference_order(
        (logits, labels, shift) in (1usize..=3).prop_flat_map(|c| (
            prop::collection::vec(-4.0f64..4.0, 12 * c).prop_map(move |v| Tensor::new(vec![12, c], v).unwrap()),
            binary_tracks(12, c),
            0..c,
        ))
    ) {
        let c = labels.cols();
        let rotation: Vec<usize> = (0..c).map(|i| (i + shift) % c).collect();
        let a = best_assignment(&bce_cost_matrix(&logits, &labels).unwrap()).unwrap().1;
        let b = best_assignment(&bce_cost_matrix(&logits, &permute_columns(&labels, &rotation)).unwrap()).unwrap().1;
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn fusion_weights_form_a_distribution(logits in prop::collection::vec(-30.0f64..30.0, 1..12)) {
        let w = softmax_weights(&logits);
        prop_assert!(w.iter().all(|&v| v >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn der_is_zero_for_perfect_output_and_shrinks_with_the_collar(
        (reference, pred) in (binary_tracks(40, 2), binary_tracks(40, 2))
    ) {
        let cfg = |collar_s| DerConfig { collar_s, median_frames: 1, threshold: 0.5, frame_s: 0.1 };
        prop_assert_eq!(der(&reference, &reference, &cfg(0.0)).unwrap().der, 0.0);
        let mut last = f64::INFINITY;
        for collar in [0.0, 0.05, 0.15, 0.4] {
            let d = der(&pred, &reference, &cfg(collar)).unwrap().der;
            prop_assert!(d <= last || (d.is_infinite() && last.is_infinite()));
            last = d;
        }
    }

    #[test]
    fn edit_distance_is_symmetric_in_total(
        a in prop::collection::vec(0usize..5, 0..10),
        b in prop::collection::vec(0usize..5, 0..10),
    ) {
        prop_assert_eq!(edit_counts(&a, &b).total(), edit_counts(&b, &a).total());
        prop_assert_eq!(edit_counts(&a, &a).total(), 0);
    }

    #[test]
    fn wer_ignores_hypothesis_order(
        refs in prop::collection::vec(prop::collection::vec(0usize..5, 1..8), 2..=3),
        hyps in prop::collection::vec(prop::collection::vec(0usize..5, 0..8), 3),
    ) {
        let hyps = &hyps[..refs.len()];
        let mut reversed = hyps.to_vec();
        reversed.reverse();
        let a = wer_optimal_perm(hyps, &refs).unwrap();
        let b = wer_optimal_perm(&reversed, &refs).unwrap();
        prop_assert_eq!(a.wer, b.wer);
        prop_assert_eq!(wer_optimal_perm(&refs, &refs).unwrap().wer, 0.0);
    }
}
