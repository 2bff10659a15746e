use proptest::prelude::*;
use tnet_core::losses::{dice_loss_value, DICE_EPS};
use tnet_core::metrics::{dice_score, hausdorff95, s_score};
use tnet_core::synth::split;
use tnet_core::trainer::{denormalize_center, normalize_center};
use tnet_core::{tns, Graph, Mask, Tensor};

fn mask_pair() -> impl Strategy<Value = (Mask, Mask)> {
    (1usize..=16, 1usize..=16).prop_flat_map(|(w, h)| {
        (
            prop::collection::vec(any::<bool>(), w * h),
            prop::collection::vec(any::<bool>(), w * h),
        )
            .prop_map(move |(a, b)| {
                let to_mask = |v: &[bool]| Mask::new(w, h, v.iter().map(|&x| x as u8).collect()).unwrap();
                (to_mask(&a), to_mask(&b))
            })
    })
}

fn graph_dice(p: &[f64], t: &[f64], n: usize) -> f64 {
    let shape = [1, 1, n, p.len() / n];
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::new(&shape, p.to_vec()).unwrap());
    let b = g.constant(Tensor::new(&shape, t.to_vec()).unwrap());
    let l = g.dice_loss(a, b, DICE_EPS).unwrap();
    g.value(l).data()[0]
}

proptest! {
    #[test]
    fn dice_score_is_symmetric_and_bounded((a, b) in mask_pair()) {
        let ab = dice_score(&a, &b).unwrap();
        prop_assert_eq!(ab, dice_score(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn hausdorff95_is_symmetric((a, b) in mask_pair()) {
        prop_assume!(!a.is_empty() && !b.is_empty());
        let ab = hausdorff95(&a, &b).unwrap();
        prop_assert_eq!(ab, hausdorff95(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(hausdorff95(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn dice_loss_graph_matches_slice_evaluation(
        p in prop::collection::vec(0.0f64..1.0, 16),
        t in prop::collection::vec(0.0f64..1.0, 16),
    ) {
        let graph = graph_dice(&p, &t, 4);
        let direct = dice_loss_value(&p, &t, 1, DICE_EPS);
        prop_assert!((graph - direct).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&graph));
        prop_assert_eq!(graph.to_bits(), graph_dice(&t, &p, 4).to_bits());
    }

    #[test]
    fn s_score_is_linear(d in 0.0f64..100.0, h in 0.0f64..50.0) {
        prop_assert!((s_score(&[d], &[h]) - (d / 200.0 - h / 60.0)).abs() < 1e-12);
    }

    #[test]
    fn split_partitions_samples(n in 1usize..60, fraction in 0.0f64..=1.0, seed in any::<u64>()) {
        let items: Vec<usize> = (0..n).collect();
        let k = (fraction * n as f64).round() as usize;
        let result = split(&items, fraction, seed);
        if k == 0 || k == n {
            prop_assert!(result.is_err());
            return Ok(());
        }
        let (train, test) = result.unwrap();
        prop_assert_eq!(train.len(), k);
        let mut all = [train, test].concat();
        all.sort_unstable();
        prop_assert_eq!(all, items);
    }

    #[test]
    fn center_normalization_roundtrips(cx in 0.0f64..64.0, cy in 0.0f64..64.0, size in 8usize..128) {
        let (px, py) = normalize_center((cx, cy), size, size);
        let (bx, by) = denormalize_center((px, py), size, size);
        prop_assert!((bx - cx).abs() < 1e-9 && (by - cy).abs() < 1e-9);
    }

    #[test]
    fn tns_roundtrip_is_exact(data in prop::collection::vec(any::<f32>(), 1..40)) {
        let t = Tensor::new(&[data.len()], data).unwrap();
        let mut bytes = Vec::new();
        tns::write(&t, &mut bytes).unwrap();
        let back: Tensor<f32> = tns::read(bytes.as_slice()).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
