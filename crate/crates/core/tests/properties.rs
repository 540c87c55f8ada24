//! Property tests for the library's structural invariants.

use proptest::prelude::*;

use rht_core::dataio::{self, PtsAnnotation};
use rht_core::grid::{FeatureVolume, Grid, ScaleTag};
use rht_core::heatmaps::{decode_heatmaps, render_landmark_heatmaps, LandmarkSet};
use rht_core::metrics::{nme, NormalizationSpec};
use rht_core::rhm1;
use rht_core::stm::{correlate, l2_normalize, soft_transfer, unfold};

fn volume_strategy(h: usize, w: usize, c: usize) -> impl Strategy<Value = FeatureVolume> {
    proptest::collection::vec(-1.0..1.0f64, h * w * c).prop_map(move |data| {
        FeatureVolume::new(Grid::from_vec(h, w, c, data).unwrap(), ScaleTag::X4).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Every correlation entry respects Cauchy-Schwarz on unit rows, the
    /// matrix transposes across argument order, and self-reference soft
    /// transfer reproduces the values.
    #[test]
    fn correlation_invariants(
        q in volume_strategy(4, 3, 2),
        k in volume_strategy(4, 3, 2),
    ) {
        let qp = l2_normalize(&unfold(&q, 3).unwrap());
        let kp = l2_normalize(&unfold(&k, 3).unwrap());
        let qk = correlate(&qp, &kp).unwrap();
        for &v in qk.c.data() {
            prop_assert!(v.abs() <= 1.0 + 1e-9);
        }
        let kq = correlate(&kp, &qp).unwrap();
        for i in 0..qp.n_rows() {
            for j in 0..kp.n_rows() {
                prop_assert!((qk.c.at(i, j, 0) - kq.c.at(j, i, 0)).abs() < 1e-9);
            }
        }
        let self_art = correlate(&qp, &qp).unwrap();
        let back = soft_transfer(&q, &self_art.d, &self_art.a).unwrap();
        prop_assert!(back.grid.max_abs_diff(&q.grid) < 1e-6);
    }

    /// decode(render(landmark)) recovers interior landmarks within the
    /// 0.2 px budget for sigma in [1, 3].
    #[test]
    fn render_decode_roundtrip(
        xs in proptest::collection::vec(0.0..1.0f64, 3),
        ys in proptest::collection::vec(0.0..1.0f64, 3),
        sigma in 1.0..3.0f64,
    ) {
        let margin = (2.0 * sigma).ceil() + 1.0;
        let span = 31.0 - 2.0 * margin;
        let points: Vec<(f64, f64)> = xs
            .iter()
            .zip(&ys)
            .map(|(&fx, &fy)| (margin + fx * span, margin + fy * span))
            .collect();
        let lm = LandmarkSet::all_visible(points.clone(), (32, 32)).unwrap();
        let hm = render_landmark_heatmaps(&lm, (32, 32), sigma).unwrap();
        let dec = decode_heatmaps(&hm).unwrap();
        for (p, d) in points.iter().zip(&dec.points) {
            let err = ((p.0 - d.0).powi(2) + (p.1 - d.1).powi(2)).sqrt();
            prop_assert!(err <= 0.2, "sigma {sigma}: error {err} at {p:?}");
        }
    }

    /// RHM1 write -> read -> write is byte-identical.
    #[test]
    fn rhm1_roundtrip(
        h in 1usize..5,
        w in 1usize..5,
        c in 1usize..4,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..h * w * c).map(|_| rng.random::<f64>() * 2e3 - 1e3).collect();
        let g = Grid::from_vec(h, w, c, data).unwrap();
        let mut bytes = Vec::new();
        rhm1::write_map(&mut bytes, &g).unwrap();
        let back = rhm1::read_map(&mut bytes.as_slice()).unwrap();
        let mut bytes2 = Vec::new();
        rhm1::write_map(&mut bytes2, &back).unwrap();
        prop_assert_eq!(bytes, bytes2);
        prop_assert_eq!(back, g);
    }

    /// .pts write -> parse -> write is byte-identical for any finite
    /// coordinates.
    #[test]
    fn pts_roundtrip(points in proptest::collection::vec((-1e6..1e6f64, -1e6..1e6f64), 1..20)) {
        let a = PtsAnnotation { version: 1, points };
        let text = dataio::write_pts(&a);
        let back = dataio::parse_pts(&text).unwrap();
        prop_assert_eq!(&back, &a);
        prop_assert_eq!(dataio::write_pts(&back), text);
    }

    /// Gallery selection is equivariant under permutation of the gallery.
    #[test]
    fn reference_selection_permutation_equivariance(
        seeds in proptest::collection::vec(0u64..1000, 3..6),
        rotation in 0usize..5,
    ) {
        use rand::{Rng, SeedableRng};
        let descriptors: Vec<_> = seeds
            .iter()
            .map(|&s| {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(s);
                let data: Vec<f64> = (0..16 * 16).map(|_| rng.random_range(0.0..1.0)).collect();
                dataio::describe(&Grid::from_vec(16, 16, 1, data).unwrap()).unwrap()
            })
            .collect();
        let target = descriptors[0].clone();
        let base = dataio::select_reference(&target, &descriptors).unwrap();
        let mut rotated = descriptors.clone();
        let r = rotation % rotated.len();
        rotated.rotate_left(r);
        let rotated_idx = dataio::select_reference(&target, &rotated).unwrap();
        // The same descriptor must win, accounting for duplicates by
        // comparing similarity rather than position.
        let s_base = target.cosine(&descriptors[base]);
        let s_rot = target.cosine(&rotated[rotated_idx]);
        prop_assert!((s_base - s_rot).abs() < 1e-12);
    }

    /// NME under a larger normalization distance never exceeds NME under
    /// a smaller one.
    #[test]
    fn nme_monotone_in_normalization(
        err_x in -5.0..5.0f64,
        err_y in -5.0..5.0f64,
        io_extra in 0.0..20.0f64,
    ) {
        // Pupils at 30 and 60; outer eye corners wider by io_extra.
        let truth = LandmarkSet::all_visible(
            vec![(30.0, 50.0), (60.0, 50.0), (30.0 - io_extra / 2.0, 50.0), (60.0 + io_extra / 2.0, 50.0)],
            (100, 100),
        ).unwrap();
        let pred = LandmarkSet::all_visible(
            truth.points.iter().map(|&(x, y)| (x + err_x, y + err_y)).collect(),
            (100, 100),
        ).unwrap();
        let ip = NormalizationSpec::Interpupil { left: vec![0], right: vec![1] };
        let io = NormalizationSpec::Interocular { left_outer: 2, right_outer: 3 };
        let nme_ip = nme(&pred, &truth, &ip).unwrap();
        let nme_io = nme(&pred, &truth, &io).unwrap();
        prop_assert!(nme_io <= nme_ip + 1e-12);
    }
}
