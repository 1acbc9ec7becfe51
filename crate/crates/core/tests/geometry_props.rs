//! Property tests for the geometric core.

use proptest::prelude::*;

use pointkey_core::data::normalize_cloud;
use pointkey_core::geometry::{
    apply_rotation, bbox_diagonal, dist3, fps, geodesic_angle, nn_distance, procrustes,
    random_rotation, KeypointSet, PointCloud, Vec3,
};
use pointkey_core::rng::SeedStream;

fn vec3_strategy() -> impl Strategy<Value = Vec3> {
    [-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0]
}

fn cloud_strategy(min: usize, max: usize) -> impl Strategy<Value = Vec<Vec3>> {
    proptest::collection::vec(vec3_strategy(), min..=max)
}

proptest! {
    #[test]
    fn rotation_preserves_pairwise_distances(pts in cloud_strategy(2, 24), seed in 0u64..1000) {
        let cloud = PointCloud::new(pts).unwrap();
        let r = random_rotation(&mut SeedStream::new(seed));
        let rotated = apply_rotation(&cloud, &r);
        for i in 0..cloud.n() {
            for j in i + 1..cloud.n() {
                let before = dist3(cloud.points()[i], cloud.points()[j]);
                let after = dist3(rotated.points()[i], rotated.points()[j]);
                prop_assert!((before - after).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn procrustes_recovers_applied_rotation(pts in cloud_strategy(3, 16), seed in 0u64..1000) {
        let kp = KeypointSet::new(pts).unwrap();
        let r = random_rotation(&mut SeedStream::new(seed));
        let rotated = apply_rotation(&kp, &r);
        let got = procrustes(&kp, &rotated).unwrap();
        if !got.degenerate {
            prop_assert!(geodesic_angle(&got.rotation, &r) < 1e-9);
        }
    }

    #[test]
    fn fps_output_is_subset_in_selection_order(pts in cloud_strategy(4, 40), m in 1usize..12, start in 0usize..4) {
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let m = m.min(cloud.n());
        let start = start.min(cloud.n() - 1);
        let sub = fps(&cloud, m, start).unwrap();
        prop_assert_eq!(sub.n(), m);
        prop_assert_eq!(sub.points()[0], pts[start]);
        for p in sub.points() {
            prop_assert!(pts.contains(p));
        }
    }

    #[test]
    fn normalization_is_idempotent_and_bounded(pts in cloud_strategy(2, 32)) {
        let cloud = PointCloud::new(pts).unwrap();
        let (once, _) = normalize_cloud(&cloud);
        let (twice, _) = normalize_cloud(&once);
        for (a, b) in once.points().iter().zip(twice.points()) {
            prop_assert!(dist3(*a, *b) <= 1e-12);
        }
        for p in once.points() {
            prop_assert!(pointkey_core::geometry::norm3(*p) <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn bbox_diagonal_translation_invariant(pts in cloud_strategy(1, 24), shift in vec3_strategy()) {
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let shifted = PointCloud::new(
            pts.iter().map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]]).collect(),
        )
        .unwrap();
        let a = bbox_diagonal(&cloud);
        let b = bbox_diagonal(&shifted);
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
    }

    #[test]
    fn nn_distance_matches_definition(pts in cloud_strategy(1, 32), q in vec3_strategy()) {
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let (d, i) = nn_distance(q, &cloud);
        // the reported pair is consistent and minimal
        prop_assert!((dist3(q, pts[i]) - d).abs() < 1e-12);
        for p in &pts {
            prop_assert!(dist3(q, *p) >= d - 1e-12);
        }
    }
}
