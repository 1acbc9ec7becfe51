//! Cross-module integration checks built on independent oracles.

use pointkey_core::data::{make_pair, RotationBank};
use pointkey_core::geometry::{
    apply_rotation, center_cloud, det3, geodesic_angle, procrustes, random_rotation, KeypointSet,
    PointCloud, Rotation3, Vec3,
};
use pointkey_core::loss::{loss_consistency, loss_pose, PairSample};
use pointkey_core::math;
use pointkey_core::metrics::{matching_error, matching_error_object};
use pointkey_core::model::{forward_eval, init_params, NetworkConfig};
use pointkey_core::rng::SeedStream;

fn random_points(s: &mut SeedStream, n: usize) -> Vec<Vec3> {
    (0..n).map(|_| [s.normal(), s.normal(), s.normal()]).collect()
}

// An oracle predictor mapping each cloud to a fixed canonical keypoint set
// rotated by the sample's rotation must sit at the zero of both mutual
// terms, and de-rotated predictions must match across copies.
#[test]
fn oracle_predictor_zeroes_mutual_terms_and_matching_error() {
    let mut s = SeedStream::new(100);
    for _ in 0..50 {
        let canonical_cloud = {
            let (c, _) = center_cloud(&PointCloud::new(random_points(&mut s, 64)).unwrap());
            c
        };
        let canonical_kp = KeypointSet::new(random_points(&mut s, 8)).unwrap();
        let r_a = random_rotation(&mut s);
        let r_b = random_rotation(&mut s);
        let sample = PairSample::from_canonical(&canonical_cloud, r_a, r_b);

        let kp_a = apply_rotation(&canonical_kp, &sample.r_a);
        let kp_b = apply_rotation(&canonical_kp, &sample.r_b);

        let consist = loss_consistency(&kp_a, &kp_b, &sample.r_a, &sample.r_b).unwrap();
        assert!(consist <= 1e-8, "consistency {consist}");
        let (pose, _) = loss_pose(&kp_a, &kp_b, &sample.r_ba).unwrap();
        assert!(pose <= 1e-8, "pose {pose}");

        // matching error of the same oracle over several poses
        let rotations: Vec<Rotation3> = (0..5).map(|_| random_rotation(&mut s)).collect();
        let preds: Vec<KeypointSet> = rotations
            .iter()
            .map(|r| apply_rotation(&canonical_kp, r))
            .collect();
        let per_index = matching_error_object(&preds, &rotations).unwrap();
        let stats = matching_error(&[per_index]).unwrap();
        assert!(stats.mu <= 1e-9, "matching error {}", stats.mu);
    }
}

// Procrustes recovery at scale: 500 random K=10 sets, construct-and-recover
// with the geodesic angle error, plus the reflection guard. (The matrix-log
// trace formula cannot resolve angles below ~sqrt(eps) and is not usable as
// the instrument here; the Frobenius-based geodesic angle is exact near 0.)
#[test]
fn procrustes_recovery_500_sets() {
    let mut s = SeedStream::new(200);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let kp = KeypointSet::new(random_points(&mut s, 10)).unwrap();
        let r = random_rotation(&mut s);
        let rotated = apply_rotation(&kp, &r);
        let got = procrustes(&kp, &rotated).unwrap();
        assert!((det3(got.rotation.matrix()) - 1.0).abs() < 1e-9);
        worst = worst.max(geodesic_angle(&got.rotation, &r));
    }
    assert!(worst <= 1e-8, "worst recovery angle {worst}");
}

// The pose loss must agree with the matrix-log geodesic angle between the
// Procrustes estimate and the target.
#[test]
fn pose_loss_equals_matrix_log_angle_500_pairs() {
    let mut s = SeedStream::new(300);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let kp_a = KeypointSet::new(random_points(&mut s, 10)).unwrap();
        let kp_b = KeypointSet::new(random_points(&mut s, 10)).unwrap();
        let target = random_rotation(&mut s);
        let (pose, _) = loss_pose(&kp_a, &kp_b, &target).unwrap();
        let est = procrustes(&kp_b, &kp_a).unwrap().rotation;
        let rel = est.transpose().compose(&target);
        let m = rel.matrix();
        let oracle = math::acos(((m[0][0] + m[1][1] + m[2][2] - 1.0) / 2.0).clamp(-1.0, 1.0));
        worst = worst.max((pose - oracle).abs());
        // and the exposed utility matches as well
        assert!((geodesic_angle(&est, &target) - pose).abs() < 1e-10);
    }
    assert!(worst <= 1e-8, "worst deviation {worst}");
}

// A freshly initialized network plugged into a bank-drawn pair keeps the
// whole stack consistent: finite losses, probabilities summing to one, and
// keypoints inside the hull on both branches.
#[test]
fn model_and_pair_pipeline_integrate() {
    let mut s = SeedStream::new(400);
    let cfg = NetworkConfig {
        n_points: 96,
        n_keypoints: 5,
        feat_dim: 24,
        hidden_dims: vec![12, 16],
        res_dim: 12,
        input_transform: true,
    };
    let net = init_params(&cfg, 9).unwrap();
    let bank = RotationBank::generate(1, 3, 24).unwrap();
    let (canonical, _) = center_cloud(&PointCloud::new(random_points(&mut s, 96)).unwrap());
    let pair = make_pair(&canonical, 2, &bank, &mut s).unwrap();

    let out_a = forward_eval(&net, &pair.cloud_a).unwrap();
    let out_b = forward_eval(&net, &pair.cloud_b).unwrap();
    let breakdown = pointkey_core::loss::loss_overall(
        &out_a.keypoints,
        &out_b.keypoints,
        &pair,
        &pointkey_core::loss::LossConfig::default(),
    )
    .unwrap();
    assert!(breakdown.total.is_finite());
    assert!(breakdown.individual_a.separation > 0.0);
}
