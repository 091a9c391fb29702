mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::criteria::{
    hungarian_mismatches, iou_vs_monte_carlo, nms_mismatches, projection_round_trip, IOU_TOLERANCE,
    ROUND_TRIP_TOLERANCE,
};
use common::random_box;
use sparselif::geometry::{bev_rotated_iou, CameraRig, Rigid3};

#[test]
fn projection_round_trip_is_submicron() {
    let (meters, pixels) = projection_round_trip(10_000, &mut ChaCha8Rng::seed_from_u64(1));
    assert!(meters < ROUND_TRIP_TOLERANCE, "{:.3e} m", meters);
    assert!(pixels < 1e-6, "{:.3e} px", pixels);
}

#[test]
fn temporal_alignment_matches_pose_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let poses = (0..3)
            .map(|_| {
                Rigid3::from_yaw(
                    rng.random_range(-3.0..3.0),
                    [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 0.0],
                )
            })
            .collect();
        let rig = CameraRig::surround(3, 90.0, (64, 48), 1.5, poses).unwrap();
        let p = [rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), rng.random_range(-2.0..2.0)];
        for t in 0..3 {
            let got = sparselif::geometry::align_temporal(p, &rig, t);
            let want = common::ref_align(p, &rig, t);
            for d in 0..3 {
                assert!((got[d] - want[d]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn rotated_iou_agrees_with_monte_carlo() {
    let (err, overlapping) = iou_vs_monte_carlo(150, &mut ChaCha8Rng::seed_from_u64(2));
    assert!(err <= IOU_TOLERANCE, "{:.4}", err);
    assert!(overlapping > 100);
}

#[test]
fn rotated_iou_of_disjoint_and_contained_boxes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let a = random_box(&mut rng, 5.0);
        let mut far = a.clone();
        far.center[0] += 20.0;
        assert_eq!(bev_rotated_iou(&a, &far), 0.0);
        let mut inner = a.clone();
        inner.size = [a.size[0] * 0.5, a.size[1] * 0.5, a.size[2]];
        assert!((bev_rotated_iou(&a, &inner) - 0.25).abs() < 1e-9);
    }
}

#[test]
fn nms_equals_brute_force_greedy() {
    let (bad, suppressed) = nms_mismatches(200, &mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(bad, 0);
    assert!(suppressed > 0, "sets should contain overlaps");
}

#[test]
fn hungarian_equals_exhaustive_search() {
    let (bad, gap) = hungarian_mismatches(4, &mut ChaCha8Rng::seed_from_u64(6));
    assert_eq!(bad, 0, "max gap {:.3e}", gap);
}
