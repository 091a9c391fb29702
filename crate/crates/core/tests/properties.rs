mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sparselif::config::RunConfig;
use sparselif::decoder::{
    assignment_cost, bind_scene, box_to_params, compute_loss, hungarian, params_to_box, Decoder, LossConfig,
    UncertaintySource,
};
use sparselif::eval::{average_precision, nds, SampleDetections};
use sparselif::geometry::{bev_rotated_iou, Box3D};
use sparselif::scenesim::generate_scene;
use sparselif::tape::Tape;

fn arb_box(spread: f64) -> impl Strategy<Value = Box3D> {
    (
        -spread..spread,
        -spread..spread,
        -1.0..1.0f64,
        0.3..5.0f64,
        0.3..3.0f64,
        0.3..2.5f64,
        -3.14..3.14f64,
    )
        .prop_map(|(x, y, z, l, w, h, yaw)| Box3D::new([x, y, z], [l, w, h], yaw))
}

fn arb_scored(spread: f64) -> impl Strategy<Value = Box3D> {
    (arb_box(spread), 0.0..1.0f64, 0..3usize).prop_map(|(b, s, c)| b.with_score(s).with_class(c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn iou_is_symmetric_bounded_and_reflexive(a in arb_box(3.0), b in arb_box(3.0)) {
        let ab = bev_rotated_iou(&a, &b);
        let ba = bev_rotated_iou(&b, &a);
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((bev_rotated_iou(&a, &a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn box_params_round_trip(b in arb_box(40.0), vx in -10.0..10.0f64, vy in -10.0..10.0f64, cs in 0.5..4.0f64) {
        let b = b.with_velocity([vx, vy]);
        let back = params_to_box(&box_to_params(&b, cs, 2.0), cs, 2.0);
        for d in 0..3 {
            prop_assert!((back.center[d] - b.center[d]).abs() < 1e-9);
            prop_assert!((back.size[d] - b.size[d]).abs() < 1e-9);
        }
        prop_assert!(sparselif::eval::yaw_difference(back.yaw, b.yaw) < 1e-9);
        prop_assert!((back.velocity[0] - vx).abs() < 1e-9 && (back.velocity[1] - vy).abs() < 1e-9);
    }

    #[test]
    fn nds_is_bounded(map in 0.0..=1.0f64, tp in proptest::collection::vec(0.0..5.0f64, 0..6)) {
        let v = nds(map, &tp).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        let perfect = nds(map, &vec![0.0; tp.len()]).unwrap();
        prop_assert!(v <= perfect + 1e-12);
    }

    #[test]
    fn ap_is_bounded_and_order_free(
        gt in proptest::collection::vec(arb_scored(20.0), 1..8),
        extra in proptest::collection::vec(arb_scored(20.0), 0..8),
        seed in any::<u64>(),
    ) {
        // Predictions: jittered copies of some ground truths plus clutter.
        let mut preds: Vec<Box3D> = gt.iter().step_by(2).map(|g| {
            let mut p = g.clone();
            p.center[0] += 0.3;
            p
        }).collect();
        preds.extend(extra);
        let samples = vec![SampleDetections { gt: gt.clone(), preds: preds.clone() }];
        let mut shuffled = preds;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let permuted = vec![SampleDetections { gt, preds: shuffled }];
        for c in 0..3 {
            for t in [0.5, 2.0] {
                let a = average_precision(&samples, c, t);
                let b = average_precision(&permuted, c, t);
                if let Some(a) = a {
                    prop_assert!((0.0..=1.0).contains(&a));
                    prop_assert!((a - b.unwrap()).abs() < 1e-12);
                } else {
                    prop_assert!(b.is_none());
                }
            }
        }
    }

    #[test]
    fn hungarian_never_loses_to_a_random_assignment(
        rows in 1..7usize,
        cols in 1..7usize,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost: Vec<Vec<f64>> = (0..rows).map(|_| (0..cols).map(|_| rng.random_range(0.0..5.0)).collect()).collect();
        let best = assignment_cost(&cost, &hungarian(&cost).unwrap());
        for _ in 0..20 {
            let mut cs: Vec<usize> = (0..cols).collect();
            cs.shuffle(&mut rng);
            let mut rs: Vec<usize> = (0..rows).collect();
            rs.shuffle(&mut rng);
            let mut assign = vec![None; rows];
            for (r, c) in rs.iter().zip(&cs) {
                assign[*r] = Some(*c);
            }
            prop_assert!(best <= assignment_cost(&cost, &assign) + 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn loss_ignores_ground_truth_order(seed in any::<u64>()) {
        let cfg = RunConfig::default();
        let decoder = Decoder::<f64>::new(cfg.model.clone(), cfg.sensors.clone(), 1).unwrap();
        let scene = generate_scene(&cfg.sensors, &cfg.sim, 3, seed % 4).unwrap();
        let camera = scene.camera.cast::<f64>();
        let lidar = scene.lidar.cast::<f64>();
        let queries = decoder.queries(scene.id, &scene.boxes, &camera, &scene.rig).unwrap();
        let loss = |gt: &[Box3D]| {
            let mut tape = Tape::new();
            let params = decoder.params.bind(&mut tape, true);
            let vars = bind_scene(&mut tape, &camera, &lidar);
            let traces = decoder.forward(&mut tape, &params, &queries, &vars, &scene.rig, UncertaintySource::Predicted).unwrap();
            let (l, _) = compute_loss(&mut tape, &traces, gt, &LossConfig::default(), &decoder.model).unwrap();
            tape.value(l).item()
        };
        let mut permuted = scene.boxes.clone();
        permuted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (a, b) = (loss(&scene.boxes), loss(&permuted));
        prop_assert!(a.is_finite());
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{} vs {}", a, b);
    }
}
