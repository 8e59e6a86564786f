use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix4};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cdasim::control::{gap_law, GapGains, LtvProblem};
use cdasim::datalog::{encode_line, parse_replay, AgentFrame, EstimateRecord, FrameRecord};
use cdasim::dynamics::{step_bicycle, ControlCommand, VehicleLimits};
use cdasim::evaluation::{average_precision, hazard_frequency, pr_curve, ttc_from_gap, ScoredBox};
use cdasim::geometry::{box_iou_bev, transform_from_frame, transform_to_frame, OrientedBox, Pose2D};
use cdasim::localization::{kf_predict, kf_update, GaussianEstimate, GpsMeasurement, ImuMeasurement, NoiseConfig};
use cdasim::map::{Lane, LaneGraph, LaneKind};
use cdasim::perception::{fuse_late, perceive, simulate_lidar, Detection, EvalRange, FusionMode, HitRecord, LidarConfig};
use cdasim::planning::CubicSpline2D;
use cdasim::platoon::{
    gfs_scores, select_merge_position_gfs, select_merge_position_heuristic, FsmInput, FsmState, MemberView, MergePlan,
    MergePolicy, OwnView, PlatoonFsm, PlatoonRole,
};
use cdasim::v2x::{Beacon, CommConfig, Message, Payload, V2xBus};
use cdasim::world::{AgentId, Role, Scene, VehicleState};

fn arb_box() -> impl Strategy<Value = OrientedBox> {
    (-50.0..50.0f64, -50.0..50.0f64, 0.5..8.0f64, 0.5..4.0f64, -PI..PI)
        .prop_map(|(x, y, l, w, yaw)| OrientedBox::new(x, y, l, w, yaw))
}

fn arb_pose() -> impl Strategy<Value = Pose2D> {
    (-100.0..100.0f64, -100.0..100.0f64, -PI..PI).prop_map(|(x, y, yaw)| Pose2D::new(x, y, yaw))
}

fn straight_map() -> Arc<LaneGraph> {
    let lane = Lane::new("m", LaneKind::Mainline, 3.5, vec![[-300.0, 0.0], [300.0, 0.0]]).unwrap();
    Arc::new(LaneGraph::new(vec![lane], BTreeMap::new(), None).unwrap())
}

fn car(id: u32, x: f64, y: f64, yaw: f64) -> VehicleState {
    VehicleState::new(AgentId(id), Role::PlatoonMember, Pose2D::new(x, y, yaw), 10.0)
}

/// Vehicles on a coarse grid so footprints never overlap.
fn arb_scene(max: usize) -> impl Strategy<Value = Scene> {
    prop::collection::btree_set((-6i32..6, -3i32..3), 2..=max).prop_flat_map(|cells| {
        let n = cells.len();
        (Just(cells), prop::collection::vec((-1.0..1.0f64, -0.5..0.5f64, -0.3..0.3f64), n))
    })
    .prop_map(|(cells, jitter)| {
        let vehicles = cells
            .iter()
            .zip(jitter)
            .enumerate()
            .map(|(i, (&(cx, cy), (jx, jy, yaw)))| car(i as u32, cx as f64 * 9.0 + jx, cy as f64 * 4.0 + jy, yaw))
            .collect();
        Scene::new(0.0, vehicles, AgentId(0), straight_map()).unwrap()
    })
}

fn lidar() -> LidarConfig {
    LidarConfig {
        beams: 180,
        ..LidarConfig::default()
    }
    .noise_free()
}

mod geometry_props {
    use super::*;

    proptest! {
        #[test]
        fn iou_with_itself_is_one(a in arb_box()) {
            let iou = box_iou_bev(&a, &a).unwrap();
            prop_assert!((iou - 1.0).abs() < 1e-9, "iou {iou}");
        }

        #[test]
        fn iou_is_symmetric(a in arb_box(), b in arb_box()) {
            let ab = box_iou_bev(&a, &b).unwrap();
            let ba = box_iou_bev(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
        }

        #[test]
        fn iou_is_invariant_under_rigid_motion(a in arb_box(), b in arb_box(), frame in arb_pose()) {
            let before = box_iou_bev(&a, &b).unwrap();
            let after = box_iou_bev(&transform_from_frame(&a, &frame), &transform_from_frame(&b, &frame)).unwrap();
            prop_assert!((before - after).abs() < 1e-9, "{before} vs {after}");
        }

        #[test]
        fn frame_round_trip(a in arb_box(), frame in arb_pose()) {
            let back = transform_from_frame(&transform_to_frame(&a, &frame), &frame);
            prop_assert!((back.cx - a.cx).abs() < 1e-9 && (back.cy - a.cy).abs() < 1e-9);
            let dyaw = (back.yaw - a.yaw).sin().abs();
            prop_assert!(dyaw < 1e-9);
        }

        #[test]
        fn vertices_project_to_cumulative_arc_length(
            steps in prop::collection::vec((0.5..20.0f64, -10.0..10.0f64), 1..8),
        ) {
            let mut pts = vec![[0.0, 0.0]];
            for (dx, dy) in steps {
                let last = *pts.last().unwrap();
                pts.push([last[0] + dx, last[1] + dy]);
            }
            let lane = Lane::new("l", LaneKind::Mainline, 3.5, pts.clone()).unwrap();
            for (k, p) in pts.iter().enumerate() {
                let (s, d) = lane.project(p[0], p[1]);
                prop_assert!((s - lane.cumulative()[k]).abs() < 1e-9, "vertex {k}: s {s}");
                prop_assert!(d.abs() < 1e-9);
            }
        }
    }
}

mod dynamics_props {
    use super::*;

    fn run(v0: f64, cmd: ControlCommand, dt: f64, horizon: f64) -> Vec<VehicleState> {
        let limits = VehicleLimits::default();
        let mut s = VehicleState::new(AgentId(0), Role::MergingCav, Pose2D::identity(), v0);
        let n = (horizon / dt).round() as usize;
        let mut out = vec![s.clone()];
        for _ in 0..n {
            s = step_bicycle(&s, cmd, dt, &limits).unwrap();
            out.push(s.clone());
        }
        out
    }

    proptest! {
        #[test]
        fn speed_non_negative_and_yaw_wrapped(
            v0 in 0.0..30.0f64,
            cmds in prop::collection::vec((-10.0..5.0f64, -1.0..1.0f64), 1..200),
        ) {
            let limits = VehicleLimits::default();
            let mut s = VehicleState::new(AgentId(0), Role::MergingCav, Pose2D::identity(), v0);
            for (a, d) in cmds {
                s = step_bicycle(&s, ControlCommand::new(a, d), 0.05, &limits).unwrap();
                prop_assert!(s.speed >= 0.0);
                prop_assert!(s.pose.yaw > -PI && s.pose.yaw <= PI);
            }
        }

        #[test]
        fn zero_command_at_rest_is_fixed(pose in arb_pose(), dt in 0.001..1.0f64) {
            let s = VehicleState::new(AgentId(0), Role::MergingCav, pose, 0.0);
            let next = step_bicycle(&s, ControlCommand::default(), dt, &VehicleLimits::default()).unwrap();
            prop_assert_eq!(next.pose, s.pose);
            prop_assert_eq!(next.speed, 0.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn euler_error_is_first_order(v0 in 5.0..20.0f64, a in -0.4..1.0f64, steer in -0.3..0.3f64) {
            let cmd = ControlCommand::new(a, steer);
            let oracle = run(v0, cmd, 0.0005, 10.0);
            let err = |dt: f64| {
                let traj = run(v0, cmd, dt, 10.0);
                let stride = (dt / 0.0005).round() as usize;
                traj.iter()
                    .enumerate()
                    .map(|(k, s)| s.pose.distance_to(&oracle[k * stride].pose))
                    .fold(0.0, f64::max)
            };
            let coarse = err(0.05);
            let fine = err(0.025);
            prop_assert!(fine <= 0.5 * coarse, "coarse {coarse} fine {fine}");
        }
    }
}

mod localization_props {
    use super::*;

    #[derive(Debug, Clone)]
    enum Op {
        Predict { accel: f64, yaw_rate: f64, dt: f64 },
        Update { x: f64, y: f64, sigma: f64 },
    }

    fn arb_op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (-3.0..3.0f64, -0.5..0.5f64, 0.01..0.2f64).prop_map(|(accel, yaw_rate, dt)| Op::Predict { accel, yaw_rate, dt }),
            (-20.0..20.0f64, -20.0..20.0f64, 0.05..3.0f64).prop_map(|(x, y, sigma)| Op::Update { x, y, sigma }),
        ]
    }

    fn prior(v: f64) -> GaussianEstimate {
        GaussianEstimate::new(0.0, 0.0, 0.1, v, Matrix4::from_diagonal_element(1.0))
    }

    proptest! {
        #[test]
        fn covariance_stays_symmetric_psd(v in 0.0..25.0f64, ops in prop::collection::vec(arb_op(), 1..80)) {
            let noise = NoiseConfig::default();
            let mut est = prior(v);
            for op in ops {
                est = match op {
                    Op::Predict { accel, yaw_rate, dt } => kf_predict(&est, &ImuMeasurement { accel, yaw_rate }, dt, &noise),
                    Op::Update { x, y, sigma } => kf_update(&est, &GpsMeasurement { x, y, sigma }).unwrap(),
                };
                prop_assert!(est.is_symmetric(1e-9));
                prop_assert!(est.min_eigenvalue() > -1e-9, "min eig {}", est.min_eigenvalue());
            }
        }

        #[test]
        fn exact_fix_update_is_idempotent(v in 0.0..25.0f64, gx in -20.0..20.0f64, gy in -20.0..20.0f64) {
            let gps = GpsMeasurement { x: gx, y: gy, sigma: 0.0 };
            let once = kf_update(&prior(v), &gps).unwrap();
            prop_assert!((once.x() - gx).abs() < 1e-9 && (once.y() - gy).abs() < 1e-9);
            let twice = kf_update(&once, &gps).unwrap();
            prop_assert!((twice.x() - once.x()).abs() < 1e-9 && (twice.y() - once.y()).abs() < 1e-9);
        }
    }
}

mod perception_props {
    use super::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn removing_a_vehicle_never_hides_another(scene in arb_scene(7), pick in any::<prop::sample::Index>()) {
            let cfg = lidar();
            let full = simulate_lidar(&scene, AgentId(0), &cfg).unwrap();
            let removed = scene.vehicles[1 + pick.index(scene.vehicles.len() - 1)].id;
            let mut thinned = scene.clone();
            thinned.vehicles.retain(|v| v.id != removed);
            let fewer = simulate_lidar(&thinned, AgentId(0), &cfg).unwrap();
            for (&id, &h) in &full.0 {
                if id != removed {
                    prop_assert!(fewer.hits(id) >= h, "{id}: {} < {h}", fewer.hits(id));
                }
            }
        }

        #[test]
        fn targets_are_union_of_labeler_views(scene in arb_scene(7), mask in prop::collection::vec(any::<bool>(), 7)) {
            let cfg = lidar();
            let labelers: Vec<AgentId> = scene.vehicles.iter().skip(1).zip(&mask).filter(|(_, &m)| m).map(|(v, _)| v.id).collect();
            let range = EvalRange::symmetric(1e3, 1e3);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = perceive(&scene, AgentId(0), &labelers, &labelers, FusionMode::Late, &cfg, &range, &mut rng).unwrap();
            let got: BTreeSet<AgentId> = out.targets.iter().map(|(id, _)| *id).collect();
            let mut want = BTreeSet::new();
            for &l in labelers.iter().chain([AgentId(0)].iter()) {
                let rec = simulate_lidar(&scene, l, &cfg).unwrap();
                want.extend(rec.0.iter().filter(|(_, &h)| h >= 1).map(|(id, _)| *id));
            }
            want.remove(&AgentId(0));
            prop_assert_eq!(got, want);
        }
    }

    proptest! {
        #[test]
        fn late_fusion_output_is_suppressed(
            boxes in prop::collection::vec((arb_box(), 0.0..1.0f64, 0u32..3), 0..25),
            poses in prop::collection::vec(arb_pose(), 3),
            ego in arb_pose(),
            nms in 0.05..0.9f64,
        ) {
            let detections: Vec<Detection> = boxes
                .into_iter()
                .map(|(bbox, confidence, src)| Detection { bbox, confidence, source: AgentId(src) })
                .collect();
            let source_poses: BTreeMap<AgentId, Pose2D> = poses.into_iter().enumerate().map(|(i, p)| (AgentId(i as u32), p)).collect();
            let fused = fuse_late(&detections, &source_poses, &ego, nms).unwrap();
            for (i, a) in fused.iter().enumerate() {
                for b in &fused[i + 1..] {
                    prop_assert!(box_iou_bev(&a.bbox, &b.bbox).unwrap() < nms);
                }
            }
        }
    }
}

mod planning_props {
    use super::*;

    proptest! {
        #[test]
        fn spline_is_exact_at_knots_and_arc_length_grows(
            steps in prop::collection::vec((1.0..30.0f64, -15.0..15.0f64), 1..10),
        ) {
            let mut pts = vec![[0.0, 0.0]];
            for (dx, dy) in steps {
                let last = *pts.last().unwrap();
                pts.push([last[0] + dx, last[1] + dy]);
            }
            let spline = CubicSpline2D::new(&pts).unwrap();
            for (u, p) in spline.knots().iter().zip(&pts) {
                let q = spline.point(*u);
                prop_assert!((q[0] - p[0]).abs() < 1e-9 && (q[1] - p[1]).abs() < 1e-9);
            }
            let table = spline.arc_length_table(16);
            for w in table.windows(2) {
                prop_assert!(w[1].0 > w[0].0 && w[1].1 > w[0].1);
            }
        }

        #[test]
        fn gap_law_equilibrium_is_zero(v in 0.0..40.0f64, tau in 0.1..3.0f64, ks in 0.0..2.0f64, kv in 0.0..2.0f64) {
            let gains = GapGains { k_s: ks, k_v: kv };
            prop_assert_eq!(gap_law(v * tau, v, v, tau, &gains), 0.0);
        }
    }

    fn arb_ltv() -> impl Strategy<Value = LtvProblem> {
        (1usize..4, 1usize..3, 1usize..12).prop_flat_map(|(nx, nu, n)| {
            (
                prop::collection::vec(prop::collection::vec(-1.2..1.2f64, nx * nx), n),
                prop::collection::vec(prop::collection::vec(-1.0..1.0f64, nx * nu), n),
                prop::collection::vec(prop::collection::vec(-0.5..0.5f64, nx), n),
                prop::collection::vec(0.0..2.0f64, nx),
                prop::collection::vec(0.01..1.0f64, nu),
                prop::collection::vec(-5.0..5.0f64, nx),
                prop::collection::vec(0.05..2.0f64, nu),
            )
                .prop_map(move |(a, b, c, q, r, x0, bound)| LtvProblem {
                    a: a.into_iter().map(|m| DMatrix::from_vec(nx, nx, m)).collect(),
                    b: b.into_iter().map(|m| DMatrix::from_vec(nx, nu, m)).collect(),
                    c: c.into_iter().map(DVector::from_vec).collect(),
                    q: DMatrix::from_diagonal(&DVector::from_vec(q.clone())),
                    r: DMatrix::from_diagonal(&DVector::from_vec(r)),
                    qf: DMatrix::from_diagonal(&DVector::from_vec(q)),
                    x0: DVector::from_vec(x0),
                    u_min: DVector::from_iterator(nu, bound.iter().map(|b| -b)),
                    u_max: DVector::from_vec(bound),
                })
        })
    }

    proptest! {
        #[test]
        fn mpc_never_worse_than_doing_nothing(p in arb_ltv()) {
            let sol = p.solve().unwrap();
            let zero = vec![DVector::zeros(p.u_min.len()); p.horizon()];
            prop_assert!(sol.cost <= p.cost_of(&zero));
            for u in &sol.inputs {
                for i in 0..u.len() {
                    prop_assert!(u[i] >= p.u_min[i] && u[i] <= p.u_max[i]);
                }
            }
        }
    }
}

mod v2x_props {
    use super::*;

    fn hits_msg(sender: u32, at: u64, x: f64, y: f64) -> Message {
        Message::new(AgentId(sender), at, Pose2D::new(x, y, 0.0), Payload::SharedHits { hits: HitRecord::default() })
    }

    fn arb_traffic() -> impl Strategy<Value = Vec<Message>> {
        prop::collection::vec((0u32..6, 0u64..10, -150.0..150.0f64, -150.0..150.0f64), 0..40)
            .prop_map(|v| v.into_iter().map(|(s, t, x, y)| hits_msg(s, t, x, y)).collect())
    }

    proptest! {
        #[test]
        fn delivery_matches_range_oracle(
            msgs in arb_traffic(),
            latency in 0u64..4,
            range in 10.0..200.0f64,
            rx in -150.0..150.0f64,
            ry in -150.0..150.0f64,
        ) {
            let cfg = CommConfig { range, latency_steps: latency, drop_p: 0.0 };
            let mut bus = V2xBus::new(cfg);
            for m in &msgs {
                bus.publish(m.clone());
            }
            let receiver = AgentId(99);
            let pose = Pose2D::new(rx, ry, 0.0);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut delivered: Vec<(usize, u64)> = Vec::new();
            for step in 0..20u64 {
                for got in bus.collect(receiver, &pose, step, &mut rng) {
                    prop_assert_eq!(got.sent_at + latency, step);
                    let idx = msgs.iter().enumerate().position(|(i, m)| *m == got && !delivered.iter().any(|(j, _)| *j == i));
                    prop_assert!(idx.is_some(), "delivered more often than sent");
                    delivered.push((idx.unwrap(), step));
                }
            }
            let mut got: Vec<usize> = delivered.iter().map(|(i, _)| *i).collect();
            got.sort();
            let mut want: Vec<usize> = msgs
                .iter()
                .enumerate()
                .filter(|(_, m)| (m.sender_pose_at_send.x - rx).hypot(m.sender_pose_at_send.y - ry) <= range)
                .map(|(i, _)| i)
                .collect();
            want.sort();
            // Identical messages are interchangeable; compare as multisets of content.
            let key = |v: &[usize]| -> Vec<String> {
                let mut k: Vec<String> = v.iter().map(|&i| format!("{:?}", msgs[i])).collect();
                k.sort();
                k
            };
            prop_assert_eq!(key(&got), key(&want));
        }

        #[test]
        fn collect_is_deterministic(msgs in arb_traffic(), drop_p in 0.0..0.9f64, seed in any::<u64>(), step in 0u64..12) {
            let mut bus = V2xBus::new(CommConfig { range: 120.0, latency_steps: 1, drop_p });
            for m in msgs {
                bus.publish(m);
            }
            let pose = Pose2D::identity();
            let a = bus.collect(AgentId(2), &pose, step, &mut ChaCha8Rng::seed_from_u64(seed));
            let b = bus.collect(AgentId(2), &pose, step, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(a, b);
        }
    }
}

mod platoon_props {
    use super::*;

    fn member(id: u32, x: f64, y: f64, v: f64) -> MemberView {
        MemberView {
            state: VehicleState::new(AgentId(id), Role::PlatoonMember, Pose2D::new(x, y, 0.0), v),
            s: x,
        }
    }

    fn arb_platoon() -> impl Strategy<Value = Vec<MemberView>> {
        prop::collection::vec((-200.0..200.0f64, -10.0..10.0f64, 5.0..30.0f64), 1..8)
            .prop_map(|v| v.into_iter().enumerate().map(|(i, (x, y, s))| member(i as u32 + 1, x, y, s)).collect())
    }

    fn brute_nearest(platoon: &[MemberView], cx: f64, cy: f64) -> usize {
        let d: Vec<f64> = platoon.iter().map(|m| (m.state.pose.x - cx).hypot(m.state.pose.y - cy)).collect();
        let best = d.iter().cloned().fold(f64::INFINITY, f64::min);
        d.iter().position(|&x| x == best).unwrap()
    }

    proptest! {
        #[test]
        fn heuristic_is_brute_force_nearest(platoon in arb_platoon(), cx in -200.0..200.0f64, cy in -10.0..10.0f64, scale in 0.1..10.0f64) {
            let cand = VehicleState::new(AgentId(0), Role::MergingCav, Pose2D::new(cx, cy, 0.0), 15.0);
            let plan = select_merge_position_heuristic(&platoon, &cand, 0.6).unwrap();
            let want = brute_nearest(&platoon, cx, cy);
            prop_assert_eq!(plan.frontal_vehicle, platoon[want].state.id);

            // Scaling is exact only up to rounding; skip layouts with near ties.
            let mut d: Vec<f64> = platoon.iter().map(|m| (m.state.pose.x - cx).hypot(m.state.pose.y - cy)).collect();
            d.sort_by(f64::total_cmp);
            prop_assume!(d.len() < 2 || d[1] - d[0] > 1e-6 * d[1].max(1.0));
            let scaled: Vec<MemberView> = platoon
                .iter()
                .map(|m| member(m.state.id.0, m.state.pose.x * scale, m.state.pose.y * scale, m.state.speed))
                .collect();
            let cand_scaled = VehicleState::new(AgentId(0), Role::MergingCav, Pose2D::new(cx * scale, cy * scale, 0.0), 15.0);
            let plan_scaled = select_merge_position_heuristic(&scaled, &cand_scaled, 0.6).unwrap();
            prop_assert_eq!(plan_scaled.frontal_vehicle, plan.frontal_vehicle);
        }

        #[test]
        fn gfs_picks_a_best_scoring_gap(
            platoon in arb_platoon(),
            cx in -200.0..200.0f64,
            background in prop::collection::vec((-200.0..200.0f64, -5.0..5.0f64), 0..6),
        ) {
            let cand = VehicleState::new(AgentId(0), Role::MergingCav, Pose2D::new(cx, -3.5, 0.0), 15.0);
            let bg: Vec<VehicleState> = background
                .into_iter()
                .enumerate()
                .map(|(i, (x, y))| VehicleState::new(AgentId(100 + i as u32), Role::Background, Pose2D::new(x, y, 0.0), 20.0))
                .collect();
            let plan = select_merge_position_gfs(&platoon, &cand, &bg, 0.6).unwrap();
            let scores = gfs_scores(&platoon, &cand, &bg, 0.6);
            let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let first_best = scores.iter().position(|&s| s == best).unwrap();
            prop_assert_eq!(plan.frontal_vehicle, platoon[first_best].state.id);
        }
    }

    fn beacon(role: Role, x: f64, speed: f64, fsm: FsmState) -> Beacon {
        Beacon {
            role,
            pose: Pose2D::new(x, 0.0, 0.0),
            speed,
            accel: 0.0,
            length: 4.8,
            lane: Some("m".into()),
            s: x,
            fsm: Some(fsm),
            platoon: vec![AgentId(1), AgentId(2), AgentId(3)],
            order_version: 1,
        }
    }

    fn own(x: f64, d: f64, speed: f64, on_accel: bool) -> OwnView {
        OwnView {
            state: VehicleState::new(AgentId(9), Role::MergingCav, Pose2D::new(x, d, 0.0), speed),
            s: x,
            d,
            on_acceleration_lane: on_accel,
            acceleration_start_s: 0.0,
            merge_end_s: 500.0,
        }
    }

    #[derive(Debug, Clone)]
    enum Incoming {
        Beacon { sender: u32, x: f64, speed: f64 },
        Response { frontal: u32 },
        Gap { target: u32, factor: f64 },
        Request { sender: u32 },
    }

    fn arb_incoming() -> impl Strategy<Value = Incoming> {
        prop_oneof![
            (1u32..4, 0.0..300.0f64, 10.0..25.0f64).prop_map(|(sender, x, speed)| Incoming::Beacon { sender, x, speed }),
            (1u32..4).prop_map(|frontal| Incoming::Response { frontal }),
            (1u32..10, 1.0..2.5f64).prop_map(|(target, factor)| Incoming::Gap { target, factor }),
            (4u32..10).prop_map(|sender| Incoming::Request { sender }),
        ]
    }

    fn to_message(inc: &Incoming, step: u64) -> Message {
        let (sender, payload) = match *inc {
            Incoming::Beacon { sender, x, speed } => {
                let role = if sender == 1 { Role::PlatoonLeader } else { Role::PlatoonMember };
                (sender, Payload::StateBeacon(beacon(role, x, speed, FsmState::Maintaining)))
            }
            Incoming::Response { frontal } => (
                1,
                Payload::JoinResponse {
                    candidate: AgentId(9),
                    plan: MergePlan {
                        frontal_vehicle: AgentId(frontal),
                        gap_opener: (frontal < 3).then(|| AgentId(frontal + 1)),
                        target_s: 0.0,
                    },
                },
            ),
            Incoming::Gap { target, factor } => (1, Payload::GapCommand { target: AgentId(target), time_gap: 0.6 * factor }),
            Incoming::Request { sender } => (sender, Payload::JoinRequest { excluded: Vec::new() }),
        };
        Message::new(AgentId(sender), step, Pose2D::identity(), payload)
    }

    fn arb_role() -> impl Strategy<Value = (u32, PlatoonRole)> {
        prop_oneof![
            Just((1, PlatoonRole::Leader)),
            Just((2, PlatoonRole::Member)),
            Just((9, PlatoonRole::Candidate)),
        ]
    }

    proptest! {
        #[test]
        fn fsm_is_deterministic(
            (id, role) in arb_role(),
            policy in prop_oneof![Just(MergePolicy::Heuristic), Just(MergePolicy::Gfs)],
            steps in prop::collection::vec((prop::collection::vec(arb_incoming(), 0..4), 0.0..300.0f64, any::<bool>(), any::<bool>()), 1..30),
        ) {
            let mut a = PlatoonFsm::new(AgentId(id), role, 0.6, policy).with_order(vec![AgentId(1), AgentId(2), AgentId(3)]);
            for (k, (incoming, x, on_accel, clear)) in steps.into_iter().enumerate() {
                let inbox: Vec<Message> = incoming.iter().map(|i| to_message(i, k as u64)).collect();
                let mut view = own(x, if on_accel { -3.5 } else { 0.0 }, 18.0, on_accel);
                view.state.id = AgentId(id);
                let input = FsmInput { step: k as u64, time: k as f64 * 0.05, inbox: &inbox, own: view, clear_to_merge: clear, background: &[] };
                let mut b = a.clone();
                let ra = a.step(&input);
                let rb = b.step(&input);
                prop_assert_eq!(format!("{ra:?}"), format!("{rb:?}"));
                prop_assert_eq!(&a, &b);
                prop_assert!(a.state.allowed_for(role));
            }
        }

        #[test]
        fn candidate_never_joins_without_a_response(
            steps in prop::collection::vec((prop::collection::vec(arb_incoming(), 0..4), 0.0..300.0f64, any::<bool>(), any::<bool>()), 1..60),
        ) {
            let mut fsm = PlatoonFsm::new(AgentId(9), PlatoonRole::Candidate, 0.6, MergePolicy::Heuristic);
            let mut responded = false;
            let mut rank = fsm.state.candidate_rank();
            for (k, (incoming, x, on_accel, clear)) in steps.into_iter().enumerate() {
                let incoming: Vec<Incoming> = incoming.into_iter().filter(|i| !matches!(i, Incoming::Response { .. })).collect();
                let inbox: Vec<Message> = incoming.iter().map(|i| to_message(i, k as u64)).collect();
                let input = FsmInput { step: k as u64, time: k as f64 * 0.05, inbox: &inbox, own: own(x, -3.5, 18.0, on_accel), clear_to_merge: clear, background: &[] };
                let _ = fsm.step(&input);
                responded |= fsm.plan.is_some();
                prop_assert!(!responded);
                prop_assert!(!matches!(fsm.state, FsmState::Joining | FsmState::Complete | FsmState::MovingToPosition));
                // Candidate states only move forward (Abort aside).
                if fsm.state != FsmState::Abort {
                    prop_assert!(fsm.state.candidate_rank() >= rank);
                    rank = fsm.state.candidate_rank();
                }
            }
        }

        #[test]
        fn joining_requires_an_open_slot(
            frontal_x in 20.0..60.0f64,
            opener_gap in 2.0..40.0f64,
            front_speed in 15.0..22.0f64,
            opener_speed in 15.0..22.0f64,
            align_err in -0.1..0.1f64,
            dv in -0.8..0.8f64,
            clear in any::<bool>(),
        ) {
            let mut fsm = PlatoonFsm::new(AgentId(9), PlatoonRole::Candidate, 0.6, MergePolicy::Heuristic)
                .with_order(vec![AgentId(1), AgentId(2)]);
            let opener_x = frontal_x - 4.8 - opener_gap;
            let own_speed = front_speed + dv;
            let own_x = frontal_x - 4.8 - own_speed * 0.6 * (1.0 + align_err);
            let inbox = vec![
                Message::new(AgentId(1), 0, Pose2D::identity(), Payload::StateBeacon(beacon(Role::PlatoonLeader, frontal_x, front_speed, FsmState::Leading))),
                Message::new(AgentId(2), 0, Pose2D::identity(), Payload::StateBeacon(beacon(Role::PlatoonMember, opener_x, opener_speed, FsmState::OpeningGap))),
                Message::new(AgentId(1), 0, Pose2D::identity(), Payload::JoinResponse {
                    candidate: AgentId(9),
                    plan: MergePlan { frontal_vehicle: AgentId(1), gap_opener: Some(AgentId(2)), target_s: 0.0 },
                }),
            ];
            fsm.state = FsmState::JoinRequested;
            let input = FsmInput { step: 1, time: 0.05, inbox: &inbox, own: own(own_x, -3.5, own_speed, true), clear_to_merge: clear, background: &[] };
            let out = fsm.step(&input).unwrap();
            let slot_open = opener_gap / opener_speed >= 1.5 * 0.6;
            prop_assert_eq!(out.state == FsmState::Joining, clear && slot_open, "slot {}", opener_gap / opener_speed);
        }
    }
}

mod evaluation_props {
    use super::*;

    /// Ground truth on a sparse grid; detections are exact copies of some of
    /// them or far-away false positives.
    fn arb_case() -> impl Strategy<Value = (Vec<OrientedBox>, Vec<ScoredBox>)> {
        (1usize..8)
            .prop_flat_map(|n| {
                (
                    Just(n),
                    prop::collection::vec(any::<bool>(), n),
                    prop::collection::vec(0.0..1.0f64, n),
                    prop::collection::vec((0.0..1.0f64, -50.0..50.0f64), 0..6),
                )
            })
            .prop_map(|(n, keep, scores, fps)| {
                let gt: Vec<OrientedBox> = (0..n).map(|i| OrientedBox::new(i as f64 * 20.0, 0.0, 4.8, 2.0, 0.0)).collect();
                let mut dets: Vec<ScoredBox> = gt
                    .iter()
                    .zip(keep.iter().zip(&scores))
                    .filter(|(_, (k, _))| **k)
                    .map(|(g, (_, &s))| ScoredBox { score: s, bbox: *g })
                    .collect();
                dets.extend(fps.into_iter().map(|(s, x)| ScoredBox { score: s, bbox: OrientedBox::new(x, 40.0, 4.8, 2.0, 0.0) }));
                (gt, dets)
            })
    }

    proptest! {
        #[test]
        fn ap_ignores_monotone_score_maps((gt, dets) in arb_case()) {
            let base = average_precision(&dets, &gt, 0.5).unwrap();
            for f in [|s: f64| s.powi(3), |s: f64| (4.0 * s).exp() - 7.0, |s: f64| 10.0 * s + 2.0] {
                let mapped: Vec<ScoredBox> = dets.iter().map(|d| ScoredBox { score: f(d.score), ..*d }).collect();
                let ap = average_precision(&mapped, &gt, 0.5).unwrap();
                prop_assert!((ap - base).abs() < 1e-12, "{ap} vs {base}");
            }
        }

        #[test]
        fn matching_detection_never_lowers_ap((gt, dets) in arb_case(), score in 0.0..1.0f64, pick in any::<prop::sample::Index>()) {
            let matched: Vec<bool> = gt.iter().map(|g| dets.iter().any(|d| d.bbox == *g)).collect();
            let free: Vec<usize> = (0..gt.len()).filter(|&i| !matched[i]).collect();
            prop_assume!(!free.is_empty());
            let g = free[pick.index(free.len())];
            let mut more = dets.clone();
            more.push(ScoredBox { score, bbox: gt[g] });
            let before = average_precision(&dets, &gt, 0.5).unwrap();
            let after = average_precision(&more, &gt, 0.5).unwrap();
            prop_assert!(after >= before - 1e-12, "{after} < {before}");
        }

        #[test]
        fn lowest_false_positive_keeps_existing_curve((gt, dets) in arb_case()) {
            let lowest = dets.iter().map(|d| d.score).fold(1.0, f64::min);
            let mut more = dets.clone();
            more.push(ScoredBox { score: lowest - 1.0, bbox: OrientedBox::new(0.0, -60.0, 4.8, 2.0, 0.0) });
            let before = pr_curve(&dets, &gt, 0.5);
            let after = pr_curve(&more, &gt, 0.5);
            prop_assert_eq!(&after[..before.len()], &before[..]);
            let last = after.last().unwrap();
            if let Some(prev) = before.last() {
                prop_assert_eq!(last.0, prev.0);
                prop_assert!(last.1 <= prev.1);
            }
        }

        #[test]
        fn hazard_count_survives_resampling(
            series in prop::collection::vec(prop::collection::vec(0.0..6.0f64, 0..40), 1..4),
            factor in 1usize..6,
        ) {
            let fine: Vec<Vec<f64>> = series
                .iter()
                .map(|s| s.iter().flat_map(|&v| std::iter::repeat_n(v, factor)).collect())
                .collect();
            prop_assert_eq!(hazard_frequency(&series, 2.5), hazard_frequency(&fine, 2.5));
        }

        #[test]
        fn ttc_is_scale_free(gap in 0.1..200.0f64, v_lead in 0.0..30.0f64, closing in 0.01..20.0f64) {
            let a = ttc_from_gap(gap, v_lead + closing, v_lead);
            let b = ttc_from_gap(2.0 * gap, v_lead + 2.0 * closing, v_lead);
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0), "{a} vs {b}");
        }
    }
}

mod datalog_props {
    use super::*;

    fn micro() -> impl Strategy<Value = f64> {
        (-100_000_000i64..100_000_000).prop_map(|k| k as f64 / 1e6)
    }

    fn arb_agent_frame(id: u32) -> impl Strategy<Value = AgentFrame> {
        (
            (micro(), micro(), (-3_000_000i64..3_000_000).prop_map(|k| k as f64 / 1e6), (0i64..40_000_000).prop_map(|k| k as f64 / 1e6)),
            (micro(), micro()),
            prop::option::of(prop::collection::vec(micro(), 8)),
            prop::collection::vec((1u32..20, 0u32..50), 0..4),
            prop_oneof![Just(None), Just(Some(FsmState::Maintaining)), Just(Some(FsmState::Joining))],
        )
            .prop_map(move |((x, y, yaw, v), (a, d), est, hits, fsm)| {
                let state = VehicleState::new(AgentId(id), Role::PlatoonMember, Pose2D { x, y, yaw }, v);
                AgentFrame {
                    state,
                    estimate: est.map(|e| EstimateRecord {
                        mean: [e[0], e[1], e[2], e[3]],
                        variance: [e[4].abs(), e[5].abs(), e[6].abs(), e[7].abs()],
                    }),
                    fsm,
                    command: ControlCommand::new(a, d),
                    lane: Some("m".into()),
                    s: x,
                    d: y,
                    detections: Vec::new(),
                    hits: HitRecord(hits.into_iter().map(|(t, h)| (AgentId(t), h)).collect()),
                }
            })
    }

    fn arb_frames() -> impl Strategy<Value = Vec<FrameRecord>> {
        (1usize..4, 1usize..6).prop_flat_map(|(agents, steps)| {
            prop::collection::vec(
                (0..agents as u32).map(arb_agent_frame).collect::<Vec<_>>(),
                steps,
            )
            .prop_map(|frames| {
                frames
                    .into_iter()
                    .enumerate()
                    .map(|(k, agents)| {
                        let mut f = FrameRecord::empty(k as u64, k as f64 * 0.05);
                        f.time = (f.time * 1e6).round() / 1e6;
                        f.agents = agents.into_iter().map(|a| (a.state.id, a)).collect();
                        f.platoon = f.agents.keys().copied().collect();
                        f
                    })
                    .collect()
            })
        })
    }

    proptest! {
        #[test]
        fn save_then_load_is_identity(frames in arb_frames()) {
            let mut text = String::new();
            for f in &frames {
                text.push_str(&encode_line(f).unwrap());
                text.push('\n');
            }
            let replay = parse_replay(&text).unwrap();
            prop_assert!(replay.header.is_none());
            prop_assert_eq!(replay.frames, frames);
        }
    }
}
