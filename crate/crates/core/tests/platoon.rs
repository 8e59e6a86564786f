use cdasim::control::{bumper_gap, gap_control, GapGains};
use cdasim::dynamics::{step_bicycle, ControlCommand, VehicleLimits};
use cdasim::geometry::Pose2D;
use cdasim::platoon::fuzzy::merge_rule_base;
use cdasim::platoon::{
    gfs_inputs, gfs_scores, select_merge_position_gfs, select_merge_position_heuristic, FsmInput, FsmOutput, FsmState,
    Maneuver, MemberView, MergePlan, MergePolicy, OwnView, PlatoonFsm, PlatoonRole,
};
use cdasim::v2x::{Beacon, Message, MessageKind, Payload};
use cdasim::world::{AgentId, Role, VehicleState};
use cdasim::Error;

const TAU: f64 = 0.6;

fn member(id: u32, x: f64, v: f64) -> MemberView {
    MemberView {
        state: VehicleState::new(AgentId(id), Role::PlatoonMember, Pose2D::new(x, 0.0, 0.0), v),
        s: x,
    }
}

fn candidate(x: f64, y: f64, v: f64) -> VehicleState {
    VehicleState::new(AgentId(9), Role::MergingCav, Pose2D::new(x, y, 0.0), v)
}

/// Equilibrium platoon at 20 m/s: members 1, 2, 3 spaced by one car length
/// plus the default time gap.
fn platoon() -> Vec<MemberView> {
    vec![member(1, 60.0, 20.0), member(2, 43.2, 20.0), member(3, 26.4, 20.0)]
}

fn tri(a: f64, b: f64, c: f64, x: f64) -> f64 {
    if x < a || x > c {
        0.0
    } else if x == b {
        1.0
    } else if x < b {
        (x - a) / (b - a)
    } else {
        (c - x) / (c - b)
    }
}

/// Centroid of the clipped low/medium/high score sets, integrated finely.
fn centroid(levels: [f64; 3]) -> f64 {
    let terms = [(0.0, 0.0, 0.5), (0.25, 0.5, 0.75), (0.5, 1.0, 1.0)];
    let n = 100_001;
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..n {
        let z = k as f64 / (n - 1) as f64;
        let mu = terms
            .iter()
            .zip(levels)
            .map(|(&(a, b, c), l)| tri(a, b, c, z).min(l))
            .fold(0.0, f64::max);
        num += z * mu;
        den += mu;
    }
    num / den
}

#[test]
fn gfs_skips_a_blocked_nearest_gap() {
    let p = platoon();
    let cand = candidate(45.0, -3.5, 20.0);
    // Background car in the next lane, level with the slot behind member 2.
    let bg = vec![VehicleState::new(AgentId(20), Role::Background, Pose2D::new(26.4, -3.5, 0.0), 20.0)];

    assert_eq!(select_merge_position_heuristic(&p, &cand, TAU).unwrap().frontal_vehicle, AgentId(2));

    // Crisp inputs worked out from the slot geometry.
    let d = [15.0f64.hypot(3.5), 1.8f64.hypot(3.5), 18.6f64.hypot(3.5)];
    let dmax = d[2];
    let space_far = 16.8f64.hypot(3.5) / 20.0;
    let want_inputs = [[d[0] / dmax, 0.0, space_far], [d[1] / dmax, 0.0, 3.5 / 20.0], [1.0, 0.0, space_far]];
    let inputs = gfs_inputs(&p, &cand, &bg, TAU);
    for (got, want) in inputs.iter().zip(&want_inputs) {
        for i in 0..3 {
            assert!((got[i] - want[i]).abs() < 1e-9, "{got:?} vs {want:?}");
        }
    }

    // Rule activations by hand (equal speeds, so only the EQUAL speed term fires).
    let clear = (space_far - 0.4) / 0.6;
    let n0 = d[0] / dmax;
    let levels_ahead = [(n0 - 0.5) / 0.5, ((1.0 - n0) / 0.5).min(clear), clear];
    let n1 = d[1] / dmax;
    let near1 = (0.5 - n1) / 0.5;
    let mid1 = n1 / 0.5;
    let blocked1 = (0.35 - 0.175) / 0.35;
    let tight1 = (0.175 - 0.15) / 0.25;
    let levels_blocked = [mid1.min(tight1).max(blocked1), near1.min(tight1), 0.0];
    let levels_behind = [1.0, 0.0, clear];

    let fs = merge_rule_base();
    for (x, want) in inputs.iter().zip([levels_ahead, levels_blocked, levels_behind]) {
        let got = fs.output_levels(x);
        for i in 0..3 {
            assert!((got[i] - want[i]).abs() < 1e-9, "levels {got:?} vs {want:?}");
        }
    }

    let scores = gfs_scores(&p, &cand, &bg, TAU);
    for (s, levels) in scores.iter().zip([levels_ahead, levels_blocked, levels_behind]) {
        assert!((s - centroid(levels)).abs() < 2e-3, "score {s} vs {}", centroid(levels));
    }
    assert!(scores[0] > scores[2] && scores[2] > scores[1], "{scores:?}");

    let plan = select_merge_position_gfs(&p, &cand, &bg, TAU).unwrap();
    assert_eq!(plan.frontal_vehicle, AgentId(1));
    assert_eq!(plan.gap_opener, Some(AgentId(2)));
}

#[test]
fn gfs_agrees_with_heuristic_on_symmetric_scenes() {
    let p: Vec<MemberView> = (0..4).map(|i| member(i + 1, 60.0 - 16.8 * i as f64, 20.0)).collect();
    for x in [62.0, 50.0, 43.0, 30.0, 20.0, 10.0, -5.0] {
        let cand = candidate(x, -3.5, 20.0);
        let h = select_merge_position_heuristic(&p, &cand, TAU).unwrap();
        let g = select_merge_position_gfs(&p, &cand, &[], TAU).unwrap();
        assert_eq!(h, g, "candidate at {x}");
    }
}

#[test]
fn gap_opener_reaches_the_enlarged_gap() {
    let limits = VehicleLimits::default();
    let gains = GapGains::default();
    let dt = 0.05;
    let v = 20.0;
    let mut cars: Vec<VehicleState> = (0..4)
        .map(|i| VehicleState::new(AgentId(i), Role::PlatoonMember, Pose2D::new(-(4.8 + v * TAU) * i as f64, 0.0, 0.0), v))
        .collect();
    // Member 2 opens a gap behind member 1.
    let gaps = [TAU, TAU, 2.0 * TAU, TAU];
    let mut reached = None;
    for k in 1..=(8.0 / dt) as usize {
        let mut next = cars.clone();
        next[0] = step_bicycle(&cars[0], ControlCommand::default(), dt, &limits).unwrap();
        for i in 1..cars.len() {
            let a = gap_control(&cars[i], &cars[i - 1], gaps[i], &gains, &limits).unwrap();
            next[i] = step_bicycle(&cars[i], ControlCommand::new(a, 0.0), dt, &limits).unwrap();
        }
        cars = next;
        let tg = bumper_gap(&cars[2], &cars[1]).unwrap() / cars[2].speed;
        if tg >= 1.8 * TAU && reached.is_none() {
            reached = Some(k as f64 * dt);
        }
    }
    let t = reached.expect("gap never reached 1.8x default within 8 s");
    assert!(t <= 8.0);
}

// Transition table.

fn beacon(role: Role, x: f64, speed: f64, fsm: FsmState) -> Beacon {
    Beacon {
        role,
        pose: Pose2D::new(x, if role == Role::MergingCav { -3.5 } else { 0.0 }, 0.0),
        speed,
        accel: 0.0,
        length: 4.8,
        lane: Some("main".into()),
        s: x,
        fsm: Some(fsm),
        platoon: vec![AgentId(1), AgentId(2), AgentId(3)],
        order_version: 1,
    }
}

fn msg(sender: u32, payload: Payload) -> Message {
    Message::new(AgentId(sender), 0, Pose2D::identity(), payload)
}

fn platoon_beacons() -> Vec<Message> {
    vec![
        msg(1, Payload::StateBeacon(beacon(Role::PlatoonLeader, 60.0, 20.0, FsmState::Leading))),
        msg(2, Payload::StateBeacon(beacon(Role::PlatoonMember, 43.2, 20.0, FsmState::Maintaining))),
        msg(3, Payload::StateBeacon(beacon(Role::PlatoonMember, 26.4, 20.0, FsmState::Maintaining))),
    ]
}

fn own(id: u32, x: f64, d: f64, on_accel: bool) -> OwnView {
    OwnView {
        state: VehicleState::new(AgentId(id), Role::MergingCav, Pose2D::new(x, d, 0.0), 20.0),
        s: x,
        d,
        on_acceleration_lane: on_accel,
        acceleration_start_s: 0.0,
        merge_end_s: 500.0,
    }
}

fn step(fsm: &mut PlatoonFsm, time: f64, inbox: &[Message], own: OwnView, clear: bool) -> Result<FsmOutput, Error> {
    fsm.step(&FsmInput {
        step: (time / 0.05).round() as u64,
        time,
        inbox,
        own,
        clear_to_merge: clear,
        background: &[],
    })
}

fn kinds(out: &FsmOutput) -> Vec<MessageKind> {
    out.outbox.iter().map(Payload::kind).collect()
}

fn response(frontal: u32, opener: Option<u32>) -> Message {
    msg(
        1,
        Payload::JoinResponse {
            candidate: AgentId(9),
            plan: MergePlan {
                frontal_vehicle: AgentId(frontal),
                gap_opener: opener.map(AgentId),
                target_s: 0.0,
            },
        },
    )
}

fn candidate_fsm() -> PlatoonFsm {
    PlatoonFsm::new(AgentId(9), PlatoonRole::Candidate, TAU, MergePolicy::Heuristic)
}

/// Candidate that already holds a plan behind member 2 with member 3 opening.
fn planned(state: FsmState) -> PlatoonFsm {
    let mut fsm = candidate_fsm();
    fsm.state = state;
    fsm.plan = Some(MergePlan {
        frontal_vehicle: AgentId(2),
        gap_opener: Some(AgentId(3)),
        target_s: 0.0,
    });
    fsm
}

#[test]
fn candidate_searching_transitions() {
    // Beacon heard near the acceleration lane: request.
    let mut fsm = candidate_fsm();
    let out = step(&mut fsm, 1.0, &platoon_beacons(), own(9, 10.0, -3.5, true), false).unwrap();
    assert_eq!(out.state, FsmState::JoinRequested);
    assert_eq!(kinds(&out), vec![MessageKind::JoinRequest]);
    assert!(fsm.deadline.is_some());

    // Nothing heard: keep searching.
    let mut fsm = candidate_fsm();
    let out = step(&mut fsm, 1.0, &[], own(9, 10.0, -3.5, true), false).unwrap();
    assert_eq!(out.state, FsmState::Searching);
    assert_eq!(out.maneuver, Maneuver::Cruise);

    // Heard, but still far up the ramp.
    let mut fsm = candidate_fsm();
    let mut far = own(9, 10.0, -3.5, false);
    far.acceleration_start_s = 200.0;
    let out = step(&mut fsm, 1.0, &platoon_beacons(), far, false).unwrap();
    assert_eq!(out.state, FsmState::Searching);
    assert!(out.outbox.is_empty());

    // A response nobody asked for is a protocol error.
    let mut fsm = candidate_fsm();
    let err = step(&mut fsm, 1.0, &[response(2, Some(3))], own(9, 10.0, -3.5, true), false).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)));
    assert_eq!(fsm.state, FsmState::Abort);
}

#[test]
fn candidate_request_transitions() {
    let mut fsm = candidate_fsm();
    step(&mut fsm, 1.0, &platoon_beacons(), own(9, 10.0, -3.5, true), false).unwrap();

    // No answer within the retry period: ask again.
    let out = step(&mut fsm, 2.0, &[], own(9, 10.0, -3.5, true), false).unwrap();
    assert_eq!(out.state, FsmState::JoinRequested);
    assert_eq!(kinds(&out), vec![MessageKind::JoinRequest]);
    let out = step(&mut fsm, 2.5, &[], own(9, 10.0, -3.5, true), false).unwrap();
    assert!(out.outbox.is_empty());

    // Answer arrives while out of position: follow the frontal vehicle.
    let out = step(&mut fsm, 2.6, &[response(2, Some(3))], own(9, 0.0, -3.5, true), false).unwrap();
    assert_eq!(out.state, FsmState::MovingToPosition);
    assert_eq!(out.maneuver, Maneuver::FollowGap { leader: AgentId(2), time_gap: TAU });
}

#[test]
fn candidate_moving_transitions() {
    // Aligned 12 m behind member 2 at equal speed; member 3 opened its gap.
    let opened = vec![
        msg(2, Payload::StateBeacon(beacon(Role::PlatoonMember, 43.2, 20.0, FsmState::Maintaining))),
        msg(3, Payload::StateBeacon(beacon(Role::PlatoonMember, 43.2 - 4.8 - 24.0, 20.0, FsmState::OpeningGap))),
    ];
    let aligned = 43.2 - 4.8 - 12.0;

    let mut fsm = planned(FsmState::MovingToPosition);
    let out = step(&mut fsm, 5.0, &opened, own(9, aligned, -3.5, true), true).unwrap();
    assert_eq!(out.state, FsmState::Joining);
    assert_eq!(out.maneuver, Maneuver::LaneChange { behind: AgentId(2), time_gap: TAU });

    // Slot still at the default gap: wait.
    let mut fsm = planned(FsmState::MovingToPosition);
    let out = step(&mut fsm, 5.0, &platoon_beacons(), own(9, aligned, -3.5, true), true).unwrap();
    assert_eq!(out.state, FsmState::MovingToPosition);

    // Still on the ramp: wait.
    let mut fsm = planned(FsmState::MovingToPosition);
    let out = step(&mut fsm, 5.0, &opened, own(9, aligned, -3.5, false), true).unwrap();
    assert_eq!(out.state, FsmState::MovingToPosition);

    // Blocked beside the slot long enough: ask for another one.
    let mut fsm = planned(FsmState::MovingToPosition);
    let out = step(&mut fsm, 5.0, &opened, own(9, aligned, -3.5, true), false).unwrap();
    assert!(out.outbox.is_empty());
    let out = step(&mut fsm, 9.0, &[], own(9, aligned, -3.5, true), false).unwrap();
    assert_eq!(out.state, FsmState::MovingToPosition);
    assert_eq!(out.outbox, vec![Payload::JoinRequest { excluded: vec![AgentId(2)] }]);
    assert!(fsm.awaiting_response);
}

#[test]
fn candidate_joining_and_terminal_transitions() {
    let beacons = platoon_beacons();
    let settled = 43.2 - 4.8 - 12.0;

    let mut fsm = planned(FsmState::Joining);
    let out = step(&mut fsm, 6.0, &beacons, own(9, settled, 0.1, false), true).unwrap();
    assert_eq!(out.state, FsmState::Complete);

    // Still beside the lane.
    let mut fsm = planned(FsmState::Joining);
    let out = step(&mut fsm, 6.0, &beacons, own(9, settled, 0.5, false), true).unwrap();
    assert_eq!(out.state, FsmState::Joining);

    // In lane but 30% short of the desired gap.
    let mut fsm = planned(FsmState::Joining);
    let out = step(&mut fsm, 6.0, &beacons, own(9, settled + 3.6, 0.0, false), true).unwrap();
    assert_eq!(out.state, FsmState::Joining);

    // Deadline passed: every open state aborts, Complete stays.
    for state in [FsmState::JoinRequested, FsmState::MovingToPosition, FsmState::Joining] {
        let mut fsm = planned(state);
        fsm.deadline = Some(10.0);
        let out = step(&mut fsm, 10.05, &[], own(9, 0.0, -3.5, true), false).unwrap();
        assert_eq!(out.state, FsmState::Abort, "from {state:?}");
        assert_eq!(out.maneuver, Maneuver::Hold);
    }
    let mut fsm = planned(FsmState::Complete);
    fsm.deadline = Some(10.0);
    let out = step(&mut fsm, 10.05, &[], own(9, settled, 0.0, false), true).unwrap();
    assert_eq!(out.state, FsmState::Complete);
}

#[test]
fn member_transitions() {
    let order = vec![AgentId(1), AgentId(2), AgentId(3)];
    let mut fsm = PlatoonFsm::new(AgentId(3), PlatoonRole::Member, TAU, MergePolicy::Heuristic).with_order(order);

    let other = msg(1, Payload::GapCommand { target: AgentId(2), time_gap: 2.0 * TAU });
    let out = step(&mut fsm, 1.0, &[other], own(3, 26.4, 0.0, false), false).unwrap();
    assert_eq!(out.state, FsmState::Maintaining);
    assert_eq!(out.maneuver, Maneuver::FollowGap { leader: AgentId(2), time_gap: TAU });

    let mine = msg(1, Payload::GapCommand { target: AgentId(3), time_gap: 2.0 * TAU });
    let out = step(&mut fsm, 1.05, &[mine], own(3, 26.4, 0.0, false), false).unwrap();
    assert_eq!(out.state, FsmState::OpeningGap);
    assert_eq!(out.maneuver, Maneuver::FollowGap { leader: AgentId(2), time_gap: 2.0 * TAU });

    let restore = msg(1, Payload::GapCommand { target: AgentId(3), time_gap: TAU });
    let out = step(&mut fsm, 1.1, &[restore], own(3, 26.4, 0.0, false), false).unwrap();
    assert_eq!(out.state, FsmState::Maintaining);
    assert_eq!(fsm.time_gap, TAU);
}

#[test]
fn leader_plans_and_admits_a_candidate() {
    let order = vec![AgentId(1), AgentId(2), AgentId(3)];
    let mut fsm = PlatoonFsm::new(AgentId(1), PlatoonRole::Leader, TAU, MergePolicy::Heuristic).with_order(order);
    let mut inbox = platoon_beacons()[1..].to_vec();
    inbox.push(msg(9, Payload::StateBeacon(beacon(Role::MergingCav, 45.0, 20.0, FsmState::JoinRequested))));
    inbox.push(msg(9, Payload::JoinRequest { excluded: Vec::new() }));
    let mut me = own(1, 60.0, 0.0, false);
    me.state.role = Role::PlatoonLeader;

    let out = step(&mut fsm, 1.0, &inbox, me.clone(), false).unwrap();
    assert_eq!(out.state, FsmState::Leading);
    let plan = MergePlan {
        frontal_vehicle: AgentId(2),
        gap_opener: Some(AgentId(3)),
        target_s: 43.2 - 2.4 - 20.0 * TAU - 2.4,
    };
    assert_eq!(
        out.outbox,
        vec![
            Payload::GapCommand { target: AgentId(3), time_gap: 2.0 * TAU },
            Payload::JoinResponse { candidate: AgentId(9), plan },
        ]
    );

    let done = vec![msg(9, Payload::StateBeacon(beacon(Role::MergingCav, 26.4, 20.0, FsmState::Complete)))];
    step(&mut fsm, 10.0, &done, me.clone(), false).unwrap();
    assert_eq!(fsm.order, vec![AgentId(1), AgentId(2), AgentId(9), AgentId(3)]);
    step(&mut fsm, 10.05, &done, me, false).unwrap();
    assert_eq!(fsm.order.iter().filter(|&&id| id == AgentId(9)).count(), 1);
}

#[test]
fn every_role_starts_in_a_legal_state() {
    let states = [
        FsmState::Maintaining,
        FsmState::Leading,
        FsmState::Searching,
        FsmState::JoinRequested,
        FsmState::MovingToPosition,
        FsmState::OpeningGap,
        FsmState::Joining,
        FsmState::Complete,
        FsmState::Abort,
    ];
    let legal = |role: PlatoonRole| -> Vec<FsmState> { states.iter().copied().filter(|s| s.allowed_for(role)).collect() };
    assert_eq!(legal(PlatoonRole::Leader), vec![FsmState::Leading]);
    assert_eq!(legal(PlatoonRole::Member), vec![FsmState::Maintaining, FsmState::OpeningGap]);
    assert_eq!(
        legal(PlatoonRole::Candidate),
        vec![
            FsmState::Searching,
            FsmState::JoinRequested,
            FsmState::MovingToPosition,
            FsmState::Joining,
            FsmState::Complete,
            FsmState::Abort,
        ]
    );
    for role in [PlatoonRole::Leader, PlatoonRole::Member, PlatoonRole::Candidate] {
        let fsm = PlatoonFsm::new(AgentId(1), role, TAU, MergePolicy::Gfs);
        assert!(fsm.state.allowed_for(role));
    }
}
