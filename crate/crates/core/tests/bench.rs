use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sphdiff::bench::*;
use sphdiff::so3::{random_rotation, Rotation};

fn tiny_policy() -> Policy {
    let mut cfg = PolicyConfig::default();
    cfg.sdtu.widths = vec![2, 4];
    cfg.encoder.hidden = vec![4];
    cfg.encoder.out_channels = 4;
    Policy::new(cfg).unwrap()
}

#[test]
fn expert_ends_at_the_goal() {
    let spec = TaskSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let inst = spec.sample_instance(&mut rng, Rotation::identity());
        let traj = spec.expert(&inst);
        assert_eq!(traj.len(), spec.episode_steps);
        let last = traj.last().unwrap();
        assert!((last.position - inst.goal.pos).norm() < 1e-12);
        assert!((last.rotation.matrix() - inst.goal.rot.matrix()).amax() < 1e-12);
        let (p, r) = spec.errors(&inst, last);
        assert!(spec.is_success(p, r));
        let closed = traj.iter().filter(|e| e.aperture == 0.0).count();
        assert_eq!(closed, spec.close_steps);
    }
}

#[test]
fn expert_steps_are_even() {
    // constant twist: consecutive waypoints are equally far apart
    let spec = TaskSpec::default();
    let inst = spec.sample_instance(&mut ChaCha8Rng::seed_from_u64(2), Rotation::identity());
    let mut prev = inst.start.to_ee(1.0);
    let mut angles = Vec::new();
    for e in spec.expert(&inst) {
        angles.push(e.rotation.angle_to(&prev.rotation));
        prev = e;
    }
    let (lo, hi) = angles.iter().fold((f64::MAX, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
    assert!(hi - lo < 1e-9, "{angles:?}");
}

#[test]
fn rotated_scenes_give_rotated_trajectories() {
    let spec = TaskSpec::default();
    let mut rot_rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..50 {
        let world = random_rotation(&mut rot_rng);
        let a = spec.sample_instance(&mut ChaCha8Rng::seed_from_u64(seed), Rotation::identity());
        let b = spec.sample_instance(&mut ChaCha8Rng::seed_from_u64(seed), world);
        let pivot = spec.start.pos;
        for (x, y) in spec.expert(&a).iter().zip(&spec.expert(&b)) {
            let p = world.apply(&(x.position - pivot)) + pivot;
            let r = world.compose(&x.rotation);
            assert!((p - y.position).norm() < 1e-10);
            assert!((r.matrix() - y.rotation.matrix()).amax() < 1e-10);
            assert_eq!(x.aperture, y.aperture);
        }
    }
}

#[test]
fn zero_demos_is_empty() {
    let d = gen_demos(&TaskSpec::default(), 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(d.is_empty());
}

#[test]
fn jsonl_round_trip() {
    let d = gen_demos(&TaskSpec::default(), 5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut buf = Vec::new();
    d.write_jsonl(&mut buf).unwrap();
    assert_eq!(String::from_utf8_lossy(&buf).lines().count(), 5);
    assert_close(&Dataset::read_jsonl(&buf[..]).unwrap(), &d);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    d.save(&path).unwrap();
    assert_close(&Dataset::load(&path).unwrap(), &d);
}

/// Rotations are re-orthonormalized on load, so the last bits may move.
fn assert_close(a: &Dataset, b: &Dataset) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.episodes.iter().zip(&b.episodes) {
        assert_eq!(x.obs, y.obs);
        assert_eq!(x.start, y.start);
        assert_eq!(x.object, y.object);
        assert_eq!(x.len(), y.len());
        for (p, q) in x.actions.iter().flatten().zip(y.actions.iter().flatten()) {
            assert!((p.position - q.position).amax() < 1e-15);
            assert!((p.rotation.matrix() - q.rotation.matrix()).amax() < 1e-14);
            assert_eq!(p.aperture, q.aperture);
        }
    }
}

#[test]
fn malformed_jsonl_is_rejected() {
    assert!(Dataset::read_jsonl(&b"{\"points\":[]}\n"[..]).is_err());
    assert!(Dataset::read_jsonl(&b"not json\n"[..]).is_err());
}

#[test]
fn demos_are_reproducible() {
    let spec = TaskSpec::default();
    let a = gen_demos(&spec, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = gen_demos(&spec, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn episode_windows_pad_at_both_ends() {
    let d = gen_demos(&TaskSpec::default(), 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let e = &d.episodes[0];
    let (w, a) = e.sample(0, 2, 16).unwrap();
    assert_eq!(w.frames[0].ee, e.start);
    assert_eq!(w.frames[1].ee, e.start);
    assert_eq!(a.steps[0], e.actions[0]);
    let (_, a) = e.sample(e.len() - 1, 2, 4).unwrap();
    assert!(a.steps.iter().all(|s| *s == e.actions[e.len() - 1]));
    assert!(e.sample(e.len(), 2, 4).is_err());
}

#[test]
fn rotation_sets_parse() {
    assert_eq!("identity".parse::<RotationSet>().unwrap(), RotationSet::Identity);
    assert_eq!("haar".parse::<RotationSet>().unwrap(), RotationSet::Haar);
    assert_eq!("tilt:30".parse::<RotationSet>().unwrap(), RotationSet::Tilt(30.0));
    assert_eq!(RotationSet::Tilt(15.0).to_string(), "tilt:15");
    for bad in ["tilt:", "tilt:200", "tilt:x", "random", ""] {
        assert!(bad.parse::<RotationSet>().is_err(), "{bad}");
    }
}

#[test]
fn symmetric_templates_are_rejected() {
    let mut spec = TaskSpec::default();
    spec.template = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0]]
        .into_iter()
        .map(|pos| TemplatePoint { pos, color: [1.0, 0.0, 0.0] })
        .collect();
    assert!(spec.validate().is_err());
    spec.template.truncate(3);
    assert!(spec.validate().is_err());
    assert!(TaskSpec::default().validate().is_ok());
}

#[test]
fn task_toml_round_trip() {
    let spec = TaskSpec { yaw_range_deg: 12.5, ..TaskSpec::default() };
    assert_eq!(TaskSpec::from_toml_str(&spec.to_toml()).unwrap(), spec);
    assert!(TaskSpec::from_toml_str("bogus = 1").is_err());
}

#[test]
fn observations_rotate_with_the_scene() {
    let spec = TaskSpec { sigma_pcd: 0.01, ..TaskSpec::default() };
    let world = Rotation::from_axis_angle(Vector3::new(1.0, 1.0, 0.0), 2.0);
    let mut ra = ChaCha8Rng::seed_from_u64(6);
    let mut rb = ChaCha8Rng::seed_from_u64(6);
    let a = spec.sample_instance(&mut ra, Rotation::identity());
    let b = spec.sample_instance(&mut rb, world);
    let (oa, ob) = (spec.observe(&a, &mut ra), spec.observe(&b, &mut rb));
    for (p, q) in oa.points.iter().zip(&ob.points) {
        assert!((world.apply(&(p - spec.start.pos)) + spec.start.pos - q).norm() < 1e-12);
    }
    assert_eq!(oa.colors, ob.colors);
}

#[test]
fn closed_loop_rollouts_are_equivariant() {
    // identical scenes and noise up to the scene rotation give identical errors
    let policy = tiny_policy();
    let params = policy.init(0).unwrap();
    let spec = TaskSpec::default();
    for i in 0..4 {
        let a = rollout(&policy, &params, &spec, RotationSet::Identity, 3, i).unwrap();
        let b = rollout(&policy, &params, &spec, RotationSet::Haar, 3, i).unwrap();
        assert!((a.pos_err - b.pos_err).abs() < 1e-9, "{a:?} {b:?}");
        assert!((a.rot_err_deg - b.rot_err_deg).abs() < 1e-6);
        assert!(b.rotation_deg > 0.0);
    }
}

#[test]
fn training_and_evaluation_are_deterministic() {
    let policy = tiny_policy();
    let data = gen_demos(&TaskSpec::default(), 3, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size: 4, ..Default::default() };
    let a = train(&policy, &data, &cfg, |_| {}).unwrap();
    let b = train(&policy, &data, &cfg, |_| {}).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.losses.len(), 2);
    assert!(a.losses.iter().all(|l| l.loss.is_finite()));
    let spec = TaskSpec::default();
    let (ra, xa) = evaluate(&policy, &a.params, &spec, 3, RotationSet::Haar, 1).unwrap();
    let (rb, xb) = evaluate(&policy, &b.params, &spec, 3, RotationSet::Haar, 1).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(xa, xb);
    assert_eq!(ra.buckets.iter().map(|b| b.rollouts).sum::<usize>(), 3);
}

#[test]
fn training_rejects_bad_configs() {
    let policy = tiny_policy();
    let data = gen_demos(&TaskSpec::default(), 1, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    for cfg in [
        TrainConfig { batch_size: 0, ..Default::default() },
        TrainConfig { lr: -1.0, ..Default::default() },
        TrainConfig { sample_stride: 0, ..Default::default() },
    ] {
        assert!(train(&policy, &data, &cfg, |_| {}).is_err());
    }
}

fn tiny_policy_l(l: usize) -> Policy {
    let mut cfg = PolicyConfig::default();
    cfg.sdtu.widths = vec![2, 4];
    cfg.sdtu.band_limit = l;
    cfg.encoder.band_limit = l;
    cfg.encoder.hidden = vec![4];
    cfg.encoder.out_channels = 4;
    Policy::new(cfg).unwrap()
}

#[test]
fn raising_the_band_limit_keeps_lower_degree_initialization() {
    let (a, b) = (tiny_policy_l(1).init(3).unwrap(), tiny_policy_l(2).init(3).unwrap());
    assert!(b.num_scalars() > a.num_scalars());
    for (name, t) in a.iter() {
        assert_eq!(b.get(name).unwrap().data(), t.data(), "{name}");
    }
}

// With the gate activation degree-2 features never reach degree-0/1 outputs.
#[test]
fn gate_policy_ignores_degree_two_features() {
    let data = gen_demos(&TaskSpec::default(), 3, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size: 4, ..Default::default() };
    let spec = TaskSpec::default();
    let run = |l| {
        let p = tiny_policy_l(l);
        let out = train(&p, &data, &cfg, |_| {}).unwrap();
        let (_, res) = evaluate(&p, &out.params, &spec, 2, RotationSet::Haar, 1).unwrap();
        (out.losses, res)
    };
    assert_eq!(run(1), run(2));
}
