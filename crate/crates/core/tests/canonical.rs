use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sphdiff::canonical::*;
use sphdiff::so3::{random_rotation, rotate_coeffs, RepLayout, Rotation, SphericalCoeffs};
use sphdiff::Error;

fn vec3(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
}

fn ee(rng: &mut ChaCha8Rng) -> EndEffectorState {
    EndEffectorState::new(vec3(rng, 1.0), random_rotation(rng), rng.random_range(0.0..1.0))
}

fn window(rng: &mut ChaCha8Rng, arms: usize) -> StateWindow {
    let frames = (0..2)
        .map(|_| {
            let n = 5;
            let obs = SceneObservation::new(
                (0..n).map(|_| vec3(rng, 1.0)).collect(),
                (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect(),
            )
            .unwrap();
            StateFrame { obs, ee: (0..arms).map(|_| ee(rng)).collect() }
        })
        .collect();
    StateWindow { frames }
}

fn chunk(rng: &mut ChaCha8Rng, arms: usize, t: usize) -> ActionChunk {
    ActionChunk { steps: (0..t).map(|_| (0..arms).map(|_| ee(rng)).collect()).collect() }
}

fn max_pose_diff(a: &EndEffectorState, b: &EndEffectorState) -> f64 {
    let dm = (a.rotation.matrix() - b.rotation.matrix()).abs().max();
    (a.position - b.position).abs().max().max(dm).max((a.aperture - b.aperture).abs())
}

fn max_chunk_diff(a: &ActionChunk, b: &ActionChunk) -> f64 {
    a.steps.iter().flatten().zip(b.steps.iter().flatten()).map(|(x, y)| max_pose_diff(x, y)).fold(0.0, f64::max)
}

fn max_window_diff(a: &StateWindow, b: &StateWindow) -> f64 {
    let mut m: f64 = 0.0;
    for (fa, fb) in a.frames.iter().zip(&b.frames) {
        for (p, q) in fa.obs.points.iter().zip(&fb.obs.points) {
            m = m.max((p - q).abs().max());
        }
        for (x, y) in fa.ee.iter().zip(&fb.ee) {
            m = m.max(max_pose_diff(x, y));
        }
    }
    m
}

#[test]
fn identity_pose_encoding() {
    let e = EndEffectorState::new(Vector3::new(1.0, 2.0, 3.0), Rotation::identity(), 0.25);
    // columns e_x, e_y, e_z in (y, z, x) order
    let want = [0.25, 2.0, 3.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    assert_eq!(encode_ee(&e), want);
}

#[test]
fn encoding_is_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let layout = RepLayout::end_effector(1);
    for _ in 0..100 {
        let e = ee(&mut rng);
        let g = random_rotation(&mut rng);
        let lhs = encode_ee(&e.transformed(&g, &Vector3::zeros()));
        let rhs = rotate_coeffs(&SphericalCoeffs::new(layout.clone(), encode_ee(&e).to_vec()).unwrap(), &g).unwrap();
        let err = lhs.iter().zip(rhs.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-12, "{err}");
    }
}

#[test]
fn decode_round_trip_and_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let e = ee(&mut rng);
        let d = decode_ee(&encode_ee(&e)).unwrap();
        assert!(max_pose_diff(&e, &d) < 1e-12);

        let mut noisy = encode_ee(&e);
        for v in &mut noisy[4..] {
            *v += rng.random_range(-0.2..0.2);
        }
        let d = decode_ee(&noisy).unwrap();
        assert!(d.rotation.defect() < 1e-12);
        assert!(d.rotation.angle_to(&e.rotation) < 1.0);
    }
}

#[test]
fn degenerate_rotation_is_rejected() {
    let mut b = [0.0; EE_DIM];
    b[4..7].copy_from_slice(&[0.0, 0.0, 1.0]);
    b[7..10].copy_from_slice(&[0.0, 0.0, 2.0]);
    assert!(matches!(decode_ee(&b), Err(Error::DegenerateRotation(_))));
    assert!(decode_ee(&b[..12]).is_err());
    b[0] = f64::NAN;
    assert!(decode_ee(&b).is_err());
}

#[test]
fn aperture_is_clamped() {
    let e = EndEffectorState::new(Vector3::zeros(), Rotation::identity(), 1.7);
    assert_eq!(e.aperture, 1.0);
}

#[test]
fn chunk_round_trip_bimanual() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = chunk(&mut rng, 2, 4);
    let c = encode_chunk(&a).unwrap();
    assert_eq!(c.lead(), &[4]);
    assert_eq!(c.layout(), &RepLayout::end_effector(2));
    let b = decode_chunk(&c, 2).unwrap();
    assert!(max_chunk_diff(&a, &b) < 1e-12);

    // the merged block is still equivariant
    let g = random_rotation(&mut rng);
    let lhs = encode_chunk(&a.transformed(&g, &Vector3::zeros())).unwrap();
    assert!(lhs.max_abs_diff(&rotate_coeffs(&c, &g).unwrap()) < 1e-12);
}

#[test]
fn translation_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let s = window(&mut rng, 1);
        let a = chunk(&mut rng, 1, 3);
        let t = vec3(&mut rng, 5.0);
        let (s0, a0) = canonicalize(&s, &a, 0).unwrap();
        let (s1, a1) = canonicalize(&s.transformed(&Rotation::identity(), &t), &a.transformed(&Rotation::identity(), &t), 0).unwrap();
        assert!(max_window_diff(&s0, &s1) <= 1e-12);
        assert!(max_chunk_diff(&a0, &a1) <= 1e-12);
        assert!(s0.newest().unwrap().ee[0].position.norm() == 0.0);

        // idempotent
        let (s2, a2) = canonicalize(&s0, &a0, 0).unwrap();
        assert_eq!(max_window_diff(&s0, &s2), 0.0);
        assert_eq!(max_chunk_diff(&a0, &a2), 0.0);

        let origin = s.newest().unwrap().ee[0].position;
        assert!(max_chunk_diff(&uncanonicalize(&a0, &origin), &a) < 1e-12);
    }
}

#[test]
fn rotation_about_gripper_commutes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let s = window(&mut rng, 1);
    let a = chunk(&mut rng, 1, 3);
    let g = random_rotation(&mut rng);
    let o = s.newest().unwrap().ee[0].position;
    let t = o - g.apply(&o);
    let (s0, a0) = canonicalize(&s, &a, 0).unwrap();
    let (s1, a1) = canonicalize(&s.transformed(&g, &t), &a.transformed(&g, &t), 0).unwrap();
    assert!(max_window_diff(&s0.transformed(&g, &Vector3::zeros()), &s1) < 1e-12);
    assert!(max_chunk_diff(&a0.transformed(&g, &Vector3::zeros()), &a1) < 1e-12);
}

#[test]
fn per_arm_canonicalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = window(&mut rng, 2);
    let a = chunk(&mut rng, 2, 3);
    let origins: Vec<_> = s.newest().unwrap().ee.iter().map(|e| e.position).collect();
    let (sc, ac) = canonicalize_per_arm(&s, &a).unwrap();
    assert!(sc.newest().unwrap().ee[0].position.norm() == 0.0);
    for (st, orig) in ac.steps.iter().zip(&a.steps) {
        for i in 0..2 {
            assert!((st[i].position - (orig[i].position - origins[i])).norm() < 1e-12);
        }
    }
    let back = uncanonicalize_per_arm(&ac, &origins).unwrap();
    assert!(max_chunk_diff(&back, &a) < 1e-12);
    assert!(uncanonicalize_per_arm(&ac, &origins[..1]).is_err());
    assert!(canonicalize(&s, &a, 2).is_err());
}

#[test]
fn observation_validation() {
    assert!(SceneObservation::new(vec![], vec![]).is_err());
    assert!(SceneObservation::new(vec![Vector3::zeros()], vec![]).is_err());
    assert!(SceneObservation::new(vec![Vector3::new(f64::INFINITY, 0.0, 0.0)], vec![[0.0; 3]]).is_err());
}

#[test]
fn pose_json_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let e = ee(&mut rng);
    let s = serde_json::to_string(&e).unwrap();
    let back: EndEffectorState = serde_json::from_str(&s).unwrap();
    assert_eq!(back, e);
}

proptest! {
    #[test]
    fn encode_decode_is_identity(seed in any::<u64>(), grip in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = EndEffectorState::new(vec3(&mut rng, 10.0), random_rotation(&mut rng), grip);
        let d = decode_ee(&encode_ee(&e)).unwrap();
        prop_assert!(max_pose_diff(&e, &d) < 1e-11);
    }

    #[test]
    fn canonical_state_ignores_translation(seed in any::<u64>(), tx in -3.0f64..3.0, ty in -3.0f64..3.0, tz in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = window(&mut rng, 1);
        let a = chunk(&mut rng, 1, 2);
        let t = Vector3::new(tx, ty, tz);
        let (s0, a0) = canonicalize(&s, &a, 0).unwrap();
        let (s1, a1) = canonicalize(&s.transformed(&Rotation::identity(), &t), &a.transformed(&Rotation::identity(), &t), 0).unwrap();
        prop_assert!(max_window_diff(&s0, &s1) < 1e-12);
        prop_assert!(max_chunk_diff(&a0, &a1) < 1e-12);
    }
}
