use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sphdiff::autodiff::{grad_check, ParamStore, Tensor};
use sphdiff::canonical::*;
use sphdiff::encoder::*;
use sphdiff::so3::{random_rotation, rotate_coeffs, Rotation};

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> SceneObservation {
    SceneObservation::new(
        (0..n).map(|_| Vector3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6))).collect(),
        (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect(),
    )
    .unwrap()
}

fn window(rng: &mut ChaCha8Rng, arms: usize) -> StateWindow {
    let frames = (0..2)
        .map(|_| StateFrame {
            obs: cloud(rng, 12),
            ee: (0..arms)
                .map(|_| EndEffectorState::new(Vector3::new(0.1, -0.2, 0.05), random_rotation(rng), rng.random()))
                .collect(),
        })
        .collect();
    StateWindow { frames }
}

fn encoder(cfg: EncoderConfig, seed: u64) -> (SceneEncoder, ParamStore) {
    let enc = SceneEncoder::new(cfg, "enc").unwrap();
    let mut store = ParamStore::new();
    enc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (enc, store)
}

#[test]
fn single_point_oracle() {
    let cfg = EncoderConfig { radial_bins: 3, ..Default::default() };
    let p = Vector3::new(0.2, -0.3, 0.1);
    let color = [0.5, 0.25, 1.0];
    let e = embed_points(&SceneObservation::new(vec![p], vec![color]).unwrap(), &cfg).unwrap();
    let r = p.norm();
    let u = p / r;
    let y0 = 0.5 / std::f64::consts::PI.sqrt();
    let c1 = (3.0 / (4.0 * std::f64::consts::PI)).sqrt();
    let y1 = [c1 * u.y, c1 * u.z, c1 * u.x];
    let phi = cfg.radial_basis(r);
    let feats = [1.0, 0.5, 0.25, 1.0];
    for b in 0..3 {
        for f in 0..4 {
            let ch = b * 4 + f;
            let s0 = e.slice(0, 0, ch).unwrap();
            assert!((s0[0] - y0 * phi[b] * feats[f]).abs() < 1e-15);
            let s1 = e.slice(0, 1, ch).unwrap();
            for m in 0..3 {
                assert!((s1[m] - y1[m] * phi[b] * feats[f]).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn radial_basis_is_windowed() {
    let cfg = EncoderConfig::default();
    assert!(cfg.radial_basis(1.0).iter().all(|v| *v == 0.0));
    assert!(cfg.radial_basis(1.5).iter().all(|v| *v == 0.0));
    assert!(cfg.radial_basis(0.999999).iter().all(|v| *v < 1e-9));
    let b0 = cfg.radial_basis(0.0);
    assert_eq!(b0[0], 1.0);
}

#[test]
fn embedding_is_equivariant_and_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = EncoderConfig::default();
    for _ in 0..20 {
        let obs = cloud(&mut rng, 30);
        let g = random_rotation(&mut rng);
        let e = embed_points(&obs, &cfg).unwrap();
        let er = embed_points(&obs.transformed(&g, &Vector3::zeros()), &cfg).unwrap();
        assert!(er.max_abs_diff(&rotate_coeffs(&e, &g).unwrap()) < 1e-12);

        let mut idx: Vec<usize> = (0..30).collect();
        idx.reverse();
        idx.swap(3, 17);
        let perm = SceneObservation::new(idx.iter().map(|&i| obs.points[i]).collect(), idx.iter().map(|&i| obs.colors[i]).collect())
            .unwrap();
        assert!(embed_points(&perm, &cfg).unwrap().max_abs_diff(&e) < 1e-14);
    }
}

#[test]
fn point_at_origin_is_isotropic() {
    let cfg = EncoderConfig::default();
    let e = embed_points(&SceneObservation::new(vec![Vector3::zeros()], vec![[1.0; 3]]).unwrap(), &cfg).unwrap();
    let d0 = cfg.embed_layout().multiplicity(0);
    assert!(e.data()[d0..].iter().all(|v| *v == 0.0));
    assert!(e.data()[0] > 0.0);
}

#[test]
fn empty_cloud_is_rejected() {
    let cfg = EncoderConfig::default();
    let obs = SceneObservation::default();
    assert!(embed_points(&obs, &cfg).is_err());
}

#[test]
fn condition_is_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for arms in [1, 2] {
        let (enc, store) = encoder(EncoderConfig { arms, ..Default::default() }, 3);
        for _ in 0..10 {
            let s = window(&mut rng, arms);
            let g = random_rotation(&mut rng);
            let c = encode_scene(&enc, &store, &s).unwrap();
            let cr = encode_scene(&enc, &store, &s.transformed(&g, &Vector3::zeros())).unwrap();
            let err = cr.max_abs_diff(&rotate_coeffs(&c, &g).unwrap());
            assert!(err < 1e-12, "arms={arms}: {err}");
            assert_eq!(c.layout(), enc.cond_layout());
        }
    }
}

#[test]
fn condition_layout_shape() {
    let (enc, _) = encoder(EncoderConfig::default(), 0);
    let l = enc.cond_layout();
    assert_eq!(l.multiplicity(0), 2 * 16 + 2);
    assert_eq!(l.multiplicity(1), 2 * 16 + 8);
    assert_eq!(l.multiplicity(2), 2 * 16);

    let (flat, _) = encoder(EncoderConfig { flat: true, ..Default::default() }, 0);
    assert_eq!(flat.cond_layout().max_degree(), 0);
    assert_eq!(flat.cond_layout().total_dim(), 2 * 16 + 2 * 13);
}

#[test]
fn window_size_is_checked() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (enc, store) = encoder(EncoderConfig::default(), 0);
    let mut s = window(&mut rng, 1);
    s.frames.pop();
    assert!(encode_scene(&enc, &store, &s).is_err());
    let s2 = window(&mut rng, 2);
    assert!(encode_scene(&enc, &store, &s2).is_err());
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for flat in [false, true] {
        let cfg = EncoderConfig { radial_bins: 2, hidden: vec![3, 3], out_channels: 2, flat, ..Default::default() };
        let (enc, store) = encoder(cfg, 6);
        let windows = [window(&mut rng, 1), window(&mut rng, 1)];
        let mut emb = Vec::new();
        let mut ee = Vec::new();
        for w in &windows {
            let (e, q) = enc.features(w).unwrap();
            emb.extend(e);
            ee.extend(q);
        }
        let de = emb.len() / 4;
        let dq = ee.len() / 2;
        let r = grad_check(
            &store,
            |g, p| {
                let ev = g.constant(Tensor::new(vec![2, 2, de], emb.clone())?);
                let qv = g.constant(Tensor::new(vec![2, dq], ee.clone())?);
                let c = enc.forward_graph(g, p, ev, qv)?;
                Ok(g.sum_squares(c))
            },
            1e-5,
            8,
        )
        .unwrap();
        assert!(r.rel_err < 1e-5, "flat={flat}: {r:?}");
    }
}

#[test]
fn identity_rotation_leaves_condition_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (enc, store) = encoder(EncoderConfig::default(), 1);
    let s = window(&mut rng, 1);
    let a = encode_scene(&enc, &store, &s).unwrap();
    let b = encode_scene(&enc, &store, &s.transformed(&Rotation::identity(), &Vector3::zeros())).unwrap();
    assert_eq!(a, b);
}

#[test]
fn doubling_colors_leaves_geometry_channels_alone() {
    let cfg = EncoderConfig::default();
    let obs = cloud(&mut ChaCha8Rng::seed_from_u64(21), 10);
    let doubled = SceneObservation::new(obs.points.clone(), obs.colors.iter().map(|c| [2.0 * c[0], 2.0 * c[1], 2.0 * c[2]]).collect()).unwrap();
    let a = embed_points(&obs, &cfg).unwrap();
    let b = embed_points(&doubled, &cfg).unwrap();
    for (l, ch, _) in a.layout().slices() {
        let (x, y) = (a.slice(0, l, ch).unwrap(), b.slice(0, l, ch).unwrap());
        if ch % 4 == 0 {
            assert_eq!(x, y);
        } else {
            for (u, v) in x.iter().zip(y) {
                assert!((2.0 * u - v).abs() < 1e-15);
            }
        }
    }
}
