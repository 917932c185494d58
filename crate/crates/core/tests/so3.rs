use nalgebra::{DMatrix, Quaternion, UnitQuaternion, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sphdiff::so3::*;
use sphdiff::Error;

fn rotation_strategy() -> impl Strategy<Value = Rotation> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
        .prop_filter("non-degenerate quaternion", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
        .prop_map(|(w, x, y, z)| Rotation::from_quaternion(&UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))))
}

/// `D^l_{mn} = ∫ Y_l^m(R u) Y_l^n(u) du` by quadrature on a grid that is
/// exact for degree-`2l` products.
fn quadrature_wigner(l: usize, r: &Rotation) -> DMatrix<f64> {
    let grid = make_grid(l, 2).unwrap();
    let n = 2 * l + 1;
    let mut d = DMatrix::zeros(n, n);
    for (u, w) in grid.directions().iter().zip(grid.weights()) {
        let y = real_sh_all(l, u).unwrap();
        let yr = real_sh_all(l, &r.apply(u)).unwrap();
        let off = l * l;
        for i in 0..n {
            for j in 0..n {
                d[(i, j)] += w * yr[off + i] * y[off + j];
            }
        }
    }
    d
}

#[test]
fn wigner_matches_quadrature_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let r = random_rotation(&mut rng);
        for l in 0..=4 {
            let err = (wigner_d(l, &r).unwrap() - quadrature_wigner(l, &r)).amax();
            assert!(err < 1e-12, "l={l} err={err:e}");
        }
    }
}

#[test]
fn degree_one_is_cartesian_change_of_basis() {
    let r = Rotation::from_axis_angle(Vector3::new(0.2, -1.0, 0.4), 1.1);
    let v = Vector3::new(0.3, -0.7, 1.9);
    let d = wigner_d(1, &r).unwrap();
    let sh = cartesian_to_sh(&v);
    let rotated = &d * nalgebra::DVector::from_row_slice(&sh);
    let want = cartesian_to_sh(&r.apply(&v));
    for i in 0..3 {
        assert!((rotated[i] - want[i]).abs() < 1e-14);
    }
    assert!((sh_to_cartesian(&want) - r.apply(&v)).norm() < 1e-15);
}

#[test]
fn unsupported_degree_is_an_error() {
    let r = Rotation::identity();
    assert!(matches!(wigner_d(DEFAULT_L_MAX + 1, &r), Err(Error::UnsupportedDegree { .. })));
    assert!(wigner_d_limited(6, &r, 6).is_ok());
}

#[test]
fn layout_dimensions() {
    for l in 0..=4 {
        assert_eq!(RepLayout::uniform(l, 1).total_dim(), (l + 1) * (l + 1));
    }
    let layout = RepLayout::new([(0, 2), (1, 3), (2, 1)]).unwrap();
    assert_eq!(layout.total_dim(), 2 + 9 + 5);
    assert_eq!(layout.max_degree(), 2);
    assert_eq!(layout.multiplicity(1), 3);
    assert!(!layout.has_degree(3));
    assert_eq!(RepLayout::end_effector(1).total_dim(), 13);
}

#[test]
fn slices_are_contiguous_in_m() {
    let layout = RepLayout::new([(0, 1), (1, 2)]).unwrap();
    let data: Vec<f64> = (0..layout.total_dim()).map(|i| i as f64).collect();
    let x = SphericalCoeffs::new(layout, data).unwrap();
    let s = x.slice(0, 1, 1).unwrap();
    assert_eq!(s.len(), 3);
    assert_eq!(s[1] - s[0], 1.0);
    assert_eq!(s[2] - s[1], 1.0);
}

#[test]
fn rotation_rejects_non_rotations() {
    let scaled = [1.1, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    assert!(Rotation::from_row_major(&scaled).is_err());
    let reflection = [-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    assert!(Rotation::from_row_major(&reflection).is_err());
    assert!(Rotation::from_row_major(&[1.0; 8]).is_err());
    assert!(Rotation::from_row_major(&[f64::NAN; 9]).is_err());
}

#[test]
fn haar_angles_follow_the_haar_density() {
    // the rotation angle of a Haar rotation has density (1 − cos θ)/π, mean π/2 + 2/π
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 20_000;
    let mean = (0..n).map(|_| random_rotation(&mut rng).angle_to(&Rotation::identity())).sum::<f64>() / n as f64;
    let want = std::f64::consts::FRAC_PI_2 + 2.0 / std::f64::consts::PI;
    assert!((mean - want).abs() < 0.02, "mean angle {mean} want {want}");
}

#[test]
fn tilt_rotations_respect_the_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let max = 30f64.to_radians();
    for _ in 0..1000 {
        let r = Rotation::random_tilt(&mut rng, max);
        let z = r.apply(&Vector3::z());
        assert!(z.z.acos() <= max + 1e-12);
    }
}

#[test]
fn fourier_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for l in 0..=4 {
        let grid = make_grid(l, 1).unwrap();
        let data = (0..(l + 1) * (l + 1)).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let x = SphericalCoeffs::new(RepLayout::uniform(l, 1), data).unwrap();
        let back = analysis(&synthesis(&x, &grid).unwrap(), &grid, l).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
    }
}

proptest! {
    #[test]
    fn wigner_is_orthogonal(r in rotation_strategy(), l in 0usize..=4) {
        let d = wigner_d(l, &r).unwrap();
        let err = (d.transpose() * &d - DMatrix::identity(2 * l + 1, 2 * l + 1)).amax();
        prop_assert!(err < 1e-10);
    }

    #[test]
    fn wigner_is_a_homomorphism(a in rotation_strategy(), b in rotation_strategy(), l in 0usize..=4) {
        let lhs = wigner_d(l, &a.compose(&b)).unwrap();
        let rhs = wigner_d(l, &a).unwrap() * wigner_d(l, &b).unwrap();
        prop_assert!((lhs - rhs).amax() < 1e-10);
    }

    #[test]
    fn wigner_of_inverse_is_transpose(r in rotation_strategy(), l in 0usize..=4) {
        let d = wigner_d(l, &r).unwrap();
        let di = wigner_d(l, &r.inverse()).unwrap();
        prop_assert!((d.transpose() - di).amax() < 1e-10);
    }

    #[test]
    fn rotating_harmonics_matches_rotating_points(r in rotation_strategy(), l in 0usize..=4,
                                                  x in -1.0..1.0f64, y in -1.0..1.0f64, z in 0.1..1.0f64) {
        let u = Vector3::new(x, y, z).normalize();
        let off = l * l;
        let yu = real_sh_all(l, &u).unwrap();
        let yr = real_sh_all(l, &r.apply(&u)).unwrap();
        let d = wigner_d(l, &r).unwrap();
        for i in 0..2 * l + 1 {
            let s: f64 = (0..2 * l + 1).map(|j| d[(i, j)] * yu[off + j]).sum();
            prop_assert!((s - yr[off + i]).abs() < 1e-10);
        }
    }

    #[test]
    fn rotation_preserves_slice_norms(r in rotation_strategy(), seed in any::<u64>()) {
        let layout = RepLayout::new([(0, 2), (1, 2), (2, 3), (3, 1)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..layout.total_dim()).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let x = SphericalCoeffs::new(layout.clone(), data).unwrap();
        let y = rotate_coeffs(&x, &r).unwrap();
        for (l, c, _) in layout.slices() {
            let n0: f64 = x.slice(0, l, c).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt();
            let n1: f64 = y.slice(0, l, c).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n0 - n1).abs() < 1e-10);
        }
        prop_assert_eq!(x.slice(0, 0, 1).unwrap(), y.slice(0, 0, 1).unwrap());
    }

    #[test]
    fn row_major_round_trip(r in rotation_strategy()) {
        let back = Rotation::from_row_major(&r.to_row_major()).unwrap();
        prop_assert_eq!(back, r);
    }
}
