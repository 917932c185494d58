use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sphdiff::autodiff::ParamStore;
use sphdiff::diffusion::*;
use sphdiff::error::Result;
use sphdiff::sdtu::{Sdtu, SdtuConfig};
use sphdiff::so3::{random_rotation, rotate_coeffs, RepLayout, SphericalCoeffs};

/// Returns a fixed tensor whatever the input.
struct Fixed(SphericalCoeffs, usize);

impl Denoiser for Fixed {
    fn action_layout(&self) -> RepLayout {
        self.0.layout().clone()
    }
    fn horizon(&self) -> usize {
        self.1
    }
    fn predict_noise(&self, _: &SphericalCoeffs, a: &SphericalCoeffs, _: usize) -> Result<SphericalCoeffs> {
        SphericalCoeffs::with_lead(a.layout().clone(), a.lead().to_vec(), self.0.data().to_vec())
    }
}

/// Exact noise predictor for data concentrated on `target`.
struct PointMass<'a> {
    target: SphericalCoeffs,
    sched: &'a NoiseSchedule,
}

impl Denoiser for PointMass<'_> {
    fn action_layout(&self) -> RepLayout {
        self.target.layout().clone()
    }
    fn horizon(&self) -> usize {
        self.target.lead()[0]
    }
    fn predict_noise(&self, _: &SphericalCoeffs, a: &SphericalCoeffs, k: usize) -> Result<SphericalCoeffs> {
        let ab = self.sched.alpha_bar(k);
        let mut out = a.clone();
        let n = self.target.data().len();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - ab.sqrt() * self.target.data()[i % n]) / (1.0 - ab).sqrt();
        }
        Ok(out)
    }
}

fn random_coeffs(rng: &mut ChaCha8Rng, layout: &RepLayout, lead: Vec<usize>) -> SphericalCoeffs {
    let n = layout.total_dim() * lead.iter().product::<usize>();
    SphericalCoeffs::with_lead(layout.clone(), lead, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn add_noise_variance_and_coupling() {
    let sched = make_schedule(100, ScheduleKind::Cosine).unwrap();
    let layout = RepLayout::end_effector(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut noise = GaussianNoise::new(ChaCha8Rng::seed_from_u64(1));
    let k = 40;
    let ab = sched.alpha_bar(k);
    // A0 entries are ±2, so Var(A0) = 4
    let draws = 10_000;
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..draws {
        let mut a0 = SphericalCoeffs::zeros(layout.clone(), vec![]);
        for v in a0.data_mut() {
            *v = if rng.random::<bool>() { 2.0 } else { -2.0 };
        }
        let e = noise.sample(&layout, &[]).unwrap();
        let ak = add_noise(&a0, &e, k, &sched).unwrap();
        s1 += ak.data()[4];
        s2 += ak.data()[4] * ak.data()[4];
    }
    let mean = s1 / draws as f64;
    let var = s2 / draws as f64 - mean * mean;
    let want = ab * 4.0 + (1.0 - ab);
    assert!((var - want).abs() / want < 0.02, "var {var} want {want}");

    let a0 = random_coeffs(&mut rng, &layout, vec![3]);
    let e = noise.sample(&layout, &[3]).unwrap();
    let r = random_rotation(&mut rng);
    let lhs = add_noise(&rotate_coeffs(&a0, &r).unwrap(), &rotate_coeffs(&e, &r).unwrap(), k, &sched).unwrap();
    let rhs = rotate_coeffs(&add_noise(&a0, &e, k, &sched).unwrap(), &r).unwrap();
    assert!(lhs.max_abs_diff(&rhs) < 1e-14);
    assert!(add_noise(&a0, &e, 0, &sched).unwrap().max_abs_diff(&a0) == 0.0);
}

#[test]
fn loss_oracles() {
    let sched = make_schedule(100, ScheduleKind::Cosine).unwrap();
    let layout = RepLayout::end_effector(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a0 = random_coeffs(&mut rng, &layout, vec![4]);
    let cond = SphericalCoeffs::zeros(RepLayout::scalars(1), vec![]);
    let mut noise = GaussianNoise::new(ChaCha8Rng::seed_from_u64(3));
    let eps = noise.sample(&layout, &[4]).unwrap();
    let perfect = Fixed(eps.clone(), 4);
    assert_eq!(training_loss_at(&perfect, &cond, &a0, &sched, 17, &eps).unwrap(), 0.0);

    let zero = Fixed(SphericalCoeffs::zeros(layout.clone(), vec![4]), 4);
    let n = 1000;
    let mean: f64 = (0..n)
        .map(|_| training_loss(&zero, &cond, &a0, &sched, &mut rng, &mut noise).unwrap())
        .sum::<f64>()
        / n as f64;
    let dims = (4 * layout.total_dim()) as f64;
    assert!((mean - dims).abs() / dims < 0.02, "mean {mean} vs {dims}");
}

#[test]
fn one_step_schedule_recovers_signal() {
    let sched = make_schedule(1, ScheduleKind::Cosine).unwrap();
    let layout = RepLayout::end_effector(1);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a0 = random_coeffs(&mut rng, &layout, vec![2]);
    let eps = random_coeffs(&mut rng, &layout, vec![2]);
    let ak = add_noise(&a0, &eps, 1, &sched).unwrap();

    /// Replays the stored start and predicts the injected noise.
    struct Replay(SphericalCoeffs, SphericalCoeffs);
    struct Start(SphericalCoeffs);
    impl NoiseSource for Start {
        fn sample(&mut self, _: &RepLayout, _: &[usize]) -> Result<SphericalCoeffs> {
            Ok(self.0.clone())
        }
    }
    impl Denoiser for Replay {
        fn action_layout(&self) -> RepLayout {
            self.0.layout().clone()
        }
        fn horizon(&self) -> usize {
            2
        }
        fn predict_noise(&self, _: &SphericalCoeffs, _: &SphericalCoeffs, _: usize) -> Result<SphericalCoeffs> {
            Ok(self.1.clone())
        }
    }
    let cond = SphericalCoeffs::zeros(RepLayout::scalars(1), vec![]);
    let out = ddpm_sample(&Replay(ak.clone(), eps.clone()), &cond, &sched, &mut Start(ak.clone())).unwrap();
    assert!(out.max_abs_diff(&a0) < 1e-12);
    let out = ddim_sample(&Replay(ak.clone(), eps), &cond, &sched, 1, &mut Start(ak)).unwrap();
    assert!(out.max_abs_diff(&a0) < 1e-12);
}

#[test]
fn ddim_full_steps_matches_deterministic_ddpm() {
    let sched = make_schedule(100, ScheduleKind::Cosine).unwrap();
    let layout = RepLayout::end_effector(1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let target = random_coeffs(&mut rng, &layout, vec![4]);
    let model = PointMass { target: target.clone(), sched: &sched };
    let cond = SphericalCoeffs::zeros(RepLayout::scalars(1), vec![]);

    /// Only the first draw is random; later draws are zero.
    struct FirstOnly(GaussianNoise<ChaCha8Rng>, bool);
    impl NoiseSource for FirstOnly {
        fn sample(&mut self, l: &RepLayout, lead: &[usize]) -> Result<SphericalCoeffs> {
            let s = self.0.sample(l, lead)?;
            if std::mem::replace(&mut self.1, true) {
                Ok(SphericalCoeffs::zeros(l.clone(), lead.to_vec()))
            } else {
                Ok(s)
            }
        }
    }
    let ddpm = ddpm_sample(&model, &cond, &sched, &mut FirstOnly(GaussianNoise::new(ChaCha8Rng::seed_from_u64(6)), false)).unwrap();
    let ddim = ddim_sample(&model, &cond, &sched, 100, &mut GaussianNoise::new(ChaCha8Rng::seed_from_u64(6))).unwrap();
    assert!(ddpm.max_abs_diff(&ddim) < 1e-6);
    assert!(ddim.max_abs_diff(&target) < 1e-6);
}

#[test]
fn samplers_are_equivariant_with_paired_noise() {
    let cfg = SdtuConfig { widths: vec![4, 8], horizon: 8, ..Default::default() };
    let scene = RepLayout::new(vec![(0, 3), (1, 2), (2, 1)]).unwrap();
    let net = Sdtu::new(cfg, scene.clone(), "sdtu").unwrap();
    let mut store = ParamStore::new();
    net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let model = SdtuDenoiser { net: &net, params: &store };
    let sched = make_schedule(20, ScheduleKind::Cosine).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..2 {
        let cond = random_coeffs(&mut rng, &scene, vec![1]);
        let r = random_rotation(&mut rng);
        let cr = rotate_coeffs(&cond, &r).unwrap();
        let seed = rng.random::<u64>();
        let base = ddpm_sample(&model, &cond, &sched, &mut GaussianNoise::new(ChaCha8Rng::seed_from_u64(seed))).unwrap();
        let rot = ddpm_sample(
            &model,
            &cr,
            &sched,
            &mut RotatedNoise::new(GaussianNoise::new(ChaCha8Rng::seed_from_u64(seed)), r),
        )
        .unwrap();
        assert!(rot.rel_err(&rotate_coeffs(&base, &r).unwrap()) < 1e-8);
        let base = ddim_sample(&model, &cond, &sched, 8, &mut GaussianNoise::new(ChaCha8Rng::seed_from_u64(seed))).unwrap();
        let rot = ddim_sample(
            &model,
            &cr,
            &sched,
            8,
            &mut RotatedNoise::new(GaussianNoise::new(ChaCha8Rng::seed_from_u64(seed)), r),
        )
        .unwrap();
        assert!(rot.rel_err(&rotate_coeffs(&base, &r).unwrap()) < 1e-8);
    }
}
