use hybrid_sds::guidance::{
    add_noise, cfg_combine, finetune_adapter_step, image_sds_grad, sample_timestep, sds_grad_3d, video_sds_grad,
    vsd_grad, AdapterModel, AnalyticGuidance, DiffusionSchedule, DistillContext, Draw, GuidanceKind, GuidanceModel,
    LowRankAdapter, NoiseDraw, NoiseLevel, NoiseRequest, TimestepAnneal,
};
use hybrid_sds::render::{render_on_tape, Camera, RadianceModel, RenderOptions, TimeSampling, View};
use hybrid_sds::scene::{GridConfig, ParamGroup, SceneConfig};
use hybrid_sds::scheduler::UpdateKind;
use hybrid_sds::{Differentiable, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).unwrap()
}

fn model(seed: u64) -> RadianceModel {
    let g = GridConfig {
        levels: 2,
        features_per_level: 2,
        base_resolution: 4,
        per_level_scale: 2.0,
        table_size: 1 << 10,
        time_base_resolution: None,
    };
    let config = SceneConfig {
        static_grid: g.clone(),
        dynamic_grid: GridConfig {
            time_base_resolution: Some(2),
            ..g
        },
        hidden_width: 8,
        hidden_layers: 1,
        ..SceneConfig::desk()
    };
    let mut m = RadianceModel::new(&config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for group in [ParamGroup::Static, ParamGroup::Dynamic] {
        for p in m.group_params_mut(group) {
            for v in p.value.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
    }
    m
}

fn level(alpha_bar: f64) -> NoiseLevel {
    NoiseLevel {
        t_d: 0.5,
        alpha_bar,
        weight: 1.0 - alpha_bar,
    }
}

fn ctx(schedule: &DiffusionSchedule, resolution: (usize, usize)) -> DistillContext<'_> {
    DistillContext {
        schedule,
        prompt: "a sphere",
        guidance_scale: 100.0,
        render: RenderOptions::deterministic(8),
        resolution,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn analytic_denoiser_is_exact(seed in any::<u64>(), alpha_bar in 0.01f64..0.99) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = random(&mut rng, &[2, 3, 4, 3]);
        let noisy = normal(&mut rng, &[2, 3, 4, 3]);
        let mut g = AnalyticGuidance::fixed(GuidanceKind::ThreeDAware, target.clone()).unwrap();
        let cams = vec![Camera::orbit(0.0, 0.0, 2.0, 50.0, (4, 3)).unwrap(); 2];
        let eps = g
            .predict_noise(&NoiseRequest {
                kind: GuidanceKind::ThreeDAware,
                noisy: &noisy,
                level: level(alpha_bar),
                cameras: &cams,
                times: &[0.0, 0.0],
                prompt: "",
                guidance_scale: 7.5,
            })
            .unwrap();
        prop_assert_eq!(eps.shape(), noisy.shape());
        for ((e, x), t) in eps.data().iter().zip(noisy.data()).zip(target.data()) {
            let want = (f64::from(*x) - alpha_bar.sqrt() * f64::from(*t)) / (1.0 - alpha_bar).sqrt();
            prop_assert!((f64::from(*e) - want).abs() <= 1e-6 * want.abs().max(1.0));
        }
    }

    #[test]
    fn add_noise_and_cfg_formulas(seed in any::<u64>(), alpha_bar in 0.0f64..1.0, scale in -10.0f32..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[7]);
        let e = normal(&mut rng, &[7]);
        let xt = add_noise(&x, alpha_bar, &e).unwrap();
        for i in 0..7 {
            let want = alpha_bar.sqrt() * f64::from(x.data()[i]) + (1.0 - alpha_bar).sqrt() * f64::from(e.data()[i]);
            prop_assert!((f64::from(xt.data()[i]) - want).abs() < 1e-5);
        }
        let c = cfg_combine(&x, &e, scale).unwrap();
        for i in 0..7 {
            let want = e.data()[i] + scale * (x.data()[i] - e.data()[i]);
            prop_assert!((c.data()[i] - want).abs() < 1e-4);
        }
    }

    #[test]
    fn sampled_timesteps_respect_the_annealed_range(seed in any::<u64>(), iteration in 0u64..20_000) {
        let anneal = TimestepAnneal::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for kind in UpdateKind::ALL {
            let (lo, hi) = anneal.range(iteration, kind);
            prop_assert!(lo <= hi);
            let t = sample_timestep(iteration, kind, &anneal, &mut rng);
            prop_assert!(t >= lo && t <= hi);
            if kind == UpdateKind::Vid {
                prop_assert_eq!((lo, hi), (0.02, 0.98));
            }
        }
    }
}

#[test]
fn schedule_is_monotone() {
    let s = DiffusionSchedule::default();
    let a: Vec<f64> = (1..100).map(|i| s.alpha_bar(f64::from(i) / 100.0)).collect();
    assert!(a.windows(2).all(|w| w[0] > w[1]));
    assert!(s.alpha_bar(0.0) > 0.999);
    assert!(s.alpha_bar(1.0) < 1e-3);
    assert!(s.level(0.0).is_err() && s.level(1.0).is_err());
}

/// With an exact denoiser the SDS residual is `w·√(ᾱ/(1−ᾱ))·(x − x*)`, so the
/// SDS gradient is the gradient of `½·w·√(ᾱ/(1−ᾱ))·‖x − x*‖²`, computed here by
/// an ordinary backward pass.
#[test]
fn sds_gradient_is_the_stop_gradient_vjp() {
    let m = model(7);
    let schedule = DiffusionSchedule::default();
    let cams: Vec<Camera> = (0..4)
        .map(|k| Camera::orbit(90.0 * k as f32, 15.0, 1.8, 50.0, (6, 5)).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let target = random(&mut rng, &[4, 5, 6, 3]);
    let mut g = AnalyticGuidance::fixed(GuidanceKind::ThreeDAware, target.clone()).unwrap();
    let lv = level(0.3);
    let draw = NoiseDraw::Fixed(Draw {
        level: lv,
        noise: normal(&mut rng, &[4, 5, 6, 3]),
    });
    let c = ctx(&schedule, (6, 5));
    let out = sds_grad_3d(&m, &cams, 0.25, &mut g, &c, draw, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();

    let mut tape = Tape::new();
    let views: Vec<View> = cams.iter().map(|cam| View { camera: cam.clone(), time: 0.25 }).collect();
    let batch = render_on_tape(&mut tape, &m, &views, &c.render, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let t = tape.constant(target.reshape(&[120, 3]).unwrap()).unwrap();
    let d = tape.sub(batch.rgb, t).unwrap();
    let sq = tape.mul(d, d).unwrap();
    let s = tape.sum(sq).unwrap();
    let k = 0.5 * lv.weight * (lv.alpha_bar / (1.0 - lv.alpha_bar)).sqrt();
    let loss = tape.scale(s, k as f32).unwrap();
    let want = tape.backward(loss).unwrap();

    let mut compared = 0;
    for p in m.params() {
        let (a, b) = (out.gradients.get(p.key()).unwrap(), want.get(p.key()).unwrap());
        let scale = b.data().iter().fold(0.0f32, |acc, v| acc.max(v.abs())).max(1e-6);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-5 * scale.max(1.0), "{}: {x} vs {y}", p.name());
            compared += 1;
        }
    }
    assert!(compared > 0);
}

#[test]
fn exact_noise_prediction_gives_zero_gradient() {
    struct Echo(Tensor);
    impl GuidanceModel for Echo {
        fn kind(&self) -> GuidanceKind {
            GuidanceKind::Image
        }
        fn resolution(&self) -> (usize, usize) {
            (4, 4)
        }
        fn predict_noise(&mut self, _: &NoiseRequest<'_>) -> hybrid_sds::Result<Tensor> {
            Ok(self.0.clone())
        }
    }
    let m = model(8);
    let schedule = DiffusionSchedule::default();
    let noise = normal(&mut ChaCha8Rng::seed_from_u64(2), &[1, 4, 4, 3]);
    let mut g = Echo(noise.clone());
    let cam = Camera::orbit(10.0, 10.0, 1.8, 50.0, (4, 4)).unwrap();
    let draw = NoiseDraw::Fixed(Draw { level: level(0.5), noise });
    let out = image_sds_grad(&m, &cam, 0.0, &mut g, &ctx(&schedule, (4, 4)), draw, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(out.residual_norm, 0.0);
    assert!(m.params().iter().all(|p| out.gradients.get(p.key()).unwrap().data().iter().all(|&v| v == 0.0)));
}

#[test]
fn fresh_adapter_is_a_no_op_and_finetuning_moves_it() {
    let m = model(9);
    let schedule = DiffusionSchedule::default();
    let target = random(&mut ChaCha8Rng::seed_from_u64(3), &[1, 4, 4, 3]);
    let mut base = AnalyticGuidance::fixed(GuidanceKind::Image, target.clone()).unwrap();
    let mut adapter = LowRankAdapter::for_guidance(&base, 4).unwrap();
    let cam = Camera::orbit(10.0, 10.0, 1.8, 50.0, (4, 4)).unwrap();
    let c = ctx(&schedule, (4, 4));
    let out = vsd_grad(&m, &cam, 0.0, &mut base, &mut adapter, &c, NoiseDraw::Timestep(0.5), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(out.residual_norm, 0.0);

    let up_before = adapter.up.value.clone();
    let mut losses = Vec::new();
    for i in 0..30 {
        let loss = finetune_adapter_step(
            &mut adapter,
            &mut base,
            &out.rendered,
            &cam,
            0.0,
            &c,
            NoiseDraw::Timestep(0.5),
            1e-2,
            &mut ChaCha8Rng::seed_from_u64(i),
        )
        .unwrap();
        losses.push(loss);
    }
    assert_ne!(adapter.up.value, up_before);
    assert!(losses.iter().all(|l| l.is_finite()));
    let state = adapter.state();
    let mut copy = LowRankAdapter::for_guidance(&base, 99).unwrap();
    copy.load_state(&mut state.clone()).unwrap();
    assert_eq!(copy.state().len(), state.len());
    for ((na, a), (nb, b)) in copy.state().iter().zip(&state) {
        assert_eq!(na, nb);
        assert_eq!(a, b);
    }
}

#[test]
fn guidance_kinds_are_checked() {
    let m = model(10);
    let schedule = DiffusionSchedule::default();
    let target = random(&mut ChaCha8Rng::seed_from_u64(4), &[1, 4, 4, 3]);
    let mut image = AnalyticGuidance::fixed(GuidanceKind::Image, target).unwrap();
    let cam = Camera::orbit(10.0, 10.0, 1.8, 50.0, (4, 4)).unwrap();
    let c = ctx(&schedule, (4, 4));
    let rng = &mut ChaCha8Rng::seed_from_u64(0);
    assert!(sds_grad_3d(&m, std::slice::from_ref(&cam), 0.0, &mut image, &c, NoiseDraw::Timestep(0.5), rng).is_err());
    let sampling = TimeSampling::evenly_spaced(1).unwrap();
    assert!(video_sds_grad(&m, &[cam], &sampling, &mut image, &c, NoiseDraw::Timestep(0.5), rng).is_err());
}

#[test]
fn video_noise_is_independent_per_frame() {
    let m = model(11);
    let schedule = DiffusionSchedule::default();
    let target = random(&mut ChaCha8Rng::seed_from_u64(5), &[3, 4, 4, 3]);
    let mut video = AnalyticGuidance::fixed(GuidanceKind::Video, target).unwrap();
    let cam = Camera::orbit(10.0, 10.0, 1.8, 50.0, (4, 4)).unwrap();
    let sampling = TimeSampling::new(3, 0.1).unwrap();
    let out = video_sds_grad(&m, &[cam], &sampling, &mut video, &ctx(&schedule, (4, 4)), NoiseDraw::Timestep(0.4), &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    assert_eq!(out.rendered.shape(), &[3, 4, 4, 3]);
    assert_eq!(out.times, sampling.times());
    assert!(out.gradients.norm() > 0.0);
}
