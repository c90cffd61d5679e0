mod common;

use hybrid_sds::io::session::Session;
use hybrid_sds::render::RadianceModel;
use hybrid_sds::scene::ParamGroup;
use hybrid_sds::scheduler::{
    apply_freeze_policy, grad_scale_for, learning_rate_for, select_update, FreezePolicy, StageConfig, UpdateKind,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn stages(p_3d: f64, p_img: f64) -> StageConfig {
    StageConfig {
        p_3d,
        p_img,
        ..StageConfig::desk()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn stage_one_is_always_3d_and_stage_two_never_video(seed in any::<u64>(), p in 0.0f64..=0.5, q in 0.0f64..=1.0) {
        let c = stages(p, q);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            prop_assert_eq!(select_update(1, &c, &mut rng).unwrap(), UpdateKind::ThreeD);
            prop_assert_ne!(select_update(2, &c, &mut rng).unwrap(), UpdateKind::Vid);
        }
    }

    #[test]
    fn degenerate_probabilities_are_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let none = stages(0.0, 0.7);
        let all_3d = stages(1.0, 0.0);
        for _ in 0..50 {
            prop_assert_eq!(select_update(2, &none, &mut rng).unwrap(), UpdateKind::Img);
            prop_assert_eq!(select_update(3, &none, &mut rng).unwrap(), UpdateKind::Vid);
            prop_assert_eq!(select_update(3, &all_3d, &mut rng).unwrap(), UpdateKind::ThreeD);
        }
    }

    #[test]
    fn infeasible_probabilities_are_rejected(p in 0.0f64..=1.0, q in 0.0f64..=1.0) {
        let c = stages(p, q);
        let feasible = p + p * q <= 1.0 + 1e-12;
        prop_assert_eq!(c.validate().is_ok(), feasible);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        prop_assert_eq!(select_update(3, &c, &mut rng).is_ok(), feasible);
        prop_assert!(select_update(1, &c, &mut rng).is_ok());
        prop_assert!(stages(p + 1.01, 0.0).validate().is_err());
        prop_assert!(stages(0.0, -q - 0.01).validate().is_err());
    }

    #[test]
    fn stage_of_partitions_the_schedule(a in 0u64..20, b in 0u64..20, c in 0u64..20) {
        let mut s = StageConfig::desk();
        s.iterations = [a, b, c];
        let stages: Vec<u8> = (0..a + b + c).map(|i| s.stage_of(i)).collect();
        prop_assert!(stages.windows(2).all(|w| w[0] <= w[1]));
        for (k, n) in [a, b, c].into_iter().enumerate() {
            prop_assert_eq!(stages.iter().filter(|&&x| x == k as u8 + 1).count() as u64, n);
        }
    }
}

#[test]
fn dynamic_grid_trains_only_on_stage_three_video_updates() {
    let mut model = RadianceModel::new(&hybrid_sds::scene::SceneConfig::desk(), 0).unwrap();
    for stage in 1..=3u8 {
        for kind in UpdateKind::ALL {
            for background_from_video in [false, true] {
                let policy = FreezePolicy { background_from_video };
                apply_freeze_policy(&mut model, stage, kind, &policy);
                let vid3 = stage == 3 && kind == UpdateKind::Vid;
                assert_eq!(model.is_frozen(ParamGroup::Dynamic), !vid3);
                assert!(!model.is_frozen(ParamGroup::Static));
                assert!(!model.is_frozen(ParamGroup::Mlp));
                assert_eq!(
                    model.is_frozen(ParamGroup::Background),
                    kind == UpdateKind::Vid && !background_from_video
                );
            }
        }
    }
}

#[test]
fn learning_rates_and_gradient_scales() {
    let s = StageConfig::full();
    assert_eq!(learning_rate_for(ParamGroup::Static, 1, &s), 0.01);
    assert_eq!(learning_rate_for(ParamGroup::Static, 3, &s), 1e-4);
    assert_eq!(learning_rate_for(ParamGroup::Dynamic, 3, &s), 0.01);
    assert_eq!(learning_rate_for(ParamGroup::Mlp, 2, &s), 0.001);
    assert_eq!(grad_scale_for(UpdateKind::Vid, &s), 0.1);
    assert_eq!(grad_scale_for(UpdateKind::ThreeD, &s), 1.0);
}

#[test]
fn logged_schedule_follows_the_stages() {
    let mut session = Session::new(common::small_run_config(12)).unwrap();
    let log = session.run_until(u64::MAX, None, &mut |_| {}).unwrap();
    let [n1, n2, n3] = session.config.stages.iterations;
    assert_eq!(log.len() as u64, n1 + n2 + n3);
    for (i, r) in log.iter().enumerate() {
        assert_eq!(r.iteration, i as u64);
        assert_eq!(r.stage, session.config.stages.stage_of(i as u64));
        match r.stage {
            1 => assert_eq!(r.kind, UpdateKind::ThreeD),
            2 => assert_ne!(r.kind, UpdateKind::Vid),
            _ => {}
        }
        assert!(r.residual_norm.is_finite());
        assert_eq!(r.adapter_loss.is_some(), r.kind == UpdateKind::Img);
    }
    assert!(session.trainer.finished());
}
