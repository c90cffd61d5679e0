mod common;

use hybrid_sds::scene::{
    hash_index, DynamicHashGrid, GridConfig, ParamGroup, SceneConfig, SceneModel, StaticHashGrid,
};
use hybrid_sds::{Differentiable, Param};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

fn grid(levels: usize, base: usize, scale: f64, log_t: u32, time: Option<usize>) -> GridConfig {
    GridConfig {
        levels,
        features_per_level: 2,
        base_resolution: base,
        per_level_scale: scale,
        table_size: 1 << log_t,
        time_base_resolution: time,
    }
}

fn grid_strategy() -> impl Strategy<Value = GridConfig> {
    (1usize..6, 2usize..9, 1.2f64..2.2, 6u32..13, prop::option::of(2usize..6))
        .prop_map(|(l, b, s, t, time)| grid(l, b, s, t, time))
}

fn randomize(tables: &mut [Param], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in tables {
        for v in p.value.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
}

/// Vertex slot written out directly: row-major with x fastest when the level
/// fits in the table, XOR of prime products otherwise.
fn expected_slot(config: &GridConfig, level: usize, coords: &[u32]) -> usize {
    let mut sides = vec![config.resolution(level) as u128 + 1; 3];
    if let Some(t) = config.time_resolution(level) {
        sides.push(t as u128 + 1);
    }
    if sides.iter().product::<u128>() <= config.table_size as u128 {
        let mut idx = 0u128;
        let mut stride = 1u128;
        for (c, s) in coords.iter().zip(&sides) {
            idx += u128::from(*c) * stride;
            stride *= s;
        }
        idx as usize
    } else {
        let primes = [1u64, 2_654_435_761, 805_459_861, 3_674_653_429];
        let h = coords
            .iter()
            .zip(primes)
            .fold(0u64, |h, (&c, p)| h ^ (u64::from(c) * p) % (1 << 32));
        (h % config.table_size as u64) as usize
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hash_index_is_in_range_and_matches_layout(config in grid_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for level in 0..config.levels {
            let n = config.resolution(level) as u32;
            let mut coords: Vec<u32> = (0..3).map(|_| rng.random_range(0..=n)).collect();
            if let Some(t) = config.time_resolution(level) {
                coords.push(rng.random_range(0..=t as u32));
            }
            let slot = hash_index(&coords, level, &config).unwrap();
            prop_assert!(slot < config.table_size);
            prop_assert_eq!(slot, hash_index(&coords, level, &config).unwrap());
            prop_assert_eq!(slot, expected_slot(&config, level, &coords));
        }
        prop_assert!(hash_index(&[0; 4], config.levels, &config).is_err());
        prop_assert!(hash_index(&[0; 2], 0, &config).is_err());
    }

    #[test]
    fn interpolation_matches_corner_enumeration(config in grid_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<[f32; 4]> = (0..16)
            .map(|_| {
                [
                    rng.random_range(-1.1..1.1),
                    rng.random_range(-1.1..1.1),
                    rng.random_range(-1.1..1.1),
                    rng.random_range(0.0..1.0),
                ]
            })
            .collect();
        let wide = |p: &[f32; 4]| p.map(f64::from);
        let check = |got: &[f32], want: Vec<f64>| -> Result<(), TestCaseError> {
            prop_assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                prop_assert!((f64::from(*g) - w).abs() < 1e-6, "{} vs {}", g, w);
            }
            Ok(())
        };
        if config.time_base_resolution.is_some() {
            let mut g = DynamicHashGrid::new(config.clone(), seed).unwrap();
            randomize(g.tables_mut(), seed);
            for p in &points {
                let got = g.encode([p[0], p[1], p[2]], p[3]).unwrap();
                check(&got, common::encode(&config, g.tables(), &wide(p)))?;
            }
        } else {
            let mut g = StaticHashGrid::new(config.clone(), seed).unwrap();
            randomize(g.tables_mut(), seed);
            for p in &points {
                let got = g.encode([p[0], p[1], p[2]]);
                check(&got, common::encode(&config, g.tables(), &wide(p)[..3]))?;
            }
        }
    }

    #[test]
    fn zero_dynamic_tables_contribute_nothing(
        x in -1.5f32..1.5, y in -1.5f32..1.5, z in -1.5f32..1.5, t in 0.0f32..1.0,
    ) {
        let mut g = DynamicHashGrid::new(GridConfig::desk_dynamic(), 3).unwrap();
        for p in g.tables_mut() {
            p.value.fill(0.0);
        }
        prop_assert!(g.encode([x, y, z], t).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decoded_density_and_color_are_in_range(
        seed in any::<u64>(), x in -1.0f32..1.0, y in -1.0f32..1.0, z in -1.0f32..1.0, t in 0.0f32..1.0,
    ) {
        let mut model = SceneModel::new(&small_scene(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in model.params_mut() {
            for v in p.value.data_mut() {
                *v = rng.random_range(-30.0..30.0);
            }
        }
        let (density, color) = model.query([x, y, z], t).unwrap();
        prop_assert!(density >= 0.0 && density.is_finite());
        prop_assert!(color.iter().all(|c| (0.0..=1.0).contains(c)));
    }
}

fn small_scene() -> SceneConfig {
    SceneConfig {
        static_grid: grid(3, 4, 2.0, 10, None),
        dynamic_grid: grid(3, 4, 2.0, 10, Some(2)),
        hidden_width: 8,
        hidden_layers: 2,
        ..SceneConfig::desk()
    }
}

#[test]
fn parameter_groups_partition_the_learnable_state() {
    let model = SceneModel::new(&SceneConfig::desk(), 0).unwrap();
    let all: Vec<_> = model.params().iter().map(|p| p.key()).collect();
    let mut seen = HashSet::new();
    for group in [ParamGroup::Static, ParamGroup::Dynamic, ParamGroup::Mlp] {
        for p in model.group_params(group) {
            assert!(seen.insert(p.key()), "{} is in two groups", p.name());
        }
    }
    assert_eq!(seen.len(), all.len());
    assert!(all.iter().all(|k| seen.contains(k)));
}

#[test]
fn blob_prior_at_origin_with_zero_weights() {
    let mut model = SceneModel::new(&small_scene(), 1).unwrap();
    for p in model.params_mut() {
        p.value.fill(0.0);
    }
    let (d0, _) = model.query([0.0; 3], 0.3).unwrap();
    let (far, _) = model.query([0.0, 0.0, 0.99], 0.3).unwrap();
    let softplus0 = std::f32::consts::LN_2;
    assert!((d0 - (softplus0 + 10.0)).abs() < 1e-5, "{d0}");
    assert!((far - softplus0).abs() < 1e-4, "{far}");
}

#[test]
fn invalid_grids_are_rejected() {
    assert!(grid(0, 4, 2.0, 10, None).validate().is_err());
    assert!(grid(2, 1, 2.0, 10, None).validate().is_err());
    assert!(grid(2, 4, 1.0, 10, None).validate().is_err());
    let mut bad = grid(2, 4, 2.0, 10, None);
    bad.table_size = 1000;
    assert!(bad.validate().is_err());
    bad.table_size = 1024;
    bad.features_per_level = 0;
    assert!(bad.validate().is_err());
}
