use hybrid_sds::io::session::Session;
use hybrid_sds::scene::GridConfig;
use hybrid_sds::synthetic::SyntheticScene;
use hybrid_sds_py::{checked_hash_index, render_synthetic_view, render_view};

fn small_grid() -> GridConfig {
    GridConfig {
        levels: 3,
        features_per_level: 2,
        base_resolution: 4,
        per_level_scale: 2.0,
        table_size: 64,
        time_base_resolution: None,
    }
}

#[test]
fn hash_index_matches_core_and_rejects_bad_grids() {
    let g = small_grid();
    // 5^3 vertices exceed the table, so level 0 hashes.
    for x in 0..5 {
        let i = checked_hash_index(&[x, 1, 2], 0, &g).unwrap();
        assert_eq!(i, hybrid_sds::scene::hash_index(&[x, 1, 2], 0, &g).unwrap());
        assert!(i < g.table_size);
    }
    assert!(checked_hash_index(&[0, 0], 0, &g).is_err());
    assert!(checked_hash_index(&[0, 0, 0], 3, &g).is_err());
    let bad = GridConfig { table_size: 0, ..g };
    assert!(checked_hash_index(&[0, 0, 0], 0, &bad).is_err());
}

#[test]
fn render_view_shapes_and_range() {
    let session = Session::new(hybrid_sds::io::config::RunConfig::defaults(
        hybrid_sds::io::config::Profile::Desk,
    ))
    .unwrap();
    let (shape, data) = render_view(&session.trainer.model, 30.0, 10.0, 0.25, (5, 4), 8).unwrap();
    assert_eq!(shape, vec![4, 5, 3]);
    assert_eq!(data.len(), 60);
    assert!(data.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn synthetic_views_match_a_direct_render() {
    use hybrid_sds::render::{Camera, RenderOptions};
    use rand::SeedableRng;
    let scene = SyntheticScene::sphere();
    let (shape, data) = render_synthetic_view(&scene, 0.0, 0.0, 0.0, (6, 6), 16).unwrap();
    let cam = Camera::orbit(0.0, 0.0, 1.8, 50.0, (6, 6)).unwrap();
    let direct = scene
        .render(
            &cam,
            0.0,
            &RenderOptions::deterministic(16),
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
    assert_eq!(shape, direct.rgb.shape());
    assert_eq!(data, direct.rgb.data());
}
