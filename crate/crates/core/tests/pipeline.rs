use spheremap::counting::{count_from_gaussian, nms_baseline};
use spheremap::geometry::center_to_origin;
use spheremap::projection::{
    crop_roi, decode_raster, encode_raster, fill_holes_cubic, project_equirectangular, ProjectionConfig,
};
use spheremap::synthbench::{generate_spheroid, FeatureBand, SpheroidSpec, SyntheticSample};
use spheremap::targetmaps::{gaussian_map, GaussianMapConfig, SigmaMode};
use spheremap::training::{build_sample, MapSettings};

fn sparse_sample(noise: f64) -> SyntheticSample<f64> {
    let spec = SpheroidSpec {
        n_features: 120,
        surface_noise: noise,
        bump_amplitude: 0.04,
        sample_count: 150_000,
        feature_band: FeatureBand::Roi,
        seed: 11,
        ..SpheroidSpec::default()
    };
    generate_spheroid(&spec, &ProjectionConfig::default()).unwrap()
}

#[test]
fn radius_maxima_sit_on_keypoints() {
    let proj = ProjectionConfig::default();
    let s = sparse_sample(0.0);
    let grid = project_equirectangular(&center_to_origin(&s.cloud).unwrap(), &proj).unwrap();
    let grid = crop_roi(&fill_holes_cubic(&grid, true).unwrap(), &proj).unwrap();
    let found = nms_baseline(&grid, 2.5, true).unwrap();
    let w = grid.width() as f64;
    let hits = s
        .keypoints
        .points()
        .iter()
        .filter(|&&(r, c)| {
            found.centers.iter().any(|p| {
                let dc = (p[1] - c).abs();
                let dc = dc.min(w - dc);
                (p[0] - r).hypot(dc) <= 2.0
            })
        })
        .count();
    assert!(
        hits as f64 >= 0.95 * s.keypoints.len() as f64,
        "{hits} of {} keypoints matched",
        s.keypoints.len()
    );
}

#[test]
fn ground_truth_maps_recover_counts() {
    let s = sparse_sample(0.004);
    for mode in [SigmaMode::Fixed, SigmaMode::Adaptive] {
        let cfg = GaussianMapConfig { mode, ..GaussianMapConfig::default() };
        let map = gaussian_map::<f64>(&s.keypoints, &cfg).unwrap();
        let res = count_from_gaussian(&map, cfg.p_t, 1, true);
        assert_eq!(res.count as usize, s.keypoints.len(), "{mode:?}");
    }
}

#[test]
fn processed_raster_survives_encoding() {
    let proj = ProjectionConfig::default();
    let s = sparse_sample(0.004);
    let grid = project_equirectangular(&center_to_origin(&s.cloud).unwrap(), &proj).unwrap();
    let grid = crop_roi(&fill_holes_cubic(&grid, true).unwrap(), &proj).unwrap();
    assert_eq!((grid.height(), grid.width()), (96, 360));
    let f32_grid = grid.cast::<f32>();
    let back = decode_raster::<f32>(&encode_raster(&f32_grid).unwrap()).unwrap();
    assert_eq!(back, f32_grid);
}

#[test]
fn built_samples_have_matching_shapes() {
    let proj = ProjectionConfig::default();
    let s = sparse_sample(0.004);
    let cloud = s.cloud.clone();
    let sample = build_sample(&cloud, s.keypoints.clone(), &proj, &MapSettings::default()).unwrap();
    assert_eq!(sample.input.shape(), &[3, 96, 360]);
    assert_eq!((sample.density.height, sample.density.width), (96, 360));
    assert!((sample.density.sum() - s.keypoints.len() as f64).abs() < 1e-6 * s.keypoints.len() as f64);
    assert_eq!(sample.gaussian_adaptive.max(), 1.0);
}
