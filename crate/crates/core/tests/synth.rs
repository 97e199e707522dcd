use lidarflow::eval::{epe_map, evaluate, Region, Occlusion};
use lidarflow::flow::FlowField;
use lidarflow::lidar::{project_to_range_image, CameraModel, GridSpec};
use lidarflow::synth::*;
use proptest::prelude::*;

fn desk(seed: u64) -> SceneConfig {
    SceneConfig::new(GridSpec::desk(), seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn samples_satisfy_module_invariants(seed in any::<u64>(), n in 0usize..=5) {
        let cfg = SceneConfig { n_objects: n, ..desk(seed) };
        let s = generate_sample(&cfg).unwrap();
        let spec = cfg.spec;
        // range images: valid ⇒ positive range, invalid ⇒ zero sentinels
        for img in [&s.xt, &s.xt1] {
            for i in 0..spec.cells() {
                if img.valid()[i] {
                    prop_assert!(img.range()[i] > 0.0 && img.range()[i].is_finite());
                } else {
                    prop_assert_eq!((img.range()[i], img.reflectivity()[i]), (0.0, 0.0));
                }
            }
        }
        prop_assert!(s.xt.range().iter().all(|r| *r == 0.0 || (2.0..=80.0).contains(r)));
        // flows finite and encodable
        prop_assert!(s.gt_dense.data().iter().all(|v| v.is_finite() && v.abs() < 512.0));
        // GT_Lidar validity within X_t validity
        let gv = s.gt_lidar.flow().valid_vec();
        prop_assert!((0..spec.cells()).all(|i| !gv[i] || s.xt.valid()[i]));
        // the stored cloud reproduces X_t
        let reprojected = project_to_range_image(&s.cloud, &spec);
        prop_assert_eq!(reprojected.valid(), s.xt.valid());
        // masks nest: fg, noc ⊆ valid
        prop_assert!((0..s.masks.valid.len()).all(|i| (!s.masks.noc[i] && !s.masks.fg[i]) || s.masks.valid[i]));
    }

    #[test]
    fn foreground_is_union_of_rectangles(seed in any::<u64>(), n in 0usize..=5) {
        let cfg = SceneConfig { n_objects: n, ..desk(seed) };
        let s = generate_sample(&cfg).unwrap();
        prop_assert_eq!(s.scene.objects.len(), n);
        let (h, w) = (cfg.spec.height, cfg.spec.width);
        for y in 0..h {
            for x in 0..w {
                let inside = s.scene.objects.iter().any(|o| x >= o.x0 && x < o.x0 + o.w && y >= o.y0 && y < o.y0 + o.h);
                prop_assert_eq!(s.masks.fg[y * w + x], inside);
            }
        }
    }

    #[test]
    fn constant_translation_gives_constant_flow_and_full_noc(
        seed in any::<u64>(),
        u in -4.0f64..4.0,
        v in -4.0f64..4.0,
    ) {
        let cfg = SceneConfig { n_objects: 0, background: Some([u, v]), ..desk(seed) };
        let s = generate_sample(&cfg).unwrap();
        prop_assert!(s.gt_dense.data().chunks_exact(2).all(|f| f == [u as f32, v as f32]));
        // a single motion never conflicts with itself
        prop_assert!(s.masks.noc.iter().all(|v| *v));
    }
}

#[test]
fn identity_pipeline_scores_zero() {
    let cfg = SceneConfig { n_objects: 0, background: Some([0.0, 0.0]), ..desk(17) };
    let s = generate_sample(&cfg).unwrap();
    assert_eq!(s.xt1, s.xt);
    assert!(s.grid_flow.data().iter().all(|v| *v == 0.0));
    assert!(s.gt_lidar.flow().data().iter().all(|v| *v == 0.0));
    let zero = FlowField::zeros(cfg.spec.height, cfg.spec.width);
    let (map, mean) = epe_map(&zero, &s.gt_dense, &s.masks.valid).unwrap();
    assert!(map.iter().all(|e| *e == 0.0));
    assert_eq!(mean, 0.0);
    let rep = evaluate(&zero, &s.gt_dense, &s.masks).unwrap();
    assert_eq!(rep.fl(Region::All, Occlusion::Occ), Some(0.0));
}

/// Warping by a grid flow derived from a pure image translation moves lidar
/// returns; for an integer grid shift the warp is an exact column shift.
#[test]
fn integer_grid_shift_moves_columns() {
    let s = generate_sample(&SceneConfig { n_objects: 0, background: Some([0.0, 0.0]), ..desk(3) }).unwrap();
    let flow = FlowField::from_fn(s.xt.rows(), s.xt.cols(), |_, _| [2.0, 0.0]);
    let out = warp_range_image(&s.xt, &flow).unwrap();
    for r in 0..s.xt.rows() {
        assert_eq!(out.get(r, 0), None);
        assert_eq!(out.get(r, 1), None);
        for c in 2..s.xt.cols() {
            assert_eq!(out.get(r, c), s.xt.get(r, c - 2));
        }
    }
}

#[test]
fn grid_flow_of_zero_dense_flow_is_zero() {
    let spec = GridSpec::desk();
    let cam = CameraModel::fitted(&spec);
    let g = grid_flow_from_dense(&spec, &cam, &FlowField::zeros(spec.height, spec.width));
    assert!(g.data().iter().all(|v| *v == 0.0));
}

#[test]
fn conflicting_motions_mark_occlusions() {
    let mut found = false;
    for seed in 0..20 {
        let s = generate_sample(&SceneConfig { n_objects: 3, ..desk(seed) }).unwrap();
        found |= s.masks.noc.iter().any(|v| !*v);
    }
    assert!(found);
}

#[test]
fn manifest_regenerates_bit_identical_dataset() {
    let m = Manifest::new(SceneConfig { n_objects: 3, ..desk(0) }, [3, 1, 1], 77).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.txt");
    m.write(&path).unwrap();
    let back = Manifest::read(&path).unwrap();
    assert_eq!(back.to_text(), m.to_text());
    for (a, b) in m.records.iter().zip(&back.records) {
        assert_eq!(m.generate(a).unwrap(), back.generate(b).unwrap());
    }
    let train: Vec<_> = m.split(Split::Train).map(|r| r.seed).collect();
    let test: Vec<_> = m.split(Split::Test).map(|r| r.seed).collect();
    assert!(train.iter().all(|s| !test.contains(s)));
}
