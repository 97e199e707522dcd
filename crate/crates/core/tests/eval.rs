mod common;

use common::rng;
use lidarflow::eval::*;
use lidarflow::flow::FlowField;
use proptest::prelude::*;
use rand::RngExt;

/// 10×10 frame with hand-placed errors. GT is (4, 0) everywhere, so 5% of ‖gt‖
/// is 0.2 and only the 3 px threshold matters.
///   - row 9 invalid (carries a huge error that must be ignored)
///   - columns 0..3 foreground; column 9 occluded
///   - fg rows 0..3: error (3, 0)          → 9 fg outliers, all non-occluded
///   - column 9 rows 0..9: error (0, 5)    → 9 bg outliers, all occluded
///   - (5, 5): error (2.5, 0)              → inlier
///   - (6, 6): error (0, −3)               → bg outlier, non-occluded
fn hand_case() -> (FlowField, FlowField, EvalMasks) {
    let valid: Vec<bool> = (0..100).map(|i| i / 10 != 9).collect();
    let gt = FlowField::from_fn(10, 10, |_, _| [4.0, 0.0]).with_validity(Some(valid)).unwrap();
    let pred = FlowField::from_fn(10, 10, |y, x| {
        let e = match (y, x) {
            (9, _) => [100.0, 100.0],
            (y, x) if y < 3 && x < 3 => [3.0, 0.0],
            (_, 9) => [0.0, 5.0],
            (5, 5) => [2.5, 0.0],
            (6, 6) => [0.0, -3.0],
            _ => [0.0, 0.0],
        };
        [4.0 + e[0], e[1]]
    });
    let noc = (0..100).map(|i| i % 10 != 9).collect();
    let fg = (0..100).map(|i| i % 10 < 3).collect();
    let masks = EvalMasks::for_gt(&gt, Some(noc), Some(fg)).unwrap();
    (pred, gt, masks)
}

#[test]
fn hand_counted_ten_by_ten() {
    let (pred, gt, masks) = hand_case();
    let rep = evaluate(&pred, &gt, &masks).unwrap();
    // rows Noc/Occ, columns BG/FG/ALL
    assert_eq!(rep.pixels, [[54, 27, 81], [63, 27, 90]]);
    assert_eq!(rep.outliers, [[1, 9, 10], [10, 9, 19]]);
    let pct = |o: f64, n: f64| 100.0 * o / n;
    assert_eq!(rep.fl(Region::Background, Occlusion::Noc), Some(pct(1.0, 54.0)));
    assert_eq!(rep.fl(Region::Foreground, Occlusion::Noc), Some(pct(9.0, 27.0)));
    assert_eq!(rep.fl(Region::All, Occlusion::Noc), Some(pct(10.0, 81.0)));
    assert_eq!(rep.fl(Region::Background, Occlusion::Occ), Some(pct(10.0, 63.0)));
    assert_eq!(rep.fl(Region::All, Occlusion::Occ), Some(pct(19.0, 90.0)));
    // 9·3 + 9·5 + 2.5 + 3 over 90 valid pixels
    assert_eq!(rep.epe_mean(), Some(77.5 / 90.0));
}

#[test]
fn prediction_equal_to_gt_scores_zero() {
    let (_, gt, masks) = hand_case();
    let rep = evaluate(&gt, &gt, &masks).unwrap();
    assert_eq!(rep.epe_mean(), Some(0.0));
    for occ in Occlusion::ALL {
        for region in Region::ALL {
            assert_eq!(rep.fl(region, occ), Some(0.0));
        }
    }
}

#[test]
fn empty_foreground_is_undefined_not_zero() {
    let (pred, gt, _) = hand_case();
    let masks = EvalMasks::for_gt(&gt, None, None).unwrap();
    let rep = evaluate(&pred, &gt, &masks).unwrap();
    assert_eq!(rep.fl(Region::Foreground, Occlusion::Noc), None);
    assert!(rep.to_csv().contains("undefined"));
}

#[test]
fn outlier_rule_matches_restatement_on_random_pixels() {
    let mut r = rng(99);
    let (h, w) = (100, 1000);
    let gt = FlowField::from_fn(h, w, |_, _| {
        let scale = [1.0, 10.0, 60.0, 200.0][r.random_range(0..4)];
        [r.random_range(-scale..scale), r.random_range(-scale..scale)]
    });
    let pred = FlowField::from_fn(h, w, |y, x| {
        let [u, v] = gt.get(y, x);
        let e = r.random_range(0.0..8.0f32);
        let a = r.random_range(0.0..std::f32::consts::TAU);
        [u + e * a.cos(), v + e * a.sin()]
    });
    let valid = vec![true; h * w];
    let (map, _) = epe_map(&pred, &gt, &valid).unwrap();
    let mask = outlier_mask(&map, &gt, &valid).unwrap();
    let mut disagreements = 0;
    for i in 0..h * w {
        let ([pu, pv], [gu, gv]) = (pred.get(i / w, i % w), gt.get(i / w, i % w));
        let epe = ((pu as f64 - gu as f64).powi(2) + (pv as f64 - gv as f64).powi(2)).sqrt();
        let mag = ((gu as f64).powi(2) + (gv as f64).powi(2)).sqrt();
        // inlier when under 3 px or under 5% of the GT magnitude
        let inlier = epe < 3.0 || epe < 0.05 * mag;
        disagreements += usize::from(inlier == mask[i]);
    }
    assert_eq!(disagreements, 0);
}

fn random_frame(seed: u64, h: usize, w: usize) -> (FlowField, FlowField, EvalMasks) {
    let mut r = rng(seed);
    let gt = FlowField::from_fn(h, w, |_, _| [r.random_range(-30.0..30.0), r.random_range(-30.0..30.0)]);
    let pred = FlowField::from_fn(h, w, |y, x| {
        let [u, v] = gt.get(y, x);
        [u + r.random_range(-6.0..6.0), v + r.random_range(-6.0..6.0)]
    });
    let valid: Vec<bool> = (0..h * w).map(|_| r.random_bool(0.8)).collect();
    let gt = gt.with_validity(Some(valid)).unwrap();
    let noc = (0..h * w).map(|_| r.random_bool(0.7)).collect();
    let fg = (0..h * w).map(|_| r.random_bool(0.3)).collect();
    let masks = EvalMasks::for_gt(&gt, Some(noc), Some(fg)).unwrap();
    (pred, gt, masks)
}

proptest! {
    #[test]
    fn all_lies_between_background_and_foreground(seed in any::<u64>(), h in 2usize..20, w in 2usize..20) {
        let (pred, gt, masks) = random_frame(seed, h, w);
        prop_assume!(masks.valid.iter().any(|v| *v));
        let rep = evaluate(&pred, &gt, &masks).unwrap();
        for occ in Occlusion::ALL {
            if let (Some(b), Some(f), Some(a)) = (
                rep.fl(Region::Background, occ),
                rep.fl(Region::Foreground, occ),
                rep.fl(Region::All, occ),
            ) {
                prop_assert!(a >= b.min(f) - 1e-12 && a <= b.max(f) + 1e-12);
            }
        }
    }

    #[test]
    fn noc_buckets_never_exceed_occ(seed in any::<u64>(), h in 2usize..20, w in 2usize..20) {
        let (pred, gt, masks) = random_frame(seed, h, w);
        prop_assume!(masks.valid.iter().any(|v| *v));
        let rep = evaluate(&pred, &gt, &masks).unwrap();
        for r in 0..3 {
            prop_assert!(rep.pixels[0][r] <= rep.pixels[1][r]);
            prop_assert!(rep.outliers[0][r] <= rep.outliers[1][r]);
        }
    }

    #[test]
    fn merged_report_equals_concatenated_frame(seed in any::<u64>()) {
        let (p1, g1, m1) = random_frame(seed, 6, 5);
        let (p2, g2, m2) = random_frame(seed ^ 1, 6, 5);
        prop_assume!(m1.valid.iter().any(|v| *v) && m2.valid.iter().any(|v| *v));
        let mut merged = evaluate(&p1, &g1, &m1).unwrap();
        merged.merge(&evaluate(&p2, &g2, &m2).unwrap());
        // stack the frames vertically
        let stack = |a: &FlowField, b: &FlowField| {
            let f = FlowField::from_fn(12, 5, |y, x| if y < 6 { a.get(y, x) } else { b.get(y - 6, x) });
            let v = [a.valid_vec(), b.valid_vec()].concat();
            f.with_validity(Some(v)).unwrap()
        };
        let masks = EvalMasks::new(
            12, 5,
            [m1.valid.clone(), m2.valid.clone()].concat(),
            [m1.noc.clone(), m2.noc.clone()].concat(),
            [m1.fg.clone(), m2.fg.clone()].concat(),
        ).unwrap();
        let whole = evaluate(&stack(&p1, &p2), &stack(&g1, &g2), &masks).unwrap();
        prop_assert_eq!(whole.outliers, merged.outliers);
        prop_assert_eq!(whole.pixels, merged.pixels);
        prop_assert_eq!(whole.epe_pixels, merged.epe_pixels);
    }
}
