use densim_core::density::{density_count, points_to_density, Point, PointAnnotation, TRUNCATE_SIGMAS};
use densim_core::synth::{generate_synthetic_scene, SynthConfig};
use proptest::prelude::*;

fn points(h: usize, w: usize, max: usize) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec((0.0..w as f64, 0.0..h as f64), 0..max)
        .prop_map(|v| v.into_iter().map(|(x, y)| Point::new(x, y)).collect())
}

fn scene() -> impl Strategy<Value = (usize, usize, Vec<Point>)> {
    (8usize..48, 8usize..48).prop_flat_map(|(h, w)| (Just(h), Just(w), points(h, w, 12)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mass_is_conserved((h, w, pts) in scene(), sigma in 0.5f64..6.0) {
        let n = pts.len();
        let d = points_to_density(&PointAnnotation::new(pts), h, w, sigma).unwrap();
        prop_assert!((density_count(&d) - n as f64).abs() < 1e-5 * (n.max(1) as f64));
        prop_assert!(d.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn densities_of_disjoint_sets_add((h, w, a) in scene(), extra in points(48, 48, 8), sigma in 0.5f64..4.0) {
        let b: Vec<Point> = extra.into_iter().filter(|p| p.x < w as f64 && p.y < h as f64).collect();
        let union: Vec<Point> = a.iter().chain(&b).copied().collect();
        let da = points_to_density(&PointAnnotation::new(a), h, w, sigma).unwrap();
        let db = points_to_density(&PointAnnotation::new(b), h, w, sigma).unwrap();
        let du = points_to_density(&PointAnnotation::new(union), h, w, sigma).unwrap();
        for ((u, x), y) in du.data().iter().zip(da.data()).zip(db.data()) {
            prop_assert!((u - (x + y)).abs() < 1e-9);
        }
    }

    #[test]
    fn interior_blob_translates_exactly(
        fx in 0.0f64..1.0, fy in 0.0f64..1.0, dx in 0i64..6, dy in 0i64..6, sigma in 0.5f64..2.0,
    ) {
        let size = 40;
        let margin = (TRUNCATE_SIGMAS * sigma).ceil() + 1.0;
        let p = Point::new(margin + fx, margin + fy);
        let q = Point::new(p.x + dx as f64, p.y + dy as f64);
        let a = points_to_density(&PointAnnotation::new(vec![p]), size, size, sigma).unwrap();
        let b = points_to_density(&PointAnnotation::new(vec![q]), size, size, sigma).unwrap();
        let (dx, dy) = (dx as usize, dy as usize);
        for y in 0..size - dy {
            for x in 0..size - dx {
                prop_assert!((a.get(y, x, 0) - b.get(y + dy, x + dx, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn synthetic_scenes_are_deterministic(seed in any::<u64>(), lo in 0usize..6) {
        let cfg = SynthConfig { canvas_size: (48, 48), count_range: (lo, lo + 3), seed, ..SynthConfig::low_density() };
        let (i1, a1) = generate_synthetic_scene(&cfg).unwrap();
        let (i2, a2) = generate_synthetic_scene(&cfg).unwrap();
        prop_assert_eq!(i1.data(), i2.data());
        prop_assert_eq!(a1, a2);
    }
}
