//! Property suites over randomized inputs.

use geo_cnn_core::geoconv::{decomposition_coefficients, quadrant_bases};
use geo_cnn_core::pointcloud::{normalize_unit_sphere, rotate_z, PointCloud};
use geo_cnn_core::spatial::SpatialIndex;
use proptest::prelude::*;

fn finite_coord() -> impl Strategy<Value = f32> {
    (-100.0f64..100.0).prop_map(|v| v as f32)
}

proptest! {
    #[test]
    fn coefficients_partition_unity(
        x in finite_coord(),
        y in finite_coord(),
        z in finite_coord(),
    ) {
        prop_assume!(x != 0.0 || y != 0.0 || z != 0.0);
        let edge = [x, y, z];
        let bases = quadrant_bases(edge).unwrap();
        let c = decomposition_coefficients(edge, bases).unwrap();
        prop_assert!(c.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rotation_preserves_pairwise_distances(
        coords in prop::collection::vec(-2.0f64..2.0, 3 * 12),
        angle in 0.0f64..std::f64::consts::TAU,
    ) {
        let data: Vec<f32> = coords.iter().map(|&v| v as f32).collect();
        let cloud = PointCloud::new(3, data, None).unwrap();
        let rotated = rotate_z(&cloud, angle as f32);
        for i in 0..cloud.n() {
            for j in (i + 1)..cloud.n() {
                let d = dist(cloud.position(i), cloud.position(j));
                let rd = dist(rotated.position(i), rotated.position(j));
                prop_assert!((d - rd).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn normalization_centers_and_bounds(
        coords in prop::collection::vec(-50.0f64..50.0, 3 * 20),
    ) {
        let data: Vec<f32> = coords.iter().map(|&v| v as f32).collect();
        let cloud = PointCloud::new(3, data, None).unwrap();
        let out = normalize_unit_sphere(&cloud);
        let mut max_norm = 0.0f64;
        for i in 0..out.n() {
            let p = out.position(i);
            let n = ((p[0] as f64).powi(2) + (p[1] as f64).powi(2) + (p[2] as f64).powi(2)).sqrt();
            max_norm = max_norm.max(n);
        }
        prop_assert!(max_norm <= 1.0 + 1e-6);
    }

    #[test]
    fn ball_monotone_in_radius(
        coords in prop::collection::vec(-1.0f64..1.0, 3 * 30),
        r1 in 0.05f64..0.4,
        grow in 1.01f64..3.0,
    ) {
        let positions: Vec<[f32; 3]> = coords
            .chunks(3)
            .map(|c| [c[0] as f32, c[1] as f32, c[2] as f32])
            .collect();
        let r1 = r1 as f32;
        let r2 = (r1 as f64 * grow) as f32;
        let i1 = SpatialIndex::build(&positions, r1).unwrap();
        let i2 = SpatialIndex::build(&positions, r2).unwrap();
        for p in 0..positions.len() {
            let small = i1.ball_query(p, r1, None).unwrap();
            let large = i2.ball_query(p, r2, None).unwrap();
            for j in &small.indices {
                prop_assert!(large.indices.contains(j));
            }
        }
    }
}

fn dist(a: [f32; 3], b: [f32; 3]) -> f32 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}
