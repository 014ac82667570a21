//! Point-cloud representation, normalization, sampling, rotation, and the
//! synthetic shape generator used by the desk-scale datasets.
//!
//! A cloud is an `n x c` row-major array of `f32` with `c = 3` (xyz) or
//! `c = 6` (xyz plus a unit surface normal). Operations are pure: they
//! return new clouds and never mutate their input.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const POSITION_CHANNELS: usize = 3;
const NORMAL_NORM_TOL: f32 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    Cone,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Cylinder,
        ShapeKind::Cone,
    ];

    pub fn id(self) -> u32 {
        match self {
            ShapeKind::Sphere => 0,
            ShapeKind::Cube => 1,
            ShapeKind::Cylinder => 2,
            ShapeKind::Cone => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Cone => "cone",
        }
    }

    pub fn from_name(name: &str) -> Result<ShapeKind> {
        match name {
            "sphere" => Ok(ShapeKind::Sphere),
            "cube" => Ok(ShapeKind::Cube),
            "cylinder" => Ok(ShapeKind::Cylinder),
            "cone" => Ok(ShapeKind::Cone),
            other => Err(Error::InvalidArgument(format!(
                "unknown shape kind '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    channels: usize,
    data: Vec<f32>,
    label: Option<u32>,
}

impl PointCloud {
    /// Validates the invariants: `n >= 1`, `c` in {3, 6}, finite entries,
    /// unit normals when present.
    pub fn new(channels: usize, data: Vec<f32>, label: Option<u32>) -> Result<Self> {
        if channels != 3 && channels != 6 {
            return Err(Error::InvalidArgument(format!(
                "unsupported channel count {channels} (expected 3 or 6)"
            )));
        }
        if data.is_empty() || data.len() % channels != 0 {
            return Err(Error::InvalidArgument(format!(
                "data length {} is not a positive multiple of {channels}",
                data.len()
            )));
        }
        for (i, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "non-finite value {v} at row {} column {}",
                    i / channels,
                    i % channels
                )));
            }
        }
        if channels == 6 {
            for row in 0..data.len() / channels {
                let n = &data[row * 6 + 3..row * 6 + 6];
                let norm = libm::sqrtf(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
                if (norm - 1.0).abs() > NORMAL_NORM_TOL {
                    return Err(Error::InvalidArgument(format!(
                        "normal at row {row} has norm {norm}, expected 1"
                    )));
                }
            }
        }
        Ok(PointCloud {
            channels,
            data,
            label,
        })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.data.len() / self.channels
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn label(&self) -> Option<u32> {
        self.label
    }

    pub fn with_label(mut self, label: Option<u32>) -> Self {
        self.label = label;
        self
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    #[inline]
    pub fn position(&self, i: usize) -> [f32; 3] {
        let r = self.row(i);
        [r[0], r[1], r[2]]
    }

    pub fn positions(&self) -> Vec<[f32; 3]> {
        (0..self.n()).map(|i| self.position(i)).collect()
    }

    #[inline]
    pub fn has_normals(&self) -> bool {
        self.channels == 6
    }
}

/// Translates the centroid to the origin and scales so the farthest point
/// sits on the unit sphere. A fully coincident cloud keeps scale 1. Normals
/// are left untouched.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> PointCloud {
    let n = cloud.n();
    let mut centroid = [0.0f64; 3];
    for i in 0..n {
        let p = cloud.position(i);
        for k in 0..3 {
            centroid[k] += p[k] as f64;
        }
    }
    for c in centroid.iter_mut() {
        *c /= n as f64;
    }
    let mut max_sq = 0.0f64;
    for i in 0..n {
        let p = cloud.position(i);
        let mut d = 0.0f64;
        for k in 0..3 {
            let v = p[k] as f64 - centroid[k];
            d += v * v;
        }
        max_sq = max_sq.max(d);
    }
    let scale = if max_sq > 0.0 {
        1.0 / libm::sqrt(max_sq)
    } else {
        1.0
    };

    let mut data = cloud.data().to_vec();
    for i in 0..n {
        let row = &mut data[i * cloud.channels()..i * cloud.channels() + 3];
        for k in 0..3 {
            row[k] = ((row[k] as f64 - centroid[k]) * scale) as f32;
        }
    }
    PointCloud {
        channels: cloud.channels(),
        data,
        label: cloud.label(),
    }
}

/// Draws `n_out` rows: uniformly without replacement when the cloud is large
/// enough, with replacement otherwise. Deterministic for a fixed seed.
pub fn sample_points(cloud: &PointCloud, n_out: usize, seed: u64) -> Result<PointCloud> {
    if n_out == 0 {
        return Err(Error::InvalidArgument("cannot sample 0 points".into()));
    }
    let n = cloud.n();
    let mut rng = Rng::from_seed(seed);
    let picks: Vec<usize> = if n >= n_out {
        // Partial Fisher-Yates: the first n_out slots of a shuffle.
        let mut idx: Vec<u32> = (0..n as u32).collect();
        for i in 0..n_out {
            let j = i + rng.next_below((n - i) as u64) as usize;
            idx.swap(i, j);
        }
        idx[..n_out].iter().map(|&i| i as usize).collect()
    } else {
        (0..n_out).map(|_| rng.next_below(n as u64) as usize).collect()
    };

    let c = cloud.channels();
    let mut data = Vec::with_capacity(n_out * c);
    for &i in &picks {
        data.extend_from_slice(cloud.row(i));
    }
    Ok(PointCloud {
        channels: c,
        data,
        label: cloud.label(),
    })
}

/// Rotates positions and normals about the z axis by `angle` radians.
pub fn rotate_z(cloud: &PointCloud, angle: f32) -> PointCloud {
    let (sin, cos) = (libm::sin(angle as f64), libm::cos(angle as f64));
    let rotate = |x: f32, y: f32| -> (f32, f32) {
        let (x, y) = (x as f64, y as f64);
        ((cos * x - sin * y) as f32, (sin * x + cos * y) as f32)
    };
    let c = cloud.channels();
    let mut data = cloud.data().to_vec();
    for i in 0..cloud.n() {
        let row = &mut data[i * c..(i + 1) * c];
        let (x, y) = rotate(row[0], row[1]);
        row[0] = x;
        row[1] = y;
        if c == 6 {
            let (nx, ny) = rotate(row[3], row[4]);
            row[3] = nx;
            row[4] = ny;
        }
    }
    PointCloud {
        channels: c,
        data,
        label: cloud.label(),
    }
}

/// One surface sample: position and analytic unit normal, both in f64.
type Sample = ([f64; 3], [f64; 3]);

fn sample_sphere(rng: &mut Rng) -> Sample {
    let z = rng.uniform(-1.0, 1.0);
    let phi = rng.uniform(0.0, 2.0 * core::f64::consts::PI);
    let rho = libm::sqrt((1.0 - z * z).max(0.0));
    let p = [rho * libm::cos(phi), rho * libm::sin(phi), z];
    (p, p)
}

fn sample_cube(rng: &mut Rng) -> Sample {
    let axis = rng.next_below(3) as usize;
    let u = rng.uniform(-1.0, 1.0);
    let v = rng.uniform(-1.0, 1.0);
    let mut p = [0.0; 3];
    p[axis] = 1.0;
    p[(axis + 1) % 3] = u;
    p[(axis + 2) % 3] = v;
    let mut normal = [0.0; 3];
    normal[axis] = 1.0;
    (p, normal)
}

fn sample_cylinder(rng: &mut Rng) -> Sample {
    // Radius 1, height 2; lateral area 4*pi vs. 2*pi for the two caps.
    let phi = rng.uniform(0.0, 2.0 * core::f64::consts::PI);
    if rng.next_f64() < 2.0 / 3.0 {
        let z = rng.uniform(-1.0, 1.0);
        let (c, s) = (libm::cos(phi), libm::sin(phi));
        ([c, s, z], [c, s, 0.0])
    } else {
        let rho = libm::sqrt(rng.next_f64());
        ([rho * libm::cos(phi), rho * libm::sin(phi), 1.0], [0.0, 0.0, 1.0])
    }
}

fn sample_cone(rng: &mut Rng) -> Sample {
    // Apex at (0,0,1), base disc of radius 1 at z = -1.
    let phi = rng.uniform(0.0, 2.0 * core::f64::consts::PI);
    let (c, s) = (libm::cos(phi), libm::sin(phi));
    let sqrt5 = libm::sqrt(5.0);
    let lateral_fraction = sqrt5 / (sqrt5 + 1.0);
    if rng.next_f64() < lateral_fraction {
        // Area-uniform along the slant: radius grows linearly from the apex.
        let u = libm::sqrt(rng.next_f64());
        let inv = 1.0 / sqrt5;
        ([u * c, u * s, 1.0 - 2.0 * u], [2.0 * c * inv, 2.0 * s * inv, inv])
    } else {
        let rho = libm::sqrt(rng.next_f64());
        ([rho * c, rho * s, -1.0], [0.0, 0.0, -1.0])
    }
}

/// Generates `n` surface samples of `kind` with analytic unit normals,
/// adds Gaussian positional jitter, then normalizes to the unit sphere.
///
/// The symmetric kinds (sphere, cube, cylinder) are sampled in antipodal
/// pairs so the centroid of an unjittered cloud is exactly zero and the
/// normalization step leaves the analytic surface intact.
pub fn synth_shape(kind: ShapeKind, n: usize, jitter: f32, seed: u64) -> Result<PointCloud> {
    if n < 16 {
        return Err(Error::InvalidArgument(format!(
            "synth_shape needs at least 16 points, got {n}"
        )));
    }
    let mut rng = Rng::from_seed(seed);
    let mut samples: Vec<Sample> = Vec::with_capacity(n);
    let paired = !matches!(kind, ShapeKind::Cone);
    let draw = |rng: &mut Rng| match kind {
        ShapeKind::Sphere => sample_sphere(rng),
        ShapeKind::Cube => sample_cube(rng),
        ShapeKind::Cylinder => sample_cylinder(rng),
        ShapeKind::Cone => sample_cone(rng),
    };
    if paired {
        while samples.len() + 2 <= n {
            let (p, nrm) = draw(&mut rng);
            samples.push((p, nrm));
            samples.push(([-p[0], -p[1], -p[2]], [-nrm[0], -nrm[1], -nrm[2]]));
        }
        if samples.len() < n {
            samples.push(draw(&mut rng));
        }
    } else {
        for _ in 0..n {
            samples.push(draw(&mut rng));
        }
    }

    if jitter != 0.0 {
        for (p, _) in samples.iter_mut() {
            for coord in p.iter_mut() {
                *coord += jitter as f64 * rng.normal();
            }
        }
    }

    let mut data = Vec::with_capacity(n * 6);
    for (p, nrm) in &samples {
        data.extend([p[0] as f32, p[1] as f32, p[2] as f32]);
        data.extend([nrm[0] as f32, nrm[1] as f32, nrm[2] as f32]);
    }
    let cloud = PointCloud::new(6, data, Some(kind.id()))?;
    Ok(normalize_unit_sphere(&cloud))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm3(v: &[f32]) -> f32 {
        libm::sqrtf(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
    }

    #[test]
    fn rejects_bad_channel_counts_and_values() {
        assert!(PointCloud::new(5, vec![0.0; 10], None).is_err());
        assert!(PointCloud::new(3, vec![], None).is_err());
        assert!(PointCloud::new(3, vec![0.0, f32::NAN, 0.0], None).is_err());
        // Non-unit normal.
        assert!(PointCloud::new(6, vec![0.0, 0.0, 0.0, 0.5, 0.0, 0.0], None).is_err());
    }

    #[test]
    fn normalize_symmetric_pair() {
        let cloud = PointCloud::new(3, vec![2.0, 0.0, 0.0, -2.0, 0.0, 0.0], None).unwrap();
        let out = normalize_unit_sphere(&cloud);
        assert_eq!(out.data(), &[1.0, 0.0, 0.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_single_point_to_origin() {
        let cloud = PointCloud::new(3, vec![5.0, 5.0, 5.0], None).unwrap();
        let out = normalize_unit_sphere(&cloud);
        assert_eq!(out.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_recomputed_statistics() {
        let mut rng = Rng::from_seed(21);
        let data: Vec<f32> = (0..300).map(|_| rng.uniform(-4.0, 9.0) as f32).collect();
        let cloud = PointCloud::new(3, data, None).unwrap();
        let out = normalize_unit_sphere(&cloud);
        let mut centroid = [0.0f64; 3];
        let mut max_norm = 0.0f64;
        for i in 0..out.n() {
            let p = out.position(i);
            for k in 0..3 {
                centroid[k] += p[k] as f64;
            }
            max_norm = max_norm.max(norm3(&p) as f64);
        }
        for c in centroid {
            assert!((c / out.n() as f64).abs() < 1e-6);
        }
        assert!((max_norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn normalize_is_idempotent() {
        let mut rng = Rng::from_seed(4);
        let data: Vec<f32> = (0..90).map(|_| rng.uniform(-2.0, 3.0) as f32).collect();
        let once = normalize_unit_sphere(&PointCloud::new(3, data, None).unwrap());
        let twice = normalize_unit_sphere(&once);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn sample_is_deterministic_and_a_permutation_at_full_size() {
        let mut rng = Rng::from_seed(6);
        let data: Vec<f32> = (0..30).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let cloud = PointCloud::new(3, data, Some(2)).unwrap();

        let a = sample_points(&cloud, 4, 77).unwrap();
        let b = sample_points(&cloud, 4, 77).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.label(), Some(2));

        let perm = sample_points(&cloud, 10, 9).unwrap();
        let mut rows: Vec<Vec<u32>> = (0..10)
            .map(|i| perm.row(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut orig: Vec<Vec<u32>> = (0..10)
            .map(|i| cloud.row(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        orig.sort();
        assert_eq!(rows, orig);
    }

    #[test]
    fn sample_with_replacement_reuses_input_rows() {
        let cloud = PointCloud::new(3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], None)
            .unwrap();
        let out = sample_points(&cloud, 8, 5).unwrap();
        assert_eq!(out.n(), 8);
        for i in 0..8 {
            let row = out.row(i);
            assert!((0..3).any(|j| cloud.row(j) == row));
        }
        assert!(sample_points(&cloud, 0, 5).is_err());
    }

    #[test]
    fn rotate_zero_angle_is_identity() {
        let cloud = synth_shape(ShapeKind::Cube, 32, 0.01, 3).unwrap();
        let out = rotate_z(&cloud, 0.0);
        assert_eq!(out, cloud);
    }

    #[test]
    fn rotate_quarter_turn_moves_x_to_y() {
        let cloud = PointCloud::new(3, vec![1.0, 0.0, 0.0], None).unwrap();
        let out = rotate_z(&cloud, core::f32::consts::FRAC_PI_2);
        let p = out.position(0);
        assert!((p[0]).abs() < 1e-6 && (p[1] - 1.0).abs() < 1e-6 && p[2].abs() < 1e-6);
    }

    #[test]
    fn rotate_preserves_pairwise_distances() {
        let cloud = synth_shape(ShapeKind::Cylinder, 64, 0.05, 8).unwrap();
        let rotated = rotate_z(&cloud, 1.234);
        for i in 0..cloud.n() {
            for j in i + 1..cloud.n() {
                let (a, b) = (cloud.position(i), cloud.position(j));
                let (ra, rb) = (rotated.position(i), rotated.position(j));
                let d = libm::sqrtf(
                    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2),
                );
                let rd = libm::sqrtf(
                    (ra[0] - rb[0]).powi(2) + (ra[1] - rb[1]).powi(2) + (ra[2] - rb[2]).powi(2),
                );
                assert!((d - rd).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn sphere_without_jitter_lies_on_the_unit_sphere() {
        let cloud = synth_shape(ShapeKind::Sphere, 128, 0.0, 11).unwrap();
        for i in 0..cloud.n() {
            let p = cloud.position(i);
            assert!((norm3(&p) - 1.0).abs() < 1e-6, "point {i} off the sphere");
            let row = cloud.row(i);
            for k in 0..3 {
                assert!((row[k] - row[k + 3]).abs() < 1e-6, "normal differs from position");
            }
        }
        assert_eq!(cloud.label(), Some(ShapeKind::Sphere.id()));
    }

    #[test]
    fn cube_without_jitter_has_one_extreme_coordinate_per_point() {
        let cloud = synth_shape(ShapeKind::Cube, 200, 0.0, 13).unwrap();
        let mut max_abs = 0.0f32;
        for &v in cloud.data().chunks(6).flat_map(|r| &r[..3]) {
            max_abs = max_abs.max(v.abs());
        }
        for i in 0..cloud.n() {
            let p = cloud.position(i);
            let extremes = p.iter().filter(|v| (v.abs() - max_abs).abs() < 1e-6).count();
            assert_eq!(extremes, 1, "point {i} has {extremes} extreme coordinates");
        }
    }

    #[test]
    fn synth_is_byte_deterministic() {
        for kind in ShapeKind::ALL {
            let a = synth_shape(kind, 64, 0.02, 900).unwrap();
            let b = synth_shape(kind, 64, 0.02, 900).unwrap();
            let bits = |c: &PointCloud| c.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b));
        }
        assert!(synth_shape(ShapeKind::Sphere, 8, 0.0, 1).is_err());
    }
}
