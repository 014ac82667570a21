//! Oracle tests for the conv layer: a literal per-edge evaluator written as
//! straight-line scalar code, finite-difference gradient checks, and the
//! rotation/identity properties of the multi-view aggregation.

use geo_cnn_core::geoconv::{
    baseline_edge_backward, baseline_edge_forward, distance_weight, geoconv_backward,
    geoconv_forward, geoconv_forward_multiview, geoconv_forward_with_edge_weights,
    BaselineConvParams, GeoConvParams, View,
};
use geo_cnn_core::matrix::Matrix;
use geo_cnn_core::nn::Mode;
use geo_cnn_core::rng::Rng;
use geo_cnn_core::scalar::Real;
use geo_cnn_core::spatial::NeighborhoodSet;

// ---------------------------------------------------------------------------
// literal evaluator
//
// Walks every point and neighbor with plain loops: brute-force neighborhood,
// d = (r - |pq|)^2, quadrant by sign, cos^2 via explicit dot products with
// the six signed bases, one matrix-vector product per selected basis, naive
// batch-norm over the points whose weights do not all vanish.

const ORACLE_BASES: [[f64; 3]; 6] = [
    [1.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, 0.0, -1.0],
];

fn matvec<T: Real>(w: &Matrix<T>, x: &[T]) -> Vec<T> {
    // w is C_in x C_out; x is C_in; result is C_out.
    let mut out = vec![T::ZERO; w.cols()];
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
    out
}

fn literal_geoconv<T: Real>(
    x: &Matrix<T>,
    positions: &[[f32; 3]],
    radius: f32,
    params: &GeoConvParams<T>,
    views: &[(f32, T)],
    mode: Mode,
) -> Matrix<T> {
    let n = x.rows();
    let c_out = params.c_out();
    let c_reduc = params.c_reduc();

    // Center path.
    let mut y = Matrix::zeros(n, c_out);
    for p in 0..n {
        let wc_x = matvec(&params.w_c, x.row(p));
        for (dst, (v, &b)) in y.row_mut(p).iter_mut().zip(wc_x.iter().zip(&params.b_c)) {
            *dst = *v + b;
        }
    }

    // Per-point weighted mean of decomposed edge features.
    let mut u: Vec<Option<Vec<T>>> = vec![None; n];
    for p in 0..n {
        let pp = positions[p];
        let mut neighbors: Vec<(usize, f64)> = Vec::new();
        for (q, qq) in positions.iter().enumerate() {
            if q == p {
                continue;
            }
            let d = (((qq[0] - pp[0]) as f64).powi(2)
                + ((qq[1] - pp[1]) as f64).powi(2)
                + ((qq[2] - pp[2]) as f64).powi(2))
            .sqrt();
            if d > 0.0 && d <= radius as f64 {
                neighbors.push((q, d));
            }
        }
        let weights: Vec<f64> = neighbors
            .iter()
            .map(|&(_, d)| (radius as f64 - d) * (radius as f64 - d))
            .collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            continue;
        }
        let mut acc = vec![T::ZERO; c_reduc];
        for (&(q, _), &w) in neighbors.iter().zip(&weights) {
            let qq = positions[q];
            let edge = [
                (qq[0] - pp[0]) as f64,
                (qq[1] - pp[1]) as f64,
                (qq[2] - pp[2]) as f64,
            ];
            let norm_sq = edge[0] * edge[0] + edge[1] * edge[1] + edge[2] * edge[2];
            let scale = T::from_f64(w / total);
            for &(angle, vw) in views {
                let (s, c) = ((angle as f64).sin(), (angle as f64).cos());
                let rot = [c * edge[0] - s * edge[1], s * edge[0] + c * edge[1], edge[2]];
                for basis in ORACLE_BASES {
                    let dot = rot[0] * basis[0] + rot[1] * basis[1] + rot[2] * basis[2];
                    if dot < 0.0 {
                        continue; // not a basis of this quadrant
                    }
                    // Zero components select the positive basis only.
                    if dot == 0.0 {
                        continue; // coefficient is zero anyway
                    }
                    let coeff = T::from_f64(dot * dot / norm_sq);
                    let reduced = matvec(&params.w_dir[basis_index(basis)], x.row(q));
                    for (a, r) in acc.iter_mut().zip(&reduced) {
                        *a += scale * vw * coeff * *r;
                    }
                }
            }
        }
        u[p] = Some(acc);
    }

    // Naive batch-norm + ReLU + expansion over the active points.
    let active: Vec<usize> = (0..n).filter(|&p| u[p].is_some()).collect();
    if active.is_empty() {
        return y;
    }
    let eps = params.bn.eps;
    let (mean, var) = match mode {
        Mode::Train => {
            let m = active.len() as f64;
            let mut mean = vec![0.0f64; c_reduc];
            for &p in &active {
                for (acc, v) in mean.iter_mut().zip(u[p].as_ref().unwrap()) {
                    *acc += v.to_f64();
                }
            }
            for v in mean.iter_mut() {
                *v /= m;
            }
            let mut var = vec![0.0f64; c_reduc];
            for &p in &active {
                for ((acc, v), mu) in var.iter_mut().zip(u[p].as_ref().unwrap()).zip(&mean) {
                    let d = v.to_f64() - mu;
                    *acc += d * d;
                }
            }
            for v in var.iter_mut() {
                *v /= m;
            }
            (mean, var)
        }
        Mode::Eval => (
            params.bn.running_mean.iter().map(|v| v.to_f64()).collect(),
            params.bn.running_var.iter().map(|v| v.to_f64()).collect(),
        ),
    };
    for &p in &active {
        let upv = u[p].as_ref().unwrap();
        let mut edge_out = vec![T::ZERO; c_reduc];
        for j in 0..c_reduc {
            let xhat = (upv[j].to_f64() - mean[j]) / (var[j] + eps).sqrt();
            let z = params.bn.gamma[j].to_f64() * xhat + params.bn.beta[j].to_f64();
            edge_out[j] = T::from_f64(z.max(0.0));
        }
        let expanded = matvec(&params.w_exp, &edge_out);
        for (dst, (v, &b)) in y
            .row_mut(p)
            .iter_mut()
            .zip(expanded.iter().zip(&params.b_exp))
        {
            *dst += *v + b;
        }
    }
    y
}

fn basis_index(basis: [f64; 3]) -> usize {
    ORACLE_BASES.iter().position(|&b| b == basis).unwrap()
}

// ---------------------------------------------------------------------------
// shared helpers

fn random_positions(rng: &mut Rng, n: usize, scale: f64) -> Vec<[f32; 3]> {
    (0..n)
        .map(|_| {
            [
                rng.uniform(-scale, scale) as f32,
                rng.uniform(-scale, scale) as f32,
                rng.uniform(-scale, scale) as f32,
            ]
        })
        .collect()
}

fn random_matrix<T: Real>(rng: &mut Rng, rows: usize, cols: usize) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::from_f64(rng.uniform(-1.0, 1.0)))
}

fn randomize_params<T: Real>(params: &mut GeoConvParams<T>, rng: &mut Rng) {
    // Non-trivial biases and batch-norm state so the oracle exercises them.
    for b in params.b_c.iter_mut() {
        *b = T::from_f64(rng.uniform(-0.3, 0.3));
    }
    for b in params.b_exp.iter_mut() {
        *b = T::from_f64(rng.uniform(-0.3, 0.3));
    }
    for g in params.bn.gamma.iter_mut() {
        *g = T::from_f64(rng.uniform(0.5, 1.5));
    }
    for b in params.bn.beta.iter_mut() {
        *b = T::from_f64(rng.uniform(-0.4, 0.4));
    }
    for m in params.bn.running_mean.iter_mut() {
        *m = T::from_f64(rng.uniform(-0.2, 0.2));
    }
    for v in params.bn.running_var.iter_mut() {
        *v = T::from_f64(rng.uniform(0.5, 2.0));
    }
}

fn max_abs_diff<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.to_f64() - y.to_f64()).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// oracle equivalence

fn oracle_equivalence_case<T: Real>(seed: u64, tolerance: f64) {
    let mut rng = Rng::from_seed(seed);
    let n = 3 + rng.next_below(8) as usize;
    let (c_in, c_reduc, c_out) = (
        1 + rng.next_below(4) as usize,
        1 + rng.next_below(3) as usize,
        1 + rng.next_below(5) as usize,
    );
    let radius = rng.uniform(0.3, 0.9) as f32;
    let positions = random_positions(&mut rng, n, 0.5);
    let x: Matrix<T> = random_matrix(&mut rng, n, c_in);
    let mut params = GeoConvParams::<T>::init(c_in, c_reduc, c_out, &mut rng);
    randomize_params(&mut params, &mut rng);
    let nbrs = NeighborhoodSet::build(&positions, radius, None).unwrap();

    for mode in [Mode::Eval, Mode::Train] {
        let mut p = params.clone();
        let (got, _) = geoconv_forward(&x, &nbrs, &mut p, mode).unwrap();
        let want = literal_geoconv(&x, &positions, radius, &params, &[(0.0, T::ONE)], mode);
        let diff = max_abs_diff(&got, &want);
        assert!(
            diff < tolerance,
            "seed {seed} mode {mode:?}: max abs diff {diff}"
        );
    }
}

#[test]
fn batched_forward_matches_literal_evaluator_f64() {
    for seed in 0..50 {
        oracle_equivalence_case::<f64>(1000 + seed, 1e-5);
    }
}

#[test]
fn batched_forward_matches_literal_evaluator_f32() {
    for seed in 0..50 {
        oracle_equivalence_case::<f32>(2000 + seed, 1e-5);
    }
}

#[test]
fn multiview_forward_matches_literal_evaluator() {
    for seed in 0..10 {
        let mut rng = Rng::from_seed(3000 + seed);
        let n = 4 + rng.next_below(6) as usize;
        let positions = random_positions(&mut rng, n, 0.5);
        let x: Matrix<f64> = random_matrix(&mut rng, n, 3);
        let mut params = GeoConvParams::<f64>::init(3, 2, 4, &mut rng);
        randomize_params(&mut params, &mut rng);
        let nbrs = NeighborhoodSet::build(&positions, 0.8, None).unwrap();
        let views: Vec<View<f64>> = (0..4)
            .map(|v| View {
                angle: (v as f32) * core::f32::consts::FRAC_PI_3,
                weight: rng.uniform(-0.5, 1.0),
            })
            .collect();
        let view_pairs: Vec<(f32, f64)> = views.iter().map(|v| (v.angle, v.weight)).collect();
        let (got, _) =
            geoconv_forward_multiview(&x, &nbrs, &mut params.clone(), &views, Mode::Train)
                .unwrap();
        let want = literal_geoconv(&x, &positions, 0.8, &params, &view_pairs, Mode::Train);
        assert!(max_abs_diff(&got, &want) < 1e-5, "seed {seed}");
    }
}

// ---------------------------------------------------------------------------
// multi-view identities

#[test]
fn identity_view_is_bitwise_equal_to_plain_forward() {
    let mut rng = Rng::from_seed(42);
    let positions = random_positions(&mut rng, 20, 0.5);
    let x: Matrix<f32> = random_matrix(&mut rng, 20, 5);
    let mut params = GeoConvParams::<f32>::init(5, 3, 6, &mut rng);
    randomize_params(&mut params, &mut rng);
    let nbrs = NeighborhoodSet::build(&positions, 0.4, None).unwrap();

    let (plain, _) = geoconv_forward(&x, &nbrs, &mut params.clone(), Mode::Train).unwrap();
    let identity = [View { angle: 0.0, weight: 1.0f32 }];
    let (mv, _) =
        geoconv_forward_multiview(&x, &nbrs, &mut params.clone(), &identity, Mode::Train).unwrap();
    let plain_bits: Vec<u32> = plain.data().iter().map(|v| v.to_bits()).collect();
    let mv_bits: Vec<u32> = mv.data().iter().map(|v| v.to_bits()).collect();
    assert_eq!(plain_bits, mv_bits);
}

#[test]
fn single_view_equals_forward_on_rotated_positions() {
    let mut rng = Rng::from_seed(7);
    let n = 12;
    let positions = random_positions(&mut rng, n, 0.5);
    let x: Matrix<f32> = random_matrix(&mut rng, n, 4);
    let mut params = GeoConvParams::<f32>::init(4, 3, 5, &mut rng);
    randomize_params(&mut params, &mut rng);
    let radius = 0.6f32;
    let nbrs = NeighborhoodSet::build(&positions, radius, None).unwrap();

    for trial in 0..16 {
        let angle = rng.uniform(0.0, core::f64::consts::TAU * 0.999) as f32;
        let mode = if trial < 3 { Mode::Train } else { Mode::Eval };
        let views = [View { angle, weight: 1.0f32 }];
        let (mv, _) =
            geoconv_forward_multiview(&x, &nbrs, &mut params.clone(), &views, mode).unwrap();

        let (s, c) = ((angle as f64).sin(), (angle as f64).cos());
        let rotated: Vec<[f32; 3]> = positions
            .iter()
            .map(|p| {
                [
                    (c * p[0] as f64 - s * p[1] as f64) as f32,
                    (s * p[0] as f64 + c * p[1] as f64) as f32,
                    p[2],
                ]
            })
            .collect();
        let nbrs_rot = NeighborhoodSet::build(&rotated, radius, None).unwrap();
        let (direct, _) = geoconv_forward(&x, &nbrs_rot, &mut params.clone(), mode).unwrap();
        let diff = max_abs_diff(&mv, &direct);
        assert!(diff < 1e-5, "angle {angle}: max abs diff {diff}");
    }
}

// ---------------------------------------------------------------------------
// scale covariance of the distance weighting

#[test]
fn forward_is_invariant_to_scaling_all_edge_weights() {
    let mut rng = Rng::from_seed(11);
    let positions = random_positions(&mut rng, 15, 0.5);
    let x: Matrix<f64> = random_matrix(&mut rng, 15, 3);
    let mut params = GeoConvParams::<f64>::init(3, 2, 4, &mut rng);
    randomize_params(&mut params, &mut rng);
    let radius = 0.5f32;
    let nbrs = NeighborhoodSet::build(&positions, radius, None).unwrap();

    let mut weights = Vec::with_capacity(nbrs.edge_count());
    for p in 0..nbrs.n_points() {
        for &d in nbrs.neighbors(p).dists {
            weights.push(distance_weight(d, radius).unwrap());
        }
    }

    let (base, _) = geoconv_forward(&x, &nbrs, &mut params.clone(), Mode::Train).unwrap();

    // An exact power of two scales every intermediate exactly: bitwise equal.
    let scaled_pow2: Vec<f64> = weights.iter().map(|w| w * 4.0).collect();
    let (y4, _) = geoconv_forward_with_edge_weights(
        &x,
        &nbrs,
        &mut params.clone(),
        &scaled_pow2,
        Mode::Train,
    )
    .unwrap();
    assert_eq!(base, y4);

    let scaled: Vec<f64> = weights.iter().map(|w| w * 3.7).collect();
    let (y37, _) =
        geoconv_forward_with_edge_weights(&x, &nbrs, &mut params.clone(), &scaled, Mode::Train)
            .unwrap();
    assert!(max_abs_diff(&base, &y37) < 1e-9);
}

// ---------------------------------------------------------------------------
// finite-difference gradient checks

fn fd_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut point = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        point[i] = x[i] + eps;
        let plus = f(&point);
        point[i] = x[i] - eps;
        let minus = f(&point);
        point[i] = x[i];
        out.push((plus - minus) / (2.0 * eps));
    }
    out
}

fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / (a.abs() + n.abs() + 1e-8))
        .fold(0.0, f64::max)
}

struct GeoInstance {
    positions: Vec<[f32; 3]>,
    nbrs: NeighborhoodSet,
    x: Matrix<f64>,
    params: GeoConvParams<f64>,
    proj: Matrix<f64>,
    views: Vec<View<f64>>,
}

fn geo_instance(seed: u64, multiview: bool) -> GeoInstance {
    let mut rng = Rng::from_seed(seed);
    let n = 6;
    let (c_in, c_reduc, c_out) = (3, 2, 4);
    let positions = random_positions(&mut rng, n, 0.4);
    let nbrs = NeighborhoodSet::build(&positions, 0.7, None).unwrap();
    let x = random_matrix(&mut rng, n, c_in);
    let mut params = GeoConvParams::<f64>::init(c_in, c_reduc, c_out, &mut rng);
    randomize_params(&mut params, &mut rng);
    let proj = random_matrix(&mut rng, n, c_out);
    let views = if multiview {
        vec![
            View { angle: 0.5, weight: 0.6 },
            View { angle: 2.5, weight: 0.3 },
            View { angle: 4.4, weight: 0.45 },
        ]
    } else {
        Vec::new()
    };
    GeoInstance {
        positions,
        nbrs,
        x,
        params,
        proj,
        views,
    }
}

/// Flattens (x, every parameter, view weights) to a vector and back.
fn pack(inst: &GeoInstance) -> Vec<f64> {
    let mut flat = inst.x.data().to_vec();
    flat.extend_from_slice(inst.params.w_c.data());
    flat.extend_from_slice(&inst.params.b_c);
    for w in &inst.params.w_dir {
        flat.extend_from_slice(w.data());
    }
    flat.extend_from_slice(inst.params.w_exp.data());
    flat.extend_from_slice(&inst.params.b_exp);
    flat.extend_from_slice(&inst.params.bn.gamma);
    flat.extend_from_slice(&inst.params.bn.beta);
    flat.extend(inst.views.iter().map(|v| v.weight));
    flat
}

fn unpack(inst: &GeoInstance, flat: &[f64]) -> (Matrix<f64>, GeoConvParams<f64>, Vec<View<f64>>) {
    let mut at = 0;
    let mut take = |len: usize| {
        let s = &flat[at..at + len];
        at += len;
        s.to_vec()
    };
    let x = Matrix::from_vec(inst.x.rows(), inst.x.cols(), take(inst.x.data().len())).unwrap();
    let mut params = inst.params.clone();
    params.w_c = Matrix::from_vec(
        params.w_c.rows(),
        params.w_c.cols(),
        take(params.w_c.data().len()),
    )
    .unwrap();
    params.b_c = take(params.b_c.len());
    for b in 0..6 {
        let (r, c) = inst.params.w_dir[b].shape();
        params.w_dir[b] = Matrix::from_vec(r, c, take(r * c)).unwrap();
    }
    params.w_exp = Matrix::from_vec(
        params.w_exp.rows(),
        params.w_exp.cols(),
        take(params.w_exp.data().len()),
    )
    .unwrap();
    params.b_exp = take(params.b_exp.len());
    params.bn.gamma = take(params.bn.gamma.len());
    params.bn.beta = take(params.bn.beta.len());
    let views: Vec<View<f64>> = inst
        .views
        .iter()
        .map(|v| View {
            angle: v.angle,
            weight: {
                let w = flat[at];
                at += 1;
                w
            },
        })
        .collect();
    assert_eq!(at, flat.len());
    (x, params, views)
}

fn geoconv_gradcheck_case(seed: u64, multiview: bool) {
    let inst = geo_instance(seed, multiview);
    let flat = pack(&inst);

    let mut loss = |p: &[f64]| -> f64 {
        let (x, mut params, views) = unpack(&inst, p);
        let (y, _) = if multiview {
            geoconv_forward_multiview(&x, &inst.nbrs, &mut params, &views, Mode::Train).unwrap()
        } else {
            geoconv_forward(&x, &inst.nbrs, &mut params, Mode::Train).unwrap()
        };
        y.data()
            .iter()
            .zip(inst.proj.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let numeric = fd_grad(&mut loss, &flat, 1e-6);

    let (x, mut params, views) = unpack(&inst, &flat);
    let (_, cache) = if multiview {
        geoconv_forward_multiview(&x, &inst.nbrs, &mut params, &views, Mode::Train).unwrap()
    } else {
        geoconv_forward(&x, &inst.nbrs, &mut params, Mode::Train).unwrap()
    };
    let (gx, grads) = geoconv_backward(&params, &cache, &inst.proj).unwrap();

    let mut analytic = gx.data().to_vec();
    analytic.extend_from_slice(grads.w_c.data());
    analytic.extend_from_slice(&grads.b_c);
    for w in &grads.w_dir {
        analytic.extend_from_slice(w.data());
    }
    analytic.extend_from_slice(grads.w_exp.data());
    analytic.extend_from_slice(&grads.b_exp);
    analytic.extend_from_slice(&grads.bn_gamma);
    analytic.extend_from_slice(&grads.bn_beta);
    analytic.extend_from_slice(&grads.view_weights);

    let err = max_rel_err(&analytic, &numeric);
    assert!(err < 1e-5, "seed {seed} multiview {multiview}: rel err {err}");
    let _ = inst.positions;
}

#[test]
fn geoconv_backward_matches_finite_differences() {
    for seed in [5, 6, 7] {
        geoconv_gradcheck_case(seed, false);
    }
}

#[test]
fn multiview_backward_matches_finite_differences() {
    for seed in [15, 16] {
        geoconv_gradcheck_case(seed, true);
    }
}

#[test]
fn baseline_backward_matches_finite_differences() {
    let mut rng = Rng::from_seed(77);
    let n = 6;
    let positions = random_positions(&mut rng, n, 0.4);
    let nbrs = NeighborhoodSet::build(&positions, 0.7, None).unwrap();
    let x: Matrix<f64> = random_matrix(&mut rng, n, 3);
    let mut params = BaselineConvParams::<f64>::init(3, 2, 4, &mut rng);
    for g in params.bn.gamma.iter_mut() {
        *g = rng.uniform(0.5, 1.5);
    }
    for b in params.bn.beta.iter_mut() {
        *b = rng.uniform(-0.4, 0.4);
    }
    let proj: Matrix<f64> = random_matrix(&mut rng, n, 4);

    let sizes = [
        x.data().len(),
        params.w_c.data().len(),
        params.b_c.len(),
        params.w_single.data().len(),
        params.w_exp.data().len(),
        params.b_exp.len(),
        params.bn.gamma.len(),
        params.bn.beta.len(),
    ];
    let mut flat = x.data().to_vec();
    flat.extend_from_slice(params.w_c.data());
    flat.extend_from_slice(&params.b_c);
    flat.extend_from_slice(params.w_single.data());
    flat.extend_from_slice(params.w_exp.data());
    flat.extend_from_slice(&params.b_exp);
    flat.extend_from_slice(&params.bn.gamma);
    flat.extend_from_slice(&params.bn.beta);

    let rebuild = |p: &[f64]| -> (Matrix<f64>, BaselineConvParams<f64>) {
        let mut at = 0;
        let mut take = |len: usize| {
            let s = p[at..at + len].to_vec();
            at += len;
            s
        };
        let x2 = Matrix::from_vec(n, 3, take(sizes[0])).unwrap();
        let mut pr = params.clone();
        pr.w_c = Matrix::from_vec(3, 4, take(sizes[1])).unwrap();
        pr.b_c = take(sizes[2]);
        pr.w_single = Matrix::from_vec(3, 2, take(sizes[3])).unwrap();
        pr.w_exp = Matrix::from_vec(2, 4, take(sizes[4])).unwrap();
        pr.b_exp = take(sizes[5]);
        pr.bn.gamma = take(sizes[6]);
        pr.bn.beta = take(sizes[7]);
        (x2, pr)
    };

    let mut loss = |p: &[f64]| -> f64 {
        let (x2, mut pr) = rebuild(p);
        let (y, _) = baseline_edge_forward(&x2, &nbrs, &mut pr, Mode::Train).unwrap();
        y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
    };
    let numeric = fd_grad(&mut loss, &flat, 1e-6);

    let (_, cache) = baseline_edge_forward(&x, &nbrs, &mut params.clone(), Mode::Train).unwrap();
    let (gx, grads) = baseline_edge_backward(&params, &cache, &proj).unwrap();
    let mut analytic = gx.data().to_vec();
    analytic.extend_from_slice(grads.w_c.data());
    analytic.extend_from_slice(&grads.b_c);
    analytic.extend_from_slice(grads.w_single.data());
    analytic.extend_from_slice(grads.w_exp.data());
    analytic.extend_from_slice(&grads.b_exp);
    analytic.extend_from_slice(&grads.bn_gamma);
    analytic.extend_from_slice(&grads.bn_beta);

    let err = max_rel_err(&analytic, &numeric);
    assert!(err < 1e-5, "baseline rel err {err}");
}
