//! The GeoConv operator.
//!
//! An edge between a center point p and neighbor q is processed by
//! direction-associated reduction matrices: the edge vector selects the
//! three signed axis bases of its quadrant, each basis contributes
//! `cos^2(theta)` of the neighbor's reduced feature, and neighbors are
//! averaged with the distance weight `(r - |pq|)^2`. The aggregated edge
//! feature passes through batch-norm + ReLU, is expanded back to the output
//! width, and is added to the center path `W_c x_p`.
//!
//! The six reduction products `x W_b` are computed once per layer and shared
//! by every edge, which is also what makes the feature-level multi-view
//! approximation cheap: extra views only re-weight the same six products
//! with coefficients taken from the rotated edge vector.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::{axpy, Matrix};
use crate::nn::{
    glorot_init, linear_backward, linear_forward, relu_backward, relu_forward, BatchNorm, BnCache,
    Mode,
};
use crate::rng::Rng;
use crate::scalar::Real;
use crate::spatial::NeighborhoodSet;

pub const NUM_BASES: usize = 6;

/// The six signed unit bases, indexed (+x, -x, +y, -y, +z, -z).
pub const BASES: [[f32; 3]; NUM_BASES] = [
    [1.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, 0.0, -1.0],
];

/// The three bases of the quadrant the edge points into: per axis k, index
/// `2k` for a non-negative component and `2k+1` otherwise. A zero component
/// picks the positive basis; its coefficient is zero either way.
pub fn quadrant_bases(edge: [f32; 3]) -> Result<[usize; 3]> {
    if edge[0] == 0.0 && edge[1] == 0.0 && edge[2] == 0.0 {
        return Err(Error::InvalidArgument(
            "quadrant of the zero edge vector is undefined".into(),
        ));
    }
    let mut out = [0usize; 3];
    for k in 0..3 {
        out[k] = 2 * k + usize::from(edge[k] < 0.0);
    }
    Ok(out)
}

/// Aggregation coefficients `cos^2(theta_{pq,b}) = (pq . b)^2 / |pq|^2` for
/// the three selected bases. Each lies in [0, 1]; together they sum to 1.
pub fn decomposition_coefficients(edge: [f32; 3], bases: [usize; 3]) -> Result<[f64; 3]> {
    let e = [edge[0] as f64, edge[1] as f64, edge[2] as f64];
    let norm_sq = e[0] * e[0] + e[1] * e[1] + e[2] * e[2];
    if norm_sq == 0.0 {
        return Err(Error::InvalidArgument(
            "cannot decompose the zero edge vector".into(),
        ));
    }
    let mut out = [0.0f64; 3];
    for (slot, &b) in out.iter_mut().zip(&bases) {
        let basis = BASES[b];
        let dot = e[0] * basis[0] as f64 + e[1] * basis[1] as f64 + e[2] * basis[2] as f64;
        debug_assert!(dot >= 0.0, "projection onto a selected basis is negative");
        *slot = dot * dot / norm_sq;
    }
    Ok(out)
}

/// Neighbor weight `(r - |pq|)^2`: zero at the boundary, maximal at the
/// center, monotonically decreasing in the distance.
pub fn distance_weight(dist: f32, radius: f32) -> Result<f64> {
    if !(dist > 0.0) || dist > radius {
        return Err(Error::InvalidArgument(format!(
            "distance {dist} outside (0, {radius}]"
        )));
    }
    let d = radius as f64 - dist as f64;
    Ok(d * d)
}

/// One virtual view: edge vectors are rotated about z by `angle` before the
/// quadrant and coefficients are computed, and the view's contribution is
/// scaled by the learnable `weight`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct View<T> {
    pub angle: f32,
    pub weight: T,
}

/// `count` angles uniformly covering [0, 2pi).
pub fn uniform_view_angles(count: usize) -> Vec<f32> {
    (0..count)
        .map(|v| (2.0 * core::f64::consts::PI * v as f64 / count as f64) as f32)
        .collect()
}

/// Parameters of one GeoConv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoConvParams<T> {
    pub w_c: Matrix<T>,
    pub b_c: Vec<T>,
    pub w_dir: [Matrix<T>; NUM_BASES],
    pub w_exp: Matrix<T>,
    pub b_exp: Vec<T>,
    pub bn: BatchNorm<T>,
}

impl<T: Real> GeoConvParams<T> {
    pub fn init(c_in: usize, c_reduc: usize, c_out: usize, rng: &mut Rng) -> Self {
        let w_c = glorot_init(rng, c_in, c_out);
        let w_dir = core::array::from_fn(|_| glorot_init(rng, c_in, c_reduc));
        let w_exp = glorot_init(rng, c_reduc, c_out);
        GeoConvParams {
            w_c,
            b_c: vec![T::ZERO; c_out],
            w_dir,
            w_exp,
            b_exp: vec![T::ZERO; c_out],
            bn: BatchNorm::new(c_reduc),
        }
    }

    pub fn c_in(&self) -> usize {
        self.w_c.rows()
    }

    pub fn c_reduc(&self) -> usize {
        self.w_exp.rows()
    }

    pub fn c_out(&self) -> usize {
        self.w_c.cols()
    }
}

/// Gradients matching [`GeoConvParams`]; `view_weights` is empty unless the
/// forward pass ran in multi-view mode.
#[derive(Debug, Clone)]
pub struct GeoConvGrads<T> {
    pub w_c: Matrix<T>,
    pub b_c: Vec<T>,
    pub w_dir: [Matrix<T>; NUM_BASES],
    pub w_exp: Matrix<T>,
    pub b_exp: Vec<T>,
    pub bn_gamma: Vec<T>,
    pub bn_beta: Vec<T>,
    pub view_weights: Vec<T>,
}

struct EdgeList<T> {
    center: Vec<u32>,
    neighbor: Vec<u32>,
    vec3: Vec<[f32; 3]>,
    weight: Vec<T>,
    coeff: Vec<[T; NUM_BASES]>,
}

struct EdgePath<T> {
    active: Vec<u32>,
    compact_row: Vec<u32>,
    bn_cache: BnCache<T>,
    act: Matrix<T>,
}

pub struct GeoConvCache<T> {
    x: Matrix<T>,
    reduced: [Matrix<T>; NUM_BASES],
    edges: EdgeList<T>,
    edge_path: Option<EdgePath<T>>,
    views: Vec<View<T>>,
    multiview: bool,
}

const INACTIVE: u32 = u32::MAX;

fn rotate_edge_z(edge: [f32; 3], sin: f64, cos: f64) -> [f32; 3] {
    let (x, y) = (edge[0] as f64, edge[1] as f64);
    [(cos * x - sin * y) as f32, (sin * x + cos * y) as f32, edge[2]]
}

/// Effective per-basis coefficients of one edge summed over all views.
fn effective_coefficients<T: Real>(
    edge: [f32; 3],
    views: &[View<T>],
    trig: &[(f64, f64)],
) -> Result<[T; NUM_BASES]> {
    let mut eff = [T::ZERO; NUM_BASES];
    for (view, &(sin, cos)) in views.iter().zip(trig) {
        let rotated = if view.angle == 0.0 {
            edge
        } else {
            rotate_edge_z(edge, sin, cos)
        };
        let bases = quadrant_bases(rotated)?;
        let coeffs = decomposition_coefficients(rotated, bases)?;
        for (b, c) in bases.into_iter().zip(coeffs) {
            eff[b] += view.weight * T::from_f64(c);
        }
    }
    Ok(eff)
}

fn view_trig<T: Real>(views: &[View<T>]) -> Vec<(f64, f64)> {
    views
        .iter()
        .map(|v| (libm::sin(v.angle as f64), libm::cos(v.angle as f64)))
        .collect()
}

fn forward_engine<T: Real>(
    x: &Matrix<T>,
    nbrs: &NeighborhoodSet,
    params: &mut GeoConvParams<T>,
    views: &[View<T>],
    multiview: bool,
    mode: Mode,
    edge_weights: Option<&[f64]>,
) -> Result<(Matrix<T>, GeoConvCache<T>)> {
    let n = x.rows();
    if nbrs.n_points() != n {
        return Err(Error::ShapeMismatch(format!(
            "neighborhoods cover {} points, features cover {n}",
            nbrs.n_points()
        )));
    }
    if x.cols() != params.c_in() {
        return Err(Error::ShapeMismatch(format!(
            "input width {} does not match layer C_in {}",
            x.cols(),
            params.c_in()
        )));
    }
    if views.is_empty() {
        return Err(Error::InvalidArgument("at least one view required".into()));
    }
    if let Some(w) = edge_weights {
        if w.len() != nbrs.edge_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} edge weights for {} edges",
                w.len(),
                nbrs.edge_count()
            )));
        }
    }

    let mut y = linear_forward(x, &params.w_c, &params.b_c)?;

    let mut reduced = Vec::with_capacity(NUM_BASES);
    for b in 0..NUM_BASES {
        reduced.push(x.matmul(&params.w_dir[b])?);
    }
    let reduced: [Matrix<T>; NUM_BASES] = reduced.try_into().expect("six products");

    let trig = view_trig(views);
    let radius = nbrs.radius();
    let mut edges = EdgeList {
        center: Vec::new(),
        neighbor: Vec::new(),
        vec3: Vec::new(),
        weight: Vec::new(),
        coeff: Vec::new(),
    };
    let mut active: Vec<u32> = Vec::new();
    let mut flat_edge = 0usize;
    for p in 0..n {
        let nb = nbrs.neighbors(p);
        let mut raw = Vec::with_capacity(nb.dists.len());
        let mut sum = 0.0f64;
        for &dist in nb.dists {
            let d = match edge_weights {
                Some(w) => {
                    let d = w[flat_edge];
                    if !(d >= 0.0) {
                        return Err(Error::InvalidArgument(format!(
                            "edge weight {d} must be non-negative"
                        )));
                    }
                    d
                }
                None => distance_weight(dist, radius)?,
            };
            flat_edge += 1;
            sum += d;
            raw.push(d);
        }
        // A neighborhood whose weights all vanish contributes an exact zero
        // edge term; the point is excluded from the batch-norm statistics.
        if sum <= 0.0 {
            continue;
        }
        active.push(p as u32);
        for (i, &d) in raw.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            edges.center.push(p as u32);
            edges.neighbor.push(nb.indices[i]);
            edges.vec3.push(nb.edges[i]);
            edges.weight.push(T::from_f64(d / sum));
            edges
                .coeff
                .push(effective_coefficients(nb.edges[i], views, &trig)?);
        }
    }

    let c_reduc = params.c_reduc();
    let mut u = Matrix::zeros(n, c_reduc);
    for e in 0..edges.center.len() {
        let p = edges.center[e] as usize;
        let q = edges.neighbor[e] as usize;
        let w = edges.weight[e];
        let coeff = &edges.coeff[e];
        let row = u.row_mut(p);
        for b in 0..NUM_BASES {
            if coeff[b] != T::ZERO {
                axpy(row, w * coeff[b], reduced[b].row(q));
            }
        }
    }

    let edge_path = if active.is_empty() {
        None
    } else {
        let mut compact_row = vec![INACTIVE; n];
        for (ci, &p) in active.iter().enumerate() {
            compact_row[p as usize] = ci as u32;
        }
        let u_act = u.gather_rows(&active);
        let (z, bn_cache) = params.bn.forward(&u_act, mode)?;
        let act = relu_forward(&z);
        let expanded = linear_forward(&act, &params.w_exp, &params.b_exp)?;
        for (ci, &p) in active.iter().enumerate() {
            let dst = y.row_mut(p as usize);
            for (d, &s) in dst.iter_mut().zip(expanded.row(ci)) {
                *d += s;
            }
        }
        Some(EdgePath {
            active,
            compact_row,
            bn_cache,
            act,
        })
    };

    debug_assert!(y.all_finite(), "geoconv forward produced non-finite output");
    let cache = GeoConvCache {
        x: x.clone(),
        reduced,
        edges,
        edge_path,
        views: views.to_vec(),
        multiview,
    };
    Ok((y, cache))
}

/// Single-view GeoConv forward pass.
pub fn geoconv_forward<T: Real>(
    x: &Matrix<T>,
    nbrs: &NeighborhoodSet,
    params: &mut GeoConvParams<T>,
    mode: Mode,
) -> Result<(Matrix<T>, GeoConvCache<T>)> {
    let identity = [View {
        angle: 0.0,
        weight: T::ONE,
    }];
    forward_engine(x, nbrs, params, &identity, false, mode, None)
}

/// Multi-view forward pass: coefficients are recomputed from the edge
/// vector rotated by each view angle and fused with the view weights.
pub fn geoconv_forward_multiview<T: Real>(
    x: &Matrix<T>,
    nbrs: &NeighborhoodSet,
    params: &mut GeoConvParams<T>,
    views: &[View<T>],
    mode: Mode,
) -> Result<(Matrix<T>, GeoConvCache<T>)> {
    for v in views {
        if !v.angle.is_finite() || !(0.0..core::f32::consts::TAU).contains(&v.angle) {
            return Err(Error::InvalidArgument(format!(
                "view angle {} outside [0, 2pi)",
                v.angle
            )));
        }
    }
    forward_engine(x, nbrs, params, views, true, mode, None)
}

/// Forward pass with caller-supplied raw (unnormalized) per-edge weights in
/// the flattened neighborhood order, replacing `(r - |pq|)^2`.
pub fn geoconv_forward_with_edge_weights<T: Real>(
    x: &Matrix<T>,
    nbrs: &NeighborhoodSet,
    params: &mut GeoConvParams<T>,
    weights: &[f64],
    mode: Mode,
) -> Result<(Matrix<T>, GeoConvCache<T>)> {
    let identity = [View {
        angle: 0.0,
        weight: T::ONE,
    }];
    forward_engine(x, nbrs, params, &identity, false, mode, Some(weights))
}

/// Analytic gradients of the GeoConv forward pass.
///
/// Geometry (coefficients and distance weights) is constant with respect to
/// the features; no gradient flows into coordinates.
pub fn geoconv_backward<T: Real>(
    params: &GeoConvParams<T>,
    cache: &GeoConvCache<T>,
    grad_y: &Matrix<T>,
) -> Result<(Matrix<T>, GeoConvGrads<T>)> {
    let n = cache.x.rows();
    if grad_y.shape() != (n, params.c_out()) {
        return Err(Error::ShapeMismatch(format!(
            "grad_y {}x{} for a {}-point, C_out {} layer",
            grad_y.rows(),
            grad_y.cols(),
            n,
            params.c_out()
        )));
    }
    let (mut grad_x, grad_wc, grad_bc) = linear_backward(&cache.x, &params.w_c, grad_y)?;
    let c_reduc = params.c_reduc();
    let mut grads = GeoConvGrads {
        w_c: grad_wc,
        b_c: grad_bc,
        w_dir: core::array::from_fn(|_| Matrix::zeros(params.c_in(), c_reduc)),
        w_exp: Matrix::zeros(c_reduc, params.c_out()),
        b_exp: vec![T::ZERO; params.c_out()],
        bn_gamma: vec![T::ZERO; c_reduc],
        bn_beta: vec![T::ZERO; c_reduc],
        view_weights: if cache.multiview {
            vec![T::ZERO; cache.views.len()]
        } else {
            Vec::new()
        },
    };

    let Some(edge_path) = &cache.edge_path else {
        return Ok((grad_x, grads));
    };

    let ge = grad_y.gather_rows(&edge_path.active);
    let (grad_act, grad_wexp, grad_bexp) = linear_backward(&edge_path.act, &params.w_exp, &ge)?;
    grads.w_exp = grad_wexp;
    grads.b_exp = grad_bexp;
    let gz = relu_backward(&edge_path.act, &grad_act);
    let (gu_act, ggamma, gbeta) = params.bn.backward(&edge_path.bn_cache, &gz);
    grads.bn_gamma = ggamma;
    grads.bn_beta = gbeta;

    let edges = &cache.edges;
    let mut grad_reduced: [Matrix<T>; NUM_BASES] =
        core::array::from_fn(|_| Matrix::zeros(n, c_reduc));
    for e in 0..edges.center.len() {
        let p = edges.center[e] as usize;
        let q = edges.neighbor[e] as usize;
        let compact = edge_path.compact_row[p];
        debug_assert_ne!(compact, INACTIVE);
        let gu_row = gu_act.row(compact as usize);
        let w = edges.weight[e];
        let coeff = &edges.coeff[e];
        for b in 0..NUM_BASES {
            if coeff[b] != T::ZERO {
                axpy(grad_reduced[b].row_mut(q), w * coeff[b], gu_row);
            }
        }
    }
    for b in 0..NUM_BASES {
        grads.w_dir[b] = cache.x.matmul_at_b(&grad_reduced[b])?;
        grad_x.add_assign(&grad_reduced[b].matmul_a_bt(&params.w_dir[b])?)?;
    }

    if cache.multiview {
        let trig = view_trig(&cache.views);
        for e in 0..edges.center.len() {
            let p = edges.center[e] as usize;
            let q = edges.neighbor[e] as usize;
            let compact = edge_path.compact_row[p] as usize;
            let gu_row = gu_act.row(compact);
            let w = edges.weight[e];
            for (v, view) in cache.views.iter().enumerate() {
                let rotated = if view.angle == 0.0 {
                    edges.vec3[e]
                } else {
                    rotate_edge_z(edges.vec3[e], trig[v].0, trig[v].1)
                };
                let bases = quadrant_bases(rotated)?;
                let coeffs = decomposition_coefficients(rotated, bases)?;
                let mut acc = T::ZERO;
                for (b, c) in bases.into_iter().zip(coeffs) {
                    let mut dot = T::ZERO;
                    for (&r, &g) in cache.reduced[b].row(q).iter().zip(gu_row) {
                        dot += r * g;
                    }
                    acc += T::from_f64(c) * dot;
                }
                grads.view_weights[v] += w * acc;
            }
        }
    }

    Ok((grad_x, grads))
}

/// Parameters of the averaging baseline layer: one reduction matrix, no
/// directional decomposition, unweighted neighbor mean.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConvParams<T> {
    pub w_c: Matrix<T>,
    pub b_c: Vec<T>,
    pub w_single: Matrix<T>,
    pub w_exp: Matrix<T>,
    pub b_exp: Vec<T>,
    pub bn: BatchNorm<T>,
}

impl<T: Real> BaselineConvParams<T> {
    pub fn init(c_in: usize, c_reduc: usize, c_out: usize, rng: &mut Rng) -> Self {
        BaselineConvParams {
            w_c: glorot_init(rng, c_in, c_out),
            b_c: vec![T::ZERO; c_out],
            w_single: glorot_init(rng, c_in, c_reduc),
            w_exp: glorot_init(rng, c_reduc, c_out),
            b_exp: vec![T::ZERO; c_out],
            bn: BatchNorm::new(c_reduc),
        }
    }

    pub fn c_in(&self) -> usize {
        self.w_c.rows()
    }

    pub fn c_reduc(&self) -> usize {
        self.w_exp.rows()
    }

    pub fn c_out(&self) -> usize {
        self.w_c.cols()
    }
}

#[derive(Debug, Clone)]
pub struct BaselineGrads<T> {
    pub w_c: Matrix<T>,
    pub b_c: Vec<T>,
    pub w_single: Matrix<T>,
    pub w_exp: Matrix<T>,
    pub b_exp: Vec<T>,
    pub bn_gamma: Vec<T>,
    pub bn_beta: Vec<T>,
}

pub struct BaselineCache<T> {
    x: Matrix<T>,
    edge_center: Vec<u32>,
    edge_neighbor: Vec<u32>,
    edge_weight: Vec<T>,
    edge_path: Option<EdgePath<T>>,
}

/// Baseline forward: `u_p` is the plain mean of `W_single x_q` over the
/// neighborhood, then the same bottleneck post-processing as GeoConv.
pub fn baseline_edge_forward<T: Real>(
    x: &Matrix<T>,
    nbrs: &NeighborhoodSet,
    params: &mut BaselineConvParams<T>,
    mode: Mode,
) -> Result<(Matrix<T>, BaselineCache<T>)> {
    let n = x.rows();
    if nbrs.n_points() != n {
        return Err(Error::ShapeMismatch(format!(
            "neighborhoods cover {} points, features cover {n}",
            nbrs.n_points()
        )));
    }
    if x.cols() != params.c_in() {
        return Err(Error::ShapeMismatch(format!(
            "input width {} does not match layer C_in {}",
            x.cols(),
            params.c_in()
        )));
    }
    let mut y = linear_forward(x, &params.w_c, &params.b_c)?;
    let reduced = x.matmul(&params.w_single)?;

    let mut edge_center = Vec::new();
    let mut edge_neighbor = Vec::new();
    let mut edge_weight = Vec::new();
    let mut active = Vec::new();
    let mut u = Matrix::zeros(n, params.c_reduc());
    for p in 0..n {
        let nb = nbrs.neighbors(p);
        if nb.indices.is_empty() {
            continue;
        }
        active.push(p as u32);
        let w = T::ONE / T::from_f64(nb.indices.len() as f64);
        for &q in nb.indices {
            edge_center.push(p as u32);
            edge_neighbor.push(q);
            edge_weight.push(w);
            axpy(u.row_mut(p), w, reduced.row(q as usize));
        }
    }

    let edge_path = if active.is_empty() {
        None
    } else {
        let mut compact_row = vec![INACTIVE; n];
        for (ci, &p) in active.iter().enumerate() {
            compact_row[p as usize] = ci as u32;
        }
        let u_act = u.gather_rows(&active);
        let (z, bn_cache) = params.bn.forward(&u_act, mode)?;
        let act = relu_forward(&z);
        let expanded = linear_forward(&act, &params.w_exp, &params.b_exp)?;
        for (ci, &p) in active.iter().enumerate() {
            let dst = y.row_mut(p as usize);
            for (d, &s) in dst.iter_mut().zip(expanded.row(ci)) {
                *d += s;
            }
        }
        Some(EdgePath {
            active,
            compact_row,
            bn_cache,
            act,
        })
    };

    debug_assert!(y.all_finite(), "baseline forward produced non-finite output");
    Ok((
        y,
        BaselineCache {
            x: x.clone(),
            edge_center,
            edge_neighbor,
            edge_weight,
            edge_path,
        },
    ))
}

pub fn baseline_edge_backward<T: Real>(
    params: &BaselineConvParams<T>,
    cache: &BaselineCache<T>,
    grad_y: &Matrix<T>,
) -> Result<(Matrix<T>, BaselineGrads<T>)> {
    let n = cache.x.rows();
    if grad_y.shape() != (n, params.c_out()) {
        return Err(Error::ShapeMismatch(format!(
            "grad_y {}x{} for a {}-point, C_out {} layer",
            grad_y.rows(),
            grad_y.cols(),
            n,
            params.c_out()
        )));
    }
    let (mut grad_x, grad_wc, grad_bc) = linear_backward(&cache.x, &params.w_c, grad_y)?;
    let c_reduc = params.c_reduc();
    let mut grads = BaselineGrads {
        w_c: grad_wc,
        b_c: grad_bc,
        w_single: Matrix::zeros(params.c_in(), c_reduc),
        w_exp: Matrix::zeros(c_reduc, params.c_out()),
        b_exp: vec![T::ZERO; params.c_out()],
        bn_gamma: vec![T::ZERO; c_reduc],
        bn_beta: vec![T::ZERO; c_reduc],
    };
    let Some(edge_path) = &cache.edge_path else {
        return Ok((grad_x, grads));
    };

    let ge = grad_y.gather_rows(&edge_path.active);
    let (grad_act, grad_wexp, grad_bexp) = linear_backward(&edge_path.act, &params.w_exp, &ge)?;
    grads.w_exp = grad_wexp;
    grads.b_exp = grad_bexp;
    let gz = relu_backward(&edge_path.act, &grad_act);
    let (gu_act, ggamma, gbeta) = params.bn.backward(&edge_path.bn_cache, &gz);
    grads.bn_gamma = ggamma;
    grads.bn_beta = gbeta;

    let mut grad_reduced = Matrix::zeros(n, c_reduc);
    for e in 0..cache.edge_center.len() {
        let p = cache.edge_center[e] as usize;
        let q = cache.edge_neighbor[e] as usize;
        let compact = edge_path.compact_row[p];
        debug_assert_ne!(compact, INACTIVE);
        axpy(
            grad_reduced.row_mut(q),
            cache.edge_weight[e],
            gu_act.row(compact as usize),
        );
    }
    grads.w_single = cache.x.matmul_at_b(&grad_reduced)?;
    grad_x.add_assign(&grad_reduced.matmul_a_bt(&params.w_single)?)?;
    Ok((grad_x, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrant_follows_the_sign_pattern() {
        assert_eq!(quadrant_bases([0.2, -0.1, 0.3]).unwrap(), [0, 3, 4]);
        assert_eq!(quadrant_bases([0.0, 0.0, 1.0]).unwrap(), [0, 2, 4]);
        assert_eq!(quadrant_bases([-1.0, -1.0, -1.0]).unwrap(), [1, 3, 5]);
        assert!(quadrant_bases([0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn coefficients_of_reference_edges() {
        let c = decomposition_coefficients([1.0, 0.0, 0.0], [0, 2, 4]).unwrap();
        assert_eq!(c, [1.0, 0.0, 0.0]);

        let c = decomposition_coefficients([1.0, 1.0, 1.0], [0, 2, 4]).unwrap();
        for v in c {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        let c = decomposition_coefficients([3.0, 4.0, 0.0], [0, 2, 4]).unwrap();
        assert!((c[0] - 9.0 / 25.0).abs() < 1e-12);
        assert!((c[1] - 16.0 / 25.0).abs() < 1e-12);
        assert_eq!(c[2], 0.0);
    }

    #[test]
    fn coefficients_partition_unity_on_random_edges() {
        let mut rng = Rng::from_seed(31);
        for _ in 0..10_000 {
            let edge = [
                rng.uniform(-1.0, 1.0) as f32,
                rng.uniform(-1.0, 1.0) as f32,
                rng.uniform(-1.0, 1.0) as f32,
            ];
            if edge == [0.0, 0.0, 0.0] {
                continue;
            }
            let bases = quadrant_bases(edge).unwrap();
            let c = decomposition_coefficients(edge, bases).unwrap();
            let sum: f64 = c.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(c.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn distance_weight_reference_values() {
        assert_eq!(distance_weight(0.5, 0.5).unwrap(), 0.0);
        let w = distance_weight(0.1, 0.5).unwrap();
        assert!((w - 0.16).abs() < 1e-6);
        assert!(distance_weight(0.6, 0.5).is_err());
        assert!(distance_weight(0.0, 0.5).is_err());
    }

    #[test]
    fn distance_weight_is_monotone_decreasing() {
        let r = 0.5f32;
        let mut prev = f64::INFINITY;
        for i in 1..=100 {
            let dist = r * i as f32 / 100.0;
            let w = distance_weight(dist, r).unwrap();
            assert!(w < prev, "weight not decreasing at {dist}");
            prev = w;
        }
    }

    #[test]
    fn uniform_angles_cover_the_circle() {
        let angles = uniform_view_angles(4);
        assert_eq!(angles.len(), 4);
        assert_eq!(angles[0], 0.0);
        assert!((angles[2] - core::f32::consts::PI).abs() < 1e-6);
        assert!(angles.iter().all(|&a| (0.0..core::f32::consts::TAU).contains(&a)));
    }

    #[test]
    fn empty_neighborhoods_reduce_to_the_center_path() {
        let mut rng = Rng::from_seed(1);
        let positions: Vec<[f32; 3]> = (0..5)
            .map(|i| [i as f32 * 10.0, 0.0, 0.0])
            .collect();
        let nbrs = NeighborhoodSet::build(&positions, 0.5, None).unwrap();
        assert_eq!(nbrs.edge_count(), 0);
        let x = Matrix::<f64>::from_fn(5, 3, |_, _| rng.uniform(-1.0, 1.0));
        let mut params = GeoConvParams::<f64>::init(3, 2, 4, &mut rng);
        let (y, _) = geoconv_forward(&x, &nbrs, &mut params, Mode::Eval).unwrap();
        let center = linear_forward(&x, &params.w_c, &params.b_c).unwrap();
        assert_eq!(y, center);
    }

    #[test]
    fn two_point_scalar_pipeline_by_hand() {
        // p = origin, q at (0.1, 0, 0), r = 0.5: the +x coefficient is 1 and
        // the normalized distance weight is 1, so with W_c = 0, W_{+x} = 1,
        // W_exp = 1 and batch-norm made exactly transparent, y_p = x_q = 2.
        let positions = [[0.0f32, 0.0, 0.0], [0.1, 0.0, 0.0]];
        let nbrs = NeighborhoodSet::build(&positions, 0.5, None).unwrap();
        let x = Matrix::from_vec(2, 1, vec![0.0f64, 2.0]).unwrap();
        let mut rng = Rng::from_seed(2);
        let mut params = GeoConvParams::<f64>::init(1, 1, 1, &mut rng);
        params.w_c = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        params.b_c = vec![0.0];
        params.w_dir[0] = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        params.w_exp = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        params.b_exp = vec![0.0];
        params.bn.eps = 0.0; // running stats are (0, 1): identity in eval mode
        let (y, _) = geoconv_forward(&x, &nbrs, &mut params, Mode::Eval).unwrap();
        assert!((y.get(0, 0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = Rng::from_seed(3);
        let positions: Vec<[f32; 3]> = (0..6)
            .map(|_| {
                [
                    rng.uniform(-0.5, 0.5) as f32,
                    rng.uniform(-0.5, 0.5) as f32,
                    rng.uniform(-0.5, 0.5) as f32,
                ]
            })
            .collect();
        let nbrs = NeighborhoodSet::build(&positions, 0.6, None).unwrap();
        let x = Matrix::<f64>::from_fn(6, 3, |_, _| rng.uniform(-1.0, 1.0));
        let mut params = GeoConvParams::<f64>::init(3, 2, 4, &mut rng);
        let (_, cache) = geoconv_forward(&x, &nbrs, &mut params, Mode::Train).unwrap();
        let (gx, grads) = geoconv_backward(&params, &cache, &Matrix::zeros(6, 4)).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(grads.w_c.data().iter().all(|&v| v == 0.0));
        assert!(grads.w_dir.iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
        assert!(grads.w_exp.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unselected_bases_receive_no_gradient() {
        // Both edges point along +x, so only basis 0 can carry gradient.
        let positions = [[0.0f32, 0.0, 0.0], [0.2, 0.0, 0.0], [0.4, 0.0, 0.0]];
        let nbrs = NeighborhoodSet::build(&positions, 0.25, None).unwrap();
        let mut rng = Rng::from_seed(4);
        let x = Matrix::<f64>::from_fn(3, 2, |_, _| rng.uniform(-1.0, 1.0));
        let mut params = GeoConvParams::<f64>::init(2, 2, 2, &mut rng);
        let (_, cache) = geoconv_forward(&x, &nbrs, &mut params, Mode::Train).unwrap();
        let grad_y = Matrix::<f64>::from_fn(3, 2, |_, _| rng.uniform(-1.0, 1.0));
        let (_, grads) = geoconv_backward(&params, &cache, &grad_y).unwrap();
        assert!(grads.w_dir[0].data().iter().any(|&v| v != 0.0));
        for b in 2..NUM_BASES {
            assert!(
                grads.w_dir[b].data().iter().all(|&v| v == 0.0),
                "basis {b} should be untouched"
            );
        }
    }

    #[test]
    fn antipodal_views_split_the_coefficient() {
        // Edge along +x under views {0, pi}: half the weight lands on +x,
        // half on -x.
        let views = [
            View { angle: 0.0, weight: 0.5f64 },
            View { angle: core::f32::consts::PI, weight: 0.5f64 },
        ];
        let trig = view_trig(&views);
        let eff = effective_coefficients([1.0f32, 0.0, 0.0], &views, &trig).unwrap();
        assert!((eff[0] - 0.5).abs() < 1e-9);
        assert!((eff[1] - 0.5).abs() < 1e-9);
        for b in 2..NUM_BASES {
            assert!(eff[b].abs() < 1e-12);
        }
    }

    #[test]
    fn baseline_single_neighbor_and_distance_independence() {
        let positions = [[0.0f32, 0.0, 0.0], [0.1, 0.0, 0.0]];
        let nbrs = NeighborhoodSet::build(&positions, 0.5, None).unwrap();
        let x = Matrix::from_vec(2, 1, vec![0.0f64, 3.0]).unwrap();
        let mut rng = Rng::from_seed(5);
        let mut params = BaselineConvParams::<f64>::init(1, 1, 1, &mut rng);
        params.w_c = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        params.w_single = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        params.w_exp = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        params.bn.eps = 0.0;
        let (y, _) = baseline_edge_forward(&x, &nbrs, &mut params, Mode::Eval).unwrap();
        // Single neighbor: edge term is exactly Expand(relu(W_single x_q)).
        assert!((y.get(0, 0) - 6.0).abs() < 1e-12);

        // Moving q farther out changes nothing: the mean ignores distance.
        let far = [[0.0f32, 0.0, 0.0], [0.4, 0.0, 0.0]];
        let nbrs_far = NeighborhoodSet::build(&far, 0.5, None).unwrap();
        let (y_far, _) = baseline_edge_forward(&x, &nbrs_far, &mut params, Mode::Eval).unwrap();
        assert_eq!(y.get(0, 0), y_far.get(0, 0));
    }
}
