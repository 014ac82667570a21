//! Finite-difference gradient checking for the dense ops, the conv layer,
//! and the full model, all in 64-bit mode.
//!
//! Every check flattens (inputs, parameters) into one vector, sweeps it
//! with central differences, and reports the maximum relative error
//! `|a - n| / (|a| + |n| + 1e-8)` per named segment.

use std::fmt::Write as _;

use geo_cnn_core::geoconv::{
    baseline_edge_backward, baseline_edge_forward, geoconv_backward, geoconv_forward,
    geoconv_forward_multiview, BaselineConvParams, GeoConvParams, View,
};
use geo_cnn_core::matrix::Matrix;
use geo_cnn_core::model::{build_model, stack_batch, GeoCnnConfig, GeoConvSpec, PreparedCloud};
use geo_cnn_core::model::prepare_cloud;
use geo_cnn_core::nn::{
    channelwise_maxpool, linear_backward, linear_forward, maxpool_backward_into, relu_backward,
    relu_forward, softmax_cross_entropy, softmax_cross_entropy_batch, BatchNorm, Mode,
};
use geo_cnn_core::pointcloud::PointCloud;
use geo_cnn_core::rng::Rng;
use geo_cnn_core::spatial::NeighborhoodSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Ops,
    GeoConv,
    FullModel,
}

impl Scope {
    pub fn name(self) -> &'static str {
        match self {
            Scope::Ops => "ops",
            Scope::GeoConv => "geoconv",
            Scope::FullModel => "full_model",
        }
    }

    pub fn default_tolerance(self) -> f64 {
        match self {
            Scope::Ops => 1e-5,
            Scope::GeoConv => 1e-5,
            Scope::FullModel => 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckEntry {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub scope: Scope,
    pub tolerance: f64,
    pub entries: Vec<CheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "gradcheck scope={} tolerance={:.1e}",
            self.scope.name(),
            self.tolerance
        );
        for e in &self.entries {
            let verdict = if e.max_rel_err < self.tolerance {
                "ok"
            } else {
                "FAIL"
            };
            let _ = writeln!(out, "  {:<28} {:>12.3e}  {}", e.name, e.max_rel_err, verdict);
        }
        let _ = writeln!(
            out,
            "  worst {:.3e} -> {}",
            self.worst(),
            if self.passed() { "PASS" } else { "FAIL" }
        );
        out
    }
}

/// Central finite differences of a scalar function.
pub fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
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

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / (a.abs() + n.abs() + 1e-8))
        .fold(0.0, f64::max)
}

/// Named contiguous segments of one flattened vector.
struct Segments {
    names: Vec<String>,
    bounds: Vec<(usize, usize)>,
    flat: Vec<f64>,
}

impl Segments {
    fn new() -> Self {
        Segments {
            names: Vec::new(),
            bounds: Vec::new(),
            flat: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, data: &[f64]) {
        let start = self.flat.len();
        self.flat.extend_from_slice(data);
        self.names.push(name.to_string());
        self.bounds.push((start, self.flat.len()));
    }

    fn compare(&self, analytic: &[f64], numeric: &[f64]) -> Vec<CheckEntry> {
        self.names
            .iter()
            .zip(&self.bounds)
            .map(|(name, &(lo, hi))| CheckEntry {
                name: name.clone(),
                max_rel_err: max_rel_err(&analytic[lo..hi], &numeric[lo..hi]),
            })
            .collect()
    }
}

const FD_EPS: f64 = 1e-6;

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0))
}

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

// ---------------------------------------------------------------------------
// ops scope

fn check_linear(rng: &mut Rng, entries: &mut Vec<CheckEntry>) {
    let x = random_matrix(rng, 5, 4);
    let w = random_matrix(rng, 4, 3);
    let b: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let proj = random_matrix(rng, 5, 3);
    let mut seg = Segments::new();
    seg.push("linear.x", x.data());
    seg.push("linear.w", w.data());
    seg.push("linear.b", &b);
    let flat = seg.flat.clone();
    let mut loss = |p: &[f64]| {
        let x = Matrix::from_vec(5, 4, p[..20].to_vec()).unwrap();
        let w = Matrix::from_vec(4, 3, p[20..32].to_vec()).unwrap();
        let y = linear_forward(&x, &w, &p[32..]).unwrap();
        y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
    };
    let numeric = finite_diff(&mut loss, &flat, FD_EPS);
    let (gx, gw, gb) = linear_backward(&x, &w, &proj).unwrap();
    let mut analytic = gx.data().to_vec();
    analytic.extend_from_slice(gw.data());
    analytic.extend_from_slice(&gb);
    entries.extend(seg.compare(&analytic, &numeric));
}

fn check_relu(rng: &mut Rng, entries: &mut Vec<CheckEntry>) {
    // Keep every entry at least 1e-3 from the kink.
    let x = Matrix::from_fn(6, 3, |_, _| {
        let v = rng.uniform(1e-3, 1.0);
        if rng.next_f64() < 0.5 {
            -v
        } else {
            v
        }
    });
    let proj = random_matrix(rng, 6, 3);
    let mut loss = |p: &[f64]| {
        let x = Matrix::from_vec(6, 3, p.to_vec()).unwrap();
        relu_forward(&x)
            .data()
            .iter()
            .zip(proj.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let numeric = finite_diff(&mut loss, x.data(), FD_EPS);
    let analytic = relu_backward(&relu_forward(&x), &proj);
    entries.push(CheckEntry {
        name: "relu.x".into(),
        max_rel_err: max_rel_err(analytic.data(), &numeric),
    });
}

fn check_batchnorm(rng: &mut Rng, entries: &mut Vec<CheckEntry>) {
    let x = random_matrix(rng, 7, 3);
    let gamma: Vec<f64> = (0..3).map(|_| rng.uniform(0.5, 1.5)).collect();
    let beta: Vec<f64> = (0..3).map(|_| rng.uniform(-0.5, 0.5)).collect();
    let proj = random_matrix(rng, 7, 3);
    let mut seg = Segments::new();
    seg.push("batchnorm.x", x.data());
    seg.push("batchnorm.gamma", &gamma);
    seg.push("batchnorm.beta", &beta);
    let flat = seg.flat.clone();
    let mut loss = |p: &[f64]| {
        let x = Matrix::from_vec(7, 3, p[..21].to_vec()).unwrap();
        let mut bn = BatchNorm::<f64>::new(3);
        bn.gamma = p[21..24].to_vec();
        bn.beta = p[24..].to_vec();
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();
        y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
    };
    let numeric = finite_diff(&mut loss, &flat, FD_EPS);
    let mut bn = BatchNorm::<f64>::new(3);
    bn.gamma = gamma;
    bn.beta = beta;
    let (_, cache) = bn.forward(&x, Mode::Train).unwrap();
    let (gx, ggamma, gbeta) = bn.backward(&cache, &proj);
    let mut analytic = gx.data().to_vec();
    analytic.extend_from_slice(&ggamma);
    analytic.extend_from_slice(&gbeta);
    entries.extend(seg.compare(&analytic, &numeric));
}

fn check_maxpool(rng: &mut Rng, entries: &mut Vec<CheckEntry>) {
    let x = random_matrix(rng, 6, 4);
    let proj: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let mut loss = |p: &[f64]| {
        let x = Matrix::from_vec(6, 4, p.to_vec()).unwrap();
        let (pooled, _) = channelwise_maxpool(&x);
        pooled.iter().zip(&proj).map(|(a, b)| a * b).sum()
    };
    let numeric = finite_diff(&mut loss, x.data(), FD_EPS);
    let (_, arg) = channelwise_maxpool(&x);
    let mut analytic = Matrix::<f64>::zeros(6, 4);
    maxpool_backward_into(&proj, &arg, &mut analytic);
    entries.push(CheckEntry {
        name: "maxpool.x".into(),
        max_rel_err: max_rel_err(analytic.data(), &numeric),
    });
}

fn check_softmax(rng: &mut Rng, entries: &mut Vec<CheckEntry>) {
    let logits: Vec<f64> = (0..5).map(|_| rng.uniform(-2.0, 2.0)).collect();
    let mut loss = |p: &[f64]| softmax_cross_entropy(p, 2).unwrap().0;
    let numeric = finite_diff(&mut loss, &logits, FD_EPS);
    let (_, analytic) = softmax_cross_entropy(&logits, 2).unwrap();
    entries.push(CheckEntry {
        name: "softmax.logits".into(),
        max_rel_err: max_rel_err(&analytic, &numeric),
    });
}

// ---------------------------------------------------------------------------
// geoconv scope

fn check_geoconv(rng: &mut Rng, multiview: bool, entries: &mut Vec<CheckEntry>) {
    let n = 6;
    let positions = random_positions(rng, n, 0.4);
    let nbrs = NeighborhoodSet::build(&positions, 0.7, None).unwrap();
    let x = random_matrix(rng, n, 3);
    let mut params = GeoConvParams::<f64>::init(3, 2, 4, rng);
    for g in params.bn.gamma.iter_mut() {
        *g = rng.uniform(0.5, 1.5);
    }
    for b in params.bn.beta.iter_mut() {
        *b = rng.uniform(-0.4, 0.4);
    }
    let proj = random_matrix(rng, n, 4);
    let views: Vec<View<f64>> = if multiview {
        vec![
            View { angle: 0.7, weight: 0.5 },
            View { angle: 2.9, weight: 0.35 },
            View { angle: 5.1, weight: 0.4 },
        ]
    } else {
        Vec::new()
    };
    let prefix = if multiview { "geoconv_mv" } else { "geoconv" };

    let mut seg = Segments::new();
    seg.push(&format!("{prefix}.x"), x.data());
    seg.push(&format!("{prefix}.w_c"), params.w_c.data());
    seg.push(&format!("{prefix}.b_c"), &params.b_c);
    for (b, w) in params.w_dir.iter().enumerate() {
        seg.push(&format!("{prefix}.w_dir.{b}"), w.data());
    }
    seg.push(&format!("{prefix}.w_exp"), params.w_exp.data());
    seg.push(&format!("{prefix}.b_exp"), &params.b_exp);
    seg.push(&format!("{prefix}.bn.gamma"), &params.bn.gamma);
    seg.push(&format!("{prefix}.bn.beta"), &params.bn.beta);
    if multiview {
        let w: Vec<f64> = views.iter().map(|v| v.weight).collect();
        seg.push(&format!("{prefix}.views.weights"), &w);
    }
    let flat = seg.flat.clone();

    let unpack = |p: &[f64]| -> (Matrix<f64>, GeoConvParams<f64>, Vec<View<f64>>) {
        let mut at = 0usize;
        let mut take = |len: usize| {
            let s = p[at..at + len].to_vec();
            at += len;
            s
        };
        let x2 = Matrix::from_vec(n, 3, take(n * 3)).unwrap();
        let mut pr = params.clone();
        pr.w_c = Matrix::from_vec(3, 4, take(12)).unwrap();
        pr.b_c = take(4);
        for b in 0..6 {
            pr.w_dir[b] = Matrix::from_vec(3, 2, take(6)).unwrap();
        }
        pr.w_exp = Matrix::from_vec(2, 4, take(8)).unwrap();
        pr.b_exp = take(4);
        pr.bn.gamma = take(2);
        pr.bn.beta = take(2);
        let vs: Vec<View<f64>> = views
            .iter()
            .map(|v| View {
                angle: v.angle,
                weight: take(1)[0],
            })
            .collect();
        (x2, pr, vs)
    };

    let mut loss = |p: &[f64]| {
        let (x2, mut pr, vs) = unpack(p);
        let (y, _) = if multiview {
            geoconv_forward_multiview(&x2, &nbrs, &mut pr, &vs, Mode::Train).unwrap()
        } else {
            geoconv_forward(&x2, &nbrs, &mut pr, Mode::Train).unwrap()
        };
        y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
    };
    let numeric = finite_diff(&mut loss, &flat, FD_EPS);

    let (x2, mut pr, vs) = unpack(&flat);
    let (_, cache) = if multiview {
        geoconv_forward_multiview(&x2, &nbrs, &mut pr, &vs, Mode::Train).unwrap()
    } else {
        geoconv_forward(&x2, &nbrs, &mut pr, Mode::Train).unwrap()
    };
    let (gx, grads) = geoconv_backward(&pr, &cache, &proj).unwrap();
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
    entries.extend(seg.compare(&analytic, &numeric));
}

fn check_baseline(rng: &mut Rng, entries: &mut Vec<CheckEntry>) {
    let n = 6;
    let positions = random_positions(rng, n, 0.4);
    let nbrs = NeighborhoodSet::build(&positions, 0.7, None).unwrap();
    let x = random_matrix(rng, n, 3);
    let mut params = BaselineConvParams::<f64>::init(3, 2, 4, rng);
    for g in params.bn.gamma.iter_mut() {
        *g = rng.uniform(0.5, 1.5);
    }
    let proj = random_matrix(rng, n, 4);

    let mut seg = Segments::new();
    seg.push("baseline.x", x.data());
    seg.push("baseline.w_c", params.w_c.data());
    seg.push("baseline.b_c", &params.b_c);
    seg.push("baseline.w_single", params.w_single.data());
    seg.push("baseline.w_exp", params.w_exp.data());
    seg.push("baseline.b_exp", &params.b_exp);
    seg.push("baseline.bn.gamma", &params.bn.gamma);
    seg.push("baseline.bn.beta", &params.bn.beta);
    let flat = seg.flat.clone();

    let unpack = |p: &[f64]| -> (Matrix<f64>, BaselineConvParams<f64>) {
        let mut at = 0usize;
        let mut take = |len: usize| {
            let s = p[at..at + len].to_vec();
            at += len;
            s
        };
        let x2 = Matrix::from_vec(n, 3, take(n * 3)).unwrap();
        let mut pr = params.clone();
        pr.w_c = Matrix::from_vec(3, 4, take(12)).unwrap();
        pr.b_c = take(4);
        pr.w_single = Matrix::from_vec(3, 2, take(6)).unwrap();
        pr.w_exp = Matrix::from_vec(2, 4, take(8)).unwrap();
        pr.b_exp = take(4);
        pr.bn.gamma = take(2);
        pr.bn.beta = take(2);
        (x2, pr)
    };

    let mut loss = |p: &[f64]| {
        let (x2, mut pr) = unpack(p);
        let (y, _) = baseline_edge_forward(&x2, &nbrs, &mut pr, Mode::Train).unwrap();
        y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
    };
    let numeric = finite_diff(&mut loss, &flat, FD_EPS);

    let (x2, mut pr) = unpack(&flat);
    let (_, cache) = baseline_edge_forward(&x2, &nbrs, &mut pr, Mode::Train).unwrap();
    let (gx, grads) = baseline_edge_backward(&pr, &cache, &proj).unwrap();
    let mut analytic = gx.data().to_vec();
    analytic.extend_from_slice(grads.w_c.data());
    analytic.extend_from_slice(&grads.b_c);
    analytic.extend_from_slice(grads.w_single.data());
    analytic.extend_from_slice(grads.w_exp.data());
    analytic.extend_from_slice(&grads.b_exp);
    analytic.extend_from_slice(&grads.bn_gamma);
    analytic.extend_from_slice(&grads.bn_beta);
    entries.extend(seg.compare(&analytic, &numeric));
}

// ---------------------------------------------------------------------------
// full-model scope

/// Micro configuration used for the whole-network check: 12 points, widths
/// 8/4/8 through the conv stack, 3 classes.
pub fn gradcheck_model_config(seed: u64) -> GeoCnnConfig {
    GeoCnnConfig {
        n_points: 12,
        in_channels: 3,
        num_classes: 3,
        branch1_k: 4,
        branch1_widths: [8, 8, 8],
        branch1_offsets: true,
        stem_width: 8,
        convs: [
            GeoConvSpec { c_in: 8, c_reduc: 4, c_out: 8, radius: 0.5 },
            GeoConvSpec { c_in: 8, c_reduc: 4, c_out: 8, radius: 0.7 },
            GeoConvSpec { c_in: 16, c_reduc: 4, c_out: 8, radius: 0.9 },
        ],
        fc_mid: 8,
        fc_final: 16,
        head_hidden: 8,
        baseline: false,
        multiview_angles: Vec::new(),
        neighbor_cap: 64,
        seed,
    }
}

fn random_cloud(rng: &mut Rng, n: usize, label: u32) -> PointCloud {
    let data: Vec<f32> = (0..n * 3).map(|_| rng.uniform(-0.5, 0.5) as f32).collect();
    PointCloud::new(3, data, Some(label)).unwrap()
}

fn check_full_model(seed: u64, entries: &mut Vec<CheckEntry>) {
    let mut rng = Rng::from_seed(seed);
    let config = gradcheck_model_config(seed);
    let model = build_model::<f64>(&config).unwrap();
    let clouds = [random_cloud(&mut rng, 12, 0), random_cloud(&mut rng, 12, 1)];
    let prepared: Vec<PreparedCloud> = clouds
        .iter()
        .map(|c| prepare_cloud(c, &config).unwrap())
        .collect();
    let refs: Vec<&PreparedCloud> = prepared.iter().collect();
    let batch = stack_batch::<f64>(&refs).unwrap();
    let labels = [0u32, 1];

    let mut seg = Segments::new();
    seg.push("input.features", batch.features.data());
    model.visit(&mut |name, _, _, data| seg.push(name, data));
    let flat = seg.flat.clone();

    let apply = |p: &[f64]| -> (geo_cnn_core::model::Model<f64>, Matrix<f64>) {
        let nf = batch.features.data().len();
        let features =
            Matrix::from_vec(batch.features.rows(), batch.features.cols(), p[..nf].to_vec())
                .unwrap();
        let mut m = model.clone();
        let mut at = nf;
        m.visit_mut(&mut |_, slice| {
            slice.copy_from_slice(&p[at..at + slice.len()]);
            at += slice.len();
        });
        (m, features)
    };

    let mut loss = |p: &[f64]| -> f64 {
        let (mut m, features) = apply(p);
        let mut b = batch.clone();
        b.features = features;
        let (logits, _) = m.forward(&b, Mode::Train).unwrap();
        let (loss, _) = softmax_cross_entropy_batch(&logits, &labels).unwrap();
        loss
    };
    let numeric = finite_diff(&mut loss, &flat, FD_EPS);

    let (mut m, features) = apply(&flat);
    let mut b = batch.clone();
    b.features = features;
    let (logits, cache) = m.forward(&b, Mode::Train).unwrap();
    let (_, grad_logits) = softmax_cross_entropy_batch(&logits, &labels).unwrap();
    let (grads, grad_features) = m.backward(&cache, &grad_logits).unwrap();
    let mut analytic = grad_features.data().to_vec();
    grads.visit(&mut |_, data| analytic.extend_from_slice(data));
    entries.extend(seg.compare(&analytic, &numeric));
}

// ---------------------------------------------------------------------------

pub fn gradcheck_suite(scope: Scope, seed: u64, tolerance: Option<f64>) -> GradCheckReport {
    let tolerance = tolerance.unwrap_or_else(|| scope.default_tolerance());
    let mut entries = Vec::new();
    match scope {
        Scope::Ops => {
            let mut rng = Rng::from_seed(seed);
            check_linear(&mut rng, &mut entries);
            check_relu(&mut rng, &mut entries);
            check_batchnorm(&mut rng, &mut entries);
            check_maxpool(&mut rng, &mut entries);
            check_softmax(&mut rng, &mut entries);
        }
        Scope::GeoConv => {
            let mut rng = Rng::from_seed(seed);
            check_geoconv(&mut rng, false, &mut entries);
            check_geoconv(&mut rng, true, &mut entries);
            check_baseline(&mut rng, &mut entries);
        }
        Scope::FullModel => {
            check_full_model(seed, &mut entries);
        }
    }
    GradCheckReport {
        scope,
        tolerance,
        entries,
    }
}
