//! The two-branch point-cloud classifier assembled from the conv and dense
//! primitives, plus batch preparation and the flat parameter registry used
//! by the optimizer and the checkpoint format.
//!
//! Branch 1 groups each point with its k nearest neighbors and runs a shared
//! per-neighbor MLP followed by a channel-wise max over the group. Branch 2
//! is the conv stack: stem FC, three conv layers with growing radii, an FC
//! between the first two, branch concatenation before the third, and a final
//! FC. A channel-wise max over all points of a cloud feeds the classifier
//! head. Batch-norm + ReLU follow every FC layer and every reduction layer
//! inside the conv blocks.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geoconv::{
    baseline_edge_backward, baseline_edge_forward, geoconv_backward, geoconv_forward,
    geoconv_forward_multiview, BaselineCache, BaselineConvParams, BaselineGrads, GeoConvCache,
    GeoConvGrads, GeoConvParams, View,
};
use crate::matrix::Matrix;
use crate::nn::{
    glorot_init, linear_backward, linear_forward, maxpool_backward_into, maxpool_rows,
    relu_backward, relu_forward, BatchNorm, BnCache, Mode,
};
use crate::pointcloud::PointCloud;
use crate::rng::Rng;
use crate::scalar::Real;
use crate::spatial::{NeighborhoodSet, SpatialIndex};

/// Stream tag for parameter initialization (see [`Rng::from_seed_stream`]).
const INIT_STREAM: u64 = 0x4d4f44454c;

/// One conv layer's widths and receptive-field radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoConvSpec {
    pub c_in: usize,
    pub c_reduc: usize,
    pub c_out: usize,
    pub radius: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeoCnnConfig {
    pub n_points: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub branch1_k: usize,
    pub branch1_widths: [usize; 3],
    /// Concatenate the neighbor-minus-center offset to each neighbor's
    /// feature before the grouping MLP (the default); `false` feeds raw
    /// neighbor features only.
    pub branch1_offsets: bool,
    pub stem_width: usize,
    pub convs: [GeoConvSpec; 3],
    pub fc_mid: usize,
    pub fc_final: usize,
    pub head_hidden: usize,
    /// Replace the directional decomposition with a single reduction matrix
    /// and the distance weighting with a plain average.
    pub baseline: bool,
    /// Non-empty enables the feature-level multi-view approximation.
    pub multiview_angles: Vec<f32>,
    pub neighbor_cap: usize,
    pub seed: u64,
}

impl GeoCnnConfig {
    /// The full-size classification architecture: 1000 points, grouping MLP
    /// 64-128-384, stem 64, conv widths (64,64,128)/(256,64,512)/(896,64,768)
    /// at radii 0.15/0.3/0.6, FC 2048, head 512.
    pub fn paper(num_classes: usize, in_channels: usize) -> Self {
        GeoCnnConfig {
            n_points: 1000,
            in_channels,
            num_classes,
            branch1_k: 16,
            branch1_widths: [64, 128, 384],
            branch1_offsets: true,
            stem_width: 64,
            convs: [
                GeoConvSpec { c_in: 64, c_reduc: 64, c_out: 128, radius: 0.15 },
                GeoConvSpec { c_in: 256, c_reduc: 64, c_out: 512, radius: 0.30 },
                GeoConvSpec { c_in: 896, c_reduc: 64, c_out: 768, radius: 0.60 },
            ],
            fc_mid: 256,
            fc_final: 2048,
            head_hidden: 512,
            baseline: false,
            multiview_angles: Vec::new(),
            neighbor_cap: 64,
            seed: 0,
        }
    }

    /// A small configuration that trains on a desktop CPU in minutes.
    pub fn micro(num_classes: usize, in_channels: usize, n_points: usize) -> Self {
        GeoCnnConfig {
            n_points,
            in_channels,
            num_classes,
            branch1_k: 16,
            branch1_widths: [16, 24, 32],
            branch1_offsets: true,
            stem_width: 16,
            convs: [
                GeoConvSpec { c_in: 16, c_reduc: 8, c_out: 24, radius: 0.15 },
                GeoConvSpec { c_in: 32, c_reduc: 8, c_out: 48, radius: 0.30 },
                GeoConvSpec { c_in: 80, c_reduc: 8, c_out: 64, radius: 0.60 },
            ],
            fc_mid: 32,
            fc_final: 96,
            head_hidden: 48,
            baseline: false,
            multiview_angles: Vec::new(),
            neighbor_cap: 64,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 3 && self.in_channels != 6 {
            return Err(Error::InvalidConfig(format!(
                "in_channels must be 3 or 6, got {}",
                self.in_channels
            )));
        }
        if self.n_points == 0 || self.num_classes < 2 || self.branch1_k == 0 {
            return Err(Error::InvalidConfig(
                "n_points, num_classes >= 2 and branch1_k must be positive".into(),
            ));
        }
        if self.neighbor_cap == 0 {
            return Err(Error::InvalidConfig("neighbor_cap must be positive".into()));
        }
        let widths = [
            self.stem_width,
            self.fc_mid,
            self.fc_final,
            self.head_hidden,
            self.branch1_widths[0],
            self.branch1_widths[1],
            self.branch1_widths[2],
        ];
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig("zero layer width".into()));
        }
        if self.convs[0].c_in != self.stem_width {
            return Err(Error::InvalidConfig(format!(
                "conv1 C_in {} must equal the stem width {}",
                self.convs[0].c_in, self.stem_width
            )));
        }
        if self.convs[1].c_in != self.fc_mid {
            return Err(Error::InvalidConfig(format!(
                "conv2 C_in {} must equal fc_mid {}",
                self.convs[1].c_in, self.fc_mid
            )));
        }
        let concat = self.convs[1].c_out + self.branch1_widths[2];
        if self.convs[2].c_in != concat {
            return Err(Error::InvalidConfig(format!(
                "conv3 C_in {} must equal conv2 C_out + branch-1 width = {concat}",
                self.convs[2].c_in
            )));
        }
        for c in &self.convs {
            if c.c_reduc == 0 || c.c_out == 0 {
                return Err(Error::InvalidConfig("zero conv width".into()));
            }
            if !(c.radius > 0.0) || !c.radius.is_finite() {
                return Err(Error::InvalidConfig(format!("bad radius {}", c.radius)));
            }
        }
        if !(self.convs[0].radius < self.convs[1].radius
            && self.convs[1].radius < self.convs[2].radius)
        {
            return Err(Error::InvalidConfig(
                "conv radii must be strictly increasing".into(),
            ));
        }
        for &a in &self.multiview_angles {
            if !a.is_finite() || !(0.0..core::f32::consts::TAU).contains(&a) {
                return Err(Error::InvalidConfig(format!(
                    "view angle {a} outside [0, 2pi)"
                )));
            }
        }
        if self.baseline && !self.multiview_angles.is_empty() {
            return Err(Error::InvalidConfig(
                "the averaging baseline has no directional decomposition to re-weight".into(),
            ));
        }
        Ok(())
    }

    pub fn multiview(&self) -> bool {
        !self.multiview_angles.is_empty()
    }

    /// Total parameters of the three reduction stages:
    /// `C_in * n_bases * C_reduc + C_reduc * C_out` per layer, with
    /// `n_bases = 6` for the directional decomposition and 1 for the
    /// baseline.
    pub fn reduction_parameter_count(&self) -> usize {
        let n_bases = if self.baseline { 1 } else { 6 };
        self.convs
            .iter()
            .map(|c| c.c_in * n_bases * c.c_reduc + c.c_reduc * c.c_out)
            .sum()
    }

    /// Versioned key=value text block; floats print in round-trip form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("format=1\n");
        s.push_str(&format!("n_points={}\n", self.n_points));
        s.push_str(&format!("in_channels={}\n", self.in_channels));
        s.push_str(&format!("num_classes={}\n", self.num_classes));
        s.push_str(&format!("branch1_k={}\n", self.branch1_k));
        s.push_str(&format!(
            "branch1_widths={},{},{}\n",
            self.branch1_widths[0], self.branch1_widths[1], self.branch1_widths[2]
        ));
        s.push_str(&format!("branch1_offsets={}\n", self.branch1_offsets));
        s.push_str(&format!("stem_width={}\n", self.stem_width));
        for (i, c) in self.convs.iter().enumerate() {
            s.push_str(&format!(
                "conv{}={},{},{},{}\n",
                i + 1,
                c.c_in,
                c.c_reduc,
                c.c_out,
                c.radius
            ));
        }
        s.push_str(&format!("fc_mid={}\n", self.fc_mid));
        s.push_str(&format!("fc_final={}\n", self.fc_final));
        s.push_str(&format!("head_hidden={}\n", self.head_hidden));
        s.push_str(&format!("baseline={}\n", self.baseline));
        let angles: Vec<String> = self.multiview_angles.iter().map(|a| a.to_string()).collect();
        s.push_str(&format!("multiview_angles={}\n", angles.join(",")));
        s.push_str(&format!("neighbor_cap={}\n", self.neighbor_cap));
        s.push_str(&format!("seed={}\n", self.seed));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = alloc::collections::BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("bad config line '{line}'")))?;
            map.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<String> {
            map.get(k)
                .cloned()
                .ok_or_else(|| Error::InvalidConfig(format!("missing config key '{k}'")))
        };
        fn parse<F: core::str::FromStr>(k: &str, v: &str) -> Result<F> {
            v.parse()
                .map_err(|_| Error::InvalidConfig(format!("bad value '{v}' for '{k}'")))
        }
        let version: u32 = parse("format", &get("format")?)?;
        if version != 1 {
            return Err(Error::InvalidConfig(format!(
                "unsupported config format {version}"
            )));
        }
        let widths_raw = get("branch1_widths")?;
        let widths: Vec<usize> = widths_raw
            .split(',')
            .map(|v| parse("branch1_widths", v))
            .collect::<Result<_>>()?;
        if widths.len() != 3 {
            return Err(Error::InvalidConfig("branch1_widths needs 3 entries".into()));
        }
        let mut convs = Vec::new();
        for i in 1..=3 {
            let raw = get(&format!("conv{i}"))?;
            let parts: Vec<&str> = raw.split(',').collect();
            if parts.len() != 4 {
                return Err(Error::InvalidConfig(format!("conv{i} needs 4 fields")));
            }
            convs.push(GeoConvSpec {
                c_in: parse("conv", parts[0])?,
                c_reduc: parse("conv", parts[1])?,
                c_out: parse("conv", parts[2])?,
                radius: parse("conv", parts[3])?,
            });
        }
        let angles_raw = get("multiview_angles")?;
        let multiview_angles: Vec<f32> = if angles_raw.is_empty() {
            Vec::new()
        } else {
            angles_raw
                .split(',')
                .map(|v| parse("multiview_angles", v))
                .collect::<Result<_>>()?
        };
        let config = GeoCnnConfig {
            n_points: parse("n_points", &get("n_points")?)?,
            in_channels: parse("in_channels", &get("in_channels")?)?,
            num_classes: parse("num_classes", &get("num_classes")?)?,
            branch1_k: parse("branch1_k", &get("branch1_k")?)?,
            branch1_widths: [widths[0], widths[1], widths[2]],
            branch1_offsets: parse("branch1_offsets", &get("branch1_offsets")?)?,
            stem_width: parse("stem_width", &get("stem_width")?)?,
            convs: [convs[0], convs[1], convs[2]],
            fc_mid: parse("fc_mid", &get("fc_mid")?)?,
            fc_final: parse("fc_final", &get("fc_final")?)?,
            head_hidden: parse("head_hidden", &get("head_hidden")?)?,
            baseline: parse("baseline", &get("baseline")?)?,
            multiview_angles,
            neighbor_cap: parse("neighbor_cap", &get("neighbor_cap")?)?,
            seed: parse("seed", &get("seed")?)?,
        };
        config.validate()?;
        Ok(config)
    }
}

// ---------------------------------------------------------------------------
// layer building blocks

#[derive(Debug, Clone, PartialEq)]
struct Dense<T> {
    w: Matrix<T>,
    b: Vec<T>,
}

struct DenseCache<T> {
    x: Matrix<T>,
}

#[derive(Debug, Clone)]
pub struct DenseGrads<T> {
    pub w: Matrix<T>,
    pub b: Vec<T>,
}

impl<T: Real> Dense<T> {
    fn init(rng: &mut Rng, c_in: usize, c_out: usize) -> Self {
        Dense {
            w: glorot_init(rng, c_in, c_out),
            b: vec![T::ZERO; c_out],
        }
    }

    fn forward(&self, x: &Matrix<T>) -> Result<(Matrix<T>, DenseCache<T>)> {
        let y = linear_forward(x, &self.w, &self.b)?;
        Ok((y, DenseCache { x: x.clone() }))
    }

    fn backward(&self, cache: &DenseCache<T>, grad_y: &Matrix<T>) -> Result<(Matrix<T>, DenseGrads<T>)> {
        let (gx, gw, gb) = linear_backward(&cache.x, &self.w, grad_y)?;
        Ok((gx, DenseGrads { w: gw, b: gb }))
    }
}

/// FC + batch-norm + ReLU.
#[derive(Debug, Clone, PartialEq)]
struct MlpBlock<T> {
    fc: Dense<T>,
    bn: BatchNorm<T>,
}

struct MlpBlockCache<T> {
    dense: DenseCache<T>,
    bn: BnCache<T>,
    act: Matrix<T>,
}

#[derive(Debug, Clone)]
pub struct MlpBlockGrads<T> {
    pub w: Matrix<T>,
    pub b: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Real> MlpBlock<T> {
    fn init(rng: &mut Rng, c_in: usize, c_out: usize) -> Self {
        MlpBlock {
            fc: Dense::init(rng, c_in, c_out),
            bn: BatchNorm::new(c_out),
        }
    }

    fn forward(&mut self, x: &Matrix<T>, mode: Mode) -> Result<(Matrix<T>, MlpBlockCache<T>)> {
        let (y, dense) = self.fc.forward(x)?;
        let (z, bn) = self.bn.forward(&y, mode)?;
        let act = relu_forward(&z);
        Ok((act.clone(), MlpBlockCache { dense, bn, act }))
    }

    fn backward(
        &self,
        cache: &MlpBlockCache<T>,
        grad_y: &Matrix<T>,
    ) -> Result<(Matrix<T>, MlpBlockGrads<T>)> {
        let gz = relu_backward(&cache.act, grad_y);
        let (gy, gamma, beta) = self.bn.backward(&cache.bn, &gz);
        let (gx, dense) = self.fc.backward(&cache.dense, &gy)?;
        Ok((
            gx,
            MlpBlockGrads {
                w: dense.w,
                b: dense.b,
                gamma,
                beta,
            },
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum ConvLayer<T> {
    Geo(GeoConvParams<T>),
    Baseline(BaselineConvParams<T>),
}

enum ConvLayerCache<T> {
    Geo(GeoConvCache<T>),
    Baseline(BaselineCache<T>),
}

#[derive(Debug, Clone)]
pub enum ConvGrads<T> {
    Geo(GeoConvGrads<T>),
    Baseline(BaselineGrads<T>),
}

impl<T: Real> ConvLayer<T> {
    fn init(spec: &GeoConvSpec, baseline: bool, rng: &mut Rng) -> Self {
        if baseline {
            ConvLayer::Baseline(BaselineConvParams::init(
                spec.c_in, spec.c_reduc, spec.c_out, rng,
            ))
        } else {
            ConvLayer::Geo(GeoConvParams::init(spec.c_in, spec.c_reduc, spec.c_out, rng))
        }
    }

    fn forward(
        &mut self,
        x: &Matrix<T>,
        nbrs: &NeighborhoodSet,
        views: Option<&[View<T>]>,
        mode: Mode,
    ) -> Result<(Matrix<T>, ConvLayerCache<T>)> {
        match self {
            ConvLayer::Geo(p) => {
                let (y, c) = match views {
                    Some(v) => geoconv_forward_multiview(x, nbrs, p, v, mode)?,
                    None => geoconv_forward(x, nbrs, p, mode)?,
                };
                Ok((y, ConvLayerCache::Geo(c)))
            }
            ConvLayer::Baseline(p) => {
                let (y, c) = baseline_edge_forward(x, nbrs, p, mode)?;
                Ok((y, ConvLayerCache::Baseline(c)))
            }
        }
    }

    fn backward(
        &self,
        cache: &ConvLayerCache<T>,
        grad_y: &Matrix<T>,
    ) -> Result<(Matrix<T>, ConvGrads<T>)> {
        match (self, cache) {
            (ConvLayer::Geo(p), ConvLayerCache::Geo(c)) => {
                let (gx, g) = geoconv_backward(p, c, grad_y)?;
                Ok((gx, ConvGrads::Geo(g)))
            }
            (ConvLayer::Baseline(p), ConvLayerCache::Baseline(c)) => {
                let (gx, g) = baseline_edge_backward(p, c, grad_y)?;
                Ok((gx, ConvGrads::Baseline(g)))
            }
            _ => Err(Error::InvalidArgument(
                "conv cache does not match the layer kind".into(),
            )),
        }
    }
}

// ---------------------------------------------------------------------------
// prepared inputs

/// A cloud with its neighborhoods and grouping indices precomputed for a
/// specific model configuration.
#[derive(Debug, Clone)]
pub struct PreparedCloud {
    pub features: Matrix<f32>,
    pub positions: Vec<[f32; 3]>,
    pub label: Option<u32>,
    pub nbrs: [NeighborhoodSet; 3],
    /// `n * k` nearest-neighbor indices, k consecutive entries per point.
    pub groups: Vec<u32>,
}

/// Builds neighborhoods (one set per conv radius) and k-NN groups.
pub fn prepare_cloud(cloud: &PointCloud, config: &GeoCnnConfig) -> Result<PreparedCloud> {
    if cloud.n() != config.n_points {
        return Err(Error::InvalidArgument(format!(
            "cloud has {} points, model expects {}",
            cloud.n(),
            config.n_points
        )));
    }
    if cloud.channels() != config.in_channels {
        return Err(Error::InvalidArgument(format!(
            "cloud has {} channels, model expects {}",
            cloud.channels(),
            config.in_channels
        )));
    }
    let positions = cloud.positions();
    let features = Matrix::from_vec(cloud.n(), cloud.channels(), cloud.data().to_vec())?;
    let mut nbrs = Vec::with_capacity(3);
    for spec in &config.convs {
        nbrs.push(NeighborhoodSet::build(
            &positions,
            spec.radius,
            Some(config.neighbor_cap),
        )?);
    }
    let nbrs: [NeighborhoodSet; 3] = nbrs.try_into().expect("three sets");

    // Grid sized to the expected point spacing on a unit-sphere cloud.
    let cell = (2.0 / libm::cbrtf(cloud.n() as f32)).max(1e-3);
    let index = SpatialIndex::build(&positions, cell)?;
    let mut groups = Vec::with_capacity(cloud.n() * config.branch1_k);
    for p in 0..cloud.n() {
        groups.extend(index.knn_query(p, config.branch1_k)?);
    }
    Ok(PreparedCloud {
        features,
        positions,
        label: cloud.label(),
        nbrs,
        groups,
    })
}

/// A stack of prepared clouds with indices offset into one shared row space.
#[derive(Debug, Clone)]
pub struct PreparedBatch<T> {
    pub features: Matrix<T>,
    pub positions: Vec<[f32; 3]>,
    pub nbrs: [NeighborhoodSet; 3],
    pub groups: Vec<u32>,
    pub n_clouds: usize,
    pub n_per_cloud: usize,
    pub labels: Vec<Option<u32>>,
}

pub fn stack_batch<T: Real>(clouds: &[&PreparedCloud]) -> Result<PreparedBatch<T>> {
    let first = clouds
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let n = first.features.rows();
    let c = first.features.cols();
    let k = first.groups.len() / n;
    let mut features = Matrix::zeros(clouds.len() * n, c);
    let mut positions = Vec::with_capacity(clouds.len() * n);
    let mut groups = Vec::with_capacity(clouds.len() * n * k);
    let mut labels = Vec::with_capacity(clouds.len());
    for (ci, cloud) in clouds.iter().enumerate() {
        if cloud.features.shape() != (n, c) || cloud.groups.len() != n * k {
            return Err(Error::ShapeMismatch(
                "all clouds in a batch must share n, channels and k".into(),
            ));
        }
        let base = (ci * n) as u32;
        for p in 0..n {
            let dst = features.row_mut(ci * n + p);
            for (d, &s) in dst.iter_mut().zip(cloud.features.row(p)) {
                *d = T::from_f32(s);
            }
        }
        positions.extend_from_slice(&cloud.positions);
        groups.extend(cloud.groups.iter().map(|&q| q + base));
        labels.push(cloud.label);
    }
    let mut nbrs = Vec::with_capacity(3);
    for layer in 0..3 {
        let sets: Vec<&NeighborhoodSet> = clouds.iter().map(|c| &c.nbrs[layer]).collect();
        nbrs.push(NeighborhoodSet::stack(&sets)?);
    }
    Ok(PreparedBatch {
        features,
        positions,
        nbrs: nbrs.try_into().expect("three sets"),
        groups,
        n_clouds: clouds.len(),
        n_per_cloud: n,
        labels,
    })
}

// ---------------------------------------------------------------------------
// the model

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: GeoCnnConfig,
    b1: [MlpBlock<T>; 3],
    stem: MlpBlock<T>,
    conv1: ConvLayer<T>,
    mid: MlpBlock<T>,
    conv2: ConvLayer<T>,
    conv3: ConvLayer<T>,
    final_fc: MlpBlock<T>,
    head: MlpBlock<T>,
    classify: Dense<T>,
    view_weights: Vec<T>,
}

pub struct ModelCache<T> {
    n_clouds: usize,
    n_per_cloud: usize,
    groups: Vec<u32>,
    b1_caches: [MlpBlockCache<T>; 3],
    b1_pool_arg: Vec<u32>,
    stem_cache: MlpBlockCache<T>,
    conv1_cache: ConvLayerCache<T>,
    mid_cache: MlpBlockCache<T>,
    conv2_cache: ConvLayerCache<T>,
    conv3_cache: ConvLayerCache<T>,
    final_cache: MlpBlockCache<T>,
    pool_arg: Vec<u32>,
    head_cache: MlpBlockCache<T>,
    classify_cache: DenseCache<T>,
}

#[derive(Debug, Clone)]
pub struct ModelGrads<T> {
    pub b1: [MlpBlockGrads<T>; 3],
    pub stem: MlpBlockGrads<T>,
    pub conv1: ConvGrads<T>,
    pub mid: MlpBlockGrads<T>,
    pub conv2: ConvGrads<T>,
    pub conv3: ConvGrads<T>,
    pub final_fc: MlpBlockGrads<T>,
    pub head: MlpBlockGrads<T>,
    pub classify: DenseGrads<T>,
    pub view_weights: Vec<T>,
}

/// Builds a model with seed-pinned initialization.
pub fn build_model<T: Real>(config: &GeoCnnConfig) -> Result<Model<T>> {
    config.validate()?;
    let mut rng = Rng::from_seed_stream(config.seed, INIT_STREAM);
    let b1_in = config.in_channels + if config.branch1_offsets { 3 } else { 0 };
    let b1 = [
        MlpBlock::init(&mut rng, b1_in, config.branch1_widths[0]),
        MlpBlock::init(&mut rng, config.branch1_widths[0], config.branch1_widths[1]),
        MlpBlock::init(&mut rng, config.branch1_widths[1], config.branch1_widths[2]),
    ];
    let stem = MlpBlock::init(&mut rng, config.in_channels, config.stem_width);
    let conv1 = ConvLayer::init(&config.convs[0], config.baseline, &mut rng);
    let mid = MlpBlock::init(&mut rng, config.convs[0].c_out, config.fc_mid);
    let conv2 = ConvLayer::init(&config.convs[1], config.baseline, &mut rng);
    let conv3 = ConvLayer::init(&config.convs[2], config.baseline, &mut rng);
    let final_fc = MlpBlock::init(&mut rng, config.convs[2].c_out, config.fc_final);
    let head = MlpBlock::init(&mut rng, config.fc_final, config.head_hidden);
    let classify = Dense::init(&mut rng, config.head_hidden, config.num_classes);
    let n_views = config.multiview_angles.len();
    let view_weights = if n_views > 0 {
        vec![T::from_f64(1.0 / n_views as f64); n_views]
    } else {
        Vec::new()
    };
    Ok(Model {
        config: config.clone(),
        b1,
        stem,
        conv1,
        mid,
        conv2,
        conv3,
        final_fc,
        head,
        classify,
        view_weights,
    })
}

impl<T: Real> Model<T> {
    fn views(&self) -> Option<Vec<View<T>>> {
        if self.config.multiview() {
            Some(
                self.config
                    .multiview_angles
                    .iter()
                    .zip(&self.view_weights)
                    .map(|(&angle, &weight)| View { angle, weight })
                    .collect(),
            )
        } else {
            None
        }
    }

    /// Forward pass over a stacked batch; returns one logit row per cloud.
    pub fn forward(
        &mut self,
        batch: &PreparedBatch<T>,
        mode: Mode,
    ) -> Result<(Matrix<T>, ModelCache<T>)> {
        let n_total = batch.n_clouds * batch.n_per_cloud;
        if batch.features.shape() != (n_total, self.config.in_channels) {
            return Err(Error::ShapeMismatch(format!(
                "batch features {}x{}, expected {}x{}",
                batch.features.rows(),
                batch.features.cols(),
                n_total,
                self.config.in_channels
            )));
        }
        if batch.n_per_cloud != self.config.n_points {
            return Err(Error::InvalidArgument(format!(
                "batch clouds have {} points, model expects {}",
                batch.n_per_cloud, self.config.n_points
            )));
        }
        let k = self.config.branch1_k;
        let c = self.config.in_channels;

        // Branch 1: per-neighbor rows, shared MLP, max over each group.
        let with_offsets = self.config.branch1_offsets;
        let width = c + if with_offsets { 3 } else { 0 };
        let mut g_in = Matrix::zeros(n_total * k, width);
        for p in 0..n_total {
            let pp = batch.positions[p];
            for (slot, &q) in batch.groups[p * k..(p + 1) * k].iter().enumerate() {
                let row = g_in.row_mut(p * k + slot);
                row[..c].copy_from_slice(batch.features.row(q as usize));
                if with_offsets {
                    let qp = batch.positions[q as usize];
                    for a in 0..3 {
                        row[c + a] = T::from_f32(qp[a] - pp[a]);
                    }
                }
            }
        }
        let (h0, b1c0) = self.b1[0].forward(&g_in, mode)?;
        let (h1, b1c1) = self.b1[1].forward(&h0, mode)?;
        let (h2, b1c2) = self.b1[2].forward(&h1, mode)?;
        let w2 = h2.cols();
        let mut b1_feat = Matrix::zeros(n_total, w2);
        let mut b1_pool_arg = Vec::with_capacity(n_total * w2);
        for p in 0..n_total {
            let (pooled, arg) = maxpool_rows(&h2, p * k, (p + 1) * k);
            b1_feat.row_mut(p).copy_from_slice(&pooled);
            b1_pool_arg.extend(arg);
        }

        // Branch 2: stem, conv stack with the branch-1 concat before conv3.
        let views = self.views();
        let views_ref = views.as_deref();
        let (s, stem_cache) = self.stem.forward(&batch.features, mode)?;
        let (x1, conv1_cache) = self.conv1.forward(&s, &batch.nbrs[0], views_ref, mode)?;
        let (m, mid_cache) = self.mid.forward(&x1, mode)?;
        let (x2, conv2_cache) = self.conv2.forward(&m, &batch.nbrs[1], views_ref, mode)?;
        let cat = x2.concat_cols(&b1_feat)?;
        let (x3, conv3_cache) = self.conv3.forward(&cat, &batch.nbrs[2], views_ref, mode)?;
        let (f, final_cache) = self.final_fc.forward(&x3, mode)?;

        // Global descriptor: channel-wise max over each cloud's points.
        let fw = f.cols();
        let mut global = Matrix::zeros(batch.n_clouds, fw);
        let mut pool_arg = Vec::with_capacity(batch.n_clouds * fw);
        for ci in 0..batch.n_clouds {
            let (pooled, arg) =
                maxpool_rows(&f, ci * batch.n_per_cloud, (ci + 1) * batch.n_per_cloud);
            global.row_mut(ci).copy_from_slice(&pooled);
            pool_arg.extend(arg);
        }
        let (hh, head_cache) = self.head.forward(&global, mode)?;
        let (logits, classify_cache) = self.classify.forward(&hh)?;

        Ok((
            logits,
            ModelCache {
                n_clouds: batch.n_clouds,
                n_per_cloud: batch.n_per_cloud,
                groups: batch.groups.clone(),
                b1_caches: [b1c0, b1c1, b1c2],
                b1_pool_arg,
                stem_cache,
                conv1_cache,
                mid_cache,
                conv2_cache,
                conv3_cache,
                final_cache,
                pool_arg,
                head_cache,
                classify_cache,
            },
        ))
    }

    /// Backward pass; returns parameter gradients and the gradient with
    /// respect to the input features (positions are constants).
    pub fn backward(
        &self,
        cache: &ModelCache<T>,
        grad_logits: &Matrix<T>,
    ) -> Result<(ModelGrads<T>, Matrix<T>)> {
        let n_total = cache.n_clouds * cache.n_per_cloud;
        let k = self.config.branch1_k;
        let c = self.config.in_channels;

        let (grad_h, classify_grads) = self.classify.backward(&cache.classify_cache, grad_logits)?;
        let (grad_global, head_grads) = self.head.backward(&cache.head_cache, &grad_h)?;

        let fw = grad_global.cols();
        let mut grad_f = Matrix::zeros(n_total, fw);
        for ci in 0..cache.n_clouds {
            maxpool_backward_into(
                grad_global.row(ci),
                &cache.pool_arg[ci * fw..(ci + 1) * fw],
                &mut grad_f,
            );
        }
        let (grad_x3, final_grads) = self.final_fc.backward(&cache.final_cache, &grad_f)?;
        let (grad_cat, conv3_grads) = self.conv3.backward(&cache.conv3_cache, &grad_x3)?;
        let (grad_x2, grad_b1_feat) = grad_cat.split_cols(self.config.convs[1].c_out);
        let (grad_m, conv2_grads) = self.conv2.backward(&cache.conv2_cache, &grad_x2)?;
        let (grad_x1, mid_grads) = self.mid.backward(&cache.mid_cache, &grad_m)?;
        let (grad_s, conv1_grads) = self.conv1.backward(&cache.conv1_cache, &grad_x1)?;
        let (mut grad_features, stem_grads) = self.stem.backward(&cache.stem_cache, &grad_s)?;

        // Branch 1 backward: unpool into group rows, run the MLP backward,
        // scatter the feature part onto the neighbors' feature gradient.
        let w2 = grad_b1_feat.cols();
        let mut grad_h2 = Matrix::zeros(n_total * k, w2);
        for p in 0..n_total {
            maxpool_backward_into(
                grad_b1_feat.row(p),
                &cache.b1_pool_arg[p * w2..(p + 1) * w2],
                &mut grad_h2,
            );
        }
        let (grad_h1, b1g2) = self.b1[2].backward(&cache.b1_caches[2], &grad_h2)?;
        let (grad_h0, b1g1) = self.b1[1].backward(&cache.b1_caches[1], &grad_h1)?;
        let (grad_gin, b1g0) = self.b1[0].backward(&cache.b1_caches[0], &grad_h0)?;
        for p in 0..n_total {
            for (slot, &q) in cache.groups[p * k..(p + 1) * k].iter().enumerate() {
                let src = grad_gin.row(p * k + slot);
                let dst = grad_features.row_mut(q as usize);
                for a in 0..c {
                    dst[a] += src[a];
                }
            }
        }

        // Multi-view weights are shared by the three conv layers.
        let mut view_weights = vec![T::ZERO; self.view_weights.len()];
        for grads in [&conv1_grads, &conv2_grads, &conv3_grads] {
            if let ConvGrads::Geo(g) = grads {
                for (acc, &v) in view_weights.iter_mut().zip(&g.view_weights) {
                    *acc += v;
                }
            }
        }

        Ok((
            ModelGrads {
                b1: [b1g0, b1g1, b1g2],
                stem: stem_grads,
                conv1: conv1_grads,
                mid: mid_grads,
                conv2: conv2_grads,
                conv3: conv3_grads,
                final_fc: final_grads,
                head: head_grads,
                classify: classify_grads,
                view_weights,
            },
            grad_features,
        ))
    }

    /// Eval/train forward for a single cloud; logits come back as `1 x K`.
    pub fn forward_cloud(
        &mut self,
        cloud: &PreparedCloud,
        mode: Mode,
    ) -> Result<(Matrix<T>, ModelCache<T>)> {
        let batch = stack_batch::<T>(&[cloud])?;
        self.forward(&batch, mode)
    }

    pub fn parameter_count(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, rows, cols, _| total += rows * cols);
        total
    }
}

// ---------------------------------------------------------------------------
// parameter registry

fn visit_mlp<'a, T: Real>(
    prefix: &str,
    blk: &'a MlpBlock<T>,
    f: &mut dyn FnMut(&str, usize, usize, &'a [T]),
) {
    f(&format!("{prefix}.w"), blk.fc.w.rows(), blk.fc.w.cols(), blk.fc.w.data());
    f(&format!("{prefix}.b"), 1, blk.fc.b.len(), &blk.fc.b);
    f(&format!("{prefix}.bn.gamma"), 1, blk.bn.gamma.len(), &blk.bn.gamma);
    f(&format!("{prefix}.bn.beta"), 1, blk.bn.beta.len(), &blk.bn.beta);
}

fn visit_mlp_mut<'a, T: Real>(
    prefix: &str,
    blk: &'a mut MlpBlock<T>,
    f: &mut dyn FnMut(&str, &'a mut [T]),
) {
    f(&format!("{prefix}.w"), blk.fc.w.data_mut());
    f(&format!("{prefix}.b"), &mut blk.fc.b);
    f(&format!("{prefix}.bn.gamma"), &mut blk.bn.gamma);
    f(&format!("{prefix}.bn.beta"), &mut blk.bn.beta);
}

fn visit_mlp_grads<'a, T: Real>(
    prefix: &str,
    g: &'a MlpBlockGrads<T>,
    f: &mut dyn FnMut(&str, &'a [T]),
) {
    f(&format!("{prefix}.w"), g.w.data());
    f(&format!("{prefix}.b"), &g.b);
    f(&format!("{prefix}.bn.gamma"), &g.gamma);
    f(&format!("{prefix}.bn.beta"), &g.beta);
}

fn visit_conv<'a, T: Real>(
    prefix: &str,
    layer: &'a ConvLayer<T>,
    f: &mut dyn FnMut(&str, usize, usize, &'a [T]),
) {
    match layer {
        ConvLayer::Geo(p) => {
            f(&format!("{prefix}.w_c"), p.w_c.rows(), p.w_c.cols(), p.w_c.data());
            f(&format!("{prefix}.b_c"), 1, p.b_c.len(), &p.b_c);
            for (b, w) in p.w_dir.iter().enumerate() {
                f(&format!("{prefix}.w_dir.{b}"), w.rows(), w.cols(), w.data());
            }
            f(&format!("{prefix}.w_exp"), p.w_exp.rows(), p.w_exp.cols(), p.w_exp.data());
            f(&format!("{prefix}.b_exp"), 1, p.b_exp.len(), &p.b_exp);
            f(&format!("{prefix}.bn.gamma"), 1, p.bn.gamma.len(), &p.bn.gamma);
            f(&format!("{prefix}.bn.beta"), 1, p.bn.beta.len(), &p.bn.beta);
        }
        ConvLayer::Baseline(p) => {
            f(&format!("{prefix}.w_c"), p.w_c.rows(), p.w_c.cols(), p.w_c.data());
            f(&format!("{prefix}.b_c"), 1, p.b_c.len(), &p.b_c);
            f(&format!("{prefix}.w_single"), p.w_single.rows(), p.w_single.cols(), p.w_single.data());
            f(&format!("{prefix}.w_exp"), p.w_exp.rows(), p.w_exp.cols(), p.w_exp.data());
            f(&format!("{prefix}.b_exp"), 1, p.b_exp.len(), &p.b_exp);
            f(&format!("{prefix}.bn.gamma"), 1, p.bn.gamma.len(), &p.bn.gamma);
            f(&format!("{prefix}.bn.beta"), 1, p.bn.beta.len(), &p.bn.beta);
        }
    }
}

fn visit_conv_mut<'a, T: Real>(
    prefix: &str,
    layer: &'a mut ConvLayer<T>,
    f: &mut dyn FnMut(&str, &'a mut [T]),
) {
    match layer {
        ConvLayer::Geo(p) => {
            f(&format!("{prefix}.w_c"), p.w_c.data_mut());
            f(&format!("{prefix}.b_c"), &mut p.b_c);
            for (b, w) in p.w_dir.iter_mut().enumerate() {
                f(&format!("{prefix}.w_dir.{b}"), w.data_mut());
            }
            f(&format!("{prefix}.w_exp"), p.w_exp.data_mut());
            f(&format!("{prefix}.b_exp"), &mut p.b_exp);
            f(&format!("{prefix}.bn.gamma"), &mut p.bn.gamma);
            f(&format!("{prefix}.bn.beta"), &mut p.bn.beta);
        }
        ConvLayer::Baseline(p) => {
            f(&format!("{prefix}.w_c"), p.w_c.data_mut());
            f(&format!("{prefix}.b_c"), &mut p.b_c);
            f(&format!("{prefix}.w_single"), p.w_single.data_mut());
            f(&format!("{prefix}.w_exp"), p.w_exp.data_mut());
            f(&format!("{prefix}.b_exp"), &mut p.b_exp);
            f(&format!("{prefix}.bn.gamma"), &mut p.bn.gamma);
            f(&format!("{prefix}.bn.beta"), &mut p.bn.beta);
        }
    }
}

fn visit_conv_grads<'a, T: Real>(
    prefix: &str,
    g: &'a ConvGrads<T>,
    f: &mut dyn FnMut(&str, &'a [T]),
) {
    match g {
        ConvGrads::Geo(g) => {
            f(&format!("{prefix}.w_c"), g.w_c.data());
            f(&format!("{prefix}.b_c"), &g.b_c);
            for (b, w) in g.w_dir.iter().enumerate() {
                f(&format!("{prefix}.w_dir.{b}"), w.data());
            }
            f(&format!("{prefix}.w_exp"), g.w_exp.data());
            f(&format!("{prefix}.b_exp"), &g.b_exp);
            f(&format!("{prefix}.bn.gamma"), &g.bn_gamma);
            f(&format!("{prefix}.bn.beta"), &g.bn_beta);
        }
        ConvGrads::Baseline(g) => {
            f(&format!("{prefix}.w_c"), g.w_c.data());
            f(&format!("{prefix}.b_c"), &g.b_c);
            f(&format!("{prefix}.w_single"), g.w_single.data());
            f(&format!("{prefix}.w_exp"), g.w_exp.data());
            f(&format!("{prefix}.b_exp"), &g.b_exp);
            f(&format!("{prefix}.bn.gamma"), &g.bn_gamma);
            f(&format!("{prefix}.bn.beta"), &g.bn_beta);
        }
    }
}

impl<T: Real> Model<T> {
    /// Visits every trainable parameter as `(name, rows, cols, data)` in a
    /// fixed order shared with [`ModelGrads::visit`].
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, usize, usize, &'a [T])) {
        for (i, blk) in self.b1.iter().enumerate() {
            visit_mlp(&format!("b1.{i}"), blk, f);
        }
        visit_mlp("stem", &self.stem, f);
        visit_conv("conv1", &self.conv1, f);
        visit_mlp("mid", &self.mid, f);
        visit_conv("conv2", &self.conv2, f);
        visit_conv("conv3", &self.conv3, f);
        visit_mlp("final", &self.final_fc, f);
        visit_mlp("head", &self.head, f);
        f("classify.w", self.classify.w.rows(), self.classify.w.cols(), self.classify.w.data());
        f("classify.b", 1, self.classify.b.len(), &self.classify.b);
        if !self.view_weights.is_empty() {
            f("views.weights", 1, self.view_weights.len(), &self.view_weights);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&str, &'a mut [T])) {
        for (i, blk) in self.b1.iter_mut().enumerate() {
            visit_mlp_mut(&format!("b1.{i}"), blk, f);
        }
        visit_mlp_mut("stem", &mut self.stem, f);
        visit_conv_mut("conv1", &mut self.conv1, f);
        visit_mlp_mut("mid", &mut self.mid, f);
        visit_conv_mut("conv2", &mut self.conv2, f);
        visit_conv_mut("conv3", &mut self.conv3, f);
        visit_mlp_mut("final", &mut self.final_fc, f);
        visit_mlp_mut("head", &mut self.head, f);
        f("classify.w", self.classify.w.data_mut());
        f("classify.b", &mut self.classify.b);
        if !self.view_weights.is_empty() {
            f("views.weights", &mut self.view_weights);
        }
    }

    /// Visits the batch-norm running statistics (non-trainable state).
    pub fn visit_buffers<'a>(&'a self, f: &mut dyn FnMut(&str, &'a [T])) {
        let mut bns: Vec<(String, &BatchNorm<T>)> = Vec::new();
        for (i, blk) in self.b1.iter().enumerate() {
            bns.push((format!("b1.{i}.bn"), &blk.bn));
        }
        bns.push(("stem.bn".into(), &self.stem.bn));
        bns.push((
            "conv1.bn".into(),
            match &self.conv1 {
                ConvLayer::Geo(p) => &p.bn,
                ConvLayer::Baseline(p) => &p.bn,
            },
        ));
        bns.push(("mid.bn".into(), &self.mid.bn));
        bns.push((
            "conv2.bn".into(),
            match &self.conv2 {
                ConvLayer::Geo(p) => &p.bn,
                ConvLayer::Baseline(p) => &p.bn,
            },
        ));
        bns.push((
            "conv3.bn".into(),
            match &self.conv3 {
                ConvLayer::Geo(p) => &p.bn,
                ConvLayer::Baseline(p) => &p.bn,
            },
        ));
        bns.push(("final.bn".into(), &self.final_fc.bn));
        bns.push(("head.bn".into(), &self.head.bn));
        for (name, bn) in bns {
            f(&format!("{name}.running_mean"), &bn.running_mean);
            f(&format!("{name}.running_var"), &bn.running_var);
        }
    }

    pub fn visit_buffers_mut<'a>(&'a mut self, f: &mut dyn FnMut(&str, &'a mut [T])) {
        let mut bns: Vec<(String, &mut BatchNorm<T>)> = Vec::new();
        for (i, blk) in self.b1.iter_mut().enumerate() {
            bns.push((format!("b1.{i}.bn"), &mut blk.bn));
        }
        bns.push(("stem.bn".into(), &mut self.stem.bn));
        bns.push((
            "conv1.bn".into(),
            match &mut self.conv1 {
                ConvLayer::Geo(p) => &mut p.bn,
                ConvLayer::Baseline(p) => &mut p.bn,
            },
        ));
        bns.push(("mid.bn".into(), &mut self.mid.bn));
        bns.push((
            "conv2.bn".into(),
            match &mut self.conv2 {
                ConvLayer::Geo(p) => &mut p.bn,
                ConvLayer::Baseline(p) => &mut p.bn,
            },
        ));
        bns.push((
            "conv3.bn".into(),
            match &mut self.conv3 {
                ConvLayer::Geo(p) => &mut p.bn,
                ConvLayer::Baseline(p) => &mut p.bn,
            },
        ));
        bns.push(("final.bn".into(), &mut self.final_fc.bn));
        bns.push(("head.bn".into(), &mut self.head.bn));
        for (name, bn) in bns {
            f(&format!("{name}.running_mean"), &mut bn.running_mean);
            f(&format!("{name}.running_var"), &mut bn.running_var);
        }
    }
}

impl<T: Real> ModelGrads<T> {
    /// Same names and order as [`Model::visit`].
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a [T])) {
        for (i, g) in self.b1.iter().enumerate() {
            visit_mlp_grads(&format!("b1.{i}"), g, f);
        }
        visit_mlp_grads("stem", &self.stem, f);
        visit_conv_grads("conv1", &self.conv1, f);
        visit_mlp_grads("mid", &self.mid, f);
        visit_conv_grads("conv2", &self.conv2, f);
        visit_conv_grads("conv3", &self.conv3, f);
        visit_mlp_grads("final", &self.final_fc, f);
        visit_mlp_grads("head", &self.head, f);
        f("classify.w", self.classify.w.data());
        f("classify.b", &self.classify.b);
        if !self.view_weights.is_empty() {
            f("views.weights", &self.view_weights);
        }
    }
}
