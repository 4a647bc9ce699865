//! Feature encoder Φ, attentional keypoint detector Ψ and occupancy decoder Ω.
//!
//! Every network is written against a [`Graph`] through [`Builder`], so the
//! same code serves inference and training. The plain functions at the
//! bottom evaluate small graphs for callers that only want values.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, FeatureVolume, KeypointSet, SaliencyVolume};
use crate::graph::{Graph, NodeId};
use crate::linalg::{self, Vec3};
use crate::tensor::Tensor;

/// Which frame supplies the attention values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionVariant {
    /// `z_s = softmax(f_s f_tᵀ / √C₄) f_s`
    #[default]
    AsWritten,
    /// `z_s = softmax(f_s f_tᵀ / √C₄) f_t`
    Standard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub grid_res: usize,
    pub keypoints: usize,
    pub sigma: f64,
    /// Point MLP width (C₁).
    pub point_channels: usize,
    /// Base width of the volumetric encoder-decoders (C₂).
    pub unet_channels: usize,
    /// Output channels of Φ (C₃).
    pub feature_channels: usize,
    /// Attention feature width (C₄).
    pub attention_channels: usize,
    /// Width after fusing attended features (C₅).
    pub fused_channels: usize,
    /// Query encoding width (C_e), also the decoder hidden width.
    pub query_channels: usize,
    /// Points per frame (N₁).
    pub input_points: usize,
    /// Farthest-point samples for attention (N₂).
    pub sampled_points: usize,
    pub attention: AttentionVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid_res: 16,
            keypoints: 6,
            sigma: 0.15,
            point_channels: 32,
            unet_channels: 32,
            feature_channels: 32,
            attention_channels: 256,
            fused_channels: 32,
            query_channels: 32,
            input_points: 5000,
            sampled_points: 128,
            attention: AttentionVariant::AsWritten,
        }
    }
}

/// Grid resolutions the model accepts.
pub const GRID_RESOLUTIONS: [usize; 4] = [8, 16, 32, 64];

impl ModelConfig {
    /// Smallest useful model: 8³ grid, two keypoints, 64 points.
    pub fn micro() -> Self {
        Self {
            grid_res: 8,
            keypoints: 2,
            point_channels: 4,
            unet_channels: 2,
            feature_channels: 3,
            attention_channels: 4,
            fused_channels: 3,
            query_channels: 4,
            input_points: 64,
            sampled_points: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(msg));
        if !GRID_RESOLUTIONS.contains(&self.grid_res) {
            return bad(format!(
                "grid_res must be one of {GRID_RESOLUTIONS:?}, got {}",
                self.grid_res
            ));
        }
        if self.keypoints == 0 {
            return bad("keypoints must be at least 1".into());
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        let widths = [
            self.point_channels,
            self.unet_channels,
            self.feature_channels,
            self.attention_channels,
            self.fused_channels,
            self.query_channels,
            self.input_points,
            self.sampled_points,
        ];
        if widths.contains(&0) {
            return bad("channel and point counts must be positive".into());
        }
        if self.sampled_points > self.input_points {
            return bad(format!(
                "sampled_points {} exceeds input_points {}",
                self.sampled_points, self.input_points
            ));
        }
        Ok(())
    }

    /// Shape of every learned tensor, in a stable order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (c1, w, c3, c4, c5, ce, m) = (
            self.point_channels,
            self.unet_channels,
            self.feature_channels,
            self.attention_channels,
            self.fused_channels,
            self.query_channels,
            self.keypoints,
        );
        let mut out = Vec::new();
        let mut dense = |name: &str, i: usize, o: usize| {
            out.push((format!("{name}.w"), vec![i, o]));
            out.push((format!("{name}.b"), vec![o]));
        };
        dense("phi.mlp0", POINT_INPUT, c1);
        dense("phi.mlp1", c1, c1);
        dense("psi.mlp0", POINT_INPUT, c1);
        dense("psi.mlp1", c1, c1);
        dense("psi.proj", c1, c4);
        dense("psi.fuse", 2 * c4, c5);
        dense("omega.query", 3, ce);
        dense("omega.hidden0", ce + c3, ce);
        dense("omega.hidden1", ce, ce);
        dense("omega.out", ce, 1);
        unet_shapes(&mut out, "phi.unet", c1 + 1, w, c3);
        unet_shapes(&mut out, "psi.unet", c5 + c1 + 1, w, m);
        out
    }
}

/// Per-point input features: position plus offset from the voxel center in
/// voxel units.
const POINT_INPUT: usize = 6;

fn unet_shapes(
    out: &mut Vec<(String, Vec<usize>)>,
    prefix: &str,
    cin: usize,
    w: usize,
    cout: usize,
) {
    let mut conv = |name: &str, o: usize, i: usize, k: usize| {
        out.push((format!("{prefix}.{name}.w"), vec![o, i, k, k, k]));
        out.push((format!("{prefix}.{name}.b"), vec![o]));
    };
    conv("enc0", w, cin, 3);
    conv("enc1", 2 * w, w, 3);
    conv("dec0", w, 3 * w, 3);
    conv("out", cout, w, 1);
}

/// Named parameter tensors together with the configuration that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// He-normal weights, zero biases, seeded.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.parameter_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".b") {
                vec![0.0; n]
            } else {
                let fan_in: usize = if shape.len() == 2 {
                    shape[0]
                } else {
                    shape[1..].iter().product()
                };
                let std = libm::sqrt(2.0 / fan_in as f64);
                (0..n)
                    .map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect()
            };
            tensors.insert(name, Tensor::new(&shape, data)?);
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Checks that the tensors match the configuration exactly.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let shapes = self.config.parameter_shapes();
        if shapes.len() != self.tensors.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in shapes {
            match self.tensors.get(&name) {
                None => return Err(Error::ConfigMismatch(format!("missing tensor `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::ConfigMismatch(format!(
                        "`{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(t) if !t.is_finite() => {
                    return Err(Error::NonFinite(format!("tensor `{name}`")))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

/// A frame resampled to `N₁` points with everything the networks need that
/// does not depend on parameters.
#[derive(Debug, Clone)]
pub struct PreparedCloud {
    pub points: Vec<Vec3>,
    /// `[N₁, 6]` point-MLP input.
    pub features: Tensor,
    /// Grid cell of every point.
    pub cells: Vec<usize>,
    /// Farthest-point sample indices (`N₂`).
    pub samples: Vec<usize>,
    /// Index into `samples` of each point's nearest sample.
    pub nearest: Vec<usize>,
}

impl PreparedCloud {
    /// Takes the first `N₁` points, cycling through the cloud when it is
    /// shorter.
    pub fn new(cloud: &[Vec3], config: &ModelConfig) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let n = config.input_points;
        let res = config.grid_res;
        let points: Vec<Vec3> = (0..n).map(|i| cloud[i % cloud.len()]).collect();
        let mut feats = Vec::with_capacity(n * POINT_INPUT);
        let mut cells = Vec::with_capacity(n);
        for p in &points {
            let cell = geometry::cell_index(res, *p);
            let (ix, iy, iz) = (cell / (res * res), (cell / res) % res, cell % res);
            let center = [
                geometry::voxel_coord(res, ix),
                geometry::voxel_coord(res, iy),
                geometry::voxel_coord(res, iz),
            ];
            feats.extend_from_slice(p);
            feats.extend(linalg::scale(linalg::sub(*p, center), res as f64));
            cells.push(cell);
        }
        let samples = farthest_point_sample(&points, config.sampled_points);
        let nearest = points
            .iter()
            .map(|p| {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (j, &s) in samples.iter().enumerate() {
                    let d = linalg::dot(linalg::sub(*p, points[s]), linalg::sub(*p, points[s]));
                    if d < best_d {
                        best_d = d;
                        best = j;
                    }
                }
                best
            })
            .collect();
        Ok(Self {
            points,
            features: Tensor::new(&[n, POINT_INPUT], feats)?,
            cells,
            samples,
            nearest,
        })
    }
}

/// Deterministic farthest-point sampling starting from index 0; ties go to
/// the lowest index.
pub fn farthest_point_sample(points: &[Vec3], k: usize) -> Vec<usize> {
    let k = k.min(points.len());
    if k == 0 {
        return Vec::new();
    }
    let mut chosen = Vec::with_capacity(k);
    let mut dist = vec![f64::INFINITY; points.len()];
    let mut current = 0;
    for _ in 0..k {
        chosen.push(current);
        let c = points[current];
        let mut next = 0;
        let mut far = -1.0;
        for (i, p) in points.iter().enumerate() {
            let d = linalg::dot(linalg::sub(*p, c), linalg::sub(*p, c));
            if d < dist[i] {
                dist[i] = d;
            }
            if dist[i] > far {
                far = dist[i];
                next = i;
            }
        }
        current = next;
    }
    chosen
}

/// Adds the networks to a graph, creating each parameter leaf on first use.
pub struct Builder<'a> {
    pub graph: &'a mut Graph,
    config: &'a ModelConfig,
    shapes: BTreeMap<String, Vec<usize>>,
}

impl<'a> Builder<'a> {
    pub fn new(graph: &'a mut Graph, config: &'a ModelConfig) -> Self {
        Self {
            graph,
            config,
            shapes: config.parameter_shapes().into_iter().collect(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(id) = self.graph.leaf(name) {
            return Ok(id);
        }
        let shape = self
            .shapes
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))?;
        let shape = shape.clone();
        self.graph.param(name, &shape)
    }

    fn dense(&mut self, x: NodeId, name: &str, relu: bool) -> Result<NodeId> {
        let w = self.param(&format!("{name}.w"))?;
        let b = self.param(&format!("{name}.b"))?;
        let n = self.graph.shape(x)[0];
        let xw = self.graph.matmul(x, w)?;
        let bb = self.graph.broadcast(b, n)?;
        let y = self.graph.add(xw, bb)?;
        Ok(if relu { self.graph.relu(y) } else { y })
    }

    fn conv(&mut self, x: NodeId, name: &str, pad: usize, relu: bool) -> Result<NodeId> {
        let w = self.param(&format!("{name}.w"))?;
        let b = self.param(&format!("{name}.b"))?;
        let y = self.graph.conv3d(x, w, b, 1, pad)?;
        Ok(if relu { self.graph.relu(y) } else { y })
    }

    /// Two-level encoder-decoder with one skip connection.
    fn unet(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let e0 = self.conv(x, &format!("{prefix}.enc0"), 1, true)?;
        let pooled = self.graph.max_pool3d(e0, 2)?;
        let e1 = self.conv(pooled, &format!("{prefix}.enc1"), 1, true)?;
        let up = self.graph.upsample3d(e1, 2)?;
        let cat = self.graph.concat(&[up, e0], 0)?;
        let d0 = self.conv(cat, &format!("{prefix}.dec0"), 1, true)?;
        self.conv(d0, &format!("{prefix}.out"), 0, false)
    }

    fn point_mlp(&mut self, cloud: &PreparedCloud, prefix: &str) -> Result<NodeId> {
        let x = self.graph.constant(cloud.features.clone());
        let h = self.dense(x, &format!("{prefix}.mlp0"), true)?;
        self.dense(h, &format!("{prefix}.mlp1"), true)
    }

    /// Pools `[N₁, c]` point features into a grid, adding an occupancy channel.
    fn pool(&mut self, h: NodeId, cloud: &PreparedCloud) -> Result<NodeId> {
        let n = cloud.points.len();
        let ones = self.graph.constant(Tensor::full(&[n, 1], 1.0));
        let with_mask = self.graph.concat(&[h, ones], 1)?;
        self.graph
            .scatter_max(with_mask, cloud.cells.clone(), self.config.grid_res)
    }

    /// Scatter-pooled grid before the volumetric network of Φ:
    /// `[C₁ + 1, R, R, R]`, last channel is the occupancy mask.
    pub fn pooled_features(&mut self, cloud: &PreparedCloud) -> Result<NodeId> {
        let h = self.point_mlp(cloud, "phi")?;
        self.pool(h, cloud)
    }

    /// Φ: `[C₃, R, R, R]`.
    pub fn encode(&mut self, cloud: &PreparedCloud) -> Result<NodeId> {
        let pooled = self.pooled_features(cloud)?;
        self.unet(pooled, "phi.unet")
    }

    /// Ψ on one ordered pair: saliency logits `[m, R, R, R]` for both frames.
    pub fn saliency(&mut self, s: &PreparedCloud, t: &PreparedCloud) -> Result<(NodeId, NodeId)> {
        let hs = self.point_mlp(s, "psi")?;
        let ht = self.point_mlp(t, "psi")?;
        let gs = self.graph.gather(hs, s.samples.clone())?;
        let gt = self.graph.gather(ht, t.samples.clone())?;
        let fs = self.dense(gs, "psi.proj", false)?;
        let ft = self.dense(gt, "psi.proj", false)?;
        let (fs2, ft2) = cross_attention_nodes(self.graph, fs, ft, self.config.attention)?;
        let out_s = self.saliency_head(fs2, hs, s)?;
        let out_t = self.saliency_head(ft2, ht, t)?;
        Ok((out_s, out_t))
    }

    fn saliency_head(
        &mut self,
        attended: NodeId,
        point_feats: NodeId,
        cloud: &PreparedCloud,
    ) -> Result<NodeId> {
        let fused = self.dense(attended, "psi.fuse", true)?;
        let dense = self.graph.gather(fused, cloud.nearest.clone())?;
        let cat = self.graph.concat(&[dense, point_feats], 1)?;
        let grid = self.pool(cat, cloud)?;
        self.unet(grid, "psi.unet")
    }

    /// Spatial softmax expectation: `[m, R, R, R]` logits to `[m, 3]`.
    pub fn keypoints(&mut self, saliency: NodeId) -> Result<NodeId> {
        let res = self.config.grid_res;
        let m = self.graph.shape(saliency)[0];
        let flat = self.graph.reshape(saliency, &[m, res * res * res])?;
        let w = self.graph.softmax(flat);
        let centers = self
            .graph
            .constant(Tensor::from_points(&geometry::voxel_centers(res)));
        self.graph.matmul(w, centers)
    }

    /// `[R, R, R]` keypoint heatmap broadcast to `[C₃, R, R, R]`.
    fn heatmap(&mut self, keypoints: NodeId) -> Result<NodeId> {
        let h = self
            .graph
            .heatmap(keypoints, self.config.grid_res, self.config.sigma)?;
        self.graph.broadcast(h, self.config.feature_channels)
    }

    /// `Φ⁺ = (1 - H_s)(1 - H_t) Φ_s + H_t Φ_t`
    pub fn transport(
        &mut self,
        phi_s: NodeId,
        phi_t: NodeId,
        k_s: NodeId,
        k_t: NodeId,
    ) -> Result<NodeId> {
        let hs = self.heatmap(k_s)?;
        let ht = self.heatmap(k_t)?;
        let keep_s = self.graph.one_minus(hs);
        let keep_t = self.graph.one_minus(ht);
        let keep = self.graph.mul(keep_s, keep_t)?;
        let kept = self.graph.mul(keep, phi_s)?;
        let pasted = self.graph.mul(ht, phi_t)?;
        self.graph.add(kept, pasted)
    }

    /// Ω: occupancy probability `[Q]` of `[Q, 3]` query points.
    pub fn decode(&mut self, queries: NodeId, volume: NodeId) -> Result<NodeId> {
        let q = self.graph.shape(queries)[0];
        let qe = self.dense(queries, "omega.query", true)?;
        let local = self.graph.trilinear(volume, queries)?;
        let cat = self.graph.concat(&[qe, local], 1)?;
        let h0 = self.dense(cat, "omega.hidden0", true)?;
        let h1 = self.dense(h0, "omega.hidden1", true)?;
        let logit = self.dense(h1, "omega.out", false)?;
        let p = self.graph.sigmoid(logit);
        self.graph.reshape(p, &[q])
    }
}

/// Cross-attention mixing of two `[N₂, C₄]` feature sets; returns the
/// concatenations `[f, z]` (`[N₂, 2C₄]`).
pub fn cross_attention_nodes(
    g: &mut Graph,
    fs: NodeId,
    ft: NodeId,
    variant: AttentionVariant,
) -> Result<(NodeId, NodeId)> {
    let c4 = g.shape(fs)[1];
    let scale = 1.0 / libm::sqrt(c4 as f64);
    let ft_t = g.transpose(ft)?;
    let fs_t = g.transpose(fs)?;
    let logits_s = g.matmul(fs, ft_t)?;
    let logits_t = g.matmul(ft, fs_t)?;
    let logits_s = g.scale(logits_s, scale);
    let logits_t = g.scale(logits_t, scale);
    let a_s = g.softmax(logits_s);
    let a_t = g.softmax(logits_t);
    let (vs, vt) = match variant {
        AttentionVariant::AsWritten => (fs, ft),
        AttentionVariant::Standard => (ft, fs),
    };
    let zs = g.matmul(a_s, vs)?;
    let zt = g.matmul(a_t, vt)?;
    Ok((g.concat(&[fs, zs], 1)?, g.concat(&[ft, zt], 1)?))
}

fn node_outputs(g: &Graph, params: &ModelParams, nodes: &[NodeId]) -> Result<Vec<Tensor>> {
    let values = g.evaluate(&params.tensors)?;
    Ok(nodes.iter().map(|&n| values.get(n).clone()).collect())
}

fn prepare(cloud: &[Vec3], params: &ModelParams) -> Result<PreparedCloud> {
    PreparedCloud::new(cloud, &params.config)
}

fn feature_volume(t: Tensor) -> FeatureVolume {
    let (channels, res) = (t.shape()[0], t.shape()[1]);
    FeatureVolume {
        channels,
        res,
        data: t.into_data(),
    }
}

fn saliency_volume(t: Tensor) -> SaliencyVolume {
    let (channels, res) = (t.shape()[0], t.shape()[1]);
    SaliencyVolume {
        channels,
        res,
        logits: t.into_data(),
    }
}

/// Φ(o) for one normalized cloud.
pub fn encode_features(cloud: &[Vec3], params: &ModelParams) -> Result<FeatureVolume> {
    let prepared = prepare(cloud, params)?;
    let mut g = Graph::new();
    let mut b = Builder::new(&mut g, &params.config);
    let out = b.encode(&prepared)?;
    Ok(feature_volume(node_outputs(&g, params, &[out])?.remove(0)))
}

/// Parameter-free attention mixing of two `[N₂, C₄]` feature matrices.
pub fn cross_attention(
    fs: &Tensor,
    ft: &Tensor,
    variant: AttentionVariant,
) -> Result<(Tensor, Tensor)> {
    if fs.shape() != ft.shape() || fs.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "cross_attention: {:?} vs {:?}",
            fs.shape(),
            ft.shape()
        )));
    }
    let mut g = Graph::new();
    let a = g.constant(fs.clone());
    let b = g.constant(ft.clone());
    let (x, y) = cross_attention_nodes(&mut g, a, b, variant)?;
    let values = g.evaluate(&BTreeMap::<String, Tensor>::new())?;
    Ok((values.get(x).clone(), values.get(y).clone()))
}

/// Ψ saliency volumes for an ordered pair of clouds in one normalized frame.
pub fn detect_keypoints(
    cloud_s: &[Vec3],
    cloud_t: &[Vec3],
    params: &ModelParams,
) -> Result<(SaliencyVolume, SaliencyVolume)> {
    let (s, t) = (prepare(cloud_s, params)?, prepare(cloud_t, params)?);
    let mut g = Graph::new();
    let mut b = Builder::new(&mut g, &params.config);
    let (ss, st) = b.saliency(&s, &t)?;
    let mut out = node_outputs(&g, params, &[ss, st])?;
    let t_vol = saliency_volume(out.pop().unwrap());
    Ok((saliency_volume(out.pop().unwrap()), t_vol))
}

/// Keypoints of both frames of a pair.
pub fn pair_keypoints(
    cloud_s: &[Vec3],
    cloud_t: &[Vec3],
    params: &ModelParams,
) -> Result<(KeypointSet, KeypointSet)> {
    let (ss, st) = detect_keypoints(cloud_s, cloud_t, params)?;
    Ok((
        geometry::marginalize_keypoints(&ss),
        geometry::marginalize_keypoints(&st),
    ))
}

/// Ω occupancy probabilities of `queries` against a feature volume.
pub fn decode_occupancy(
    queries: &[Vec3],
    volume: &FeatureVolume,
    params: &ModelParams,
) -> Result<Vec<f64>> {
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    let r = volume.res;
    let mut g = Graph::new();
    let q = g.constant(Tensor::from_points(queries));
    let v = g.constant(Tensor::new(
        &[volume.channels, r, r, r],
        volume.data.clone(),
    )?);
    let mut b = Builder::new(&mut g, &params.config);
    let p = b.decode(q, v)?;
    Ok(node_outputs(&g, params, &[p])?.remove(0).into_data())
}

#[derive(Debug, Clone)]
pub struct TransporterOutput {
    pub k_s: KeypointSet,
    pub k_t: KeypointSet,
    /// Target occupancy predicted from the transported volume.
    pub prob_t: Vec<f64>,
    /// Source occupancy predicted from `Φ(o_s)`.
    pub prob_s: Vec<f64>,
}

/// Graph handles of one transporter pass.
#[derive(Debug, Clone, Copy)]
pub struct TransporterNodes {
    pub k_s: NodeId,
    pub k_t: NodeId,
    pub phi_s: NodeId,
    pub phi_t: NodeId,
    pub transported: NodeId,
    pub prob_t: NodeId,
    pub prob_s: NodeId,
}

impl Builder<'_> {
    /// Full pass: features, keypoints, transport and both occupancy heads.
    /// With `detach_keypoints` the transport treats keypoints as constants.
    pub fn transporter(
        &mut self,
        s: &PreparedCloud,
        t: &PreparedCloud,
        queries_t: &[Vec3],
        queries_s: &[Vec3],
        detach_keypoints: bool,
    ) -> Result<TransporterNodes> {
        let phi_s = self.encode(s)?;
        let phi_t = self.encode(t)?;
        let (sal_s, sal_t) = self.saliency(s, t)?;
        let k_s = self.keypoints(sal_s)?;
        let k_t = self.keypoints(sal_t)?;
        let (hk_s, hk_t) = if detach_keypoints {
            (self.graph.stop_gradient(k_s), self.graph.stop_gradient(k_t))
        } else {
            (k_s, k_t)
        };
        let transported = self.transport(phi_s, phi_t, hk_s, hk_t)?;
        let qt = self.graph.constant(Tensor::from_points(queries_t));
        let qs = self.graph.constant(Tensor::from_points(queries_s));
        let prob_t = self.decode(qt, transported)?;
        let prob_s = self.decode(qs, phi_s)?;
        Ok(TransporterNodes {
            k_s,
            k_t,
            phi_s,
            phi_t,
            transported,
            prob_t,
            prob_s,
        })
    }
}

/// Runs the full transporter on a pair of clouds.
pub fn forward_transporter(
    cloud_s: &[Vec3],
    cloud_t: &[Vec3],
    queries_t: &[Vec3],
    queries_s: &[Vec3],
    params: &ModelParams,
) -> Result<TransporterOutput> {
    if queries_t.is_empty() || queries_s.is_empty() {
        return Err(Error::Invalid(
            "transporter needs at least one query per frame".to_string(),
        ));
    }
    let (s, t) = (prepare(cloud_s, params)?, prepare(cloud_t, params)?);
    let mut g = Graph::new();
    let mut b = Builder::new(&mut g, &params.config);
    let n = b.transporter(&s, &t, queries_t, queries_s, false)?;
    let out = node_outputs(&g, params, &[n.k_s, n.k_t, n.prob_t, n.prob_s])?;
    Ok(TransporterOutput {
        k_s: KeypointSet(out[0].to_points()),
        k_t: KeypointSet(out[1].to_points()),
        prob_t: out[2].data().to_vec(),
        prob_s: out[3].data().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_config() -> ModelConfig {
        ModelConfig::micro()
    }

    fn cloud(seed: u64, n: usize) -> Vec<Vec3> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                [
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.4..0.4),
                ]
            })
            .collect()
    }

    #[test]
    fn default_config_matches_table() {
        let c = ModelConfig::default();
        assert_eq!(
            (
                c.input_points,
                c.sampled_points,
                c.attention_channels,
                c.keypoints
            ),
            (5000, 128, 256, 6)
        );
        assert_eq!(c.sigma, 0.15);
    }

    #[test]
    fn init_is_seeded_and_complete() {
        let c = micro_config();
        let a = ModelParams::init(&c, 3).unwrap();
        assert_eq!(a, ModelParams::init(&c, 3).unwrap());
        assert_ne!(a, ModelParams::init(&c, 4).unwrap());
        a.validate().unwrap();
    }

    #[test]
    fn fps_starts_at_zero_and_spreads() {
        let pts = [
            [0.0, 0.0, 0.0],
            [0.1, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.5, 0.0, 0.0],
        ];
        assert_eq!(farthest_point_sample(&pts, 3), vec![0, 2, 3]);
    }

    #[test]
    fn swapped_inputs_swap_saliency() {
        let c = micro_config();
        let p = ModelParams::init(&c, 1).unwrap();
        let (a, b) = (cloud(1, 64), cloud(2, 64));
        let (sa, sb) = detect_keypoints(&a, &b, &p).unwrap();
        let (tb, ta) = detect_keypoints(&b, &a, &p).unwrap();
        assert_eq!(sa, ta);
        assert_eq!(sb, tb);
    }

    #[test]
    fn keypoints_stay_in_cube_and_have_m_channels() {
        let c = micro_config();
        let p = ModelParams::init(&c, 1).unwrap();
        let (a, b) = (cloud(5, 64), cloud(6, 64));
        let out = forward_transporter(&a, &b, &b[..10], &a[..10], &p).unwrap();
        assert_eq!(out.k_s.len(), 2);
        for k in out.k_s.points().iter().chain(out.k_t.points()) {
            assert!(k.iter().all(|v| v.abs() <= 0.5));
        }
        assert!(out
            .prob_t
            .iter()
            .chain(&out.prob_s)
            .all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn empty_cloud_is_rejected() {
        let p = ModelParams::init(&micro_config(), 1).unwrap();
        assert!(matches!(encode_features(&[], &p), Err(Error::EmptyCloud)));
    }
}
