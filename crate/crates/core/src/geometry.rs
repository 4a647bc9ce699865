//! Geometric kernels shared by the model, the losses, the metrics and the
//! manipulation policy.
//!
//! Grids cover the normalized cube `[-0.5, 0.5]³` with `res` voxels per axis.
//! Volumes are stored channel-major as `[channels, x, y, z]`, so the flat
//! voxel index of `(ix, iy, iz)` is `(ix * res + iy) * res + iz`.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat3, Svd3, Vec3};

/// Maps world points into the shared normalized cube of a pair (or triplet)
/// of frames: `p' = (p - center) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedFrame {
    pub center: Vec3,
    pub scale: f64,
}

impl NormalizedFrame {
    /// Frame from the union bounding box of `clouds`. `margin >= 1` enlarges
    /// the cube so that jittered points stay inside.
    pub fn from_clouds<'a>(
        clouds: impl IntoIterator<Item = &'a [Vec3]>,
        margin: f64,
    ) -> Result<Self> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        let mut any = false;
        for cloud in clouds {
            for p in cloud {
                any = true;
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
        }
        if !any {
            return Err(Error::EmptyCloud);
        }
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let scale = if extent > 0.0 {
            extent * margin.max(1.0)
        } else {
            1.0
        };
        let center = linalg::scale(linalg::add(lo, hi), 0.5);
        Ok(Self { center, scale })
    }

    pub fn to_normalized(&self, p: Vec3) -> Vec3 {
        linalg::scale(linalg::sub(p, self.center), 1.0 / self.scale)
    }

    pub fn to_world(&self, p: Vec3) -> Vec3 {
        linalg::add(linalg::scale(p, self.scale), self.center)
    }

    /// Expresses a world-frame rigid motion in normalized coordinates.
    pub fn transform_to_normalized(&self, t: &RigidTransform) -> RigidTransform {
        let rc = linalg::mat_vec(&t.r, self.center);
        let shift = linalg::sub(linalg::add(rc, t.t), self.center);
        RigidTransform {
            r: t.r,
            t: linalg::scale(shift, 1.0 / self.scale),
        }
    }
}

/// Coordinate of voxel `i` along one axis.
#[inline]
pub fn voxel_coord(res: usize, i: usize) -> f64 {
    -0.5 + (i as f64 + 0.5) / res as f64
}

/// All voxel centers in flat-index order.
pub fn voxel_centers(res: usize) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(res * res * res);
    for ix in 0..res {
        for iy in 0..res {
            for iz in 0..res {
                out.push([
                    voxel_coord(res, ix),
                    voxel_coord(res, iy),
                    voxel_coord(res, iz),
                ]);
            }
        }
    }
    out
}

/// Flat index of the voxel containing `p`; points outside the cube are clamped.
pub fn cell_index(res: usize, p: Vec3) -> usize {
    let axis = |v: f64| {
        let i = libm::floor((v + 0.5) * res as f64);
        if i.is_nan() || i < 0.0 {
            0
        } else {
            (i as usize).min(res - 1)
        }
    };
    (axis(p[0]) * res + axis(p[1])) * res + axis(p[2])
}

/// `m` ordered keypoints; channel `i` of one frame corresponds to channel `i`
/// of the other.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet(pub Vec<Vec3>);

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.0
    }

    pub fn transformed(&self, t: &RigidTransform) -> KeypointSet {
        KeypointSet(self.0.iter().map(|&p| t.apply(p)).collect())
    }
}

/// Pre-softmax keypoint logits, `[m, res, res, res]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyVolume {
    pub channels: usize,
    pub res: usize,
    pub logits: Vec<f64>,
}

/// Heatmap weights in `[0, 1]`, `[res, res, res]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapVolume {
    pub res: usize,
    pub weights: Vec<f64>,
}

/// Feature grid, `[channels, res, res, res]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub channels: usize,
    pub res: usize,
    pub data: Vec<f64>,
}

/// Per channel: softmax over every voxel, then the expected voxel-center
/// coordinate under that distribution.
pub fn marginalize_keypoints(s: &SaliencyVolume) -> KeypointSet {
    let centers = voxel_centers(s.res);
    let v = centers.len();
    let mut out = Vec::with_capacity(s.channels);
    for ch in s.logits.chunks_exact(v).take(s.channels) {
        let max = ch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let mut acc = [0.0; 3];
        for (&l, c) in ch.iter().zip(&centers) {
            let w = libm::exp(l - max);
            total += w;
            acc = linalg::add(acc, linalg::scale(*c, w));
        }
        out.push(linalg::scale(acc, 1.0 / total));
    }
    KeypointSet(out)
}

/// `H(v) = 1 - Π_i (1 - exp(-‖c_v - k_i‖² / (2σ²)))` on raw keypoint
/// coordinates (`m * 3` values).
pub(crate) fn heatmap_forward(keypoints: &[f64], sigma: f64, res: usize) -> Vec<f64> {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut out = vec![0.0; res * res * res];
    let mut idx = 0;
    for ix in 0..res {
        let x = voxel_coord(res, ix);
        for iy in 0..res {
            let y = voxel_coord(res, iy);
            for iz in 0..res {
                let z = voxel_coord(res, iz);
                let mut keep = 1.0;
                for k in keypoints.chunks_exact(3) {
                    let d2 =
                        (x - k[0]) * (x - k[0]) + (y - k[1]) * (y - k[1]) + (z - k[2]) * (z - k[2]);
                    keep *= 1.0 - libm::exp(-d2 * inv);
                }
                out[idx] = 1.0 - keep;
                idx += 1;
            }
        }
    }
    out
}

/// Gradient of [`heatmap_forward`] with respect to the keypoints.
pub(crate) fn heatmap_backward(
    keypoints: &[f64],
    sigma: f64,
    res: usize,
    grad: &[f64],
) -> Vec<f64> {
    let m = keypoints.len() / 3;
    let s2 = sigma * sigma;
    let inv = 1.0 / (2.0 * s2);
    let mut gk = vec![0.0; keypoints.len()];
    let mut g = vec![0.0; m];
    let mut prefix = vec![0.0; m + 1];
    let mut suffix = vec![0.0; m + 1];
    let mut idx = 0;
    for ix in 0..res {
        let x = voxel_coord(res, ix);
        for iy in 0..res {
            let y = voxel_coord(res, iy);
            for iz in 0..res {
                let z = voxel_coord(res, iz);
                let up = grad[idx];
                idx += 1;
                if up == 0.0 {
                    continue;
                }
                for (i, k) in keypoints.chunks_exact(3).enumerate() {
                    let d2 =
                        (x - k[0]) * (x - k[0]) + (y - k[1]) * (y - k[1]) + (z - k[2]) * (z - k[2]);
                    g[i] = libm::exp(-d2 * inv);
                }
                prefix[0] = 1.0;
                for i in 0..m {
                    prefix[i + 1] = prefix[i] * (1.0 - g[i]);
                }
                suffix[m] = 1.0;
                for i in (0..m).rev() {
                    suffix[i] = suffix[i + 1] * (1.0 - g[i]);
                }
                for i in 0..m {
                    // dH/dG_i = Π_{j≠i} (1 - G_j); dG_i/dk_i = G_i (c - k_i) / σ²
                    let coeff = up * prefix[i] * suffix[i + 1] * g[i] / s2;
                    let k = &keypoints[3 * i..3 * i + 3];
                    gk[3 * i] += coeff * (x - k[0]);
                    gk[3 * i + 1] += coeff * (y - k[1]);
                    gk[3 * i + 2] += coeff * (z - k[2]);
                }
            }
        }
    }
    gk
}

pub fn gaussian_heatmap(k: &KeypointSet, sigma: f64, res: usize) -> Result<HeatmapVolume> {
    if !(sigma > 0.0) {
        return Err(Error::Invalid(alloc::format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let flat: Vec<f64> = k.0.iter().flat_map(|p| p.iter().copied()).collect();
    Ok(HeatmapVolume {
        res,
        weights: heatmap_forward(&flat, sigma, res),
    })
}

/// `Φ⁺ = (1 - H_s)(1 - H_t) Φ_s + H_t Φ_t`, voxel by voxel, broadcast over channels.
pub fn transport_features(
    phi_s: &FeatureVolume,
    phi_t: &FeatureVolume,
    h_s: &HeatmapVolume,
    h_t: &HeatmapVolume,
) -> Result<FeatureVolume> {
    let v = phi_s.res * phi_s.res * phi_s.res;
    if phi_s.channels != phi_t.channels
        || phi_s.res != phi_t.res
        || h_s.res != phi_s.res
        || h_t.res != phi_s.res
        || phi_s.data.len() != phi_s.channels * v
        || phi_t.data.len() != phi_t.channels * v
    {
        return Err(Error::Shape(
            "transport_features: volume and heatmap shapes differ".into(),
        ));
    }
    let mut data = Vec::with_capacity(phi_s.data.len());
    for c in 0..phi_s.channels {
        for i in 0..v {
            let (hs, ht) = (h_s.weights[i], h_t.weights[i]);
            data.push((1.0 - hs) * (1.0 - ht) * phi_s.data[c * v + i] + ht * phi_t.data[c * v + i]);
        }
    }
    Ok(FeatureVolume {
        channels: phi_s.channels,
        res: phi_s.res,
        data,
    })
}

/// Continuous grid coordinate along one axis, clamped to the voxel-center
/// range; returns `(base index, fraction, inside)` where `inside` is false
/// when clamping was active.
#[inline]
fn trilinear_axis(p: f64, res: usize) -> (usize, f64, bool) {
    let u = (p + 0.5) * res as f64 - 0.5;
    let hi = (res - 1) as f64;
    let (u, inside) = if u < 0.0 {
        (0.0, false)
    } else if u > hi {
        (hi, false)
    } else {
        (u, true)
    };
    if res == 1 {
        return (0, 0.0, false);
    }
    let i0 = (libm::floor(u) as usize).min(res - 2);
    (i0, u - i0 as f64, inside)
}

/// Trilinear blend of the 8 surrounding voxel centers for each point.
/// `volume` is `[channels, res³]`, `points` is `n * 3`; returns `[n, channels]`.
pub(crate) fn trilinear_forward(
    volume: &[f64],
    channels: usize,
    res: usize,
    points: &[f64],
) -> Vec<f64> {
    let v = res * res * res;
    let n = points.len() / 3;
    let mut out = vec![0.0; n * channels];
    for (pi, p) in points.chunks_exact(3).enumerate() {
        let (x0, fx, _) = trilinear_axis(p[0], res);
        let (y0, fy, _) = trilinear_axis(p[1], res);
        let (z0, fz, _) = trilinear_axis(p[2], res);
        let corners = trilinear_corners(res, x0, y0, z0, fx, fy, fz);
        let row = &mut out[pi * channels..(pi + 1) * channels];
        for (c, slot) in row.iter_mut().enumerate() {
            let base = &volume[c * v..(c + 1) * v];
            *slot = corners.iter().map(|&(idx, w)| w * base[idx]).sum();
        }
    }
    out
}

fn trilinear_corners(
    res: usize,
    x0: usize,
    y0: usize,
    z0: usize,
    fx: f64,
    fy: f64,
    fz: f64,
) -> [(usize, f64); 8] {
    let step = if res > 1 { 1 } else { 0 };
    let mut out = [(0usize, 0.0f64); 8];
    let mut k = 0;
    for (dx, wx) in [(0, 1.0 - fx), (step, fx)] {
        for (dy, wy) in [(0, 1.0 - fy), (step, fy)] {
            for (dz, wz) in [(0, 1.0 - fz), (step, fz)] {
                out[k] = ((((x0 + dx) * res) + y0 + dy) * res + z0 + dz, wx * wy * wz);
                k += 1;
            }
        }
    }
    out
}

/// Gradients of [`trilinear_forward`] with respect to the volume and the points.
pub(crate) fn trilinear_backward(
    volume: &[f64],
    channels: usize,
    res: usize,
    points: &[f64],
    grad: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let v = res * res * res;
    let mut gvol = vec![0.0; volume.len()];
    let mut gpts = vec![0.0; points.len()];
    let r = res as f64;
    for (pi, p) in points.chunks_exact(3).enumerate() {
        let (x0, fx, ix) = trilinear_axis(p[0], res);
        let (y0, fy, iy) = trilinear_axis(p[1], res);
        let (z0, fz, iz) = trilinear_axis(p[2], res);
        let corners = trilinear_corners(res, x0, y0, z0, fx, fy, fz);
        let g = &grad[pi * channels..(pi + 1) * channels];
        for (c, &gc) in g.iter().enumerate() {
            if gc == 0.0 {
                continue;
            }
            for &(idx, w) in &corners {
                gvol[c * v + idx] += w * gc;
            }
        }
        if res == 1 {
            continue;
        }
        // d(value)/d(fraction) per axis, then chain through u = (p + 0.5) r - 0.5
        let mut dfx = 0.0;
        let mut dfy = 0.0;
        let mut dfz = 0.0;
        for (c, &gc) in g.iter().enumerate() {
            if gc == 0.0 {
                continue;
            }
            let base = &volume[c * v..(c + 1) * v];
            let at = |dx: usize, dy: usize, dz: usize| {
                base[(((x0 + dx) * res) + y0 + dy) * res + z0 + dz]
            };
            let c000 = at(0, 0, 0);
            let c001 = at(0, 0, 1);
            let c010 = at(0, 1, 0);
            let c011 = at(0, 1, 1);
            let c100 = at(1, 0, 0);
            let c101 = at(1, 0, 1);
            let c110 = at(1, 1, 0);
            let c111 = at(1, 1, 1);
            let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
            // along x
            let x_lo = lerp(lerp(c000, c001, fz), lerp(c010, c011, fz), fy);
            let x_hi = lerp(lerp(c100, c101, fz), lerp(c110, c111, fz), fy);
            dfx += gc * (x_hi - x_lo);
            let y_lo = lerp(lerp(c000, c001, fz), lerp(c100, c101, fz), fx);
            let y_hi = lerp(lerp(c010, c011, fz), lerp(c110, c111, fz), fx);
            dfy += gc * (y_hi - y_lo);
            let z_lo = lerp(lerp(c000, c010, fy), lerp(c100, c110, fy), fx);
            let z_hi = lerp(lerp(c001, c011, fy), lerp(c101, c111, fy), fx);
            dfz += gc * (z_hi - z_lo);
        }
        if ix {
            gpts[3 * pi] += dfx * r;
        }
        if iy {
            gpts[3 * pi + 1] += dfy * r;
        }
        if iz {
            gpts[3 * pi + 2] += dfz * r;
        }
    }
    (gvol, gpts)
}

/// Feature vector of `vol` at each query point (clamped into the cube).
pub fn trilinear_query(vol: &FeatureVolume, points: &[Vec3]) -> Vec<Vec<f64>> {
    let flat: Vec<f64> = points.iter().flat_map(|p| p.iter().copied()).collect();
    trilinear_forward(&vol.data, vol.channels, vol.res, &flat)
        .chunks_exact(vol.channels)
        .map(|c| c.to_vec())
        .collect()
}

/// Rotation plus translation acting as `x ↦ r·x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub r: Mat3,
    pub t: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            r: linalg::IDENTITY,
            t: [0.0; 3],
        }
    }

    pub fn translation(t: Vec3) -> Self {
        Self {
            r: linalg::IDENTITY,
            t,
        }
    }

    /// Rotation about the line through `origin` with direction `axis`.
    pub fn about_line(origin: Vec3, axis: Vec3, angle: f64) -> Self {
        let r = linalg::rotation_about(axis, angle);
        let t = linalg::sub(origin, linalg::mat_vec(&r, origin));
        Self { r, t }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        linalg::add(linalg::mat_vec(&self.r, p), self.t)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            r: linalg::mat_mul(&self.r, &other.r),
            t: self.apply(other.t),
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = linalg::transpose(&self.r);
        RigidTransform {
            r: rt,
            t: linalg::scale(linalg::mat_vec(&rt, self.t), -1.0),
        }
    }

    /// Deviation of `r` from a proper rotation: `max(‖rᵀr - I‖_F, |det r - 1|)`.
    pub fn orthonormality_error(&self) -> f64 {
        let rtr = linalg::mat_mul(&linalg::transpose(&self.r), &self.r);
        linalg::frobenius(&linalg::mat_sub(&rtr, &linalg::IDENTITY))
            .max(libm::fabs(linalg::det(&self.r) - 1.0))
    }
}

/// Result of a least-squares rigid fit.
#[derive(Debug, Clone, Copy)]
pub struct RigidFit {
    pub transform: RigidTransform,
    /// Cross-covariance had rank < 2; `transform` is identity rotation plus
    /// centroid translation.
    pub degenerate: bool,
    /// Sum of squared residuals `Σ‖dst_i - (R src_i + t)‖²`.
    pub residual: f64,
    svd: Svd3,
    reflection: f64,
}

/// Closed-form least-squares rigid transform mapping `src` onto `dst`
/// (Kabsch: centered cross-covariance, SVD, determinant sign correction).
pub fn fit_rigid(src: &[Vec3], dst: &[Vec3]) -> RigidFit {
    debug_assert_eq!(src.len(), dst.len());
    let cs = linalg::centroid(src);
    let cd = linalg::centroid(dst);
    let mut h = [[0.0; 3]; 3];
    for (p, q) in src.iter().zip(dst) {
        let p = linalg::sub(*p, cs);
        let q = linalg::sub(*q, cd);
        for i in 0..3 {
            for j in 0..3 {
                h[i][j] += p[i] * q[j];
            }
        }
    }
    let svd = linalg::svd3(&h);
    let degenerate = !(svd.sigma[0] > 1e-300) || svd.sigma[1] <= 1e-10 * svd.sigma[0];
    let vut = linalg::mat_mul(&svd.v, &linalg::transpose(&svd.u));
    let reflection = if linalg::det(&vut) < 0.0 { -1.0 } else { 1.0 };
    let r = if degenerate {
        linalg::IDENTITY
    } else {
        let mut vd = svd.v;
        for row in vd.iter_mut() {
            row[2] *= reflection;
        }
        linalg::mat_mul(&vd, &linalg::transpose(&svd.u))
    };
    let t = linalg::sub(cd, linalg::mat_vec(&r, cs));
    let transform = RigidTransform { r, t };
    let residual = src
        .iter()
        .zip(dst)
        .map(|(p, q)| {
            let d = linalg::sub(*q, transform.apply(*p));
            linalg::dot(d, d)
        })
        .sum();
    RigidFit {
        transform,
        degenerate,
        residual,
        svd,
        reflection,
    }
}

/// Smallest pairwise eigenvalue sum below which rotation gradients are stopped.
pub const ROTATION_GRADIENT_GAP: f64 = 1e-6;

/// Vector-Jacobian product of the fitted rotation with respect to the two
/// point sets. Returns `None` (gradient stopped) for degenerate fits or when
/// the singular-value gap is below [`ROTATION_GRADIENT_GAP`].
pub fn rigid_rotation_vjp(
    src: &[Vec3],
    dst: &[Vec3],
    fit: &RigidFit,
    grad_r: &Mat3,
) -> Option<(Vec<Vec3>, Vec<Vec3>)> {
    if fit.degenerate {
        return None;
    }
    let r = &fit.transform.r;
    let u = &fit.svd.u;
    let lambda = [
        fit.svd.sigma[0],
        fit.svd.sigma[1],
        fit.reflection * fit.svd.sigma[2],
    ];
    // Rᵀ H' = U diag(λ) Uᵀ is symmetric at the optimum; differentiating that
    // condition gives dR = R Ω with (Uᵀ Ω U)_ij (λ_i + λ_j) = (Uᵀ M U)_ij.
    let a = linalg::mat_mul(&linalg::transpose(r), grad_r);
    let at = linalg::mat_mul(&linalg::mat_mul(&linalg::transpose(u), &a), u);
    let mut b = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            if i == j {
                continue;
            }
            let gap = lambda[i] + lambda[j];
            if gap.abs() < ROTATION_GRADIENT_GAP {
                return None;
            }
            b[i][j] = at[i][j] / gap;
        }
    }
    let c = linalg::mat_mul(&linalg::mat_mul(u, &b), &linalg::transpose(u));
    let skew = linalg::mat_sub(&c, &linalg::transpose(&c));
    // gradient with respect to H' = Σ q_i p_iᵀ (q: centered dst, p: centered src)
    let gh = linalg::mat_mul(r, &skew);
    let cs = linalg::centroid(src);
    let cd = linalg::centroid(dst);
    let ghp_t = linalg::transpose(&gh);
    let gsrc = dst
        .iter()
        .map(|q| linalg::mat_vec(&ghp_t, linalg::sub(*q, cd)))
        .collect();
    let gdst = src
        .iter()
        .map(|p| linalg::mat_vec(&gh, linalg::sub(*p, cs)))
        .collect();
    Some((gsrc, gdst))
}

/// Unit rotation axis and angle in `[0, π]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisAngle {
    pub axis: Vec3,
    pub angle: f64,
}

/// Below this angle the axis is reported as `(0, 0, 1)` and the angle as 0.
pub const SMALL_ANGLE: f64 = 1e-6;

fn skew_vector(r: &Mat3) -> Vec3 {
    [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]]
}

/// Rodrigues decomposition of a rotation matrix.
pub fn axis_angle(r: &Mat3) -> AxisAngle {
    let v = skew_vector(r);
    let sin2 = linalg::norm(v); // 2 sin θ
    let cos = (linalg::trace(r) - 1.0) * 0.5;
    let angle = libm::atan2(sin2 * 0.5, cos);
    if angle < SMALL_ANGLE {
        return AxisAngle {
            axis: [0.0, 0.0, 1.0],
            angle: 0.0,
        };
    }
    if sin2 > 2e-3 || cos > 0.0 {
        return AxisAngle {
            axis: linalg::scale(v, 1.0 / sin2),
            angle,
        };
    }
    // near π: (R + Rᵀ)/2 - cos θ·I = (1 - cos θ) μ μᵀ
    let mut b = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            b[i][j] = 0.5 * (r[i][j] + r[j][i]) - if i == j { cos } else { 0.0 };
        }
    }
    let k = (0..3)
        .max_by(|&i, &j| {
            b[i][i]
                .partial_cmp(&b[j][j])
                .unwrap_or(core::cmp::Ordering::Equal)
        })
        .unwrap_or(0);
    let mut axis = linalg::normalize([b[0][k], b[1][k], b[2][k]]).unwrap_or([0.0, 0.0, 1.0]);
    let flip = if linalg::dot(v, v) > 0.0 {
        linalg::dot(axis, v) < 0.0
    } else {
        axis[k] < 0.0
    };
    if flip {
        axis = linalg::scale(axis, -1.0);
    }
    AxisAngle { axis, angle }
}

pub fn rotation_from_axis_angle(aa: &AxisAngle) -> Mat3 {
    linalg::rotation_about(aa.axis, aa.angle)
}

/// Vector-Jacobian product of the axis extracted by [`axis_angle`].
/// Zero where the axis is a convention (tiny angles) or numerically
/// unstable (angles within reach of π).
pub(crate) fn rotation_axis_vjp(r: &Mat3, grad_axis: Vec3) -> Mat3 {
    let v = skew_vector(r);
    let n = linalg::norm(v);
    let mut out = [[0.0; 3]; 3];
    if n < 1e-6 {
        return out;
    }
    let aa = axis_angle(r);
    let cos = (linalg::trace(r) - 1.0) * 0.5;
    if aa.angle < SMALL_ANGLE || (n <= 2e-3 && cos <= 0.0) {
        return out;
    }
    let mu = linalg::scale(v, 1.0 / n);
    let sign = if linalg::dot(mu, aa.axis) < 0.0 {
        -1.0
    } else {
        1.0
    };
    // d(v/|v|) = (I - μμᵀ) dv / |v|
    let proj = linalg::dot(mu, grad_axis);
    let gv = linalg::scale(linalg::sub(grad_axis, linalg::scale(mu, proj)), sign / n);
    out[2][1] += gv[0];
    out[1][2] -= gv[0];
    out[0][2] += gv[1];
    out[2][0] -= gv[1];
    out[1][0] += gv[2];
    out[0][1] -= gv[2];
    out
}

/// Per-keypoint displacement `k_g,i - k_c,i`.
pub fn keypoint_flow(k_c: &KeypointSet, k_g: &KeypointSet) -> Result<Vec<Vec3>> {
    if k_c.len() != k_g.len() {
        return Err(Error::Shape(alloc::format!(
            "keypoint counts differ: {} vs {}",
            k_c.len(),
            k_g.len()
        )));
    }
    Ok(k_c
        .0
        .iter()
        .zip(&k_g.0)
        .map(|(c, g)| linalg::sub(*g, *c))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn delta_logit_marginalizes_to_voxel_center() {
        let res = 4;
        let mut logits = vec![0.0; 64];
        logits[(2 * res + 1) * res + 3] = 50.0;
        let k = marginalize_keypoints(&SaliencyVolume {
            channels: 1,
            res,
            logits,
        });
        let expect = [
            voxel_coord(res, 2),
            voxel_coord(res, 1),
            voxel_coord(res, 3),
        ];
        assert!(linalg::dist(k.0[0], expect) < 1e-6);
    }

    #[test]
    fn constant_logits_marginalize_to_origin() {
        let k = marginalize_keypoints(&SaliencyVolume {
            channels: 2,
            res: 4,
            logits: vec![1.7; 128],
        });
        for p in k.points() {
            assert!(linalg::norm(*p) < 1e-12);
        }
    }

    #[test]
    fn heatmap_is_one_at_a_keypoint_voxel_and_zero_without_keypoints() {
        let res = 8;
        let c = [
            voxel_coord(res, 3),
            voxel_coord(res, 4),
            voxel_coord(res, 5),
        ];
        let h = gaussian_heatmap(&KeypointSet(vec![c]), 0.15, res).unwrap();
        assert_eq!(h.weights[(3 * res + 4) * res + 5], 1.0);
        let empty = gaussian_heatmap(&KeypointSet(vec![]), 0.15, res).unwrap();
        assert!(empty.weights.iter().all(|&w| w == 0.0));
        assert!(gaussian_heatmap(&KeypointSet(vec![c]), 0.0, res).is_err());
    }

    #[test]
    fn coincident_keypoints_dominate_single_keypoint() {
        let k = [0.1, -0.2, 0.05];
        let one = gaussian_heatmap(&KeypointSet(vec![k]), 0.15, 8).unwrap();
        let two = gaussian_heatmap(&KeypointSet(vec![k, k]), 0.15, 8).unwrap();
        for (a, b) in one.weights.iter().zip(&two.weights) {
            // 1 - (1 - G)² evaluated directly
            let g = *a;
            assert!((b - (1.0 - (1.0 - g) * (1.0 - g))).abs() < 1e-15);
            assert!(*b >= *a);
        }
    }

    #[test]
    fn transport_without_heatmaps_is_source_and_full_heat_is_target() {
        let res = 2;
        let phi_s = FeatureVolume {
            channels: 2,
            res,
            data: (0..16).map(|i| i as f64 * 0.37 - 1.0).collect(),
        };
        let phi_t = FeatureVolume {
            channels: 2,
            res,
            data: (0..16).map(|i| 2.0 - i as f64 * 0.11).collect(),
        };
        let zero = HeatmapVolume {
            res,
            weights: vec![0.0; 8],
        };
        let out = transport_features(&phi_s, &phi_t, &zero, &zero).unwrap();
        assert_eq!(out.data, phi_s.data);
        let mut ht = zero.clone();
        ht.weights[5] = 1.0;
        let hs = HeatmapVolume {
            res,
            weights: vec![0.4; 8],
        };
        let out = transport_features(&phi_s, &phi_t, &hs, &ht).unwrap();
        assert_eq!(out.data[5], phi_t.data[5]);
        assert_eq!(out.data[8 + 5], phi_t.data[8 + 5]);
        let bad = HeatmapVolume {
            res: 4,
            weights: vec![0.0; 64],
        };
        assert!(transport_features(&phi_s, &phi_t, &bad, &zero).is_err());
    }

    #[test]
    fn trilinear_at_centers_and_midpoints() {
        let res = 4;
        let data: Vec<f64> = (0..64).map(|i| (i as f64 * 0.731).sin()).collect();
        let vol = FeatureVolume {
            channels: 1,
            res,
            data: data.clone(),
        };
        let c = |i| voxel_coord(res, i);
        let f = trilinear_query(&vol, &[[c(1), c(2), c(3)]]);
        assert_eq!(f[0][0], data[(res + 2) * res + 3]);
        let mid = [0.5 * (c(1) + c(2)), c(2), c(3)];
        let f = trilinear_query(&vol, &[mid]);
        let expect = 0.5 * (data[(res + 2) * res + 3] + data[(2 * res + 2) * res + 3]);
        assert!((f[0][0] - expect).abs() < 1e-15);
        let constant = FeatureVolume {
            channels: 1,
            res,
            data: vec![0.25; 64],
        };
        for p in [[0.49, -0.49, 0.0], [0.7, 0.0, -3.0], [0.01, 0.13, -0.2]] {
            assert!((trilinear_query(&constant, &[p])[0][0] - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn fit_identity_and_translation() {
        let pts = vec![
            [0.1, 0.2, 0.0],
            [-0.3, 0.1, 0.2],
            [0.0, -0.2, -0.1],
            [0.25, 0.05, 0.3],
        ];
        let fit = fit_rigid(&pts, &pts);
        assert!(linalg::frobenius(&linalg::mat_sub(&fit.transform.r, &linalg::IDENTITY)) < 1e-9);
        assert!(linalg::norm(fit.transform.t) < 1e-9);
        let moved: Vec<Vec3> = pts
            .iter()
            .map(|p| linalg::add(*p, [0.1, 0.0, 0.0]))
            .collect();
        let fit = fit_rigid(&pts, &moved);
        assert!(linalg::dist(fit.transform.t, [0.1, 0.0, 0.0]) < 1e-9);
        assert!(!fit.degenerate);
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let src = vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.2, 0.0, 0.0]];
        let dst: Vec<Vec3> = src
            .iter()
            .map(|p| linalg::add(*p, [0.0, 0.3, 0.0]))
            .collect();
        let fit = fit_rigid(&src, &dst);
        assert!(fit.degenerate);
        assert_eq!(fit.transform.r, linalg::IDENTITY);
        assert!(linalg::dist(fit.transform.t, [0.0, 0.3, 0.0]) < 1e-12);
    }

    #[test]
    fn axis_angle_canonical_cases() {
        let aa = axis_angle(&linalg::IDENTITY);
        assert_eq!(
            aa,
            AxisAngle {
                axis: [0.0, 0.0, 1.0],
                angle: 0.0
            }
        );
        let aa = axis_angle(&linalg::rotation_about([0.0, 0.0, 1.0], FRAC_PI_2));
        assert!(linalg::dist(aa.axis, [0.0, 0.0, 1.0]) < 1e-9);
        assert!((aa.angle - FRAC_PI_2).abs() < 1e-9);
        let axis = linalg::normalize([1.0, -2.0, 0.5]).unwrap();
        let r = linalg::rotation_about(axis, PI);
        let aa = axis_angle(&r);
        assert!((aa.angle - PI).abs() < 1e-9);
        let back = rotation_from_axis_angle(&aa);
        assert!(linalg::frobenius(&linalg::mat_sub(&back, &r)) < 1e-9);
    }

    #[test]
    fn flow_is_elementwise_difference() {
        let kc = KeypointSet(vec![[0.0, 0.1, 0.2], [0.3, -0.1, 0.0]]);
        let kg = KeypointSet(vec![[0.5, 0.1, 0.2], [0.3, 0.2, -0.4]]);
        let f = keypoint_flow(&kc, &kg).unwrap();
        assert_eq!(f, vec![[0.5, 0.0, 0.0], [0.0, 0.30000000000000004, -0.4]]);
        assert!(keypoint_flow(&kc, &KeypointSet(vec![])).is_err());
    }
}
