//! Fixed-size 3-vector and 3×3 matrix helpers, including a one-sided Jacobi SVD.

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    libm::sqrt(dot(a, a))
}

pub fn normalize(a: Vec3) -> Option<Vec3> {
    let n = norm(a);
    (n > 0.0 && n.is_finite()).then(|| scale(a, 1.0 / n))
}

pub fn dist(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

pub fn centroid(points: &[Vec3]) -> Vec3 {
    let mut c = [0.0; 3];
    for p in points {
        c = add(c, *p);
    }
    scale(c, 1.0 / points.len().max(1) as f64)
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub fn det(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

pub fn trace(m: &Mat3) -> f64 {
    m[0][0] + m[1][1] + m[2][2]
}

pub fn mat_sub(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = *a;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] -= b[i][j];
        }
    }
    out
}

pub fn frobenius(m: &Mat3) -> f64 {
    libm::sqrt(m.iter().flat_map(|r| r.iter()).map(|v| v * v).sum())
}

/// Rotation matrix for a rotation of `angle` radians about the unit `axis`.
pub fn rotation_about(axis: Vec3, angle: f64) -> Mat3 {
    let [x, y, z] = axis;
    let (s, c) = (libm::sin(angle), libm::cos(angle));
    let t = 1.0 - c;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

/// Singular value decomposition `a = u · diag(sigma) · vᵀ` with `sigma`
/// sorted in descending order and `u`, `v` orthogonal.
#[derive(Debug, Clone, Copy)]
pub struct Svd3 {
    pub u: Mat3,
    pub sigma: Vec3,
    pub v: Mat3,
}

fn column(m: &Mat3, j: usize) -> Vec3 {
    [m[0][j], m[1][j], m[2][j]]
}

fn set_column(m: &mut Mat3, j: usize, c: Vec3) {
    for i in 0..3 {
        m[i][j] = c[i];
    }
}

/// Any unit vector orthogonal to `a` (assumed unit length).
fn orthogonal_to(a: Vec3) -> Vec3 {
    let pick = if libm::fabs(a[0]) < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    normalize(cross(a, pick)).unwrap_or([0.0, 0.0, 1.0])
}

/// One-sided Jacobi SVD. Accurate to a few ulps relative to the largest
/// singular value; columns of `u` belonging to (numerically) zero singular
/// values are completed to an orthonormal basis.
pub fn svd3(a: &Mat3) -> Svd3 {
    let mut w = *a;
    let mut v = IDENTITY;
    for _sweep in 0..60 {
        let mut rotated = false;
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let cp = column(&w, p);
            let cq = column(&w, q);
            let alpha = dot(cp, cp);
            let beta = dot(cq, cq);
            let gamma = dot(cp, cq);
            if gamma == 0.0 || libm::fabs(gamma) <= 1e-17 * libm::sqrt(alpha * beta) {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = libm::copysign(1.0, zeta) / (libm::fabs(zeta) + libm::sqrt(1.0 + zeta * zeta));
            let c = 1.0 / libm::sqrt(1.0 + t * t);
            let s = c * t;
            for m in [&mut w, &mut v] {
                let mp = column(m, p);
                let mq = column(m, q);
                set_column(m, p, sub(scale(mp, c), scale(mq, s)));
                set_column(m, q, add(scale(mp, s), scale(mq, c)));
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order = [0usize, 1, 2];
    let norms = [
        norm(column(&w, 0)),
        norm(column(&w, 1)),
        norm(column(&w, 2)),
    ];
    order.sort_by(|&i, &j| {
        norms[j]
            .partial_cmp(&norms[i])
            .unwrap_or(core::cmp::Ordering::Equal)
    });

    let mut u = [[0.0; 3]; 3];
    let mut vs = [[0.0; 3]; 3];
    let mut sigma = [0.0; 3];
    let tiny = norms[order[0]] * 1e-14;
    for (k, &j) in order.iter().enumerate() {
        sigma[k] = norms[j];
        set_column(&mut vs, k, column(&v, j));
        if norms[j] > tiny && norms[j] > 0.0 {
            set_column(&mut u, k, scale(column(&w, j), 1.0 / norms[j]));
        }
    }
    // Complete u for vanishing singular values.
    if !(sigma[0] > tiny && sigma[0] > 0.0) {
        u = IDENTITY;
    } else if !(sigma[1] > tiny) {
        let u0 = column(&u, 0);
        let u1 = orthogonal_to(u0);
        set_column(&mut u, 1, u1);
        set_column(&mut u, 2, cross(u0, u1));
    } else if !(sigma[2] > tiny) {
        let u2 = cross(column(&u, 0), column(&u, 1));
        set_column(&mut u, 2, u2);
    }
    Svd3 { u, sigma, v: vs }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reconstruct(s: &Svd3) -> Mat3 {
        let mut us = s.u;
        for i in 0..3 {
            for j in 0..3 {
                us[i][j] *= s.sigma[j];
            }
        }
        mat_mul(&us, &transpose(&s.v))
    }

    #[test]
    fn svd_reconstructs_general_matrix() {
        let a = [[0.3, -1.2, 0.5], [2.0, 0.1, -0.7], [0.05, 0.9, 1.4]];
        let s = svd3(&a);
        assert!(frobenius(&mat_sub(&reconstruct(&s), &a)) < 1e-13);
        assert!(s.sigma[0] >= s.sigma[1] && s.sigma[1] >= s.sigma[2]);
        let utu = mat_mul(&transpose(&s.u), &s.u);
        assert!(frobenius(&mat_sub(&utu, &IDENTITY)) < 1e-13);
    }

    #[test]
    fn svd_handles_rank_deficient_input() {
        // rank 2: third row is the sum of the first two
        let a = [[1.0, 2.0, 0.5], [0.0, -1.0, 3.0], [1.0, 1.0, 3.5]];
        let s = svd3(&a);
        assert!(s.sigma[2] < 1e-12);
        assert!(frobenius(&mat_sub(&reconstruct(&s), &a)) < 1e-12);
        assert!((det(&s.u).abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_about_z_quarter_turn() {
        let r = rotation_about([0.0, 0.0, 1.0], core::f64::consts::FRAC_PI_2);
        let p = mat_vec(&r, [1.0, 0.0, 0.0]);
        assert!(dist(p, [0.0, 1.0, 0.0]) < 1e-15);
    }
}
