//! Closed-form 2×2 matrix helpers. Matrices are row-major `[a, b, c, d]`.

pub type Mat2 = [f64; 4];
pub type Vec2 = [f64; 2];

pub const IDENTITY: Mat2 = [1.0, 0.0, 0.0, 1.0];

pub fn det(m: &Mat2) -> f64 {
    m[0] * m[3] - m[1] * m[2]
}

pub fn trace(m: &Mat2) -> f64 {
    m[0] + m[3]
}

pub fn inverse(m: &Mat2) -> Option<Mat2> {
    let d = det(m);
    if d == 0.0 || !d.is_finite() {
        return None;
    }
    Some([m[3] / d, -m[1] / d, -m[2] / d, m[0] / d])
}

pub fn mul(a: &Mat2, b: &Mat2) -> Mat2 {
    [
        a[0] * b[0] + a[1] * b[2],
        a[0] * b[1] + a[1] * b[3],
        a[2] * b[0] + a[3] * b[2],
        a[2] * b[1] + a[3] * b[3],
    ]
}

pub fn apply(m: &Mat2, v: &Vec2) -> Vec2 {
    [m[0] * v[0] + m[1] * v[1], m[2] * v[0] + m[3] * v[1]]
}

pub fn add(a: &Mat2, b: &Mat2) -> Mat2 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]]
}

pub fn scale(m: &Mat2, s: f64) -> Mat2 {
    [m[0] * s, m[1] * s, m[2] * s, m[3] * s]
}

pub fn outer(u: &Vec2, v: &Vec2) -> Mat2 {
    [u[0] * v[0], u[0] * v[1], u[1] * v[0], u[1] * v[1]]
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &Mat2) -> (f64, f64) {
    let mean = 0.5 * (m[0] + m[3]);
    let half_diff = 0.5 * (m[0] - m[3]);
    let off = 0.5 * (m[1] + m[2]);
    let r = half_diff.hypot(off);
    (mean - r, mean + r)
}

pub fn is_spd(m: &Mat2) -> bool {
    (m[1] - m[2]).abs() <= 1e-12 * (m[1].abs() + m[2].abs()).max(1.0) && sym_eigenvalues(m).0 > 0.0
}

/// Principal square root of a 2×2 matrix with non-negative real spectrum:
/// `√M = (M + s I) / t` with `s = √det M`, `t = √(tr M + 2s)`.
pub fn sqrtm(m: &Mat2) -> Option<Mat2> {
    let d = det(m);
    if d < 0.0 {
        return None;
    }
    let s = d.sqrt();
    let t2 = trace(m) + 2.0 * s;
    if t2 <= 0.0 {
        return if m.iter().all(|v| *v == 0.0) { Some([0.0; 4]) } else { None };
    }
    let t = t2.sqrt();
    Some([(m[0] + s) / t, m[1] / t, m[2] / t, (m[3] + s) / t])
}
