//! Small helpers for 3-vectors and 3x3 matrices stored as plain arrays.

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

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
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(s: f64, a: Vec3) -> Vec3 {
    [s * a[0], s * a[1], s * a[2]]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Matrix of `v ↦ a × v`.
pub fn skew(a: Vec3) -> Mat3 {
    [[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]]
}

pub fn outer(a: Vec3, b: Vec3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = a[i] * b[j];
        }
    }
    m
}

pub fn identity(s: f64) -> Mat3 {
    [[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, s]]
}

pub fn mat_add(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut m = *a;
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] += b[i][j];
        }
    }
    m
}

pub fn mat_scale(s: f64, a: &Mat3) -> Mat3 {
    let mut m = *a;
    for row in m.iter_mut() {
        for v in row.iter_mut() {
            *v *= s;
        }
    }
    m
}

pub fn mat_vec(a: &Mat3, v: Vec3) -> Vec3 {
    [dot(a[0], v), dot(a[1], v), dot(a[2], v)]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    m
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = a[j][i];
        }
    }
    m
}

pub fn det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Inverse by cofactors. Returns `None` for a (numerically) singular matrix.
pub fn inverse(a: &Mat3) -> Option<Mat3> {
    let d = det(a);
    let scale_ref = a.iter().flatten().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if d == 0.0 || !d.is_finite() || d.abs() <= 1e-300 * scale_ref.powi(3).max(1e-300) {
        return None;
    }
    let inv_d = 1.0 / d;
    Some([
        [
            (a[1][1] * a[2][2] - a[1][2] * a[2][1]) * inv_d,
            (a[0][2] * a[2][1] - a[0][1] * a[2][2]) * inv_d,
            (a[0][1] * a[1][2] - a[0][2] * a[1][1]) * inv_d,
        ],
        [
            (a[1][2] * a[2][0] - a[1][0] * a[2][2]) * inv_d,
            (a[0][0] * a[2][2] - a[0][2] * a[2][0]) * inv_d,
            (a[0][2] * a[1][0] - a[0][0] * a[1][2]) * inv_d,
        ],
        [
            (a[1][0] * a[2][1] - a[1][1] * a[2][0]) * inv_d,
            (a[0][1] * a[2][0] - a[0][0] * a[2][1]) * inv_d,
            (a[0][0] * a[1][1] - a[0][1] * a[1][0]) * inv_d,
        ],
    ])
}
