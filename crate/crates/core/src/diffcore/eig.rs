//! Closed-form smallest eigenpair of a symmetric 3x3 matrix and its
//! reverse-mode derivative.

use std::f64::consts::PI;

/// Below this eigen-gap the eigenvector derivative is reported as zero.
pub const GAP_THRESHOLD: f64 = 1e-6;

pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmallestEigen {
    /// Unit eigenvector; the component of largest magnitude is positive.
    pub vector: [f64; 3],
    /// Eigenvalues in ascending order.
    pub values: [f64; 3],
}

impl SmallestEigen {
    pub fn gap(&self) -> f64 {
        self.values[1] - self.values[0]
    }
}

/// Eigenvalues of a symmetric matrix in ascending order, from the roots of
/// the characteristic polynomial in trigonometric form.
pub fn symmetric_eigenvalues(a: &Mat3) -> [f64; 3] {
    let p1 = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    let d0 = a[0][0] - q;
    let d1 = a[1][1] - q;
    let d2 = a[2][2] - q;
    let p2 = d0 * d0 + d1 * d1 + d2 * d2 + 2.0 * p1;
    if p2 == 0.0 {
        return [q, q, q];
    }
    let p = (p2 / 6.0).sqrt();
    let b = [
        [d0 / p, a[0][1] / p, a[0][2] / p],
        [a[1][0] / p, d1 / p, a[1][2] / p],
        [a[2][0] / p, a[2][1] / p, d2 / p],
    ];
    let r = (det3(&b) / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let largest = q + 2.0 * p * phi.cos();
    let smallest = q + 2.0 * p * (phi + 2.0 * PI / 3.0).cos();
    let middle = 3.0 * q - largest - smallest;
    let mut out = [smallest, middle, largest];
    out.sort_by(f64::total_cmp);
    out
}

/// Smallest eigenvalue and its unit eigenvector, the latter taken as the
/// largest cross product of two rows of `A − λ_min I`.
pub fn smallest_eigenvector(a: &Mat3) -> SmallestEigen {
    let values = symmetric_eigenvalues(a);
    let lambda = values[0];
    let rows = [
        [a[0][0] - lambda, a[0][1], a[0][2]],
        [a[1][0], a[1][1] - lambda, a[1][2]],
        [a[2][0], a[2][1], a[2][2] - lambda],
    ];
    let candidates = [
        cross(rows[0], rows[1]),
        cross(rows[0], rows[2]),
        cross(rows[1], rows[2]),
    ];
    let (best, best_norm2) = candidates
        .iter()
        .map(|c| (*c, dot(*c, *c)))
        .fold(([0.0; 3], -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });

    let scale = rows
        .iter()
        .map(|r| dot(*r, *r))
        .fold(0.0, f64::max);
    let vector = if best_norm2 > 1e-28 * scale * scale && best_norm2 > 0.0 {
        scaled(best, 1.0 / best_norm2.sqrt())
    } else if scale > 0.0 {
        // A − λI has rank one: any vector orthogonal to its dominant row.
        let r = *rows
            .iter()
            .max_by(|x, y| dot(**x, **x).total_cmp(&dot(**y, **y)))
            .expect("three rows");
        let axis = least_aligned_axis(r);
        let c = cross(r, axis);
        scaled(c, 1.0 / dot(c, c).sqrt())
    } else {
        [0.0, 0.0, 1.0]
    };
    SmallestEigen {
        vector: canonical_sign(vector),
        values,
    }
}

/// Reverse-mode derivative of [`smallest_eigenvector`]: given the forward
/// output `v` and its adjoint `v_bar`, returns the adjoint of `a`.
///
/// Uses `dv = −B dA v` with `B = Σ_{j≠min} v_j v_jᵀ / (λ_j − λ_min)`, obtained
/// as `(A − λ_min I + v vᵀ)⁻¹ − v vᵀ` so the two larger eigenvectors are
/// never formed explicitly. Zero when the eigen-gap is below
/// [`GAP_THRESHOLD`].
pub fn smallest_eigenvector_vjp(a: &Mat3, v: [f64; 3], v_bar: [f64; 3]) -> Mat3 {
    let eig = smallest_eigenvector(a);
    if !(eig.gap() >= GAP_THRESHOLD) {
        return [[0.0; 3]; 3];
    }
    let lambda = eig.values[0];
    let mut n = *a;
    for p in 0..3 {
        n[p][p] -= lambda;
        for q in 0..3 {
            n[p][q] += v[p] * v[q];
        }
    }
    let Some(inv) = inverse3(&n) else {
        return [[0.0; 3]; 3];
    };
    let mut x = [0.0; 3];
    for p in 0..3 {
        for q in 0..3 {
            let b = inv[p][q] - v[p] * v[q];
            x[p] += b * v_bar[q];
        }
    }
    let mut g = [[0.0; 3]; 3];
    for p in 0..3 {
        for q in 0..3 {
            g[p][q] = -0.5 * (x[p] * v[q] + x[q] * v[p]);
        }
    }
    g
}

fn canonical_sign(v: [f64; 3]) -> [f64; 3] {
    let mut k = 0;
    for i in 1..3 {
        if v[i].abs() > v[k].abs() {
            k = i;
        }
    }
    if v[k] < 0.0 {
        [-v[0], -v[1], -v[2]]
    } else {
        v
    }
}

fn least_aligned_axis(r: [f64; 3]) -> [f64; 3] {
    let mut k = 0;
    for i in 1..3 {
        if r[i].abs() < r[k].abs() {
            k = i;
        }
    }
    let mut e = [0.0; 3];
    e[k] = 1.0;
    e
}

pub(crate) fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn inverse3(m: &Mat3) -> Option<Mat3> {
    let det = det3(m);
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for p in 0..3 {
        for q in 0..3 {
            let (r0, r1) = ((q + 1) % 3, (q + 2) % 3);
            let (c0, c1) = ((p + 1) % 3, (p + 2) % 3);
            inv[p][q] = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    Some(inv)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    super::tape::cross3(a, b)
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn scaled(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}
