//! Small fixed-size math used everywhere: quaternions in `(w, x, y, z)` order,
//! covariance construction, degree-1 spherical harmonics and region-grid
//! coordinates.

use nalgebra::{Matrix3, Vector3, Vector4};

use crate::error::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
/// Quaternion stored as `(w, x, y, z)`.
pub type Quat = Vector4<f64>;

pub const SH_C0: f64 = 0.282_094_791_77;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
/// Coefficients per color channel for degree 1.
pub const SH_COEFFS: usize = 4;
/// Total SH scalars per Gaussian, laid out coefficient-major: `sh[k * 3 + channel]`.
pub const SH_LEN: usize = SH_COEFFS * 3;

pub fn quat_identity() -> Quat {
    Quat::new(1.0, 0.0, 0.0, 0.0)
}

pub fn quat_normalize(q: &Quat) -> Result<Quat, Error> {
    let n = q.norm();
    if !(n > 1e-12) {
        return Err(Error::DegenerateQuaternion);
    }
    Ok(q / n)
}

/// Hamilton product without renormalization.
pub fn quat_mul_raw(a: &Quat, b: &Quat) -> Quat {
    let (aw, ax, ay, az) = (a[0], a[1], a[2], a[3]);
    let (bw, bx, by, bz) = (b[0], b[1], b[2], b[3]);
    Quat::new(
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )
}

/// Hamilton product of two unit quaternions, renormalized. The rotation of the
/// result is `rotation(a) ∘ rotation(b)` (apply `b` first).
pub fn quat_multiply(a: &Quat, b: &Quat) -> Quat {
    let p = quat_mul_raw(a, b);
    let n = p.norm();
    if n > 0.0 {
        p / n
    } else {
        p
    }
}

/// Matrix `M(q)` such that `n ⊗ q = M(q) · n` for any `n`.
pub fn right_mul_matrix(q: &Quat) -> nalgebra::Matrix4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    #[rustfmt::skip]
    let m = nalgebra::Matrix4::new(
        w, -x, -y, -z,
        x,  w,  z, -y,
        y, -z,  w,  x,
        z,  y, -x,  w,
    );
    m
}

/// Rotation matrix of a unit quaternion.
pub fn quat_to_matrix(q: &Quat) -> Mat3 {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Gradient of a scalar with respect to the (unit) quaternion entries, given
/// its gradient `d_rot` with respect to the rotation matrix entries.
pub fn quat_to_matrix_vjp(q: &Quat, d_rot: &Mat3) -> Quat {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let g = |r: usize, c: usize| d_rot[(r, c)];
    let dw = 2.0
        * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
        + z * g(2, 0)
        + w * g(2, 1)
        - 2.0 * x * g(2, 2));
    let dy = 2.0 * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
        - w * g(2, 0)
        + z * g(2, 1)
        - 2.0 * y * g(2, 2));
    let dz = 2.0 * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0)
        - 2.0 * z * g(1, 1)
        + y * g(1, 2)
        + x * g(2, 0)
        + y * g(2, 1));
    Quat::new(dw, dx, dy, dz)
}

/// Backpropagates through `q / |q|`.
pub fn normalize_vjp(raw: &Quat, d_unit: &Quat) -> Quat {
    let n = raw.norm();
    let u = raw / n;
    (d_unit - u * u.dot(d_unit)) / n
}

/// Rotates `v` by the unit quaternion `q`.
pub fn quat_rotate(q: &Quat, v: &Vec3) -> Vec3 {
    quat_to_matrix(q) * v
}

/// `R S Sᵀ Rᵀ` with `S = diag(exp(log_scale))`. The rotation is normalized
/// first; a zero quaternion falls back to identity.
pub fn covariance_from_scale_rot(log_scale: &Vec3, rotation: &Quat) -> Mat3 {
    let q = quat_normalize(rotation).unwrap_or_else(|_| quat_identity());
    let m = quat_to_matrix(&q) * Mat3::from_diagonal(&log_scale.map(f64::exp));
    let cov = m * m.transpose();
    // exact symmetry
    Mat3::from_fn(|r, c| if r <= c { cov[(r, c)] } else { cov[(c, r)] })
}

/// Real degree-≤1 SH basis evaluated at a unit direction.
pub fn sh_basis(dir: &Vec3) -> [f64; SH_COEFFS] {
    [
        SH_C0,
        -SH_C1 * dir.y,
        SH_C1 * dir.z,
        -SH_C1 * dir.x,
    ]
}

/// Unclamped color, `Σ_k Y_k(d) c_k + 0.5` per channel.
pub fn eval_sh_raw(sh: &[f64; SH_LEN], dir: &Vec3) -> Vec3 {
    let basis = sh_basis(dir);
    let mut rgb = Vec3::repeat(0.5);
    for (k, y) in basis.iter().enumerate() {
        for ch in 0..3 {
            rgb[ch] += y * sh[k * 3 + ch];
        }
    }
    rgb
}

/// View-dependent color, clamped at zero from below.
pub fn eval_sh(sh: &[f64; SH_LEN], view_dir: &Vec3) -> Vec3 {
    eval_sh_raw(sh, view_dir).map(|c| c.max(0.0))
}

/// DC coefficient producing `rgb` in the absence of higher-order terms.
pub fn rgb_to_sh_dc(rgb: f64) -> f64 {
    (rgb - 0.5) / SH_C0
}

/// Integer region coordinate of `position` for cubic regions of side `edge`:
/// `floor(position / edge + 0.5)` per axis, rounding toward −∞.
pub fn region_of(position: &Vec3, edge: f64) -> [i32; 3] {
    let f = |p: f64| (p / edge + 0.5).floor() as i32;
    [f(position.x), f(position.y), f(position.z)]
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const H: f64 = std::f64::consts::FRAC_1_SQRT_2;

    fn random_unit(rng: &mut ChaCha8Rng) -> Quat {
        loop {
            let q = Quat::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if q.norm() > 0.1 {
                return q.normalize();
            }
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(quat_normalize(&Quat::new(2.0, 0.0, 0.0, 0.0)).unwrap(), quat_identity());
        assert_eq!(
            quat_normalize(&Quat::new(0.0, 3.0, 0.0, 0.0)).unwrap(),
            Quat::new(0.0, 1.0, 0.0, 0.0)
        );
        assert_eq!(
            quat_normalize(&Quat::new(1.0, 1.0, 1.0, 1.0)).unwrap(),
            Quat::new(0.5, 0.5, 0.5, 0.5)
        );
        assert!(matches!(
            quat_normalize(&Quat::zeros()),
            Err(Error::DegenerateQuaternion)
        ));
    }

    #[test]
    fn multiply_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_unit(&mut rng);
        assert_abs_diff_eq!(quat_multiply(&quat_identity(), &q), q, epsilon = 1e-15);

        let rx = Quat::new(H, H, 0.0, 0.0);
        assert_abs_diff_eq!(
            quat_multiply(&rx, &rx),
            Quat::new(0.0, 1.0, 0.0, 0.0),
            epsilon = 1e-12
        );
        // v = (0, 0, 1) under 90° about x: in a right-handed frame z maps to -y.
        let v = quat_rotate(&rx, &Vec3::new(0.0, 0.0, 1.0));
        assert_abs_diff_eq!(v, Vec3::new(0.0, -1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn product_composes_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a = random_unit(&mut rng);
            let b = random_unit(&mut rng);
            let lhs = quat_to_matrix(&quat_multiply(&a, &b));
            let rhs = quat_to_matrix(&a) * quat_to_matrix(&b);
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
            // and the right-multiplication matrix agrees with the product
            assert_abs_diff_eq!(right_mul_matrix(&b) * a, quat_mul_raw(&a, &b), epsilon = 1e-14);
        }
    }

    #[test]
    fn covariance_examples() {
        let cov = covariance_from_scale_rot(
            &Vec3::new(0.0, 2f64.ln(), 3f64.ln()),
            &quat_identity(),
        );
        assert_abs_diff_eq!(cov, Mat3::from_diagonal(&Vec3::new(1.0, 4.0, 9.0)), epsilon = 1e-12);
    }

    /// Independent dense oracle: builds R entry by entry from the axis-angle
    /// form of the quaternion (Rodrigues), then multiplies with explicit loops.
    fn dense_oracle(log_scale: &Vec3, q: &Quat) -> [[f64; 3]; 3] {
        let w = q[0].clamp(-1.0, 1.0);
        let angle = 2.0 * w.acos();
        let s = (1.0 - w * w).sqrt();
        let axis = if s < 1e-12 {
            [1.0, 0.0, 0.0]
        } else {
            [q[1] / s, q[2] / s, q[3] / s]
        };
        let (c, sn) = (angle.cos(), angle.sin());
        let k = [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ];
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let id = if i == j { 1.0 } else { 0.0 };
                let mut kk = 0.0;
                for m in 0..3 {
                    kk += k[i][m] * k[m][j];
                }
                r[i][j] = id + sn * k[i][j] + (1.0 - c) * kk;
            }
        }
        let sc = [log_scale.x.exp(), log_scale.y.exp(), log_scale.z.exp()];
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for m in 0..3 {
                    acc += r[i][m] * sc[m] * sc[m] * r[j][m];
                }
                out[i][j] = acc;
            }
        }
        out
    }

    #[test]
    fn covariance_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let ls = Vec3::new(
                rng.random_range(-2.0..1.0),
                rng.random_range(-2.0..1.0),
                rng.random_range(-2.0..1.0),
            );
            let q = random_unit(&mut rng);
            let cov = covariance_from_scale_rot(&ls, &q);
            let oracle = dense_oracle(&ls, &q);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((cov[(i, j)] - oracle[i][j]).abs() < 1e-9);
                    assert!((cov[(i, j)] - cov[(j, i)]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn rotation_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random_unit(&mut rng);
        let g = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let f = |q: &Quat| quat_to_matrix(q).component_mul(&g).sum();
        let analytic = quat_to_matrix_vjp(&q, &g);
        for k in 0..4 {
            let mut p = q;
            let mut m = q;
            p[k] += 1e-6;
            m[k] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - analytic[k]).abs() < 1e-7, "{k}: {fd} vs {}", analytic[k]);
        }
    }

    #[test]
    fn sh_examples() {
        let dir = Vec3::new(0.3, -0.4, 0.5).normalize();
        assert_eq!(eval_sh(&[0.0; SH_LEN], &dir), Vec3::repeat(0.5));
        let mut dc = [0.0; SH_LEN];
        dc[..3].copy_from_slice(&[1.0, 1.0, 1.0]);
        for c in eval_sh(&dc, &dir).iter() {
            assert_abs_diff_eq!(*c, 0.782_094_79, epsilon = 1e-8);
        }
        let mut z = [0.0; SH_LEN];
        z[2 * 3] = 0.4; // Y_1,0 on red
        let up = eval_sh(&z, &dir)[0] - 0.5;
        let down = eval_sh(&z, &-dir)[0] - 0.5;
        assert_abs_diff_eq!(up, -down, epsilon = 1e-15);
    }

    #[test]
    fn region_examples() {
        assert_eq!(region_of(&Vec3::zeros(), 1.0), [0, 0, 0]);
        assert_eq!(region_of(&Vec3::new(0.6, -0.6, 1.2), 1.0), [1, -1, 1]);
        assert_eq!(region_of(&Vec3::new(0.5, 0.49999, 0.0), 1.0), [1, 0, 0]);
    }

    proptest! {
        #[test]
        fn multiply_is_associative(a in prop::array::uniform4(-1.0f64..1.0),
                                   b in prop::array::uniform4(-1.0f64..1.0),
                                   c in prop::array::uniform4(-1.0f64..1.0)) {
            let to_q = |v: [f64; 4]| Quat::from(v);
            let (a, b, c) = (to_q(a), to_q(b), to_q(c));
            prop_assume!(a.norm() > 0.1 && b.norm() > 0.1 && c.norm() > 0.1);
            let (a, b, c) = (a.normalize(), b.normalize(), c.normalize());
            let l = quat_multiply(&quat_multiply(&a, &b), &c);
            let r = quat_multiply(&a, &quat_multiply(&b, &c));
            prop_assert!((l - r).norm() < 1e-6);
        }

        #[test]
        fn covariance_spectrum_is_scale_squared(ls in prop::array::uniform3(-1.5f64..1.0),
                                                q in prop::array::uniform4(-1.0f64..1.0)) {
            let q = Quat::from(q);
            prop_assume!(q.norm() > 0.1);
            let ls = Vec3::from(ls);
            let cov = covariance_from_scale_rot(&ls, &q);
            let mut eig: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
            let mut want: Vec<f64> = ls.iter().map(|l| (2.0 * l).exp()).collect();
            eig.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            for (e, w) in eig.iter().zip(&want) {
                prop_assert!((e - w).abs() < 1e-6);
            }
        }

        #[test]
        fn region_grid_is_translation_equivariant(p in prop::array::uniform3(-50.0f64..50.0),
                                                   k in prop::array::uniform3(-20i32..20),
                                                   edge_exp in -3i32..4) {
            // power-of-two edges keep p + edge·k exact
            let edge = 2f64.powi(edge_exp);
            let p = Vec3::from(p);
            let shifted = p + Vec3::new(k[0] as f64, k[1] as f64, k[2] as f64) * edge;
            let base = region_of(&p, edge);
            prop_assert_eq!(region_of(&shifted, edge), [base[0] + k[0], base[1] + k[1], base[2] + k[2]]);
        }

        #[test]
        fn dc_only_sh_is_direction_independent(dc in prop::array::uniform3(-2.0f64..2.0),
                                               d1 in prop::array::uniform3(-1.0f64..1.0),
                                               d2 in prop::array::uniform3(-1.0f64..1.0)) {
            let (d1, d2) = (Vec3::from(d1), Vec3::from(d2));
            prop_assume!(d1.norm() > 0.1 && d2.norm() > 0.1);
            let mut sh = [0.0; SH_LEN];
            sh[..3].copy_from_slice(&dc);
            prop_assert_eq!(eval_sh(&sh, &d1.normalize()), eval_sh(&sh, &d2.normalize()));
        }
    }
}
