//! 3x3 singular value decomposition and the Kabsch rotation solve.
//!
//! SVD is computed by one-sided Jacobi (Hestenes) rotations, which converges
//! to machine precision in a handful of sweeps on 3x3 inputs and is fully
//! deterministic: singular values come out sorted descending with a fixed
//! tie order, which the reverse-mode formula in [`kabsch_backward`] relies
//! on. A library decomposition would work for the forward pass, but the
//! backward pass needs control over ordering and sign conventions, so the
//! whole path is kept in one place.

use crate::geometry::{det3, Mat3, Vec3};
use crate::math;

/// Decomposition A = U diag(s) V^T with s sorted descending, U and V
/// orthogonal (columns stored column-wise: `u[r][c]` is row r of column c).
#[derive(Debug, Clone, Copy)]
pub struct Svd3 {
    pub u: Mat3,
    pub s: [f64; 3],
    pub v: Mat3,
}

const JACOBI_TOL: f64 = 1e-15;
const MAX_SWEEPS: usize = 60;

fn col_dot(m: &Mat3, a: usize, b: usize) -> f64 {
    (0..3).map(|r| m[r][a] * m[r][b]).sum()
}

fn rotate_cols(m: &mut Mat3, p: usize, q: usize, c: f64, s: f64) {
    for r in 0..3 {
        let (mp, mq) = (m[r][p], m[r][q]);
        m[r][p] = c * mp - s * mq;
        m[r][q] = s * mp + c * mq;
    }
}

/// One-sided Jacobi SVD.
pub fn svd3(a: &Mat3) -> Svd3 {
    let mut b = *a;
    let mut v: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let alpha = col_dot(&b, p, p);
            let beta = col_dot(&b, q, q);
            let gamma = col_dot(&b, p, q);
            if gamma == 0.0 || gamma * gamma <= JACOBI_TOL * JACOBI_TOL * alpha * beta {
                continue;
            }
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + math::sqrt(1.0 + zeta * zeta));
            let c = 1.0 / math::sqrt(1.0 + t * t);
            let s = c * t;
            rotate_cols(&mut b, p, q, c, s);
            rotate_cols(&mut v, p, q, c, s);
            rotated = true;
        }
        if !rotated {
            break;
        }
    }

    let mut s = [0.0; 3];
    for (c, slot) in s.iter_mut().enumerate() {
        *slot = math::sqrt(col_dot(&b, c, c));
    }

    // sort descending, ties keep original order
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| s[j].partial_cmp(&s[i]).unwrap());
    let s_sorted = [s[order[0]], s[order[1]], s[order[2]]];
    let mut u = [[0.0; 3]; 3];
    let mut v_sorted = [[0.0; 3]; 3];
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..3 {
            v_sorted[r][dst] = v[r][src];
            u[r][dst] = b[r][src];
        }
    }
    let s = s_sorted;
    let v = v_sorted;

    // normalize U columns, completing degenerate directions orthogonally
    let cutoff = s[0] * 1e-13;
    let mut u_cols: [Vec3; 3] = [[0.0; 3]; 3];
    for c in 0..3 {
        for r in 0..3 {
            u_cols[c][r] = u[r][c];
        }
    }
    if s[0] <= f64::MIN_POSITIVE {
        u_cols = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    } else {
        normalize(&mut u_cols[0], s[0]);
        if s[1] <= cutoff {
            u_cols[1] = any_orthonormal(&u_cols[0]);
        } else {
            normalize(&mut u_cols[1], s[1]);
        }
        let c2 = cross(&u_cols[0], &u_cols[1]);
        if s[2] <= cutoff {
            u_cols[2] = c2;
        } else {
            normalize(&mut u_cols[2], s[2]);
            // keep the computed direction but guard against lost orthogonality
            let align: f64 = (0..3).map(|r| u_cols[2][r] * c2[r]).sum();
            if align.abs() < 0.5 {
                u_cols[2] = if align >= 0.0 { c2 } else { [-c2[0], -c2[1], -c2[2]] };
            }
        }
    }
    let mut u = [[0.0; 3]; 3];
    for c in 0..3 {
        for r in 0..3 {
            u[r][c] = u_cols[c][r];
        }
    }

    Svd3 { u, s, v }
}

fn normalize(v: &mut Vec3, n: f64) {
    for x in v.iter_mut() {
        *x /= n;
    }
}

fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn any_orthonormal(u: &Vec3) -> Vec3 {
    // seed axis = the one least aligned with u
    let mut k = 0;
    for i in 1..3 {
        if u[i].abs() < u[k].abs() {
            k = i;
        }
    }
    let mut e = [0.0; 3];
    e[k] = 1.0;
    let d: f64 = (0..3).map(|r| e[r] * u[r]).sum();
    let mut out = [e[0] - d * u[0], e[1] - d * u[1], e[2] - d * u[2]];
    let n = math::sqrt(out.iter().map(|x| x * x).sum());
    normalize(&mut out, n);
    out
}

/// Kabsch solve: the proper rotation maximizing tr(R H^T) for a
/// cross-covariance H, i.e. R = U diag(1, 1, d) V^T with d correcting
/// reflections. `degenerate` marks inputs whose optimum is not unique
/// (rank < 2, or a reflection tie between the two smallest values).
#[derive(Debug, Clone, Copy)]
pub struct KabschResult {
    pub rotation: Mat3,
    pub svd: Svd3,
    /// +1 or -1: sign applied to the last singular direction.
    pub flip: f64,
    pub degenerate: bool,
}

pub fn kabsch_rotation(h: &Mat3) -> KabschResult {
    let svd = svd3(h);
    let d = det3(&svd.u) * det3(&svd.v);
    let flip = if d < 0.0 { -1.0 } else { 1.0 };
    let diag = [1.0, 1.0, flip];
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = (0..3).map(|k| svd.u[i][k] * diag[k] * svd.v[j][k]).sum();
        }
    }
    let rel = svd.s[0].max(f64::MIN_POSITIVE);
    let degenerate = svd.s[0] <= f64::MIN_POSITIVE
        || svd.s[1] <= 1e-9 * rel
        || (flip < 0.0 && (svd.s[1] - svd.s[2]) <= 1e-9 * rel);
    KabschResult {
        rotation: r,
        svd,
        flip,
        degenerate,
    }
}

/// Reverse-mode rule for [`kabsch_rotation`]: propagates the adjoint of the
/// rotation back to the cross-covariance H.
///
/// Uses the singular-value sensitivity factors 1/(s_j^2 - s_i^2); when two
/// singular values are within 1e-6 the gap is clamped to 1e-6, trading a
/// locally biased gradient for a finite one near degenerate configurations.
pub fn kabsch_backward(res: &KabschResult, r_bar: &Mat3) -> Mat3 {
    let u = &res.svd.u;
    let v = &res.svd.v;
    let s = &res.svd.s;
    let diag = [1.0, 1.0, res.flip];

    // U_bar = R_bar V D, V_bar = R_bar^T U D
    let mut u_bar = [[0.0; 3]; 3];
    let mut v_bar = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            u_bar[i][j] = (0..3).map(|k| r_bar[i][k] * v[k][j]).sum::<f64>() * diag[j];
            v_bar[i][j] = (0..3).map(|k| r_bar[k][i] * u[k][j]).sum::<f64>() * diag[j];
        }
    }

    // F_ij = 1 / (s_j^2 - s_i^2), gap clamped at 1e-6
    let mut f = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            if i == j {
                continue;
            }
            let mut gap = s[j] - s[i];
            if gap.abs() < 1e-6 {
                gap = if gap >= 0.0 { 1e-6 } else { -1e-6 };
            }
            let sum = (s[i] + s[j]).max(1e-6);
            f[i][j] = 1.0 / (gap * sum);
        }
    }

    // J = F o (U^T U_bar - U_bar^T U), K = F o (V^T V_bar - V_bar^T V)
    let mut j_m = [[0.0; 3]; 3];
    let mut k_m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let ut_ub: f64 = (0..3).map(|r| u[r][i] * u_bar[r][j]).sum();
            let ubt_u: f64 = (0..3).map(|r| u_bar[r][i] * u[r][j]).sum();
            j_m[i][j] = f[i][j] * (ut_ub - ubt_u);
            let vt_vb: f64 = (0..3).map(|r| v[r][i] * v_bar[r][j]).sum();
            let vbt_v: f64 = (0..3).map(|r| v_bar[r][i] * v[r][j]).sum();
            k_m[i][j] = f[i][j] * (vt_vb - vbt_v);
        }
    }

    // H_bar = U (J Sigma + Sigma K) V^T
    let mut inner = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            inner[i][j] = j_m[i][j] * s[j] + s[i] * k_m[i][j];
        }
    }
    let mut h_bar = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            h_bar[i][j] = (0..3)
                .map(|a| {
                    (0..3)
                        .map(|b| u[i][a] * inner[a][b] * v[j][b])
                        .sum::<f64>()
                })
                .sum();
        }
    }
    h_bar
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn reconstruct(svd: &Svd3) -> Mat3 {
        let mut a = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] = (0..3).map(|k| svd.u[i][k] * svd.s[k] * svd.v[j][k]).sum();
            }
        }
        a
    }

    fn assert_orthogonal(m: &Mat3) {
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|r| m[r][i] * m[r][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-12, "col {i} . col {j} = {d}");
            }
        }
    }

    #[test]
    fn svd_reconstructs_random_matrices() {
        let mut s = SeedStream::new(12);
        for _ in 0..500 {
            let mut a = [[0.0; 3]; 3];
            for row in a.iter_mut() {
                for x in row.iter_mut() {
                    *x = s.normal();
                }
            }
            let svd = svd3(&a);
            assert_orthogonal(&svd.u);
            assert_orthogonal(&svd.v);
            assert!(svd.s[0] >= svd.s[1] && svd.s[1] >= svd.s[2] && svd.s[2] >= 0.0);
            let rec = reconstruct(&svd);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((rec[i][j] - a[i][j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn svd_known_diagonal() {
        let a = [[3.0, 0.0, 0.0], [0.0, -5.0, 0.0], [0.0, 0.0, 1.0]];
        let svd = svd3(&a);
        assert!((svd.s[0] - 5.0).abs() < 1e-14);
        assert!((svd.s[1] - 3.0).abs() < 1e-14);
        assert!((svd.s[2] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn svd_handles_rank_deficiency() {
        let rank1 = [[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [3.0, 6.0, 9.0]];
        let svd = svd3(&rank1);
        assert!(svd.s[1] < 1e-12 * svd.s[0]);
        assert_orthogonal(&svd.u);
        let rec = reconstruct(&svd);
        for i in 0..3 {
            for j in 0..3 {
                assert!((rec[i][j] - rank1[i][j]).abs() < 1e-12);
            }
        }

        let zero = [[0.0; 3]; 3];
        let svd = svd3(&zero);
        assert_eq!(svd.s, [0.0; 3]);
        assert_orthogonal(&svd.u);
        assert_orthogonal(&svd.v);
    }

    #[test]
    fn kabsch_is_proper_rotation_even_for_reflection_inputs() {
        let mut s = SeedStream::new(9);
        for _ in 0..200 {
            let mut h = [[0.0; 3]; 3];
            for row in h.iter_mut() {
                for x in row.iter_mut() {
                    *x = s.normal();
                }
            }
            let res = kabsch_rotation(&h);
            assert!((det3(&res.rotation) - 1.0).abs() < 1e-9);
        }
    }
}
