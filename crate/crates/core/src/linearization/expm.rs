//! Matrix exponentials: closed form for 2×2 blocks and Padé(13)
//! scaling-and-squaring for dense matrices.

use faer::linalg::solvers::Solve;
use faer::Mat;

/// `exp(t M)` for a real 2×2 matrix `[[a, b], [c, d]]`.
pub fn expm2(m: [[f64; 2]; 2], t: f64) -> [[f64; 2]; 2] {
    let [[a, b], [c, d]] = m;
    let (a, b, c, d) = (a * t, b * t, c * t, d * t);
    let s = 0.5 * (a + d);
    let h = 0.5 * (a - d);
    let delta = h * h + b * c;
    // exp(N) = ch I + sh N with N = M - s I, N^2 = delta I
    let (ch, sh) = if delta.abs() < 1e-8 {
        (1.0 + delta / 2.0 + delta * delta / 24.0, 1.0 + delta / 6.0 + delta * delta / 120.0)
    } else if delta > 0.0 {
        let r = delta.sqrt();
        (r.cosh(), r.sinh() / r)
    } else {
        let r = (-delta).sqrt();
        (r.cos(), r.sin() / r)
    };
    let e = s.exp();
    [[e * (ch + sh * h), e * sh * b], [e * sh * c, e * (ch - sh * h)]]
}

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

fn one_norm(a: &Mat<f64>) -> f64 {
    (0..a.ncols())
        .map(|j| (0..a.nrows()).map(|i| a[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn lin(terms: &[(f64, &Mat<f64>)], identity: f64) -> Mat<f64> {
    let n = terms[0].1.nrows();
    Mat::from_fn(n, n, |i, j| {
        let mut v = if i == j { identity } else { 0.0 };
        for (c, m) in terms {
            v += c * m[(i, j)];
        }
        v
    })
}

/// Dense `exp(A)` (Higham's Padé(13) scaling and squaring).
pub fn expm(a: &Mat<f64>) -> Mat<f64> {
    let theta13 = 5.371920351148152;
    let norm = one_norm(a);
    let s = if norm > theta13 { (norm / theta13).log2().ceil() as i32 } else { 0 };
    let scale = 0.5f64.powi(s);
    let n = a.nrows();
    let a = Mat::from_fn(n, n, |i, j| a[(i, j)] * scale);
    let b = PADE13;
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = &a6 * &lin(&[(b[13], &a6), (b[11], &a4), (b[9], &a2)], 0.0);
    let u = &a * &lin(&[(1.0, &inner_u), (b[7], &a6), (b[5], &a4), (b[3], &a2)], b[1]);
    let inner_v = &a6 * &lin(&[(b[12], &a6), (b[10], &a4), (b[8], &a2)], 0.0);
    let v = lin(&[(1.0, &inner_v), (b[6], &a6), (b[4], &a4), (b[2], &a2)], b[0]);
    let p = lin(&[(1.0, &v), (1.0, &u)], 0.0);
    let q = lin(&[(1.0, &v), (-1.0, &u)], 0.0);
    let mut r = q.partial_piv_lu().solve(&p);
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense2(m: [[f64; 2]; 2], t: f64) -> [[f64; 2]; 2] {
        let a = Mat::from_fn(2, 2, |i, j| m[i][j] * t);
        let e = expm(&a);
        [[e[(0, 0)], e[(0, 1)]], [e[(1, 0)], e[(1, 1)]]]
    }

    #[test]
    fn two_by_two_matches_pade() {
        for m in [
            [[-0.1, 1.0], [-1.0, -0.3]],
            [[0.2, 3.0], [1.0, -0.5]],
            [[0.0, 1.0], [0.0, 0.0]],
            [[-1.0, 0.0], [0.0, 2.0]],
        ] {
            for t in [0.001, 0.5, 2.0, -1.3] {
                let a = expm2(m, t);
                let b = dense2(m, t);
                for i in 0..2 {
                    for j in 0..2 {
                        assert!((a[i][j] - b[i][j]).abs() < 1e-12 * (1.0 + b[i][j].abs()), "{m:?} {t}");
                    }
                }
            }
        }
    }

    #[test]
    fn rotation_generator() {
        let a = Mat::from_fn(2, 2, |i, j| match (i, j) {
            (0, 1) => -1.0,
            (1, 0) => 1.0,
            _ => 0.0,
        });
        let scaled = Mat::from_fn(2, 2, |i, j| a[(i, j)] * 7.3);
        let e = expm(&scaled);
        assert!((e[(0, 0)] - 7.3f64.cos()).abs() < 1e-13);
        assert!((e[(1, 0)] - 7.3f64.sin()).abs() < 1e-13);
    }
}
