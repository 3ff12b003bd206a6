//! The real-linear operator `𝓛 v = iΔv + Lv + i kappa {u*, u*, v}`, its
//! spectrum, the zero-mode projections `Π⁰`, `Π`, the phase functional `𝓟`,
//! the semigroup `P(t)` and the decay constants `(M, a)`.
//!
//! Fields are treated as elements of the real space `L²(R; R²)`: a field is
//! stacked as `[re; im]` and paired by `Re ∫ f conj(g) dx`.

pub mod arnoldi;
pub mod expm;
pub mod semigroup;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use faer::linalg::solvers::DenseSolveCore;
use faer::{c64, Mat};
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::model::{bracket, SolitaryWave};
use crate::spectral::{derivative, lp_norm, mixed_norm_of_samples, AdmissiblePair, Field, Grid};
pub use semigroup::{apply_semigroup, LinearStepper, SemigroupMode, SemigroupRegistry};

/// `(re, im)` representation of a field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealField2 {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl RealField2 {
    pub fn from_field(f: &Field) -> Self {
        RealField2 { re: f.values().iter().map(|v| v.re).collect(), im: f.values().iter().map(|v| v.im).collect() }
    }

    pub fn to_field(&self, grid: &Arc<Grid>) -> Result<Field> {
        if self.re.len() != self.im.len() {
            return Err(invalid("re and im parts differ in length"));
        }
        Field::from_values(grid, self.re.iter().zip(&self.im).map(|(&r, &i)| C64::new(r, i)).collect())
    }

    pub fn stacked(&self) -> Vec<f64> {
        self.re.iter().chain(&self.im).copied().collect()
    }

    pub fn from_stacked(v: &[f64]) -> Self {
        let n = v.len() / 2;
        RealField2 { re: v[..n].to_vec(), im: v[n..].to_vec() }
    }
}

/// Per-node 2×2 block of the non-dispersive part of `𝓛`, acting on `(re, im)`.
pub fn local_blocks(wave: &SolitaryWave) -> Vec<[[f64; 2]; 2]> {
    let p = wave.params;
    let (lr, li) = p.loss_rates();
    wave.u_star
        .values()
        .iter()
        .map(|u| {
            let rho = u.norm_sqr();
            let sq = u * u;
            let (a, b) = (sq.re, sq.im);
            let k = p.kappa;
            [[-lr - k * b, p.nu - k * (2.0 * rho - a)], [-p.nu + k * (2.0 * rho + a), -li + k * b]]
        })
        .collect()
}

/// Dense `2N × 2N` matrix of `𝓛` in the stacked basis.
pub fn assemble_matrix(wave: &SolitaryWave) -> Mat<f64> {
    let grid = wave.grid();
    let n = grid.n_points();
    let mut sym: Vec<C64> = grid.frequencies().iter().map(|&xi| C64::new(-4.0 * PI * PI * xi * xi, 0.0)).collect();
    grid.inverse(&mut sym);
    let kernel: Vec<f64> = sym.iter().map(|v| v.re).collect();
    let blocks = local_blocks(wave);
    Mat::from_fn(2 * n, 2 * n, |i, j| {
        let (bi, ri) = (i / n, i % n);
        let (bj, cj) = (j / n, j % n);
        let d2 = kernel[(ri + n - cj) % n];
        let local = if ri == cj { blocks[ri][bi][bj] } else { 0.0 };
        match (bi, bj) {
            (0, 1) => local - d2,
            (1, 0) => local + d2,
            _ => local,
        }
    })
}

/// Matrix-free `𝓛 f`.
pub fn apply_operator(wave: &SolitaryWave, f: &Field) -> Result<Field> {
    f.ensure_same_grid(&wave.u_star)?;
    let lap = derivative(f, 2);
    let p = wave.params;
    let i = C64::new(0.0, 1.0);
    let values = f
        .values()
        .iter()
        .zip(lap.values())
        .zip(wave.u_star.values())
        .map(|((&v, &d), &u)| i * d + p.apply_l(v) + i * p.kappa * bracket(u, u, v))
        .collect();
    Field::from_values(f.grid(), values)
}

/// Eigenvalues of the dense matrix (no zero-mode bookkeeping).
pub fn dense_spectrum(wave: &SolitaryWave) -> Result<Vec<C64>> {
    assemble_matrix(wave)
        .as_ref()
        .eigenvalues()
        .map_err(|e| Error::LinearAlgebra(format!("{e:?}")))
}

/// Largest singular value of a dense matrix by power iteration on `AᵀA`.
pub fn operator_norm(a: &Mat<f64>) -> f64 {
    let n = a.ncols();
    let mut x = Mat::<f64>::from_fn(n, 1, |i, _| 1.0 + 0.01 * (i % 7) as f64);
    let mut est = 0.0;
    for _ in 0..60 {
        let nx = col_norm(&x);
        x = Mat::from_fn(n, 1, |i, _| x[(i, 0)] / nx);
        let y = a * &x;
        let new = col_norm(&y);
        x = a.transpose() * &y;
        if (new - est).abs() <= 1e-10 * new {
            est = new;
            break;
        }
        est = new;
    }
    est
}

fn col_norm(x: &Mat<f64>) -> f64 {
    (0..x.nrows()).map(|i| x[(i, 0)] * x[(i, 0)]).sum::<f64>().sqrt()
}

/// Dense eigendecomposition `A = V Λ W` with `W = V⁻¹`.
pub struct EigenData {
    v: Mat<c64>,
    w: Mat<c64>,
    lambda: Vec<C64>,
    zero: usize,
}

impl EigenData {
    pub fn eigenvalues(&self) -> &[C64] {
        &self.lambda
    }

    /// `W f` for the stacked field.
    pub fn coefficients(&self, f: &Field) -> Vec<C64> {
        let x = stacked_col(&RealField2::from_field(f).stacked());
        let c = &self.w * &x;
        (0..c.nrows()).map(|i| c[(i, 0)]).collect()
    }

    /// `Re V (e^{tΛ} c)`, optionally dropping one mode.
    pub fn synthesize(&self, coeff: &[C64], t: f64, drop: Option<usize>, grid: &Arc<Grid>) -> Field {
        let scaled = Mat::<c64>::from_fn(coeff.len(), 1, |k, _| {
            if Some(k) == drop {
                c64::new(0.0, 0.0)
            } else {
                coeff[k] * (self.lambda[k] * t).exp()
            }
        });
        let y = &self.v * &scaled;
        let stacked: Vec<f64> = (0..y.nrows()).map(|i| y[(i, 0)].re).collect();
        RealField2::from_stacked(&stacked).to_field(grid).expect("consistent sizes")
    }

    /// `P(t) Π x` on a stacked real vector.
    fn apply_stable(&self, x: &[f64], t: f64) -> Vec<f64> {
        let c = &self.w * &stacked_col(x);
        let e = Mat::<c64>::from_fn(c.nrows(), 1, |k, _| {
            if k == self.zero {
                c64::new(0.0, 0.0)
            } else {
                c[(k, 0)] * (self.lambda[k] * t).exp()
            }
        });
        let y = &self.v * &e;
        (0..y.nrows()).map(|i| y[(i, 0)].re).collect()
    }

    /// `(P(t) Π)ᵀ y` on a stacked real vector.
    fn apply_stable_transpose(&self, y: &[f64], t: f64) -> Vec<f64> {
        let c = self.v.transpose() * &stacked_col(y);
        let e = Mat::<c64>::from_fn(c.nrows(), 1, |k, _| {
            if k == self.zero {
                c64::new(0.0, 0.0)
            } else {
                c[(k, 0)] * (self.lambda[k] * t).exp()
            }
        });
        let x = self.w.transpose() * &e;
        (0..x.nrows()).map(|i| x[(i, 0)].re).collect()
    }
}

fn stacked_col(x: &[f64]) -> Mat<c64> {
    Mat::<c64>::from_fn(x.len(), 1, |i, _| c64::new(x[i], 0.0))
}

/// Real vector proportional to a complex one with a real direction.
fn realify(v: &[C64]) -> Vec<f64> {
    let k = (0..v.len()).max_by(|&a, &b| v[a].norm().total_cmp(&v[b].norm())).unwrap_or(0);
    let phase = if v[k].norm() > 0.0 { v[k].conj() / v[k].norm() } else { C64::new(1.0, 0.0) };
    v.iter().map(|z| (z * phase).re).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `(M, a)` with `||P(t) Π|| <= M e^{-a t}`; `a` is the spectral gap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub m: f64,
    pub a: f64,
    /// Resetting window `log(6 M) / a`.
    pub t_reset: f64,
    /// Samples `(t, ||P(t) Π||)` used for `M`.
    pub curve: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PackOptions {
    /// Largest `N` for the dense eigensolver.
    pub dense_limit: usize,
    pub fit_decay: bool,
    /// Time spacing of the `sup_t ||P(t)Π|| e^{at}` scan.
    pub fit_step: f64,
    /// Step of the `timestep` semigroup mode.
    pub timestep_dt: f64,
    pub krylov_dim: usize,
    /// Real shift for shift-invert Arnoldi.
    pub shift: f64,
}

impl Default for PackOptions {
    fn default() -> Self {
        PackOptions { dense_limit: 2048, fit_decay: true, fit_step: 0.1, timestep_dt: 0.01, krylov_dim: 80, shift: 0.05 }
    }
}

/// Immutable linearization data about one wave.
pub struct LinearizationPack {
    wave: SolitaryWave,
    matrix: Option<Mat<f64>>,
    eig: Option<EigenData>,
    stepper: LinearStepper,
    pub right_null: RealField2,
    pub left_null: RealField2,
    pub spectrum: Vec<C64>,
    pub zero_index: usize,
    pub gap_b: f64,
    pub decay: Option<DecayFit>,
    pub operator_norm: f64,
    pub method: String,
    /// `<u*_x, ψ>`.
    pairing: f64,
    ux_norm_sq: f64,
}

impl std::fmt::Debug for LinearizationPack {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LinearizationPack")
            .field("n_points", &self.wave.grid().n_points())
            .field("gap_b", &self.gap_b)
            .field("decay", &self.decay.as_ref().map(|d| (d.m, d.a)))
            .field("method", &self.method)
            .finish()
    }
}

pub fn build_linearization(wave: &SolitaryWave) -> Result<LinearizationPack> {
    build_linearization_with(wave, &PackOptions::default())
}

pub fn build_linearization_with(wave: &SolitaryWave, opts: &PackOptions) -> Result<LinearizationPack> {
    let n = wave.grid().n_points();
    let matrix = assemble_matrix(wave);
    let norm = operator_norm(&matrix);
    let stepper = LinearStepper::new(wave.grid(), local_blocks(wave), opts.timestep_dt);
    let ux = RealField2::from_field(&wave.u_star_x).stacked();
    let zero_tol = 1e-8 * norm;

    let (spectrum, zero, right, left, eig, method) = if n <= opts.dense_limit {
        let evd = matrix.as_ref().eigen().map_err(|e| Error::LinearAlgebra(format!("{e:?}")))?;
        let lambda: Vec<C64> = (0..2 * n).map(|k| evd.S().column_vector()[k]).collect();
        let v = evd.U().to_owned();
        let w = v.as_ref().partial_piv_lu().inverse();
        let zero = nearest_zero(&lambda, zero_tol)?;
        let right = realify(&(0..2 * n).map(|i| v[(i, zero)]).collect::<Vec<_>>());
        let left = realify(&(0..2 * n).map(|j| w[(zero, j)]).collect::<Vec<_>>());
        (lambda.clone(), zero, right, left, Some(EigenData { v, w, lambda, zero }), "dense".to_string())
    } else {
        let res = arnoldi::rightmost(&matrix, opts.shift, opts.krylov_dim)?;
        let zero = nearest_zero(&res.eigenvalues, zero_tol)?;
        let (right, left) = arnoldi::null_vectors(&matrix, res.eigenvalues[zero].re, &ux)?;
        (res.eigenvalues, zero, right, left, None, "shift_invert".to_string())
    };
    drop(matrix);

    let cos = dot(&right, &ux).abs() / (norm2(&right) * norm2(&ux));
    if cos < 0.999 {
        return Err(Error::Discretization(format!("zero mode has cosine {cos:.6} with u*_x")));
    }
    let scale = dot(&right, &ux) / dot(&right, &right);
    let right: Vec<f64> = right.iter().map(|v| v * scale).collect();
    let dx = wave.grid().dx();
    let pairing = dot(&ux, &left) * dx;
    if pairing.abs() < 1e-8 * norm2(&ux) * norm2(&left) * dx {
        return Err(Error::DegenerateSpectrum("zero mode pairs trivially with its adjoint".into()));
    }
    let max_re = spectrum
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != zero)
        .map(|(_, l)| l.re)
        .fold(f64::NEG_INFINITY, f64::max);
    let gap_b = -max_re;
    if !(gap_b > 0.0) {
        return Err(Error::DegenerateSpectrum(format!(
            "no spectral gap: an eigenvalue has real part {max_re:.4e} >= 0"
        )));
    }

    let mut pack = LinearizationPack {
        wave: wave.clone(),
        matrix: None,
        eig,
        stepper,
        right_null: RealField2::from_stacked(&right),
        left_null: RealField2::from_stacked(&left),
        spectrum,
        zero_index: zero,
        gap_b,
        decay: None,
        operator_norm: norm,
        method,
        pairing,
        ux_norm_sq: wave.u_star_x.norm_sq(),
    };
    if opts.fit_decay {
        pack.decay = Some(pack.fit_decay(opts.fit_step)?);
    }
    Ok(pack)
}

fn nearest_zero(lambda: &[C64], tol: f64) -> Result<usize> {
    let zero = (0..lambda.len())
        .min_by(|&a, &b| lambda[a].norm().total_cmp(&lambda[b].norm()))
        .ok_or_else(|| Error::DegenerateSpectrum("empty spectrum".into()))?;
    if lambda[zero].norm() > tol {
        return Err(Error::Discretization(format!(
            "no eigenvalue within {tol:.3e} of zero (closest {:.3e})",
            lambda[zero].norm()
        )));
    }
    let near = lambda.iter().filter(|l| l.norm() <= tol).count();
    if near > 1 {
        return Err(Error::DegenerateSpectrum(format!("{near} eigenvalues within {tol:.3e} of zero")));
    }
    Ok(zero)
}

impl LinearizationPack {
    pub fn wave(&self) -> &SolitaryWave {
        &self.wave
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.wave.grid()
    }

    pub fn eigen(&self) -> Option<&EigenData> {
        self.eig.as_ref()
    }

    pub fn linear_stepper(&self) -> &LinearStepper {
        &self.stepper
    }

    /// Dense matrix, rebuilt on demand.
    pub fn matrix(&self) -> Mat<f64> {
        self.matrix.clone().unwrap_or_else(|| assemble_matrix(&self.wave))
    }

    pub fn decay(&self) -> Result<&DecayFit> {
        self.decay.as_ref().ok_or_else(|| Error::Unsupported("pack built without a decay fit".into()))
    }

    /// Zero-mode coefficient `<f, ψ> / <u*_x, ψ>`.
    pub fn zero_coefficient(&self, f: &Field) -> f64 {
        let dx = f.grid().dx();
        let s: f64 = f
            .values()
            .iter()
            .zip(self.left_null.re.iter().zip(&self.left_null.im))
            .map(|(v, (r, i))| v.re * r + v.im * i)
            .sum();
        s * dx / self.pairing
    }

    fn fit_decay(&self, step: f64) -> Result<DecayFit> {
        let a = self.gap_b;
        let t_max = (10.0 / a).max(20.0);
        let n = (t_max / step).ceil() as usize;
        let dim = 2 * self.grid().n_points();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut curve = Vec::with_capacity(n + 1);
        match &self.eig {
            Some(eig) => {
                for k in 0..=n {
                    let t = k as f64 * step;
                    let (nrm, top) = power_norm(|v| eig.apply_stable(v, t), |v| eig.apply_stable_transpose(v, t), x, 40);
                    x = top;
                    curve.push((t, nrm));
                }
            }
            None => {
                // probe-based lower estimate along one propagated block
                let probes = self.probe_block(8, &mut rng);
                let mut states: Vec<Vec<C64>> = probes.iter().map(|f| self.project_pi_field(f).into_values()).collect();
                for k in 0..=n {
                    let t = k as f64 * step;
                    if k > 0 {
                        for s in states.iter_mut() {
                            self.stepper.propagate(s, step, false);
                        }
                    }
                    let best = states
                        .iter()
                        .zip(&probes)
                        .map(|(s, f)| (s.iter().map(|v| v.norm_sqr()).sum::<f64>()).sqrt() / (f.norm() / f.grid().dx().sqrt()))
                        .fold(0.0, f64::max);
                    curve.push((t, best));
                }
            }
        }
        let m = curve.iter().map(|(t, v)| v * (a * t).exp()).fold(0.0, f64::max);
        Ok(DecayFit { m, a, t_reset: (6.0 * m).ln() / a, curve })
    }

    fn probe_block(&self, k: usize, rng: &mut ChaCha8Rng) -> Vec<Field> {
        let grid = self.grid().clone();
        (0..k)
            .map(|_| {
                let c: Vec<(f64, f64, f64)> = (0..6).map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-3.0..3.0))).collect();
                Field::from_fn(&grid, |x| {
                    c.iter()
                        .enumerate()
                        .map(|(j, (a, b, x0))| C64::new(*a, *b) * (-(x - x0) * (x - x0) / (1.0 + j as f64 * 0.3)).exp())
                        .sum()
                })
            })
            .collect()
    }

    fn project_pi_field(&self, f: &Field) -> Field {
        let c = self.zero_coefficient(f);
        let mut out = f.clone();
        out.axpy(-c, &self.wave.u_star_x);
        out
    }

    /// `||u*_x||²`.
    pub fn ux_norm_sq(&self) -> f64 {
        self.ux_norm_sq
    }
}

/// Power iteration for the 2-norm of a real operator given with its transpose.
fn power_norm(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    apply_t: impl Fn(&[f64]) -> Vec<f64>,
    start: Vec<f64>,
    max_iter: usize,
) -> (f64, Vec<f64>) {
    let mut x = start;
    let mut est = 0.0;
    for _ in 0..max_iter {
        let nx = norm2(&x);
        x.iter_mut().for_each(|v| *v /= nx);
        let y = apply(&x);
        let new = norm2(&y);
        x = apply_t(&y);
        let done = (new - est).abs() <= 1e-7 * new;
        est = new;
        if done {
            break;
        }
    }
    let nx = norm2(&x);
    if nx > 0.0 {
        x.iter_mut().for_each(|v| *v /= nx);
    }
    (est, x)
}

/// `Π⁰ f = (<f, ψ> / <u*_x, ψ>) u*_x`.
pub fn project_pi0(f: &Field, pack: &LinearizationPack) -> Result<Field> {
    f.ensure_same_grid(&pack.wave.u_star)?;
    Ok(pack.wave.u_star_x.scaled(pack.zero_coefficient(f)))
}

/// `Π f = f - Π⁰ f`.
pub fn project_pi(f: &Field, pack: &LinearizationPack) -> Result<Field> {
    Ok(f.sub(&project_pi0(f, pack)?))
}

/// `𝓟 f = <f - Π f, u*_x> / ||u*_x||²`.
pub fn phase_functional(f: &Field, pack: &LinearizationPack) -> Result<f64> {
    let pi = project_pi(f, pack)?;
    Ok(f.sub(&pi).inner(&pack.wave.u_star_x) / pack.ux_norm_sq)
}

/// Empirical Strichartz-type constants of the linearized flow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrichartzEstimate {
    /// `max_f ||P(.)Π f||_{L^r(0,T;L^p)} / ||f||` over the probes.
    pub pi_constant: f64,
    /// `max_f ||P(.)Π⁰ f||_{C([0,T];L^p)} / ||Π⁰ f||`.
    pub pi0_constant: f64,
    /// `||u*_x||_{L^p} / ||u*_x||_{L²}`.
    pub pi0_bound: f64,
}

/// Probes are random smooth unit fields drawn from `seed`; the time mesh has spacing `dt`.
pub fn empirical_strichartz(
    pack: &LinearizationPack,
    pair: AdmissiblePair,
    n_samples: usize,
    t_end: f64,
    dt: f64,
    seed: u64,
) -> Result<StrichartzEstimate> {
    if pair.r() == 4.0 {
        return Err(invalid("the endpoint pair (4, inf) is excluded"));
    }
    if n_samples == 0 || !(t_end > 0.0) || !(dt > 0.0) {
        return Err(invalid("need samples, t_end > 0 and dt > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes = pack.probe_block(n_samples, &mut rng);
    let steps = (t_end / dt).round() as usize;
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();
    let grid = pack.grid().clone();
    let mut pi_c: f64 = 0.0;
    let mut pi0_c: f64 = 0.0;
    for f in &probes {
        let f = f.scaled(1.0 / f.norm());
        let (norms, norms0) = match pack.eigen() {
            Some(eig) => {
                let c = eig.coefficients(&f);
                let mut c0 = vec![C64::new(0.0, 0.0); c.len()];
                c0[eig.zero] = c[eig.zero];
                let mut a = Vec::with_capacity(times.len());
                let mut b = Vec::with_capacity(times.len());
                for &t in &times {
                    a.push(lp_norm(&eig.synthesize(&c, t, Some(eig.zero), &grid), pair.p())?);
                    b.push(lp_norm(&eig.synthesize(&c0, t, None, &grid), pair.p())?);
                }
                (a, b)
            }
            None => {
                let mut s = pack.project_pi_field(&f);
                let mut s0 = project_pi0(&f, pack)?;
                let mut a = Vec::with_capacity(times.len());
                let mut b = Vec::with_capacity(times.len());
                for k in 0..times.len() {
                    if k > 0 {
                        pack.stepper.propagate(s.values_mut(), dt, false);
                        pack.stepper.propagate(s0.values_mut(), dt, false);
                    }
                    a.push(lp_norm(&s, pair.p())?);
                    b.push(lp_norm(&s0, pair.p())?);
                }
                (a, b)
            }
        };
        pi_c = pi_c.max(mixed_norm_of_samples(&times, &norms, pair.r(), 0.0, t_end)?);
        let p0 = project_pi0(&f, pack)?.norm();
        if p0 > 0.0 {
            pi0_c = pi0_c.max(norms0.iter().copied().fold(0.0, f64::max) / p0);
        }
    }
    let ux = &pack.wave.u_star_x;
    Ok(StrichartzEstimate {
        pi_constant: pi_c,
        pi0_constant: pi0_c,
        pi0_bound: lp_norm(ux, pair.p())? / ux.norm(),
    })
}

/// Serializable digest of a pack, used as an on-disk cache.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackSummary {
    pub eigenvalues: Vec<(f64, f64)>,
    pub zero_index: usize,
    pub gap_b: f64,
    pub decay: Option<DecayFit>,
    pub operator_norm: f64,
    pub method: String,
    pub right_null: RealField2,
    pub left_null: RealField2,
}

impl LinearizationPack {
    pub fn summary(&self) -> PackSummary {
        PackSummary {
            eigenvalues: self.spectrum.iter().map(|l| (l.re, l.im)).collect(),
            zero_index: self.zero_index,
            gap_b: self.gap_b,
            decay: self.decay.clone(),
            operator_norm: self.operator_norm,
            method: self.method.clone(),
            right_null: self.right_null.clone(),
            left_null: self.left_null.clone(),
        }
    }

    /// Rebuilds a pack from a cached summary; the semigroup falls back to time stepping.
    pub fn from_summary(wave: &SolitaryWave, s: PackSummary, opts: &PackOptions) -> Result<Self> {
        let n = wave.grid().n_points();
        if s.right_null.re.len() != n || s.left_null.re.len() != n {
            return Err(Error::Format("cached pack does not match the grid".into()));
        }
        let ux = RealField2::from_field(&wave.u_star_x).stacked();
        let pairing = dot(&ux, &s.left_null.stacked()) * wave.grid().dx();
        Ok(LinearizationPack {
            wave: wave.clone(),
            matrix: None,
            eig: None,
            stepper: LinearStepper::new(wave.grid(), local_blocks(wave), opts.timestep_dt),
            right_null: s.right_null,
            left_null: s.left_null,
            spectrum: s.eigenvalues.iter().map(|&(r, i)| C64::new(r, i)).collect(),
            zero_index: s.zero_index,
            gap_b: s.gap_b,
            decay: s.decay,
            operator_norm: s.operator_norm,
            method: format!("{} (cached)", s.method),
            pairing,
            ux_norm_sq: wave.u_star_x.norm_sq(),
        })
    }
}

/// Where a pack handed out by [`PackCache`] came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CacheSource {
    Memory,
    Disk,
    Built,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEvent {
    pub key: String,
    pub source: CacheSource,
    pub seconds: f64,
}

/// Cache of packs keyed by wave parameters, grid and build options,
/// optionally persisted as JSON summaries under a directory.
pub struct PackCache {
    opts: PackOptions,
    dir: Option<PathBuf>,
    packs: Mutex<BTreeMap<String, Arc<LinearizationPack>>>,
    events: Mutex<Vec<CacheEvent>>,
}

impl PackCache {
    pub fn new(opts: PackOptions) -> Self {
        PackCache { opts, dir: None, packs: Mutex::new(BTreeMap::new()), events: Mutex::new(Vec::new()) }
    }

    pub fn with_disk(opts: PackOptions, dir: impl Into<PathBuf>) -> Self {
        PackCache { dir: Some(dir.into()), ..Self::new(opts) }
    }

    pub fn options(&self) -> &PackOptions {
        &self.opts
    }

    pub fn key(wave: &SolitaryWave, opts: &PackOptions) -> String {
        let g = wave.grid();
        let desc = serde_json::json!({
            "params": wave.params,
            "n_points": g.n_points(),
            "domain_length": g.domain_length(),
            "shift": wave.shift,
            "options": opts,
        });
        hex::encode(Sha256::digest(desc.to_string().as_bytes()))
    }

    pub fn disk_path(&self, wave: &SolitaryWave) -> Option<PathBuf> {
        let key = Self::key(wave, &self.opts);
        self.dir.as_ref().map(|d| d.join(format!("pack-{}.json", &key[..32])))
    }

    pub fn get_or_build(&self, wave: &SolitaryWave) -> Result<Arc<LinearizationPack>> {
        let start = std::time::Instant::now();
        let key = Self::key(wave, &self.opts);
        let found = self.packs.lock().expect("pack cache poisoned").get(&key).cloned();
        let (pack, source) = match found {
            Some(p) => (p, CacheSource::Memory),
            None => {
                let (pack, source) = self.load_or_build(wave)?;
                self.packs.lock().expect("pack cache poisoned").insert(key.clone(), pack.clone());
                (pack, source)
            }
        };
        let seconds = start.elapsed().as_secs_f64();
        log::debug!("pack {} from {:?} in {:.3} s", &key[..12], source, seconds);
        self.events.lock().expect("pack cache poisoned").push(CacheEvent { key, source, seconds });
        Ok(pack)
    }

    fn load_or_build(&self, wave: &SolitaryWave) -> Result<(Arc<LinearizationPack>, CacheSource)> {
        let path = self.disk_path(wave);
        if let Some(text) = path.as_ref().and_then(|p| std::fs::read_to_string(p).ok()) {
            let summary: PackSummary = serde_json::from_str(&text)?;
            return Ok((Arc::new(LinearizationPack::from_summary(wave, summary, &self.opts)?), CacheSource::Disk));
        }
        let pack = build_linearization_with(wave, &self.opts)?;
        if let Some(path) = path {
            if let Some(d) = path.parent() {
                std::fs::create_dir_all(d)?;
            }
            std::fs::write(&path, serde_json::to_string(&pack.summary())?)?;
        }
        Ok((Arc::new(pack), CacheSource::Built))
    }

    /// Lookups so far, in order.
    pub fn events(&self) -> Vec<CacheEvent> {
        self.events.lock().expect("pack cache poisoned").clone()
    }

    pub fn insert(&self, pack: Arc<LinearizationPack>) {
        let key = Self::key(pack.wave(), &self.opts);
        self.packs.lock().expect("pack cache poisoned").insert(key, pack);
    }

    pub fn len(&self) -> usize {
        self.packs.lock().expect("pack cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for PackCache {
    fn default() -> Self {
        PackCache::new(PackOptions::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_params, solitary_wave};
    use std::sync::OnceLock;

    fn pack() -> &'static LinearizationPack {
        static PACK: OnceLock<LinearizationPack> = OnceLock::new();
        PACK.get_or_init(|| {
            let p = make_params(1.0, 0.8, 1.0, 1.1, 0.8).unwrap();
            let g = Grid::new(512, 60.0).unwrap();
            let w = solitary_wave(&p, &g, 0.0).unwrap();
            build_linearization(&w).unwrap()
        })
    }

    fn bump(g: &Arc<Grid>) -> Field {
        Field::from_fn(g, |x| C64::new((-(x - 0.7) * (x - 0.7)).exp(), 0.3 * x * (-x * x / 2.0).exp()))
    }

    #[test]
    fn matrix_matches_matrix_free() {
        let pk = pack();
        let f = bump(pk.grid());
        let a = pk.matrix();
        let x = RealField2::from_field(&f).stacked();
        let y = &a * Mat::from_fn(x.len(), 1, |i, _| x[i]);
        let y: Vec<f64> = (0..y.nrows()).map(|i| y[(i, 0)]).collect();
        let z = RealField2::from_field(&apply_operator(pk.wave(), &f).unwrap()).stacked();
        let err = y.iter().zip(&z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9 * pk.operator_norm, "{err}");
    }

    #[test]
    fn translation_mode_is_null() {
        let pk = pack();
        let r = apply_operator(pk.wave(), &pk.wave().u_star_x).unwrap();
        assert!(r.norm() < 1e-8 * pk.wave().u_star_x.norm(), "{}", r.norm());
        let right = pk.right_null.to_field(pk.grid()).unwrap();
        assert!(right.sub(&pk.wave().u_star_x).norm() < 1e-6 * right.norm());
    }

    #[test]
    fn projections() {
        let pk = pack();
        let ux = &pk.wave().u_star_x;
        assert!(project_pi0(ux, pk).unwrap().sub(ux).norm() < 1e-10 * ux.norm());
        assert!((phase_functional(ux, pk).unwrap() - 1.0).abs() < 1e-10);
        let f = bump(pk.grid());
        let p1 = project_pi(&f, pk).unwrap();
        let p2 = project_pi(&p1, pk).unwrap();
        assert!(p1.sub(&p2).norm() < 1e-12 * f.norm());
        assert!(phase_functional(&p1, pk).unwrap().abs() < 1e-12);
    }

    #[test]
    fn semigroup_modes_agree() {
        let pk = pack();
        let f = bump(pk.grid());
        let a = apply_semigroup(&f, 1.5, pk, "matrix_exp").unwrap();
        let b = apply_semigroup(&f, 1.5, pk, "timestep").unwrap();
        assert!(a.sub(&b).norm() < 1e-6 * f.norm(), "{}", a.sub(&b).norm());
        assert_eq!(apply_semigroup(&f, 0.0, pk, "matrix_exp").unwrap().sub(&f).norm() < 1e-10, true);
        assert!(apply_semigroup(&f, -1.0, pk, "timestep").is_err());
        assert!(matches!(apply_semigroup(&f, 1.0, pk, "magic"), Err(Error::UnknownStrategy { .. })));
    }

    #[test]
    fn transpose_stepper_is_adjoint() {
        let pk = pack();
        let f = bump(pk.grid());
        let g = Field::from_real_fn(pk.grid(), |x| (-(x + 1.0) * (x + 1.0) / 3.0).exp());
        let mut pf = f.clone();
        pk.linear_stepper().propagate(pf.values_mut(), 0.7, false);
        let mut ptg = g.clone();
        pk.linear_stepper().propagate(ptg.values_mut(), 0.7, true);
        assert!((pf.inner(&g) - f.inner(&ptg)).abs() < 1e-12);
    }

    #[test]
    fn decay_constants() {
        let pk = pack();
        let d = pk.decay().unwrap();
        eprintln!("b={} M={} T={}", d.a, d.m, d.t_reset);
        assert!(d.m >= 1.0);
        for (t, v) in &d.curve {
            assert!(*v <= d.m * (-d.a * t).exp() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn disk_cache_roundtrip_is_exact() {
        let p = make_params(1.0, 0.8, 1.0, 1.1, 0.8).unwrap();
        let g = Grid::new(512, 60.0).unwrap();
        let w = solitary_wave(&p, &g, 0.0).unwrap();
        let dir = std::env::temp_dir().join(format!("spfnls-pack-{}", std::process::id()));
        let opts = PackOptions { fit_decay: false, ..PackOptions::default() };
        let first = PackCache::with_disk(opts.clone(), &dir);
        let built = first.get_or_build(&w).unwrap();
        first.get_or_build(&w).unwrap();
        let second = PackCache::with_disk(opts, &dir);
        let loaded = second.get_or_build(&w).unwrap();
        let sources: Vec<CacheSource> = first.events().iter().chain(&second.events()).map(|e| e.source).collect();
        assert_eq!(sources, vec![CacheSource::Built, CacheSource::Memory, CacheSource::Disk]);
        let (b, l) = (built.summary(), loaded.summary());
        assert_eq!((&b.eigenvalues, &b.right_null, &b.left_null, b.gap_b), (&l.eigenvalues, &l.right_null, &l.left_null, l.gap_b));
        assert!(l.method.ends_with("(cached)"));
        let f = bump(&g);
        assert_eq!(built.zero_coefficient(&f), loaded.zero_coefficient(&f));
        std::fs::remove_dir_all(&dir).ok();
    }
}
