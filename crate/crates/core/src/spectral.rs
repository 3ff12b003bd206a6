//! Periodic grid, discrete Fourier plumbing, the free Schrödinger group and
//! the Lebesgue, Bessel-potential and mixed space-time norms.
//!
//! The box `[-L/2, L/2)` stands in for the real line. Frequencies are ordinary
//! (cycles per unit length), so the free group has symbol `exp(-4 pi^2 i xi^2 t)`
//! and `d/dx` has symbol `2 pi i xi`.

use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use num_complex::Complex64 as C64;
use rustfft::{Fft, FftPlanner};

use crate::error::{invalid, Error, Result};

/// Grid size as it appears in configuration files.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub n_points: usize,
    pub domain_length: f64,
}

impl GridSpec {
    pub fn build(&self) -> Result<Arc<Grid>> {
        Grid::new(self.n_points, self.domain_length)
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { n_points: 1024, domain_length: 80.0 }
    }
}

/// Uniform periodic grid with cached FFT plans.
pub struct Grid {
    n: usize,
    length: f64,
    dx: f64,
    x: Vec<f64>,
    freqs: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch_len: usize,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid")
            .field("n_points", &self.n)
            .field("domain_length", &self.length)
            .finish()
    }
}

impl Grid {
    pub fn new(n_points: usize, domain_length: f64) -> Result<Arc<Grid>> {
        if n_points < 4 || !n_points.is_power_of_two() {
            return Err(invalid(format!("n_points = {n_points} must be a power of two >= 4")));
        }
        if !(domain_length.is_finite() && domain_length > 0.0) {
            return Err(invalid(format!("domain_length = {domain_length} must be positive")));
        }
        let dx = domain_length / n_points as f64;
        let x = (0..n_points).map(|j| -0.5 * domain_length + j as f64 * dx).collect();
        let freqs = (0..n_points)
            .map(|k| {
                let k = if k < n_points / 2 { k as f64 } else { k as f64 - n_points as f64 };
                k / domain_length
            })
            .collect();
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n_points);
        let inv = planner.plan_fft_inverse(n_points);
        let scratch_len = fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len());
        Ok(Arc::new(Grid { n: n_points, length: domain_length, dx, x, freqs, fwd, inv, scratch_len }))
    }

    pub fn n_points(&self) -> usize {
        self.n
    }

    pub fn domain_length(&self) -> f64 {
        self.length
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    /// Ordinary DFT frequencies in `numpy.fft.fftfreq` order.
    pub fn frequencies(&self) -> &[f64] {
        &self.freqs
    }

    /// Index of the node sitting at `x = 0`.
    pub fn origin_index(&self) -> usize {
        self.n / 2
    }

    pub fn same_as(&self, other: &Grid) -> bool {
        self.n == other.n && self.length == other.length
    }

    pub fn scratch(&self) -> Vec<C64> {
        vec![C64::new(0.0, 0.0); self.scratch_len]
    }

    pub fn forward_with(&self, buf: &mut [C64], scratch: &mut [C64]) {
        self.fwd.process_with_scratch(buf, scratch);
    }

    /// Normalized inverse transform.
    pub fn inverse_with(&self, buf: &mut [C64], scratch: &mut [C64]) {
        self.inv.process_with_scratch(buf, scratch);
        let s = 1.0 / self.n as f64;
        for v in buf.iter_mut() {
            *v *= s;
        }
    }

    pub fn forward(&self, buf: &mut [C64]) {
        self.forward_with(buf, &mut self.scratch());
    }

    pub fn inverse(&self, buf: &mut [C64]) {
        self.inverse_with(buf, &mut self.scratch());
    }

    /// Applies a Fourier multiplier in place.
    pub fn apply_multiplier_with(&self, buf: &mut [C64], mult: &[C64], scratch: &mut [C64]) {
        self.forward_with(buf, scratch);
        for (v, m) in buf.iter_mut().zip(mult) {
            *v *= m;
        }
        self.inverse_with(buf, scratch);
    }

    /// Symbol of `S(t)`.
    pub fn free_symbol(&self, t: f64) -> Vec<C64> {
        self.freqs
            .iter()
            .map(|&xi| C64::from_polar(1.0, -4.0 * PI * PI * xi * xi * t))
            .collect()
    }

    /// Symbol of the `m`-th derivative. The Nyquist mode is dropped for odd `m`.
    pub fn derivative_symbol(&self, m: u32) -> Vec<C64> {
        let nyq = self.n / 2;
        self.freqs
            .iter()
            .enumerate()
            .map(|(k, &xi)| {
                if m % 2 == 1 && k == nyq {
                    C64::new(0.0, 0.0)
                } else {
                    C64::new(0.0, 2.0 * PI * xi).powu(m)
                }
            })
            .collect()
    }

    /// Symbol of `f -> f(. + a)`; the Nyquist entry is kept real.
    pub fn translation_symbol(&self, a: f64) -> Vec<C64> {
        let nyq = self.n / 2;
        self.freqs
            .iter()
            .enumerate()
            .map(|(k, &xi)| {
                let ph = 2.0 * PI * xi * a;
                if k == nyq {
                    C64::new(ph.cos(), 0.0)
                } else {
                    C64::from_polar(1.0, ph)
                }
            })
            .collect()
    }
}

/// Complex samples on a grid.
#[derive(Clone)]
pub struct Field {
    grid: Arc<Grid>,
    values: Vec<C64>,
}

impl fmt::Debug for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Field").field("grid", &self.grid).field("l2", &self.norm()).finish()
    }
}

impl Field {
    pub fn zeros(grid: &Arc<Grid>) -> Field {
        Field { grid: grid.clone(), values: vec![C64::new(0.0, 0.0); grid.n_points()] }
    }

    pub fn from_values(grid: &Arc<Grid>, values: Vec<C64>) -> Result<Field> {
        if values.len() != grid.n_points() {
            return Err(invalid(format!(
                "expected {} samples, got {}",
                grid.n_points(),
                values.len()
            )));
        }
        Ok(Field { grid: grid.clone(), values })
    }

    pub fn from_fn(grid: &Arc<Grid>, mut f: impl FnMut(f64) -> C64) -> Field {
        Field { grid: grid.clone(), values: grid.x().iter().map(|&x| f(x)).collect() }
    }

    pub fn from_real_fn(grid: &Arc<Grid>, mut f: impl FnMut(f64) -> f64) -> Field {
        Field::from_fn(grid, |x| C64::new(f(x), 0.0))
    }

    pub fn from_real(grid: &Arc<Grid>, re: &[f64]) -> Result<Field> {
        Field::from_values(grid, re.iter().map(|&r| C64::new(r, 0.0)).collect())
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [C64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<C64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    pub fn ensure_same_grid(&self, other: &Field) -> Result<()> {
        if Arc::ptr_eq(&self.grid, &other.grid) || self.grid.same_as(&other.grid) {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.grid.dx()
    }

    /// L² norm.
    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Real L² pairing `Re ∫ f conj(g) dx`.
    pub fn inner(&self, other: &Field) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum::<f64>()
            * self.grid.dx()
    }

    pub fn scaled(&self, a: f64) -> Field {
        Field { grid: self.grid.clone(), values: self.values.iter().map(|v| v * a).collect() }
    }

    pub fn scaled_c(&self, a: C64) -> Field {
        Field { grid: self.grid.clone(), values: self.values.iter().map(|v| v * a).collect() }
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &Field) {
        for (s, o) in self.values.iter_mut().zip(&other.values) {
            *s += o * a;
        }
    }

    pub fn add(&self, other: &Field) -> Field {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn sub(&self, other: &Field) -> Field {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn max_abs_imag(&self) -> f64 {
        self.values.iter().map(|v| v.im.abs()).fold(0.0, f64::max)
    }

    /// Circular shift by whole nodes: `out[j] = self[j - k]`.
    pub fn roll(&self, k: isize) -> Field {
        let n = self.len() as isize;
        let values = (0..n).map(|j| self.values[(j - k).rem_euclid(n) as usize]).collect();
        Field { grid: self.grid.clone(), values }
    }

    fn with_multiplier(&self, mult: &[C64]) -> Field {
        let mut out = self.clone();
        self.grid.apply_multiplier_with(&mut out.values, mult, &mut self.grid.scratch());
        out
    }
}

/// Exponent pair `(r, p)` with `2/r + 1/p = 1/2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdmissiblePair {
    r: f64,
    p: f64,
}

impl AdmissiblePair {
    pub fn new(r: f64, p: f64) -> Result<Self> {
        if !(r >= 4.0) || !(p >= 2.0) {
            return Err(invalid(format!("({r}, {p}) needs r >= 4 and p >= 2")));
        }
        let lhs = if r.is_infinite() { 0.0 } else { 2.0 / r } + if p.is_infinite() { 0.0 } else { 1.0 / p };
        if (lhs - 0.5).abs() > 1e-12 {
            return Err(invalid(format!("({r}, {p}) is not admissible: 2/r + 1/p = {lhs}")));
        }
        Ok(AdmissiblePair { r, p })
    }

    /// `(inf, 2)`.
    pub fn energy() -> Self {
        AdmissiblePair { r: f64::INFINITY, p: 2.0 }
    }

    /// `(6, 6)`.
    pub fn diagonal() -> Self {
        AdmissiblePair { r: 6.0, p: 6.0 }
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn p(&self) -> f64 {
        self.p
    }
}

pub fn apply_free_group(f: &Field, t: f64) -> Result<Field> {
    if !t.is_finite() {
        return Err(invalid(format!("free group time {t} is not finite")));
    }
    if t == 0.0 {
        return Ok(f.clone());
    }
    Ok(f.with_multiplier(&f.grid.free_symbol(t)))
}

pub fn lp_norm(f: &Field, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(invalid(format!("L^p exponent {p} < 1")));
    }
    Ok(lp_norm_slice(f.values(), f.grid().dx(), p))
}

pub(crate) fn lp_norm_slice(v: &[C64], dx: f64, p: f64) -> f64 {
    if p.is_infinite() {
        return v.iter().map(|z| z.norm()).fold(0.0, f64::max);
    }
    if p == 2.0 {
        return (v.iter().map(|z| z.norm_sqr()).sum::<f64>() * dx).sqrt();
    }
    (v.iter().map(|z| z.norm().powf(p)).sum::<f64>() * dx).powf(1.0 / p)
}

pub fn hs_norm(f: &Field, s: f64) -> Result<f64> {
    if !(s >= 0.0) {
        return Err(invalid(format!("Sobolev index {s} < 0")));
    }
    if s == 0.0 {
        return lp_norm(f, 2.0);
    }
    let mult: Vec<C64> = f
        .grid()
        .frequencies()
        .iter()
        .map(|&xi| C64::new((1.0 + 4.0 * PI * PI * xi * xi).powf(0.5 * s), 0.0))
        .collect();
    Ok(f.with_multiplier(&mult).norm())
}

/// Spectral derivative of order `m`.
pub fn derivative(f: &Field, m: u32) -> Field {
    f.with_multiplier(&f.grid().derivative_symbol(m))
}

/// Spectral translate `x -> f(x + a)`.
pub fn translate(f: &Field, a: f64) -> Field {
    f.with_multiplier(&f.grid().translation_symbol(a))
}

/// `L^r(t0, t1; L^p)` norm of a path sampled on a uniform time mesh.
pub fn mixed_norm(times: &[f64], path: &[Field], pair: AdmissiblePair, t0: f64, t1: f64) -> Result<f64> {
    if times.len() != path.len() {
        return Err(invalid("times and path differ in length"));
    }
    let norms: Vec<f64> = path.iter().map(|f| lp_norm_slice(f.values(), f.grid().dx(), pair.p())).collect();
    mixed_norm_of_samples(times, &norms, pair.r(), t0, t1)
}

/// Time part of [`mixed_norm`] from precomputed spatial norms.
/// Left-endpoint Riemann sum; `r = inf` is a max over the samples in the window.
pub fn mixed_norm_of_samples(times: &[f64], norms: &[f64], r: f64, t0: f64, t1: f64) -> Result<f64> {
    if !(t0 < t1) {
        return Err(invalid(format!("empty time window [{t0}, {t1}]")));
    }
    if times.len() < 2 || times.len() != norms.len() {
        return Err(invalid("time mesh needs at least two samples"));
    }
    let dt = times[1] - times[0];
    let tol = 1e-9 * dt;
    if r.is_infinite() {
        let sel: Vec<f64> = times
            .iter()
            .zip(norms)
            .filter(|(t, _)| **t >= t0 - tol && **t <= t1 + tol)
            .map(|(_, n)| *n)
            .collect();
        if sel.is_empty() {
            return Err(invalid("no samples inside the window"));
        }
        return Ok(sel.into_iter().fold(0.0, f64::max));
    }
    let mut acc = 0.0;
    let mut count = 0;
    for (t, n) in times.iter().zip(norms) {
        if *t >= t0 - tol && *t < t1 - 0.5 * dt {
            acc += n.powf(r) * dt;
            count += 1;
        }
    }
    if count == 0 {
        return Err(invalid("no samples inside the window"));
    }
    Ok(acc.powf(1.0 / r))
}

/// Largest ratio `||S(.)f||_{L^r(0,T;L^p)} / ||f||` over the probes, on a mesh of `n_steps`.
pub fn free_strichartz_estimate(probes: &[Field], pair: AdmissiblePair, t_end: f64, n_steps: usize) -> Result<f64> {
    if probes.is_empty() || n_steps == 0 {
        return Err(invalid("need probes and a nonempty mesh"));
    }
    let h = t_end / n_steps as f64;
    let times: Vec<f64> = (0..=n_steps).map(|k| k as f64 * h).collect();
    let mut best: f64 = 0.0;
    for f in probes {
        let grid = f.grid();
        let step = grid.free_symbol(h);
        let mut scratch = grid.scratch();
        let mut spec = f.values().to_vec();
        grid.forward_with(&mut spec, &mut scratch);
        let mut norms = Vec::with_capacity(times.len());
        for _ in 0..=n_steps {
            let mut phys = spec.clone();
            grid.inverse_with(&mut phys, &mut scratch);
            norms.push(lp_norm_slice(&phys, grid.dx(), pair.p()));
            for (v, m) in spec.iter_mut().zip(&step) {
                *v *= m;
            }
        }
        let val = mixed_norm_of_samples(&times, &norms, pair.r(), 0.0, t_end)?;
        best = best.max(val / f.norm());
    }
    Ok(best)
}

/// Writes `n_points` (u64), `domain_length` (f64), then interleaved re/im, all little-endian.
pub fn write_field_binary<W: Write>(f: &Field, w: &mut W) -> Result<()> {
    w.write_all(&(f.len() as u64).to_le_bytes())?;
    w.write_all(&f.grid().domain_length().to_le_bytes())?;
    for v in f.values() {
        w.write_all(&v.re.to_le_bytes())?;
        w.write_all(&v.im.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_field_binary<R: Read>(r: &mut R) -> Result<Field> {
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8)?;
    let length = f64::from_le_bytes(b8);
    let grid = Grid::new(n, length)?;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b8)?;
        let re = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        values.push(C64::new(re, f64::from_le_bytes(b8)));
    }
    Field::from_values(&grid, values)
}

pub fn write_field_csv<W: Write>(f: &Field, w: &mut W) -> Result<()> {
    writeln!(w, "x,re,im")?;
    for (x, v) in f.grid().x().iter().zip(f.values()) {
        writeln!(w, "{x:.17e},{:.17e},{:.17e}", v.re, v.im)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bump(grid: &Arc<Grid>) -> Field {
        Field::from_fn(grid, |x| C64::new((-x * x).exp(), 0.3 * x * (-x * x / 2.0).exp()))
    }

    #[test]
    fn grid_layout() {
        let g = Grid::new(16, 8.0).unwrap();
        assert_eq!(g.dx() * 16.0, 8.0);
        assert_eq!(g.x()[g.origin_index()], 0.0);
        assert_eq!(g.frequencies()[8], -1.0);
        assert_eq!(g.frequencies()[1], -g.frequencies()[15]);
        assert!(Grid::new(12, 1.0).is_err());
        assert!(Grid::new(16, -1.0).is_err());
    }

    #[test]
    fn free_group_identity_and_unitary() {
        let g = Grid::new(128, 20.0).unwrap();
        let f = bump(&g);
        let same = apply_free_group(&f, 0.0).unwrap();
        assert_eq!(same.values(), f.values());
        let moved = apply_free_group(&f, 0.37).unwrap();
        assert!((moved.norm() - f.norm()).abs() < 1e-13);
        assert!(apply_free_group(&f, f64::NAN).is_err());
    }

    #[test]
    fn lp_norm_examples() {
        let g = Grid::new(64, 10.0).unwrap();
        let one = Field::from_real_fn(&g, |_| 1.0);
        assert!((lp_norm(&one, 2.0).unwrap() - 10f64.sqrt()).abs() < 1e-13);
        let g = Grid::new(1024, 80.0).unwrap();
        let sech = Field::from_real_fn(&g, |x| 1.0 / x.cosh());
        assert!((lp_norm(&sech, 2.0).unwrap() - 2f64.sqrt()).abs() < 1e-6);
        assert!((lp_norm(&sech, f64::INFINITY).unwrap() - 1.0).abs() < 1e-15);
        assert!(lp_norm(&sech, 0.5).is_err());
    }

    #[test]
    fn hs_norm_examples() {
        let g = Grid::new(64, 10.0).unwrap();
        let f = bump(&g);
        assert_eq!(hs_norm(&f, 0.0).unwrap(), lp_norm(&f, 2.0).unwrap());
        let xi0 = g.frequencies()[3];
        let mode = Field::from_fn(&g, |x| C64::from_polar(1.0 / 10f64.sqrt(), 2.0 * PI * xi0 * x));
        let want = (1.0 + 4.0 * PI * PI * xi0 * xi0).sqrt();
        assert!((hs_norm(&mode, 1.0).unwrap() - want).abs() < 1e-12);
        assert!(hs_norm(&f, -1.0).is_err());
    }

    #[test]
    fn mixed_norm_constant_path() {
        let g = Grid::new(64, 10.0).unwrap();
        let f = bump(&g);
        let times: Vec<f64> = (0..=20).map(|k| k as f64 / 20.0).collect();
        let path = vec![f.clone(); times.len()];
        let e = mixed_norm(&times, &path, AdmissiblePair::energy(), 0.0, 1.0).unwrap();
        assert!((e - f.norm()).abs() < 1e-14);
        let d = mixed_norm(&times, &path, AdmissiblePair::diagonal(), 0.0, 1.0).unwrap();
        assert!((d - lp_norm(&f, 6.0).unwrap()).abs() < 1e-12);
        assert!(mixed_norm(&times, &path, AdmissiblePair::energy(), 1.0, 1.0).is_err());
    }

    #[test]
    fn admissible_pairs() {
        assert!(AdmissiblePair::new(8.0, 4.0).is_ok());
        assert!(AdmissiblePair::new(f64::INFINITY, 2.0).is_ok());
        assert!(AdmissiblePair::new(4.0, f64::INFINITY).is_ok());
        assert!(AdmissiblePair::new(6.0, 4.0).is_err());
        assert!(AdmissiblePair::new(2.0, 2.0).is_err());
    }

    #[test]
    fn derivative_and_translate() {
        let g = Grid::new(256, 40.0).unwrap();
        let f = Field::from_real_fn(&g, |x| (-x * x).exp());
        let d = derivative(&f, 1);
        let want = Field::from_real_fn(&g, |x| -2.0 * x * (-x * x).exp());
        assert!(d.sub(&want).max_abs() < 1e-12);
        let k = 7;
        let moved = translate(&f, -(k as f64) * g.dx());
        assert!(moved.sub(&f.roll(k)).max_abs() < 1e-13);
    }

    #[test]
    fn binary_round_trip() {
        let g = Grid::new(32, 6.0).unwrap();
        let f = bump(&g);
        let mut buf = Vec::new();
        write_field_binary(&f, &mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 32 * 16);
        let back = read_field_binary(&mut buf.as_slice()).unwrap();
        assert_eq!(back.values(), f.values());
        assert_eq!(back.grid().domain_length(), 6.0);
    }

    fn random_field(g: &Arc<Grid>, seed: u64) -> Field {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let w = Field::from_fn(g, |_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        // smooth it so high modes do not dominate
        let mult: Vec<C64> = g
            .frequencies()
            .iter()
            .map(|&xi| C64::new((-xi * xi).exp(), 0.0))
            .collect();
        w.with_multiplier(&mult)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn group_inverse(seed in 0u64..1000, t in -3.0f64..3.0) {
            let g = Grid::new(128, 20.0).unwrap();
            let f = random_field(&g, seed);
            let back = apply_free_group(&apply_free_group(&f, t).unwrap(), -t).unwrap();
            prop_assert!(back.sub(&f).norm() <= 1e-12 * f.norm());
        }

        #[test]
        fn group_preserves_hs(seed in 0u64..1000, t in 0.0f64..2.0, s in 0.0f64..3.0) {
            let g = Grid::new(128, 20.0).unwrap();
            let f = random_field(&g, seed);
            let a = hs_norm(&apply_free_group(&f, t).unwrap(), s).unwrap();
            let b = hs_norm(&f, s).unwrap();
            prop_assert!((a - b).abs() <= 1e-10 * b);
        }

        #[test]
        fn hs_monotone(seed in 0u64..1000, s1 in 0.0f64..2.0, ds in 0.0f64..2.0) {
            let g = Grid::new(64, 10.0).unwrap();
            let f = random_field(&g, seed);
            prop_assert!(hs_norm(&f, s1).unwrap() <= hs_norm(&f, s1 + ds).unwrap() * (1.0 + 1e-14));
        }
    }
}
