//! Convolution noise `Phi dW`: kernels, the noise model, seeded streams and
//! the discrete basis identities for the Itô correction.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use num_complex::Complex64 as C64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::spectral::{Field, Grid};

/// Real correlation kernel `phi`.
pub trait Kernel: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn sample(&self, x: f64) -> f64;
}

/// `(pi l^2)^{-1/4} exp(-x^2 / (2 l^2))`, unit L² norm.
#[derive(Debug, Clone)]
pub struct GaussianKernel {
    pub length_scale: f64,
}

impl Kernel for GaussianKernel {
    fn name(&self) -> &str {
        "gaussian"
    }

    fn sample(&self, x: f64) -> f64 {
        let l = self.length_scale;
        (std::f64::consts::PI * l * l).powf(-0.25) * (-x * x / (2.0 * l * l)).exp()
    }
}

/// Indicator of `|x| <= l/2` with height `l^{-1/2}`, unit L² norm.
#[derive(Debug, Clone)]
pub struct BoxKernel {
    pub length_scale: f64,
}

impl Kernel for BoxKernel {
    fn name(&self) -> &str {
        "box"
    }

    fn sample(&self, x: f64) -> f64 {
        if x.abs() <= 0.5 * self.length_scale {
            self.length_scale.powf(-0.5)
        } else {
            0.0
        }
    }
}

/// Piecewise linear kernel read from a CSV file (`x,phi` rows, or `phi` rows
/// on a symmetric unit-spaced stencil); zero outside the table.
#[derive(Debug, Clone)]
pub struct TabulatedKernel {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl TabulatedKernel {
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let rows: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .filter(|l| l.split(',').all(|c| c.trim().parse::<f64>().is_ok()))
            .collect();
        let n = rows.len();
        for (k, row) in rows.iter().enumerate() {
            let cols: Vec<f64> = row.split(',').map(|c| c.trim().parse::<f64>().unwrap()).collect();
            match cols.as_slice() {
                [y] => {
                    xs.push(k as f64 - (n as f64 - 1.0) / 2.0);
                    ys.push(*y);
                }
                [x, y] => {
                    xs.push(*x);
                    ys.push(*y);
                }
                _ => return Err(Error::Format(format!("kernel row '{row}' needs one or two columns"))),
            }
        }
        if xs.len() < 2 || xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Format("kernel table needs at least two increasing abscissae".into()));
        }
        Ok(TabulatedKernel { xs, ys })
    }
}

impl Kernel for TabulatedKernel {
    fn name(&self) -> &str {
        "file"
    }

    fn sample(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x < self.xs[0] || x > self.xs[n - 1] {
            return 0.0;
        }
        let k = self.xs.partition_point(|&v| v <= x).clamp(1, n - 1);
        let (x0, x1) = (self.xs[k - 1], self.xs[k]);
        let w = (x - x0) / (x1 - x0);
        (1.0 - w) * self.ys[k - 1] + w * self.ys[k]
    }
}

/// Kernel section of the run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSpec {
    pub kind: String,
    pub length_scale: f64,
    #[serde(default = "default_true")]
    pub normalize_beta: bool,
    #[serde(default)]
    pub path: Option<PathBuf>,
}

fn default_true() -> bool {
    true
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec { kind: "gaussian".into(), length_scale: 1.0, normalize_beta: true, path: None }
    }
}

type KernelMaker = fn(&KernelSpec) -> Result<Box<dyn Kernel>>;

/// Kernels selectable by name.
pub struct KernelRegistry {
    makers: BTreeMap<String, KernelMaker>,
}

impl Default for KernelRegistry {
    fn default() -> Self {
        let mut r = KernelRegistry { makers: BTreeMap::new() };
        r.register("gaussian", |s| {
            positive_scale(s)?;
            Ok(Box::new(GaussianKernel { length_scale: s.length_scale }))
        });
        r.register("box", |s| {
            positive_scale(s)?;
            Ok(Box::new(BoxKernel { length_scale: s.length_scale }))
        });
        r.register("file", |s| {
            let path = s.path.as_ref().ok_or_else(|| invalid("kernel kind 'file' needs a path"))?;
            let text = std::fs::read_to_string(path)?;
            Ok(Box::new(TabulatedKernel::from_csv(&text)?))
        });
        r
    }
}

fn positive_scale(s: &KernelSpec) -> Result<()> {
    if s.length_scale > 0.0 && s.length_scale.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("kernel length_scale = {} must be positive", s.length_scale)))
    }
}

impl KernelRegistry {
    pub fn register(&mut self, name: &str, maker: KernelMaker) {
        self.makers.insert(name.to_string(), maker);
    }

    pub fn names(&self) -> Vec<String> {
        self.makers.keys().cloned().collect()
    }

    pub fn build(&self, spec: &KernelSpec) -> Result<Box<dyn Kernel>> {
        let maker = self.makers.get(&spec.kind).ok_or_else(|| Error::UnknownStrategy {
            kind: "kernel",
            name: spec.kind.clone(),
            known: self.names().join(", "),
        })?;
        maker(spec)
    }
}

/// Deterministic stream derivation from a base seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPolicy {
    pub base_seed: u64,
}

impl SeedPolicy {
    pub fn new(base_seed: u64) -> Self {
        SeedPolicy { base_seed }
    }

    /// Stream keyed by `sha256(base_seed, sweep, path)`, independent of worker layout.
    pub fn stream(&self, sweep: u64, path: u64) -> NoiseStream {
        let mut h = Sha256::new();
        h.update(self.base_seed.to_le_bytes());
        h.update(sweep.to_le_bytes());
        h.update(path.to_le_bytes());
        let seed: [u8; 32] = h.finalize().into();
        NoiseStream { rng: ChaCha8Rng::from_seed(seed), next_seq: 0 }
    }
}

/// One path's random source; numbers every increment it emits.
#[derive(Clone, Debug)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    next_seq: u64,
}

impl NoiseStream {
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }
}

/// `(Phi ΔW)(x)` over one step. Real by construction.
#[derive(Clone, Debug)]
pub struct NoiseIncrement {
    pub values: Vec<f64>,
    pub dt: f64,
    pub seq: u64,
}

impl NoiseIncrement {
    pub fn as_field(&self, grid: &Arc<Grid>) -> Result<Field> {
        Field::from_real(grid, &self.values)
    }

    /// Order-sensitive digest of the samples and sequence number.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.seq;
        for v in &self.values {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x1000_0000_01b3).rotate_left(17);
        }
        h
    }

    /// Sum of two consecutive increments, relabelled with `seq`.
    pub fn merged(a: &NoiseIncrement, b: &NoiseIncrement, seq: u64) -> NoiseIncrement {
        NoiseIncrement {
            values: a.values.iter().zip(&b.values).map(|(x, y)| x + y).collect(),
            dt: a.dt + b.dt,
            seq,
        }
    }

    pub fn scaled(&self, c: f64) -> NoiseIncrement {
        NoiseIncrement { values: self.values.iter().map(|v| v * c).collect(), dt: self.dt, seq: self.seq }
    }
}

/// Kernel samples, cached transform and strength.
#[derive(Clone, Debug)]
pub struct NoiseModel {
    phi: Field,
    phi_hat: Vec<C64>,
    beta: f64,
    sigma: f64,
    seed_policy: SeedPolicy,
}

impl NoiseModel {
    /// Builds from raw real samples of `phi` on the grid (origin at the centre node).
    pub fn from_phi(phi: Field, sigma: f64, seed_policy: SeedPolicy) -> Result<Self> {
        if phi.max_abs_imag() != 0.0 {
            return Err(invalid("kernel samples must be real"));
        }
        if !phi.is_finite() {
            return Err(invalid("kernel samples must be finite"));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(invalid(format!("sigma = {sigma} must be nonnegative")));
        }
        let grid = phi.grid().clone();
        let beta = phi.norm();
        let cut = grid.domain_length() / 8.0;
        let outside: f64 = grid
            .x()
            .iter()
            .zip(phi.values())
            .filter(|(x, _)| x.abs() > cut)
            .map(|(_, v)| v.norm_sqr())
            .sum::<f64>()
            * grid.dx();
        if outside > 1e-12 * beta * beta {
            return Err(invalid(format!(
                "kernel support too wide: L² mass {outside:.3e} outside |x| > L/8"
            )));
        }
        let n = grid.n_points();
        let mut phi_hat: Vec<C64> = (0..n).map(|j| phi.values()[(j + n / 2) % n] * grid.dx()).collect();
        grid.forward(&mut phi_hat);
        Ok(NoiseModel { phi, phi_hat, beta, sigma, seed_policy })
    }

    pub fn from_spec(grid: &Arc<Grid>, spec: &KernelSpec, sigma: f64, seed_policy: SeedPolicy) -> Result<Self> {
        let kernel = KernelRegistry::default().build(spec)?;
        Self::from_kernel(grid, kernel.as_ref(), spec.normalize_beta, sigma, seed_policy)
    }

    pub fn from_kernel(
        grid: &Arc<Grid>,
        kernel: &dyn Kernel,
        normalize_beta: bool,
        sigma: f64,
        seed_policy: SeedPolicy,
    ) -> Result<Self> {
        let mut phi = Field::from_real_fn(grid, |x| kernel.sample(x));
        if normalize_beta {
            let b = phi.norm();
            if b == 0.0 {
                return Err(invalid("kernel vanishes on the grid"));
            }
            phi = phi.scaled(1.0 / b);
        }
        Self::from_phi(phi, sigma, seed_policy)
    }

    /// Same kernel multiplied by `c` (so `beta -> |c| beta`).
    pub fn rescaled(&self, c: f64) -> Result<Self> {
        Self::from_phi(self.phi.scaled(c), self.sigma, self.seed_policy)
    }

    pub fn with_sigma(&self, sigma: f64) -> Self {
        NoiseModel { sigma, ..self.clone() }
    }

    pub fn phi(&self) -> &Field {
        &self.phi
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.phi.grid()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn seed_policy(&self) -> SeedPolicy {
        self.seed_policy
    }

    pub fn phi_hat(&self) -> &[C64] {
        &self.phi_hat
    }

    /// Discrete circular autocorrelation `sum_j phi_j phi_{j+k} dx`.
    pub fn autocorrelation(&self, lag: usize) -> f64 {
        let v = self.phi.values();
        let n = v.len();
        (0..n).map(|j| v[j].re * v[(j + lag) % n].re).sum::<f64>() * self.grid().dx()
    }
}

/// `Phi f = phi * f` by circular convolution.
pub fn apply_phi(f: &Field, nm: &NoiseModel) -> Result<Field> {
    f.ensure_same_grid(&nm.phi)?;
    let mut out = f.clone();
    let grid = f.grid().clone();
    grid.apply_multiplier_with(out.values_mut(), &nm.phi_hat, &mut grid.scratch());
    Ok(out)
}

/// Draws `Phi g` with `g_j ~ N(0, dt/dx)` i.i.d. per node. `sigma` is not applied.
pub fn sample_increment(nm: &NoiseModel, dt: f64, stream: &mut NoiseStream) -> Result<NoiseIncrement> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(invalid(format!("increment dt = {dt} must be positive")));
    }
    let grid = nm.grid();
    let sd = (dt / grid.dx()).sqrt();
    let mut buf: Vec<C64> = (0..grid.n_points())
        .map(|_| {
            let g: f64 = StandardNormal.sample(&mut stream.rng);
            C64::new(sd * g, 0.0)
        })
        .collect();
    grid.apply_multiplier_with(&mut buf, &nm.phi_hat, &mut grid.scratch());
    let seq = stream.next_seq;
    stream.next_seq += 1;
    Ok(NoiseIncrement { values: buf.into_iter().map(|v| v.re).collect(), dt, seq })
}

/// `F = beta^2`.
pub fn ito_correction_coefficient(nm: &NoiseModel) -> f64 {
    nm.beta * nm.beta
}

fn basis_images(nm: &NoiseModel) -> impl Iterator<Item = Field> + '_ {
    let grid = nm.grid().clone();
    let n = grid.n_points();
    let h = 1.0 / grid.dx().sqrt();
    (0..n).map(move |k| {
        let mut e = Field::zeros(&grid);
        e.values_mut()[k] = C64::new(h, 0.0);
        apply_phi(&e, nm).expect("same grid")
    })
}

/// `sum_k (Phi e_k)(x)^2` over the node-indicator basis `e_k = 1_k / sqrt(dx)`.
pub fn basis_sum_f(nm: &NoiseModel) -> Vec<f64> {
    let mut acc = vec![0.0; nm.grid().n_points()];
    for img in basis_images(nm) {
        for (a, v) in acc.iter_mut().zip(img.values()) {
            *a += v.re * v.re;
        }
    }
    acc
}

/// `sum_k ||u Phi e_k||²`.
pub fn hilbert_schmidt_sum(nm: &NoiseModel, u: &Field) -> Result<f64> {
    u.ensure_same_grid(nm.phi())?;
    let dx = u.grid().dx();
    Ok(basis_images(nm)
        .map(|img| {
            img.values().iter().zip(u.values()).map(|(p, v)| v.norm_sqr() * p.re * p.re).sum::<f64>() * dx
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn gaussian(grid: &Arc<Grid>, sigma: f64) -> NoiseModel {
        NoiseModel::from_spec(grid, &KernelSpec::default(), sigma, SeedPolicy::new(7)).unwrap()
    }

    #[test]
    fn delta_kernel_is_identity() {
        let g = Grid::new(64, 16.0).unwrap();
        let mut phi = Field::zeros(&g);
        phi.values_mut()[g.origin_index()] = C64::new(1.0 / g.dx(), 0.0);
        let nm = NoiseModel::from_phi(phi, 0.0, SeedPolicy::new(0)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let f = Field::from_fn(&g, |_| C64::new(rng.gen(), rng.gen()));
        assert!(apply_phi(&f, &nm).unwrap().sub(&f).max_abs() < 1e-10);
    }

    #[test]
    fn constant_maps_to_mass() {
        let g = Grid::new(128, 40.0).unwrap();
        let nm = gaussian(&g, 0.0);
        let mass: f64 = nm.phi().values().iter().map(|v| v.re).sum::<f64>() * g.dx();
        let one = Field::from_real_fn(&g, |_| 1.0);
        let out = apply_phi(&one, &nm).unwrap();
        assert!(out.values().iter().all(|v| (v.re - mass).abs() < 1e-12 && v.im.abs() < 1e-12));
    }

    #[test]
    fn commutes_with_roll() {
        let g = Grid::new(128, 40.0).unwrap();
        let nm = gaussian(&g, 0.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let f = Field::from_fn(&g, |_| C64::new(rng.gen(), rng.gen()));
        let a = apply_phi(&f.roll(5), &nm).unwrap();
        let b = apply_phi(&f, &nm).unwrap().roll(5);
        assert!(a.sub(&b).max_abs() < 1e-14);
    }

    #[test]
    fn real_to_real() {
        let g = Grid::new(256, 40.0).unwrap();
        let nm = gaussian(&g, 0.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let f = Field::from_real_fn(&g, |_| rng.gen_range(-1.0..1.0));
        assert!(apply_phi(&f, &nm).unwrap().max_abs_imag() < 1e-12);
    }

    #[test]
    fn beta_bookkeeping() {
        let g = Grid::new(256, 40.0).unwrap();
        let nm = gaussian(&g, 0.3);
        assert!((nm.beta() - 1.0).abs() < 1e-12);
        assert!((nm.phi().norm() - nm.beta()).abs() < 1e-12);
        assert!((ito_correction_coefficient(&nm) - 1.0).abs() < 1e-12);
        let raw = NoiseModel::from_spec(
            &g,
            &KernelSpec { normalize_beta: false, ..KernelSpec::default() },
            0.0,
            SeedPolicy::new(0),
        )
        .unwrap();
        assert!((raw.beta() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn wide_kernel_rejected() {
        let g = Grid::new(128, 16.0).unwrap();
        let spec = KernelSpec { length_scale: 3.0, ..KernelSpec::default() };
        assert!(NoiseModel::from_spec(&g, &spec, 0.0, SeedPolicy::new(0)).is_err());
    }

    #[test]
    fn unknown_kernel() {
        let g = Grid::new(128, 16.0).unwrap();
        let spec = KernelSpec { kind: "lorentzian".into(), ..KernelSpec::default() };
        assert!(matches!(
            NoiseModel::from_spec(&g, &spec, 0.0, SeedPolicy::new(0)),
            Err(Error::UnknownStrategy { .. })
        ));
    }

    #[test]
    fn tabulated_kernel() {
        let k = TabulatedKernel::from_csv("x,phi\n-1,0\n0,2\n1,0\n").unwrap();
        assert_eq!(k.sample(0.0), 2.0);
        assert_eq!(k.sample(0.5), 1.0);
        assert_eq!(k.sample(2.0), 0.0);
        let k = TabulatedKernel::from_csv("0\n1\n0\n").unwrap();
        assert_eq!(k.sample(-0.5), 0.5);
        assert!(TabulatedKernel::from_csv("1,2,3\n4,5,6\n").is_err());
    }

    #[test]
    fn streams_are_deterministic_and_distinct() {
        let g = Grid::new(64, 48.0).unwrap();
        let nm = gaussian(&g, 0.0);
        let p = SeedPolicy::new(11);
        let a = sample_increment(&nm, 0.01, &mut p.stream(0, 3)).unwrap();
        let b = sample_increment(&nm, 0.01, &mut p.stream(0, 3)).unwrap();
        let c = sample_increment(&nm, 0.01, &mut p.stream(0, 4)).unwrap();
        let d = sample_increment(&nm, 0.01, &mut p.stream(1, 3)).unwrap();
        assert_eq!(a.values, b.values);
        assert_ne!(a.values, c.values);
        assert_ne!(a.values, d.values);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert!(sample_increment(&nm, 0.0, &mut p.stream(0, 0)).is_err());
    }

    #[test]
    fn sequence_numbers_advance() {
        let g = Grid::new(64, 48.0).unwrap();
        let nm = gaussian(&g, 0.0);
        let mut s = SeedPolicy::new(1).stream(0, 0);
        let seqs: Vec<u64> = (0..4).map(|_| sample_increment(&nm, 0.1, &mut s).unwrap().seq).collect();
        assert_eq!(seqs, vec![0, 1, 2, 3]);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]

        #[test]
        fn basis_sum_is_beta_squared(ell in 0.3f64..1.2, scale in 0.2f64..3.0) {
            let g = Grid::new(256, 80.0).unwrap();
            let spec = KernelSpec { length_scale: ell, normalize_beta: false, ..KernelSpec::default() };
            let nm = NoiseModel::from_spec(&g, &spec, 1.0, SeedPolicy::new(1)).unwrap().rescaled(scale).unwrap();
            let b2 = nm.beta() * nm.beta();
            proptest::prop_assert!((b2 - nm.phi().norm_sq()).abs() < 1e-10 * b2);
            for f in basis_sum_f(&nm) {
                proptest::prop_assert!((f - b2).abs() < 1e-10 * b2);
            }
        }
    }
}
