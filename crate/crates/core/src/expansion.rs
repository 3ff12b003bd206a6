//! Second-order noise expansion `u = u* + σ v1 + σ² v2 + z` about the
//! standing wave, its phase decomposition and the resetting procedure.
//!
//! `v1` and `v2` are computed as the first two σ-derivatives ("jets") of the
//! split-step scheme that advances `u`, so the three fields of one path are
//! driven by the same increments and `z` is the remainder of the scheme
//! itself.

use std::sync::Arc;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::dynamics::{compile_ops, CompiledOp, Scheme, SchemeRegistry, Stepper, DEFAULT_SCHEME};
use crate::error::{invalid, Error, Result};
use crate::linearization::{phase_functional, project_pi, LinearizationPack, PackCache};
use crate::model::{bracket, solitary_wave, SolitaryWave};
use crate::noise::{sample_increment, NoiseIncrement, NoiseModel, NoiseStream};
use crate::spectral::{lp_norm_slice, translate, Field, Grid};

/// Where a path's randomness came from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathTag {
    pub base_seed: u64,
    pub sweep: u64,
    pub path: u64,
}

#[derive(Clone, Debug)]
pub struct ExpansionState {
    pub v1: Field,
    pub v2: Field,
    pub a1: f64,
    pub a2: f64,
    pub w1: Field,
    pub w2: Field,
    pub z: Field,
    pub z_prime: Field,
    pub t: f64,
    pub tag: PathTag,
}

impl ExpansionState {
    /// `v1 = v10`, `v2 = 0` and `z = z' = 0`.
    pub fn new(grid: &Arc<Grid>, v10: Option<&Field>, tag: PathTag) -> Result<Self> {
        let v1 = match v10 {
            Some(f) => {
                if !f.grid().same_as(grid) {
                    return Err(Error::GridMismatch);
                }
                f.clone()
            }
            None => Field::zeros(grid),
        };
        let zero = Field::zeros(grid);
        Ok(ExpansionState {
            v1,
            v2: zero.clone(),
            a1: 0.0,
            a2: 0.0,
            w1: zero.clone(),
            w2: zero.clone(),
            z: zero.clone(),
            z_prime: zero,
            t: 0.0,
            tag,
        })
    }

    /// Largest violation of the reconstruction identities and of `Π⁰ w_k = 0`.
    pub fn reconstruction_error(&self, pack: &LinearizationPack) -> Result<f64> {
        let w = pack.wave();
        let r1 = self.v1.sub(&w.u_star_x.scaled(self.a1)).sub(&self.w1).norm();
        let r2 = self
            .v2
            .sub(&w.u_star_x.scaled(self.a2))
            .sub(&w.u_star_xx.scaled(0.5 * self.a1 * self.a1))
            .sub(&self.w2)
            .norm();
        let p = phase_functional(&self.w1, pack)?.abs() + phase_functional(&self.w2, pack)?.abs();
        Ok(r1.max(r2).max(p))
    }
}

/// σ-jets of a splitting scheme about the standing wave.
///
/// The base trajectory is reset to `u*` at the start of every step, so the
/// intermediate base states and phases are computed once.
pub struct JetStepper {
    grid: Arc<Grid>,
    ops: Vec<CompiledOp>,
    base: Vec<Option<RotateBase>>,
    start: Vec<C64>,
    end: Vec<C64>,
    kappa: f64,
    beta_sq: f64,
    dt: f64,
    scratch: Vec<C64>,
}

struct RotateBase {
    a: Vec<C64>,
    phase: Vec<C64>,
}

impl JetStepper {
    pub fn new(wave: &SolitaryWave, scheme: &dyn Scheme, dt: f64, beta_sq: f64) -> Result<Self> {
        let ops = scheme
            .ops()
            .ok_or_else(|| Error::Unsupported(format!("scheme {} has no splitting form", scheme.name())))?;
        if !(dt > 0.0) {
            return Err(invalid("dt must be positive"));
        }
        let grid = wave.grid().clone();
        let p = wave.params;
        let ops = compile_ops(&ops, &p, &grid, dt);
        let mut scratch = grid.scratch();
        let mut a = wave.u_star.values().to_vec();
        let mut base = Vec::with_capacity(ops.len());
        for op in &ops {
            match op {
                CompiledOp::Free(m) => {
                    base.push(None);
                    grid.apply_multiplier_with(&mut a, m, &mut scratch);
                }
                CompiledOp::Loss { re, im } => {
                    base.push(None);
                    a.iter_mut().for_each(|v| *v = C64::new(v.re * re, v.im * im));
                }
                CompiledOp::Rotate { tau, .. } => {
                    let phase: Vec<C64> =
                        a.iter().map(|v| C64::from_polar(1.0, p.kappa * tau * v.norm_sqr() - p.nu * tau)).collect();
                    let before = a.clone();
                    a.iter_mut().zip(&phase).for_each(|(v, e)| *v *= e);
                    base.push(Some(RotateBase { a: before, phase }));
                }
            }
        }
        let start = wave.u_star.values().to_vec();
        Ok(JetStepper { grid, ops, base, start, end: a, kappa: p.kappa, beta_sq, dt, scratch })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Advances `v1` and, if given, `v2` by one step. `noise = None` is the
    /// deterministic reduction: no kicks, and the mean drift `-beta² u*/2`
    /// enters by the trapezoid rule at the step ends.
    pub fn step(&mut self, v1: &mut [C64], mut v2: Option<&mut [C64]>, noise: Option<&[f64]>) {
        let i = C64::new(0.0, 1.0);
        let drift = -0.25 * self.beta_sq * self.dt;
        if noise.is_none() {
            if let Some(c) = v2.as_deref_mut() {
                c.iter_mut().zip(&self.start).for_each(|(c, a)| *c += drift * a);
            }
        }
        for (op, base) in self.ops.iter().zip(&self.base) {
            match op {
                CompiledOp::Free(m) => {
                    self.grid.apply_multiplier_with(v1, m, &mut self.scratch);
                    if let Some(c) = v2.as_deref_mut() {
                        self.grid.apply_multiplier_with(c, m, &mut self.scratch);
                    }
                }
                CompiledOp::Loss { re, im } => {
                    v1.iter_mut().for_each(|v| *v = C64::new(v.re * re, v.im * im));
                    if let Some(c) = v2.as_deref_mut() {
                        c.iter_mut().for_each(|v| *v = C64::new(v.re * re, v.im * im));
                    }
                }
                CompiledOp::Rotate { tau, noise: w } => {
                    let rb = base.as_ref().expect("rotation base");
                    let kt = self.kappa * tau;
                    for j in 0..v1.len() {
                        let (a, e, b) = (rb.a[j], rb.phase[j], v1[j]);
                        let det = kt * 2.0 * (a.conj() * b).re;
                        let (th1, th1_sq) = match noise {
                            Some(x) => {
                                let t = det - w * x[j];
                                (t, t * t)
                            }
                            None => (det, det * det),
                        };
                        if let Some(c) = v2.as_deref_mut() {
                            let th2 = kt * (b.norm_sqr() + 2.0 * (a.conj() * c[j]).re);
                            c[j] = e * (c[j] + i * th1 * b + (i * th2 - 0.5 * th1_sq) * a);
                        }
                        v1[j] = e * (b + i * th1 * a);
                    }
                }
            }
        }
        if noise.is_none() {
            if let Some(c) = v2 {
                c.iter_mut().zip(&self.end).for_each(|(c, a)| *c += drift * a);
            }
        }
    }
}

/// Order-sensitive record of the increments one consumer has used.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CouplingChecksum {
    next_seq: u64,
    digest: u64,
}

impl Default for CouplingChecksum {
    fn default() -> Self {
        CouplingChecksum { next_seq: 0, digest: 0x9e37_79b9_7f4a_7c15 }
    }
}

impl CouplingChecksum {
    pub fn absorb(&mut self, inc: &NoiseIncrement) -> Result<()> {
        if inc.seq != self.next_seq {
            return Err(Error::Coupling { expected: self.next_seq, got: inc.seq });
        }
        self.next_seq += 1;
        self.digest = (self.digest.rotate_left(7) ^ inc.fingerprint()).wrapping_mul(0x100_0000_01b3);
        Ok(())
    }

    pub fn digest(&self) -> u64 {
        self.digest
    }

    /// Fails unless both consumers saw the same increments in the same order.
    pub fn verify(&self, other: &CouplingChecksum) -> Result<()> {
        if self != other {
            return Err(Error::Coupling { expected: self.next_seq, got: other.next_seq });
        }
        Ok(())
    }
}

/// Supplies the increments of one path.
pub trait IncrementSource {
    fn next_increment(&mut self) -> Result<NoiseIncrement>;
}

pub struct StreamSource<'a> {
    nm: &'a NoiseModel,
    dt: f64,
    stream: NoiseStream,
}

impl<'a> StreamSource<'a> {
    pub fn new(nm: &'a NoiseModel, dt: f64, stream: NoiseStream) -> Self {
        StreamSource { nm, dt, stream }
    }
}

impl IncrementSource for StreamSource<'_> {
    fn next_increment(&mut self) -> Result<NoiseIncrement> {
        sample_increment(self.nm, self.dt, &mut self.stream)
    }
}

/// Sums consecutive pairs of a finer source: the same Brownian path at twice the step.
pub struct MergedSource<S> {
    inner: S,
    seq: u64,
}

impl<S: IncrementSource> MergedSource<S> {
    pub fn new(inner: S) -> Self {
        MergedSource { inner, seq: 0 }
    }
}

impl<S: IncrementSource> IncrementSource for MergedSource<S> {
    fn next_increment(&mut self) -> Result<NoiseIncrement> {
        let a = self.inner.next_increment()?;
        let b = self.inner.next_increment()?;
        let out = NoiseIncrement::merged(&a, &b, self.seq);
        self.seq += 1;
        Ok(out)
    }
}

/// Keeps a copy of every increment drawn.
pub struct RecordingSource<S> {
    inner: S,
    pub log: Vec<NoiseIncrement>,
}

impl<S: IncrementSource> RecordingSource<S> {
    pub fn new(inner: S) -> Self {
        RecordingSource { inner, log: Vec::new() }
    }
}

impl<S: IncrementSource> IncrementSource for RecordingSource<S> {
    fn next_increment(&mut self) -> Result<NoiseIncrement> {
        let inc = self.inner.next_increment()?;
        self.log.push(inc.clone());
        Ok(inc)
    }
}

/// `v1` only, one freshly drawn increment. Returns the increment so the caller can couple `u`.
pub fn evolve_v1(
    state: &mut ExpansionState,
    pack: &LinearizationPack,
    nm: &NoiseModel,
    dt: f64,
    stream: &mut NoiseStream,
) -> Result<NoiseIncrement> {
    evolve(state, pack, nm, dt, stream, false)
}

/// `v1` and `v2` jointly, one freshly drawn increment.
pub fn evolve_v2(
    state: &mut ExpansionState,
    pack: &LinearizationPack,
    nm: &NoiseModel,
    dt: f64,
    stream: &mut NoiseStream,
) -> Result<NoiseIncrement> {
    evolve(state, pack, nm, dt, stream, true)
}

fn evolve(
    state: &mut ExpansionState,
    pack: &LinearizationPack,
    nm: &NoiseModel,
    dt: f64,
    stream: &mut NoiseStream,
    second: bool,
) -> Result<NoiseIncrement> {
    state.v1.ensure_same_grid(&pack.wave().u_star)?;
    let scheme = SchemeRegistry::default().get(DEFAULT_SCHEME)?;
    let mut jets = JetStepper::new(pack.wave(), scheme.as_ref(), dt, nm.beta() * nm.beta())?;
    let inc = sample_increment(nm, dt, stream)?;
    let v2 = if second { Some(state.v2.values_mut()) } else { None };
    jets.step(state.v1.values_mut(), v2, Some(&inc.values));
    state.t += dt;
    Ok(inc)
}

/// `z = u - u* - σ v1 - σ² v2` and `z' = u - u* - σ v1`.
pub fn compute_residuals(u: &Field, state: &ExpansionState, wave: &SolitaryWave, sigma: f64) -> Result<(Field, Field)> {
    u.ensure_same_grid(&wave.u_star)?;
    let mut zp = u.sub(&wave.u_star);
    zp.axpy(-sigma, &state.v1);
    let mut z = zp.clone();
    z.axpy(-sigma * sigma, &state.v2);
    Ok((z, zp))
}

/// `a1 = 𝓟 v1`, `w1 = Π v1`, `a2 = 𝓟 r`, `w2 = Π r` with `r = v2 - a1² u*_xx / 2`.
pub fn phase_decompose(state: &mut ExpansionState, pack: &LinearizationPack) -> Result<()> {
    let w = pack.wave();
    state.a1 = phase_functional(&state.v1, pack)?;
    state.w1 = project_pi(&state.v1, pack)?;
    let mut r = state.v2.clone();
    r.axpy(-0.5 * state.a1 * state.a1, &w.u_star_xx);
    state.a2 = phase_functional(&r, pack)?;
    state.w2 = project_pi(&r, pack)?;
    Ok(())
}

/// Result of re-linearizing about the current position of the wave.
pub struct Frame {
    /// The solution translated so that the wave sits at the pack's centre.
    pub u: Field,
    pub pack: Arc<LinearizationPack>,
    pub state: ExpansionState,
}

/// Recentres at `u ≈ u*(· + shift)`: translates `u` by `-shift`, reuses the
/// cached pack and restarts the expansion with `v1 = (u - u*)/σ`, `v2 = 0`.
pub fn reset_frame(
    u: &Field,
    shift: f64,
    sigma: f64,
    wave: &SolitaryWave,
    cache: &PackCache,
    tag: PathTag,
) -> Result<Frame> {
    let limit = u.grid().domain_length() / 4.0;
    if !(shift.abs() < limit) {
        return Err(Error::ShiftTooLarge { shift, limit });
    }
    if !(sigma > 0.0) {
        return Err(invalid("resetting needs sigma > 0"));
    }
    let centred = if wave.shift == 0.0 { wave.clone() } else { solitary_wave(&wave.params, wave.grid(), 0.0)? };
    let pack = cache.get_or_build(&centred)?;
    let moved = translate(u, -shift);
    let v10 = moved.sub(&pack.wave().u_star).scaled(1.0 / sigma);
    let mut state = ExpansionState::new(u.grid(), Some(&v10), tag)?;
    phase_decompose(&mut state, &pack)?;
    Ok(Frame { u: moved, pack, state })
}

/// Norm caps of the stopping times.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Caps {
    pub eps: f64,
    pub sigma: f64,
    pub c1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoppingTimes {
    pub tau_v1: f64,
    pub tau_v2: f64,
    pub tau_z: f64,
    pub tau_z_prime: f64,
}

/// Residual norms of one coupled full solution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub z: f64,
    pub z_prime: f64,
    /// `sup_{s <= t} ||z(s)||`, sampled every step.
    pub z_sup: f64,
    pub z_prime_sup: f64,
    /// `max(||z||_{L^∞(0,t;L²)}, ||z||_{L^6(0,t;L^6)})`.
    pub z_mixed: f64,
    pub z_prime_mixed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagRow {
    pub t: f64,
    pub a1: f64,
    pub a2: f64,
    pub w1: f64,
    pub w2: f64,
    pub v1: f64,
    pub v2: f64,
    pub v1_mixed: f64,
    pub v2_mixed: f64,
    /// One entry per coupled σ.
    pub residuals: Vec<ResidualRow>,
}

/// First mesh time at which each running norm exceeds its cap, else `t_end`.
/// Residual caps use the coupled solution `residual`.
pub fn stopping_times(rows: &[DiagRow], residual: usize, caps: &Caps, t_end: f64) -> StoppingTimes {
    let first = |cap: f64, get: &dyn Fn(&DiagRow) -> Option<f64>| {
        rows.iter()
            .find(|r| get(r).is_some_and(|v| v > cap))
            .map(|r| r.t.min(t_end))
            .unwrap_or(t_end)
    };
    let e = caps.eps;
    StoppingTimes {
        tau_v1: first(e / caps.sigma, &|r| Some(r.v1_mixed)),
        tau_v2: first(e * e / (caps.sigma * caps.sigma), &|r| Some(r.v2_mixed)),
        tau_z: first(caps.c1 * e * e * e, &|r| r.residuals.get(residual).map(|x| x.z_mixed)),
        tau_z_prime: first(caps.c1 * e * e, &|r| r.residuals.get(residual).map(|x| x.z_prime_mixed)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionConfig {
    pub dt: f64,
    pub t_end: f64,
    pub record_stride: usize,
    /// Strengths of the coupled full solutions; may be empty.
    pub sigmas: Vec<f64>,
    pub second_order: bool,
    /// Deterministic reduction of the expansion; full solutions unforced.
    pub noise_off: bool,
    pub keep_states: bool,
    pub scheme: String,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        ExpansionConfig {
            dt: 1e-2,
            t_end: 1.0,
            record_stride: 10,
            sigmas: Vec::new(),
            second_order: true,
            noise_off: false,
            keep_states: false,
            scheme: DEFAULT_SCHEME.to_string(),
        }
    }
}

impl ExpansionConfig {
    pub fn n_steps(&self) -> Result<usize> {
        crate::dynamics::StepperConfig {
            dt: self.dt,
            scheme: self.scheme.clone(),
            t_end: self.t_end,
            record_stride: self.record_stride,
            keep_states: false,
        }
        .n_steps()
    }
}

#[derive(Clone, Debug)]
pub struct PathRecord {
    pub tag: PathTag,
    pub sigmas: Vec<f64>,
    pub rows: Vec<DiagRow>,
    pub states: Option<Vec<ExpansionState>>,
    /// Worst reconstruction-identity violation over the recorded states.
    pub max_reconstruction: f64,
    pub checksum: u64,
}

/// Running `max(L^∞L², L^6L^6)` accumulator.
#[derive(Clone, Copy, Debug, Default)]
struct Mixed {
    sup: f64,
    l6: f64,
}

impl Mixed {
    fn push(&mut self, v: &[C64], dx: f64, dt: f64) -> f64 {
        let l2 = (v.iter().map(|z| z.norm_sqr()).sum::<f64>() * dx).sqrt();
        self.sup = self.sup.max(l2);
        let out = self.value();
        self.l6 += lp_norm_slice(v, dx, 6.0).powi(6) * dt;
        out
    }

    fn value(&self) -> f64 {
        self.sup.max(self.l6.powf(1.0 / 6.0))
    }
}

/// Runs `v1`, `v2` and one full solution per σ on a single path.
/// Full solutions start from `u* + σ v10`.
pub fn run_expansion_path(
    pack: &LinearizationPack,
    nm: &NoiseModel,
    cfg: &ExpansionConfig,
    v10: Option<&Field>,
    source: &mut dyn IncrementSource,
    tag: PathTag,
) -> Result<PathRecord> {
    let n = cfg.n_steps()?;
    let wave = pack.wave();
    let grid = wave.grid().clone();
    let dx = grid.dx();
    let beta_sq = nm.beta() * nm.beta();
    let scheme = SchemeRegistry::default().get(&cfg.scheme)?;
    let mut jets = JetStepper::new(wave, scheme.as_ref(), cfg.dt, beta_sq)?;
    let mut full: Vec<Stepper> = Vec::with_capacity(cfg.sigmas.len());
    for _ in &cfg.sigmas {
        full.push(Stepper::new(scheme.clone(), &wave.params, &grid, cfg.dt)?);
    }
    let mut state = ExpansionState::new(&grid, v10, tag)?;
    let mut us: Vec<Field> = cfg
        .sigmas
        .iter()
        .map(|&s| {
            let mut u = wave.u_star.clone();
            u.axpy(s, &state.v1);
            u
        })
        .collect();
    let mut jet_sum = CouplingChecksum::default();
    let mut u_sums = vec![CouplingChecksum::default(); cfg.sigmas.len()];
    let mut m1 = Mixed::default();
    let mut m2 = Mixed::default();
    let mut mz = vec![(Mixed::default(), Mixed::default()); cfg.sigmas.len()];
    let mut sups = vec![(0.0f64, 0.0f64); cfg.sigmas.len()];
    let mut rows = Vec::with_capacity(n / cfg.record_stride + 1);
    let mut states = cfg.keep_states.then(Vec::new);
    let mut worst: f64 = 0.0;
    let mut z_buf = vec![C64::new(0.0, 0.0); grid.n_points()];
    let mut zp_buf = z_buf.clone();

    for k in 0..=n {
        // running norms of the state at t_k, then record
        let v1_mixed = m1.push(state.v1.values(), dx, cfg.dt);
        let v2_mixed = m2.push(state.v2.values(), dx, cfg.dt);
        let mut residuals = Vec::with_capacity(us.len());
        for (j, &s) in cfg.sigmas.iter().enumerate() {
            for (((zv, zpv), (uu, us_)), (a, b)) in z_buf
                .iter_mut()
                .zip(zp_buf.iter_mut())
                .zip(us[j].values().iter().zip(wave.u_star.values()))
                .zip(state.v1.values().iter().zip(state.v2.values()))
            {
                *zpv = uu - us_ - s * a;
                *zv = *zpv - s * s * b;
            }
            let zn = (z_buf.iter().map(|v| v.norm_sqr()).sum::<f64>() * dx).sqrt();
            let zpn = (zp_buf.iter().map(|v| v.norm_sqr()).sum::<f64>() * dx).sqrt();
            sups[j].0 = sups[j].0.max(zn);
            sups[j].1 = sups[j].1.max(zpn);
            let z_mixed = mz[j].0.push(&z_buf, dx, cfg.dt);
            let z_prime_mixed = mz[j].1.push(&zp_buf, dx, cfg.dt);
            residuals.push(ResidualRow { z: zn, z_prime: zpn, z_sup: sups[j].0, z_prime_sup: sups[j].1, z_mixed, z_prime_mixed });
        }
        if k % cfg.record_stride == 0 {
            state.t = k as f64 * cfg.dt;
            phase_decompose(&mut state, pack)?;
            worst = worst.max(state.reconstruction_error(pack)?);
            if let Some(&s) = cfg.sigmas.first() {
                let (z, zp) = compute_residuals(&us[0], &state, wave, s)?;
                state.z = z;
                state.z_prime = zp;
            }
            rows.push(DiagRow {
                t: state.t,
                a1: state.a1,
                a2: state.a2,
                w1: state.w1.norm(),
                w2: state.w2.norm(),
                v1: state.v1.norm(),
                v2: state.v2.norm(),
                v1_mixed,
                v2_mixed,
                residuals,
            });
            if let Some(st) = states.as_mut() {
                st.push(state.clone());
            }
        }
        if k == n {
            break;
        }
        let t = (k + 1) as f64 * cfg.dt;
        if cfg.noise_off {
            jets.step(state.v1.values_mut(), cfg.second_order.then(|| state.v2.values_mut()), None);
            for (u, st) in us.iter_mut().zip(full.iter_mut()) {
                st.step(u, None, 0.0, beta_sq);
            }
        } else {
            let inc = source.next_increment()?;
            jet_sum.absorb(&inc)?;
            jets.step(state.v1.values_mut(), cfg.second_order.then(|| state.v2.values_mut()), Some(&inc.values));
            for (j, (u, st)) in us.iter_mut().zip(full.iter_mut()).enumerate() {
                u_sums[j].absorb(&inc)?;
                st.step(u, Some(&inc), cfg.sigmas[j], beta_sq);
            }
        }
        for u in &us {
            if !u.is_finite() {
                return Err(Error::BlowUp { t, reason: "non-finite sample".into() });
            }
        }
        if !state.v1.is_finite() || !state.v2.is_finite() {
            return Err(Error::BlowUp { t, reason: "non-finite expansion field".into() });
        }
    }
    for s in &u_sums {
        jet_sum.verify(s)?;
    }
    Ok(PathRecord {
        tag,
        sigmas: cfg.sigmas.clone(),
        rows,
        states,
        max_reconstruction: worst,
        checksum: jet_sum.digest(),
    })
}

/// Independent evaluation of `(v1, v2)(n dt)` from the mild formulation with
/// `v2(0) = 0`, by exact semigroup propagation between mid-step kicks. The
/// quadratic drift is averaged over the states just before and after the
/// kick. Needs the dense eigendecomposition.
pub fn mild_form(
    pack: &LinearizationPack,
    v10: &Field,
    increments: &[NoiseIncrement],
    dt: f64,
    beta_sq: f64,
) -> Result<(Field, Field)> {
    let eig = pack
        .eigen()
        .ok_or_else(|| Error::Unsupported("mild form needs a dense eigendecomposition".into()))?;
    let wave = pack.wave();
    let grid = wave.grid();
    let kappa = wave.params.kappa;
    let i = C64::new(0.0, 1.0);
    let half = |c: &[C64]| -> Vec<C64> { c.iter().zip(eig.eigenvalues()).map(|(c, l)| c * (l * 0.5 * dt).exp()).collect() };
    let mut c1 = eig.coefficients(v10);
    let mut c2 = vec![C64::new(0.0, 0.0); c1.len()];
    for inc in increments {
        let mid1 = half(&c1);
        let mid2 = half(&c2);
        let m = eig.synthesize(&mid1, 0.0, None, grid);
        let x = &inc.values;
        let k1: Vec<C64> = wave.u_star.values().iter().zip(x).map(|(u, x)| -i * u * x).collect();
        let k2: Vec<C64> = wave
            .u_star
            .values()
            .iter()
            .zip(m.values())
            .zip(x)
            .map(|((&u, &mv), &x)| {
                let mp = mv - i * u * x;
                let d = 0.5 * (bracket(u, mv, mv) + bracket(u, mp, mp));
                dt * (i * kappa * d - 0.5 * beta_sq * u) - i * mv * x - 0.5 * (x * x - beta_sq * dt) * u
            })
            .collect();
        let k1 = eig.coefficients(&Field::from_values(grid, k1)?);
        let k2 = eig.coefficients(&Field::from_values(grid, k2)?);
        c1 = half(&mid1.iter().zip(&k1).map(|(a, b)| a + b).collect::<Vec<_>>());
        c2 = half(&mid2.iter().zip(&k2).map(|(a, b)| a + b).collect::<Vec<_>>());
    }
    Ok((eig.synthesize(&c1, 0.0, None, grid), eig.synthesize(&c2, 0.0, None, grid)))
}

/// Per-path diagnostics CSV for coupled solution `residual`.
pub fn write_diagnostics_csv<W: std::io::Write>(rec: &PathRecord, residual: usize, w: &mut W) -> Result<()> {
    writeln!(w, "t,a1,a2,w1,w2,z,z_prime,v1_mixed,v2_mixed")?;
    for r in &rec.rows {
        let (z, zp) = r.residuals.get(residual).map(|x| (x.z, x.z_prime)).unwrap_or((f64::NAN, f64::NAN));
        writeln!(w, "{},{},{},{},{},{},{},{},{}", r.t, r.a1, r.a2, r.w1, r.w2, z, zp, r.v1_mixed, r.v2_mixed)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linearization::{apply_semigroup, build_linearization_with, PackOptions};
    use crate::model::make_params;
    use crate::noise::{KernelSpec, SeedPolicy};
    use std::sync::OnceLock;

    fn pack() -> &'static LinearizationPack {
        static PACK: OnceLock<LinearizationPack> = OnceLock::new();
        PACK.get_or_init(|| {
            let p = make_params(1.0, 0.8, 1.0, 1.1, 0.8).unwrap();
            let g = Grid::new(512, 60.0).unwrap();
            let w = solitary_wave(&p, &g, 0.0).unwrap();
            build_linearization_with(&w, &PackOptions { fit_decay: false, ..Default::default() }).unwrap()
        })
    }

    fn noise(sigma: f64) -> NoiseModel {
        NoiseModel::from_spec(pack().grid(), &KernelSpec::default(), sigma, SeedPolicy::new(11)).unwrap()
    }

    fn cfg(sigmas: Vec<f64>) -> ExpansionConfig {
        ExpansionConfig { sigmas, keep_states: true, ..Default::default() }
    }

    #[test]
    fn z_vanishes_initially_and_reconstruction_holds() {
        let nm = noise(0.05);
        let mut src = StreamSource::new(&nm, 0.01, nm.seed_policy().stream(0, 0));
        let rec = run_expansion_path(pack(), &nm, &cfg(vec![0.05]), None, &mut src, PathTag::default()).unwrap();
        assert_eq!(rec.rows[0].residuals[0].z, 0.0);
        assert!(rec.max_reconstruction < 1e-8, "{}", rec.max_reconstruction);
        assert_eq!(rec.rows.len(), 11);
    }

    #[test]
    fn v1_is_sigma_independent() {
        let a = noise(0.05);
        let b = noise(0.1);
        let run = |nm: &NoiseModel| {
            let mut src = StreamSource::new(nm, 0.01, nm.seed_policy().stream(0, 3));
            run_expansion_path(pack(), nm, &cfg(vec![nm.sigma()]), None, &mut src, PathTag::default()).unwrap()
        };
        let (ra, rb) = (run(&a), run(&b));
        let sa = ra.states.unwrap();
        let sb = rb.states.unwrap();
        assert_eq!(sa.last().unwrap().v1.values(), sb.last().unwrap().v1.values());
        assert_eq!(ra.checksum, rb.checksum);
    }

    #[test]
    fn noise_off_v1_is_the_semigroup() {
        let nm = noise(0.05);
        let v10 = Field::from_fn(pack().grid(), |x| C64::new((-x * x).exp(), 0.2 * (-(x - 1.0) * (x - 1.0)).exp()));
        let mut c = cfg(vec![]);
        c.noise_off = true;
        c.dt = 1e-3;
        c.record_stride = 100;
        let mut src = StreamSource::new(&nm, c.dt, nm.seed_policy().stream(0, 0));
        let rec = run_expansion_path(pack(), &nm, &c, Some(&v10), &mut src, PathTag::default()).unwrap();
        let states = rec.states.unwrap();
        let v1 = &states.last().unwrap().v1;
        let want = apply_semigroup(&v10, 1.0, pack(), "matrix_exp").unwrap();
        assert!(v1.sub(&want).norm() < 1e-6 * v10.norm(), "{}", v1.sub(&want).norm());
    }

    #[test]
    fn noise_off_v2_is_the_ito_drift_integral() {
        let nm = noise(0.05);
        let mut c = cfg(vec![]);
        c.noise_off = true;
        c.dt = 1e-3;
        c.record_stride = 100;
        let mut src = StreamSource::new(&nm, c.dt, nm.seed_policy().stream(0, 0));
        let rec = run_expansion_path(pack(), &nm, &c, None, &mut src, PathTag::default()).unwrap();
        let states = rec.states.unwrap();
        let v2 = &states.last().unwrap().v2;
        // -β²/2 ∫_0^1 P(s) u* ds by composite Simpson in s
        let eig = pack().eigen().unwrap();
        let u = &pack().wave().u_star;
        let coeff = eig.coefficients(u);
        let m = 200;
        let mut acc = Field::zeros(pack().grid());
        for k in 0..=m {
            let s = k as f64 / m as f64;
            let w = if k == 0 || k == m { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            acc.axpy(w / (3.0 * m as f64), &eig.synthesize(&coeff, s, None, pack().grid()));
        }
        let want = acc.scaled(-0.5 * nm.beta() * nm.beta());
        assert!(v2.sub(&want).norm() < 1e-6 * want.norm().max(1.0), "{}", v2.sub(&want).norm());
    }

    #[test]
    fn sigma_zero_residual_is_deterministic_drift() {
        let nm = noise(0.0);
        let mut src = StreamSource::new(&nm, 0.01, nm.seed_policy().stream(0, 0));
        let rec = run_expansion_path(pack(), &nm, &cfg(vec![0.0]), None, &mut src, PathTag::default()).unwrap();
        for r in &rec.rows {
            assert!(r.residuals[0].z < 1e-6 && (r.residuals[0].z - r.residuals[0].z_prime).abs() == 0.0);
        }
    }

    #[test]
    fn mild_form_agrees_with_jets() {
        let nm = noise(0.05);
        let mut c = cfg(vec![]);
        c.dt = 1e-3;
        c.record_stride = 1000;
        let v10 = Field::zeros(pack().grid());
        let mut src = RecordingSource::new(StreamSource::new(&nm, c.dt, nm.seed_policy().stream(0, 9)));
        let rec = run_expansion_path(pack(), &nm, &c, None, &mut src, PathTag::default()).unwrap();
        let st = rec.states.unwrap();
        let last = st.last().unwrap();
        let (m1, m2) = mild_form(pack(), &v10, &src.log, c.dt, nm.beta() * nm.beta()).unwrap();
        let e1 = m1.sub(&last.v1).norm() / last.v1.norm();
        let e2 = m2.sub(&last.v2).norm() / last.v2.norm();
        assert!(e1 < 1e-3 && e2 < 1e-3, "{e1} {e2}");
    }

    #[test]
    fn decomposition_of_translation_mode() {
        let pk = pack();
        let mut st = ExpansionState::new(pk.grid(), Some(&pk.wave().u_star_x), PathTag::default()).unwrap();
        phase_decompose(&mut st, pk).unwrap();
        assert!((st.a1 - 1.0).abs() < 1e-10);
        assert!(st.w1.norm() < 1e-10);
        assert!(st.reconstruction_error(pk).unwrap() < 1e-10);
    }

    #[test]
    fn reset_of_shifted_wave_has_no_residual() {
        let pk = pack();
        let cache = PackCache::new(PackOptions { fit_decay: false, ..Default::default() });
        let w = pk.wave();
        let u = w.resample(0.37);
        let f = reset_frame(&u, 0.37, 0.1, w, &cache, PathTag::default()).unwrap();
        assert!(f.state.v1.norm() < 1e-9, "{}", f.state.v1.norm());
        assert!(matches!(
            reset_frame(&u, 20.0, 0.1, w, &cache, PathTag::default()),
            Err(Error::ShiftTooLarge { .. })
        ));
        let again = reset_frame(&u, 0.37, 0.1, w, &cache, PathTag::default()).unwrap();
        assert!(Arc::ptr_eq(&f.pack, &again.pack));
    }

    #[test]
    fn coupling_detects_reordering() {
        let nm = noise(0.1);
        let mut s = nm.seed_policy().stream(0, 0);
        let a = sample_increment(&nm, 0.01, &mut s).unwrap();
        let b = sample_increment(&nm, 0.01, &mut s).unwrap();
        let mut x = CouplingChecksum::default();
        x.absorb(&a).unwrap();
        x.absorb(&b).unwrap();
        let mut y = CouplingChecksum::default();
        assert!(matches!(y.absorb(&b), Err(Error::Coupling { expected: 0, got: 1 })));
        // relabelled swap slips past the sequence check but not the digest
        let mut z = CouplingChecksum::default();
        z.absorb(&NoiseIncrement { seq: 0, ..b.clone() }).unwrap();
        z.absorb(&NoiseIncrement { seq: 1, ..a.clone() }).unwrap();
        assert!(x.verify(&z).is_err());
        assert!(x.verify(&x.clone()).is_ok());
    }

    #[test]
    fn stopping_times_from_rows() {
        let rows: Vec<DiagRow> = (0..=10)
            .map(|k| DiagRow {
                t: k as f64 * 0.1,
                a1: 0.0,
                a2: 0.0,
                w1: 0.0,
                w2: 0.0,
                v1: 0.0,
                v2: 0.0,
                v1_mixed: k as f64,
                v2_mixed: 0.0,
                residuals: vec![ResidualRow::default()],
            })
            .collect();
        let inf = Caps { eps: f64::INFINITY, sigma: 1.0, c1: 1.0 };
        let st = stopping_times(&rows, 0, &inf, 1.0);
        assert_eq!(st, StoppingTimes { tau_v1: 1.0, tau_v2: 1.0, tau_z: 1.0, tau_z_prime: 1.0 });
        let caps = Caps { eps: 0.35, sigma: 0.1, c1: 1.0 };
        let st = stopping_times(&rows, 0, &caps, 1.0);
        assert!((st.tau_v1 - 0.4).abs() < 1e-12);
        assert_eq!(st.tau_z, 1.0);
    }
}
