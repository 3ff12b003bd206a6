//! Time integration of the stochastic equation and its deterministic limit.
//!
//! Integrators are strategies behind [`Scheme`], looked up by name in a
//! [`SchemeRegistry`]. Splitting schemes are lists of exactly solvable
//! sub-flows ([`Op`]); the expansion module reuses the same lists.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::ModelParams;
use crate::noise::{sample_increment, NoiseIncrement, NoiseModel, NoiseStream};
use crate::spectral::{hs_norm, lp_norm_slice, Field, Grid};

pub const DEFAULT_SCHEME: &str = "triple_jump_exact_noise";
/// Running `L^6(0,t;L^6)` norm beyond which a path is declared blown up.
pub const BLOWUP_L6: f64 = 1e6;

/// Exactly solvable sub-flow; times are fractions of the step `dt`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    /// Free group `S(tau dt)`.
    Free(f64),
    /// Loss `-eps (gamma u - mu conj(u))`, diagonal in (re, im).
    Loss(f64),
    /// Pointwise phase `(kappa |u|^2 - nu) tau dt - sigma w X`.
    Rotate { tau: f64, noise: f64 },
}

/// Noise seen by one step: increment samples, strength and `beta^2`.
#[derive(Clone, Copy, Debug)]
pub struct NoiseInput<'a> {
    pub x: &'a [f64],
    pub sigma: f64,
    pub beta_sq: f64,
}

/// Scratch buffers for one path.
pub struct Workspace {
    pub scratch: Vec<C64>,
    pub tmp: Vec<C64>,
}

impl Workspace {
    pub fn new(grid: &Grid) -> Self {
        Workspace { scratch: grid.scratch(), tmp: vec![C64::new(0.0, 0.0); grid.n_points()] }
    }
}

pub trait Scheme: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    /// Sub-flow list for splitting schemes.
    fn ops(&self) -> Option<Vec<Op>> {
        None
    }
    /// Classical order in `dt` of the deterministic part.
    fn deterministic_order(&self) -> u32;
    fn compile(&self, params: &ModelParams, grid: &Arc<Grid>, dt: f64) -> Box<dyn CompiledScheme>;
}

pub trait CompiledScheme: Send + Sync {
    fn step(&self, u: &mut [C64], noise: Option<NoiseInput<'_>>, ws: &mut Workspace);
}

/// Composition of exact sub-flows.
#[derive(Clone, Debug)]
pub struct SplitScheme {
    name: String,
    ops: Vec<Op>,
    order: u32,
}

impl SplitScheme {
    /// `S(dt/2) Loss(dt/2) Rot(dt; noise) Loss(dt/2) S(dt/2)`.
    pub fn strang() -> Self {
        SplitScheme { name: "strang_exact_noise".into(), ops: strang_ops(1.0, 1.0), order: 2 }
    }

    /// Symmetric triple-jump composition of three Strang steps; the noise
    /// rotation sits in the middle sub-step.
    pub fn triple_jump() -> Self {
        let w1 = 1.0 / (2.0 - 2f64.powf(1.0 / 3.0));
        let w0 = 1.0 - 2.0 * w1;
        let mut ops = Vec::new();
        for (w, noise) in [(w1, 0.0), (w0, 1.0), (w1, 0.0)] {
            ops.extend(strang_ops(w, noise));
        }
        SplitScheme { name: DEFAULT_SCHEME.into(), ops: merge_free(ops), order: 4 }
    }
}

fn strang_ops(w: f64, noise: f64) -> Vec<Op> {
    vec![
        Op::Free(0.5 * w),
        Op::Loss(0.5 * w),
        Op::Rotate { tau: w, noise },
        Op::Loss(0.5 * w),
        Op::Free(0.5 * w),
    ]
}

fn merge_free(ops: Vec<Op>) -> Vec<Op> {
    let mut out: Vec<Op> = Vec::with_capacity(ops.len());
    for op in ops {
        match (out.last_mut(), op) {
            (Some(Op::Free(a)), Op::Free(b)) => *a += b,
            _ => out.push(op),
        }
    }
    out
}

impl Scheme for SplitScheme {
    fn name(&self) -> &str {
        &self.name
    }

    fn ops(&self) -> Option<Vec<Op>> {
        Some(self.ops.clone())
    }

    fn deterministic_order(&self) -> u32 {
        self.order
    }

    fn compile(&self, params: &ModelParams, grid: &Arc<Grid>, dt: f64) -> Box<dyn CompiledScheme> {
        Box::new(CompiledSplit::new(&self.ops, params, grid, dt))
    }
}

/// A sub-flow with its precomputed factors.
#[derive(Clone, Debug)]
pub enum CompiledOp {
    Free(Vec<C64>),
    Loss { re: f64, im: f64 },
    Rotate { tau: f64, noise: f64 },
}

pub fn compile_ops(ops: &[Op], params: &ModelParams, grid: &Grid, dt: f64) -> Vec<CompiledOp> {
    let (lr, li) = params.loss_rates();
    ops.iter()
        .map(|op| match *op {
            Op::Free(w) => CompiledOp::Free(grid.free_symbol(w * dt)),
            Op::Loss(w) => CompiledOp::Loss { re: (-lr * w * dt).exp(), im: (-li * w * dt).exp() },
            Op::Rotate { tau, noise } => CompiledOp::Rotate { tau: tau * dt, noise },
        })
        .collect()
}

struct CompiledSplit {
    ops: Vec<CompiledOp>,
    grid: Arc<Grid>,
    nu: f64,
    kappa: f64,
}

impl CompiledSplit {
    fn new(ops: &[Op], params: &ModelParams, grid: &Arc<Grid>, dt: f64) -> Self {
        CompiledSplit { ops: compile_ops(ops, params, grid, dt), grid: grid.clone(), nu: params.nu, kappa: params.kappa }
    }
}

impl CompiledScheme for CompiledSplit {
    fn step(&self, u: &mut [C64], noise: Option<NoiseInput<'_>>, ws: &mut Workspace) {
        for op in &self.ops {
            match op {
                CompiledOp::Free(m) => self.grid.apply_multiplier_with(u, m, &mut ws.scratch),
                CompiledOp::Loss { re, im } => {
                    for v in u.iter_mut() {
                        *v = C64::new(v.re * re, v.im * im);
                    }
                }
                CompiledOp::Rotate { tau, noise: w } => {
                    let (kt, nt) = (self.kappa * tau, self.nu * tau);
                    match noise {
                        Some(nz) if *w != 0.0 => {
                            let sw = nz.sigma * w;
                            for (v, x) in u.iter_mut().zip(nz.x) {
                                *v *= C64::from_polar(1.0, kt * v.norm_sqr() - nt - sw * x);
                            }
                        }
                        _ => {
                            for v in u.iter_mut() {
                                *v *= C64::from_polar(1.0, kt * v.norm_sqr() - nt);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Exponential Euler–Maruyama on the Itô form with the explicit
/// `-beta^2 sigma^2 u / 2` drift. Cross-validation only.
#[derive(Clone, Debug, Default)]
pub struct EulerMaruyama;

impl Scheme for EulerMaruyama {
    fn name(&self) -> &str {
        "euler_maruyama"
    }

    fn deterministic_order(&self) -> u32 {
        1
    }

    fn compile(&self, params: &ModelParams, grid: &Arc<Grid>, dt: f64) -> Box<dyn CompiledScheme> {
        Box::new(CompiledEm { free: grid.free_symbol(dt), grid: grid.clone(), params: *params, dt })
    }
}

struct CompiledEm {
    free: Vec<C64>,
    grid: Arc<Grid>,
    params: ModelParams,
    dt: f64,
}

impl CompiledScheme for CompiledEm {
    fn step(&self, u: &mut [C64], noise: Option<NoiseInput<'_>>, ws: &mut Workspace) {
        let p = &self.params;
        let i = C64::new(0.0, 1.0);
        let dt = self.dt;
        match noise {
            Some(nz) => {
                let ito = 0.5 * nz.sigma * nz.sigma * nz.beta_sq;
                for (v, x) in u.iter_mut().zip(nz.x) {
                    let drift = p.apply_l(*v) + i * p.kappa * v.norm_sqr() * *v - ito * *v;
                    *v += drift * dt - i * nz.sigma * *v * x;
                }
            }
            None => {
                for v in u.iter_mut() {
                    *v += (p.apply_l(*v) + i * p.kappa * v.norm_sqr() * *v) * dt;
                }
            }
        }
        self.grid.apply_multiplier_with(u, &self.free, &mut ws.scratch);
    }
}

/// Integrators selectable by name.
pub struct SchemeRegistry {
    schemes: BTreeMap<String, Arc<dyn Scheme>>,
}

impl Default for SchemeRegistry {
    fn default() -> Self {
        let mut r = SchemeRegistry { schemes: BTreeMap::new() };
        r.register(Arc::new(SplitScheme::strang()));
        r.register(Arc::new(SplitScheme::triple_jump()));
        r.register(Arc::new(EulerMaruyama));
        r
    }
}

impl SchemeRegistry {
    pub fn register(&mut self, scheme: Arc<dyn Scheme>) {
        self.schemes.insert(scheme.name().to_string(), scheme);
    }

    pub fn names(&self) -> Vec<String> {
        self.schemes.keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Scheme>> {
        self.schemes.get(name).cloned().ok_or_else(|| Error::UnknownStrategy {
            kind: "scheme",
            name: name.to_string(),
            known: self.names().join(", "),
        })
    }
}

/// A compiled scheme bound to one path's scratch space.
pub struct Stepper {
    compiled: Box<dyn CompiledScheme>,
    scheme: Arc<dyn Scheme>,
    grid: Arc<Grid>,
    dt: f64,
    ws: Workspace,
}

impl Stepper {
    pub fn new(scheme: Arc<dyn Scheme>, params: &ModelParams, grid: &Arc<Grid>, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(invalid(format!("dt = {dt} must be positive")));
        }
        let cfl = grid.dx() * grid.dx() / PI;
        if dt > cfl {
            log::warn!("dt = {dt} exceeds the linear resolution bound dx^2/pi = {cfl:.3e}");
        }
        Ok(Stepper { compiled: scheme.compile(params, grid, dt), scheme, grid: grid.clone(), dt, ws: Workspace::new(grid) })
    }

    pub fn by_name(name: &str, params: &ModelParams, grid: &Arc<Grid>, dt: f64) -> Result<Self> {
        Self::new(SchemeRegistry::default().get(name)?, params, grid, dt)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn scheme(&self) -> &Arc<dyn Scheme> {
        &self.scheme
    }

    /// One step. `inc = None` is the deterministic flow.
    pub fn step(&mut self, u: &mut Field, inc: Option<&NoiseIncrement>, sigma: f64, beta_sq: f64) {
        let noise = inc.map(|i| NoiseInput { x: &i.values, sigma, beta_sq });
        self.compiled.step(u.values_mut(), noise, &mut self.ws);
    }

    pub fn step_slice(&mut self, u: &mut [C64], noise: Option<NoiseInput<'_>>) {
        self.compiled.step(u, noise, &mut self.ws);
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }
}

/// One step of the default scheme with a freshly drawn increment.
pub fn step_spfnls(u: &Field, params: &ModelParams, nm: &NoiseModel, dt: f64, stream: &mut NoiseStream) -> Result<Field> {
    let mut stepper = Stepper::by_name(DEFAULT_SCHEME, params, u.grid(), dt)?;
    let inc = sample_increment(nm, dt, stream)?;
    let mut out = u.clone();
    stepper.step(&mut out, Some(&inc), nm.sigma(), nm.beta() * nm.beta());
    if !out.is_finite() {
        return Err(Error::BlowUp { t: dt, reason: "non-finite sample".into() });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepperConfig {
    pub dt: f64,
    #[serde(default = "default_scheme")]
    pub scheme: String,
    pub t_end: f64,
    pub record_stride: usize,
    /// Store full states (needed by the conservation balance).
    #[serde(default = "default_true")]
    pub keep_states: bool,
}

fn default_scheme() -> String {
    DEFAULT_SCHEME.to_string()
}

fn default_true() -> bool {
    true
}

impl Default for StepperConfig {
    fn default() -> Self {
        StepperConfig { dt: 1e-3, scheme: default_scheme(), t_end: 10.0, record_stride: 100, keep_states: false }
    }
}

impl StepperConfig {
    /// Number of steps; checks that the recording stride tiles `[0, t_end]`.
    pub fn n_steps(&self) -> Result<usize> {
        if !(self.dt > 0.0) || !(self.t_end > 0.0) || self.record_stride == 0 {
            return Err(invalid("stepper needs dt > 0, t_end > 0, record_stride > 0"));
        }
        let n = (self.t_end / self.dt).round();
        if (n * self.dt - self.t_end).abs() > 1e-9 * self.t_end {
            return Err(invalid(format!("t_end = {} is not a multiple of dt = {}", self.t_end, self.dt)));
        }
        let n = n as usize;
        if n % self.record_stride != 0 {
            return Err(invalid(format!(
                "record_stride = {} does not divide the {n} steps",
                self.record_stride
            )));
        }
        Ok(n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub params: ModelParams,
    pub n_points: usize,
    pub domain_length: f64,
    pub sigma: f64,
    pub beta: f64,
    pub base_seed: u64,
    pub scheme: String,
    pub dt: f64,
}

/// Per-record diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub t: f64,
    pub l2: f64,
    pub h1: f64,
    pub h2: f64,
    /// `sup_{s <= t} ||u(s)||_{L^2}`.
    pub energy_norm: f64,
    /// `||u||_{L^6(0,t;L^6)}`, left-endpoint sum at step resolution.
    pub l6_norm: f64,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Option<Vec<Field>>,
    pub summary: Vec<SummaryRow>,
    pub provenance: Provenance,
}

/// Runs one path. `stream = None` (or `sigma = 0`) is deterministic.
pub fn simulate(
    u0: &Field,
    params: &ModelParams,
    nm: &NoiseModel,
    cfg: &StepperConfig,
    mut stream: Option<&mut NoiseStream>,
) -> Result<Trajectory> {
    u0.ensure_same_grid(nm.phi())?;
    let n = cfg.n_steps()?;
    let mut stepper = Stepper::by_name(&cfg.scheme, params, u0.grid(), cfg.dt)?;
    let beta_sq = nm.beta() * nm.beta();
    let dx = u0.grid().dx();
    let mut u = u0.clone();
    let mut times = Vec::new();
    let mut states = cfg.keep_states.then(Vec::new);
    let mut summary = Vec::new();
    let mut sup_l2: f64 = 0.0;
    let mut l6_acc = 0.0;
    let mut record = |k: usize, u: &Field, sup_l2: f64, l6_acc: f64| -> Result<()> {
        let t = k as f64 * cfg.dt;
        times.push(t);
        summary.push(SummaryRow {
            t,
            l2: u.norm(),
            h1: hs_norm(u, 1.0)?,
            h2: hs_norm(u, 2.0)?,
            energy_norm: sup_l2,
            l6_norm: l6_acc.powf(1.0 / 6.0),
        });
        if let Some(s) = states.as_mut() {
            s.push(u.clone());
        }
        Ok(())
    };
    sup_l2 = sup_l2.max(u.norm());
    record(0, &u, sup_l2, 0.0)?;
    for k in 1..=n {
        l6_acc += lp_norm_slice(u.values(), dx, 6.0).powi(6) * cfg.dt;
        match stream.as_deref_mut() {
            Some(s) if nm.sigma() > 0.0 => {
                let inc = sample_increment(nm, cfg.dt, s)?;
                stepper.step(&mut u, Some(&inc), nm.sigma(), beta_sq);
            }
            _ => stepper.step(&mut u, None, 0.0, beta_sq),
        }
        let t = k as f64 * cfg.dt;
        if !u.is_finite() {
            return Err(Error::BlowUp { t, reason: "non-finite sample".into() });
        }
        if l6_acc.powf(1.0 / 6.0) > BLOWUP_L6 {
            return Err(Error::BlowUp { t, reason: "L6L6 norm above 1e6".into() });
        }
        sup_l2 = sup_l2.max(u.norm());
        if k % cfg.record_stride == 0 {
            record(k, &u, sup_l2, l6_acc)?;
        }
    }
    Ok(Trajectory {
        times,
        states,
        summary,
        provenance: Provenance {
            params: *params,
            n_points: u0.grid().n_points(),
            domain_length: u0.grid().domain_length(),
            sigma: nm.sigma(),
            beta: nm.beta(),
            base_seed: nm.seed_policy().base_seed,
            scheme: cfg.scheme.clone(),
            dt: cfg.dt,
        },
    })
}

/// `r(t) = ||u(t)||² - ||u(0)||² + 2 eps ∫ (gamma ||u||² - mu Re ∫ u² dx) dt'`, trapezoid in time.
pub fn conservation_balance(traj: &Trajectory, params: &ModelParams) -> Result<Vec<f64>> {
    let states = traj
        .states
        .as_ref()
        .ok_or_else(|| Error::Unsupported("conservation balance needs stored states".into()))?;
    let integrand: Vec<f64> = states
        .iter()
        .map(|u| {
            let re_sq: f64 = u.values().iter().map(|v| (v * v).re).sum::<f64>() * u.grid().dx();
            params.gamma * u.norm_sq() - params.mu * re_sq
        })
        .collect();
    let m0 = states[0].norm_sq();
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(states.len());
    for k in 0..states.len() {
        if k > 0 {
            acc += 0.5 * (integrand[k] + integrand[k - 1]) * (traj.times[k] - traj.times[k - 1]);
        }
        out.push(states[k].norm_sq() - m0 + 2.0 * params.eps * acc);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_params, solitary_wave};
    use crate::noise::{KernelSpec, SeedPolicy};

    fn setup(eps: f64) -> (ModelParams, Arc<Grid>, NoiseModel) {
        let p = make_params(1.0, eps, 1.0, 1.1, 2.0).unwrap();
        let g = Grid::new(512, 64.0).unwrap();
        let nm = NoiseModel::from_spec(&g, &KernelSpec::default(), 0.1, SeedPolicy::new(5)).unwrap();
        (p, g, nm)
    }

    #[test]
    fn registry_lookup() {
        let r = SchemeRegistry::default();
        assert_eq!(r.names(), vec!["euler_maruyama", "strang_exact_noise", "triple_jump_exact_noise"]);
        assert!(matches!(r.get("rk4"), Err(Error::UnknownStrategy { .. })));
        assert_eq!(r.get(DEFAULT_SCHEME).unwrap().deterministic_order(), 4);
    }

    #[test]
    fn triple_jump_ops_are_consistent() {
        let ops = SplitScheme::triple_jump().ops().unwrap();
        let free: f64 = ops.iter().map(|o| if let Op::Free(w) = o { *w } else { 0.0 }).sum();
        let loss: f64 = ops.iter().map(|o| if let Op::Loss(w) = o { *w } else { 0.0 }).sum();
        let rot: f64 = ops.iter().map(|o| if let Op::Rotate { tau, .. } = o { *tau } else { 0.0 }).sum();
        let noise: f64 = ops.iter().map(|o| if let Op::Rotate { noise, .. } = o { *noise } else { 0.0 }).sum();
        for s in [free, loss, rot, noise] {
            assert!((s - 1.0).abs() < 1e-14);
        }
        assert_eq!(ops.len(), 13);
    }

    #[test]
    fn zero_data_stays_zero() {
        let (p, g, nm) = setup(0.1);
        let cfg = StepperConfig { dt: 0.01, t_end: 1.0, record_stride: 10, ..StepperConfig::default() };
        let traj = simulate(&Field::zeros(&g), &p, &nm.with_sigma(0.0), &cfg, None).unwrap();
        assert!(traj.summary.iter().all(|r| r.l2 == 0.0));
    }

    #[test]
    fn gauge_covariance_is_exact() {
        let (p, g, nm) = setup(0.1);
        let w = solitary_wave(&p, &g, 0.0).unwrap();
        let mut s = nm.seed_policy().stream(0, 0);
        let inc = sample_increment(&nm, 1e-2, &mut s).unwrap();
        for name in ["strang_exact_noise", DEFAULT_SCHEME] {
            let mut st = Stepper::by_name(name, &p, &g, 1e-2).unwrap();
            let mut a = w.u_star.clone();
            st.step(&mut a, Some(&inc), 0.1, 1.0);
            for c in [2.0, 0.5] {
                let mut b = w.u_star.clone();
                st.step(&mut b, Some(&inc.scaled(c)), 0.1 / c, 1.0);
                assert_eq!(a.values(), b.values());
            }
        }
    }

    #[test]
    fn translation_equivariance() {
        let (p, g, nm) = setup(0.1);
        let w = solitary_wave(&p, &g, 0.0).unwrap();
        let u0 = w.u_star.add(&Field::from_real_fn(&g, |x| 0.1 * (-(x - 1.0) * (x - 1.0)).exp()));
        let mut s = nm.seed_policy().stream(0, 0);
        let k = 9;
        let mut st = Stepper::by_name(DEFAULT_SCHEME, &p, &g, 1e-2).unwrap();
        let (mut a, mut b) = (u0.clone(), u0.roll(k));
        for _ in 0..50 {
            let inc = sample_increment(&nm, 1e-2, &mut s).unwrap();
            let shifted = NoiseIncrement {
                values: Field::from_real(&g, &inc.values).unwrap().roll(k).values().iter().map(|v| v.re).collect(),
                ..inc.clone()
            };
            st.step(&mut a, Some(&inc), nm.sigma(), 1.0);
            st.step(&mut b, Some(&shifted), nm.sigma(), 1.0);
        }
        assert!(a.roll(k).sub(&b).max_abs() < 1e-12);
    }

    #[test]
    fn stride_validation() {
        let bad = StepperConfig { dt: 0.01, t_end: 1.0, record_stride: 7, ..StepperConfig::default() };
        assert!(bad.n_steps().is_err());
        let bad = StepperConfig { dt: 0.03, t_end: 1.0, record_stride: 1, ..StepperConfig::default() };
        assert!(bad.n_steps().is_err());
    }

    #[test]
    fn summary_only_balance_is_unsupported() {
        let (p, g, nm) = setup(0.1);
        let cfg = StepperConfig { dt: 0.01, t_end: 0.1, record_stride: 1, keep_states: false, ..StepperConfig::default() };
        let traj = simulate(&Field::zeros(&g), &p, &nm, &cfg, None).unwrap();
        assert!(matches!(conservation_balance(&traj, &p), Err(Error::Unsupported(_))));
    }

    #[test]
    fn blowup_is_flagged() {
        let (p, g, nm) = setup(0.1);
        let huge = Field::from_real_fn(&g, |x| 1e7 * (-x * x).exp());
        let cfg = StepperConfig { dt: 0.01, t_end: 1.0, record_stride: 1, ..StepperConfig::default() };
        let err = simulate(&huge, &p, &nm, &cfg, None).unwrap_err();
        assert!(matches!(err, Error::BlowUp { .. }));
        assert_eq!(err.exit_code(), 3);
    }
}
