//! Monte Carlo studies over ensembles of noise paths.
//!
//! Every path draws from its own stream `hash(base_seed, sweep, path)`, paths
//! run in parallel and are collected in index order, and all reductions are
//! sequential. Reports are therefore bit-identical for any worker count.

pub mod diffusion;
pub mod escape;
pub mod fluctuation;
pub mod order;
pub mod stats;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::DEFAULT_SCHEME;
use crate::error::{invalid, Error, Result};
use crate::linearization::{LinearizationPack, PackCache};
use crate::model::{solitary_wave, ModelParams, ModelSpec};
use crate::noise::{KernelSpec, NoiseModel, SeedPolicy};
use crate::spectral::GridSpec;

pub use diffusion::{phase_diffusion_oracle, run_phase_diffusion_study, DiffusionReport};
pub use escape::{orbital_distance, run_escape_study, EscapeReport};
pub use fluctuation::{run_fluctuation_study, FluctuationReport};
pub use order::{run_order_study, OrderReport};

/// Parameter set used by the studies: strong loss and gain, wide wave.
pub fn experiment_model() -> ModelSpec {
    ModelSpec { nu: 1.0, eps: 0.8, gamma: 1.0, mu: 1.1, kappa: 0.8 }
}

pub fn experiment_grid() -> GridSpec {
    GridSpec { n_points: 512, domain_length: 60.0 }
}

/// Everything that determines an ensemble run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSpec {
    pub n_paths: usize,
    pub base_seed: u64,
    pub model: ModelSpec,
    pub grid: GridSpec,
    pub noise: KernelSpec,
    pub dt: f64,
    pub record_stride: usize,
    pub scheme: String,
    /// Simulated time; each study has its own default when unset.
    pub horizon: Option<f64>,
    pub sigma_sweep: Vec<f64>,
    /// Escape thresholds for the orbital distance.
    pub eps_sweep: Vec<f64>,
    /// Number of reset windows.
    pub windows: usize,
    /// Overrides the fitted reset window `log(6M)/a`.
    pub window_length: Option<f64>,
    /// Order study: repeat at `dt/2` on the same Brownian paths.
    pub halve_dt: bool,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        EnsembleSpec {
            n_paths: 100,
            base_seed: 1,
            model: experiment_model(),
            grid: experiment_grid(),
            noise: KernelSpec::default(),
            dt: 5e-3,
            record_stride: 20,
            scheme: DEFAULT_SCHEME.to_string(),
            horizon: None,
            sigma_sweep: vec![0.05, 0.1],
            eps_sweep: vec![0.3],
            windows: 2,
            window_length: None,
            halve_dt: false,
        }
    }
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths < 2 {
            return Err(invalid("n_paths must be at least 2"));
        }
        if self.sigma_sweep.is_empty() || self.eps_sweep.is_empty() {
            return Err(invalid("sigma_sweep and eps_sweep must be nonempty"));
        }
        if self.sigma_sweep.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(invalid("sigma values must be finite and nonnegative"));
        }
        if self.eps_sweep.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(invalid("escape thresholds must be positive"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(invalid("dt must be positive"));
        }
        if self.record_stride == 0 || self.windows == 0 {
            return Err(invalid("record_stride and windows must be at least 1"));
        }
        if let Some(h) = self.horizon {
            if !(h > 0.0 && h.is_finite()) {
                return Err(invalid("horizon must be positive"));
            }
        }
        if let Some(w) = self.window_length {
            if !(w > 0.0 && w.is_finite()) {
                return Err(invalid("window_length must be positive"));
            }
        }
        self.params()?;
        self.grid.build()?;
        Ok(())
    }

    pub fn params(&self) -> Result<ModelParams> {
        self.model.build()
    }

    /// Pack of the centred wave, shared through `cache`.
    pub fn pack(&self, cache: &PackCache) -> Result<Arc<LinearizationPack>> {
        let grid = self.grid.build()?;
        let wave = solitary_wave(&self.params()?, &grid, 0.0)?;
        cache.get_or_build(&wave)
    }

    pub fn noise_model(&self, sigma: f64) -> Result<NoiseModel> {
        let grid = self.grid.build()?;
        NoiseModel::from_spec(&grid, &self.noise, sigma, SeedPolicy::new(self.base_seed))
    }

    /// Number of steps covering `t`, rejecting meshes that miss it.
    pub(crate) fn steps_for(&self, t: f64) -> Result<usize> {
        let n = (t / self.dt).round();
        if n < 1.0 || (n * self.dt - t).abs() > 1e-9 * t.max(1.0) {
            return Err(invalid(format!("time {t} is not a multiple of dt = {}", self.dt)));
        }
        Ok(n as usize)
    }
}

/// Rounds `t` up to the step mesh.
pub(crate) fn on_mesh(t: f64, dt: f64) -> f64 {
    (t / dt - 1e-9).ceil() * dt
}

/// A CSV table with optional `# key = value` footer lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub footer: Vec<(String, String)>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Table {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            footer: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        self.rows.iter().map(|r| r[j].parse().ok()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        for (k, v) in &self.footer {
            let _ = writeln!(s, "# {k} = {v}");
        }
        s
    }
}

/// Study output in renderable form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub study: String,
    pub summary: Vec<(String, String)>,
    pub tables: Vec<Table>,
}

impl StudyReport {
    pub fn new(study: &str) -> Self {
        StudyReport { study: study.to_string(), summary: Vec::new(), tables: Vec::new() }
    }

    pub fn put(&mut self, key: &str, value: impl ToString) {
        self.summary.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.summary.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key)?.parse().ok()
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// `key = value` lines, one per summary entry.
    pub fn summary_text(&self) -> String {
        let mut s = format!("study = {}\n", self.study);
        for (k, v) in &self.summary {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Summary followed by every table, each introduced by `[table name]`.
    pub fn render(&self) -> String {
        let mut s = self.summary_text();
        for t in &self.tables {
            let _ = write!(s, "\n[table {}]\n{}", t.name, t.to_csv());
        }
        s
    }
}

pub(crate) fn num(x: f64) -> String {
    format!("{x}")
}

/// A named ensemble computation.
pub trait Study: Send + Sync {
    fn name(&self) -> &'static str;
    /// Study-specific defaults.
    fn defaults(&self) -> EnsembleSpec;
    fn run(&self, spec: &EnsembleSpec, cache: &PackCache) -> Result<StudyReport>;
}

struct EscapeStudy;
struct DiffusionStudy;
struct OrderStudy;
struct FluctuationStudy;

impl Study for EscapeStudy {
    fn name(&self) -> &'static str {
        "escape"
    }
    fn defaults(&self) -> EnsembleSpec {
        escape::defaults()
    }
    fn run(&self, spec: &EnsembleSpec, cache: &PackCache) -> Result<StudyReport> {
        Ok(run_escape_study(spec, cache)?.to_report())
    }
}

impl Study for DiffusionStudy {
    fn name(&self) -> &'static str {
        "diffusion"
    }
    fn defaults(&self) -> EnsembleSpec {
        diffusion::defaults()
    }
    fn run(&self, spec: &EnsembleSpec, cache: &PackCache) -> Result<StudyReport> {
        Ok(run_phase_diffusion_study(spec, cache)?.to_report())
    }
}

impl Study for OrderStudy {
    fn name(&self) -> &'static str {
        "order"
    }
    fn defaults(&self) -> EnsembleSpec {
        order::defaults()
    }
    fn run(&self, spec: &EnsembleSpec, cache: &PackCache) -> Result<StudyReport> {
        Ok(run_order_study(spec, cache)?.to_report())
    }
}

impl Study for FluctuationStudy {
    fn name(&self) -> &'static str {
        "fluctuation"
    }
    fn defaults(&self) -> EnsembleSpec {
        fluctuation::defaults()
    }
    fn run(&self, spec: &EnsembleSpec, cache: &PackCache) -> Result<StudyReport> {
        Ok(run_fluctuation_study(spec, cache)?.to_report())
    }
}

/// Studies selectable by name.
pub struct StudyRegistry {
    studies: BTreeMap<String, Arc<dyn Study>>,
}

impl Default for StudyRegistry {
    fn default() -> Self {
        let mut r = StudyRegistry { studies: BTreeMap::new() };
        r.register(Arc::new(EscapeStudy));
        r.register(Arc::new(DiffusionStudy));
        r.register(Arc::new(OrderStudy));
        r.register(Arc::new(FluctuationStudy));
        r
    }
}

impl StudyRegistry {
    pub fn register(&mut self, study: Arc<dyn Study>) {
        self.studies.insert(study.name().to_string(), study);
    }

    pub fn names(&self) -> Vec<String> {
        self.studies.keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Study>> {
        self.studies.get(name).cloned().ok_or_else(|| Error::UnknownStrategy {
            kind: "study",
            name: name.to_string(),
            known: self.names().join(", "),
        })
    }
}

/// Runs `f(0..n)` on the current rayon pool and returns the results in index order.
pub fn run_paths<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        let mut s = EnsembleSpec::default();
        s.validate().unwrap();
        s.n_paths = 1;
        assert!(s.validate().is_err());
        let mut s = EnsembleSpec::default();
        s.sigma_sweep.clear();
        assert!(s.validate().is_err());
        let mut s = EnsembleSpec::default();
        s.model.mu = 0.5;
        assert!(matches!(s.validate(), Err(Error::UnstableRegime { .. })));
    }

    #[test]
    fn registry_lists_studies() {
        let r = StudyRegistry::default();
        assert_eq!(r.names(), ["diffusion", "escape", "fluctuation", "order"]);
        assert!(matches!(r.get("nope"), Err(Error::UnknownStrategy { .. })));
    }

    #[test]
    fn run_paths_keeps_order() {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let v = pool.install(|| run_paths(100, |i| Ok(i * i))).unwrap();
        assert_eq!(v, (0..100).map(|i| i * i).collect::<Vec<_>>());
        let e: Result<Vec<usize>> = run_paths(10, |i| if i == 7 { Err(invalid("x")) } else { Ok(i) });
        assert!(e.is_err());
    }

    #[test]
    fn table_csv() {
        let mut t = Table::new("t", &["a", "b"]);
        t.push(vec![num(1.0), num(0.5)]);
        t.footer.push(("slope".into(), num(2.0)));
        assert_eq!(t.to_csv(), "a,b\n1,0.5\n# slope = 2\n");
        assert_eq!(t.column("b").unwrap(), vec![0.5]);
    }
}
