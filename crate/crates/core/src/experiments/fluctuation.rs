//! Growth of the fluctuation fields `w1`, `w2` against the raw `v2`.

use num_complex::Complex64 as C64;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::stats;
use super::{num, on_mesh, run_paths, EnsembleSpec, StudyReport, Table};
use crate::dynamics::SchemeRegistry;
use crate::error::Result;
use crate::expansion::{run_expansion_path, ExpansionConfig, JetStepper, PathTag, StreamSource};
use crate::linearization::{project_pi, LinearizationPack, PackCache};
use crate::noise::{apply_phi, sample_increment, NoiseModel};
use crate::spectral::Field;

/// Sweep index reserved for the forgetting pairs.
const FORGET_SWEEP: u64 = 1 << 32;

pub(crate) fn defaults() -> EnsembleSpec {
    EnsembleSpec {
        n_paths: 500,
        sigma_sweep: vec![0.05],
        scheme: "strang_exact_noise".to_string(),
        ..EnsembleSpec::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub t: f64,
    pub w1: f64,
    pub w2: f64,
    pub v1: f64,
    pub v2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluctuationReport {
    pub a: f64,
    pub beta: f64,
    pub horizon: f64,
    /// Ensemble second moments `E||.||²`.
    pub moments: Vec<MomentRow>,
    /// Log-log slope of `E||w1||²` over `[5/a, horizon]`.
    pub w1_late_slope: f64,
    /// Late window `[0.3 horizon, horizon]`.
    pub growth_window: (f64, f64),
    /// Log-log slopes of `E||w2||²` and `E||v2||²` over the late window.
    pub w2_growth: f64,
    pub v2_growth: f64,
    /// The same slopes over `[5/a, 10/a]`.
    pub w2_growth_early: f64,
    pub v2_growth_early: f64,
    /// Least squares `E||v2||² ≈ c0 + c1 t + c2 t²` over `[1/a, horizon]`.
    pub v2_quadratic: [f64; 3],
    /// Least-squares `C` in `sqrt(E||w1||²) ≈ C β min(sqrt t, 1)`.
    pub w1_shape_constant: f64,
    /// `(t, mean ||Π(v1 - v1')||)` for paired paths started at `Πf` and `0`.
    pub forgetting: Vec<(f64, f64)>,
    pub forgetting_rate: f64,
    pub max_reconstruction: f64,
}

impl FluctuationReport {
    pub fn forgetting_ratio(&self) -> f64 {
        self.forgetting_rate / self.a
    }
}

fn window_slope(t: &[f64], y: &[f64], t0: f64, t1: f64) -> f64 {
    let (x, v): (Vec<f64>, Vec<f64>) =
        t.iter().zip(y).filter(|(t, _)| **t >= t0 - 1e-9 && **t <= t1 + 1e-9).map(|(a, b)| (*a, *b)).unzip();
    if x.len() < 2 {
        return f64::NAN;
    }
    stats::log_log_slope(&x, &v).slope
}

/// `y ≈ c0 + c1 t + c2 t²` for `t >= t0`, by the normal equations.
fn quadratic_fit(t: &[f64], y: &[f64], t0: f64) -> [f64; 3] {
    let mut m = faer::Mat::<f64>::zeros(3, 3);
    let mut r = faer::Mat::<f64>::zeros(3, 1);
    for (&t, &y) in t.iter().zip(y).filter(|(t, _)| **t >= t0 - 1e-9) {
        let b = [1.0, t, t * t];
        for i in 0..3 {
            r[(i, 0)] += b[i] * y;
            for j in 0..3 {
                m[(i, j)] += b[i] * b[j];
            }
        }
    }
    use faer::linalg::solvers::Solve;
    let c = m.partial_piv_lu().solve(&r);
    [c[(0, 0)], c[(1, 0)], c[(2, 0)]]
}

/// Smooth, localized, unit-norm `Π f` drawn from the seed.
fn initial_fluctuation(pack: &LinearizationPack, nm: &NoiseModel) -> Result<Field> {
    let grid = pack.grid();
    let mut rng = nm.seed_policy().stream(FORGET_SWEEP + 1, 0);
    let mut draw = || -> Result<Field> {
        let g: Vec<f64> = (0..grid.n_points()).map(|_| StandardNormal.sample(rng.rng())).collect();
        apply_phi(&Field::from_real(grid, &g)?, nm)
    };
    let re = draw()?;
    let im = draw()?;
    let s = pack.wave().params.wave_scale;
    let f = Field::from_values(
        grid,
        grid.x()
            .iter()
            .zip(re.values().iter().zip(im.values()))
            .map(|(&x, (r, i))| C64::new(r.re, i.re) / (0.5 * s * x).cosh())
            .collect(),
    )?;
    let p = project_pi(&f, pack)?;
    Ok(p.scaled(1.0 / p.norm()))
}

pub fn run_fluctuation_study(spec: &EnsembleSpec, cache: &PackCache) -> Result<FluctuationReport> {
    spec.validate()?;
    let pack = spec.pack(cache)?;
    let nm = spec.noise_model(1.0)?;
    let a = pack.decay()?.a;
    let horizon = spec.horizon.unwrap_or_else(|| on_mesh(50.0 / a, spec.dt * spec.record_stride as f64));
    spec.steps_for(horizon)?;
    let policy = nm.seed_policy();
    let cfg = ExpansionConfig {
        dt: spec.dt,
        t_end: horizon,
        record_stride: spec.record_stride,
        sigmas: Vec::new(),
        second_order: true,
        noise_off: false,
        keep_states: false,
        scheme: spec.scheme.clone(),
    };
    let paths = run_paths(spec.n_paths, |p| {
        let tag = PathTag { base_seed: spec.base_seed, sweep: 0, path: p as u64 };
        let mut src = StreamSource::new(&nm, spec.dt, policy.stream(0, p as u64));
        let rec = run_expansion_path(&pack, &nm, &cfg, None, &mut src, tag)?;
        let rows: Vec<[f64; 5]> = rec.rows.iter().map(|r| [r.t, r.w1, r.w2, r.v1, r.v2]).collect();
        Ok((rows, rec.max_reconstruction))
    })?;
    let n_rec = paths[0].0.len();
    let moments: Vec<MomentRow> = (0..n_rec)
        .map(|k| {
            let m = |j: usize| stats::mean(&paths.iter().map(|p| p.0[k][j] * p.0[k][j]).collect::<Vec<_>>());
            MomentRow { t: paths[0].0[k][0], w1: m(1), w2: m(2), v1: m(3), v2: m(4) }
        })
        .collect();
    let t: Vec<f64> = moments.iter().map(|m| m.t).collect();
    let col = |f: fn(&MomentRow) -> f64| moments.iter().map(f).collect::<Vec<_>>();
    let (w1, w2, v2) = (col(|m| m.w1), col(|m| m.w2), col(|m| m.v2));
    let early = ((5.0 / a).min(0.5 * horizon), (10.0 / a).min(horizon));
    let growth_window = (0.3 * horizon, horizon);
    let beta = nm.beta();
    let (mut gy, mut gg) = (0.0, 0.0);
    for (&t, &w) in t.iter().zip(&w1) {
        let g = beta * t.sqrt().min(1.0);
        gy += g * w.sqrt();
        gg += g * g;
    }

    let forget_end = on_mesh((5.0 / a).min(horizon), spec.dt);
    let n_forget = spec.steps_for(forget_end)?;
    let start = initial_fluctuation(&pack, &nm)?;
    let scheme = SchemeRegistry::default().get(&spec.scheme)?;
    let pairs = spec.n_paths.min(8);
    let diffs = run_paths(pairs, |p| {
        let mut jets = JetStepper::new(pack.wave(), scheme.as_ref(), spec.dt, beta * beta)?;
        let mut stream = policy.stream(FORGET_SWEEP, p as u64);
        let mut x = start.clone();
        let mut y = Field::zeros(pack.grid());
        let mut out = vec![(0.0, project_pi(&x.sub(&y), &pack)?.norm())];
        for k in 1..=n_forget {
            let inc = sample_increment(&nm, spec.dt, &mut stream)?;
            jets.step(x.values_mut(), None, Some(&inc.values));
            jets.step(y.values_mut(), None, Some(&inc.values));
            if k % spec.record_stride == 0 {
                out.push((k as f64 * spec.dt, project_pi(&x.sub(&y), &pack)?.norm()));
            }
        }
        Ok(out)
    })?;
    let forgetting: Vec<(f64, f64)> = (0..diffs[0].len())
        .map(|k| (diffs[0][k].0, stats::mean(&diffs.iter().map(|d| d[k].1).collect::<Vec<_>>())))
        .collect();
    let (ft, fl): (Vec<f64>, Vec<f64>) = forgetting
        .iter()
        .filter(|(t, _)| *t >= 1.0 / a - 1e-9 && *t <= 5.0 / a + 1e-9)
        .map(|(t, d)| (*t, d.ln()))
        .unzip();
    let forgetting_rate = if ft.len() >= 2 { -stats::linear_fit(&ft, &fl).slope } else { f64::NAN };

    Ok(FluctuationReport {
        a,
        beta,
        horizon,
        w1_late_slope: window_slope(&t, &w1, early.0, horizon),
        w2_growth_early: window_slope(&t, &w2, early.0, early.1),
        v2_growth_early: window_slope(&t, &v2, early.0, early.1),
        growth_window,
        w2_growth: window_slope(&t, &w2, growth_window.0, growth_window.1),
        v2_growth: window_slope(&t, &v2, growth_window.0, growth_window.1),
        v2_quadratic: quadratic_fit(&t, &v2, 1.0 / a),
        w1_shape_constant: gy / gg,
        moments,
        forgetting,
        forgetting_rate,
        max_reconstruction: paths.iter().fold(0.0f64, |m, p| m.max(p.1)),
    })
}

impl FluctuationReport {
    pub fn to_report(&self) -> StudyReport {
        let mut r = StudyReport::new("fluctuation");
        r.put("a", num(self.a));
        r.put("beta", num(self.beta));
        r.put("horizon", num(self.horizon));
        r.put("w1_late_slope", num(self.w1_late_slope));
        r.put("growth_t0", num(self.growth_window.0));
        r.put("growth_t1", num(self.growth_window.1));
        r.put("w2_growth", num(self.w2_growth));
        r.put("v2_growth", num(self.v2_growth));
        r.put("w2_growth_early", num(self.w2_growth_early));
        r.put("v2_growth_early", num(self.v2_growth_early));
        r.put("v2_c0", num(self.v2_quadratic[0]));
        r.put("v2_c1", num(self.v2_quadratic[1]));
        r.put("v2_c2", num(self.v2_quadratic[2]));
        r.put("w1_shape_constant", num(self.w1_shape_constant));
        r.put("forgetting_rate", num(self.forgetting_rate));
        r.put("forgetting_rate_over_a", num(self.forgetting_ratio()));
        r.put("max_reconstruction", num(self.max_reconstruction));
        let mut m = Table::new("moments", &["t", "w1_sq", "w2_sq", "v1_sq", "v2_sq"]);
        for row in &self.moments {
            m.push(vec![num(row.t), num(row.w1), num(row.w2), num(row.v1), num(row.v2)]);
        }
        let mut f = Table::new("forgetting", &["t", "mean_pi_difference"]);
        for (t, d) in &self.forgetting {
            f.push(vec![num(*t), num(*d)]);
        }
        f.footer.push(("rate_over_a".into(), num(self.forgetting_ratio())));
        r.tables = vec![m, f];
        r
    }
}
