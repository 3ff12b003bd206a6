//! Brownian wandering of the first-order phase `σ a1(t)`.

use serde::{Deserialize, Serialize};

use super::stats::{self, KsResult};
use super::{num, run_paths, EnsembleSpec, StudyReport, Table};
use crate::error::{invalid, Result};
use crate::expansion::{run_expansion_path, ExpansionConfig, PathTag, StreamSource};
use crate::linearization::{LinearizationPack, PackCache};
use crate::noise::{apply_phi, NoiseModel};
use crate::spectral::Field;

pub(crate) fn defaults() -> EnsembleSpec {
    EnsembleSpec { n_paths: 1000, horizon: Some(5.0), sigma_sweep: vec![0.05, 0.1], ..EnsembleSpec::default() }
}

/// `Σ_k 𝓟(i u* Φ e_k)²` over the orthonormal grid basis `e_k = δ_k / sqrt(dx)`:
/// the growth rate of `Var[a1(t)]`.
pub fn phase_diffusion_oracle(pack: &LinearizationPack, nm: &NoiseModel) -> Result<f64> {
    let wave = pack.wave();
    let grid = wave.grid();
    let n = grid.n_points();
    let h = 1.0 / grid.dx().sqrt();
    let i = num_complex::Complex64::new(0.0, 1.0);
    let mut sum = 0.0;
    for k in 0..n {
        let e = Field::from_real(grid, &(0..n).map(|j| if j == k { h } else { 0.0 }).collect::<Vec<_>>())?;
        let g = apply_phi(&e, nm)?;
        let f: Vec<_> = g.values().iter().zip(wave.u_star.values()).map(|(g, u)| i * u * g.re).collect();
        let p = pack.zero_coefficient(&Field::from_values(grid, f)?);
        sum += p * p;
    }
    Ok(sum)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionPoint {
    pub sigma: f64,
    /// `(t, mean, variance)` of `σ a1` across paths.
    pub curve: Vec<(f64, f64, f64)>,
    pub fit: stats::LinearFit,
    pub oracle_slope: f64,
    pub relative_error: f64,
    /// Largest `|mean| / SE` over the recorded times.
    pub max_mean_z: f64,
    /// `(t, KS)` against `N(0, σ² D t)`.
    pub ks: Vec<(f64, KsResult)>,
    /// Mean per-path quadratic variation rate of `σ a1`.
    pub quadratic_variation_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionReport {
    pub beta: f64,
    pub oracle_d: f64,
    pub fit_window: (f64, f64),
    pub points: Vec<DiffusionPoint>,
    /// `(σ_j, σ_{j+1}, slope ratio, expected (σ_{j+1}/σ_j)²)`.
    pub ratios: Vec<(f64, f64, f64, f64)>,
    pub max_reconstruction: f64,
}

pub fn run_phase_diffusion_study(spec: &EnsembleSpec, cache: &PackCache) -> Result<DiffusionReport> {
    spec.validate()?;
    if spec.sigma_sweep.iter().any(|&s| s <= 0.0) {
        return Err(invalid("phase diffusion needs sigma > 0"));
    }
    let pack = spec.pack(cache)?;
    let nm = spec.noise_model(1.0)?;
    let horizon = spec.horizon.unwrap_or(5.0);
    spec.steps_for(horizon)?;
    let cfg = ExpansionConfig {
        dt: spec.dt,
        t_end: horizon,
        record_stride: spec.record_stride,
        sigmas: Vec::new(),
        second_order: false,
        noise_off: false,
        keep_states: false,
        scheme: spec.scheme.clone(),
    };
    let d = phase_diffusion_oracle(&pack, &nm)?;
    let window = (0.1 * horizon, horizon);
    let policy = nm.seed_policy();
    let mut points = Vec::new();
    let mut worst: f64 = 0.0;
    for (s, &sigma) in spec.sigma_sweep.iter().enumerate() {
        let paths = run_paths(spec.n_paths, |p| {
            let tag = PathTag { base_seed: spec.base_seed, sweep: s as u64, path: p as u64 };
            let mut src = StreamSource::new(&nm, spec.dt, policy.stream(s as u64, p as u64));
            let rec = run_expansion_path(&pack, &nm, &cfg, None, &mut src, tag)?;
            let a: Vec<(f64, f64)> = rec.rows.iter().map(|r| (r.t, sigma * r.a1)).collect();
            Ok((a, rec.max_reconstruction))
        })?;
        worst = paths.iter().fold(worst, |m, p| m.max(p.1));
        let times: Vec<f64> = paths[0].0.iter().map(|x| x.0).collect();
        let mut curve = Vec::with_capacity(times.len());
        let mut max_mean_z: f64 = 0.0;
        let mut columns = Vec::with_capacity(times.len());
        for (k, &t) in times.iter().enumerate() {
            let col: Vec<f64> = paths.iter().map(|p| p.0[k].1).collect();
            let m = stats::mean(&col);
            let v = stats::variance(&col);
            if t > 0.0 {
                max_mean_z = max_mean_z.max(m.abs() / stats::std_error(&col));
            }
            curve.push((t, m, v));
            columns.push(col);
        }
        let (fx, fy): (Vec<f64>, Vec<f64>) = curve
            .iter()
            .filter(|c| c.0 >= window.0 - 1e-9 && c.0 <= window.1 + 1e-9)
            .map(|c| (c.0, c.2))
            .unzip();
        let fit = stats::linear_fit(&fx, &fy);
        let oracle_slope = sigma * sigma * d;
        let mut ks = Vec::new();
        for frac in [0.2, 0.5, 1.0] {
            let k = nearest(&times, frac * horizon);
            let t = times[k];
            ks.push((t, stats::ks_normal(&columns[k], 0.0, (oracle_slope * t).sqrt())));
        }
        let qv: Vec<f64> = paths
            .iter()
            .map(|p| p.0.windows(2).map(|w| (w[1].1 - w[0].1).powi(2)).sum::<f64>() / horizon)
            .collect();
        points.push(DiffusionPoint {
            sigma,
            curve,
            fit,
            oracle_slope,
            relative_error: (fit.slope - oracle_slope).abs() / oracle_slope,
            max_mean_z,
            ks,
            quadratic_variation_rate: stats::mean(&qv),
        });
    }
    let ratios = points
        .windows(2)
        .map(|w| (w[0].sigma, w[1].sigma, w[1].fit.slope / w[0].fit.slope, (w[1].sigma / w[0].sigma).powi(2)))
        .collect();
    Ok(DiffusionReport { beta: nm.beta(), oracle_d: d, fit_window: window, points, ratios, max_reconstruction: worst })
}

fn nearest(times: &[f64], t: f64) -> usize {
    let mut best = 0;
    for (k, &s) in times.iter().enumerate() {
        if (s - t).abs() < (times[best] - t).abs() {
            best = k;
        }
    }
    best
}

impl DiffusionReport {
    pub fn to_report(&self) -> StudyReport {
        let mut r = StudyReport::new("diffusion");
        r.put("beta", num(self.beta));
        r.put("oracle_d", num(self.oracle_d));
        r.put("fit_t0", num(self.fit_window.0));
        r.put("fit_t1", num(self.fit_window.1));
        r.put("max_reconstruction", num(self.max_reconstruction));
        let mut curve = Table::new("variance", &["sigma", "t", "mean", "variance"]);
        let mut fits = Table::new("slopes", &["sigma", "slope", "r2", "oracle_slope", "relative_error", "max_mean_z", "qv_rate"]);
        let mut ks = Table::new("ks", &["sigma", "t", "statistic", "p_value"]);
        for p in &self.points {
            for c in &p.curve {
                curve.push(vec![num(p.sigma), num(c.0), num(c.1), num(c.2)]);
            }
            fits.push(vec![
                num(p.sigma),
                num(p.fit.slope),
                num(p.fit.r2),
                num(p.oracle_slope),
                num(p.relative_error),
                num(p.max_mean_z),
                num(p.quadratic_variation_rate),
            ]);
            for (t, k) in &p.ks {
                ks.push(vec![num(p.sigma), num(*t), num(k.statistic), num(k.p_value)]);
            }
        }
        for (j, (a, b, ratio, expected)) in self.ratios.iter().enumerate() {
            fits.footer.push((format!("ratio_{j}"), format!("{} (sigma {} -> {}, expected {})", num(*ratio), num(*a), num(*b), num(*expected))));
            r.put(&format!("slope_ratio_{j}"), num(*ratio));
            r.put(&format!("slope_ratio_expected_{j}"), num(*expected));
        }
        for (j, p) in self.points.iter().enumerate() {
            r.put(&format!("slope_{j}"), num(p.fit.slope));
            r.put(&format!("r2_{j}"), num(p.fit.r2));
            r.put(&format!("relative_error_{j}"), num(p.relative_error));
            r.put(&format!("min_ks_p_{j}"), num(p.ks.iter().map(|k| k.1.p_value).fold(1.0, f64::min)));
        }
        r.tables = vec![fits, curve, ks];
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linearization::PackOptions;

    #[test]
    fn oracle_scales_with_beta_squared() {
        let spec = EnsembleSpec { grid: crate::spectral::GridSpec { n_points: 512, domain_length: 60.0 }, ..defaults() };
        let cache = PackCache::new(PackOptions { fit_decay: false, ..PackOptions::default() });
        let pack = spec.pack(&cache).unwrap();
        let nm = spec.noise_model(1.0).unwrap();
        let d1 = phase_diffusion_oracle(&pack, &nm).unwrap();
        let d2 = phase_diffusion_oracle(&pack, &nm.rescaled(2.0).unwrap()).unwrap();
        assert!(d1 > 0.0);
        assert!((d2 / d1 - 4.0).abs() < 1e-9);
    }
}
