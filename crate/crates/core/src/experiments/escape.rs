//! Exit of the solution from an orbital neighbourhood of the wave, with
//! resetting every window.

use serde::{Deserialize, Serialize};

use super::stats::{self, Z95};
use super::{num, run_paths, EnsembleSpec, StudyReport, Table};
use crate::dynamics::{Stepper, BLOWUP_L6};
use crate::error::{Error, Result};
use crate::linearization::{LinearizationPack, PackCache};
use crate::model::WaveProbe;
use crate::noise::sample_increment;
use crate::spectral::{lp_norm_slice, translate, Field};

pub(crate) fn defaults() -> EnsembleSpec {
    EnsembleSpec {
        n_paths: 2000,
        sigma_sweep: vec![0.1, 0.08, 0.06],
        eps_sweep: vec![0.3],
        windows: 2,
        scheme: "strang_exact_noise".to_string(),
        ..EnsembleSpec::default()
    }
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;

/// `inf_a ||u - u*(. + a)||` by golden-section search on `[seed - h, seed + h]`
/// with `h` one FWHM of the wave. Returns `(distance, argmin)`.
pub fn orbital_distance(u: &Field, probe: &WaveProbe, seed: f64, half_width: f64, tol: f64) -> (f64, f64) {
    let nu = u.norm_sq();
    let f = |a: f64| nu - 2.0 * probe.overlap(u.values(), a) + probe.norm_sq(a);
    let (mut lo, mut hi) = (seed - half_width, seed + half_width);
    let mut x1 = hi - GOLDEN * (hi - lo);
    let mut x2 = lo + GOLDEN * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - GOLDEN * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + GOLDEN * (hi - lo);
            f2 = f(x2);
        }
    }
    let (fa, a) = if f1 <= f2 { (f1, x1) } else { (f2, x2) };
    (fa.max(0.0).sqrt(), a)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeCell {
    pub sigma: f64,
    pub eps: f64,
    pub n_paths: usize,
    pub escapes: usize,
    pub frequency: f64,
    pub ci: (f64, f64),
    /// Fewer than three escapes: only an upper bound is meaningful.
    pub censored: bool,
    /// Exceedance frequency inside each window, given survival so far.
    pub per_window: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    pub eps: f64,
    pub k: f64,
    pub c: f64,
    pub r2: f64,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeReport {
    pub window: f64,
    pub windows: usize,
    pub cells: Vec<EscapeCell>,
    /// Per ε, frequencies decrease with σ with disjoint 95% intervals.
    pub monotone_in_sigma: Vec<(f64, bool)>,
    /// Per ε, `ln P` decreases along increasing `ε²/σ²`.
    pub log_monotone: Vec<(f64, bool)>,
    /// Fit of `ln P = ln(c T) - k ε²/σ²` over all resolvable cells.
    pub tail: Option<TailFit>,
    pub pathwise_eps_monotone: bool,
    pub blowups: usize,
    /// Largest reset shift seen.
    pub max_shift: f64,
}

struct PathOutcome {
    /// `sup` orbital distance per window; infinite after blow-up.
    window_sup: Vec<f64>,
    blowup: bool,
    max_shift: f64,
}

fn run_path(
    spec: &EnsembleSpec,
    pack: &LinearizationPack,
    nm: &crate::noise::NoiseModel,
    sigma: f64,
    steps_per_window: usize,
    sweep: u64,
    path: u64,
) -> Result<PathOutcome> {
    let wave = pack.wave();
    let grid = wave.grid();
    let params = wave.params;
    let probe = WaveProbe::new(&params, grid, 0.0);
    let half_width = 2.0 * 2f64.acosh() / params.wave_scale;
    let tol = 1e-4 * grid.dx();
    let beta_sq = nm.beta() * nm.beta();
    let mut stepper = Stepper::new(crate::dynamics::SchemeRegistry::default().get(&spec.scheme)?, &params, grid, spec.dt)?;
    let mut stream = nm.seed_policy().stream(sweep, path);
    let mut u = wave.u_star.clone();
    let mut window_sup = vec![f64::INFINITY; spec.windows];
    let mut max_shift: f64 = 0.0;
    let dx = grid.dx();
    let distance = |u: &Field| -> (f64, f64) {
        let seed = pack.zero_coefficient(&u.sub(&wave.u_star));
        let seed = if seed.abs() < half_width { seed } else { 0.0 };
        orbital_distance(u, &probe, seed, half_width, tol)
    };
    for w in 0..spec.windows {
        let mut sup: f64 = 0.0;
        let mut l6 = 0.0;
        let mut alive = true;
        for k in 1..=steps_per_window {
            l6 += lp_norm_slice(u.values(), dx, 6.0).powi(6) * spec.dt;
            if sigma > 0.0 {
                let inc = sample_increment(nm, spec.dt, &mut stream)?;
                stepper.step(&mut u, Some(&inc), sigma, beta_sq);
            } else {
                stepper.step(&mut u, None, 0.0, beta_sq);
            }
            if !u.is_finite() || l6.powf(1.0 / 6.0) > BLOWUP_L6 {
                alive = false;
                break;
            }
            if k % spec.record_stride == 0 || k == steps_per_window {
                sup = sup.max(distance(&u).0);
            }
        }
        if !alive {
            return Ok(PathOutcome { window_sup, blowup: true, max_shift });
        }
        window_sup[w] = sup;
        if w + 1 < spec.windows {
            let (_, shift) = distance(&u);
            let limit = grid.domain_length() / 4.0;
            if shift.abs() >= limit {
                return Err(Error::ShiftTooLarge { shift, limit });
            }
            max_shift = max_shift.max(shift.abs());
            u = translate(&u, -shift);
        }
    }
    Ok(PathOutcome { window_sup, blowup: false, max_shift })
}

/// Runs `n_paths` per σ over `windows` reset windows and tabulates
/// `P[sup_t inf_a ||u - u*(. + a)|| >= ε]` for every ε of the sweep.
pub fn run_escape_study(spec: &EnsembleSpec, cache: &PackCache) -> Result<EscapeReport> {
    spec.validate()?;
    let pack = spec.pack(cache)?;
    let nm = spec.noise_model(1.0)?;
    let window = match spec.window_length {
        Some(w) => w,
        None => super::on_mesh(pack.decay()?.t_reset, spec.dt),
    };
    let steps_per_window = spec.steps_for(super::on_mesh(window, spec.dt))?;
    let window = steps_per_window as f64 * spec.dt;
    let mut eps: Vec<f64> = spec.eps_sweep.clone();
    eps.sort_by(f64::total_cmp);
    let mut cells = Vec::new();
    let mut pathwise = true;
    let mut blowups = 0;
    let mut max_shift: f64 = 0.0;
    for (s, &sigma) in spec.sigma_sweep.iter().enumerate() {
        let outcomes =
            run_paths(spec.n_paths, |p| run_path(spec, &pack, &nm, sigma, steps_per_window, s as u64, p as u64))?;
        blowups += outcomes.iter().filter(|o| o.blowup).count();
        max_shift = outcomes.iter().fold(max_shift, |m, o| m.max(o.max_shift));
        for o in &outcomes {
            let sup = o.window_sup.iter().cloned().fold(0.0, f64::max);
            let hits: Vec<bool> = eps.iter().map(|&e| sup >= e).collect();
            if hits.windows(2).any(|h| h[1] && !h[0]) {
                pathwise = false;
            }
        }
        for &e in &eps {
            let escapes = outcomes.iter().filter(|o| o.window_sup.iter().any(|&d| d >= e)).count();
            let mut survivors = spec.n_paths;
            let mut per_window = Vec::with_capacity(spec.windows);
            for w in 0..spec.windows {
                let hit = outcomes
                    .iter()
                    .filter(|o| o.window_sup[..w].iter().all(|&d| d < e) && o.window_sup[w] >= e)
                    .count();
                per_window.push(if survivors > 0 { hit as f64 / survivors as f64 } else { f64::NAN });
                survivors -= hit;
            }
            cells.push(EscapeCell {
                sigma,
                eps: e,
                n_paths: spec.n_paths,
                escapes,
                frequency: escapes as f64 / spec.n_paths as f64,
                ci: stats::wilson(escapes, spec.n_paths, Z95),
                censored: escapes < 3,
                per_window,
            });
        }
    }

    let mut monotone_in_sigma = Vec::new();
    let mut log_monotone = Vec::new();
    for &e in &eps {
        let mut col: Vec<&EscapeCell> = cells.iter().filter(|c| c.eps == e).collect();
        col.sort_by(|a, b| b.sigma.total_cmp(&a.sigma));
        let strict = col.windows(2).all(|w| w[1].ci.1 < w[0].ci.0);
        monotone_in_sigma.push((e, strict));
        let resolved: Vec<&&EscapeCell> = col.iter().filter(|c| !c.censored && c.sigma > 0.0).collect();
        let decreasing = resolved.windows(2).all(|w| w[1].frequency.ln() < w[0].frequency.ln());
        log_monotone.push((e, decreasing && resolved.len() >= 2));
    }
    let (x, y): (Vec<f64>, Vec<f64>) = cells
        .iter()
        .filter(|c| !c.censored && c.sigma > 0.0)
        .map(|c| (c.eps * c.eps / (c.sigma * c.sigma), c.frequency.ln()))
        .unzip();
    let tail = (x.len() >= 2).then(|| {
        let f = stats::linear_fit(&x, &y);
        TailFit {
            eps: if eps.len() == 1 { eps[0] } else { f64::NAN },
            k: -f.slope,
            c: f.intercept.exp() / (spec.windows as f64 * window),
            r2: f.r2,
            points: x.len(),
        }
    });
    Ok(EscapeReport {
        window,
        windows: spec.windows,
        cells,
        monotone_in_sigma,
        log_monotone,
        tail,
        pathwise_eps_monotone: pathwise,
        blowups,
        max_shift,
    })
}

impl EscapeReport {
    pub fn to_report(&self) -> StudyReport {
        let mut r = StudyReport::new("escape");
        r.put("window", num(self.window));
        r.put("windows", self.windows);
        r.put("blowups", self.blowups);
        r.put("max_shift", num(self.max_shift));
        r.put("pathwise_eps_monotone", self.pathwise_eps_monotone);
        for (j, (e, ok)) in self.monotone_in_sigma.iter().enumerate() {
            r.put(&format!("monotone_in_sigma_{j}"), format!("{ok} (eps {})", num(*e)));
        }
        for (j, (e, ok)) in self.log_monotone.iter().enumerate() {
            r.put(&format!("log_monotone_{j}"), format!("{ok} (eps {})", num(*e)));
        }
        match &self.tail {
            Some(t) => {
                r.put("tail_k", num(t.k));
                r.put("tail_c", num(t.c));
                r.put("tail_r2", num(t.r2));
                r.put("tail_points", t.points);
            }
            None => r.put("tail_k", "unresolved"),
        }
        let mut cols = vec!["sigma", "eps", "n_paths", "escapes", "frequency", "ci_low", "ci_high", "censored"];
        let names: Vec<String> = (0..self.windows).map(|w| format!("window_{w}")).collect();
        cols.extend(names.iter().map(|s| s.as_str()));
        let mut t = Table::new("escape", &cols);
        for c in &self.cells {
            let mut row = vec![
                num(c.sigma),
                num(c.eps),
                c.n_paths.to_string(),
                c.escapes.to_string(),
                num(c.frequency),
                num(c.ci.0),
                num(c.ci.1),
                c.censored.to_string(),
            ];
            row.extend(c.per_window.iter().map(|v| num(*v)));
            t.push(row);
        }
        if let Some(f) = &self.tail {
            t.footer = vec![("k".into(), num(f.k)), ("c".into(), num(f.c)), ("r2".into(), num(f.r2))];
        }
        r.tables.push(t);
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{solitary_wave, ModelParams};
    use crate::spectral::Grid;

    #[test]
    fn golden_section_recovers_shift() {
        let p = ModelParams::new(1.0, 0.8, 1.0, 1.1, 0.8).unwrap();
        let g = Grid::new(512, 60.0).unwrap();
        let w = solitary_wave(&p, &g, 0.0).unwrap();
        let probe = WaveProbe::new(&p, &g, 0.0);
        let hw = 2.0 * 2f64.acosh() / p.wave_scale;
        for shift in [0.0, 0.37, -1.2] {
            let u = translate(&w.u_star, shift);
            let (d, a) = orbital_distance(&u, &probe, 0.0, hw, 1e-4 * g.dx());
            assert!((a - shift).abs() < 1e-3, "{a} vs {shift}");
            assert!(d < 1e-5, "{d}");
        }
        let mut u = translate(&w.u_star, 0.5);
        u.values_mut().iter_mut().for_each(|v| *v *= 1.1);
        let (d, a) = orbital_distance(&u, &probe, 0.0, hw, 1e-4 * g.dx());
        assert!((a - 0.5).abs() < 1e-3);
        assert!((d - 0.1 * w.u_star.norm()).abs() < 1e-6);
    }
}
