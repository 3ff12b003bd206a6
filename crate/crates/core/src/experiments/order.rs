//! Scaling of the expansion remainders with σ.

use serde::{Deserialize, Serialize};

use super::stats;
use super::{num, run_paths, EnsembleSpec, StudyReport, Table};
use crate::error::{invalid, Result};
use crate::expansion::{run_expansion_path, ExpansionConfig, MergedSource, PathTag, StreamSource};
use crate::linearization::PackCache;

pub(crate) fn defaults() -> EnsembleSpec {
    EnsembleSpec {
        n_paths: 200,
        horizon: Some(1.0),
        sigma_sweep: vec![0.02, 0.04, 0.08],
        halve_dt: true,
        ..EnsembleSpec::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub sigma: f64,
    pub median_sup_z: f64,
    pub median_sup_zprime: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderTable {
    pub dt: f64,
    pub rows: Vec<OrderRow>,
    pub slope_z: stats::LinearFit,
    pub slope_zprime: stats::LinearFit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderReport {
    pub horizon: f64,
    pub primary: OrderTable,
    pub halved: Option<OrderTable>,
    pub max_reconstruction: f64,
}

impl OrderReport {
    /// `(|Δ slope_z|, |Δ slope_z'|)` under dt halving.
    pub fn slope_shift(&self) -> Option<(f64, f64)> {
        self.halved.as_ref().map(|h| {
            (
                (h.slope_z.slope - self.primary.slope_z.slope).abs(),
                (h.slope_zprime.slope - self.primary.slope_zprime.slope).abs(),
            )
        })
    }
}

/// Every σ is coupled to the same Brownian path. The increments at `dt` are
/// sums of pairs drawn at `dt/2`, so the halved run sees the identical path.
pub fn run_order_study(spec: &EnsembleSpec, cache: &PackCache) -> Result<OrderReport> {
    spec.validate()?;
    if spec.sigma_sweep.len() < 2 || spec.sigma_sweep.iter().any(|&s| s <= 0.0) {
        return Err(invalid("order study needs at least two positive sigma values"));
    }
    let pack = spec.pack(cache)?;
    let nm = spec.noise_model(1.0)?;
    let horizon = spec.horizon.unwrap_or(1.0);
    spec.steps_for(horizon)?;
    let policy = nm.seed_policy();
    let cfg = ExpansionConfig {
        dt: spec.dt,
        t_end: horizon,
        record_stride: spec.record_stride,
        sigmas: spec.sigma_sweep.clone(),
        second_order: true,
        noise_off: false,
        keep_states: false,
        scheme: spec.scheme.clone(),
    };
    let half_cfg = ExpansionConfig { dt: 0.5 * spec.dt, record_stride: 2 * spec.record_stride, ..cfg.clone() };
    let sups = |rec: &crate::expansion::PathRecord| -> Vec<(f64, f64)> {
        rec.rows.last().map(|r| r.residuals.iter().map(|x| (x.z_sup, x.z_prime_sup)).collect()).unwrap_or_default()
    };
    let paths = run_paths(spec.n_paths, |p| {
        let tag = PathTag { base_seed: spec.base_seed, sweep: 0, path: p as u64 };
        let fine = StreamSource::new(&nm, 0.5 * spec.dt, policy.stream(0, p as u64));
        let rec = run_expansion_path(&pack, &nm, &cfg, None, &mut MergedSource::new(fine), tag)?;
        let mut worst = rec.max_reconstruction;
        let coarse = sups(&rec);
        let half = if spec.halve_dt {
            let mut fine = StreamSource::new(&nm, 0.5 * spec.dt, policy.stream(0, p as u64));
            let rec = run_expansion_path(&pack, &nm, &half_cfg, None, &mut fine, tag)?;
            worst = worst.max(rec.max_reconstruction);
            Some(sups(&rec))
        } else {
            None
        };
        Ok((coarse, half, worst))
    })?;
    let table = |dt: f64, get: &dyn Fn(usize) -> Vec<(f64, f64)>| -> OrderTable {
        let mut rows = Vec::new();
        for (j, &sigma) in spec.sigma_sweep.iter().enumerate() {
            let col = get(j);
            let z: Vec<f64> = col.iter().map(|c| c.0).collect();
            let zp: Vec<f64> = col.iter().map(|c| c.1).collect();
            rows.push(OrderRow { sigma, median_sup_z: stats::median(&z), median_sup_zprime: stats::median(&zp) });
        }
        let s: Vec<f64> = rows.iter().map(|r| r.sigma).collect();
        let z: Vec<f64> = rows.iter().map(|r| r.median_sup_z).collect();
        let zp: Vec<f64> = rows.iter().map(|r| r.median_sup_zprime).collect();
        OrderTable { dt, slope_z: stats::log_log_slope(&s, &z), slope_zprime: stats::log_log_slope(&s, &zp), rows }
    };
    let primary = table(spec.dt, &|j| paths.iter().map(|p| p.0[j]).collect());
    let halved = spec
        .halve_dt
        .then(|| table(0.5 * spec.dt, &|j| paths.iter().map(|p| p.1.as_ref().expect("halved run")[j]).collect()));
    let max_reconstruction = paths.iter().fold(0.0f64, |m, p| m.max(p.2));
    Ok(OrderReport { horizon, primary, halved, max_reconstruction })
}

fn order_table(name: &str, t: &OrderTable) -> Table {
    let mut out = Table::new(name, &["sigma", "median_sup_z", "median_sup_zprime"]);
    for r in &t.rows {
        out.push(vec![num(r.sigma), num(r.median_sup_z), num(r.median_sup_zprime)]);
    }
    out.footer = vec![
        ("dt".into(), num(t.dt)),
        ("slope_z".into(), num(t.slope_z.slope)),
        ("slope_zprime".into(), num(t.slope_zprime.slope)),
        ("r2_z".into(), num(t.slope_z.r2)),
        ("r2_zprime".into(), num(t.slope_zprime.r2)),
    ];
    out
}

impl OrderReport {
    pub fn to_report(&self) -> StudyReport {
        let mut r = StudyReport::new("order");
        r.put("horizon", num(self.horizon));
        r.put("dt", num(self.primary.dt));
        r.put("slope_z", num(self.primary.slope_z.slope));
        r.put("slope_zprime", num(self.primary.slope_zprime.slope));
        r.put("max_reconstruction", num(self.max_reconstruction));
        r.tables.push(order_table("order", &self.primary));
        if let Some(h) = &self.halved {
            r.put("slope_z_half_dt", num(h.slope_z.slope));
            r.put("slope_zprime_half_dt", num(h.slope_zprime.slope));
            let (a, b) = self.slope_shift().expect("halved run");
            r.put("slope_shift_z", num(a));
            r.put("slope_shift_zprime", num(b));
            r.tables.push(order_table("order_half_dt", h));
        }
        r
    }
}
