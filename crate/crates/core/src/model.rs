//! Physical parameters, the solitary wave, the triple bracket and the
//! deterministic right-hand side.

use std::sync::Arc;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::spectral::{derivative, Field, Grid};

/// Minimum number of nodes across the full width at half maximum of `|u*|`.
pub const POINTS_PER_WIDTH: f64 = 16.0;
/// Largest admissible magnitude of `u*`, `u*_x`, `u*_xx` at the box edge.
pub const BOUNDARY_DECAY: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub nu: f64,
    pub eps: f64,
    pub gamma: f64,
    pub mu: f64,
    pub kappa: f64,
    pub theta: f64,
    pub wave_scale: f64,
}

impl ModelParams {
    pub fn new(nu: f64, eps: f64, gamma: f64, mu: f64, kappa: f64) -> Result<Self> {
        for (name, v) in [("nu", nu), ("eps", eps), ("gamma", gamma), ("mu", mu), ("kappa", kappa)] {
            if !v.is_finite() {
                return Err(invalid(format!("{name} = {v} is not finite")));
            }
        }
        if eps < 0.0 {
            return Err(invalid(format!("eps = {eps} must be nonnegative")));
        }
        if gamma <= 0.0 {
            return Err(invalid(format!("gamma = {gamma} must be positive")));
        }
        if kappa <= 0.0 {
            return Err(invalid(format!("kappa = {kappa} must be positive")));
        }
        if mu <= gamma {
            return Err(Error::UnstableRegime { gamma, mu });
        }
        let theta = 0.5 * (gamma / mu).acos();
        let s2 = nu + eps * mu * (2.0 * theta).sin();
        if s2 <= 0.0 {
            return Err(Error::NoWave(s2));
        }
        Ok(ModelParams { nu, eps, gamma, mu, kappa, theta, wave_scale: s2.sqrt() })
    }

    /// Peak modulus `sqrt(2 s^2 / kappa)`.
    pub fn amplitude(&self) -> f64 {
        (2.0 * self.wave_scale * self.wave_scale / self.kappa).sqrt()
    }

    /// Full width at half maximum of `|u*|`.
    pub fn width(&self) -> f64 {
        2.0 * 2f64.acosh() / self.wave_scale
    }

    /// Decay rates of the real and imaginary parts under the loss term alone.
    pub fn loss_rates(&self) -> (f64, f64) {
        (self.eps * (self.gamma - self.mu), self.eps * (self.gamma + self.mu))
    }

    /// Exponent `eps (mu - gamma)` of the a priori L² bound.
    pub fn growth_rate(&self) -> f64 {
        self.eps * (self.mu - self.gamma)
    }

    /// Analytic profile `u*(x)`.
    pub fn profile(&self, x: f64) -> C64 {
        let s = self.wave_scale;
        C64::from_polar(self.amplitude() / (s * x).cosh(), self.theta)
    }

    /// Applies `L v = -i nu v - eps (gamma v - mu conj(v))` to one sample.
    #[inline]
    pub fn apply_l(&self, v: C64) -> C64 {
        C64::new(0.0, -self.nu) * v - self.eps * (self.gamma * v - self.mu * v.conj())
    }
}

pub fn make_params(nu: f64, eps: f64, gamma: f64, mu: f64, kappa: f64) -> Result<ModelParams> {
    ModelParams::new(nu, eps, gamma, mu, kappa)
}

/// The five free coefficients, as they appear in configuration files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub nu: f64,
    pub eps: f64,
    pub gamma: f64,
    pub mu: f64,
    pub kappa: f64,
}

impl ModelSpec {
    pub fn build(&self) -> Result<ModelParams> {
        make_params(self.nu, self.eps, self.gamma, self.mu, self.kappa)
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec { nu: 1.0, eps: 0.1, gamma: 1.0, mu: 1.1, kappa: 2.0 }
    }
}

/// Samples of `u*(. + shift)` and its first two spectral derivatives.
#[derive(Clone, Debug)]
pub struct SolitaryWave {
    pub params: ModelParams,
    pub shift: f64,
    pub u_star: Field,
    pub u_star_x: Field,
    pub u_star_xx: Field,
}

pub fn solitary_wave(params: &ModelParams, grid: &Arc<Grid>, shift: f64) -> Result<SolitaryWave> {
    let ppw = params.width() / grid.dx();
    if ppw < POINTS_PER_WIDTH {
        return Err(Error::Resolution { points_per_width: ppw, required: POINTS_PER_WIDTH });
    }
    if !shift.is_finite() || shift.abs() >= 0.25 * grid.domain_length() {
        return Err(Error::ShiftTooLarge { shift, limit: 0.25 * grid.domain_length() });
    }
    let u_star = Field::from_fn(grid, |x| params.profile(x + shift));
    let u_star_x = derivative(&u_star, 1);
    let u_star_xx = derivative(&u_star, 2);
    let n = grid.n_points();
    let edge = [&u_star, &u_star_x, &u_star_xx]
        .iter()
        .map(|f| f.values()[0].norm().max(f.values()[n - 1].norm()))
        .fold(0.0, f64::max);
    if edge > BOUNDARY_DECAY {
        return Err(Error::BoxTooSmall { value: edge, limit: BOUNDARY_DECAY });
    }
    Ok(SolitaryWave { params: *params, shift, u_star, u_star_x, u_star_xx })
}

impl SolitaryWave {
    pub fn grid(&self) -> &Arc<Grid> {
        self.u_star.grid()
    }

    /// Analytic resampling of `u*(x + shift + a)`.
    pub fn resample(&self, a: f64) -> Field {
        let p = self.params;
        let off = self.shift + a;
        Field::from_fn(self.grid(), |x| p.profile(x + off))
    }

    pub fn probe(&self) -> WaveProbe {
        WaveProbe::new(&self.params, self.grid(), self.shift)
    }
}

/// Cheap evaluation of `Re <u, u*(. + a)>` for many shifts `a`.
///
/// Uses `sech(s(x + a)) = 2 / (E e^{sa} + 1 / (E e^{sa}))` with `E = e^{s x}` cached.
#[derive(Clone, Debug)]
pub struct WaveProbe {
    exp_sx: Vec<f64>,
    phase: C64,
    amplitude: f64,
    scale: f64,
    shift: f64,
    dx: f64,
}

impl WaveProbe {
    pub fn new(params: &ModelParams, grid: &Grid, shift: f64) -> Self {
        let s = params.wave_scale;
        WaveProbe {
            exp_sx: grid.x().iter().map(|&x| (s * x).exp()).collect(),
            phase: C64::from_polar(1.0, params.theta),
            amplitude: params.amplitude(),
            scale: s,
            shift,
            dx: grid.dx(),
        }
    }

    /// `Re ∫ u conj(u*(x + shift + a)) dx`.
    pub fn overlap(&self, u: &[C64], a: f64) -> f64 {
        let q = (self.scale * (self.shift + a)).exp();
        let qi = 1.0 / q;
        let mut acc = 0.0;
        for (v, &e) in u.iter().zip(&self.exp_sx) {
            let sech = 2.0 / (e * q + qi / e);
            acc += sech * (v * self.phase.conj()).re;
        }
        acc * self.amplitude * self.dx
    }

    /// `||u*(. + a)||²` evaluated on the grid.
    pub fn norm_sq(&self, a: f64) -> f64 {
        let q = (self.scale * (self.shift + a)).exp();
        let qi = 1.0 / q;
        let s: f64 = self
            .exp_sx
            .iter()
            .map(|&e| {
                let sech = 2.0 / (e * q + qi / e);
                sech * sech
            })
            .sum();
        s * self.amplitude * self.amplitude * self.dx
    }
}

/// Pointwise `a b conj(c) + a conj(b) c + conj(a) b c`.
pub fn triple_bracket(a: &Field, b: &Field, c: &Field) -> Result<Field> {
    a.ensure_same_grid(b)?;
    a.ensure_same_grid(c)?;
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .zip(c.values())
        .map(|((&a, &b), &c)| bracket(a, b, c))
        .collect();
    Field::from_values(a.grid(), values)
}

#[inline]
pub(crate) fn bracket(a: C64, b: C64, c: C64) -> C64 {
    a * b * c.conj() + a * b.conj() * c + a.conj() * b * c
}

/// `i Δu + L u + (i kappa / 3) {u, u, u}`.
pub fn pfnls_rhs(u: &Field, params: &ModelParams) -> Field {
    let lap = derivative(u, 2);
    let cubic = triple_bracket(u, u, u).expect("same grid");
    let i = C64::new(0.0, 1.0);
    let values = u
        .values()
        .iter()
        .zip(lap.values())
        .zip(cubic.values())
        .map(|((&v, &d), &c)| i * d + params.apply_l(v) + i * (params.kappa / 3.0) * c)
        .collect();
    Field::from_values(u.grid(), values).expect("same length")
}
