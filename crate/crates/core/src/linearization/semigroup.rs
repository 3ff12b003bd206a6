//! Evaluation strategies for `P(t) = exp(t 𝓛)`.

use std::collections::BTreeMap;
use std::sync::Arc;

use num_complex::Complex64 as C64;

use super::expm::expm2;
use super::LinearizationPack;
use crate::error::{invalid, Error, Result};
use crate::spectral::{Field, Grid};

pub trait SemigroupMode: Send + Sync {
    fn name(&self) -> &str;
    fn apply(&self, pack: &LinearizationPack, f: &Field, t: f64) -> Result<Field>;
}

/// Spectral calculus on the dense eigendecomposition `V e^{tΛ} V⁻¹`.
pub struct MatrixExp;

impl SemigroupMode for MatrixExp {
    fn name(&self) -> &str {
        "matrix_exp"
    }

    fn apply(&self, pack: &LinearizationPack, f: &Field, t: f64) -> Result<Field> {
        let eig = pack
            .eigen()
            .ok_or_else(|| Error::Unsupported("matrix_exp needs a dense eigendecomposition".into()))?;
        let coeff = eig.coefficients(f);
        Ok(eig.synthesize(&coeff, t, None, f.grid()))
    }
}

/// Split-step integration of `dv = 𝓛 v dt`.
pub struct TimeStep;

impl SemigroupMode for TimeStep {
    fn name(&self) -> &str {
        "timestep"
    }

    fn apply(&self, pack: &LinearizationPack, f: &Field, t: f64) -> Result<Field> {
        let mut out = f.clone();
        pack.linear_stepper().propagate(out.values_mut(), t, false);
        Ok(out)
    }
}

pub struct SemigroupRegistry {
    modes: BTreeMap<String, Arc<dyn SemigroupMode>>,
}

impl Default for SemigroupRegistry {
    fn default() -> Self {
        let mut r = SemigroupRegistry { modes: BTreeMap::new() };
        r.register(Arc::new(MatrixExp));
        r.register(Arc::new(TimeStep));
        r
    }
}

impl SemigroupRegistry {
    pub fn register(&mut self, mode: Arc<dyn SemigroupMode>) {
        self.modes.insert(mode.name().to_string(), mode);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn SemigroupMode>> {
        self.modes.get(name).cloned().ok_or_else(|| Error::UnknownStrategy {
            kind: "semigroup mode",
            name: name.to_string(),
            known: self.modes.keys().cloned().collect::<Vec<_>>().join(", "),
        })
    }
}

/// `P(t) f` with the named mode.
pub fn apply_semigroup(f: &Field, t: f64, pack: &LinearizationPack, mode: &str) -> Result<Field> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(invalid(format!("semigroup time {t} must be nonnegative")));
    }
    f.ensure_same_grid(&pack.wave().u_star)?;
    SemigroupRegistry::default().get(mode)?.apply(pack, f, t)
}

/// Triple-jump composition of `S(h/2) E(h) S(h/2)`, `E` the exact
/// exponential of the pointwise 2×2 part.
#[derive(Clone, Debug)]
pub struct LinearStepper {
    grid: Arc<Grid>,
    blocks: Vec<[[f64; 2]; 2]>,
    max_step: f64,
}

impl LinearStepper {
    /// The step is capped at `2 / k_max²`; longer steps resonate with the
    /// highest grid modes and grow spuriously.
    pub fn new(grid: &Arc<Grid>, blocks: Vec<[[f64; 2]; 2]>, max_step: f64) -> Self {
        let k_max = std::f64::consts::PI / grid.dx();
        LinearStepper { grid: grid.clone(), blocks, max_step: max_step.min(2.0 / (k_max * k_max)) }
    }

    /// `buf <- P(t) buf`, or `P(t)^T buf` in the real (re, im) pairing.
    pub fn propagate(&self, buf: &mut [C64], t: f64, transpose: bool) {
        if t <= 0.0 {
            return;
        }
        let n = (t / self.max_step - 1e-9).ceil().max(1.0) as usize;
        let h = t / n as f64;
        let w1 = 1.0 / (2.0 - 2f64.powf(1.0 / 3.0));
        let w0 = 1.0 - 2.0 * w1;
        let sign = if transpose { -1.0 } else { 1.0 };
        let free_edge = self.grid.free_symbol(sign * 0.5 * w1 * h);
        let free_join = self.grid.free_symbol(sign * 0.5 * (w1 + w0) * h);
        let free_both = self.grid.free_symbol(sign * w1 * h);
        let e1 = self.local(w1 * h, transpose);
        let e0 = self.local(w0 * h, transpose);
        let mut scratch = self.grid.scratch();
        self.grid.apply_multiplier_with(buf, &free_edge, &mut scratch);
        for k in 0..n {
            apply_blocks(buf, &e1);
            self.grid.apply_multiplier_with(buf, &free_join, &mut scratch);
            apply_blocks(buf, &e0);
            self.grid.apply_multiplier_with(buf, &free_join, &mut scratch);
            apply_blocks(buf, &e1);
            let last = if k + 1 == n { &free_edge } else { &free_both };
            self.grid.apply_multiplier_with(buf, last, &mut scratch);
        }
    }

    fn local(&self, h: f64, transpose: bool) -> Vec<[[f64; 2]; 2]> {
        self.blocks
            .iter()
            .map(|m| {
                let m = if transpose { [[m[0][0], m[1][0]], [m[0][1], m[1][1]]] } else { *m };
                expm2(m, h)
            })
            .collect()
    }
}

fn apply_blocks(buf: &mut [C64], blocks: &[[[f64; 2]; 2]]) {
    for (v, e) in buf.iter_mut().zip(blocks) {
        *v = C64::new(e[0][0] * v.re + e[0][1] * v.im, e[1][0] * v.re + e[1][1] * v.im);
    }
}
