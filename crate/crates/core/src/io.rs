//! Run configuration, self-describing output files and the on-disk pack cache.
//!
//! Text outputs start with a `#`-prefixed header holding a SHA-256 digest and
//! the resolved configuration; binary outputs carry the same information in
//! a fixed prefix. The byte layouts are described in `docs/FORMATS.md`.

use std::fs;
use std::io::Read as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{SchemeRegistry, StepperConfig, DEFAULT_SCHEME};
use crate::error::{Error, Result};
use crate::experiments::{EnsembleSpec, StudyRegistry, StudyReport};
use crate::linearization::{LinearizationPack, PackCache, PackOptions};
use crate::model::{solitary_wave, ModelSpec, SolitaryWave};
use crate::noise::{KernelSpec, NoiseModel, SeedPolicy};
use crate::spectral::{read_field_binary, write_field_binary, Field, GridSpec};

pub const TEXT_MAGIC: &str = "# spfnls output v1";
pub const BINARY_MAGIC: &[u8; 8] = b"SPFNLS01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub sigma: f64,
    pub kind: String,
    pub length_scale: f64,
    pub normalize_beta: bool,
    pub path: Option<PathBuf>,
}

impl Default for NoiseSection {
    fn default() -> Self {
        let k = KernelSpec::default();
        NoiseSection { sigma: 0.0, kind: k.kind, length_scale: k.length_scale, normalize_beta: k.normalize_beta, path: None }
    }
}

impl NoiseSection {
    pub fn kernel(&self) -> KernelSpec {
        KernelSpec {
            kind: self.kind.clone(),
            length_scale: self.length_scale,
            normalize_beta: self.normalize_beta,
            path: self.path.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepperSection {
    pub dt: f64,
    pub scheme: String,
    pub t_end: f64,
    pub record_stride: usize,
    /// Relative amplitude perturbation of the initial wave, `u0 = (1 + δ) u*`.
    pub initial_perturbation: f64,
}

impl Default for StepperSection {
    fn default() -> Self {
        StepperSection { dt: 1e-3, scheme: DEFAULT_SCHEME.into(), t_end: 10.0, record_stride: 100, initial_perturbation: 0.0 }
    }
}

impl StepperSection {
    pub fn stepper_config(&self, keep_states: bool) -> StepperConfig {
        StepperConfig {
            dt: self.dt,
            scheme: self.scheme.clone(),
            t_end: self.t_end,
            record_stride: self.record_stride,
            keep_states,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpandSection {
    pub sigmas: Vec<f64>,
    pub dt: f64,
    pub t_end: f64,
    pub record_stride: usize,
    pub second_order: bool,
    pub noise_off: bool,
    pub path: u64,
}

impl Default for ExpandSection {
    fn default() -> Self {
        ExpandSection {
            sigmas: vec![0.02, 0.04, 0.08],
            dt: 5e-3,
            t_end: 1.0,
            record_stride: 20,
            second_order: true,
            noise_off: false,
            path: 0,
        }
    }
}

/// Unset fields fall back to the study's own defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub study: String,
    pub n_paths: Option<usize>,
    pub dt: Option<f64>,
    pub record_stride: Option<usize>,
    pub scheme: Option<String>,
    pub horizon: Option<f64>,
    pub sigma_sweep: Option<Vec<f64>>,
    pub eps_sweep: Option<Vec<f64>>,
    pub windows: Option<usize>,
    pub window_length: Option<f64>,
    pub halve_dt: Option<bool>,
    pub model: Option<ModelSpec>,
    pub grid: Option<GridSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Pack cache location; `<dir>/cache` when unset.
    pub cache_dir: Option<PathBuf>,
    pub write_trajectory: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("out"), cache_dir: None, write_trajectory: true }
    }
}

impl OutputSection {
    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.dir.join("cache"))
    }
}

/// Complete description of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub base_seed: u64,
    pub model: ModelSpec,
    pub grid: GridSpec,
    pub noise: NoiseSection,
    pub stepper: StepperSection,
    pub expand: ExpandSection,
    pub experiment: ExperimentSection,
    pub linearization: PackOptions,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            base_seed: 1,
            model: ModelSpec::default(),
            grid: GridSpec::default(),
            noise: NoiseSection::default(),
            stepper: StepperSection::default(),
            expand: ExpandSection::default(),
            experiment: ExperimentSection { study: "order".into(), ..ExperimentSection::default() },
            linearization: PackOptions::default(),
            output: OutputSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Parses `text` after applying `section.key=value` assignments; values
    /// are read as TOML and fall back to plain strings.
    pub fn from_toml_with_overrides(text: &str, sets: &[String]) -> Result<Self> {
        let mut root: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for set in sets {
            let (path, raw) = set.split_once('=').ok_or_else(|| Error::Config(format!("override `{set}` is not key=value")))?;
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let keys: Vec<&str> = path.trim().split('.').collect();
            let (last, parents) = keys.split_last().expect("split yields one item");
            let mut table = &mut root;
            for k in parents {
                let entry = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
                table = entry.as_table_mut().ok_or_else(|| Error::Config(format!("`{k}` in `{path}` is not a section")))?;
            }
            table.insert(last.to_string(), value);
        }
        toml::Value::Table(root).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Wave, grid and noise preconditions shared by every command.
    pub fn validate(&self) -> Result<()> {
        let params = self.model.build()?;
        let grid = self.grid.build()?;
        solitary_wave(&params, &grid, 0.0)?;
        if !(self.noise.sigma >= 0.0 && self.noise.sigma.is_finite()) {
            return Err(Error::Config(format!("noise.sigma = {} must be finite and nonnegative", self.noise.sigma)));
        }
        self.noise_model()?;
        SchemeRegistry::default().get(&self.stepper.scheme)?;
        self.stepper.stepper_config(false).n_steps()?;
        if !self.experiment.study.is_empty() {
            StudyRegistry::default().get(&self.experiment.study)?;
        }
        Ok(())
    }

    pub fn wave(&self) -> Result<SolitaryWave> {
        solitary_wave(&self.model.build()?, &self.grid.build()?, 0.0)
    }

    pub fn noise_model(&self) -> Result<NoiseModel> {
        NoiseModel::from_spec(&self.grid.build()?, &self.noise.kernel(), self.noise.sigma, SeedPolicy::new(self.base_seed))
    }

    /// Pack cache persisted under the output cache directory.
    pub fn pack_cache(&self) -> PackCache {
        PackCache::with_disk(self.linearization.clone(), self.output.cache_dir())
    }

    /// The ensemble of the `experiment` section over the study's defaults.
    pub fn ensemble(&self) -> Result<EnsembleSpec> {
        let e = &self.experiment;
        let study = StudyRegistry::default().get(&e.study)?;
        let d = study.defaults();
        let spec = EnsembleSpec {
            n_paths: e.n_paths.unwrap_or(d.n_paths),
            base_seed: self.base_seed,
            model: e.model.unwrap_or(d.model),
            grid: e.grid.unwrap_or(d.grid),
            noise: self.noise.kernel(),
            dt: e.dt.unwrap_or(d.dt),
            record_stride: e.record_stride.unwrap_or(d.record_stride),
            scheme: e.scheme.clone().unwrap_or(d.scheme),
            horizon: e.horizon.or(d.horizon),
            sigma_sweep: e.sigma_sweep.clone().unwrap_or(d.sigma_sweep),
            eps_sweep: e.eps_sweep.clone().unwrap_or(d.eps_sweep),
            windows: e.windows.unwrap_or(d.windows),
            window_length: e.window_length.or(d.window_length),
            halve_dt: e.halve_dt.unwrap_or(d.halve_dt),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Copy with every experiment option filled in from `spec`.
    pub fn with_resolved_experiment(&self, spec: &EnsembleSpec) -> RunConfig {
        let mut c = self.clone();
        c.experiment = ExperimentSection {
            study: self.experiment.study.clone(),
            n_paths: Some(spec.n_paths),
            dt: Some(spec.dt),
            record_stride: Some(spec.record_stride),
            scheme: Some(spec.scheme.clone()),
            horizon: spec.horizon,
            sigma_sweep: Some(spec.sigma_sweep.clone()),
            eps_sweep: Some(spec.eps_sweep.clone()),
            windows: Some(spec.windows),
            window_length: spec.window_length,
            halve_dt: Some(spec.halve_dt),
            model: Some(spec.model),
            grid: Some(spec.grid),
        };
        c
    }
}

/// Configuration text printed by the `defaults` command.
pub fn default_config_text() -> String {
    RunConfig::default().to_toml().expect("defaults serialize")
}

fn digest(config: &[u8], body: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(config);
    h.update(body);
    hex::encode(h.finalize())
}

/// Header, then `body` verbatim.
pub fn render_text_output(kind: &str, config: &str, body: &str) -> String {
    let mut s = format!("{TEXT_MAGIC}\n# kind = {kind}\n# sha256 = {}\n# config-begin\n", digest(config.as_bytes(), body.as_bytes()));
    for line in config.lines() {
        s.push_str("# ");
        s.push_str(line);
        s.push('\n');
    }
    s.push_str("# config-end\n");
    s.push_str(body);
    s
}

pub fn write_text_output(path: &Path, kind: &str, config: &str, body: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(path, render_text_output(kind, config, body))?;
    Ok(())
}

/// Parsed self-describing text file.
#[derive(Clone, Debug, PartialEq)]
pub struct TextOutput {
    pub kind: String,
    pub sha256: String,
    pub config: String,
    pub body: String,
}

pub fn parse_text_output(text: &str) -> Result<TextOutput> {
    let bad = |m: &str| Error::Format(m.to_string());
    let rest = text.strip_prefix(TEXT_MAGIC).and_then(|r| r.strip_prefix('\n')).ok_or_else(|| bad("missing magic line"))?;
    let (kind_line, rest) = rest.split_once('\n').ok_or_else(|| bad("truncated header"))?;
    let kind = kind_line.strip_prefix("# kind = ").ok_or_else(|| bad("missing kind"))?;
    let (hash_line, rest) = rest.split_once('\n').ok_or_else(|| bad("truncated header"))?;
    let sha = hash_line.strip_prefix("# sha256 = ").ok_or_else(|| bad("missing sha256"))?;
    let mut rest = rest.strip_prefix("# config-begin\n").ok_or_else(|| bad("missing config block"))?;
    let mut config = String::new();
    loop {
        let (line, tail) = rest.split_once('\n').ok_or_else(|| bad("unterminated config block"))?;
        rest = tail;
        if line == "# config-end" {
            break;
        }
        let l = line.strip_prefix("# ").or_else(|| line.strip_prefix('#')).ok_or_else(|| bad("bad config line"))?;
        config.push_str(l);
        config.push('\n');
    }
    Ok(TextOutput { kind: kind.to_string(), sha256: sha.to_string(), config, body: rest.to_string() })
}

/// Magic, config length, config, digest, frame count, then per frame the
/// time followed by the field as written by `write_field_binary`.
pub fn write_binary_frames(path: &Path, config: &str, frames: &[(f64, &Field)]) -> Result<()> {
    let mut payload = Vec::new();
    payload.extend_from_slice(&(frames.len() as u64).to_le_bytes());
    for (t, f) in frames {
        payload.extend_from_slice(&t.to_le_bytes());
        write_field_binary(f, &mut payload)?;
    }
    let mut out = Vec::with_capacity(payload.len() + config.len() + 48);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&Sha256::digest([config.as_bytes(), &payload].concat()));
    out.extend_from_slice(&payload);
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub struct BinaryOutput {
    pub config: String,
    pub sha256: String,
    pub frames: Vec<(f64, Field)>,
    payload_digest: String,
}

pub fn read_binary_frames(bytes: &[u8]) -> Result<BinaryOutput> {
    let bad = |m: &str| Error::Format(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != BINARY_MAGIC {
        return Err(bad("missing binary magic"));
    }
    let c = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize.checked_add(c).filter(|e| e + 40 <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let config = String::from_utf8(bytes[16..end].to_vec()).map_err(|_| bad("config is not UTF-8"))?;
    let sha = hex::encode(&bytes[end..end + 32]);
    let payload = &bytes[end + 32..];
    let mut r = payload;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    let mut frames = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        r.read_exact(&mut b8)?;
        let t = f64::from_le_bytes(b8);
        frames.push((t, read_field_binary(&mut r)?));
    }
    if !r.is_empty() {
        return Err(bad("trailing bytes after the last frame"));
    }
    Ok(BinaryOutput { payload_digest: digest(config.as_bytes(), payload), config, sha256: sha, frames })
}

/// Result of re-hashing one output file.
#[derive(Clone, Debug, PartialEq)]
pub struct Verification {
    pub path: PathBuf,
    pub stored: String,
    pub computed: String,
}

impl Verification {
    pub fn ok(&self) -> bool {
        self.stored == self.computed
    }
}

pub fn verify_file(path: &Path) -> Result<Verification> {
    let bytes = fs::read(path)?;
    let (stored, computed) = if bytes.starts_with(BINARY_MAGIC) {
        let b = read_binary_frames(&bytes)?;
        (b.sha256, b.payload_digest)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::Format("not UTF-8 text".into()))?;
        let t = parse_text_output(&text)?;
        let c = digest(t.config.as_bytes(), t.body.as_bytes());
        (t.sha256, c)
    };
    Ok(Verification { path: path.to_path_buf(), stored, computed })
}

/// `index,re,im` for every eigenvalue, zero mode flagged.
pub fn spectrum_csv(pack: &LinearizationPack) -> String {
    let mut s = String::from("index,re,im,zero_mode\n");
    for (k, l) in pack.spectrum.iter().enumerate() {
        s.push_str(&format!("{k},{},{},{}\n", l.re, l.im, u8::from(k == pack.zero_index)));
    }
    s
}

/// `t,norm` samples of the decay fit.
pub fn decay_csv(pack: &LinearizationPack) -> Result<String> {
    let d = pack.decay()?;
    let mut s = String::from("t,norm_p_pi,bound\n");
    for &(t, n) in &d.curve {
        s.push_str(&format!("{t},{n},{}\n", d.m * (-d.a * t).exp()));
    }
    Ok(s)
}

/// Gnuplot script plotting each table of `report` from its CSV file.
pub fn plot_script(report: &StudyReport, file_for: &dyn Fn(&str) -> String) -> String {
    let mut s = format!("# gnuplot script for the {} study\nset datafile separator ','\nset key autotitle columnhead\n", report.study);
    for t in &report.tables {
        let log = matches!(t.name.as_str(), "order" | "order_half_dt" | "moments");
        s.push_str(&format!("\n# table {}\n", t.name));
        s.push_str(if log { "set logscale xy\n" } else { "unset logscale\n" });
        let file = file_for(&t.name);
        let plots: Vec<String> = (2..=t.columns.len()).map(|c| format!("'{file}' using 1:{c} with linespoints")).collect();
        s.push_str(&format!("plot {}\npause -1\n", plots.join(", ")));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrip_and_unknown_keys() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
        assert!(matches!(RunConfig::from_toml_str("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml_str("[model]\nnu = 1.0\nfoo = 2"), Err(Error::Config(_))));
        let o = RunConfig::from_toml_with_overrides("[noise]\nsigma = 0.1\n", &["model.eps=0.0".into(), "output.dir=tmp/x".into(), "stepper.scheme=strang_exact_noise".into()]).unwrap();
        assert_eq!((o.noise.sigma, o.model.eps), (0.1, 0.0));
        assert_eq!(o.output.dir, PathBuf::from("tmp/x"));
        assert_eq!(o.stepper.scheme, "strang_exact_noise");
        assert!(RunConfig::from_toml_with_overrides("", &["model.zzz=1".into()]).is_err());
        let partial = RunConfig::from_toml_str("[noise]\nsigma = 0.1\n").unwrap();
        assert_eq!(partial.noise.sigma, 0.1);
        assert_eq!(partial.model, ModelSpec::default());
    }

    #[test]
    fn invalid_model_names_the_invariant() {
        let mut c = RunConfig::default();
        c.model.mu = 0.5;
        let e = c.validate().unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("mu"));
    }

    #[test]
    fn text_output_roundtrip_and_tamper() {
        let cfg = "a = 1\n\n[b]\nc = \"x\"\n";
        let body = "t,x\n0,1\n1,2\n";
        let text = render_text_output("demo", cfg, body);
        let p = parse_text_output(&text).unwrap();
        assert_eq!((p.kind.as_str(), p.config.as_str(), p.body.as_str()), ("demo", cfg, body));
        let dir = std::env::temp_dir().join(format!("spfnls-io-{}", std::process::id()));
        let path = dir.join("x.csv");
        write_text_output(&path, "demo", cfg, body).unwrap();
        assert!(verify_file(&path).unwrap().ok());
        fs::write(&path, text.replace("1,2", "1,3")).unwrap();
        assert!(!verify_file(&path).unwrap().ok());
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn binary_output_roundtrip() {
        let grid = crate::spectral::Grid::new(16, 4.0).unwrap();
        let f = Field::from_fn(&grid, |x| num_complex::Complex64::new(x, -x * x));
        let dir = std::env::temp_dir().join(format!("spfnls-bin-{}", std::process::id()));
        let path = dir.join("f.bin");
        write_binary_frames(&path, "k = 2\n", &[(0.0, &f), (0.5, &f)]).unwrap();
        let bytes = fs::read(&path).unwrap();
        let b = read_binary_frames(&bytes).unwrap();
        assert_eq!(b.config, "k = 2\n");
        assert_eq!(b.frames.len(), 2);
        assert_eq!(b.frames[1].0, 0.5);
        assert_eq!(b.frames[1].1.values(), f.values());
        assert!(verify_file(&path).unwrap().ok());
        let mut t = bytes.clone();
        let last = t.len() - 1;
        t[last] ^= 1;
        fs::write(&path, t).unwrap();
        assert!(!verify_file(&path).unwrap().ok());
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn experiment_section_overrides_defaults() {
        let c = RunConfig::from_toml_str("[experiment]\nstudy = \"escape\"\nn_paths = 10\nwindow_length = 0.5\n").unwrap();
        let spec = c.ensemble().unwrap();
        assert_eq!(spec.n_paths, 10);
        assert_eq!(spec.window_length, Some(0.5));
        assert_eq!(spec.sigma_sweep, vec![0.1, 0.08, 0.06]);
        let r = c.with_resolved_experiment(&spec);
        assert_eq!(r.ensemble().unwrap(), spec);
        assert!(RunConfig::from_toml_str(&r.to_toml().unwrap()).is_ok());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn text_output_roundtrip_any(cfg in "([a-z_]{1,8} = [0-9.]{1,6}\n){0,6}", body in "[ -~\n]{0,200}", flip in 0usize..200) {
            let text = render_text_output("k", &cfg, &body);
            let p = parse_text_output(&text).unwrap();
            proptest::prop_assert_eq!(&p.config, &cfg);
            proptest::prop_assert_eq!(&p.body, &body);
            proptest::prop_assert_eq!(&p.sha256, &digest(cfg.as_bytes(), body.as_bytes()));
            if !body.is_empty() {
                let mut b = body.clone().into_bytes();
                let i = flip % b.len();
                b[i] = if b[i] == b'x' { b'y' } else { b'x' };
                let changed = String::from_utf8(b).unwrap();
                proptest::prop_assert_ne!(digest(cfg.as_bytes(), changed.as_bytes()), p.sha256);
            }
        }
    }
}
