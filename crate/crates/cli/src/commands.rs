use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use spfnls_core::dynamics::simulate as integrate;
use spfnls_core::expansion::{run_expansion_path, write_diagnostics_csv, ExpansionConfig, PathTag, StreamSource};
use spfnls_core::experiments::StudyRegistry;
use spfnls_core::io::{
    decay_csv, plot_script, spectrum_csv, verify_file, write_binary_frames, write_text_output, RunConfig, BINARY_MAGIC,
    TEXT_MAGIC,
};
use spfnls_core::linearization::CacheSource;
use spfnls_core::{Error, Result};

/// Deviation from the wave below which a noise-free run counts as stationary.
const STATIONARY_TOL: f64 = 1e-6;
/// Relative slack in the a priori norm bound.
const BOUND_SLACK: f64 = 1e-6;

fn config_text(cfg: &RunConfig) -> Result<String> {
    cfg.to_toml()
}

pub fn simulate(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let params = cfg.model.build()?;
    let wave = cfg.wave()?;
    let nm = cfg.noise_model()?;
    let u0 = wave.u_star.scaled(1.0 + cfg.stepper.initial_perturbation);
    let sc = cfg.stepper.stepper_config(true);
    let mut stream = nm.seed_policy().stream(0, 0);
    let noisy = cfg.noise.sigma > 0.0;
    let traj = integrate(&u0, &params, &nm, &sc, if noisy { Some(&mut stream) } else { None })?;

    let rate = -params.eps * (params.gamma - params.mu);
    let n0 = u0.norm();
    let mut body = String::from("t,l2,h1,h2,energy_norm,l6_norm,l2_bound\n");
    let mut worst = f64::NEG_INFINITY;
    for r in &traj.summary {
        let bound = (rate * r.t).exp() * n0;
        worst = worst.max(r.l2 / (bound * (1.0 + BOUND_SLACK)));
        writeln!(body, "{},{},{},{},{},{},{}", r.t, r.l2, r.h1, r.h2, r.energy_norm, r.l6_norm, bound).expect("string write");
    }
    let config = config_text(cfg)?;
    let dir = cfg.output.dir.join("simulate");
    write_text_output(&dir.join("summary.csv"), "simulate-summary", &config, &body)?;
    let states = traj.states.as_deref().unwrap_or(&[]);
    if cfg.output.write_trajectory {
        let frames: Vec<(f64, &_)> = traj.times.iter().copied().zip(states.iter()).collect();
        write_binary_frames(&dir.join("trajectory.bin"), &config, &frames)?;
    }

    let bound = if worst <= 1.0 { "a priori bound held" } else { "a priori bound violated" };
    if !noisy && cfg.stepper.initial_perturbation == 0.0 {
        let dev = states.iter().map(|u| u.sub(&wave.u_star).norm()).fold(0.0, f64::max);
        if dev < STATIONARY_TOL {
            println!("stationary within 1e-6 (sup deviation {dev:.3e}); {bound}");
        } else {
            println!("not stationary: sup deviation {dev:.3e} exceeds 1e-6; {bound}");
        }
    } else {
        println!("{bound} (max ratio {worst:.6})");
    }
    Ok(())
}

fn source_name(s: CacheSource) -> &'static str {
    match s {
        CacheSource::Memory => "memory",
        CacheSource::Disk => "hit",
        CacheSource::Built => "miss",
    }
}

pub fn spectrum(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let wave = cfg.wave()?;
    let cache = cfg.pack_cache();
    let start = Instant::now();
    let pack = cache.get_or_build(&wave)?;
    let seconds = start.elapsed().as_secs_f64();
    let event = cache.events().pop().expect("one lookup recorded");
    let dir = cfg.output.dir.join("spectrum");
    fs::create_dir_all(&dir)?;
    let mut log = fs::OpenOptions::new().create(true).append(true).open(dir.join("timing.log"))?;
    writeln!(log, "pack={} cache={} seconds={seconds:.6}", &event.key[..16], source_name(event.source))?;

    let config = config_text(cfg)?;
    write_text_output(&dir.join("spectrum.csv"), "spectrum", &config, &spectrum_csv(&pack))?;
    let z = pack.spectrum[pack.zero_index];
    let mut fit = format!(
        "gap_b = {}\nzero_eigenvalue = {} {}\noperator_norm = {}\n",
        pack.gap_b, z.re, z.im, pack.summary().operator_norm
    );
    if let Ok(d) = pack.decay() {
        write!(fit, "m = {}\na = {}\nt_reset = {}\n", d.m, d.a, d.t_reset).expect("string write");
        write_text_output(&dir.join("decay.csv"), "decay", &config, &decay_csv(&pack)?)?;
    }
    write_text_output(&dir.join("fit.txt"), "spectrum-fit", &config, &fit)?;
    let decay = pack.decay().map(|d| format!(", M = {:.6}, a = {:.6}", d.m, d.a)).unwrap_or_default();
    println!("spectral gap b = {:.6}{decay} (cache {}, {seconds:.3} s)", pack.gap_b, source_name(event.source));
    Ok(())
}

pub fn expand(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let e = &cfg.expand;
    let wave = cfg.wave()?;
    let pack = cfg.pack_cache().get_or_build(&wave)?;
    let nm = spfnls_core::noise::NoiseModel::from_spec(
        pack.grid(),
        &cfg.noise.kernel(),
        1.0,
        spfnls_core::noise::SeedPolicy::new(cfg.base_seed),
    )?;
    let ec = ExpansionConfig {
        dt: e.dt,
        t_end: e.t_end,
        record_stride: e.record_stride,
        sigmas: e.sigmas.clone(),
        second_order: e.second_order,
        noise_off: e.noise_off,
        keep_states: false,
        scheme: cfg.stepper.scheme.clone(),
    };
    let mut src = StreamSource::new(&nm, e.dt, nm.seed_policy().stream(0, e.path));
    let tag = PathTag { base_seed: cfg.base_seed, sweep: 0, path: e.path };
    let rec = run_expansion_path(&pack, &nm, &ec, None, &mut src, tag)?;
    let config = config_text(cfg)?;
    let dir = cfg.output.dir.join("expand");
    for k in 0..e.sigmas.len().max(1) {
        let mut buf = Vec::new();
        write_diagnostics_csv(&rec, k, &mut buf)?;
        let body = String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))?;
        write_text_output(&dir.join(format!("diagnostics_{k}.csv")), "expand", &config, &body)?;
    }
    let last = rec.rows.last().ok_or_else(|| Error::Format("expansion recorded no rows".into()))?;
    for (k, (s, r)) in e.sigmas.iter().zip(&last.residuals).enumerate() {
        println!("sigma[{k}] = {s}: sup |z| = {:.3e}, sup |z'| = {:.3e}", r.z_sup, r.z_prime_sup);
    }
    println!("max reconstruction error {:.3e}", rec.max_reconstruction);
    Ok(())
}

pub fn experiment(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let study = StudyRegistry::default().get(&cfg.experiment.study)?;
    let spec = cfg.ensemble()?;
    let resolved = cfg.with_resolved_experiment(&spec);
    let config = config_text(&resolved)?;
    let cache = cfg.pack_cache();
    let start = Instant::now();
    let report = study.run(&spec, &cache)?;
    let seconds = start.elapsed().as_secs_f64();
    let dir = cfg.output.dir.join("experiment").join(study.name());
    write_text_output(&dir.join("report.txt"), "report", &config, &report.summary_text())?;
    let file_for = |t: &str| format!("{t}.csv");
    for t in &report.tables {
        write_text_output(&dir.join(file_for(&t.name)), "table", &config, &t.to_csv())?;
    }
    write_text_output(&dir.join("plot.gp"), "plot", &config, &plot_script(&report, &file_for))?;
    for ev in cache.events() {
        log::info!("pack {} cache {} in {:.3} s", &ev.key[..16], source_name(ev.source), ev.seconds);
    }
    print!("{}", report.summary_text());
    eprintln!("{} finished in {seconds:.1} s", study.name());
    Ok(())
}

fn collect(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            collect(&e, out)?;
        }
    } else {
        let mut head = [0u8; 18];
        let n = fs::File::open(path).and_then(|mut f| std::io::Read::read(&mut f, &mut head))?;
        let h = &head[..n];
        if h.starts_with(BINARY_MAGIC) || h.starts_with(TEXT_MAGIC.as_bytes()) {
            out.push(path.to_path_buf());
        }
    }
    Ok(())
}

pub fn verify(paths: &[PathBuf]) -> Result<()> {
    let mut files = Vec::new();
    for p in paths {
        if !p.exists() {
            return Err(Error::Config(format!("{} does not exist", p.display())));
        }
        collect(p, &mut files)?;
    }
    let mut bad = 0;
    for f in &files {
        let v = verify_file(f)?;
        if v.ok() {
            println!("ok       {}", f.display());
        } else {
            bad += 1;
            println!("MISMATCH {} (stored {}, computed {})", f.display(), v.stored, v.computed);
        }
    }
    if bad > 0 {
        return Err(Error::Format(format!("{bad} of {} files failed verification", files.len())));
    }
    println!("{} files verified", files.len());
    Ok(())
}
