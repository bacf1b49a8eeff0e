//! Batch front end: `paultrap <subcommand> [--key value]...`.
//!
//! Every run writes its data and a manifest holding the fully resolved
//! configuration. With `--out PATH` the manifest goes to `PATH.manifest.json`,
//! otherwise data goes to stdout and the manifest to stderr.

pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use paultrap::crystal::{
    calogero_equilibrium, multi_start, random_init, solve_equilibrium, CalogeroForm, CrystalConfiguration,
    CrystalParameters, SolverOptions,
};
use paultrap::floquet::{monodromy, stability_scan, HillParameters};
use paultrap::grid::Grid;
use paultrap::hagedorn::{
    propagate_packet, trace_record, AnharmonicPotential, PacketState, PaulTrapPotential, PotentialModel,
    QuadraticPotential,
};
use paultrap::ode::Tolerance;
use paultrap::oracle::{check_quasienergy_states, OracleOptions};
use paultrap::states::{overlap_fn, pseudopotential_states, sample_state, OscillatorContext};
use paultrap::Error;

use config::{param, resolve, Kind, Param, RunConfig, UsageError};

pub const SUBCOMMANDS: [&str; 7] = [
    "stability",
    "floquet",
    "wavefunction",
    "overlap",
    "propagate",
    "crystal",
    "oracle-check",
];

const A: Param = param("a", Kind::Float, "0", "Mathieu a");
const QM: Param = param("qm", Kind::Float, "0.4", "Mathieu q_M");
const OMEGA: Param = param("omega", Kind::Float, "2", "drive frequency");
const RTOL: Param = param("rtol", Kind::Float, "1e-10", "integrator relative tolerance");
const ATOL: Param = param("atol", Kind::Float, "1e-12", "integrator absolute tolerance");
const MASS: Param = param("mass", Kind::Float, "1", "particle mass");
const HBAR: Param = param("hbar", Kind::Float, "1", "reduced Planck constant");
const POINTS: Param = param("points", Kind::Int, "1024", "grid points (power of two)");
const HALF_WIDTH: Param = param("halfwidth", Kind::Float, "0", "grid half-width; 0 picks 12 state widths");

fn spec(subcommand: &str) -> Option<(Vec<Param>, &'static [&'static str])> {
    let s = match subcommand {
        "stability" => (
            vec![
                param("a", Kind::Range, "0:0.5:101", "Mathieu a range"),
                param("qm", Kind::Range, "0:1:101", "Mathieu q_M range"),
                OMEGA,
                RTOL,
                ATOL,
            ],
            &["csv", "pgm"][..],
        ),
        "floquet" => (vec![A, QM, OMEGA, RTOL, ATOL], &["jsonl"][..]),
        "wavefunction" => (
            vec![
                A,
                QM,
                OMEGA,
                param("n", Kind::Int, "0", "quasienergy level"),
                param("t", Kind::Float, "0", "time"),
                MASS,
                HBAR,
                POINTS,
                HALF_WIDTH,
                RTOL,
                ATOL,
            ],
            &["csv", "jsonl"][..],
        ),
        "overlap" => (
            vec![
                A,
                QM,
                OMEGA,
                param("nmax", Kind::Int, "4", "highest level"),
                param("t", Kind::Float, "0", "time"),
                MASS,
                HBAR,
                POINTS,
                HALF_WIDTH,
                RTOL,
                ATOL,
            ],
            &["csv", "jsonl"][..],
        ),
        "propagate" => (
            vec![
                param(
                    "potential",
                    Kind::Choice(&["paul", "harmonic", "anharmonic"]),
                    "paul",
                    "potential model",
                ),
                A,
                QM,
                OMEGA,
                param("w", Kind::Float, "1", "harmonic frequency"),
                param("lambda", Kind::Float, "0.1", "quartic coefficient"),
                param("q0", Kind::Float, "1", "initial position"),
                param("p0", Kind::Float, "0.5", "initial momentum"),
                param("freq", Kind::Float, "1", "frequency setting the initial width"),
                param("k", Kind::Int, "0", "Hagedorn index"),
                MASS,
                HBAR,
                param("tend", Kind::Float, "10", "final time"),
                param("samples", Kind::Int, "11", "output times including both ends"),
                param("bound", Kind::Float, "1000", "escape radius"),
                RTOL,
                ATOL,
            ],
            &["jsonl", "csv"][..],
        ),
        "crystal" => (
            vec![
                param(
                    "model",
                    Kind::Choice(&["coulomb", "calogero", "calogero-printed"]),
                    "coulomb",
                    "interaction model",
                ),
                param("n", Kind::Int, "3", "number of ions"),
                param("d", Kind::Int, "1", "spatial dimension"),
                param("b", Kind::Float, "1", "trap strength"),
                param("ac", Kind::Float, "1", "interaction strength"),
                param("g", Kind::Float, "1", "Calogero coupling"),
                param("starts", Kind::Int, "1", "random starts, seeds seed, seed+1, ..."),
                param("tol", Kind::Float, "1e-10", "residual tolerance"),
                param("maxiter", Kind::Int, "500", "Newton iteration limit"),
            ],
            &["jsonl", "csv"][..],
        ),
        "oracle-check" => (
            vec![
                A,
                QM,
                OMEGA,
                param("nmax", Kind::Int, "3", "highest level"),
                param("periods", Kind::Int, "2", "drive periods"),
                param("steps", Kind::Int, "4096", "split steps per period"),
                MASS,
                HBAR,
                RTOL,
                ATOL,
            ],
            &["jsonl"][..],
        ),
        _ => return None,
    };
    Some(s)
}

fn top_usage() -> String {
    format!(
        "usage: paultrap <subcommand> [--key value]... [--config FILE]\n\nsubcommands: {}\n\
         run `paultrap <subcommand> --help` for its keys\n",
        SUBCOMMANDS.join(", ")
    )
}

/// What a subcommand produced: the primary data plus an optional side file.
struct Artifacts {
    primary: Vec<u8>,
    secondary: Option<(&'static str, Vec<u8>)>,
}

enum Failure {
    Usage(UsageError),
    Domain(Error),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e)
    }
}

/// Runs one subcommand; `args` excludes the program name. Returns the exit code.
pub fn run(args: &[String]) -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

/// [`run`] with explicit streams.
pub fn run_with(args: &[String], stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let Some(sub) = args.first() else {
        let _ = write!(stderr, "{}", top_usage());
        return 2;
    };
    if sub == "--help" || sub == "help" {
        let _ = write!(stdout, "{}", top_usage());
        return 0;
    }
    let Some((params, formats)) = spec(sub) else {
        let _ = write!(stderr, "error: unknown subcommand `{sub}`\n\n{}", top_usage());
        return 2;
    };
    if args[1..].iter().any(|a| a == "--help") {
        let _ = write!(stdout, "{}", config::grammar(sub, &params, formats));
        return 0;
    }
    let cfg = match resolve(sub, &args[1..], &params, formats, |p| std::fs::read_to_string(p)) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(stderr, "{e}");
            return 2;
        }
    };
    let threads = match std::env::var("PAULTRAP_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Some(n),
            _ => {
                let _ = writeln!(stderr, "error: PAULTRAP_THREADS must be a positive integer, got `{v}`");
                return 2;
            }
        },
        Err(_) => None,
    };
    let outcome = match threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| compute(cfg)),
            Err(e) => Err(Failure::Io(format!("cannot start worker pool: {e}"))),
        },
        None => compute(cfg),
    }
    .and_then(|(cfg, artifacts)| emit(&cfg, artifacts, threads, stdout, stderr));
    match outcome {
        Ok(()) => 0,
        Err(Failure::Usage(e)) => {
            let _ = writeln!(stderr, "{e}");
            2
        }
        Err(Failure::Domain(e)) => {
            let _ = writeln!(stderr, "error: {e}");
            1
        }
        Err(Failure::Io(e)) => {
            let _ = writeln!(stderr, "error: {e}");
            1
        }
    }
}

fn compute(mut cfg: RunConfig) -> Result<(RunConfig, Artifacts), Failure> {
    if cfg.subcommand == "stability" && cfg.out.is_none() {
        let (params, formats) = spec("stability").expect("known subcommand");
        return Err(Failure::Usage(UsageError {
            message: "`stability` writes a CSV table and a PGM raster and needs `--out`".into(),
            grammar: config::grammar("stability", &params, formats),
        }));
    }
    let artifacts = match cfg.subcommand.as_str() {
        "stability" => stability(&cfg)?,
        "floquet" => floquet(&cfg)?,
        "wavefunction" => wavefunction(&mut cfg)?,
        "overlap" => overlap(&mut cfg)?,
        "propagate" => propagate(&cfg)?,
        "crystal" => crystal(&cfg)?,
        "oracle-check" => oracle_check(&cfg)?,
        other => unreachable!("unhandled subcommand {other}"),
    };
    Ok((cfg, artifacts))
}

fn emit(
    cfg: &RunConfig,
    artifacts: Artifacts,
    threads: Option<usize>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<(), Failure> {
    let mut outputs = Vec::new();
    match &cfg.out {
        Some(path) => {
            write_file(path, &artifacts.primary)?;
            outputs.push(path.clone());
            if let Some((ext, bytes)) = &artifacts.secondary {
                let side = path.with_extension(ext);
                write_file(&side, bytes)?;
                outputs.push(side);
            }
            let manifest = manifest(cfg, threads, &outputs);
            write_file(&manifest_path(path), manifest.as_bytes())?;
        }
        None => {
            stdout.write_all(&artifacts.primary).map_err(|e| Failure::Io(e.to_string()))?;
            let manifest = manifest(cfg, threads, &outputs);
            stderr.write_all(manifest.as_bytes()).map_err(|e| Failure::Io(e.to_string()))?;
        }
    }
    Ok(())
}

/// `<out>.manifest.json` next to the data file.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))
}

fn manifest(cfg: &RunConfig, threads: Option<usize>, outputs: &[PathBuf]) -> String {
    // serde_json maps are ordered by key
    let value = serde_json::json!({
        "subcommand": cfg.subcommand,
        "parameters": cfg.params,
        "format": cfg.format,
        "seed": cfg.seed,
        "out": cfg.out.as_ref().map(|p| p.display().to_string()),
        "outputs": outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "config_file": cfg.config_file.as_ref().map(|p| p.display().to_string()),
        "threads": threads,
        "version": env!("CARGO_PKG_VERSION"),
    });
    let mut s = serde_json::to_string_pretty(&value).expect("manifest serializes");
    s.push('\n');
    s
}

fn tolerance(cfg: &RunConfig) -> Tolerance {
    Tolerance::new(cfg.float("rtol"), cfg.float("atol"))
}

fn hill(cfg: &RunConfig) -> Result<HillParameters, Error> {
    HillParameters::quadrupole(cfg.float("a"), cfg.float("qm"), cfg.float("omega"))
}

fn line(s: String) -> Vec<u8> {
    let mut b = s.into_bytes();
    b.push(b'\n');
    b
}

fn stability(cfg: &RunConfig) -> Result<Artifacts, Failure> {
    let grid = stability_scan(cfg.range("a"), cfg.range("qm"), cfg.float("omega"), tolerance(cfg))?;
    let mut csv = Vec::new();
    grid.write_csv(&mut csv).map_err(|e| Failure::Io(e.to_string()))?;
    let mut pgm = Vec::new();
    grid.write_pgm(&mut pgm).map_err(|e| Failure::Io(e.to_string()))?;
    Ok(if cfg.format == "pgm" {
        Artifacts {
            primary: pgm,
            secondary: Some(("csv", csv)),
        }
    } else {
        Artifacts {
            primary: csv,
            secondary: Some(("pgm", pgm)),
        }
    })
}

fn floquet(cfg: &RunConfig) -> Result<Artifacts, Failure> {
    let r = monodromy(&hill(cfg)?, tolerance(cfg))?;
    Ok(Artifacts {
        primary: line(serde_json::to_string(&r).expect("result serializes")),
        secondary: None,
    })
}

// Context on [0, max(t, T)] with ω from the Floquet solution, and the sampling grid.
fn state_setup(cfg: &mut RunConfig, n_max: usize) -> Result<(OscillatorContext, Grid, HillParameters), Failure> {
    let params = hill(cfg)?;
    let tol = tolerance(cfg);
    let t = cfg.float("t");
    if t < 0.0 {
        return Err(Error::InvalidParameter(format!("t must be non-negative, got {t}")).into());
    }
    let omega = monodromy(&params, tol)?.floquet_omega()?;
    let ctx = OscillatorContext::integrate(
        &params,
        omega,
        cfg.float("mass"),
        cfg.float("hbar"),
        t.max(params.period()),
        tol,
    )?;
    let points = cfg.int("points");
    let mut half_width = cfg.float("halfwidth");
    if half_width == 0.0 {
        half_width = ctx.default_grid()?.half_width;
        // Hermite functions reach √(2n+1) widths; widen only for very high levels
        half_width *= (((2 * n_max + 1) as f64).sqrt() / 12.0).max(1.0);
        cfg.params.insert("halfwidth".into(), format!("{half_width:e}"));
    }
    let grid = Grid::new(points, half_width)?;
    Ok((ctx, grid, params))
}

fn wavefunction(cfg: &mut RunConfig) -> Result<Artifacts, Failure> {
    let n = cfg.int("n");
    let (ctx, grid, _) = state_setup(cfg, n)?;
    let sample = sample_state(n, cfg.float("t"), &ctx, &grid)?;
    let primary = if cfg.format == "csv" {
        let mut b = Vec::new();
        sample.write_csv(&mut b).map_err(|e| Failure::Io(e.to_string()))?;
        b
    } else {
        line(sample.jsonl_record())
    };
    Ok(Artifacts {
        primary,
        secondary: None,
    })
}

fn overlap(cfg: &mut RunConfig) -> Result<Artifacts, Failure> {
    let n_max = cfg.int("nmax");
    let (ctx, grid, params) = state_setup(cfg, n_max)?;
    let floquet = monodromy(&params, tolerance(cfg))?;
    let pseudo = pseudopotential_states(n_max, &floquet, ctx.mass, ctx.hbar, &grid)?;
    let t = cfg.float("t");
    let values = (0..=n_max)
        .map(|n| overlap_fn(n, t, &ctx, &pseudo))
        .collect::<Result<Vec<Complex64>, _>>()?;
    let mut b = Vec::new();
    if cfg.format == "csv" {
        b.extend_from_slice(b"n,re,im,abs\n");
        for (n, f) in values.iter().enumerate() {
            b.extend(line(format!("{n},{:.17e},{:.17e},{:.17e}", f.re, f.im, f.norm())));
        }
    } else {
        for (n, f) in values.iter().enumerate() {
            let rec = serde_json::json!({"n": n, "t": t, "re": f.re, "im": f.im, "abs": f.norm()});
            b.extend(line(rec.to_string()));
        }
    }
    Ok(Artifacts {
        primary: b,
        secondary: None,
    })
}

fn propagate(cfg: &RunConfig) -> Result<Artifacts, Failure> {
    let mass = cfg.float("mass");
    let potential: Box<dyn PotentialModel> = match cfg.text("potential") {
        "paul" => Box::new(PaulTrapPotential { params: hill(cfg)?, mass }),
        "harmonic" => Box::new(QuadraticPotential::harmonic(mass, cfg.float("w"))),
        _ => Box::new(AnharmonicPotential {
            mass,
            omega: cfg.float("w"),
            lambda: cfg.float("lambda"),
        }),
    };
    let state0 = PacketState::gaussian(
        vec![cfg.float("q0")],
        vec![cfg.float("p0")],
        &[cfg.float("freq")],
        vec![cfg.int("k")],
        mass,
        cfg.float("hbar"),
    )?;
    let t_end = cfg.float("tend");
    if !(t_end > 0.0) {
        return Err(Error::InvalidParameter(format!("tend must be positive, got {t_end}")).into());
    }
    let samples = cfg.int("samples").max(2);
    let traj = propagate_packet(potential.as_ref(), &state0, t_end, tolerance(cfg), cfg.float("bound"))?;
    let mut b = Vec::new();
    if cfg.format == "csv" {
        b.extend_from_slice(b"t,q,p,S\n");
    }
    for i in 0..samples {
        let t = t_end * i as f64 / (samples - 1) as f64;
        let st = traj.state(t);
        if cfg.format == "csv" {
            b.extend(line(format!("{:.17e},{:.17e},{:.17e},{:.17e}", st.t, st.q[0], st.p[0], st.s)));
        } else {
            b.extend(line(trace_record(&st)?));
        }
    }
    Ok(Artifacts {
        primary: b,
        secondary: None,
    })
}

fn configuration_output(c: &CrystalConfiguration, format: &str) -> Result<Vec<u8>, Failure> {
    if format == "csv" {
        if c.d != 1 {
            return Err(Error::InvalidParameter("csv output is for 1D chains; use --format jsonl".into()).into());
        }
        let mut b = Vec::new();
        c.write_csv_line(&mut b).map_err(|e| Failure::Io(e.to_string()))?;
        Ok(b)
    } else {
        Ok(line(c.to_json()))
    }
}

fn crystal(cfg: &RunConfig) -> Result<Artifacts, Failure> {
    let (n, d, b, a_c) = (cfg.int("n"), cfg.int("d"), cfg.float("b"), cfg.float("ac"));
    let model = cfg.text("model");
    if model != "coulomb" {
        if d != 1 {
            return Err(Error::InvalidParameter(format!("the Calogero model is one-dimensional, got d = {d}")).into());
        }
        let form = if model == "calogero" {
            CalogeroForm::InverseSquare
        } else {
            CalogeroForm::Printed
        };
        let params = CrystalParameters::calogero(n, b, a_c, cfg.float("g"), form)?;
        let eq = calogero_equilibrium(&params)?;
        if !eq.consistent {
            return Err(Error::InvalidParameter(format!(
                "Hermite-zero configuration is not an equilibrium of the {model} form (residual {:e})",
                eq.configuration.residual
            ))
            .into());
        }
        let primary = if cfg.format == "csv" {
            configuration_output(&eq.configuration, "csv")?
        } else {
            let rec = serde_json::json!({
                "configuration": eq.configuration,
                "xi": eq.xi,
                "kappa": eq.kappa,
            });
            line(rec.to_string())
        };
        return Ok(Artifacts {
            primary,
            secondary: None,
        });
    }
    let params = CrystalParameters::coulomb(n, d, b, a_c)?;
    let opts = SolverOptions {
        tol: cfg.float("tol"),
        max_iterations: cfg.int("maxiter"),
    };
    let starts = cfg.int("starts").max(1);
    let best = if starts == 1 {
        let mut c = solve_equilibrium(&params, &random_init(&params, cfg.seed), opts)?;
        c.seed = Some(cfg.seed);
        c
    } else {
        let mut first_err = None;
        let mut best: Option<CrystalConfiguration> = None;
        for r in multi_start(&params, cfg.seed, starts, opts) {
            match r {
                Ok(c) => {
                    if best.as_ref().map_or(true, |b| c.energy < b.energy) {
                        best = Some(c);
                    }
                }
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        match best {
            Some(c) => c,
            None => return Err(first_err.expect("at least one start").into()),
        }
    };
    Ok(Artifacts {
        primary: configuration_output(&best, &cfg.format)?,
        secondary: None,
    })
}

fn oracle_check(cfg: &RunConfig) -> Result<Artifacts, Failure> {
    let opts = OracleOptions {
        mass: cfg.float("mass"),
        hbar: cfg.float("hbar"),
        ..OracleOptions::default()
    };
    let report = check_quasienergy_states(
        &hill(cfg)?,
        cfg.int("nmax"),
        cfg.int("periods"),
        cfg.int("steps"),
        &opts,
        tolerance(cfg),
    )?;
    Ok(Artifacts {
        primary: line(serde_json::to_string(&report).expect("report serializes")),
        secondary: None,
    })
}
