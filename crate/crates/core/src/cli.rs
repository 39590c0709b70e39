//! The `uwbnet` command line: run scenarios, validate them, build secrecy
//! maps and print superframe layouts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::network::{parse_config, schedule_for, ConfigError, ScenarioConfig, Simulation};
use crate::secrecy::{build_map, map_from_samples, SecrecyMap};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "uwbnet", version, about = "Secure UWB mesh network simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the simulated duration, seconds.
    #[arg(long, global = true)]
    pub duration: Option<f64>,
    /// Directory for output files (default: current directory).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Suppress the summary on stdout.
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Worker threads for secrecy maps.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scenario and write trace, metrics and any secrecy map.
    Run { config: PathBuf },
    /// Check a scenario without running it.
    Validate { config: PathBuf },
    /// Build only the secrecy map of a scenario.
    SecrecyMap {
        config: PathBuf,
        /// Per-cell SNR samples (`cell,snr_bob_db,snr_eve_db`) replacing the model.
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Print the superframe slot layout.
    ScheduleDump { config: PathBuf },
}

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

struct Io<'a> {
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
    quiet: bool,
}

impl Io<'_> {
    fn say(&mut self, msg: std::fmt::Arguments) {
        if !self.quiet {
            let _ = writeln!(self.out, "{msg}");
        }
    }

    fn fail(&mut self, code: i32, msg: std::fmt::Arguments) -> i32 {
        let _ = writeln!(self.err, "uwbnet: {msg}");
        code
    }
}

fn load(path: &Path, common: &Common) -> Result<ScenarioConfig, (i32, String)> {
    let text = fs::read_to_string(path).map_err(|e| (EXIT_CONFIG, format!("{}: {e}", path.display())))?;
    let mut cfg = parse_config(&text).map_err(|e| (EXIT_CONFIG, format!("{}: {e}", path.display())))?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = common.duration {
        cfg.duration_s = d;
    }
    Ok(cfg)
}

fn config_failure(io: &mut Io, path: &Path, e: &ConfigError) -> i32 {
    match e {
        ConfigError::Invalid(v) => {
            for msg in v {
                let _ = writeln!(io.err, "{}: {msg}", path.display());
            }
            io.fail(EXIT_CONFIG, format_args!("{} violation(s)", v.len()))
        }
        other => io.fail(EXIT_CONFIG, format_args!("{}: {other}", path.display())),
    }
}

fn out_path(common: &Common, name: &str) -> PathBuf {
    match &common.out_dir {
        Some(d) => d.join(name),
        None => PathBuf::from(name),
    }
}

fn write_map(io: &mut Io, common: &Common, cfg: &ScenarioConfig, map: &SecrecyMap) -> i32 {
    let csv = out_path(common, &cfg.outputs.map_csv);
    let pgm = out_path(common, &cfg.outputs.map_pgm);
    if let Err(e) = write_atomic(&csv, map.to_csv().as_bytes()).and_then(|_| write_atomic(&pgm, &map.to_pgm())) {
        return io.fail(EXIT_IO, format_args!("writing secrecy map: {e}"));
    }
    io.say(format_args!("secrecy map {}x{} -> {}, {}", map.nx, map.ny, csv.display(), pgm.display()));
    EXIT_OK
}

fn cmd_run(io: &mut Io, common: &Common, path: &Path) -> i32 {
    let cfg = match load(path, common) {
        Ok(c) => c,
        Err((code, msg)) => return io.fail(code, format_args!("{msg}")),
    };
    let sim = match Simulation::new(cfg.clone()) {
        Ok(s) => s,
        Err(e) => return config_failure(io, path, &e),
    };
    let out = sim.run();
    let trace_path = out_path(common, &cfg.outputs.trace);
    let metrics_path = out_path(common, &cfg.outputs.metrics);
    if cfg.trace {
        if let Err(e) = write_atomic(&trace_path, out.trace.as_bytes()) {
            return io.fail(EXIT_IO, format_args!("writing {}: {e}", trace_path.display()));
        }
    }
    if let Err(e) = write_atomic(&metrics_path, out.metrics.to_json().as_bytes()) {
        return io.fail(EXIT_IO, format_args!("writing {}: {e}", metrics_path.display()));
    }
    if let Some(e) = out.error {
        return io.fail(EXIT_RUNTIME, format_args!("{e}; partial trace in {}", trace_path.display()));
    }
    let m = &out.metrics;
    io.say(format_args!(
        "{}: {} superframes, delivery ratio {:.4} ({}/{}), ranging {} ok / {} invalid, rms error {:.4} m, attack detections {}, policy denials {}",
        if cfg.name.is_empty() { "scenario" } else { &cfg.name },
        m.superframes,
        m.delivery_ratio,
        m.datagrams_delivered,
        m.datagrams_sent,
        m.ranging.completed,
        m.ranging.invalidated,
        m.ranging.error_m.rms,
        m.attack_detections,
        m.policy_denials.values().sum::<u64>(),
    ));
    if let Some(scen) = &cfg.secrecy {
        let map = match build_map(scen, &cfg.propagation, cfg.seed, common.jobs) {
            Ok(m) => m,
            Err(e) => return io.fail(EXIT_CONFIG, format_args!("secrecy: {e}")),
        };
        return write_map(io, common, &cfg, &map);
    }
    EXIT_OK
}

fn cmd_validate(io: &mut Io, common: &Common, path: &Path) -> i32 {
    let cfg = match load(path, common) {
        Ok(c) => c,
        Err((code, msg)) => return io.fail(code, format_args!("{msg}")),
    };
    match cfg.validate() {
        Ok(()) => {
            io.say(format_args!("{}: ok", path.display()));
            EXIT_OK
        }
        Err(e) => config_failure(io, path, &e),
    }
}

fn cmd_secrecy(io: &mut Io, common: &Common, path: &Path, samples: Option<&Path>) -> i32 {
    let cfg = match load(path, common) {
        Ok(c) => c,
        Err((code, msg)) => return io.fail(code, format_args!("{msg}")),
    };
    let Some(scen) = &cfg.secrecy else {
        return io.fail(EXIT_CONFIG, format_args!("{}: no `secrecy` section", path.display()));
    };
    let map = match samples {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| format!("{}: {e}", p.display()))
            .and_then(|csv| map_from_samples(&csv, scen).map_err(|e| e.to_string())),
        None => build_map(scen, &cfg.propagation, cfg.seed, common.jobs).map_err(|e| e.to_string()),
    };
    match map {
        Ok(m) => write_map(io, common, &cfg, &m),
        Err(e) => io.fail(EXIT_CONFIG, format_args!("secrecy: {e}")),
    }
}

fn cmd_schedule(io: &mut Io, common: &Common, path: &Path) -> i32 {
    let cfg = match load(path, common) {
        Ok(c) => c,
        Err((code, msg)) => return io.fail(code, format_args!("{msg}")),
    };
    match schedule_for(&cfg) {
        Ok(s) => {
            let _ = io.out.write_all(s.dump().as_bytes());
            EXIT_OK
        }
        Err(e) => config_failure(io, path, &e),
    }
}

/// Executes a parsed command line; returns the process exit code.
pub fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let common = &cli.common;
    let mut io = Io {
        out,
        err,
        quiet: common.quiet,
    };
    match &cli.command {
        Command::Run { config } => cmd_run(&mut io, common, config),
        Command::Validate { config } => cmd_validate(&mut io, common, config),
        Command::SecrecyMap { config, samples } => cmd_secrecy(&mut io, common, config, samples.as_deref()),
        Command::ScheduleDump { config } => cmd_schedule(&mut io, common, config),
    }
}

pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    execute(&cli, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_parse_before_and_after_subcommand() {
        let c = Cli::try_parse_from(["uwbnet", "--seed", "5", "run", "x.json", "--quiet", "--jobs", "2"]).unwrap();
        assert_eq!(c.common.seed, Some(5));
        assert!(c.common.quiet);
        assert_eq!(c.common.jobs, Some(2));
        assert!(matches!(c.command, Command::Run { .. }));
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = std::env::temp_dir().join(format!("uwbnet-cli-{}", std::process::id()));
        let p = dir.join("m.json");
        write_atomic(&p, b"{}\n").unwrap();
        write_atomic(&p, b"[]\n").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"[]\n");
        let names: Vec<_> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn missing_file_is_a_config_error() {
        let c = Cli::try_parse_from(["uwbnet", "validate", "/nonexistent/none.json"]).unwrap();
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(execute(&c, &mut o, &mut e), EXIT_CONFIG);
        assert!(String::from_utf8(e).unwrap().contains("none.json"));
    }
}
