//! `mafo` command line: run scenarios, certify closed-loop stability, dump
//! sensitivities and list the built-in presets.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mafo_core::config::ScenarioBundle;
use mafo_core::sim::{run, summary, System};
use mafo_core::stability::{build_certificate, CertificateInputs, VderChannel};
use mafo_core::{presets, Error};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_CERTIFICATE_FAILS: i32 = 2;
pub const EXIT_GAINS_EXCEED_BOUND: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

const EXIT_CODES: &str = "\
Exit codes:
  0  success (for `certify`: M + M^T is positive definite and the configured gains satisfy the bound)
  1  invalid input: unreadable or malformed file, unknown key, bad override, bad arguments
  2  `certify`: M + M^T is not positive definite
  3  `certify`: certificate holds but the configured gains exceed the admissible bound
  4  power flow or controller diverged; outputs up to the failure are still written";

#[derive(Debug, Parser)]
#[command(name = "mafo", version, about = "Hierarchical multi-area feedback optimization of distribution feeders")]
#[command(after_help = EXIT_CODES)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scenario; writes timeseries.csv and summary.txt.
    #[command(after_help = EXIT_CODES)]
    Run(ScenarioArgs),
    /// Build the closed-loop stability certificate; writes certificate.txt and certificate.json.
    #[command(after_help = EXIT_CODES)]
    Certify(ScenarioArgs),
    /// Dump per-area sensitivity matrices and offsets as JSON (sensitivities.json).
    #[command(after_help = EXIT_CODES)]
    Linearize(ScenarioArgs),
    /// List built-in presets, or export their files.
    Presets {
        /// Write every embedded preset file into this directory.
        #[arg(long, value_name = "DIR")]
        export: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    /// Scenario file, or the name of a built-in preset.
    #[arg(short, long, value_name = "FILE|PRESET")]
    pub scenario: String,
    /// Output directory (created if missing).
    #[arg(short, long, value_name = "DIR", default_value = "mafo-out")]
    pub out: PathBuf,
    /// Override a scenario key, e.g. `controller.alpha=0.003` or `plant="linear"`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Do not echo the report to stdout.
    #[arg(short, long)]
    pub quiet: bool,
}

/// Parses `args` (program name first) and runs the command, writing
/// diagnostics to `err`. Returns the process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return EXIT_INPUT;
            }
            let _ = write!(out, "{}", e.render());
            return EXIT_OK;
        }
    };
    match execute(&cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. } | Error::SimulationAborted { .. } | Error::Numerical(_) | Error::Singular(_) | Error::Linearization { .. } => {
            EXIT_DIVERGED
        }
        _ => EXIT_INPUT,
    }
}

fn execute(command: &Command, out: &mut dyn Write) -> mafo_core::Result<i32> {
    match command {
        Command::Run(a) => cmd_run(a, out),
        Command::Certify(a) => cmd_certify(a, out),
        Command::Linearize(a) => cmd_linearize(a, out),
        Command::Presets { export } => cmd_presets(export.as_deref(), out),
    }
}

fn write_file(path: &Path, contents: &str) -> mafo_core::Result<()> {
    fs::write(path, contents).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn prepare(args: &ScenarioArgs) -> mafo_core::Result<ScenarioBundle> {
    let bundle = ScenarioBundle::load(&args.scenario, &args.overrides)?;
    fs::create_dir_all(&args.out).map_err(|source| Error::Io { path: args.out.clone(), source })?;
    Ok(bundle)
}

pub fn cmd_run(args: &ScenarioArgs, out: &mut dyn Write) -> mafo_core::Result<i32> {
    let bundle = prepare(args)?;
    let system = System::build(&bundle)?;
    let log = run(&system, &bundle.scenario)?;
    log.write_csv(&args.out.join("timeseries.csv"))?;
    let text = summary(&system, &bundle, &log)?;
    write_file(&args.out.join("summary.txt"), &text)?;
    if !args.quiet {
        let _ = write!(out, "{text}");
    }
    Ok(if log.aborted.is_some() { EXIT_DIVERGED } else { EXIT_OK })
}

pub fn cmd_certify(args: &ScenarioArgs, out: &mut dyn Write) -> mafo_core::Result<i32> {
    let bundle = prepare(args)?;
    let system = System::build(&bundle)?;
    let inputs = CertificateInputs::from_system(&system, VderChannel::Injection, (0.0, 0.0))?;
    let report = build_certificate(&inputs)?;
    let text = report.to_string();
    write_file(&args.out.join("certificate.txt"), &text)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Numerical(format!("certificate JSON: {e}")))?;
    write_file(&args.out.join("certificate.json"), &json)?;
    if !args.quiet {
        let _ = write!(out, "{text}");
    }
    Ok(if !report.pass {
        EXIT_CERTIFICATE_FAILS
    } else if !report.gains_admissible {
        EXIT_GAINS_EXCEED_BOUND
    } else {
        EXIT_OK
    })
}

pub fn cmd_linearize(args: &ScenarioArgs, out: &mut dyn Write) -> mafo_core::Result<i32> {
    let bundle = prepare(args)?;
    let system = System::build(&bundle)?;
    let dump = system.sensitivity_dump();
    let path = args.out.join("sensitivities.json");
    let json = serde_json::to_string_pretty(&dump).map_err(|e| Error::Numerical(format!("sensitivity JSON: {e}")))?;
    write_file(&path, &json)?;
    if !args.quiet {
        for a in &dump.areas {
            let _ = writeln!(
                out,
                "{}: {} columns, {} interface phases, {} voltages, {} currents",
                a.id,
                a.columns.len(),
                a.interface_phases,
                a.monitored_voltages,
                a.monitored_currents
            );
        }
        let _ = writeln!(out, "wrote {}", path.display());
    }
    Ok(EXIT_OK)
}

pub fn cmd_presets(export: Option<&Path>, out: &mut dyn Write) -> mafo_core::Result<i32> {
    match export {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
            for (name, text) in presets::files() {
                write_file(&dir.join(name), text)?;
                let _ = writeln!(out, "{}", dir.join(name).display());
            }
        }
        None => {
            for (name, description) in presets::list() {
                let _ = writeln!(out, "{name:<28} {description}");
            }
        }
    }
    Ok(EXIT_OK)
}
