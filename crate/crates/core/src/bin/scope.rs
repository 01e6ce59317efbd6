use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use pulsectl::eventbus::DEFAULT_PORT;
use pulsectl::scope::{self, Format, ScopeError};
use pulsectl::shottree::{ShotStore, TreeError};

#[derive(Parser)]
#[command(name = "scope", about = "List, export and watch shot waveforms")]
struct Cli {
    /// Store root directory.
    #[arg(long, global = true, default_value = "store")]
    store: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fmt {
    Csv,
    Svg,
}

impl From<Fmt> for Format {
    fn from(f: Fmt) -> Self {
        match f {
            Fmt::Csv => Format::Csv,
            Fmt::Svg => Format::Svg,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Print node paths of a shot matching a pattern.
    List {
        #[arg(long)]
        shot: u32,
        #[arg(long, default_value = "**")]
        pattern: String,
    },
    /// Write 1 to 64 signals of a shot as CSV files or one SVG grid.
    Export {
        #[arg(long)]
        shot: u32,
        #[arg(long = "path", required = true, num_args = 1..)]
        paths: Vec<String>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Fmt,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Export the given signals of every shot that completes, until interrupted.
    Watch {
        #[arg(long, default_value_t = format!("127.0.0.1:{DEFAULT_PORT}"))]
        broker: String,
        #[arg(long = "path", required = true, num_args = 1..)]
        paths: Vec<String>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Fmt,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn open_store(cli: &Cli) -> Result<ShotStore, ScopeError> {
    ShotStore::open(&cli.store).map_err(|e| match e {
        TreeError::Io { path, source } => ScopeError::Io { path, source },
        other => ScopeError::Store(other),
    })
}

fn run(cli: Cli) -> Result<(), ScopeError> {
    let store = open_store(&cli)?;
    match cli.cmd {
        Cmd::List { shot, pattern } => {
            for p in scope::list(&store, shot, &pattern)? {
                println!("{p}");
            }
        }
        Cmd::Export {
            shot,
            paths,
            format,
            out,
        } => {
            let panels = scope::panels_from_paths(&paths)?;
            for f in scope::export(&store, shot, &panels, format.into(), &out)? {
                println!("{}", f.display());
            }
        }
        Cmd::Watch {
            broker,
            paths,
            format,
            out,
        } => {
            let panels = scope::panels_from_paths(&paths)?;
            let stop = Arc::new(AtomicBool::new(false));
            let s = stop.clone();
            if let Err(e) = ctrlc::set_handler(move || s.store(true, Ordering::SeqCst)) {
                log::warn!("cannot install interrupt handler: {e}");
            }
            let n = scope::watch(&store, &broker, &panels, format.into(), &out, &stop, |set| {
                for f in &set.files {
                    println!("{}", f.display());
                }
            })?;
            log::info!("watch stopped after {n} export sets");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("scope: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
