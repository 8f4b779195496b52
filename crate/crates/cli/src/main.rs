use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use decoupling_cli::{commands, CliError, Exit, Overrides, ProblemFile};

#[derive(Parser)]
#[command(
    name = "dfld",
    version,
    about = "Decoupling-field solver for coupled forward-backward SDEs"
)]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "DFLD_THREADS")]
    threads: Option<usize>,
    /// Override the contraction margin.
    #[arg(long, global = true)]
    margin: Option<f64>,
    /// Multiply every axis resolution (counts become (count-1)*k+1).
    #[arg(long, global = true, default_value_t = 1)]
    grid_scale: usize,
    /// Multiply the number of time slices.
    #[arg(long, global = true, default_value_t = 1)]
    step_scale: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check the declared constants against the existence hypotheses.
    Check { file: PathBuf },
    /// Print the contraction constant and the admissible step.
    Stepsize { file: PathBuf },
    /// Build the field and write a snapshot plus `<out>.log`.
    Solve {
        file: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the left end of the maximal interval.
    Maxinterval { file: PathBuf },
    /// Simulate paths through a built field and export them as CSV.
    Simulate {
        file: PathBuf,
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Run the residual, control, sensitivity and refinement checks.
    Verify {
        file: PathBuf,
        #[arg(long)]
        field: Option<PathBuf>,
    },
}

impl Cmd {
    fn file(&self) -> &PathBuf {
        match self {
            Cmd::Check { file }
            | Cmd::Stepsize { file }
            | Cmd::Solve { file, .. }
            | Cmd::Maxinterval { file }
            | Cmd::Simulate { file, .. }
            | Cmd::Verify { file, .. } => file,
        }
    }
}

fn run(cli: &Cli, out: &mut impl Write) -> Result<Exit, CliError> {
    if cli.grid_scale == 0 || cli.step_scale == 0 {
        return Err(CliError::Usage("scales must be at least 1".into()));
    }
    let file = ProblemFile::load(cli.cmd.file())?;
    let o = Overrides {
        margin: cli.margin,
        grid_scale: cli.grid_scale,
        step_scale: cli.step_scale,
    };
    match &cli.cmd {
        Cmd::Check { .. } => commands::check(&file, out),
        Cmd::Stepsize { .. } => commands::stepsize(&file, &o, out),
        Cmd::Solve { out: path, .. } => commands::solve(&file, &o, path, out),
        Cmd::Maxinterval { .. } => commands::maxinterval(&file, &o, out),
        Cmd::Simulate { field, csv, .. } => commands::simulate(&file, field, csv, out),
        Cmd::Verify { field, .. } => commands::verify(&file, &o, field.as_deref(), out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(Exit::Usage.code() as u8);
        }
    };
    let stdout = std::io::stdout();
    let exit = pool.install(|| {
        let mut out = stdout.lock();
        match run(&cli, &mut out) {
            Ok(exit) => exit,
            Err(e) => {
                let _ = out.flush();
                eprintln!("error: {e}");
                e.exit()
            }
        }
    });
    ExitCode::from(exit.code() as u8)
}
