use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use qkdlink::csvfmt::sig6;
use qkdlink::run::{budget, run, sync_experiment, write_outputs};
use qkdlink::scenario::{load_scenario, Mode};

#[derive(Parser)]
#[command(name = "qkdlink", version, about = "Satellite QKD down-link simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Analytic,
    Mc,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a pass and write profile, slice and summary files.
    Simulate {
        scenario: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        symbols_per_slice: Option<u64>,
    },
    /// Print the classical-channel and randomness budgets.
    Budget { scenario: PathBuf },
    /// Run the clock-recovery experiment.
    SyncTest { scenario: PathBuf },
}

fn main() -> ExitCode {
    match real_main(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn real_main(cli: Cli) -> qkdlink::Result<ExitCode> {
    match cli.command {
        Command::Simulate {
            scenario,
            mode,
            seed,
            out,
            symbols_per_slice,
        } => {
            let mut sc = load_scenario(&scenario)?;
            if let Some(m) = mode {
                sc.mode = match m {
                    ModeArg::Analytic => Mode::Analytic,
                    ModeArg::Mc => Mode::MonteCarlo,
                };
            }
            if seed.is_some() {
                sc.seed = seed;
            }
            if let Some(n) = symbols_per_slice {
                sc.symbols_per_slice = n;
            }
            let dir = out
                .or_else(|| sc.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("out").join(&sc.name));
            let output = run(&sc)?;
            write_outputs(&output, &dir)?;
            let t = &output.summary.totals;
            println!(
                "{}: {} slices, {} secret bits, mean QBER {}, outputs in {}",
                sc.name,
                output.summary.slices.len(),
                sig6(t.secret_bits),
                sig6(t.mean_qber),
                dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Budget { scenario } => {
            let sc = load_scenario(&scenario)?;
            let b = budget(&sc)?;
            println!("min_loss_db: {}", sig6(b.min_loss_db));
            println!("peak_det_rate_hz: {}", sig6(b.peak_det_rate_hz));
            println!("sift_uplink_mbps: {}", sig6(b.classical.sift_uplink_mbps));
            println!("sift_downlink_mbps: {}", sig6(b.classical.sift_downlink_mbps));
            println!("classical_total_mbps: {}", sig6(b.classical.total_mbps));
            println!("classical_capacity_mbps: {}", sig6(b.classical.capacity_mbps));
            println!("classical_feasible: {}", b.classical.feasible);
            println!("pass_duration_s: {}", sig6(b.randomness.pass_duration_s));
            println!("random_bits_per_symbol: {}", sig6(b.randomness.bits_per_symbol));
            println!("random_bits_per_pass: {}", sig6(b.randomness.pass_bits));
            println!("random_bytes_per_pass: {}", sig6(b.randomness.buffer_bytes));
            println!("qrng_fill_time_s: {}", sig6(b.randomness.fill_time_s));
            println!("buffer_sufficient: {}", b.buffer_sufficient);
            Ok(ExitCode::SUCCESS)
        }
        Command::SyncTest { scenario } => {
            let sc = load_scenario(&scenario)?;
            let trials = sync_experiment(&sc)?;
            let tol = sc.protocol.pulse_width_ps as f64 / 2.0;
            println!("trial,seed,offset_ps,drift_ppm,confidence,max_error_ps,ok");
            for (i, t) in trials.iter().enumerate() {
                match &t.estimate {
                    Some(e) => println!(
                        "{i},{},{},{},{},{},{}",
                        t.seed,
                        sig6(e.offset_ps),
                        sig6(e.drift * 1e6),
                        sig6(e.confidence),
                        sig6(t.max_error_ps),
                        t.within(tol)
                    ),
                    None => println!("{i},{},,,,,false  # {}", t.seed, t.error.as_deref().unwrap_or("")),
                }
            }
            let ok = trials.iter().filter(|t| t.within(tol)).count();
            println!("# {ok}/{} trials within {} ps", trials.len(), sig6(tol));
            Ok(if ok == trials.len() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            })
        }
    }
}
