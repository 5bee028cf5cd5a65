use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fastlane_core::harness::report::{emit_report, Format, Report};
use fastlane_core::harness::suite::{run_suite, SuiteConfig};
use fastlane_core::harness::{run_relay, run_stress, RelayConfig, StressConfig};
use fastlane_core::transport::TimingProfile;

#[derive(Parser)]
#[command(name = "fastlane", version, about = "Relay and stress experiments on a simulated dual-stack ISO 11783 network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Three-node token-ring relay A -> B -> C -> A.
    Relay(RelayArgs),
    /// Two nodes sending fixed-rate frames to each other.
    Stress(StressArgs),
    /// The full matrix, from a config file or the built-in defaults.
    Suite(SuiteArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Table,
    Records,
}

impl From<OutputFormat> for Format {
    fn from(f: OutputFormat) -> Self {
        match f {
            OutputFormat::Table => Format::Table,
            OutputFormat::Records => Format::Records,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Standard,
    Accelerated,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    On,
    Off,
    /// Run CAN-only and FastLane and report the pair.
    Both,
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// One-way datagram latency in microseconds.
    #[arg(long, default_value_t = 50)]
    latency_us: u64,
    /// Receive buffer per socket in bytes.
    #[arg(long, default_value_t = 1 << 20)]
    rx_buffer: usize,
    #[arg(long, value_enum, default_value_t = Profile::Standard)]
    profile: Profile,
    #[arg(long, value_enum, default_value_t = OutputFormat::Table)]
    format: OutputFormat,
}

impl Common {
    fn profile(&self) -> TimingProfile {
        match self.profile {
            Profile::Standard => TimingProfile::Standard,
            Profile::Accelerated => TimingProfile::Accelerated,
        }
    }
}

#[derive(Args)]
struct RelayArgs {
    /// Payload size in bytes.
    #[arg(long, default_value_t = 1785)]
    payload: usize,
    /// CTS packet count granted by receivers.
    #[arg(long, default_value_t = 128, value_parser = clap::value_parser!(u8).range(1..))]
    cts: u8,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u32).range(1..))]
    rounds: u32,
    #[arg(long, value_enum, default_value_t = Mode::Both)]
    fastlane: Mode,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct StressArgs {
    /// Frames per 5 ms tick per node.
    #[arg(long, conflicts_with = "rate", value_parser = clap::value_parser!(u32).range(1..))]
    per_tick: Option<u32>,
    /// Messages per second per node (a multiple of 200).
    #[arg(long)]
    rate: Option<u64>,
    #[arg(long, default_value_t = 10_000)]
    duration_ms: u64,
    #[arg(long, default_value_t = 500)]
    grace_ms: u64,
    #[arg(long, value_enum, default_value_t = Mode::On)]
    fastlane: Mode,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SuiteArgs {
    /// TOML suite file; the built-in matrix when omitted.
    #[arg(long)]
    config: Option<String>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Table)]
    format: OutputFormat,
}

fn modes(m: Mode) -> &'static [bool] {
    match m {
        Mode::On => &[true],
        Mode::Off => &[false],
        Mode::Both => &[false, true],
    }
}

fn relay(args: RelayArgs) -> ExitCode {
    let c = &args.common;
    let mut report = Report { seed: c.seed, ..Default::default() };
    let runs: Vec<_> = modes(args.fastlane)
        .iter()
        .map(|&fastlane| {
            run_relay(&RelayConfig {
                payload_size: args.payload,
                cts_packet_count: args.cts,
                fastlane,
                rounds: args.rounds,
                seed: c.seed,
                latency_us: c.latency_us,
                rx_buffer_bytes: c.rx_buffer,
                profile: c.profile(),
            })
        })
        .collect();
    let pass = runs.iter().all(|r| r.pass);
    if let [can, fastlane] = &runs[..] {
        report.relay.push(fastlane_core::harness::report::RelayPair { can: can.clone(), fastlane: fastlane.clone() });
    } else {
        report.relay_single = runs;
    }
    print!("{}", emit_report(&report, c.format.into()));
    if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn stress(args: StressArgs) -> ExitCode {
    let per_tick = match (args.per_tick, args.rate) {
        (Some(n), _) => n,
        (None, Some(rate)) if rate >= 200 && rate % 200 == 0 => (rate / 200) as u32,
        (None, Some(rate)) => {
            eprintln!("error: --rate {rate} is not a positive multiple of 200");
            return ExitCode::from(2);
        }
        (None, None) => 10,
    };
    let c = &args.common;
    let mut report = Report { seed: c.seed, ..Default::default() };
    for &fastlane in modes(args.fastlane) {
        report.stress.push(run_stress(&StressConfig {
            frames_per_tick: per_tick,
            duration_ms: args.duration_ms,
            grace_ms: args.grace_ms,
            fastlane,
            seed: c.seed,
            latency_us: c.latency_us,
            rx_buffer_bytes: c.rx_buffer,
            profile: c.profile(),
        }));
    }
    print!("{}", emit_report(&report, c.format.into()));
    if report.stress.iter().all(|s| s.pass) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn suite(args: SuiteArgs) -> ExitCode {
    let config = match &args.config {
        Some(path) => match SuiteConfig::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        None => SuiteConfig::default(),
    };
    let result = run_suite(&config);
    print!("{}", result.render(args.format.into()));
    if result.pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Relay(a) => relay(a),
        Command::Stress(a) => stress(a),
        Command::Suite(a) => suite(a),
    }
}
