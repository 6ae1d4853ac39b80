use std::path::PathBuf;
use std::process::ExitCode;

use cced_cli::config::EnvMode;
use cced_cli::pipeline::{DetectorSummary, EvalSummary, RunSummary, SignalSummary, TrainSummary};
use cced_cli::{CampaignConfig, CliError, Pipeline};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cced", version, about = "Concurrent classifier error detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON campaign config; omitted fields take their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Campaign seed (overrides `seed`)
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for campaigns and forest training
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Env {
    None,
    Transient,
    TransientSdc,
    Always,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or load) the main model and report held-out accuracy
    TrainMain(Common),
    /// Run the fault campaign and write the signal splits
    BuildSignals(Common),
    /// Train the random forest detector
    TrainDetector(Common),
    /// Calibrate per budget and write the detection reports
    Evaluate(Common),
    /// Stream inputs through the detect-and-rerun protocol
    Run {
        #[command(flatten)]
        common: Common,
        /// Fault environment (overrides `run.env`)
        #[arg(long, value_enum)]
        env: Option<Env>,
        /// Number of inputs (overrides `run.inputs`)
        #[arg(long)]
        inputs: Option<usize>,
        /// Calibrated detector file (overrides `run.detector`)
        #[arg(long)]
        detector: Option<PathBuf>,
    },
    /// All five stages in order
    Pipeline(Common),
}

fn setup(common: &Common) -> Result<Pipeline, CliError> {
    let mut cfg = match &common.config {
        Some(path) => CampaignConfig::load(path)?,
        None => CampaignConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::config("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(format!("--threads: {e}")))?;
    }
    Pipeline::new(cfg)
}

fn print_train(s: &TrainSummary) {
    println!(
        "main model {:?} ({}, {} params): held-out accuracy {:.4} on {} inputs (train {:.4})",
        s.layer_dims, s.mode, s.param_count, s.accuracy, s.holdout_size, s.train_accuracy
    );
}

fn print_signals(s: &SignalSummary) {
    let st = &s.stats;
    println!(
        "signals: {} per class, split {:?}; flips attempted {} = masked {} + sdc {} + degenerate {}",
        s.n_per_class, s.split_sizes, st.flips_attempted, st.flips_masked, st.flips_sdc, st.flips_degenerate
    );
}

fn print_detector(s: &DetectorSummary) {
    println!(
        "detector: {} trees, max depth {}, {} nodes on {} samples; mean training score clean {:.4}, error {:.4}",
        s.tree_count, s.max_depth, s.node_count, s.train_samples, s.mean_clean_score, s.mean_error_score
    );
}

fn print_eval(s: &EvalSummary) {
    let e = &s.evaluation;
    let row = &e.validation_calibrated;
    println!(
        "{}: default detection {:.1}% (re-comp {:.1}%)",
        e.label,
        row.default_detection * 100.0,
        row.default_recomp * 100.0
    );
    for p in &row.detection_at {
        println!(
            "  budget {:>5.1}%: detection {:.1}%, re-comp on test {:.1}%, threshold {:.4}",
            p.budget * 100.0,
            p.detection * 100.0,
            p.recomputation * 100.0,
            p.threshold
        );
    }
    println!(
        "timing: main {:.4} ms, detector {:.5} ms, ratio {:.1}x",
        s.timing.main_ms, s.timing.detector_ms, s.timing.ratio
    );
}

fn print_run(s: &RunSummary) {
    let d = &s.dispositions;
    println!(
        "run ({:?}, threshold {:.4}): {} inputs, mean inferences {:.4}, first flagged {}, first wrong {}, final == clean {}; accepted {}, corrected {}, persistent {}",
        s.env,
        s.threshold,
        s.inputs,
        s.mean_inferences,
        s.first_flagged,
        s.first_wrong,
        s.final_matches_clean,
        d.accepted_first,
        d.corrected_by_rerun,
        d.persistent_flag_ignored
    );
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::TrainMain(c) => print_train(&setup(&c)?.train_main()?),
        Command::BuildSignals(c) => print_signals(&setup(&c)?.build_signals()?),
        Command::TrainDetector(c) => print_detector(&setup(&c)?.train_detector()?),
        Command::Evaluate(c) => print_eval(&setup(&c)?.evaluate()?),
        Command::Run {
            common,
            env,
            inputs,
            detector,
        } => {
            let mut p = setup(&common)?;
            if let Some(env) = env {
                p.cfg.run.env = match env {
                    Env::None => EnvMode::None,
                    Env::Transient => EnvMode::Transient,
                    Env::TransientSdc => EnvMode::TransientSdc,
                    Env::Always => EnvMode::Always,
                };
            }
            if let Some(n) = inputs {
                p.cfg.run.inputs = n;
            }
            if detector.is_some() {
                p.cfg.run.detector = detector;
            }
            print_run(&p.run()?);
        }
        Command::Pipeline(c) => {
            let p = setup(&c)?;
            print_train(&p.train_main()?);
            print_signals(&p.build_signals()?);
            print_detector(&p.train_detector()?);
            print_eval(&p.evaluate()?);
            print_run(&p.run()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
