//! `trajlab`: generate or ingest activation traces, run the probe, geometry,
//! predictor and steering analyses, and reproduce the acceptance suite.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use commands::Output;
use settings::{Overrides, Settings};
use trajlab::acceptance::{run_suite, SuiteConfig};
use trajlab::report::write_json;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_ACCEPTANCE: u8 = 4;

#[derive(Parser)]
#[command(
    name = "trajlab",
    version,
    about = "Trajectory analysis of reasoning-step activations",
    long_about = "Trajectory analysis of reasoning-step activations.\n\n\
        Settings come from a `key = value` file (--config) with --set overrides. \
        The seed resolves as --seed, then $TRAJLAB_SEED, then the `seed` key, then 42. \
        Every command writes resolved_config.txt beside its outputs.\n\n\
        Exit codes: 0 success, 2 configuration error, 3 data validation or analysis error, \
        4 acceptance failure."
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Plain-text `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Report format: csv or json.
    #[arg(long, global = true)]
    format: Option<String>,
    /// Smaller corpora (500 examples).
    #[arg(long, global = true)]
    quick: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    #[command(long_about = "Generate a synthetic corpus from the harness.\n\n\
        Writes corpus.rtrc (binary trace file) and manifest.json with \
        trace_file, bytes, n_examples, correctness counts, step_count_histogram, \
        corpus_seed, meta and the harness parameters. The same seed gives a \
        byte-identical trace file.\n\n\
        Keys: harness.*, simulate.n_examples (2000), simulate.corpus_seed.")]
    Simulate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Layer-wise linear probes for step identity.
    #[command(long_about = "Layer-wise linear probes for step identity.\n\n\
        probe_grid: target, layer, accuracy, n_pos, n_neg, converged, note \
        (one row per cell; empty cells carry the reason in note).\n\
        probe_shuffle (when probe.shuffle_repeats > 0): target, layer, repeats, \
        mean_accuracy, std_accuracy.\n\n\
        Keys: probe.targets (auto), probe.layers (all), probe.seed, probe.c, \
        probe.test_fraction, probe.balance_classes, probe.negatives, probe.shuffle_repeats.")]
    Probe {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Between-step distances with bootstrap confidence intervals.
    #[command(
        long_about = "Between-step distances of correct vs incorrect runs.\n\n\
        divergence: transition, metric, layer, split, mean_correct, mean_incorrect, \
        delta_ic, delta_lower95, delta_upper95, correct_lower95, correct_upper95, \
        incorrect_lower95, incorrect_upper95, significant, n_correct, n_incorrect, \
        excluded_missing, excluded_unknown, n_resamples, seed.\n\
        pca_points: example_id, boundary, correctness, x, y.\n\n\
        Keys: geometry.transitions (auto), geometry.metrics, geometry.layers (top), \
        geometry.resamples, geometry.seed, geometry.points."
    )]
    Geometry {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Correctness predictors from trajectory features.
    #[command(long_about = "Correctness predictors from trajectory features.\n\n\
        predictor: feature, layer, seed, test_auc, selected_c, n_features, n_train, \
        n_test, excluded_missing, excluded_unknown.\n\
        predictor_cv: feature, layer, seed, c, cv_auc, selected.\n\
        predictor_summary.json: best layer per feature and the length-balanced audit.\n\n\
        Keys: predict.features, predict.layers (top), predict.seeds, predict.pca_r, \
        predict.c_grid, predict.cv_folds, predict.test_fraction, predict.max_iter, \
        predict.tol, predict.length_audit.")]
    Predict {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Steering directions, ideal trajectories and policy experiments.
    Steer {
        #[command(subcommand)]
        action: SteerAction,
    },
    /// Run the acceptance suite and print one line per criterion.
    #[command(
        long_about = "Run the acceptance suite and print one line per criterion.\n\n\
        Exits 4 when any criterion fails. With --out, writes reproduce.json \
        (seed, quick, per-criterion outcome, total_secs)."
    )]
    Reproduce {
        /// Criteria to run (default: all).
        #[arg(long, value_delimiter = ',')]
        only: Vec<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum SteerAction {
    /// Build an additive step-to-term direction sidecar (direction.rsdr).
    #[command(
        long_about = "Build an additive step-to-term direction from a corpus.\n\n\
        Writes direction.rsdr. Keys: steer.aggregation (per_prompt or pooled)."
    )]
    Direction {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit and calibrate an ideal trajectory sidecar (ideal.ridt).
    #[command(
        long_about = "Fit an ideal trajectory on correct runs and calibrate its \
        deviation thresholds on a held-out corpus.\n\n\
        Writes ideal.ridt and thresholds.json. Keys: steer.r, steer.r_steer, \
        steer.min_per_step, steer.layer, steer.lambda, steer.tie_tolerance."
    )]
    Ideal {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        heldout: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reasoning-length sweep over steering strengths.
    #[command(
        long_about = "Reasoning-length sweep over steering strengths in the harness.\n\n\
        length_sweep: alpha, n_episodes, mean_steps, accuracy, loop_ratio, step_cap_ratio.\n\n\
        Keys: harness.*, steer.alphas, steer.layer_set, steer.apply_at, \
        steer.n_episodes, steer.episode_seed."
    )]
    Length {
        #[arg(long)]
        direction: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trajectory-gated correction in the harness.
    #[command(
        long_about = "Trajectory-gated correction in the harness, paired with \
        unsteered baselines.\n\n\
        policy_outcome: arm, n_total, n_flagged, accuracy_baseline, accuracy_policy, \
        accuracy_delta, corrected, reverted, preservation_rate, preservation_rate_flagged.\n\
        policy_pairs: one row per episode.\n\n\
        Keys: harness.*, steer.alpha_corr, steer.mode, steer.n_episodes, \
        steer.episode_seed, steer.long_min_steps, steer.short_max_steps."
    )]
    Gated {
        #[arg(long)]
        ideal: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score externally produced steered/unsteered outcome pairs.
    #[command(
        long_about = "Score externally produced outcome pairs against a corpus.\n\n\
        The outcome CSV has example_id, baseline_correct, policy_correct. \
        With --ideal the trajectory gate decides which examples are flagged.\n\
        policy_outcome has the same columns as for `steer gated`.\n\n\
        Keys: steer.mode."
    )]
    Outcomes {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        outcomes: PathBuf,
        #[arg(long)]
        ideal: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
struct AcceptanceFailed(Vec<u32>);

impl std::fmt::Display for AcceptanceFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "acceptance criteria failed: {:?}", self.0)
    }
}

impl std::error::Error for AcceptanceFailed {}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let overrides = Overrides {
        seed: g.seed,
        format: g.format.clone(),
        quick: g.quick,
        sets: g.sets.clone(),
    };
    let s = Settings::load(g.config.as_deref(), &overrides)?;
    if let Some(n) = g.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }

    match &cli.command {
        Command::Simulate { out } => {
            commands::simulate(&s, &Output::create(out, &s)?).context("simulate")
        }
        Command::Probe { traces, out } => {
            commands::probe(&s, traces, &Output::create(out, &s)?).context("probe")
        }
        Command::Geometry { traces, out } => {
            commands::geometry(&s, traces, &Output::create(out, &s)?).context("geometry")
        }
        Command::Predict { traces, out } => {
            commands::predict(&s, traces, &Output::create(out, &s)?).context("predict")
        }
        Command::Steer { action } => steer(&s, action).context("steer"),
        Command::Reproduce { only, out } => reproduce(&s, g.quick, only, out.as_deref()),
    }
}

fn steer(s: &Settings, action: &SteerAction) -> Result<()> {
    match action {
        SteerAction::Direction { traces, out } => {
            commands::steer_direction(s, traces, &Output::create(out, s)?)
        }
        SteerAction::Ideal {
            traces,
            heldout,
            out,
        } => commands::steer_ideal(s, traces, heldout, &Output::create(out, s)?),
        SteerAction::Length { direction, out } => {
            commands::steer_length(s, direction, &Output::create(out, s)?)
        }
        SteerAction::Gated { ideal, out } => {
            commands::steer_gated(s, ideal, &Output::create(out, s)?)
        }
        SteerAction::Outcomes {
            traces,
            outcomes,
            ideal,
            out,
        } => commands::steer_outcomes(
            s,
            traces,
            outcomes,
            ideal.as_deref(),
            &Output::create(out, s)?,
        ),
    }
}

fn reproduce(s: &Settings, quick: bool, only: &[u32], out: Option<&std::path::Path>) -> Result<()> {
    let cfg = SuiteConfig {
        seed: s.seed,
        quick,
    };
    println!(
        "acceptance suite, seed {}{}",
        cfg.seed,
        if quick { ", quick" } else { "" }
    );
    let report = run_suite(&cfg, only, |o| println!("{}", o.line())).context("reproduce")?;
    println!(
        "{}/{} criteria passed in {:.1} s",
        report.outcomes.iter().filter(|o| o.passed).count(),
        report.outcomes.len(),
        report.total_secs
    );
    if let Some(dir) = out {
        let o = Output::create(dir, s)?;
        write_json(&o.path("reproduce.json"), &report)?;
    }
    if report.all_passed() {
        Ok(())
    } else {
        Err(AcceptanceFailed(report.failed()).into())
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<AcceptanceFailed>().is_some() {
        return EXIT_ACCEPTANCE;
    }
    match err
        .chain()
        .find_map(|e| e.downcast_ref::<trajlab::error::Error>())
    {
        Some(trajlab::error::Error::Config { .. }) => EXIT_CONFIG,
        Some(_) => EXIT_DATA,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
