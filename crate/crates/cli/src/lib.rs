//! The `cpr` command line: `synth`, `train`, `finetune`, `eval` and
//! `gradcheck`.
//!
//! Exit codes are part of the interface:
//!
//! | code | meaning |
//! |---|---|
//! | 0 | success |
//! | 2 | bad input or configuration |
//! | 3 | numerical failure |
//! | 4 | fine-tuning diverged |
//! | 5 | gradient check failed |
//!
//! Lines starting with `# time:` carry wall-clock timings and are the only
//! output that varies between identical runs.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use clap::{Arg, ArgAction, Command};
use cpr::cascade::{evaluate, prepare_samples};
use cpr::gradcheck::{self, GradcheckConfig};
use cpr::{Error, GradientFault};

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;
pub const EXIT_GRADCHECK: i32 = 5;

/// A failed command: exit code plus message.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Numerical(_) => EXIT_NUMERICAL,
            Error::Divergence { .. } => EXIT_DIVERGED,
            Error::Dimension(_) | Error::Format { .. } | Error::Config(_) | Error::Io { .. } => {
                EXIT_INPUT
            }
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::input(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn command() -> Command {
    let mut keys: Vec<Arg> = config::KEYS
        .iter()
        .map(|(k, help)| {
            Arg::new(*k)
                .long(k.replace('_', "-"))
                .value_name("VALUE")
                .help(*help)
                .action(ArgAction::Set)
        })
        .collect();
    keys.push(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key = value configuration file; flags take precedence"),
    );
    let sub = |name: &'static str, about: &'static str| {
        Command::new(name).about(about).args(keys.clone())
    };
    Command::new("cpr")
        .about("Cascaded pose regression: greedy training and end-to-end fine-tuning")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(sub("synth", "generate a synthetic dataset"))
        .subcommand(sub("train", "fit a cascade greedily, stage by stage"))
        .subcommand(sub(
            "finetune",
            "tune all stages jointly by backpropagation",
        ))
        .subcommand(sub("eval", "evaluate a model from the mean pose"))
        .subcommand(
            sub(
                "gradcheck",
                "compare analytic gradients with finite differences",
            )
            .arg(
                Arg::new("inject_fault")
                    .long("inject-fault")
                    .value_name("FAULT")
                    .hide(true),
            ),
        )
}

/// Parses `args` (including the program name), runs the command, and
/// returns the process exit code. Normal output goes to `out`, diagnostics
/// to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return EXIT_INPUT;
            }
            let _ = write!(out, "{}", e.render());
            return EXIT_OK;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");

    let mut cfg = RunConfig::default();
    if let Some(path) = sub.get_one::<String>("config") {
        if let Err(e) = cfg.apply_file(Path::new(path)) {
            let _ = writeln!(err, "error: {e}");
            return EXIT_INPUT;
        }
    }
    for (key, _) in config::KEYS {
        if let Some(v) = sub.get_one::<String>(key) {
            if let Err(e) = cfg.apply(key, v) {
                let _ = writeln!(err, "error: {e}");
                return EXIT_INPUT;
            }
        }
    }
    let fault = match sub
        .try_get_one::<String>("inject_fault")
        .ok()
        .flatten()
        .map(String::as_str)
    {
        None => None,
        Some("negate-db") => Some(GradientFault::NegateBias),
        Some(other) => {
            let _ = writeln!(err, "error: unknown fault {other:?}");
            return EXIT_INPUT;
        }
    };

    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "error: cannot start worker pool: {e}");
            return EXIT_INPUT;
        }
    };
    let started = Instant::now();
    // The sink need not be Send, so commands write into a buffer inside the pool.
    let mut buf = Vec::new();
    let result = pool.install(|| match name {
        "synth" => cmd_synth(&cfg, &mut buf),
        "train" => cmd_train(&cfg, &mut buf),
        "finetune" => cmd_finetune(&cfg, &mut buf),
        "eval" => cmd_eval(&cfg, &mut buf),
        "gradcheck" => cmd_gradcheck(&cfg, fault, &mut buf),
        _ => unreachable!("clap only accepts known subcommands"),
    });
    let _ = out.write_all(&buf);
    match result {
        Ok(()) => {
            let _ = writeln!(out, "# time: {:.3}s", started.elapsed().as_secs_f64());
            EXIT_OK
        }
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn real(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn cmd_synth(cfg: &RunConfig, out: &mut dyn Write) -> CmdResult {
    let dir = cfg.require(&cfg.out, "out").map_err(Failure::input)?;
    let ds = cpr::gen_synthetic(&cfg.synth, cfg.pose_model()?)?;
    cpr::save_dataset(&ds, dir)?;
    writeln!(
        out,
        "wrote {} {} samples (seed {}) to {}",
        ds.len(),
        ds.pose.kind.name(),
        cfg.synth.seed,
        dir.display()
    )?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> CmdResult {
    let data = cfg.require(&cfg.data, "data").map_err(Failure::input)?;
    let model_out = cfg.require(&cfg.out, "out").map_err(Failure::input)?;
    let ds = cpr::load_dataset(data)?;
    let (model, report) = cpr::train_greedy_with_report(&ds, &cfg.train_config())?;
    cpr::save_model(&model, model_out)?;
    writeln!(out, "stage mean_sq_pose_error mean_normalized_error")?;
    for (t, (mse, nme)) in report.stage_mse.iter().zip(&report.stage_nme).enumerate() {
        writeln!(out, "{t} {} {}", real(*mse), real(*nme))?;
    }
    writeln!(
        out,
        "final_mean_normalized_error {}",
        real(*report.stage_nme.last().expect("at least one entry"))
    )?;
    writeln!(
        out,
        "wrote model with {} stages to {}",
        model.num_stages(),
        model_out.display()
    )?;
    Ok(())
}

pub fn cmd_finetune(cfg: &RunConfig, out: &mut dyn Write) -> CmdResult {
    let data = cfg.require(&cfg.data, "data").map_err(Failure::input)?;
    let model_in = cfg.require(&cfg.model, "model").map_err(Failure::input)?;
    let model_out = cfg.require(&cfg.out, "out").map_err(Failure::input)?;
    let history_path = cfg
        .require(&cfg.history, "history")
        .map_err(Failure::input)?;
    let model = cpr::load_model(model_in)?;
    let ds = cpr::load_dataset(data)?;
    let outcome = cpr::finetune_bp(&model, &ds, &cfg.train_config())?;
    cpr::save_model(&outcome.model, model_out)?;

    let mut csv = String::from("epoch,mean_train_loss\n");
    for (e, loss) in outcome.history.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", e + 1, real(*loss)));
    }
    fs::write(history_path, csv).map_err(|e| Error::Io {
        path: history_path.to_path_buf(),
        source: e,
    })?;

    writeln!(
        out,
        "initial_mean_train_loss {}",
        real(outcome.initial_loss)
    )?;
    for (e, loss) in outcome.history.iter().enumerate() {
        writeln!(out, "epoch {} mean_train_loss {}", e + 1, real(*loss))?;
    }
    writeln!(out, "wrote tuned model to {}", model_out.display())?;
    Ok(())
}

/// Mean, median and fraction below 0.1 of a set of errors.
pub fn summarize(errors: &[f64]) -> (f64, f64, f64) {
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let median = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    };
    let below = errors.iter().filter(|&&e| e < 0.1).count() as f64 / n;
    (mean, median, below)
}

pub fn cmd_eval(cfg: &RunConfig, out: &mut dyn Write) -> CmdResult {
    let data = cfg.require(&cfg.data, "data").map_err(Failure::input)?;
    let model_in = cfg.require(&cfg.model, "model").map_err(Failure::input)?;
    let metrics = cfg
        .require(&cfg.metrics, "metrics")
        .map_err(Failure::input)?;
    let model = cpr::load_model(model_in)?;
    let ds = cpr::load_dataset(data)?;
    if ds.pose.kind != model.pose.kind {
        return Err(Failure::input(format!(
            "model regresses {} poses (d={}) but dataset holds {} poses (d={})",
            model.pose.kind.name(),
            model.dim(),
            ds.pose.kind.name(),
            ds.pose.dim()
        )));
    }
    let samples = prepare_samples(&ds, &model.spec)?;
    let errors = evaluate(&model, &samples)?;
    let mut csv = String::from("sample_index,normalized_error\n");
    for (i, e) in errors.iter().enumerate() {
        csv.push_str(&format!("{i},{}\n", real(*e)));
    }
    fs::write(metrics, csv).map_err(|e| Error::Io {
        path: metrics.to_path_buf(),
        source: e,
    })?;
    let (mean, median, below) = summarize(&errors);
    writeln!(out, "samples {}", errors.len())?;
    writeln!(out, "mean_normalized_error {}", real(mean))?;
    writeln!(out, "median_normalized_error {}", real(median))?;
    writeln!(out, "fraction_below_0.1 {}", real(below))?;
    Ok(())
}

pub fn cmd_gradcheck(
    cfg: &RunConfig,
    fault: Option<GradientFault>,
    out: &mut dyn Write,
) -> CmdResult {
    let gc = GradcheckConfig {
        draws: cfg.draws,
        seed: cfg.train.seed,
        fault,
        ..Default::default()
    };
    let report = gradcheck::run(&gc)?;
    writeln!(out, "draws {} rejected {}", report.draws, report.rejected)?;
    for b in &report.blocks {
        writeln!(
            out,
            "block {:<3} entries {:>5} worst_rel_err {:.6e} worst_abs_err {:.6e} {}",
            b.name,
            b.entries,
            b.worst_rel_err,
            b.worst_abs_err,
            if b.passed() { "ok" } else { "FAIL" }
        )?;
    }
    if report.passed() {
        writeln!(out, "gradient check passed (rel tol {:e})", gc.rel_tol)?;
        Ok(())
    } else {
        let failing: Vec<String> = report
            .failing()
            .map(|b| {
                format!(
                    "{} (worst rel err {:.3e}, {} bad entries)",
                    b.name, b.worst_rel_err, b.failures
                )
            })
            .collect();
        Err(Failure {
            code: EXIT_GRADCHECK,
            message: format!("gradient check failed for {}", failing.join(", ")),
        })
    }
}
